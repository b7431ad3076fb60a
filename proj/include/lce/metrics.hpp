#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

namespace lce::metrics {

// Lowercase, trim outer whitespace, collapse inner whitespace runs.
std::string normalize_answer(std::string_view text);
std::vector<std::string> whitespace_tokens(std::string_view text);

// 1 iff the normalized span texts are equal.
int exact_match(std::string_view pred, std::string_view gold);

// Multiset-overlap F1 between token bags.
double token_f1(const std::vector<std::string>& pred, const std::vector<std::string>& gold);

struct SpanCounts {
  long long tp = 0;
  long long fp = 0;
  long long fn = 0;

  SpanCounts& operator+=(const SpanCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
};

struct Prf {
  double precision = 0;
  double recall = 0;
  double f1 = 0;
};

// Typed spans as (type, start, end) with end exclusive. An I-X without a
// preceding B-X/I-X of the same type opens a new span.
std::vector<std::tuple<std::string, int, int>> extract_spans(const std::vector<std::string>& tags);

SpanCounts entity_counts(const std::vector<std::string>& pred_tags,
                         const std::vector<std::string>& gold_tags);
Prf prf_from(const SpanCounts& counts);
Prf entity_f1(const std::vector<std::string>& pred_tags, const std::vector<std::string>& gold_tags);

// Mann-Whitney AUC: (concordant + 0.5 * tied) / (n_pos * n_neg).
double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels);

struct WeightedAuc {
  double value = 0;
  std::vector<int> included_classes;
  std::vector<int> excluded_classes;  // classes missing a label side
};

// Support-weighted (positive-count) average of per-class AUCs.
WeightedAuc weighted_multilabel_auc(const std::vector<std::vector<double>>& class_scores,
                                    const std::vector<std::vector<int>>& class_labels);

double accuracy(const std::vector<int>& preds, const std::vector<int>& labels);

// Per-task metric bundle.
struct EvalReport {
  std::string task;
  std::map<std::string, double> values;
  std::map<std::string, long long> supports;
  long long n_examples = 0;
  std::string predictions_digest;

  std::string to_json() const;
  static EvalReport from_json(const std::string& text);
};

// FNV-1a digest of an arbitrary prediction dump, for reproducibility checks.
std::string digest(std::string_view payload);

// Plain-text results table: one row per model variant, one column per metric.
std::string render_table(const std::vector<std::string>& metric_names,
                         const std::vector<std::pair<std::string, std::map<std::string, double>>>& rows);

}  // namespace lce::metrics
