#include "lce/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <iomanip>
#include <iterator>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "lce/errors.hpp"

namespace lce::metrics {

std::string normalize_answer(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  bool pending_space = false;
  for (char c : text) {
    const unsigned char u = static_cast<unsigned char>(c);
    if (std::isspace(u)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(static_cast<char>(std::tolower(u)));
  }
  return out;
}

std::vector<std::string> whitespace_tokens(std::string_view text) {
  std::vector<std::string> tokens;
  std::string cur;
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!cur.empty()) tokens.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  return tokens;
}

int exact_match(std::string_view pred, std::string_view gold) {
  return normalize_answer(pred) == normalize_answer(gold) ? 1 : 0;
}

double token_f1(const std::vector<std::string>& pred, const std::vector<std::string>& gold) {
  if (pred.empty() && gold.empty()) return 1.0;
  if (pred.empty() || gold.empty()) return 0.0;
  std::map<std::string, long long> bag;
  for (const auto& t : gold) ++bag[t];
  long long overlap = 0;
  for (const auto& t : pred) {
    auto it = bag.find(t);
    if (it != bag.end() && it->second > 0) {
      --it->second;
      ++overlap;
    }
  }
  if (overlap == 0) return 0.0;
  const double p = static_cast<double>(overlap) / static_cast<double>(pred.size());
  const double r = static_cast<double>(overlap) / static_cast<double>(gold.size());
  return 2.0 * p * r / (p + r);
}

std::vector<std::tuple<std::string, int, int>> extract_spans(const std::vector<std::string>& tags) {
  std::vector<std::tuple<std::string, int, int>> spans;
  std::string open_type;
  int open_start = -1;
  auto close = [&](int end) {
    if (open_start >= 0) spans.emplace_back(open_type, open_start, end);
    open_start = -1;
    open_type.clear();
  };
  for (int i = 0; i < static_cast<int>(tags.size()); ++i) {
    const std::string& tag = tags[static_cast<std::size_t>(i)];
    if (tag == "O" || tag.size() < 3 || tag[1] != '-') {
      close(i);
      continue;
    }
    const std::string type = tag.substr(2);
    if (tag[0] == 'B' || open_start < 0 || type != open_type) {
      close(i);
      open_type = type;
      open_start = i;
    }
  }
  close(static_cast<int>(tags.size()));
  return spans;
}

SpanCounts entity_counts(const std::vector<std::string>& pred_tags,
                         const std::vector<std::string>& gold_tags) {
  if (pred_tags.size() != gold_tags.size())
    throw ValueError("entity_counts: sequences have different lengths (" +
                     std::to_string(pred_tags.size()) + " vs " + std::to_string(gold_tags.size()) +
                     ")");
  auto pred = extract_spans(pred_tags);
  auto gold = extract_spans(gold_tags);
  std::sort(pred.begin(), pred.end());
  std::sort(gold.begin(), gold.end());
  std::vector<std::tuple<std::string, int, int>> hit;
  std::set_intersection(pred.begin(), pred.end(), gold.begin(), gold.end(),
                        std::back_inserter(hit));
  SpanCounts c;
  c.tp = static_cast<long long>(hit.size());
  c.fp = static_cast<long long>(pred.size() - hit.size());
  c.fn = static_cast<long long>(gold.size() - hit.size());
  return c;
}

Prf prf_from(const SpanCounts& c) {
  Prf out;
  if (c.tp + c.fp + c.fn == 0) {
    out.precision = out.recall = out.f1 = 1.0;  // nothing predicted, nothing to find
    return out;
  }
  out.precision = c.tp + c.fp == 0 ? 0.0 : static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
  out.recall = c.tp + c.fn == 0 ? 0.0 : static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
  out.f1 = out.precision + out.recall == 0
               ? 0.0
               : 2.0 * out.precision * out.recall / (out.precision + out.recall);
  return out;
}

Prf entity_f1(const std::vector<std::string>& pred_tags,
              const std::vector<std::string>& gold_tags) {
  return prf_from(entity_counts(pred_tags, gold_tags));
}

double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size())
    throw ValueError("roc_auc: scores and labels differ in length");
  const std::size_t n = scores.size();
  long long n_pos = 0;
  for (int l : labels) n_pos += l ? 1 : 0;
  const long long n_neg = static_cast<long long>(n) - n_pos;
  if (n_pos == 0 || n_neg == 0)
    throw ValueError("roc_auc: need at least one positive and one negative label");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&scores](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // average ranks over tie groups, 1-based
  double pos_rank_sum = 0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j + 1);
    for (std::size_t t = i; t <= j; ++t)
      if (labels[order[t]]) pos_rank_sum += avg_rank;
    i = j + 1;
  }
  const double u = pos_rank_sum - 0.5 * static_cast<double>(n_pos) * static_cast<double>(n_pos + 1);
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

WeightedAuc weighted_multilabel_auc(const std::vector<std::vector<double>>& class_scores,
                                    const std::vector<std::vector<int>>& class_labels) {
  if (class_scores.size() != class_labels.size())
    throw ValueError("weighted_multilabel_auc: per-class lists differ in length");
  WeightedAuc out;
  double weighted_sum = 0;
  long long total_support = 0;
  for (std::size_t c = 0; c < class_scores.size(); ++c) {
    const auto& labels = class_labels[c];
    long long pos = 0, neg = 0;
    for (int l : labels) (l ? pos : neg) += 1;
    if (pos == 0 || neg == 0) {
      out.excluded_classes.push_back(static_cast<int>(c));
      continue;
    }
    const double auc = roc_auc(class_scores[c], labels);
    out.included_classes.push_back(static_cast<int>(c));
    weighted_sum += static_cast<double>(pos) * auc;
    total_support += pos;
  }
  if (out.included_classes.empty())
    throw ValueError("weighted_multilabel_auc: no class has both label values");
  out.value = weighted_sum / static_cast<double>(total_support);
  return out;
}

double accuracy(const std::vector<int>& preds, const std::vector<int>& labels) {
  if (preds.size() != labels.size()) throw ValueError("accuracy: length mismatch");
  if (preds.empty()) throw ValueError("accuracy: empty input");
  long long hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hits += preds[i] == labels[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(preds.size());
}

std::string EvalReport::to_json() const {
  nlohmann::json j;
  j["task"] = task;
  j["metrics"] = values;
  j["supports"] = supports;
  j["n_examples"] = n_examples;
  j["predictions_digest"] = predictions_digest;
  return j.dump(2) + "\n";
}

EvalReport EvalReport::from_json(const std::string& text) {
  EvalReport r;
  try {
    const nlohmann::json j = nlohmann::json::parse(text);
    r.task = j.at("task").get<std::string>();
    r.values = j.at("metrics").get<std::map<std::string, double>>();
    r.supports = j.value("supports", std::map<std::string, long long>{});
    r.n_examples = j.value("n_examples", 0LL);
    r.predictions_digest = j.value("predictions_digest", "");
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("eval report: ") + e.what());
  }
  return r;
}

std::string digest(std::string_view payload) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : payload) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

std::string render_table(
    const std::vector<std::string>& metric_names,
    const std::vector<std::pair<std::string, std::map<std::string, double>>>& rows) {
  std::size_t name_width = std::string("model").size();
  for (const auto& [name, _] : rows) name_width = std::max(name_width, name.size());
  std::ostringstream os;
  os << std::left << std::setw(static_cast<int>(name_width) + 2) << "model";
  for (const auto& m : metric_names) os << std::setw(12) << m;
  os << '\n' << std::string(name_width + 2 + 12 * metric_names.size(), '-') << '\n';
  for (const auto& [name, vals] : rows) {
    os << std::left << std::setw(static_cast<int>(name_width) + 2) << name;
    for (const auto& m : metric_names) {
      auto it = vals.find(m);
      if (it == vals.end())
        os << std::setw(12) << "-";
      else {
        std::ostringstream cell;
        cell << std::fixed << std::setprecision(3) << it->second;
        os << std::setw(12) << cell.str();
      }
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace lce::metrics
