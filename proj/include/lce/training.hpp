#pragma once

#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lce/corpus.hpp"
#include "lce/metrics.hpp"
#include "lce/model.hpp"
#include "lce/parallel.hpp"

namespace lce::train {

struct TrainConfig {
  double lr = 3e-5;
  int batch_size = 8;
  int steps = 1000;  // pretraining
  int epochs = 6;    // fine-tuning
  std::uint64_t seed = 17;
  std::vector<double> lr_sweep = {1e-5, 2e-5, 5e-5};
  std::string selection_metric = "auto";
  double masking_rate = 0.15;
  int checkpoint_interval = 0;  // 0: only the final checkpoint
  int max_len = 3072;
  corpus::WindowMode window_mode = corpus::WindowMode::TruncateLong;
  std::string pool = "mean";
  double clip_norm = 1.0;
  int max_answer_len = 30;

  void check() const {
    if (lr <= 0) throw ValueError("train config: learning rate must be > 0");
    if (masking_rate <= 0 || masking_rate >= 1)
      throw ValueError("train config: masking rate must lie in (0,1)");
    if (batch_size < 1 || steps < 0 || epochs < 1)
      throw ValueError("train config: bad batch/step/epoch counts");
    if (lr_sweep.empty()) throw ValueError("train config: empty lr sweep");
    for (double l : lr_sweep)
      if (l <= 0) throw ValueError("train config: lr sweep entries must be > 0");
  }
};

struct StepRecord {
  long long step = 0;
  double loss = 0;
  double lr = 0;
};

struct EpochRecord {
  double lr = 0;
  int epoch = 0;  // 1-based
  std::string split;
  std::string metric;
  double value = 0;
};

struct RunRecord {
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
  std::string selection_metric;
  double selected_lr = 0;
  int selected_epoch = 0;
  double selected_value = 0;
  bool has_selection = false;
  double wall_clock_sec = 0;

  void save_jsonl(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");
    for (const auto& s : steps) {
      nlohmann::json j{{"type", "step"}, {"step", s.step}, {"loss", s.loss}, {"lr", s.lr}};
      out << j.dump() << '\n';
    }
    for (const auto& e : epochs) {
      nlohmann::json j{{"type", "epoch_eval"}, {"lr", e.lr},         {"epoch", e.epoch},
                       {"split", e.split},     {"metric", e.metric}, {"value", e.value}};
      out << j.dump() << '\n';
    }
    if (has_selection) {
      nlohmann::json j{{"type", "selected"},
                       {"lr", selected_lr},
                       {"epoch", selected_epoch},
                       {"metric", selection_metric},
                       {"value", selected_value}};
      out << j.dump() << '\n';
    }
    nlohmann::json j{{"type", "wall_clock"}, {"seconds", wall_clock_sec}};
    out << j.dump() << '\n';
  }
};

// ---------------------------------------------------------------------------
// Adam (constant lr, global-norm clipping, bias correction).
// ---------------------------------------------------------------------------

template <typename Scalar>
class Adam {
 public:
  Adam(double lr, double clip_norm) : lr_(lr), clip_norm_(clip_norm) {}

  void attach(const nn::ParamStore<Scalar>& params) {
    m_.clear();
    v_.clear();
    for (const auto& e : params.entries) {
      m_.emplace_back(e.values->size(), Scalar(0));
      v_.emplace_back(e.values->size(), Scalar(0));
    }
    t_ = 0;
  }

  // Restores moments exported by a previous run (bitwise resume).
  void restore(const nn::ParamStore<Scalar>& params, const nn::ParamStore<Scalar>& opt_state,
               long long step) {
    attach(params);
    t_ = step;
    for (std::size_t i = 0; i < params.entries.size(); ++i) {
      const auto& name = params.entries[i].name;
      if (opt_state.has("adam.m." + name) &&
          opt_state.at("adam.m." + name).values->size() == m_[i].size())
        m_[i] = *opt_state.at("adam.m." + name).values;
      if (opt_state.has("adam.v." + name) &&
          opt_state.at("adam.v." + name).values->size() == v_[i].size())
        v_[i] = *opt_state.at("adam.v." + name).values;
    }
  }

  void export_state(const nn::ParamStore<Scalar>& params, nn::ParamStore<Scalar>& out) const {
    for (std::size_t i = 0; i < params.entries.size(); ++i) {
      const auto& e = params.entries[i];
      out.add("adam.m." + e.name, e.shape, m_[i]);
      out.add("adam.v." + e.name, e.shape, v_[i]);
    }
  }

  // Clips the gradient to clip_norm, applies one update, returns the
  // pre-clip gradient norm.
  double step(nn::ParamStore<Scalar>& params) {
    if (m_.size() != params.entries.size()) throw ValueError("adam: not attached");
    double sq = 0;
    for (const auto& e : params.entries)
      for (Scalar g : *e.grad) sq += static_cast<double>(g) * static_cast<double>(g);
    const double norm = std::sqrt(sq);
    const Scalar scale_g =
        norm > clip_norm_ ? static_cast<Scalar>(clip_norm_ / norm) : Scalar(1);
    ++t_;
    const Scalar b1 = Scalar(0.9), b2 = Scalar(0.999), eps = Scalar(1e-8);
    const Scalar bc1 = Scalar(1) - static_cast<Scalar>(std::pow(0.9, static_cast<double>(t_)));
    const Scalar bc2 = Scalar(1) - static_cast<Scalar>(std::pow(0.999, static_cast<double>(t_)));
    const Scalar lr = static_cast<Scalar>(lr_);
    for (std::size_t i = 0; i < params.entries.size(); ++i) {
      auto& values = *params.entries[i].values;
      auto& grads = *params.entries[i].grad;
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < values.size(); ++j) {
        const Scalar g = grads[j] * scale_g;
        m[j] = b1 * m[j] + (Scalar(1) - b1) * g;
        v[j] = b2 * v[j] + (Scalar(1) - b2) * g * g;
        const Scalar mhat = m[j] / bc1;
        const Scalar vhat = v[j] / bc2;
        values[j] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
    }
    return norm;
  }

  long long steps_taken() const { return t_; }

 private:
  double lr_;
  double clip_norm_;
  long long t_ = 0;
  std::vector<std::vector<Scalar>> m_, v_;
};

// ---------------------------------------------------------------------------
// MLM corruption.
// ---------------------------------------------------------------------------

struct MlmInstance {
  std::vector<int> corrupted;
  std::vector<int> labels;  // original ids at selected positions, ignore elsewhere
};

// Selects ceil(rate * maskable) non-special positions; 80% become MASK, 10% a
// random vocab id, 10% stay. Returns nullopt when nothing is maskable.
inline std::optional<MlmInstance> mask_for_mlm(const std::vector<int>& ids, double rate,
                                               int vocab_size, Rng& rng) {
  std::vector<std::size_t> maskable;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] == bpe::kMask)
      throw ValueError("mask_for_mlm: input already contains the MASK token");
    if (!bpe::BpeModel::is_special(ids[i])) maskable.push_back(i);
  }
  if (maskable.empty()) return std::nullopt;
  const std::size_t k = static_cast<std::size_t>(
      std::ceil(rate * static_cast<double>(maskable.size())));
  for (std::size_t d = 0; d < k; ++d) {
    const std::size_t pick = d + rng.uniform_int(maskable.size() - d);
    std::swap(maskable[d], maskable[pick]);
  }
  std::vector<std::size_t> selected(maskable.begin(), maskable.begin() + static_cast<std::ptrdiff_t>(k));
  std::sort(selected.begin(), selected.end());

  MlmInstance out;
  out.corrupted = ids;
  out.labels.assign(ids.size(), corpus::kIgnoreLabel);
  for (std::size_t pos : selected) {
    out.labels[pos] = ids[pos];
    const double u = rng.uniform();
    if (u < 0.8)
      out.corrupted[pos] = bpe::kMask;
    else if (u < 0.9)
      out.corrupted[pos] = bpe::kByteBase + static_cast<int>(rng.uniform_int(
                               static_cast<std::uint64_t>(vocab_size - bpe::kByteBase)));
    // else: keep the original token
  }
  return out;
}

// ---------------------------------------------------------------------------
// Loss composition per task.
// ---------------------------------------------------------------------------

// Binary cross-entropy over per-class logits, composed from the 2-way
// softmax loss on [logit, 0] rows.
template <typename Scalar>
Tensor<Scalar> multilabel_bce(Tape<Scalar>& tape, const Tensor<Scalar>& logits,
                              const std::vector<int>& positive_classes, int num_classes) {
  const Index c = static_cast<Index>(num_classes);
  auto col = reshape(logits, {c, 1});
  auto zeros = tape.constant({c, 1}, std::vector<Scalar>(static_cast<std::size_t>(c), Scalar(0)));
  auto two = concatenate<Scalar>({col, zeros}, 1);  // [C, 2]
  std::vector<int> targets(static_cast<std::size_t>(c), 1);
  for (int p : positive_classes) targets[static_cast<std::size_t>(p)] = 0;
  return cross_entropy(two, targets);
}

inline std::vector<int> multilabel_indicator(const std::vector<int>& positive_classes,
                                             int num_classes) {
  std::vector<int> ind(static_cast<std::size_t>(num_classes), 0);
  for (int p : positive_classes) ind[static_cast<std::size_t>(p)] = 1;
  return ind;
}

// ---------------------------------------------------------------------------
// Task dataset: windows per split, ready for training and evaluation.
// ---------------------------------------------------------------------------

struct TaskDataset {
  corpus::TaskKind task = corpus::TaskKind::DocCls;
  corpus::LabelSpace labels;
  std::map<std::string, std::vector<corpus::EncodedWindow>> splits;

  const std::vector<corpus::EncodedWindow>& split(const std::string& name) const {
    auto it = splits.find(name);
    if (it == splits.end()) throw ValueError("dataset has no '" + name + "' split");
    return it->second;
  }
};

inline TaskDataset prepare_task(const corpus::DatasetManifest& manifest,
                                const bpe::BpeModel& tokenizer, int max_len,
                                corpus::WindowMode mode) {
  TaskDataset data;
  data.task = manifest.task;
  data.labels = corpus::LabelSpace::from_manifest(manifest);
  for (const auto& [name, path] : manifest.splits) {
    auto examples = corpus::load_dataset(path, manifest.format);
    data.splits[name] = corpus::window_examples(examples, tokenizer, max_len, mode, data.labels);
  }
  return data;
}

inline nn::HeadKind head_for(corpus::TaskKind task) {
  switch (task) {
    case corpus::TaskKind::Qa: return nn::HeadKind::Span;
    case corpus::TaskKind::Ner: return nn::HeadKind::TokenCls;
    case corpus::TaskKind::DocCls:
    case corpus::TaskKind::PairCls: return nn::HeadKind::SeqCls;
    case corpus::TaskKind::MlmText: return nn::HeadKind::Mlm;
  }
  throw ValueError("no head for task");
}

inline std::string default_metric(corpus::TaskKind task, const corpus::LabelSpace& labels) {
  switch (task) {
    case corpus::TaskKind::Qa: return "token_f1";
    case corpus::TaskKind::Ner: return "entity_f1";
    case corpus::TaskKind::DocCls:
      if (labels.multilabel) return "weighted_auc";
      return labels.num_classes == 2 ? "roc_auc" : "accuracy";
    case corpus::TaskKind::PairCls: return "accuracy";
    case corpus::TaskKind::MlmText: return "loss";
  }
  throw ValueError("no metric for task");
}

// ---------------------------------------------------------------------------
// Evaluation driver.
// ---------------------------------------------------------------------------

struct EvalOptions {
  std::uint64_t pattern_seed = 0;
  int max_answer_len = 30;
  nn::Pool pool = nn::Pool::Mean;
  int threads = 1;
};

// Groups consecutive windows sharing a parent id (snippets of one document).
inline std::vector<std::pair<std::size_t, std::size_t>> parent_groups(
    const std::vector<corpus::EncodedWindow>& windows) {
  std::vector<std::pair<std::size_t, std::size_t>> groups;
  std::size_t i = 0;
  while (i < windows.size()) {
    std::size_t j = i + 1;
    while (j < windows.size() && windows[j].parent_id == windows[i].parent_id &&
           windows[j].snippet_index > 0)
      ++j;
    groups.emplace_back(i, j);
    i = j;
  }
  return groups;
}

template <typename Scalar>
metrics::EvalReport evaluate(const nn::ModelConfig& cfg, const nn::ParamStore<Scalar>& params,
                             corpus::TaskKind task, const corpus::LabelSpace& labels,
                             const std::vector<corpus::EncodedWindow>& windows,
                             const EvalOptions& opts = {}) {
  metrics::EvalReport report;
  report.task = corpus::task_kind_name(task);
  std::string digest_payload;

  auto globals_of = [](const corpus::EncodedWindow& w) {
    return std::vector<Index>(w.global_positions.begin(), w.global_positions.end());
  };

  if (task == corpus::TaskKind::Qa) {
    std::vector<double> em(windows.size(), 0), f1(windows.size(), 0);
    std::vector<std::string> pred_texts(windows.size());
    long long answerable = 0;
    parallel_for(windows.size(), opts.threads, [&](std::size_t i) {
      const auto& w = windows[i];
      Tape<Scalar> tape;
      nn::EncodeOptions eo;
      eo.pattern_seed = opts.pattern_seed;
      auto hidden = nn::encode(tape, cfg, params, w.input_ids, globals_of(w), eo);
      auto [sl, el] = nn::span_head(tape, params, hidden);
      std::vector<char> excluded(w.input_ids.size(), 1);
      for (std::int64_t p = w.context_begin; p < w.context_end; ++p)
        excluded[static_cast<std::size_t>(p)] = 0;
      std::string pred_text;
      if (w.context_end > w.context_begin) {
        const auto span = nn::decode_span(*sl.values, *el.values, opts.max_answer_len, excluded);
        const auto cs = w.offsets[static_cast<std::size_t>(span.start)].first;
        const auto ce = w.offsets[static_cast<std::size_t>(span.end)].second;
        pred_text = w.context_text.substr(static_cast<std::size_t>(cs),
                                          static_cast<std::size_t>(ce - cs));
      }
      pred_texts[i] = pred_text;
      em[i] = metrics::exact_match(pred_text, w.gold_answer);
      f1[i] = metrics::token_f1(
          metrics::whitespace_tokens(metrics::normalize_answer(pred_text)),
          metrics::whitespace_tokens(metrics::normalize_answer(w.gold_answer)));
    });
    double em_sum = 0, f1_sum = 0;
    for (std::size_t i = 0; i < windows.size(); ++i) {
      em_sum += em[i];
      f1_sum += f1[i];
      answerable += windows[i].answerable ? 1 : 0;
      digest_payload += pred_texts[i];
      digest_payload += '\n';
    }
    const double n = windows.empty() ? 1.0 : static_cast<double>(windows.size());
    report.values["exact_match"] = em_sum / n;
    report.values["token_f1"] = f1_sum / n;
    report.supports["answerable_in_window"] = answerable;
    report.n_examples = static_cast<long long>(windows.size());
  } else if (task == corpus::TaskKind::Ner) {
    std::vector<metrics::SpanCounts> counts(windows.size());
    std::vector<std::string> dumps(windows.size());
    parallel_for(windows.size(), opts.threads, [&](std::size_t i) {
      const auto& w = windows[i];
      Tape<Scalar> tape;
      nn::EncodeOptions eo;
      eo.pattern_seed = opts.pattern_seed;
      auto hidden = nn::encode(tape, cfg, params, w.input_ids, globals_of(w), eo);
      auto logits = nn::token_cls_head(tape, params, hidden);
      const Index c = logits.dim(1);
      std::vector<std::string> pred_tags, gold_tags;
      for (std::size_t word = 0; word < w.word_labels.size(); ++word) {
        gold_tags.push_back(labels.tags[static_cast<std::size_t>(w.word_labels[word])]);
        if (word < w.word_first_token.size()) {
          const Index pos = w.word_first_token[word];
          Index best = 0;
          for (Index k = 1; k < c; ++k)
            if (logits(pos, k) > logits(pos, best)) best = k;
          pred_tags.push_back(labels.tags[static_cast<std::size_t>(best)]);
        } else {
          pred_tags.push_back("O");  // truncated words count as misses
        }
      }
      counts[i] = metrics::entity_counts(pred_tags, gold_tags);
      std::string dump;
      for (const auto& t : pred_tags) {
        dump += t;
        dump += ' ';
      }
      dumps[i] = dump;
    });
    metrics::SpanCounts micro;
    long long gold_spans = 0;
    for (std::size_t i = 0; i < windows.size(); ++i) {
      micro += counts[i];
      digest_payload += dumps[i];
      digest_payload += '\n';
    }
    gold_spans = micro.tp + micro.fn;
    const auto prf = metrics::prf_from(micro);
    report.values["precision"] = prf.precision;
    report.values["recall"] = prf.recall;
    report.values["entity_f1"] = prf.f1;
    report.supports["gold_entities"] = gold_spans;
    report.n_examples = static_cast<long long>(windows.size());
  } else {  // DocCls / PairCls
    const auto groups = parent_groups(windows);
    const int num_classes = labels.num_classes;
    std::vector<std::vector<double>> probs(groups.size());
    parallel_for(groups.size(), opts.threads, [&](std::size_t g) {
      const auto [lo, hi] = groups[g];
      Tape<Scalar> tape;
      nn::EncodeOptions eo;
      eo.pattern_seed = opts.pattern_seed;
      std::vector<Tensor<Scalar>> hiddens;
      for (std::size_t i = lo; i < hi; ++i)
        hiddens.push_back(
            nn::encode(tape, cfg, params, windows[i].input_ids, globals_of(windows[i]), eo));
      auto logits = nn::pooled_seq_cls(tape, params, hiddens, opts.pool);
      std::vector<double> row(static_cast<std::size_t>(num_classes));
      for (Index k = 0; k < num_classes; ++k) row[static_cast<std::size_t>(k)] = logits(0, k);
      probs[g] = std::move(row);
    });

    if (labels.multilabel) {
      std::vector<std::vector<double>> class_scores(static_cast<std::size_t>(num_classes));
      std::vector<std::vector<int>> class_labels(static_cast<std::size_t>(num_classes));
      for (std::size_t g = 0; g < groups.size(); ++g) {
        const auto ind = multilabel_indicator(windows[groups[g].first].labels, num_classes);
        for (int k = 0; k < num_classes; ++k) {
          // logits are a monotone stand-in for sigmoid probabilities
          class_scores[static_cast<std::size_t>(k)].push_back(probs[g][static_cast<std::size_t>(k)]);
          class_labels[static_cast<std::size_t>(k)].push_back(ind[static_cast<std::size_t>(k)]);
          digest_payload += probs[g][static_cast<std::size_t>(k)] > 0 ? '1' : '0';
        }
        digest_payload += '\n';
      }
      const auto wa = metrics::weighted_multilabel_auc(class_scores, class_labels);
      report.values["weighted_auc"] = wa.value;
      report.supports["included_classes"] = static_cast<long long>(wa.included_classes.size());
      report.supports["excluded_classes"] = static_cast<long long>(wa.excluded_classes.size());
      for (int k = 0; k < num_classes; ++k) {
        long long pos = 0;
        for (int l : class_labels[static_cast<std::size_t>(k)]) pos += l;
        report.supports["class_" + std::to_string(k)] = pos;
      }
    } else {
      std::vector<int> preds, gold;
      std::vector<double> pos_scores;
      std::vector<int> pos_labels;
      for (std::size_t g = 0; g < groups.size(); ++g) {
        const auto& row = probs[g];
        int best = 0;
        for (int k = 1; k < num_classes; ++k)
          if (row[static_cast<std::size_t>(k)] > row[static_cast<std::size_t>(best)]) best = k;
        preds.push_back(best);
        gold.push_back(windows[groups[g].first].labels.at(0));
        if (num_classes == 2) {
          // softmax probability of class 1
          const double z0 = row[0], z1 = row[1];
          const double mx = std::max(z0, z1);
          const double p1 = std::exp(z1 - mx) / (std::exp(z0 - mx) + std::exp(z1 - mx));
          pos_scores.push_back(p1);
          pos_labels.push_back(gold.back());
        }
        digest_payload += std::to_string(best);
        digest_payload += '\n';
      }
      report.values["accuracy"] = metrics::accuracy(preds, gold);
      if (num_classes == 2) {
        bool both = false, seen_pos = false, seen_neg = false;
        for (int l : pos_labels) (l ? seen_pos : seen_neg) = true;
        both = seen_pos && seen_neg;
        if (both) report.values["roc_auc"] = metrics::roc_auc(pos_scores, pos_labels);
      }
      for (int k = 0; k < num_classes; ++k) {
        long long support = 0;
        for (int l : gold) support += l == k ? 1 : 0;
        report.supports["class_" + std::to_string(k)] = support;
      }
    }
    report.n_examples = static_cast<long long>(groups.size());
  }

  report.predictions_digest = metrics::digest(digest_payload);
  for (const auto& [name, value] : report.values)
    if (value < -1e-9 || value > 1.0 + 1e-9)
      throw ValueError("eval report: metric " + name + " outside [0,1]");
  return report;
}

// ---------------------------------------------------------------------------
// Pre-training.
// ---------------------------------------------------------------------------

template <typename Scalar>
struct PretrainResult {
  nn::Checkpoint<Scalar> checkpoint;
  RunRecord record;
};

// With resume=false an init checkpoint is a donor: parameters are copied
// (positions grown if needed), the optimizer starts fresh at step 0. With
// resume=true the run continues from checkpoint.step with restored moments,
// bitwise identical to the unbroken run.
template <typename Scalar>
PretrainResult<Scalar> pretrain(
    const nn::ModelConfig& cfg, std::optional<nn::Checkpoint<Scalar>> init,
    const std::vector<std::string>& corpus_lines, const bpe::BpeModel& tokenizer,
    const TrainConfig& tc, const std::string& checkpoint_dir = "",
    const std::function<void(const StepRecord&)>& on_step = nullptr, bool resume = false) {
  cfg.check();
  tc.check();
  const auto wall_start = std::chrono::steady_clock::now();

  // Tokenize the corpus: one training sequence per line, truncated.
  std::vector<std::vector<int>> sequences;
  for (const auto& line : corpus_lines) {
    if (line.empty()) continue;
    auto ids = tokenizer.encode(line, true).ids;
    if (static_cast<int>(ids.size()) > tc.max_len) {
      ids.resize(static_cast<std::size_t>(tc.max_len) - 1);
      ids.push_back(bpe::kSep);
    }
    if (ids.size() > 2) sequences.push_back(std::move(ids));
  }
  if (sequences.empty()) throw ValueError("pretrain: corpus is empty");
  if (cfg.vocab_size < tokenizer.vocab_size())
    throw ValueError("pretrain: model vocab " + std::to_string(cfg.vocab_size) +
                     " smaller than tokenizer vocab " + std::to_string(tokenizer.vocab_size()));

  nn::ParamStore<Scalar> params;
  long long start_step = 0;
  Adam<Scalar> adam(tc.lr, tc.clip_norm);
  if (init.has_value()) {
    nn::Checkpoint<Scalar>& ckpt = *init;
    if (ckpt.config.dim != cfg.dim || ckpt.config.layers != cfg.layers ||
        ckpt.config.heads != cfg.heads || ckpt.config.ff_dim != cfg.ff_dim ||
        ckpt.config.vocab_size != cfg.vocab_size)
      throw ValueError("pretrain: checkpoint architecture (dim/layers/heads/ff/vocab) does not "
                       "match the requested config");
    if (ckpt.config.max_positions < cfg.max_positions) nn::extend_positions(ckpt, cfg.max_positions);
    params = ckpt.params.deep_copy();
    nn::ensure_head(params, cfg, nn::HeadKind::Mlm, 0, tc.seed);
    adam.attach(params);
    if (resume) {
      if (ckpt.config.max_positions != cfg.max_positions)
        throw ValueError("pretrain: resume requires identical max positions");
      adam.restore(params, ckpt.opt_state, static_cast<long long>(ckpt.step));
      start_step = static_cast<long long>(ckpt.step);
    }
  } else {
    params = nn::init_encoder_params<Scalar>(cfg, tc.seed);
    nn::ensure_head(params, cfg, nn::HeadKind::Mlm, 0, tc.seed);
    adam.attach(params);
  }

  RunRecord record;
  nn::PlanCache plan_cache;
  for (long long step = start_step; step < tc.steps; ++step) {
    params.zero_grads();
    double batch_loss = 0;
    int contributors = 0;
    for (int slot = 0; slot < tc.batch_size; ++slot) {
      const auto& seq =
          sequences[static_cast<std::size_t>((step * tc.batch_size + slot) %
                                             static_cast<long long>(sequences.size()))];
      Rng rng({tc.seed, 0x3A5C, static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(slot)});
      auto inst = mask_for_mlm(seq, tc.masking_rate, cfg.vocab_size, rng);
      if (!inst.has_value()) continue;
      Tape<Scalar> tape;
      nn::EncodeOptions eo;
      eo.pattern_seed = tc.seed;
      eo.training = true;
      eo.dropout_key = Rng::key_of({tc.seed, 0xD40, static_cast<std::uint64_t>(step),
                                    static_cast<std::uint64_t>(slot)});
      eo.plan_cache = &plan_cache;
      auto hidden = nn::encode(tape, cfg, params, inst->corrupted, {0}, eo);
      auto loss = cross_entropy(nn::mlm_head(tape, params, hidden), inst->labels);
      batch_loss += static_cast<double>(loss.item());
      ++contributors;
      tape.backward(loss);
    }
    if (contributors == 0) continue;
    // gradient of the batch-mean loss
    const Scalar inv = Scalar(1) / Scalar(contributors);
    for (auto& e : params.entries)
      for (auto& g : *e.grad) g *= inv;
    adam.step(params);
    StepRecord sr{step, batch_loss / contributors, tc.lr};
    record.steps.push_back(sr);
    if (on_step) on_step(sr);

    if (tc.checkpoint_interval > 0 && (step + 1) % tc.checkpoint_interval == 0 &&
        !checkpoint_dir.empty() && step + 1 < tc.steps) {
      nn::Checkpoint<Scalar> periodic;
      periodic.config = cfg;
      periodic.params = params.deep_copy();
      adam.export_state(params, periodic.opt_state);
      periodic.step = static_cast<std::uint64_t>(step + 1);
      periodic.rng_state = tc.seed;
      periodic.save(checkpoint_dir + "/ckpt_step_" + std::to_string(step + 1) + ".bin");
    }
  }

  PretrainResult<Scalar> out;
  out.checkpoint.config = cfg;
  out.checkpoint.params = std::move(params);
  adam.export_state(out.checkpoint.params, out.checkpoint.opt_state);
  out.checkpoint.step = static_cast<std::uint64_t>(tc.steps);
  out.checkpoint.rng_state = tc.seed;
  out.record = std::move(record);
  out.record.wall_clock_sec =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - wall_start).count();
  return out;
}

// ---------------------------------------------------------------------------
// Fine-tuning with the lr-sweep / epoch / dev-selection protocol.
// ---------------------------------------------------------------------------

template <typename Scalar>
struct FinetuneResult {
  nn::Checkpoint<Scalar> best;
  RunRecord record;
};

template <typename Scalar>
Tensor<Scalar> window_loss(Tape<Scalar>& tape, const nn::ModelConfig& cfg,
                           const nn::ParamStore<Scalar>& params, const TaskDataset& data,
                           const std::vector<const corpus::EncodedWindow*>& group,
                           const TrainConfig& tc, const nn::EncodeOptions& eo) {
  const corpus::EncodedWindow& first = *group.front();
  if (first.kind == corpus::TaskKind::Qa) {
    const auto& w = first;
    auto hidden = nn::encode(tape, cfg, params, w.input_ids,
                             std::vector<Index>(w.global_positions.begin(),
                                                w.global_positions.end()),
                             eo);
    auto [sl, el] = nn::span_head(tape, params, hidden);
    const Index n = static_cast<Index>(w.input_ids.size());
    auto ls = cross_entropy(reshape(sl, {1, n}), {static_cast<int>(w.answer_start_tok)});
    auto le = cross_entropy(reshape(el, {1, n}), {static_cast<int>(w.answer_end_tok)});
    return scale(add(ls, le), Scalar(0.5));
  }
  if (first.kind == corpus::TaskKind::Ner) {
    const auto& w = first;
    auto hidden = nn::encode(tape, cfg, params, w.input_ids,
                             std::vector<Index>(w.global_positions.begin(),
                                                w.global_positions.end()),
                             eo);
    return cross_entropy(nn::token_cls_head(tape, params, hidden), w.token_labels);
  }
  // sequence-level: encode every snippet of the parent, pool, classify
  std::vector<Tensor<Scalar>> hiddens;
  for (const auto* w : group)
    hiddens.push_back(nn::encode(tape, cfg, params, w->input_ids,
                                 std::vector<Index>(w->global_positions.begin(),
                                                    w->global_positions.end()),
                                 eo));
  auto logits = nn::pooled_seq_cls(tape, params, hiddens, nn::pool_from(tc.pool));
  if (data.labels.multilabel)
    return multilabel_bce(tape, logits, first.labels, data.labels.num_classes);
  return cross_entropy(logits, {first.labels.at(0)});
}

template <typename Scalar>
FinetuneResult<Scalar> finetune(const nn::Checkpoint<Scalar>& init, const TaskDataset& data,
                                const TrainConfig& tc,
                                const std::function<void(const StepRecord&)>& on_step = nullptr) {
  tc.check();
  const auto wall_start = std::chrono::steady_clock::now();
  const nn::ModelConfig& cfg = init.config;
  cfg.check();
  const auto& train_windows = data.split("train");
  const auto& dev_windows = data.split("dev");
  if (train_windows.empty() || dev_windows.empty())
    throw ValueError("finetune: train and dev splits must be non-empty");

  const nn::HeadKind head = head_for(data.task);
  const std::string metric_name = tc.selection_metric == "auto"
                                      ? default_metric(data.task, data.labels)
                                      : tc.selection_metric;

  // Training iterates parent groups (one loss per document, snippets pooled).
  const auto groups = parent_groups(train_windows);
  std::vector<std::vector<const corpus::EncodedWindow*>> units;
  for (const auto& [lo, hi] : groups) {
    std::vector<const corpus::EncodedWindow*> g;
    for (std::size_t i = lo; i < hi; ++i) g.push_back(&train_windows[i]);
    if (data.task == corpus::TaskKind::Qa && !g.front()->answerable)
      continue;  // answer destroyed by the window: nothing to supervise
    units.push_back(std::move(g));
  }

  RunRecord record;
  record.selection_metric = metric_name;
  FinetuneResult<Scalar> out;
  long long global_step = 0;
  EvalOptions eval_opts;
  eval_opts.pattern_seed = tc.seed;
  eval_opts.max_answer_len = tc.max_answer_len;
  eval_opts.pool = nn::pool_from(tc.pool);
  eval_opts.threads = thread_budget();

  for (std::size_t lr_idx = 0; lr_idx < tc.lr_sweep.size(); ++lr_idx) {
    const double lr = tc.lr_sweep[lr_idx];
    nn::ParamStore<Scalar> params = init.params.deep_copy();
    nn::ensure_head(params, cfg, head, data.labels.num_classes, tc.seed);
    Adam<Scalar> adam(lr, tc.clip_norm);
    adam.attach(params);
    nn::PlanCache plan_cache;

    for (int epoch = 1; epoch <= tc.epochs; ++epoch) {
      // deterministic per-(lr, epoch) order
      std::vector<std::size_t> order(units.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      Rng shuffle_rng({tc.seed, 0x0FD3, static_cast<std::uint64_t>(lr_idx),
                       static_cast<std::uint64_t>(epoch)});
      for (std::size_t i = order.size(); i > 1; --i) {
        const std::size_t j = shuffle_rng.uniform_int(i);
        std::swap(order[i - 1], order[j]);
      }

      std::size_t cursor = 0;
      while (cursor < order.size()) {
        params.zero_grads();
        double batch_loss = 0;
        int contributors = 0;
        const std::size_t batch_end =
            std::min(order.size(), cursor + static_cast<std::size_t>(tc.batch_size));
        for (; cursor < batch_end; ++cursor) {
          const auto& unit = units[order[cursor]];
          Tape<Scalar> tape;
          nn::EncodeOptions eo;
          eo.pattern_seed = tc.seed;
          eo.training = true;
          eo.dropout_key = Rng::key_of({tc.seed, 0xD401, static_cast<std::uint64_t>(global_step),
                                        static_cast<std::uint64_t>(cursor)});
          eo.plan_cache = &plan_cache;
          auto loss = window_loss(tape, cfg, params, data, unit, tc, eo);
          batch_loss += static_cast<double>(loss.item());
          ++contributors;
          tape.backward(loss);
        }
        if (contributors == 0) continue;
        const Scalar inv = Scalar(1) / Scalar(contributors);
        for (auto& e : params.entries)
          for (auto& g : *e.grad) g *= inv;
        adam.step(params);
        StepRecord sr{global_step++, batch_loss / contributors, lr};
        record.steps.push_back(sr);
        if (on_step) on_step(sr);
      }

      auto dev_report = evaluate(cfg, params, data.task, data.labels, dev_windows, eval_opts);
      const auto it = dev_report.values.find(metric_name);
      if (it == dev_report.values.end())
        throw ValueError("finetune: dev evaluation lacks metric '" + metric_name + "'");
      record.epochs.push_back({lr, epoch, "dev", metric_name, it->second});
      if (!record.has_selection || it->second > record.selected_value) {
        record.has_selection = true;
        record.selected_value = it->second;
        record.selected_lr = lr;
        record.selected_epoch = epoch;
        out.best.config = cfg;
        out.best.params = params.deep_copy();
        out.best.opt_state = nn::ParamStore<Scalar>{};
        out.best.step = static_cast<std::uint64_t>(global_step);
        out.best.rng_state = tc.seed;
      }
    }
  }

  out.record = std::move(record);
  out.record.wall_clock_sec =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - wall_start).count();
  return out;
}

}  // namespace lce::train
