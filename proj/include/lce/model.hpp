#pragma once

#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "lce/attention.hpp"
#include "lce/rng.hpp"
#include "lce/tensor.hpp"

namespace lce::nn {

struct PatternSpec {
  std::string kind = "window-global";  // full | window-global | window-global-random
  int window = 33;
  int block_size = 64;
  int random_blocks = 3;
};

struct ModelConfig {
  int layers = 4;
  int heads = 4;
  int dim = 128;
  int ff_dim = 512;
  int max_positions = 4096;
  int vocab_size = 8192;
  PatternSpec pattern;
  double dropout = 0.0;

  void check() const {
    if (dim % heads != 0)
      throw ValueError("model config: dim " + std::to_string(dim) + " not divisible by heads " +
                       std::to_string(heads));
    if (layers < 0 || heads < 1 || dim < 1 || ff_dim < 1 || max_positions < 1 || vocab_size < 261)
      throw ValueError("model config: non-positive dimension");
    if (pattern.kind != "full" && pattern.kind != "window-global" &&
        pattern.kind != "window-global-random")
      throw ValueError("model config: unknown attention pattern '" + pattern.kind + "'");
    if (dropout < 0.0 || dropout >= 1.0) throw ValueError("model config: dropout out of range");
  }

  nlohmann::json to_json() const {
    return {{"layers", layers},
            {"heads", heads},
            {"dim", dim},
            {"ff_dim", ff_dim},
            {"max_positions", max_positions},
            {"vocab_size", vocab_size},
            {"dropout", dropout},
            {"pattern",
             {{"kind", pattern.kind},
              {"window", pattern.window},
              {"block_size", pattern.block_size},
              {"random_blocks", pattern.random_blocks}}}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.layers = j.value("layers", c.layers);
    c.heads = j.value("heads", c.heads);
    c.dim = j.value("dim", c.dim);
    c.ff_dim = j.value("ff_dim", c.ff_dim);
    c.max_positions = j.value("max_positions", c.max_positions);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.dropout = j.value("dropout", c.dropout);
    if (j.contains("pattern")) {
      const auto& p = j.at("pattern");
      c.pattern.kind = p.value("kind", c.pattern.kind);
      c.pattern.window = p.value("window", c.pattern.window);
      c.pattern.block_size = p.value("block_size", c.pattern.block_size);
      c.pattern.random_blocks = p.value("random_blocks", c.pattern.random_blocks);
    }
    c.check();
    return c;
  }
};

// Named parameter set. Entries keep their creation order; gradients live in
// persistent buffers so batch accumulation and the optimizer share storage.
template <typename Scalar>
struct ParamStore {
  struct Entry {
    std::string name;
    Shape shape;
    std::shared_ptr<std::vector<Scalar>> values;
    std::shared_ptr<std::vector<Scalar>> grad;
  };

  std::vector<Entry> entries;
  std::unordered_map<std::string, std::size_t> index;

  bool has(const std::string& name) const { return index.count(name) > 0; }

  Entry& add(const std::string& name, Shape shape, std::vector<Scalar> init) {
    if (has(name)) throw ValueError("duplicate parameter name: " + name);
    Entry e;
    e.name = name;
    e.shape = std::move(shape);
    if (numel(e.shape) != static_cast<Index>(init.size()))
      throw ShapeError("parameter " + name + ": bad payload");
    e.values = std::make_shared<std::vector<Scalar>>(std::move(init));
    e.grad = std::make_shared<std::vector<Scalar>>(e.values->size(), Scalar(0));
    index.emplace(name, entries.size());
    entries.push_back(std::move(e));
    return entries.back();
  }

  const Entry& at(const std::string& name) const {
    auto it = index.find(name);
    if (it == index.end()) throw ValueError("unknown parameter: " + name);
    return entries[it->second];
  }

  Entry& at(const std::string& name) {
    auto it = index.find(name);
    if (it == index.end()) throw ValueError("unknown parameter: " + name);
    return entries[it->second];
  }

  Tensor<Scalar> use(Tape<Scalar>& tape, const std::string& name) const {
    const Entry& e = at(name);
    return tape.leaf(e.shape, e.values, e.grad);
  }

  void zero_grads() {
    for (auto& e : entries) std::fill(e.grad->begin(), e.grad->end(), Scalar(0));
  }

  Index total_params() const {
    Index total = 0;
    for (const auto& e : entries) total += numel(e.shape);
    return total;
  }

  ParamStore deep_copy() const {
    ParamStore out;
    for (const auto& e : entries)
      out.add(e.name, e.shape, *e.values);
    return out;
  }
};

enum class HeadKind { Mlm, TokenCls, Span, SeqCls };

inline std::string head_kind_name(HeadKind k) {
  switch (k) {
    case HeadKind::Mlm: return "mlm";
    case HeadKind::TokenCls: return "token_cls";
    case HeadKind::Span: return "span";
    case HeadKind::SeqCls: return "seq_cls";
  }
  throw ValueError("unknown head kind");
}

namespace detail {

template <typename Scalar>
std::vector<Scalar> normal_init(Index count, double stddev, Rng rng) {
  std::vector<Scalar> v(static_cast<std::size_t>(count));
  for (auto& x : v) x = static_cast<Scalar>(stddev * rng.normal());
  return v;
}

}  // namespace detail

// Encoder parameters (no task head), deterministically initialized.
template <typename Scalar>
ParamStore<Scalar> init_encoder_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.check();
  ParamStore<Scalar> p;
  const double s = 0.02;
  std::uint64_t stream = 0;
  auto weights = [&](Index count) {
    return detail::normal_init<Scalar>(count, s, Rng({seed, 0xC0DE, stream++}));
  };
  const Index d = cfg.dim, f = cfg.ff_dim;
  p.add("tok_emb", {cfg.vocab_size, d}, weights(cfg.vocab_size * d));
  p.add("pos_emb", {cfg.max_positions, d}, weights(cfg.max_positions * d));
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string base = "layer" + std::to_string(l) + ".";
    p.add(base + "attn.ln.gain", {d}, std::vector<Scalar>(static_cast<std::size_t>(d), Scalar(1)));
    p.add(base + "attn.ln.bias", {d}, std::vector<Scalar>(static_cast<std::size_t>(d), Scalar(0)));
    for (const char* w : {"wq", "wk", "wv", "wo"})
      p.add(base + "attn." + w, {d, d}, weights(d * d));
    for (const char* b : {"bq", "bk", "bv", "bo"})
      p.add(base + "attn." + b, {d}, std::vector<Scalar>(static_cast<std::size_t>(d), Scalar(0)));
    p.add(base + "ff.ln.gain", {d}, std::vector<Scalar>(static_cast<std::size_t>(d), Scalar(1)));
    p.add(base + "ff.ln.bias", {d}, std::vector<Scalar>(static_cast<std::size_t>(d), Scalar(0)));
    p.add(base + "ff.w1", {d, f}, weights(d * f));
    p.add(base + "ff.b1", {f}, std::vector<Scalar>(static_cast<std::size_t>(f), Scalar(0)));
    p.add(base + "ff.w2", {f, d}, weights(f * d));
    p.add(base + "ff.b2", {d}, std::vector<Scalar>(static_cast<std::size_t>(d), Scalar(0)));
  }
  p.add("final_ln.gain", {d}, std::vector<Scalar>(static_cast<std::size_t>(d), Scalar(1)));
  p.add("final_ln.bias", {d}, std::vector<Scalar>(static_cast<std::size_t>(d), Scalar(0)));
  return p;
}

// Adds a task head's parameters when absent (fine-tuning a pretrained
// encoder attaches fresh heads).
template <typename Scalar>
void ensure_head(ParamStore<Scalar>& p, const ModelConfig& cfg, HeadKind kind, int num_classes,
                 std::uint64_t seed) {
  const Index d = cfg.dim;
  const std::string base = "head." + head_kind_name(kind) + ".";
  if (p.has(base + "w")) return;
  Index out_dim = 0;
  switch (kind) {
    case HeadKind::Mlm: out_dim = cfg.vocab_size; break;
    case HeadKind::Span: out_dim = 2; break;
    case HeadKind::TokenCls:
    case HeadKind::SeqCls:
      if (num_classes < 1) throw ValueError("head needs a positive class count");
      out_dim = num_classes;
      break;
  }
  p.add(base + "w", {d, out_dim},
        detail::normal_init<Scalar>(d * out_dim, 0.02, Rng({seed, 0x4EAD, static_cast<std::uint64_t>(kind)})));
  p.add(base + "b", {out_dim}, std::vector<Scalar>(static_cast<std::size_t>(out_dim), Scalar(0)));
}

// Attendance plans per (layer, length, globals); shared across steps.
struct PlanCache {
  std::map<std::tuple<int, Index, std::vector<Index>>, std::shared_ptr<const attn::AttendancePlan>>
      plans;

  std::shared_ptr<const attn::AttendancePlan> get(const attn::AttentionPattern& pattern, Index n) {
    auto key = std::make_tuple(pattern.layer_id, n, pattern.global_positions);
    auto it = plans.find(key);
    if (it != plans.end()) return it->second;
    auto plan = std::make_shared<const attn::AttendancePlan>(attn::build_plan(pattern, n));
    plans.emplace(std::move(key), plan);
    return plan;
  }
};

struct EncodeOptions {
  std::uint64_t pattern_seed = 0;  // random-block draws, fixed per run
  bool training = false;
  std::uint64_t dropout_key = 0;  // keyed per (run seed, step, example)
  PlanCache* plan_cache = nullptr;
};

namespace detail {

template <typename Scalar>
Tensor<Scalar> maybe_dropout(Tape<Scalar>& tape, const Tensor<Scalar>& x, double rate,
                             Rng& stream) {
  if (rate <= 0.0) return x;
  std::vector<Scalar> mask(static_cast<std::size_t>(x.size()));
  const Scalar keep_scale = Scalar(1.0 / (1.0 - rate));
  for (auto& m : mask) m = stream.uniform() < rate ? Scalar(0) : keep_scale;
  return multiply(x, tape.constant(x.shape, std::move(mask)));
}

}  // namespace detail

// Token + position embeddings, then pre-norm attention/feed-forward blocks,
// then a final layer norm.
template <typename Scalar>
Tensor<Scalar> encode(Tape<Scalar>& tape, const ModelConfig& cfg, const ParamStore<Scalar>& params,
                      const std::vector<int>& input_ids, const std::vector<Index>& global_positions,
                      const EncodeOptions& opts = {}) {
  cfg.check();
  const Index n = static_cast<Index>(input_ids.size());
  if (n < 1) throw ValueError("encode: empty input");
  if (n > cfg.max_positions)
    throw ValueError("encode: input length " + std::to_string(n) + " exceeds max positions " +
                     std::to_string(cfg.max_positions));
  const Index d = cfg.dim;
  const Index dh = d / cfg.heads;

  std::vector<int> positions(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) positions[static_cast<std::size_t>(i)] = static_cast<int>(i);

  Rng dropout_stream({opts.dropout_key, 0xD0});
  auto x = add(embedding_gather(params.use(tape, "tok_emb"), input_ids),
               embedding_gather(params.use(tape, "pos_emb"), positions));
  if (opts.training) x = detail::maybe_dropout(tape, x, cfg.dropout, dropout_stream);

  PlanCache local_cache;
  PlanCache* cache = opts.plan_cache ? opts.plan_cache : &local_cache;

  for (int l = 0; l < cfg.layers; ++l) {
    const std::string base = "layer" + std::to_string(l) + ".";
    auto h = layer_norm(x, params.use(tape, base + "attn.ln.gain"),
                        params.use(tape, base + "attn.ln.bias"));
    auto q = add(matmul(h, params.use(tape, base + "attn.wq")), params.use(tape, base + "attn.bq"));
    auto k = add(matmul(h, params.use(tape, base + "attn.wk")), params.use(tape, base + "attn.bk"));
    auto v = add(matmul(h, params.use(tape, base + "attn.wv")), params.use(tape, base + "attn.bv"));

    attn::AttentionPattern pattern;
    if (cfg.pattern.kind == "full") {
      pattern = attn::AttentionPattern::full();
    } else if (cfg.pattern.kind == "window-global") {
      pattern = attn::AttentionPattern::window_global(cfg.pattern.window, global_positions);
    } else {
      pattern = attn::AttentionPattern::window_global_random(
          cfg.pattern.window, global_positions, cfg.pattern.block_size, cfg.pattern.random_blocks,
          opts.pattern_seed, l);
    }
    pattern.layer_id = l;
    std::shared_ptr<const attn::AttendancePlan> plan = cache->get(pattern, n);

    std::vector<Tensor<Scalar>> head_outs;
    head_outs.reserve(static_cast<std::size_t>(cfg.heads));
    for (int hd = 0; hd < cfg.heads; ++hd) {
      auto qh = slice(q, 1, hd * dh, dh);
      auto kh = slice(k, 1, hd * dh, dh);
      auto vh = slice(v, 1, hd * dh, dh);
      head_outs.push_back(pattern.kind == attn::PatternKind::Full
                              ? attn::full_attention(qh, kh, vh, *plan)
                              : attn::sparse_attention(qh, kh, vh, plan));
    }
    auto att = concatenate(head_outs, 1);
    att = add(matmul(att, params.use(tape, base + "attn.wo")), params.use(tape, base + "attn.bo"));
    if (opts.training) att = detail::maybe_dropout(tape, att, cfg.dropout, dropout_stream);
    x = add(x, att);

    auto h2 = layer_norm(x, params.use(tape, base + "ff.ln.gain"),
                         params.use(tape, base + "ff.ln.bias"));
    auto ff = gelu(add(matmul(h2, params.use(tape, base + "ff.w1")),
                       params.use(tape, base + "ff.b1")));
    ff = add(matmul(ff, params.use(tape, base + "ff.w2")), params.use(tape, base + "ff.b2"));
    if (opts.training) ff = detail::maybe_dropout(tape, ff, cfg.dropout, dropout_stream);
    x = add(x, ff);
  }
  return layer_norm(x, params.use(tape, "final_ln.gain"), params.use(tape, "final_ln.bias"));
}

template <typename Scalar>
Tensor<Scalar> mlm_head(Tape<Scalar>& tape, const ParamStore<Scalar>& params,
                        const Tensor<Scalar>& hidden) {
  return add(matmul(hidden, params.use(tape, "head.mlm.w")), params.use(tape, "head.mlm.b"));
}

template <typename Scalar>
Tensor<Scalar> token_cls_head(Tape<Scalar>& tape, const ParamStore<Scalar>& params,
                              const Tensor<Scalar>& hidden) {
  return add(matmul(hidden, params.use(tape, "head.token_cls.w")),
             params.use(tape, "head.token_cls.b"));
}

// (start_logits, end_logits), each [n, 1].
template <typename Scalar>
std::pair<Tensor<Scalar>, Tensor<Scalar>> span_head(Tape<Scalar>& tape,
                                                    const ParamStore<Scalar>& params,
                                                    const Tensor<Scalar>& hidden) {
  auto both = add(matmul(hidden, params.use(tape, "head.span.w")), params.use(tape, "head.span.b"));
  return {slice(both, 1, 0, 1), slice(both, 1, 1, 1)};
}

// Sequence logits read from the CLS position.
template <typename Scalar>
Tensor<Scalar> seq_cls_head(Tape<Scalar>& tape, const ParamStore<Scalar>& params,
                            const Tensor<Scalar>& hidden) {
  auto cls = slice(hidden, 0, 0, 1);  // [1, d]
  return add(matmul(cls, params.use(tape, "head.seq_cls.w")), params.use(tape, "head.seq_cls.b"));
}

enum class Pool { Mean, Max };

inline Pool pool_from(const std::string& name) {
  if (name == "mean") return Pool::Mean;
  if (name == "max") return Pool::Max;
  throw ValueError("unknown pooling mode: " + name);
}

// Aggregates the CLS vector across snippet encodings, then classifies.
template <typename Scalar>
Tensor<Scalar> pooled_seq_cls(Tape<Scalar>& tape, const ParamStore<Scalar>& params,
                              const std::vector<Tensor<Scalar>>& snippet_hiddens, Pool pool) {
  if (snippet_hiddens.empty()) throw ValueError("pooled_seq_cls: no snippets");
  Tensor<Scalar> agg = slice(snippet_hiddens[0], 0, 0, 1);
  for (std::size_t s = 1; s < snippet_hiddens.size(); ++s) {
    auto cls = slice(snippet_hiddens[s], 0, 0, 1);
    agg = pool == Pool::Max ? elementwise_max(agg, cls) : add(agg, cls);
  }
  if (pool == Pool::Mean && snippet_hiddens.size() > 1)
    agg = scale(agg, Scalar(1) / Scalar(snippet_hiddens.size()));
  return add(matmul(agg, params.use(tape, "head.seq_cls.w")), params.use(tape, "head.seq_cls.b"));
}

struct SpanPrediction {
  Index start = -1;
  Index end = -1;
  double score = 0;
};

// Best (s, e) with s <= e <= s + max_answer_len - 1 by start+end logit sum,
// ties to the smallest s then smallest e. Positions with excluded[i] set
// (specials, question tokens) never participate.
template <typename Scalar>
SpanPrediction decode_span(const std::vector<Scalar>& start_logits,
                           const std::vector<Scalar>& end_logits, Index max_answer_len,
                           const std::vector<char>& excluded) {
  const Index n = static_cast<Index>(start_logits.size());
  if (static_cast<Index>(end_logits.size()) != n)
    throw ShapeError("decode_span: start/end logits differ in length");
  if (!excluded.empty() && static_cast<Index>(excluded.size()) != n)
    throw ShapeError("decode_span: exclusion mask length mismatch");
  if (max_answer_len < 1) throw ValueError("decode_span: max answer length must be >= 1");
  SpanPrediction best;
  bool found = false;
  for (Index s = 0; s < n; ++s) {
    if (!excluded.empty() && excluded[static_cast<std::size_t>(s)]) continue;
    const Index e_hi = std::min(n - 1, s + max_answer_len - 1);
    for (Index e = s; e <= e_hi; ++e) {
      if (!excluded.empty() && excluded[static_cast<std::size_t>(e)]) continue;
      const double score = static_cast<double>(start_logits[static_cast<std::size_t>(s)]) +
                           static_cast<double>(end_logits[static_cast<std::size_t>(e)]);
      if (!found || score > best.score) {
        best = {s, e, score};
        found = true;
      }
    }
  }
  if (!found) throw ValueError("decode_span: every candidate position is excluded (no answer)");
  return best;
}

// ---------------------------------------------------------------------------
// Checkpoints: binary container with a JSON config header and named
// little-endian arrays. Reload reproduces forward outputs bitwise.
// ---------------------------------------------------------------------------

template <typename Scalar>
struct Checkpoint {
  ModelConfig config;
  ParamStore<Scalar> params;
  ParamStore<Scalar> opt_state;  // optimizer moments, kept for bitwise resume
  std::uint64_t step = 0;
  std::uint64_t rng_state = 0;

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);
};

namespace detail {

inline void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(buf), 8);
}

inline std::uint64_t get_u64(std::istream& in) {
  unsigned char buf[8];
  in.read(reinterpret_cast<char*>(buf), 8);
  if (!in) throw IoError("checkpoint: truncated file");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return v;
}

inline void put_str(std::ostream& out, const std::string& s) {
  put_u64(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_str(std::istream& in) {
  const std::uint64_t len = get_u64(in);
  std::string s(len, '\0');
  in.read(s.data(), static_cast<std::streamsize>(len));
  if (!in) throw IoError("checkpoint: truncated string");
  return s;
}

template <typename Scalar>
void put_store(std::ostream& out, const ParamStore<Scalar>& store) {
  put_u64(out, store.entries.size());
  for (const auto& e : store.entries) {
    put_str(out, e.name);
    put_u64(out, e.shape.size());
    for (Index d : e.shape) put_u64(out, static_cast<std::uint64_t>(d));
    out.write(reinterpret_cast<const char*>(e.values->data()),
              static_cast<std::streamsize>(e.values->size() * sizeof(Scalar)));
  }
}

template <typename Scalar>
ParamStore<Scalar> get_store(std::istream& in) {
  ParamStore<Scalar> store;
  const std::uint64_t count = get_u64(in);
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::string name = get_str(in);
    const std::uint64_t rank = get_u64(in);
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<Index>(get_u64(in));
    std::vector<Scalar> data(static_cast<std::size_t>(numel(shape)));
    in.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(Scalar)));
    if (!in) throw IoError("checkpoint: truncated tensor " + name);
    store.add(name, std::move(shape), std::move(data));
  }
  return store;
}

}  // namespace detail

inline constexpr char kCkptMagic[8] = {'L', 'C', 'E', 'C', 'K', 'P', 'T', '1'};

template <typename Scalar>
void Checkpoint<Scalar>::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out.write(kCkptMagic, 8);
  detail::put_u64(out, sizeof(Scalar));
  detail::put_str(out, config.to_json().dump());
  detail::put_u64(out, step);
  detail::put_u64(out, rng_state);
  detail::put_store(out, params);
  detail::put_store(out, opt_state);
  if (!out) throw IoError("short write to " + path);
}

template <typename Scalar>
Checkpoint<Scalar> Checkpoint<Scalar>::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCkptMagic, 8) != 0)
    throw IoError(path + ": not a checkpoint file");
  const std::uint64_t scalar_width = detail::get_u64(in);
  if (scalar_width != sizeof(Scalar))
    throw ValueError("checkpoint " + path + " stores " + std::to_string(scalar_width * 8) +
                     "-bit floats, loader expects " + std::to_string(sizeof(Scalar) * 8) + "-bit");
  Checkpoint ckpt;
  ckpt.config = ModelConfig::from_json(nlohmann::json::parse(detail::get_str(in)));
  ckpt.step = detail::get_u64(in);
  ckpt.rng_state = detail::get_u64(in);
  ckpt.params = detail::get_store<Scalar>(in);
  ckpt.opt_state = detail::get_store<Scalar>(in);
  return ckpt;
}

// Grows learned position embeddings by cyclically copying existing rows, the
// way a short-context checkpoint seeds a long-context model.
template <typename Scalar>
void extend_positions(Checkpoint<Scalar>& ckpt, int new_max_positions) {
  if (new_max_positions < ckpt.config.max_positions)
    throw ValueError("extend_positions: cannot shrink from " +
                     std::to_string(ckpt.config.max_positions) + " to " +
                     std::to_string(new_max_positions));
  auto& entry = ckpt.params.at("pos_emb");
  const Index old_p = entry.shape[0];
  const Index d = entry.shape[1];
  std::vector<Scalar> grown(static_cast<std::size_t>(new_max_positions) * static_cast<std::size_t>(d));
  for (Index i = 0; i < new_max_positions; ++i) {
    const Index src = i % old_p;
    std::copy_n(entry.values->begin() + src * d, d, grown.begin() + i * d);
  }
  entry.shape[0] = new_max_positions;
  *entry.values = std::move(grown);
  entry.grad->assign(entry.values->size(), Scalar(0));
  ckpt.config.max_positions = new_max_positions;
}

}  // namespace lce::nn
