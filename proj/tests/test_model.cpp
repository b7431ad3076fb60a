#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "lce/model.hpp"
#include "lce/tokenizer.hpp"
#include "testutil.hpp"

using namespace lce::nn;
using lce::Index;
using lce::Tape;
using lce::Tensor;

namespace {

ModelConfig tiny_config(const std::string& pattern = "full", int layers = 2) {
  ModelConfig cfg;
  cfg.layers = layers;
  cfg.heads = 2;
  cfg.dim = 8;
  cfg.ff_dim = 16;
  cfg.max_positions = 12;
  cfg.vocab_size = 300;
  cfg.pattern.kind = pattern;
  cfg.pattern.window = 3;
  cfg.pattern.block_size = 4;
  cfg.pattern.random_blocks = 1;
  return cfg;
}

std::vector<int> some_ids(int n, std::uint64_t key, int vocab) {
  lce::Rng rng(key);
  std::vector<int> ids(static_cast<std::size_t>(n));
  for (auto& id : ids)
    id = lce::bpe::kByteBase +
         static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(vocab - lce::bpe::kByteBase)));
  return ids;
}

}  // namespace

TEST_CASE("encode returns [n, d] for every n up to max positions; rejects longer") {
  auto cfg = tiny_config();
  auto params = init_encoder_params<double>(cfg, 5);
  for (int n = 1; n <= cfg.max_positions; ++n) {
    Tape<double> tape;
    auto h = encode(tape, cfg, params, some_ids(n, 100 + static_cast<std::uint64_t>(n), cfg.vocab_size), {0});
    CHECK(h.shape == lce::Shape{n, cfg.dim});
  }
  Tape<double> tape;
  CHECK_THROWS_AS(
      encode(tape, cfg, params, some_ids(cfg.max_positions + 1, 1, cfg.vocab_size), {0}),
      lce::ValueError);
}

TEST_CASE("zero-layer encoder is layer_norm of the embeddings") {
  auto cfg = tiny_config("full", 0);
  auto params = init_encoder_params<double>(cfg, 7);
  const auto ids = some_ids(6, 42, cfg.vocab_size);
  Tape<double> tape;
  auto h = encode(tape, cfg, params, ids, {0});

  auto tok = params.use(tape, "tok_emb");
  std::vector<int> positions = {0, 1, 2, 3, 4, 5};
  auto emb = lce::add(lce::embedding_gather(tok, ids),
                      lce::embedding_gather(params.use(tape, "pos_emb"), positions));
  auto want = lce::layer_norm(emb, params.use(tape, "final_ln.gain"),
                              params.use(tape, "final_ln.bias"));
  for (Index i = 0; i < h.size(); ++i) CHECK(h(i) == want(i));
}

TEST_CASE("full pattern and a window covering the sequence agree at every depth") {
  for (int layers : {1, 2, 4}) {
    auto cfg_full = tiny_config("full", layers);
    auto cfg_wide = cfg_full;
    cfg_wide.pattern.kind = "window-global";
    cfg_wide.pattern.window = 2 * cfg_full.max_positions - 1;
    auto params = init_encoder_params<double>(cfg_full, 11);
    const auto ids = some_ids(10, 77, cfg_full.vocab_size);

    Tape<double> t1, t2;
    auto h_full = encode(t1, cfg_full, params, ids, {0});
    auto h_wide = encode(t2, cfg_wide, params, ids, {0});
    double worst = 0;
    for (Index i = 0; i < h_full.size(); ++i)
      worst = std::max(worst, std::fabs(h_full(i) - h_wide(i)));
    CHECK(worst <= 1e-8);
  }
}

TEST_CASE("every encoder parameter gradient matches finite differences (2-layer, <=2k params)") {
  auto cfg = tiny_config("window-global-random", 2);
  cfg.pattern.window = 3;
  cfg.vocab_size = 261;
  cfg.dim = 4;
  cfg.heads = 2;
  cfg.ff_dim = 8;
  auto params = init_encoder_params<double>(cfg, 13);
  REQUIRE(params.total_params() <= 2000);
  const auto ids = some_ids(8, 5150, cfg.vocab_size);
  EncodeOptions opts;
  opts.pattern_seed = 99;

  auto forward = [&]() {
    Tape<double> tape;
    auto h = encode(tape, cfg, params, ids, {0}, opts);
    return lce::sum(lce::multiply(h, h)).item() * 0.5;
  };
  params.zero_grads();
  {
    Tape<double> tape;
    auto h = encode(tape, cfg, params, ids, {0}, opts);
    tape.backward(lce::scale(lce::sum(lce::multiply(h, h)), 0.5));
  }
  double worst = 0;
  for (auto& entry : params.entries) {
    for (std::size_t i = 0; i < entry.values->size(); ++i) {
      const double fd = testutil::central_diff(*entry.values, i, forward, 1e-4);
      worst = std::max(worst, testutil::rel_err((*entry.grad)[i], fd));
    }
  }
  CHECK(worst <= 1e-3);
}

TEST_CASE("heads: shapes, zero-weight uniformity, pattern-agnostic APIs") {
  auto cfg = tiny_config();
  auto params = init_encoder_params<double>(cfg, 17);
  ensure_head(params, cfg, HeadKind::Mlm, 0, 17);
  ensure_head(params, cfg, HeadKind::SeqCls, 5, 17);
  ensure_head(params, cfg, HeadKind::TokenCls, 3, 17);
  ensure_head(params, cfg, HeadKind::Span, 0, 17);

  for (int n : {3, 9}) {
    Tape<double> tape;
    auto h = encode(tape, cfg, params, some_ids(n, 7, cfg.vocab_size), {0});
    CHECK(mlm_head(tape, params, h).shape == lce::Shape{n, cfg.vocab_size});
    CHECK(token_cls_head(tape, params, h).shape == lce::Shape{n, 3});
    CHECK(seq_cls_head(tape, params, h).shape == lce::Shape{1, 5});
    auto [s, e] = span_head(tape, params, h);
    CHECK(s.shape == lce::Shape{n, 1});
    CHECK(e.shape == lce::Shape{n, 1});
  }

  // zeroed projection -> uniform distribution after softmax
  std::fill(params.at("head.seq_cls.w").values->begin(), params.at("head.seq_cls.w").values->end(),
            0.0);
  std::fill(params.at("head.seq_cls.b").values->begin(), params.at("head.seq_cls.b").values->end(),
            0.0);
  Tape<double> tape;
  auto h = encode(tape, cfg, params, some_ids(4, 8, cfg.vocab_size), {0});
  auto logits = seq_cls_head(tape, params, h);
  double lse = 0;
  for (Index c = 0; c < 5; ++c) lse += std::exp(logits(0, c));
  for (Index c = 0; c < 5; ++c) CHECK(std::exp(logits(0, c)) / lse == doctest::Approx(0.2));
}

TEST_CASE("pooled classification: identity, idempotent mean, elementwise max") {
  auto cfg = tiny_config();
  auto params = init_encoder_params<double>(cfg, 23);
  ensure_head(params, cfg, HeadKind::SeqCls, 4, 23);

  Tape<double> tape;
  auto h1 = encode(tape, cfg, params, some_ids(6, 31, cfg.vocab_size), {0});
  auto h2 = encode(tape, cfg, params, some_ids(6, 32, cfg.vocab_size), {0});

  auto single = seq_cls_head(tape, params, h1);
  auto pooled_one = pooled_seq_cls(tape, params, {h1}, Pool::Mean);
  for (Index c = 0; c < 4; ++c) CHECK(pooled_one(0, c) == single(0, c));

  auto pooled_same = pooled_seq_cls(tape, params, {h1, h1}, Pool::Mean);
  for (Index c = 0; c < 4; ++c)
    CHECK(pooled_same(0, c) == doctest::Approx(single(0, c)).epsilon(1e-12));

  // max pool equals a direct elementwise-max oracle over CLS vectors
  auto pooled_max = pooled_seq_cls(tape, params, {h1, h2}, Pool::Max);
  std::vector<double> mx(static_cast<std::size_t>(cfg.dim));
  for (Index j = 0; j < cfg.dim; ++j) mx[static_cast<std::size_t>(j)] = std::max(h1(0, j), h2(0, j));
  auto w = params.at("head.seq_cls.w");
  auto b = params.at("head.seq_cls.b");
  for (Index c = 0; c < 4; ++c) {
    double want = (*b.values)[static_cast<std::size_t>(c)];
    for (Index j = 0; j < cfg.dim; ++j)
      want += mx[static_cast<std::size_t>(j)] * (*w.values)[static_cast<std::size_t>(j * 4 + c)];
    CHECK(pooled_max(0, c) == doctest::Approx(want).epsilon(1e-12));
  }

  CHECK_THROWS_AS(pooled_seq_cls(tape, params, std::vector<Tensor<double>>{}, Pool::Mean),
                  lce::ValueError);
}

TEST_CASE("decode_span: peaks, constraints, exhaustive-search oracle") {
  std::vector<double> start = {0, 0, 5, 0};
  std::vector<double> end = {0, 0, 5, 0};
  auto p = decode_span(start, end, 30, {});
  CHECK(p.start == 2);
  CHECK(p.end == 2);

  // max-answer-len 1 forces s == e at argmax of start+end
  std::vector<double> s2 = {1, 4, 2};
  std::vector<double> e2 = {2, 1, 3};
  auto p2 = decode_span(s2, e2, 1, {});
  CHECK(p2.start == 1);
  CHECK(p2.end == 1);

  lce::Rng rng(616);
  for (int trial = 0; trial < 500; ++trial) {
    const Index n = 64;
    const Index max_len = 1 + static_cast<Index>(rng.uniform_int(16));
    std::vector<double> sl(n), el(n);
    std::vector<char> excl(n, 0);
    for (auto& x : sl) x = 4.0 * (rng.uniform() - 0.5);
    for (auto& x : el) x = 4.0 * (rng.uniform() - 0.5);
    for (auto& x : excl) x = rng.uniform() < 0.2 ? 1 : 0;
    excl[static_cast<std::size_t>(rng.uniform_int(64))] = 0;  // keep at least one candidate

    // brute force over every pair
    Index bs = -1, be = -1;
    double best = 0;
    for (Index s = 0; s < n; ++s)
      for (Index e = s; e < n && e - s + 1 <= max_len; ++e) {
        if (excl[static_cast<std::size_t>(s)] || excl[static_cast<std::size_t>(e)]) continue;
        const double sc = sl[static_cast<std::size_t>(s)] + el[static_cast<std::size_t>(e)];
        if (bs < 0 || sc > best) {
          bs = s;
          be = e;
          best = sc;
        }
      }
    auto got = decode_span(sl, el, max_len, excl);
    CHECK(got.start == bs);
    CHECK(got.end == be);
  }

  CHECK_THROWS_AS(decode_span(std::vector<double>{1.0}, std::vector<double>{1.0}, 5,
                              std::vector<char>{1}),
                  lce::ValueError);
}

TEST_CASE("decode_span tie-break prefers smallest start then smallest end") {
  std::vector<double> flat(6, 0.0);
  auto p = decode_span(flat, flat, 3, {});
  CHECK(p.start == 0);
  CHECK(p.end == 0);
}

TEST_CASE("checkpoint round trip reproduces forwards bitwise (both scalar paths)") {
  auto run = [](auto scalar_tag, const char* path) {
    using Scalar = decltype(scalar_tag);
    auto cfg = tiny_config("window-global", 2);
    Checkpoint<Scalar> ckpt;
    ckpt.config = cfg;
    ckpt.params = init_encoder_params<Scalar>(cfg, 29);
    ensure_head(ckpt.params, cfg, HeadKind::SeqCls, 3, 29);
    ckpt.step = 17;
    ckpt.rng_state = 999;
    ckpt.save(path);
    auto back = Checkpoint<Scalar>::load(path);
    CHECK(back.step == 17);
    CHECK(back.config.dim == cfg.dim);
    REQUIRE(back.params.entries.size() == ckpt.params.entries.size());
    for (std::size_t i = 0; i < back.params.entries.size(); ++i) {
      CHECK(back.params.entries[i].name == ckpt.params.entries[i].name);
      CHECK(*back.params.entries[i].values == *ckpt.params.entries[i].values);  // bitwise
    }
    const auto ids = some_ids(9, 3, cfg.vocab_size);
    Tape<Scalar> t1, t2;
    auto h1 = encode(t1, cfg, ckpt.params, ids, {0});
    auto h2 = encode(t2, back.config, back.params, ids, {0});
    CHECK(*h1.values == *h2.values);  // bitwise
    std::remove(path);
  };
  run(double{}, "t_ckpt_f64.bin");
  run(float{}, "t_ckpt_f32.bin");
}

TEST_CASE("checkpoint loader rejects wrong scalar width and corrupt files") {
  auto cfg = tiny_config();
  Checkpoint<float> ckpt;
  ckpt.config = cfg;
  ckpt.params = init_encoder_params<float>(cfg, 3);
  ckpt.save("t_ckpt_w.bin");
  CHECK_THROWS_AS(Checkpoint<double>::load("t_ckpt_w.bin"), lce::ValueError);
  {
    std::ofstream bad("t_ckpt_bad.bin", std::ios::binary);
    bad << "not a checkpoint";
  }
  CHECK_THROWS_AS(Checkpoint<float>::load("t_ckpt_bad.bin"), lce::IoError);
  std::remove("t_ckpt_w.bin");
  std::remove("t_ckpt_bad.bin");
}

TEST_CASE("position extension copies rows cyclically") {
  auto cfg = tiny_config();
  cfg.max_positions = 4;
  Checkpoint<double> ckpt;
  ckpt.config = cfg;
  ckpt.params = init_encoder_params<double>(cfg, 31);
  const auto original = *ckpt.params.at("pos_emb").values;
  extend_positions(ckpt, 10);
  CHECK(ckpt.config.max_positions == 10);
  const auto& grown = *ckpt.params.at("pos_emb").values;
  REQUIRE(grown.size() == 10u * static_cast<std::size_t>(cfg.dim));
  for (Index i = 0; i < 10; ++i)
    for (Index j = 0; j < cfg.dim; ++j)
      CHECK(grown[static_cast<std::size_t>(i * cfg.dim + j)] ==
            original[static_cast<std::size_t>((i % 4) * cfg.dim + j)]);
  // longer inputs now encode
  Tape<double> tape;
  auto h = encode(tape, ckpt.config, ckpt.params, some_ids(10, 1, cfg.vocab_size), {0});
  CHECK(h.shape == lce::Shape{10, cfg.dim});
  CHECK_THROWS_AS(extend_positions(ckpt, 4), lce::ValueError);
}

TEST_CASE("model config json round trip validates") {
  auto cfg = tiny_config("window-global-random");
  auto back = ModelConfig::from_json(cfg.to_json());
  CHECK(back.pattern.kind == "window-global-random");
  CHECK(back.ff_dim == cfg.ff_dim);
  ModelConfig bad = cfg;
  bad.dim = 9;  // not divisible by heads=2
  CHECK_THROWS_AS(bad.check(), lce::ValueError);
}
