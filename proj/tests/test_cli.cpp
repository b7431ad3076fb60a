#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "lce/cli.hpp"
#include "lce/corpus.hpp"
#include "lce/model.hpp"
#include "lce/tokenizer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str(const std::string& sub = "") const { return (path / sub).string(); }
};

json read_json(const std::string& path) {
  std::ifstream in(path);
  REQUIRE(in.good());
  return json::parse(in);
}

}  // namespace

TEST_CASE("unknown flags and missing subcommands exit 2") {
  CHECK(lce::cli::run({}) == 2);
  CHECK(lce::cli::run({"gen-synthetic", "--kind", "qa", "--no-such-flag"}) == 2);
  CHECK(lce::cli::run({"not-a-command"}) == 2);
}

TEST_CASE("validation failures exit 1 with the offending field") {
  TempDir dir("lce_cli_val");
  // missing input file
  CHECK(lce::cli::run({"preprocess", "--in", dir.str("nope.txt"), "--out", dir.str("o")}) == 1);
  // bad kind
  CHECK(lce::cli::run({"gen-synthetic", "--kind", "bogus", "--out", dir.str("o2")}) == 1);
  // config with an invalid model field
  {
    std::ofstream cfg(dir.str("bad.json"));
    cfg << R"({"model": {"dim": 10, "heads": 3}})";
  }
  CHECK(lce::cli::run({"gen-synthetic", "--kind", "qa", "--config", dir.str("bad.json"),
                       "--out", dir.str("o3")}) == 1);
}

TEST_CASE("gen-synthetic writes a manifest before dataset files, and the dataset loads") {
  TempDir dir("lce_cli_gen");
  CHECK(lce::cli::run({"gen-synthetic", "--kind", "ner", "--n-train", "6", "--n-dev", "3",
                       "--n-test", "3", "--seed", "9", "--out", dir.str()}) == 0);
  CHECK(fs::exists(dir.path / "manifest.json"));
  const auto manifest = read_json(dir.str("manifest.json"));
  CHECK(manifest.at("command") == "gen-synthetic");
  CHECK(manifest.at("seed") == 9);

  const auto ds = lce::corpus::DatasetManifest::load(dir.str("dataset.json"));
  CHECK(ds.task == lce::corpus::TaskKind::Ner);
  auto train = lce::corpus::load_dataset(ds.splits.at("train"), ds.format);
  CHECK(train.size() == 6);
  CHECK(!ds.tag_names.empty());
}

TEST_CASE("seed flag overrides the config value") {
  TempDir dir("lce_cli_seed");
  {
    std::ofstream cfg(dir.str("cfg.json"));
    cfg << R"({"train": {"seed": 11}})";
  }
  CHECK(lce::cli::run({"gen-synthetic", "--kind", "qa", "--n-train", "2", "--n-dev", "1",
                       "--n-test", "1", "--config", dir.str("cfg.json"), "--seed", "42", "--out",
                       dir.str()}) == 0);
  CHECK(read_json(dir.str("manifest.json")).at("seed") == 42);

  TempDir dir2("lce_cli_seed2");
  CHECK(lce::cli::run({"gen-synthetic", "--kind", "qa", "--n-train", "2", "--n-dev", "1",
                       "--n-test", "1", "--config", dir.str("cfg.json"), "--out",
                       dir2.str()}) == 0);
  CHECK(read_json(dir2.str("manifest.json")).at("seed") == 11);
}

TEST_CASE("preprocess and train-tokenizer produce the pipeline artifacts") {
  TempDir dir("lce_cli_pre");
  CHECK(lce::cli::run({"gen-synthetic", "--kind", "mlm", "--n-train", "12", "--seed", "3",
                       "--out", dir.str("notes")}) == 0);
  CHECK(lce::cli::run({"preprocess", "--in", dir.str("notes/notes.txt"), "--out",
                       dir.str("corpus")}) == 0);
  const auto lines = lce::corpus::read_lines(dir.str("corpus/corpus.txt"));
  CHECK(lines.size() == 12);
  for (const auto& line : lines) {
    CHECK(line.find("[**") == std::string::npos);
    for (char c : line) CHECK((c == ' ' || (c >= 33 && c <= 126)));
  }
  CHECK(lce::cli::run({"train-tokenizer", "--in", dir.str("corpus/corpus.txt"), "--vocab-size",
                       "300", "--out", dir.str("tok")}) == 0);
  auto tok = lce::bpe::BpeModel::load(dir.str("tok/tokenizer.json"));
  CHECK(tok.vocab_size() == 300);
}

TEST_CASE("evaluate on an untrained checkpoint lands in the chance band on balanced data") {
  TempDir dir("lce_cli_eval");
  CHECK(lce::cli::run({"gen-synthetic", "--kind", "mlm", "--n-train", "16", "--seed", "21",
                       "--out", dir.str("notes")}) == 0);
  CHECK(lce::cli::run({"preprocess", "--in", dir.str("notes/notes.txt"), "--out",
                       dir.str("corpus")}) == 0);
  CHECK(lce::cli::run({"train-tokenizer", "--in", dir.str("corpus/corpus.txt"), "--vocab-size",
                       "300", "--out", dir.str("tok")}) == 0);
  CHECK(lce::cli::run({"gen-synthetic", "--kind", "doc-cls", "--n-train", "4", "--n-dev", "2",
                       "--n-test", "200", "--seed", "77", "--out", dir.str("data")}) == 0);

  // untrained checkpoint written directly
  auto tok = lce::bpe::BpeModel::load(dir.str("tok/tokenizer.json"));
  lce::nn::ModelConfig cfg;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.dim = 16;
  cfg.ff_dim = 32;
  cfg.max_positions = 96;
  cfg.vocab_size = tok.vocab_size();
  cfg.pattern.kind = "full";
  lce::nn::Checkpoint<float> ckpt;
  ckpt.config = cfg;
  ckpt.params = lce::nn::init_encoder_params<float>(cfg, 4321);
  lce::nn::ensure_head(ckpt.params, cfg, lce::nn::HeadKind::SeqCls, 2, 4321);
  ckpt.save(dir.str("ckpt.bin"));

  {
    std::ofstream cfg_file(dir.str("eval.json"));
    cfg_file << R"({"train": {"max_len": 96}})";
  }
  CHECK(lce::cli::run({"evaluate", "--data", dir.str("data/dataset.json"), "--tokenizer",
                       dir.str("tok/tokenizer.json"), "--checkpoint", dir.str("ckpt.bin"),
                       "--split", "test", "--config", dir.str("eval.json"), "--out",
                       dir.str("ev")}) == 0);
  const auto metrics = read_json(dir.str("ev/metrics.json"));
  const double acc = metrics.at("metrics").at("accuracy").get<double>();
  CHECK(acc >= 0.35);
  CHECK(acc <= 0.65);
  CHECK(fs::exists(dir.path / "ev" / "results_table.txt"));
  CHECK(fs::exists(dir.path / "ev" / "manifest.json"));
}

TEST_CASE("bench subcommand emits csv and fitted exponents") {
  TempDir dir("lce_cli_bench");
  CHECK(lce::cli::run({"bench", "--n", "32,64,128", "--d", "4", "--trials", "3", "--out",
                       dir.str()}) == 0);
  const auto scaling = read_json(dir.str("scaling.json"));
  CHECK(scaling.at("full").get<double>() == doctest::Approx(2.0).epsilon(1e-9));
  const auto csv = lce::corpus::read_lines(dir.str("bench.csv"));
  CHECK(csv.size() == 10);  // header + 3 patterns x 3 sizes
  CHECK(csv[0] == "pattern,n,pairs,peak_elems,flops,ms_median");
}
