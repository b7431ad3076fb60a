#include "lce/cli.hpp"

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "lce/bench.hpp"
#include "lce/corpus.hpp"
#include "lce/errors.hpp"
#include "lce/metrics.hpp"
#include "lce/model.hpp"
#include "lce/tokenizer.hpp"
#include "lce/training.hpp"

namespace lce::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string timestamp_utc() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ValueError(std::string("config: ") + e.what());
  }
}

json train_to_json(const train::TrainConfig& tc) {
  return {{"lr", tc.lr},
          {"batch_size", tc.batch_size},
          {"steps", tc.steps},
          {"epochs", tc.epochs},
          {"seed", tc.seed},
          {"lr_sweep", tc.lr_sweep},
          {"selection_metric", tc.selection_metric},
          {"masking_rate", tc.masking_rate},
          {"checkpoint_interval", tc.checkpoint_interval},
          {"max_len", tc.max_len},
          {"window_mode", corpus::window_mode_name(tc.window_mode)},
          {"pool", tc.pool},
          {"clip_norm", tc.clip_norm},
          {"max_answer_len", tc.max_answer_len}};
}

train::TrainConfig train_from_json(const json& j) {
  train::TrainConfig tc;
  if (j.is_null()) return tc;
  tc.lr = j.value("lr", tc.lr);
  tc.batch_size = j.value("batch_size", tc.batch_size);
  tc.steps = j.value("steps", tc.steps);
  tc.epochs = j.value("epochs", tc.epochs);
  tc.seed = j.value("seed", tc.seed);
  tc.lr_sweep = j.value("lr_sweep", tc.lr_sweep);
  tc.selection_metric = j.value("selection_metric", tc.selection_metric);
  tc.masking_rate = j.value("masking_rate", tc.masking_rate);
  tc.checkpoint_interval = j.value("checkpoint_interval", tc.checkpoint_interval);
  tc.max_len = j.value("max_len", tc.max_len);
  if (j.contains("window_mode"))
    tc.window_mode = corpus::window_mode_from(j.at("window_mode").get<std::string>());
  tc.pool = j.value("pool", tc.pool);
  tc.clip_norm = j.value("clip_norm", tc.clip_norm);
  tc.max_answer_len = j.value("max_answer_len", tc.max_answer_len);
  return tc;
}

// Shared command state resolved from config file and flag overrides.
struct Common {
  std::string config_path;
  std::string out_dir;
  json config = json::object();
  nn::ModelConfig model;
  bool model_vocab_explicit = false;
  train::TrainConfig train_cfg;

  void load() {
    config = load_config(config_path);
    if (config.contains("model")) {
      model = nn::ModelConfig::from_json(config.at("model"));
      model_vocab_explicit = config.at("model").contains("vocab_size");
    }
    if (config.contains("train")) train_cfg = train_from_json(config.at("train"));
  }

  void write_manifest(const std::string& command, const json& extra) const {
    if (out_dir.empty()) throw ValueError("missing --out directory");
    fs::create_directories(out_dir);
    json manifest{{"schema", 1},
                  {"command", command},
                  {"config_path", config_path},
                  {"config", {{"model", model.to_json()}, {"train", train_to_json(train_cfg)}}},
                  {"seed", train_cfg.seed},
                  {"out_dir", out_dir},
                  {"started_at", timestamp_utc()}};
    for (const auto& [k, v] : extra.items()) manifest[k] = v;
    std::ofstream out(fs::path(out_dir) / "manifest.json", std::ios::binary);
    if (!out) throw IoError("cannot write manifest in " + out_dir);
    out << manifest.dump(2) << '\n';
  }
};

void add_common(CLI::App* cmd, Common& state) {
  cmd->add_option("--config", state.config_path, "JSON config file (model/train sections)");
  cmd->add_option("--out", state.out_dir, "output directory");
}

std::vector<double> parse_sweep(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw ValueError("bad lr-sweep entry: '" + item + "'");
    }
  }
  if (out.empty()) throw ValueError("empty lr sweep");
  return out;
}

corpus::TaskKind parse_kind(const std::string& name) { return corpus::task_kind_from(name); }

std::string format_for(corpus::TaskKind kind) {
  switch (kind) {
    case corpus::TaskKind::Qa: return "qa-json";
    case corpus::TaskKind::Ner: return "iob2col";
    case corpus::TaskKind::DocCls:
    case corpus::TaskKind::PairCls: return "cls-json";
    case corpus::TaskKind::MlmText: return "lines";
  }
  throw ValueError("no file format for kind");
}

std::string split_filename(corpus::TaskKind kind, const std::string& split) {
  return split + (kind == corpus::TaskKind::Ner ? ".tsv" : ".json");
}

// ---------------------------------------------------------------------------
// Subcommand bodies.
// ---------------------------------------------------------------------------

int cmd_gen_synthetic(Common& state, const std::string& kind_name, int n_train, int n_dev,
                      int n_test, const corpus::SyntheticProfile& profile) {
  const corpus::TaskKind kind = parse_kind(kind_name);
  state.write_manifest("gen-synthetic", {{"kind", kind_name},
                                         {"n_train", n_train},
                                         {"n_dev", n_dev},
                                         {"n_test", n_test},
                                         {"long_range", profile.long_range},
                                         {"sample_fraction", profile.sample_fraction}});
  const fs::path dir(state.out_dir);

  if (kind == corpus::TaskKind::MlmText) {
    auto notes = corpus::gen_synthetic(kind, n_train, state.train_cfg.seed, profile);
    std::vector<std::string> lines;
    for (auto& ex : notes) lines.push_back(ex.text);
    corpus::write_lines(lines, (dir / "notes.txt").string());
    std::cout << "wrote " << lines.size() << " raw notes to " << (dir / "notes.txt").string()
              << "\n";
    return 0;
  }

  corpus::DatasetManifest manifest;
  manifest.task = kind;
  manifest.format = format_for(kind);
  manifest.multilabel = profile.multilabel;
  std::vector<corpus::TaskExample> all;
  const std::vector<std::pair<std::string, int>> split_sizes = {
      {"train", n_train}, {"dev", n_dev}, {"test", n_test}};
  std::uint64_t split_salt = 0;
  for (const auto& [split, size] : split_sizes) {
    if (size <= 0) continue;
    auto examples =
        corpus::gen_synthetic(kind, size, state.train_cfg.seed + split_salt, profile);
    ++split_salt;
    const std::string filename = split_filename(kind, split);
    corpus::save_dataset(examples, (dir / filename).string(), manifest.format);
    manifest.splits[split] = filename;
    all.insert(all.end(), examples.begin(), examples.end());
  }
  const auto labels = corpus::LabelSpace::infer(all);
  manifest.tag_names = labels.tags;
  for (int c = 0; c < labels.num_classes; ++c) manifest.label_names.push_back("class_" + std::to_string(c));
  if (kind == corpus::TaskKind::PairCls)
    manifest.label_names = {corpus::kNliLabels.begin(), corpus::kNliLabels.end()};
  manifest.save((dir / "dataset.json").string());
  std::cout << "wrote dataset manifest " << (dir / "dataset.json").string() << "\n";
  return 0;
}

int cmd_preprocess(Common& state, const std::string& input) {
  state.write_manifest("preprocess", {{"input", input}});
  const auto raw = corpus::read_lines(input);
  std::vector<std::string> cleaned;
  for (const auto& line : raw) {
    auto c = corpus::preprocess_note(line);
    if (!c.empty()) cleaned.push_back(std::move(c));
  }
  const auto out_path = (fs::path(state.out_dir) / "corpus.txt").string();
  corpus::write_lines(cleaned, out_path);
  std::cout << "preprocessed " << raw.size() << " notes into " << cleaned.size() << " lines at "
            << out_path << "\n";
  return 0;
}

int cmd_train_tokenizer(Common& state, const std::string& input, int vocab_size) {
  state.write_manifest("train-tokenizer", {{"input", input}, {"vocab_size", vocab_size}});
  const auto lines = corpus::read_lines(input);
  auto model = bpe::BpeModel::train(lines, vocab_size);
  const auto out_path = (fs::path(state.out_dir) / "tokenizer.json").string();
  model.save(out_path);
  std::cout << "trained tokenizer: vocab " << model.vocab_size() << " (" << model.merges().size()
            << " merges) at " << out_path << "\n";
  return 0;
}

int cmd_pretrain(Common& state, const std::string& corpus_path, const std::string& tokenizer_path,
                 const std::string& init_path, bool resume) {
  auto tokenizer = bpe::BpeModel::load(tokenizer_path);
  if (!state.model_vocab_explicit) state.model.vocab_size = tokenizer.vocab_size();
  state.model.check();
  state.train_cfg.check();
  state.write_manifest("pretrain", {{"corpus", corpus_path},
                                    {"tokenizer", tokenizer_path},
                                    {"init", init_path},
                                    {"resume", resume}});
  const auto lines = corpus::read_lines(corpus_path);
  std::optional<nn::Checkpoint<float>> init;
  if (!init_path.empty()) init = nn::Checkpoint<float>::load(init_path);
  auto result = train::pretrain<float>(
      state.model, std::move(init), lines, tokenizer, state.train_cfg, state.out_dir,
      [](const train::StepRecord& sr) {
        if (sr.step % 50 == 0)
          std::cout << "step " << sr.step << " loss " << sr.loss << "\n";
      },
      resume);
  const fs::path dir(state.out_dir);
  result.checkpoint.save((dir / "checkpoint.bin").string());
  result.record.save_jsonl((dir / "run_record.jsonl").string());
  std::cout << "pretrained " << result.record.steps.size() << " steps; final loss "
            << (result.record.steps.empty() ? 0.0 : result.record.steps.back().loss) << "\n";
  return 0;
}

int cmd_finetune(Common& state, const std::string& data_path, const std::string& tokenizer_path,
                 const std::string& init_path) {
  auto tokenizer = bpe::BpeModel::load(tokenizer_path);
  if (!state.model_vocab_explicit) state.model.vocab_size = tokenizer.vocab_size();
  state.model.check();
  state.train_cfg.check();
  state.write_manifest("finetune", {{"data", data_path},
                                    {"tokenizer", tokenizer_path},
                                    {"init", init_path}});
  const auto manifest = corpus::DatasetManifest::load(data_path);
  auto data = train::prepare_task(manifest, tokenizer, state.train_cfg.max_len,
                                  state.train_cfg.window_mode);

  nn::Checkpoint<float> init;
  if (!init_path.empty()) {
    init = nn::Checkpoint<float>::load(init_path);
    if (init.config.max_positions < state.model.max_positions)
      nn::extend_positions(init, state.model.max_positions);
  } else {
    init.config = state.model;
    init.params = nn::init_encoder_params<float>(state.model, state.train_cfg.seed);
  }
  auto result = train::finetune(init, data, state.train_cfg);
  const fs::path dir(state.out_dir);
  result.best.save((dir / "best_checkpoint.bin").string());
  result.record.save_jsonl((dir / "run_record.jsonl").string());
  std::cout << "selected lr " << result.record.selected_lr << " epoch "
            << result.record.selected_epoch << " with dev " << result.record.selection_metric
            << " = " << result.record.selected_value << "\n";
  return 0;
}

int cmd_evaluate(Common& state, const std::string& data_path, const std::string& tokenizer_path,
                 const std::string& checkpoint_path, const std::string& split,
                 const std::string& variant_name) {
  auto tokenizer = bpe::BpeModel::load(tokenizer_path);
  state.write_manifest("evaluate", {{"data", data_path},
                                    {"tokenizer", tokenizer_path},
                                    {"checkpoint", checkpoint_path},
                                    {"split", split}});
  const auto manifest = corpus::DatasetManifest::load(data_path);
  auto data = train::prepare_task(manifest, tokenizer, state.train_cfg.max_len,
                                  state.train_cfg.window_mode);
  auto ckpt = nn::Checkpoint<float>::load(checkpoint_path);
  nn::ensure_head(ckpt.params, ckpt.config, train::head_for(data.task), data.labels.num_classes,
                  state.train_cfg.seed);
  train::EvalOptions opts;
  opts.pattern_seed = ckpt.rng_state;
  opts.max_answer_len = state.train_cfg.max_answer_len;
  opts.pool = nn::pool_from(state.train_cfg.pool);
  opts.threads = thread_budget();
  auto report =
      train::evaluate(ckpt.config, ckpt.params, data.task, data.labels, data.split(split), opts);

  const fs::path dir(state.out_dir);
  {
    std::ofstream out(dir / "metrics.json", std::ios::binary);
    if (!out) throw IoError("cannot write metrics.json");
    out << report.to_json();
  }
  std::vector<std::string> metric_names;
  for (const auto& [name, _] : report.values) metric_names.push_back(name);
  const std::string table =
      metrics::render_table(metric_names, {{variant_name, report.values}});
  {
    std::ofstream out(dir / "results_table.txt", std::ios::binary);
    out << table;
  }
  std::cout << table;
  return 0;
}

int cmd_bench(Common& state, bench::SweepConfig cfg) {
  cfg.seed = state.train_cfg.seed;
  state.write_manifest("bench", {{"patterns", cfg.patterns},
                                 {"n_list", cfg.n_list},
                                 {"d", cfg.d},
                                 {"trials", cfg.trials}});
  auto points = bench::run_sweep(cfg);
  const fs::path dir(state.out_dir);
  {
    std::ofstream out(dir / "bench.csv", std::ios::binary);
    if (!out) throw IoError("cannot write bench.csv");
    out << bench::to_csv(points);
  }
  const auto slopes = bench::fit_scaling(points);
  json scaling = json::object();
  for (const auto& [pattern, slope] : slopes) scaling[pattern] = slope;
  {
    std::ofstream out(dir / "scaling.json", std::ios::binary);
    out << scaling.dump(2) << '\n';
  }
  for (const auto& [pattern, slope] : slopes)
    std::cout << pattern << ": fitted pair-count exponent " << slope << "\n";
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"lce: long-context clinical encoder workbench"};
  app.require_subcommand(1);
  app.footer("Environment: LCE_THREADS caps inference worker threads (default 1).");

  Common state;
  std::uint64_t seed_flag = 0;
  bool seed_set = false;

  // gen-synthetic
  auto* gen = app.add_subcommand("gen-synthetic", "generate a synthetic clinical-style dataset");
  add_common(gen, state);
  std::string kind = "doc-cls";
  int n_train = 100, n_dev = 20, n_test = 20;
  corpus::SyntheticProfile profile;
  gen->add_option("--kind", kind, "mlm | qa | ner | doc-cls | pair-cls")->required();
  gen->add_option("--n-train", n_train, "training examples");
  gen->add_option("--n-dev", n_dev, "dev examples");
  gen->add_option("--n-test", n_test, "test examples");
  gen->add_flag("--long-range", profile.long_range, "qa: plant answers past 512 tokens");
  gen->add_option("--min-prefix-words", profile.min_prefix_words,
                  "qa long-range prefix length in words");
  gen->add_option("--num-classes", profile.num_classes, "doc-cls class count");
  gen->add_flag("--multilabel", profile.multilabel, "doc-cls: multilabel findings");
  gen->add_option("--filler-sentences", profile.filler_sentences, "document length knob");
  gen->add_option("--sample-fraction", profile.sample_fraction,
                  "deterministic under-sampling fraction");

  // preprocess
  auto* pre = app.add_subcommand("preprocess", "clean raw notes into a training corpus");
  add_common(pre, state);
  std::string pre_in;
  pre->add_option("--in", pre_in, "raw notes, one per line")->required();

  // train-tokenizer
  auto* tokt = app.add_subcommand("train-tokenizer", "train the byte-level BPE tokenizer");
  add_common(tokt, state);
  std::string tok_in;
  int vocab_size = 8192;
  tokt->add_option("--in", tok_in, "preprocessed corpus")->required();
  tokt->add_option("--vocab-size", vocab_size, "target vocabulary size");

  // pretrain
  auto* pt = app.add_subcommand("pretrain", "masked-language-model pre-training");
  add_common(pt, state);
  std::string pt_corpus, pt_tok, pt_init;
  bool pt_resume = false;
  pt->add_option("--corpus", pt_corpus, "preprocessed corpus")->required();
  pt->add_option("--tokenizer", pt_tok, "tokenizer.json")->required();
  pt->add_option("--init", pt_init, "donor checkpoint for continued pre-training");
  pt->add_flag("--resume", pt_resume, "treat --init as an interrupted run to resume");
  int pt_steps = -1;
  double pt_lr = -1;
  pt->add_option("--steps", pt_steps, "optimizer steps");
  pt->add_option("--lr", pt_lr, "learning rate");

  // finetune
  auto* ft = app.add_subcommand("finetune", "task fine-tuning with the lr sweep protocol");
  add_common(ft, state);
  std::string ft_data, ft_tok, ft_init, ft_sweep, ft_mode, ft_pool;
  int ft_max_len = -1, ft_epochs = -1, ft_batch = -1;
  ft->add_option("--data", ft_data, "dataset manifest (dataset.json)")->required();
  ft->add_option("--tokenizer", ft_tok, "tokenizer.json")->required();
  ft->add_option("--init", ft_init, "checkpoint to fine-tune (omit to train from scratch)");
  ft->add_option("--max-len", ft_max_len, "window length: 3072 (long) or 384 (short)");
  ft->add_option("--window-mode", ft_mode, "truncate-long | segment-short");
  ft->add_option("--pool", ft_pool, "snippet pooling: mean | max");
  ft->add_option("--lr-sweep", ft_sweep, "comma-separated learning rates");
  ft->add_option("--epochs", ft_epochs, "epochs per sweep cell");
  ft->add_option("--batch-size", ft_batch, "gradient accumulation batch");

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "run the task metric suite on a checkpoint");
  add_common(ev, state);
  std::string ev_data, ev_tok, ev_ckpt, ev_split = "test", ev_name = "model";
  int ev_max_len = -1;
  std::string ev_mode, ev_pool;
  ev->add_option("--data", ev_data, "dataset manifest")->required();
  ev->add_option("--tokenizer", ev_tok, "tokenizer.json")->required();
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint to evaluate")->required();
  ev->add_option("--split", ev_split, "dataset split (default test)");
  ev->add_option("--max-len", ev_max_len, "window length");
  ev->add_option("--window-mode", ev_mode, "truncate-long | segment-short");
  ev->add_option("--pool", ev_pool, "mean | max");
  ev->add_option("--name", ev_name, "variant name for the results table");

  // bench
  auto* bn = app.add_subcommand("bench", "attention scaling benchmark");
  add_common(bn, state);
  bench::SweepConfig sweep;
  std::string bn_patterns, bn_ns;
  bn->add_option("--patterns", bn_patterns, "comma-separated pattern names");
  bn->add_option("--n", bn_ns, "comma-separated sequence lengths");
  bn->add_option("--d", sweep.d, "head dimension");
  bn->add_option("--trials", sweep.trials, "timing trials per point");
  bn->add_option("--window", sweep.window, "sparse window width (odd)");
  bn->add_option("--globals", sweep.globals, "number of global tokens");
  bn->add_option("--block-size", sweep.block_size, "random-attention block size");
  bn->add_option("--random-blocks", sweep.random_blocks, "random blocks per row");
  bn->add_option("--full-ceiling", sweep.full_ceiling_n, "skip Full kernels beyond this n");

  // flags shared by every subcommand
  std::string pattern_flag;
  for (auto* cmd : {gen, pre, tokt, pt, ft, ev, bn}) {
    cmd->add_option("--seed", seed_flag, "run seed")->each([&seed_set](const std::string&) {
      seed_set = true;
    });
    cmd->add_option("--pattern", pattern_flag,
                    "attention pattern: full | window-global | window-global-random");
  }

  std::vector<std::string> argv_copy(args);
  std::reverse(argv_copy.begin(), argv_copy.end());
  try {
    app.parse(argv_copy);
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  }

  try {
    state.load();
    // flag > config > default
    if (seed_set) state.train_cfg.seed = seed_flag;
    if (!pattern_flag.empty()) state.model.pattern.kind = pattern_flag;
    if (pt->parsed()) {
      if (pt_steps >= 0) state.train_cfg.steps = pt_steps;
      if (pt_lr > 0) state.train_cfg.lr = pt_lr;
    }
    if (ft->parsed()) {
      if (ft_max_len > 0) state.train_cfg.max_len = ft_max_len;
      if (!ft_mode.empty()) state.train_cfg.window_mode = corpus::window_mode_from(ft_mode);
      if (!ft_pool.empty()) state.train_cfg.pool = ft_pool;
      if (!ft_sweep.empty()) state.train_cfg.lr_sweep = parse_sweep(ft_sweep);
      if (ft_epochs > 0) state.train_cfg.epochs = ft_epochs;
      if (ft_batch > 0) state.train_cfg.batch_size = ft_batch;
    }
    if (ev->parsed()) {
      if (ev_max_len > 0) state.train_cfg.max_len = ev_max_len;
      if (!ev_mode.empty()) state.train_cfg.window_mode = corpus::window_mode_from(ev_mode);
      if (!ev_pool.empty()) state.train_cfg.pool = ev_pool;
    }

    if (gen->parsed()) return cmd_gen_synthetic(state, kind, n_train, n_dev, n_test, profile);
    if (pre->parsed()) return cmd_preprocess(state, pre_in);
    if (tokt->parsed()) return cmd_train_tokenizer(state, tok_in, vocab_size);
    if (pt->parsed()) return cmd_pretrain(state, pt_corpus, pt_tok, pt_init, pt_resume);
    if (ft->parsed()) return cmd_finetune(state, ft_data, ft_tok, ft_init);
    if (ev->parsed()) return cmd_evaluate(state, ev_data, ev_tok, ev_ckpt, ev_split, ev_name);
    if (bn->parsed()) {
      if (!bn_patterns.empty()) {
        sweep.patterns.clear();
        std::stringstream ss(bn_patterns);
        std::string item;
        while (std::getline(ss, item, ',')) sweep.patterns.push_back(item);
      }
      if (!bn_ns.empty()) {
        sweep.n_list.clear();
        std::stringstream ss(bn_ns);
        std::string item;
        while (std::getline(ss, item, ',')) sweep.n_list.push_back(std::stoll(item));
      }
      return cmd_bench(state, sweep);
    }
    std::cerr << "usage error: no subcommand\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace lce::cli
