#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "lce/tokenizer.hpp"

namespace lce::corpus {

enum class TaskKind { MlmText, Qa, Ner, DocCls, PairCls };

// Label value excluded from token-level losses (matches the loss op default).
inline constexpr int kIgnoreLabel = -100;

std::string task_kind_name(TaskKind kind);
TaskKind task_kind_from(const std::string& name);

inline constexpr std::array<const char*, 3> kNliLabels = {"entailment", "contradiction",
                                                          "neutral"};

// Unified record for every task format.
struct TaskExample {
  TaskKind kind = TaskKind::MlmText;
  std::string id;

  std::string text;  // mlm note / doc-cls document / qa context

  // qa
  std::string question;
  std::int64_t answer_start = -1;  // [start, end) character span into text
  std::int64_t answer_end = -1;
  std::string answer_text;

  // ner
  std::vector<std::string> tokens;
  std::vector<std::string> tags;

  // doc-cls (single or multi label)
  std::vector<int> labels;

  // pair-cls
  std::string premise;
  std::string hypothesis;
  int nli_label = -1;  // index into kNliLabels
};

// Throws ValueError naming the offending example when an invariant fails.
void validate(const TaskExample& example);

// The four-step note cleanup: drop [** ... **] placeholders, blank out
// characters that are neither alphanumeric nor punctuation, lowercase,
// collapse whitespace. Idempotent.
std::string preprocess_note(std::string_view raw);

struct SyntheticProfile {
  int num_classes = 2;
  bool multilabel = false;
  bool long_range = false;    // qa: plant the answer past min_prefix_words
  int min_prefix_words = 520; // guarantees answer token index > 512
  int filler_sentences = 4;   // baseline document length knob
  double sample_fraction = 1.0;  // deterministic under-sampling of the output
};

std::vector<TaskExample> gen_synthetic(TaskKind kind, int size, std::uint64_t seed,
                                       const SyntheticProfile& profile = {});

// Formats: "iob2col" (token TAB tag, blank line between sentences),
// "qa-json", "cls-json".
std::vector<TaskExample> load_dataset(const std::string& path, const std::string& format);
void save_dataset(const std::vector<TaskExample>& examples, const std::string& path,
                  const std::string& format);

// Split table plus the label/tag vocabulary shared by every split.
struct DatasetManifest {
  TaskKind task = TaskKind::DocCls;
  std::string format;
  std::map<std::string, std::string> splits;  // split name -> file path
  std::vector<std::string> label_names;
  std::vector<std::string> tag_names;
  bool multilabel = false;

  int num_classes() const;
  void save(const std::string& path) const;
  static DatasetManifest load(const std::string& path);
};

// Label vocabulary used when encoding windows.
struct LabelSpace {
  std::vector<std::string> tags;  // ner tag strings, id = index
  int num_classes = 0;
  bool multilabel = false;

  static LabelSpace infer(const std::vector<TaskExample>& examples);
  static LabelSpace from_manifest(const DatasetManifest& manifest);
  int tag_id(const std::string& tag) const;
};

enum class WindowMode { TruncateLong, SegmentShort };

WindowMode window_mode_from(const std::string& name);
std::string window_mode_name(WindowMode mode);

// Documents longer than this are cut before snippet tiling.
inline constexpr int kSegmentShortCap = 4096;

struct EncodedWindow {
  std::vector<int> input_ids;
  std::vector<std::int64_t> global_positions;  // CLS, plus question tokens for qa
  std::string parent_id;
  int snippet_index = 0;
  int snippet_count = 1;
  TaskKind kind = TaskKind::MlmText;

  // qa: inclusive token span of the answer, char offsets per position
  // (negative outside the context region).
  std::int64_t answer_start_tok = -1;
  std::int64_t answer_end_tok = -1;
  bool answerable = false;
  std::string gold_answer;
  std::int64_t context_begin = 0;
  std::int64_t context_end = 0;
  std::vector<std::pair<std::int64_t, std::int64_t>> offsets;
  std::string context_text;  // source context, for span extraction at eval

  // ner: per-position tag id or ignore; word alignment for evaluation.
  std::vector<int> token_labels;
  std::vector<std::int64_t> word_first_token;  // surviving words only
  std::vector<int> word_labels;                // every gold word

  // cls: single-label {id} or the set of positive class ids.
  std::vector<int> labels;
};

std::vector<EncodedWindow> window_examples(const std::vector<TaskExample>& examples,
                                           const bpe::BpeModel& tokenizer, int max_len,
                                           WindowMode mode, const LabelSpace& labels);

// Plain text helpers shared by the CLI.
std::vector<std::string> read_lines(const std::string& path);
void write_lines(const std::vector<std::string>& lines, const std::string& path);

}  // namespace lce::corpus
