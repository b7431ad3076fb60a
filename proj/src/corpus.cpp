#include "lce/corpus.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "lce/errors.hpp"
#include "lce/rng.hpp"

namespace lce::corpus {
namespace {

namespace fs = std::filesystem;

const std::array<const char*, 20> kDrugs = {
    "metoprolol", "lisinopril",   "aspirin",     "warfarin",   "heparin",
    "insulin",    "furosemide",   "atorvastatin","amiodarone", "vancomycin",
    "ceftriaxone","morphine",     "fentanyl",    "propofol",   "midazolam",
    "albuterol",  "prednisone",   "omeprazole",  "gabapentin", "clopidogrel"};

const std::array<const char*, 12> kSymptoms = {
    "chest pain", "shortness of breath", "nausea",    "dizziness",   "fatigue",
    "fever",      "productive cough",    "headache",  "palpitations","lower extremity edema",
    "confusion",  "generalized weakness"};

// The seven thoracic findings used for multilabel generation.
const std::array<const char*, 7> kFindings = {"cardiomegaly", "edema",        "consolidation",
                                              "pneumonia",    "atelectasis",  "pneumothorax",
                                              "pleural effusion"};

const std::array<const char*, 8> kClassMarkers = {"dialysis",  "intubation", "thoracentesis",
                                                  "angiogram", "colonoscopy", "tracheostomy",
                                                  "paracentesis", "bronchoscopy"};

const std::array<const char*, 6> kFreq = {"daily", "twice daily", "nightly",
                                          "every morning", "as needed", "every 8 hours"};

std::string pick(Rng& rng, const char* const* bank, std::size_t n) {
  return bank[rng.uniform_int(n)];
}

std::string number(Rng& rng, int lo, int hi) {
  return std::to_string(lo + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(hi - lo + 1))));
}

// One clinical-flavored filler sentence. Numeric fields keep byte-pair merges
// from collapsing whole sentences into single tokens.
std::string filler_sentence(Rng& rng) {
  switch (rng.uniform_int(8)) {
    case 0:
      return "patient remains afebrile with stable vital signs overnight .";
    case 1:
      return "bp " + number(rng, 90, 180) + "/" + number(rng, 50, 100) + " hr " +
             number(rng, 55, 120) + " rr " + number(rng, 12, 28) + " spo2 " +
             number(rng, 90, 100) + "% on room air .";
    case 2:
      return "labs notable for sodium " + number(rng, 130, 148) + " potassium " +
             number(rng, 3, 5) + "." + number(rng, 0, 9) + " creatinine " + number(rng, 0, 3) +
             "." + number(rng, 0, 9) + " .";
    case 3:
      return "continue " + pick(rng, kDrugs.data(), kDrugs.size()) + " " +
             number(rng, 5, 400) + " mg " + pick(rng, kFreq.data(), kFreq.size()) + " .";
    case 4:
      return "lungs clear to auscultation bilaterally with no wheezes noted .";
    case 5:
      return "patient reports " + pick(rng, kSymptoms.data(), kSymptoms.size()) +
             " improving since admission .";
    case 6:
      return "repeat imaging on hospital day " + number(rng, 1, 14) +
             " showed no interval change .";
    default:
      return "plan to reassess volume status and electrolytes in the morning .";
  }
}

std::string filler_words(Rng& rng, int min_words) {
  std::string out;
  int words = 0;
  while (words < min_words) {
    std::string s = filler_sentence(rng);
    words += static_cast<int>(std::count(s.begin(), s.end(), ' ')) + 1;
    if (!out.empty()) out += " ";
    out += s;
  }
  return out;
}

int count_words(const std::string& s) {
  int words = 0;
  bool in_word = false;
  for (char c : s) {
    if (c == ' ') {
      in_word = false;
    } else if (!in_word) {
      in_word = true;
      ++words;
    }
  }
  return words;
}

TaskExample make_qa(Rng& rng, int index, const SyntheticProfile& profile) {
  TaskExample ex;
  ex.kind = TaskKind::Qa;
  ex.id = "qa-" + std::to_string(index);
  ex.question = "what was the principal medication administered ?";

  const int prefix_words = profile.long_range ? profile.min_prefix_words
                                              : 8 + static_cast<int>(rng.uniform_int(40));
  std::string context = filler_words(rng, prefix_words);
  context += " the principal medication administered was ";
  const std::string answer = pick(rng, kDrugs.data(), kDrugs.size()) + std::string(" ") +
                             number(rng, 5, 400) + " mg";
  ex.answer_start = static_cast<std::int64_t>(context.size());
  context += answer;
  ex.answer_end = static_cast<std::int64_t>(context.size());
  ex.answer_text = answer;
  context += " daily . " + filler_words(rng, 10 + static_cast<int>(rng.uniform_int(30)));
  ex.text = std::move(context);
  return ex;
}

TaskExample make_ner(Rng& rng, int index) {
  TaskExample ex;
  ex.kind = TaskKind::Ner;
  ex.id = "ner-" + std::to_string(index);
  auto push_plain = [&ex](const std::string& words) {
    std::istringstream in(words);
    std::string w;
    while (in >> w) {
      ex.tokens.push_back(w);
      ex.tags.push_back("O");
    }
  };
  auto push_entity = [&ex](const std::string& words, const std::string& type) {
    std::istringstream in(words);
    std::string w;
    bool first = true;
    while (in >> w) {
      ex.tokens.push_back(w);
      ex.tags.push_back((first ? "B-" : "I-") + type);
      first = false;
    }
  };
  const int clauses = 1 + static_cast<int>(rng.uniform_int(3));
  for (int c = 0; c < clauses; ++c) {
    switch (rng.uniform_int(3)) {
      case 0:
        push_plain("the patient was started on");
        push_entity(pick(rng, kDrugs.data(), kDrugs.size()), "MED");
        push_plain("for symptom control");
        break;
      case 1:
        push_plain("she continues to endorse");
        push_entity(pick(rng, kSymptoms.data(), kSymptoms.size()), "SYM");
        break;
      default:
        push_plain("imaging demonstrated");
        push_entity(pick(rng, kFindings.data(), kFindings.size()), "FIND");
        push_plain("without progression");
        break;
    }
  }
  ex.tokens.push_back(".");
  ex.tags.push_back("O");
  return ex;
}

TaskExample make_doc_cls(Rng& rng, int index, const SyntheticProfile& profile) {
  TaskExample ex;
  ex.kind = TaskKind::DocCls;
  ex.id = "cls-" + std::to_string(index);
  const int classes = std::max(2, profile.num_classes);
  std::vector<std::string> sentences;
  for (int s = 0; s < profile.filler_sentences; ++s) sentences.push_back(filler_sentence(rng));
  if (profile.multilabel) {
    const int usable = std::min(classes, static_cast<int>(kFindings.size()));
    for (int c = 0; c < usable; ++c) {
      if (rng.uniform() < 0.4) ex.labels.push_back(c);
    }
    // labels carry at least one class id
    if (ex.labels.empty()) ex.labels.push_back(static_cast<int>(rng.uniform_int(
        static_cast<std::uint64_t>(usable))));
    for (int c : ex.labels)
      sentences.push_back(std::string("impression notable for ") +
                          kFindings[static_cast<std::size_t>(c)] + " on todays film .");
  } else {
    const int label = index % classes;
    ex.labels.push_back(label);
    if (label > 0) {
      // class 0 is "no marker"; class c plants its marker procedure
      sentences.insert(sentences.begin() + static_cast<std::ptrdiff_t>(
                                                rng.uniform_int(sentences.size() + 1)),
                       std::string("patient required urgent ") +
                           kClassMarkers[static_cast<std::size_t>(label - 1) %
                                         kClassMarkers.size()] +
                           " during the stay .");
    }
  }
  std::string text;
  for (const auto& s : sentences) {
    if (!text.empty()) text += " ";
    text += s;
  }
  ex.text = std::move(text);
  return ex;
}

TaskExample make_pair_cls(Rng& rng, int index) {
  TaskExample ex;
  ex.kind = TaskKind::PairCls;
  ex.id = "nli-" + std::to_string(index);
  const std::size_t a = rng.uniform_int(kSymptoms.size());
  std::size_t b = rng.uniform_int(kSymptoms.size() - 1);
  if (b >= a) ++b;
  std::size_t c = rng.uniform_int(kSymptoms.size() - 2);
  if (c >= std::min(a, b)) ++c;
  if (c >= std::max(a, b)) ++c;
  ex.premise = std::string("the patient reports ") + kSymptoms[a] + " and " + kSymptoms[b] +
               " since yesterday .";
  ex.nli_label = index % 3;
  switch (ex.nli_label) {
    case 0:
      ex.hypothesis = std::string("the patient reports ") + kSymptoms[a] + " .";
      break;
    case 1:
      ex.hypothesis = std::string("the patient denies ") + kSymptoms[a] + " .";
      break;
    default:
      ex.hypothesis = std::string("the patient reports ") + kSymptoms[c] + " .";
      break;
  }
  return ex;
}

// Raw note for the MLM corpus: uppercase fragments, de-identification
// placeholders and stray control bytes, so preprocessing has real work to do.
TaskExample make_mlm(Rng& rng, int index) {
  TaskExample ex;
  ex.kind = TaskKind::MlmText;
  ex.id = "note-" + std::to_string(index);
  std::string note = "[**" + number(rng, 2020, 2026) + "-" + number(rng, 1, 12) + "-" +
                     number(rng, 1, 28) + "**]  ADMISSION NOTE for [**Patient Name**] : ";
  const int sentences = 3 + static_cast<int>(rng.uniform_int(4));
  for (int s = 0; s < sentences; ++s) {
    std::string sen = filler_sentence(rng);
    if (rng.uniform() < 0.3 && !sen.empty()) sen[0] = static_cast<char>(std::toupper(sen[0]));
    note += sen + (rng.uniform() < 0.2 ? "\t" : " ");
  }
  note += "Signed [**Attending MD**]";
  ex.text = std::move(note);
  return ex;
}

bool is_iob_tag(const std::string& tag) {
  if (tag == "O") return true;
  if (tag.size() < 3) return false;
  if (tag[0] != 'B' && tag[0] != 'I') return false;
  return tag[1] == '-';
}

nlohmann::json load_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
}

// Word-by-word byte-BPE encoding: each word (with its preceding spaces) is
// encoded separately so token boundaries never cross word boundaries. Char
// spans therefore align with word-aligned answer spans exactly.
struct WordwiseEncoding {
  std::vector<int> ids;
  std::vector<std::pair<std::int64_t, std::int64_t>> offsets;
  std::vector<std::int64_t> word_first;  // word index -> first token index
};

WordwiseEncoding encode_wordwise(const bpe::BpeModel& tokenizer, std::string_view text) {
  WordwiseEncoding out;
  std::size_t piece_start = 0;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && text[i] == ' ') ++i;  // leading spaces ride with the word
    if (i >= text.size()) break;
    const std::size_t word_begin = i;
    while (i < text.size() && text[i] != ' ') ++i;
    auto piece = text.substr(piece_start, i - piece_start);
    auto enc = tokenizer.encode(piece, false);
    std::int64_t first_tok_of_word = -1;
    for (std::size_t t = 0; t < enc.ids.size(); ++t) {
      const std::int64_t start = enc.offsets[t].first + static_cast<std::int64_t>(piece_start);
      const std::int64_t end = enc.offsets[t].second + static_cast<std::int64_t>(piece_start);
      if (first_tok_of_word < 0 && end > static_cast<std::int64_t>(word_begin))
        first_tok_of_word = static_cast<std::int64_t>(out.ids.size());
      out.ids.push_back(enc.ids[t]);
      out.offsets.emplace_back(start, end);
    }
    out.word_first.push_back(first_tok_of_word);
    piece_start = i;
  }
  return out;
}

EncodedWindow wrap_snippet(const std::vector<int>& content, TaskKind kind,
                           const std::string& parent_id, int snippet_index) {
  EncodedWindow w;
  w.kind = kind;
  w.parent_id = parent_id;
  w.snippet_index = snippet_index;
  w.input_ids.push_back(bpe::kCls);
  w.input_ids.insert(w.input_ids.end(), content.begin(), content.end());
  w.input_ids.push_back(bpe::kSep);
  w.global_positions = {0};
  return w;
}

}  // namespace

std::string task_kind_name(TaskKind kind) {
  switch (kind) {
    case TaskKind::MlmText: return "mlm-text";
    case TaskKind::Qa: return "qa";
    case TaskKind::Ner: return "ner";
    case TaskKind::DocCls: return "doc-cls";
    case TaskKind::PairCls: return "pair-cls";
  }
  throw ValueError("unknown task kind");
}

TaskKind task_kind_from(const std::string& name) {
  if (name == "mlm-text" || name == "mlm") return TaskKind::MlmText;
  if (name == "qa") return TaskKind::Qa;
  if (name == "ner") return TaskKind::Ner;
  if (name == "doc-cls") return TaskKind::DocCls;
  if (name == "pair-cls") return TaskKind::PairCls;
  throw ValueError("unknown task kind: " + name);
}

WindowMode window_mode_from(const std::string& name) {
  if (name == "truncate-long") return WindowMode::TruncateLong;
  if (name == "segment-short") return WindowMode::SegmentShort;
  throw ValueError("unknown window mode: " + name);
}

std::string window_mode_name(WindowMode mode) {
  return mode == WindowMode::TruncateLong ? "truncate-long" : "segment-short";
}

void validate(const TaskExample& ex) {
  auto fail = [&ex](const std::string& why) {
    throw ValueError("example " + ex.id + ": " + why);
  };
  switch (ex.kind) {
    case TaskKind::Qa: {
      if (ex.answer_start < 0 || ex.answer_end <= ex.answer_start ||
          ex.answer_end > static_cast<std::int64_t>(ex.text.size()))
        fail("answer span out of range");
      const std::string spanned = ex.text.substr(static_cast<std::size_t>(ex.answer_start),
                                                 static_cast<std::size_t>(ex.answer_end - ex.answer_start));
      if (spanned != ex.answer_text) fail("answer text does not match the span");
      if (ex.question.empty()) fail("empty question");
      break;
    }
    case TaskKind::Ner: {
      if (ex.tokens.size() != ex.tags.size()) fail("token/tag count mismatch");
      if (ex.tokens.empty()) fail("empty sentence");
      for (const auto& tag : ex.tags)
        if (!is_iob_tag(tag)) fail("malformed IOB tag '" + tag + "'");
      break;
    }
    case TaskKind::DocCls: {
      if (ex.labels.empty()) fail("no labels");
      for (int l : ex.labels)
        if (l < 0) fail("negative label id");
      break;
    }
    case TaskKind::PairCls: {
      if (ex.nli_label < 0 || ex.nli_label >= static_cast<int>(kNliLabels.size()))
        fail("pair label must be entailment, contradiction or neutral");
      if (ex.premise.empty() || ex.hypothesis.empty()) fail("empty sentence pair");
      break;
    }
    case TaskKind::MlmText:
      break;
  }
}

std::string preprocess_note(std::string_view raw) {
  // 1) delete [** ... **] placeholders
  std::string s;
  s.reserve(raw.size());
  std::size_t i = 0;
  while (i < raw.size()) {
    if (raw[i] == '[' && i + 2 < raw.size() && raw[i + 1] == '*' && raw[i + 2] == '*') {
      const std::size_t close = raw.find("**]", i + 3);
      if (close != std::string_view::npos) {
        i = close + 3;
        continue;
      }
    }
    s.push_back(raw[i++]);
  }
  // 2) keep alphanumerics and ASCII punctuation, 3) lowercase
  for (char& c : s) {
    const unsigned char u = static_cast<unsigned char>(c);
    if (u < 33 || u > 126)
      c = ' ';
    else if (u >= 'A' && u <= 'Z')
      c = static_cast<char>(u - 'A' + 'a');
  }
  // 4) collapse whitespace runs, trim
  std::string out;
  out.reserve(s.size());
  bool pending_space = false;
  for (char c : s) {
    if (c == ' ') {
      pending_space = !out.empty();
    } else {
      if (pending_space) out.push_back(' ');
      pending_space = false;
      out.push_back(c);
    }
  }
  return out;
}

std::vector<TaskExample> gen_synthetic(TaskKind kind, int size, std::uint64_t seed,
                                       const SyntheticProfile& profile) {
  if (size < 1) throw ValueError("gen_synthetic: size must be >= 1");
  std::vector<TaskExample> out;
  out.reserve(static_cast<std::size_t>(size));
  const std::uint64_t kind_key = static_cast<std::uint64_t>(kind) + 1;
  for (int i = 0; i < size; ++i) {
    Rng rng({seed, kind_key, static_cast<std::uint64_t>(i)});
    TaskExample ex;
    switch (kind) {
      case TaskKind::Qa: ex = make_qa(rng, i, profile); break;
      case TaskKind::Ner: ex = make_ner(rng, i); break;
      case TaskKind::DocCls: ex = make_doc_cls(rng, i, profile); break;
      case TaskKind::PairCls: ex = make_pair_cls(rng, i); break;
      case TaskKind::MlmText: ex = make_mlm(rng, i); break;
    }
    validate(ex);
    if (profile.sample_fraction < 1.0) {
      Rng keep({seed, kind_key, static_cast<std::uint64_t>(i), 0x5a5a});
      if (keep.uniform() >= profile.sample_fraction) continue;
    }
    out.push_back(std::move(ex));
  }
  if (out.empty()) throw ValueError("gen_synthetic: sample_fraction left no examples");
  return out;
}

std::vector<TaskExample> load_dataset(const std::string& path, const std::string& format) {
  std::vector<TaskExample> out;
  if (format == "iob2col") {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    TaskExample ex;
    ex.kind = TaskKind::Ner;
    long line_no = 0;
    std::string line;
    auto flush = [&]() {
      if (ex.tokens.empty()) return;
      ex.id = "ner-" + std::to_string(out.size());
      validate(ex);
      out.push_back(ex);
      ex = TaskExample{};
      ex.kind = TaskKind::Ner;
    };
    while (std::getline(in, line)) {
      ++line_no;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) {
        flush();
        continue;
      }
      const std::size_t tab = line.find('\t');
      if (tab == std::string::npos || tab == 0 || tab + 1 >= line.size())
        throw ParseError(path, line_no, "expected 'token<TAB>tag'");
      const std::string tag = line.substr(tab + 1);
      if (!is_iob_tag(tag)) throw ParseError(path, line_no, "malformed IOB tag '" + tag + "'");
      ex.tokens.push_back(line.substr(0, tab));
      ex.tags.push_back(tag);
    }
    flush();
    return out;
  }
  if (format == "qa-json") {
    const nlohmann::json j = load_json_file(path);
    if (!j.is_array()) throw ParseError(path + ": expected a top-level array");
    for (std::size_t i = 0; i < j.size(); ++i) {
      const auto& rec = j[i];
      TaskExample ex;
      ex.kind = TaskKind::Qa;
      try {
        ex.id = rec.value("id", "qa-" + std::to_string(i));
        ex.text = rec.at("context").get<std::string>();
        ex.question = rec.at("question").get<std::string>();
        const auto& answers = rec.at("answers");
        if (!answers.is_array() || answers.empty())
          throw ParseError(path + ": record " + std::to_string(i) + ": empty answers");
        ex.answer_text = answers[0].at("text").get<std::string>();
        ex.answer_start = answers[0].at("start").get<std::int64_t>();
        ex.answer_end = ex.answer_start + static_cast<std::int64_t>(ex.answer_text.size());
      } catch (const nlohmann::json::exception& e) {
        throw ParseError(path + ": record " + std::to_string(i) + ": " + e.what());
      }
      validate(ex);
      out.push_back(std::move(ex));
    }
    return out;
  }
  if (format == "cls-json") {
    const nlohmann::json j = load_json_file(path);
    if (!j.is_array()) throw ParseError(path + ": expected a top-level array");
    for (std::size_t i = 0; i < j.size(); ++i) {
      const auto& rec = j[i];
      TaskExample ex;
      try {
        if (rec.contains("premise")) {
          ex.kind = TaskKind::PairCls;
          ex.id = rec.value("id", "nli-" + std::to_string(i));
          ex.premise = rec.at("premise").get<std::string>();
          ex.hypothesis = rec.at("hypothesis").get<std::string>();
          const std::string label = rec.at("label").get<std::string>();
          ex.nli_label = -1;
          for (std::size_t k = 0; k < kNliLabels.size(); ++k)
            if (label == kNliLabels[k]) ex.nli_label = static_cast<int>(k);
        } else {
          ex.kind = TaskKind::DocCls;
          ex.id = rec.value("id", "cls-" + std::to_string(i));
          ex.text = rec.at("text").get<std::string>();
          ex.labels = rec.at("labels").get<std::vector<int>>();
        }
      } catch (const nlohmann::json::exception& e) {
        throw ParseError(path + ": record " + std::to_string(i) + ": " + e.what());
      }
      validate(ex);
      out.push_back(std::move(ex));
    }
    return out;
  }
  throw ValueError("unknown dataset format: " + format);
}

void save_dataset(const std::vector<TaskExample>& examples, const std::string& path,
                  const std::string& format) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  if (format == "iob2col") {
    for (const auto& ex : examples) {
      for (std::size_t t = 0; t < ex.tokens.size(); ++t)
        out << ex.tokens[t] << '\t' << ex.tags[t] << '\n';
      out << '\n';
    }
    return;
  }
  nlohmann::json j = nlohmann::json::array();
  if (format == "qa-json") {
    for (const auto& ex : examples) {
      j.push_back({{"id", ex.id},
                   {"context", ex.text},
                   {"question", ex.question},
                   {"answers", {{{"text", ex.answer_text}, {"start", ex.answer_start}}}}});
    }
  } else if (format == "cls-json") {
    for (const auto& ex : examples) {
      if (ex.kind == TaskKind::PairCls) {
        j.push_back({{"id", ex.id},
                     {"premise", ex.premise},
                     {"hypothesis", ex.hypothesis},
                     {"label", kNliLabels[static_cast<std::size_t>(ex.nli_label)]}});
      } else {
        j.push_back({{"id", ex.id}, {"text", ex.text}, {"labels", ex.labels}});
      }
    }
  } else {
    throw ValueError("unknown dataset format: " + format);
  }
  out << j.dump(1) << '\n';
}

int DatasetManifest::num_classes() const {
  return static_cast<int>(label_names.size());
}

void DatasetManifest::save(const std::string& path) const {
  nlohmann::json j;
  j["task"] = task_kind_name(task);
  j["format"] = format;
  j["splits"] = splits;
  j["label_names"] = label_names;
  j["tag_names"] = tag_names;
  j["multilabel"] = multilabel;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << j.dump(2) << '\n';
}

DatasetManifest DatasetManifest::load(const std::string& path) {
  const nlohmann::json j = load_json_file(path);
  DatasetManifest m;
  try {
    m.task = task_kind_from(j.at("task").get<std::string>());
    m.format = j.at("format").get<std::string>();
    for (const auto& [split, file] : j.at("splits").items()) {
      fs::path p(file.get<std::string>());
      if (p.is_relative()) p = fs::path(path).parent_path() / p;
      m.splits[split] = p.string();
    }
    m.label_names = j.value("label_names", std::vector<std::string>{});
    m.tag_names = j.value("tag_names", std::vector<std::string>{});
    m.multilabel = j.value("multilabel", false);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
  return m;
}

LabelSpace LabelSpace::infer(const std::vector<TaskExample>& examples) {
  LabelSpace ls;
  std::vector<std::string> tags;
  int max_label = -1;
  for (const auto& ex : examples) {
    for (const auto& tag : ex.tags) tags.push_back(tag);
    for (int l : ex.labels) max_label = std::max(max_label, l);
    if (ex.kind == TaskKind::PairCls) max_label = std::max(max_label, 2);
  }
  std::sort(tags.begin(), tags.end());
  tags.erase(std::unique(tags.begin(), tags.end()), tags.end());
  ls.tags = std::move(tags);
  ls.num_classes = max_label + 1;
  return ls;
}

LabelSpace LabelSpace::from_manifest(const DatasetManifest& manifest) {
  LabelSpace ls;
  ls.tags = manifest.tag_names;
  ls.num_classes = manifest.task == TaskKind::PairCls
                       ? static_cast<int>(kNliLabels.size())
                       : static_cast<int>(manifest.label_names.size());
  ls.multilabel = manifest.multilabel;
  return ls;
}

int LabelSpace::tag_id(const std::string& tag) const {
  const auto it = std::find(tags.begin(), tags.end(), tag);
  if (it == tags.end()) throw ValueError("tag '" + tag + "' not in the label space");
  return static_cast<int>(it - tags.begin());
}

std::vector<EncodedWindow> window_examples(const std::vector<TaskExample>& examples,
                                           const bpe::BpeModel& tokenizer, int max_len,
                                           WindowMode mode, const LabelSpace& labels) {
  if (max_len < 8) throw ValueError("window_examples: max_len must be >= 8");
  std::vector<EncodedWindow> out;

  for (const auto& ex : examples) {
    switch (ex.kind) {
      case TaskKind::Qa: {
        if (mode == WindowMode::SegmentShort)
          throw ValueError("segment-short windowing applies to sequence-level tasks, not qa");
        const auto q = tokenizer.encode(ex.question, false);
        const auto ctx = encode_wordwise(tokenizer, ex.text);
        EncodedWindow w;
        w.kind = TaskKind::Qa;
        w.parent_id = ex.id;
        w.gold_answer = ex.answer_text;
        w.context_text = ex.text;
        w.input_ids.push_back(bpe::kCls);
        w.offsets.emplace_back(-1, -1);
        for (int id : q.ids) {
          w.input_ids.push_back(id);
          w.offsets.emplace_back(-1, -1);
        }
        w.input_ids.push_back(bpe::kSep);
        w.offsets.emplace_back(-1, -1);
        w.context_begin = static_cast<std::int64_t>(w.input_ids.size());
        const std::int64_t budget =
            static_cast<std::int64_t>(max_len) - w.context_begin - 1;  // final SEP
        const std::int64_t keep =
            std::max<std::int64_t>(0, std::min<std::int64_t>(budget, static_cast<std::int64_t>(ctx.ids.size())));
        for (std::int64_t t = 0; t < keep; ++t) {
          w.input_ids.push_back(ctx.ids[static_cast<std::size_t>(t)]);
          w.offsets.push_back(ctx.offsets[static_cast<std::size_t>(t)]);
        }
        w.context_end = static_cast<std::int64_t>(w.input_ids.size());
        w.input_ids.push_back(bpe::kSep);
        w.offsets.emplace_back(-1, -1);
        w.global_positions.push_back(0);
        for (std::int64_t p = 1; p <= static_cast<std::int64_t>(q.ids.size()); ++p)
          w.global_positions.push_back(p);
        // char span -> inclusive token span, when it survived truncation
        std::int64_t first = -1, last = -1;
        for (std::int64_t t = 0; t < keep; ++t) {
          const auto [s, e] = ctx.offsets[static_cast<std::size_t>(t)];
          if (first < 0 && ex.answer_start >= s && ex.answer_start < e) first = w.context_begin + t;
          if (ex.answer_end - 1 >= s && ex.answer_end - 1 < e) last = w.context_begin + t;
        }
        if (first >= 0 && last >= first) {
          w.answerable = true;
          w.answer_start_tok = first;
          w.answer_end_tok = last;
        }
        out.push_back(std::move(w));
        break;
      }
      case TaskKind::Ner: {
        if (mode == WindowMode::SegmentShort)
          throw ValueError("segment-short windowing applies to sequence-level tasks, not ner");
        std::string text;
        for (std::size_t t = 0; t < ex.tokens.size(); ++t) {
          if (t) text += " ";
          text += ex.tokens[t];
        }
        const auto enc = encode_wordwise(tokenizer, text);
        EncodedWindow w;
        w.kind = TaskKind::Ner;
        w.parent_id = ex.id;
        const std::int64_t budget = static_cast<std::int64_t>(max_len) - 2;
        const std::int64_t keep =
            std::min<std::int64_t>(budget, static_cast<std::int64_t>(enc.ids.size()));
        w.input_ids.push_back(bpe::kCls);
        for (std::int64_t t = 0; t < keep; ++t)
          w.input_ids.push_back(enc.ids[static_cast<std::size_t>(t)]);
        w.input_ids.push_back(bpe::kSep);
        w.global_positions = {0};
        w.token_labels.assign(w.input_ids.size(), kIgnoreLabel);
        for (std::size_t word = 0; word < enc.word_first.size(); ++word) {
          const std::int64_t ft = enc.word_first[word];
          if (ft < 0 || ft >= keep) continue;  // word truncated away
          const int tag = labels.tag_id(ex.tags[word]);
          w.token_labels[static_cast<std::size_t>(1 + ft)] = tag;
          w.word_first_token.push_back(1 + ft);
        }
        for (const auto& tag : ex.tags) w.word_labels.push_back(labels.tag_id(tag));
        out.push_back(std::move(w));
        break;
      }
      case TaskKind::DocCls:
      case TaskKind::PairCls:
      case TaskKind::MlmText: {
        std::vector<int> content;
        if (ex.kind == TaskKind::PairCls) {
          // premise SEP hypothesis: one delimiter right after the first
          // sentence, one trailing SEP from the wrapper.
          const auto p = tokenizer.encode(ex.premise, false);
          const auto h = tokenizer.encode(ex.hypothesis, false);
          content = p.ids;
          content.push_back(bpe::kSep);
          content.insert(content.end(), h.ids.begin(), h.ids.end());
        } else {
          content = tokenizer.encode(ex.text, false).ids;
        }
        std::vector<int> window_labels;
        if (ex.kind == TaskKind::PairCls)
          window_labels = {ex.nli_label};
        else if (ex.kind == TaskKind::DocCls)
          window_labels = ex.labels;

        if (mode == WindowMode::TruncateLong) {
          const std::int64_t budget = static_cast<std::int64_t>(max_len) - 2;
          if (static_cast<std::int64_t>(content.size()) > budget)
            content.resize(static_cast<std::size_t>(budget));
          EncodedWindow w = wrap_snippet(content, ex.kind, ex.id, 0);
          w.labels = window_labels;
          out.push_back(std::move(w));
        } else {
          if (static_cast<std::int64_t>(content.size()) > kSegmentShortCap)
            content.resize(kSegmentShortCap);
          const std::int64_t chunk = static_cast<std::int64_t>(max_len) - 2;
          const std::int64_t n_chunks =
              std::max<std::int64_t>(1, (static_cast<std::int64_t>(content.size()) + chunk - 1) / chunk);
          std::vector<EncodedWindow> snippets;
          for (std::int64_t c = 0; c < n_chunks; ++c) {
            const std::int64_t lo = c * chunk;
            const std::int64_t hi =
                std::min<std::int64_t>(lo + chunk, static_cast<std::int64_t>(content.size()));
            std::vector<int> piece(content.begin() + lo, content.begin() + hi);
            EncodedWindow w = wrap_snippet(piece, ex.kind, ex.id, static_cast<int>(c));
            w.labels = window_labels;
            snippets.push_back(std::move(w));
          }
          for (auto& w : snippets) {
            w.snippet_count = static_cast<int>(snippets.size());
            out.push_back(std::move(w));
          }
        }
        break;
      }
    }
  }
  return out;
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

void write_lines(const std::vector<std::string>& lines, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  for (const auto& line : lines) out << line << '\n';
}

}  // namespace lce::corpus
