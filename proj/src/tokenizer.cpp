#include "lce/tokenizer.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <queue>
#include <unordered_map>

#include <json.hpp>

#include "lce/errors.hpp"

namespace lce::bpe {
namespace {

using Pair = std::pair<int, int>;

struct PairHash {
  std::size_t operator()(const Pair& p) const {
    return std::hash<std::uint64_t>()((static_cast<std::uint64_t>(p.first) << 32) ^
                                      static_cast<std::uint32_t>(p.second));
  }
};

// Byte <-> printable-codepoint table used for serializing raw byte strings as
// valid UTF-8 JSON strings. Printable latin bytes map to themselves, the rest
// shift to codepoints from 256 upward.
std::array<int, 256> byte_to_cp_table() {
  std::array<int, 256> table{};
  int next = 256;
  for (int b = 0; b < 256; ++b) {
    const bool printable =
        (b >= 33 && b <= 126) || (b >= 161 && b <= 172) || (b >= 174 && b <= 255);
    table[static_cast<std::size_t>(b)] = printable ? b : next++;
  }
  return table;
}

void append_utf8(std::string& out, int cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

std::string bytes_to_printable(const std::string& bytes) {
  static const std::array<int, 256> table = byte_to_cp_table();
  std::string out;
  out.reserve(bytes.size());
  for (unsigned char b : bytes) append_utf8(out, table[b]);
  return out;
}

std::string printable_to_bytes(const std::string& text) {
  static const std::unordered_map<int, unsigned char> inverse = [] {
    std::unordered_map<int, unsigned char> inv;
    const auto table = byte_to_cp_table();
    for (int b = 0; b < 256; ++b)
      inv[table[static_cast<std::size_t>(b)]] = static_cast<unsigned char>(b);
    return inv;
  }();
  std::string out;
  std::size_t i = 0;
  while (i < text.size()) {
    const unsigned char c = static_cast<unsigned char>(text[i]);
    int cp = 0;
    if (c < 0x80) {
      cp = c;
      i += 1;
    } else if ((c >> 5) == 0x6 && i + 1 < text.size()) {
      cp = ((c & 0x1F) << 6) | (static_cast<unsigned char>(text[i + 1]) & 0x3F);
      i += 2;
    } else if ((c >> 4) == 0xE && i + 2 < text.size()) {
      cp = ((c & 0x0F) << 12) | ((static_cast<unsigned char>(text[i + 1]) & 0x3F) << 6) |
           (static_cast<unsigned char>(text[i + 2]) & 0x3F);
      i += 3;
    } else {
      throw ParseError("tokenizer file: malformed UTF-8 in token string");
    }
    auto it = inverse.find(cp);
    if (it == inverse.end())
      throw ParseError("tokenizer file: codepoint " + std::to_string(cp) + " is not a mapped byte");
    out.push_back(static_cast<char>(it->second));
  }
  return out;
}

// Linked token list over one corpus line during training.
struct Line {
  std::vector<int> sym;
  std::vector<int> prev;
  std::vector<int> next;
  std::vector<char> alive;
};

struct Occ {
  int line;
  int idx;  // node index of the pair's left symbol
  bool operator<(const Occ& o) const { return line != o.line ? line < o.line : idx < o.idx; }
};

}  // namespace

const std::string& BpeModel::token_bytes(int id) const {
  if (id < 0 || id >= vocab_size())
    throw ValueError("token id " + std::to_string(id) + " outside vocab of size " +
                     std::to_string(vocab_size()));
  return token_text_[static_cast<std::size_t>(id)];
}

void BpeModel::rebuild_tables() {
  token_text_.assign(static_cast<std::size_t>(kFirstMergeId) + merges_.size(), std::string());
  for (int b = 0; b < 256; ++b)
    token_text_[static_cast<std::size_t>(kByteBase + b)] = std::string(1, static_cast<char>(b));
  merge_rank_.clear();
  for (std::size_t r = 0; r < merges_.size(); ++r) {
    const auto& [l, rgt] = merges_[r];
    const int id = kFirstMergeId + static_cast<int>(r);
    if (l < kByteBase || l >= id || rgt < kByteBase || rgt >= id)
      throw ValueError("merge " + std::to_string(r) + " references token not yet in vocab");
    token_text_[static_cast<std::size_t>(id)] =
        token_text_[static_cast<std::size_t>(l)] + token_text_[static_cast<std::size_t>(rgt)];
    merge_rank_.emplace(Pair{l, rgt}, static_cast<int>(r));
  }
}

BpeModel BpeModel::train(const std::vector<std::string>& corpus_lines, int target_vocab_size) {
  if (target_vocab_size < kFirstMergeId)
    throw ValueError("target vocab size must be at least " + std::to_string(kFirstMergeId));
  std::vector<Line> lines;
  lines.reserve(corpus_lines.size());
  std::size_t total_syms = 0;
  for (const auto& text : corpus_lines) {
    if (text.empty()) continue;
    Line line;
    const int n = static_cast<int>(text.size());
    line.sym.resize(static_cast<std::size_t>(n));
    line.prev.resize(static_cast<std::size_t>(n));
    line.next.resize(static_cast<std::size_t>(n));
    line.alive.assign(static_cast<std::size_t>(n), 1);
    for (int i = 0; i < n; ++i) {
      line.sym[static_cast<std::size_t>(i)] =
          kByteBase + static_cast<unsigned char>(text[static_cast<std::size_t>(i)]);
      line.prev[static_cast<std::size_t>(i)] = i - 1;
      line.next[static_cast<std::size_t>(i)] = i + 1 < n ? i + 1 : -1;
    }
    total_syms += static_cast<std::size_t>(n);
    lines.push_back(std::move(line));
  }
  if (total_syms == 0) throw ValueError("train: empty corpus");

  BpeModel model;
  model.merges_.clear();
  model.rebuild_tables();

  std::unordered_map<Pair, long long, PairHash> counts;
  std::unordered_map<Pair, std::vector<Occ>, PairHash> where;
  for (std::size_t li = 0; li < lines.size(); ++li) {
    const Line& line = lines[li];
    for (int i = 0; i + 1 < static_cast<int>(line.sym.size()); ++i) {
      Pair p{line.sym[static_cast<std::size_t>(i)], line.sym[static_cast<std::size_t>(i) + 1]};
      ++counts[p];
      where[p].push_back({static_cast<int>(li), i});
    }
  }

  // Max-heap on (count, pair bytes): highest count first, lexicographically
  // smallest pair on ties. Entries go stale when counts change; popped
  // entries are validated against the live count.
  auto pair_bytes = [&model](const Pair& p) {
    return std::make_pair(model.token_text_[static_cast<std::size_t>(p.first)],
                          model.token_text_[static_cast<std::size_t>(p.second)]);
  };
  struct HeapEntry {
    long long count;
    std::string left_bytes, right_bytes;
    Pair pair;
  };
  auto heap_less = [](const HeapEntry& a, const HeapEntry& b) {
    if (a.count != b.count) return a.count < b.count;
    if (a.left_bytes != b.left_bytes) return a.left_bytes > b.left_bytes;
    return a.right_bytes > b.right_bytes;
  };
  std::priority_queue<HeapEntry, std::vector<HeapEntry>, decltype(heap_less)> heap(heap_less);
  auto push_pair = [&](const Pair& p, long long count) {
    if (count >= 2) {
      auto [lb, rb] = pair_bytes(p);
      heap.push({count, std::move(lb), std::move(rb), p});
    }
  };
  for (const auto& [p, c] : counts) push_pair(p, c);

  const int max_merges = target_vocab_size - kFirstMergeId;
  while (static_cast<int>(model.merges_.size()) < max_merges) {
    Pair best{-1, -1};
    while (!heap.empty()) {
      HeapEntry top = heap.top();
      heap.pop();
      auto it = counts.find(top.pair);
      if (it != counts.end() && it->second == top.count && top.count >= 2) {
        best = top.pair;
        break;
      }
    }
    if (best.first < 0) break;

    const int new_id = kFirstMergeId + static_cast<int>(model.merges_.size());
    model.merges_.push_back(best);
    model.token_text_.push_back(model.token_text_[static_cast<std::size_t>(best.first)] +
                                model.token_text_[static_cast<std::size_t>(best.second)]);
    model.merge_rank_.emplace(best, new_id - kFirstMergeId);

    std::vector<Occ> occs = std::move(where[best]);
    where.erase(best);
    std::sort(occs.begin(), occs.end());

    auto bump = [&](const Pair& p, long long delta) {
      long long& c = counts[p];
      c += delta;
      if (c <= 0)
        counts.erase(p);
      else
        push_pair(p, c);  // decrements too: the live count must be on the heap
    };

    for (const Occ& occ : occs) {
      Line& line = lines[static_cast<std::size_t>(occ.line)];
      const int i = occ.idx;
      if (!line.alive[static_cast<std::size_t>(i)] ||
          line.sym[static_cast<std::size_t>(i)] != best.first)
        continue;
      const int j = line.next[static_cast<std::size_t>(i)];
      if (j < 0 || !line.alive[static_cast<std::size_t>(j)] ||
          line.sym[static_cast<std::size_t>(j)] != best.second)
        continue;
      const int p = line.prev[static_cast<std::size_t>(i)];
      const int n2 = line.next[static_cast<std::size_t>(j)];

      bump(best, -1);
      if (p >= 0) bump({line.sym[static_cast<std::size_t>(p)], best.first}, -1);
      if (n2 >= 0) bump({best.second, line.sym[static_cast<std::size_t>(n2)]}, -1);

      line.sym[static_cast<std::size_t>(i)] = new_id;
      line.alive[static_cast<std::size_t>(j)] = 0;
      line.next[static_cast<std::size_t>(i)] = n2;
      if (n2 >= 0) line.prev[static_cast<std::size_t>(n2)] = i;

      if (p >= 0) {
        Pair np{line.sym[static_cast<std::size_t>(p)], new_id};
        bump(np, +1);
        where[np].push_back({occ.line, p});
      }
      if (n2 >= 0) {
        Pair np{new_id, line.sym[static_cast<std::size_t>(n2)]};
        bump(np, +1);
        where[np].push_back({occ.line, i});
      }
    }
    counts.erase(best);
  }
  return model;
}

TokenSequence BpeModel::encode(std::string_view text, bool add_specials) const {
  const int n = static_cast<int>(text.size());
  std::vector<int> sym(static_cast<std::size_t>(n));
  std::vector<int> prev(static_cast<std::size_t>(n)), next(static_cast<std::size_t>(n));
  std::vector<std::pair<std::int64_t, std::int64_t>> span(static_cast<std::size_t>(n));
  std::vector<char> alive(static_cast<std::size_t>(n), 1);
  for (int i = 0; i < n; ++i) {
    sym[static_cast<std::size_t>(i)] =
        kByteBase + static_cast<unsigned char>(text[static_cast<std::size_t>(i)]);
    prev[static_cast<std::size_t>(i)] = i - 1;
    next[static_cast<std::size_t>(i)] = i + 1 < n ? i + 1 : -1;
    span[static_cast<std::size_t>(i)] = {i, i + 1};
  }

  // Lowest-rank merge first; ties resolve to the leftmost occurrence, which
  // reproduces a rank-by-rank left-to-right merge schedule.
  struct Cand {
    int rank;
    int idx;
  };
  auto cand_less = [](const Cand& a, const Cand& b) {
    return a.rank != b.rank ? a.rank > b.rank : a.idx > b.idx;
  };
  std::priority_queue<Cand, std::vector<Cand>, decltype(cand_less)> heap(cand_less);
  auto consider = [&](int i) {
    if (i < 0) return;
    const int j = next[static_cast<std::size_t>(i)];
    if (j < 0) return;
    auto it =
        merge_rank_.find({sym[static_cast<std::size_t>(i)], sym[static_cast<std::size_t>(j)]});
    if (it != merge_rank_.end()) heap.push({it->second, i});
  };
  for (int i = 0; i + 1 < n; ++i) consider(i);

  while (!heap.empty()) {
    const Cand c = heap.top();
    heap.pop();
    const int i = c.idx;
    if (!alive[static_cast<std::size_t>(i)]) continue;
    const int j = next[static_cast<std::size_t>(i)];
    if (j < 0) continue;
    auto it =
        merge_rank_.find({sym[static_cast<std::size_t>(i)], sym[static_cast<std::size_t>(j)]});
    if (it == merge_rank_.end() || it->second != c.rank) continue;  // stale entry
    sym[static_cast<std::size_t>(i)] = kFirstMergeId + c.rank;
    span[static_cast<std::size_t>(i)].second = span[static_cast<std::size_t>(j)].second;
    alive[static_cast<std::size_t>(j)] = 0;
    const int n2 = next[static_cast<std::size_t>(j)];
    next[static_cast<std::size_t>(i)] = n2;
    if (n2 >= 0) prev[static_cast<std::size_t>(n2)] = i;
    consider(prev[static_cast<std::size_t>(i)]);
    consider(i);
  }

  TokenSequence out;
  if (add_specials) {
    out.ids.push_back(kCls);
    out.offsets.emplace_back(0, 0);
  }
  for (int i = 0; i >= 0 && i < n; i = next[static_cast<std::size_t>(i)]) {
    out.ids.push_back(sym[static_cast<std::size_t>(i)]);
    out.offsets.push_back(span[static_cast<std::size_t>(i)]);
  }
  if (add_specials) {
    out.ids.push_back(kSep);
    out.offsets.emplace_back(n, n);
  }
  return out;
}

std::string BpeModel::decode(const std::vector<int>& ids) const {
  std::string out;
  for (int id : ids) {
    if (is_special(id)) continue;
    out += token_bytes(id);
  }
  return out;
}

std::string BpeModel::to_json() const {
  nlohmann::json j;
  j["version"] = 1;
  j["specials"] = {{"PAD", kPad}, {"CLS", kCls}, {"SEP", kSep}, {"MASK", kMask}};
  nlohmann::json merges = nlohmann::json::array();
  for (const auto& [l, r] : merges_) {
    merges.push_back({bytes_to_printable(token_text_[static_cast<std::size_t>(l)]),
                      bytes_to_printable(token_text_[static_cast<std::size_t>(r)])});
  }
  j["merges"] = std::move(merges);
  return j.dump(2) + "\n";
}

BpeModel BpeModel::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("tokenizer file: ") + e.what());
  }
  if (!j.contains("merges") || !j["merges"].is_array())
    throw ParseError("tokenizer file: missing merges array");
  BpeModel model;
  // Surfaces resolve to the earliest token with those bytes. Training
  // guarantees the mapping is unambiguous for every referenced constituent
  // (checked in save()).
  std::map<std::string, int> by_surface;
  for (int b = 0; b < 256; ++b)
    by_surface.emplace(std::string(1, static_cast<char>(b)), kByteBase + b);
  for (const auto& entry : j["merges"]) {
    if (!entry.is_array() || entry.size() != 2)
      throw ParseError("tokenizer file: merge entries must be 2-element arrays");
    const std::string lb = printable_to_bytes(entry[0].get<std::string>());
    const std::string rb = printable_to_bytes(entry[1].get<std::string>());
    auto li = by_surface.find(lb);
    auto ri = by_surface.find(rb);
    if (li == by_surface.end() || ri == by_surface.end())
      throw ParseError("tokenizer file: merge references unknown token");
    const int new_id = kFirstMergeId + static_cast<int>(model.merges_.size());
    model.merges_.emplace_back(li->second, ri->second);
    by_surface.emplace(lb + rb, new_id);
  }
  model.rebuild_tables();
  return model;
}

void BpeModel::save(const std::string& path) const {
  const std::string serialized = to_json();
  // Guard against ambiguous surface serialization (two tokens with identical
  // bytes where the file format cannot tell them apart).
  BpeModel reloaded = from_json(serialized);
  if (reloaded.merges_ != merges_)
    throw IoError("tokenizer save: merge table is not string-serializable without ambiguity");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << serialized;
  if (!out) throw IoError("short write to " + path);
}

BpeModel BpeModel::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return from_json(text);
}

}  // namespace lce::bpe
