#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace lce::bpe {

// Reserved special-token ids. Byte b occupies id kByteBase + b; merged tokens
// follow from kFirstMergeId, so specials can never be produced by merging.
inline constexpr int kPad = 0;
inline constexpr int kCls = 1;
inline constexpr int kSep = 2;
inline constexpr int kMask = 3;
inline constexpr int kNumSpecials = 4;
inline constexpr int kByteBase = kNumSpecials;
inline constexpr int kFirstMergeId = kByteBase + 256;

struct TokenSequence {
  std::vector<int> ids;
  // Per-token [start, end) byte span into the source text. Specials carry
  // zero-width spans at the boundary they sit on.
  std::vector<std::pair<std::int64_t, std::int64_t>> offsets;
};

// Byte-level BPE model. Immutable after training; encode/decode are pure.
class BpeModel {
 public:
  BpeModel() = default;

  // Greedy pair-merge training. Stops when the vocab reaches
  // target_vocab_size or no adjacent pair occurs at least twice. Ties between
  // equally frequent pairs break lexicographically on the pair's byte
  // strings.
  static BpeModel train(const std::vector<std::string>& corpus_lines, int target_vocab_size);

  TokenSequence encode(std::string_view text, bool add_specials = false) const;
  std::string decode(const std::vector<int>& ids) const;

  int vocab_size() const { return kFirstMergeId + static_cast<int>(merges_.size()); }
  const std::vector<std::pair<int, int>>& merges() const { return merges_; }
  const std::string& token_bytes(int id) const;
  static bool is_special(int id) { return id >= 0 && id < kNumSpecials; }

  std::string to_json() const;
  static BpeModel from_json(const std::string& text);
  void save(const std::string& path) const;
  static BpeModel load(const std::string& path);

 private:
  void rebuild_tables();

  std::vector<std::pair<int, int>> merges_;       // rank r merges ids into kFirstMergeId + r
  std::vector<std::string> token_text_;           // id -> byte string ("" for specials)
  std::map<std::pair<int, int>, int> merge_rank_; // (left id, right id) -> rank
};

}  // namespace lce::bpe
