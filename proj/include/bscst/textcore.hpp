#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace bscst::text {

inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kUnk = 3;
inline constexpr int kNumSpecials = 4;

using WordSeq = std::vector<std::string>;

/// Word <-> id mapping. Ids 0..3 are the special tokens; ordinary words follow
/// in (descending corpus frequency, lexicographic) order.
class Vocabulary {
 public:
  /// Vocabulary holding only the four specials.
  Vocabulary();
  /// Builds from ordinary words in id order (ids start at 4). Throws on duplicates.
  explicit Vocabulary(std::vector<std::string> words);

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(int id) const;
  /// Id of `word`, or kUnk when absent.
  int id(std::string_view word) const;
  bool contains(std::string_view word) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

  /// Line-oriented file: a 4-line header naming the specials, then one word per
  /// line; the k-th word line (0-based) carries id k + 4.
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) {
    return a.tokens_ == b.tokens_;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

/// Token-id sequence without BOS. At most one EOS, and only in last position.
class Caption {
 public:
  Caption() = default;
  /// Throws std::invalid_argument when ids is empty, holds PAD/BOS, or has an
  /// EOS before the last position.
  explicit Caption(std::vector<int> ids);

  std::span<const int> ids() const { return ids_; }
  /// The ids minus a trailing EOS; this is what metrics score.
  std::span<const int> words() const {
    return std::span<const int>(ids_).first(ids_.size() - (terminated() ? 1 : 0));
  }
  std::size_t length() const { return ids_.size(); }
  bool empty() const { return ids_.empty(); }
  bool terminated() const { return !ids_.empty() && ids_.back() == kEos; }
  /// Copy with EOS appended (unchanged if already terminated).
  Caption terminated_copy() const;

  friend bool operator==(const Caption&, const Caption&) = default;

 private:
  std::vector<int> ids_;
};

/// Lowercase, split on whitespace, strip leading/trailing ASCII punctuation,
/// drop empty tokens.
WordSeq tokenize(std::string_view text);

/// Words with corpus frequency >= min_count, after the four specials.
Vocabulary build_vocab(std::span<const WordSeq> corpus, int min_count);

/// Maps words to ids (OOV -> kUnk). An empty word list encodes to [EOS].
Caption encode(std::span<const std::string> words, const Vocabulary& vocab);
/// Same, with EOS appended.
Caption encode_terminated(std::span<const std::string> words, const Vocabulary& vocab);

/// Words of `caption` without the trailing EOS. Throws std::out_of_range on an
/// id >= vocab.size().
WordSeq decode(const Caption& caption, const Vocabulary& vocab);

std::string join(std::span<const std::string> words, char sep = ' ');

}  // namespace bscst::text
