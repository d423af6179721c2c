#include "bscst/textcore.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <stdexcept>

namespace bscst::text {

namespace {

const char* const kSpecialNames[kNumSpecials] = {"<pad>", "<bos>", "<eos>", "<unk>"};

bool is_ascii_punct(unsigned char c) { return c < 128 && std::ispunct(c); }

}  // namespace

Vocabulary::Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

Vocabulary::Vocabulary(std::vector<std::string> words) {
  tokens_.reserve(words.size() + kNumSpecials);
  for (const char* name : kSpecialNames) tokens_.emplace_back(name);
  for (auto& w : words) {
    if (w.empty()) throw std::invalid_argument("vocabulary: empty word");
    tokens_.push_back(std::move(w));
  }
  for (std::size_t i = kNumSpecials; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<int>(i)).second)
      throw std::invalid_argument("vocabulary: duplicate word '" + tokens_[i] + "'");
  }
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
    throw std::out_of_range("vocabulary: id " + std::to_string(id) + " out of range");
  return tokens_[static_cast<std::size_t>(id)];
}

int Vocabulary::id(std::string_view word) const {
  auto it = index_.find(std::string(word));
  return it == index_.end() ? kUnk : it->second;
}

bool Vocabulary::contains(std::string_view word) const {
  return index_.count(std::string(word)) != 0;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write vocabulary " + path.string());
  for (int i = 0; i < kNumSpecials; ++i) out << "#special " << i << ' ' << kSpecialNames[i] << '\n';
  for (std::size_t i = kNumSpecials; i < tokens_.size(); ++i) out << tokens_[i] << '\n';
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read vocabulary " + path.string());
  std::string line;
  for (int i = 0; i < kNumSpecials; ++i) {
    if (!std::getline(in, line) || line.rfind("#special", 0) != 0)
      throw std::runtime_error("vocabulary file " + path.string() + ": bad header");
  }
  std::vector<std::string> words;
  while (std::getline(in, line)) {
    if (!line.empty()) words.push_back(line);
  }
  return Vocabulary(std::move(words));
}

Caption::Caption(std::vector<int> ids) : ids_(std::move(ids)) {
  if (ids_.empty()) throw std::invalid_argument("caption: empty id sequence");
  for (std::size_t i = 0; i < ids_.size(); ++i) {
    const int id = ids_[i];
    if (id < 0) throw std::invalid_argument("caption: negative id");
    if (id == kPad || id == kBos) throw std::invalid_argument("caption: PAD/BOS inside caption");
    if (id == kEos && i + 1 != ids_.size())
      throw std::invalid_argument("caption: EOS before the final position");
  }
}

Caption Caption::terminated_copy() const {
  if (terminated()) return *this;
  std::vector<int> ids = ids_;
  ids.push_back(kEos);
  return Caption(std::move(ids));
}

WordSeq tokenize(std::string_view text) {
  WordSeq out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    std::size_t b = i, e = j;
    while (b < e && is_ascii_punct(static_cast<unsigned char>(text[b]))) ++b;
    while (e > b && is_ascii_punct(static_cast<unsigned char>(text[e - 1]))) --e;
    if (b < e) {
      std::string tok(text.substr(b, e - b));
      for (char& c : tok) {
        if (static_cast<unsigned char>(c) < 128) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
      }
      out.push_back(std::move(tok));
    }
    i = j;
  }
  return out;
}

Vocabulary build_vocab(std::span<const WordSeq> corpus, int min_count) {
  if (min_count < 1) throw std::invalid_argument("build_vocab: min_count must be >= 1");
  std::map<std::string, long> counts;
  for (const auto& seq : corpus)
    for (const auto& w : seq) ++counts[w];
  std::vector<std::pair<std::string, long>> kept;
  for (auto& [w, c] : counts) {
    if (c >= min_count) kept.emplace_back(w, c);
  }
  std::stable_sort(kept.begin(), kept.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> words;
  words.reserve(kept.size());
  for (auto& [w, c] : kept) words.push_back(w);
  return Vocabulary(std::move(words));
}

Caption encode(std::span<const std::string> words, const Vocabulary& vocab) {
  if (words.empty()) return Caption({kEos});
  std::vector<int> ids;
  ids.reserve(words.size());
  for (const auto& w : words) ids.push_back(vocab.id(w));
  return Caption(std::move(ids));
}

Caption encode_terminated(std::span<const std::string> words, const Vocabulary& vocab) {
  return encode(words, vocab).terminated_copy();
}

WordSeq decode(const Caption& caption, const Vocabulary& vocab) {
  WordSeq out;
  for (int id : caption.words()) out.push_back(vocab.token(id));
  return out;
}

std::string join(std::span<const std::string> words, char sep) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out += sep;
    out += words[i];
  }
  return out;
}

}  // namespace bscst::text
