#include "bscst/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>
#include <tuple>
#include <unordered_set>

namespace bscst::metrics {

namespace {

constexpr int kIdBits = 15;
constexpr NGramKey kIdMask = (NGramKey{1} << kIdBits) - 1;

}  // namespace

NGramKey ngram_key(Tokens words, std::size_t start, int n) {
  NGramKey key = static_cast<NGramKey>(n) << (kIdBits * kMaxOrder);
  for (int i = 0; i < n; ++i) {
    const int id = words[start + static_cast<std::size_t>(i)];
    if (id < 0 || static_cast<NGramKey>(id) > kIdMask)
      throw std::out_of_range("ngram_key: token id does not fit in 15 bits");
    key |= static_cast<NGramKey>(id) << (kIdBits * i);
  }
  return key;
}

int ngram_order(NGramKey key) { return static_cast<int>(key >> (kIdBits * kMaxOrder)); }

std::vector<int> ngram_ids(NGramKey key) {
  std::vector<int> ids(static_cast<std::size_t>(ngram_order(key)));
  for (std::size_t i = 0; i < ids.size(); ++i)
    ids[i] = static_cast<int>((key >> (kIdBits * i)) & kIdMask);
  return ids;
}

NGramProfile NGramProfile::of(Tokens words) {
  NGramProfile p;
  p.length = words.size();
  for (int n = 1; n <= kMaxOrder; ++n) {
    if (words.size() < static_cast<std::size_t>(n)) break;
    std::vector<NGramKey> keys;
    keys.reserve(words.size() - n + 1);
    for (std::size_t s = 0; s + n <= words.size(); ++s) keys.push_back(ngram_key(words, s, n));
    std::sort(keys.begin(), keys.end());
    auto& out = p.counts[n - 1];
    for (NGramKey k : keys) {
      if (!out.empty() && out.back().first == k)
        ++out.back().second;
      else
        out.emplace_back(k, 1);
    }
  }
  return p;
}

int NGramProfile::count(int n, NGramKey key) const {
  const auto& v = counts[static_cast<std::size_t>(n - 1)];
  auto it = std::lower_bound(v.begin(), v.end(), key,
                             [](const auto& e, NGramKey k) { return e.first < k; });
  return (it != v.end() && it->first == key) ? it->second : 0;
}

int NGramProfile::total(int n) const {
  int t = 0;
  for (const auto& [k, c] : counts[static_cast<std::size_t>(n - 1)]) t += c;
  return t;
}

// ---------------------------------------------------------------------------

DocFreqTable DocFreqTable::build(std::span<const std::vector<Caption>> reference_sets) {
  if (reference_sets.empty()) throw std::invalid_argument("build_df: empty corpus");
  DocFreqTable table;
  table.num_images_ = reference_sets.size();
  std::unordered_set<NGramKey> seen;
  for (const auto& refs : reference_sets) {
    if (refs.empty()) throw std::invalid_argument("build_df: image without references");
    seen.clear();
    for (const auto& ref : refs) {
      const auto words = ref.words();
      for (int n = 1; n <= kMaxOrder; ++n)
        for (std::size_t s = 0; s + n <= words.size(); ++s) seen.insert(ngram_key(words, s, n));
    }
    for (NGramKey k : seen) ++table.df_[k];
  }
  return table;
}

int DocFreqTable::df(NGramKey key) const {
  auto it = df_.find(key);
  return it == df_.end() ? 0 : it->second;
}

void DocFreqTable::save(const std::filesystem::path& path, const text::Vocabulary& vocab) const {
  std::vector<std::tuple<int, std::string, int>> rows;
  rows.reserve(df_.size());
  for (const auto& [key, count] : df_) {
    std::vector<std::string> words;
    for (int id : ngram_ids(key)) words.push_back(vocab.token(id));
    rows.emplace_back(ngram_order(key), text::join(words), count);
  }
  std::sort(rows.begin(), rows.end());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write df table " + path.string());
  out << "NIMAGES " << num_images_ << '\n';
  for (const auto& [n, words, count] : rows) out << n << '\t' << words << '\t' << count << '\n';
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

DocFreqTable DocFreqTable::load(const std::filesystem::path& path, const text::Vocabulary& vocab) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read df table " + path.string());
  DocFreqTable table;
  std::string line;
  if (!std::getline(in, line) || line.rfind("NIMAGES ", 0) != 0)
    throw std::runtime_error("df table " + path.string() + ": missing NIMAGES header");
  table.num_images_ = std::stoul(line.substr(8));
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto t1 = line.find('\t');
    const auto t2 = line.rfind('\t');
    if (t1 == std::string::npos || t1 == t2)
      throw std::runtime_error("df table " + path.string() + ": malformed line");
    const int n = std::stoi(line.substr(0, t1));
    std::vector<int> ids;
    for (const auto& w : text::tokenize(line.substr(t1 + 1, t2 - t1 - 1))) {
      if (!vocab.contains(w)) throw std::runtime_error("df table: unknown word '" + w + "'");
      ids.push_back(vocab.id(w));
    }
    if (static_cast<int>(ids.size()) != n)
      throw std::runtime_error("df table " + path.string() + ": order/word-count mismatch");
    table.df_[ngram_key(ids, 0, n)] = std::stoi(line.substr(t2 + 1));
  }
  return table;
}

std::string to_string(RewardKind kind) {
  switch (kind) {
    case RewardKind::CiderD: return "CIDEr-D";
    case RewardKind::Bleu1: return "BLEU-1";
    case RewardKind::Bleu4: return "BLEU-4";
    case RewardKind::RougeL: return "ROUGE-L";
  }
  return "?";
}

// ---------------------------------------------------------------------------

CiderScorer::CiderScorer(std::span<const Caption> refs, const DocFreqTable& df, double sigma)
    : df_(&df), sigma_(sigma), log_images_(std::log(static_cast<double>(df.num_images()))) {
  if (refs.empty()) throw std::invalid_argument("cider_d: no references");
  if (!(sigma > 0)) throw std::invalid_argument("cider_d: sigma must be positive");
  for (const auto& r : refs) {
    ref_vecs_.push_back(vectorize(NGramProfile::of(r.words())));
  }
}

CiderScorer::Vec CiderScorer::vectorize(const NGramProfile& profile) const {
  Vec v;
  v.length = static_cast<double>(profile.length);
  for (int n = 0; n < kMaxOrder; ++n) {
    double sq = 0.0;
    for (const auto& [key, tf] : profile.counts[n]) {
      const double idf = log_images_ - std::log(std::max(1.0, static_cast<double>(df_->df(key))));
      const double w = tf * idf;
      v.weights[n].emplace_back(key, w);
      sq += w * w;
    }
    v.norms[n] = sq;
  }
  return v;
}

double CiderScorer::score(Tokens candidate) const {
  if (candidate.empty()) return 0.0;
  const NGramProfile profile = NGramProfile::of(candidate);
  const Vec cand = vectorize(profile);
  std::array<double, kMaxOrder> per_n{};
  for (std::size_t r = 0; r < ref_vecs_.size(); ++r) {
    const Vec& ref = ref_vecs_[r];
    const double delta = cand.length - ref.length;
    const double penalty = std::exp(-(delta * delta) / (2.0 * sigma_ * sigma_));
    for (int n = 0; n < kMaxOrder; ++n) {
      if (cand.norms[n] == 0.0 || ref.norms[n] == 0.0) continue;
      // min over TF-IDF weights == clipped counts times the shared idf
      double dot = 0.0;
      auto a = cand.weights[n].begin();
      auto b = ref.weights[n].begin();
      while (a != cand.weights[n].end() && b != ref.weights[n].end()) {
        if (a->first < b->first) {
          ++a;
        } else if (b->first < a->first) {
          ++b;
        } else {
          dot += std::min(a->second, b->second) * b->second;
          ++a;
          ++b;
        }
      }
      per_n[n] += 10.0 * penalty * dot / std::sqrt(cand.norms[n] * ref.norms[n]);
    }
  }
  double total = 0.0;
  for (double s : per_n) total += s / static_cast<double>(ref_vecs_.size());
  return total / kMaxOrder;
}

double cider_d(Tokens candidate, std::span<const Caption> refs, const DocFreqTable& df,
               double sigma) {
  return CiderScorer(refs, df, sigma).score(candidate);
}

// ---------------------------------------------------------------------------

double bleu(Tokens candidate, std::span<const Caption> refs, int max_n, double eps) {
  if (refs.empty()) throw std::invalid_argument("bleu: no references");
  if (max_n < 1 || max_n > kMaxOrder) throw std::invalid_argument("bleu: order out of range");
  if (candidate.empty()) return 0.0;
  const NGramProfile cand = NGramProfile::of(candidate);
  std::vector<NGramProfile> ref_profiles;
  ref_profiles.reserve(refs.size());
  for (const auto& r : refs) ref_profiles.push_back(NGramProfile::of(r.words()));

  double log_sum = 0.0;
  for (int n = 1; n <= max_n; ++n) {
    int clipped = 0;
    for (const auto& [key, c] : cand.counts[n - 1]) {
      int max_ref = 0;
      for (const auto& rp : ref_profiles) max_ref = std::max(max_ref, rp.count(n, key));
      clipped += std::min(c, max_ref);
    }
    const double total = static_cast<double>(cand.total(n));
    log_sum += std::log((clipped + eps) / (total + eps));
  }
  const double c_len = static_cast<double>(candidate.size());
  double r_len = static_cast<double>(refs.front().words().size());
  for (const auto& r : refs) {
    const double len = static_cast<double>(r.words().size());
    const double d = std::abs(len - c_len), best = std::abs(r_len - c_len);
    if (d < best || (d == best && len < r_len)) r_len = len;
  }
  const double bp = std::exp(std::min(0.0, 1.0 - r_len / c_len));
  return bp * std::exp(log_sum / max_n);
}

std::size_t lcs_length(Tokens a, Tokens b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l(Tokens candidate, std::span<const Caption> refs, double beta) {
  if (refs.empty()) throw std::invalid_argument("rouge_l: no references");
  if (!(beta > 0)) throw std::invalid_argument("rouge_l: beta must be positive");
  double best = 0.0;
  for (const auto& r : refs) {
    const auto ref = r.words();
    const std::size_t lcs = lcs_length(candidate, ref);
    if (lcs == 0) continue;
    const double p = static_cast<double>(lcs) / static_cast<double>(candidate.size());
    const double rec = static_cast<double>(lcs) / static_cast<double>(ref.size());
    const double b2 = beta * beta;
    best = std::max(best, (1.0 + b2) * p * rec / (rec + b2 * p));
  }
  return best;
}

double score(const RewardFn& fn, Tokens candidate, std::span<const Caption> refs,
             const DocFreqTable* df) {
  switch (fn.kind) {
    case RewardKind::CiderD:
      if (!df) throw std::invalid_argument("score: CIDEr-D needs a df table");
      return cider_d(candidate, refs, *df, fn.sigma);
    case RewardKind::Bleu1: return bleu(candidate, refs, 1);
    case RewardKind::Bleu4: return bleu(candidate, refs, 4);
    case RewardKind::RougeL: return rouge_l(candidate, refs, fn.beta);
  }
  throw std::logic_error("score: unknown reward kind");
}

CorpusScores score_corpus(std::span<const ImageCandidate> candidates,
                          std::span<const ImageReferences> references, const RewardFn& fn,
                          const DocFreqTable* df) {
  if (candidates.size() != references.size())
    throw std::invalid_argument("score_corpus: candidate/reference count mismatch");
  CorpusScores out;
  double sum = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (candidates[i].image_id != references[i].image_id)
      throw std::invalid_argument("score_corpus: image id mismatch at position " + std::to_string(i));
    const double s = score(fn, candidates[i].caption.words(), references[i].refs, df);
    out.image_ids.push_back(candidates[i].image_id);
    out.per_image.push_back(s);
    sum += s;
  }
  out.mean = candidates.empty() ? 0.0 : sum / static_cast<double>(candidates.size());
  return out;
}

}  // namespace bscst::metrics
