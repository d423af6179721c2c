#include "bscst/uncertainty.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace bscst::uq {

namespace {

double plogp_sum(std::span<const double> v) {
  double s = 0.0;
  for (double p : v)
    if (p > 0.0) s -= p * std::log(p);
  return s;
}

double norm(std::size_t steps, std::size_t V, bool divide_by_v) {
  return static_cast<double>(steps) * (divide_by_v ? static_cast<double>(V) : 1.0);
}

}  // namespace

double pass_entropy(const DecodedPass& pass, std::size_t V, bool divide_by_v) {
  if (pass.probs.empty()) return 0.0;
  double s = 0.0;
  for (const auto& v : pass.probs) s += plogp_sum(v);
  return s / norm(pass.probs.size(), V, divide_by_v);
}

BatchEntropy batch_entropy(const MCBatch& batch, std::size_t V, bool divide_by_v) {
  if (batch.passes.empty()) throw std::invalid_argument("batch_entropy: empty batch");
  BatchEntropy out;
  for (const auto& p : batch.passes) {
    if (p.probs.empty()) throw std::invalid_argument("batch_entropy: pass has no probabilities");
    out.steps = std::max(out.steps, p.probs.size());
  }
  const double m = static_cast<double>(batch.passes.size());
  const double z = norm(out.steps, V, divide_by_v);
  for (const auto& p : batch.passes) {
    out.h_own.push_back(pass_entropy(p, V, divide_by_v));
    double s = 0.0;
    for (const auto& v : p.probs) s += plogp_sum(v);
    out.h_common.push_back(s / z);
  }
  out.h_bar = std::accumulate(out.h_common.begin(), out.h_common.end(), 0.0) / m;

  std::vector<double> mean(V);
  double s = 0.0;
  for (std::size_t t = 0; t < out.steps; ++t) {
    std::fill(mean.begin(), mean.end(), 0.0);
    for (const auto& p : batch.passes) {
      if (t < p.probs.size()) {
        const auto& v = p.probs[t];
        for (std::size_t i = 0; i < V; ++i) mean[i] += v[i];
      } else {
        mean[text::kEos] += 1.0;
      }
    }
    for (double& x : mean) x /= m;
    s += plogp_sum(mean);
  }
  out.h_pred = s / z;
  out.mi = out.h_pred - out.h_bar;
  return out;
}

double softmax_confidence(const DecodedPass& pass) {
  if (pass.probs.empty()) return 0.0;
  double s = 0.0;
  for (const auto& v : pass.probs) s += *std::max_element(v.begin(), v.end());
  return s / static_cast<double>(pass.probs.size());
}

double softmax_confidence(const model::Captioner& model, const SceneFeatures& features, int max_len) {
  model::PassStreams streams = model::PassStreams::derive(0, "greedy");
  return softmax_confidence(model::generate(model, features, model::SamplingStrategy::top1(),
                                            model::DropoutConfig::disabled(), streams, max_len));
}

std::vector<QuantileBin> quantile_report(std::span<const UncertaintySummary> images, int bins) {
  if (bins < 1) throw std::invalid_argument("quantile_report: bins must be >= 1");
  std::vector<const UncertaintySummary*> sorted;
  for (const auto& s : images) sorted.push_back(&s);
  std::sort(sorted.begin(), sorted.end(), [](const auto* a, const auto* b) {
    if (a->cider_mean != b->cider_mean) return a->cider_mean < b->cider_mean;
    return a->image_id < b->image_id;
  });
  std::vector<QuantileBin> out;
  const std::size_t n = sorted.size();
  const std::size_t B = static_cast<std::size_t>(bins);
  std::size_t start = 0;
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t count = n / B + (b < n % B ? 1 : 0);
    QuantileBin q;
    q.quantile = static_cast<int>(b) + 1;
    q.n = count;
    for (std::size_t i = start; i < start + count; ++i) {
      q.mean_h += sorted[i]->h_pred;
      q.mean_mi += sorted[i]->mi;
      q.mean_conf += sorted[i]->softmax_conf;
      q.mean_cider += sorted[i]->cider_mean;
    }
    if (count > 0) {
      const double c = static_cast<double>(count);
      q.lo = sorted[start]->cider_mean;
      q.hi = sorted[start + count - 1]->cider_mean;
      q.mean_h /= c;
      q.mean_mi /= c;
      q.mean_conf /= c;
      q.mean_cider /= c;
    }
    out.push_back(q);
    start += count;
  }
  return out;
}

namespace {

std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> rank(x.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[idx[k]] = r;
    i = j + 1;
  }
  return rank;
}

}  // namespace

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw std::invalid_argument("spearman: length mismatch");
  if (x.size() < 2) return 0.0;
  const auto rx = average_ranks(x), ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

std::vector<UncertaintySummary> analyze_split(const model::Captioner& model, std::span<const train::ImageData> images,
                                              const UQConfig& config, int max_len) {
  if (config.mc_passes < 1) throw std::invalid_argument("analyze_split: M must be >= 1");
  model::DropoutConfig dropout;
  dropout.rate[static_cast<int>(config.site)] = config.rate;
  dropout.enabled[static_cast<int>(config.site)] = true;
  dropout.validate();
  const std::size_t V = model.config().vocab_size;
  std::vector<UncertaintySummary> out;
  for (const auto& img : images) {
    const std::uint64_t base = derive_seed(config.seed, "uq.image", {static_cast<std::uint64_t>(img.image_id)});
    MCBatch batch = model::mc_passes(model, img.features, config.mc_passes, model::SamplingStrategy::top1(), dropout,
                                     base, max_len);
    UncertaintySummary s;
    s.image_id = img.image_id;
    for (std::size_t m = 0; m < batch.size(); ++m) batch.rewards[m] = img.cider(batch.passes[m].caption);
    s.pass_cider = batch.rewards;
    const BatchEntropy be = batch_entropy(batch, V, config.divide_by_v);
    s.h_m = be.h_own;
    s.h_bar = be.h_bar;
    s.h_pred = be.h_pred;
    s.mi = be.mi;
    s.softmax_conf = softmax_confidence(model, img.features, max_len);
    s.cider_mean = std::accumulate(s.pass_cider.begin(), s.pass_cider.end(), 0.0) / static_cast<double>(batch.size());
    s.cider_min = *std::min_element(s.pass_cider.begin(), s.pass_cider.end());
    s.cider_max = *std::max_element(s.pass_cider.begin(), s.pass_cider.end());
    out.push_back(std::move(s));
  }
  return out;
}

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::ofstream open_csv(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

}  // namespace

void write_per_image_csv(std::span<const UncertaintySummary> rows, const std::filesystem::path& path) {
  auto out = open_csv(path);
  out << "image_id,cider_mean,cider_min,cider_max,H_bar,H_pred,MI,softmax_conf\n";
  for (const auto& r : rows)
    out << r.image_id << ',' << fmt(r.cider_mean) << ',' << fmt(r.cider_min) << ',' << fmt(r.cider_max) << ','
        << fmt(r.h_bar) << ',' << fmt(r.h_pred) << ',' << fmt(r.mi) << ',' << fmt(r.softmax_conf) << '\n';
}

void write_quantile_csv(std::span<const QuantileBin> bins, const std::filesystem::path& path) {
  auto out = open_csv(path);
  out << "quantile,lo,hi,n,mean_H,mean_MI,mean_conf,mean_cider\n";
  for (const auto& b : bins)
    out << b.quantile << ',' << fmt(b.lo) << ',' << fmt(b.hi) << ',' << b.n << ',' << fmt(b.mean_h) << ','
        << fmt(b.mean_mi) << ',' << fmt(b.mean_conf) << ',' << fmt(b.mean_cider) << '\n';
}

void write_per_pass_csv(std::span<const UncertaintySummary> rows, const std::filesystem::path& path) {
  auto out = open_csv(path);
  out << "image_id,pass,H_m,cider\n";
  for (const auto& r : rows)
    for (std::size_t m = 0; m < r.h_m.size(); ++m)
      out << r.image_id << ',' << m << ',' << fmt(r.h_m[m]) << ',' << fmt(r.pass_cider[m]) << '\n';
}

}  // namespace bscst::uq
