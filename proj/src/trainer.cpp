#include "bscst/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace bscst::train {

using grad::Tape;
using grad::Tensor;
using grad::Value;
using model::PassStreams;

namespace {

std::vector<ImageData> encode_split(const std::vector<scene::SceneRecord>& records, const text::Vocabulary& vocab) {
  std::vector<ImageData> out;
  out.reserve(records.size());
  for (const auto& rec : records) {
    ImageData img;
    img.image_id = rec.scene_id;
    img.features = rec.features;
    for (const auto& r : rec.references) {
      const text::WordSeq words = text::tokenize(r);
      img.refs.push_back(text::encode_terminated(words, vocab));
    }
    out.push_back(std::move(img));
  }
  return out;
}

}  // namespace

Corpus Corpus::build(const scene::SceneDataset& ds) {
  std::vector<text::WordSeq> corpus;
  for (const auto& rec : ds.train)
    for (const auto& r : rec.references) corpus.push_back(text::tokenize(r));
  Corpus c;
  c.vocab = text::build_vocab(corpus, 1);
  c.train = encode_split(ds.train, c.vocab);
  c.val = encode_split(ds.val, c.vocab);
  c.test = encode_split(ds.test, c.vocab);

  std::vector<std::vector<Caption>> ref_sets;
  for (const auto& img : c.train) ref_sets.push_back(img.refs);
  c.df = std::make_shared<const metrics::DocFreqTable>(metrics::DocFreqTable::build(ref_sets));
  for (auto* split : {&c.train, &c.val, &c.test})
    for (auto& img : *split) img.scorer = std::make_shared<const metrics::CiderScorer>(img.refs, *c.df);
  for (const auto& img : c.train)
    for (const auto& r : img.refs) c.max_len_ = std::max(c.max_len_, static_cast<int>(r.length()));
  return c;
}

const std::vector<ImageData>& Corpus::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "val") return val;
  if (name == "test") return test;
  throw std::invalid_argument("unknown split '" + name + "'");
}

void XEConfig::validate() const {
  if (epochs < 0) throw std::invalid_argument("xe.epochs must be >= 0");
  if (!(lr > 0.0)) throw std::invalid_argument("xe.lr must be > 0");
  if (!(lr_decay > 0.0) || lr_decay_every < 1) throw std::invalid_argument("xe lr decay must be positive");
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0))
    throw std::invalid_argument("xe.label_smoothing must be in [0, 1)");
  if (!(ss_increment >= 0.0 && ss_increment <= 1.0)) throw std::invalid_argument("xe.ss_increment must be in [0, 1]");
  if (ss_every < 1) throw std::invalid_argument("xe.ss_every must be >= 1");
  if (!(ss_max >= 0.0 && ss_max <= 1.0)) throw std::invalid_argument("xe.ss_max must be in [0, 1]");
  if (batch_images < 1) throw std::invalid_argument("xe.batch_images must be >= 1");
  dropout.validate();
}

double XEConfig::lr_at(int epoch) const { return lr * std::pow(lr_decay, epoch / lr_decay_every); }

double XEConfig::scheduled_sampling_at(int epoch) const {
  return std::min(ss_max, ss_increment * static_cast<double>(epoch / ss_every));
}

std::string to_string(Method m) {
  switch (m) {
    case Method::SCST: return "scst";
    case Method::BSCST: return "bscst";
    case Method::Reinforce: return "reinforce";
  }
  return "?";
}

Method parse_method(const std::string& s) {
  if (s == "scst") return Method::SCST;
  if (s == "bscst") return Method::BSCST;
  if (s == "reinforce") return Method::Reinforce;
  throw std::invalid_argument("unknown method '" + s + "' (expected scst or bscst)");
}

void RLConfig::validate() const {
  if (mc_passes < 1) throw std::invalid_argument("rl.mc_passes must be >= 1");
  if (epochs < 0) throw std::invalid_argument("rl.epochs must be >= 0");
  if (!(lr > 0.0)) throw std::invalid_argument("rl.lr must be > 0");
  if (!(plateau_factor > 0.0 && plateau_factor <= 1.0)) throw std::invalid_argument("rl.plateau_factor must be in (0, 1]");
  if (plateau_patience < 1) throw std::invalid_argument("rl.plateau_patience must be >= 1");
  if (batch_images < 1) throw std::invalid_argument("rl.batch_images must be >= 1");
  dropout.validate();
}

// ---------------------------------------------------------------------------

Value xe_loss(Tape& tape, const Captioner& model, std::span<const XEExample> batch, double eps, double ss_prob,
              const DropoutConfig& dropout, std::span<PassStreams> streams) {
  if (batch.empty()) throw std::invalid_argument("xe_loss: empty batch");
  std::vector<const SceneFeatures*> features;
  std::size_t tokens = 0;
  for (const auto& ex : batch) {
    features.push_back(ex.features);
    tokens += ex.target->length();
  }
  const double V = static_cast<double>(model.config().vocab_size);
  model::DecoderState st = model.encode_scene(tape, features, dropout, streams);
  std::vector<int> prev(batch.size(), text::kBos);
  Value total = tape.constant(Tensor(1, 1));
  std::vector<double> probs;
  for (std::size_t t = 0; !st.rows.empty(); ++t) {
    model::StepOutput so = model.decode_step(tape, st, prev, dropout, streams);
    const std::size_t A = st.rows.size();
    std::vector<int> targets(A);
    for (std::size_t i = 0; i < A; ++i) targets[i] = batch[st.rows[i]].target->ids()[t];
    Value nll = grad::scale(grad::sum(grad::pick(so.logp, targets)), -(1.0 - eps));
    if (eps > 0.0) nll = grad::add(nll, grad::scale(grad::sum(so.logp), -eps / V));
    total = grad::add(total, nll);

    std::vector<int> keep, next;
    for (std::size_t i = 0; i < A; ++i) {
      const std::size_t r = st.rows[i];
      const auto ids = batch[r].target->ids();
      if (t + 1 >= ids.size()) continue;
      int word = ids[t];
      if (ss_prob > 0.0 && streams[r].sampling.bernoulli(ss_prob)) {
        auto row = so.logp.data().row(i);
        probs.assign(row.size(), 0.0);
        for (std::size_t w = 0; w < row.size(); ++w) probs[w] = std::exp(row[w]);
        word = model::choose_word(probs, SamplingStrategy::distribution(), streams[r].sampling);
      }
      keep.push_back(static_cast<int>(i));
      next.push_back(word);
    }
    if (keep.empty()) break;
    model.retain(tape, st, keep);
    prev = std::move(next);
  }
  return grad::scale(total, 1.0 / static_cast<double>(tokens));
}

double xe_step(const Captioner& model, std::span<const ImageData* const> images, const XEConfig& config,
               double ss_prob, std::uint64_t seed) {
  std::vector<XEExample> batch;
  for (const ImageData* img : images)
    for (const auto& ref : img->refs) batch.push_back({&img->features, &ref});
  if (batch.empty()) throw std::invalid_argument("xe_step: empty batch");
  std::vector<PassStreams> streams;
  for (std::size_t r = 0; r < batch.size(); ++r) streams.push_back(PassStreams::derive(seed, "xe.row", {r}));
  model.store().zero_grad();
  Tape tape;
  Value loss = xe_loss(tape, model, batch, config.label_smoothing, ss_prob, config.dropout, streams);
  tape.backward(loss);
  return loss.item();
}

PassStreams rl_streams(std::uint64_t seed, std::size_t image_slot, int pass) {
  return PassStreams::derive(seed, "rl.pass", {image_slot, static_cast<std::uint64_t>(pass)});
}

namespace {

std::vector<PassStreams> make_rl_streams(std::uint64_t seed, std::size_t images, int passes) {
  std::vector<PassStreams> s;
  for (std::size_t i = 0; i < images; ++i)
    for (int m = 0; m < passes; ++m) s.push_back(rl_streams(seed, i, m));
  return s;
}

std::vector<double> surrogate_weights(const RLStepReport& report) {
  std::vector<double> w;
  const double n = static_cast<double>(report.images.size());
  for (const auto& img : report.images) {
    const double m = static_cast<double>(img.advantages.size());
    for (double a : img.advantages) w.push_back(-a / (n * m));
  }
  return w;
}

std::vector<Caption> greedy_captions(const Captioner& model, std::span<const SceneFeatures* const> features,
                                     int max_len) {
  std::vector<PassStreams> streams(features.size(), PassStreams::derive(0, "greedy"));
  Tape tape(false);
  model::Rollout r = model::rollout(tape, model, features, SamplingStrategy::top1(), DropoutConfig::disabled(),
                                    streams, max_len, false);
  std::vector<Caption> out;
  for (auto& p : r.passes) out.push_back(std::move(p.caption));
  return out;
}

}  // namespace

RLStepReport rl_step(const Captioner& model, std::span<const ImageData* const> images, const RLConfig& config,
                     std::uint64_t seed, int max_len) {
  if (images.empty()) throw std::invalid_argument("rl_step: empty batch");
  const int P = config.passes();
  std::vector<const SceneFeatures*> rows;
  for (const ImageData* img : images)
    for (int m = 0; m < P; ++m) rows.push_back(&img->features);
  std::vector<PassStreams> streams = make_rl_streams(seed, images.size(), P);

  model.store().zero_grad();
  Tape tape;
  model::Rollout ro = model::rollout(tape, model, rows, config.sampling, config.dropout, streams, max_len, false);

  std::vector<double> greedy_reward;
  if (config.method == Method::SCST) {
    std::vector<const SceneFeatures*> feats;
    for (const ImageData* img : images) feats.push_back(&img->features);
    const std::vector<Caption> g = greedy_captions(model, feats, max_len);
    for (std::size_t i = 0; i < images.size(); ++i) greedy_reward.push_back(images[i]->cider(g[i]));
  }

  RLStepReport report;
  for (std::size_t i = 0; i < images.size(); ++i) {
    ImageRLReport ir;
    for (int m = 0; m < P; ++m) {
      const Caption& c = ro.passes[i * static_cast<std::size_t>(P) + static_cast<std::size_t>(m)].caption;
      ir.captions.push_back(c);
      ir.rewards.push_back(images[i]->cider(c));
    }
    switch (config.method) {
      case Method::SCST: ir.baseline = greedy_reward[i]; break;
      case Method::BSCST:
        ir.baseline = std::accumulate(ir.rewards.begin(), ir.rewards.end(), 0.0) / static_cast<double>(P);
        break;
      case Method::Reinforce: ir.baseline = 0.0; break;
    }
    for (double r : ir.rewards) ir.advantages.push_back(r - ir.baseline);
    report.images.push_back(std::move(ir));
  }
  const std::vector<double> w = surrogate_weights(report);
  Value loss = ro.weighted_logprob(tape, w);
  report.loss = loss.item();
  if (std::any_of(w.begin(), w.end(), [](double x) { return x != 0.0; })) tape.backward(loss);
  report.grad_norm = model.store().grad_norm();
  return report;
}

Value rl_surrogate(Tape& tape, const Captioner& model, std::span<const ImageData* const> images,
                   const RLStepReport& report, const DropoutConfig& dropout, std::uint64_t seed) {
  if (report.images.size() != images.size()) throw std::invalid_argument("rl_surrogate: report/image mismatch");
  const int P = static_cast<int>(report.images.front().captions.size());
  std::vector<const SceneFeatures*> rows;
  std::vector<Caption> forced;
  for (std::size_t i = 0; i < images.size(); ++i)
    for (int m = 0; m < P; ++m) {
      rows.push_back(&images[i]->features);
      forced.push_back(report.images[i].captions[static_cast<std::size_t>(m)]);
    }
  std::vector<PassStreams> streams = make_rl_streams(seed, images.size(), P);
  int max_len = 1;
  for (const auto& c : forced) max_len = std::max(max_len, static_cast<int>(c.length()));
  model::Rollout ro = model::rollout(tape, model, rows, SamplingStrategy::top1(), dropout, streams, max_len, false,
                                     forced);
  return ro.weighted_logprob(tape, surrogate_weights(report));
}

double greedy_cider(const Captioner& model, std::span<const ImageData> images, int max_len,
                    std::vector<double>* per_image) {
  if (images.empty()) return 0.0;
  std::vector<const SceneFeatures*> feats;
  for (const auto& img : images) feats.push_back(&img.features);
  const std::vector<Caption> caps = greedy_captions(model, feats, max_len);
  double total = 0.0;
  if (per_image) per_image->clear();
  for (std::size_t i = 0; i < images.size(); ++i) {
    const double s = images[i].cider(caps[i]);
    total += s;
    if (per_image) per_image->push_back(s);
  }
  return total / static_cast<double>(images.size());
}

void write_log_csv(std::span<const LogRow> rows, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "epoch,phase,split,metric,value\n";
  char num[40];
  for (const auto& r : rows) {
    std::snprintf(num, sizeof num, "%.10g", r.value);
    out << r.epoch << ',' << r.phase << ',' << r.split << ',' << r.metric << ',' << num << '\n';
  }
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

namespace {

std::vector<const ImageData*> epoch_order(const Corpus& corpus, std::uint64_t seed, std::string_view purpose,
                                          int epoch) {
  std::vector<const ImageData*> order;
  for (const auto& img : corpus.train) order.push_back(&img);
  Rng rng = Rng::stream(seed, purpose, {static_cast<std::uint64_t>(epoch)});
  std::shuffle(order.begin(), order.end(), rng.engine());
  return order;
}

void track(PhaseResult& res, const grad::ParamStore& store, int epoch, double val) {
  res.val_cider.push_back(val);
  res.final_val = val;
  if (val > res.best_val) {
    res.best_val = val;
    res.best_epoch = epoch;
    res.best = store;
  }
}

}  // namespace

PhaseResult train_xe(grad::ParamStore& store, const model::ModelConfig& mc, const Corpus& corpus,
                     const XEConfig& config, std::uint64_t seed) {
  config.validate();
  Captioner model(mc, store);
  PhaseResult res;
  res.start_val = greedy_cider(model, corpus.val, mc.max_len);
  res.final_val = res.best_val = res.start_val;
  res.best = store;
  res.log.push_back({0, "xe", "val", "cider_d", res.start_val});
  const std::size_t B = static_cast<std::size_t>(config.batch_images);
  for (int e = 0; e < config.epochs; ++e) {
    const double lr = config.lr_at(e);
    const double ss = config.scheduled_sampling_at(e);
    const auto order = epoch_order(corpus, seed, "xe.shuffle", e);
    double loss_sum = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += B) {
      const std::size_t n = std::min(B, order.size() - start);
      const std::uint64_t step_seed = derive_seed(seed, "xe.step", {static_cast<std::uint64_t>(e), start});
      loss_sum += xe_step(model, std::span(order).subspan(start, n), config, ss, step_seed);
      grad::adam_step(store, {lr});
      ++steps;
    }
    const double val = greedy_cider(model, corpus.val, mc.max_len);
    res.log.push_back({e + 1, "xe", "train", "loss", loss_sum / static_cast<double>(std::max<std::size_t>(1, steps))});
    res.log.push_back({e + 1, "xe", "train", "lr", lr});
    res.log.push_back({e + 1, "xe", "train", "ss_prob", ss});
    res.log.push_back({e + 1, "xe", "val", "cider_d", val});
    track(res, store, e + 1, val);
  }
  return res;
}

PhaseResult train_rl(grad::ParamStore& store, const model::ModelConfig& mc, const Corpus& corpus,
                     const RLConfig& config, std::uint64_t seed) {
  config.validate();
  for (auto& p : store) {
    std::fill(p.adam.m.data.begin(), p.adam.m.data.end(), 0.0);
    std::fill(p.adam.v.data.begin(), p.adam.v.data.end(), 0.0);
    p.adam.step = 0;
  }
  Captioner model(mc, store);
  PhaseResult res;
  res.start_val = greedy_cider(model, corpus.val, mc.max_len);
  res.final_val = res.best_val = res.start_val;
  res.best = store;
  const std::string phase = to_string(config.method);
  res.log.push_back({0, phase, "val", "cider_d", res.start_val});
  const std::size_t B = static_cast<std::size_t>(config.batch_images);
  double lr = config.lr;
  double prev_val = res.start_val;
  int degraded = 0;
  for (int e = 0; e < config.epochs; ++e) {
    const auto order = epoch_order(corpus, seed, "rl.shuffle", e);
    double loss_sum = 0.0, reward_sum = 0.0, norm_sum = 0.0;
    std::size_t steps = 0, samples = 0;
    for (std::size_t start = 0; start < order.size(); start += B) {
      const std::size_t n = std::min(B, order.size() - start);
      const std::uint64_t step_seed = derive_seed(seed, "rl.step", {static_cast<std::uint64_t>(e), start});
      const RLStepReport rep = rl_step(model, std::span(order).subspan(start, n), config, step_seed, mc.max_len);
      grad::adam_step(store, {lr});
      loss_sum += rep.loss;
      norm_sum += rep.grad_norm;
      for (const auto& img : rep.images)
        for (double r : img.rewards) {
          reward_sum += r;
          ++samples;
        }
      ++steps;
    }
    const double val = greedy_cider(model, corpus.val, mc.max_len);
    const double denom = static_cast<double>(std::max<std::size_t>(1, steps));
    res.log.push_back({e + 1, phase, "train", "loss", loss_sum / denom});
    res.log.push_back({e + 1, phase, "train", "grad_norm", norm_sum / denom});
    res.log.push_back({e + 1, phase, "train", "reward_mean", reward_sum / static_cast<double>(std::max<std::size_t>(1, samples))});
    res.log.push_back({e + 1, phase, "train", "lr", lr});
    res.log.push_back({e + 1, phase, "val", "cider_d", val});
    track(res, store, e + 1, val);
    degraded = val < prev_val ? degraded + 1 : 0;
    if (degraded >= config.plateau_patience) {
      lr *= config.plateau_factor;
      degraded = 0;
    }
    prev_val = val;
  }
  return res;
}

}  // namespace bscst::train
