#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "bscst/trainer.hpp"
#include "gradcheck.hpp"

using namespace bscst;
using namespace bscst::train;

namespace {

struct Fixture {
  Corpus corpus;
  model::ModelConfig mc;

  Fixture() {
    scene::GenConfig g;
    g.n_train = 24;
    g.n_val = 6;
    g.n_test = 6;
    corpus = Corpus::build(scene::generate(g));
    mc.vocab_size = corpus.vocab.size();
    mc.max_len = corpus.max_len();
    mc.encoder_dim = 8;
    mc.embed_dim = 6;
    mc.hidden_dim = 10;
    mc.attention_dim = 5;
  }

  grad::ParamStore params(std::uint64_t seed) const {
    grad::ParamStore s;
    Rng rng(seed);
    model::Captioner::init_params(mc, s, rng);
    return s;
  }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

}  // namespace

TEST_CASE("corpus vocabulary and df come from the training split") {
  const auto& f = fixture();
  CHECK(f.corpus.df->num_images() == f.corpus.train.size());
  CHECK(f.corpus.train.size() == 24);
  int longest = 0;
  for (const auto& img : f.corpus.train)
    for (const auto& r : img.refs) {
      CHECK(r.terminated());
      longest = std::max(longest, static_cast<int>(r.length()));
    }
  CHECK(f.corpus.max_len() == longest);
  CHECK_THROWS(f.corpus.split("dev"));
  const auto& img = f.corpus.val.front();
  CHECK(img.cider(img.refs.front()) > 0.0);
}

TEST_CASE("uniform output layer gives XE loss log V with or without smoothing") {
  const auto& f = fixture();
  grad::ParamStore s = f.params(1);
  for (double& v : s.get("vocab.w").value.data) v = 0.0;
  for (double& v : s.get("vocab.b").value.data) v = 0.0;
  model::Captioner cap(f.mc, s);
  std::vector<XEExample> batch;
  for (const auto& r : f.corpus.train[0].refs) batch.push_back({&f.corpus.train[0].features, &r});
  for (double eps : {0.0, 0.1}) {
    grad::Tape t;
    std::vector<model::PassStreams> st(batch.size(), model::PassStreams::derive(1, "u"));
    const double loss = xe_loss(t, cap, batch, eps, 0.0, model::DropoutConfig::disabled(), st).item();
    CHECK(loss == doctest::Approx(std::log(static_cast<double>(f.mc.vocab_size))).epsilon(1e-12));
  }
}

TEST_CASE("XE loss gradient matches finite differences on every parameter") {
  const auto& f = fixture();
  grad::ParamStore s = f.params(2);
  model::Captioner cap(f.mc, s);
  const auto& img = f.corpus.train[1];
  const std::vector<XEExample> batch = {{&img.features, &img.refs[0]}, {&img.features, &img.refs[3]}};
  const auto drop = model::DropoutConfig::training(0.2, model::MaskPolicy::TiedPerSequence);
  auto loss = [&](bool record) {
    grad::Tape t(record);
    std::vector<model::PassStreams> st = {model::PassStreams::derive(4, "fd", {0}), model::PassStreams::derive(4, "fd", {1})};
    grad::Value l = xe_loss(t, cap, batch, 0.1, 0.0, drop, st);
    if (record) t.backward(l);
    return l.item();
  };
  s.zero_grad();
  loss(true);
  const auto rep = gradcheck::check_params(s, [&] { return loss(false); });
  INFO("worst at " << rep.worst);
  CHECK(rep.max_rel < 1e-4);
}

TEST_CASE("RL surrogate gradient matches finite differences and the step gradient") {
  const auto& f = fixture();
  grad::ParamStore s = f.params(3);
  model::Captioner cap(f.mc, s);
  const ImageData* imgs[] = {&f.corpus.train[2], &f.corpus.train[5]};
  RLConfig cfg;
  cfg.mc_passes = 3;
  const RLStepReport rep = bscst_step(cap, imgs, cfg, 77, 8);
  const std::vector<double> step_grad = s.flat_grad();
  auto loss = [&](bool record) {
    grad::Tape t(record);
    grad::Value l = rl_surrogate(t, cap, imgs, rep, cfg.dropout, 77);
    if (record) t.backward(l);
    return l.item();
  };
  s.zero_grad();
  CHECK(loss(true) == doctest::Approx(rep.loss).epsilon(1e-12));
  const std::vector<double> replay_grad = s.flat_grad();
  REQUIRE(replay_grad.size() == step_grad.size());
  for (std::size_t j = 0; j < step_grad.size(); ++j) CHECK(replay_grad[j] == doctest::Approx(step_grad[j]).epsilon(1e-10));
  const auto fd = gradcheck::check_params(s, [&] { return loss(false); });
  INFO("worst at " << fd.worst);
  CHECK(fd.max_rel < 1e-4);
}

TEST_CASE("surrogate weights follow the baseline algebra") {
  const auto& f = fixture();
  grad::ParamStore s = f.params(4);
  model::Captioner cap(f.mc, s);
  const ImageData* imgs[] = {&f.corpus.train[0]};
  RLConfig cfg;
  cfg.mc_passes = 4;
  cfg.dropout = model::DropoutConfig::disabled();
  RLStepReport rep = bscst_step(cap, imgs, cfg, 5, 8);
  // rewards 2, 4, 6, 8 -> baseline 5, advantages -3, -1, 1, 3
  rep.images[0].rewards = {2, 4, 6, 8};
  rep.images[0].baseline = 5;
  rep.images[0].advantages = {-3, -1, 1, 3};
  std::vector<double> logp;
  for (const auto& c : rep.images[0].captions) {
    std::vector<const SceneFeatures*> rows = {&imgs[0]->features};
    std::vector<model::PassStreams> st = {model::PassStreams::derive(0, "x")};
    grad::Tape t(false);
    const std::vector<Caption> forced = {c};
    logp.push_back(model::rollout(t, cap, rows, model::SamplingStrategy::top1(), cfg.dropout, st, 8, false, forced)
                       .passes[0]
                       .total_logp);
  }
  grad::Tape t(false);
  const double loss = rl_surrogate(t, cap, imgs, rep, cfg.dropout, 5).item();
  const double expect = -(-3 * logp[0] - 1 * logp[1] + 1 * logp[2] + 3 * logp[3]) / 4.0;
  CHECK(loss == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("B-SCST baseline is the mean reward and M=1 gives no gradient") {
  const auto& f = fixture();
  grad::ParamStore s = f.params(5);
  model::Captioner cap(f.mc, s);
  Rng rng(9);
  for (int k = 0; k < 40; ++k) {
    const ImageData* imgs[] = {&f.corpus.train[rng.below(f.corpus.train.size())]};
    RLConfig cfg;
    cfg.mc_passes = 1 + static_cast<int>(rng.below(6));
    const RLStepReport rep = bscst_step(cap, imgs, cfg, rng.next(), 8);
    const auto& ir = rep.images[0];
    REQUIRE(ir.rewards.size() == static_cast<std::size_t>(cfg.mc_passes));
    const double mean = std::accumulate(ir.rewards.begin(), ir.rewards.end(), 0.0) / cfg.mc_passes;
    CHECK(ir.baseline == doctest::Approx(mean));
    CHECK(std::abs(std::accumulate(ir.advantages.begin(), ir.advantages.end(), 0.0)) < 1e-12);
    for (std::size_t m = 0; m < ir.captions.size(); ++m) CHECK(ir.rewards[m] == imgs[0]->cider(ir.captions[m]));
    if (cfg.mc_passes == 1) {
      CHECK(ir.advantages[0] == 0.0);
      CHECK(s.grad_norm() == 0.0);
    }
  }
}

TEST_CASE("SCST baseline is the reward of the greedy caption") {
  const auto& f = fixture();
  grad::ParamStore s = f.params(6);
  model::Captioner cap(f.mc, s);
  const ImageData* imgs[] = {&f.corpus.train[3], &f.corpus.train[4]};
  const RLStepReport rep = scst_step(cap, imgs, RLConfig{}, 8, f.mc.max_len);
  std::vector<double> greedy;
  std::vector<ImageData> two = {f.corpus.train[3], f.corpus.train[4]};
  greedy_cider(cap, two, f.mc.max_len, &greedy);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(rep.images[i].captions.size() == 1);
    CHECK(rep.images[i].baseline == greedy[i]);
    CHECK(rep.images[i].advantages[0] == rep.images[i].rewards[0] - greedy[i]);
  }
  RLConfig rf;
  rf.method = Method::Reinforce;
  rf.mc_passes = 3;
  const RLStepReport r2 = rl_step(cap, imgs, rf, 8, 8);
  CHECK(r2.images[0].captions.size() == 3);
  CHECK(r2.images[0].baseline == 0.0);
}

TEST_CASE("schedules and validation") {
  XEConfig x;
  x.lr = 1.0;
  x.lr_decay = 0.5;
  x.lr_decay_every = 2;
  CHECK(x.lr_at(0) == 1.0);
  CHECK(x.lr_at(1) == 1.0);
  CHECK(x.lr_at(2) == 0.5);
  CHECK(x.lr_at(5) == 0.25);
  x.ss_increment = 0.05;
  x.ss_every = 5;
  x.ss_max = 0.25;
  CHECK(x.scheduled_sampling_at(4) == 0.0);
  CHECK(x.scheduled_sampling_at(5) == doctest::Approx(0.05));
  CHECK(x.scheduled_sampling_at(100) == 0.25);
  x.label_smoothing = 1.0;
  CHECK_THROWS(x.validate());
  RLConfig r;
  r.mc_passes = 0;
  CHECK_THROWS(r.validate());
  CHECK(parse_method("bscst") == Method::BSCST);
  CHECK_THROWS(parse_method("ppo"));
}

TEST_CASE("training loops are deterministic and log every epoch") {
  const auto& f = fixture();
  XEConfig xc;
  xc.epochs = 2;
  auto run = [&] {
    grad::ParamStore s = f.params(7);
    PhaseResult xe = train_xe(s, f.mc, f.corpus, xc, 3);
    RLConfig rc;
    rc.epochs = 2;
    rc.mc_passes = 2;
    PhaseResult rl = train_rl(s, f.mc, f.corpus, rc, 4);
    // ADAM restarts at RL start: 24 images in batches of 10 -> 3 steps per epoch
    CHECK(s.get("embed").adam.step == 6);
    return std::make_pair(xe, rl);
  };
  const auto [xe1, rl1] = run();
  const auto [xe2, rl2] = run();
  CHECK(xe1.val_cider == xe2.val_cider);
  CHECK(rl1.val_cider == rl2.val_cider);
  CHECK(rl1.val_cider.size() == 2);
  CHECK(rl1.start_val == xe1.final_val);
  CHECK(xe1.best_val >= xe1.start_val);
  CHECK(xe1.log.front().epoch == 0);

  const auto path = std::filesystem::temp_directory_path() / "bscst_log_test.csv";
  write_log_csv(rl1.log, path);
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  CHECK(header == "epoch,phase,split,metric,value");
  std::filesystem::remove(path);
}

TEST_CASE("XE training lowers the loss") {
  const auto& f = fixture();
  grad::ParamStore s = f.params(8);
  XEConfig xc;
  xc.epochs = 4;
  const PhaseResult res = train_xe(s, f.mc, f.corpus, xc, 1);
  double first = 0, last = 0;
  for (const auto& row : res.log)
    if (row.metric == "loss") (first == 0 ? first : last) = row.value;
  CHECK(last < first);
}
