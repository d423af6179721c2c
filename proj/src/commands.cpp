#include "bscst/commands.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>

#include "json.hpp"

namespace bscst::cmd {

using exp::ExperimentConfig;
using exp::Manifest;
using exp::UsageError;
using exp::Workspace;
using exp::WorkdirLock;

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

void write_text(const fs::path& path, const std::string& body) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << body;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

void write_json(const fs::path& path, const nlohmann::ordered_json& j) { write_text(path, j.dump(2) + "\n"); }

bool has_content(const fs::path& dir) {
  if (!fs::exists(dir)) return false;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().filename() != ".lock") return true;
  return false;
}

std::string sanitize(std::string s) {
  s.erase(std::remove(s.begin(), s.end(), ':'), s.end());
  return s;
}

const std::vector<train::ImageData>& split_or_usage(const train::Corpus& c, const std::string& split) {
  if (split != "train" && split != "val" && split != "test")
    throw UsageError("unknown split '" + split + "' (expected train, val or test)");
  return c.split(split);
}

void save_phase(const Workspace& ws, const train::PhaseResult& res, const grad::ParamStore& last,
                const std::string& tag, Manifest& manifest) {
  const fs::path ck = ws.config.checkpoints();
  fs::create_directories(ck);
  fs::create_directories(ws.config.workdir / "logs");
  grad::save_checkpoint(res.best, ck / (tag + ".ckpt"));
  grad::save_checkpoint(last, ck / (tag + "_last.ckpt"));
  train::write_log_csv(res.log, ws.config.workdir / "logs" / (tag + ".csv"));
  nlohmann::ordered_json j;
  j["run"] = tag;
  j["start_val_cider_d"] = res.start_val;
  j["final_val_cider_d"] = res.final_val;
  j["best_val_cider_d"] = res.best_val;
  j["best_epoch"] = res.best_epoch;
  write_json(ws.config.workdir / "logs" / (tag + ".json"), j);
  for (const fs::path& p : {ck / (tag + ".ckpt"), ck / (tag + "_last.ckpt"), ws.config.workdir / "logs" / (tag + ".csv"),
                            ws.config.workdir / "logs" / (tag + ".json")})
    manifest.add(p);
}

void report_epochs(const train::PhaseResult& res, const std::string& tag, std::ostream& log) {
  for (std::size_t e = 0; e < res.val_cider.size(); ++e)
    log << tag << " epoch " << e + 1 << " val CIDEr-D " << fmt(res.val_cider[e]) << '\n';
  log << tag << ": start " << fmt(res.start_val) << ", final " << fmt(res.final_val) << ", best " << fmt(res.best_val)
      << " (epoch " << res.best_epoch << ")\n";
}

}  // namespace

fs::path resolve_checkpoint(const ExperimentConfig& config, const fs::path& arg) {
  if (arg.empty()) throw UsageError("--checkpoint is required");
  if (fs::exists(arg)) return arg;
  for (const fs::path& p : {config.checkpoints() / arg, config.checkpoints() / (arg.string() + ".ckpt")})
    if (fs::exists(p)) return p;
  throw std::runtime_error("checkpoint not found: " + arg.string());
}

void gen_data(const ExperimentConfig& config, bool force, std::ostream& log) {
  if (has_content(config.workdir) && !force)
    throw std::runtime_error("workdir " + config.workdir.string() + " is not empty; use --force to regenerate");
  WorkdirLock lock(config.workdir);
  scene::SceneDataset ds;
  try {
    ds = scene::generate(config.data);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  Manifest manifest = Manifest::fresh(config.workdir);
  const fs::path data = config.workdir / "dataset.tsv";
  scene::save_dataset(ds, data);
  const train::Corpus corpus = train::Corpus::build(ds);
  corpus.vocab.save(config.workdir / "vocab.txt");
  corpus.df->save(config.workdir / "df.tsv", corpus.vocab);
  write_text(config.workdir / "config.txt", "# config_hash " + config.hash() + "\n" + config.to_text(false));
  for (const char* f : {"dataset.tsv", "vocab.txt", "df.tsv", "config.txt"}) manifest.add(config.workdir / f);
  manifest.write(config, "gen-data");
  log << "wrote " << ds.train.size() + ds.val.size() + ds.test.size() << " scenes to " << data.string() << " (vocabulary "
      << corpus.vocab.size() << " tokens)\n";
}

ExperimentConfig apply_overrides(ExperimentConfig config, const TrainOptions& opts) {
  if (opts.phase != "xe" && opts.phase != "rl" && opts.phase != "both")
    throw UsageError("--phase must be xe, rl or both");
  if (opts.method) {
    if (*opts.method != "scst" && *opts.method != "bscst") throw UsageError("--method must be scst or bscst");
    config.rl.method = train::parse_method(*opts.method);
  }
  if (opts.mc_passes) {
    if (*opts.mc_passes < 1) throw UsageError("--mc-passes must be >= 1");
    config.rl.mc_passes = *opts.mc_passes;
  }
  if (opts.sampling) {
    try {
      config.rl.sampling = model::SamplingStrategy::parse(*opts.sampling);
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }
  if (opts.seed) config.seed = *opts.seed;
  return config;
}

std::string rl_tag(const train::RLConfig& rl, std::uint64_t seed) {
  std::string tag = train::to_string(rl.method);
  if (rl.method == train::Method::BSCST) tag += "_m" + std::to_string(rl.mc_passes);
  return tag + "_" + sanitize(rl.sampling.to_string()) + "_s" + std::to_string(seed);
}

void train(const ExperimentConfig& base, const TrainOptions& opts, std::ostream& log) {
  const ExperimentConfig config = apply_overrides(base, opts);
  WorkdirLock lock(config.workdir);
  const Workspace ws = Workspace::open(config);
  Manifest manifest = Manifest::open(config.workdir);
  if (opts.phase == "xe" || opts.phase == "both") {
    grad::ParamStore store = ws.fresh_params(config.seed);
    const train::PhaseResult res = train::train_xe(store, ws.model, ws.corpus, config.xe, config.seed);
    report_epochs(res, "xe", log);
    save_phase(ws, res, store, "xe", manifest);
  }
  if (opts.phase == "rl" || opts.phase == "both") {
    const fs::path xe = config.checkpoints() / "xe.ckpt";
    if (!fs::exists(xe)) throw std::runtime_error("no XE checkpoint at " + xe.string() + " (run train --phase xe first)");
    grad::ParamStore store = ws.load_params(xe);
    if (config.rl.method == train::Method::BSCST && !config.rl.dropout.any_active())
      log << "warning: B-SCST with dropout disabled; passes differ only through sampling\n";
    const train::PhaseResult res = train::train_rl(store, ws.model, ws.corpus, config.rl, config.seed);
    const std::string tag = rl_tag(config.rl, config.seed);
    report_epochs(res, tag, log);
    save_phase(ws, res, store, tag, manifest);
  }
  manifest.write(config, "train");
}

fs::path eval(const ExperimentConfig& config, const EvalOptions& opts, std::ostream& log) {
  const int width = opts.beam_width > 0 ? opts.beam_width : config.beam_width;
  if (opts.beam_width < 0) throw UsageError("--beam-width must be >= 1");
  WorkdirLock lock(config.workdir);
  const Workspace ws = Workspace::open(config);
  const auto& images = split_or_usage(ws.corpus, opts.split);
  std::string stem = "injected";
  std::optional<grad::ParamStore> store;
  if (!opts.inject_references) {
    const fs::path ck = resolve_checkpoint(config, opts.checkpoint);
    store = ws.load_params(ck);
    stem = ck.stem().string();
  }
  const std::string name = stem + "_" + opts.split + "_w" + std::to_string(width);
  const fs::path dir = config.workdir / "eval";
  fs::create_directories(dir);

  std::string csv = "image_id,caption,bleu1,bleu4,rouge_l,cider_d\n";
  double sums[4] = {0, 0, 0, 0};
  for (const auto& img : images) {
    text::Caption cand;
    std::vector<text::Caption> refs = img.refs;
    if (opts.inject_references) {
      cand = img.refs.front();
      refs = {img.refs.front()};
    } else {
      model::Captioner cap(ws.model, *store);
      cand = model::beam_search(cap, img.features, width, ws.model.max_len);
    }
    const double s[4] = {metrics::bleu(cand.words(), refs, 1), metrics::bleu4(cand.words(), refs),
                         metrics::rouge_l(cand.words(), refs), metrics::cider_d(cand.words(), refs, *ws.corpus.df)};
    for (int k = 0; k < 4; ++k) sums[k] += s[k];
    csv += std::to_string(img.image_id) + ",\"" + text::join(text::decode(cand, ws.corpus.vocab)) + "\"," + fmt(s[0]) + "," +
           fmt(s[1]) + "," + fmt(s[2]) + "," + fmt(s[3]) + "\n";
  }
  const double n = static_cast<double>(std::max<std::size_t>(1, images.size()));
  nlohmann::ordered_json j;
  j["checkpoint"] = opts.inject_references ? std::string("(injected references)") : opts.checkpoint.filename().string();
  j["split"] = opts.split;
  j["beam_width"] = width;
  j["images"] = images.size();
  j["bleu1"] = sums[0] / n;
  j["bleu4"] = sums[1] / n;
  j["rouge_l"] = sums[2] / n;
  j["cider_d"] = sums[3] / n;
  const fs::path json_path = dir / (name + ".json");
  write_text(dir / (name + ".csv"), csv);
  write_json(json_path, j);
  Manifest manifest = Manifest::open(config.workdir);
  manifest.add(dir / (name + ".csv"));
  manifest.add(json_path);
  manifest.write(config, "eval");
  log << name << ": BLEU-1 " << fmt(sums[0] / n) << ", BLEU-4 " << fmt(sums[1] / n) << ", ROUGE-L " << fmt(sums[2] / n)
      << ", CIDEr-D " << fmt(sums[3] / n) << '\n';
  return json_path;
}

fs::path uq(const ExperimentConfig& config, const UQOptions& opts, std::ostream& log) {
  uq::UQConfig uc = config.uq;
  if (opts.mc_passes < 0) throw UsageError("--mc-passes must be >= 1");
  if (opts.mc_passes > 0) uc.mc_passes = opts.mc_passes;
  uc.seed = config.seed;
  if (uc.mc_passes < 2) log << "warning: fewer than 2 MC passes; mutual information is identically zero\n";
  WorkdirLock lock(config.workdir);
  const Workspace ws = Workspace::open(config);
  const auto& images = split_or_usage(ws.corpus, opts.split);
  const fs::path ck = resolve_checkpoint(config, opts.checkpoint);
  grad::ParamStore store = ws.load_params(ck);
  model::Captioner cap(ws.model, store);
  const auto rows = uq::analyze_split(cap, images, uc, ws.model.max_len);
  const auto bins = uq::quantile_report(rows, 5);

  const std::string name = ck.stem().string() + "_" + opts.split + "_m" + std::to_string(uc.mc_passes);
  const fs::path dir = config.workdir / "uq";
  fs::create_directories(dir);
  const fs::path per_image = dir / (name + "_per_image.csv"), quant = dir / (name + "_quantiles.csv"),
                 per_pass = dir / (name + "_per_pass.csv"), summary = dir / (name + "_summary.json");
  uq::write_per_image_csv(rows, per_image);
  uq::write_quantile_csv(bins, quant);
  uq::write_per_pass_csv(rows, per_pass);

  std::vector<double> h, mi, conf, cider;
  for (const auto& r : rows) {
    h.push_back(r.h_pred);
    mi.push_back(r.mi);
    conf.push_back(r.softmax_conf);
    cider.push_back(r.cider_mean);
  }
  nlohmann::ordered_json j;
  j["checkpoint"] = ck.filename().string();
  j["split"] = opts.split;
  j["images"] = rows.size();
  j["mc_passes"] = uc.mc_passes;
  j["dropout_rate"] = uc.rate;
  j["spearman_entropy_cider"] = uq::spearman(h, cider);
  j["spearman_mi_cider"] = uq::spearman(mi, cider);
  j["spearman_confidence_cider"] = uq::spearman(conf, cider);
  j["min_mi"] = mi.empty() ? 0.0 : *std::min_element(mi.begin(), mi.end());
  nlohmann::ordered_json qs = nlohmann::ordered_json::array();
  for (const auto& b : bins) qs.push_back(b.mean_h);
  j["quantile_mean_entropy"] = qs;
  write_json(summary, j);

  Manifest manifest = Manifest::open(config.workdir);
  for (const auto& p : {per_image, quant, per_pass, summary}) manifest.add(p);
  manifest.write(config, "uq");
  log << name << ": Spearman(H, CIDEr-D) " << fmt(j["spearman_entropy_cider"].get<double>()) << '\n';
  return summary;
}

fs::path ablate(const ExperimentConfig& config, const AblateOptions& opts, std::ostream& log) {
  if (opts.axis != "sampling" && opts.axis != "mcpasses" && opts.axis != "architecture")
    throw UsageError("unknown ablation axis '" + opts.axis + "' (expected sampling, mcpasses or architecture)");
  if (opts.seeds < 1) throw UsageError("--seeds must be >= 1");
  WorkdirLock lock(config.workdir);
  const Workspace ws = Workspace::open(config);

  struct Cell {
    std::string name;
    train::RLConfig rl;
    bool attention;
  };
  std::vector<Cell> cells;
  if (opts.axis == "sampling") {
    for (const char* s : {"random", "top1", "topk:5", "topk:10", "distr"}) {
      train::RLConfig rl = config.rl;
      rl.method = train::Method::BSCST;
      rl.sampling = model::SamplingStrategy::parse(s);
      cells.push_back({s, rl, config.model.attention});
    }
  } else if (opts.axis == "mcpasses") {
    for (int m : {1, 3, 5, 10, 15}) {
      train::RLConfig rl = config.rl;
      rl.method = train::Method::BSCST;
      rl.mc_passes = m;
      cells.push_back({std::to_string(m), rl, config.model.attention});
    }
  } else {
    for (bool att : {true, false}) {
      train::RLConfig rl = config.rl;
      rl.method = train::Method::BSCST;
      cells.push_back({att ? "attention" : "no_attention", rl, att});
    }
  }

  std::string csv = "axis,cell,seed,xe_val_cider_d,final_val_cider_d,best_val_cider_d,gain\n";
  std::optional<grad::ParamStore> shared_xe;
  if (opts.axis != "architecture") {
    const fs::path xe = config.checkpoints() / "xe.ckpt";
    if (!fs::exists(xe)) throw std::runtime_error("no XE checkpoint at " + xe.string() + " (run train --phase xe first)");
    shared_xe = ws.load_params(xe);
  }
  for (const Cell& cell : cells) {
    model::ModelConfig mc = ws.model;
    mc.attention = cell.attention;
    grad::ParamStore xe_params;
    if (shared_xe) {
      xe_params = *shared_xe;
    } else {
      Rng rng = Rng::stream(config.seed, "model.init");
      model::Captioner::init_params(mc, xe_params, rng);
      train::train_xe(xe_params, mc, ws.corpus, config.xe, config.seed);
    }
    for (int k = 0; k < opts.seeds; ++k) {
      const std::uint64_t seed = config.seed + static_cast<std::uint64_t>(k);
      grad::ParamStore store = xe_params;
      const train::PhaseResult res = train::train_rl(store, mc, ws.corpus, cell.rl, seed);
      csv += opts.axis + "," + cell.name + "," + std::to_string(seed) + "," + fmt(res.start_val) + "," +
             fmt(res.final_val) + "," + fmt(res.best_val) + "," + fmt(res.final_val - res.start_val) + "\n";
      log << opts.axis << " " << cell.name << " seed " << seed << ": " << fmt(res.start_val) << " -> "
          << fmt(res.final_val) << '\n';
    }
  }
  const fs::path out = config.workdir / "ablate" / (opts.axis + ".csv");
  write_text(out, csv);
  Manifest manifest = Manifest::open(config.workdir);
  manifest.add(out);
  manifest.write(config, "ablate");
  return out;
}

}  // namespace bscst::cmd
