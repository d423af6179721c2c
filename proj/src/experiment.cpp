#include "bscst/experiment.hpp"

#include <zlib.h>

#include "json.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <functional>
#include <sstream>
#include <type_traits>

namespace bscst::exp {

namespace fs = std::filesystem;

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

double to_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double x = 0.0;
  try {
    x = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw UsageError(key + ": expected a number, got '" + v + "'");
  return x;
}

long long to_int(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  long long x = 0;
  try {
    x = std::stoll(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw UsageError(key + ": expected an integer, got '" + v + "'");
  return x;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "on" || v == "1") return true;
  if (v == "false" || v == "off" || v == "0") return false;
  throw UsageError(key + ": expected true or false, got '" + v + "'");
}

std::string policy_name(model::MaskPolicy p) { return p == model::MaskPolicy::TiedPerSequence ? "tied" : "fresh"; }

model::MaskPolicy to_policy(const std::string& key, const std::string& v) {
  if (v == "fresh") return model::MaskPolicy::FreshPerTimestep;
  if (v == "tied") return model::MaskPolicy::TiedPerSequence;
  throw UsageError(key + ": expected fresh or tied, got '" + v + "'");
}

std::string site_name(model::DropoutSite s) {
  switch (s) {
    case model::DropoutSite::EncoderOutput: return "encoder";
    case model::DropoutSite::DecoderState: return "decoder";
    case model::DropoutSite::FinalFc: return "final_fc";
  }
  return "?";
}

model::DropoutSite to_site(const std::string& key, const std::string& v) {
  if (v == "encoder") return model::DropoutSite::EncoderOutput;
  if (v == "decoder") return model::DropoutSite::DecoderState;
  if (v == "final_fc") return model::DropoutSite::FinalFc;
  throw UsageError(key + ": expected encoder, decoder or final_fc, got '" + v + "'");
}

struct Field {
  std::string key;
  bool semantic;
  std::function<std::string()> get;
  std::function<void(const std::string&)> set;
};

template <typename T>
Field int_field(std::string key, T& ref) {
  return {key, true, [&ref] { return std::to_string(ref); },
          [&ref, key](const std::string& v) {
            const long long x = to_int(key, v);
            if (std::is_unsigned_v<T> && x < 0) throw UsageError(key + ": must not be negative");
            ref = static_cast<T>(x);
          }};
}

Field double_field(std::string key, double& ref) {
  return {key, true, [&ref] { return fmt_double(ref); }, [&ref, key](const std::string& v) { ref = to_double(key, v); }};
}

Field bool_field(std::string key, bool& ref) {
  return {key, true, [&ref] { return std::string(ref ? "true" : "false"); },
          [&ref, key](const std::string& v) { ref = to_bool(key, v); }};
}

Field training_dropout(std::string key, model::DropoutConfig& d) {
  return {key, true, [&d] { return fmt_double(d.rate[0]); },
          [&d, key](const std::string& v) {
            const double p = to_double(key, v);
            d.rate[0] = d.rate[1] = p;
          }};
}

Field policy_field(std::string key, model::DropoutConfig& d) {
  return {key, true, [&d] { return policy_name(d.policy); },
          [&d, key](const std::string& v) { d.policy = to_policy(key, v); }};
}

std::vector<Field> bind(ExperimentConfig& c) {
  std::vector<Field> f;
  f.push_back(int_field("seed", c.seed));
  f.push_back(int_field("dataset.seed", c.data.seed));
  f.push_back(int_field("dataset.n_train", c.data.n_train));
  f.push_back(int_field("dataset.n_val", c.data.n_val));
  f.push_back(int_field("dataset.n_test", c.data.n_test));
  f.push_back(int_field("dataset.max_objects", c.data.max_objects));
  f.push_back(double_field("dataset.jitter", c.data.jitter));
  f.push_back(int_field("model.encoder_dim", c.model.encoder_dim));
  f.push_back(int_field("model.embed_dim", c.model.embed_dim));
  f.push_back(int_field("model.hidden_dim", c.model.hidden_dim));
  f.push_back(int_field("model.attention_dim", c.model.attention_dim));
  f.push_back(bool_field("model.attention", c.model.attention));
  f.push_back(int_field("model.max_len", c.model.max_len));
  f.push_back(int_field("xe.epochs", c.xe.epochs));
  f.push_back(double_field("xe.lr", c.xe.lr));
  f.push_back(double_field("xe.lr_decay", c.xe.lr_decay));
  f.push_back(int_field("xe.lr_decay_every", c.xe.lr_decay_every));
  f.push_back(double_field("xe.label_smoothing", c.xe.label_smoothing));
  f.push_back(double_field("xe.ss_increment", c.xe.ss_increment));
  f.push_back(int_field("xe.ss_every", c.xe.ss_every));
  f.push_back(double_field("xe.ss_max", c.xe.ss_max));
  f.push_back(int_field("xe.batch_images", c.xe.batch_images));
  f.push_back(training_dropout("xe.dropout", c.xe.dropout));
  f.push_back(policy_field("xe.mask_policy", c.xe.dropout));
  f.push_back({"rl.method", true, [&c] { return train::to_string(c.rl.method); }, [&c](const std::string& v) {
                 if (v != "scst" && v != "bscst") throw UsageError("rl.method: expected scst or bscst, got '" + v + "'");
                 c.rl.method = train::parse_method(v);
               }});
  f.push_back(int_field("rl.mc_passes", c.rl.mc_passes));
  f.push_back({"rl.sampling", true, [&c] { return c.rl.sampling.to_string(); }, [&c](const std::string& v) {
                 try {
                   c.rl.sampling = model::SamplingStrategy::parse(v);
                 } catch (const std::invalid_argument& e) {
                   throw UsageError(std::string("rl.sampling: ") + e.what());
                 }
               }});
  f.push_back(int_field("rl.epochs", c.rl.epochs));
  f.push_back(double_field("rl.lr", c.rl.lr));
  f.push_back(double_field("rl.plateau_factor", c.rl.plateau_factor));
  f.push_back(int_field("rl.plateau_patience", c.rl.plateau_patience));
  f.push_back(int_field("rl.batch_images", c.rl.batch_images));
  f.push_back(training_dropout("rl.dropout", c.rl.dropout));
  f.push_back(policy_field("rl.mask_policy", c.rl.dropout));
  f.push_back(int_field("uq.mc_passes", c.uq.mc_passes));
  f.push_back({"uq.site", true, [&c] { return site_name(c.uq.site); },
               [&c](const std::string& v) { c.uq.site = to_site("uq.site", v); }});
  f.push_back(double_field("uq.rate", c.uq.rate));
  f.push_back(bool_field("uq.divide_by_v", c.uq.divide_by_v));
  f.push_back(int_field("eval.beam_width", c.beam_width));
  f.push_back({"paths.workdir", false, [&c] { return c.workdir.string(); },
               [&c](const std::string& v) { c.workdir = v; }});
  f.push_back({"paths.checkpoint_dir", false, [&c] { return c.checkpoint_dir.string(); },
               [&c](const std::string& v) { c.checkpoint_dir = v; }});
  return f;
}

}  // namespace

void ExperimentConfig::set(const std::string& key, const std::string& value) {
  for (auto& f : bind(*this))
    if (f.key == key) {
      f.set(value);
      return;
    }
  throw UsageError("unknown config key '" + key + "'");
}

ExperimentConfig ExperimentConfig::parse(std::string_view text) {
  ExperimentConfig c;
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const std::string body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw UsageError("config line " + std::to_string(lineno) + ": expected key = value");
    try {
      c.set(trim(std::string_view(body).substr(0, eq)), trim(std::string_view(body).substr(eq + 1)));
    } catch (const UsageError& e) {
      throw UsageError("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (c.uq.mc_passes < 1) throw UsageError("uq.mc_passes must be >= 1");
  if (c.beam_width < 1) throw UsageError("eval.beam_width must be >= 1");
  try {
    c.xe.validate();
    c.rl.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::map<std::string, std::string> ExperimentConfig::fields() const {
  std::map<std::string, std::string> out;
  for (auto& f : bind(const_cast<ExperimentConfig&>(*this))) out[f.key] = f.get();
  return out;
}

std::string ExperimentConfig::to_text(bool include_paths) const {
  std::string out;
  for (auto& f : bind(const_cast<ExperimentConfig&>(*this)))
    if (include_paths || f.semantic) out += f.key + " = " + f.get() + "\n";
  return out;
}

std::string ExperimentConfig::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  std::map<std::string, std::string> semantic;
  for (auto& f : bind(const_cast<ExperimentConfig&>(*this)))
    if (f.semantic) semantic[f.key] = f.get();
  for (const auto& [k, v] : semantic) h = fnv1a64(k + "=" + v + "\n", h);
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------

WorkdirLock::WorkdirLock(const fs::path& workdir) : path_(workdir / ".lock") {
  fs::create_directories(workdir);
  std::FILE* f = std::fopen(path_.string().c_str(), "wx");
  if (!f) throw std::runtime_error("workdir " + workdir.string() + " is locked by another command (" + path_.string() + ")");
  std::fclose(f);
}

WorkdirLock::~WorkdirLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

std::uint32_t file_crc32(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  uLong crc = crc32(0L, Z_NULL, 0);
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    const auto n = in.gcount();
    if (n > 0) crc = crc32(crc, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(n));
  }
  return static_cast<std::uint32_t>(crc);
}

std::string utc_timestamp() {
  std::time_t t = std::time(nullptr);
  if (const char* epoch = std::getenv("SOURCE_DATE_EPOCH")) t = static_cast<std::time_t>(std::strtoll(epoch, nullptr, 10));
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

Manifest Manifest::fresh(const fs::path& workdir) {
  Manifest m;
  m.workdir_ = workdir;
  m.created_ = utc_timestamp();
  return m;
}

Manifest Manifest::open(const fs::path& workdir) {
  Manifest m = fresh(workdir);
  const fs::path path = workdir / "manifest.json";
  if (!fs::exists(path)) return m;
  std::ifstream in(path);
  nlohmann::json j;
  try {
    in >> j;
    m.created_ = j.value("created", m.created_);
    const nlohmann::json commands = j.value("commands", nlohmann::json::object());
    const nlohmann::json files = j.value("files", nlohmann::json::array());
    for (const auto& [k, v] : commands.items()) m.commands_[k] = v.get<std::string>();
    for (const auto& f : files) m.files_.push_back(f.at("path").get<std::string>());
  } catch (const std::exception& e) {
    throw std::runtime_error("corrupt manifest " + path.string() + ": " + e.what());
  }
  return m;
}

void Manifest::add(const fs::path& file) {
  const std::string rel = fs::relative(file, workdir_).generic_string();
  if (rel.empty() || rel.rfind("..", 0) == 0) throw std::runtime_error("manifest: " + file.string() + " is outside the workdir");
  if (std::find(files_.begin(), files_.end(), rel) == files_.end()) files_.push_back(rel);
}

void Manifest::write(const ExperimentConfig& config, const std::string& command) {
  commands_[command] = utc_timestamp();
  std::sort(files_.begin(), files_.end());
  nlohmann::ordered_json j;
  j["code_version"] = kCodeVersion;
  j["config_hash"] = config.hash();
  j["created"] = created_;
  j["commands"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : commands_) j["commands"][k] = v;
  j["files"] = nlohmann::ordered_json::array();
  for (const auto& rel : files_) {
    const fs::path p = workdir_ / rel;
    if (!fs::exists(p)) continue;
    char crc[12];
    std::snprintf(crc, sizeof crc, "%08x", file_crc32(p));
    j["files"].push_back({{"path", rel}, {"bytes", fs::file_size(p)}, {"crc32", crc}});
  }
  std::ofstream out(workdir_ / "manifest.json", std::ios::binary);
  if (!out) throw std::runtime_error("cannot write manifest in " + workdir_.string());
  out << j.dump(2) << '\n';
}

// ---------------------------------------------------------------------------

Workspace Workspace::open(const ExperimentConfig& config) {
  Workspace w;
  w.config = config;
  if (!fs::exists(w.dataset_path()))
    throw std::runtime_error("no dataset at " + w.dataset_path().string() + " (run gen-data first)");
  w.dataset = scene::load_dataset(w.dataset_path());
  w.corpus = train::Corpus::build(w.dataset);
  w.model = config.model;
  w.model.vocab_size = w.corpus.vocab.size();
  if (!w.dataset.train.empty()) {
    w.model.feature_dim = w.dataset.train.front().features.dim();
    w.model.slots = w.dataset.train.front().features.num_slots();
  }
  if (w.model.max_len <= 0) w.model.max_len = w.corpus.max_len();
  return w;
}

grad::ParamStore Workspace::fresh_params(std::uint64_t seed) const {
  grad::ParamStore store;
  Rng rng = Rng::stream(seed, "model.init");
  model::Captioner::init_params(model, store, rng);
  return store;
}

grad::ParamStore Workspace::load_params(const fs::path& checkpoint) const {
  if (!fs::exists(checkpoint)) throw std::runtime_error("checkpoint not found: " + checkpoint.string());
  grad::ParamStore store = fresh_params(0);
  grad::load_checkpoint(store, checkpoint);
  return store;
}

}  // namespace bscst::exp
