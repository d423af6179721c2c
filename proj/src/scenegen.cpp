#include "bscst/scenegen.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "bscst/textcore.hpp"

namespace bscst::scene {

Object Object::from_code(int code) {
  if (code < 0 || code >= kObjectCodes) throw std::out_of_range("object code out of range");
  Object o;
  o.position = code % kPositions;
  code /= kPositions;
  o.size = code % kSizes;
  code /= kSizes;
  o.color = code % kColors;
  o.shape = code / kColors;
  return o;
}

long scene_capacity(int max_objects) {
  long total = 0, block = 1;
  for (int c = 1; c <= max_objects; ++c) {
    block *= kObjectCodes;
    total += block;
  }
  return total;
}

long scene_id(const std::vector<Object>& objects) {
  if (objects.empty() || objects.size() > 3) throw std::invalid_argument("scene_id: 1..3 objects");
  long id = scene_capacity(static_cast<int>(objects.size()) - 1);
  long place = 1;
  for (const auto& o : objects) {
    id += o.code() * place;
    place *= kObjectCodes;
  }
  return id;
}

Scene decode_scene_id(long id) {
  if (id < 0 || id >= scene_capacity(3)) throw std::out_of_range("decode_scene_id: bad id");
  int count = 1;
  while (id >= scene_capacity(count)) ++count;
  long rest = id - scene_capacity(count - 1);
  Scene s;
  s.id = id;
  for (int j = 0; j < count; ++j) {
    s.objects.push_back(Object::from_code(static_cast<int>(rest % kObjectCodes)));
    rest /= kObjectCodes;
  }
  return s;
}

const Grammar& grammar() {
  static const Grammar g = [] {
    Grammar g;
    g.shapes = {{{"cube", "block"}, {"sphere", "ball"}, {"cylinder", "tube"}, {"cone", "spike"}, {"ring", "hoop"}}};
    g.colors = {{{"red", "crimson"},
                 {"blue", "navy"},
                 {"green", "lime"},
                 {"yellow", "golden"},
                 {"purple", "violet"},
                 {"gray", "silver"}}};
    g.sizes = {{{"small", "tiny", "little"}, {"big", "large", "huge"}}};
    g.positions = {{{"on the left", "at the left side", "in the left corner"},
                    {"on the right", "at the right side", "in the right corner"},
                    {"at the top", "near the top edge", "in the upper part"},
                    {"at the bottom", "near the bottom edge", "in the lower part"}}};
    g.articles = {"a", "one"};
    g.prefixes = {"", "there is", "we see", "the picture shows", "this image has", "i can see", "here is", "you can see"};
    g.joiners = {"and", "plus", "along with", "as well as"};
    return g;
  }();
  return g;
}

namespace {

std::size_t words_in(const std::string& phrase) { return text::tokenize(phrase).size(); }

std::size_t longest(const std::vector<std::string>& phrases) {
  std::size_t n = 0;
  for (const auto& p : phrases) n = std::max(n, words_in(p));
  return n;
}

template <typename T>
const T& pick(const std::vector<T>& v, Rng& rng) {
  return v[rng.below(v.size())];
}

}  // namespace

int max_caption_words(int max_objects) {
  const Grammar& g = grammar();
  std::size_t object = longest(g.articles) + 1 + 1 + 1;  // size color shape
  std::size_t pos = 0;
  for (const auto& p : g.positions) pos = std::max(pos, longest(p));
  object += pos;
  return static_cast<int>(longest(g.prefixes) + object * max_objects +
                          longest(g.joiners) * (max_objects - 1));
}

SceneFeatures render_features(const Scene& scene, double jitter, Rng& rng) {
  SceneFeatures f{grad::Tensor(kSlots, kFeatureDim)};
  for (std::size_t j = 0; j < scene.objects.size() && j < kSlots; ++j) {
    const Object& o = scene.objects[j];
    f.slots(j, o.shape) = 1.0;
    f.slots(j, kShapes + o.color) = 1.0;
    f.slots(j, kShapes + kColors + o.size) = 1.0;
    f.slots(j, kShapes + kColors + kSizes + o.position) = 1.0;
  }
  if (jitter > 0.0) {
    for (double& v : f.slots.data) v += rng.normal(0.0, jitter);
  }
  return f;
}

std::vector<std::string> caption_scene(const Scene& scene, Rng& rng) {
  const Grammar& g = grammar();
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (int attempt = 0; attempt < 1000 && out.size() < kRefsPerScene; ++attempt) {
    std::vector<std::size_t> order(scene.objects.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng.engine());
    std::string caption = pick(g.prefixes, rng);
    for (std::size_t k = 0; k < order.size(); ++k) {
      const Object& o = scene.objects[order[k]];
      if (k > 0) caption += " " + pick(g.joiners, rng);
      if (!caption.empty()) caption += ' ';
      caption += pick(g.articles, rng) + " " + pick(g.sizes[o.size], rng) + " " +
                 pick(g.colors[o.color], rng) + " " + pick(g.shapes[o.shape], rng) + " " +
                 pick(g.positions[o.position], rng);
    }
    if (seen.insert(caption).second) out.push_back(caption);
  }
  if (out.size() < kRefsPerScene)
    throw std::runtime_error("caption_scene: could not produce 5 distinct captions");
  return out;
}

const std::vector<SceneRecord>& SceneDataset::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "val") return val;
  if (name == "test") return test;
  throw std::invalid_argument("unknown split '" + name + "'");
}

SceneDataset generate(const GenConfig& config) {
  if (config.n_train < 1 || config.n_val < 1 || config.n_test < 1)
    throw std::invalid_argument("generate: split sizes must be >= 1");
  if (config.max_objects < 1 || config.max_objects > 3)
    throw std::invalid_argument("generate: max_objects must be in [1, 3]");
  const long total = static_cast<long>(config.n_train) + config.n_val + config.n_test;
  if (total > scene_capacity(config.max_objects))
    throw std::invalid_argument("generate: requested " + std::to_string(total) +
                                " scenes but only " + std::to_string(scene_capacity(config.max_objects)) +
                                " are distinct");
  Rng rng = Rng::stream(config.seed, "scenegen.scenes");
  std::set<long> used;
  std::vector<Scene> scenes;
  while (static_cast<long>(scenes.size()) < total) {
    Scene s;
    const int count = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(config.max_objects)));
    for (int j = 0; j < count; ++j)
      s.objects.push_back(Object::from_code(static_cast<int>(rng.below(kObjectCodes))));
    s.id = scene_id(s.objects);
    if (used.insert(s.id).second) scenes.push_back(std::move(s));
  }

  SceneDataset ds;
  ds.seed = config.seed;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const Scene& s = scenes[i];
    Rng jitter_rng = Rng::stream(config.seed, "scenegen.jitter", {static_cast<std::uint64_t>(s.id)});
    Rng caption_rng = Rng::stream(config.seed, "scenegen.captions", {static_cast<std::uint64_t>(s.id)});
    SceneRecord rec{s.id, render_features(s, config.jitter, jitter_rng), caption_scene(s, caption_rng)};
    if (static_cast<long>(i) < config.n_train)
      ds.train.push_back(std::move(rec));
    else if (static_cast<long>(i) < config.n_train + config.n_val)
      ds.val.push_back(std::move(rec));
    else
      ds.test.push_back(std::move(rec));
  }
  return ds;
}

void save_dataset(const SceneDataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write dataset " + path.string());
  out << "# seed=" << ds.seed << " grammar=" << ds.grammar_version << '\n';
  char num[32];
  for (const char* name : {"train", "val", "test"}) {
    for (const auto& rec : ds.split(name)) {
      if (rec.features.num_slots() != kSlots) throw std::invalid_argument("save_dataset: features must have 4 slots");
      out << name << '\t' << rec.scene_id << '\t';
      for (std::size_t i = 0; i < rec.features.slots.size(); ++i) {
        std::snprintf(num, sizeof num, "%.17g", rec.features.slots.data[i]);
        out << (i ? "," : "") << num;
      }
      out << '\t';
      for (std::size_t r = 0; r < rec.references.size(); ++r) out << (r ? "|" : "") << rec.references[r];
      out << '\n';
    }
  }
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

SceneDataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read dataset " + path.string());
  SceneDataset ds;
  std::string line;
  std::size_t lineno = 0;
  auto fail = [&](const std::string& why) {
    throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + why);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream hdr(line.substr(1));
      std::string kv;
      while (hdr >> kv) {
        if (kv.rfind("seed=", 0) == 0) ds.seed = std::stoull(kv.substr(5));
        if (kv.rfind("grammar=", 0) == 0) ds.grammar_version = kv.substr(8);
      }
      continue;
    }
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string col;
    while (std::getline(ss, col, '\t')) cols.push_back(col);
    if (cols.size() != 4) fail("expected 4 tab-separated fields");
    SceneRecord rec;
    rec.scene_id = std::stol(cols[1]);
    std::vector<double> values;
    std::stringstream fs(cols[2]);
    std::string v;
    while (std::getline(fs, v, ',')) values.push_back(std::stod(v));
    if (values.empty() || values.size() % kSlots != 0) fail("feature count is not a multiple of the slot count");
    const std::size_t dims = values.size() / kSlots;
    rec.features.slots = grad::Tensor(kSlots, dims, std::move(values));
    std::stringstream rs(cols[3]);
    while (std::getline(rs, v, '|')) rec.references.push_back(v);
    if (cols[0] == "train")
      ds.train.push_back(std::move(rec));
    else if (cols[0] == "val")
      ds.val.push_back(std::move(rec));
    else if (cols[0] == "test")
      ds.test.push_back(std::move(rec));
    else
      fail("unknown split '" + cols[0] + "'");
  }
  return ds;
}

}  // namespace bscst::scene
