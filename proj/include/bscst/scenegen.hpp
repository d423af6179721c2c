#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "bscst/features.hpp"
#include "bscst/rng.hpp"

namespace bscst::scene {

inline constexpr int kShapes = 5;
inline constexpr int kColors = 6;
inline constexpr int kSizes = 2;
inline constexpr int kPositions = 4;
inline constexpr int kObjectCodes = kShapes * kColors * kSizes * kPositions;  // 240
inline constexpr int kFeatureDim = kShapes + kColors + kSizes + kPositions;   // 17
inline constexpr int kSlots = 4;
inline constexpr int kRefsPerScene = 5;
inline constexpr const char* kGrammarVersion = "toy-grammar-v1";

struct Object {
  int shape = 0;
  int color = 0;
  int size = 0;
  int position = 0;

  int code() const { return ((shape * kColors + color) * kSizes + size) * kPositions + position; }
  static Object from_code(int code);
  friend auto operator<=>(const Object&, const Object&) = default;
};

struct Scene {
  long id = 0;
  std::vector<Object> objects;
};

/// Scene ids enumerate ordered object lists: all 1-object scenes first, then
/// 2-object scenes, and so on.
long scene_id(const std::vector<Object>& objects);
Scene decode_scene_id(long id);
/// Number of distinct scenes with 1..max_objects objects.
long scene_capacity(int max_objects);

/// Surface-form tables of the caption grammar. Every attribute value has at
/// least two synonyms; positions are multi-word phrases.
struct Grammar {
  std::array<std::vector<std::string>, kShapes> shapes;
  std::array<std::vector<std::string>, kColors> colors;
  std::array<std::vector<std::string>, kSizes> sizes;
  std::array<std::vector<std::string>, kPositions> positions;
  std::vector<std::string> articles;
  std::vector<std::string> prefixes;  // may contain "" (no prefix)
  std::vector<std::string> joiners;
};

const Grammar& grammar();

/// Longest caption (in words) the grammar can produce for up to max_objects.
int max_caption_words(int max_objects);

struct GenConfig {
  std::uint64_t seed = 7;
  int n_train = 200;
  int n_val = 50;
  int n_test = 50;
  int max_objects = 3;
  double jitter = 0.05;
};

SceneFeatures render_features(const Scene& scene, double jitter, Rng& rng);

/// Five distinct truthful captions. Throws std::runtime_error if the grammar
/// cannot produce five distinct forms.
std::vector<std::string> caption_scene(const Scene& scene, Rng& rng);

struct SceneRecord {
  long scene_id = 0;
  SceneFeatures features;
  std::vector<std::string> references;
};

struct SceneDataset {
  std::uint64_t seed = 0;
  std::string grammar_version = kGrammarVersion;
  std::vector<SceneRecord> train;
  std::vector<SceneRecord> val;
  std::vector<SceneRecord> test;

  const std::vector<SceneRecord>& split(const std::string& name) const;
};

/// Throws std::invalid_argument on non-positive sizes or when the request
/// exceeds the number of distinct scenes.
SceneDataset generate(const GenConfig& config);

/// Line format: split<TAB>scene_id<TAB>features csv<TAB>ref1|ref2|ref3|ref4|ref5
void save_dataset(const SceneDataset& ds, const std::filesystem::path& path);
SceneDataset load_dataset(const std::filesystem::path& path);

}  // namespace bscst::scene
