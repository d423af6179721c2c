#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "bscst/captioner.hpp"
#include "bscst/scenegen.hpp"
#include "bscst/trainer.hpp"
#include "bscst/uncertainty.hpp"

namespace bscst::exp {

inline constexpr const char* kCodeVersion = "bscst-lab 1.0.0";

/// Bad user input: unknown key, malformed value, bad flag combination.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Every knob of an experiment. The text form is flat `section.key = value`
/// lines; `#` starts a comment.
struct ExperimentConfig {
  ExperimentConfig() { model.max_len = 0; }  // 0: longest training reference

  std::uint64_t seed = 7;
  scene::GenConfig data;
  model::ModelConfig model;
  train::XEConfig xe;
  train::RLConfig rl;
  uq::UQConfig uq;
  int beam_width = 2;
  std::filesystem::path workdir = "work";
  std::filesystem::path checkpoint_dir = "checkpoints";  // relative to workdir

  /// Throws UsageError naming the line on unknown keys or bad values.
  static ExperimentConfig parse(std::string_view text);
  static ExperimentConfig load(const std::filesystem::path& path);
  /// Applies one `key = value` assignment.
  void set(const std::string& key, const std::string& value);

  /// Canonical key -> value map of every field.
  std::map<std::string, std::string> fields() const;
  /// Parseable text of every field; without paths it depends only on the
  /// fields covered by hash().
  std::string to_text(bool include_paths = true) const;
  /// FNV-1a of the sorted semantic fields (paths excluded), as 16 hex digits.
  std::string hash() const;

  std::filesystem::path checkpoints() const { return workdir / checkpoint_dir; }
};

/// Held for the lifetime of a command; a second holder on the same workdir
/// gets std::runtime_error.
class WorkdirLock {
 public:
  explicit WorkdirLock(const std::filesystem::path& workdir);
  ~WorkdirLock();
  WorkdirLock(const WorkdirLock&) = delete;
  WorkdirLock& operator=(const WorkdirLock&) = delete;

 private:
  std::filesystem::path path_;
};

std::uint32_t file_crc32(const std::filesystem::path& path);

/// workdir/manifest.json: config hash, code version, timestamps and the
/// inventory of produced files with CRC32 checksums. Timestamps come from
/// SOURCE_DATE_EPOCH when it is set.
class Manifest {
 public:
  /// Loads workdir/manifest.json when present, else starts empty.
  static Manifest open(const std::filesystem::path& workdir);
  static Manifest fresh(const std::filesystem::path& workdir);

  /// Records (or refreshes) a produced file; path must be inside the workdir.
  void add(const std::filesystem::path& file);
  void write(const ExperimentConfig& config, const std::string& command);

 private:
  std::filesystem::path workdir_;
  std::map<std::string, std::string> commands_;  // command -> timestamp
  std::string created_;
  std::vector<std::string> files_;
};

std::string utc_timestamp();

/// Everything a command needs once the dataset exists.
struct Workspace {
  ExperimentConfig config;
  scene::SceneDataset dataset;
  train::Corpus corpus;
  model::ModelConfig model;

  /// Reads workdir/dataset.tsv; throws std::runtime_error when it is missing.
  static Workspace open(const ExperimentConfig& config);

  grad::ParamStore fresh_params(std::uint64_t seed) const;
  grad::ParamStore load_params(const std::filesystem::path& checkpoint) const;
  std::filesystem::path dataset_path() const { return config.workdir / "dataset.tsv"; }
};

}  // namespace bscst::exp
