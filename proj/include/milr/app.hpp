#pragma once

// Run configuration and the pipeline commands behind the command-line tool.
//
// A run lives in <output_dir>/<run_id>/. Each command reads what earlier
// commands left there and adds its own artifacts:
//
//   synth-data      dataset.bin, dataset_test.bin
//   train-backbone  backbone.bin, protonet_log.csv
//   train-milr      milr_state.bin, milr_log.csv
//   explain         <sample_id>/{original,total_heat,total_mix,decision_mix,
//                   redundant_mix}.png, maps.csv
//   calibrate       calibration.csv
//
// Every command also rewrites config.ini (the effective configuration) and
// manifest.json, which lists every artifact the run has produced so far.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "milr/data.hpp"
#include "milr/estimators.hpp"
#include "milr/milr.hpp"
#include "milr/nn.hpp"
#include "milr/protonet.hpp"

namespace milr {

inline constexpr std::string_view kVersion = "1.0.0";

struct DatasetSection {
  std::size_t n_classes = 10;
  std::size_t samples_per_class = 60;
  std::size_t test_samples_per_class = 5;
  std::size_t image_size = 32;
  double noise_level = 0.5;
  std::string image_folder;  // when set, replaces the synthetic data
};

struct VizSection {
  double lambda = 0.5;
  std::size_t contrast_batches = 4;
  std::size_t contrast_size = 30;
  std::size_t samples = 5;  // explained test samples
};

struct CalibrateSection {
  std::vector<double> rhos = {0.5};
  std::size_t steps = 5000;
  std::size_t batch = 128;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "out";
  std::string run_id = "run";
  DatasetSection dataset;
  EncoderConfig encoder;
  ProtonetConfig protonet;
  MilrConfig milr;
  VizSection viz;
  CalibrateSection calibrate;

  /// Throws ConfigError naming the offending field.
  void validate() const;
  std::filesystem::path run_dir() const;
};

/// INI text with [dataset], [encoder], [protonet], [milr], [viz] and
/// [calibrate] sections; top-level keys seed, output_dir, run_id. Missing
/// keys keep their defaults; unknown keys are a ConfigError.
RunConfig parse_run_config(const std::string& text, const std::string& source);

/// Throws IoError naming the path when the file cannot be read.
RunConfig load_run_config(const std::filesystem::path& path);

/// Applies one "section.key=value" (or "key=value" for top-level keys).
void apply_override(RunConfig& config, const std::string& assignment);

/// Canonical INI text; parse_run_config(to_ini(c)) reproduces c.
std::string to_ini(const RunConfig& config);

/// Independent stream seed for a pipeline stage.
std::uint64_t stage_seed(std::uint64_t seed, std::string_view stage);

// ---------------------------------------------------------------------------

struct CommandResult {
  std::vector<std::filesystem::path> artifacts;  // relative to run_dir
  std::string summary;                           // one line for the console
};

CommandResult cmd_synth_data(const RunConfig& config);
CommandResult cmd_train_backbone(const RunConfig& config);
CommandResult cmd_train_milr(const RunConfig& config);
CommandResult cmd_explain(const RunConfig& config);
CommandResult cmd_calibrate(const RunConfig& config);

/// synth-data, train-backbone, train-milr and explain in order.
CommandResult cmd_pipeline(const RunConfig& config);

/// Dispatches by subcommand name and records the manifest. Throws
/// ConfigError on an unknown name.
CommandResult run_command(const std::string& name, const RunConfig& config);

}  // namespace milr
