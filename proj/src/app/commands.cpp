#include <algorithm>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <set>
#include <sstream>

#include "milr/app.hpp"
#include "milr/binary_io.hpp"
#include "milr/errors.hpp"
#include "milr/image_io.hpp"
#include "milr/viz.hpp"

namespace milr {
namespace {

namespace fs = std::filesystem;

constexpr const char* kTrainData = "dataset.bin";
constexpr const char* kTestData = "dataset_test.bin";
constexpr const char* kBackbone = "backbone.bin";
constexpr const char* kProtonetLog = "protonet_log.csv";
constexpr const char* kMilrState = "milr_state.bin";
constexpr const char* kMilrLog = "milr_log.csv";
constexpr const char* kMaps = "maps.csv";
constexpr const char* kCalibration = "calibration.csv";
constexpr const char* kConfigCopy = "config.ini";
constexpr const char* kManifest = "manifest.json";

fs::path prepare_run_dir(const RunConfig& config) {
  const fs::path dir = config.run_dir();
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) {
    throw IoError("cannot create output directory " + dir.string());
  }
  return dir;
}

fs::path require_artifact(const RunConfig& config, const char* name,
                          const char* producer) {
  const fs::path p = config.run_dir() / name;
  if (!fs::is_regular_file(p)) {
    throw IoError("missing " + p.string() + "; run '" + producer + "' first");
  }
  return p;
}

std::string fixed(double v, int digits) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

/// Indices spread evenly over the dataset so every class is likely covered.
std::vector<std::size_t> explained_samples(const Dataset& ds, std::size_t count) {
  const std::size_t n = std::min(count, ds.samples.size());
  std::vector<std::size_t> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = i * ds.samples.size() / n;
  return out;
}

void write_maps_csv(const std::vector<InfoMap>& maps, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "sample_id,kind,y,x,value\n" << std::setprecision(17);
  for (const InfoMap& m : maps) {
    for (std::size_t y = 0; y < m.height; ++y) {
      for (std::size_t x = 0; x < m.width; ++x) {
        out << m.sample_id << ',' << map_kind_name(m.kind) << ',' << y << ',' << x << ','
            << m.at(y, x) << '\n';
      }
    }
  }
}

void write_text(const fs::path& path, const std::string& text) {
  const std::vector<std::uint8_t> bytes(text.begin(), text.end());
  io::write_file(path, bytes);
}

void write_manifest(const RunConfig& config, const std::string& command,
                    const std::vector<fs::path>& artifacts) {
  const fs::path dir = config.run_dir();
  const fs::path manifest_path = dir / kManifest;
  nlohmann::json manifest;
  if (fs::is_regular_file(manifest_path)) {
    try {
      const auto bytes = io::read_file(manifest_path);
      manifest = nlohmann::json::parse(bytes.begin(), bytes.end());
    } catch (const nlohmann::json::exception&) {
      manifest = nlohmann::json::object();
    }
  }
  if (!manifest.is_object()) manifest = nlohmann::json::object();

  std::vector<std::string> names;
  for (const auto& a : artifacts) names.push_back(a.generic_string());
  names.push_back(kConfigCopy);
  std::sort(names.begin(), names.end());

  manifest["version"] = std::string(kVersion);
  manifest["seed"] = config.seed;
  manifest["run_id"] = config.run_id;
  manifest["config"] = kConfigCopy;
  manifest["commands"][command] = names;

  std::set<std::string> all;
  for (const auto& [cmd, list] : manifest["commands"].items()) {
    for (const auto& n : list) all.insert(n.get<std::string>());
  }
  manifest["artifacts"] = std::vector<std::string>(all.begin(), all.end());

  write_text(dir / kConfigCopy, to_ini(config));
  write_text(manifest_path, manifest.dump(2) + "\n");
}

}  // namespace

CommandResult cmd_synth_data(const RunConfig& config) {
  config.validate();
  const fs::path dir = prepare_run_dir(config);
  const auto& d = config.dataset;
  Dataset train;
  Dataset test;
  if (!d.image_folder.empty()) {
    train = load_image_folder(d.image_folder, d.image_size);
    test = train;
  } else {
    train = generate_dataset(d.n_classes, d.samples_per_class, d.image_size,
                             d.noise_level, stage_seed(config.seed, "dataset"));
    test = generate_dataset(d.n_classes, d.test_samples_per_class, d.image_size,
                            d.noise_level, stage_seed(config.seed, "dataset-test"));
  }
  save_dataset(train, dir / kTrainData);
  save_dataset(test, dir / kTestData);
  return {{kTrainData, kTestData},
          "dataset: " + std::to_string(train.samples.size()) + " training and " +
              std::to_string(test.samples.size()) + " test samples, " +
              std::to_string(train.n_classes()) + " classes"};
}

CommandResult cmd_train_backbone(const RunConfig& config) {
  config.validate();
  const fs::path dir = prepare_run_dir(config);
  const Dataset train = load_dataset(require_artifact(config, kTrainData, "synth-data"));
  const ProtonetRun run = train_protonet(train, config.encoder, config.protonet,
                                         stage_seed(config.seed, "backbone"));
  save_encoder(run.encoder, dir / kBackbone);
  write_protonet_log(run.log, dir / kProtonetLog);
  return {{kBackbone, kProtonetLog},
          "backbone: " + std::to_string(run.log.size()) +
              " episodes, trailing-100 query accuracy " +
              fixed(run.trailing_accuracy(100), 4)};
}

CommandResult cmd_train_milr(const RunConfig& config) {
  config.validate();
  const fs::path dir = prepare_run_dir(config);
  const Dataset train = load_dataset(require_artifact(config, kTrainData, "synth-data"));
  const fs::path backbone_path = require_artifact(config, kBackbone, "train-backbone");
  const auto before = io::read_file(backbone_path);
  const Encoder frozen = freeze(decode_encoder(before, backbone_path.string()));

  MilrRun run = train_milr(train, frozen, config.milr, stage_seed(config.seed, "milr"));

  const auto after = io::read_file(backbone_path);
  if (after != before || encode_encoder(frozen) != before) {
    throw ContractError("backbone parameters changed during MI-LR training");
  }
  save_milr_state(run.state, dir / kMilrState);
  write_milr_log(run.log, dir / kMilrLog);
  const MilrLogRow& last = run.log.back();
  return {{kMilrState, kMilrLog},
          "milr: " + std::to_string(run.log.size()) + " steps, task loss " +
              fixed(last.task_loss, 4) + ", InfoNCE " + fixed(last.nce_bound, 4) +
              " nats, KL " + fixed(last.kl_mean, 4) + " nats, mean mask " +
              fixed(last.mean_alpha, 3)};
}

CommandResult cmd_explain(const RunConfig& config) {
  config.validate();
  const fs::path dir = prepare_run_dir(config);
  const Dataset test = load_dataset(require_artifact(config, kTestData, "synth-data"));
  const fs::path backbone_path = require_artifact(config, kBackbone, "train-backbone");
  const Encoder frozen = freeze(load_encoder(backbone_path));
  const MilrState state =
      load_milr_state(require_artifact(config, kMilrState, "train-milr"));

  const FeatureCache cache = stage1_collect(frozen, test);
  std::mt19937_64 rng(stage_seed(config.seed, "explain"));
  const double lambda = config.viz.lambda;

  CommandResult result;
  std::vector<InfoMap> rows;
  for (std::size_t index : explained_samples(test, config.viz.samples)) {
    const Sample& sample = test.samples[index];
    const auto partners = draw_contrast_partners(
        cache, sample.id, config.viz.contrast_batches, config.viz.contrast_size, rng);
    const InfoMap total = total_information_map(state, cache, sample.id, partners);
    const InfoMap decision = decision_information_map(state, cache, sample.id);
    const InfoMap redundant = redundancy_map(total, decision);

    const RgbImage original = to_rgb(sample.image);
    const fs::path sub = std::to_string(sample.id);
    fs::create_directories(dir / sub);
    const std::pair<const char*, RgbImage> images[] = {
        {"original.png", original},
        {"total_heat.png", render_heat(total, original.height, original.width)},
        {"total_mix.png", render_mix(original, total, lambda).image},
        {"decision_mix.png", render_mix(original, decision, lambda).image},
        {"redundant_mix.png", render_mix(original, redundant, lambda).image},
    };
    for (const auto& [name, image] : images) {
      write_png(image, dir / sub / name);
      result.artifacts.push_back(sub / name);
    }
    rows.push_back(total);
    rows.push_back(decision);
    rows.push_back(redundant);
  }
  write_maps_csv(rows, dir / kMaps);
  result.artifacts.push_back(kMaps);
  result.summary = "explain: " + std::to_string(rows.size() / 3) + " samples rendered";
  return result;
}

CommandResult cmd_calibrate(const RunConfig& config) {
  config.validate();
  const fs::path dir = prepare_run_dir(config);
  CalibrationConfig cc;
  cc.steps = config.calibrate.steps;
  cc.batch = config.calibrate.batch;
  cc.seed = stage_seed(config.seed, "calibrate");
  std::vector<CalibrationResult> rows;
  std::string summary = "calibrate:";
  for (double rho : config.calibrate.rhos) {
    rows.push_back(calibrate(rho, cc));
    summary += " rho=" + fixed(rho, 3) + " MI " + fixed(rows.back().analytic_mi, 4) +
               " InfoNCE " + fixed(rows.back().nce_bound, 4) + " VIB " +
               fixed(rows.back().vib_bound, 4) + ";";
  }
  summary.pop_back();
  write_calibration_csv(rows, dir / kCalibration);
  return {{kCalibration}, summary};
}

CommandResult cmd_pipeline(const RunConfig& config) {
  CommandResult all;
  for (const char* name : {"synth-data", "train-backbone", "train-milr", "explain"}) {
    CommandResult r = run_command(name, config);
    all.artifacts.insert(all.artifacts.end(), r.artifacts.begin(), r.artifacts.end());
    all.summary += (all.summary.empty() ? "" : "\n") + r.summary;
  }
  return all;
}

CommandResult run_command(const std::string& name, const RunConfig& config) {
  CommandResult r;
  if (name == "synth-data") {
    r = cmd_synth_data(config);
  } else if (name == "train-backbone") {
    r = cmd_train_backbone(config);
  } else if (name == "train-milr") {
    r = cmd_train_milr(config);
  } else if (name == "explain") {
    r = cmd_explain(config);
  } else if (name == "calibrate") {
    r = cmd_calibrate(config);
  } else if (name == "pipeline") {
    return cmd_pipeline(config);
  } else {
    throw ConfigError("unknown command '" + name + "'");
  }
  write_manifest(config, name, r.artifacts);
  return r;
}

}  // namespace milr
