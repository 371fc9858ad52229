#include <CLI11.hpp>
#include <charconv>
#include <cmath>
#include <functional>
#include <sstream>

#include "milr/app.hpp"
#include "milr/binary_io.hpp"
#include "milr/errors.hpp"

namespace milr {
namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::size_t parse_size(const std::string& key, const std::string& text) {
  const std::string t = trim(text);
  std::size_t v = 0;
  const auto [end, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || ec != std::errc() || end != t.data() + t.size()) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + text + "'");
  }
  return v;
}

double parse_real(const std::string& key, const std::string& text) {
  const std::string t = trim(text);
  double v = 0.0;
  const auto [end, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || ec != std::errc() || end != t.data() + t.size() || !std::isfinite(v)) {
    throw ConfigError(key + ": expected a finite number, got '" + text + "'");
  }
  return v;
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (c == ',' || c == ' ' || c == '\t' || c == '[' || c == ']') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

std::string format_real(double v) {
  char buf[64];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  (void)ec;
  return std::string(buf, end);
}

template <typename T>
std::string join(const std::vector<T>& values, std::string (*fmt)(T)) {
  std::string s;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) s += ',';
    s += fmt(values[i]);
  }
  return s;
}

std::string format_size(std::size_t v) { return std::to_string(v); }

struct Field {
  std::string section;  // empty for top-level keys
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define MILR_SIZE(sec, k, member)                                                \
  Field {                                                                        \
    sec, k, [](RunConfig& c, const std::string& v) {                             \
      c.member = parse_size(std::string(sec) + "." + k, v);                      \
    },                                                                           \
        [](const RunConfig& c) { return std::to_string(c.member); }              \
  }
#define MILR_REAL(sec, k, member)                                                \
  Field {                                                                        \
    sec, k, [](RunConfig& c, const std::string& v) {                             \
      c.member = parse_real(std::string(sec) + "." + k, v);                      \
    },                                                                           \
        [](const RunConfig& c) { return format_real(c.member); }                 \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      Field{"", "seed",
            [](RunConfig& c, const std::string& v) {
              const std::string t = trim(v);
              std::uint64_t s = 0;
              const auto [end, ec] = std::from_chars(t.data(), t.data() + t.size(), s);
              if (t.empty() || ec != std::errc() || end != t.data() + t.size()) {
                throw ConfigError("seed: expected a non-negative integer, got '" + v + "'");
              }
              c.seed = s;
            },
            [](const RunConfig& c) { return std::to_string(c.seed); }},
      Field{"", "output_dir", [](RunConfig& c, const std::string& v) { c.output_dir = trim(v); },
            [](const RunConfig& c) { return c.output_dir; }},
      Field{"", "run_id", [](RunConfig& c, const std::string& v) { c.run_id = trim(v); },
            [](const RunConfig& c) { return c.run_id; }},

      MILR_SIZE("dataset", "n_classes", dataset.n_classes),
      MILR_SIZE("dataset", "samples_per_class", dataset.samples_per_class),
      MILR_SIZE("dataset", "test_samples_per_class", dataset.test_samples_per_class),
      MILR_SIZE("dataset", "image_size", dataset.image_size),
      MILR_REAL("dataset", "noise_level", dataset.noise_level),
      Field{"dataset", "image_folder",
            [](RunConfig& c, const std::string& v) { c.dataset.image_folder = trim(v); },
            [](const RunConfig& c) { return c.dataset.image_folder; }},

      MILR_SIZE("encoder", "stem_channels", encoder.stem_channels),
      Field{"encoder", "block_channels",
            [](RunConfig& c, const std::string& v) {
              std::vector<std::size_t> out;
              for (const auto& item : split_list(v)) {
                out.push_back(parse_size("encoder.block_channels", item));
              }
              if (out.empty()) throw ConfigError("encoder.block_channels: empty list");
              c.encoder.block_channels = out;
            },
            [](const RunConfig& c) { return join(c.encoder.block_channels, &format_size); }},
      MILR_SIZE("encoder", "tap_index", encoder.tap_index),
      MILR_SIZE("encoder", "repr_dim", encoder.repr_dim),

      MILR_SIZE("protonet", "episodes", protonet.episodes),
      MILR_SIZE("protonet", "n_way", protonet.n_way),
      MILR_SIZE("protonet", "k_shot", protonet.k_shot),
      MILR_SIZE("protonet", "n_query", protonet.n_query),
      MILR_REAL("protonet", "lr", protonet.lr),

      MILR_REAL("milr", "alpha_weight", milr.alpha_weight),
      MILR_REAL("milr", "beta_weight", milr.beta_weight),
      MILR_SIZE("milr", "episodes", milr.episodes),
      MILR_REAL("milr", "lr", milr.lr),
      MILR_SIZE("milr", "d_s", milr.score_dim),
      MILR_SIZE("milr", "d_b", milr.bottleneck_dim),
      MILR_SIZE("milr", "hidden", milr.hidden),
      MILR_SIZE("milr", "mask_hidden", milr.mask_hidden),
      MILR_SIZE("milr", "n_way", milr.n_way),
      MILR_SIZE("milr", "k_shot", milr.k_shot),
      MILR_SIZE("milr", "n_query", milr.n_query),
      Field{"milr", "mask_mode",
            [](RunConfig& c, const std::string& v) {
              const std::string t = trim(v);
              if (t == "learned") {
                c.milr.mask_mode = MaskMode::learned;
              } else if (t == "ones") {
                c.milr.mask_mode = MaskMode::ones;
              } else if (t == "zeros") {
                c.milr.mask_mode = MaskMode::zeros;
              } else {
                throw ConfigError("milr.mask_mode: expected learned, ones or zeros, got '" +
                                  v + "'");
              }
            },
            [](const RunConfig& c) -> std::string {
              switch (c.milr.mask_mode) {
                case MaskMode::ones:
                  return "ones";
                case MaskMode::zeros:
                  return "zeros";
                case MaskMode::learned:
                  break;
              }
              return "learned";
            }},

      MILR_REAL("viz", "lambda", viz.lambda),
      MILR_SIZE("viz", "contrast_batches", viz.contrast_batches),
      MILR_SIZE("viz", "contrast_size", viz.contrast_size),
      MILR_SIZE("viz", "samples", viz.samples),

      Field{"calibrate", "rhos",
            [](RunConfig& c, const std::string& v) {
              std::vector<double> out;
              for (const auto& item : split_list(v)) {
                out.push_back(parse_real("calibrate.rhos", item));
              }
              if (out.empty()) throw ConfigError("calibrate.rhos: empty list");
              c.calibrate.rhos = out;
            },
            [](const RunConfig& c) { return join(c.calibrate.rhos, &format_real); }},
      MILR_SIZE("calibrate", "steps", calibrate.steps),
      MILR_SIZE("calibrate", "batch", calibrate.batch),
  };
  return table;
}

#undef MILR_SIZE
#undef MILR_REAL

void set_field(RunConfig& config, const std::string& section, const std::string& key,
               const std::string& value) {
  for (const Field& f : fields()) {
    if (f.section == section && f.key == key) {
      f.set(config, value);
      return;
    }
  }
  throw ConfigError("unknown configuration key '" +
                    (section.empty() ? key : section + "." + key) + "'");
}

void sync_derived(RunConfig& c) {
  c.encoder.input_channels = 3;
  c.encoder.input_size = c.dataset.image_size;
}

}  // namespace

void RunConfig::validate() const {
  if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
  if (run_id.empty() || run_id.find('/') != std::string::npos || run_id == "." ||
      run_id == "..") {
    throw ConfigError("run_id must be a plain directory name");
  }
  if (dataset.image_folder.empty()) {
    if (dataset.n_classes < 5 || dataset.n_classes > kMaxSyntheticClasses) {
      throw ConfigError("dataset.n_classes must lie in [5, " +
                        std::to_string(kMaxSyntheticClasses) + "]");
    }
    if (dataset.samples_per_class == 0 || dataset.test_samples_per_class == 0) {
      throw ConfigError("dataset: samples per class must be positive");
    }
    if (!(dataset.noise_level >= 0.0 && dataset.noise_level <= 1.0)) {
      throw ConfigError("dataset.noise_level must lie in [0,1]");
    }
  }
  if (dataset.image_size < 16) throw ConfigError("dataset.image_size must be >= 16");
  if (encoder.input_size != dataset.image_size) {
    throw ConfigError("encoder input size must match dataset.image_size");
  }
  encoder.validate();
  protonet.validate();
  milr.validate();
  if (milr.bottleneck_dim > encoder.repr_dim) {
    throw ConfigError("milr.d_b must not exceed encoder.repr_dim");
  }
  if (!(viz.lambda >= 0.0 && viz.lambda <= 1.0)) {
    throw ConfigError("viz.lambda must lie in [0,1]");
  }
  if (viz.contrast_batches == 0 || viz.contrast_size < 2 || viz.samples == 0) {
    throw ConfigError("viz: contrast_batches >= 1, contrast_size >= 2, samples >= 1");
  }
  for (double rho : calibrate.rhos) {
    if (!(std::abs(rho) < 1.0)) throw ConfigError("calibrate.rhos must satisfy |rho| < 1");
  }
  if (calibrate.steps == 0 || calibrate.batch < 2) {
    throw ConfigError("calibrate: steps >= 1 and batch >= 2");
  }
}

std::filesystem::path RunConfig::run_dir() const {
  return std::filesystem::path(output_dir) / run_id;
}

RunConfig parse_run_config(const std::string& text, const std::string& source) {
  std::istringstream in(text);
  std::vector<CLI::ConfigItem> items;
  try {
    items = CLI::ConfigINI().from_config(in);
  } catch (const CLI::Error& e) {
    throw ConfigError(source + ": " + e.what());
  }
  RunConfig c;
  for (const auto& item : items) {
    if (item.name == "++" || item.name == "--") continue;  // section markers
    if (item.parents.size() > 1) {
      throw ConfigError(source + ": nested section '" + item.fullname() + "'");
    }
    std::string section = item.parents.empty() ? "" : item.parents.front();
    if (section == "default") section.clear();
    std::string value;
    for (std::size_t i = 0; i < item.inputs.size(); ++i) {
      if (i) value += ',';
      value += item.inputs[i];
    }
    try {
      set_field(c, section, item.name, value);
    } catch (const ConfigError& e) {
      throw ConfigError(source + ": " + e.what());
    }
  }
  sync_derived(c);
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  if (!std::filesystem::is_regular_file(path)) {
    throw IoError("config file not found: " + path.string());
  }
  const auto bytes = io::read_file(path);
  return parse_run_config(std::string(bytes.begin(), bytes.end()), path.string());
}

void apply_override(RunConfig& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "' is not of the form key=value");
  }
  const std::string name = trim(assignment.substr(0, eq));
  const std::string value = assignment.substr(eq + 1);
  const auto dot = name.find('.');
  if (dot == std::string::npos) {
    set_field(config, "", name, value);
  } else {
    set_field(config, name.substr(0, dot), name.substr(dot + 1), value);
  }
  sync_derived(config);
}

std::string to_ini(const RunConfig& config) {
  std::ostringstream out;
  std::string section = "\x01";
  for (const Field& f : fields()) {
    if (f.section != section) {
      section = f.section;
      if (!section.empty()) out << "\n[" << section << "]\n";
    }
    const std::string v = f.get(config);
    // Quote anything the INI reader could split or strip.
    const bool quote = v.empty() || v.find_first_of(" ;#\"'") != std::string::npos;
    out << f.key << " = " << (quote ? "\"" + v + "\"" : v) << '\n';
  }
  return out.str();
}

std::uint64_t stage_seed(std::uint64_t seed, std::string_view stage) {
  const std::uint64_t tag =
      io::fnv1a({reinterpret_cast<const std::uint8_t*>(stage.data()), stage.size()});
  std::uint64_t z = seed ^ tag;
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace milr
