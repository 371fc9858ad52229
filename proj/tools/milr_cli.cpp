// Command-line driver: milr <command> [--config PATH] [--seed N] [--out DIR]
//                                    [--run-id ID] [--set section.key=value]...

#include <CLI11.hpp>
#include <exception>
#include <iostream>
#include <optional>

#include "milr/app.hpp"
#include "milr/errors.hpp"

namespace {

std::string one_line(std::string s) {
  for (char& c : s) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MI-LR: total, decision-related and redundant information maps"};
  app.set_version_flag("--version", std::string(milr::kVersion));
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::string run_id;
  std::vector<std::string> overrides;
  app.add_option("--config", config_path, "INI run configuration");
  app.add_option("--seed", seed, "Master seed (overrides the file)");
  app.add_option("--out", out_dir, "Output directory (overrides output_dir)");
  app.add_option("--run-id", run_id, "Run directory name inside the output directory");
  app.add_option("--set", overrides, "Override, e.g. --set milr.beta_weight=0.1");

  const std::pair<const char*, const char*> commands[] = {
      {"synth-data", "Generate the synthetic training and test datasets"},
      {"train-backbone", "Train the prototypical network and save the backbone"},
      {"train-milr", "Train the MI-LR heads on the frozen backbone"},
      {"explain", "Render total, decision and redundancy maps for test samples"},
      {"calibrate", "Calibrate both estimators on correlated Gaussians"},
      {"pipeline", "synth-data, train-backbone, train-milr and explain in order"},
  };
  // Shared options may follow the subcommand name.
  for (const auto& [name, help] : commands) app.add_subcommand(name, help)->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "milr: error: " << one_line(e.what()) << '\n';
    return 1;
  }

  try {
    milr::RunConfig config =
        config_path.empty() ? milr::RunConfig{} : milr::load_run_config(config_path);
    for (const auto& o : overrides) milr::apply_override(config, o);
    if (seed) config.seed = *seed;
    if (!out_dir.empty()) config.output_dir = out_dir;
    if (!run_id.empty()) config.run_id = run_id;
    config.validate();

    const std::string command = app.get_subcommands().front()->get_name();
    const milr::CommandResult result = milr::run_command(command, config);
    std::cout << result.summary << '\n'
              << "artifacts in " << config.run_dir().string() << '\n';
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "milr: error: " << one_line(e.what()) << '\n';
    return 1;
  }
}
