#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "pnet/experiments.hpp"

namespace {

enum Exit { kOk = 0, kValidation = 1, kRuntime = 2 };

int run(pnet::ExperimentKind kind, const std::string& config_path, const std::optional<std::uint64_t>& seed,
        const std::string& out, const std::vector<std::string>& sets) {
  pnet::Json config;
  try {
    pnet::Json file;
    const pnet::Json* file_ptr = nullptr;
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      if (!in) throw pnet::ConfigError("cannot open config " + config_path);
      file = pnet::Json::parse(in, nullptr, false);
      if (file.is_discarded()) throw pnet::ConfigError("config: " + config_path + " is not valid JSON");
      file_ptr = &file;
    }
    std::vector<std::string> overrides = sets;
    if (seed) overrides.push_back("seed=" + std::to_string(*seed));
    config = pnet::resolve_config(kind, file_ptr, overrides);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kValidation;
  }
  try {
    const pnet::Json summary = pnet::run_experiment(kind, config, out);
    std::cout << summary.dump(2) << "\n";
    return kOk;
  } catch (const pnet::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kValidation;
  } catch (const std::exception& e) {
    std::cerr << "failed: " << e.what() << "\n";
    return kRuntime;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Partitioned-network hyperparameter optimization experiments"};
  app.require_subcommand(1);
  std::string config_path, out = "runs";
  std::optional<std::uint64_t> seed;
  std::vector<std::string> sets;
  bool print_defaults = false;
  const std::vector<std::pair<const char*, const char*>> commands{
      {"input-select", "Compare fixed input masks by the partitioned objective"},
      {"mask-learn", "Learn a relaxed input mask"},
      {"augment-learn", "Learn affine augmentation ranges on images"},
      {"bound-check", "Check the Jensen gap in a Beta-Bernoulli model"},
      {"fed-sim", "Simulate partitioned federated training"},
      {"sweep", "Grid over chunk and parameter ratios"}};
  for (auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "JSON config file");
    sub->add_option("--seed", seed, "Seed for every random stream");
    sub->add_option("--out", out, "Output directory")->capture_default_str();
    sub->add_option("--set", sets, "Override a config value, key.path=value")->take_all();
    sub->add_flag("--print-defaults", print_defaults, "Print the default config and exit");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kValidation;
  }
  const std::string name = app.get_subcommands().front()->get_name();
  const pnet::ExperimentKind kind = pnet::parse_kind(name);
  if (print_defaults) {
    std::cout << pnet::default_config(kind).dump(2) << "\n";
    return kOk;
  }
  return run(kind, config_path, seed, out, sets);
}
