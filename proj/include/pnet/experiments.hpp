#pragma once

#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "pnet/federated.hpp"
#include "pnet/training.hpp"

namespace pnet {

using Json = nlohmann::ordered_json;

enum class ExperimentKind { kInputSelect, kMaskLearn, kAugmentLearn, kBoundCheck, kFedSim, kSweep };
ExperimentKind parse_kind(const std::string& name);
const char* kind_name(ExperimentKind kind);

// Bad configuration: unknown key, wrong type, or a value that fails validation.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A run finished but one of its built-in checks did not hold.
class CheckFailed : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

Json default_config(ExperimentKind kind);
// Overlays `user` onto `base`. Every key must already exist in `base` with a
// compatible type; objects merge recursively, everything else is replaced.
void merge_config(Json& base, const Json& user, const std::string& path = "");
// "a.b.c=value"; the value is parsed as JSON when possible, else taken as a string.
void apply_override(Json& config, const std::string& assignment);
// Defaults, then the optional file, then overrides in order; validated.
Json resolve_config(ExperimentKind kind, const Json* file, const std::vector<std::string>& overrides);
// Builds every typed config a run needs; throws ConfigError.
void validate_config(ExperimentKind kind, const Json& config);

// Typed views of a resolved config.
MlpSpec mlp_from(const Json& model, std::size_t inputs, std::size_t classes);
PartitionSpec partition_from(const Json& partition);
TrainingConfig training_from(const Json& config);
HyperParams hyper_from(const Json& hyper, std::size_t inputs, const MlpSpec& mlp);
FedConfig fed_from(const Json& config);

// Fixed-header CSV with full-precision numbers.
class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, std::vector<std::string> header);
  void row(const std::vector<double>& values);
  void row(const std::vector<std::string>& cells);

 private:
  std::ofstream out_;
  std::size_t columns_;
};

std::string format_number(double v);

// Writes via a temporary file and rename.
void write_atomic(const std::filesystem::path& path, const std::string& contents);

// Runs one experiment into `out` (metrics.csv, manifest.json) and returns the
// summary that also goes into the manifest.
Json run_experiment(ExperimentKind kind, const Json& config, const std::filesystem::path& out);

}  // namespace pnet
