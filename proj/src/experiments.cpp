#include "pnet/experiments.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <iostream>
#include <sstream>

#include "pnet/bound.hpp"

namespace pnet {

namespace {

constexpr const char* kVersion = "pnet 0.1.0";

const std::vector<std::pair<ExperimentKind, const char*>> kKinds{
    {ExperimentKind::kInputSelect, "input-select"}, {ExperimentKind::kMaskLearn, "mask-learn"},
    {ExperimentKind::kAugmentLearn, "augment-learn"}, {ExperimentKind::kBoundCheck, "bound-check"},
    {ExperimentKind::kFedSim, "fed-sim"},           {ExperimentKind::kSweep, "sweep"}};

std::vector<double> uniform_ratios(std::size_t c) { return std::vector<double>(c, 1.0 / static_cast<double>(c)); }

Json tabular_data() { return {{"train_size", 1000}, {"test_size", 1000}, {"features", 30}, {"informative", 15}}; }

Json image_data(bool rotate) {
  return {{"source", "glyphs"},  {"train_size", 2000},  {"test_size", 1000}, {"size", 16},
          {"rotate", rotate},    {"train_images", ""},  {"train_labels", ""}, {"test_images", ""},
          {"test_labels", ""},   {"limit", 0}};
}

Json training_defaults(std::size_t iterations, std::size_t eval_every) {
  return {{"batch_size", 256},        {"iterations", iterations}, {"lr", 1e-3},
          {"hyper_lr", 1e-3},         {"weight_decay", 3e-4},     {"wd_exponent", 1.0},
          {"schedule", "constant"},   {"eval_every", eval_every}};
}

Json partition_defaults(std::vector<double> ratios) {
  return {{"chunk_ratios", ratios}, {"param_ratios", Json::array()}, {"scheme", "random"}, {"defaults", "zero"}};
}

std::string type_name(const Json& j) {
  if (j.is_number()) return "number";
  return j.type_name();
}

bool compatible(const Json& base, const Json& value) {
  if (base.is_number_integer() || base.is_number_unsigned())
    return value.is_number_integer() || value.is_number_unsigned() ||
           (value.is_number_float() && std::floor(value.get<double>()) == value.get<double>());
  if (base.is_number()) return value.is_number();
  return base.type() == value.type();
}

template <class T>
T get(const Json& j, const char* key) {
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: bad value for '") + key + "': " + e.what());
  }
}

std::size_t get_size(const Json& j, const char* key) {
  const Json& v = j.at(key);
  if (v.is_number_integer() && v.get<long long>() < 0) throw ConfigError(std::string("config: '") + key + "' must be >= 0");
  if (v.is_number_float()) return static_cast<std::size_t>(v.get<double>());
  return v.get<std::size_t>();
}

std::string now_iso() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

double sigmoid(double x) { return x >= 0 ? 1 / (1 + std::exp(-x)) : std::exp(x) / (1 + std::exp(x)); }

std::string ratios_cell(const std::vector<double>& r) {
  std::string s;
  for (std::size_t i = 0; i < r.size(); ++i) s += (i ? ";" : "") + format_number(r[i]);
  return s;
}

}  // namespace

ExperimentKind parse_kind(const std::string& name) {
  for (auto& [k, n] : kKinds)
    if (name == n) return k;
  throw ConfigError("unknown experiment kind '" + name + "'");
}

const char* kind_name(ExperimentKind kind) {
  for (auto& [k, n] : kKinds)
    if (k == kind) return n;
  return "?";
}

Json default_config(ExperimentKind kind) {
  Json c{{"seed", 0}};
  switch (kind) {
    case ExperimentKind::kInputSelect:
      c["data"] = tabular_data();
      c["model"] = {{"hidden", {256, 256}}, {"activation", "gelu"}};
      c["partition"] = partition_defaults(uniform_ratios(8));
      c["training"] = training_defaults(10000, 250);
      c["ks"] = {0, 5, 10, 15, 20, 25, 30};
      c["selection"] = "final";
      break;
    case ExperimentKind::kMaskLearn:
      c["data"] = tabular_data();
      c["model"] = {{"hidden", {256, 256}}, {"activation", "gelu"}};
      c["partition"] = partition_defaults(uniform_ratios(4));
      c["training"] = training_defaults(30000, 1000);
      c["hyper"] = {{"mask_init", 0.0}, {"temperature", 0.05}};
      break;
    case ExperimentKind::kAugmentLearn:
      c["data"] = image_data(true);
      c["model"] = {{"hidden", {256, 256}}, {"activation", "gelu"}};
      c["partition"] = partition_defaults({0.8, 0.1, 0.1});
      c["training"] = training_defaults(4000, 500);
      c["training"]["batch_size"] = 64;
      c["training"]["hyper_lr"] = 1e-2;
      c["hyper"] = {{"affine_init", std::vector<double>(kAffineParams, 0.1)},
                    {"learn_affine", std::vector<bool>(kAffineParams, true)},
                    {"aug_samples", 20}};
      c["baseline"] = true;
      break;
    case ExperimentKind::kBoundCheck:
      c["datasets"] = 100;
      c["max_chunks"] = 5;
      c["max_flips"] = 20;
      c["tolerance"] = 1e-12;
      c["identity_tolerance"] = 1e-9;
      break;
    case ExperimentKind::kFedSim:
      c["data"] = image_data(false);
      c["data"]["train_size"] = 6000;
      c["model"] = {{"hidden", {128}}, {"activation", "relu"}};
      c["hyper"] = {{"augment", false},
                    {"affine_init", std::vector<double>(kAffineParams, 0.1)},
                    {"learn_affine", std::vector<bool>(kAffineParams, true)},
                    {"aug_samples", 4},
                    {"dropout", false},
                    {"dropout_init", 2.0},
                    {"temperature", 0.5}};
      c["federated"] = {{"n_clients", 100},       {"chunk_ratios", {0.7, 0.2, 0.1}},
                        {"param_ratios", {0.7, 0.2, 0.1}},
                        {"local_epochs", 1},      {"local_lr", 5e-2},
                        {"local_batch", 32},      {"server_optimizer", "adam"},
                        {"server_lr", 1e-3},      {"server_hyper_lr", 3e-3},
                        {"hyper_batch", 0},       {"rounds", 50},
                        {"eval_every", 1},        {"alpha", 0.1},
                        {"participation", 1.0},   {"node_partitioning", false},
                        {"sharding", "label"}};
      break;
    case ExperimentKind::kSweep:
      c["task"] = "input-select";
      c["k"] = 15;
      c["data"] = tabular_data();
      c["model"] = {{"hidden", {256, 256}}, {"activation", "gelu"}};
      c["partition"] = partition_defaults({0.5, 0.5});
      c["training"] = training_defaults(10000, 0);
      c["grid"] = {{"chunk_ratios", Json::array({{0.5, 0.5}, {0.8, 0.2}})},
                   {"param_ratios", Json::array({{0.5, 0.5}, {0.8, 0.2}})}};
      break;
  }
  return c;
}

void merge_config(Json& base, const Json& user, const std::string& path) {
  if (!user.is_object()) throw ConfigError("config: " + (path.empty() ? std::string("top level") : path) + " must be an object");
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("config: unknown key '" + key + "'");
    Json& slot = base[it.key()];
    if (slot.is_object()) {
      merge_config(slot, it.value(), key);
    } else {
      if (!compatible(slot, it.value()))
        throw ConfigError("config: '" + key + "' expects " + type_name(slot) + ", got " + type_name(it.value()));
      slot = it.value();
    }
  }
}

void apply_override(Json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  Json value = Json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  Json patch = value;
  std::vector<std::string> parts;
  std::stringstream ss(key);
  for (std::string p; std::getline(ss, p, '.');) parts.push_back(p);
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = Json{{*it, patch}};
  // A string default keeps numeric-looking text as a string.
  const Json* slot = &config;
  for (const auto& p : parts) {
    if (!slot->is_object() || !slot->contains(p)) {
      slot = nullptr;
      break;
    }
    slot = &(*slot)[p];
  }
  if (slot && slot->is_string() && !value.is_string()) {
    patch = Json(text);
    for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = Json{{*it, patch}};
  }
  merge_config(config, patch);
}

Json resolve_config(ExperimentKind kind, const Json* file, const std::vector<std::string>& overrides) {
  Json c = default_config(kind);
  if (file) merge_config(c, *file);
  for (const auto& o : overrides) apply_override(c, o);
  validate_config(kind, c);
  return c;
}

MlpSpec mlp_from(const Json& model, std::size_t inputs, std::size_t classes) {
  MlpSpec s;
  s.inputs = inputs;
  s.classes = classes;
  s.hidden = get<std::vector<std::size_t>>(model, "hidden");
  const auto act = get<std::string>(model, "activation");
  if (act == "gelu")
    s.activation = Activation::kGelu;
  else if (act == "relu")
    s.activation = Activation::kRelu;
  else
    throw ConfigError("config: model.activation must be gelu or relu");
  s.validate();
  return s;
}

PartitionSpec partition_from(const Json& p) {
  PartitionSpec s;
  s.chunk_ratios = get<std::vector<double>>(p, "chunk_ratios");
  s.param_ratios = get<std::vector<double>>(p, "param_ratios");
  if (s.param_ratios.empty()) s.param_ratios = s.chunk_ratios;
  s.chunks = s.chunk_ratios.size();
  const auto scheme = get<std::string>(p, "scheme");
  if (scheme != "random" && scheme != "node") throw ConfigError("config: partition.scheme must be random or node");
  const auto defaults = get<std::string>(p, "defaults");
  if (defaults != "init" && defaults != "zero") throw ConfigError("config: partition.defaults must be init or zero");
  try {
    s.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return s;
}

TrainingConfig training_from(const Json& c) {
  const Json& t = c.at("training");
  TrainingConfig tc;
  tc.spec = partition_from(c.at("partition"));
  tc.batch_size = get_size(t, "batch_size");
  tc.iterations = get_size(t, "iterations");
  tc.lr = get<double>(t, "lr");
  tc.hyper_lr = get<double>(t, "hyper_lr");
  tc.weight_decay = get<double>(t, "weight_decay");
  tc.wd_exponent = get<double>(t, "wd_exponent");
  tc.eval_every = get_size(t, "eval_every");
  tc.seed = get<std::uint64_t>(c, "seed");
  try {
    tc.schedule = parse_lr_schedule(get<std::string>(t, "schedule"));
    tc.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return tc;
}

HyperParams hyper_from(const Json& h, std::size_t inputs, const MlpSpec& mlp) {
  HyperParams hp;
  hp.temperature = h.value("temperature", 0.5);
  if (h.contains("mask_init")) hp.mask_logits.assign(inputs, get<double>(h, "mask_init"));
  hp.augment = h.value("augment", h.contains("affine_init"));
  if (h.contains("affine_init")) {
    const auto a = get<std::vector<double>>(h, "affine_init");
    if (a.size() != kAffineParams) throw ConfigError("config: hyper.affine_init needs 6 entries");
    std::copy(a.begin(), a.end(), hp.affine.begin());
  }
  if (h.contains("learn_affine")) {
    const auto l = get<std::vector<bool>>(h, "learn_affine");
    if (l.size() != kAffineParams) throw ConfigError("config: hyper.learn_affine needs 6 entries");
    std::copy(l.begin(), l.end(), hp.learn_affine.begin());
  }
  hp.aug_samples = h.contains("aug_samples") ? get_size(h, "aug_samples") : 1;
  if (h.value("dropout", false))
    for (std::size_t u : mlp.hidden) hp.dropout_logits.emplace_back(u, get<double>(h, "dropout_init"));
  try {
    hp.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return hp;
}

FedConfig fed_from(const Json& c) {
  const Json& f = c.at("federated");
  FedConfig fc;
  fc.n_clients = get_size(f, "n_clients");
  fc.chunk_ratios = get<std::vector<double>>(f, "chunk_ratios");
  fc.param_ratios = get<std::vector<double>>(f, "param_ratios");
  fc.local_epochs = get_size(f, "local_epochs");
  fc.local_lr = get<double>(f, "local_lr");
  fc.local_batch = get_size(f, "local_batch");
  const auto opt = get<std::string>(f, "server_optimizer");
  if (opt == "adam")
    fc.server_optimizer = ServerOptimizer::kAdam;
  else if (opt == "sgd")
    fc.server_optimizer = ServerOptimizer::kSgd;
  else
    throw ConfigError("config: federated.server_optimizer must be adam or sgd");
  fc.server_lr = get<double>(f, "server_lr");
  fc.server_hyper_lr = get<double>(f, "server_hyper_lr");
  fc.hyper_batch = get_size(f, "hyper_batch");
  fc.rounds = get_size(f, "rounds");
  fc.eval_every = get_size(f, "eval_every");
  fc.alpha = get<double>(f, "alpha");
  fc.participation = get<double>(f, "participation");
  fc.node_partitioning = get<bool>(f, "node_partitioning");
  fc.seed = get<std::uint64_t>(c, "seed");
  const auto sharding = get<std::string>(f, "sharding");
  if (sharding != "label" && sharding != "rotation") throw ConfigError("config: federated.sharding must be label or rotation");
  try {
    fc.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return fc;
}

namespace {

void validate_tabular(const Json& d) {
  if (get_size(d, "train_size") < 1 || get_size(d, "test_size") < 1) throw ConfigError("config: data sizes must be >= 1");
  if (get_size(d, "informative") > get_size(d, "features"))
    throw ConfigError("config: data.informative exceeds data.features");
}

void validate_images(const Json& d) {
  const auto src = get<std::string>(d, "source");
  if (src == "glyphs") {
    if (get_size(d, "train_size") < 1 || get_size(d, "test_size") < 1) throw ConfigError("config: data sizes must be >= 1");
    if (get_size(d, "size") < 4) throw ConfigError("config: data.size must be >= 4");
  } else if (src == "idx") {
    for (const char* k : {"train_images", "train_labels", "test_images", "test_labels"})
      if (get<std::string>(d, k).empty()) throw ConfigError(std::string("config: data.") + k + " is required for idx");
  } else {
    throw ConfigError("config: data.source must be glyphs or idx");
  }
}

void require_hyper_chunks(const TrainingConfig& t, const HyperParams& hp) {
  if (hp.has_learnable() && t.spec.chunks < 2)
    throw ConfigError("config: hyperparameter optimization requires >= 2 chunks");
}

}  // namespace

void validate_config(ExperimentKind kind, const Json& c) {
  try {
    if (!c.contains("seed") || !(c["seed"].is_number_unsigned() || c["seed"].is_number_integer()) ||
        (c["seed"].is_number_integer() && c["seed"].get<long long>() < 0))
      throw ConfigError("config: seed must be a non-negative integer");
    switch (kind) {
      case ExperimentKind::kInputSelect: {
        validate_tabular(c.at("data"));
        training_from(c);
        const std::size_t d = get_size(c.at("data"), "features");
        mlp_from(c.at("model"), d, 2);
        const auto ks = get<std::vector<long long>>(c, "ks");
        if (ks.empty()) throw ConfigError("config: ks must not be empty");
        for (long long k : ks)
          if (k < 0 || static_cast<std::size_t>(k) > d)
            throw ConfigError("config: invalid K " + std::to_string(k) + " for " + std::to_string(d) + " features");
        const auto sel = get<std::string>(c, "selection");
        if (sel != "best" && sel != "final") throw ConfigError("config: selection must be best or final");
        if (sel == "best" && get_size(c.at("training"), "eval_every") == 0)
          throw ConfigError("config: selection=best needs training.eval_every > 0");
        break;
      }
      case ExperimentKind::kMaskLearn: {
        validate_tabular(c.at("data"));
        const TrainingConfig t = training_from(c);
        const std::size_t d = get_size(c.at("data"), "features");
        require_hyper_chunks(t, hyper_from(c.at("hyper"), d, mlp_from(c.at("model"), d, 2)));
        break;
      }
      case ExperimentKind::kAugmentLearn: {
        validate_images(c.at("data"));
        const TrainingConfig t = training_from(c);
        const MlpSpec m = mlp_from(c.at("model"), 1, 10);
        HyperParams hp = hyper_from(c.at("hyper"), 1, m);
        require_hyper_chunks(t, hp);
        get<bool>(c, "baseline");
        break;
      }
      case ExperimentKind::kBoundCheck:
        if (get_size(c, "datasets") < 1 || get_size(c, "max_chunks") < 1)
          throw ConfigError("config: datasets and max_chunks must be >= 1");
        get_size(c, "max_flips");
        if (!(get<double>(c, "tolerance") >= 0) || !(get<double>(c, "identity_tolerance") >= 0))
          throw ConfigError("config: tolerances must be >= 0");
        break;
      case ExperimentKind::kFedSim: {
        validate_images(c.at("data"));
        const FedConfig f = fed_from(c);
        const MlpSpec m = mlp_from(c.at("model"), 1, 10);
        const HyperParams hp = hyper_from(c.at("hyper"), 1, m);
        if (hp.has_learnable() && f.chunks() < 2)
          throw ConfigError("config: hyperparameter optimization requires >= 2 chunks");
        if (get<std::string>(c.at("federated"), "sharding") == "rotation" && !get<bool>(c.at("data"), "rotate"))
          throw ConfigError("config: rotation sharding needs data.rotate = true");
        break;
      }
      case ExperimentKind::kSweep: {
        const auto task = get<std::string>(c, "task");
        if (task == "input-select") {
          validate_tabular(c.at("data"));
          const std::size_t d = get_size(c.at("data"), "features");
          if (get_size(c, "k") > d) throw ConfigError("config: k exceeds data.features");
          mlp_from(c.at("model"), d, 2);
        } else {
          throw ConfigError("config: sweep.task must be input-select");
        }
        training_from(c);
        const auto cr = get<std::vector<std::vector<double>>>(c.at("grid"), "chunk_ratios");
        const auto pr = get<std::vector<std::vector<double>>>(c.at("grid"), "param_ratios");
        if (cr.empty() || pr.empty()) throw ConfigError("config: sweep grid lists must not be empty");
        for (const auto& a : cr)
          for (const auto& b : pr) {
            if (a.size() != b.size()) throw ConfigError("config: sweep grid mixes chunk counts");
            Json p = c.at("partition");
            p["chunk_ratios"] = a;
            p["param_ratios"] = b;
            partition_from(p);
          }
        break;
      }
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

CsvWriter::CsvWriter(const std::filesystem::path& path, std::vector<std::string> header)
    : out_(path), columns_(header.size()) {
  if (!out_) throw std::runtime_error("cannot write " + path.string());
  row(header);
}

void CsvWriter::row(const std::vector<double>& values) {
  std::vector<std::string> cells;
  for (double v : values) cells.push_back(format_number(v));
  row(cells);
}

void CsvWriter::row(const std::vector<std::string>& cells) {
  if (cells.size() != columns_) throw std::logic_error("csv: row width differs from header");
  for (std::size_t i = 0; i < cells.size(); ++i) out_ << (i ? "," : "") << cells[i];
  out_ << '\n';
  out_.flush();
}

void write_atomic(const std::filesystem::path& path, const std::string& contents) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << contents;
    out.flush();
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

namespace {

struct Images {
  ImageDataset train, test;
};

Images load_images(const Json& d, std::uint64_t seed) {
  Images im;
  if (get<std::string>(d, "source") == "idx") {
    im.train = idx_to_images(read_idx(get<std::string>(d, "train_images")), read_idx(get<std::string>(d, "train_labels")));
    im.test = idx_to_images(read_idx(get<std::string>(d, "test_images")), read_idx(get<std::string>(d, "test_labels")));
    const std::size_t limit = get_size(d, "limit");
    const auto truncate = [&](ImageDataset& x) {
      if (!limit || x.size() <= limit) return;
      const std::size_t hw = x.height * x.width;
      x.images = Tensor({limit, hw}, std::vector<Real>(x.images.data(), x.images.data() + limit * hw));
      x.labels.resize(limit);
    };
    truncate(im.train);
    truncate(im.test);
  } else {
    Rng rng = Rng::stream(seed, "data");
    const std::size_t size = get_size(d, "size");
    im.train = gen_glyphs(get_size(d, "train_size"), rng, size);
    im.test = gen_glyphs(get_size(d, "test_size"), rng, size);
  }
  if (get<bool>(d, "rotate")) {
    Rng r = Rng::stream(seed, "data", 2);
    im.train = rotate_fixed(im.train, r);
    im.test = rotate_fixed(im.test, r);
  }
  return im;
}

PartitionedParams make_params(const Json& c, const MlpSpec& mlp, const PartitionSpec& spec, std::uint64_t seed) {
  Rng rng = Rng::stream(seed, "partition");
  std::vector<Tensor> init = init_mlp(mlp, rng);
  const std::vector<Shape> shapes = mlp.shapes();
  const Json& p = c.at("partition");
  PartitionAssignment a = get<std::string>(p, "scheme") == "node" ? assign_nodes(shapes, spec.param_ratios)
                                                                  : assign_random_weights(shapes, spec.param_ratios, rng);
  std::vector<Tensor> defaults = init;
  if (get<std::string>(p, "defaults") == "zero")
    for (auto& t : defaults) t = Tensor(t.shape());
  return PartitionedParams(std::move(init), std::move(defaults), std::move(a));
}

std::vector<std::string> metric_header(std::vector<std::string> lead, const HyperParams& hp) {
  for (const char* k : {"iteration", "lml", "train_accuracy", "train_loglik", "test_accuracy", "test_loglik"})
    lead.emplace_back(k);
  for (auto& n : hp.names()) lead.push_back(n);
  return lead;
}

std::vector<double> metric_cells(std::vector<double> lead, const MetricsRow& m) {
  lead.insert(lead.end(), {static_cast<double>(m.iteration), m.lml, m.train_accuracy, m.train_loglik, m.test_accuracy,
                           m.test_loglik});
  lead.insert(lead.end(), m.hyper.begin(), m.hyper.end());
  return lead;
}

Json metrics_json(const MetricsRow& m) {
  return {{"iteration", m.iteration},         {"lml", m.lml},
          {"train_accuracy", m.train_accuracy}, {"train_loglik", m.train_loglik},
          {"test_accuracy", m.test_accuracy},   {"test_loglik", m.test_loglik}};
}

void progress(const std::string& line) { std::cerr << line << std::endl; }

Json run_input_select(const Json& c, const std::filesystem::path& out) {
  const std::uint64_t seed = c["seed"];
  const Json& d = c["data"];
  const std::size_t dim = get_size(d, "features"), informative = get_size(d, "informative");
  Rng drng = Rng::stream(seed, "data");
  const TabularDataset train = gen_input_selection(get_size(d, "train_size"), drng, dim, informative);
  const TabularDataset test = gen_input_selection(get_size(d, "test_size"), drng, dim, informative);
  const TrainingConfig tc = training_from(c);
  Rng srng = Rng::stream(seed, "data", 1);
  const ChunkedDataset chunks = chunk_split(train, tc.spec.chunk_ratios, srng);
  const bool best = c["selection"] == "best";

  CsvWriter csv(out / "metrics.csv", metric_header({"k"}, HyperParams{}));
  Json per_k = Json::array();
  double top = -INFINITY;
  long long argmax = -1;
  for (long long k : c["ks"].get<std::vector<long long>>()) {
    Model model;
    model.mlp = mlp_from(c["model"], dim, 2);
    model.input_mask = fixed_mask(dim, static_cast<std::size_t>(k));
    Trainer tr(model, make_params(c, model.mlp, tc.spec, seed), HyperParams{}, chunks, tc);
    MetricsRow best_row, last;
    best_row.lml = -INFINITY;
    tr.train(&test, [&](const MetricsRow& m) {
      csv.row(metric_cells({static_cast<double>(k)}, m));
      if (m.lml > best_row.lml) best_row = m;
      last = m;
    });
    Json entry = metrics_json(last);
    entry["k"] = k;
    entry["best_lml"] = best_row.lml;
    entry["best_iteration"] = best_row.iteration;
    entry["best"] = metrics_json(best_row);
    const double score = best ? best_row.lml : last.lml;
    if (score > top) {
      top = score;
      argmax = k;
    }
    progress("input-select K=" + std::to_string(k) + " lml=" + format_number(last.lml) +
             " best_lml=" + format_number(best_row.lml) + " test_acc=" + format_number(last.test_accuracy));
    per_k.push_back(entry);
  }
  return {{"selection", c["selection"]}, {"argmax_k", argmax}, {"per_k", per_k}};
}

Json mask_summary(const HyperParams& hp, std::size_t informative) {
  std::vector<double> p;
  double inf = 0, spur = 0;
  for (std::size_t i = 0; i < hp.mask_logits.size(); ++i) {
    p.push_back(sigmoid(hp.mask_logits[i]));
    (i < informative ? inf : spur) += p.back();
  }
  const std::size_t n_spur = hp.mask_logits.size() - informative;
  return {{"mask_probabilities", p},
          {"mean_informative", informative ? inf / static_cast<double>(informative) : 0.0},
          {"mean_spurious", n_spur ? spur / static_cast<double>(n_spur) : 0.0}};
}

Json run_mask_learn(const Json& c, const std::filesystem::path& out) {
  const std::uint64_t seed = c["seed"];
  const Json& d = c["data"];
  const std::size_t dim = get_size(d, "features"), informative = get_size(d, "informative");
  Rng drng = Rng::stream(seed, "data");
  const TabularDataset train = gen_input_selection(get_size(d, "train_size"), drng, dim, informative);
  const TabularDataset test = gen_input_selection(get_size(d, "test_size"), drng, dim, informative);
  const TrainingConfig tc = training_from(c);
  Rng srng = Rng::stream(seed, "data", 1);
  const ChunkedDataset chunks = chunk_split(train, tc.spec.chunk_ratios, srng);
  Model model;
  model.mlp = mlp_from(c["model"], dim, 2);
  const HyperParams hp = hyper_from(c["hyper"], dim, model.mlp);
  Trainer tr(model, make_params(c, model.mlp, tc.spec, seed), hp, chunks, tc);
  CsvWriter csv(out / "metrics.csv", metric_header({}, hp));
  MetricsRow last;
  tr.train(&test, [&](const MetricsRow& m) {
    csv.row(metric_cells({}, m));
    last = m;
    const Json s = mask_summary(tr.hyper(), informative);
    progress("mask-learn it=" + std::to_string(m.iteration) + " lml=" + format_number(m.lml) +
             " p_inf=" + format_number(s["mean_informative"]) + " p_spur=" + format_number(s["mean_spurious"]));
  });
  Json s = mask_summary(tr.hyper(), informative);
  s["final"] = metrics_json(last);
  return s;
}

struct AugmentRun {
  MetricsRow last;
  HyperParams hyper;
};

AugmentRun train_images(const Json& c, const Images& im, const HyperParams& hp, CsvWriter* csv, const std::string& tag) {
  const std::uint64_t seed = c["seed"];
  const TrainingConfig tc = training_from(c);
  const TabularDataset train = im.train.as_tabular(), test = im.test.as_tabular();
  Rng srng = Rng::stream(seed, "data", 1);
  const ChunkedDataset chunks = chunk_split(train, tc.spec.chunk_ratios, srng);
  Model model;
  model.mlp = mlp_from(c["model"], im.train.height * im.train.width, im.train.classes);
  model.height = im.train.height;
  model.width = im.train.width;
  Trainer tr(model, make_params(c, model.mlp, tc.spec, seed), hp, chunks, tc);
  AugmentRun r;
  tr.train(&test, [&](const MetricsRow& m) {
    if (csv) csv->row(metric_cells({}, m));
    r.last = m;
    std::string theta;
    if (hp.augment) theta = " theta_rot=" + format_number(tr.hyper().affine[kRotation]);
    progress(tag + " it=" + std::to_string(m.iteration) + " lml=" + format_number(m.lml) +
             " test_acc=" + format_number(m.test_accuracy) + theta);
  });
  r.hyper = tr.hyper();
  return r;
}

Json run_augment_learn(const Json& c, const std::filesystem::path& out) {
  const Images im = load_images(c["data"], c["seed"]);
  const MlpSpec mlp = mlp_from(c["model"], im.train.height * im.train.width, im.train.classes);
  const HyperParams hp = hyper_from(c["hyper"], mlp.inputs, mlp);
  CsvWriter csv(out / "metrics.csv", metric_header({}, hp));
  const AugmentRun a = train_images(c, im, hp, &csv, "augment-learn");
  Json s{{"theta", std::vector<double>(a.hyper.affine.begin(), a.hyper.affine.end())},
         {"abs_rotation", std::abs(a.hyper.affine[kRotation])},
         {"final", metrics_json(a.last)}};
  if (c["baseline"].get<bool>()) {
    const AugmentRun b = train_images(c, im, HyperParams{}, nullptr, "baseline");
    s["baseline"] = metrics_json(b.last);
    s["accuracy_gain"] = a.last.test_accuracy - b.last.test_accuracy;
  }
  return s;
}

Json run_bound_check(const Json& c, const std::filesystem::path& out) {
  const BoundSweep sweep = bound_sweep(c["seed"], get_size(c, "datasets"), get_size(c, "max_chunks"), get_size(c, "max_flips"));
  CsvWriter csv(out / "metrics.csv", {"case", "a0", "b0", "chunks", "flips", "lhs", "rhs", "gap", "kl_gap"});
  for (std::size_t i = 0; i < sweep.cases.size(); ++i) {
    const BoundCase& b = sweep.cases[i];
    std::size_t flips = 0;
    for (auto& ch : b.chunks) flips += ch.heads + ch.tails;
    csv.row({static_cast<double>(i), b.model.a0, b.model.b0, static_cast<double>(b.chunks.size()),
             static_cast<double>(flips), b.jensen.lhs, b.jensen.rhs, b.jensen.gap, b.kl_gap});
  }
  const JensenGap w = jensen_gap({1, 1}, {{1, 0}});
  Json s{{"datasets", sweep.cases.size()},
         {"min_gap", sweep.min_gap},
         {"max_identity_error", sweep.max_identity_error},
         {"worked_example", {{"lhs", w.lhs}, {"rhs", w.rhs}, {"gap", w.gap}, {"kl", gap_via_kl({1, 1}, {{1, 0}})}}}};
  s["passed"] = sweep.min_gap >= -c["tolerance"].get<double>() &&
                sweep.max_identity_error <= c["identity_tolerance"].get<double>();
  return s;
}

Json run_fed_sim(const Json& c, const std::filesystem::path& out) {
  const std::uint64_t seed = c["seed"];
  const FedConfig fc = fed_from(c);
  const Images im = load_images(c["data"], seed);
  const TabularDataset train = im.train.as_tabular(), test = im.test.as_tabular();
  FedProblem p;
  p.model.mlp = mlp_from(c["model"], im.train.height * im.train.width, im.train.classes);
  p.model.height = im.train.height;
  p.model.width = im.train.width;
  p.hyper = hyper_from(c["hyper"], p.model.mlp.inputs, p.model.mlp);
  p.train = &train;
  p.test = &test;
  Rng shard_rng = Rng::stream(seed, "federated", 1);
  p.shards = c["federated"]["sharding"] == "rotation"
                 ? shard_rotation_bins(im.train.angles, fc.n_clients, fc.alpha, shard_rng)
                 : shard_label_skew(train.labels, train.classes, fc.n_clients, fc.alpha, shard_rng);
  std::vector<std::string> header{"round", "eval_accuracy", "moving_avg_accuracy", "upload_fraction"};
  for (auto& n : p.hyper.names()) header.push_back(n);
  CsvWriter csv(out / "metrics.csv", header);
  double upload = 0;
  const FedResult r = run_federated(p, fc, [&](const FedRow& row) {
    std::vector<double> cells{static_cast<double>(row.round), row.eval_accuracy, row.moving_avg_accuracy,
                              row.upload_fraction};
    cells.insert(cells.end(), row.hyper.begin(), row.hyper.end());
    csv.row(cells);
    upload = row.upload_fraction;
    progress("fed-sim round=" + std::to_string(row.round) + " acc=" + format_number(row.eval_accuracy) +
             " upload=" + format_number(row.upload_fraction));
  });
  const FedRow& last = r.rows.back();
  return {{"initial_accuracy", r.initial_accuracy},
          {"final_accuracy", last.eval_accuracy},
          {"moving_avg_accuracy", last.moving_avg_accuracy},
          {"upload_fraction", upload},
          {"expected_upload_fraction", expected_upload_fraction(fc.chunk_ratios, fc.param_ratios)},
          {"hyper", last.hyper}};
}

Json run_sweep(const Json& c, const std::filesystem::path& out) {
  const std::uint64_t seed = c["seed"];
  const Json& d = c["data"];
  const std::size_t dim = get_size(d, "features"), informative = get_size(d, "informative");
  Rng drng = Rng::stream(seed, "data");
  const TabularDataset train = gen_input_selection(get_size(d, "train_size"), drng, dim, informative);
  const TabularDataset test = gen_input_selection(get_size(d, "test_size"), drng, dim, informative);
  CsvWriter csv(out / "metrics.csv", {"chunk_ratios", "param_ratios", "lml", "train_accuracy", "test_accuracy",
                                      "test_loglik"});
  Json rows = Json::array();
  for (const auto& cr : c["grid"]["chunk_ratios"])
    for (const auto& pr : c["grid"]["param_ratios"]) {
      Json run = c;
      run["partition"]["chunk_ratios"] = cr;
      run["partition"]["param_ratios"] = pr;
      const TrainingConfig tc = training_from(run);
      Rng srng = Rng::stream(seed, "data", 1);
      const ChunkedDataset chunks = chunk_split(train, tc.spec.chunk_ratios, srng);
      Model model;
      model.mlp = mlp_from(c["model"], dim, 2);
      model.input_mask = fixed_mask(dim, get_size(c, "k"));
      Trainer tr(model, make_params(run, model.mlp, tc.spec, seed), HyperParams{}, chunks, tc);
      MetricsRow last;
      tr.train(&test, [&](const MetricsRow& m) { last = m; });
      const auto cv = cr.get<std::vector<double>>(), pv = pr.get<std::vector<double>>();
      csv.row({ratios_cell(cv), ratios_cell(pv), format_number(last.lml), format_number(last.train_accuracy),
               format_number(last.test_accuracy), format_number(last.test_loglik)});
      Json e = metrics_json(last);
      e["chunk_ratios"] = cv;
      e["param_ratios"] = pv;
      rows.push_back(e);
      progress("sweep chunks=" + ratios_cell(cv) + " params=" + ratios_cell(pv) +
               " test_acc=" + format_number(last.test_accuracy));
    }
  return {{"runs", rows}};
}

}  // namespace

Json run_experiment(ExperimentKind kind, const Json& config, const std::filesystem::path& out) {
  validate_config(kind, config);
  std::filesystem::create_directories(out);
  const std::string started = now_iso();
  Json summary;
  switch (kind) {
    case ExperimentKind::kInputSelect: summary = run_input_select(config, out); break;
    case ExperimentKind::kMaskLearn: summary = run_mask_learn(config, out); break;
    case ExperimentKind::kAugmentLearn: summary = run_augment_learn(config, out); break;
    case ExperimentKind::kBoundCheck: summary = run_bound_check(config, out); break;
    case ExperimentKind::kFedSim: summary = run_fed_sim(config, out); break;
    case ExperimentKind::kSweep: summary = run_sweep(config, out); break;
  }
  const Json manifest{{"kind", kind_name(kind)}, {"version", kVersion},     {"seed", config["seed"]},
                      {"config", config},        {"started", started},      {"finished", now_iso()},
                      {"summary", summary}};
  write_atomic(out / "manifest.json", manifest.dump(2) + "\n");
  if (kind == ExperimentKind::kBoundCheck && !summary["passed"].get<bool>())
    throw CheckFailed("bound-check: gap or identity outside tolerance");
  return summary;
}

}  // namespace pnet
