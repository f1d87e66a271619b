#include "pnet/training.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

namespace pnet {

void TrainingConfig::validate() const {
  spec.validate();
  if (batch_size < 1) throw std::invalid_argument("training: batch_size must be >= 1");
  if (iterations < 1) throw std::invalid_argument("training: iterations must be >= 1");
  if (!(lr >= 0) || !(hyper_lr >= 0)) throw std::invalid_argument("training: learning rates must be non-negative");
  if (!(weight_decay >= 0)) throw std::invalid_argument("training: weight_decay must be non-negative");
  if (wd_exponent != 1.0 && wd_exponent != 0.5)
    throw std::invalid_argument("training: wd_exponent must be 1 or 0.5");
}

std::size_t sample_partition_index(std::span<const double> u, Rng& rng) { return rng.categorical(u) + 1; }

std::vector<std::size_t> sample_batch_prefix(const ChunkedDataset& data, std::size_t k, std::size_t batch, Rng& rng) {
  if (k < 1 || k > data.chunks()) throw std::out_of_range("sample_batch_prefix: k out of range");
  const std::size_t n = data.prefix_size(k);
  if (n == 0) throw std::invalid_argument("sample_batch_prefix: empty prefix");
  std::vector<std::size_t> rows(batch);
  for (auto& r : rows) r = static_cast<std::size_t>(rng.below(n));
  return rows;
}

std::vector<std::size_t> sample_batch_chunk(const ChunkedDataset& data, std::size_t k, std::size_t batch, Rng& rng) {
  if (k < 1 || k > data.chunks()) throw std::out_of_range("sample_batch_chunk: k out of range");
  const std::size_t lo = data.offsets[k - 1], n = data.chunk_size(k);
  if (n == 0) throw std::invalid_argument("sample_batch_chunk: empty chunk");
  std::vector<std::size_t> rows(batch);
  for (auto& r : rows) r = lo + static_cast<std::size_t>(rng.below(n));
  return rows;
}

double weight_decay_for(double lambda, std::size_t prefix_examples, double rho) {
  if (prefix_examples == 0) throw std::invalid_argument("weight_decay_for: empty prefix");
  return lambda / std::pow(static_cast<double>(prefix_examples), rho);
}

namespace {

std::vector<int> labels_of(const ChunkedDataset& d, std::span<const std::size_t> rows) {
  std::vector<int> y(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) y[i] = d.labels[rows[i]];
  return y;
}

constexpr std::size_t kEvalBatch = 500;

}  // namespace

EvalResult evaluate_model(const Model& model, const PartitionedParams& params, const HyperParams& hyper,
                          const Tensor& features, std::span<const int> labels, std::size_t level, std::uint64_t seed) {
  EvalResult r;
  const std::size_t n = labels.size(), d = features.cols();
  std::size_t correct = 0;
  for (std::size_t lo = 0, b = 0; lo < n; lo += kEvalBatch, ++b) {
    const std::size_t hi = std::min(n, lo + kEvalBatch);
    Tape tape;
    Tensor x({hi - lo, d}, std::vector<Real>(features.data() + lo * d, features.data() + hi * d));
    const MaterializedParams mp = materialize(tape, params, level, false);
    const HyperVars hv = hyper_vars(tape, hyper, false);
    Rng rng = Rng::stream(seed, "eval", b);
    const Var logp = model.log_predict(mp.effective, hv, hyper, tape.constant(std::move(x)), Mode::kEval, rng);
    const Tensor& lp = logp.value();
    const std::size_t k = lp.cols();
    for (std::size_t i = 0; i < hi - lo; ++i) {
      const int y = labels[lo + i];
      r.loglik += lp[i * k + static_cast<std::size_t>(y)];
      std::size_t best = 0;
      for (std::size_t c = 1; c < k; ++c)
        if (lp[i * k + c] > lp[i * k + best]) best = c;
      correct += best == static_cast<std::size_t>(y);
    }
  }
  r.count = n;
  r.accuracy = n ? static_cast<double>(correct) / static_cast<double>(n) : 0.0;
  return r;
}

double evaluate_lml(const Model& model, const PartitionedParams& params, const HyperParams& hyper,
                    const ChunkedDataset& data, std::uint64_t seed) {
  double total = 0;
  const std::size_t d = data.dim();
  for (std::size_t k = 2; k <= data.chunks(); ++k) {
    const std::size_t lo = data.offsets[k - 1], hi = data.offsets[k];
    Tensor x({hi - lo, d}, std::vector<Real>(data.features.data() + lo * d, data.features.data() + hi * d));
    const std::span<const int> y(data.labels.data() + lo, hi - lo);
    total += evaluate_model(model, params, hyper, x, y, k - 1, mix64(seed) ^ k).loglik;
  }
  return total;
}

Trainer::Trainer(Model model, PartitionedParams params, HyperParams hyper, const ChunkedDataset& data,
                 TrainingConfig config)
    : model_(std::move(model)),
      params_(std::move(params)),
      hyper_(std::move(hyper)),
      data_(data),
      config_(std::move(config)),
      opt_(params_),
      hyper_opt_(hyper_.flatten().size()),
      schedule_rng_(Rng::stream(config_.seed, "training")),
      hyper_rng_(Rng::stream(config_.seed, "training", 1)),
      partition_counts_(config_.spec.chunks, 0) {
  config_.validate();
  hyper_.validate();
  if (params_.chunks() != config_.spec.chunks || data_.chunks() != config_.spec.chunks)
    throw std::invalid_argument("trainer: parameter, data and spec chunk counts disagree");
  for (std::size_t k = 1; k <= data_.chunks(); ++k)
    if (data_.chunk_size(k) == 0) throw std::invalid_argument("trainer: chunk " + std::to_string(k) + " is empty");
  if (hyper_.has_learnable() && config_.spec.chunks < 2)
    throw std::invalid_argument("hyperparameter optimization requires >= 2 chunks");
}

void Trainer::partition_step(std::size_t k, std::span<const std::size_t> rows) {
  params_.check_level(k);
  for (std::size_t r : rows)
    if (r >= data_.prefix_size(k)) throw std::out_of_range("partition_step: batch row outside D_{1:k}");
  Tape tape;
  const MaterializedParams mp = materialize(tape, params_, k, true);
  const HyperVars hv = hyper_vars(tape, hyper_, false);
  Rng noise = Rng::stream(config_.seed, "augmentation", noise_counter_++);
  const Var x = tape.constant(gather(data_.features, rows));
  const std::vector<int> y = labels_of(data_, rows);
  const Var logp = model_.log_predict(mp.effective, hv, hyper_, x, Mode::kTrain, noise);
  const Var loss = scale(mean(pick(logp, y)), Real(-1));
  const Gradients g = backward(tape, loss);
  std::vector<Tensor> grads;
  grads.reserve(mp.values.size());
  for (const Var& v : mp.values) grads.push_back(g.of(v));
  grads = restrict_gradient(std::move(grads), params_.assignment, k);
  const double lr = scheduled_lr(config_.schedule, config_.lr, iteration_, config_.iterations);
  const double wd = weight_decay_for(config_.weight_decay, data_.prefix_size(k), config_.wd_exponent);
  opt_.step(params_, grads, k, lr, wd);
  ++partition_counts_[k - 1];
}

std::vector<Real> Trainer::hyper_gradient_on(std::size_t level, std::span<const std::size_t> rows,
                                             std::uint64_t noise_key) {
  params_.check_level(level);
  Tape tape;
  const MaterializedParams mp = materialize(tape, params_, level, false);
  const HyperVars hv = hyper_vars(tape, hyper_, true);
  Rng noise = Rng::stream(config_.seed, "augmentation-hyper", noise_key);
  const Var x = tape.constant(gather(data_.features, rows));
  const std::vector<int> y = labels_of(data_, rows);
  const Var ll = mean(pick(model_.log_predict(mp.effective, hv, hyper_, x, Mode::kTrain, noise), y));
  return hyper_gradient(backward(tape, ll), hv, hyper_);
}

double Trainer::batch_loglik(std::size_t level, std::span<const std::size_t> rows, std::uint64_t noise_key) const {
  params_.check_level(level);
  Tape tape;
  const MaterializedParams mp = materialize(tape, params_, level, false);
  const HyperVars hv = hyper_vars(tape, hyper_, false);
  Rng noise = Rng::stream(config_.seed, "augmentation-hyper", noise_key);
  const Var x = tape.constant(gather(data_.features, rows));
  const std::vector<int> y = labels_of(data_, rows);
  return mean(pick(model_.log_predict(mp.effective, hv, hyper_, x, Mode::kTrain, noise), y)).value().item();
}

std::size_t Trainer::hyper_step() {
  const std::size_t C = config_.spec.chunks;
  if (C < 2) throw std::invalid_argument("hyperparameter optimization requires >= 2 chunks");
  if (!hyper_.has_learnable()) return 0;
  const auto& u = config_.spec.chunk_ratios;
  const std::span<const double> tail(u.data() + 1, C - 1);
  const std::size_t k = sample_partition_index(tail, hyper_rng_) + 1;
  const auto rows = sample_batch_chunk(data_, k, config_.batch_size, hyper_rng_);
  std::vector<Real> g = hyper_gradient_on(k - 1, rows, noise_counter_++);
  for (auto& v : g) v = -v;
  std::vector<Real> flat = hyper_.flatten();
  hyper_opt_.step(flat, g, config_.hyper_lr);
  hyper_.unflatten(flat);
  return k;
}

void Trainer::iterate() {
  const std::size_t k = sample_partition_index(config_.spec.chunk_ratios, schedule_rng_);
  const auto rows = sample_batch_prefix(data_, k, config_.batch_size, schedule_rng_);
  partition_step(k, rows);
  if (hyper_.has_learnable()) hyper_step();
  ++iteration_;
}

void Trainer::train(const TabularDataset* test, const std::function<void(const MetricsRow&)>& on_metrics) {
  bool emitted_last = false;
  while (iteration_ < config_.iterations) {
    iterate();
    emitted_last = false;
    if (config_.eval_every && iteration_ % config_.eval_every == 0) {
      if (on_metrics) on_metrics(metrics(test));
      emitted_last = true;
    }
  }
  if (!emitted_last && on_metrics) on_metrics(metrics(test));
}

EvalResult Trainer::evaluate(const Tensor& features, std::span<const int> labels, std::size_t level) const {
  return evaluate_model(model_, params_, hyper_, features, labels, level, config_.seed);
}

double Trainer::evaluate_lml() const { return pnet::evaluate_lml(model_, params_, hyper_, data_, config_.seed); }

MetricsRow Trainer::metrics(const TabularDataset* test) const {
  MetricsRow m;
  m.iteration = iteration_;
  m.lml = evaluate_lml();
  const std::size_t C = params_.chunks();
  const EvalResult tr = evaluate(data_.features, data_.labels, C);
  m.train_accuracy = tr.accuracy;
  m.train_loglik = tr.loglik / static_cast<double>(std::max<std::size_t>(1, tr.count));
  if (test) {
    const EvalResult te = evaluate(test->features, test->labels, C);
    m.test_accuracy = te.accuracy;
    m.test_loglik = te.loglik / static_cast<double>(std::max<std::size_t>(1, te.count));
  }
  m.hyper = hyper_.flatten();
  return m;
}

}  // namespace pnet
