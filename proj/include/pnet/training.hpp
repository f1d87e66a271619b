#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "pnet/data.hpp"
#include "pnet/hyper.hpp"
#include "pnet/model.hpp"
#include "pnet/optim.hpp"
#include "pnet/partition.hpp"

namespace pnet {

struct TrainingConfig {
  PartitionSpec spec;
  std::size_t batch_size = 256;
  std::size_t iterations = 10000;
  double lr = 1e-3;
  double hyper_lr = 1e-3;
  double weight_decay = 3e-4;  // base prior strength lambda
  double wd_exponent = 1.0;    // rho; wd_k = lambda / n_{1:k}^rho
  LrSchedule schedule = LrSchedule::kConstant;
  std::size_t eval_every = 0;  // 0: only at the end
  std::uint64_t seed = 0;

  void validate() const;
};

// k ~ Cat(u), 1-based.
std::size_t sample_partition_index(std::span<const double> u, Rng& rng);
// N_B row indices drawn uniformly with replacement from D_{1:k}.
std::vector<std::size_t> sample_batch_prefix(const ChunkedDataset& data, std::size_t k, std::size_t batch, Rng& rng);
// N_B row indices drawn uniformly with replacement from D_k alone.
std::vector<std::size_t> sample_batch_chunk(const ChunkedDataset& data, std::size_t k, std::size_t batch, Rng& rng);
double weight_decay_for(double lambda, std::size_t prefix_examples, double rho);

struct MetricsRow {
  std::size_t iteration = 0;
  double lml = 0;
  double train_accuracy = 0;
  double train_loglik = 0;  // mean per example
  double test_accuracy = 0;
  double test_loglik = 0;
  std::vector<Real> hyper;  // HyperParams::flatten()
};

struct EvalResult {
  double accuracy = 0;
  double loglik = 0;  // summed
  std::size_t count = 0;
};

class Trainer {
 public:
  Trainer(Model model, PartitionedParams params, HyperParams hyper, const ChunkedDataset& data, TrainingConfig config);

  // One partition update through subnetwork k on the given rows of D_{1:k}.
  void partition_step(std::size_t k, std::span<const std::size_t> rows);
  // One hyperparameter update on a batch from a chunk k >= 2 at level k - 1.
  // Returns the chunk used; 0 when nothing is learnable.
  std::size_t hyper_step();
  // partition_step on a scheduled k, then hyper_step.
  void iterate();
  // Runs the remaining iterations, calling `on_metrics` every eval_every
  // iterations and once at the end.
  void train(const TabularDataset* test, const std::function<void(const MetricsRow&)>& on_metrics);

  // Mean log-likelihood gradient of the batch w.r.t. psi at subnetwork `level`.
  std::vector<Real> hyper_gradient_on(std::size_t level, std::span<const std::size_t> rows, std::uint64_t noise_key);
  // Mean batch log-likelihood at `level` with the given noise key (train-mode relaxations).
  double batch_loglik(std::size_t level, std::span<const std::size_t> rows, std::uint64_t noise_key) const;

  EvalResult evaluate(const Tensor& features, std::span<const int> labels, std::size_t level) const;
  double evaluate_lml() const;
  MetricsRow metrics(const TabularDataset* test) const;

  const PartitionedParams& params() const { return params_; }
  PartitionedParams& mutable_params() { return params_; }
  const HyperParams& hyper() const { return hyper_; }
  HyperParams& mutable_hyper() { return hyper_; }
  const PerPartitionAdam& optimizer() const { return opt_; }
  const Adam& hyper_optimizer() const { return hyper_opt_; }
  const Model& model() const { return model_; }
  const TrainingConfig& config() const { return config_; }
  std::size_t iteration() const { return iteration_; }
  const std::vector<std::size_t>& partition_counts() const { return partition_counts_; }

 private:
  Model model_;
  PartitionedParams params_;
  HyperParams hyper_;
  const ChunkedDataset& data_;
  TrainingConfig config_;
  PerPartitionAdam opt_;
  Adam hyper_opt_;
  Rng schedule_rng_;
  Rng hyper_rng_;
  std::size_t iteration_ = 0;
  std::uint64_t noise_counter_ = 0;
  std::vector<std::size_t> partition_counts_;
};

// Full-dataset L_ML: sum over k >= 2 of the log-likelihood of D_k under
// subnetwork k - 1 in eval mode.
double evaluate_lml(const Model& model, const PartitionedParams& params, const HyperParams& hyper,
                    const ChunkedDataset& data, std::uint64_t seed = 0);

// Summed log-likelihood and accuracy of rows under subnetwork `level`, eval mode.
EvalResult evaluate_model(const Model& model, const PartitionedParams& params, const HyperParams& hyper,
                          const Tensor& features, std::span<const int> labels, std::size_t level,
                          std::uint64_t seed = 0);

}  // namespace pnet
