#pragma once

#include <cstdint>
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

enum class ServerOptimizer { kAdam, kSgd };

struct FedConfig {
  std::size_t n_clients = 100;
  std::vector<double> chunk_ratios{0.7, 0.2, 0.1};  // clients per chunk
  std::vector<double> param_ratios{0.7, 0.2, 0.1};
  std::size_t local_epochs = 1;
  double local_lr = 5e-2;
  std::size_t local_batch = 32;
  ServerOptimizer server_optimizer = ServerOptimizer::kAdam;
  double server_lr = 1e-3;
  double server_hyper_lr = 3e-3;
  std::size_t hyper_batch = 0;  // 0: full client dataset
  std::size_t rounds = 50;
  std::size_t eval_every = 1;
  double alpha = 0.1;
  double participation = 1.0;
  bool node_partitioning = false;
  std::uint64_t seed = 0;

  std::size_t chunks() const { return chunk_ratios.size(); }
  void validate() const;
};

// Per-client example indices. Quotas are n / n_clients (the first n % n_clients
// clients get one more). Each client draws class proportions p ~ Dirichlet(alpha)
// and fills its quota one example at a time: class c ~ p restricted to the
// classes that still have examples; if that mass is zero the draw falls back to
// the remaining pool, weighted by pool size. Pools are shuffled up front and
// consumed without replacement.
std::vector<std::vector<std::size_t>> shard_label_skew(std::span<const int> labels, std::size_t classes,
                                                       std::size_t n_clients, double alpha, Rng& rng);
// 1-based bin of an angle over 10 equal bins of [-pi, pi]; pi itself joins bin 10.
std::size_t rotation_bin(double angle);
std::vector<std::vector<std::size_t>> shard_rotation_bins(std::span<const Real> angles, std::size_t n_clients,
                                                          double alpha, Rng& rng);
// Exactly largest-remainder(n_clients * ratio_k) clients per chunk, shuffled.
std::vector<std::size_t> assign_chunks(std::size_t n_clients, std::span<const double> chunk_ratios, Rng& rng);

struct Client {
  std::size_t id = 0;
  std::size_t chunk = 1;
  std::vector<std::size_t> rows;  // into the shared training set
};

struct PartitionDelta {
  std::size_t partition = 0;
  std::vector<Real> values;  // partition elements in tensor-major element order
};

struct ClientUpdate {
  std::size_t client_id = 0;
  std::size_t chunk = 1;
  std::vector<PartitionDelta> deltas;  // partitions chunk..C, ascending
  std::vector<Real> hypergradient;     // d mean loglik / d psi; empty for chunk 1
  std::size_t uploaded = 0;            // parameter count sent
};

struct ServerState {
  PartitionedParams params;
  HyperParams hyper;
  PerPartitionAdam model_opt;
  Adam hyper_opt;
  std::size_t round = 0;
};
ServerState make_server(PartitionedParams params, HyperParams hyper);

// Values of partition j (tensor-major) and the inverse scatter.
std::vector<Real> partition_values(const PartitionedParams& p, std::size_t j);
void add_to_partition(PartitionedParams& p, std::size_t j, std::span<const Real> delta, Real scale);

// Stream for the local run of `client` on partition j in `round`.
Rng client_stream(std::uint64_t seed, std::size_t round, std::size_t client, std::size_t partition);

// Local SGD on partition j through materialize(., j): `epochs` passes over
// `rows` in shuffled batches of `batch`. Returns the updated parameters.
PartitionedParams local_sgd(const Model& model, PartitionedParams params, const HyperParams& hyper,
                            const TabularDataset& data, std::span<const std::size_t> rows, std::size_t j,
                            std::size_t epochs, std::size_t batch, double lr, Rng& rng);

ClientUpdate client_update(const Model& model, const ServerState& server, const Client& client,
                           const TabularDataset& data, const FedConfig& config);

struct RoundReport {
  std::size_t participants = 0;
  std::size_t uploaded = 0;
  std::size_t possible = 0;  // participants * total parameter count
  double upload_fraction() const { return possible ? static_cast<double>(uploaded) / static_cast<double>(possible) : 0; }
};

// Aggregates updates in ascending client-id order regardless of input order.
RoundReport server_round(ServerState& state, std::vector<ClientUpdate> updates, const FedConfig& config);

double expected_upload_fraction(std::span<const double> chunk_ratios, std::span<const double> param_ratios);

struct FedRow {
  std::size_t round = 0;
  double eval_accuracy = 0;
  double moving_avg_accuracy = 0;  // mean of the last <= 10 evaluations
  double upload_fraction = 0;
  std::vector<Real> hyper;
};

struct FedProblem {
  Model model;
  HyperParams hyper;
  const TabularDataset* train = nullptr;
  const TabularDataset* test = nullptr;
  std::vector<std::vector<std::size_t>> shards;  // one per client
};

struct FedResult {
  std::vector<FedRow> rows;
  double initial_accuracy = 0;
  ServerState final_state;
};

FedResult run_federated(const FedProblem& problem, const FedConfig& config,
                        const std::function<void(const FedRow&)>& on_row = {});

}  // namespace pnet
