#pragma once

#include <vector>

#include "pnet/federated.hpp"

namespace testing {

// Plain federated averaging on an unpartitioned MLP: every client starts from
// the global weights, runs local SGD over its rows, and the server adds the
// mean delta. Uses the same client streams as the simulator.
inline std::vector<pnet::Tensor> fedavg_round(const pnet::Model& model, const std::vector<pnet::Tensor>& global,
                                              const pnet::TabularDataset& data,
                                              const std::vector<std::vector<std::size_t>>& shards,
                                              const pnet::FedConfig& config, std::size_t round) {
  using namespace pnet;
  std::vector<Tensor> sum;
  for (const Tensor& t : global) sum.emplace_back(t.shape());
  std::size_t participants = 0;
  for (std::size_t c = 0; c < shards.size(); ++c) {
    if (shards[c].empty()) continue;
    ++participants;
    std::vector<Tensor> w = global;
    Rng rng = client_stream(config.seed, round, c, 1);
    std::vector<std::size_t> order = shards[c];
    for (std::size_t e = 0; e < config.local_epochs; ++e) {
      rng.shuffle(order);
      for (std::size_t lo = 0; lo < order.size(); lo += config.local_batch) {
        const std::size_t hi = std::min(order.size(), lo + config.local_batch);
        const std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(lo),
                                             order.begin() + static_cast<std::ptrdiff_t>(hi));
        Tape tape;
        std::vector<Var> leaves;
        for (const Tensor& t : w) leaves.push_back(tape.leaf(t));
        std::vector<int> y;
        for (std::size_t r : batch) y.push_back(data.labels[r]);
        const Var logp = model.log_predict(leaves, HyperVars{}, HyperParams{}, tape.constant(gather(data.features, batch)),
                                           Mode::kTrain, rng);
        const Gradients g = backward(tape, scale(mean(pick(logp, y)), Real(-1)));
        for (std::size_t t = 0; t < w.size(); ++t) {
          const Tensor gt = g.of(leaves[t]);
          for (std::size_t i = 0; i < w[t].numel(); ++i) w[t][i] -= static_cast<Real>(config.local_lr) * gt[i];
        }
      }
    }
    for (std::size_t t = 0; t < w.size(); ++t)
      for (std::size_t i = 0; i < w[t].numel(); ++i) sum[t][i] += w[t][i] - global[t][i];
  }
  std::vector<Tensor> next = global;
  for (std::size_t t = 0; t < next.size(); ++t)
    for (std::size_t i = 0; i < next[t].numel(); ++i) next[t][i] += sum[t][i] / static_cast<Real>(participants);
  return next;
}

}  // namespace testing
