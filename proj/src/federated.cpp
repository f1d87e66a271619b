#include "pnet/federated.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>

#include "pnet/training.hpp"

namespace pnet {

void FedConfig::validate() const {
  validate_ratios(chunk_ratios, "client chunk ratios");
  validate_ratios(param_ratios, "param ratios");
  if (chunk_ratios.size() != param_ratios.size())
    throw std::invalid_argument("fed: chunk and param ratios need the same length");
  if (n_clients < chunks()) throw std::invalid_argument("fed: n_clients must be >= C");
  if (local_batch < 1) throw std::invalid_argument("fed: local_batch must be >= 1");
  if (!(local_lr >= 0 && server_lr >= 0 && server_hyper_lr >= 0))
    throw std::invalid_argument("fed: learning rates must be non-negative");
  if (!(alpha > 0)) throw std::invalid_argument("fed: alpha must be positive");
  if (!(participation > 0 && participation <= 1)) throw std::invalid_argument("fed: participation must be in (0, 1]");
  if (rounds < 1) throw std::invalid_argument("fed: rounds must be >= 1");
}

std::vector<std::vector<std::size_t>> shard_label_skew(std::span<const int> labels, std::size_t classes,
                                                       std::size_t n_clients, double alpha, Rng& rng) {
  if (!(alpha > 0)) throw std::invalid_argument("shard_label_skew: alpha must be positive");
  if (n_clients == 0) throw std::invalid_argument("shard_label_skew: need at least one client");
  const std::size_t n = labels.size();
  std::vector<std::vector<std::size_t>> pools(classes);
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes)
      throw std::invalid_argument("shard_label_skew: label out of range");
    pools[static_cast<std::size_t>(labels[i])].push_back(i);
  }
  for (auto& p : pools) rng.shuffle(p);
  std::vector<std::vector<std::size_t>> shards(n_clients);
  const std::vector<double> conc(classes, alpha);
  std::vector<double> w(classes);
  for (std::size_t c = 0; c < n_clients; ++c) {
    const std::size_t quota = n / n_clients + (c < n % n_clients ? 1 : 0);
    const std::vector<double> p = rng.dirichlet(conc);
    for (std::size_t s = 0; s < quota; ++s) {
      double mass = 0;
      for (std::size_t k = 0; k < classes; ++k) mass += w[k] = pools[k].empty() ? 0.0 : p[k];
      if (!(mass > 0))
        for (std::size_t k = 0; k < classes; ++k) w[k] = static_cast<double>(pools[k].size());
      const std::size_t k = rng.categorical(w);
      shards[c].push_back(pools[k].back());
      pools[k].pop_back();
    }
  }
  return shards;
}

std::size_t rotation_bin(double angle) {
  const double width = 2 * std::numbers::pi / 10;
  const double b = std::floor((angle + std::numbers::pi) / width);
  return static_cast<std::size_t>(std::clamp(b, 0.0, 9.0)) + 1;
}

std::vector<std::vector<std::size_t>> shard_rotation_bins(std::span<const Real> angles, std::size_t n_clients,
                                                          double alpha, Rng& rng) {
  std::vector<int> bins(angles.size());
  for (std::size_t i = 0; i < angles.size(); ++i) bins[i] = static_cast<int>(rotation_bin(angles[i])) - 1;
  return shard_label_skew(bins, 10, n_clients, alpha, rng);
}

std::vector<std::size_t> assign_chunks(std::size_t n_clients, std::span<const double> chunk_ratios, Rng& rng) {
  validate_ratios(chunk_ratios, "client chunk ratios");
  const auto counts = largest_remainder(n_clients, chunk_ratios);
  std::vector<std::size_t> chunk;
  for (std::size_t k = 0; k < counts.size(); ++k) chunk.insert(chunk.end(), counts[k], k + 1);
  rng.shuffle(chunk);
  return chunk;
}

ServerState make_server(PartitionedParams params, HyperParams hyper) {
  ServerState s;
  s.model_opt = PerPartitionAdam(params);
  s.hyper_opt = Adam(hyper.flatten().size());
  s.params = std::move(params);
  s.hyper = std::move(hyper);
  return s;
}

std::vector<Real> partition_values(const PartitionedParams& p, std::size_t j) {
  std::vector<Real> out;
  for (std::size_t t = 0; t < p.num_tensors(); ++t) {
    const auto& a = p.assignment.layers[t];
    for (std::size_t i = 0; i < a.size(); ++i)
      if (a[i] == j) out.push_back(p.values[t][i]);
  }
  return out;
}

void add_to_partition(PartitionedParams& p, std::size_t j, std::span<const Real> delta, Real scale) {
  std::size_t at = 0;
  for (std::size_t t = 0; t < p.num_tensors(); ++t) {
    const auto& a = p.assignment.layers[t];
    for (std::size_t i = 0; i < a.size(); ++i)
      if (a[i] == j) {
        if (at >= delta.size()) throw std::invalid_argument("add_to_partition: delta too short");
        p.values[t][i] += scale * delta[at++];
      }
  }
  if (at != delta.size()) throw std::invalid_argument("add_to_partition: delta too long");
}

Rng client_stream(std::uint64_t seed, std::size_t round, std::size_t client, std::size_t partition) {
  return Rng::stream(mix64(seed ^ mix64(round)) ^ partition, "federated", client);
}

PartitionedParams local_sgd(const Model& model, PartitionedParams params, const HyperParams& hyper,
                            const TabularDataset& data, std::span<const std::size_t> rows, std::size_t j,
                            std::size_t epochs, std::size_t batch, double lr, Rng& rng) {
  if (rows.empty()) throw std::invalid_argument("local_sgd: empty client dataset");
  std::vector<std::size_t> order(rows.begin(), rows.end());
  for (std::size_t e = 0; e < epochs; ++e) {
    rng.shuffle(order);
    for (std::size_t lo = 0; lo < order.size(); lo += batch) {
      const std::span<const std::size_t> b(order.data() + lo, std::min(batch, order.size() - lo));
      Tape tape;
      const MaterializedParams mp = materialize(tape, params, j, true);
      const HyperVars hv = hyper_vars(tape, hyper, false);
      std::vector<int> y;
      for (std::size_t r : b) y.push_back(data.labels[r]);
      const Var x = tape.constant(gather(data.features, b));
      const Var logp = model.log_predict(mp.effective, hv, hyper, x, Mode::kTrain, rng);
      const Gradients g = backward(tape, scale(mean(pick(logp, y)), Real(-1)));
      for (std::size_t t = 0; t < params.num_tensors(); ++t) {
        const Tensor gt = g.of(mp.values[t]);
        const auto& a = params.assignment.layers[t];
        auto w = params.values[t].values();
        for (std::size_t i = 0; i < w.size(); ++i)
          if (a[i] == j) w[i] -= static_cast<Real>(lr) * gt[i];
      }
    }
  }
  return params;
}

ClientUpdate client_update(const Model& model, const ServerState& server, const Client& client,
                           const TabularDataset& data, const FedConfig& config) {
  const std::size_t C = server.params.chunks();
  if (client.chunk < 1 || client.chunk > C) throw std::out_of_range("client_update: chunk out of range");
  if (client.rows.empty()) throw std::invalid_argument("client_update: empty client dataset");
  ClientUpdate u;
  u.client_id = client.id;
  u.chunk = client.chunk;
  PartitionedParams updated = server.params;
  for (std::size_t j = client.chunk; j <= C; ++j) {
    Rng rng = client_stream(config.seed, server.round, client.id, j);
    const PartitionedParams local = local_sgd(model, server.params, server.hyper, data, client.rows, j,
                                              config.local_epochs, config.local_batch, config.local_lr, rng);
    PartitionDelta d;
    d.partition = j;
    d.values = partition_values(local, j);
    const std::vector<Real> before = partition_values(server.params, j);
    for (std::size_t i = 0; i < d.values.size(); ++i) d.values[i] -= before[i];
    u.uploaded += d.values.size();
    add_to_partition(updated, j, d.values, Real(1));
    u.deltas.push_back(std::move(d));
  }
  if (client.chunk >= 2 && server.hyper.has_learnable()) {
    std::vector<std::size_t> rows = client.rows;
    Rng rng = client_stream(config.seed, server.round, client.id, 0);
    if (config.hyper_batch && config.hyper_batch < rows.size()) {
      rng.shuffle(rows);
      rows.resize(config.hyper_batch);
    }
    Tape tape;
    const MaterializedParams mp = materialize(tape, updated, client.chunk - 1, false);
    const HyperVars hv = hyper_vars(tape, server.hyper, true);
    std::vector<int> y;
    for (std::size_t r : rows) y.push_back(data.labels[r]);
    const Var x = tape.constant(gather(data.features, rows));
    const Var ll = mean(pick(model.log_predict(mp.effective, hv, server.hyper, x, Mode::kTrain, rng), y));
    u.hypergradient = hyper_gradient(backward(tape, ll), hv, server.hyper);
  }
  return u;
}

RoundReport server_round(ServerState& state, std::vector<ClientUpdate> updates, const FedConfig& config) {
  if (updates.empty()) throw std::invalid_argument("server_round: no participants");
  std::sort(updates.begin(), updates.end(),
            [](const ClientUpdate& a, const ClientUpdate& b) { return a.client_id < b.client_id; });
  const std::size_t C = state.params.chunks();
  RoundReport rep;
  rep.participants = updates.size();
  rep.possible = updates.size() * state.params.assignment.total();
  std::vector<std::vector<Real>> sum(C + 1);
  std::vector<std::size_t> count(C + 1, 0);
  std::vector<Real> hyper_sum;
  std::size_t hyper_count = 0;
  for (const ClientUpdate& u : updates) {
    rep.uploaded += u.uploaded;
    for (const PartitionDelta& d : u.deltas) {
      if (d.partition < u.chunk || d.partition > C)
        throw std::invalid_argument("server_round: upload contains a partition below the client's chunk");
      auto& s = sum[d.partition];
      if (s.empty()) s.assign(d.values.size(), Real(0));
      if (s.size() != d.values.size()) throw std::invalid_argument("server_round: delta size mismatch");
      for (std::size_t i = 0; i < s.size(); ++i) s[i] += d.values[i];
      ++count[d.partition];
    }
    if (!u.hypergradient.empty()) {
      if (hyper_sum.empty()) hyper_sum.assign(u.hypergradient.size(), Real(0));
      for (std::size_t i = 0; i < hyper_sum.size(); ++i) hyper_sum[i] += u.hypergradient[i];
      ++hyper_count;
    }
  }
  for (std::size_t j = 1; j <= C; ++j) {
    if (!count[j]) continue;
    std::vector<Real> avg = sum[j];
    for (Real& v : avg) v /= static_cast<Real>(count[j]);
    if (config.server_optimizer == ServerOptimizer::kSgd) {
      add_to_partition(state.params, j, avg, static_cast<Real>(config.server_lr));
    } else {
      std::vector<Tensor> grads;
      for (const Tensor& t : state.params.values) grads.emplace_back(t.shape());
      std::size_t at = 0;
      for (std::size_t t = 0; t < grads.size(); ++t) {
        const auto& a = state.params.assignment.layers[t];
        for (std::size_t i = 0; i < a.size(); ++i)
          if (a[i] == j) grads[t][i] = -avg[at++];
      }
      state.model_opt.step(state.params, grads, j, config.server_lr, 0.0);
    }
  }
  if (hyper_count) {
    std::vector<Real> g(hyper_sum.size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = -hyper_sum[i] / static_cast<Real>(hyper_count);
    std::vector<Real> flat = state.hyper.flatten();
    state.hyper_opt.step(flat, g, config.server_hyper_lr);
    state.hyper.unflatten(flat);
  }
  ++state.round;
  return rep;
}

double expected_upload_fraction(std::span<const double> chunk_ratios, std::span<const double> param_ratios) {
  validate_ratios(chunk_ratios, "client chunk ratios");
  validate_ratios(param_ratios, "param ratios");
  if (chunk_ratios.size() != param_ratios.size())
    throw std::invalid_argument("expected_upload_fraction: ratio lengths differ");
  const std::size_t C = chunk_ratios.size();
  double total = 0;
  for (std::size_t k = 0; k < C; ++k) {
    double tail = 0;
    for (std::size_t j = k; j < C; ++j) tail += param_ratios[j];
    total += chunk_ratios[k] * tail;
  }
  return total;
}

FedResult run_federated(const FedProblem& problem, const FedConfig& config,
                        const std::function<void(const FedRow&)>& on_row) {
  config.validate();
  if (!problem.train || !problem.test) throw std::invalid_argument("run_federated: train and test data required");
  if (problem.shards.size() != config.n_clients)
    throw std::invalid_argument("run_federated: need one shard per client");
  if (problem.hyper.has_learnable() && config.chunks() < 2)
    throw std::invalid_argument("hyperparameter optimization requires >= 2 chunks");
  const std::size_t C = config.chunks();
  Rng prng = Rng::stream(config.seed, "partition");
  const std::vector<Tensor> init = init_mlp(problem.model.mlp, prng);
  const std::vector<Shape> shapes = problem.model.mlp.shapes();
  PartitionAssignment asg = config.node_partitioning ? assign_nodes(shapes, config.param_ratios)
                                                     : assign_random_weights(shapes, config.param_ratios, prng);
  FedResult res;
  res.final_state = make_server(PartitionedParams(init, init, std::move(asg)), problem.hyper);
  ServerState& state = res.final_state;

  Rng crng = Rng::stream(config.seed, "federated");
  const std::vector<std::size_t> chunk_of = assign_chunks(config.n_clients, config.chunk_ratios, crng);
  std::vector<Client> clients(config.n_clients);
  for (std::size_t i = 0; i < config.n_clients; ++i) clients[i] = {i, chunk_of[i], problem.shards[i]};

  const auto eval_acc = [&] {
    return evaluate_model(problem.model, state.params, state.hyper, problem.test->features, problem.test->labels, C,
                          config.seed)
        .accuracy;
  };
  res.initial_accuracy = eval_acc();
  std::vector<double> history;
  const std::size_t per_round =
      std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(config.participation * config.n_clients)));
  for (std::size_t r = 0; r < config.rounds; ++r) {
    std::vector<std::size_t> ids(config.n_clients);
    std::iota(ids.begin(), ids.end(), 0);
    if (per_round < config.n_clients) {
      Rng sel = Rng::stream(config.seed, "federated-participation", r);
      sel.shuffle(ids);
      ids.resize(per_round);
    }
    std::vector<ClientUpdate> updates;
    for (std::size_t id : ids) {
      if (clients[id].rows.empty()) continue;
      updates.push_back(client_update(problem.model, state, clients[id], *problem.train, config));
    }
    const RoundReport rep = server_round(state, std::move(updates), config);
    if ((r + 1) % std::max<std::size_t>(1, config.eval_every) == 0 || r + 1 == config.rounds) {
      FedRow row;
      row.round = r + 1;
      row.eval_accuracy = eval_acc();
      history.push_back(row.eval_accuracy);
      const std::size_t w = std::min<std::size_t>(10, history.size());
      row.moving_avg_accuracy =
          std::accumulate(history.end() - static_cast<std::ptrdiff_t>(w), history.end(), 0.0) / static_cast<double>(w);
      row.upload_fraction = rep.upload_fraction();
      row.hyper = state.hyper.flatten();
      if (on_row) on_row(row);
      res.rows.push_back(std::move(row));
    }
  }
  return res;
}

}  // namespace pnet
