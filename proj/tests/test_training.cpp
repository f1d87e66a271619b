#include <cmath>

#include "doctest.h"
#include "helpers.hpp"
#include "pnet/training.hpp"

using namespace pnet;

namespace {

struct Setup {
  TabularDataset raw;
  ChunkedDataset data;
  Model model;
  PartitionedParams params;
  TrainingConfig config;
};

Setup make_setup(std::uint64_t seed, std::vector<double> u, std::size_t n = 200, std::vector<std::size_t> hidden = {16}) {
  Setup s;
  Rng rng = Rng::stream(seed, "test-data");
  s.raw = gen_input_selection(n, rng, 6, 3);
  s.data = chunk_split(s.raw, u, rng);
  s.model.mlp = {6, std::move(hidden), 2, Activation::kGelu};
  Rng prng = Rng::stream(seed, "test-init");
  const auto init = init_mlp(s.model.mlp, prng);
  const auto shapes = s.model.mlp.shapes();
  s.params = PartitionedParams(init, init, assign_random_weights(shapes, u, prng));
  s.config.spec = {u.size(), u, u};
  s.config.batch_size = 16;
  s.config.iterations = 50;
  s.config.seed = seed;
  return s;
}

HyperParams mask_hyper(std::size_t dim) {
  HyperParams hp;
  hp.mask_logits.assign(dim, 0.0);
  return hp;
}

}  // namespace

TEST_CASE("sample_partition_index") {
  Rng rng(1);
  const std::vector<double> one{1.0};
  for (int i = 0; i < 100; ++i) CHECK(sample_partition_index(one, rng) == 1);
  const std::vector<double> half{0.5, 0.5};
  const int n = 100000;
  int ones = 0;
  for (int i = 0; i < n; ++i) ones += sample_partition_index(half, rng) == 1;
  CHECK(std::abs(ones - n * 0.5) < 3 * std::sqrt(n * 0.25));
  const std::vector<double> u{0.7, 0.2, 0.1};
  std::vector<int> counts(3);
  for (int i = 0; i < n; ++i) ++counts[sample_partition_index(u, rng) - 1];
  for (int k = 0; k < 3; ++k) CHECK(std::abs(counts[k] - n * u[k]) < 4 * std::sqrt(n * u[k] * (1 - u[k])));
}

TEST_CASE("batch sampling") {
  Rng rng(2);
  Setup s = make_setup(1, {0.25, 0.25, 0.25, 0.25}, 40);
  SUBCASE("single-example prefix repeats it") {
    ChunkedDataset d = s.data;
    d.offsets = {0, 1, 40};
    for (std::size_t r : sample_batch_prefix(d, 1, 20, rng)) CHECK(r == 0);
  }
  SUBCASE("prefix rows are uniform over D_{1:k}") {
    const std::size_t draws = 100000, n = s.data.prefix_size(2);
    std::vector<int> hits(s.data.size());
    for (std::size_t r : sample_batch_prefix(s.data, 2, draws, rng)) ++hits[r];
    const double p = 1.0 / static_cast<double>(n), sd = std::sqrt(draws * p * (1 - p));
    for (std::size_t i = 0; i < s.data.size(); ++i) {
      if (i < n)
        CHECK(std::abs(hits[i] - draws * p) < 4 * sd);
      else
        CHECK(hits[i] == 0);
    }
  }
  SUBCASE("chunk rows stay inside D_k") {
    for (std::size_t r : sample_batch_chunk(s.data, 3, 1000, rng)) {
      CHECK(r >= s.data.offsets[2]);
      CHECK(r < s.data.offsets[3]);
    }
  }
  CHECK_THROWS_AS(sample_batch_prefix(s.data, 0, 4, rng), std::out_of_range);
  CHECK_THROWS_AS(sample_batch_chunk(s.data, 5, 4, rng), std::out_of_range);
}

TEST_CASE("weight decay scaling") {
  const std::vector<double> u{0.8, 0.1, 0.1};
  const auto sizes = largest_remainder(1000, u);
  std::size_t prefix = 0;
  const double expected[] = {3.75e-7, 3e-4 / 900, 3e-7};
  double previous = 1;
  for (std::size_t k = 0; k < 3; ++k) {
    prefix += sizes[k];
    const double wd = weight_decay_for(3e-4, prefix, 1.0);
    CHECK(wd == doctest::Approx(expected[k]).epsilon(1e-12));
    CHECK(wd <= previous);
    previous = wd;
  }
  CHECK(weight_decay_for(3e-4, 900, 1.0) == doctest::Approx(3.33e-7).epsilon(1e-3));
  CHECK(weight_decay_for(1.0, 400, 0.5) == doctest::Approx(0.05));
  CHECK_THROWS_AS(weight_decay_for(1.0, 0, 1.0), std::invalid_argument);
  TrainingConfig c;
  c.wd_exponent = 0.7;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("partition_step") {
  Setup s = make_setup(3, {0.5, 0.3, 0.2});
  s.config.weight_decay = 0;
  Trainer tr(s.model, s.params, HyperParams{}, s.data, s.config);
  Rng rng(4);
  const std::size_t k = 2;
  const auto rows = sample_batch_prefix(s.data, k, 16, rng);

  // Independent gradient of the same loss.
  Tape tape;
  const MaterializedParams mp = materialize(tape, s.params, k, true);
  const HyperVars hv = hyper_vars(tape, HyperParams{}, false);
  Rng noise(0);
  std::vector<int> y;
  for (std::size_t r : rows) y.push_back(s.data.labels[r]);
  const Var logp = s.model.log_predict(mp.effective, hv, HyperParams{}, tape.constant(gather(s.data.features, rows)),
                                       Mode::kTrain, noise);
  const Gradients g = backward(tape, scale(mean(pick(logp, y)), -1.0));

  tr.partition_step(k, rows);
  const auto& after = tr.params();
  const double lr = s.config.lr, eps = 1e-8;
  for (std::size_t t = 0; t < after.num_tensors(); ++t) {
    const Tensor grad = g.of(mp.values[t]);
    for (std::size_t i = 0; i < after.values[t].numel(); ++i) {
      const Real before = s.params.values[t][i];
      if (after.assignment.layers[t][i] != k) {
        CHECK(after.values[t][i] == before);
      } else {
        // First Adam step: m_hat = g, v_hat = g^2.
        const double gi = grad[i];
        CHECK(after.values[t][i] == doctest::Approx(before - lr * gi / (std::abs(gi) + eps)).epsilon(1e-12));
      }
    }
  }
  CHECK(tr.optimizer().steps(1) == 0);
  CHECK(tr.optimizer().steps(2) == 1);
  CHECK(tr.optimizer().steps(3) == 0);
  for (std::size_t t = 0; t < after.num_tensors(); ++t)
    for (std::size_t i = 0; i < after.values[t].numel(); ++i)
      if (after.assignment.layers[t][i] != k) {
        CHECK(tr.optimizer().m()[t][i] == 0.0);
        CHECK(tr.optimizer().v()[t][i] == 0.0);
      }
  CHECK_THROWS_AS(tr.partition_step(4, rows), std::out_of_range);
  const std::vector<std::size_t> outside{s.data.prefix_size(1)};
  CHECK_THROWS_AS(tr.partition_step(1, outside), std::out_of_range);
}

TEST_CASE("weight decay pulls toward defaults") {
  Setup s = make_setup(5, {0.5, 0.5});
  for (auto& t : s.params.defaults) t = Tensor(t.shape());
  s.config.weight_decay = 1e3;  // wd = 1e3 / n_{1:1}
  Trainer tr(s.model, s.params, HyperParams{}, s.data, s.config);
  const std::vector<std::size_t> rows{0, 1};
  // Same step without decay; the difference is exactly lr * wd * (w - 0).
  TrainingConfig plain = s.config;
  plain.weight_decay = 0;
  Trainer ref(s.model, s.params, HyperParams{}, s.data, plain);
  tr.partition_step(1, rows);
  ref.partition_step(1, rows);
  const double wd = 1e3 / static_cast<double>(s.data.prefix_size(1));
  for (std::size_t t = 0; t < s.params.num_tensors(); ++t)
    for (std::size_t i = 0; i < s.params.values[t].numel(); ++i) {
      const Real w0 = s.params.values[t][i];
      const Real expect = ref.params().values[t][i] - s.config.lr * wd * (s.params.assignment.layers[t][i] == 1 ? w0 : 0);
      CHECK(tr.params().values[t][i] == doctest::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("hyper_step") {
  Setup s = make_setup(6, {0.5, 0.5});
  Trainer tr(s.model, s.params, mask_hyper(6), s.data, s.config);
  const auto before = tr.params().values;
  const auto before_hyper = tr.hyper().flatten();
  for (int i = 0; i < 20; ++i) CHECK(tr.hyper_step() == 2);
  for (std::size_t t = 0; t < before.size(); ++t) CHECK(tr.params().values[t] == before[t]);
  for (std::size_t j = 1; j <= 2; ++j) CHECK(tr.optimizer().steps(j) == 0);
  CHECK(tr.hyper().flatten() != before_hyper);
  CHECK(tr.hyper_optimizer().steps() == 20);

  SUBCASE("nothing learnable is a no-op") {
    Trainer plain(s.model, s.params, HyperParams{}, s.data, s.config);
    CHECK(plain.hyper_step() == 0);
  }
  SUBCASE("fewer than two chunks") {
    Setup one = make_setup(6, {1.0});
    CHECK_THROWS_WITH_AS(Trainer(one.model, one.params, mask_hyper(6), one.data, one.config),
                         "hyperparameter optimization requires >= 2 chunks", std::invalid_argument);
    Trainer plain(one.model, one.params, HyperParams{}, one.data, one.config);
    CHECK_THROWS_AS(plain.hyper_step(), std::invalid_argument);
  }
  SUBCASE("chunk frequencies follow the renormalized tail") {
    Setup three = make_setup(7, {0.5, 0.3, 0.2}, 60);
    three.config.batch_size = 1;
    Trainer t3(three.model, three.params, mask_hyper(6), three.data, three.config);
    const int n = 2000;
    int twos = 0;
    for (int i = 0; i < n; ++i) twos += t3.hyper_step() == 2;
    CHECK(std::abs(twos - n * 0.6) < 4 * std::sqrt(n * 0.24));
  }
}

TEST_CASE("hyper gradient matches central differences") {
  Setup s = make_setup(8, {0.5, 0.5});
  HyperParams hp = mask_hyper(6);
  hp.dropout_logits = {std::vector<Real>(16, 1.0)};
  Rng rng(9);
  for (auto& v : hp.mask_logits) v = rng.uniform(-1, 1);
  for (auto& v : hp.dropout_logits[0]) v = rng.uniform(0, 2);
  Trainer tr(s.model, s.params, hp, s.data, s.config);
  const auto rows = sample_batch_chunk(s.data, 2, 32, rng);
  const auto g = tr.hyper_gradient_on(1, rows, 17);
  const auto flat = hp.flatten();
  const double h = 1e-5;
  double err = 0;
  for (std::size_t i = 0; i < flat.size(); ++i) {
    auto p = flat, m = flat;
    p[i] += h;
    m[i] -= h;
    tr.mutable_hyper().unflatten(p);
    const double fp = tr.batch_loglik(1, rows, 17);
    tr.mutable_hyper().unflatten(m);
    const double fm = tr.batch_loglik(1, rows, 17);
    const double fd = (fp - fm) / (2 * h);
    err = std::max(err, std::abs(fd - g[i]) / std::max(1.0, std::abs(fd)));
  }
  CHECK(err < 1e-5);
}

TEST_CASE("hyper steps on frozen weights raise the batch log-likelihood") {
  int improved = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Setup s = make_setup(100 + seed, {0.5, 0.5}, 200, {8});
    s.config.hyper_lr = 1e-2;
    s.config.batch_size = 32;
    Trainer tr(s.model, s.params, mask_hyper(6), s.data, s.config);
    std::vector<std::size_t> rows(s.data.chunk_size(2));
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = s.data.offsets[1] + i;
    // Eval mode: deterministic full-chunk log-likelihood.
    const auto ll = [&] {
      const Tensor x = gather(s.data.features, rows);
      std::vector<int> y;
      for (std::size_t r : rows) y.push_back(s.data.labels[r]);
      return tr.evaluate(x, y, 1).loglik;
    };
    const double before = ll();
    for (int i = 0; i < 100; ++i) tr.hyper_step();
    improved += ll() > before;
  }
  CHECK(improved >= 90);
}

TEST_CASE("evaluate_lml") {
  SUBCASE("uniform predictor") {
    // Zero output layer gives uniform class probabilities.
    Setup s = make_setup(10, {0.5, 0.5}, 200);
    s.model.mlp.classes = 10;
    Rng prng(1);
    auto init = init_mlp(s.model.mlp, prng);
    init[2] = Tensor(init[2].shape());
    init[3] = Tensor(init[3].shape());
    const auto shapes = s.model.mlp.shapes();
    const std::vector<double> u{0.5, 0.5};
    PartitionedParams pp(init, init, assign_random_weights(shapes, u, prng));
    ChunkedDataset d = s.data;
    d.offsets = {0, 100, 200};
    CHECK(evaluate_lml(s.model, pp, HyperParams{}, d) == doctest::Approx(100 * std::log(0.1)).epsilon(1e-12));
    CHECK(evaluate_lml(s.model, pp, HyperParams{}, d) == doctest::Approx(-230.2585).epsilon(1e-6));
  }
  SUBCASE("confident correct predictor is near zero and never positive") {
    Setup s = make_setup(11, {0.5, 0.5}, 100);
    for (auto& y : s.data.labels) y = 1;
    auto init = s.params.values;
    for (std::size_t t = 0; t < 4; ++t) init[t] = Tensor(init[t].shape());
    init[3][1] = 100;  // huge logit for class 1
    PartitionedParams pp(init, init, s.params.assignment);
    const double lml = evaluate_lml(s.model, pp, HyperParams{}, s.data);
    CHECK(lml <= 0);
    CHECK(lml > -1e-30);
    CHECK(evaluate_lml(s.model, s.params, HyperParams{}, s.data) <= 0);
  }
  SUBCASE("equals the chunk-weighted expectation of the stochastic objective") {
    Setup s = make_setup(12, {0.4, 0.35, 0.25}, 60);
    Trainer tr(s.model, s.params, HyperParams{}, s.data, s.config);
    for (int i = 0; i < 20; ++i) tr.iterate();
    // E over k ~ u_{2:C}/Z and single-row batches of D_k, reweighted by n_k Z / u_k.
    const auto& u = s.config.spec.chunk_ratios;
    const double z = u[1] + u[2];
    double expectation = 0;
    for (std::size_t k = 2; k <= 3; ++k) {
      double chunk_mean = 0;
      for (std::size_t r = s.data.offsets[k - 1]; r < s.data.offsets[k]; ++r) {
        const std::vector<std::size_t> one{r};
        chunk_mean += tr.batch_loglik(k - 1, one, 0) / static_cast<double>(s.data.chunk_size(k));
      }
      const double pk = u[k - 1] / z;
      expectation += pk * chunk_mean * (static_cast<double>(s.data.chunk_size(k)) / pk);
    }
    CHECK(expectation == doctest::Approx(tr.evaluate_lml()).epsilon(1e-12));
  }
}

TEST_CASE("train") {
  Setup s = make_setup(13, {0.5, 0.3, 0.2});
  s.config.eval_every = 10;
  HyperParams hp = mask_hyper(6);
  const auto run = [&] {
    std::vector<MetricsRow> rows;
    Trainer tr(s.model, s.params, hp, s.data, s.config);
    tr.train(&s.raw, [&](const MetricsRow& m) { rows.push_back(m); });
    return std::pair{rows, tr.partition_counts()};
  };
  const auto [a, counts] = run();
  const auto [b, counts_b] = run();
  REQUIRE(a.size() == 5);
  CHECK(a.back().iteration == 50);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].lml == b[i].lml);
    CHECK(a[i].test_loglik == b[i].test_loglik);
    CHECK(a[i].hyper == b[i].hyper);
  }
  CHECK(counts[0] + counts[1] + counts[2] == 50);
  SUBCASE("no hyper-modules is plain partitioned training") {
    Trainer tr(s.model, s.params, HyperParams{}, s.data, s.config);
    tr.train(nullptr, {});
    CHECK(tr.hyper_optimizer().steps() == 0);
    CHECK(tr.iteration() == 50);
  }
}

TEST_CASE("chunk-frequency law") {
  Setup s = make_setup(14, {0.7, 0.2, 0.1}, 100, {4});
  s.config.batch_size = 1;
  s.config.iterations = 10000;
  Trainer tr(s.model, s.params, HyperParams{}, s.data, s.config);
  for (std::size_t i = 0; i < 10000; ++i) tr.iterate();
  const double u[] = {0.7, 0.2, 0.1};
  for (std::size_t k = 0; k < 3; ++k)
    CHECK(std::abs(tr.partition_counts()[k] - 1e4 * u[k]) < 4 * std::sqrt(1e4 * u[k] * (1 - u[k])));
}

TEST_CASE("trainer validation") {
  Setup s = make_setup(15, {0.5, 0.5});
  ChunkedDataset empty = s.data;
  empty.offsets = {0, 0, s.data.size()};
  CHECK_THROWS_AS(Trainer(s.model, s.params, HyperParams{}, empty, s.config), std::invalid_argument);
  TrainingConfig bad = s.config;
  bad.spec = {3, {0.3, 0.3, 0.4}, {0.3, 0.3, 0.4}};
  CHECK_THROWS_AS(Trainer(s.model, s.params, HyperParams{}, s.data, bad), std::invalid_argument);
  bad = s.config;
  bad.batch_size = 0;
  CHECK_THROWS_AS(Trainer(s.model, s.params, HyperParams{}, s.data, bad), std::invalid_argument);
}
