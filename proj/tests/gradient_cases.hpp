#pragma once

#include <array>
#include <string>
#include <vector>

#include "helpers.hpp"
#include "pnet/hyper.hpp"
#include "pnet/model.hpp"
#include "warp_helpers.hpp"

namespace testing {

struct GradCase {
  std::string name;
  pnet::TapeFunction f;
  pnet::Tensor point;
};

// Every autodiff primitive, then each hypergradient path through a small MLP.
inline std::vector<GradCase> gradient_cases(std::uint64_t seed) {
  using namespace pnet;
  Rng rng(seed);
  std::vector<GradCase> out;
  const auto part = [](Var x, std::size_t lo, const Shape& s) { return reshape(slice(x, 0, lo, lo + shape_numel(s)), s); };

  out.push_back({"add/sub/mul",
                 [=](Tape&, Var x) {
                   Var a = part(x, 0, {2, 3}), b = part(x, 6, {2, 3});
                   return add(weighted_sum(add(a, b), 1), add(weighted_sum(sub(a, b), 2), weighted_sum(mul(a, b), 3)));
                 },
                 random_tensor({12}, rng)});
  out.push_back({"scale/add_bias",
                 [=](Tape&, Var x) { return weighted_sum(add_bias(scale(part(x, 0, {3, 4}), -1.7), part(x, 12, {4}))); },
                 random_tensor({16}, rng)});
  out.push_back({"matmul", [=](Tape&, Var x) { return weighted_sum(matmul(part(x, 0, {3, 4}), part(x, 12, {4, 2}))); },
                 random_tensor({20}, rng)});
  out.push_back({"linear",
                 [=](Tape&, Var x) { return weighted_sum(linear(part(x, 0, {3, 5}), part(x, 15, {2, 5}), part(x, 25, {2}))); },
                 random_tensor({27}, rng)});
  out.push_back({"relu", [](Tape&, Var x) { return weighted_sum(relu(x)); }, away_from_zero({10}, rng)});
  out.push_back({"gelu", [](Tape&, Var x) { return weighted_sum(gelu(x)); }, random_tensor({10}, rng)});
  out.push_back({"sigmoid", [](Tape&, Var x) { return weighted_sum(sigmoid(x)); }, random_tensor({10}, rng)});
  out.push_back({"exp", [](Tape&, Var x) { return weighted_sum(exp(x)); }, random_tensor({10}, rng)});
  out.push_back({"log", [](Tape&, Var x) { return weighted_sum(log(x)); }, random_tensor({8}, rng, 0.2, 2.0)});
  out.push_back({"sum/mean", [](Tape&, Var x) { return add(sum(mul(x, x)), mean(exp(x))); }, random_tensor({7}, rng)});
  out.push_back({"concat",
                 [=](Tape&, Var x) {
                   Var a = part(x, 0, {2, 3}), b = part(x, 6, {2, 2}), c = part(x, 10, {2, 3});
                   return add(weighted_sum(concat({a, b}, 1), 4), weighted_sum(concat({a, c}, 0), 5));
                 },
                 random_tensor({16}, rng)});
  out.push_back({"slice", [](Tape&, Var x) { return weighted_sum(slice(reshape(x, {3, 4}), 1, 1, 3)); },
                 random_tensor({12}, rng)});
  out.push_back({"gather_rows", [](Tape&, Var x) { return weighted_sum(gather_rows(reshape(x, {3, 2}), {2, 0, 2, 1})); },
                 random_tensor({6}, rng)});
  const std::vector<std::uint8_t> m{1, 0, 0, 1, 1, 0};
  out.push_back({"where", [=](Tape&, Var x) { return weighted_sum(where(m, part(x, 0, {6}), part(x, 6, {6}))); },
                 random_tensor({12}, rng)});
  out.push_back({"softmax", [](Tape&, Var x) { return weighted_sum(softmax(reshape(x, {3, 4}))); }, random_tensor({12}, rng)});
  out.push_back({"log_softmax", [](Tape&, Var x) { return weighted_sum(log_softmax(reshape(x, {3, 4}))); },
                 random_tensor({12}, rng)});
  out.push_back({"group_mean_rows", [](Tape&, Var x) { return weighted_sum(group_mean_rows(reshape(x, {6, 2}), 3)); },
                 random_tensor({12}, rng)});
  out.push_back({"group_log_mean_exp",
                 [](Tape&, Var x) { return weighted_sum(group_log_mean_exp(reshape(x, {6, 2}), 2)); },
                 random_tensor({12}, rng)});
  const std::vector<int> cols{1, 0, 3};
  out.push_back({"pick", [=](Tape&, Var x) { return weighted_sum(pick(reshape(x, {3, 4}), cols)); }, random_tensor({12}, rng)});
  out.push_back({"softmax_cross_entropy", [=](Tape&, Var x) { return softmax_cross_entropy(reshape(x, {3, 4}), cols); },
                 random_tensor({12}, rng)});

  Tensor gate_noise({4, 5});
  for (auto& u : gate_noise.values()) u = rng.uniform_open();
  out.push_back({"concrete_gates", [=](Tape&, Var l) { return weighted_sum(concrete_gates(l, gate_noise, 0.5)); },
                 random_tensor({5}, rng)});
  const Tensor affine_eps = random_tensor({3, kAffineParams}, rng, -1, 1);
  out.push_back({"affine_matrices", [=](Tape&, Var th) { return weighted_sum(affine_matrices(th, affine_eps)); },
                 random_tensor({kAffineParams}, rng, -0.8, 0.8)});

  out.push_back({"broadcast_rows", [](Tape&, Var v) { return weighted_sum(broadcast_rows(v, 3)); }, random_tensor({4}, rng)});

  const std::size_t h = 4, w = 4, b = 3, samples = 3;
  const std::array<Real, kAffineParams> theta{0.7, 0.15, -0.1, 0.1, -0.05, 0.2};
  {
    Tape t0;
    const Tensor eps = smooth_noise(theta, 2, h, w, rng);
    const Tensor a = affine_matrices(t0.constant(Tensor({kAffineParams}, std::vector<Real>(theta.begin(), theta.end()))), eps).value();
    const Tensor img = random_tensor({2, h * w}, rng, 0, 1);
    out.push_back({"bilinear_warp (affines)",
                   [=](Tape& t, Var av) { return weighted_sum(bilinear_warp(t.constant(img), reshape(av, {2, 6}), h, w)); },
                   a.reshaped({12})});
    out.push_back({"bilinear_warp (images)",
                   [=](Tape& t, Var iv) { return weighted_sum(bilinear_warp(reshape(iv, {2, h * w}), t.constant(a), h, w)); },
                   img.reshaped({2 * h * w})});
  }
  const Tensor acts = random_tensor({3, 5}, rng);
  for (Mode mode : {Mode::kTrain, Mode::kEval})
    out.push_back({mode == Mode::kTrain ? "concrete_dropout (train)" : "concrete_dropout (eval)",
                   [=](Tape& t, Var l) {
                     Rng r(seed + 3);
                     return weighted_sum(concrete_dropout(t.constant(acts), l, 0.5, r, mode));
                   },
                   random_tensor({5}, rng, 0, 2)});


  const MlpSpec spec{h * w, {6}, 3, Activation::kGelu};
  const Model model{spec, h, w, {}};
  const std::vector<Tensor> params = init_mlp(spec, rng);
  const Tensor x = random_tensor({b, h * w}, rng, 0, 1);
  const std::vector<int> y{0, 2, 1};
  const auto constants = [params](Tape& t) {
    std::vector<Var> p;
    for (const Tensor& v : params) p.push_back(t.constant(v));
    return p;
  };
  // Train-mode noise is redrawn from the same key on every evaluation.
  const auto loglik = [=](Tape& t, const HyperParams& hp, const HyperVars& hv) {
    Rng r(seed + 1);
    return mean(pick(model.log_predict(constants(t), hv, hp, t.constant(x), Mode::kTrain, r), y));
  };

  HyperParams mask_hp;
  mask_hp.mask_logits.assign(h * w, 0.0);
  out.push_back({"hyper: mask logits",
                 [=](Tape& t, Var l) {
                   HyperVars hv;
                   hv.mask = l;
                   return loglik(t, mask_hp, hv);
                 },
                 random_tensor({h * w}, rng, -1, 1)});
  out.push_back({"hyper: mask logits (eval)",
                 [=](Tape& t, Var l) {
                   HyperVars hv;
                   hv.mask = l;
                   Rng r(seed + 1);
                   return mean(pick(model.log_predict(constants(t), hv, mask_hp, t.constant(x), Mode::kEval, r), y));
                 },
                 random_tensor({h * w}, rng, -1, 1)});

  const Tensor eps = smooth_noise(theta, b * samples, h, w, rng);
  out.push_back({"hyper: affine theta",
                 [=](Tape& t, Var th) {
                   const std::vector<Var> p = constants(t);
                   Rng r(seed + 2);
                   const LogitsFn f = [&](Var in) { return model.logits(p, HyperVars{}, HyperParams{}, in, Mode::kTrain, r); };
                   return mean(pick(augmented_log_predict(f, t.constant(x), th, eps, samples, h, w), y));
                 },
                 Tensor({kAffineParams}, std::vector<Real>(theta.begin(), theta.end()))});

  HyperParams drop_hp;
  drop_hp.dropout_logits = {std::vector<Real>(6, 1.0)};
  out.push_back({"hyper: dropout logits",
                 [=](Tape& t, Var l) {
                   HyperVars hv;
                   hv.dropout = {l};
                   return loglik(t, drop_hp, hv);
                 },
                 random_tensor({6}, rng, 0, 2)});
  return out;
}

}  // namespace testing
