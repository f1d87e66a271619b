#include "pnet/model.hpp"

#include <cmath>
#include <stdexcept>

namespace pnet {

void MlpSpec::validate() const {
  if (inputs == 0) throw std::invalid_argument("mlp: input dimension must be positive");
  if (classes < 2) throw std::invalid_argument("mlp: need at least 2 classes");
  for (std::size_t h : hidden)
    if (h == 0) throw std::invalid_argument("mlp: hidden widths must be positive");
}

std::vector<Shape> MlpSpec::shapes() const {
  std::vector<Shape> out;
  std::size_t fan_in = inputs;
  for (std::size_t h : hidden) {
    out.push_back({h, fan_in});
    out.push_back({h});
    fan_in = h;
  }
  out.push_back({classes, fan_in});
  out.push_back({classes});
  return out;
}

std::vector<Tensor> init_mlp(const MlpSpec& spec, Rng& rng) {
  spec.validate();
  std::vector<Tensor> out;
  for (const Shape& s : spec.shapes()) {
    Tensor t(s);
    if (s.size() == 2) {
      const double bound = std::sqrt(6.0 / static_cast<double>(s[1]));
      for (auto& v : t.values()) v = static_cast<Real>(rng.uniform(-bound, bound));
    } else {
      const double fan_in = static_cast<double>(out.back().dim(1));
      const double bound = 1.0 / std::sqrt(fan_in);
      for (auto& v : t.values()) v = static_cast<Real>(rng.uniform(-bound, bound));
    }
    out.push_back(std::move(t));
  }
  return out;
}

HyperVars hyper_vars(Tape& tape, const HyperParams& hp, bool track) {
  HyperVars hv;
  if (!hp.mask_logits.empty())
    hv.mask = tape.leaf(Tensor({hp.mask_logits.size()}, hp.mask_logits), track);
  if (hp.augment) {
    Tensor th({kAffineParams});
    for (std::size_t i = 0; i < kAffineParams; ++i) th[i] = hp.affine[i];
    bool any = false;
    for (bool b : hp.learn_affine) any = any || b;
    hv.theta = tape.leaf(std::move(th), track && any);
  }
  for (const auto& d : hp.dropout_logits) hv.dropout.push_back(tape.leaf(Tensor({d.size()}, d), track));
  return hv;
}

std::vector<Real> hyper_gradient(const Gradients& grads, const HyperVars& hv, const HyperParams& hp) {
  std::vector<Real> out;
  if (hv.mask.id >= 0) {
    const Tensor g = grads.of(hv.mask);
    out.insert(out.end(), g.values().begin(), g.values().end());
  }
  if (hp.augment) {
    const Tensor g = grads.of(hv.theta);
    for (std::size_t i = 0; i < kAffineParams; ++i) out.push_back(hp.learn_affine[i] ? g[i] : Real(0));
  }
  for (const Var& d : hv.dropout) {
    const Tensor g = grads.of(d);
    out.insert(out.end(), g.values().begin(), g.values().end());
  }
  return out;
}

Var Model::logits(const std::vector<Var>& params, const HyperVars& hv, const HyperParams& hp, Var x, Mode mode,
                  Rng& rng) const {
  const std::size_t layers = mlp.hidden.size();
  if (params.size() != 2 * (layers + 1)) throw std::invalid_argument("model: parameter count does not match the MLP");
  if (!hv.dropout.empty() && hv.dropout.size() != layers)
    throw std::invalid_argument("model: need one dropout vector per hidden layer");
  Tape& tape = *x.tape;
  const std::size_t rows = x.value().rows();
  Var h = x;
  if (!input_mask.empty()) {
    if (input_mask.size() != x.value().cols()) throw ShapeError("model: input mask length does not match inputs");
    h = mul(h, broadcast_rows(tape.constant(Tensor({input_mask.size()}, input_mask)), rows));
  }
  if (hv.mask.id >= 0) {
    if (mode == Mode::kTrain) {
      Tensor noise({rows, hv.mask.value().numel()});
      for (auto& u : noise.values()) u = static_cast<Real>(rng.uniform_open());
      h = mul(h, concrete_gates(hv.mask, noise, hp.temperature));
    } else {
      h = mul(h, broadcast_rows(sigmoid(hv.mask), rows));
    }
  }
  for (std::size_t l = 0; l < layers; ++l) {
    h = linear(h, params[2 * l], params[2 * l + 1]);
    h = mlp.activation == Activation::kGelu ? gelu(h) : relu(h);
    if (!hv.dropout.empty()) h = concrete_dropout(h, hv.dropout[l], hp.temperature, rng, mode);
  }
  return linear(h, params[2 * layers], params[2 * layers + 1]);
}

Var Model::log_predict(const std::vector<Var>& params, const HyperVars& hv, const HyperParams& hp, Var x, Mode mode,
                       Rng& rng) const {
  if (!hp.augment) return log_softmax(logits(params, hv, hp, x, mode, rng));
  if (height * width != x.value().cols())
    throw ShapeError("model: augmentation needs image extents matching the input width");
  const Tensor eps = draw_affine_noise(x.value().rows() * hp.aug_samples, rng);
  const LogitsFn f = [&](Var in) { return logits(params, hv, hp, in, mode, rng); };
  return augmented_log_predict(f, x, hv.theta, eps, hp.aug_samples, height, width);
}

}  // namespace pnet
