#pragma once

#include <cstddef>
#include <vector>

#include "pnet/autodiff.hpp"
#include "pnet/hyper.hpp"
#include "pnet/rng.hpp"

namespace pnet {

enum class Activation { kGelu, kRelu };

struct MlpSpec {
  std::size_t inputs = 0;
  std::vector<std::size_t> hidden;
  std::size_t classes = 2;
  Activation activation = Activation::kGelu;

  void validate() const;
  // W1 [h1, in], b1 [h1], ..., W_out [classes, h_last], b_out [classes]
  std::vector<Shape> shapes() const;
};

// Kaiming-uniform weights (bound sqrt(6 / fan_in)), biases U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
std::vector<Tensor> init_mlp(const MlpSpec& spec, Rng& rng);

// Hyperparameters placed on a tape. Absent modules hold an invalid Var (id -1).
struct HyperVars {
  Var mask;
  Var theta;
  std::vector<Var> dropout;
};
HyperVars hyper_vars(Tape& tape, const HyperParams& hp, bool track);
// Flat gradient in HyperParams::flatten() order. Affine entries that are not
// learned get 0.
std::vector<Real> hyper_gradient(const Gradients& grads, const HyperVars& hv, const HyperParams& hp);

struct Model {
  MlpSpec mlp;
  std::size_t height = 0;  // image extents, needed only with augmentation
  std::size_t width = 0;
  std::vector<Real> input_mask;  // fixed mask; empty: none

  // Plain MLP logits on an already-augmented input batch.
  Var logits(const std::vector<Var>& params, const HyperVars& hv, const HyperParams& hp, Var x, Mode mode,
             Rng& rng) const;
  // Log predictive [B, K], averaged over augmentation samples when enabled.
  Var log_predict(const std::vector<Var>& params, const HyperVars& hv, const HyperParams& hp, Var x, Mode mode,
                  Rng& rng) const;
};

}  // namespace pnet
