#pragma once

#include <array>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "pnet/autodiff.hpp"
#include "pnet/rng.hpp"

namespace pnet {

// Order of the six affine augmentation ranges. Rotation is in radians, the
// rest are fractions of the normalized [-1, 1] image extent.
enum AffineParam : std::size_t { kRotation = 0, kTranslateX, kTranslateY, kScaleX, kScaleY, kShear };
inline constexpr std::size_t kAffineParams = 6;
const char* affine_param_name(std::size_t i);

// Hyperparameters psi optimized on out-of-sample chunks.
struct HyperParams {
  std::vector<Real> mask_logits;                  // empty: no learned input mask
  bool augment = false;                           // affine augmentation averaging on/off
  std::array<Real, kAffineParams> affine{};       // ranges theta; effective range is |theta_i|
  std::array<bool, kAffineParams> learn_affine{true, true, true, true, true, true};
  std::vector<std::vector<Real>> dropout_logits;  // keep-logits per hidden layer; empty: none
  Real temperature = Real(0.5);
  std::size_t aug_samples = 1;

  void validate() const;
  bool has_learnable() const;
  // Flat view used by the hyper optimizer: mask, affine (if augment), dropout.
  std::vector<Real> flatten() const;
  void unflatten(const std::vector<Real>& flat);
  std::vector<std::string> names() const;
};

// First `keep` of `dim` entries 1, the rest 0.
std::vector<Real> fixed_mask(std::size_t dim, std::size_t keep);

// sigma((logit + ln u - ln(1-u)) / tau)
Real concrete_bernoulli(Real logit, Real temperature, Real u);

// Relaxed Bernoulli gates z[b, j] from logits [U] and uniform noise [B, U].
Var concrete_gates(Var logits, const Tensor& noise, Real temperature);

// Row-major 2x3 matrix A = Translate * Rotate * Shear * Scale(1+p_sx, 1+p_sy)
// with per-draw parameters p_i = theta_i * eps_i.
using Affine = std::array<Real, 6>;
Affine sample_affine(const std::array<Real, kAffineParams>& theta, const std::array<Real, kAffineParams>& eps);
// Batched, differentiable in theta [6]; eps is [N, 6] in [-1, 1]. Returns [N, 6].
Var affine_matrices(Var theta, const Tensor& eps);

// Backward-warps images with corners-aligned normalized coordinates: output
// pixel at g reads the input bilinearly at A g. Samples outside the image
// read 0. images [N, H*W], affines [N, 6]; differentiable in both.
Var bilinear_warp(Var images, Var affines, std::size_t height, std::size_t width);
Tensor bilinear_warp(const Tensor& image, const Affine& a, std::size_t height, std::size_t width);

// Uniform eps draws in [-1, 1], [n, 6].
Tensor draw_affine_noise(std::size_t n, Rng& rng);

// Row-major log-probability forward for a flat input batch [B, D] -> logits [B, K].
using LogitsFn = std::function<Var(Var)>;

// Log of the augmentation-averaged predictive, log((1/S) sum_s softmax(f(warp(x, A_s)))),
// computed stably; return shape [B, K]. eps holds S rows per example, grouped
// by example.
Var augmented_log_predict(const LogitsFn& forward, Var x, Var theta, const Tensor& eps, std::size_t samples,
                          std::size_t height, std::size_t width);
// Probability form of the same predictive.
Var augmented_predict(const LogitsFn& forward, Var x, Var theta, std::size_t samples, std::size_t height,
                      std::size_t width, Rng& rng);

enum class Mode { kTrain, kEval };

// Train: multiply each unit by a relaxed keep gate. Eval: multiply by the
// keep probability sigma(logit). activations [B, U], keep_logits [U].
Var concrete_dropout(Var activations, Var keep_logits, Real temperature, Rng& rng, Mode mode);

// Per-row broadcast of a rank-1 [U] variable to [rows, U].
Var broadcast_rows(Var v, std::size_t rows);

}  // namespace pnet
