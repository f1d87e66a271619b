#include "pnet/hyper.hpp"

#include <cmath>
#include <stdexcept>

namespace pnet {

const char* affine_param_name(std::size_t i) {
  static constexpr const char* names[kAffineParams] = {"rotation", "translate_x", "translate_y",
                                                       "scale_x",  "scale_y",     "shear"};
  return names[i];
}

void HyperParams::validate() const {
  if (!(temperature > 0)) throw std::invalid_argument("hyper: temperature must be positive");
  if (aug_samples < 1) throw std::invalid_argument("hyper: augmentation sample count must be >= 1");
  for (Real v : affine)
    if (!std::isfinite(v)) throw std::invalid_argument("hyper: non-finite affine range");
}

bool HyperParams::has_learnable() const {
  if (!mask_logits.empty() || !dropout_logits.empty()) return true;
  if (!augment) return false;
  for (bool b : learn_affine)
    if (b) return true;
  return false;
}

std::vector<Real> HyperParams::flatten() const {
  std::vector<Real> out(mask_logits.begin(), mask_logits.end());
  if (augment) out.insert(out.end(), affine.begin(), affine.end());
  for (const auto& d : dropout_logits) out.insert(out.end(), d.begin(), d.end());
  return out;
}

void HyperParams::unflatten(const std::vector<Real>& flat) {
  std::size_t at = 0;
  auto take = [&](Real& dst) {
    if (at >= flat.size()) throw std::invalid_argument("HyperParams::unflatten: too few values");
    dst = flat[at++];
  };
  for (auto& v : mask_logits) take(v);
  if (augment)
    for (auto& v : affine) take(v);
  for (auto& d : dropout_logits)
    for (auto& v : d) take(v);
  if (at != flat.size()) throw std::invalid_argument("HyperParams::unflatten: too many values");
}

std::vector<std::string> HyperParams::names() const {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < mask_logits.size(); ++i) out.push_back("mask_logit_" + std::to_string(i + 1));
  if (augment)
    for (std::size_t i = 0; i < kAffineParams; ++i) out.push_back(std::string("aug_") + affine_param_name(i));
  for (std::size_t l = 0; l < dropout_logits.size(); ++l)
    for (std::size_t i = 0; i < dropout_logits[l].size(); ++i)
      out.push_back("keep_logit_l" + std::to_string(l + 1) + "_" + std::to_string(i + 1));
  return out;
}

std::vector<Real> fixed_mask(std::size_t dim, std::size_t keep) {
  if (keep > dim)
    throw std::out_of_range("fixed_mask: K=" + std::to_string(keep) + " outside [0, " + std::to_string(dim) + "]");
  std::vector<Real> m(dim, Real(0));
  for (std::size_t i = 0; i < keep; ++i) m[i] = Real(1);
  return m;
}

namespace {

Real stable_sigmoid(Real v) {
  return v >= 0 ? Real(1) / (Real(1) + std::exp(-v)) : std::exp(v) / (Real(1) + std::exp(v));
}

}  // namespace

Real concrete_bernoulli(Real logit, Real temperature, Real u) {
  if (!(u > 0 && u < 1)) throw std::invalid_argument("concrete_bernoulli: u must lie in (0, 1)");
  if (!(temperature > 0)) throw std::invalid_argument("concrete_bernoulli: temperature must be positive");
  return stable_sigmoid((logit + std::log(u) - std::log1p(-u)) / temperature);
}

Var concrete_gates(Var logits, const Tensor& noise, Real temperature) {
  Tape& t = *logits.tape;
  const Tensor& l = logits.value();
  if (l.rank() != 1 || noise.rank() != 2 || noise.cols() != l.numel())
    throw ShapeError("concrete_gates", l.shape(), noise.shape());
  if (!(temperature > 0)) throw std::invalid_argument("concrete_gates: temperature must be positive");
  const std::size_t rows = noise.rows(), units = l.numel();
  Tensor z(noise.shape());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < units; ++j) z[r * units + j] = concrete_bernoulli(l[j], temperature, noise[r * units + j]);
  const int il = logits.id;
  if (!logits.requires_grad()) return t.push("concrete_gates", std::move(z), {il}, {});
  Tensor saved = z;
  return t.push("concrete_gates", std::move(z), {il},
                [il, rows, units, temperature, zs = std::move(saved)](Tape& tp, const Tensor& g) {
                  auto gl = tp.grad_buffer(il);
                  for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < units; ++j) {
                      const Real zz = zs[r * units + j];
                      gl[j] += g[r * units + j] * zz * (Real(1) - zz) / temperature;
                    }
                });
}

namespace {

// Entries and partial derivatives of A with respect to the draw parameters p.
struct AffineWithJacobian {
  Affine a;
  // jac[e][i] = dA_e / dp_i
  std::array<std::array<Real, kAffineParams>, 6> jac{};
};

AffineWithJacobian affine_from_draw(const std::array<Real, kAffineParams>& p) {
  const Real c = std::cos(p[kRotation]), s = std::sin(p[kRotation]);
  const Real sh = p[kShear];
  const Real a = Real(1) + p[kScaleX], b = Real(1) + p[kScaleY];
  AffineWithJacobian r;
  r.a = {c * a, (c * sh - s) * b, p[kTranslateX], s * a, (s * sh + c) * b, p[kTranslateY]};
  auto& J = r.jac;
  J[0][kRotation] = -s * a;
  J[0][kScaleX] = c;
  J[1][kRotation] = (-s * sh - c) * b;
  J[1][kShear] = c * b;
  J[1][kScaleY] = c * sh - s;
  J[2][kTranslateX] = 1;
  J[3][kRotation] = c * a;
  J[3][kScaleX] = s;
  J[4][kRotation] = (c * sh - s) * b;
  J[4][kShear] = s * b;
  J[4][kScaleY] = s * sh + c;
  J[5][kTranslateY] = 1;
  return r;
}

}  // namespace

Affine sample_affine(const std::array<Real, kAffineParams>& theta, const std::array<Real, kAffineParams>& eps) {
  std::array<Real, kAffineParams> p{};
  for (std::size_t i = 0; i < kAffineParams; ++i) p[i] = theta[i] * eps[i];
  return affine_from_draw(p).a;
}

Var affine_matrices(Var theta, const Tensor& eps) {
  Tape& t = *theta.tape;
  if (theta.value().numel() != kAffineParams || eps.rank() != 2 || eps.cols() != kAffineParams)
    throw ShapeError("affine_matrices", theta.shape(), eps.shape());
  const std::size_t n = eps.rows();
  Tensor out({n, 6});
  const bool need = theta.requires_grad();
  // d out[r, e] / d theta_i = jac[e][i] * eps[r, i]
  Tensor dtheta(need ? Shape{n, 6, kAffineParams} : Shape{0});
  for (std::size_t r = 0; r < n; ++r) {
    std::array<Real, kAffineParams> p{};
    for (std::size_t i = 0; i < kAffineParams; ++i) p[i] = theta.value()[i] * eps[r * kAffineParams + i];
    const auto aj = affine_from_draw(p);
    for (std::size_t e = 0; e < 6; ++e) {
      out[r * 6 + e] = aj.a[e];
      if (need)
        for (std::size_t i = 0; i < kAffineParams; ++i)
          dtheta[(r * 6 + e) * kAffineParams + i] = aj.jac[e][i] * eps[r * kAffineParams + i];
    }
  }
  const int it = theta.id;
  if (!need) return t.push("affine_matrices", std::move(out), {it}, {});
  return t.push("affine_matrices", std::move(out), {it}, [it, n, d = std::move(dtheta)](Tape& tp, const Tensor& g) {
    auto gt = tp.grad_buffer(it);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t e = 0; e < 6; ++e) {
        const Real ge = g[r * 6 + e];
        if (ge == Real(0)) continue;
        for (std::size_t i = 0; i < kAffineParams; ++i) gt[i] += ge * d[(r * 6 + e) * kAffineParams + i];
      }
  });
}

namespace {

struct WarpGeometry {
  std::size_t h, w;
  Real cx, cy, x_over_y, y_over_x;
  WarpGeometry(std::size_t height, std::size_t width)
      : h(height),
        w(width),
        cx(Real(width - 1) / Real(2)),
        cy(Real(height - 1) / Real(2)),
        x_over_y(cx / cy),
        y_over_x(cy / cx) {}
};

// Source pixel coordinate of output pixel (i, j). Written in pixel offsets
// from the center so that the identity maps every pixel onto itself exactly.
inline void source_coord(const WarpGeometry& g, const Real* a, std::size_t i, std::size_t j, Real& px, Real& py) {
  const Real xj = Real(j) - g.cx, yi = Real(i) - g.cy;
  px = g.cx + a[0] * xj + a[1] * yi * g.x_over_y + a[2] * g.cx;
  py = g.cy + a[3] * xj * g.y_over_x + a[4] * yi + a[5] * g.cy;
}

inline Real pixel(const Real* img, const WarpGeometry& g, long y, long x) {
  if (x < 0 || y < 0 || x >= static_cast<long>(g.w) || y >= static_cast<long>(g.h)) return Real(0);
  return img[static_cast<std::size_t>(y) * g.w + static_cast<std::size_t>(x)];
}

void warp_one(const Real* img, const Real* a, const WarpGeometry& g, Real* out) {
  for (std::size_t i = 0; i < g.h; ++i)
    for (std::size_t j = 0; j < g.w; ++j) {
      Real px, py;
      source_coord(g, a, i, j, px, py);
      const Real fx0 = std::floor(px), fy0 = std::floor(py);
      const long x0 = static_cast<long>(fx0), y0 = static_cast<long>(fy0);
      const Real fx = px - fx0, fy = py - fy0;
      out[i * g.w + j] = (Real(1) - fy) * ((Real(1) - fx) * pixel(img, g, y0, x0) + fx * pixel(img, g, y0, x0 + 1)) +
                         fy * ((Real(1) - fx) * pixel(img, g, y0 + 1, x0) + fx * pixel(img, g, y0 + 1, x0 + 1));
    }
}

}  // namespace

Tensor bilinear_warp(const Tensor& image, const Affine& a, std::size_t height, std::size_t width) {
  if (height < 2 || width < 2 || image.numel() != height * width)
    throw ShapeError("bilinear_warp: image of " + std::to_string(image.numel()) + " pixels for " +
                     std::to_string(height) + "x" + std::to_string(width));
  const WarpGeometry g(height, width);
  Tensor out(image.shape());
  warp_one(image.data(), a.data(), g, out.data());
  return out;
}

Var bilinear_warp(Var images, Var affines, std::size_t height, std::size_t width) {
  Tape& t = *images.tape;
  const Tensor& im = images.value();
  const Tensor& A = affines.value();
  if (height < 2 || width < 2 || im.rank() != 2 || im.cols() != height * width)
    throw ShapeError("bilinear_warp: images " + shape_str(im.shape()) + " for " + std::to_string(height) + "x" +
                     std::to_string(width));
  if (A.rank() != 2 || A.cols() != 6 || A.rows() != im.rows()) throw ShapeError("bilinear_warp", im.shape(), A.shape());
  const std::size_t n = im.rows(), hw = height * width;
  const WarpGeometry geo(height, width);
  Tensor out(im.shape());
  for (std::size_t r = 0; r < n; ++r) warp_one(im.data() + r * hw, A.data() + r * 6, geo, out.data() + r * hw);
  const int ii = images.id, ia = affines.id;
  return t.push("bilinear_warp", std::move(out), {ii, ia}, [ii, ia, n, hw, geo](Tape& tp, const Tensor& g) {
    const bool need_img = tp.requires_grad(ii), need_a = tp.requires_grad(ia);
    const Tensor& imv = tp.value(ii);
    const Tensor& Av = tp.value(ia);
    std::span<Real> gi = need_img ? tp.grad_buffer(ii) : std::span<Real>{};
    std::span<Real> ga = need_a ? tp.grad_buffer(ia) : std::span<Real>{};
    for (std::size_t r = 0; r < n; ++r) {
      const Real* img = imv.data() + r * hw;
      const Real* a = Av.data() + r * 6;
      Real acc[6] = {0, 0, 0, 0, 0, 0};
      for (std::size_t i = 0; i < geo.h; ++i)
        for (std::size_t j = 0; j < geo.w; ++j) {
          const Real go = g[r * hw + i * geo.w + j];
          if (go == Real(0)) continue;
          Real px, py;
          source_coord(geo, a, i, j, px, py);
          const Real fx0 = std::floor(px), fy0 = std::floor(py);
          const long x0 = static_cast<long>(fx0), y0 = static_cast<long>(fy0);
          const Real fx = px - fx0, fy = py - fy0;
          if (need_img) {
            auto scatter = [&](long y, long x, Real wgt) {
              if (x < 0 || y < 0 || x >= static_cast<long>(geo.w) || y >= static_cast<long>(geo.h)) return;
              gi[r * hw + static_cast<std::size_t>(y) * geo.w + static_cast<std::size_t>(x)] += go * wgt;
            };
            scatter(y0, x0, (Real(1) - fy) * (Real(1) - fx));
            scatter(y0, x0 + 1, (Real(1) - fy) * fx);
            scatter(y0 + 1, x0, fy * (Real(1) - fx));
            scatter(y0 + 1, x0 + 1, fy * fx);
          }
          if (need_a) {
            const Real v00 = pixel(img, geo, y0, x0), v01 = pixel(img, geo, y0, x0 + 1);
            const Real v10 = pixel(img, geo, y0 + 1, x0), v11 = pixel(img, geo, y0 + 1, x0 + 1);
            const Real dpx = go * ((Real(1) - fy) * (v01 - v00) + fy * (v11 - v10));
            const Real dpy = go * ((Real(1) - fx) * (v10 - v00) + fx * (v11 - v01));
            const Real xj = Real(j) - geo.cx, yi = Real(i) - geo.cy;
            acc[0] += dpx * xj;
            acc[1] += dpx * yi * geo.x_over_y;
            acc[2] += dpx * geo.cx;
            acc[3] += dpy * xj * geo.y_over_x;
            acc[4] += dpy * yi;
            acc[5] += dpy * geo.cy;
          }
        }
      if (need_a)
        for (std::size_t e = 0; e < 6; ++e) ga[r * 6 + e] += acc[e];
    }
  });
}

Tensor draw_affine_noise(std::size_t n, Rng& rng) {
  Tensor eps({n, kAffineParams});
  for (auto& v : eps.values()) v = static_cast<Real>(rng.uniform(-1.0, 1.0));
  return eps;
}

Var broadcast_rows(Var v, std::size_t rows) {
  if (v.value().rank() != 1) throw ShapeError("broadcast_rows expects a rank-1 input, got " + shape_str(v.shape()));
  Var row = reshape(v, {1, v.value().numel()});
  return gather_rows(row, std::vector<std::size_t>(rows, 0));
}

namespace {

std::vector<std::size_t> repeat_rows(std::size_t n, std::size_t samples) {
  std::vector<std::size_t> idx;
  idx.reserve(n * samples);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t s = 0; s < samples; ++s) idx.push_back(i);
  return idx;
}

}  // namespace

Var augmented_log_predict(const LogitsFn& forward, Var x, Var theta, const Tensor& eps, std::size_t samples,
                          std::size_t height, std::size_t width) {
  if (samples < 1) throw std::invalid_argument("augmented_predict: S must be >= 1");
  const std::size_t n = x.value().rows();
  if (eps.rows() != n * samples) throw ShapeError("augmented_predict: noise rows do not match batch x samples");
  Var rep = samples == 1 ? x : gather_rows(x, repeat_rows(n, samples));
  Var A = affine_matrices(theta, eps);
  Var warped = bilinear_warp(rep, A, height, width);
  Var logp = log_softmax(forward(warped));
  return samples == 1 ? logp : group_log_mean_exp(logp, samples);
}

Var augmented_predict(const LogitsFn& forward, Var x, Var theta, std::size_t samples, std::size_t height,
                      std::size_t width, Rng& rng) {
  const Tensor eps = draw_affine_noise(x.value().rows() * samples, rng);
  return exp(augmented_log_predict(forward, x, theta, eps, samples, height, width));
}

Var concrete_dropout(Var activations, Var keep_logits, Real temperature, Rng& rng, Mode mode) {
  const Tensor& a = activations.value();
  if (a.rank() != 2 || keep_logits.value().numel() != a.cols())
    throw ShapeError("concrete_dropout", a.shape(), keep_logits.shape());
  if (!(temperature > 0)) throw std::invalid_argument("concrete_dropout: temperature must be positive");
  if (mode == Mode::kEval) return mul(activations, broadcast_rows(sigmoid(keep_logits), a.rows()));
  Tensor noise(a.shape());
  for (auto& u : noise.values()) u = static_cast<Real>(rng.uniform_open());
  return mul(activations, concrete_gates(keep_logits, noise, temperature));
}

}  // namespace pnet
