#include "pnet/optim.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace pnet {

Adam::Adam(std::size_t size, AdamConfig config) : config_(config), m_(size, 0.0), v_(size, 0.0) {}

void Adam::step(std::vector<Real>& x, const std::vector<Real>& grad, double lr) {
  if (x.size() != m_.size() || grad.size() != m_.size()) throw std::invalid_argument("Adam: size mismatch");
  ++t_;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double g = grad[i];
    m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * g;
    v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * g * g;
    x[i] -= static_cast<Real>(lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + config_.eps));
  }
}

PerPartitionAdam::PerPartitionAdam(const PartitionedParams& params, AdamConfig config)
    : config_(config), t_(params.chunks(), 0) {
  for (const Tensor& t : params.values) {
    m_.emplace_back(t.numel(), 0.0);
    v_.emplace_back(t.numel(), 0.0);
  }
}

void PerPartitionAdam::step(PartitionedParams& params, const std::vector<Tensor>& grads, std::size_t j, double lr,
                            double wd) {
  params.check_level(j);
  if (grads.size() != params.num_tensors() || m_.size() != params.num_tensors())
    throw std::invalid_argument("PerPartitionAdam: tensor count mismatch");
  const std::uint64_t t = ++t_[j - 1];
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t));
  for (std::size_t l = 0; l < params.num_tensors(); ++l) {
    const auto& a = params.assignment.layers[l];
    auto w = params.values[l].values();
    const auto d = params.defaults[l].values();
    const auto g = grads[l].values();
    if (g.size() != w.size()) throw ShapeError("PerPartitionAdam", grads[l].shape(), params.values[l].shape());
    auto& m = m_[l];
    auto& v = v_[l];
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (a[i] != j) continue;
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i];
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i] * g[i];
      const double adam = (m[i] / c1) / (std::sqrt(v[i] / c2) + config_.eps);
      w[i] -= static_cast<Real>(lr * (adam + wd * (static_cast<double>(w[i]) - d[i])));
    }
  }
}

LrSchedule parse_lr_schedule(const std::string& name) {
  if (name == "constant") return LrSchedule::kConstant;
  if (name == "cosine") return LrSchedule::kCosine;
  throw std::invalid_argument("unknown lr schedule '" + name + "' (expected constant or cosine)");
}

double scheduled_lr(LrSchedule schedule, double lr, std::size_t iteration, std::size_t total, double final_fraction) {
  if (schedule == LrSchedule::kConstant || total <= 1) return lr;
  const double p = std::min(1.0, static_cast<double>(iteration) / static_cast<double>(total - 1));
  const double lo = lr * final_fraction;
  return lo + 0.5 * (lr - lo) * (1.0 + std::cos(std::numbers::pi * p));
}

}  // namespace pnet
