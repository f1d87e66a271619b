#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pnet/partition.hpp"

namespace pnet {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adaptive-moment optimizer over a flat vector.
class Adam {
 public:
  explicit Adam(std::size_t size = 0, AdamConfig config = {});
  // Descent step: x -= lr * m_hat / (sqrt(v_hat) + eps).
  void step(std::vector<Real>& x, const std::vector<Real>& grad, double lr);
  std::uint64_t steps() const { return t_; }
  const std::vector<double>& m() const { return m_; }
  const std::vector<double>& v() const { return v_; }

 private:
  AdamConfig config_;
  std::uint64_t t_ = 0;
  std::vector<double> m_, v_;
};

// One Adam state per partition. Moments are stored full size but partition j
// only ever reads and writes its own elements, and t_j counts only its updates.
class PerPartitionAdam {
 public:
  PerPartitionAdam() = default;
  PerPartitionAdam(const PartitionedParams& params, AdamConfig config = {});

  // Updates the elements of partition j from `grads` (full-size tensors):
  //   w -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * (w - w_default))
  void step(PartitionedParams& params, const std::vector<Tensor>& grads, std::size_t j, double lr, double wd);

  std::uint64_t steps(std::size_t j) const { return t_.at(j - 1); }
  const std::vector<std::vector<double>>& m() const { return m_; }
  const std::vector<std::vector<double>>& v() const { return v_; }

 private:
  AdamConfig config_;
  std::vector<std::uint64_t> t_;
  std::vector<std::vector<double>> m_, v_;
};

enum class LrSchedule { kConstant, kCosine };
LrSchedule parse_lr_schedule(const std::string& name);
// Cosine decays from lr to lr * final_fraction over `total` iterations.
double scheduled_lr(LrSchedule schedule, double lr, std::size_t iteration, std::size_t total,
                    double final_fraction = 0.01);

}  // namespace pnet
