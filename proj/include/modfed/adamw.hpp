#pragma once

#include <cstdint>
#include <vector>

#include "modfed/params.hpp"

namespace modfed {

struct AdamWConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.01;
};

// Decoupled weight decay Adam:
//   p <- p - lr * wd * p
//   m <- b1 m + (1 - b1) g,  v <- b2 v + (1 - b2) g^2
//   p <- p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
class AdamW {
 public:
  AdamW() = default;
  AdamW(const ParamSet& params, AdamWConfig config);

  // Throws NumericError naming the first parameter whose gradient is not
  // finite; nothing is modified in that case.
  void step(ParamSet& params, const Gradients& grads);

  const AdamWConfig& config() const noexcept { return config_; }
  std::uint64_t steps() const noexcept { return step_; }
  const std::vector<ad::Tensor>& first_moments() const noexcept { return m_; }
  const std::vector<ad::Tensor>& second_moments() const noexcept { return v_; }

 private:
  AdamWConfig config_;
  std::uint64_t step_ = 0;
  std::vector<ad::Tensor> m_;
  std::vector<ad::Tensor> v_;
};

}  // namespace modfed
