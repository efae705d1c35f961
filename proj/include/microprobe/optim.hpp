#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "microprobe/tensor.hpp"

namespace microprobe::ad {

/// A named trainable leaf. The gradient lives on the tensor's node and has
/// the tensor's shape.
template <class T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
};

template <class T>
void zero_grad(std::vector<Parameter<T>>& params) {
  for (auto& p : params) p.tensor.zero_grad();
}

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adam with bias correction. Moment buffers are created on the first step
/// and keyed by parameter position, so the parameter list must stay stable.
template <class T>
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  void step(std::vector<Parameter<T>>& params);

  std::uint64_t step_count() const { return steps_; }
  const AdamConfig& config() const { return cfg_; }
  const std::vector<std::vector<T>>& first_moments() const { return m_; }
  const std::vector<std::vector<T>>& second_moments() const { return v_; }

 private:
  AdamConfig cfg_;
  std::uint64_t steps_ = 0;
  std::vector<std::vector<T>> m_, v_;
};

/// Largest |analytic - numeric| / (|analytic| + |numeric| + 1e-12) over
/// sampled coordinates, numeric gradients by central differences.
struct GradCheckOptions {
  double step = 1e-5;
  std::size_t coords_per_param = 16;  // 0 checks every coordinate
  std::uint64_t seed = 0;
};

double grad_check(const std::function<Tensor<double>()>& model_fn,
                  std::vector<Parameter<double>>& params, const GradCheckOptions& opts = {});

}  // namespace microprobe::ad
