#include "microprobe/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "microprobe/error.hpp"
#include "microprobe/rng.hpp"

namespace microprobe::ad {

template <class T>
void Adam<T>::step(std::vector<Parameter<T>>& params) {
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.emplace_back(p.tensor.numel(), T(0));
      v_.emplace_back(p.tensor.numel(), T(0));
    }
  }
  if (m_.size() != params.size()) throw Error("Adam::step: parameter list changed between steps");
  ++steps_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
  const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& t = params[i].tensor;
    auto g = t.grad();
    auto w = t.mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    if (m.size() != w.size()) throw Error("Adam::step: parameter '" + params[i].name + "' changed size");
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = b1 * m[j] + (T(1) - b1) * g[j];
      v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
      const double mh = static_cast<double>(m[j]) / bc1;
      const double vh = static_cast<double>(v[j]) / bc2;
      w[j] -= static_cast<T>(cfg_.learning_rate * mh / (std::sqrt(vh) + cfg_.epsilon));
    }
  }
}

template class Adam<float>;
template class Adam<double>;

double grad_check(const std::function<Tensor<double>()>& model_fn, std::vector<Parameter<double>>& params,
                  const GradCheckOptions& opts) {
  zero_grad(params);
  model_fn().backward();
  std::vector<std::vector<double>> analytic;
  for (auto& p : params) {
    auto g = p.tensor.grad();
    analytic.emplace_back(g.begin(), g.end());
  }

  Rng rng(opts.seed);
  double worst = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto values = params[pi].tensor.mutable_data();
    std::vector<std::size_t> coords(values.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (opts.coords_per_param && coords.size() > opts.coords_per_param) {
      for (std::size_t i = 0; i < opts.coords_per_param; ++i) {
        std::swap(coords[i], coords[i + rng.uniform_index(coords.size() - i)]);
      }
      coords.resize(opts.coords_per_param);
    }
    for (std::size_t c : coords) {
      const double saved = values[c];
      values[c] = saved + opts.step;
      const double up = model_fn().item();
      values[c] = saved - opts.step;
      const double down = model_fn().item();
      values[c] = saved;
      const double numeric = (up - down) / (2.0 * opts.step);
      const double a = analytic[pi][c];
      worst = std::max(worst, std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + 1e-12));
    }
  }
  zero_grad(params);
  return worst;
}

}  // namespace microprobe::ad
