#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "deepnorm/rng.hpp"
#include "deepnorm/tensor.hpp"

namespace deepnorm::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0, bool requires_grad = true) {
  std::vector<double> data(shape_numel(shape));
  for (auto& v : data) v = rng.symmetric(scale);
  return Tensor::from_data(std::move(shape), std::move(data), requires_grad);
}

// sum(out * R) for a fixed random R, so that no gradient is structurally zero.
inline Tensor random_projection(const Tensor& out, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(out, random_tensor(out.shape(), rng, 1.0, false)));
}

// Largest |analytic - numeric| / max(|numeric|, floor) over every element of
// every input, using central differences.
inline double max_fd_rel_error(std::vector<Tensor> inputs, const std::function<Tensor()>& loss_fn,
                               double h = 1e-5, double floor = 1e-8) {
  for (auto& t : inputs) t.zero_grad();
  loss_fn().backward();
  std::vector<std::vector<double>> analytic;
  for (auto& t : inputs) {
    std::vector<double> g(t.grad().begin(), t.grad().end());
    g.resize(t.numel(), 0.0);
    analytic.push_back(std::move(g));
  }
  NoGradGuard no_grad;
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto data = inputs[k].mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + h;
      const double up = loss_fn().item();
      data[i] = saved - h;
      const double down = loss_fn().item();
      data[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      worst = std::max(worst, std::abs(analytic[k][i] - numeric) / std::max(std::abs(numeric), floor));
    }
  }
  return worst;
}

}  // namespace deepnorm::testing
