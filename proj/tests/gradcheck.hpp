#pragma once

// Finite-difference gradient oracle for tests. Central differences with step
// 1e-5 against analytic grads, relative error |a-n| / max(1, |a|, |n|).
// Independent of the autodiff path: it only re-evaluates the forward closure.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mept/tensor.hpp"

namespace mept::testing {

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst;  // "tensor#k[i]" of the worst coordinate
};

// `forward` must rebuild the graph from the leaves and return a scalar loss.
inline GradCheckResult gradcheck(const std::function<Tensor()>& forward,
                                 const std::vector<Tensor>& leaves, double step = 1e-5) {
  Tensor loss = forward();
  for (const Tensor& leaf : leaves) leaf.raw()->grad.clear();
  backward(loss);
  std::vector<std::vector<double>> analytic;
  for (const Tensor& leaf : leaves) analytic.push_back(leaf.grad());

  GradCheckResult res;
  for (size_t t = 0; t < leaves.size(); ++t) {
    Tensor leaf = leaves[t];
    for (size_t i = 0; i < leaf.numel(); ++i) {
      double orig = leaf.values()[i];
      leaf.values_mut()[i] = orig + step;
      double fp = forward().item();
      leaf.values_mut()[i] = orig - step;
      double fm = forward().item();
      leaf.values_mut()[i] = orig;
      double numeric = (fp - fm) / (2.0 * step);
      double a = analytic[t][i];
      double rel = std::fabs(a - numeric) / std::max({1.0, std::fabs(a), std::fabs(numeric)});
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst = "tensor#" + std::to_string(t) + "[" + std::to_string(i) + "] analytic=" +
                    std::to_string(a) + " numeric=" + std::to_string(numeric);
      }
    }
  }
  return res;
}

inline Tensor random_tensor(std::vector<int> shape, Rng& rng, bool requires_grad = true,
                            double scale = 1.0) {
  size_t n = 1;
  for (int d : shape) n *= static_cast<size_t>(d);
  std::vector<double> data(n);
  for (double& v : data) v = rng.normal() * scale;
  return Tensor::from_data(std::move(shape), std::move(data), requires_grad);
}

}  // namespace mept::testing
