#pragma once

// Whole-model gradient check on a seeded probe batch.

#include <random>

#include "evl/grad_check.hpp"
#include "evl/model.hpp"

namespace evl {

/// Adapters start with B = 0, which makes the A gradients vanish. The check
/// first moves every adapter weight to U(-0.1, 0.1) so both factors carry
/// signal, then compares gradients on two probe images in inference mode.
template <class T> GradCheckReport model_grad_check(Classifier<T> &model, const GradCheckOptions &opt = {}) {
  std::mt19937_64 rng(opt.seed ^ 0x9e3779b97f4a7c15ULL);
  for (auto &e : model.params().entries()) {
    if (e.group == "lora") e.var.mutable_value() = Tensor<T>::uniform(e.var.shape(), rng, T(-0.1), T(0.1));
  }
  const std::size_t s = model.config().image_size;
  const Tensor<T> probe = Tensor<T>::uniform({2, 3, s, s}, rng, T(-1), T(1));
  const std::vector<std::size_t> labels{1, 2};
  model.set_training(false);
  const Tensor<T> prefix = model.frozen_prefix(probe);
  return grad_check<T>([&] { return cross_entropy(model.forward_from_prefix(constant(prefix)), labels); },
                       model.params(), opt);
}

} // namespace evl
