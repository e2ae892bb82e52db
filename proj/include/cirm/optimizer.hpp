#pragma once

#include <cstdint>
#include <vector>

#include "cirm/params.hpp"
#include "cirm/tensor.hpp"

namespace cirm {

struct AdamWConfig {
    double lr = 2e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-5;
};

// Decoupled-weight-decay Adam. Moments are kept per parameter tensor in
// store order; t counts completed steps.
struct OptimizerState {
    AdamWConfig cfg;
    std::int64_t t = 0;
    std::vector<Tensor> m;
    std::vector<Tensor> v;

    static OptimizerState init(const ParameterStore& params, AdamWConfig cfg);
};

// One update: t += 1, then per scalar
//   m = b1*m + (1-b1)*g,  v = b2*v + (1-b2)*g^2,
//   theta -= lr * mhat/(sqrt(vhat)+eps) + lr * wd * theta.
// Throws NonFiniteGradient if any gradient entry is not finite.
void adamw_step(ParameterStore& params, const ParameterStore& grads, OptimizerState& state);

}  // namespace cirm
