#include "cirm/optimizer.hpp"

#include <cmath>

namespace cirm {

OptimizerState OptimizerState::init(const ParameterStore& params, AdamWConfig cfg) {
    OptimizerState st;
    st.cfg = cfg;
    st.m.reserve(params.count());
    st.v.reserve(params.count());
    for (const auto& [name, t] : params) {
        st.m.emplace_back(t.shape());
        st.v.emplace_back(t.shape());
    }
    return st;
}

void adamw_step(ParameterStore& params, const ParameterStore& grads, OptimizerState& state) {
    if (grads.count() != params.count() || state.m.size() != params.count())
        throw DimensionError("adamw_step: parameter/gradient/state mismatch");
    for (std::size_t i = 0; i < params.count(); ++i) {
        if (!grads[i].same_shape(params[i]))
            throw DimensionError("adamw_step: gradient shape mismatch for " + params.name(i));
        if (!grads[i].all_finite())
            throw NonFiniteGradient("adamw_step: non-finite gradient in " + params.name(i));
    }
    state.t += 1;
    const AdamWConfig& c = state.cfg;
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.t));
    for (std::size_t i = 0; i < params.count(); ++i) {
        Tensor& th = params[i];
        const Tensor& g = grads[i];
        Tensor& m = state.m[i];
        Tensor& v = state.v[i];
        for (std::size_t j = 0; j < th.size(); ++j) {
            m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
            v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            th[j] -= c.lr * mhat / (std::sqrt(vhat) + c.eps) + c.lr * c.weight_decay * th[j];
        }
    }
}

}  // namespace cirm
