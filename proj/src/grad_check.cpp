#include "cirm/grad_check.hpp"

#include <cmath>

namespace cirm {

GradCheckReport grad_check(const LossFn& loss, ParameterStore& params, double delta,
                           double tol) {
    GradCheckReport rep;
    rep.delta = delta;
    rep.tol = tol;
    rep.param_tensors = params.count();
    rep.param_scalars = params.total_scalars();

    ParameterStore grads = params.zeros_like();
    loss(params, &grads);

    for (std::size_t i = 0; i < params.count(); ++i) {
        GradCheckEntry e;
        e.name = params.name(i);
        Tensor& th = params[i];
        for (std::size_t j = 0; j < th.size(); ++j) {
            const double orig = th[j];
            th[j] = orig + delta;
            const double lp = loss(params, nullptr);
            th[j] = orig - delta;
            const double lm = loss(params, nullptr);
            th[j] = orig;
            const double numeric = (lp - lm) / (2.0 * delta);
            const double analytic = grads[i][j];
            const double rel = std::abs(analytic - numeric) /
                               std::max({std::abs(analytic), std::abs(numeric), 1e-8});
            if (rel > e.max_rel_err) {
                e.max_rel_err = rel;
                e.worst_index = j;
                e.analytic = analytic;
                e.numeric = numeric;
            }
        }
        e.ok = e.max_rel_err <= tol;
        rep.entries.push_back(std::move(e));
    }
    return rep;
}

}  // namespace cirm
