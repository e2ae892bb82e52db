#pragma once

#include <functional>
#include <string>
#include <vector>

#include "cirm/params.hpp"

namespace cirm {

// loss(params, grads): evaluate the loss at `params`; when grads is
// non-null, also accumulate analytic gradients into it (it arrives
// zeroed and shaped like params). Must be deterministic.
using LossFn = std::function<double(ParameterStore&, ParameterStore*)>;

struct GradCheckEntry {
    std::string name;
    double max_rel_err = 0.0;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    bool ok = true;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double delta = 0.0;
    double tol = 0.0;
    std::size_t param_tensors = 0;
    std::size_t param_scalars = 0;

    bool all_ok() const {
        for (const auto& e : entries)
            if (!e.ok) return false;
        return true;
    }
    double worst() const {
        double w = 0.0;
        for (const auto& e : entries) w = std::max(w, e.max_rel_err);
        return w;
    }
};

// Central finite differences (f(x+delta)-f(x-delta))/(2 delta) against the
// analytic gradient; relative error |a-n| / max(|a|,|n|,1e-8) per scalar.
GradCheckReport grad_check(const LossFn& loss, ParameterStore& params, double delta,
                           double tol);

}  // namespace cirm
