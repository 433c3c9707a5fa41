#pragma once

#include <cmath>
#include <functional>

#include "xmap/mapper.hpp"
#include "xmap/tensor.hpp"

namespace testutil {

// Finite-difference oracle over every model parameter: the analytic gradient
// from one taped forward/backward is compared against central differences of
// re-evaluated forwards at perturbed parameters. `builder` must be a pure
// function of the bound parameters.
using LossBuilder = std::function<xmap::ad::Value(xmap::ad::Tape&, xmap::model::ParamBinding&)>;

inline double fd_check_params(const xmap::model::MapperParams& params, const LossBuilder& builder,
                              double eps = 1e-5, double abs_floor = 1e-3) {
    using namespace xmap;

    std::vector<ad::Tensor> analytic;
    {
        ad::Tape tape;
        model::ParamBinding bind(tape, params);
        ad::Value loss = builder(tape, bind);
        tape.backward(loss);
        analytic = bind.grads();
    }

    auto eval = [&](const model::MapperParams& p) {
        ad::Tape tape;
        model::ParamBinding bind(tape, p);
        return tape.value(builder(tape, bind)).item();
    };

    model::MapperParams work = params;
    double worst = 0.0;
    for (std::size_t pi = 0; pi < work.named.size(); ++pi) {
        ad::Tensor& t = work.named[pi].tensor;
        for (std::size_t i = 0; i < t.size(); ++i) {
            double orig = t[i];
            double h = eps * std::max(1.0, std::abs(orig));
            t[i] = orig + h;
            double fp = eval(work);
            t[i] = orig - h;
            double fm = eval(work);
            t[i] = orig;
            double numeric = (fp - fm) / (2.0 * h);
            double a = analytic[pi][i];
            double rel = std::abs(a - numeric) / std::max(abs_floor, std::abs(numeric));
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

} // namespace testutil
