#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "msm/autodiff.hpp"
#include "msm/rng.hpp"

namespace msm {

struct GradCheckReport {
    std::map<std::string, double> max_rel_err;  // per parameter path
    double worst = 0.0;
    std::string worst_param;

    bool passed(double tolerance) const { return worst < tolerance; }
};

// Central finite differences against the analytic backward pass.
// rel err = |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
// With max_entries_per_param > 0 only a random entry subset per tensor is
// probed, which keeps full-model checks tractable.
inline GradCheckReport check_gradients(ParamSet& params, const std::function<NodePtr(ParamNodes&)>& builder,
                                       double fd_step = 1e-4, std::int64_t max_entries_per_param = 0,
                                       std::uint64_t sample_seed = 0) {
    auto eval_loss = [&]() {
        ParamNodes nodes(params, true);
        NodePtr loss = builder(nodes);
        if (loss->value.numel() != 1) throw ContractError("check_gradients: builder must produce a scalar loss");
        return loss;
    };

    params.zero_grads();
    backward(eval_loss(), params);
    std::map<std::string, Tensor> analytic = params.grads;

    GradCheckReport report;
    Rng rng(sample_seed ^ 0x5ca1ab1eull);
    for (auto& [name, value] : params.values) {
        const std::int64_t n = value.numel();
        std::vector<std::int64_t> entries;
        if (max_entries_per_param <= 0 || n <= max_entries_per_param) {
            entries.resize(static_cast<std::size_t>(n));
            for (std::int64_t i = 0; i < n; ++i) entries[static_cast<std::size_t>(i)] = i;
        } else {
            for (std::int64_t i = 0; i < max_entries_per_param; ++i)
                entries.push_back(static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(n))));
        }
        double worst = 0.0;
        for (std::int64_t e : entries) {
            const double saved = value[e];
            value[e] = saved + fd_step;
            const double up = eval_loss()->value[0];
            value[e] = saved - fd_step;
            const double dn = eval_loss()->value[0];
            value[e] = saved;
            const double numeric = (up - dn) / (2.0 * fd_step);
            const double a = analytic.at(name)[e];
            const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
            worst = std::max(worst, std::fabs(a - numeric) / denom);
        }
        report.max_rel_err[name] = worst;
        if (worst >= report.worst) {
            report.worst = worst;
            report.worst_param = name;
        }
    }
    return report;
}

}  // namespace msm
