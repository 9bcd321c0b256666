#include "particleformer/gradcheck.hpp"

#include <cmath>

namespace pf {

double grad_rel_err(double ad, double fd) {
    double denom = std::max({std::fabs(ad), std::fabs(fd), 1e-7});
    return std::fabs(ad - fd) / denom;
}

double fd_max_rel_err(double* x, int64_t n, const double* ad, const std::function<double()>& loss,
                      double h) {
    double worst = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        double saved = x[i];
        x[i] = saved + h;
        double lp = loss();
        x[i] = saved - h;
        double lm = loss();
        x[i] = saved;
        double fd = (lp - lm) / (2.0 * h);
        worst = std::max(worst, grad_rel_err(ad[i], fd));
    }
    return worst;
}

GradCheckReport grad_check(ParamStore& ps, const std::vector<std::string>& paths,
                           const std::function<double(bool)>& eval, double h) {
    std::vector<std::string> targets = paths.empty() ? ps.paths() : paths;
    eval(true);  // populate reverse-mode grads
    // Snapshot them: FD evaluations below must not disturb the comparison.
    std::vector<std::vector<double>> ad;
    ad.reserve(targets.size());
    for (const auto& name : targets) ad.push_back(ps.at(name).grad.data);

    GradCheckReport report;
    for (size_t t = 0; t < targets.size(); ++t) {
        Param& p = ps.at(targets[t]);
        GradCheckEntry entry;
        entry.name = targets[t];
        entry.elements = p.value.numel();
        entry.max_rel_err = fd_max_rel_err(p.value.data.data(), p.value.numel(), ad[t].data(),
                                           [&] { return eval(false); }, h);
        report.entries.push_back(entry);
    }
    return report;
}

}  // namespace pf
