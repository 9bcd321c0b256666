#pragma once

#include <functional>
#include <string>
#include <vector>

#include "particleformer/param_store.hpp"

namespace pf {

struct GradCheckEntry {
    std::string name;
    double max_rel_err = 0.0;
    int64_t elements = 0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double worst() const {
        double w = 0.0;
        for (const auto& e : entries) w = std::max(w, e.max_rel_err);
        return w;
    }
    bool pass(double tol) const { return worst() < tol; }
};

// |ad - fd| / max(|ad|, |fd|, 1e-7); the floor absorbs central-difference
// roundoff noise when the true derivative is zero.
double grad_rel_err(double ad, double fd);

// Central finite differences on a raw array against precomputed reverse-mode
// gradients. loss() must re-evaluate the forward pass from *x.
double fd_max_rel_err(double* x, int64_t n, const double* ad, const std::function<double()>& loss,
                      double h = 1e-4);

// Checks d loss / d param for each listed path (all paths when empty).
// eval(with_grad): zero grads, build the computation, backward when asked,
// return the scalar loss.
GradCheckReport grad_check(ParamStore& ps, const std::vector<std::string>& paths,
                           const std::function<double(bool with_grad)>& eval, double h = 1e-4);

}  // namespace pf
