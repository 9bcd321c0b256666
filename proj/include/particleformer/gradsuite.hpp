#pragma once

#include <string>
#include <vector>

#include "particleformer/model.hpp"

namespace pf {

struct SuiteEntry {
    std::string name;
    double max_rel_err = 0.0;
    double tol = 1e-4;
    bool pass() const { return max_rel_err < tol; }
};

// Finite-difference verification of every differentiable op, each model
// block, the full corrector (small configuration), and the W=3 rollout
// gradient w.r.t. a non-mass attribute channel (tol 1e-3 there).
// `modules` filters by name: ops, tokenizer, attention, encoder, decoder,
// corrector, rollout; empty runs everything.
std::vector<SuiteEntry> gradient_suite(const std::vector<std::string>& modules = {});

}  // namespace pf
