#pragma once

#include <string>
#include <vector>

#include "particleformer/state.hpp"

namespace pf {

// Desk-scale ground-truth generators with known physics. The steppers here
// are semi-implicit Euler at dt/10 substeps (recording every 10th state) and
// share no code with the simulator module, so they qualify as oracles.
// Scenes live in the unit box. The forces channel always carries the known
// external force only (gravity); contact, friction and springs are the
// residuals a corrector has to learn.

struct ToyParams {
    int64_t particles = 64;
    int64_t frames = 60;
    double dt = 0.02;
    double gravity[3] = {0.0, 0.0, -9.8};
    double floor_height = 0.2;
    double contact_stiffness = 400.0;
    double contact_damping = 8.0;
    double friction_mu = 0.3;          // slide scenario, attribute channel 1
    int64_t grid_x = 6, grid_y = 6;    // spring lattice
    double spring_stiffness = 80.0;
    double spring_rest_length = 0.08;
    double spring_damping = 0.4;
    double spring_initial_stretch = 0.0;  // fractional x-direction pre-stretch
    double velocity_jitter = 0.05;
    bool pin_corners = true;
};

// Non-interacting particles under gravity; closed-form exact states.
Trajectory gen_ballistic(const ToyParams& p, uint64_t seed);

// Free fall onto a penalty floor: f = k max(0, h-z) z_hat - c v_z [z<h].
// Attributes: [mass]. Boundary: floor samples with +z normals.
Trajectory gen_floor_contact(const ToyParams& p, uint64_t seed);

// Mass-spring sheet with grid-edge topology, optional pinned corners.
// Attributes: [mass, pinned_flag]. Pinned particles carry zero force.
Trajectory gen_spring_lattice(const ToyParams& p, uint64_t seed);

// Blob sliding on the floor with smoothed Coulomb friction
// f_t = -mu f_n v_t / (|v_t| + eps). Attributes: [mass, mu].
Trajectory gen_slide_friction(const ToyParams& p, uint64_t seed);

// Writes numbered trajectory files plus `manifest.txt` lines of
// "<file> <train|val|test>"; split sizes follow the given fractions.
void write_dataset(const std::string& dir, const std::string& base,
                   const std::vector<Trajectory>& trajectories, double train_frac = 0.8,
                   double val_frac = 0.1);

struct DatasetSplits {
    std::vector<Trajectory> train, val, test;
};
DatasetSplits load_dataset(const std::string& dir);

}  // namespace pf
