#pragma once

#include <string>

#include "particleformer/state.hpp"

namespace pf {

// Chunked binary trajectory format:
//   ASCII magic "WPTRAJ1"
//   u32 counts: N, N_b, C_p, C_b, W_total, edge_count   (little-endian)
//   f64 dt
//   f32 arrays in order: X0 (N*3), C (N*C_p), boundary X (N_b*3),
//   boundary C (N_b*C_b), edges (edge_count*2), then per frame X, V, F
//   (N*3 each). All payloads little-endian IEEE-754.
void save_trajectory(const Trajectory& traj, const std::string& file);
Trajectory load_trajectory(const std::string& file);

}  // namespace pf
