#pragma once

#include <cstdint>
#include <vector>

#include "particleformer/state.hpp"
#include "particleformer/tensor.hpp"

namespace pf {

// CSR neighbor structure. Neighbor indices are strictly ascending per query;
// displacement row p is target_position - query_position for pair p (rest
// positions for the topology branch).
struct NeighborList {
    int64_t query_count = 0;
    std::vector<int64_t> offsets;   // query_count + 1
    std::vector<int32_t> indices;   // neighbor index per pair
    std::vector<double> disp;       // 3 per pair

    int64_t pair_count() const { return (int64_t)indices.size(); }
    int64_t degree(int64_t i) const { return offsets[i + 1] - offsets[i]; }
};

// Spatial neighborhood: all j != i with |x_j - x_i| <= radius (ties at the
// radius included). Uniform hash grid with cell size = radius; results are
// deterministic for any thread count.
NeighborList build_spatial(const Tensor& positions, double radius);

// Boundary samples within radius of each particle; empty when the set is.
NeighborList build_boundary(const Tensor& positions, const BoundarySet& boundary, double radius);

// 1-ring adjacency of the rest-shape edges; displacements from rest
// positions, independent of current positions.
NeighborList build_topology(const Topology& topology, const Tensor& rest_positions);

namespace ref {
// O(N^2) oracles used by tests and the acceptance suite.
NeighborList build_spatial_bruteforce(const Tensor& positions, double radius);
NeighborList build_boundary_bruteforce(const Tensor& positions, const BoundarySet& boundary, double radius);
}  // namespace ref

}  // namespace pf
