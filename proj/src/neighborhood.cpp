#include "particleformer/neighborhood.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

#include "particleformer/error.hpp"

namespace pf {

namespace {

// Spatial hash with collision tolerance: colliding cells only add candidates,
// the exact distance test filters them.
struct HashGrid {
    double cell = 0.0;
    std::unordered_map<uint64_t, std::vector<int32_t>> buckets;

    static int64_t coord(double x, double cell) {
        double c = std::floor(x / cell);
        c = std::min(std::max(c, -1.0e12), 1.0e12);
        return (int64_t)c;
    }

    static uint64_t key(int64_t cx, int64_t cy, int64_t cz) {
        uint64_t h = (uint64_t)cx * 0x9E3779B97F4A7C15ULL;
        h ^= (uint64_t)cy * 0xC2B2AE3D27D4EB4FULL;
        h ^= (uint64_t)cz * 0x165667B19E3779F9ULL;
        return h;
    }

    void build(const Tensor& pts, double c) {
        cell = c;
        buckets.clear();
        int64_t n = pts.shape[0];
        buckets.reserve((size_t)n * 2);
        for (int64_t i = 0; i < n; ++i) {
            uint64_t k = key(coord(pts.at(i, 0), cell), coord(pts.at(i, 1), cell), coord(pts.at(i, 2), cell));
            buckets[k].push_back((int32_t)i);
        }
    }

    // Candidate indices from the 27-cell neighborhood of p (deduplicated
    // bucket keys; may include non-neighbors).
    void candidates(const double* p, std::vector<int32_t>& out) const {
        out.clear();
        uint64_t keys[27];
        int nk = 0;
        int64_t cx = coord(p[0], cell), cy = coord(p[1], cell), cz = coord(p[2], cell);
        for (int64_t dx = -1; dx <= 1; ++dx)
            for (int64_t dy = -1; dy <= 1; ++dy)
                for (int64_t dz = -1; dz <= 1; ++dz) {
                    uint64_t k = key(cx + dx, cy + dy, cz + dz);
                    bool dup = false;
                    for (int q = 0; q < nk; ++q)
                        if (keys[q] == k) dup = true;
                    if (dup) continue;
                    keys[nk++] = k;
                    auto it = buckets.find(k);
                    if (it != buckets.end()) out.insert(out.end(), it->second.begin(), it->second.end());
                }
    }
};

NeighborList radius_query(const Tensor& queries, const Tensor& targets, double radius, bool exclude_same_index) {
    if (!(radius > 0.0)) fail_usage("neighborhood: radius must be positive");
    if (!queries.all_finite() || !targets.all_finite()) fail_numeric("neighborhood: non-finite positions");
    int64_t nq = queries.shape[0];
    NeighborList out;
    out.query_count = nq;
    out.offsets.assign((size_t)nq + 1, 0);
    if (targets.shape[0] == 0) return out;

    HashGrid grid;
    grid.build(targets, radius);
    const double r2 = radius * radius;

    std::vector<std::vector<int32_t>> found((size_t)nq);
#pragma omp parallel
    {
        std::vector<int32_t> cand;
#pragma omp for schedule(static)
        for (int64_t i = 0; i < nq; ++i) {
            const double* p = queries.row(i);
            grid.candidates(p, cand);
            auto& fi = found[(size_t)i];
            for (int32_t j : cand) {
                if (exclude_same_index && (int64_t)j == i) continue;
                const double* q = targets.row(j);
                double d2 = (q[0] - p[0]) * (q[0] - p[0]) + (q[1] - p[1]) * (q[1] - p[1]) +
                            (q[2] - p[2]) * (q[2] - p[2]);
                if (d2 <= r2) fi.push_back(j);
            }
            std::sort(fi.begin(), fi.end());
        }
    }
    for (int64_t i = 0; i < nq; ++i) out.offsets[i + 1] = out.offsets[i] + (int64_t)found[(size_t)i].size();
    out.indices.resize((size_t)out.offsets[nq]);
    out.disp.resize((size_t)out.offsets[nq] * 3);
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < nq; ++i) {
        const double* p = queries.row(i);
        int64_t base = out.offsets[i];
        for (size_t c = 0; c < found[(size_t)i].size(); ++c) {
            int32_t j = found[(size_t)i][c];
            out.indices[(size_t)(base + (int64_t)c)] = j;
            const double* q = targets.row(j);
            for (int64_t a = 0; a < 3; ++a) out.disp[(size_t)(base + (int64_t)c) * 3 + (size_t)a] = q[a] - p[a];
        }
    }
    return out;
}

NeighborList radius_query_bruteforce(const Tensor& queries, const Tensor& targets, double radius,
                                     bool exclude_same_index) {
    if (!(radius > 0.0)) fail_usage("neighborhood: radius must be positive");
    if (!queries.all_finite() || !targets.all_finite()) fail_numeric("neighborhood: non-finite positions");
    int64_t nq = queries.shape[0], nt = targets.shape[0];
    const double r2 = radius * radius;
    NeighborList out;
    out.query_count = nq;
    out.offsets.assign((size_t)nq + 1, 0);
    for (int64_t i = 0; i < nq; ++i) {
        const double* p = queries.row(i);
        for (int64_t j = 0; j < nt; ++j) {
            if (exclude_same_index && j == i) continue;
            const double* q = targets.row(j);
            double d2 = (q[0] - p[0]) * (q[0] - p[0]) + (q[1] - p[1]) * (q[1] - p[1]) +
                        (q[2] - p[2]) * (q[2] - p[2]);
            if (d2 <= r2) {
                out.indices.push_back((int32_t)j);
                for (int64_t a = 0; a < 3; ++a) out.disp.push_back(q[a] - p[a]);
            }
        }
        out.offsets[i + 1] = (int64_t)out.indices.size();
    }
    return out;
}

}  // namespace

NeighborList build_spatial(const Tensor& positions, double radius) {
    return radius_query(positions, positions, radius, true);
}

NeighborList build_boundary(const Tensor& positions, const BoundarySet& boundary, double radius) {
    return radius_query(positions, boundary.positions, radius, false);
}

NeighborList build_topology(const Topology& topology, const Tensor& rest_positions) {
    int64_t n = rest_positions.shape[0];
    topology.validate(n);
    auto adj = topology.adjacency(n);
    NeighborList out;
    out.query_count = n;
    out.offsets.assign((size_t)n + 1, 0);
    for (int64_t i = 0; i < n; ++i) out.offsets[i + 1] = out.offsets[i] + (int64_t)adj[(size_t)i].size();
    out.indices.resize((size_t)out.offsets[n]);
    out.disp.resize((size_t)out.offsets[n] * 3);
    for (int64_t i = 0; i < n; ++i) {
        int64_t base = out.offsets[i];
        for (size_t c = 0; c < adj[(size_t)i].size(); ++c) {
            int32_t j = adj[(size_t)i][c];
            out.indices[(size_t)(base + (int64_t)c)] = j;
            for (int64_t a = 0; a < 3; ++a)
                out.disp[(size_t)(base + (int64_t)c) * 3 + (size_t)a] =
                    rest_positions.at(j, a) - rest_positions.at(i, a);
        }
    }
    return out;
}

namespace ref {

NeighborList build_spatial_bruteforce(const Tensor& positions, double radius) {
    return radius_query_bruteforce(positions, positions, radius, true);
}

NeighborList build_boundary_bruteforce(const Tensor& positions, const BoundarySet& boundary, double radius) {
    return radius_query_bruteforce(positions, boundary.positions, radius, false);
}

}  // namespace ref

}  // namespace pf
