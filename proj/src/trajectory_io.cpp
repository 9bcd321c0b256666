#include "particleformer/trajectory_io.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "particleformer/error.hpp"

static_assert(std::endian::native == std::endian::little, "trajectory writer assumes little-endian host");

namespace pf {

namespace {

void write_f32_array(std::ofstream& f, const Tensor& t, const std::string& field) {
    std::vector<float> buf(t.data.size());
    for (size_t i = 0; i < t.data.size(); ++i) {
        if (!std::isfinite(t.data[i])) fail_validation("trajectory: non-finite payload in " + field);
        buf[i] = (float)t.data[i];
    }
    f.write(reinterpret_cast<const char*>(buf.data()), (std::streamsize)(buf.size() * 4));
}

Tensor read_f32_array(std::ifstream& f, std::vector<int64_t> shape, const std::string& field) {
    Tensor t(std::move(shape));
    std::vector<float> buf((size_t)t.numel());
    if (!f.read(reinterpret_cast<char*>(buf.data()), (std::streamsize)(buf.size() * 4)))
        fail_validation("trajectory: truncated file while reading " + field);
    for (size_t i = 0; i < buf.size(); ++i) {
        if (!std::isfinite(buf[i])) fail_validation("trajectory: non-finite payload in " + field);
        t.data[i] = buf[i];
    }
    return t;
}

uint32_t read_u32(std::ifstream& f, const std::string& field) {
    uint32_t v = 0;
    if (!f.read(reinterpret_cast<char*>(&v), 4)) fail_validation("trajectory: malformed header, missing " + field);
    return v;
}

}  // namespace

void save_trajectory(const Trajectory& traj, const std::string& file) {
    traj.validate();
    std::ofstream f(file, std::ios::binary | std::ios::trunc);
    if (!f) fail_validation("trajectory: cannot open " + file + " for writing");
    f.write("WPTRAJ1", 7);
    uint32_t counts[6] = {(uint32_t)traj.particle_count(), (uint32_t)traj.boundary.count,
                          (uint32_t)traj.attr_dim(),       (uint32_t)traj.boundary.attr_dim(),
                          (uint32_t)traj.frame_count(),    (uint32_t)traj.topology.edges.size()};
    f.write(reinterpret_cast<const char*>(counts), sizeof(counts));
    f.write(reinterpret_cast<const char*>(&traj.dt), 8);
    write_f32_array(f, traj.rest_positions, "rest_positions");
    write_f32_array(f, traj.attributes, "attributes");
    write_f32_array(f, traj.boundary.positions, "boundary.positions");
    write_f32_array(f, traj.boundary.attributes, "boundary.attributes");
    Tensor edges({(int64_t)traj.topology.edges.size(), 2});
    for (size_t e = 0; e < traj.topology.edges.size(); ++e) {
        edges.at((int64_t)e, 0) = traj.topology.edges[e].first;
        edges.at((int64_t)e, 1) = traj.topology.edges[e].second;
    }
    write_f32_array(f, edges, "edges");
    for (size_t i = 0; i < traj.frames.size(); ++i) {
        const auto tag = "frame " + std::to_string(i);
        write_f32_array(f, traj.frames[i].positions, tag + " positions");
        write_f32_array(f, traj.frames[i].velocities, tag + " velocities");
        write_f32_array(f, traj.frames[i].forces, tag + " forces");
    }
    if (!f) fail_validation("trajectory: write failed for " + file);
}

Trajectory load_trajectory(const std::string& file) {
    std::ifstream f(file, std::ios::binary);
    if (!f) fail_validation("trajectory: cannot open " + file);
    char magic[7];
    if (!f.read(magic, 7) || std::memcmp(magic, "WPTRAJ1", 7) != 0)
        fail_validation("trajectory: malformed header, bad magic in " + file);
    int64_t n = read_u32(f, "N");
    int64_t nb = read_u32(f, "N_b");
    int64_t cp = read_u32(f, "C_p");
    int64_t cb = read_u32(f, "C_b");
    int64_t frames = read_u32(f, "W_total");
    int64_t edge_count = read_u32(f, "edge_count");
    if (n < 1 || cp < 1 || frames < 1) fail_validation("trajectory: malformed header, implausible counts");
    Trajectory t;
    if (!f.read(reinterpret_cast<char*>(&t.dt), 8)) fail_validation("trajectory: malformed header, missing dt");
    if (!(t.dt > 0.0) || !std::isfinite(t.dt)) fail_validation("trajectory: dt must be positive");
    t.rest_positions = read_f32_array(f, {n, 3}, "rest_positions");
    t.attributes = read_f32_array(f, {n, cp}, "attributes");
    t.boundary.count = nb;
    t.boundary.positions = read_f32_array(f, {nb, 3}, "boundary.positions");
    t.boundary.attributes = read_f32_array(f, {nb, cb}, "boundary.attributes");
    Tensor edges = read_f32_array(f, {edge_count, 2}, "edges");
    t.topology.edges.reserve((size_t)edge_count);
    for (int64_t e = 0; e < edge_count; ++e) {
        double a = edges.at(e, 0), b = edges.at(e, 1);
        if (a != std::floor(a) || b != std::floor(b) || a < 0 || b < 0 || a >= (double)n || b >= (double)n)
            fail_validation("trajectory: edges contain invalid vertex index at row " + std::to_string(e));
        t.topology.edges.emplace_back((int32_t)a, (int32_t)b);
    }
    t.frames.resize((size_t)frames);
    for (int64_t i = 0; i < frames; ++i) {
        const auto tag = "frame " + std::to_string(i);
        t.frames[i].positions = read_f32_array(f, {n, 3}, tag + " positions");
        t.frames[i].velocities = read_f32_array(f, {n, 3}, tag + " velocities");
        t.frames[i].forces = read_f32_array(f, {n, 3}, tag + " forces");
    }
    t.validate();
    return t;
}

}  // namespace pf
