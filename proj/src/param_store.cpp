#include "particleformer/param_store.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "particleformer/error.hpp"

static_assert(std::endian::native == std::endian::little, "checkpoint writer assumes little-endian host");

namespace pf {

Param& ParamStore::add(const std::string& path, Tensor init) {
    if (entries_.count(path)) fail_usage("ParamStore: duplicate path " + path);
    if (!init.all_finite()) fail_numeric("ParamStore: non-finite initializer for " + path);
    Param p;
    p.name = path;
    p.grad = Tensor::zeros(init.shape);
    p.value = std::move(init);
    auto [it, ok] = entries_.emplace(path, std::move(p));
    (void)ok;
    return it->second;
}

Param& ParamStore::at(const std::string& path) {
    auto it = entries_.find(path);
    if (it == entries_.end()) fail_usage("ParamStore: unknown path " + path);
    return it->second;
}

const Param& ParamStore::at(const std::string& path) const {
    auto it = entries_.find(path);
    if (it == entries_.end()) fail_usage("ParamStore: unknown path " + path);
    return it->second;
}

bool ParamStore::has(const std::string& path) const { return entries_.count(path) > 0; }

std::vector<std::string> ParamStore::paths() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& [k, v] : entries_) out.push_back(k);
    return out;
}

std::vector<std::string> ParamStore::paths_with_prefix(const std::string& prefix) const {
    std::vector<std::string> out;
    for (const auto& [k, v] : entries_)
        if (k.rfind(prefix, 0) == 0) out.push_back(k);
    return out;
}

void ParamStore::zero_grad() {
    for (auto& [k, p] : entries_) p.grad.fill(0.0);
}

double ParamStore::grad_global_norm() const {
    double s = 0.0;
    for (const auto& [k, p] : entries_)
        for (double g : p.grad.data) s += g * g;
    return std::sqrt(s);
}

double ParamStore::clip_global_norm(double max_norm) {
    double norm = grad_global_norm();
    if (norm > max_norm && norm > 0.0) {
        double scale = max_norm / norm;
        for (auto& [k, p] : entries_)
            for (double& g : p.grad.data) g *= scale;
    }
    return norm;
}

int64_t ParamStore::total_params() const {
    int64_t n = 0;
    for (const auto& [k, p] : entries_) n += p.value.numel();
    return n;
}

int64_t ParamStore::total_params_with_prefix(const std::string& prefix) const {
    int64_t n = 0;
    for (const auto& [k, p] : entries_)
        if (k.rfind(prefix, 0) == 0) n += p.value.numel();
    return n;
}

void ParamStore::save(const std::string& file) const {
    std::ofstream f(file, std::ios::binary | std::ios::trunc);
    if (!f) fail_validation("checkpoint: cannot open " + file + " for writing");
    f.write("WPCKPT1", 7);
    for (const auto& [path, p] : entries_) {
        uint32_t len = (uint32_t)path.size();
        f.write(reinterpret_cast<const char*>(&len), 4);
        f.write(path.data(), len);
        uint32_t rank = (uint32_t)p.value.shape.size();
        f.write(reinterpret_cast<const char*>(&rank), 4);
        for (int64_t d : p.value.shape) {
            uint32_t d32 = (uint32_t)d;
            f.write(reinterpret_cast<const char*>(&d32), 4);
        }
        std::vector<float> payload(p.value.data.begin(), p.value.data.end());
        f.write(reinterpret_cast<const char*>(payload.data()), (std::streamsize)(payload.size() * 4));
    }
    if (!f) fail_validation("checkpoint: write failed for " + file);
}

ParamStore ParamStore::load(const std::string& file) {
    std::ifstream f(file, std::ios::binary);
    if (!f) fail_validation("checkpoint: cannot open " + file);
    char magic[7];
    if (!f.read(magic, 7) || std::memcmp(magic, "WPCKPT1", 7) != 0)
        fail_validation("checkpoint: bad magic in " + file);
    ParamStore ps;
    for (;;) {
        uint32_t len = 0;
        if (!f.read(reinterpret_cast<char*>(&len), 4)) break;  // clean EOF
        if (len == 0 || len > 4096) fail_validation("checkpoint: implausible path length");
        std::string path(len, '\0');
        if (!f.read(path.data(), len)) fail_validation("checkpoint: truncated path");
        uint32_t rank = 0;
        if (!f.read(reinterpret_cast<char*>(&rank), 4) || rank > 8)
            fail_validation("checkpoint: bad rank for " + path);
        std::vector<int64_t> shape(rank);
        int64_t numel = 1;
        for (uint32_t i = 0; i < rank; ++i) {
            uint32_t d = 0;
            if (!f.read(reinterpret_cast<char*>(&d), 4)) fail_validation("checkpoint: truncated dims for " + path);
            shape[i] = d;
            numel *= d;
        }
        std::vector<float> payload(numel);
        if (!f.read(reinterpret_cast<char*>(payload.data()), (std::streamsize)(numel * 4)))
            fail_validation("checkpoint: truncated payload for " + path);
        Tensor t(shape);
        for (int64_t i = 0; i < numel; ++i) {
            if (!std::isfinite(payload[i])) fail_validation("checkpoint: non-finite payload in " + path);
            t.data[i] = payload[i];
        }
        ps.add(path, std::move(t));
    }
    return ps;
}

void ParamStore::copy_values_from(const ParamStore& other) {
    for (auto& [k, p] : entries_) {
        const Param& src = other.at(k);
        if (src.value.shape != p.value.shape) fail_validation("ParamStore: shape mismatch for " + k);
        p.value.data = src.value.data;
    }
}

}  // namespace pf
