#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "particleformer/tensor.hpp"

namespace pf {

struct Param {
    std::string name;
    Tensor value;
    Tensor grad;  // same shape, accumulated by backward passes until zero_grad()
};

// All learnable parameters, addressable by stable path names. Iteration is
// lexicographic (std::map order).
class ParamStore {
  public:
    Param& add(const std::string& path, Tensor init);
    Param& at(const std::string& path);
    const Param& at(const std::string& path) const;
    bool has(const std::string& path) const;

    std::vector<std::string> paths() const;
    std::vector<std::string> paths_with_prefix(const std::string& prefix) const;

    void zero_grad();
    double grad_global_norm() const;
    // Scales all gradients by min(1, max_norm/||g||); returns the pre-clip norm.
    double clip_global_norm(double max_norm);

    int64_t total_params() const;
    int64_t total_params_with_prefix(const std::string& prefix) const;

    // Checkpoint format: magic "WPCKPT1", then per parameter in lexicographic
    // path order: u32 path length, path bytes, u32 rank, u32 dims, float32
    // payload. Little-endian throughout.
    void save(const std::string& file) const;
    static ParamStore load(const std::string& file);

    std::map<std::string, Param>& entries() { return entries_; }
    const std::map<std::string, Param>& entries() const { return entries_; }

    // Deep copy of values only (used for best-checkpoint snapshots).
    void copy_values_from(const ParamStore& other);

  private:
    std::map<std::string, Param> entries_;
};

}  // namespace pf
