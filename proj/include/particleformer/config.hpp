#pragma once

#include <cstdint>
#include <map>
#include <string>

namespace pf {

// Flat `key = value` text configuration. `#` starts a comment; blank lines
// ignored. dump() emits a canonical (lexicographically sorted) form, so
// parse(dump(parse(f))) == parse(f).
class KeyValueConfig {
  public:
    static KeyValueConfig parse_file(const std::string& path);
    static KeyValueConfig parse_string(const std::string& text, const std::string& origin = "<string>");

    std::string dump() const;

    bool has(const std::string& key) const { return kv_.count(key) > 0; }
    std::string get_string(const std::string& key, const std::string& fallback) const;
    double get_double(const std::string& key, double fallback) const;
    int64_t get_int(const std::string& key, int64_t fallback) const;

    void set(const std::string& key, const std::string& value) { kv_[key] = value; }
    void set(const std::string& key, double value);
    void set(const std::string& key, int64_t value);

    const std::map<std::string, std::string>& entries() const { return kv_; }
    bool operator==(const KeyValueConfig& o) const { return kv_ == o.kv_; }

  private:
    std::map<std::string, std::string> kv_;
};

}  // namespace pf
