#pragma once

#include <map>
#include <string>
#include <vector>

namespace mf {

// Versioned binary container holding a config echo plus named double arrays.
// Layout: magic "MFCP", u32 version, config entries, arrays, FNV-1a checksum
// of everything before it. All integers little-endian.
struct Checkpoint {
    std::map<std::string, std::string> config;
    std::map<std::string, std::vector<double>> arrays;
    std::map<std::string, std::vector<int>> shapes;

    void put(const std::string& name, const std::vector<int>& shape, const std::vector<double>& data);
    const std::vector<double>& get(const std::string& name) const;
    const std::vector<int>& shape(const std::string& name) const;
    bool has(const std::string& name) const { return arrays.count(name) != 0; }

    void save(const std::string& path) const;
    static Checkpoint load(const std::string& path);
};

}  // namespace mf
