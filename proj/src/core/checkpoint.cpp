#include "core/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

#include "core/errors.hpp"

namespace mf {

namespace {

constexpr char kMagic[4] = {'M', 'F', 'C', 'P'};
constexpr std::uint32_t kVersion = 1;

void append_u32(std::string& buf, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void append_u64(std::string& buf, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void append_string(std::string& buf, const std::string& s) {
    append_u64(buf, s.size());
    buf += s;
}

void append_doubles(std::string& buf, const std::vector<double>& v) {
    append_u64(buf, v.size());
    std::size_t at = buf.size();
    buf.resize(buf.size() + v.size() * sizeof(double));
    std::memcpy(buf.data() + at, v.data(), v.size() * sizeof(double));
}

struct Reader {
    const std::string& buf;
    std::size_t pos = 0;

    void need(std::size_t n) const {
        if (pos + n > buf.size()) throw DataError("truncated checkpoint data");
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 8;
        return v;
    }
    std::string str() {
        std::uint64_t n = u64();
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
    std::vector<double> doubles() {
        std::uint64_t n = u64();
        need(n * sizeof(double));
        std::vector<double> v(n);
        std::memcpy(v.data(), buf.data() + pos, n * sizeof(double));
        pos += n * sizeof(double);
        return v;
    }
};

std::uint64_t fnv1a(const std::string& data) {
    std::uint64_t h = 1469598103934665603ULL;
    for (char c : data) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ULL;
    }
    return h;
}

}  // namespace

void Checkpoint::put(const std::string& name, const std::vector<int>& shp,
                     const std::vector<double>& data) {
    std::size_t n = 1;
    for (int d : shp) n *= static_cast<std::size_t>(d);
    if (n != data.size()) throw DataError("checkpoint array '" + name + "' shape/data mismatch");
    arrays[name] = data;
    shapes[name] = shp;
}

const std::vector<double>& Checkpoint::get(const std::string& name) const {
    auto it = arrays.find(name);
    if (it == arrays.end()) throw DataError("checkpoint is missing array '" + name + "'");
    return it->second;
}

const std::vector<int>& Checkpoint::shape(const std::string& name) const {
    auto it = shapes.find(name);
    if (it == shapes.end()) throw DataError("checkpoint is missing array '" + name + "'");
    return it->second;
}

void Checkpoint::save(const std::string& path) const {
    std::string buf;
    buf.append(kMagic, 4);
    append_u32(buf, kVersion);
    append_u64(buf, config.size());
    for (const auto& [k, v] : config) {
        append_string(buf, k);
        append_string(buf, v);
    }
    append_u64(buf, arrays.size());
    for (const auto& [name, data] : arrays) {
        append_string(buf, name);
        const auto& shp = shapes.at(name);
        append_u64(buf, shp.size());
        for (int d : shp) append_u64(buf, static_cast<std::uint64_t>(d));
        append_doubles(buf, data);
    }
    append_u64(buf, fnv1a(buf));

    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint: " + path);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw DataError("checkpoint write failed: " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifactError("missing checkpoint: " + path);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    if (buf.size() < 16 || std::memcmp(buf.data(), kMagic, 4) != 0) {
        throw DataError("not a checkpoint file: " + path);
    }
    std::string payload = buf.substr(0, buf.size() - 8);
    Reader tail{buf, buf.size() - 8};
    if (tail.u64() != fnv1a(payload)) {
        throw DataError("checkpoint integrity check failed: " + path);
    }

    Reader r{buf, 4};
    std::uint32_t version = r.u32();
    if (version != kVersion) {
        throw DataError("unsupported checkpoint version " + std::to_string(version) + ": " + path);
    }
    Checkpoint ckpt;
    std::uint64_t n_cfg = r.u64();
    for (std::uint64_t i = 0; i < n_cfg; ++i) {
        std::string k = r.str();
        ckpt.config[k] = r.str();
    }
    std::uint64_t n_arr = r.u64();
    for (std::uint64_t i = 0; i < n_arr; ++i) {
        std::string name = r.str();
        std::uint64_t ndim = r.u64();
        std::vector<int> shp(ndim);
        for (auto& d : shp) d = static_cast<int>(r.u64());
        ckpt.arrays[name] = r.doubles();
        ckpt.shapes[name] = shp;
    }
    return ckpt;
}

}  // namespace mf
