#include "grad2task/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace g2t {

namespace {

constexpr char kMagic[8] = {'G', '2', 'T', 'C', 'K', 'P', 'T', '\0'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const std::string& path) {
    T v;
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw std::runtime_error("checkpoint: truncated file " + path);
    return v;
}

} // namespace

void write_tensor_file(const std::string& path, const NamedTensors& tensors) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("checkpoint: cannot open for write: " + path);
    os.write(kMagic, sizeof(kMagic));
    write_pod<std::uint32_t>(os, kVersion);
    write_pod<std::uint64_t>(os, tensors.size());
    for (const auto& [name, t] : tensors) {
        write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
        for (auto d : t.shape()) write_pod<std::uint64_t>(os, d);
        os.write(reinterpret_cast<const char*>(t.values().data()),
                 static_cast<std::streamsize>(t.size() * sizeof(double)));
    }
    if (!os) throw std::runtime_error("checkpoint: write failed: " + path);
}

NamedTensors read_tensor_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open: " + path);
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw std::runtime_error("checkpoint: bad magic in " + path);
    }
    auto version = read_pod<std::uint32_t>(is, path);
    if (version != kVersion) {
        throw std::runtime_error("checkpoint: version mismatch in " + path + " (got " +
                                 std::to_string(version) + ", expected " +
                                 std::to_string(kVersion) + ")");
    }
    auto count = read_pod<std::uint64_t>(is, path);
    NamedTensors out;
    out.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        auto name_len = read_pod<std::uint32_t>(is, path);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        if (!is) throw std::runtime_error("checkpoint: truncated file " + path);
        auto rank = read_pod<std::uint32_t>(is, path);
        Shape shape(rank);
        std::size_t n = 1;
        for (auto& d : shape) {
            d = static_cast<std::size_t>(read_pod<std::uint64_t>(is, path));
            n *= d;
        }
        std::vector<double> data(n);
        is.read(reinterpret_cast<char*>(data.data()),
                static_cast<std::streamsize>(n * sizeof(double)));
        if (!is) throw std::runtime_error("checkpoint: truncated file " + path);
        out.emplace_back(std::move(name), Tensor::from_data(std::move(shape), std::move(data)));
    }
    return out;
}

void save_checkpoint(const std::string& path, const ParamStore& store, const Adam* opt,
                     const std::map<std::string, double>& extras) {
    NamedTensors tensors;
    for (const auto& e : store.entries()) {
        if (e.name.rfind("~adam.", 0) == 0 || e.name.rfind("~x.", 0) == 0) {
            throw std::runtime_error("checkpoint: parameter name '" + e.name +
                                     "' uses a reserved prefix");
        }
        tensors.emplace_back(e.name, e.tensor);
    }
    if (opt) {
        tensors.emplace_back("~adam.t",
                             Tensor::scalar(static_cast<double>(opt->steps_taken())));
        // Serialize moments in the store's deterministic order.
        for (const auto& e : store.entries()) {
            auto it = opt->moments().find(e.name);
            if (it == opt->moments().end()) continue;
            tensors.emplace_back("~adam.m:" + e.name,
                                 Tensor::from_data({it->second.m.size()}, it->second.m));
            tensors.emplace_back("~adam.v:" + e.name,
                                 Tensor::from_data({it->second.v.size()}, it->second.v));
        }
    }
    for (const auto& [k, v] : extras) tensors.emplace_back("~x." + k, Tensor::scalar(v));
    write_tensor_file(path, tensors);
}

std::map<std::string, double> load_checkpoint(const std::string& path, ParamStore& store,
                                              Adam* opt) {
    NamedTensors tensors = read_tensor_file(path);
    std::map<std::string, double> extras;
    std::uint64_t adam_t = 0;
    std::unordered_map<std::string, Adam::Moments> moments;
    for (auto& [name, t] : tensors) {
        if (name.rfind("~adam.m:", 0) == 0) {
            moments[name.substr(8)].m.assign(t.values().begin(), t.values().end());
        } else if (name.rfind("~adam.v:", 0) == 0) {
            moments[name.substr(8)].v.assign(t.values().begin(), t.values().end());
        } else if (name == "~adam.t") {
            adam_t = static_cast<std::uint64_t>(t.scalar_value());
        } else if (name.rfind("~x.", 0) == 0) {
            extras[name.substr(3)] = t.scalar_value();
        } else {
            if (!store.has(name)) {
                throw std::runtime_error("checkpoint: parameter '" + name +
                                         "' not present in target store");
            }
            Tensor& dst = store.get(name);
            if (dst.shape() != t.shape()) {
                throw std::runtime_error("checkpoint: shape mismatch for parameter '" + name +
                                         "': file " + shape_str(t.shape()) + " vs model " +
                                         shape_str(dst.shape()));
            }
            auto src = t.values();
            auto out = dst.mutable_values();
            std::copy(src.begin(), src.end(), out.begin());
            dst.zero_grad();
        }
    }
    if (opt) opt->restore(adam_t, std::move(moments));
    return extras;
}

} // namespace g2t
