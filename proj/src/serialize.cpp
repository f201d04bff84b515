#include "mvrefine/serialize.hpp"

#include <cstring>
#include <fstream>

#include "mvrefine/common.hpp"

namespace mvr {

namespace {

constexpr uint32_t kMagic = 0x4252564d;  // "MVRB"
constexpr uint16_t kVersion = 1;

uint8_t dtype_code(torch::ScalarType t) {
    switch (t) {
        case torch::kFloat32: return 0;
        case torch::kFloat64: return 1;
        case torch::kInt64: return 2;
        case torch::kUInt8: return 3;
        default: throw ValidationError("unsupported tensor dtype for serialization");
    }
}

torch::ScalarType code_dtype(uint8_t c) {
    switch (c) {
        case 0: return torch::kFloat32;
        case 1: return torch::kFloat64;
        case 2: return torch::kInt64;
        case 3: return torch::kUInt8;
        default: throw IntegrityError("unknown dtype code in tensor blob");
    }
}

template <typename T>
void put(std::ostream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw IntegrityError("truncated tensor blob");
    return v;
}

}  // namespace

void save_tensor_map(const std::map<std::string, torch::Tensor>& tensors,
                     const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    put(out, kMagic);
    put(out, kVersion);
    put(out, static_cast<uint64_t>(tensors.size()));
    for (const auto& [name, raw] : tensors) {
        auto t = raw.detach().cpu().contiguous();
        put(out, static_cast<uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        put(out, dtype_code(t.scalar_type()));
        put(out, static_cast<uint8_t>(t.dim()));
        for (int64_t d = 0; d < t.dim(); ++d) put(out, t.size(d));
        const uint64_t nbytes = static_cast<uint64_t>(t.numel()) * t.element_size();
        put(out, nbytes);
        out.write(static_cast<const char*>(t.data_ptr()), static_cast<std::streamsize>(nbytes));
    }
    if (!out) throw std::runtime_error("write failed: " + path);
}

std::map<std::string, torch::Tensor> load_tensor_map(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IntegrityError("cannot open tensor blob: " + path);
    if (get<uint32_t>(in) != kMagic) throw IntegrityError("bad magic in tensor blob: " + path);
    if (get<uint16_t>(in) != kVersion) throw IntegrityError("unsupported blob version: " + path);
    const uint64_t count = get<uint64_t>(in);

    std::map<std::string, torch::Tensor> out;
    for (uint64_t i = 0; i < count; ++i) {
        const uint32_t name_len = get<uint32_t>(in);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        const auto dtype = code_dtype(get<uint8_t>(in));
        const uint8_t ndim = get<uint8_t>(in);
        std::vector<int64_t> dims(ndim);
        for (auto& d : dims) d = get<int64_t>(in);
        const uint64_t nbytes = get<uint64_t>(in);
        auto t = torch::empty(dims, torch::TensorOptions().dtype(dtype));
        if (static_cast<uint64_t>(t.numel()) * t.element_size() != nbytes) {
            throw IntegrityError("size mismatch for tensor '" + name + "' in " + path);
        }
        in.read(static_cast<char*>(t.data_ptr()), static_cast<std::streamsize>(nbytes));
        if (!in) throw IntegrityError("truncated tensor blob: " + path);
        out.emplace(std::move(name), std::move(t));
    }
    return out;
}

std::map<std::string, torch::Tensor> named_parameters_map(const torch::nn::Module& module) {
    std::map<std::string, torch::Tensor> out;
    for (const auto& p : module.named_parameters(/*recurse=*/true)) {
        out.emplace(p.key(), p.value());
    }
    for (const auto& b : module.named_buffers(/*recurse=*/true)) {
        out.emplace(b.key(), b.value());
    }
    return out;
}

void load_into_module(torch::nn::Module& module,
                      const std::map<std::string, torch::Tensor>& tensors) {
    torch::NoGradGuard ng;
    auto params = named_parameters_map(module);
    if (params.size() != tensors.size()) {
        throw IntegrityError("parameter count mismatch while loading weights");
    }
    for (auto& [name, dst] : params) {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw IntegrityError("missing tensor '" + name + "' in blob");
        if (!dst.sizes().equals(it->second.sizes())) {
            throw IntegrityError("shape mismatch for tensor '" + name + "'");
        }
        dst.copy_(it->second.to(dst.scalar_type()));
    }
}

std::string weights_hash(const std::map<std::string, torch::Tensor>& tensors) {
    uint64_t state = 0xcbf29ce484222325ull;
    for (const auto& [name, raw] : tensors) {
        auto t = raw.detach().cpu().contiguous();
        state = fnv1a64(name.data(), name.size(), state);
        state = fnv1a64(t.data_ptr(), static_cast<size_t>(t.numel()) * t.element_size(), state);
    }
    return hex64(state);
}

std::string module_hash(const torch::nn::Module& module) {
    return weights_hash(named_parameters_map(module));
}

void write_json(const nlohmann::json& j, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << j.dump(2) << "\n";
}

nlohmann::json read_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IntegrityError("cannot open JSON file: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IntegrityError("malformed JSON in " + path + ": " + e.what());
    }
    return j;
}

}  // namespace mvr
