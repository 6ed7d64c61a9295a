#include "voxdiff/nn/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace voxdiff::nn {

namespace {

constexpr char kMagic[4] = {'V', 'X', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f64(std::vector<std::uint8_t>& out, double v) {
    put_u64(out, std::bit_cast<std::uint64_t>(v));
}

std::uint32_t get_u32(const std::uint8_t* p) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return v;
}

std::uint64_t get_u64(const std::uint8_t* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

[[noreturn]] void fail(const std::filesystem::path& path, const std::string& what) {
    throw std::runtime_error("checkpoint " + path.string() + ": " + what);
}

}  // namespace

const CheckpointTensor* CheckpointData::find(const std::string& name) const {
    for (const auto& t : tensors)
        if (t.name == name) return &t;
    return nullptr;
}

void write_checkpoint(const std::filesystem::path& path, const nlohmann::json& meta,
                      std::span<const CheckpointTensor> tensors) {
    nlohmann::json dir = nlohmann::json::array();
    for (const auto& t : tensors) {
        if (t.data.size() != t.shape.numel())
            fail(path, "tensor " + t.name + " data does not match shape");
        dir.push_back({{"name", t.name}, {"shape", t.shape.dims}, {"dtype", "f64"}});
    }
    nlohmann::json header = {{"meta", meta}, {"tensors", dir}};
    std::string header_text = header.dump();

    std::vector<std::uint8_t> body;
    body.insert(body.end(), header_text.begin(), header_text.end());
    for (const auto& t : tensors)
        for (double v : t.data) put_f64(body, v);
    std::uint32_t crc = static_cast<std::uint32_t>(
        ::crc32(0, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size())));

    std::vector<std::uint8_t> out;
    out.reserve(body.size() + 24);
    out.insert(out.end(), kMagic, kMagic + 4);
    put_u32(out, kVersion);
    put_u64(out, header_text.size());
    out.insert(out.end(), body.begin(), body.end());
    put_u32(out, crc);

    std::ofstream file(path, std::ios::binary | std::ios::trunc);
    if (!file) fail(path, "cannot open for writing");
    file.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!file) fail(path, "write failed");
}

CheckpointData read_checkpoint(const std::filesystem::path& path) {
    std::ifstream file(path, std::ios::binary);
    if (!file) fail(path, "cannot open");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(file)),
                                    std::istreambuf_iterator<char>());
    if (bytes.size() < 20) fail(path, "truncated");
    if (std::memcmp(bytes.data(), kMagic, 4) != 0) fail(path, "bad magic");
    if (get_u32(bytes.data() + 4) != kVersion) fail(path, "unsupported version");
    std::uint64_t header_len = get_u64(bytes.data() + 8);
    if (bytes.size() < 20 + header_len) fail(path, "truncated header");

    std::size_t body_len = bytes.size() - 20;
    std::uint32_t stored_crc = get_u32(bytes.data() + bytes.size() - 4);
    std::uint32_t crc = static_cast<std::uint32_t>(
        ::crc32(0, reinterpret_cast<const Bytef*>(bytes.data() + 16), static_cast<uInt>(body_len)));
    if (crc != stored_crc) fail(path, "checksum mismatch");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + 16,
                                       bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
    } catch (const nlohmann::json::exception& e) {
        fail(path, std::string("invalid header: ") + e.what());
    }

    CheckpointData out;
    out.meta = header.at("meta");
    const std::uint8_t* p = bytes.data() + 16 + header_len;
    const std::uint8_t* end = bytes.data() + bytes.size() - 4;
    for (const auto& entry : header.at("tensors")) {
        CheckpointTensor t;
        t.name = entry.at("name").get<std::string>();
        t.shape = Shape(entry.at("shape").get<std::vector<int>>());
        if (entry.at("dtype").get<std::string>() != "f64") fail(path, "unsupported dtype");
        std::size_t n = t.shape.numel();
        if (static_cast<std::size_t>(end - p) < n * 8) fail(path, "truncated payload");
        t.data.resize(n);
        for (std::size_t i = 0; i < n; ++i, p += 8)
            t.data[i] = std::bit_cast<double>(get_u64(p));
        out.tensors.push_back(std::move(t));
    }
    if (p != end) fail(path, "trailing payload bytes");
    return out;
}

void append_store_tensors(std::vector<CheckpointTensor>& out, const ParamStore& store,
                          const std::string& prefix) {
    for (const auto& p : store.params())
        out.push_back(CheckpointTensor{prefix + p.name, p.shape, p.value});
}

void load_store_tensors(ParamStore& store, const CheckpointData& ckpt, const std::string& prefix) {
    for (auto& p : store.params()) {
        const CheckpointTensor* t = ckpt.find(prefix + p.name);
        if (t == nullptr)
            throw std::runtime_error("checkpoint missing tensor " + prefix + p.name);
        if (t->shape != p.shape)
            throw std::runtime_error("checkpoint tensor " + prefix + p.name + " has shape " +
                                     t->shape.str() + ", expected " + p.shape.str());
        p.value = t->data;
    }
}

}  // namespace voxdiff::nn
