#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "pgcam/model.hpp"
#include "pgcam/tensor.hpp"

namespace pgcam {

inline constexpr std::uint16_t kCheckpointVersion = 1;

namespace detail {

struct ByteWriter {
    std::vector<std::uint8_t> bytes;

    void u8(std::uint8_t v) { bytes.push_back(v); }
    void u16(std::uint16_t v) {
        bytes.push_back(std::uint8_t(v));
        bytes.push_back(std::uint8_t(v >> 8));
    }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) bytes.push_back(std::uint8_t(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) bytes.push_back(std::uint8_t(v >> (8 * i)));
    }
    void raw(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        bytes.insert(bytes.end(), b, b + n);
    }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
};

struct ByteReader {
    const std::uint8_t* p;
    std::size_t left;
    std::string origin;

    void need(std::size_t n) const {
        if (left < n)
            fail("checkpoint: unexpected end of file in ", origin, " (need ", n, " more bytes, have ",
                 left, ")");
    }
    std::uint8_t u8() {
        need(1);
        --left;
        return *p++;
    }
    std::uint16_t u16() {
        need(2);
        std::uint16_t v = std::uint16_t(p[0]) | std::uint16_t(p[1]) << 8;
        p += 2;
        left -= 2;
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(p[i]) << (8 * i);
        p += 4;
        left -= 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t(p[i]) << (8 * i);
        p += 8;
        left -= 8;
        return v;
    }
    void raw(void* out, std::size_t n) {
        need(n);
        std::memcpy(out, p, n);
        p += n;
        left -= n;
    }
    float f32() { return std::bit_cast<float>(u32()); }
    double f64() { return std::bit_cast<double>(u64()); }
};

template <typename T>
void write_tensor_entry(ByteWriter& w, const std::string& name, const Tensor<T>& t) {
    if (name.size() > 0xffff) fail("checkpoint: tensor name too long: ", name);
    w.u16(std::uint16_t(name.size()));
    w.raw(name.data(), name.size());
    w.u8(std::uint8_t(sizeof(T)));
    w.u8(std::uint8_t(t.rank()));
    for (std::size_t e : t.shape) w.u32(std::uint32_t(e));
    if constexpr (sizeof(T) == 4)
        for (T v : t.data) w.f32(float(v));
    else
        for (T v : t.data) w.f64(double(v));
}

template <typename T>
std::pair<std::string, Tensor<T>> read_tensor_entry(ByteReader& r) {
    const std::uint16_t len = r.u16();
    std::string name(len, '\0');
    r.raw(name.data(), len);
    r.origin = "tensor '" + name + "'";
    const std::uint8_t dtype = r.u8();
    if (dtype != sizeof(T))
        fail("checkpoint: tensor '", name, "' stores ", unsigned(dtype) * 8,
             "-bit values but this model uses ", sizeof(T) * 8, "-bit");
    const std::uint8_t rank = r.u8();
    Shape shape(rank);
    for (auto& e : shape) e = r.u32();
    Tensor<T> t(shape);
    if constexpr (sizeof(T) == 4)
        for (auto& v : t.data) v = T(r.f32());
    else
        for (auto& v : t.data) v = T(r.f64());
    return {std::move(name), std::move(t)};
}

inline void write_file_atomic(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) fail("checkpoint: cannot open '", tmp, "' for writing");
        out.write(reinterpret_cast<const char*>(bytes.data()),
                  std::streamsize(bytes.size()));
        if (!out) fail("checkpoint: short write to '", tmp, "'");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp, ec);
        fail("checkpoint: cannot move '", tmp, "' into place: ", ec.message());
    }
}

inline std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) fail("checkpoint: cannot open '", path, "'");
    const std::streamsize n = in.tellg();
    in.seekg(0);
    std::vector<std::uint8_t> bytes(static_cast<std::size_t>(n), 0);
    in.read(reinterpret_cast<char*>(bytes.data()), n);
    if (!in) fail("checkpoint: short read from '", path, "'");
    return bytes;
}

} // namespace detail

template <typename T>
using NamedTensors = std::vector<std::pair<std::string, Tensor<T>>>;

/// Serialize the model (parameters + batch-norm running statistics) and any
/// extra named tensors (e.g. optimizer state) to `path`. The file appears
/// atomically: it is staged beside the target and renamed into place.
template <typename T>
void save_checkpoint(Model<T>& model, const std::string& path,
                     const NamedTensors<T>* extra = nullptr) {
    if (!model.all_finite())
        fail("checkpoint: refusing to save non-finite model state to '", path, "'");
    detail::ByteWriter w;
    w.raw("PGCK", 4);
    w.u16(kCheckpointVersion);
    w.u8(std::uint8_t(model.kind()));
    const ModelConfig& c = model.config();
    w.u32(std::uint32_t(c.input_size));
    w.u32(std::uint32_t(c.scales));
    w.u32(std::uint32_t(c.base_channels));
    w.u32(std::uint32_t(c.num_classes));
    w.u8(c.dense ? 1 : 0);

    std::size_t count = 0;
    model.for_each_state_tensor([&](const std::string&, Tensor<T>&) { ++count; });
    if (extra) count += extra->size();
    w.u32(std::uint32_t(count));
    model.for_each_state_tensor(
        [&](const std::string& name, Tensor<T>& t) { detail::write_tensor_entry(w, name, t); });
    if (extra)
        for (const auto& [name, t] : *extra) detail::write_tensor_entry(w, name, t);

    detail::write_file_atomic(path, w.bytes);
}

template <typename T>
struct LoadedCheckpoint {
    Model<T> model;
    NamedTensors<T> extra; // entries not owned by the model, in file order
};

namespace detail {

template <typename T>
LoadedCheckpoint<T> parse_checkpoint(const std::vector<std::uint8_t>& bytes,
                                     const std::string& path) {
    ByteReader r{bytes.data(), bytes.size(), "header"};
    char magic[4];
    r.raw(magic, 4);
    if (std::memcmp(magic, "PGCK", 4) != 0)
        fail("checkpoint: '", path, "' is not a checkpoint file (bad magic)");
    const std::uint16_t version = r.u16();
    if (version != kCheckpointVersion)
        fail("checkpoint: '", path, "' has format version ", version, "; this build reads version ",
             kCheckpointVersion);
    const std::uint8_t kind_tag = r.u8();
    if (kind_tag > 1) fail("checkpoint: unknown model kind tag ", unsigned(kind_tag));
    ModelConfig cfg;
    cfg.input_size = r.u32();
    cfg.scales = r.u32();
    cfg.base_channels = r.u32();
    cfg.num_classes = r.u32();
    cfg.dense = r.u8() != 0;
    cfg.validate();

    const std::uint32_t count = r.u32();
    std::unordered_map<std::string, Tensor<T>> entries;
    NamedTensors<T> order;
    for (std::uint32_t i = 0; i < count; ++i) {
        auto [name, t] = read_tensor_entry<T>(r);
        if (entries.count(name)) fail("checkpoint: duplicate tensor '", name, "' in '", path, "'");
        entries.emplace(name, t);
        order.emplace_back(std::move(name), std::move(t));
    }
    if (r.left != 0) fail("checkpoint: ", r.left, " trailing bytes in '", path, "'");

    LoadedCheckpoint<T> out{build_model<T>(ModelKind(kind_tag), cfg, 0), {}};
    out.model.for_each_state_tensor([&](const std::string& name, Tensor<T>& t) {
        auto it = entries.find(name);
        if (it == entries.end())
            fail("checkpoint: '", path, "' is missing tensor '", name, "' required by the ",
                 model_kind_name(out.model.kind()), " topology");
        if (it->second.shape != t.shape)
            fail("checkpoint: tensor '", name, "' has shape ", shape_str(it->second.shape),
                 " but the topology needs ", shape_str(t.shape));
        t = it->second;
        entries.erase(it);
    });
    for (auto& [name, t] : order)
        if (entries.count(name)) out.extra.emplace_back(name, std::move(t));
    return out;
}

} // namespace detail

/// Rebuild a model (and any extra tensors) from a checkpoint file. The file
/// fully describes the topology; parameters round-trip bit-exactly.
template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::string& path) {
    return detail::parse_checkpoint<T>(detail::read_file(path), path);
}

/// Load a checkpoint into an existing model, requiring an identical topology.
template <typename T>
NamedTensors<T> load_checkpoint_into(Model<T>& model, const std::string& path) {
    auto loaded = load_checkpoint<T>(path);
    if (loaded.model.kind() != model.kind() || !(loaded.model.config() == model.config()))
        fail("checkpoint: '", path, "' holds a ", model_kind_name(loaded.model.kind()),
             " (input ", loaded.model.config().input_size, ", scales ",
             loaded.model.config().scales, ", base ", loaded.model.config().base_channels,
             ", dense ", loaded.model.config().dense, ") and cannot load into a ",
             model_kind_name(model.kind()), " (input ", model.config().input_size, ", scales ",
             model.config().scales, ", base ", model.config().base_channels, ", dense ",
             model.config().dense, ")");
    model = std::move(loaded.model);
    return std::move(loaded.extra);
}

} // namespace pgcam
