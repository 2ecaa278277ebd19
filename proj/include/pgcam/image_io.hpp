#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "pgcam/saliency.hpp"
#include "pgcam/tensor.hpp"

namespace pgcam {

struct GrayImage {
    std::size_t h = 0, w = 0;
    std::vector<std::uint8_t> pixels; // row-major

    std::uint8_t at(std::size_t y, std::size_t x) const { return pixels[y * w + x]; }
};

namespace detail {

inline void write_bytes_atomic(const std::string& path, const std::string& bytes) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) fail("io: cannot open '", tmp, "' for writing");
        out.write(bytes.data(), std::streamsize(bytes.size()));
        if (!out) fail("io: short write to '", tmp, "'");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) fail("io: cannot move '", tmp, "' into place: ", ec.message());
}

inline std::string read_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) fail("io: cannot open '", path, "'");
    const std::streamsize n = in.tellg();
    in.seekg(0);
    std::string bytes(std::size_t(n), '\0');
    in.read(bytes.data(), n);
    if (!in) fail("io: short read from '", path, "'");
    return bytes;
}

inline void append_u32le(std::string& s, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) s.push_back(char(v >> (8 * i)));
}
inline void append_u32be(std::string& s, std::uint32_t v) {
    for (int i = 3; i >= 0; --i) s.push_back(char(v >> (8 * i)));
}

} // namespace detail

// --- binary portable graymap (P5), 8-bit ---

inline void write_pgm(const std::string& path, const GrayImage& img) {
    std::string out = "P5\n" + std::to_string(img.w) + " " + std::to_string(img.h) + "\n255\n";
    out.append(reinterpret_cast<const char*>(img.pixels.data()), img.pixels.size());
    detail::write_bytes_atomic(path, out);
}

inline GrayImage read_pgm(const std::string& path) {
    const std::string bytes = detail::read_bytes(path);
    std::istringstream in(bytes);
    std::string magic;
    in >> magic;
    if (magic != "P5") fail("pgm: '", path, "' is not a binary graymap (magic '", magic, "')");
    long w = 0, h = 0, maxval = 0;
    in >> w >> h >> maxval;
    if (!in || w <= 0 || h <= 0) fail("pgm: '", path, "' has a malformed header");
    if (maxval != 255) fail("pgm: '", path, "' has maxval ", maxval, "; only 255 supported");
    in.get(); // the single whitespace byte after maxval
    const std::size_t offset = std::size_t(in.tellg());
    const std::size_t need = std::size_t(w) * std::size_t(h);
    if (bytes.size() - offset < need)
        fail("pgm: '", path, "' truncated: needs ", need, " pixels, has ", bytes.size() - offset);
    GrayImage img{std::size_t(h), std::size_t(w), std::vector<std::uint8_t>(need)};
    std::copy(bytes.begin() + long(offset), bytes.begin() + long(offset + need),
              img.pixels.begin());
    return img;
}

// --- portable float saliency map ---

inline void write_pgsm(const std::string& path, const SaliencyMap& m) {
    std::string out = "PGSM";
    detail::append_u32le(out, std::uint32_t(m.h));
    detail::append_u32le(out, std::uint32_t(m.w));
    for (double v : m.values) detail::append_u32le(out, std::bit_cast<std::uint32_t>(float(v)));
    detail::write_bytes_atomic(path, out);
}

inline SaliencyMap read_pgsm(const std::string& path) {
    const std::string bytes = detail::read_bytes(path);
    if (bytes.size() < 12 || bytes.compare(0, 4, "PGSM") != 0)
        fail("pgsm: '", path, "' is not a saliency map file");
    auto u32 = [&](std::size_t off) {
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(std::uint8_t(bytes[off + i])) << (8 * i);
        return v;
    };
    SaliencyMap m(u32(4), u32(8));
    if (bytes.size() != 12 + 4 * m.values.size())
        fail("pgsm: '", path, "' size mismatch for ", m.h, "x", m.w, " map");
    for (std::size_t i = 0; i < m.values.size(); ++i)
        m.values[i] = double(std::bit_cast<float>(u32(12 + 4 * i)));
    return m;
}

// --- minimal grayscale PNG (8-bit, no interlace) ---

inline void write_png_gray(const std::string& path, const GrayImage& img) {
    // filter byte 0 in front of every scanline
    std::vector<std::uint8_t> raw((img.w + 1) * img.h);
    for (std::size_t y = 0; y < img.h; ++y) {
        raw[y * (img.w + 1)] = 0;
        std::copy(&img.pixels[y * img.w], &img.pixels[(y + 1) * img.w],
                  &raw[y * (img.w + 1) + 1]);
    }
    uLongf zcap = compressBound(uLong(raw.size()));
    std::vector<std::uint8_t> z(zcap);
    if (compress2(z.data(), &zcap, raw.data(), uLong(raw.size()), 6) != Z_OK)
        fail("png: deflate failed for '", path, "'");
    z.resize(zcap);

    auto chunk = [](std::string& out, const char type[5], const std::string& payload) {
        detail::append_u32be(out, std::uint32_t(payload.size()));
        std::string body = std::string(type, 4) + payload;
        out += body;
        const auto crc =
            crc32(0, reinterpret_cast<const Bytef*>(body.data()), uInt(body.size()));
        detail::append_u32be(out, std::uint32_t(crc));
    };

    std::string out("\x89PNG\r\n\x1a\n", 8);
    std::string ihdr;
    detail::append_u32be(ihdr, std::uint32_t(img.w));
    detail::append_u32be(ihdr, std::uint32_t(img.h));
    ihdr += std::string("\x08\x00\x00\x00\x00", 5); // 8-bit, grayscale, defaults
    chunk(out, "IHDR", ihdr);
    chunk(out, "IDAT", std::string(reinterpret_cast<const char*>(z.data()), z.size()));
    chunk(out, "IEND", "");
    detail::write_bytes_atomic(path, out);
}

/// Map to 8-bit gray: min→black, max→white; constant maps render black.
inline GrayImage render_gray(const SaliencyMap& m) {
    GrayImage img{m.h, m.w, std::vector<std::uint8_t>(m.values.size(), 0)};
    const double lo = m.min_value(), hi = m.max_value();
    if (hi > lo) {
        const double s = 255.0 / (hi - lo);
        for (std::size_t i = 0; i < m.values.size(); ++i)
            img.pixels[i] = std::uint8_t(std::lround((m.values[i] - lo) * s));
    }
    return img;
}

/// Network input scaling: v/255 into [0,1], shape [1,S,S].
template <typename T>
Tensor<T> image_to_tensor(const GrayImage& img) {
    Tensor<T> t({1, img.h, img.w});
    for (std::size_t i = 0; i < img.pixels.size(); ++i)
        t.data[i] = T(img.pixels[i]) / T(255);
    return t;
}

} // namespace pgcam
