#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "pgcam/tensor.hpp"

namespace pgcam {

/// A single-channel activation map plus the provenance needed to interpret
/// it: which method produced it, from which pyramid scales, for which class,
/// and whether it has been normalized to [0,1].
struct SaliencyMap {
    std::size_t h = 0, w = 0;
    std::vector<double> values; // row-major
    bool normalized = false;
    std::string method; // "cam" | "gradcam" | "pgcam"
    std::vector<std::size_t> scales;
    std::size_t class_index = 0;

    SaliencyMap() = default;
    SaliencyMap(std::size_t hh, std::size_t ww, double fill = 0.0)
        : h(hh), w(ww), values(hh * ww, fill) {}

    double& at(std::size_t y, std::size_t x) { return values[y * w + x]; }
    double at(std::size_t y, std::size_t x) const { return values[y * w + x]; }

    double min_value() const { return values.empty() ? 0.0 : *std::min_element(values.begin(), values.end()); }
    double max_value() const { return values.empty() ? 0.0 : *std::max_element(values.begin(), values.end()); }
};

/// Bilinear resize with corner-aligned sampling; same-size calls return the
/// input untouched. Nearest-neighbor mode serves as an ablation alternative.
inline SaliencyMap resize_map(const SaliencyMap& m, std::size_t H, std::size_t W,
                              bool nearest = false) {
    if (H == 0 || W == 0) fail("resize_map: target extents ", H, "x", W, " must be positive");
    if (m.h == 0 || m.w == 0) fail("resize_map: cannot resize an empty map");
    if (H == m.h && W == m.w) return m;

    SaliencyMap out(H, W);
    out.normalized = m.normalized;
    out.method = m.method;
    out.scales = m.scales;
    out.class_index = m.class_index;

    const double sy = H > 1 ? double(m.h - 1) / double(H - 1) : 0.0;
    const double sx = W > 1 ? double(m.w - 1) / double(W - 1) : 0.0;
    for (std::size_t y = 0; y < H; ++y) {
        const double fy = y * sy;
        for (std::size_t x = 0; x < W; ++x) {
            const double fx = x * sx;
            if (nearest) {
                const std::size_t ny = std::min(m.h - 1, std::size_t(std::lround(fy)));
                const std::size_t nx = std::min(m.w - 1, std::size_t(std::lround(fx)));
                out.at(y, x) = m.at(ny, nx);
                continue;
            }
            const std::size_t y0 = std::min(m.h - 1, std::size_t(fy));
            const std::size_t x0 = std::min(m.w - 1, std::size_t(fx));
            const std::size_t y1 = std::min(m.h - 1, y0 + 1);
            const std::size_t x1 = std::min(m.w - 1, x0 + 1);
            const double wy = fy - double(y0);
            const double wx = fx - double(x0);
            out.at(y, x) = (1 - wy) * ((1 - wx) * m.at(y0, x0) + wx * m.at(y0, x1)) +
                           wy * ((1 - wx) * m.at(y1, x0) + wx * m.at(y1, x1));
        }
    }
    return out;
}

/// Affine rescale to [0,1]: (v - min)/(max - min). A constant map carries no
/// localization signal and maps to all zeros.
inline SaliencyMap normalize_map(const SaliencyMap& m) {
    SaliencyMap out = m;
    out.normalized = true;
    if (m.values.empty()) return out;
    const double lo = m.min_value(), hi = m.max_value();
    if (hi == lo) {
        std::fill(out.values.begin(), out.values.end(), 0.0);
        return out;
    }
    const double inv = 1.0 / (hi - lo);
    for (auto& v : out.values) v = (v - lo) * inv;
    return out;
}

} // namespace pgcam
