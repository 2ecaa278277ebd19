#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "pgcam/saliency.hpp"
#include "pgcam/tensor.hpp"

namespace pgcam {

/// Axis-aligned box over integer pixel coordinates, half-open on both axes so
/// area arithmetic is exact.
struct BBox {
    int x0 = 0, y0 = 0; // inclusive
    int x1 = 0, y1 = 0; // exclusive

    bool valid() const { return x0 < x1 && y0 < y1; }
    long long area() const { return (long long)(x1 - x0) * (y1 - y0); }
    bool operator==(const BBox&) const = default;
};

/// area(pred ∩ gt) / area(pred): how much of the detected box lies on target.
/// Deliberately asymmetric — a small box inside a large ground truth scores 1.
inline double iobb(const BBox& pred, const BBox& gt) {
    if (!pred.valid() || !gt.valid())
        fail("iobb: invalid box (", pred.x0, ",", pred.y0, ",", pred.x1, ",", pred.y1, ") vs (",
             gt.x0, ",", gt.y0, ",", gt.x1, ",", gt.y1, ")");
    const long long ix = std::max(0, std::min(pred.x1, gt.x1) - std::max(pred.x0, gt.x0));
    const long long iy = std::max(0, std::min(pred.y1, gt.y1) - std::max(pred.y0, gt.y0));
    return double(ix * iy) / double(pred.area());
}

struct BinaryMask {
    std::size_t h = 0, w = 0;
    std::vector<std::uint8_t> on; // row-major 0/1

    std::uint8_t at(std::size_t y, std::size_t x) const { return on[y * w + x]; }
    std::size_t count() const {
        std::size_t n = 0;
        for (auto v : on) n += v;
        return n;
    }
};

/// mask = (value >= tau) over a normalized saliency map.
inline BinaryMask threshold_mask(const SaliencyMap& m, double tau) {
    if (!m.normalized)
        fail("threshold_mask: map must be normalized to [0,1] first (method '", m.method, "')");
    if (tau < 0.0 || tau > 1.0) fail("threshold_mask: tau ", tau, " outside [0,1]");
    BinaryMask mask{m.h, m.w, std::vector<std::uint8_t>(m.h * m.w, 0)};
    for (std::size_t i = 0; i < m.values.size(); ++i) mask.on[i] = m.values[i] >= tau ? 1 : 0;
    return mask;
}

using PixelRegion = std::vector<std::pair<int, int>>; // (x, y) pairs

/// 8-connected components in deterministic scanline order: regions are
/// numbered by their first-encountered pixel, and each region's pixels come
/// out in scan order too.
inline std::vector<PixelRegion> connected_components(const BinaryMask& mask) {
    std::vector<PixelRegion> regions;
    std::vector<std::uint8_t> seen(mask.on.size(), 0);
    std::vector<std::size_t> stack;
    for (std::size_t start = 0; start < mask.on.size(); ++start) {
        if (!mask.on[start] || seen[start]) continue;
        PixelRegion region;
        stack.clear();
        stack.push_back(start);
        seen[start] = 1;
        while (!stack.empty()) {
            const std::size_t i = stack.back();
            stack.pop_back();
            const int y = int(i / mask.w), x = int(i % mask.w);
            region.emplace_back(x, y);
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    if (dx == 0 && dy == 0) continue;
                    const int ny = y + dy, nx = x + dx;
                    if (ny < 0 || nx < 0 || ny >= int(mask.h) || nx >= int(mask.w)) continue;
                    const std::size_t ni = std::size_t(ny) * mask.w + std::size_t(nx);
                    if (mask.on[ni] && !seen[ni]) {
                        seen[ni] = 1;
                        stack.push_back(ni);
                    }
                }
        }
        std::sort(region.begin(), region.end(), [](const auto& a, const auto& b) {
            return a.second != b.second ? a.second < b.second : a.first < b.first;
        });
        regions.push_back(std::move(region));
    }
    return regions;
}

/// Tight bounding box per region; regions smaller than min_area pixels are
/// treated as noise and dropped.
inline std::vector<BBox> tight_boxes(const std::vector<PixelRegion>& regions,
                                     std::size_t min_area = 4) {
    std::vector<BBox> boxes;
    for (const PixelRegion& r : regions) {
        if (r.size() < min_area) continue;
        BBox b{r[0].first, r[0].second, r[0].first + 1, r[0].second + 1};
        for (const auto& [x, y] : r) {
            b.x0 = std::min(b.x0, x);
            b.y0 = std::min(b.y0, y);
            b.x1 = std::max(b.x1, x + 1);
            b.y1 = std::max(b.y1, y + 1);
        }
        boxes.push_back(b);
    }
    return boxes;
}

struct LocCounts {
    std::size_t tp = 0, fp = 0, fn = 0;

    bool operator==(const LocCounts&) const = default;
    LocCounts& operator+=(const LocCounts& o) {
        tp += o.tp;
        fp += o.fp;
        fn += o.fn;
        return *this;
    }
};

/// Greedy one-to-one matching by descending IOBB. A prediction whose best
/// available ground truth reaches the threshold becomes a true positive;
/// leftover predictions are false positives, leftover ground truths false
/// negatives.
inline LocCounts match_and_score(const std::vector<BBox>& preds, const std::vector<BBox>& gts,
                                 double iobb_thresh = 0.2) {
    struct Pair {
        double score;
        std::size_t p, g;
    };
    std::vector<Pair> pairs;
    for (std::size_t p = 0; p < preds.size(); ++p)
        for (std::size_t g = 0; g < gts.size(); ++g) {
            const double s = iobb(preds[p], gts[g]);
            if (s >= iobb_thresh) pairs.push_back({s, p, g});
        }
    std::sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.p != b.p) return a.p < b.p;
        return a.g < b.g;
    });

    std::vector<std::uint8_t> pm(preds.size(), 0), gm(gts.size(), 0);
    LocCounts c;
    for (const Pair& pr : pairs) {
        if (pm[pr.p] || gm[pr.g]) continue;
        pm[pr.p] = gm[pr.g] = 1;
        ++c.tp;
    }
    for (auto v : pm)
        if (!v) ++c.fp;
    for (auto v : gm)
        if (!v) ++c.fn;
    return c;
}

struct LocMetrics {
    double precision = 0, accuracy = 0, f1 = 0;

    bool operator==(const LocMetrics&) const = default;
};

/// precision = TP/(TP+FP); accuracy = TP/(TP+FP+FN); f1 = 2TP/(2TP+FP+FN);
/// a metric with an empty denominator is 0.
inline LocMetrics loc_metrics(const LocCounts& c) {
    LocMetrics m;
    const double tp = double(c.tp);
    if (c.tp + c.fp > 0) m.precision = tp / double(c.tp + c.fp);
    if (c.tp + c.fp + c.fn > 0) m.accuracy = tp / double(c.tp + c.fp + c.fn);
    if (2 * c.tp + c.fp + c.fn > 0) m.f1 = 2 * tp / double(2 * c.tp + c.fp + c.fn);
    return m;
}

/// Mean saliency inside a box, used as the exported detection score.
inline double box_score(const SaliencyMap& m, const BBox& b) {
    if (!b.valid()) fail("box_score: invalid box");
    double acc = 0;
    std::size_t n = 0;
    for (int y = std::max(0, b.y0); y < std::min(int(m.h), b.y1); ++y)
        for (int x = std::max(0, b.x0); x < std::min(int(m.w), b.x1); ++x) {
            acc += m.at(std::size_t(y), std::size_t(x));
            ++n;
        }
    return n ? acc / double(n) : 0.0;
}

/// Full saliency-to-boxes pipeline for one map: normalize, threshold,
/// connected components, tight boxes.
inline std::vector<BBox> boxes_from_map(const SaliencyMap& raw, double tau,
                                        std::size_t min_area = 4) {
    const SaliencyMap norm = raw.normalized ? raw : normalize_map(raw);
    return tight_boxes(connected_components(threshold_mask(norm, tau)), min_area);
}

} // namespace pgcam
