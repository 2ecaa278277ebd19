#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "pgcam/image_io.hpp"
#include "pgcam/localize.hpp"
#include "pgcam/rng.hpp"
#include "pgcam/tensor.hpp"

namespace pgcam {

/// Synthetic head phantoms: a bright elliptical rim ("skull") around a mid-gray
/// interior ("brain") with smooth value noise, plus an optional bright
/// soft-edged elliptical lesion. The lesion's intensity falloff is
/// A * exp(-ln2 * r^2) in ellipse-normalized radius, so the half-peak contour
/// is exactly the ellipse boundary and the ground-truth box is well defined.
struct PhantomConfig {
    int image_size = 64;
    double prevalence = 0.15; // fraction of samples carrying a lesion
    double radius_lo = 0.06;  // lesion radii as fractions of image size
    double radius_hi = 0.16;
    double contrast_lo = 45.0; // peak intensity delta
    double contrast_hi = 90.0;
    std::uint64_t seed = 0;

    void validate() const {
        if (image_size < 16) fail("phantom: image size ", image_size, " too small (minimum 16)");
        if (!(prevalence > 0.0 && prevalence < 1.0))
            fail("phantom: prevalence ", prevalence, " must lie in (0,1)");
        if (!(radius_lo > 0.0 && radius_hi < 0.5 && radius_lo <= radius_hi))
            fail("phantom: radius range [", radius_lo, ",", radius_hi,
                 "] must lie within (0,0.5)");
        if (!(contrast_lo > 0.0 && contrast_lo <= contrast_hi))
            fail("phantom: contrast range [", contrast_lo, ",", contrast_hi, "] invalid");
    }
};

struct PhantomSample {
    GrayImage image;
    int label = 0;
    std::vector<BBox> boxes;
    // analytic lesion parameters, valid when label == 1; handy for debugging
    // and for checking the ground-truth box against the closed-form ellipse
    double lesion_cx = 0, lesion_cy = 0, lesion_rx = 0, lesion_ry = 0, lesion_amp = 0;
};

inline PhantomSample generate_phantom(const PhantomConfig& cfg, std::uint64_t index) {
    cfg.validate();
    const int s = cfg.image_size;
    Rng rng(mix64(cfg.seed, index));

    // fixed draw order keeps every sample a pure function of (seed, index)
    const double cx = 0.5 * s + rng.uniform(-0.03, 0.03) * s;
    const double cy = 0.5 * s + rng.uniform(-0.03, 0.03) * s;
    const double skull_rx = rng.uniform(0.43, 0.47) * s;
    const double skull_ry = rng.uniform(0.40, 0.44) * s;
    const double brain_rx = rng.uniform(0.36, 0.40) * s;
    const double brain_ry = rng.uniform(0.33, 0.37) * s;

    constexpr int kGrid = 8;
    double noise_grid[kGrid * kGrid];
    for (double& v : noise_grid) v = rng.uniform(-15.0, 15.0);

    const bool has_tumor = rng.uniform() < cfg.prevalence;
    double trx = 0, try_ = 0, tcx = 0, tcy = 0, amp = 0;
    if (has_tumor) {
        trx = rng.uniform(cfg.radius_lo, cfg.radius_hi) * s;
        try_ = rng.uniform(cfg.radius_lo, cfg.radius_hi) * s;
        amp = rng.uniform(cfg.contrast_lo, cfg.contrast_hi);
        // center inside the axis-aligned box inscribed in the brain ellipse,
        // shrunk so the lesion's own extent still fits
        const double mx = std::max(0.0, brain_rx / std::numbers::sqrt2 - trx - 1.0);
        const double my = std::max(0.0, brain_ry / std::numbers::sqrt2 - try_ - 1.0);
        tcx = cx + rng.uniform(-1.0, 1.0) * mx;
        tcy = cy + rng.uniform(-1.0, 1.0) * my;
    }

    auto noise_at = [&](int x, int y) {
        // bilinear over the 8x8 grid, corners pinned to image corners
        const double gx = double(x) * (kGrid - 1) / (s - 1);
        const double gy = double(y) * (kGrid - 1) / (s - 1);
        const int x0 = std::min(int(gx), kGrid - 2), y0 = std::min(int(gy), kGrid - 2);
        const double fx = gx - x0, fy = gy - y0;
        const double* g = noise_grid;
        const double top = g[y0 * kGrid + x0] * (1 - fx) + g[y0 * kGrid + x0 + 1] * fx;
        const double bot = g[(y0 + 1) * kGrid + x0] * (1 - fx) + g[(y0 + 1) * kGrid + x0 + 1] * fx;
        return top * (1 - fy) + bot * fy;
    };

    PhantomSample out;
    out.image = GrayImage{std::size_t(s), std::size_t(s),
                          std::vector<std::uint8_t>(std::size_t(s) * std::size_t(s))};
    int bx0 = s, by0 = s, bx1 = -1, by1 = -1;
    for (int y = 0; y < s; ++y) {
        for (int x = 0; x < s; ++x) {
            const double dx = x - cx, dy = y - cy;
            const double in_skull =
                (dx / skull_rx) * (dx / skull_rx) + (dy / skull_ry) * (dy / skull_ry);
            const double in_brain =
                (dx / brain_rx) * (dx / brain_rx) + (dy / brain_ry) * (dy / brain_ry);
            double v = 15.0;
            if (in_skull <= 1.0) v = in_brain <= 1.0 ? 115.0 : 205.0;
            v += noise_at(x, y);
            if (has_tumor) {
                const double ex = (x - tcx) / trx, ey = (y - tcy) / try_;
                const double r2 = ex * ex + ey * ey;
                const double delta = amp * std::exp(-std::numbers::ln2 * r2);
                v += delta;
                if (delta > 0.5 * amp) {
                    bx0 = std::min(bx0, x);
                    by0 = std::min(by0, y);
                    bx1 = std::max(bx1, x);
                    by1 = std::max(by1, y);
                }
            }
            out.image.pixels[std::size_t(y) * std::size_t(s) + std::size_t(x)] =
                std::uint8_t(std::clamp(std::lround(v), 0L, 255L));
        }
    }
    if (bx1 >= bx0) {
        out.boxes.push_back(BBox{bx0, by0, bx1 + 1, by1 + 1});
        out.label = 1;
        out.lesion_cx = tcx;
        out.lesion_cy = tcy;
        out.lesion_rx = trx;
        out.lesion_ry = try_;
        out.lesion_amp = amp;
    }
    return out;
}

// --- manifests ---

struct ManifestEntry {
    std::string path; // as written in the manifest (relative to its directory)
    int label = 0;
    std::vector<BBox> boxes;
};

struct DatasetPaths {
    std::string train_manifest;
    std::string val_manifest;
    std::string loc_manifest;
};

namespace detail {

inline std::string manifest_line(const ManifestEntry& e, bool with_boxes) {
    std::string line = e.path + "\t" + std::to_string(e.label);
    if (with_boxes)
        for (const BBox& b : e.boxes)
            line += "\t" + std::to_string(b.x0) + "," + std::to_string(b.y0) + "," +
                    std::to_string(b.x1) + "," + std::to_string(b.y1);
    return line;
}

} // namespace detail

/// Write `train_n + val_n + loc_n` phantoms under `out_dir` plus three
/// tab-separated manifests. The three splits draw from disjoint index ranges
/// of one deterministic stream, so regeneration with the same config is
/// bit-identical and the splits never share a sample. Only the localization
/// manifest records ground-truth boxes.
inline DatasetPaths write_dataset(const PhantomConfig& cfg, std::size_t train_n,
                                  std::size_t val_n, std::size_t loc_n,
                                  const std::string& out_dir) {
    cfg.validate();
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(fs::path(out_dir) / "images", ec);
    if (ec) fail("dataset: cannot create '", out_dir, "/images': ", ec.message());

    auto emit_split = [&](const char* name, std::size_t first, std::size_t count,
                          bool with_boxes) {
        std::string body;
        for (std::size_t i = 0; i < count; ++i) {
            const std::uint64_t index = first + i;
            PhantomSample sample = generate_phantom(cfg, index);
            char leaf[32];
            std::snprintf(leaf, sizeof leaf, "images/img_%06llu.pgm",
                          static_cast<unsigned long long>(index));
            write_pgm((fs::path(out_dir) / leaf).string(), sample.image);
            body += detail::manifest_line({leaf, sample.label, sample.boxes}, with_boxes);
            body += '\n';
        }
        const std::string path = (fs::path(out_dir) / (std::string(name) + ".tsv")).string();
        detail::write_bytes_atomic(path, body);
        return path;
    };

    DatasetPaths paths;
    paths.train_manifest = emit_split("train", 0, train_n, false);
    paths.val_manifest = emit_split("val", train_n, val_n, false);
    paths.loc_manifest = emit_split("loc", train_n + val_n, loc_n, true);
    return paths;
}

inline std::vector<ManifestEntry> read_manifest(const std::string& path) {
    const std::string bytes = detail::read_bytes(path);
    std::vector<ManifestEntry> entries;
    std::istringstream in(bytes);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::size_t start = 0;
        while (true) {
            const std::size_t tab = line.find('\t', start);
            fields.push_back(line.substr(start, tab - start));
            if (tab == std::string::npos) break;
            start = tab + 1;
        }
        if (fields.size() < 2)
            fail("manifest: '", path, "' line ", lineno, ": expected at least path and label");
        ManifestEntry e;
        e.path = fields[0];
        if (fields[1] != "0" && fields[1] != "1")
            fail("manifest: '", path, "' line ", lineno, ": label '", fields[1],
                 "' is not 0 or 1");
        e.label = fields[1][0] - '0';
        for (std::size_t f = 2; f < fields.size(); ++f) {
            BBox b;
            char comma;
            std::istringstream bs(fields[f]);
            bs >> b.x0 >> comma >> b.y0 >> comma >> b.x1 >> comma >> b.y1;
            if (!bs || !b.valid())
                fail("manifest: '", path, "' line ", lineno, ": malformed box '", fields[f],
                     "'");
            e.boxes.push_back(b);
        }
        if (!e.boxes.empty() && e.label != 1)
            fail("manifest: '", path, "' line ", lineno, ": label-0 entry carries boxes");
        entries.push_back(std::move(e));
    }
    return entries;
}

/// Images loaded into memory as [1,S,S] tensors scaled exactly by v/255.
template <typename T>
struct Dataset {
    std::vector<Tensor<T>> images;
    std::vector<int> labels;
    std::vector<std::vector<BBox>> boxes;

    std::size_t size() const { return images.size(); }
};

template <typename T>
Dataset<T> load_dataset(const std::string& manifest_path) {
    const auto entries = read_manifest(manifest_path);
    const auto dir = std::filesystem::path(manifest_path).parent_path();
    Dataset<T> ds;
    for (const auto& e : entries) {
        GrayImage img = read_pgm((dir / e.path).string());
        ds.images.push_back(image_to_tensor<T>(img));
        ds.labels.push_back(e.label);
        ds.boxes.push_back(e.boxes);
    }
    return ds;
}

} // namespace pgcam
