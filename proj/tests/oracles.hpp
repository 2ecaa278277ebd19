#pragma once

// Deliberately naive reference implementations used to cross-check the
// library. Everything here favors obviousness over speed: direct loops,
// independent index arithmetic, no shared code with the headers under test.

#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "pgcam/ops.hpp"
#include "pgcam/rng.hpp"
#include "pgcam/tape.hpp"
#include "pgcam/tensor.hpp"

namespace oracle {

template <typename T>
pgcam::Tensor<T> uniform_tensor(pgcam::Shape shape, pgcam::Rng& rng, T lo = T(-1), T hi = T(1)) {
    pgcam::Tensor<T> t(std::move(shape));
    for (auto& v : t.data) v = T(rng.uniform(double(lo), double(hi)));
    return t;
}

// Cross-correlation with explicit bounds checks instead of a padded copy.
template <typename T>
pgcam::Tensor<T> conv2d_naive(const pgcam::Tensor<T>& x, const pgcam::Tensor<T>& w,
                              const pgcam::Tensor<T>& bias, std::size_t stride, std::size_t pad) {
    const std::size_t B = x.shape[0], Cin = x.shape[1], H = x.shape[2], W = x.shape[3];
    const std::size_t Cout = w.shape[0], kh = w.shape[2], kw = w.shape[3];
    const std::size_t Ho = (H + 2 * pad - kh) / stride + 1;
    const std::size_t Wo = (W + 2 * pad - kw) / stride + 1;
    pgcam::Tensor<T> out({B, Cout, Ho, Wo});
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t co = 0; co < Cout; ++co)
            for (std::size_t oy = 0; oy < Ho; ++oy)
                for (std::size_t ox = 0; ox < Wo; ++ox) {
                    T acc = bias.data[co];
                    for (std::size_t ci = 0; ci < Cin; ++ci)
                        for (std::size_t ky = 0; ky < kh; ++ky)
                            for (std::size_t kx = 0; kx < kw; ++kx) {
                                const long iy = long(oy * stride + ky) - long(pad);
                                const long ix = long(ox * stride + kx) - long(pad);
                                if (iy < 0 || ix < 0 || iy >= long(H) || ix >= long(W)) continue;
                                acc += x.at4(b, ci, std::size_t(iy), std::size_t(ix)) *
                                       w.at4(co, ci, ky, kx);
                            }
                    out.at4(b, co, oy, ox) = acc;
                }
    return out;
}

// With kernel == stride every output cell maps to exactly one input cell.
template <typename T>
pgcam::Tensor<T> transposed_conv2d_naive(const pgcam::Tensor<T>& x, const pgcam::Tensor<T>& w,
                                         std::size_t stride) {
    const std::size_t B = x.shape[0], Cin = x.shape[1], H = x.shape[2], W = x.shape[3];
    const std::size_t Cout = w.shape[1];
    pgcam::Tensor<T> out({B, Cout, H * stride, W * stride});
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t co = 0; co < Cout; ++co)
            for (std::size_t yo = 0; yo < H * stride; ++yo)
                for (std::size_t xo = 0; xo < W * stride; ++xo) {
                    T acc = T(0);
                    for (std::size_t ci = 0; ci < Cin; ++ci)
                        acc += x.at4(b, ci, yo / stride, xo / stride) *
                               w.at4(ci, co, yo % stride, xo % stride);
                    out.at4(b, co, yo, xo) = acc;
                }
    return out;
}

template <typename T>
pgcam::Tensor<T> maxpool2d_naive(const pgcam::Tensor<T>& x, std::size_t k, std::size_t stride) {
    const std::size_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
    const std::size_t Ho = (H - k) / stride + 1, Wo = (W - k) / stride + 1;
    pgcam::Tensor<T> out({B, C, Ho, Wo});
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t oy = 0; oy < Ho; ++oy)
                for (std::size_t ox = 0; ox < Wo; ++ox) {
                    T best = x.at4(b, c, oy * stride, ox * stride);
                    for (std::size_t dy = 0; dy < k; ++dy)
                        for (std::size_t dx = 0; dx < k; ++dx)
                            best = std::max(best, x.at4(b, c, oy * stride + dy, ox * stride + dx));
                    out.at4(b, c, oy, ox) = best;
                }
    return out;
}

template <typename T>
struct BNStats {
    std::vector<T> mean, var; // biased variance, as used for normalization
};

template <typename T>
BNStats<T> bn_batch_stats_naive(const pgcam::Tensor<T>& x) {
    const std::size_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
    BNStats<T> s{std::vector<T>(C, T(0)), std::vector<T>(C, T(0))};
    const T n = T(B * H * W);
    for (std::size_t c = 0; c < C; ++c) {
        T sum = T(0);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t y = 0; y < H; ++y)
                for (std::size_t xx = 0; xx < W; ++xx) sum += x.at4(b, c, y, xx);
        s.mean[c] = sum / n;
        T sq = T(0);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t y = 0; y < H; ++y)
                for (std::size_t xx = 0; xx < W; ++xx) {
                    const T d = x.at4(b, c, y, xx) - s.mean[c];
                    sq += d * d;
                }
        s.var[c] = sq / n;
    }
    return s;
}

template <typename T>
T softmax_ce_naive(const pgcam::Tensor<T>& logits, const std::vector<int>& labels) {
    const std::size_t B = logits.shape[0], K = logits.shape[1];
    T total = T(0);
    for (std::size_t b = 0; b < B; ++b) {
        T m = logits.at2(b, 0);
        for (std::size_t k = 1; k < K; ++k) m = std::max(m, logits.at2(b, k));
        T z = T(0);
        for (std::size_t k = 0; k < K; ++k) z += std::exp(logits.at2(b, k) - m);
        total += -(logits.at2(b, std::size_t(labels[b])) - m - std::log(z));
    }
    return total / T(B);
}

template <typename T>
T max_abs_diff(const pgcam::Tensor<T>& a, const pgcam::Tensor<T>& b) {
    T worst = std::abs(a.numel() == b.numel() ? T(0) : std::numeric_limits<T>::infinity());
    for (std::size_t i = 0; i < a.numel() && i < b.numel(); ++i)
        worst = std::max(worst, std::abs(a.data[i] - b.data[i]));
    return worst;
}

// Central finite differences against the tape gradient. `build` assembles the
// computation from leaf ids and returns a scalar output id; it must be a pure
// function of the leaf values. Returns the worst relative error over `probes`
// randomly chosen input elements.
template <typename T, typename Build>
T max_grad_rel_error(const std::vector<pgcam::Tensor<T>>& inputs, Build&& build,
                     pgcam::Rng& rng, std::size_t probes, T h0 = T(1e-5)) {
    auto eval = [&](const std::vector<pgcam::Tensor<T>>& vals) {
        pgcam::Tape<T> tape;
        std::vector<pgcam::ValueId> ids;
        ids.reserve(vals.size());
        for (const auto& v : vals) ids.push_back(tape.leaf(v, true));
        return tape.value(build(tape, ids)).data[0];
    };

    pgcam::Tape<T> tape;
    std::vector<pgcam::ValueId> ids;
    for (const auto& v : inputs) ids.push_back(tape.leaf(v, true));
    const pgcam::ValueId out = build(tape, ids);
    auto grads = tape.backward(out);

    T worst = T(0);
    for (std::size_t p = 0; p < probes; ++p) {
        const std::size_t which = rng.uniform_index(inputs.size());
        if (inputs[which].numel() == 0) continue;
        const std::size_t e = rng.uniform_index(inputs[which].numel());
        const T x0 = inputs[which].data[e];
        const T h = h0 * std::max(T(1), std::abs(x0));

        auto perturbed = inputs;
        perturbed[which].data[e] = x0 + h;
        const T fp = eval(perturbed);
        perturbed[which].data[e] = x0 - h;
        const T fm = eval(perturbed);
        const T fd = (fp - fm) / (2 * h);
        const T ad = grads.grad(ids[which]).data[e];
        const T rel = std::abs(ad - fd) / std::max({T(1), std::abs(ad), std::abs(fd)});
        worst = std::max(worst, rel);
    }
    return worst;
}

// Resample elements that sit too close to a ReLU kink so finite differences
// stay on one side of it.
template <typename T>
void keep_away_from_zero(pgcam::Tensor<T>& t, pgcam::Rng& rng, T margin = T(1e-2)) {
    for (auto& v : t.data)
        while (std::abs(v) < margin) v = T(rng.uniform(-1.0, 1.0));
}

} // namespace oracle
