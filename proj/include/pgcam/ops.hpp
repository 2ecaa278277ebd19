#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <vector>

#include "pgcam/tape.hpp"
#include "pgcam/tensor.hpp"

namespace pgcam {

enum class BNMode { train, infer };

/// Batch-norm layer state: affine parameters plus running statistics.
/// gamma/beta are trainable; the running moments are updated only by
/// train-mode forward passes.
template <typename T>
struct BNState {
    Tensor<T> gamma;
    Tensor<T> beta;
    Tensor<T> running_mean;
    Tensor<T> running_var;
    T momentum = T(0.1);
    T epsilon = T(1e-5);

    static BNState make(std::size_t channels) {
        BNState s;
        s.gamma = Tensor<T>::full({channels}, T(1));
        s.beta = Tensor<T>::zeros({channels});
        s.running_mean = Tensor<T>::zeros({channels});
        s.running_var = Tensor<T>::full({channels}, T(1));
        return s;
    }

    std::size_t channels() const { return gamma.numel(); }
};

namespace detail {

template <typename T>
void require_rank(const Tensor<T>& t, std::size_t rank, const char* op, const char* what) {
    if (t.rank() != rank)
        fail(op, ": ", what, " must have rank ", rank, ", got shape ", shape_str(t.shape));
}

/// Copy [B,C,H,W] into a zero-padded [B,C,H+2p,W+2p] buffer.
template <typename T>
Tensor<T> pad_nchw(const Tensor<T>& x, std::size_t pad) {
    const std::size_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
    const std::size_t Hp = H + 2 * pad, Wp = W + 2 * pad;
    Tensor<T> out({B, C, Hp, Wp});
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t y = 0; y < H; ++y) {
                const T* src = &x.data[((b * C + c) * H + y) * W];
                T* dst = &out.data[((b * C + c) * Hp + y + pad) * Wp + pad];
                std::copy(src, src + W, dst);
            }
    return out;
}

} // namespace detail

/// 2-D cross-correlation. input [B,Cin,H,W], weight [Cout,Cin,kh,kw],
/// bias [Cout]. Output extent (H + 2*pad - kh)/stride + 1 must be integral.
template <typename T>
ValueId conv2d(Tape<T>& tape, ValueId x_id, ValueId w_id, ValueId b_id,
               std::size_t stride = 1, std::size_t pad = 0) {
    const Tensor<T>& x = tape.value(x_id);
    const Tensor<T>& w = tape.value(w_id);
    const Tensor<T>& bias = tape.value(b_id);
    detail::require_rank(x, 4, "conv2d", "input");
    detail::require_rank(w, 4, "conv2d", "weight");
    detail::require_rank(bias, 1, "conv2d", "bias");
    if (stride < 1) fail("conv2d: stride must be positive");

    const std::size_t B = x.shape[0], Cin = x.shape[1], H = x.shape[2], W = x.shape[3];
    const std::size_t Cout = w.shape[0], kh = w.shape[2], kw = w.shape[3];
    if (w.shape[1] != Cin)
        fail("conv2d: input ", shape_str(x.shape), " incompatible with weight ",
             shape_str(w.shape), " (channel counts differ)");
    if (bias.shape[0] != Cout)
        fail("conv2d: bias ", shape_str(bias.shape), " does not match weight ",
             shape_str(w.shape));
    if (H + 2 * pad < kh || W + 2 * pad < kw)
        fail("conv2d: kernel ", shape_str(w.shape), " does not fit padded input ",
             shape_str(x.shape), " with pad ", pad);
    if ((H + 2 * pad - kh) % stride != 0 || (W + 2 * pad - kw) % stride != 0)
        fail("conv2d: output extent is not integral for input ", shape_str(x.shape),
             ", kernel ", shape_str(w.shape), ", stride ", stride, ", pad ", pad);

    const std::size_t Ho = (H + 2 * pad - kh) / stride + 1;
    const std::size_t Wo = (W + 2 * pad - kw) / stride + 1;

    // Padded copy shared with the backward pass.
    auto padded = std::make_shared<Tensor<T>>(
        pad > 0 ? detail::pad_nchw(x, pad) : Tensor<T>());
    const Tensor<T>& P = pad > 0 ? *padded : x;
    const std::size_t Hp = H + 2 * pad, Wp = W + 2 * pad;

    Tensor<T> out({B, Cout, Ho, Wo});
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t co = 0; co < Cout; ++co) {
            T* oplane = &out.data[(b * Cout + co) * Ho * Wo];
            std::fill(oplane, oplane + Ho * Wo, bias.data[co]);
            for (std::size_t ci = 0; ci < Cin; ++ci)
                for (std::size_t ky = 0; ky < kh; ++ky)
                    for (std::size_t kx = 0; kx < kw; ++kx) {
                        const T wv = w.data[((co * Cin + ci) * kh + ky) * kw + kx];
                        for (std::size_t oy = 0; oy < Ho; ++oy) {
                            const T* irow = &P.data[((b * Cin + ci) * Hp + oy * stride + ky) * Wp + kx];
                            T* orow = oplane + oy * Wo;
                            if (stride == 1) {
                                for (std::size_t ox = 0; ox < Wo; ++ox)
                                    orow[ox] += wv * irow[ox];
                            } else {
                                for (std::size_t ox = 0; ox < Wo; ++ox)
                                    orow[ox] += wv * irow[ox * stride];
                            }
                        }
                    }
        }

    auto backward = [=](const Tape<T>& t, const Tensor<T>& g, GradBuffer<T>& buf) {
        const Tensor<T>& xv = t.value(x_id);
        const Tensor<T>& wv = t.value(w_id);
        const Tensor<T>& Pv = pad > 0 ? *padded : xv;

        // grad input: scatter through a padded buffer, then crop
        Tensor<T> gpad({B, Cin, Hp, Wp});
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t co = 0; co < Cout; ++co)
                for (std::size_t ci = 0; ci < Cin; ++ci)
                    for (std::size_t ky = 0; ky < kh; ++ky)
                        for (std::size_t kx = 0; kx < kw; ++kx) {
                            const T wgt = wv.data[((co * Cin + ci) * kh + ky) * kw + kx];
                            for (std::size_t oy = 0; oy < Ho; ++oy) {
                                const T* grow = &g.data[((b * Cout + co) * Ho + oy) * Wo];
                                T* prow = &gpad.data[((b * Cin + ci) * Hp + oy * stride + ky) * Wp + kx];
                                if (stride == 1) {
                                    for (std::size_t ox = 0; ox < Wo; ++ox)
                                        prow[ox] += wgt * grow[ox];
                                } else {
                                    for (std::size_t ox = 0; ox < Wo; ++ox)
                                        prow[ox * stride] += wgt * grow[ox];
                                }
                            }
                        }
        Tensor<T>& gx = buf.accum(x_id, xv.shape);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t ci = 0; ci < Cin; ++ci)
                for (std::size_t y = 0; y < H; ++y) {
                    const T* src = &gpad.data[((b * Cin + ci) * Hp + y + pad) * Wp + pad];
                    T* dst = &gx.data[((b * Cin + ci) * H + y) * W];
                    for (std::size_t xx = 0; xx < W; ++xx) dst[xx] += src[xx];
                }

        // grad weight
        Tensor<T>& gw = buf.accum(w_id, wv.shape);
        for (std::size_t co = 0; co < Cout; ++co)
            for (std::size_t ci = 0; ci < Cin; ++ci)
                for (std::size_t ky = 0; ky < kh; ++ky)
                    for (std::size_t kx = 0; kx < kw; ++kx) {
                        T acc = T(0);
                        for (std::size_t b = 0; b < B; ++b)
                            for (std::size_t oy = 0; oy < Ho; ++oy) {
                                const T* grow = &g.data[((b * Cout + co) * Ho + oy) * Wo];
                                const T* irow = &Pv.data[((b * Cin + ci) * Hp + oy * stride + ky) * Wp + kx];
                                if (stride == 1) {
                                    for (std::size_t ox = 0; ox < Wo; ++ox)
                                        acc += grow[ox] * irow[ox];
                                } else {
                                    for (std::size_t ox = 0; ox < Wo; ++ox)
                                        acc += grow[ox] * irow[ox * stride];
                                }
                            }
                        gw.data[((co * Cin + ci) * kh + ky) * kw + kx] += acc;
                    }

        // grad bias
        Tensor<T>& gb = buf.accum(b_id, Shape{Cout});
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t co = 0; co < Cout; ++co) {
                const T* grow = &g.data[(b * Cout + co) * Ho * Wo];
                T acc = T(0);
                for (std::size_t i = 0; i < Ho * Wo; ++i) acc += grow[i];
                gb.data[co] += acc;
            }
    };
    return tape.record(std::move(out), backward);
}

/// Upsampling transposed convolution. weight [Cin,Cout,k,k] with k == stride,
/// so the output extent is exactly input extent * stride.
template <typename T>
ValueId transposed_conv2d(Tape<T>& tape, ValueId x_id, ValueId w_id, std::size_t stride) {
    const Tensor<T>& x = tape.value(x_id);
    const Tensor<T>& w = tape.value(w_id);
    detail::require_rank(x, 4, "transposed_conv2d", "input");
    detail::require_rank(w, 4, "transposed_conv2d", "weight");
    if (stride < 1) fail("transposed_conv2d: stride must be positive");

    const std::size_t B = x.shape[0], Cin = x.shape[1], H = x.shape[2], W = x.shape[3];
    const std::size_t Cout = w.shape[1], kh = w.shape[2], kw = w.shape[3];
    if (w.shape[0] != Cin)
        fail("transposed_conv2d: input ", shape_str(x.shape), " incompatible with weight ",
             shape_str(w.shape), " (channel counts differ)");
    if (kh != stride || kw != stride)
        fail("transposed_conv2d: kernel ", kh, "x", kw, " with stride ", stride,
             " does not realize an exact x", stride, " upsampling; kernel must equal stride");

    const std::size_t Ho = H * stride, Wo = W * stride;
    Tensor<T> out({B, Cout, Ho, Wo});
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t ci = 0; ci < Cin; ++ci)
            for (std::size_t co = 0; co < Cout; ++co)
                for (std::size_t dy = 0; dy < kh; ++dy)
                    for (std::size_t dx = 0; dx < kw; ++dx) {
                        const T wv = w.data[((ci * Cout + co) * kh + dy) * kw + dx];
                        for (std::size_t y = 0; y < H; ++y) {
                            const T* irow = &x.data[((b * Cin + ci) * H + y) * W];
                            T* orow = &out.data[((b * Cout + co) * Ho + y * stride + dy) * Wo + dx];
                            for (std::size_t xx = 0; xx < W; ++xx)
                                orow[xx * stride] += wv * irow[xx];
                        }
                    }

    auto backward = [=](const Tape<T>& t, const Tensor<T>& g, GradBuffer<T>& buf) {
        const Tensor<T>& xv = t.value(x_id);
        const Tensor<T>& wv = t.value(w_id);
        Tensor<T>& gx = buf.accum(x_id, xv.shape);
        Tensor<T>& gw = buf.accum(w_id, wv.shape);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t ci = 0; ci < Cin; ++ci)
                for (std::size_t co = 0; co < Cout; ++co)
                    for (std::size_t dy = 0; dy < kh; ++dy)
                        for (std::size_t dx = 0; dx < kw; ++dx) {
                            const T wgt = wv.data[((ci * Cout + co) * kh + dy) * kw + dx];
                            T wacc = T(0);
                            for (std::size_t y = 0; y < H; ++y) {
                                const T* grow = &g.data[((b * Cout + co) * Ho + y * stride + dy) * Wo + dx];
                                const T* irow = &xv.data[((b * Cin + ci) * H + y) * W];
                                T* gxrow = &gx.data[((b * Cin + ci) * H + y) * W];
                                for (std::size_t xx = 0; xx < W; ++xx) {
                                    const T gv = grow[xx * stride];
                                    gxrow[xx] += wgt * gv;
                                    wacc += irow[xx] * gv;
                                }
                            }
                            gw.data[((ci * Cout + co) * kh + dy) * kw + dx] += wacc;
                        }
    };
    return tape.record(std::move(out), backward);
}

/// Max pooling. Gradient flows to the first (row-major) maximum of each window.
template <typename T>
ValueId maxpool2d(Tape<T>& tape, ValueId x_id, std::size_t k = 2, std::size_t stride = 2) {
    const Tensor<T>& x = tape.value(x_id);
    detail::require_rank(x, 4, "maxpool2d", "input");
    const std::size_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
    if (stride < 1 || k < 1) fail("maxpool2d: window and stride must be positive");
    if (H % stride != 0 || W % stride != 0)
        fail("maxpool2d: input ", shape_str(x.shape), " extents not divisible by stride ", stride);
    if (H < k || W < k || (H - k) % stride != 0 || (W - k) % stride != 0)
        fail("maxpool2d: window ", k, " with stride ", stride,
             " does not tile input ", shape_str(x.shape));

    const std::size_t Ho = (H - k) / stride + 1, Wo = (W - k) / stride + 1;
    Tensor<T> out({B, C, Ho, Wo});
    auto argmax = std::make_shared<std::vector<std::uint32_t>>(out.numel());
    std::size_t o = 0;
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t oy = 0; oy < Ho; ++oy)
                for (std::size_t ox = 0; ox < Wo; ++ox, ++o) {
                    T best = -std::numeric_limits<T>::infinity();
                    std::size_t best_idx = 0;
                    for (std::size_t dy = 0; dy < k; ++dy)
                        for (std::size_t dx = 0; dx < k; ++dx) {
                            const std::size_t idx =
                                ((b * C + c) * H + oy * stride + dy) * W + ox * stride + dx;
                            if (x.data[idx] > best) {
                                best = x.data[idx];
                                best_idx = idx;
                            }
                        }
                    out.data[o] = best;
                    (*argmax)[o] = std::uint32_t(best_idx);
                }

    auto backward = [=](const Tape<T>& t, const Tensor<T>& g, GradBuffer<T>& buf) {
        Tensor<T>& gx = buf.accum(x_id, t.value(x_id).shape);
        for (std::size_t i = 0; i < g.numel(); ++i)
            gx.data[(*argmax)[i]] += g.data[i];
    };
    return tape.record(std::move(out), backward);
}

/// Elementwise max(x, 0). Subgradient at exactly zero is zero.
template <typename T>
ValueId relu(Tape<T>& tape, ValueId x_id) {
    const Tensor<T>& x = tape.value(x_id);
    Tensor<T> out(x.shape);
    for (std::size_t i = 0; i < x.numel(); ++i)
        out.data[i] = x.data[i] > T(0) ? x.data[i] : T(0);

    auto backward = [x_id](const Tape<T>& t, const Tensor<T>& g, GradBuffer<T>& buf) {
        const Tensor<T>& xv = t.value(x_id);
        Tensor<T>& gx = buf.accum(x_id, xv.shape);
        for (std::size_t i = 0; i < g.numel(); ++i)
            if (xv.data[i] > T(0)) gx.data[i] += g.data[i];
    };
    return tape.record(std::move(out), backward);
}

template <typename T>
struct BatchNormResult {
    ValueId out;
    ValueId gamma;
    ValueId beta;
};

/// Batch normalization over (B,H,W) per channel. Train mode normalizes with
/// batch statistics and updates the running moments by exponential moving
/// average; infer mode normalizes with the stored running moments.
/// gamma and beta are registered on the tape as trainable leaves.
template <typename T>
BatchNormResult<T> batch_norm(Tape<T>& tape, ValueId x_id, BNState<T>& state, BNMode mode) {
    const Tensor<T>& x = tape.value(x_id);
    detail::require_rank(x, 4, "batch_norm", "input");
    const std::size_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
    if (B == 0) fail("batch_norm: zero-size batch");
    if (C != state.channels())
        fail("batch_norm: input ", shape_str(x.shape), " has ", C,
             " channels but state has ", state.channels());

    const ValueId gamma_id = tape.leaf(state.gamma, true);
    const ValueId beta_id = tape.leaf(state.beta, true);
    const T eps = state.epsilon;
    const std::size_t N = B * H * W;
    const std::size_t plane = H * W;

    auto mean = std::make_shared<std::vector<T>>(C, T(0));
    auto inv_std = std::make_shared<std::vector<T>>(C, T(0));

    if (mode == BNMode::train) {
        for (std::size_t c = 0; c < C; ++c) {
            T sum = T(0);
            for (std::size_t b = 0; b < B; ++b) {
                const T* row = &x.data[(b * C + c) * plane];
                for (std::size_t i = 0; i < plane; ++i) sum += row[i];
            }
            const T mu = sum / T(N);
            T sq = T(0);
            for (std::size_t b = 0; b < B; ++b) {
                const T* row = &x.data[(b * C + c) * plane];
                for (std::size_t i = 0; i < plane; ++i) {
                    const T d = row[i] - mu;
                    sq += d * d;
                }
            }
            const T var = sq / T(N);
            (*mean)[c] = mu;
            (*inv_std)[c] = T(1) / std::sqrt(var + eps);

            const T unbiased = N > 1 ? var * T(N) / T(N - 1) : var;
            state.running_mean.data[c] =
                (T(1) - state.momentum) * state.running_mean.data[c] + state.momentum * mu;
            state.running_var.data[c] =
                (T(1) - state.momentum) * state.running_var.data[c] + state.momentum * unbiased;
        }
    } else {
        for (std::size_t c = 0; c < C; ++c) {
            (*mean)[c] = state.running_mean.data[c];
            (*inv_std)[c] = T(1) / std::sqrt(state.running_var.data[c] + eps);
        }
    }

    const Tensor<T>& gamma = tape.value(gamma_id);
    const Tensor<T>& beta = tape.value(beta_id);
    Tensor<T> out(x.shape);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c) {
            const T mu = (*mean)[c], is = (*inv_std)[c];
            const T gmm = gamma.data[c], bta = beta.data[c];
            const T* row = &x.data[(b * C + c) * plane];
            T* orow = &out.data[(b * C + c) * plane];
            for (std::size_t i = 0; i < plane; ++i)
                orow[i] = gmm * (row[i] - mu) * is + bta;
        }

    auto backward = [=](const Tape<T>& t, const Tensor<T>& g, GradBuffer<T>& buf) {
        const Tensor<T>& xv = t.value(x_id);
        const Tensor<T>& gmv = t.value(gamma_id);
        Tensor<T>& gx = buf.accum(x_id, xv.shape);
        Tensor<T>& ggamma = buf.accum(gamma_id, Shape{C});
        Tensor<T>& gbeta = buf.accum(beta_id, Shape{C});

        for (std::size_t c = 0; c < C; ++c) {
            const T mu = (*mean)[c], is = (*inv_std)[c];
            T sum_g = T(0), sum_gx = T(0);
            for (std::size_t b = 0; b < B; ++b) {
                const T* grow = &g.data[(b * C + c) * plane];
                const T* row = &xv.data[(b * C + c) * plane];
                for (std::size_t i = 0; i < plane; ++i) {
                    sum_g += grow[i];
                    sum_gx += grow[i] * (row[i] - mu) * is;
                }
            }
            ggamma.data[c] += sum_gx;
            gbeta.data[c] += sum_g;

            const T scale = gmv.data[c] * is;
            if (mode == BNMode::train) {
                // Batch statistics depend on x, so the gradient picks up the
                // usual centering terms.
                const T mg = sum_g / T(N);
                const T mgx = sum_gx / T(N);
                for (std::size_t b = 0; b < B; ++b) {
                    const T* grow = &g.data[(b * C + c) * plane];
                    const T* row = &xv.data[(b * C + c) * plane];
                    T* gxrow = &gx.data[(b * C + c) * plane];
                    for (std::size_t i = 0; i < plane; ++i) {
                        const T xhat = (row[i] - mu) * is;
                        gxrow[i] += scale * (grow[i] - mg - xhat * mgx);
                    }
                }
            } else {
                for (std::size_t b = 0; b < B; ++b) {
                    const T* grow = &g.data[(b * C + c) * plane];
                    T* gxrow = &gx.data[(b * C + c) * plane];
                    for (std::size_t i = 0; i < plane; ++i)
                        gxrow[i] += scale * grow[i];
                }
            }
        }
    };
    const ValueId out_id = tape.record(std::move(out), backward);
    return {out_id, gamma_id, beta_id};
}

/// Concatenate along the channel axis. All inputs must share batch and
/// spatial extents; callers upsample first when scales differ.
template <typename T>
ValueId concat_channels(Tape<T>& tape, const std::vector<ValueId>& ids) {
    if (ids.empty()) fail("concat_channels: no inputs");
    const Tensor<T>& first = tape.value(ids[0]);
    detail::require_rank(first, 4, "concat_channels", "input");
    const std::size_t B = first.shape[0], H = first.shape[2], W = first.shape[3];
    std::size_t Ctot = 0;
    for (ValueId id : ids) {
        const Tensor<T>& t = tape.value(id);
        detail::require_rank(t, 4, "concat_channels", "input");
        if (t.shape[0] != B || t.shape[2] != H || t.shape[3] != W)
            fail("concat_channels: input ", shape_str(t.shape),
                 " does not match leading input ", shape_str(first.shape),
                 " in batch or spatial extents; upsample before concatenating");
        Ctot += t.shape[1];
    }

    const std::size_t plane = H * W;
    Tensor<T> out({B, Ctot, H, W});
    for (std::size_t b = 0; b < B; ++b) {
        std::size_t coff = 0;
        for (ValueId id : ids) {
            const Tensor<T>& t = tape.value(id);
            const std::size_t C = t.shape[1];
            std::copy(&t.data[b * C * plane], &t.data[(b + 1) * C * plane],
                      &out.data[(b * Ctot + coff) * plane]);
            coff += C;
        }
    }

    auto inputs = ids;
    auto backward = [=](const Tape<T>& t, const Tensor<T>& g, GradBuffer<T>& buf) {
        for (std::size_t b = 0; b < B; ++b) {
            std::size_t coff = 0;
            for (ValueId id : inputs) {
                const Tensor<T>& v = t.value(id);
                const std::size_t C = v.shape[1];
                Tensor<T>& gi = buf.accum(id, v.shape);
                const T* src = &g.data[(b * Ctot + coff) * plane];
                T* dst = &gi.data[b * C * plane];
                for (std::size_t i = 0; i < C * plane; ++i) dst[i] += src[i];
                coff += C;
            }
        }
    };
    return tape.record(std::move(out), backward);
}

/// Channel slice [c0, c1). Inverse of concat_channels for matching ranges.
template <typename T>
ValueId slice_channels(Tape<T>& tape, ValueId x_id, std::size_t c0, std::size_t c1) {
    const Tensor<T>& x = tape.value(x_id);
    detail::require_rank(x, 4, "slice_channels", "input");
    const std::size_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
    if (c0 >= c1 || c1 > C)
        fail("slice_channels: range [", c0, ",", c1, ") invalid for ", C, " channels");
    const std::size_t Cs = c1 - c0, plane = H * W;
    Tensor<T> out({B, Cs, H, W});
    for (std::size_t b = 0; b < B; ++b)
        std::copy(&x.data[(b * C + c0) * plane], &x.data[(b * C + c1) * plane],
                  &out.data[b * Cs * plane]);

    auto backward = [=](const Tape<T>& t, const Tensor<T>& g, GradBuffer<T>& buf) {
        Tensor<T>& gx = buf.accum(x_id, t.value(x_id).shape);
        for (std::size_t b = 0; b < B; ++b) {
            const T* src = &g.data[b * Cs * plane];
            T* dst = &gx.data[(b * C + c0) * plane];
            for (std::size_t i = 0; i < Cs * plane; ++i) dst[i] += src[i];
        }
    };
    return tape.record(std::move(out), backward);
}

/// Per-channel spatial mean: [B,C,H,W] -> [B,C].
template <typename T>
ValueId global_avg_pool(Tape<T>& tape, ValueId x_id) {
    const Tensor<T>& x = tape.value(x_id);
    detail::require_rank(x, 4, "global_avg_pool", "input");
    const std::size_t B = x.shape[0], C = x.shape[1], plane = x.shape[2] * x.shape[3];
    if (plane == 0) fail("global_avg_pool: empty spatial extent in ", shape_str(x.shape));

    Tensor<T> out({B, C});
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c) {
            const T* row = &x.data[(b * C + c) * plane];
            T acc = T(0);
            for (std::size_t i = 0; i < plane; ++i) acc += row[i];
            out.data[b * C + c] = acc / T(plane);
        }

    auto backward = [=](const Tape<T>& t, const Tensor<T>& g, GradBuffer<T>& buf) {
        Tensor<T>& gx = buf.accum(x_id, t.value(x_id).shape);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < C; ++c) {
                const T gv = g.data[b * C + c] / T(plane);
                T* row = &gx.data[(b * C + c) * plane];
                for (std::size_t i = 0; i < plane; ++i) row[i] += gv;
            }
    };
    return tape.record(std::move(out), backward);
}

/// Affine map: input [B,C], weight [K,C], bias [K] -> [B,K]. The weight rows
/// are the per-class template vectors consumed by the CAM engine.
template <typename T>
ValueId linear(Tape<T>& tape, ValueId x_id, ValueId w_id, ValueId b_id) {
    const Tensor<T>& x = tape.value(x_id);
    const Tensor<T>& w = tape.value(w_id);
    const Tensor<T>& bias = tape.value(b_id);
    detail::require_rank(x, 2, "linear", "input");
    detail::require_rank(w, 2, "linear", "weight");
    detail::require_rank(bias, 1, "linear", "bias");
    const std::size_t B = x.shape[0], C = x.shape[1], K = w.shape[0];
    if (w.shape[1] != C)
        fail("linear: input ", shape_str(x.shape), " incompatible with weight ",
             shape_str(w.shape));
    if (bias.shape[0] != K)
        fail("linear: bias ", shape_str(bias.shape), " does not match weight ",
             shape_str(w.shape));

    Tensor<T> out({B, K});
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t k = 0; k < K; ++k) {
            T acc = bias.data[k];
            const T* xr = &x.data[b * C];
            const T* wr = &w.data[k * C];
            for (std::size_t c = 0; c < C; ++c) acc += xr[c] * wr[c];
            out.data[b * K + k] = acc;
        }

    auto backward = [=](const Tape<T>& t, const Tensor<T>& g, GradBuffer<T>& buf) {
        const Tensor<T>& xv = t.value(x_id);
        const Tensor<T>& wv = t.value(w_id);
        Tensor<T>& gx = buf.accum(x_id, xv.shape);
        Tensor<T>& gw = buf.accum(w_id, wv.shape);
        Tensor<T>& gb = buf.accum(b_id, Shape{K});
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t k = 0; k < K; ++k) {
                const T gv = g.data[b * K + k];
                const T* wr = &wv.data[k * C];
                const T* xr = &xv.data[b * C];
                T* gxr = &gx.data[b * C];
                T* gwr = &gw.data[k * C];
                for (std::size_t c = 0; c < C; ++c) {
                    gxr[c] += gv * wr[c];
                    gwr[c] += gv * xr[c];
                }
                gb.data[k] += gv;
            }
    };
    return tape.record(std::move(out), backward);
}

/// Mean over the batch of -log softmax(logits)[label], stabilized by
/// max subtraction.
template <typename T>
ValueId softmax_cross_entropy(Tape<T>& tape, ValueId logits_id, const std::vector<int>& labels) {
    const Tensor<T>& logits = tape.value(logits_id);
    detail::require_rank(logits, 2, "softmax_cross_entropy", "logits");
    const std::size_t B = logits.shape[0], K = logits.shape[1];
    if (labels.size() != B)
        fail("softmax_cross_entropy: ", labels.size(), " labels for batch of ", B);
    for (int y : labels)
        if (y < 0 || std::size_t(y) >= K)
            fail("softmax_cross_entropy: label ", y, " out of range [0,", K, ")");

    auto probs = std::make_shared<Tensor<T>>(logits.shape);
    T loss = T(0);
    for (std::size_t b = 0; b < B; ++b) {
        const T* row = &logits.data[b * K];
        T m = row[0];
        for (std::size_t k = 1; k < K; ++k) m = std::max(m, row[k]);
        T z = T(0);
        for (std::size_t k = 0; k < K; ++k) z += std::exp(row[k] - m);
        const T logz = std::log(z);
        for (std::size_t k = 0; k < K; ++k)
            probs->data[b * K + k] = std::exp(row[k] - m - logz);
        loss += -(row[std::size_t(labels[b])] - m - logz);
    }
    loss /= T(B);

    auto lab = std::make_shared<std::vector<int>>(labels);
    auto backward = [=](const Tape<T>&, const Tensor<T>& g, GradBuffer<T>& buf) {
        Tensor<T>& gl = buf.accum(logits_id, Shape{B, K});
        const T scale = g.data[0] / T(B);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t k = 0; k < K; ++k) {
                T d = probs->data[b * K + k];
                if (k == std::size_t((*lab)[b])) d -= T(1);
                gl.data[b * K + k] += scale * d;
            }
    };
    return tape.record(Tensor<T>::scalar(loss), backward);
}

/// Sum of all elements, as a scalar.
template <typename T>
ValueId reduce_sum(Tape<T>& tape, ValueId x_id) {
    const Tensor<T>& x = tape.value(x_id);
    T acc = T(0);
    for (const T v : x.data) acc += v;
    auto backward = [x_id](const Tape<T>& t, const Tensor<T>& g, GradBuffer<T>& buf) {
        Tensor<T>& gx = buf.accum(x_id, t.value(x_id).shape);
        for (auto& v : gx.data) v += g.data[0];
    };
    return tape.record(Tensor<T>::scalar(acc), backward);
}

/// Inner product with a constant coefficient tensor, as a scalar. Useful for
/// seeding backward through an arbitrary linear functional of a value.
template <typename T>
ValueId inner(Tape<T>& tape, ValueId x_id, Tensor<T> coeffs) {
    const Tensor<T>& x = tape.value(x_id);
    if (x.shape != coeffs.shape)
        fail("inner: value ", shape_str(x.shape), " vs coefficients ", shape_str(coeffs.shape));
    T acc = T(0);
    for (std::size_t i = 0; i < x.numel(); ++i) acc += x.data[i] * coeffs.data[i];

    auto cs = std::make_shared<Tensor<T>>(std::move(coeffs));
    auto backward = [=](const Tape<T>& t, const Tensor<T>& g, GradBuffer<T>& buf) {
        Tensor<T>& gx = buf.accum(x_id, t.value(x_id).shape);
        for (std::size_t i = 0; i < gx.numel(); ++i)
            gx.data[i] += g.data[0] * cs->data[i];
    };
    return tape.record(Tensor<T>::scalar(acc), backward);
}

/// Select one element by flat index, as a scalar. Used to seed backward on a
/// single class logit.
template <typename T>
ValueId pick(Tape<T>& tape, ValueId x_id, std::size_t flat_index) {
    const Tensor<T>& x = tape.value(x_id);
    if (flat_index >= x.numel())
        fail("pick: index ", flat_index, " out of range for ", shape_str(x.shape));
    auto backward = [=](const Tape<T>& t, const Tensor<T>& g, GradBuffer<T>& buf) {
        Tensor<T>& gx = buf.accum(x_id, t.value(x_id).shape);
        gx.data[flat_index] += g.data[0];
    };
    return tape.record(Tensor<T>::scalar(x.data[flat_index]), backward);
}

} // namespace pgcam
