#pragma once

#include <cmath>
#include <cstdint>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "pgcam/ops.hpp"
#include "pgcam/rng.hpp"
#include "pgcam/tape.hpp"
#include "pgcam/tensor.hpp"

namespace pgcam {

enum class ModelKind : std::uint8_t { dcfpn = 0, baseline = 1 };

inline const char* model_kind_name(ModelKind k) {
    return k == ModelKind::dcfpn ? "dcfpn" : "baseline";
}

struct ModelConfig {
    std::size_t input_size = 64;
    std::size_t scales = 4;
    std::size_t base_channels = 8;
    std::size_t num_classes = 2;
    bool dense = true;

    void validate() const {
        if (scales < 2) fail("model config: scale count ", scales, " must be at least 2");
        if (base_channels < 1) fail("model config: base channels must be positive");
        if (num_classes < 2) fail("model config: need at least 2 classes");
        const std::size_t div = std::size_t(1) << (scales - 1);
        if (input_size == 0 || input_size % div != 0)
            fail("model config: input size ", input_size, " not divisible by 2^(n-1) = ", div,
                 " for ", scales, " scales");
    }

    // channel width at pyramid scale p (1 = finest), doubling with depth and
    // capped at 8x base
    std::size_t width(std::size_t p) const {
        return std::min(base_channels << (p - 1), base_channels * 8);
    }

    bool operator==(const ModelConfig&) const = default;
};

/// One retained pyramid feature map from a forward pass.
struct TapRef {
    std::size_t scale = 0; // 1 = finest (input resolution)
    ValueId id = 0;
};

template <typename T>
struct ForwardResult {
    ValueId logits = 0;
    std::vector<TapRef> taps; // captured scales only, ascending by scale
    ValueId final_map = 0;    // the feature map the GAP head consumes
    std::unordered_map<std::string, ValueId> param_ids;
};

/// A pyramid (or plain) CNN with named parameters and per-scale feature taps.
/// The topology is fully determined by (kind, config); parameters live in
/// creation order so iteration, checkpointing, and the optimizer all agree.
template <typename T>
class Model {
public:
    Model(ModelKind kind, ModelConfig config) : kind_(kind), config_(config) {
        config.validate();
    }

    ModelKind kind() const { return kind_; }
    const ModelConfig& config() const { return config_; }
    std::size_t conv_layer_count() const { return conv_count_; }

    Tensor<T>& param(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) fail("model: no parameter named '", name, "'");
        return dense_[it->second].tensor;
    }
    const Tensor<T>& param(const std::string& name) const {
        return const_cast<Model*>(this)->param(name);
    }

    BNState<T>& bn_state(const std::string& name) {
        auto it = bn_index_.find(name);
        if (it == bn_index_.end()) fail("model: no batch-norm layer named '", name, "'");
        return bn_[it->second].state;
    }
    const BNState<T>& bn_state(const std::string& name) const {
        return const_cast<Model*>(this)->bn_state(name);
    }

    /// Visit every trainable tensor in creation order as (name, tensor).
    template <typename Fn>
    void for_each_param(Fn&& fn) {
        for (const auto& [is_bn, idx] : order_) {
            if (!is_bn) {
                fn(dense_[idx].name, dense_[idx].tensor);
            } else {
                fn(bn_[idx].name + ".gamma", bn_[idx].state.gamma);
                fn(bn_[idx].name + ".beta", bn_[idx].state.beta);
            }
        }
    }
    template <typename Fn>
    void for_each_param(Fn&& fn) const {
        const_cast<Model*>(this)->for_each_param(
            [&](const std::string& n, Tensor<T>& t) { fn(n, std::as_const(t)); });
    }

    /// Visit trainable tensors plus batch-norm running statistics — everything
    /// a checkpoint must carry to reproduce inference.
    template <typename Fn>
    void for_each_state_tensor(Fn&& fn) {
        for (const auto& [is_bn, idx] : order_) {
            if (!is_bn) {
                fn(dense_[idx].name, dense_[idx].tensor);
            } else {
                fn(bn_[idx].name + ".gamma", bn_[idx].state.gamma);
                fn(bn_[idx].name + ".beta", bn_[idx].state.beta);
                fn(bn_[idx].name + ".running_mean", bn_[idx].state.running_mean);
                fn(bn_[idx].name + ".running_var", bn_[idx].state.running_var);
            }
        }
    }

    std::size_t param_scalar_count() const {
        std::size_t n = 0;
        const_cast<Model*>(this)->for_each_param(
            [&](const std::string&, Tensor<T>& t) { n += t.numel(); });
        return n;
    }

    bool all_finite() const {
        bool ok = true;
        const_cast<Model*>(this)->for_each_state_tensor(
            [&](const std::string&, Tensor<T>& t) { ok = ok && t.all_finite(); });
        return ok;
    }

    /// Pyramid scales whose taps a forward pass may capture.
    std::set<std::size_t> tappable_scales() const {
        if (kind_ == ModelKind::dcfpn) {
            std::set<std::size_t> s;
            for (std::size_t p = 1; p <= config_.scales; ++p) s.insert(p);
            return s;
        }
        return {config_.scales};
    }
    /// The scale whose tap the GAP head consumes.
    std::size_t final_tap_scale() const {
        return kind_ == ModelKind::dcfpn ? 1 : config_.scales;
    }

    ForwardResult<T> forward(Tape<T>& tape, ValueId input, BNMode mode,
                             const std::set<std::size_t>& capture = {}) {
        const Tensor<T>& x = tape.value(input);
        if (x.rank() != 4 || x.shape[1] != 1 || x.shape[2] != config_.input_size ||
            x.shape[3] != config_.input_size)
            fail("forward: batch ", shape_str(x.shape), " does not match expected [B,1,",
                 config_.input_size, ",", config_.input_size, "]");
        const auto valid = tappable_scales();
        for (std::size_t p : capture)
            if (!valid.count(p))
                fail("forward: scale ", p, " is not tappable on this ",
                     model_kind_name(kind_), " model");

        ForwardResult<T> fr;
        if (kind_ == ModelKind::dcfpn)
            forward_dcfpn(tape, input, mode, capture, fr);
        else
            forward_baseline(tape, input, mode, capture, fr);
        for (const TapRef& t : fr.taps) tape.mark_tap(t.id);
        return fr;
    }

    // --- construction helpers (used by the builders below) ---

    void add_conv(const std::string& name, std::size_t cout, std::size_t cin, std::size_t k,
                  Rng& rng) {
        add_dense(name + ".weight", he_uniform({cout, cin, k, k}, cin * k * k, rng));
        add_dense(name + ".bias", Tensor<T>::zeros({cout}));
        ++conv_count_;
    }
    void add_tconv(const std::string& name, std::size_t cin, std::size_t cout, std::size_t k,
                   Rng& rng) {
        add_dense(name + ".weight", he_uniform({cin, cout, k, k}, cin * k * k, rng));
        ++conv_count_;
    }
    void add_linear(const std::string& name, std::size_t out, std::size_t in, Rng& rng) {
        add_dense(name + ".weight", he_uniform({out, in}, in, rng));
        add_dense(name + ".bias", Tensor<T>::zeros({out}));
    }
    void add_bn(const std::string& name, std::size_t channels) {
        bn_index_[name] = bn_.size();
        bn_.push_back({name, BNState<T>::make(channels)});
        order_.emplace_back(true, bn_.size() - 1);
    }

private:
    struct DenseEntry {
        std::string name;
        Tensor<T> tensor;
    };
    struct BNEntry {
        std::string name;
        BNState<T> state;
    };

    void add_dense(const std::string& name, Tensor<T> t) {
        if (index_.count(name)) fail("model: duplicate parameter '", name, "'");
        index_[name] = dense_.size();
        dense_.push_back({name, std::move(t)});
        order_.emplace_back(false, dense_.size() - 1);
    }

    // fan-in-scaled uniform initialization
    Tensor<T> he_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
        const double bound = std::sqrt(6.0 / double(fan_in));
        Tensor<T> t(std::move(shape));
        for (auto& v : t.data) v = T(rng.uniform(-bound, bound));
        return t;
    }

    // conv3x3 pad 1 + relu, recording the parameter leaf ids
    ValueId conv_relu(Tape<T>& tape, ForwardResult<T>& fr, const std::string& name, ValueId x) {
        const ValueId w = leaf_param(tape, fr, name + ".weight");
        const ValueId b = leaf_param(tape, fr, name + ".bias");
        return relu(tape, conv2d(tape, x, w, b, 1, 1));
    }
    ValueId leaf_param(Tape<T>& tape, ForwardResult<T>& fr, const std::string& name) {
        const ValueId id = tape.leaf(param(name), true);
        fr.param_ids[name] = id;
        return id;
    }
    ValueId apply_bn(Tape<T>& tape, ForwardResult<T>& fr, const std::string& name, ValueId x,
                     BNMode mode) {
        auto r = batch_norm(tape, x, bn_state(name), mode);
        fr.param_ids[name + ".gamma"] = r.gamma;
        fr.param_ids[name + ".beta"] = r.beta;
        return r.out;
    }

    void forward_dcfpn(Tape<T>& tape, ValueId input, BNMode mode,
                       const std::set<std::size_t>& capture, ForwardResult<T>& fr) {
        const std::size_t n = config_.scales;
        std::vector<ValueId> enc(n + 1);

        // encoder: two convs per scale, block input concatenated into the
        // output when dense connections are on, batch norm after the joint
        ValueId cur = input;
        for (std::size_t p = 1; p <= n; ++p) {
            if (p > 1) cur = maxpool2d(tape, enc[p - 1], 2, 2);
            const std::string base = "enc" + std::to_string(p);
            const ValueId c1 = conv_relu(tape, fr, base + ".conv1", cur);
            const ValueId c2 = conv_relu(tape, fr, base + ".conv2", c1);
            const ValueId joined =
                config_.dense ? concat_channels<T>(tape, {cur, c2}) : c2;
            enc[p] = apply_bn(tape, fr, base + ".bn", joined, mode);
        }

        // decoder: deepest block works in place, then each transition
        // upsamples, joins the same-scale encoder output, fuses, and runs the
        // scale's block
        std::vector<ValueId> dec(n + 1);
        {
            const std::string base = "dec" + std::to_string(n);
            const ValueId b1 = conv_relu(tape, fr, base + ".conv1", enc[n]);
            const ValueId b2 = conv_relu(tape, fr, base + ".conv2", b1);
            const ValueId joined =
                config_.dense ? concat_channels<T>(tape, {enc[n], b2}) : b2;
            dec[n] = apply_bn(tape, fr, base + ".bn", joined, mode);
        }
        for (std::size_t p = n - 1; p >= 1; --p) {
            const std::string sp = std::to_string(p);
            const ValueId wup = leaf_param(tape, fr, "up" + sp + ".weight");
            const ValueId up = transposed_conv2d(tape, dec[p + 1], wup, 2);
            const ValueId cat = concat_channels<T>(tape, {up, enc[p]});
            const ValueId catn = apply_bn(tape, fr, "join" + sp + ".bn", cat, mode);
            const ValueId j = conv_relu(tape, fr, "join" + sp + ".conv", catn);
            const std::string base = "dec" + sp;
            const ValueId b1 = conv_relu(tape, fr, base + ".conv1", j);
            const ValueId b2 = conv_relu(tape, fr, base + ".conv2", b1);
            const ValueId joined = config_.dense ? concat_channels<T>(tape, {j, b2}) : b2;
            dec[p] = apply_bn(tape, fr, base + ".bn", joined, mode);
        }

        fr.final_map = dec[1];
        const ValueId pooled = global_avg_pool(tape, dec[1]);
        fr.logits = linear(tape, pooled, leaf_param(tape, fr, "head.weight"),
                           leaf_param(tape, fr, "head.bias"));
        for (std::size_t p = 1; p <= n; ++p)
            if (capture.count(p)) fr.taps.push_back({p, dec[p]});
    }

    void forward_baseline(Tape<T>& tape, ValueId input, BNMode mode,
                          const std::set<std::size_t>& capture, ForwardResult<T>& fr) {
        const std::size_t n = config_.scales;
        ValueId cur = conv_relu(tape, fr, "stem.conv", input);
        for (std::size_t p = 1; p <= n; ++p) {
            if (p > 1) cur = maxpool2d(tape, cur, 2, 2);
            const std::string base = "s" + std::to_string(p);
            for (int q = 1; q <= 3; ++q)
                cur = conv_relu(tape, fr, base + ".conv" + std::to_string(q), cur);
            cur = apply_bn(tape, fr, base + ".bn", cur, mode);
        }
        fr.final_map = cur;
        const ValueId pooled = global_avg_pool(tape, cur);
        fr.logits = linear(tape, pooled, leaf_param(tape, fr, "head.weight"),
                           leaf_param(tape, fr, "head.bias"));
        if (capture.count(n)) fr.taps.push_back({n, cur});
    }

    ModelKind kind_;
    ModelConfig config_;
    std::vector<DenseEntry> dense_;
    std::vector<BNEntry> bn_;
    std::vector<std::pair<bool, std::size_t>> order_; // (is_bn, index into its store)
    std::unordered_map<std::string, std::size_t> index_;
    std::unordered_map<std::string, std::size_t> bn_index_;
    std::size_t conv_count_ = 0;
};

/// Encoder-decoder pyramid with same-scale skip connections, optional dense
/// (concatenating) connections, and a tap at every scale's decoder output.
template <typename T>
Model<T> build_dcfpn(ModelConfig config, std::uint64_t seed) {
    config.validate();
    Model<T> m(ModelKind::dcfpn, config);
    Rng rng(mix64(seed, 0x6d6f64656cull)); // independent init stream per seed
    const std::size_t n = config.scales;

    std::size_t cur = 1; // input channels
    std::vector<std::size_t> enc_ch(n + 1);
    for (std::size_t p = 1; p <= n; ++p) {
        const std::size_t w = config.width(p);
        const std::string base = "enc" + std::to_string(p);
        m.add_conv(base + ".conv1", w, cur, 3, rng);
        m.add_conv(base + ".conv2", w, w, 3, rng);
        const std::size_t out = config.dense ? cur + w : w;
        m.add_bn(base + ".bn", out);
        enc_ch[p] = out;
        cur = out;
    }

    std::vector<std::size_t> dec_ch(n + 1);
    {
        const std::size_t w = config.width(n);
        const std::string base = "dec" + std::to_string(n);
        m.add_conv(base + ".conv1", w, enc_ch[n], 3, rng);
        m.add_conv(base + ".conv2", w, w, 3, rng);
        dec_ch[n] = config.dense ? enc_ch[n] + w : w;
        m.add_bn(base + ".bn", dec_ch[n]);
    }
    for (std::size_t p = n - 1; p >= 1; --p) {
        const std::size_t w = config.width(p);
        const std::string sp = std::to_string(p);
        m.add_tconv("up" + sp, dec_ch[p + 1], w, 2, rng);
        m.add_bn("join" + sp + ".bn", w + enc_ch[p]);
        m.add_conv("join" + sp + ".conv", w, w + enc_ch[p], 3, rng);
        m.add_conv("dec" + sp + ".conv1", w, w, 3, rng);
        m.add_conv("dec" + sp + ".conv2", w, w, 3, rng);
        dec_ch[p] = config.dense ? 2 * w : w;
        m.add_bn("dec" + sp + ".bn", dec_ch[p]);
    }
    m.add_linear("head", config.num_classes, dec_ch[1], rng);
    return m;
}

/// Plain feed-forward CNN stand-in for the single-scale comparison model:
/// n-1 pooling reductions, one coarse tap, GAP + linear head.
template <typename T>
Model<T> build_baseline(ModelConfig config, std::uint64_t seed) {
    config.validate();
    Model<T> m(ModelKind::baseline, config);
    Rng rng(mix64(seed, 0x62617365ull));
    const std::size_t n = config.scales;

    std::size_t cur = 1;
    m.add_conv("stem.conv", config.width(1), cur, 3, rng);
    cur = config.width(1);
    for (std::size_t p = 1; p <= n; ++p) {
        const std::size_t w = config.width(p);
        const std::string base = "s" + std::to_string(p);
        for (int q = 1; q <= 3; ++q) {
            m.add_conv(base + ".conv" + std::to_string(q), w, cur, 3, rng);
            cur = w;
        }
        m.add_bn(base + ".bn", w);
    }
    m.add_linear("head", config.num_classes, cur, rng);
    return m;
}

template <typename T>
Model<T> build_model(ModelKind kind, ModelConfig config, std::uint64_t seed) {
    return kind == ModelKind::dcfpn ? build_dcfpn<T>(config, seed)
                                    : build_baseline<T>(config, seed);
}

} // namespace pgcam
