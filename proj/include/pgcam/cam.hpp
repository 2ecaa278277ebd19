#pragma once

#include <set>
#include <string>
#include <vector>

#include "pgcam/model.hpp"
#include "pgcam/ops.hpp"
#include "pgcam/saliency.hpp"

namespace pgcam {

/// What the class-discriminative gradient is seeded on: the raw class logit
/// (default) or the cross-entropy loss evaluated at that class.
enum class GradSeed { logit, loss };

struct CamOptions {
    GradSeed seed = GradSeed::logit;
    bool normalize_per_scale_before_sum = false; // fuse raw maps by default
    bool nearest_resize = false;
};

namespace detail {

template <typename T>
void require_single_image(const Tensor<T>& x, std::size_t input_size) {
    if (x.rank() != 4 || x.shape[0] != 1 || x.shape[1] != 1 || x.shape[2] != input_size ||
        x.shape[3] != input_size)
        fail("saliency: expected a single [1,1,", input_size, ",", input_size,
             "] image, got ", shape_str(x.shape));
}

template <typename T>
void require_class(const Model<T>& model, std::size_t cls) {
    if (cls >= model.config().num_classes)
        fail("saliency: class ", cls, " out of range [0,", model.config().num_classes, ")");
}

/// ReLU(sum_k alpha_k * f_k) over one captured feature map.
template <typename T>
SaliencyMap weighted_channel_sum(const Tensor<T>& features, const std::vector<double>& alpha,
                                 bool relu) {
    const std::size_t C = features.shape[1], H = features.shape[2], W = features.shape[3];
    SaliencyMap out(H, W);
    for (std::size_t c = 0; c < C; ++c) {
        const T* plane = &features.data[c * H * W];
        for (std::size_t i = 0; i < H * W; ++i) out.values[i] += alpha[c] * double(plane[i]);
    }
    if (relu)
        for (double& v : out.values) v = v > 0 ? v : 0.0;
    return out;
}

/// Per-channel weights: spatial mean of the tap gradient.
template <typename T>
std::vector<double> mean_gradient_weights(const Tensor<T>& grad) {
    const std::size_t C = grad.shape[1], plane = grad.shape[2] * grad.shape[3];
    std::vector<double> alpha(C, 0.0);
    for (std::size_t c = 0; c < C; ++c) {
        double acc = 0;
        for (std::size_t i = 0; i < plane; ++i) acc += double(grad.data[c * plane + i]);
        alpha[c] = acc / double(plane);
    }
    return alpha;
}

template <typename T>
ValueId seed_node(Tape<T>& tape, ValueId logits, std::size_t cls, GradSeed seed) {
    if (seed == GradSeed::loss)
        return softmax_cross_entropy(tape, logits, std::vector<int>{int(cls)});
    return pick(tape, logits, cls); // batch of one: flat index == class index
}

template <typename T>
SaliencyMap gradcam_from_tap(const Tape<T>& tape, const GradientStore<T>& grads,
                             const TapRef& tap, std::size_t cls) {
    const Tensor<T>& features = tape.value(tap.id);
    SaliencyMap map = weighted_channel_sum(
        features, mean_gradient_weights(grads.grad(tap.id)), /*relu=*/true);
    map.method = "gradcam";
    map.scales = {tap.scale};
    map.class_index = cls;
    return map;
}

} // namespace detail

/// Classic class activation map: the head-weighted channel sum of the final
/// feature map. No ReLU, so the raw map can go negative where the evidence
/// argues against the class.
template <typename T>
SaliencyMap cam(Model<T>& model, const Tensor<T>& image, std::size_t cls) {
    detail::require_single_image(image, model.config().input_size);
    detail::require_class(model, cls);

    Tape<T> tape;
    auto fr = model.forward(tape, tape.leaf(image), BNMode::infer);
    const Tensor<T>& features = tape.value(fr.final_map);
    const Tensor<T>& w = model.param("head.weight"); // [classes, channels]
    std::vector<double> alpha(features.shape[1]);
    for (std::size_t c = 0; c < alpha.size(); ++c) alpha[c] = double(w.at2(cls, c));

    SaliencyMap map = detail::weighted_channel_sum(features, alpha, /*relu=*/false);
    map.method = "cam";
    map.scales = {model.final_tap_scale()};
    map.class_index = cls;
    return map;
}

/// Gradient-weighted activation map at one pyramid scale: channel weights are
/// the spatial mean of d(seed)/d(feature), the weighted sum passes a ReLU.
template <typename T>
SaliencyMap grad_cam(Model<T>& model, const Tensor<T>& image, std::size_t cls,
                     std::size_t scale, const CamOptions& opts = {}) {
    detail::require_single_image(image, model.config().input_size);
    detail::require_class(model, cls);

    Tape<T> tape;
    auto fr = model.forward(tape, tape.leaf(image), BNMode::infer, {scale});
    GradientStore<T> grads = tape.backward(detail::seed_node(tape, fr.logits, cls, opts.seed));
    return detail::gradcam_from_tap(tape, grads, fr.taps.at(0), cls);
}

/// Pyramid fusion: per-scale gradient maps from one shared forward/backward
/// pass, each resized to input resolution, summed elementwise. With
/// normalize_per_scale_before_sum each map is rescaled to [0,1] before the
/// sum, weighting every scale equally regardless of raw magnitude.
template <typename T>
SaliencyMap pg_cam(Model<T>& model, const Tensor<T>& image, std::size_t cls,
                   const std::set<std::size_t>& scales, const CamOptions& opts = {}) {
    detail::require_single_image(image, model.config().input_size);
    detail::require_class(model, cls);
    if (scales.empty()) fail("pg_cam: scale subset must be non-empty");

    Tape<T> tape;
    auto fr = model.forward(tape, tape.leaf(image), BNMode::infer, scales);
    GradientStore<T> grads = tape.backward(detail::seed_node(tape, fr.logits, cls, opts.seed));

    const std::size_t S = model.config().input_size;
    SaliencyMap fused(S, S);
    fused.method = "pgcam";
    fused.class_index = cls;
    for (const TapRef& tap : fr.taps) {
        SaliencyMap per_scale = detail::gradcam_from_tap(tape, grads, tap, cls);
        if (opts.normalize_per_scale_before_sum) per_scale = normalize_map(per_scale);
        SaliencyMap resized = resize_map(per_scale, S, S, opts.nearest_resize);
        for (std::size_t i = 0; i < fused.values.size(); ++i)
            fused.values[i] += resized.values[i];
        fused.scales.push_back(tap.scale);
    }
    return fused;
}

} // namespace pgcam
