// Acceptance gate. Each numbered criterion prints exactly one PASS/FAIL line
// with its measured runtime; the process exits nonzero if any criterion fails.
// Criteria 1-6 run in 64-bit precision; the end-to-end criteria train in
// 32-bit, matching the command-line tool.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <deque>
#include <filesystem>
#include <functional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "pgcam/cam.hpp"
#include "pgcam/checkpoint.hpp"
#include "pgcam/image_io.hpp"
#include "pgcam/localize.hpp"
#include "pgcam/model.hpp"
#include "pgcam/ops.hpp"
#include "pgcam/phantom.hpp"
#include "pgcam/saliency.hpp"
#include "pgcam/train.hpp"

#include "oracles.hpp"

namespace fs = std::filesystem;
using namespace pgcam;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

int g_failures = 0;
std::set<int> g_requested; // empty means run everything

void run_criterion(int number, const char* name, double budget_seconds,
                   const std::function<Outcome()>& body) {
    if (!g_requested.empty() && !g_requested.count(number)) return;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome out;
    try {
        out = body();
    } catch (const std::exception& e) {
        out = {false, std::string("exception: ") + e.what()};
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_budget = secs <= budget_seconds;
    const bool pass = out.pass && in_budget;
    if (!pass) ++g_failures;
    std::printf("%s  criterion %d (%s): %s [%.1fs of %.0fs budget]\n",
                pass ? "PASS" : "FAIL", number, name,
                out.detail.empty() ? (out.pass ? "ok" : "failed") : out.detail.c_str(), secs,
                budget_seconds);
    if (out.pass && !in_budget)
        std::printf("      note: checks passed but the runtime budget was exceeded\n");
    std::fflush(stdout);
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.4g", v);
    return buf;
}

// ---------------------------------------------------------------- criterion 1

// Worst relative gradient error for the full pyramid-model loss: analytic
// gradients from one tape against central differences obtained by perturbing
// the model's own parameter storage.
double full_model_grad_error(std::size_t probes, Rng& rng) {
    ModelConfig mc;
    mc.input_size = 16;
    mc.scales = 2;
    mc.base_channels = 3;
    Model<double> model = build_model<double>(ModelKind::dcfpn, mc, 77);

    const Tensor<double> x = oracle::uniform_tensor<double>({2, 1, 16, 16}, rng, 0.0, 1.0);
    const std::vector<int> labels = {0, 1};

    const auto loss_value = [&]() {
        Tape<double> tape;
        ForwardResult<double> fr = model.forward(tape, tape.leaf(x), BNMode::train);
        return tape.value(softmax_cross_entropy(tape, fr.logits, labels)).data[0];
    };

    Tape<double> tape;
    ForwardResult<double> fr = model.forward(tape, tape.leaf(x), BNMode::train);
    GradientStore<double> grads =
        tape.backward(softmax_cross_entropy(tape, fr.logits, labels));

    std::vector<std::pair<std::string, Tensor<double>*>> params;
    model.for_each_param(
        [&](const std::string& n, Tensor<double>& t) { params.emplace_back(n, &t); });

    double worst = 0.0;
    for (std::size_t p = 0; p < probes; ++p) {
        auto& [name, tensor] = params[rng.uniform_index(params.size())];
        const std::size_t e = rng.uniform_index(tensor->numel());
        const double x0 = tensor->data[e];
        const double h = 1e-5 * std::max(1.0, std::abs(x0));
        tensor->data[e] = x0 + h;
        const double fp = loss_value();
        tensor->data[e] = x0 - h;
        const double fm = loss_value();
        tensor->data[e] = x0;
        const double fd = (fp - fm) / (2 * h);
        const double ad = grads.grad(fr.param_ids.at(name)).data[e];
        worst = std::max(worst,
                         std::abs(ad - fd) / std::max({1.0, std::abs(ad), std::abs(fd)}));
    }
    return worst;
}

Outcome criterion_gradients() {
    Rng rng(101);
    double worst = 0.0;
    const auto track = [&](double err) { worst = std::max(worst, err); };

    {
        auto x = oracle::uniform_tensor<double>({2, 3, 6, 6}, rng);
        auto w = oracle::uniform_tensor<double>({4, 3, 3, 3}, rng);
        auto b = oracle::uniform_tensor<double>({4}, rng);
        auto coeffs = oracle::uniform_tensor<double>({2, 4, 6, 6}, rng);
        track(oracle::max_grad_rel_error<double>(
            {x, w, b},
            [&](Tape<double>& t, const std::vector<ValueId>& ids) {
                return inner(t, conv2d(t, ids[0], ids[1], ids[2], 1, 1), coeffs);
            },
            rng, 24));
        auto xs = oracle::uniform_tensor<double>({2, 3, 7, 7}, rng);
        auto coeffs2 = oracle::uniform_tensor<double>({2, 4, 4, 4}, rng);
        track(oracle::max_grad_rel_error<double>(
            {xs, w, b},
            [&](Tape<double>& t, const std::vector<ValueId>& ids) {
                return inner(t, conv2d(t, ids[0], ids[1], ids[2], 2, 1), coeffs2);
            },
            rng, 20));
    }
    {
        auto x = oracle::uniform_tensor<double>({2, 3, 4, 4}, rng);
        auto w = oracle::uniform_tensor<double>({3, 4, 2, 2}, rng);
        auto coeffs = oracle::uniform_tensor<double>({2, 4, 8, 8}, rng);
        track(oracle::max_grad_rel_error<double>(
            {x, w},
            [&](Tape<double>& t, const std::vector<ValueId>& ids) {
                return inner(t, transposed_conv2d(t, ids[0], ids[1], 2), coeffs);
            },
            rng, 20));
    }
    {
        auto x = oracle::uniform_tensor<double>({2, 2, 6, 6}, rng);
        auto coeffs = oracle::uniform_tensor<double>({2, 2, 3, 3}, rng);
        track(oracle::max_grad_rel_error<double>(
            {x},
            [&](Tape<double>& t, const std::vector<ValueId>& ids) {
                return inner(t, maxpool2d(t, ids[0], 2, 2), coeffs);
            },
            rng, 20));
    }
    {
        auto x = oracle::uniform_tensor<double>({2, 3, 4, 4}, rng);
        oracle::keep_away_from_zero(x, rng);
        auto coeffs = oracle::uniform_tensor<double>({2, 3, 4, 4}, rng);
        track(oracle::max_grad_rel_error<double>(
            {x},
            [&](Tape<double>& t, const std::vector<ValueId>& ids) {
                return inner(t, relu(t, ids[0]), coeffs);
            },
            rng, 20));
    }
    {
        // batch norm: input gradient through the harness, affine parameters
        // by direct central differences on the owning state
        auto x = oracle::uniform_tensor<double>({3, 2, 3, 3}, rng);
        auto coeffs = oracle::uniform_tensor<double>({3, 2, 3, 3}, rng);
        auto gamma = oracle::uniform_tensor<double>({2}, rng, 0.5, 1.5);
        auto beta = oracle::uniform_tensor<double>({2}, rng);
        for (const BNMode mode : {BNMode::train, BNMode::infer}) {
            track(oracle::max_grad_rel_error<double>(
                {x},
                [&](Tape<double>& t, const std::vector<ValueId>& ids) {
                    BNState<double> st = BNState<double>::make(2);
                    st.gamma = gamma;
                    st.beta = beta;
                    st.running_mean.data = {0.1, -0.2};
                    st.running_var.data = {1.3, 0.8};
                    return inner(t, batch_norm(t, ids[0], st, mode).out, coeffs);
                },
                rng, 20));

            BNState<double> base = BNState<double>::make(2);
            base.gamma = gamma;
            base.beta = beta;
            const auto eval = [&](const BNState<double>& s0) {
                BNState<double> s = s0;
                Tape<double> t;
                return t.value(inner(t, batch_norm(t, t.leaf(x), s, mode).out, coeffs))
                    .data[0];
            };
            BNState<double> st = base;
            Tape<double> t;
            auto bn = batch_norm(t, t.leaf(x), st, mode);
            auto g = t.backward(inner(t, bn.out, coeffs));
            for (std::size_t c = 0; c < 2; ++c) {
                for (const bool is_gamma : {true, false}) {
                    auto sp = base, sm = base;
                    (is_gamma ? sp.gamma : sp.beta).data[c] += 1e-6;
                    (is_gamma ? sm.gamma : sm.beta).data[c] -= 1e-6;
                    const double fd = (eval(sp) - eval(sm)) / 2e-6;
                    const double ad = g.grad(is_gamma ? bn.gamma : bn.beta).data[c];
                    track(std::abs(ad - fd) / std::max({1.0, std::abs(ad), std::abs(fd)}));
                }
            }
        }
    }
    {
        auto a = oracle::uniform_tensor<double>({2, 2, 3, 3}, rng);
        auto b = oracle::uniform_tensor<double>({2, 3, 3, 3}, rng);
        auto c = oracle::uniform_tensor<double>({2, 1, 3, 3}, rng);
        auto coeffs = oracle::uniform_tensor<double>({2, 6, 3, 3}, rng);
        track(oracle::max_grad_rel_error<double>(
            {a, b, c},
            [&](Tape<double>& t, const std::vector<ValueId>& ids) {
                return inner(t, concat_channels(t, {ids[0], ids[1], ids[2]}), coeffs);
            },
            rng, 20));
        auto coeffs2 = oracle::uniform_tensor<double>({2, 2, 3, 3}, rng);
        track(oracle::max_grad_rel_error<double>(
            {b},
            [&](Tape<double>& t, const std::vector<ValueId>& ids) {
                return inner(t, slice_channels(t, ids[0], 1, 3), coeffs2);
            },
            rng, 20));
    }
    {
        auto x = oracle::uniform_tensor<double>({3, 4, 5, 5}, rng);
        auto coeffs = oracle::uniform_tensor<double>({3, 4}, rng);
        track(oracle::max_grad_rel_error<double>(
            {x},
            [&](Tape<double>& t, const std::vector<ValueId>& ids) {
                return inner(t, global_avg_pool(t, ids[0]), coeffs);
            },
            rng, 20));
    }
    {
        auto x = oracle::uniform_tensor<double>({3, 5}, rng);
        auto w = oracle::uniform_tensor<double>({4, 5}, rng);
        auto b = oracle::uniform_tensor<double>({4}, rng);
        auto coeffs = oracle::uniform_tensor<double>({3, 4}, rng);
        track(oracle::max_grad_rel_error<double>(
            {x, w, b},
            [&](Tape<double>& t, const std::vector<ValueId>& ids) {
                return inner(t, linear(t, ids[0], ids[1], ids[2]), coeffs);
            },
            rng, 20));
    }
    {
        auto logits = oracle::uniform_tensor<double>({4, 3}, rng, -2.0, 2.0);
        const std::vector<int> labels = {0, 2, 1, 2};
        track(oracle::max_grad_rel_error<double>(
            {logits},
            [&](Tape<double>& t, const std::vector<ValueId>& ids) {
                return softmax_cross_entropy(t, ids[0], labels);
            },
            rng, 20));
    }

    track(full_model_grad_error(24, rng));

    return {worst <= 1e-4, "worst relative gradient error " + fmt(worst)};
}

// ---------------------------------------------------------------- criterion 2

std::size_t argmax_index(const std::vector<double>& v) {
    return std::size_t(std::max_element(v.begin(), v.end()) - v.begin());
}

Outcome criterion_cam_gradcam_consistency() {
    double worst = 0.0;
    for (int trial = 0; trial < 10; ++trial) {
        ModelConfig mc;
        mc.input_size = 32;
        mc.scales = 3;
        mc.base_channels = 4;
        Model<double> model =
            build_model<double>(ModelKind::baseline, mc, 500 + std::uint64_t(trial));
        Rng rng(900 + std::uint64_t(trial));
        const Tensor<double> x = oracle::uniform_tensor<double>({1, 1, 32, 32}, rng, 0.0, 1.0);
        const std::size_t cls = trial % 2;

        const SaliencyMap g = normalize_map(grad_cam(model, x, cls, model.final_tap_scale()));
        SaliencyMap rc = cam(model, x, cls);
        for (double& v : rc.values) v = std::max(0.0, v);
        const SaliencyMap c = normalize_map(rc);

        for (std::size_t i = 0; i < g.values.size(); ++i)
            worst = std::max(worst, std::abs(g.values[i] - c.values[i]));
        if (argmax_index(g.values) != argmax_index(c.values))
            return {false, "argmax mismatch on trial " + std::to_string(trial)};
    }
    return {worst <= 1e-5, "worst elementwise gap " + fmt(worst) + ", argmax agreed 10/10"};
}

// ---------------------------------------------------------------- criterion 3

Outcome criterion_pyramid_additivity() {
    double worst = 0.0;
    for (int trial = 0; trial < 10; ++trial) {
        ModelConfig mc;
        mc.input_size = 64;
        mc.scales = 4;
        mc.base_channels = 4;
        Model<double> model =
            build_model<double>(ModelKind::dcfpn, mc, 700 + std::uint64_t(trial / 2));
        Rng rng(300 + std::uint64_t(trial));
        const Tensor<double> x = oracle::uniform_tensor<double>({1, 1, 64, 64}, rng, 0.0, 1.0);

        const SaliencyMap fused = pg_cam(model, x, 1, {1, 2, 3, 4});
        SaliencyMap manual(fused.h, fused.w, 0.0);
        for (const std::size_t p : {1, 2, 3, 4}) {
            const SaliencyMap part =
                resize_map(grad_cam(model, x, 1, p), fused.h, fused.w);
            for (std::size_t i = 0; i < manual.values.size(); ++i)
                manual.values[i] += part.values[i];
        }
        double scale = 1.0;
        for (const double v : manual.values) scale = std::max(scale, std::abs(v));
        for (std::size_t i = 0; i < manual.values.size(); ++i)
            worst = std::max(worst, std::abs(fused.values[i] - manual.values[i]) / scale);
    }
    return {worst <= 1e-6, "worst relative fusion gap " + fmt(worst)};
}

// ---------------------------------------------------------------- criterion 4

Outcome criterion_cam_mean_identity() {
    double worst = 0.0;
    for (int trial = 0; trial < 5; ++trial) {
        for (const ModelKind kind : {ModelKind::dcfpn, ModelKind::baseline}) {
            ModelConfig mc;
            mc.input_size = 32;
            mc.scales = 3;
            mc.base_channels = 4;
            Model<double> model = build_model<double>(kind, mc, 40 + std::uint64_t(trial));
            Rng rng(60 + std::uint64_t(trial));
            const Tensor<double> x =
                oracle::uniform_tensor<double>({1, 1, 32, 32}, rng, 0.0, 1.0);

            Tape<double> tape;
            ForwardResult<double> fr = model.forward(tape, tape.leaf(x), BNMode::infer);
            for (const std::size_t cls : {std::size_t(0), std::size_t(1)}) {
                const SaliencyMap m = cam(model, x, cls);
                double mean = 0.0;
                for (const double v : m.values) mean += v;
                mean /= double(m.values.size());
                const double logit = tape.value(fr.logits).at2(0, cls);
                const double lhs = mean + model.param("head.bias").data[cls];
                worst =
                    std::max(worst, std::abs(lhs - logit) / std::max(1.0, std::abs(logit)));
            }
        }
    }
    return {worst <= 1e-5, "worst relative identity gap " + fmt(worst)};
}

// ---------------------------------------------------------------- criterion 5

double iobb_bruteforce(const BBox& p, const BBox& g) {
    std::size_t inter = 0, area = 0;
    for (int y = p.y0; y < p.y1; ++y)
        for (int x = p.x0; x < p.x1; ++x) {
            ++area;
            if (x >= g.x0 && x < g.x1 && y >= g.y0 && y < g.y1) ++inter;
        }
    return double(inter) / double(area);
}

std::vector<PixelRegion> flood_fill_oracle(const BinaryMask& m) {
    std::vector<PixelRegion> regions;
    std::vector<char> seen(m.on.size(), 0);
    const int H = int(m.h), W = int(m.w);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const std::size_t idx = std::size_t(y) * std::size_t(m.w) + std::size_t(x);
            if (!m.on[idx] || seen[idx]) continue;
            PixelRegion region;
            std::deque<std::pair<int, int>> queue{{y, x}};
            seen[idx] = 1;
            while (!queue.empty()) {
                const auto [cy, cx] = queue.front();
                queue.pop_front();
                region.emplace_back(cx, cy); // pixels are stored as (x, y)
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        const int ny = cy + dy, nx = cx + dx;
                        if (ny < 0 || nx < 0 || ny >= H || nx >= W) continue;
                        const std::size_t nidx =
                            std::size_t(ny) * std::size_t(m.w) + std::size_t(nx);
                        if (m.on[nidx] && !seen[nidx]) {
                            seen[nidx] = 1;
                            queue.emplace_back(ny, nx);
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

Outcome criterion_iobb_oracle() {
    Rng rng(2024);
    for (int trial = 0; trial < 100; ++trial) {
        const auto box = [&]() {
            const int x0 = int(rng.uniform_index(20)), y0 = int(rng.uniform_index(20));
            return BBox{x0, y0, x0 + 1 + int(rng.uniform_index(12)),
                        y0 + 1 + int(rng.uniform_index(12))};
        };
        const BBox p = box(), g = box();
        if (iobb(p, g) != iobb_bruteforce(p, g))
            return {false, "iobb mismatch on pair " + std::to_string(trial)};
    }
    for (int trial = 0; trial < 50; ++trial) {
        BinaryMask m;
        m.h = 32;
        m.w = 32;
        m.on.resize(32 * 32);
        Rng mask_rng(5000 + std::uint64_t(trial));
        for (auto&& bit : m.on) bit = mask_rng.uniform(0.0, 1.0) < 0.35;
        if (connected_components(m) != flood_fill_oracle(m))
            return {false, "component mismatch on mask " + std::to_string(trial)};
    }
    return {true, "100/100 box pairs exact, 50/50 masks match flood fill"};
}

// ---------------------------------------------------------------- criterion 6

Outcome criterion_shape_ladder() {
    for (const std::size_t input : {std::size_t(224), std::size_t(64)}) {
        ModelConfig mc;
        mc.input_size = input;
        Model<double> model = build_model<double>(ModelKind::dcfpn, mc, 1);
        Tape<double> tape;
        const Tensor<double> x({1, 1, input, input});
        ForwardResult<double> fr =
            model.forward(tape, tape.leaf(x), BNMode::infer, {1, 2, 3, 4});
        if (fr.taps.size() != 4) return {false, "expected 4 taps"};
        for (std::size_t i = 0; i < 4; ++i) {
            const std::size_t want = input >> i;
            const Tensor<double>& f = tape.value(fr.taps[i].id);
            if (fr.taps[i].scale != i + 1 || f.shape[2] != want || f.shape[3] != want)
                return {false, "tap at scale " + std::to_string(i + 1) + " has extent " +
                                   std::to_string(f.shape[2]) + ", expected " +
                                   std::to_string(want) + " (input " +
                                   std::to_string(input) + ")"};
        }
    }
    ModelConfig mc;
    const Model<double> model = build_model<double>(ModelKind::dcfpn, mc, 1);
    if (model.conv_layer_count() != 22)
        return {false,
                "conv layer count " + std::to_string(model.conv_layer_count()) + " != 22"};
    return {true, "extents 224/112/56/28 and 64/32/16/8, conv count 22"};
}

// ------------------------------------------------------- criteria 7, 8 and 9

using Scalar = float;

struct DeskRun {
    Dataset<Scalar> train, val, loc;
    double dense_on_acc = 0.0;
    std::size_t iters = 0;
    std::uint64_t seed = 0;
};

double f1_over_loc(Model<Scalar>& model, const Dataset<Scalar>& loc,
                   const std::function<SaliencyMap(Model<Scalar>&, const Tensor<Scalar>&)>& extract,
                   double tau) {
    LocCounts counts;
    for (std::size_t i = 0; i < loc.size(); ++i) {
        Tensor<Scalar> x({1, 1, loc.images[i].shape[1], loc.images[i].shape[2]});
        x.data = loc.images[i].data;
        const SaliencyMap norm = normalize_map(extract(model, x));
        const std::vector<BBox> preds =
            tight_boxes(connected_components(threshold_mask(norm, tau)), 4);
        counts += match_and_score(preds, loc.boxes[i], 0.2);
    }
    return loc_metrics(counts).f1;
}

Outcome criterion_desk_scale(DeskRun& run) {
    PhantomConfig pc;
    pc.image_size = 64;
    pc.prevalence = 0.15;
    pc.seed = 42;
    const fs::path dir = fs::temp_directory_path() / "pgcam_acceptance_data";
    fs::remove_all(dir);
    const DatasetPaths paths = write_dataset(pc, 2000, 400, 100, dir.string());
    run.train = load_dataset<Scalar>(paths.train_manifest);
    run.val = load_dataset<Scalar>(paths.val_manifest);
    run.loc = load_dataset<Scalar>(paths.loc_manifest);

    run.iters = 600;
    run.seed = 1;
    TrainConfig tc;
    tc.max_iterations = run.iters;
    tc.seed = run.seed;

    ModelConfig mc;
    mc.input_size = 64;
    Model<Scalar> dcfpn = build_model<Scalar>(ModelKind::dcfpn, mc, tc.seed);
    AdamState<Scalar> opt_d = AdamState<Scalar>::zeros_like(dcfpn);
    train(dcfpn, run.train, run.val, tc, opt_d);

    Model<Scalar> baseline = build_model<Scalar>(ModelKind::baseline, mc, tc.seed);
    AdamState<Scalar> opt_b = AdamState<Scalar>::zeros_like(baseline);
    train(baseline, run.train, run.val, tc, opt_b);

    const EvalResult ev = evaluate_classification(dcfpn, run.val);
    run.dense_on_acc = ev.accuracy;
    const double tumor_recall = ev.recall.size() > 1 ? ev.recall[1] : 0.0;

    const auto pg = [](const std::set<std::size_t>& scales) {
        return [scales](Model<Scalar>& m, const Tensor<Scalar>& x) {
            return pg_cam(m, x, 1, scales);
        };
    };
    const double f1_all = f1_over_loc(dcfpn, run.loc, pg({1, 2, 3, 4}), 0.4);
    const double f1_s1 = f1_over_loc(dcfpn, run.loc, pg({1}), 0.4);
    const double f1_s14 = f1_over_loc(dcfpn, run.loc, pg({1, 4}), 0.4);
    const double f1_gradcam = f1_over_loc(
        baseline, run.loc,
        [](Model<Scalar>& m, const Tensor<Scalar>& x) {
            return grad_cam(m, x, 1, m.final_tap_scale());
        },
        0.8);
    const double f1_cam = f1_over_loc(
        baseline, run.loc,
        [](Model<Scalar>& m, const Tensor<Scalar>& x) { return cam(m, x, 1); }, 0.8);

    const double f1_worst_variant = std::min({f1_all, f1_s1, f1_s14});

    const bool ok_cls = ev.accuracy >= 0.90 && tumor_recall >= 0.60;
    const bool ok_order = f1_worst_variant > f1_gradcam && f1_gradcam > f1_cam;
    const bool ok_fuse = f1_s14 >= f1_s1 - 0.02;

    const std::string detail =
        "val acc " + fmt(ev.accuracy) + ", tumor recall " + fmt(tumor_recall) +
        "; F1 pgcam all/s1/s1+4 " + fmt(f1_all) + "/" + fmt(f1_s1) + "/" + fmt(f1_s14) +
        ", baseline gradcam " + fmt(f1_gradcam) + ", baseline cam " + fmt(f1_cam) + " (" +
        std::to_string(run.iters) + " iters each)";
    return {ok_cls && ok_order && ok_fuse, detail};
}

Outcome criterion_dense_ablation(DeskRun& run) {
    if (run.train.size() == 0) return {false, "desk-scale run unavailable"};
    TrainConfig tc;
    tc.max_iterations = run.iters;
    tc.seed = run.seed;
    ModelConfig mc;
    mc.input_size = 64;
    mc.dense = false;
    Model<Scalar> plain = build_model<Scalar>(ModelKind::dcfpn, mc, tc.seed);
    AdamState<Scalar> opt = AdamState<Scalar>::zeros_like(plain);
    train(plain, run.train, run.val, tc, opt);
    const double off_acc = evaluate_classification(plain, run.val).accuracy;
    return {run.dense_on_acc >= off_acc, "val acc dense-on " + fmt(run.dense_on_acc) +
                                             " vs dense-off " + fmt(off_acc)};
}

Outcome criterion_determinism() {
    PhantomConfig pc;
    pc.image_size = 32;
    pc.prevalence = 0.5;
    pc.seed = 7;
    Dataset<Scalar> ds;
    for (std::size_t i = 0; i < 96; ++i) {
        const PhantomSample s = generate_phantom(pc, i);
        Tensor<Scalar> t({1, 32, 32});
        for (std::size_t j = 0; j < s.image.pixels.size(); ++j)
            t.data[j] = Scalar(s.image.pixels[j]) / Scalar(255);
        ds.images.push_back(std::move(t));
        ds.labels.push_back(s.label);
        ds.boxes.push_back(s.boxes);
    }

    ModelConfig mc;
    mc.input_size = 32;
    mc.scales = 2;
    mc.base_channels = 4;
    TrainConfig tc;
    tc.max_iterations = 30;
    tc.seed = 88;

    const auto fresh = [&]() { return build_model<Scalar>(ModelKind::dcfpn, mc, 11); };
    const auto bitwise_equal = [](Model<Scalar>& a, Model<Scalar>& b) {
        bool same = true;
        std::vector<std::pair<std::string, const Tensor<Scalar>*>> ta, tb;
        a.for_each_state_tensor(
            [&](const std::string& n, Tensor<Scalar>& t) { ta.emplace_back(n, &t); });
        b.for_each_state_tensor(
            [&](const std::string& n, Tensor<Scalar>& t) { tb.emplace_back(n, &t); });
        if (ta.size() != tb.size()) return false;
        for (std::size_t i = 0; i < ta.size(); ++i)
            same = same && ta[i].first == tb[i].first && ta[i].second->data == tb[i].second->data;
        return same;
    };

    // same-seed retraining reproduces the loss trace bitwise
    Model<Scalar> a = fresh(), b = fresh();
    AdamState<Scalar> oa = AdamState<Scalar>::zeros_like(a),
                      ob = AdamState<Scalar>::zeros_like(b);
    const TrainHistory ha = train(a, ds, {}, tc, oa);
    const TrainHistory hb = train(b, ds, {}, tc, ob);
    if (ha.loss != hb.loss) return {false, "same-seed loss traces differ"};
    if (!bitwise_equal(a, b)) return {false, "same-seed final models differ"};

    // checkpoint round trip is bit-exact, including a second save
    const fs::path dir = fs::temp_directory_path() / "pgcam_acceptance_ckpt";
    fs::create_directories(dir);
    const std::string p1 = (dir / "a.pgck").string(), p2 = (dir / "b.pgck").string();
    const NamedTensors<Scalar> extra = oa.to_named();
    save_checkpoint(a, p1, &extra);
    LoadedCheckpoint<Scalar> back = load_checkpoint<Scalar>(p1);
    if (!bitwise_equal(a, back.model)) return {false, "checkpoint round trip not bit-exact"};
    AdamState<Scalar> opt_back = AdamState<Scalar>::from_named(back.model, back.extra);
    const NamedTensors<Scalar> extra2 = opt_back.to_named();
    save_checkpoint(back.model, p2, &extra2);
    if (detail::read_bytes(p1) != detail::read_bytes(p2))
        return {false, "re-saved checkpoint bytes differ"};

    // interrupted-and-resumed training matches uninterrupted training bitwise
    Model<Scalar> ref = fresh();
    AdamState<Scalar> opt_ref = AdamState<Scalar>::zeros_like(ref);
    train(ref, ds, {}, tc, opt_ref);

    Model<Scalar> part = fresh();
    AdamState<Scalar> opt_part = AdamState<Scalar>::zeros_like(part);
    TrainConfig half = tc;
    half.max_iterations = 15;
    half.checkpoint_every = 15;
    half.checkpoint_path = (dir / "mid.pgck").string();
    train(part, ds, {}, half, opt_part);

    LoadedCheckpoint<Scalar> mid = load_checkpoint<Scalar>(half.checkpoint_path);
    AdamState<Scalar> opt_mid = AdamState<Scalar>::from_named(mid.model, mid.extra);
    train(mid.model, ds, {}, tc, opt_mid, 15);
    if (!bitwise_equal(ref, mid.model))
        return {false, "interrupted-and-resumed model differs from uninterrupted"};

    fs::remove_all(dir);
    return {true, "loss traces, checkpoint bytes, and resumed weights all bitwise equal"};
}

} // namespace

int main(int argc, char** argv) {
    for (int i = 1; i < argc; ++i) g_requested.insert(std::atoi(argv[i]));
    std::printf("acceptance gate: 9 criteria\n");
    DeskRun run;
    run_criterion(1, "gradient correctness vs central differences", 120,
                  criterion_gradients);
    run_criterion(2, "grad-cam matches relu(cam) on a GAP head", 60,
                  criterion_cam_gradcam_consistency);
    run_criterion(3, "pyramid map equals sum of per-scale maps", 60,
                  criterion_pyramid_additivity);
    run_criterion(4, "cam spatial mean plus bias reproduces the logit", 30,
                  criterion_cam_mean_identity);
    run_criterion(5, "iobb and connected components match pixel oracles", 30,
                  criterion_iobb_oracle);
    run_criterion(6, "pyramid tap extents and conv layer count", 30, criterion_shape_ladder);
    run_criterion(7, "desk-scale end-to-end training and localization ordering", 1800,
                  [&] { return criterion_desk_scale(run); });
    run_criterion(8, "dense connections do not hurt validation accuracy", 1800,
                  [&] { return criterion_dense_ablation(run); });
    run_criterion(9, "determinism and persistence", 600, criterion_determinism);

    if (g_failures == 0)
        std::printf("acceptance gate: all 9 criteria passed\n");
    else
        std::printf("acceptance gate: %d criterion(s) failed\n", g_failures);
    return g_failures == 0 ? 0 : 1;
}
