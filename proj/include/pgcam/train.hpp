#pragma once

#include <cmath>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "pgcam/checkpoint.hpp"
#include "pgcam/model.hpp"
#include "pgcam/ops.hpp"
#include "pgcam/phantom.hpp"
#include "pgcam/rng.hpp"

namespace pgcam {

struct TrainConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double base_lr = 0.001;
    double decay_factor = 0.1;
    std::size_t decay_every = 1000; // paper-scale runs use 10000
    std::size_t max_iterations = 5000;
    std::size_t batch_size = 16;
    std::uint64_t seed = 0;
    std::size_t val_every_epochs = 1;
    std::size_t checkpoint_every = 0; // iterations between cadence saves; 0 = off
    std::string checkpoint_path;
    bool balanced_sampler = false; // default matches the plain-shuffle setup

    void validate() const {
        if (!(beta1 > 0 && beta1 < 1 && beta2 > 0 && beta2 < 1))
            fail("train: Adam betas (", beta1, ",", beta2, ") must lie in (0,1)");
        if (!(epsilon > 0)) fail("train: epsilon must be positive");
        if (!(base_lr > 0)) fail("train: base learning rate must be positive");
        if (!(decay_factor > 0 && decay_factor <= 1))
            fail("train: decay factor ", decay_factor, " must lie in (0,1]");
        if (decay_every == 0) fail("train: decay interval must be positive");
        if (batch_size == 0) fail("train: batch size must be positive");
        if (checkpoint_every > 0 && checkpoint_path.empty())
            fail("train: checkpoint cadence set but no checkpoint path given");
    }
};

/// Step decay: lr = base * factor^floor(iter / every).
inline double lr_schedule(std::size_t iter, const TrainConfig& cfg) {
    return cfg.base_lr * std::pow(cfg.decay_factor, double(iter / cfg.decay_every));
}

struct ValPoint {
    std::size_t iter = 0; // iterations completed when measured
    double accuracy = 0;
};

struct TrainHistory {
    std::vector<double> loss; // one entry per completed iteration
    std::vector<double> lr;
    std::vector<ValPoint> val;
};

/// First/second moment buffers aligned with the model's parameter order.
template <typename T>
struct AdamState {
    std::vector<std::string> names;
    std::vector<Tensor<T>> m, v;
    std::size_t steps = 0;

    static AdamState zeros_like(Model<T>& model) {
        AdamState s;
        model.for_each_param([&](const std::string& name, Tensor<T>& t) {
            s.names.push_back(name);
            s.m.push_back(Tensor<T>(t.shape));
            s.v.push_back(Tensor<T>(t.shape));
        });
        return s;
    }

    /// Serialize as checkpoint extras ("opt.*" entries).
    NamedTensors<T> to_named() const {
        NamedTensors<T> out;
        out.emplace_back("opt.steps", Tensor<T>::scalar(T(steps)));
        for (std::size_t i = 0; i < names.size(); ++i) {
            out.emplace_back("opt.m." + names[i], m[i]);
            out.emplace_back("opt.v." + names[i], v[i]);
        }
        return out;
    }

    static AdamState from_named(Model<T>& model, const NamedTensors<T>& extra) {
        AdamState s = zeros_like(model);
        auto find = [&](const std::string& name) -> const Tensor<T>& {
            for (const auto& [n, t] : extra)
                if (n == name) return t;
            fail("optimizer state: checkpoint has no '", name, "' entry");
        };
        const Tensor<T>& steps = find("opt.steps");
        if (steps.numel() != 1) fail("optimizer state: 'opt.steps' is not a scalar");
        s.steps = std::size_t(steps.data[0]);
        for (std::size_t i = 0; i < s.names.size(); ++i) {
            const Tensor<T>& mm = find("opt.m." + s.names[i]);
            const Tensor<T>& vv = find("opt.v." + s.names[i]);
            if (mm.shape != s.m[i].shape || vv.shape != s.v[i].shape)
                fail("optimizer state: moment shape mismatch for '", s.names[i], "'");
            s.m[i] = mm;
            s.v[i] = vv;
        }
        return s;
    }
};

/// One bias-corrected Adam update on a single tensor.
template <typename T>
void adam_update(Tensor<T>& p, const Tensor<T>& g, Tensor<T>& m, Tensor<T>& v,
                 std::size_t step, double lr, const TrainConfig& cfg) {
    const T b1 = T(cfg.beta1), b2 = T(cfg.beta2);
    const T corr1 = T(1) - T(std::pow(cfg.beta1, double(step)));
    const T corr2 = T(1) - T(std::pow(cfg.beta2, double(step)));
    for (std::size_t i = 0; i < p.numel(); ++i) {
        m.data[i] = b1 * m.data[i] + (T(1) - b1) * g.data[i];
        v.data[i] = b2 * v.data[i] + (T(1) - b2) * g.data[i] * g.data[i];
        const T mhat = m.data[i] / corr1;
        const T vhat = v.data[i] / corr2;
        p.data[i] -= T(lr) * mhat / (std::sqrt(vhat) + T(cfg.epsilon));
    }
}

/// Apply one optimizer step across every model parameter. All gradients are
/// checked before anything moves, so a non-finite gradient rejects the whole
/// iteration rather than leaving the model half-updated.
template <typename T>
void adam_step(Model<T>& model, const std::unordered_map<std::string, ValueId>& param_ids,
               const GradientStore<T>& grads, AdamState<T>& opt, double lr,
               const TrainConfig& cfg) {
    std::vector<const Tensor<T>*> gs(opt.names.size());
    for (std::size_t i = 0; i < opt.names.size(); ++i) {
        auto it = param_ids.find(opt.names[i]);
        if (it == param_ids.end())
            fail("adam: forward pass recorded no id for parameter '", opt.names[i], "'");
        const Tensor<T>& g = grads.grad(it->second);
        if (!g.all_finite())
            fail("adam: non-finite gradient for parameter '", opt.names[i],
                 "'; iteration rejected");
        gs[i] = &g;
    }
    ++opt.steps;
    std::size_t i = 0;
    model.for_each_param([&](const std::string&, Tensor<T>& p) {
        adam_update(p, *gs[i], opt.m[i], opt.v[i], opt.steps, lr, cfg);
        ++i;
    });
}

struct EvalResult {
    double accuracy = 0;
    std::vector<double> recall;                   // per class; 0 if unrepresented
    std::vector<std::vector<std::size_t>> confusion; // [true][predicted]
    std::size_t n = 0;
};

namespace detail {

template <typename T>
Tensor<T> stack_batch(const Dataset<T>& ds, const std::vector<std::size_t>& indices) {
    const Shape& s = ds.images[indices[0]].shape; // [1,S,S]
    Tensor<T> batch({indices.size(), s[0], s[1], s[2]});
    const std::size_t plane = shape_numel(s);
    for (std::size_t b = 0; b < indices.size(); ++b)
        std::copy(ds.images[indices[b]].data.begin(), ds.images[indices[b]].data.end(),
                  batch.data.begin() + long(b * plane));
    return batch;
}

template <typename T>
std::size_t argmax_row(const Tensor<T>& logits, std::size_t row) {
    const std::size_t K = logits.shape[1];
    std::size_t best = 0;
    for (std::size_t k = 1; k < K; ++k)
        if (logits.data[row * K + k] > logits.data[row * K + best]) best = k;
    return best; // ties resolve to the lower index
}

} // namespace detail

/// Argmax classification metrics over a labeled dataset, reported per class
/// so a degenerate always-majority model is visible despite high accuracy.
template <typename T>
EvalResult evaluate_classification(Model<T>& model, const Dataset<T>& ds,
                                   std::size_t chunk = 32) {
    if (ds.size() == 0) fail("evaluate: empty dataset");
    const std::size_t K = model.config().num_classes;
    EvalResult r;
    r.n = ds.size();
    r.confusion.assign(K, std::vector<std::size_t>(K, 0));
    for (std::size_t start = 0; start < ds.size(); start += chunk) {
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < std::min(ds.size(), start + chunk); ++i)
            idx.push_back(i);
        Tape<T> tape;
        const ValueId input = tape.leaf(detail::stack_batch(ds, idx));
        auto fr = model.forward(tape, input, BNMode::infer);
        const Tensor<T>& logits = tape.value(fr.logits);
        for (std::size_t b = 0; b < idx.size(); ++b) {
            const int truth = ds.labels[idx[b]];
            if (truth < 0 || std::size_t(truth) >= K)
                fail("evaluate: label ", truth, " out of range [0,", K, ")");
            ++r.confusion[std::size_t(truth)][detail::argmax_row(logits, b)];
        }
    }
    std::size_t correct = 0;
    r.recall.assign(K, 0.0);
    for (std::size_t c = 0; c < K; ++c) {
        correct += r.confusion[c][c];
        std::size_t row = 0;
        for (std::size_t k = 0; k < K; ++k) row += r.confusion[c][k];
        if (row > 0) r.recall[c] = double(r.confusion[c][c]) / double(row);
    }
    r.accuracy = double(correct) / double(r.n);
    return r;
}

namespace detail {

/// Deterministic batch index selection for one iteration. Plain mode walks a
/// per-epoch shuffle; balanced mode draws half of each batch from each class.
template <typename T>
class BatchSampler {
public:
    BatchSampler(const Dataset<T>& ds, const TrainConfig& cfg) : ds_(ds), cfg_(cfg) {
        for (std::size_t i = 0; i < ds.size(); ++i)
            (ds.labels[i] == 0 ? class0_ : class1_).push_back(i);
    }

    std::size_t batches_per_epoch() const { return ds_.size() / cfg_.batch_size; }

    std::vector<std::size_t> batch(std::size_t iter) {
        std::vector<std::size_t> out(cfg_.batch_size);
        if (cfg_.balanced_sampler) {
            Rng rng(mix64(mix64(cfg_.seed, 0x62616c616e636564ull), iter));
            for (std::size_t b = 0; b < cfg_.batch_size; ++b) {
                const auto& pool = b % 2 == 0 ? class0_ : class1_;
                out[b] = pool[rng.uniform_index(pool.size())];
            }
            return out;
        }
        const std::size_t epoch = iter / batches_per_epoch();
        const std::size_t slot = iter % batches_per_epoch();
        if (epoch != perm_epoch_ || perm_.empty()) {
            perm_ = permutation(ds_.size(), mix64(cfg_.seed, epoch));
            perm_epoch_ = epoch;
        }
        for (std::size_t b = 0; b < cfg_.batch_size; ++b)
            out[b] = perm_[slot * cfg_.batch_size + b];
        return out;
    }

private:
    const Dataset<T>& ds_;
    const TrainConfig& cfg_;
    std::vector<std::size_t> class0_, class1_;
    std::vector<std::size_t> perm_;
    std::size_t perm_epoch_ = std::size_t(-1);
};

} // namespace detail

/// Train for cfg.max_iterations total, starting from start_iter (nonzero when
/// resuming from a checkpoint). Deterministic given (model state, opt state,
/// config): epoch shuffles derive from (seed, epoch) alone, so a resumed run
/// replays exactly the batches an uninterrupted run would have seen.
template <typename T>
TrainHistory train(Model<T>& model, const Dataset<T>& train_ds, const Dataset<T>& val_ds,
                   const TrainConfig& cfg, AdamState<T>& opt, std::size_t start_iter = 0,
                   std::ostream* log = nullptr) {
    cfg.validate();
    if (train_ds.size() == 0) fail("train: empty training dataset");
    if (train_ds.size() < cfg.batch_size)
        fail("train: batch size ", cfg.batch_size, " exceeds dataset size ", train_ds.size());
    std::size_t per_class[2] = {0, 0};
    for (int y : train_ds.labels) {
        if (y != 0 && y != 1) fail("train: labels must be binary, got ", y);
        ++per_class[y];
    }
    if (per_class[0] == 0 || per_class[1] == 0)
        fail("train: class ", per_class[0] == 0 ? 0 : 1,
             " has no training samples; both classes are required");

    detail::BatchSampler<T> sampler(train_ds, cfg);
    TrainHistory history;
    for (std::size_t iter = start_iter; iter < cfg.max_iterations; ++iter) {
        const double lr = lr_schedule(iter, cfg);
        const std::vector<std::size_t> idx = sampler.batch(iter);

        Tape<T> tape;
        const ValueId input = tape.leaf(detail::stack_batch(train_ds, idx));
        auto fr = model.forward(tape, input, BNMode::train);
        std::vector<int> labels;
        for (std::size_t i : idx) labels.push_back(train_ds.labels[i]);
        const ValueId loss_id = softmax_cross_entropy(tape, fr.logits, labels);
        const double loss = double(tape.value(loss_id).data[0]);

        GradientStore<T> grads = tape.backward(loss_id);
        adam_step(model, fr.param_ids, grads, opt, lr, cfg);

        history.loss.push_back(loss);
        history.lr.push_back(lr);
        if (log) *log << iter << '\t' << lr << '\t' << loss << '\n';

        const bool epoch_end = (iter + 1) % sampler.batches_per_epoch() == 0;
        const std::size_t epoch = iter / sampler.batches_per_epoch();
        if (epoch_end && val_ds.size() > 0 && cfg.val_every_epochs > 0 &&
            (epoch + 1) % cfg.val_every_epochs == 0) {
            history.val.push_back({iter + 1, evaluate_classification(model, val_ds).accuracy});
        }
        if (cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every == 0) {
            const NamedTensors<T> extra = opt.to_named();
            save_checkpoint(model, cfg.checkpoint_path, &extra);
        }
    }
    return history;
}

} // namespace pgcam
