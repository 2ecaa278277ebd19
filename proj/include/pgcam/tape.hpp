#pragma once

#include <algorithm>
#include <cstdint>
#include <deque>
#include <functional>
#include <unordered_map>
#include <utility>
#include <vector>

#include "pgcam/tensor.hpp"

namespace pgcam {

using ValueId = std::uint32_t;

template <typename T>
class Tape;

/// Per-value gradient accumulator used while walking the tape backwards.
template <typename T>
class GradBuffer {
public:
    explicit GradBuffer(std::size_t n) : grads_(n), live_(n, false) {}

    /// Gradient slot for `id`, zero-initialised to `shape` on first touch.
    Tensor<T>& accum(ValueId id, const Shape& shape) {
        if (!live_[id]) {
            grads_[id] = Tensor<T>(shape);
            live_[id] = true;
        }
        return grads_[id];
    }

    bool live(ValueId id) const { return live_[id]; }
    Tensor<T>& get(ValueId id) { return grads_[id]; }
    Tensor<T> take(ValueId id) { return std::move(grads_[id]); }

private:
    std::vector<Tensor<T>> grads_;
    std::vector<bool> live_;
};

/// Gradients retained after backward: every trainable leaf plus every tapped
/// intermediate value. Anything else was discarded during the sweep.
template <typename T>
class GradientStore {
public:
    const Tensor<T>& grad(ValueId id) const {
        auto it = grads_.find(id);
        if (it == grads_.end()) {
            std::string taps = "{";
            bool first = true;
            for (const auto& [tid, _] : grads_) {
                if (!first) taps += ",";
                taps += std::to_string(tid);
                first = false;
            }
            taps += "}";
            fail("grad_of: tensor id ", id,
                 " was not tapped before backward; available ids: ", taps);
        }
        return it->second;
    }

    bool has(ValueId id) const { return grads_.count(id) != 0; }
    std::size_t size() const { return grads_.size(); }

    void insert(ValueId id, Tensor<T> g) { grads_.emplace(id, std::move(g)); }

private:
    std::unordered_map<ValueId, Tensor<T>> grads_;
};

/// Recorded computation trace. Operations append nodes in execution order, so
/// reverse creation order is a reverse topological order for backward.
template <typename T>
class Tape {
public:
    using BackwardFn =
        std::function<void(const Tape<T>&, const Tensor<T>& grad_out, GradBuffer<T>&)>;

    /// Register an input value. Trainable leaves always retain gradients.
    ValueId leaf(Tensor<T> value, bool trainable = false) {
        return push(std::move(value), nullptr, trainable);
    }

    /// Record an operation result together with its backward rule.
    ValueId record(Tensor<T> value, BackwardFn backward) {
        return push(std::move(value), std::move(backward), false);
    }

    const Tensor<T>& value(ValueId id) const {
        if (id >= values_.size()) fail("tape: unknown value id ", id);
        return values_[id];
    }

    std::size_t size() const { return values_.size(); }

    /// Mark an intermediate tensor whose gradient must survive backward.
    void mark_tap(ValueId id) {
        if (id >= values_.size()) fail("tape: cannot tap unknown id ", id);
        taps_.push_back(id);
    }

    const std::vector<ValueId>& taps() const { return taps_; }

    /// Reverse-mode sweep from a scalar seed. Gradients for trainable leaves
    /// and tapped values are returned; tapped values that the seed does not
    /// reach get a zero gradient of matching shape.
    GradientStore<T> backward(ValueId seed) const {
        const Tensor<T>& seed_value = value(seed);
        if (seed_value.numel() != 1)
            fail("backward: seed id ", seed, " has shape ", shape_str(seed_value.shape),
                 "; gradients can only be seeded on a scalar");

        GradBuffer<T> buf(values_.size());
        buf.accum(seed, seed_value.shape)[0] = T(1);

        for (std::size_t i = seed + 1; i-- > 0;) {
            const ValueId id = ValueId(i);
            if (!buf.live(id) || !backward_[id]) continue;
            backward_[id](*this, buf.get(id), buf);
        }

        GradientStore<T> store;
        auto retain = [&](ValueId id) {
            if (store.has(id)) return;
            if (buf.live(id))
                store.insert(id, buf.take(id));
            else
                store.insert(id, Tensor<T>(values_[id].shape));
        };
        for (ValueId id = 0; id < values_.size(); ++id)
            if (trainable_[id]) retain(id);
        for (ValueId id : taps_) retain(id);
        return store;
    }

private:
    ValueId push(Tensor<T> value, BackwardFn backward, bool trainable) {
        values_.push_back(std::move(value));
        backward_.push_back(std::move(backward));
        trainable_.push_back(trainable);
        return ValueId(values_.size() - 1);
    }

    // deque keeps references from value() stable while later nodes are
    // appended; op implementations depend on that
    std::deque<Tensor<T>> values_;
    std::vector<BackwardFn> backward_;
    std::vector<bool> trainable_;
    std::vector<ValueId> taps_;
};

} // namespace pgcam
