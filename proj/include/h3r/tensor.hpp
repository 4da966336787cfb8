#pragma once

#include <cmath>
#include <functional>
#include <initializer_list>
#include <memory>
#include <utility>
#include <vector>

#include "h3r/common.hpp"
#include "h3r/rng.hpp"

namespace h3r {

template <typename T>
struct TensorStorage {
    Shape shape;
    std::vector<T> values;
    std::vector<T> grad;  // empty until first accumulation
    bool requires_grad = false;
    bool leaf = true;  // false for outputs produced while taping
};

// Dense row-major tensor. Copying a Tensor copies the handle; ops are pure
// and allocate fresh storage, so sharing is safe. Gradients accumulate into
// the shared storage, which is what lets a captured handle inside a tape
// closure feed the caller's parameter.
template <typename T>
class Tensor {
public:
    using Scalar = T;

    Tensor() = default;
    explicit Tensor(Shape shape)
        : s_(std::make_shared<TensorStorage<T>>()) {
        for (i64 d : shape)
            if (d <= 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
        s_->shape = std::move(shape);
        s_->values.assign(static_cast<size_t>(numel_of(s_->shape)), T(0));
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    static Tensor full(Shape shape, T value) {
        Tensor t(std::move(shape));
        for (auto& v : t.s_->values) v = value;
        return t;
    }

    static Tensor scalar(T value) { return full({1}, value); }

    static Tensor from(Shape shape, std::vector<T> values) {
        Tensor t;
        t.s_ = std::make_shared<TensorStorage<T>>();
        if (numel_of(shape) != static_cast<i64>(values.size()))
            throw ShapeError("value count " + std::to_string(values.size()) +
                             " does not match shape " + shape_str(shape));
        t.s_->shape = std::move(shape);
        t.s_->values = std::move(values);
        return t;
    }

    static Tensor from(Shape shape, std::initializer_list<T> values) {
        return from(std::move(shape), std::vector<T>(values));
    }

    static Tensor rand_uniform(Shape shape, Rng& rng, T lo, T hi) {
        Tensor t(std::move(shape));
        for (auto& v : t.s_->values) v = static_cast<T>(rng.uniform(lo, hi));
        return t;
    }

    static Tensor rand_normal(Shape shape, Rng& rng, T mean, T stddev) {
        Tensor t(std::move(shape));
        for (auto& v : t.s_->values) v = static_cast<T>(rng.normal(mean, stddev));
        return t;
    }

    bool defined() const { return static_cast<bool>(s_); }
    const Shape& shape() const { return s_->shape; }
    int rank() const { return static_cast<int>(s_->shape.size()); }
    i64 dim(int i) const { return s_->shape[static_cast<size_t>(i)]; }
    i64 numel() const { return static_cast<i64>(s_->values.size()); }

    T* data() { return s_->values.data(); }
    const T* data() const { return s_->values.data(); }
    std::vector<T>& vec() { return s_->values; }
    const std::vector<T>& vec() const { return s_->values; }

    T item() const {
        if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
        return s_->values[0];
    }

    T& at(i64 flat) { return s_->values[static_cast<size_t>(flat)]; }
    T at(i64 flat) const { return s_->values[static_cast<size_t>(flat)]; }

    // row-major multi-index access, mainly for tests and small setup code
    template <typename... Ix>
    T& operator()(Ix... ix) {
        return s_->values[static_cast<size_t>(flat_index(ix...))];
    }
    template <typename... Ix>
    T operator()(Ix... ix) const {
        return s_->values[static_cast<size_t>(flat_index(ix...))];
    }

    bool requires_grad() const { return s_ && s_->requires_grad; }
    Tensor& set_requires_grad(bool on = true) {
        s_->requires_grad = on;
        return *this;
    }
    bool is_leaf() const { return s_->leaf; }
    void mark_nonleaf() { s_->leaf = false; }

    bool has_grad() const { return s_ && !s_->grad.empty(); }
    void ensure_grad() {
        if (s_->grad.empty()) s_->grad.assign(s_->values.size(), T(0));
    }
    T* grad_data() {
        ensure_grad();
        return s_->grad.data();
    }
    const std::vector<T>& grad_vec() const { return s_->grad; }
    void zero_grad() {
        if (!s_->grad.empty()) s_->grad.assign(s_->values.size(), T(0));
    }
    Tensor grad() const {
        Tensor g(shape());
        if (!s_->grad.empty()) g.s_->values = s_->grad;
        return g;
    }

    // Deep copy of the values; detached from any tape.
    Tensor clone() const {
        Tensor t;
        t.s_ = std::make_shared<TensorStorage<T>>();
        t.s_->shape = s_->shape;
        t.s_->values = s_->values;
        return t;
    }

    Tensor detach() const { return clone(); }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> t(shape());
        const T* src = data();
        U* dst = t.data();
        for (i64 i = 0; i < numel(); ++i) dst[i] = static_cast<U>(src[i]);
        return t;
    }

    std::shared_ptr<TensorStorage<T>> storage() const { return s_; }

    // Accumulates g (same numel) into this tensor's grad buffer.
    void accumulate_grad(const T* g, i64 n) {
        ensure_grad();
        T* dst = s_->grad.data();
        for (i64 i = 0; i < n; ++i) dst[i] += g[i];
    }

private:
    template <typename... Ix>
    i64 flat_index(Ix... ix) const {
        const i64 idx[] = {static_cast<i64>(ix)...};
        constexpr size_t k = sizeof...(Ix);
        if (k != s_->shape.size())
            throw ShapeError("index rank mismatch for shape " + shape_str(s_->shape));
        i64 flat = 0;
        for (size_t i = 0; i < k; ++i) flat = flat * s_->shape[i] + idx[i];
        return flat;
    }

    std::shared_ptr<TensorStorage<T>> s_;
};

// Reverse-mode tape. Ops record a closure per node while a tape is active;
// backward(loss) zeroes the grads of every node output, seeds the loss with
// one and replays the closures in reverse. Leaf grads are never zeroed here,
// so repeated backward calls accumulate into parameters.
template <typename T>
class Tape {
public:
    static Tape*& active() {
        static thread_local Tape* cur = nullptr;
        return cur;
    }

    class Scope {
    public:
        explicit Scope(Tape& t) : prev_(active()) { active() = &t; }
        ~Scope() { active() = prev_; }
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        Tape* prev_;
    };

    void record(Tensor<T> output, std::function<void()> backward_fn) {
        output.set_requires_grad(true);
        output.mark_nonleaf();
        nodes_.push_back({output.storage(), std::move(backward_fn)});
    }

    void backward(const Tensor<T>& loss) {
        if (loss.numel() != 1)
            throw ContractError("backward expects a scalar loss, got " + shape_str(loss.shape()));
        if (nodes_.empty()) throw ContractError("backward on an empty tape");
        if (loss.is_leaf())
            throw ContractError("loss does not depend on any taped computation");

        for (auto& n : nodes_) n.output->grad.assign(n.output->values.size(), T(0));
        loss.storage()->grad[0] = T(1);

        // Ops called from closures must not re-record.
        Tape* prev = active();
        active() = nullptr;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->fn();
        active() = prev;
    }

    void clear() { nodes_.clear(); }
    size_t size() const { return nodes_.size(); }
    bool empty() const { return nodes_.empty(); }

private:
    struct Node {
        std::shared_ptr<TensorStorage<T>> output;
        std::function<void()> fn;
    };
    std::vector<Node> nodes_;
};

template <typename T>
inline bool taping() {
    return Tape<T>::active() != nullptr;
}

// Named leaf tensor; the name is the checkpoint identity.
template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> value;
};

// Flat view over a model's parameters in registration order. Registration
// order is deterministic, which makes checkpoints and optimizer state stable.
template <typename T>
class ParamMap {
public:
    void add(const std::string& name, Tensor<T>& t) {
        t.set_requires_grad(true);
        for (const auto& e : entries_)
            if (e.name == name) throw ContractError("duplicate parameter name: " + name);
        entries_.push_back({name, &t});
    }

    struct Entry {
        std::string name;
        Tensor<T>* tensor;
    };

    const std::vector<Entry>& entries() const { return entries_; }
    size_t size() const { return entries_.size(); }

    i64 total_elements() const {
        i64 n = 0;
        for (const auto& e : entries_) n += e.tensor->numel();
        return n;
    }

    Tensor<T>* find(const std::string& name) const {
        for (const auto& e : entries_)
            if (e.name == name) return e.tensor;
        return nullptr;
    }

    void zero_grads() {
        for (auto& e : entries_) e.tensor->zero_grad();
    }

private:
    std::vector<Entry> entries_;
};

}  // namespace h3r
