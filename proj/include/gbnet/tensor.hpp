#pragma once

#include <atomic>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_map>
#include <utility>

#include "gbnet/common.hpp"

namespace gbnet {

inline std::int64_t next_node_id() {
    static std::atomic<std::int64_t> counter{0};
    return counter.fetch_add(1, std::memory_order_relaxed);
}

// Retired data buffers shelved by exact size. Every kernel overwrites its
// output in full, so the zero-fill that comes with a fresh allocation is pure
// overhead, and a training step retires and reacquires the same sizes over
// and over. Shelved bytes are capped near one step's worth of transients;
// past that, buffers free for real.
template <typename S>
class BufferPool {
public:
    static BufferPool& local() {
        thread_local BufferPool pool;
        return pool;
    }

    std::shared_ptr<std::vector<S>> acquire(std::size_t n) {
        auto& shelf = shelves_[n];
        std::vector<S>* buf;
        if (shelf.empty()) {
            buf = new std::vector<S>(n);
        } else {
            buf = shelf.back().release();
            shelf.pop_back();
            held_ -= n * sizeof(S);
        }
        return std::shared_ptr<std::vector<S>>(
            buf, [](std::vector<S>* v) { BufferPool::local().shelve(v); });
    }

    std::size_t held_bytes() const { return held_; }

private:
    static constexpr std::size_t cap_bytes = std::size_t(1536) << 20;

    void shelve(std::vector<S>* v) {
        const std::size_t bytes = v->size() * sizeof(S);
        if (held_ + bytes > cap_bytes) {
            delete v;
            return;
        }
        held_ += bytes;
        shelves_[v->size()].emplace_back(v);
    }

    std::unordered_map<std::size_t, std::vector<std::unique_ptr<std::vector<S>>>> shelves_;
    std::size_t held_ = 0;
};

// Storage behind a Tensor handle. `data` is a shared buffer so reshape can
// alias without copying; `grad` is always a private buffer.
template <typename S>
struct TensorNode {
    Shape shape;
    std::shared_ptr<std::vector<S>> data;
    std::vector<S> grad;
    bool requires_grad = false;
    std::int64_t node_id = next_node_id();

    std::int64_t numel() const { return numel_of(shape); }

    std::vector<S>& ensure_grad() {
        if (grad.empty()) grad.assign(static_cast<std::size_t>(numel()), S(0));
        return grad;
    }
};

template <typename S>
using NodePtr = std::shared_ptr<TensorNode<S>>;

// Value-semantics handle; copies share the node (and therefore the gradient).
template <typename S>
class Tensor {
public:
    using Scalar = S;

    Tensor() = default;
    explicit Tensor(NodePtr<S> node) : node_(std::move(node)) {}

    static Tensor from(std::vector<S> data, Shape shape, bool requires_grad = false) {
        if (static_cast<std::int64_t>(data.size()) != numel_of(shape))
            shape_error("tensor: data length " + std::to_string(data.size()) +
                        " does not match shape " + shape_str(shape));
        auto node = std::make_shared<TensorNode<S>>();
        node->shape = std::move(shape);
        node->data = std::make_shared<std::vector<S>>(std::move(data));
        Tensor t(std::move(node));
        if (requires_grad) t.set_requires_grad(true);
        return t;
    }

    static Tensor full(Shape shape, S value, bool requires_grad = false) {
        auto n = numel_of(shape);
        return from(std::vector<S>(static_cast<std::size_t>(n), value), std::move(shape),
                    requires_grad);
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return full(std::move(shape), S(0), requires_grad);
    }

    static Tensor scalar(S value, bool requires_grad = false) {
        return from({value}, Shape{}, requires_grad);
    }

    // Contents are unspecified: possibly a recycled buffer, not zeros.
    static Tensor uninit(Shape shape) {
        auto node = std::make_shared<TensorNode<S>>();
        node->data = BufferPool<S>::local().acquire(static_cast<std::size_t>(numel_of(shape)));
        node->shape = std::move(shape);
        return Tensor(std::move(node));
    }

    bool valid() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::int64_t rank() const { return static_cast<std::int64_t>(node_->shape.size()); }
    std::int64_t dim(std::size_t i) const { return node_->shape[i]; }
    std::int64_t numel() const { return node_->numel(); }

    std::vector<S>& data() { return *node_->data; }
    const std::vector<S>& data() const { return *node_->data; }

    bool requires_grad() const { return node_->requires_grad; }

    Tensor& set_requires_grad(bool v) {
        node_->requires_grad = v;
        if (v)
            node_->ensure_grad();
        else
            node_->grad.clear();
        return *this;
    }

    bool has_grad() const { return !node_->grad.empty(); }

    const std::vector<S>& grad() const {
        if (node_->grad.empty())
            throw ValueError("tensor: gradient not populated (node " +
                             std::to_string(node_->node_id) + ")");
        return node_->grad;
    }

    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), S(0));
    }

    std::int64_t node_id() const { return node_->node_id; }

    S item() const {
        if (numel() != 1)
            shape_error("tensor: item() on non-scalar shape " + shape_str(shape()));
        return (*node_->data)[0];
    }

    const NodePtr<S>& node() const { return node_; }

private:
    NodePtr<S> node_;
};

// Ordered record of executed primitives. Constructing a Tape makes it the
// active one for this thread; ops record onto it when an input requires grad.
// One forward+backward pass per tape, one tape per thread.
template <typename S>
class Tape {
public:
    struct Record {
        const char* name;
        NodePtr<S> out;
        std::function<void()> backward;
    };

    Tape() : previous_(active_ref()) { active_ref() = this; }

    ~Tape() { active_ref() = previous_; }

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active() { return active_ref(); }

    void record(const char* name, NodePtr<S> out, std::function<void()> backward) {
        records_.push_back(Record{name, std::move(out), std::move(backward)});
    }

    // Reverse-mode accumulation in fixed reverse tape order. Each op is
    // visited exactly once; interior buffers are released as soon as the
    // walk passes them unless retain_buffers is set.
    void backward(const Tensor<S>& loss) {
        if (loss.numel() != 1)
            shape_error("backward: loss must be a scalar, got " + shape_str(loss.shape()));
        loss.node()->ensure_grad()[0] = S(1);
        for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
            auto& out = *it->out;
            if (!out.grad.empty()) it->backward();
            if (!retain_buffers) {
                out.grad = {};
                // Drop forward values that only the tape still references.
                if (it->out.use_count() == 1 && out.data.use_count() == 1) out.data.reset();
            }
        }
    }

    std::size_t size() const { return records_.size(); }
    const char* op_name(std::size_t i) const { return records_[i].name; }
    const Shape& out_shape(std::size_t i) const { return records_[i].out->shape; }

    bool retain_buffers = false;

private:
    static Tape*& active_ref() {
        static thread_local Tape* active = nullptr;
        return active;
    }

    std::vector<Record> records_;
    Tape* previous_;
};

template <typename S>
inline bool tracing(const Tensor<S>& a) {
    return Tape<S>::active() != nullptr && a.requires_grad();
}

template <typename S, typename... Rest>
inline bool tracing(const Tensor<S>& a, const Rest&... rest) {
    return tracing(a) || tracing(rest...);
}

template <typename S>
inline void check_finite(const char* op, const Tensor<S>& t) {
    if (!debug::nan_checks()) return;
    for (S v : t.data())
        if (!std::isfinite(v))
            throw std::runtime_error(std::string(op) + ": produced non-finite value");
}

}  // namespace gbnet
