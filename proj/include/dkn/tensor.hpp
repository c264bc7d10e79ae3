#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "dkn/error.hpp"

namespace dkn {

template <typename T>
class Tape;

inline std::size_t shape_numel(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        if (d < 0) throw ShapeError("negative dimension in shape");
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

inline std::string shape_str(const std::vector<int>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

// Dense n-dimensional value array, row-major, channel-last convention
// [N,H,W,C] for image data. A tensor recorded on a tape carries the id of
// the node that produced it; node < 0 means a plain constant value.
template <typename T>
struct Tensor {
    std::vector<int> shape;
    std::vector<T> data;
    Tape<T>* tape = nullptr;
    int node = -1;

    Tensor() = default;
    Tensor(std::vector<int> s, T fill) : shape(std::move(s)), data(shape_numel(shape), fill) {}
    Tensor(std::vector<int> s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
        if (data.size() != shape_numel(shape))
            throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                             shape_str(shape));
    }

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s), T(0)); }
    static Tensor full(std::vector<int> s, T v) { return Tensor(std::move(s), v); }

    std::size_t size() const { return data.size(); }
    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape.at(static_cast<std::size_t>(i)); }
    bool on_tape() const { return node >= 0; }
    bool requires_grad() const { return node >= 0; }

    T& operator[](std::size_t i) { return data[i]; }
    const T& operator[](std::size_t i) const { return data[i]; }

    // Value copy with no tape record.
    Tensor detached() const {
        Tensor t;
        t.shape = shape;
        t.data = data;
        return t;
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> t;
        t.shape = shape;
        t.data.resize(data.size());
        for (std::size_t i = 0; i < data.size(); ++i) t.data[i] = static_cast<U>(data[i]);
        return t;
    }
};

inline std::size_t idx4(int n, int y, int x, int c, int H, int W, int C) {
    return ((static_cast<std::size_t>(n) * H + y) * W + x) * C + c;
}

inline std::size_t idx3(int y, int x, int c, int W, int C) {
    return (static_cast<std::size_t>(y) * W + x) * C + c;
}

// Reverse-mode tape. Nodes are appended in execution order, which is a
// topological order by construction; backward walks the list once in
// reverse, so accumulation order is deterministic and disjoint subgraphs
// are never touched.
template <typename T>
class Tape {
public:
    using BackFn = std::function<void(Tape<T>&, const std::vector<T>&)>;

    // Registers a leaf (parameter or watched input) and returns a tensor
    // that requires grad.
    Tensor<T> leaf(const Tensor<T>& value) {
        Tensor<T> t = value.detached();
        t.tape = this;
        t.node = record({}, value.size(), nullptr);
        return t;
    }

    int record(std::vector<int> parents, std::size_t out_size, BackFn back) {
        nodes_.push_back(NodeRec{std::move(parents), std::move(back), out_size});
        return static_cast<int>(nodes_.size()) - 1;
    }

    // Populates gradients for all ancestors of `loss`, which must be a
    // scalar recorded on this tape.
    void backward(const Tensor<T>& loss) {
        if (loss.size() != 1) throw UsageError("backward requires a scalar loss");
        if (loss.tape != this || !loss.on_tape()) throw UsageError("loss is not recorded on this tape");
        grads_.assign(nodes_.size(), {});
        grads_[static_cast<std::size_t>(loss.node)] = {T(1)};
        for (int id = loss.node; id >= 0; --id) {
            auto& g = grads_[static_cast<std::size_t>(id)];
            if (g.empty()) continue;
            auto& n = nodes_[static_cast<std::size_t>(id)];
            if (n.back) n.back(*this, g);
        }
    }

    // Gradient slot for a node, allocated zero on first touch.
    std::vector<T>& grad_slot(int node) {
        auto& g = grads_[static_cast<std::size_t>(node)];
        if (g.empty()) g.assign(nodes_[static_cast<std::size_t>(node)].out_size, T(0));
        return g;
    }

    // Gradient of the last backward() w.r.t. tensor `t`; zeros if the loss
    // did not reach it.
    Tensor<T> grad(const Tensor<T>& t) const {
        if (t.tape != this || !t.on_tape()) throw UsageError("tensor is not recorded on this tape");
        return grad_by_node(t.node, t.shape);
    }

    Tensor<T> grad_by_node(int node, const std::vector<int>& shape) const {
        Tensor<T> g = Tensor<T>::zeros(shape);
        if (node >= 0 && static_cast<std::size_t>(node) < grads_.size()) {
            const auto& s = grads_[static_cast<std::size_t>(node)];
            if (!s.empty()) {
                if (s.size() != g.size()) throw ShapeError("gradient size mismatch");
                g.data = s;
            }
        }
        return g;
    }

    bool grad_touched(int node) const {
        return node >= 0 && static_cast<std::size_t>(node) < grads_.size() &&
               !grads_[static_cast<std::size_t>(node)].empty();
    }

    std::size_t num_nodes() const { return nodes_.size(); }

    void clear() {
        nodes_.clear();
        grads_.clear();
    }

private:
    struct NodeRec {
        std::vector<int> parents;
        BackFn back;
        std::size_t out_size;
    };
    std::vector<NodeRec> nodes_;
    std::vector<std::vector<T>> grads_;
};

// Picks the common tape of a set of op inputs (nullptr when all inputs are
// constants). Mixing tensors from two different tapes is a usage error.
template <typename T>
Tape<T>* common_tape(std::initializer_list<const Tensor<T>*> xs) {
    Tape<T>* tape = nullptr;
    for (const Tensor<T>* x : xs) {
        if (!x->on_tape()) continue;
        if (tape && x->tape != tape) throw UsageError("operands recorded on different tapes");
        tape = x->tape;
    }
    return tape;
}

extern template struct Tensor<float>;
extern template struct Tensor<double>;
extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace dkn
