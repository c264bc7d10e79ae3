#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "dkn/ops.hpp"
#include "dkn/rng.hpp"
#include "dkn/tensor.hpp"

namespace dkn {

template <typename T>
struct Param {
    std::string name;
    Tensor<T> value;
};

// Binds stored parameters onto a tape at the start of a training forward
// pass, remembering the node ids so gradients can be read back. With a null
// tape (evaluation) parameters pass through as constants.
template <typename T>
class Binder {
public:
    struct Bound {
        Param<T>* param;
        int node;
    };

    explicit Binder(Tape<T>* tape) : tape_(tape) {}

    Tensor<T> operator()(Param<T>& p) {
        if (!tape_) return p.value;
        Tensor<T> t = tape_->leaf(p.value);
        bound_.push_back(Bound{&p, t.node});
        return t;
    }

    bool training() const { return tape_ != nullptr; }
    Tape<T>* tape() const { return tape_; }
    const std::vector<Bound>& bound() const { return bound_; }

private:
    Tape<T>* tape_;
    std::vector<Bound> bound_;
};

template <typename T>
using ParamVisitor = std::function<void(Param<T>&)>;
using BufferVisitor = std::function<void(const std::string&, BatchNormStats&)>;

template <typename T>
struct Conv2dLayer {
    Param<T> w, b;

    void init(const std::string& name, int kh, int kw, int ci, int co, Rng& rng) {
        w.name = name + ".w";
        w.value = Tensor<T>({kh, kw, ci, co}, T(0));
        const double stddev = std::sqrt(2.0 / (static_cast<double>(kh) * kw * ci));
        for (auto& v : w.value.data) v = static_cast<T>(rng.normal(0.0, stddev));
        b.name = name + ".b";
        b.value = Tensor<T>({co}, T(0));
    }

    Tensor<T> forward(Binder<T>& bind, const Tensor<T>& x) {
        return conv2d(x, bind(w), bind(b));
    }

    void visit_params(const ParamVisitor<T>& fn) {
        fn(w);
        fn(b);
    }
};

template <typename T>
struct BatchNormLayer {
    Param<T> gamma, beta;
    BatchNormStats stats;
    std::string name;

    void init(const std::string& n, int c) {
        name = n;
        gamma.name = n + ".gamma";
        gamma.value = Tensor<T>({c}, T(1));
        beta.name = n + ".beta";
        beta.value = Tensor<T>({c}, T(0));
        stats = BatchNormStats{};
    }

    Tensor<T> forward(Binder<T>& bind, const Tensor<T>& x, bool train) {
        return batchnorm2d(x, bind(gamma), bind(beta), stats, train);
    }

    void visit_params(const ParamVisitor<T>& fn) {
        fn(gamma);
        fn(beta);
    }
    void visit_buffers(const BufferVisitor& fn) { fn(name, stats); }
};

// conv 3x3 -> batch norm -> ReLU
template <typename T>
struct ConvBlock {
    Conv2dLayer<T> conv;
    BatchNormLayer<T> bn;

    void init(const std::string& name, int ci, int co, Rng& rng, int k = 3) {
        conv.init(name + ".conv", k, k, ci, co, rng);
        bn.init(name + ".bn", co);
    }

    Tensor<T> forward(Binder<T>& bind, const Tensor<T>& x, bool train) {
        return relu(bn.forward(bind, conv.forward(bind, x), train));
    }

    void visit_params(const ParamVisitor<T>& fn) {
        conv.visit_params(fn);
        bn.visit_params(fn);
    }
    void visit_buffers(const BufferVisitor& fn) { bn.visit_buffers(fn); }
};

// Fully connected stack; ReLU between layers, no activation at the output.
template <typename T>
struct Mlp {
    std::vector<Param<T>> ws, bs;

    void init(const std::string& name, const std::vector<int>& dims, Rng& rng) {
        ws.clear();
        bs.clear();
        for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
            Param<T> w, b;
            w.name = name + ".fc" + std::to_string(i) + ".w";
            w.value = Tensor<T>({dims[i], dims[i + 1]}, T(0));
            const double stddev = std::sqrt(2.0 / dims[i]);
            for (auto& v : w.value.data) v = static_cast<T>(rng.normal(0.0, stddev));
            b.name = name + ".fc" + std::to_string(i) + ".b";
            b.value = Tensor<T>({dims[i + 1]}, T(0));
            ws.push_back(std::move(w));
            bs.push_back(std::move(b));
        }
    }

    Tensor<T> forward(Binder<T>& bind, const Tensor<T>& x) {
        Tensor<T> h = x;
        for (std::size_t i = 0; i < ws.size(); ++i) {
            h = linear(h, bind(ws[i]), bind(bs[i]));
            if (i + 1 < ws.size()) h = relu(h);
        }
        return h;
    }

    void visit_params(const ParamVisitor<T>& fn) {
        for (std::size_t i = 0; i < ws.size(); ++i) {
            fn(ws[i]);
            fn(bs[i]);
        }
    }
};

}  // namespace dkn
