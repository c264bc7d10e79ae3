#pragma once

#include <vector>

#include "dkn/tensor.hpp"

namespace dkn {

// Elementwise and scalar arithmetic.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s);
template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s);
// s - a, elementwise.
template <typename T>
Tensor<T> rsub_scalar(T s, const Tensor<T>& a);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T>
Tensor<T> log_op(const Tensor<T>& x);
template <typename T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi);

// Reductions to a scalar [1] tensor.
template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);
template <typename T>
Tensor<T> mse_loss(const Tensor<T>& pred, const Tensor<T>& target);

// Shape plumbing. reshape keeps the value, changes the shape.
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, std::vector<int> new_shape);
template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& xs);

// 2D image ops on [N,H,W,C].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias);

struct BatchNormStats {
    std::vector<double> mean;
    std::vector<double> var;
    bool initialized = false;
};

// Train mode normalises over N,H,W per channel with eps=1e-5 and updates
// `running` with momentum 0.9; eval mode applies the running statistics.
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      BatchNormStats& running, bool train, double momentum = 0.9,
                      double eps = 1e-5);

template <typename T>
Tensor<T> maxpool2x2(const Tensor<T>& x);
template <typename T>
Tensor<T> upsample_bilinear2x(const Tensor<T>& x);

// Softmax over groups of `n_b` consecutive channels: channel index c*n_b+m.
template <typename T>
Tensor<T> channel_softmax(const Tensor<T>& x, int n_b);

// Dense layer: x[N,K] * w[K,M] + b[M].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

// Non-overlapping tiling of [N,H,W,C] into [N*Np, size, size, C]; tiles are
// ordered item-major, then row-major over the tile grid.
template <typename T>
Tensor<T> extract_patches(const Tensor<T>& x, int size);

// Batch roll: out[i] = in[(i+1) mod N]. The marginal-sampling permutation.
template <typename T>
Tensor<T> roll_batch(const Tensor<T>& x);

// out[i*k + j] = in[i]; pairs one item with k patches.
template <typename T>
Tensor<T> repeat_batch(const Tensor<T>& x, int k);

// Debug-mode guard: throws NumericError when a forward output contains
// NaN/Inf. Compiled out in release builds.
template <typename T>
void check_finite(const Tensor<T>& x, const char* where);

extern template Tensor<float> add(const Tensor<float>&, const Tensor<float>&);
extern template Tensor<double> add(const Tensor<double>&, const Tensor<double>&);

}  // namespace dkn
