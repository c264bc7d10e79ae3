#pragma once

#include <memory>
#include <string>
#include <vector>

#include "dkn/patch_table.hpp"
#include "dkn/tensor.hpp"

namespace dkn {

enum class KernelFamily { Linear, Rbf };

KernelFamily kernel_family_from_string(const std::string& s);
std::string to_string(KernelFamily f);

// Per-center, per-feature normalisation entries d = 1 / sum_j k_{i,j,m}.
template <typename T>
struct Normalizer {
    int num_centers = 0;
    int n_b = 0;
    std::vector<T> d;  // [center][m]
};

// Assembled latent-space kernel matrix in CSR form, with its provenance.
template <typename T>
struct SparseKernel {
    int n = 0;    // grid sites, h*w
    int h = 0, w = 0;
    int p = 1, s = 1;
    KernelFamily family = KernelFamily::Linear;
    double sigma = 0.0;
    std::vector<int> row_offsets;
    std::vector<int> col_indices;
    std::vector<T> values;

    std::size_t nnz() const { return values.size(); }

    std::vector<T> matvec(const std::vector<T>& x) const;
    Tensor<T> apply(const Tensor<T>& alpha_hw) const;  // [h,w] -> [h,w]
    Tensor<T> row_image(int y, int x) const;           // dense row as [h,w]

    // Symmetry (1e-6), non-negativity, and the Chebyshev sparsity bound.
    void validate() const;
};

template <typename T>
Normalizer<T> compute_normalizer(const Tensor<T>& b_hw, const PatchTable& table);

// b_hw is one channel's softmax feature slice [h,w,N_b], entries positive.
template <typename T>
SparseKernel<T> build_kernel(const Tensor<T>& b_hw, const PatchTable& table);

template <typename T>
SparseKernel<T> build_kernel_rbf(const Tensor<T>& b_hw, const PatchTable& table, double sigma);

// Differentiable kernel feature map f_k = K(b) * alpha, batched over items
// and channels: b [N,h,w,C*N_b] grouped channel-major, alpha [N,h,w,C].
// Gradients flow to alpha and, through the kernel assembly, to b. The hot
// path works from per-center sums and never materialises the matrix.
template <typename T>
Tensor<T> kernel_apply(const Tensor<T>& b, const Tensor<T>& alpha,
                       std::shared_ptr<const PatchTable> table, KernelFamily family,
                       double sigma);

extern template struct SparseKernel<float>;
extern template struct SparseKernel<double>;

}  // namespace dkn
