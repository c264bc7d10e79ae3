#pragma once

#include <cstdint>
#include <vector>

#include "dkn/tensor.hpp"

namespace dkn {

// Expected-count (or measured-count) parallel-beam sinogram.
struct Sinogram {
    int n_angles = 0;
    int n_bins = 0;
    std::vector<double> data;  // [angle][bin]

    double& at(int a, int b) { return data[static_cast<std::size_t>(a) * n_bins + b]; }
    double at(int a, int b) const { return data[static_cast<std::size_t>(a) * n_bins + b]; }
    double total() const;
};

// Parallel-beam projector with bilinear ray sampling at unit steps. Angle 0
// integrates along image rows, producing one detector bin per column.
class Projector {
public:
    Projector(int image_h, int image_w, int n_angles, int n_bins);

    Sinogram forward(const Tensor<double>& image) const;
    Tensor<double> adjoint(const Sinogram& sino) const;

    // Restricted to one interleaved angle subset (angles a with
    // a % n_subsets == subset).
    Sinogram forward_subset(const Tensor<double>& image, int subset, int n_subsets) const;
    Tensor<double> adjoint_subset(const Sinogram& sino, int subset, int n_subsets) const;

    int image_h() const { return h_; }
    int image_w() const { return w_; }
    int n_angles() const { return n_angles_; }
    int n_bins() const { return n_bins_; }

private:
    int h_, w_, n_angles_, n_bins_, n_steps_;
};

// counts ~ Poisson(expected / drf), reproducible for a fixed seed.
Sinogram poisson_sample(const Sinogram& expected, double drf, std::uint64_t seed);

struct MlemResult {
    Tensor<double> image;
    int frozen_pixels = 0;  // zero-sensitivity pixels held at zero
};

// Multiplicative MLEM/OSEM over interleaved angle subsets; the final image
// is multiplied by drf_scale to undo the dose reduction.
MlemResult mlem_reconstruct(const Sinogram& counts, const Projector& projector, int iterations,
                            int subsets, double drf_scale = 1.0);

// Poisson log-likelihood sum_i (y_i log q_i - q_i) with q = A(image);
// bins with y=0 contribute -q only.
double poisson_log_likelihood(const Sinogram& counts, const Projector& projector,
                              const Tensor<double>& image);

}  // namespace dkn
