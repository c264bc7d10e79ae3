#include "dkn/projector.hpp"

#include <cmath>
#include <iostream>

#include "dkn/rng.hpp"

namespace dkn {

double Sinogram::total() const {
    double s = 0.0;
    for (double v : data) s += v;
    return s;
}

Projector::Projector(int image_h, int image_w, int n_angles, int n_bins)
    : h_(image_h), w_(image_w), n_angles_(n_angles), n_bins_(n_bins) {
    if (h_ < 1 || w_ < 1 || n_angles_ < 1 || n_bins_ < 1)
        throw DomainError("projector dimensions must be positive");
    n_steps_ = static_cast<int>(std::ceil(std::hypot(h_, w_))) + 4;
}

namespace {

struct Ray {
    double ux, uy;  // detector axis
    double vx, vy;  // ray direction
};

inline Ray ray_for_angle(double theta) {
    return Ray{std::cos(theta), std::sin(theta), -std::sin(theta), std::cos(theta)};
}

}  // namespace

Sinogram Projector::forward(const Tensor<double>& image) const {
    return forward_subset(image, 0, 1);
}

Tensor<double> Projector::adjoint(const Sinogram& sino) const {
    return adjoint_subset(sino, 0, 1);
}

Sinogram Projector::forward_subset(const Tensor<double>& image, int subset,
                                   int n_subsets) const {
    if (image.rank() != 2 || image.dim(0) != h_ || image.dim(1) != w_)
        throw ShapeError("projector: image must be [" + std::to_string(h_) + "," +
                         std::to_string(w_) + "]");
    for (double v : image.data)
        if (v < 0.0) throw DomainError("projector input must be non-negative");
    Sinogram sino;
    sino.n_angles = n_angles_;
    sino.n_bins = n_bins_;
    sino.data.assign(static_cast<std::size_t>(n_angles_) * n_bins_, 0.0);
    const double cx = (w_ - 1) / 2.0, cy = (h_ - 1) / 2.0;
    for (int a = subset; a < n_angles_; a += n_subsets) {
        const Ray r = ray_for_angle(M_PI * a / n_angles_);
        for (int b = 0; b < n_bins_; ++b) {
            const double t = b - (n_bins_ - 1) / 2.0;
            double acc = 0.0;
            for (int k = 0; k < n_steps_; ++k) {
                const double s = k - (n_steps_ - 1) / 2.0;
                const double x = cx + t * r.ux + s * r.vx;
                const double y = cy + t * r.uy + s * r.vy;
                const int x0 = static_cast<int>(std::floor(x));
                const int y0 = static_cast<int>(std::floor(y));
                const double fx = x - x0, fy = y - y0;
                for (int dy = 0; dy < 2; ++dy)
                    for (int dx = 0; dx < 2; ++dx) {
                        const int xi = x0 + dx, yi = y0 + dy;
                        if (xi < 0 || xi >= w_ || yi < 0 || yi >= h_) continue;
                        const double wgt = (dx ? fx : 1.0 - fx) * (dy ? fy : 1.0 - fy);
                        acc += wgt * image.data[static_cast<std::size_t>(yi) * w_ + xi];
                    }
            }
            sino.at(a, b) = acc;
        }
    }
    return sino;
}

Tensor<double> Projector::adjoint_subset(const Sinogram& sino, int subset, int n_subsets) const {
    if (sino.n_angles != n_angles_ || sino.n_bins != n_bins_)
        throw ShapeError("projector: sinogram dims mismatch");
    Tensor<double> img({h_, w_}, 0.0);
    const double cx = (w_ - 1) / 2.0, cy = (h_ - 1) / 2.0;
    for (int a = subset; a < n_angles_; a += n_subsets) {
        const Ray r = ray_for_angle(M_PI * a / n_angles_);
        for (int b = 0; b < n_bins_; ++b) {
            const double val = sino.at(a, b);
            if (val == 0.0) continue;
            const double t = b - (n_bins_ - 1) / 2.0;
            for (int k = 0; k < n_steps_; ++k) {
                const double s = k - (n_steps_ - 1) / 2.0;
                const double x = cx + t * r.ux + s * r.vx;
                const double y = cy + t * r.uy + s * r.vy;
                const int x0 = static_cast<int>(std::floor(x));
                const int y0 = static_cast<int>(std::floor(y));
                const double fx = x - x0, fy = y - y0;
                for (int dy = 0; dy < 2; ++dy)
                    for (int dx = 0; dx < 2; ++dx) {
                        const int xi = x0 + dx, yi = y0 + dy;
                        if (xi < 0 || xi >= w_ || yi < 0 || yi >= h_) continue;
                        const double wgt = (dx ? fx : 1.0 - fx) * (dy ? fy : 1.0 - fy);
                        img.data[static_cast<std::size_t>(yi) * w_ + xi] += wgt * val;
                    }
            }
        }
    }
    return img;
}

Sinogram poisson_sample(const Sinogram& expected, double drf, std::uint64_t seed) {
    if (drf < 1.0) throw DomainError("dose reduction factor must be >= 1");
    Rng rng(seed);
    Sinogram counts = expected;
    for (double& v : counts.data) {
        if (v < 0.0) throw DomainError("expected counts must be non-negative");
        v = static_cast<double>(rng.poisson(v / drf));
    }
    return counts;
}

MlemResult mlem_reconstruct(const Sinogram& counts, const Projector& projector, int iterations,
                            int subsets, double drf_scale) {
    if (iterations < 1) throw DomainError("mlem needs at least one iteration");
    if (subsets < 1 || projector.n_angles() % subsets != 0)
        throw DomainError("subset count must divide the number of angles");
    for (double v : counts.data)
        if (v < 0.0) throw DomainError("counts must be non-negative");

    const int H = projector.image_h(), W = projector.image_w();
    MlemResult res;
    res.image = Tensor<double>({H, W}, 1.0);

    // Per-subset sensitivity images A_s^T 1.
    std::vector<Tensor<double>> sens;
    Sinogram ones;
    ones.n_angles = projector.n_angles();
    ones.n_bins = projector.n_bins();
    ones.data.assign(counts.data.size(), 1.0);
    std::vector<std::vector<char>> alive(subsets);
    for (int s = 0; s < subsets; ++s) {
        sens.push_back(projector.adjoint_subset(ones, s, subsets));
        alive[s].resize(static_cast<std::size_t>(H) * W);
        for (std::size_t i = 0; i < sens[s].size(); ++i)
            alive[s][i] = sens[s].data[i] > 0.0 ? 1 : 0;
    }
    int frozen = 0;
    for (std::size_t i = 0; i < res.image.size(); ++i) {
        bool any = false;
        for (int s = 0; s < subsets; ++s) any = any || alive[s][i];
        if (!any) {
            res.image.data[i] = 0.0;
            ++frozen;
        }
    }
    res.frozen_pixels = frozen;
    if (frozen > 0)
        std::cerr << "mlem: " << frozen << " pixels have zero sensitivity and stay at 0\n";

    constexpr double tiny = 1e-12;
    for (int it = 0; it < iterations; ++it) {
        for (int s = 0; s < subsets; ++s) {
            Sinogram proj = projector.forward_subset(res.image, s, subsets);
            Sinogram ratio = proj;
            for (int a = s; a < projector.n_angles(); a += subsets)
                for (int b = 0; b < projector.n_bins(); ++b) {
                    const double y = counts.at(a, b);
                    const double q = proj.at(a, b);
                    ratio.at(a, b) = y > 0.0 ? y / std::max(q, tiny) : 0.0;
                }
            Tensor<double> update = projector.adjoint_subset(ratio, s, subsets);
            for (std::size_t i = 0; i < res.image.size(); ++i) {
                if (!alive[s][i]) continue;
                res.image.data[i] *= update.data[i] / sens[s].data[i];
            }
        }
    }
    for (double& v : res.image.data) v *= drf_scale;
    return res;
}

double poisson_log_likelihood(const Sinogram& counts, const Projector& projector,
                              const Tensor<double>& image) {
    Sinogram proj = projector.forward(image);
    double ll = 0.0;
    constexpr double tiny = 1e-12;
    for (std::size_t i = 0; i < counts.data.size(); ++i) {
        const double y = counts.data[i];
        const double q = proj.data[i];
        ll -= q;
        if (y > 0.0) ll += y * std::log(std::max(q, tiny));
    }
    return ll;
}

}  // namespace dkn
