#pragma once

#include <vector>

#include "dkn/layers.hpp"

namespace dkn {

// Which feature levels feed each constraint and how strongly they weigh in.
struct ConstraintConfig {
    double gamma_max = 0.0;
    double gamma_min = 0.0;
    int max_shallow = 0;                    // patches taken from f_pet[max_shallow]
    int max_deep = 3;                       // deep features paired with each patch
    std::vector<int> min_kernel_taps = {0, 1, 2};
    int min_deep = 3;
    int disc_width = 16;

    void validate(int levels) const;
};

// Patch/deep-feature discriminator: three conv blocks with pooling, then a
// 16-8-1 perceptron and a sigmoid.
template <typename T>
class DiscriminatorMax {
public:
    DiscriminatorMax() = default;
    DiscriminatorMax(int in_channels, int spatial, int width, std::uint64_t seed);

    // x [N,s,s,C] -> [N,1] in (0,1).
    Tensor<T> forward(Binder<T>& bind, const Tensor<T>& x, bool train);
    void visit_params(const ParamVisitor<T>& fn);
    void visit_buffers(const BufferVisitor& fn);

private:
    std::vector<ConvBlock<T>> blocks_;
    Mlp<T> mlp_;
    int flat_ = 0;
};

// Kernel-feature discriminator: an encoder shaped like the PET branch with
// the deeper kernel features concatenated into successive stages and the
// deep PET features joining before the last stage, then the 16-8-1 head.
template <typename T>
class DiscriminatorMin {
public:
    DiscriminatorMin() = default;
    DiscriminatorMin(const std::vector<int>& tap_channels, int deep_channels,
                     const std::vector<int>& widths, int top_spatial, std::uint64_t seed);

    // kernel_feats: one tensor per tap, halving spatial dims; deep [N,h,w,C].
    Tensor<T> forward(Binder<T>& bind, const std::vector<Tensor<T>>& kernel_feats,
                      const Tensor<T>& deep, bool train);
    void visit_params(const ParamVisitor<T>& fn);
    void visit_buffers(const BufferVisitor& fn);

private:
    struct Stage {
        ConvBlock<T> b1, b2;
    };
    std::vector<Stage> stages_;
    Mlp<T> mlp_;
    int flat_ = 0;
};

// L_min = -E_joint[log(1 - T_min(f_k, f_deep))], outputs clamped away from
// one so the log stays finite.
template <typename T>
Tensor<T> loss_min(const Tensor<T>& t_out);

// L_max = -(1/N_p) sum_p E_joint[log T_max(p, f_deep)].
template <typename T>
Tensor<T> loss_max(const Tensor<T>& t_out);

// L_I = gamma_max * L_max + gamma_min * L_min.
template <typename T>
Tensor<T> loss_info(const Tensor<T>& lmax, const Tensor<T>& lmin, double gamma_max,
                    double gamma_min);

// Binary cross-entropy over a joint batch (label 1) and a marginal batch
// (label 0), averaged over the combined set.
template <typename T>
Tensor<T> discriminator_bce(const Tensor<T>& joint_out, const Tensor<T>& marginal_out);

extern template class DiscriminatorMax<float>;
extern template class DiscriminatorMax<double>;
extern template class DiscriminatorMin<float>;
extern template class DiscriminatorMin<double>;

}  // namespace dkn
