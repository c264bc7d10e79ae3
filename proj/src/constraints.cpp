#include "dkn/constraints.hpp"

#include <algorithm>

namespace dkn {

namespace {
constexpr double kLogGuard = 1e-7;
}

void ConstraintConfig::validate(int levels) const {
    if (gamma_max < 0.0 || gamma_min < 0.0)
        throw ConfigError("constraint weights must be non-negative");
    auto in_range = [&](int l) { return l >= 0 && l <= levels; };
    if (!in_range(max_shallow) || !in_range(max_deep) || !in_range(min_deep))
        throw ConfigError("constraint layer tap outside [0, levels]");
    if (max_shallow >= max_deep)
        throw ConfigError("information maximisation patches must come from a shallower layer");
    for (int l : min_kernel_taps)
        if (!in_range(l) || l >= min_deep)
            throw ConfigError("information minimisation kernel taps must be shallower than the "
                              "deep feature layer");
    if (min_kernel_taps.empty())
        throw ConfigError("information minimisation needs at least one kernel tap");
    for (std::size_t i = 1; i < min_kernel_taps.size(); ++i)
        if (min_kernel_taps[i] != min_kernel_taps[i - 1] + 1)
            throw ConfigError("kernel taps must be consecutive levels starting at the input tap");
}

template <typename T>
DiscriminatorMax<T>::DiscriminatorMax(int in_channels, int spatial, int width,
                                      std::uint64_t seed) {
    if (spatial % 8 != 0 && spatial != 4 && spatial != 2)
        throw ConfigError("discriminator input spatial size must pool three times, got " +
                          std::to_string(spatial));
    Rng rng(seed);
    blocks_.resize(3);
    int c = in_channels;
    int s = spatial;
    for (int i = 0; i < 3; ++i) {
        blocks_[i].init("tmax.block" + std::to_string(i), c, width, rng);
        c = width;
        if (s >= 2) s /= 2;
    }
    flat_ = s * s * width;
    mlp_.init("tmax.mlp", {flat_, 16, 8, 1}, rng);
}

template <typename T>
Tensor<T> DiscriminatorMax<T>::forward(Binder<T>& bind, const Tensor<T>& x, bool train) {
    Tensor<T> h = x;
    for (auto& blk : blocks_) {
        h = blk.forward(bind, h, train);
        if (h.dim(1) >= 2 && h.dim(2) >= 2) h = maxpool2x2(h);
    }
    h = reshape(h, {h.dim(0), flat_});
    return sigmoid(mlp_.forward(bind, h));
}

template <typename T>
void DiscriminatorMax<T>::visit_params(const ParamVisitor<T>& fn) {
    for (auto& b : blocks_) b.visit_params(fn);
    mlp_.visit_params(fn);
}

template <typename T>
void DiscriminatorMax<T>::visit_buffers(const BufferVisitor& fn) {
    for (auto& b : blocks_) b.visit_buffers(fn);
}

template <typename T>
DiscriminatorMin<T>::DiscriminatorMin(const std::vector<int>& tap_channels, int deep_channels,
                                      const std::vector<int>& widths, int top_spatial,
                                      std::uint64_t seed) {
    if (tap_channels.empty()) throw ConfigError("discriminator needs at least one kernel tap");
    Rng rng(seed);
    const int n_stages = static_cast<int>(tap_channels.size()) + 1;
    if (static_cast<int>(widths.size()) < n_stages)
        throw ConfigError("not enough stage widths for the discriminator taps");
    stages_.resize(n_stages);
    int s = top_spatial;
    int prev = 0;
    for (int i = 0; i < n_stages; ++i) {
        const int extra = i < static_cast<int>(tap_channels.size()) ? tap_channels[i] : deep_channels;
        const int ci = prev + extra;
        stages_[i].b1.init("tmin.stage" + std::to_string(i) + ".b1", ci, widths[i], rng);
        stages_[i].b2.init("tmin.stage" + std::to_string(i) + ".b2", widths[i], widths[i], rng);
        prev = widths[i];
        s /= 2;
    }
    flat_ = s * s * widths[n_stages - 1];
    mlp_.init("tmin.mlp", {flat_, 16, 8, 1}, rng);
}

template <typename T>
Tensor<T> DiscriminatorMin<T>::forward(Binder<T>& bind, const std::vector<Tensor<T>>& kernel_feats,
                                       const Tensor<T>& deep, bool train) {
    if (kernel_feats.size() + 1 != stages_.size())
        throw ConfigError("discriminator tap count mismatch");
    Tensor<T> h;
    for (std::size_t i = 0; i < stages_.size(); ++i) {
        const Tensor<T>& extra = i < kernel_feats.size() ? kernel_feats[i] : deep;
        Tensor<T> in;
        if (i == 0) {
            in = extra;
        } else {
            std::vector<Tensor<T>> parts{h, extra};
            in = concat_channels(parts);
        }
        h = stages_[i].b2.forward(bind, stages_[i].b1.forward(bind, in, train), train);
        h = maxpool2x2(h);
    }
    h = reshape(h, {h.dim(0), flat_});
    return sigmoid(mlp_.forward(bind, h));
}

template <typename T>
void DiscriminatorMin<T>::visit_params(const ParamVisitor<T>& fn) {
    for (auto& s : stages_) {
        s.b1.visit_params(fn);
        s.b2.visit_params(fn);
    }
    mlp_.visit_params(fn);
}

template <typename T>
void DiscriminatorMin<T>::visit_buffers(const BufferVisitor& fn) {
    for (auto& s : stages_) {
        s.b1.visit_buffers(fn);
        s.b2.visit_buffers(fn);
    }
}

template <typename T>
Tensor<T> loss_min(const Tensor<T>& t_out) {
    auto one_minus = clamp(rsub_scalar(T(1), t_out), static_cast<T>(kLogGuard), T(1));
    return mul_scalar(mean(log_op(one_minus)), T(-1));
}

template <typename T>
Tensor<T> loss_max(const Tensor<T>& t_out) {
    auto p = clamp(t_out, static_cast<T>(kLogGuard), T(1));
    return mul_scalar(mean(log_op(p)), T(-1));
}

template <typename T>
Tensor<T> loss_info(const Tensor<T>& lmax, const Tensor<T>& lmin, double gamma_max,
                    double gamma_min) {
    if (gamma_max < 0.0 || gamma_min < 0.0)
        throw ConfigError("constraint weights must be non-negative");
    return add(mul_scalar(lmax, static_cast<T>(gamma_max)),
               mul_scalar(lmin, static_cast<T>(gamma_min)));
}

template <typename T>
Tensor<T> discriminator_bce(const Tensor<T>& joint_out, const Tensor<T>& marginal_out) {
    auto pj = clamp(joint_out, static_cast<T>(kLogGuard), T(1));
    auto pm = clamp(rsub_scalar(T(1), marginal_out), static_cast<T>(kLogGuard), T(1));
    auto ce = add(mul_scalar(mean(log_op(pj)), T(-1)), mul_scalar(mean(log_op(pm)), T(-1)));
    return mul_scalar(ce, T(0.5));
}

#define DKN_INSTANTIATE_CONSTRAINTS(T)                                                   \
    template class DiscriminatorMax<T>;                                                  \
    template class DiscriminatorMin<T>;                                                  \
    template Tensor<T> loss_min(const Tensor<T>&);                                       \
    template Tensor<T> loss_max(const Tensor<T>&);                                       \
    template Tensor<T> loss_info(const Tensor<T>&, const Tensor<T>&, double, double);    \
    template Tensor<T> discriminator_bce(const Tensor<T>&, const Tensor<T>&);

DKN_INSTANTIATE_CONSTRAINTS(float)
DKN_INSTANTIATE_CONSTRAINTS(double)

#undef DKN_INSTANTIATE_CONSTRAINTS

}  // namespace dkn
