#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "dkn/layers.hpp"

namespace dkn {

// Scheduled rate: base * 0.99^(N/100), N in batches.
double lr_schedule(double base, long batches);

// Scales the gradient group so its global L2 norm is at most max_norm.
// Returns the pre-clip norm.
template <typename T>
double clip_global_norm(std::map<std::string, std::vector<T>>& grads, double max_norm);

// Bias-corrected Adam over a named parameter group. Moment slots are keyed
// by parameter name so they survive checkpointing.
template <typename T>
class Adam {
public:
    Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : beta1_(beta1), beta2_(beta2), eps_(eps) {}

    // Applies one update at learning rate `lr`. Throws NumericError naming
    // the parameter if a gradient is NaN/Inf.
    void step(std::vector<Param<T>*>& params,
              const std::map<std::string, std::vector<T>>& grads, double lr);

    long steps_taken() const { return t_; }

    void save(const std::filesystem::path& dir) const;
    void load(const std::filesystem::path& dir, long steps);

private:
    struct Slot {
        std::vector<T> m, v;
    };
    std::map<std::string, Slot> slots_;
    double beta1_, beta2_, eps_;
    long t_ = 0;
};

extern template class Adam<float>;
extern template class Adam<double>;
extern template double clip_global_norm(std::map<std::string, std::vector<float>>&, double);
extern template double clip_global_norm(std::map<std::string, std::vector<double>>&, double);

}  // namespace dkn
