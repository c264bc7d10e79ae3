#include "dkn/optim.hpp"

#include <cmath>

#include "dkn/io.hpp"
#include "dkn/network.hpp"

namespace dkn {

double lr_schedule(double base, long batches) {
    if (batches < 0) throw DomainError("batch counter must be non-negative");
    return base * std::pow(0.99, static_cast<double>(batches) / 100.0);
}

template <typename T>
double clip_global_norm(std::map<std::string, std::vector<T>>& grads, double max_norm) {
    double sq = 0.0;
    for (const auto& [name, g] : grads)
        for (const T& v : g) sq += static_cast<double>(v) * v;
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const T scale = static_cast<T>(max_norm / norm);
        for (auto& [name, g] : grads)
            for (T& v : g) v *= scale;
    }
    return norm;
}

template <typename T>
void Adam<T>::step(std::vector<Param<T>*>& params,
                   const std::map<std::string, std::vector<T>>& grads, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (Param<T>* p : params) {
        auto it = grads.find(p->name);
        if (it == grads.end()) continue;  // loss did not reach this parameter
        const auto& g = it->second;
        if (g.size() != p->value.size())
            throw ShapeError("gradient size mismatch for " + p->name);
        auto& slot = slots_[p->name];
        if (slot.m.empty()) {
            slot.m.assign(g.size(), T(0));
            slot.v.assign(g.size(), T(0));
        }
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double gv = g[i];
            if (!std::isfinite(gv))
                throw NumericError("NaN/Inf gradient in parameter " + p->name);
            slot.m[i] = static_cast<T>(beta1_ * slot.m[i] + (1.0 - beta1_) * gv);
            slot.v[i] = static_cast<T>(beta2_ * slot.v[i] + (1.0 - beta2_) * gv * gv);
            const double mhat = slot.m[i] / bc1;
            const double vhat = slot.v[i] / bc2;
            p->value.data[i] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + eps_));
        }
    }
}

template <typename T>
void Adam<T>::save(const std::filesystem::path& dir) const {
    ensure_dir(dir);
    for (const auto& [name, slot] : slots_) {
        const std::string base = sanitize_param_name(name);
        save_dkt1(dir / (base + ".m.dkt1"),
                  Tensor<T>({static_cast<int>(slot.m.size())}, slot.m));
        save_dkt1(dir / (base + ".v.dkt1"),
                  Tensor<T>({static_cast<int>(slot.v.size())}, slot.v));
    }
}

template <typename T>
void Adam<T>::load(const std::filesystem::path& dir, long steps) {
    t_ = steps;
    slots_.clear();
    if (!std::filesystem::exists(dir)) return;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        const std::string fname = entry.path().filename().string();
        if (fname.size() < 8 || fname.substr(fname.size() - 7) != ".m.dkt1") continue;
        const std::string base = fname.substr(0, fname.size() - 7);
        auto m = load_dkt1<T>(entry.path());
        auto v = load_dkt1<T>(dir / (base + ".v.dkt1"));
        slots_[base] = Slot{m.data, v.data};
    }
}

template class Adam<float>;
template class Adam<double>;
template double clip_global_norm(std::map<std::string, std::vector<float>>&, double);
template double clip_global_norm(std::map<std::string, std::vector<double>>&, double);

}  // namespace dkn
