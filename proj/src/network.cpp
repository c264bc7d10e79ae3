#include "dkn/network.hpp"

#include <algorithm>

#include "dkn/io.hpp"

namespace dkn {

void ensure_dir(const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

std::string sanitize_param_name(const std::string& name) {
    std::string s = name;
    for (char& c : s)
        if (c == '/' || c == '\\') c = '_';
    return s;
}

std::vector<LayerSpec> make_layer_specs(const NetConfig& cfg) {
    if (cfg.levels < 1) throw ConfigError("network needs at least one level");
    if (static_cast<int>(cfg.widths.size()) != cfg.levels + 1)
        throw ConfigError("widths must list levels+1 entries, got " +
                          std::to_string(cfg.widths.size()));
    if (cfg.input_hw % (1 << cfg.levels) != 0)
        throw ConfigError("input size " + std::to_string(cfg.input_hw) + " not divisible by 2^" +
                          std::to_string(cfg.levels));
    if (cfg.patch_top < 1 || cfg.stride_top < 1)
        throw ConfigError("patch and stride must be positive");
    std::vector<LayerSpec> specs;
    for (int l = 0; l <= cfg.levels; ++l) {
        LayerSpec s;
        s.level = l;
        s.channels = cfg.widths[l];
        s.h = s.w = cfg.input_hw >> l;
        s.patch = std::min(std::max(1, cfg.patch_top >> l), s.h);
        s.stride = std::min(std::max(1, cfg.stride_top >> l), s.patch);
        s.family = cfg.family;
        s.n_b = cfg.n_b;
        specs.push_back(s);
    }
    return specs;
}

template <typename T>
DeepKernelNet<T>::DeepKernelNet(const NetConfig& cfg) : cfg_(cfg), specs_(make_layer_specs(cfg)) {
    Rng rng(derive_seed(cfg.seed, "network-init"));
    const int L = cfg_.levels;
    for (int l = 0; l <= L; ++l)
        tables_.push_back(std::make_shared<const PatchTable>(
            build_patch_table(specs_[l].h, specs_[l].w, specs_[l].patch, specs_[l].stride)));

    auto make_branch = [&](std::vector<EncoderLevel>& enc, const std::string& prefix, int in_ch) {
        enc.resize(L + 1);
        for (int l = 0; l <= L; ++l) {
            const int ci = l == 0 ? in_ch : cfg_.widths[l - 1];
            const int co = cfg_.widths[l];
            enc[l].b1.init(prefix + std::to_string(l) + ".b1", ci, co, rng);
            enc[l].b2.init(prefix + std::to_string(l) + ".b2", co, co, rng);
        }
    };
    make_branch(pet_enc_, "pet.enc", cfg_.pet_channels);
    make_branch(mr_enc_, "mr.enc", cfg_.mr_channels);

    kgen_.resize(L + 1);
    for (int l = 0; l <= L; ++l) {
        const int c = cfg_.widths[l];
        kgen_[l].b1.init("kgen" + std::to_string(l) + ".b1", c, c, rng);
        kgen_[l].conv2.init("kgen" + std::to_string(l) + ".b2.conv", 3, 3, c, c * cfg_.n_b, rng);
        kgen_[l].bn2.init("kgen" + std::to_string(l) + ".b2.bn", c * cfg_.n_b);
    }

    dec_.resize(L + 1);
    for (int j = 0; j <= L; ++j) {
        const int scale = L - j;  // feature level consumed by decoder stage j
        const int c = cfg_.widths[scale];
        int ci;
        if (j == 0) {
            ci = 2 * cfg_.widths[L];  // concat(f_k^L, f_z^L)
        } else {
            ci = cfg_.widths[L - j + 1] + 2 * c;  // up(d) + f_k + f_z
        }
        dec_[j].b1.init("dec" + std::to_string(j) + ".b1", ci, c, rng);
        dec_[j].b2.init("dec" + std::to_string(j) + ".b2", c, c, rng);
    }
    head_.init("head.conv", 1, 1, cfg_.widths[0], 1, rng);
}

template <typename T>
std::vector<Tensor<T>> DeepKernelNet<T>::encode(Binder<T>& bind, std::vector<EncoderLevel>& enc,
                                                const Tensor<T>& x, bool train) {
    std::vector<Tensor<T>> feats;
    Tensor<T> h = x;
    for (int l = 0; l <= cfg_.levels; ++l) {
        if (l > 0) h = maxpool2x2(h);
        h = enc[l].b2.forward(bind, enc[l].b1.forward(bind, h, train), train);
        feats.push_back(h);
    }
    return feats;
}

template <typename T>
NetInternals<T> DeepKernelNet<T>::forward(Binder<T>& bind, const Tensor<T>& pet,
                                          const Tensor<T>& mr, bool train) {
    if (pet.rank() != 4 || mr.rank() != 4)
        throw ConfigError("network inputs must be [N,H,W,C]");
    if (pet.dim(1) != cfg_.input_hw || pet.dim(2) != cfg_.input_hw || mr.dim(1) != cfg_.input_hw ||
        mr.dim(2) != cfg_.input_hw)
        throw ConfigError("input spatial dims " + shape_str(pet.shape) +
                          " do not match configured size " + std::to_string(cfg_.input_hw));
    if (pet.dim(3) != cfg_.pet_channels || mr.dim(3) != cfg_.mr_channels)
        throw ConfigError("input channel counts do not match the 2.5D slab configuration");
    if (pet.dim(0) != mr.dim(0)) throw ConfigError("PET and MR batch sizes differ");

    NetInternals<T> out;
    out.f_pet = encode(bind, pet_enc_, pet, train);
    out.f_mr = encode(bind, mr_enc_, mr, train);

    const int L = cfg_.levels;
    for (int l = 0; l <= L; ++l) {
        auto& kg = kgen_[l];
        Tensor<T> h = kg.b1.forward(bind, out.f_mr[l], train);
        h = relu(kg.bn2.forward(bind, kg.conv2.forward(bind, h), train));
        out.b.push_back(channel_softmax(h, cfg_.n_b));
        out.f_k.push_back(kernel_apply(out.b[l], out.f_pet[l], tables_[l], specs_[l].family,
                                       cfg_.sigma));
    }

    Tensor<T> d;
    for (int j = 0; j <= L; ++j) {
        const int scale = L - j;
        std::vector<Tensor<T>> parts;
        if (j == 0) {
            parts = {out.f_k[L], out.f_mr[L]};
        } else {
            parts = {upsample_bilinear2x(d), out.f_k[scale], out.f_mr[scale]};
        }
        Tensor<T> h = concat_channels(parts);
        d = dec_[j].b2.forward(bind, dec_[j].b1.forward(bind, h, train), train);
    }
    out.out = head_.forward(bind, d);
    return out;
}

template <typename T>
void DeepKernelNet<T>::visit_params(const ParamVisitor<T>& fn) {
    for (auto& e : pet_enc_) {
        e.b1.visit_params(fn);
        e.b2.visit_params(fn);
    }
    for (auto& e : mr_enc_) {
        e.b1.visit_params(fn);
        e.b2.visit_params(fn);
    }
    for (auto& k : kgen_) {
        k.b1.visit_params(fn);
        k.conv2.visit_params(fn);
        k.bn2.visit_params(fn);
    }
    for (auto& e : dec_) {
        e.b1.visit_params(fn);
        e.b2.visit_params(fn);
    }
    head_.visit_params(fn);
}

template <typename T>
void DeepKernelNet<T>::visit_buffers(const BufferVisitor& fn) {
    for (auto& e : pet_enc_) {
        e.b1.visit_buffers(fn);
        e.b2.visit_buffers(fn);
    }
    for (auto& e : mr_enc_) {
        e.b1.visit_buffers(fn);
        e.b2.visit_buffers(fn);
    }
    for (auto& k : kgen_) {
        k.b1.visit_buffers(fn);
        k.bn2.visit_buffers(fn);
    }
    for (auto& e : dec_) {
        e.b1.visit_buffers(fn);
        e.b2.visit_buffers(fn);
    }
}

template <typename T>
std::size_t DeepKernelNet<T>::parameter_count() {
    std::size_t n = 0;
    visit_params([&](Param<T>& p) { n += p.value.size(); });
    return n;
}

template <typename T>
void DeepKernelNet<T>::save_params(const std::filesystem::path& dir) {
    ensure_dir(dir / "params");
    ensure_dir(dir / "buffers");
    visit_params([&](Param<T>& p) {
        save_dkt1(dir / "params" / (sanitize_param_name(p.name) + ".dkt1"), p.value);
    });
    visit_buffers([&](const std::string& name, BatchNormStats& st) {
        const std::string base = sanitize_param_name(name);
        Tensor<double> m({static_cast<int>(st.mean.size())}, st.mean);
        Tensor<double> v({static_cast<int>(st.var.size())}, st.var);
        if (st.mean.empty()) {
            m = Tensor<double>({0}, std::vector<double>{});
            v = Tensor<double>({0}, std::vector<double>{});
        }
        save_dkt1(dir / "buffers" / (base + ".mean.dkt1"), m);
        save_dkt1(dir / "buffers" / (base + ".var.dkt1"), v);
    });
}

template <typename T>
void DeepKernelNet<T>::load_params(const std::filesystem::path& dir) {
    visit_params([&](Param<T>& p) {
        const auto path = dir / "params" / (sanitize_param_name(p.name) + ".dkt1");
        Tensor<T> t = load_dkt1<T>(path);
        if (t.shape != p.value.shape)
            throw IoError("checkpoint shape mismatch for " + p.name + ": " + shape_str(t.shape) +
                          " vs " + shape_str(p.value.shape));
        p.value = std::move(t);
    });
    visit_buffers([&](const std::string& name, BatchNormStats& st) {
        const std::string base = sanitize_param_name(name);
        auto m = load_dkt1<double>(dir / "buffers" / (base + ".mean.dkt1"));
        auto v = load_dkt1<double>(dir / "buffers" / (base + ".var.dkt1"));
        st.mean = m.data;
        st.var = v.data;
        st.initialized = !st.mean.empty();
    });
}

template class DeepKernelNet<float>;
template class DeepKernelNet<double>;

}  // namespace dkn
