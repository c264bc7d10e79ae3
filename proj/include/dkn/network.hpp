#pragma once

#include <filesystem>
#include <memory>
#include <vector>

#include "dkn/kernel.hpp"
#include "dkn/layers.hpp"

namespace dkn {

// Per-level geometry and kernel configuration.
struct LayerSpec {
    int level = 0;
    int channels = 0;
    int h = 0, w = 0;
    int patch = 1;
    int stride = 1;
    KernelFamily family = KernelFamily::Linear;
    int n_b = 4;
};

struct NetConfig {
    int levels = 3;                       // number of 2x poolings
    std::vector<int> widths = {16, 32, 64, 64};  // channels per scale, size levels+1
    int n_b = 4;
    int pet_channels = 3;                 // 2.5D slab per modality
    int mr_channels = 6;
    int input_hw = 64;
    int patch_top = 1;                    // kernel patch side at the top scale
    int stride_top = 1;
    KernelFamily family = KernelFamily::Linear;
    double sigma = 0.01;
    std::uint64_t seed = 1;
};

// Patch sides halve with the feature maps (constant patch/feature ratio);
// strides likewise, both floored at 1 and clipped to the grid.
std::vector<LayerSpec> make_layer_specs(const NetConfig& cfg);

template <typename T>
struct NetInternals {
    std::vector<Tensor<T>> f_pet, f_mr, b, f_k;  // indexed by level 0..L
    Tensor<T> out;
};

// Two-branch encoder, per-level kernel generators and latent kernel
// application, and a Unet-style decoder fusing kernel and MR features.
template <typename T>
class DeepKernelNet {
public:
    explicit DeepKernelNet(const NetConfig& cfg);

    // pet [N,H,W,pet_channels], mr [N,H,W,mr_channels].
    NetInternals<T> forward(Binder<T>& bind, const Tensor<T>& pet, const Tensor<T>& mr,
                            bool train);

    void visit_params(const ParamVisitor<T>& fn);
    void visit_buffers(const BufferVisitor& fn);
    std::size_t parameter_count();

    const NetConfig& config() const { return cfg_; }
    const std::vector<LayerSpec>& layer_specs() const { return specs_; }
    std::shared_ptr<const PatchTable> patch_table(int level) const { return tables_[level]; }

    void save_params(const std::filesystem::path& dir);
    void load_params(const std::filesystem::path& dir);

private:
    NetConfig cfg_;
    std::vector<LayerSpec> specs_;
    std::vector<std::shared_ptr<const PatchTable>> tables_;

    struct EncoderLevel {
        ConvBlock<T> b1, b2;
    };
    struct KernelGen {
        ConvBlock<T> b1;
        Conv2dLayer<T> conv2;
        BatchNormLayer<T> bn2;
    };
    std::vector<EncoderLevel> pet_enc_, mr_enc_;
    std::vector<KernelGen> kgen_;
    std::vector<EncoderLevel> dec_;
    Conv2dLayer<T> head_;

    std::vector<Tensor<T>> encode(Binder<T>& bind, std::vector<EncoderLevel>& enc,
                                  const Tensor<T>& x, bool train);
};

extern template class DeepKernelNet<float>;
extern template class DeepKernelNet<double>;

// Shared by checkpoints and datasets.
void ensure_dir(const std::filesystem::path& dir);
std::string sanitize_param_name(const std::string& name);

}  // namespace dkn
