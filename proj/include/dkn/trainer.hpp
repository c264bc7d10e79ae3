#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dkn/constraints.hpp"
#include "dkn/dataset.hpp"
#include "dkn/network.hpp"

namespace dkn {

inline constexpr const char* kCodeVersion = "dkn-0.1.0";

struct ExperimentConfig {
    std::string dataset_manifest;
    int fold = 0;
    std::uint64_t seed = 1;
    std::string run_name = "dkn";

    // network
    int levels = 3;
    std::vector<int> widths = {16, 32, 64, 64};
    int n_b = 4;
    int patch_top = 1;
    int stride_top = 1;
    std::string kernel = "linear";
    double sigma = 0.01;

    // information constraints
    double gamma_max = 0.0;
    double gamma_min = 0.0;
    int max_shallow = 0;
    int max_deep = -1;                  // -1: deepest level
    std::vector<int> min_kernel_taps;   // empty: 0..levels-1
    int min_deep = -1;
    int disc_width = 16;

    // optimisation
    int batch = 8;
    int epochs = 50;
    double lr = 1e-4;
    int train_drf = 20;
    double clip_norm = 10.0;

    std::string out_dir = "run";

    static ExperimentConfig from_json_text(const std::string& text);
    std::string to_json_text() const;

    NetConfig net_config(const Dataset& data) const;
    ConstraintConfig constraint_config() const;
    void validate(const Dataset& data) const;
};

struct EpochLog {
    int epoch = 0;
    double l_data = 0.0, l_max = 0.0, l_min = 0.0, l_total = 0.0;
    double bce_max = 0.0, bce_min = 0.0;
};

struct TrainResult {
    std::filesystem::path checkpoint_dir;
    std::filesystem::path run_manifest;
    std::vector<EpochLog> epochs;
    double val_psnr = 0.0;  // mean over validation cases at the training DRF
    double val_ssim = 0.0;
};

TrainResult train(const ExperimentConfig& cfg, const Dataset& data);

struct EvalRow {
    std::string method;
    int case_id = 0;
    int drf = 0;
    bool in_distribution = false;
    std::string metric;   // psnr, ssim, region_bias, region_variance, skipped
    std::string region;   // empty for global metrics
    double value = 0.0;
};

struct EvalResult {
    std::vector<EvalRow> rows;

    double mean(const std::string& metric, int drf, const std::string& region = "") const;
    std::string to_csv() const;
};

// Runs the checkpoint over the given cases and dose levels. DRFs missing
// from the dataset are reported as skipped rows.
EvalResult evaluate(const std::filesystem::path& checkpoint_dir, const Dataset& data,
                    const std::vector<int>& drfs, const std::vector<int>& case_indices);

// Loads the checkpoint's experiment config (written at save time).
ExperimentConfig load_checkpoint_config(const std::filesystem::path& checkpoint_dir);

// Input assembly shared by trainer, evaluation, and visualisation.
struct Sample {
    Tensor<float> pet;     // [H,W,S]
    Tensor<float> mr;      // [H,W,2S]
    Tensor<float> target;  // [H,W,1] central standard-dose slice
};
Sample make_sample(const CaseData& c, int drf, int size, int slices);

}  // namespace dkn
