#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "dkn/tensor.hpp"

namespace dkn {

struct SimConfig {
    int n_cases = 40;
    int size = 64;
    int slices = 3;
    std::vector<int> drfs = {20, 1000};
    std::uint64_t seed = 1;
    int n_angles = 60;
    int n_bins = 95;
    int mlem_iters = 21;
    int mlem_subsets = 3;
    double count_scale = 30.0;
    int folds = 5;
    int threads = 0;  // 0: hardware concurrency
};

// Disjoint test folds covering all cases; returns case -> fold.
std::vector<int> cross_validation_split(int n_cases, int n_folds, std::uint64_t seed);

// Simulates and writes the dataset; returns the manifest path.
std::filesystem::path make_dataset(const SimConfig& cfg, const std::filesystem::path& out_dir);

struct CaseData {
    Tensor<float> labels;                  // [H,W], central slice
    Tensor<float> activity, t1, t2;        // [S,H,W]
    Tensor<float> std_recon;               // [S,H,W]
    std::map<int, Tensor<float>> lowdose;  // drf -> [S,H,W]
};

class Dataset {
public:
    static Dataset load(const std::filesystem::path& manifest_path);

    struct CaseEntry {
        int id = 0;
        int fold = 0;
        std::uint64_t seed = 0;
        std::string dir;
    };

    int size = 0;
    int slices = 0;
    int folds = 0;
    std::vector<int> drfs;
    std::uint64_t seed = 0;
    double count_scale = 0.0;
    int n_angles = 0, n_bins = 0;
    std::vector<std::string> regions;
    std::vector<CaseEntry> cases;
    std::filesystem::path root;

    bool has_drf(int drf) const;
    CaseData load_case(int index, const std::vector<int>& drfs_needed) const;

    // Fold roles: test = fold f, val = (f+1) % folds, train = rest.
    std::vector<int> case_indices(int fold, const std::string& role) const;
};

}  // namespace dkn
