#pragma once

#include <string>
#include <vector>

#include "dkn/tensor.hpp"

namespace dkn {

double mse(const Tensor<double>& x, const Tensor<double>& y);

// 20*log10(max(y)/MSE(x,y)). Note the denominator is the MSE itself, not
// the RMSE; the conventional form is available separately and is never used
// by the acceptance suite.
double psnr(const Tensor<double>& x, const Tensor<double>& y);
double psnr_standard(const Tensor<double>& x, const Tensor<double>& y);

// Mean over sliding 7x7 uniform windows with c1 = 0.01*R, c2 = 0.03*R,
// R = max(y). The constants are linear in R by definition here.
double ssim(const Tensor<double>& x, const Tensor<double>& y, int window = 7);

struct RegionStat {
    std::string name;
    int voxels = 0;
    double bias_pct = 0.0;      // |mean(pred) - mean(ref)| / mean(ref) * 100
    double variance_pct = 0.0;  // var((pred-ref)/mean(ref)) * 100
    bool skipped = false;
};

struct RegionReport {
    std::vector<RegionStat> regions;
    const RegionStat* find(const std::string& name) const;
};

// labels holds integer region ids; region_names[id] gives the row name.
// Empty regions are reported skipped; id 0 (background) is excluded.
RegionReport regional_bias_variance(const Tensor<double>& pred, const Tensor<double>& ref,
                                    const Tensor<double>& labels,
                                    const std::vector<std::string>& region_names);

}  // namespace dkn
