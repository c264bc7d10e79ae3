#include "dkn/metrics.hpp"

#include <algorithm>
#include <cmath>

namespace dkn {

namespace {

void require_same(const Tensor<double>& x, const Tensor<double>& y, const char* op) {
    if (x.shape != y.shape)
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(x.shape) + " vs " +
                         shape_str(y.shape));
}

double max_of(const Tensor<double>& y) {
    double m = y.data[0];
    for (double v : y.data) m = std::max(m, v);
    return m;
}

}  // namespace

double mse(const Tensor<double>& x, const Tensor<double>& y) {
    require_same(x, y, "mse");
    if (x.size() == 0) throw ShapeError("mse of empty tensors");
    double acc = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = x.data[i] - y.data[i];
        acc += d * d;
    }
    return acc / static_cast<double>(x.size());
}

double psnr(const Tensor<double>& x, const Tensor<double>& y) {
    const double m = mse(x, y);
    if (m == 0.0) throw DomainError("psnr undefined for identical images");
    const double peak = max_of(y);
    if (peak <= 0.0) throw DomainError("psnr requires a positive reference peak");
    return 20.0 * std::log10(peak / m);
}

double psnr_standard(const Tensor<double>& x, const Tensor<double>& y) {
    const double m = mse(x, y);
    if (m == 0.0) throw DomainError("psnr undefined for identical images");
    const double peak = max_of(y);
    if (peak <= 0.0) throw DomainError("psnr requires a positive reference peak");
    return 10.0 * std::log10(peak * peak / m);
}

double ssim(const Tensor<double>& x, const Tensor<double>& y, int window) {
    require_same(x, y, "ssim");
    if (x.rank() != 2) throw ShapeError("ssim expects 2D images");
    const int H = x.dim(0), W = x.dim(1);
    if (H < window || W < window)
        throw ShapeError("ssim: image " + shape_str(x.shape) + " smaller than " +
                         std::to_string(window) + "x" + std::to_string(window) + " window");
    const double R = max_of(y);
    if (R <= 0.0) throw DomainError("ssim requires a positive reference peak");
    const double c1 = 0.01 * R;
    const double c2 = 0.03 * R;
    const double n = static_cast<double>(window) * window;

    double acc = 0.0;
    long count = 0;
    for (int y0 = 0; y0 + window <= H; ++y0) {
        for (int x0 = 0; x0 + window <= W; ++x0) {
            double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
            for (int dy = 0; dy < window; ++dy)
                for (int dx = 0; dx < window; ++dx) {
                    const double a = x.data[static_cast<std::size_t>(y0 + dy) * W + x0 + dx];
                    const double b = y.data[static_cast<std::size_t>(y0 + dy) * W + x0 + dx];
                    sx += a;
                    sy += b;
                    sxx += a * a;
                    syy += b * b;
                    sxy += a * b;
                }
            const double mx = sx / n, my = sy / n;
            const double vx = sxx / n - mx * mx;
            const double vy = syy / n - my * my;
            const double cov = sxy / n - mx * my;
            acc += ((2 * mx * my + c1) * (2 * cov + c2)) /
                   ((mx * mx + my * my + c1) * (vx + vy + c2));
            ++count;
        }
    }
    return acc / static_cast<double>(count);
}

const RegionStat* RegionReport::find(const std::string& name) const {
    for (const auto& r : regions)
        if (r.name == name) return &r;
    return nullptr;
}

RegionReport regional_bias_variance(const Tensor<double>& pred, const Tensor<double>& ref,
                                    const Tensor<double>& labels,
                                    const std::vector<std::string>& region_names) {
    require_same(pred, ref, "regional_bias_variance");
    require_same(pred, labels, "regional_bias_variance");
    RegionReport report;
    for (std::size_t id = 1; id < region_names.size(); ++id) {
        RegionStat stat;
        stat.name = region_names[id];
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (static_cast<std::size_t>(std::lround(labels.data[i])) == id) idx.push_back(i);
        stat.voxels = static_cast<int>(idx.size());
        if (idx.empty()) {
            stat.skipped = true;
            report.regions.push_back(stat);
            continue;
        }
        double mp = 0, mr = 0;
        for (auto i : idx) {
            mp += pred.data[i];
            mr += ref.data[i];
        }
        mp /= idx.size();
        mr /= idx.size();
        if (mr <= 0.0) throw DomainError("reference mean not positive in region " + stat.name);
        stat.bias_pct = std::abs(mp - mr) / mr * 100.0;
        double s = 0, ss = 0;
        for (auto i : idx) {
            const double d = (pred.data[i] - ref.data[i]) / mr;
            s += d;
            ss += d * d;
        }
        const double mean_d = s / idx.size();
        stat.variance_pct = (ss / idx.size() - mean_d * mean_d) * 100.0;
        report.regions.push_back(stat);
    }
    return report;
}

}  // namespace dkn
