#include "dkn/phantom.hpp"

#include <cmath>

#include "dkn/rng.hpp"

namespace dkn {

const std::vector<std::string>& region_names() {
    static const std::vector<std::string> names = {"background", "gray_matter", "white_matter",
                                                   "thalamus",   "putamen",     "caudate"};
    return names;
}

namespace {

struct Ellipse {
    double cy, cx, ry, rx, rot;

    bool contains(double y, double x) const {
        const double dy = y - cy, dx = x - cx;
        const double c = std::cos(rot), s = std::sin(rot);
        const double u = (c * dx + s * dy) / rx;
        const double v = (-s * dx + c * dy) / ry;
        return u * u + v * v <= 1.0;
    }
};

struct Geometry {
    Ellipse head, inner;
    Ellipse thal, put, caud;
};

int classify(const Geometry& g, double y, double x) {
    if (!g.head.contains(y, x)) return kBackground;
    if (g.thal.contains(y, x)) return kThalamus;
    if (g.put.contains(y, x)) return kPutamen;
    if (g.caud.contains(y, x)) return kCaudate;
    if (g.inner.contains(y, x)) return kWhiteMatter;
    return kGrayMatter;
}

// 3x3 binomial smoothing, zero-padded borders renormalised.
Tensor<double> smooth(const Tensor<double>& img) {
    const int H = img.dim(0), W = img.dim(1);
    static const double k[3] = {0.25, 0.5, 0.25};
    Tensor<double> out({H, W}, 0.0);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double acc = 0.0, wsum = 0.0;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    const int yy = y + dy, xx = x + dx;
                    if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
                    const double wgt = k[dy + 1] * k[dx + 1];
                    acc += wgt * img.data[static_cast<std::size_t>(yy) * W + xx];
                    wsum += wgt;
                }
            out.data[static_cast<std::size_t>(y) * W + x] = acc / wsum;
        }
    return out;
}

}  // namespace

PhantomMaps generate_phantom(std::uint64_t seed, int size, int slices) {
    if (size < 32) throw DomainError("phantom size must be at least 32");
    if (slices < 1 || slices % 2 == 0) throw DomainError("phantom needs an odd slice count");
    Rng rng(derive_seed(seed, "phantom"));
    const double S = size;
    const double c0 = (S - 1) / 2.0;

    Geometry base;
    base.head = {c0 + rng.uniform(-0.02, 0.02) * S, c0 + rng.uniform(-0.02, 0.02) * S,
                 0.42 * S * rng.uniform(0.95, 1.05), 0.36 * S * rng.uniform(0.95, 1.05),
                 rng.uniform(-0.2, 0.2)};
    base.inner = {base.head.cy + rng.uniform(-0.01, 0.01) * S,
                  base.head.cx + rng.uniform(-0.01, 0.01) * S, base.head.ry * 0.62,
                  base.head.rx * 0.62, base.head.rot};
    auto nucleus = [&](double oy, double ox, double r) {
        return Ellipse{base.inner.cy + oy * S + rng.uniform(-1.0, 1.0),
                       base.inner.cx + ox * S + rng.uniform(-1.0, 1.0),
                       r * S * rng.uniform(0.9, 1.1), r * S * rng.uniform(0.9, 1.1),
                       rng.uniform(-0.5, 0.5)};
    };
    base.thal = nucleus(0.04, -0.10, 0.055);
    base.put = nucleus(-0.09, 0.14, 0.050);
    base.caud = nucleus(-0.15, -0.07, 0.042);

    // Per-class uptake and contrast levels, jittered per case.
    double uptake[6], t1v[6], t2v[6];
    const double u_base[6] = {0.0, 1.0, 0.30, 1.30, 1.40, 1.20};
    const double t1_base[6] = {0.02, 0.55, 0.92, 0.75, 0.72, 0.78};
    const double t2_base[6] = {0.02, 0.82, 0.35, 0.50, 0.45, 0.55};
    for (int i = 0; i < 6; ++i) {
        uptake[i] = u_base[i] * rng.uniform(0.96, 1.04);
        t1v[i] = t1_base[i] * rng.uniform(0.97, 1.03);
        t2v[i] = t2_base[i] * rng.uniform(0.97, 1.03);
    }

    // PET-only uptake gradient: a smooth multiplicative ramp the MR maps
    // deliberately do not carry.
    const double gphi = rng.uniform(0.0, 2.0 * M_PI);
    const double gx = std::cos(gphi), gy = std::sin(gphi);
    const double gstrength = rng.uniform(0.10, 0.18);
    // Independent mild bias fields for each MR contrast.
    const double b1phi = rng.uniform(0.0, 2.0 * M_PI), b2phi = rng.uniform(0.0, 2.0 * M_PI);

    PhantomMaps maps;
    maps.size = size;
    maps.slices = slices;
    maps.seed = seed;
    maps.labels = Tensor<double>({size, size}, 0.0);
    maps.activity = Tensor<double>({slices, size, size}, 0.0);
    maps.t1 = Tensor<double>({slices, size, size}, 0.0);
    maps.t2 = Tensor<double>({slices, size, size}, 0.0);

    Rng noise(derive_seed(seed, "mr-noise"));
    const int mid = slices / 2;
    for (int sl = 0; sl < slices; ++sl) {
        const double f = 1.0 + 0.04 * (sl - mid);
        Geometry g = base;
        g.head.ry *= f;
        g.head.rx *= f;
        g.inner.ry *= f;
        g.inner.rx *= f;
        g.thal.ry *= f;
        g.thal.rx *= f;
        g.put.ry *= f;
        g.put.rx *= f;
        g.caud.ry *= f;
        g.caud.rx *= f;

        Tensor<double> act({size, size}, 0.0), m1({size, size}, 0.0), m2({size, size}, 0.0);
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                const int cls = classify(g, y, x);
                const std::size_t i = static_cast<std::size_t>(y) * size + x;
                const double ny = (y - c0) / (S / 2), nx = (x - c0) / (S / 2);
                const double ramp = 1.0 + gstrength * (gx * nx + gy * ny);
                act.data[i] = uptake[cls] * std::max(ramp, 0.0);
                const double bias1 = 1.0 + 0.08 * (std::cos(b1phi) * nx + std::sin(b1phi) * ny);
                const double bias2 = 1.0 + 0.08 * (std::cos(b2phi) * nx + std::sin(b2phi) * ny);
                m1.data[i] = t1v[cls] * bias1 + noise.normal(0.0, 0.01);
                m2.data[i] = t2v[cls] * bias2 + noise.normal(0.0, 0.01);
                if (sl == mid) maps.labels.data[i] = cls;
            }
        act = smooth(act);
        m1 = smooth(m1);
        m2 = smooth(m2);
        for (std::size_t i = 0; i < act.size(); ++i) {
            const std::size_t o = static_cast<std::size_t>(sl) * size * size + i;
            maps.activity.data[o] = std::max(act.data[i], 0.0);
            maps.t1.data[o] = m1.data[i];
            maps.t2.data[o] = m2.data[i];
        }
    }
    return maps;
}

}  // namespace dkn
