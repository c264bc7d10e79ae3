#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "dkn/dataset.hpp"
#include "dkn/io.hpp"
#include "dkn/metrics.hpp"
#include "dkn/phantom.hpp"
#include "dkn/projector.hpp"
#include "dkn/rng.hpp"

using namespace dkn;

namespace {

std::string file_bytes(const std::filesystem::path& p) { return read_text_file(p); }

SimConfig small_sim() {
    SimConfig cfg;
    cfg.n_cases = 4;
    cfg.size = 32;
    cfg.slices = 3;
    cfg.drfs = {20, 1000};
    cfg.seed = 11;
    cfg.n_angles = 30;
    cfg.n_bins = 47;
    cfg.folds = 4;
    cfg.count_scale = 30.0;
    return cfg;
}

}  // namespace

TEST_CASE("radon angle 0 produces exact column sums") {
    Projector proj(2, 2, 1, 2);
    Tensor<double> img({2, 2}, std::vector<double>{1, 2, 3, 4});
    auto sino = proj.forward(img);
    CHECK(sino.at(0, 0) == doctest::Approx(4.0).epsilon(1e-12));
    CHECK(sino.at(0, 1) == doctest::Approx(6.0).epsilon(1e-12));
}

TEST_CASE("radon of zero image is zero; negative input rejected") {
    Projector proj(8, 8, 12, 13);
    Tensor<double> zero({8, 8}, 0.0);
    auto sino = proj.forward(zero);
    for (double v : sino.data) CHECK(v == 0.0);
    Tensor<double> neg({8, 8}, 0.0);
    neg.data[5] = -1.0;
    CHECK_THROWS_AS(proj.forward(neg), DomainError);
}

TEST_CASE("projector adjoint identity") {
    Rng rng(17);
    Projector proj(16, 16, 24, 25);
    Tensor<double> x({16, 16}, 0.0);
    for (auto& v : x.data) v = rng.uniform(0.0, 1.0);
    Sinogram y;
    y.n_angles = 24;
    y.n_bins = 25;
    y.data.resize(24 * 25);
    for (auto& v : y.data) v = rng.uniform(0.0, 1.0);

    auto ax = proj.forward(x);
    auto aty = proj.adjoint(y);
    double lhs = 0.0, rhs = 0.0;
    for (std::size_t i = 0; i < ax.data.size(); ++i) lhs += ax.data[i] * y.data[i];
    for (std::size_t i = 0; i < aty.size(); ++i) rhs += aty.data[i] * x.data[i];
    CHECK(std::abs(lhs - rhs) / std::max(std::abs(lhs), 1.0) < 1e-5);
}

TEST_CASE("poisson sampling: zeros, scaling, and sample mean") {
    Sinogram s;
    s.n_angles = 1;
    s.n_bins = 3;
    s.data = {0.0, 40.0, 500.0};
    auto zero = poisson_sample(s, 1.0, 3);
    CHECK(zero.data[0] == 0.0);
    CHECK_THROWS_AS(poisson_sample(s, 0.5, 3), DomainError);

    // Mean of 1e4 draws within five standard errors of expected/drf.
    const double drf = 20.0;
    const double expect = 500.0 / drf;
    double acc = 0.0;
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
        auto c = poisson_sample(s, drf, 1000 + i);
        acc += c.data[2];
    }
    const double mean = acc / n;
    const double se = std::sqrt(expect / n);
    CHECK(std::abs(mean - expect) < 5.0 * se);

    // A DRF of 20 reduces total expected counts twentyfold.
    double tot = 0.0;
    for (int i = 0; i < 400; ++i) tot += poisson_sample(s, drf, 77 + i).total();
    CHECK(tot / 400.0 == doctest::Approx(s.total() / drf).epsilon(0.05));
}

TEST_CASE("mlem closed forms: single pixel and two-pixel ray") {
    // 1x1 image, one ray through the center: A = [1].
    Projector p1(1, 1, 1, 1);
    Sinogram y1;
    y1.n_angles = 1;
    y1.n_bins = 1;
    y1.data = {5.0};
    auto r1 = mlem_reconstruct(y1, p1, 1, 1);
    CHECK(r1.image.data[0] == doctest::Approx(5.0).epsilon(1e-9));

    // 2x1 image, one vertical ray: A = [1, 1]; y=4 splits evenly.
    Projector p2(2, 1, 1, 1);
    Sinogram y2;
    y2.n_angles = 1;
    y2.n_bins = 1;
    y2.data = {4.0};
    auto r2 = mlem_reconstruct(y2, p2, 1, 1);
    CHECK(r2.image.data[0] == doctest::Approx(2.0).epsilon(1e-9));
    CHECK(r2.image.data[1] == doctest::Approx(2.0).epsilon(1e-9));
}

TEST_CASE("mlem log-likelihood is non-decreasing on noiseless data") {
    PhantomMaps maps = generate_phantom(5, 32, 1);
    Tensor<double> slice({32, 32}, 0.0);
    std::copy_n(maps.activity.data.begin(), slice.size(), slice.data.begin());
    Projector proj(32, 32, 30, 47);
    Sinogram clean = proj.forward(slice);

    Tensor<double> img({32, 32}, 1.0);
    double prev = poisson_log_likelihood(clean, proj, img);
    for (int it = 1; it <= 21; ++it) {
        auto r = mlem_reconstruct(clean, proj, it, 1);
        const double ll = poisson_log_likelihood(clean, proj, r.image);
        CHECK(ll >= prev - 1e-7 * std::abs(prev));
        prev = ll;
    }
}

TEST_CASE("osem stays non-negative and subset count must divide angles") {
    PhantomMaps maps = generate_phantom(6, 32, 1);
    Tensor<double> slice({32, 32}, 0.0);
    std::copy_n(maps.activity.data.begin(), slice.size(), slice.data.begin());
    Projector proj(32, 32, 30, 47);
    Sinogram counts = poisson_sample(proj.forward(slice), 1.0, 9);
    auto rec = mlem_reconstruct(counts, proj, 21, 3, 1.0);
    for (double v : rec.image.data) CHECK(v >= 0.0);
    CHECK_THROWS_AS(mlem_reconstruct(counts, proj, 21, 7), DomainError);
}

TEST_CASE("phantom masks are disjoint labels covering the grid with 5 regions") {
    PhantomMaps maps = generate_phantom(3, 64, 3);
    std::set<int> seen;
    for (double v : maps.labels.data) {
        const int id = static_cast<int>(std::lround(v));
        CHECK(id >= 0);
        CHECK(id <= 5);
        seen.insert(id);
    }
    CHECK(seen.size() == 6);  // background plus five labelled regions

    // Nuclei stay small relative to the head support.
    int head = 0, thal = 0, put = 0, caud = 0;
    for (double v : maps.labels.data) {
        const int id = static_cast<int>(std::lround(v));
        if (id != kBackground) ++head;
        if (id == kThalamus) ++thal;
        if (id == kPutamen) ++put;
        if (id == kCaudate) ++caud;
    }
    for (int n : {thal, put, caud}) CHECK(n <= 0.06 * head);
}

TEST_CASE("phantom generation is deterministic per seed") {
    auto a = generate_phantom(9, 32, 3);
    auto b = generate_phantom(9, 32, 3);
    CHECK(a.activity.data == b.activity.data);
    CHECK(a.t1.data == b.t1.data);
    auto c = generate_phantom(10, 32, 3);
    CHECK(a.activity.data != c.activity.data);
}

TEST_CASE("phantom carries a PET-only gradient the MR does not show") {
    auto maps = generate_phantom(12, 64, 1);
    // Within one tissue class, activity varies along the ramp while the MR
    // bias is independent; correlate activity vs t1 across white matter.
    std::vector<double> act, t1;
    for (std::size_t i = 0; i < maps.labels.size(); ++i)
        if (static_cast<int>(std::lround(maps.labels.data[i])) == kWhiteMatter) {
            act.push_back(maps.activity.data[i]);
            t1.push_back(maps.t1.data[i]);
        }
    REQUIRE(act.size() > 100);
    double spread = *std::max_element(act.begin(), act.end()) -
                    *std::min_element(act.begin(), act.end());
    CHECK(spread > 0.02);  // the ramp is visible inside one class
}

TEST_CASE("cross validation split partitions cases") {
    auto folds = cross_validation_split(10, 5, 3);
    REQUIRE(folds.size() == 10);
    std::vector<int> counts(5, 0);
    for (int f : folds) ++counts[f];
    for (int c : counts) CHECK(c == 2);
    CHECK(folds == cross_validation_split(10, 5, 3));
    CHECK(folds != cross_validation_split(10, 5, 4));
    CHECK_THROWS_AS(cross_validation_split(3, 5, 1), ConfigError);
}

TEST_CASE("dataset generation, reload, and noise monotonicity") {
    const auto dir = std::filesystem::temp_directory_path() / "dkn-test-ds";
    std::filesystem::remove_all(dir);
    SimConfig cfg = small_sim();
    const auto manifest = make_dataset(cfg, dir);
    Dataset ds = Dataset::load(manifest);
    CHECK(ds.cases.size() == 4);
    CHECK(ds.size == 32);
    CHECK(ds.has_drf(20));
    CHECK(ds.has_drf(1000));
    CHECK_FALSE(ds.has_drf(50));

    // Each case sits in exactly one fold; folds partition the cases.
    std::set<int> folds_seen;
    for (const auto& c : ds.cases) folds_seen.insert(c.fold);
    CHECK(folds_seen.size() == 4);

    const std::size_t pix = 32 * 32;
    for (int i = 0; i < 4; ++i) {
        CaseData cd = ds.load_case(i, {20, 1000});
        // Central slices against the standard dose: deeper dose reduction
        // must hurt.
        Tensor<double> ref({32, 32}, 0.0), a({32, 32}, 0.0), b({32, 32}, 0.0);
        for (std::size_t k = 0; k < pix; ++k) {
            ref.data[k] = cd.std_recon.data[pix + k];
            a.data[k] = cd.lowdose[20].data[pix + k];
            b.data[k] = cd.lowdose[1000].data[pix + k];
        }
        CHECK(psnr(b, ref) < psnr(a, ref));
    }

    // Regeneration with the same seed is byte-identical.
    const auto dir2 = std::filesystem::temp_directory_path() / "dkn-test-ds2";
    std::filesystem::remove_all(dir2);
    make_dataset(cfg, dir2);
    for (const auto& rel : {"manifest.json", "case_0/std.dkt1", "case_2/ld_x1000.dkt1",
                            "case_3/t2.dkt1", "case_1/masks.dkt1"})
        CHECK(file_bytes(dir / rel) == file_bytes(dir2 / rel));
    std::filesystem::remove_all(dir);
    std::filesystem::remove_all(dir2);
}
