#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "dkn/constraints.hpp"
#include "dkn/network.hpp"
#include "dkn/ops.hpp"
#include "dkn/optim.hpp"
#include "dkn/rng.hpp"

using namespace dkn;

namespace {

NetConfig tiny_config(std::uint64_t seed, int patch_top = 2) {
    NetConfig cfg;
    cfg.levels = 2;
    cfg.widths = {8, 12, 16};
    cfg.n_b = 4;
    cfg.pet_channels = 1;
    cfg.mr_channels = 2;
    cfg.input_hw = 32;
    cfg.patch_top = patch_top;
    cfg.seed = seed;
    return cfg;
}

template <typename T>
Tensor<T> random_input(std::vector<int> shape, std::uint64_t seed) {
    Rng rng(seed);
    Tensor<T> t(std::move(shape), T(0));
    for (auto& v : t.data) v = static_cast<T>(rng.uniform(0.0, 1.0));
    return t;
}

}  // namespace

TEST_CASE("loss_min closed forms") {
    Tensor<double> half({4, 1}, 0.5);
    CHECK(loss_min(half)[0] == doctest::Approx(std::log(2.0)).epsilon(1e-9));
    Tensor<double> near_zero({4, 1}, 1e-9);
    CHECK(loss_min(near_zero)[0] == doctest::Approx(0.0).epsilon(1e-6));
    Tensor<double> exactly_one({4, 1}, 1.0);
    const double guarded = loss_min(exactly_one)[0];
    CHECK(std::isfinite(guarded));
    CHECK(guarded == doctest::Approx(-std::log(1e-7)).epsilon(1e-6));
}

TEST_CASE("loss_max closed forms and patch-mean identity") {
    Tensor<double> ones({6, 1}, 1.0);
    CHECK(loss_max(ones)[0] == doctest::Approx(0.0).epsilon(1e-9));
    Tensor<double> half({6, 1}, 0.5);
    CHECK(loss_max(half)[0] == doctest::Approx(std::log(2.0)).epsilon(1e-9));
    // Duplicating the patch set leaves the mean loss unchanged.
    Rng rng(3);
    Tensor<double> t({5, 1}, 0.0);
    for (auto& v : t.data) v = rng.uniform(0.05, 0.95);
    Tensor<double> dup({10, 1}, 0.0);
    for (int r = 0; r < 2; ++r)
        for (int i = 0; i < 5; ++i) dup.data[r * 5 + i] = t.data[i];
    CHECK(loss_max(dup)[0] == doctest::Approx(loss_max(t)[0]).epsilon(1e-12));
}

TEST_CASE("loss_info weighting") {
    Tensor<double> lmax({1}, 1.0), lmin({1}, 1.0);
    CHECK(loss_info(lmax, lmin, 0.01, 0.001)[0] == doctest::Approx(0.011).epsilon(1e-12));
    CHECK(loss_info(lmax, lmin, 0.0, 0.0)[0] == 0.0);
    Tensor<double> l2({1}, 2.0);
    CHECK(loss_info(l2, lmin, 0.01, 0.001)[0] ==
          doctest::Approx(0.021).epsilon(1e-12));  // linear in L_max
    CHECK_THROWS_AS(loss_info(lmax, lmin, -0.1, 0.0), ConfigError);
}

TEST_CASE("discriminator BCE closed forms") {
    Tensor<double> half({4, 1}, 0.5);
    CHECK(discriminator_bce(half, half)[0] == doctest::Approx(std::log(2.0)).epsilon(1e-9));
    Tensor<double> joint({4, 1}, 1.0 - 1e-9), marginal({4, 1}, 1e-9);
    CHECK(discriminator_bce(joint, marginal)[0] == doctest::Approx(0.0).epsilon(1e-6));
}

TEST_CASE("discriminator outputs stay in (0,1)") {
    DiscriminatorMax<float> tmax(4, 8, 16, 11);
    Binder<float> bind(nullptr);
    auto x = random_input<float>({6, 8, 8, 4}, 21);
    for (auto& v : x.data) v = 10.0f * (v - 0.5f);
    auto out = tmax.forward(bind, x, false);
    REQUIRE(out.shape == std::vector<int>{6, 1});
    for (float v : out.data) {
        CHECK(v > 0.f);
        CHECK(v < 1.f);
    }
}

TEST_CASE("discriminator_min rejects mismatched tap counts") {
    DiscriminatorMin<float> tmin({8, 12}, 16, {8, 12, 16}, 32, 5);
    Binder<float> bind(nullptr);
    std::vector<Tensor<float>> taps{random_input<float>({2, 32, 32, 8}, 1)};
    auto deep = random_input<float>({2, 8, 8, 16}, 2);
    CHECK_THROWS_AS(tmin.forward(bind, taps, deep, false), ConfigError);
}

TEST_CASE("constraint config validation") {
    ConstraintConfig cc;
    cc.gamma_max = 0.01;
    cc.max_shallow = 0;
    cc.max_deep = 2;
    cc.min_kernel_taps = {0, 1};
    cc.min_deep = 2;
    cc.validate(2);
    cc.max_deep = 5;
    CHECK_THROWS_AS(cc.validate(2), ConfigError);
    cc.max_deep = 0;
    CHECK_THROWS_AS(cc.validate(2), ConfigError);  // patches must be shallower
}

TEST_CASE("gradient routing: information losses reach only the PET branch") {
    NetConfig cfg = tiny_config(5);
    DeepKernelNet<float> net(cfg);
    DiscriminatorMax<float> tmax(cfg.widths[0] + cfg.widths[2], 8, 16,
                                 derive_seed(5, "tmax-init"));
    DiscriminatorMin<float> tmin({cfg.widths[0], cfg.widths[1]}, cfg.widths[2],
                                 {8, 12, 16}, 32, derive_seed(5, "tmin-init"));

    auto pet = random_input<float>({4, 32, 32, 1}, 31);
    auto mr = random_input<float>({4, 32, 32, 2}, 32);

    Tape<float> tape;
    Binder<float> bind(&tape);
    auto out = net.forward(bind, pet, mr, true);

    // L_max path: patches of f_pet[0] paired with f_pet[2].
    auto patches = extract_patches(out.f_pet[0], 8);
    const int np = patches.dim(0) / 4;
    std::vector<Tensor<float>> joint{patches, repeat_batch(out.f_pet[2], np)};
    auto lmax = loss_max(tmax.forward(bind, concat_channels(joint), true));

    // L_min path: kernel features with the MR-derived weights detached.
    std::vector<Tensor<float>> fk_det;
    for (int l : {0, 1})
        fk_det.push_back(kernel_apply(out.b[l].detached(), out.f_pet[l], net.patch_table(l),
                                      KernelFamily::Linear, cfg.sigma));
    auto lmin = loss_min(tmin.forward(bind, fk_det, out.f_pet[2], true));

    auto l_info = loss_info(lmax, lmin, 0.01, 0.001);
    tape.backward(l_info);

    double pet_grad_mag = 0.0;
    int mr_side_nonzero = 0;
    for (const auto& bd : bind.bound()) {
        const std::string& name = bd.param->name;
        const bool mr_side = name.rfind("mr.", 0) == 0 || name.rfind("kgen", 0) == 0 ||
                             name.rfind("dec", 0) == 0 || name.rfind("head", 0) == 0;
        if (!mr_side && name.rfind("pet.", 0) != 0) continue;  // discriminator params
        if (!tape.grad_touched(bd.node)) continue;
        auto g = tape.grad_by_node(bd.node, bd.param->value.shape);
        double mag = 0.0;
        for (float v : g.data) mag += std::abs(static_cast<double>(v));
        if (mr_side && mag != 0.0) ++mr_side_nonzero;
        if (!mr_side) pet_grad_mag += mag;
    }
    CHECK(mr_side_nonzero == 0);
    CHECK(pet_grad_mag > 0.0);
}

TEST_CASE("one optimiser step reduces discriminator BCE on a fixed batch") {
    DiscriminatorMax<float> tmax(6, 8, 16, 99);
    auto joint_in = random_input<float>({4, 8, 8, 6}, 51);
    auto marg_in = random_input<float>({4, 8, 8, 6}, 52);
    for (auto& v : joint_in.data) v += 0.5f;  // separable batches

    std::vector<Param<float>*> params;
    std::set<const Param<float>*> pset;
    tmax.visit_params([&](Param<float>& p) {
        params.push_back(&p);
        pset.insert(&p);
    });
    Adam<float> adam;

    auto bce_value = [&]() {
        Binder<float> b(nullptr);
        return discriminator_bce(tmax.forward(b, joint_in, true),
                                 tmax.forward(b, marg_in, true))[0];
    };
    const double before = bce_value();
    for (int step = 0; step < 3; ++step) {
        Tape<float> tape;
        Binder<float> bind(&tape);
        auto bce = discriminator_bce(tmax.forward(bind, joint_in, true),
                                     tmax.forward(bind, marg_in, true));
        tape.backward(bce);
        std::map<std::string, std::vector<float>> grads;
        for (const auto& bd : bind.bound()) {
            if (!pset.count(bd.param) || !tape.grad_touched(bd.node)) continue;
            auto g = tape.grad_by_node(bd.node, bd.param->value.shape);
            auto& slot = grads[bd.param->name];
            if (slot.empty()) slot.assign(g.size(), 0.f);
            for (std::size_t i = 0; i < g.size(); ++i) slot[i] += g.data[i];
        }
        adam.step(params, grads, 1e-3);
    }
    CHECK(bce_value() < before);
}

TEST_CASE("network initialisation is independent of discriminator construction") {
    DeepKernelNet<float> plain(tiny_config(7));
    DiscriminatorMax<float> burn(4, 8, 16, derive_seed(7, "tmax-init"));
    DeepKernelNet<float> after(tiny_config(7));
    std::vector<float> a, b;
    plain.visit_params([&](Param<float>& p) {
        a.insert(a.end(), p.value.data.begin(), p.value.data.end());
    });
    after.visit_params([&](Param<float>& p) {
        b.insert(b.end(), p.value.data.begin(), p.value.data.end());
    });
    CHECK(a == b);
}
