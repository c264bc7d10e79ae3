#include "dkn/trainer.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "dkn/io.hpp"
#include "dkn/metrics.hpp"
#include "dkn/optim.hpp"

namespace dkn {

using nlohmann::json;

namespace {

json config_to_json(const ExperimentConfig& c) {
    json j;
    j["dataset"] = c.dataset_manifest;
    j["fold"] = c.fold;
    j["seed"] = c.seed;
    j["run_name"] = c.run_name;
    j["levels"] = c.levels;
    j["widths"] = c.widths;
    j["n_b"] = c.n_b;
    j["patch_top"] = c.patch_top;
    j["stride_top"] = c.stride_top;
    j["kernel"] = c.kernel;
    j["sigma"] = c.sigma;
    j["gamma_max"] = c.gamma_max;
    j["gamma_min"] = c.gamma_min;
    j["max_shallow"] = c.max_shallow;
    j["max_deep"] = c.max_deep;
    j["min_kernel_taps"] = c.min_kernel_taps;
    j["min_deep"] = c.min_deep;
    j["disc_width"] = c.disc_width;
    j["batch"] = c.batch;
    j["epochs"] = c.epochs;
    j["lr"] = c.lr;
    j["train_drf"] = c.train_drf;
    j["clip_norm"] = c.clip_norm;
    j["out"] = c.out_dir;
    return j;
}

ExperimentConfig config_from_json(const json& j) {
    ExperimentConfig c;
    std::vector<std::string> unknown;
    static const std::set<std::string> known = {
        "dataset",   "fold",        "seed",      "run_name",  "levels",        "widths",
        "n_b",       "patch_top",   "stride_top", "kernel",   "sigma",         "gamma_max",
        "gamma_min", "max_shallow", "max_deep",  "min_kernel_taps", "min_deep", "disc_width",
        "batch",     "epochs",      "lr",        "train_drf", "clip_norm",     "out"};
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!known.count(it.key())) unknown.push_back(it.key());
    if (!unknown.empty()) {
        std::string msg = "unknown config keys:";
        for (const auto& k : unknown) msg += " " + k;
        throw ConfigError(msg);
    }
    auto get = [&](const char* key, auto& field) {
        if (j.contains(key)) field = j.at(key).template get<std::decay_t<decltype(field)>>();
    };
    get("dataset", c.dataset_manifest);
    get("fold", c.fold);
    get("seed", c.seed);
    get("run_name", c.run_name);
    get("levels", c.levels);
    get("widths", c.widths);
    get("n_b", c.n_b);
    get("patch_top", c.patch_top);
    get("stride_top", c.stride_top);
    get("kernel", c.kernel);
    get("sigma", c.sigma);
    get("gamma_max", c.gamma_max);
    get("gamma_min", c.gamma_min);
    get("max_shallow", c.max_shallow);
    get("max_deep", c.max_deep);
    get("min_kernel_taps", c.min_kernel_taps);
    get("min_deep", c.min_deep);
    get("disc_width", c.disc_width);
    get("batch", c.batch);
    get("epochs", c.epochs);
    get("lr", c.lr);
    get("train_drf", c.train_drf);
    get("clip_norm", c.clip_norm);
    get("out", c.out_dir);
    return c;
}

// Sums tape gradients per parameter over every binding, restricted to one
// optimisation group.
template <typename T>
std::map<std::string, std::vector<T>> harvest_grads(Tape<T>& tape, const Binder<T>& bind,
                                                    const std::set<const Param<T>*>& group) {
    std::map<std::string, std::vector<T>> grads;
    for (const auto& bd : bind.bound()) {
        if (!group.count(bd.param)) continue;
        if (!tape.grad_touched(bd.node)) continue;
        Tensor<T> g = tape.grad_by_node(bd.node, bd.param->value.shape);
        auto& slot = grads[bd.param->name];
        if (slot.empty()) slot.assign(g.size(), T(0));
        for (std::size_t i = 0; i < g.size(); ++i) slot[i] += g.data[i];
    }
    return grads;
}

struct LoadedSample {
    Tensor<float> pet, mr, target;
};

void fill_batch(const std::vector<LoadedSample>& samples, const std::vector<int>& idx,
                std::size_t first, std::size_t count, int size, int pet_ch, int mr_ch,
                Tensor<float>& pet, Tensor<float>& mr, Tensor<float>& target) {
    const int B = static_cast<int>(count);
    pet = Tensor<float>({B, size, size, pet_ch}, 0.f);
    mr = Tensor<float>({B, size, size, mr_ch}, 0.f);
    target = Tensor<float>({B, size, size, 1}, 0.f);
    const std::size_t pix = static_cast<std::size_t>(size) * size;
    for (int b = 0; b < B; ++b) {
        const LoadedSample& s = samples[idx[first + b]];
        std::copy_n(s.pet.data.begin(), pix * pet_ch, pet.data.begin() + b * pix * pet_ch);
        std::copy_n(s.mr.data.begin(), pix * mr_ch, mr.data.begin() + b * pix * mr_ch);
        std::copy_n(s.target.data.begin(), pix, target.data.begin() + b * pix);
    }
}

}  // namespace

Sample make_sample(const CaseData& c, int drf, int size, int slices) {
    auto it = c.lowdose.find(drf);
    if (it == c.lowdose.end())
        throw IoError("case has no low-dose reconstruction at x" + std::to_string(drf));
    const Tensor<float>& ld = it->second;
    const std::size_t pix = static_cast<std::size_t>(size) * size;
    Sample s;
    s.pet = Tensor<float>({size, size, slices}, 0.f);
    s.mr = Tensor<float>({size, size, 2 * slices}, 0.f);
    s.target = Tensor<float>({size, size, 1}, 0.f);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const std::size_t site = static_cast<std::size_t>(y) * size + x;
            for (int sl = 0; sl < slices; ++sl) {
                s.pet.data[site * slices + sl] = ld.data[sl * pix + site];
                s.mr.data[site * 2 * slices + sl] = c.t1.data[sl * pix + site];
                s.mr.data[site * 2 * slices + slices + sl] = c.t2.data[sl * pix + site];
            }
            s.target.data[site] = c.std_recon.data[(slices / 2) * pix + site];
        }
    return s;
}

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    return config_from_json(j);
}

std::string ExperimentConfig::to_json_text() const { return config_to_json(*this).dump(2) + "\n"; }

NetConfig ExperimentConfig::net_config(const Dataset& data) const {
    NetConfig nc;
    nc.levels = levels;
    nc.widths = widths;
    nc.n_b = n_b;
    nc.pet_channels = data.slices;
    nc.mr_channels = 2 * data.slices;
    nc.input_hw = data.size;
    nc.patch_top = patch_top;
    nc.stride_top = stride_top;
    nc.family = kernel_family_from_string(kernel);
    nc.sigma = sigma;
    nc.seed = seed;
    return nc;
}

ConstraintConfig ExperimentConfig::constraint_config() const {
    ConstraintConfig cc;
    cc.gamma_max = gamma_max;
    cc.gamma_min = gamma_min;
    cc.max_shallow = max_shallow;
    cc.max_deep = max_deep < 0 ? levels : max_deep;
    cc.min_deep = min_deep < 0 ? levels : min_deep;
    cc.min_kernel_taps.clear();
    if (min_kernel_taps.empty()) {
        for (int l = 0; l < std::min(3, cc.min_deep); ++l) cc.min_kernel_taps.push_back(l);
    } else {
        cc.min_kernel_taps = min_kernel_taps;
    }
    cc.disc_width = disc_width;
    return cc;
}

void ExperimentConfig::validate(const Dataset& data) const {
    if (batch < 1) throw ConfigError("batch size must be positive");
    if (gamma_min > 0.0 && batch < 2)
        throw ConfigError("marginal rolling needs batch >= 2 when gamma_min > 0");
    if (epochs < 1) throw ConfigError("epochs must be positive");
    if (!data.has_drf(train_drf))
        throw ConfigError("training DRF x" + std::to_string(train_drf) +
                          " is not present in the dataset");
    if (fold < 0 || fold >= data.folds) throw ConfigError("fold index out of range");
    if (gamma_max > 0.0 || gamma_min > 0.0) constraint_config().validate(levels);
    make_layer_specs(net_config(data));
}

TrainResult train(const ExperimentConfig& cfg, const Dataset& data) {
    cfg.validate(data);
    const NetConfig nc = cfg.net_config(data);
    const ConstraintConfig cc = cfg.constraint_config();
    const int size = data.size;
    const int pet_ch = nc.pet_channels, mr_ch = nc.mr_channels;

    DeepKernelNet<float> net(nc);
    std::optional<DiscriminatorMax<float>> tmax;
    std::optional<DiscriminatorMin<float>> tmin;
    const auto& specs = net.layer_specs();
    if (cc.gamma_max > 0.0) {
        const int c_in = specs[cc.max_shallow].channels + specs[cc.max_deep].channels;
        tmax.emplace(c_in, specs[cc.max_deep].h, cc.disc_width,
                     derive_seed(cfg.seed, "tmax-init"));
    }
    if (cc.gamma_min > 0.0) {
        std::vector<int> tap_ch, stage_w;
        for (int l : cc.min_kernel_taps) {
            tap_ch.push_back(specs[l].channels);
            stage_w.push_back(cfg.widths[l]);
        }
        stage_w.push_back(cfg.widths[std::min<int>(cc.min_kernel_taps.size(),
                                                   static_cast<int>(cfg.widths.size()) - 1)]);
        tmin.emplace(tap_ch, specs[cc.min_deep].channels, stage_w,
                     specs[cc.min_kernel_taps.front()].h, derive_seed(cfg.seed, "tmin-init"));
    }

    std::vector<Param<float>*> net_params, tmax_params, tmin_params;
    std::set<const Param<float>*> net_set, tmax_set, tmin_set;
    net.visit_params([&](Param<float>& p) {
        net_params.push_back(&p);
        net_set.insert(&p);
    });
    if (tmax)
        tmax->visit_params([&](Param<float>& p) {
            tmax_params.push_back(&p);
            tmax_set.insert(&p);
        });
    if (tmin)
        tmin->visit_params([&](Param<float>& p) {
            tmin_params.push_back(&p);
            tmin_set.insert(&p);
        });

    Adam<float> adam_net, adam_tmax, adam_tmin;

    const std::vector<int> train_cases = data.case_indices(cfg.fold, "train");
    if (train_cases.empty()) throw ConfigError("training split is empty");
    std::vector<LoadedSample> samples;
    for (int ci : train_cases) {
        CaseData cd = data.load_case(ci, {cfg.train_drf});
        Sample s = make_sample(cd, cfg.train_drf, size, data.slices);
        samples.push_back(LoadedSample{std::move(s.pet), std::move(s.mr), std::move(s.target)});
    }

    const auto out_dir = std::filesystem::path(cfg.out_dir);
    const auto ckpt_dir = out_dir / "checkpoint";
    ensure_dir(out_dir);

    auto save_checkpoint = [&](long batches) {
        ensure_dir(ckpt_dir);
        net.save_params(ckpt_dir);
        adam_net.save(ckpt_dir / "optim");
        json m;
        m["config"] = config_to_json(cfg);
        m["code_version"] = kCodeVersion;
        m["batches"] = batches;
        m["slices"] = data.slices;
        m["input_hw"] = size;
        write_text_file(ckpt_dir / "manifest.json", m.dump(2) + "\n");
    };

    Rng shuffle_rng(derive_seed(cfg.seed, "shuffle"));
    std::vector<EpochLog> logs;
    long batches = 0;
    const int n = static_cast<int>(samples.size());
    const int bsz = std::min(cfg.batch, n);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<int> order(n);
        std::iota(order.begin(), order.end(), 0);
        shuffle_rng.shuffle(order.begin(), order.end());
        EpochLog log;
        log.epoch = epoch;
        int n_batches = 0;
        for (std::size_t first = 0; first + bsz <= static_cast<std::size_t>(n); first += bsz) {
            Tape<float> tape;
            Binder<float> bind(&tape);
            Tensor<float> pet, mr, target;
            fill_batch(samples, order, first, bsz, size, pet_ch, mr_ch, pet, mr, target);

            NetInternals<float> net_out = net.forward(bind, pet, mr, true);
            Tensor<float> l_data = mse_loss(net_out.out, target);
            Tensor<float> l_total = l_data;

            Tensor<float> lmax_t, lmin_t, bce_max_t, bce_min_t;
            if (tmax) {
                const int psz = specs[cc.max_deep].h;
                auto patches = extract_patches(net_out.f_pet[cc.max_shallow], psz);
                const int np = patches.dim(0) / bsz;
                auto deep_rep = repeat_batch(net_out.f_pet[cc.max_deep], np);
                std::vector<Tensor<float>> joint_parts{patches, deep_rep};
                auto t_out = tmax->forward(bind, concat_channels(joint_parts), true);
                lmax_t = loss_max(t_out);
                l_total = add(l_total, mul_scalar(lmax_t, static_cast<float>(cc.gamma_max)));

                auto patches_d = patches.detached();
                auto deep_d = net_out.f_pet[cc.max_deep].detached();
                std::vector<Tensor<float>> jd{patches_d, repeat_batch(deep_d, np)};
                std::vector<Tensor<float>> md{patches_d, repeat_batch(roll_batch(deep_d), np)};
                bce_max_t = discriminator_bce(tmax->forward(bind, concat_channels(jd), true),
                                              tmax->forward(bind, concat_channels(md), true));
            }
            if (tmin) {
                std::vector<Tensor<float>> fk_det;
                for (int l : cc.min_kernel_taps)
                    fk_det.push_back(kernel_apply(net_out.b[l].detached(), net_out.f_pet[l],
                                                  net.patch_table(l), specs[l].family, nc.sigma));
                auto t_out = tmin->forward(bind, fk_det, net_out.f_pet[cc.min_deep], true);
                lmin_t = loss_min(t_out);
                l_total = add(l_total, mul_scalar(lmin_t, static_cast<float>(cc.gamma_min)));

                std::vector<Tensor<float>> fk_dd;
                for (auto& f : fk_det) fk_dd.push_back(f.detached());
                auto deep_d = net_out.f_pet[cc.min_deep].detached();
                bce_min_t = discriminator_bce(tmin->forward(bind, fk_dd, deep_d, true),
                                              tmin->forward(bind, fk_dd, roll_batch(deep_d), true));
            }

            if (!std::isfinite(l_total[0])) {
                save_checkpoint(batches);
                throw NumericError("training loss is not finite at batch " +
                                   std::to_string(batches));
            }

            // Loss decomposition must hold to 1e-6 (relative; the sum is
            // accumulated in f32).
            {
                const double recomposed = static_cast<double>(l_data[0]) +
                                          (tmax ? cc.gamma_max * lmax_t[0] : 0.0) +
                                          (tmin ? cc.gamma_min * lmin_t[0] : 0.0);
                const double tol = 1e-6 * std::max(1.0, std::abs(static_cast<double>(l_total[0])));
                if (std::abs(recomposed - l_total[0]) > tol)
                    throw NumericError("loss decomposition violated");
            }

            const double rate = lr_schedule(cfg.lr, batches);
            tape.backward(l_total);
            auto gnet = harvest_grads(tape, bind, net_set);
            clip_global_norm(gnet, cfg.clip_norm);
            try {
                adam_net.step(net_params, gnet, rate);
                if (tmax) {
                    tape.backward(bce_max_t);
                    auto g = harvest_grads(tape, bind, tmax_set);
                    clip_global_norm(g, cfg.clip_norm);
                    adam_tmax.step(tmax_params, g, rate);
                }
                if (tmin) {
                    tape.backward(bce_min_t);
                    auto g = harvest_grads(tape, bind, tmin_set);
                    clip_global_norm(g, cfg.clip_norm);
                    adam_tmin.step(tmin_params, g, rate);
                }
            } catch (const NumericError&) {
                save_checkpoint(batches);
                throw;
            }

            ++batches;
            ++n_batches;
            log.l_data += l_data[0];
            log.l_total += l_total[0];
            if (tmax) {
                log.l_max += lmax_t[0];
                log.bce_max += bce_max_t[0];
            }
            if (tmin) {
                log.l_min += lmin_t[0];
                log.bce_min += bce_min_t[0];
            }
        }
        if (n_batches > 0) {
            log.l_data /= n_batches;
            log.l_total /= n_batches;
            log.l_max /= n_batches;
            log.l_min /= n_batches;
            log.bce_max /= n_batches;
            log.bce_min /= n_batches;
        }
        logs.push_back(log);
        save_checkpoint(batches);
    }

    TrainResult res;
    res.checkpoint_dir = ckpt_dir;
    res.epochs = logs;

    // Validation at the training DRF through the same path evaluation uses.
    const auto val_cases = data.case_indices(cfg.fold, "val");
    if (!val_cases.empty()) {
        EvalResult ev = evaluate(ckpt_dir, data, {cfg.train_drf}, val_cases);
        res.val_psnr = ev.mean("psnr", cfg.train_drf);
        res.val_ssim = ev.mean("ssim", cfg.train_drf);
    }

    json rm;
    rm["config"] = config_to_json(cfg);
    rm["code_version"] = kCodeVersion;
    rm["seed"] = cfg.seed;
    json folds;
    for (const char* role : {"train", "val", "test"}) {
        json arr = json::array();
        for (int ci : data.case_indices(cfg.fold, role)) arr.push_back(data.cases[ci].id);
        folds[role] = arr;
    }
    rm["fold_assignment"] = folds;
    json eplog = json::array();
    for (const auto& l : logs)
        eplog.push_back({{"epoch", l.epoch},
                         {"l_data", l.l_data},
                         {"l_max", l.l_max},
                         {"l_min", l.l_min},
                         {"l_total", l.l_total},
                         {"bce_max", l.bce_max},
                         {"bce_min", l.bce_min}});
    rm["epochs"] = eplog;
    rm["validation"] = {{"drf", cfg.train_drf}, {"psnr", res.val_psnr}, {"ssim", res.val_ssim}};
    res.run_manifest = out_dir / "manifest.json";
    write_text_file(res.run_manifest, rm.dump(2) + "\n");
    return res;
}

ExperimentConfig load_checkpoint_config(const std::filesystem::path& checkpoint_dir) {
    const auto mpath = checkpoint_dir / "manifest.json";
    if (!std::filesystem::exists(mpath))
        throw IoError("checkpoint manifest not found: " + mpath.string());
    json m = json::parse(read_text_file(mpath));
    return config_from_json(m.at("config"));
}

double EvalResult::mean(const std::string& metric, int drf, const std::string& region) const {
    double acc = 0.0;
    int count = 0;
    for (const auto& r : rows)
        if (r.metric == metric && r.drf == drf && (region.empty() || r.region == region)) {
            acc += r.value;
            ++count;
        }
    if (count == 0) throw DomainError("no rows for metric " + metric);
    return acc / count;
}

std::string EvalResult::to_csv() const {
    std::ostringstream os;
    os << "method,case,drf,distribution,metric,region,value\n";
    for (const auto& r : rows) {
        os << r.method << ',' << r.case_id << ',' << r.drf << ','
           << (r.in_distribution ? "in" : "out") << ',' << r.metric << ',' << r.region << ',';
        os.precision(9);
        os << r.value << '\n';
    }
    return os.str();
}

EvalResult evaluate(const std::filesystem::path& checkpoint_dir, const Dataset& data,
                    const std::vector<int>& drfs, const std::vector<int>& case_indices) {
    ExperimentConfig cfg = load_checkpoint_config(checkpoint_dir);
    NetConfig nc = cfg.net_config(data);
    DeepKernelNet<float> net(nc);
    net.load_params(checkpoint_dir);

    EvalResult out;
    const std::size_t pix = static_cast<std::size_t>(data.size) * data.size;
    for (int drf : drfs) {
        if (!data.has_drf(drf)) {
            EvalRow row;
            row.method = cfg.run_name;
            row.case_id = -1;
            row.drf = drf;
            row.metric = "skipped";
            row.value = 1.0;
            out.rows.push_back(row);
            continue;
        }
        for (int ci : case_indices) {
            CaseData cd = data.load_case(ci, {drf});
            Sample s = make_sample(cd, drf, data.size, data.slices);
            Binder<float> bind(nullptr);
            Tensor<float> pet({1, data.size, data.size, nc.pet_channels}, s.pet.data);
            Tensor<float> mr({1, data.size, data.size, nc.mr_channels}, s.mr.data);
            auto internals = net.forward(bind, pet, mr, false);
            Tensor<double> pred({data.size, data.size}, 0.0);
            for (std::size_t i = 0; i < pix; ++i) pred.data[i] = internals.out.data[i];
            Tensor<double> ref({data.size, data.size}, 0.0);
            for (std::size_t i = 0; i < pix; ++i) ref.data[i] = s.target.data[i];

            auto push = [&](const std::string& metric, const std::string& region, double value) {
                EvalRow row;
                row.method = cfg.run_name;
                row.case_id = data.cases[ci].id;
                row.drf = drf;
                row.in_distribution = drf == cfg.train_drf;
                row.metric = metric;
                row.region = region;
                row.value = value;
                out.rows.push_back(row);
            };
            push("psnr", "", psnr(pred, ref));
            push("ssim", "", ssim(pred, ref));
            Tensor<double> labels({data.size, data.size}, 0.0);
            for (std::size_t i = 0; i < pix; ++i) labels.data[i] = cd.labels.data[i];
            RegionReport rep = regional_bias_variance(pred, ref, labels, data.regions);
            for (const auto& r : rep.regions) {
                if (r.skipped) continue;
                push("region_bias", r.name, r.bias_pct);
                push("region_variance", r.name, r.variance_pct);
            }
        }
    }
    return out;
}

}  // namespace dkn
