#include "dkn/dataset.hpp"

#include <json.hpp>

#include <algorithm>
#include <mutex>
#include <numeric>
#include <thread>

#include "dkn/io.hpp"
#include "dkn/network.hpp"
#include "dkn/phantom.hpp"
#include "dkn/projector.hpp"
#include "dkn/rng.hpp"

namespace dkn {

using nlohmann::json;

std::vector<int> cross_validation_split(int n_cases, int n_folds, std::uint64_t seed) {
    if (n_folds < 1 || n_folds > n_cases)
        throw ConfigError("fold count must be in [1, n_cases], got " + std::to_string(n_folds) +
                          " folds for " + std::to_string(n_cases) + " cases");
    std::vector<int> order(n_cases);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(seed, "cv-split"));
    rng.shuffle(order.begin(), order.end());
    std::vector<int> fold(n_cases, 0);
    for (int i = 0; i < n_cases; ++i) fold[order[i]] = i % n_folds;
    return fold;
}

namespace {

void simulate_case(const SimConfig& cfg, const Projector& projector, std::uint64_t case_seed,
                   const std::filesystem::path& dir) {
    ensure_dir(dir);
    PhantomMaps maps = generate_phantom(case_seed, cfg.size, cfg.slices);
    save_dkt1(dir / "masks.dkt1", maps.labels.cast<float>());
    save_dkt1(dir / "activity.dkt1", maps.activity.cast<float>());
    save_dkt1(dir / "t1.dkt1", maps.t1.cast<float>());
    save_dkt1(dir / "t2.dkt1", maps.t2.cast<float>());

    const std::size_t plane = static_cast<std::size_t>(cfg.size) * cfg.size;
    auto reconstruct_stack = [&](double drf, const std::string& tag) {
        Tensor<double> stack({cfg.slices, cfg.size, cfg.size}, 0.0);
        for (int sl = 0; sl < cfg.slices; ++sl) {
            Tensor<double> slice({cfg.size, cfg.size}, 0.0);
            std::copy_n(maps.activity.data.begin() + sl * plane, plane, slice.data.begin());
            Sinogram expected = projector.forward(slice);
            for (double& v : expected.data) v *= cfg.count_scale;
            Sinogram counts = poisson_sample(
                expected, drf, derive_seed(case_seed, tag + "-slice" + std::to_string(sl)));
            MlemResult rec =
                mlem_reconstruct(counts, projector, cfg.mlem_iters, cfg.mlem_subsets, drf);
            std::copy_n(rec.image.data.begin(), plane, stack.data.begin() + sl * plane);
        }
        return stack;
    };

    save_dkt1(dir / "std.dkt1", reconstruct_stack(1.0, "std").cast<float>());
    for (int drf : cfg.drfs)
        save_dkt1(dir / ("ld_x" + std::to_string(drf) + ".dkt1"),
                  reconstruct_stack(drf, "drf" + std::to_string(drf)).cast<float>());
}

}  // namespace

std::filesystem::path make_dataset(const SimConfig& cfg, const std::filesystem::path& out_dir) {
    if (cfg.drfs.empty()) throw ConfigError("dose reduction factor list must not be empty");
    for (int d : cfg.drfs)
        if (d < 1) throw ConfigError("dose reduction factors must be >= 1");
    ensure_dir(out_dir);
    const Projector projector(cfg.size, cfg.size, cfg.n_angles, cfg.n_bins);
    const std::vector<int> folds = cross_validation_split(cfg.n_cases, cfg.folds, cfg.seed);

    std::vector<std::uint64_t> case_seeds(cfg.n_cases);
    for (int i = 0; i < cfg.n_cases; ++i) case_seeds[i] = derive_seed(cfg.seed, 1000 + i);

    int n_threads = cfg.threads > 0 ? cfg.threads
                                    : static_cast<int>(std::thread::hardware_concurrency());
    n_threads = std::max(1, std::min({n_threads, cfg.n_cases, 8}));
    std::vector<std::thread> workers;
    std::exception_ptr first_error;
    std::mutex err_mutex;
    for (int w = 0; w < n_threads; ++w) {
        workers.emplace_back([&, w] {
            for (int i = w; i < cfg.n_cases; i += n_threads) {
                try {
                    simulate_case(cfg, projector, case_seeds[i],
                                  out_dir / ("case_" + std::to_string(i)));
                } catch (...) {
                    std::lock_guard<std::mutex> lock(err_mutex);
                    if (!first_error) first_error = std::current_exception();
                }
            }
        });
    }
    for (auto& t : workers) t.join();
    if (first_error) std::rethrow_exception(first_error);

    json manifest;
    manifest["size"] = cfg.size;
    manifest["slices"] = cfg.slices;
    manifest["drfs"] = cfg.drfs;
    manifest["folds"] = cfg.folds;
    manifest["seed"] = cfg.seed;
    manifest["count_scale"] = cfg.count_scale;
    manifest["projector"] = {{"angles", cfg.n_angles},
                             {"bins", cfg.n_bins},
                             {"mlem_iters", cfg.mlem_iters},
                             {"mlem_subsets", cfg.mlem_subsets}};
    manifest["regions"] = region_names();
    json cases = json::array();
    for (int i = 0; i < cfg.n_cases; ++i)
        cases.push_back({{"id", i},
                         {"fold", folds[i]},
                         {"seed", case_seeds[i]},
                         {"dir", "case_" + std::to_string(i)}});
    manifest["cases"] = cases;
    const auto path = out_dir / "manifest.json";
    write_text_file(path, manifest.dump(2) + "\n");
    return path;
}

Dataset Dataset::load(const std::filesystem::path& manifest_path) {
    if (!std::filesystem::exists(manifest_path))
        throw IoError("dataset manifest not found: " + manifest_path.string());
    json m = json::parse(read_text_file(manifest_path));
    Dataset d;
    d.root = manifest_path.parent_path();
    d.size = m.at("size").get<int>();
    d.slices = m.at("slices").get<int>();
    d.folds = m.at("folds").get<int>();
    d.drfs = m.at("drfs").get<std::vector<int>>();
    d.seed = m.at("seed").get<std::uint64_t>();
    d.count_scale = m.at("count_scale").get<double>();
    d.n_angles = m.at("projector").at("angles").get<int>();
    d.n_bins = m.at("projector").at("bins").get<int>();
    d.regions = m.at("regions").get<std::vector<std::string>>();
    for (const auto& c : m.at("cases")) {
        CaseEntry e;
        e.id = c.at("id").get<int>();
        e.fold = c.at("fold").get<int>();
        e.seed = c.at("seed").get<std::uint64_t>();
        e.dir = c.at("dir").get<std::string>();
        d.cases.push_back(e);
    }
    return d;
}

bool Dataset::has_drf(int drf) const {
    return std::find(drfs.begin(), drfs.end(), drf) != drfs.end();
}

CaseData Dataset::load_case(int index, const std::vector<int>& drfs_needed) const {
    if (index < 0 || index >= static_cast<int>(cases.size()))
        throw IndexError("case index out of range");
    const auto dir = root / cases[index].dir;
    CaseData c;
    c.labels = load_dkt1<float>(dir / "masks.dkt1");
    c.activity = load_dkt1<float>(dir / "activity.dkt1");
    c.t1 = load_dkt1<float>(dir / "t1.dkt1");
    c.t2 = load_dkt1<float>(dir / "t2.dkt1");
    c.std_recon = load_dkt1<float>(dir / "std.dkt1");
    for (int drf : drfs_needed) {
        const auto p = dir / ("ld_x" + std::to_string(drf) + ".dkt1");
        if (!std::filesystem::exists(p))
            throw IoError("missing low-dose reconstruction: " + p.string());
        c.lowdose[drf] = load_dkt1<float>(p);
    }
    return c;
}

std::vector<int> Dataset::case_indices(int fold, const std::string& role) const {
    if (fold < 0 || fold >= folds) throw ConfigError("fold index out of range");
    const int val_fold = (fold + 1) % folds;
    std::vector<int> out;
    for (int i = 0; i < static_cast<int>(cases.size()); ++i) {
        const int f = cases[i].fold;
        const bool is_test = f == fold;
        const bool is_val = f == val_fold && folds > 1;
        bool take = false;
        if (role == "test") take = is_test;
        else if (role == "val") take = is_val;
        else if (role == "train") take = !is_test && !is_val;
        else if (role == "all") take = true;
        else throw ConfigError("unknown split role: " + role);
        if (take) out.push_back(i);
    }
    return out;
}

}  // namespace dkn
