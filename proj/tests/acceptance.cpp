#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include <biasnet/pipeline.hpp>

#include "detector_oracles.hpp"
#include "grad_check.hpp"

using namespace biasnet;
namespace fs = std::filesystem;

namespace {

// Tolerances, pinned.
constexpr double kGammaTol = 1e-9;
constexpr std::size_t kMapTrials = 100000;
constexpr int kMapInstances = 20;
constexpr int kMapMinWins = 19; // 95% of 20
constexpr double kMapPowerZ = 3.0;
constexpr double kGradTol = 1e-4;
constexpr double kGradSeconds = 300;
constexpr double kGridSeconds = 60;
constexpr double kCleanAccuracy = 0.95;
constexpr double kCleanTrainSeconds = 900;
constexpr double kBiasGainPoints = 0.20;
constexpr double kTwoLayerSlack = 0.01;
constexpr double kReversalGainPoints = 0.10;
constexpr double kCamoNear = 0.2;
constexpr double kCamoReversalPoints = 0.10;

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args)
{
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0)
{
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Outcome c1_neuron_equivalence()
{
    const auto t0 = std::chrono::steady_clock::now();
    const std::vector<double> levels{0.0, 0.25, 0.5, 0.75, 1.0};
    Rng rng(101);
    std::vector<HypothesisTest> cases;
    cases.emplace_back(Tensor<double>::vector({1.0}), Tensor<double>({1}), 1.0, 0.5); // gamma = 0.5 lands on the grid
    for (std::size_t d = 1; d <= 5; ++d)
        for (int k = 0; k < 4; ++k) {
            Tensor<double> s({d}), m({d});
            for (auto& v : s.storage()) v = rng.uniform(-1.0, 1.0);
            for (auto& v : m.storage()) v = rng.uniform(-0.5, 0.5);
            cases.emplace_back(s, m, rng.uniform(0.1, 1.0), rng.uniform(0.2, 0.8));
        }
    std::size_t obs = 0, agree = 0, ties = 0;
    for (const auto& t : cases) {
        const auto g = testing_util::neuron_vs_map_grid(t, levels);
        obs += g.observations;
        agree += g.agree;
        ties += g.ties;
    }
    const double secs = seconds_since(t0);
    return {agree == obs && ties > 0 && secs < kGridSeconds,
            fmt("%zu/%zu agree over %zu instances, %zu ties, %.2fs", agree, obs, cases.size(), ties, secs)};
}

Outcome c2_gamma_formula()
{
    Rng rng(102);
    double worst = 0.0;
    for (int i = 0; i < 100; ++i) {
        const auto t = testing_util::random_instance(rng);
        worst = std::max(worst, std::abs(threshold_gamma(t) - testing_util::gamma_by_root_finding(t)));
    }
    Tensor<double> s({7});
    for (auto& v : s.storage()) v = rng.uniform(-1.0, 1.0);
    const HypothesisTest zero_mean(s, Tensor<double>({7}), 0.3, 0.5);
    const bool exact = threshold_gamma(zero_mean) == dot(s, s) / 2;
    return {worst < kGammaTol && exact, fmt("max |gamma - root| = %.3g, zero-mean exact: %s", worst, exact ? "yes" : "no")};
}

Outcome c3_map_optimality()
{
    Rng pick(103);
    int wins = 0;
    int drawn = 0;
    for (int i = 0; i < kMapInstances; ++i) {
        // Only instances where the exact error gap exceeds the Monte Carlo noise floor.
        auto t = testing_util::random_instance(pick);
        for (++drawn; !testing_util::gap_resolvable(t, threshold_gamma(t), 1.1 * threshold_gamma(t), kMapTrials, kMapPowerZ) ||
                      !testing_util::gap_resolvable(t, threshold_gamma(t), 0.9 * threshold_gamma(t), kMapTrials, kMapPowerZ);
             ++drawn)
            t = testing_util::random_instance(pick);
        const double g = threshold_gamma(t);
        const std::uint64_t seed = pick.next_u64();
        auto err = [&](double gamma) {
            Rng r(seed); // common random numbers across the three rules
            return monte_carlo_error(t, testing_util::ThresholdRule{&t, gamma}, kMapTrials, r);
        };
        const double e0 = err(g);
        if (e0 <= err(1.1 * g) && e0 <= err(0.9 * g)) ++wins;
    }
    return {wins >= kMapMinWins, fmt("MAP no worse than both perturbations on %d/%d instances (%d drawn, %.0f-SE resolvable kept)", wins,
                kMapInstances, drawn, kMapPowerZ)};
}

Outcome c4_gradients()
{
    const auto t0 = std::chrono::steady_clock::now();
    LeNetArch arch;
    arch.conv1 = 4;
    arch.conv2 = 8;
    arch.hidden = 32;
    Rng rng(104);
    auto p = init_lenet<double>(arch, rng);
    testing_util::randomize_nonzero(p, rng);
    Tensor<double> x({3, 1, arch.input, arch.input});
    for (auto& v : x.storage()) v = rng.uniform();
    const auto r = testing_util::check_lenet_gradients(p, x, {3, 7, 1});
    const double secs = seconds_since(t0);
    return {r.checked == p.parameter_count() && r.max_rel_error < kGradTol && secs < kGradSeconds,
            fmt("%zu parameters, max rel error %.3g (%s), %.1fs", r.checked, r.max_rel_error, r.worst.c_str(), secs)};
}

struct Run {
    fs::path root;
    SweepResult results, background;

    bool present() const { return fs::exists(root / "results.csv") && fs::exists(root / "background.csv"); }
    double at(const SweepResult& r, const std::string& id, double level) const { return r.at(id, level).detection_rate; }
    Curve curve(const SweepResult& r, const std::string& id) const { return curve_of(r, id); }
};

std::vector<std::string> split_csv_line(const std::string& line)
{
    std::vector<std::string> out;
    std::stringstream ss(line);
    for (std::string tok; std::getline(ss, tok, ',');) out.push_back(tok);
    return out;
}

Outcome c5_freeze(const Run& run)
{
    std::map<std::string, LeNetParams<float>> models; // params_id -> params
    for (const auto& e : fs::directory_iterator(run.root / "models"))
        if (e.path().extension() == ".ckpt") {
            auto p = load_checkpoint<float>(e.path());
            models.emplace(params_id(p), std::move(p));
        }
    std::map<std::string, std::set<std::string>> rows; // bank id -> level keys
    std::istringstream in(read_text_file(run.root / "freeze.csv"));
    std::string line;
    std::getline(in, line);
    std::size_t n_rows = 0, mismatched = 0;
    while (std::getline(in, line)) {
        const auto f = split_csv_line(line);
        if (f.size() != 4) return {false, "malformed freeze.csv row: " + line};
        ++n_rows;
        if (f[2] != f[3]) ++mismatched;
        rows[f[0]].insert(f[1]);
    }
    std::size_t banks = 0, entries = 0, uncovered = 0, wrong_base = 0;
    for (const auto& e : fs::directory_iterator(run.root / "banks")) {
        const auto id = e.path().stem().string();
        const auto bank = BiasBank<float>::load(e.path());
        const auto base = models.find(bank.anchor_id);
        if (base == models.end()) return {false, "no checkpoint anchors bank " + id};
        const auto frozen = hex32(params_checksum(base->second, bank.layers.tensor_names()));
        ++banks;
        const bool composed = id.size() > 4 && id.ends_with("+rev");
        for (const auto& [level, b] : bank.entries) {
            ++entries;
            const auto key = BiasBank<float>::level_key(level);
            const auto tuned = substitute_biases(base->second, b);
            if (hex32(params_checksum(tuned, bank.layers.tensor_names())) != frozen) ++wrong_base;
            // Composed reversal banks take their entries from the plain and "-far" builds.
            const bool covered = composed ? rows[id.substr(0, id.size() - 4)].contains(key) || rows[id + "-far"].contains(key)
                                          : rows[id].contains(key);
            if (!covered) ++uncovered;
        }
    }
    return {banks > 0 && n_rows > 0 && mismatched == 0 && uncovered == 0 && wrong_base == 0,
            fmt("%zu banks, %zu entries, %zu retrain rows, %zu checksum mismatches, %zu uncovered, %zu substitution drifts",
                banks, entries, n_rows, mismatched, uncovered, wrong_base)};
}

Outcome c6_clean(const Run& run)
{
    const double acc = run.at(run.results, ids::zero, 0.0);
    std::optional<double> secs;
    std::ifstream t(run.root / "timings.txt");
    for (std::string id; t >> id;) {
        double s;
        t >> s;
        if (id == ids::zero) secs = s;
    }
    const bool fast = secs && *secs < kCleanTrainSeconds;
    return {acc >= kCleanAccuracy && fast,
            fmt("zero-trained accuracy at sigma=0: %.4f, training time %s", acc,
                secs ? fmt("%.0fs", *secs).c_str() : "unrecorded")};
}

Outcome c7_degradation(const Run& run)
{
    const auto zero = run.curve(run.results, ids::zero), max = run.curve(run.results, ids::max);
    const double top = zero.levels.back();
    const double z0 = zero.rate_at(0.0), m0 = max.rate_at(0.0), z1 = zero.rate_at(top), m1 = max.rate_at(top);
    return {m0 >= 0.5 * z0 && z1 <= 0.5 * m1,
            fmt("sigma=0: max %.4f vs zero %.4f; sigma=%.2f: zero %.4f vs max %.4f", m0, z0, top, z1, m1)};
}

Outcome c8_bias_benefit(const Run& run)
{
    const double plain = run.curve(run.results, ids::zero).min_rate();
    const double adjusted = run.curve(run.results, ids::zero_bias1).min_rate();
    return {adjusted - plain >= kBiasGainPoints,
            fmt("min over grid: zero %.4f, zero+bias1 %.4f (+%.1f points)", plain, adjusted, 100 * (adjusted - plain))};
}

/// Boundary of `a`'s region against `b`. With no sign change the region covers
/// the whole grid or none of it.
double region_boundary(const Curve& a, const Curve& b, bool a_is_low_side)
{
    if (const auto x = find_crossover(a, b)) return *x;
    const bool a_everywhere = a.rates.front() >= b.rates.front();
    const double lo = a.levels.front(), hi = a.levels.back();
    if (a_is_low_side) return a_everywhere ? hi : lo;
    return a_everywhere ? lo : hi;
}

Outcome c9_crossovers(const Run& run)
{
    const auto mixed = run.curve(run.results, ids::mixed);
    const double zb = region_boundary(run.curve(run.results, ids::zero), mixed, true);
    const double za = region_boundary(run.curve(run.results, ids::zero_bias1), mixed, true);
    const double mb = region_boundary(run.curve(run.results, ids::max), mixed, false);
    const double ma = region_boundary(run.curve(run.results, ids::max_bias1), mixed, false);
    const double before = std::max(0.0, mb - zb), after = std::max(0.0, ma - za);
    return {za > zb && ma <= mb && after < before,
            fmt("zero_vs_mixed %.4f -> %.4f, max_vs_mixed %.4f -> %.4f, mixed-optimal width %.4f -> %.4f", zb, za, mb,
                ma, before, after)};
}

Outcome c10_two_layer(const Run& run)
{
    const auto one = run.curve(run.results, ids::zero_bias1), two = run.curve(run.results, ids::zero_bias12);
    int better = 0;
    for (std::size_t i = 0; i < one.rates.size(); ++i) better += two.rates[i] > one.rates[i];
    return {two.mean_rate() >= one.mean_rate() - kTwoLayerSlack && better > 0,
            fmt("mean conv1 %.4f, conv1+conv2 %.4f, strictly better at %d/%zu levels", one.mean_rate(), two.mean_rate(),
                better, one.rates.size())};
}

Outcome c11_background(const Run& run)
{
    auto far_drop = [&](const std::string& id, double reference_level) {
        const auto c = run.curve(run.background, id);
        double worst = 1.0;
        for (std::size_t i = 0; i < c.levels.size(); ++i)
            if (c.levels[i] > 0.5) worst = std::min(worst, c.rates[i]);
        return c.rate_at(reference_level) - worst;
    };
    auto argmin = [&](const std::string& id) {
        const auto c = run.curve(run.background, id);
        return c.levels[static_cast<std::size_t>(std::min_element(c.rates.begin(), c.rates.end()) - c.rates.begin())];
    };
    const double ext_plain = far_drop(ids::bg_extreme_bias, 0.0), ext_rev = far_drop(ids::bg_extreme_rev, 0.0);
    const double camo_plain = far_drop(ids::bg_camo_bias, 0.5), camo_rev = far_drop(ids::bg_camo_rev, 0.5);
    const double at_bias = argmin(ids::bg_camo_bias), at_rev = argmin(ids::bg_camo_rev);
    const bool extreme = ext_plain - ext_rev >= kReversalGainPoints;
    const bool camo = std::abs(at_bias - 0.5) <= kCamoNear + 1e-9 && std::abs(at_rev - 0.5) <= kCamoNear + 1e-9 &&
                      std::abs(camo_plain - camo_rev) < kCamoReversalPoints;
    return {extreme && camo,
            fmt("extreme far-side drop %.4f without reversal, %.4f with; camouflage minimum at %.2f / %.2f (bias / "
                "bias+rev), far-side drop %.4f vs %.4f",
                ext_plain, ext_rev, at_bias, at_rev, camo_plain, camo_rev)};
}

Outcome c12_da(const Run& run)
{
    const double ours = run.at(run.results, ids::zero_bias1, 0.0), da = run.at(run.results, ids::da_mixed, 0.0);
    return {ours >= da, fmt("sigma=0: zero+bias1 %.4f, da-mixed %.4f", ours, da)};
}

std::map<std::string, std::string> csv_files(const fs::path& root)
{
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file() && e.path().extension() == ".csv")
            out.emplace(fs::relative(e.path(), root).string(), read_text_file(e.path()));
    return out;
}

Outcome c13_reproducible(const fs::path& a, const fs::path& b)
{
    if (b.empty() || !fs::exists(b / "results.csv")) return {false, "second run missing"};
    const auto fa = csv_files(a), fb = csv_files(b);
    std::size_t differ = 0;
    std::string first;
    for (const auto& [name, text] : fa) {
        const auto it = fb.find(name);
        if (it == fb.end() || it->second != text) {
            if (first.empty()) first = name;
            ++differ;
        }
    }
    for (const auto& [name, text] : fb)
        if (!fa.contains(name)) {
            if (first.empty()) first = name;
            ++differ;
        }
    return {!fa.empty() && differ == 0,
            fmt("%zu CSV files compared, %zu differ%s", fa.size(), differ, first.empty() ? "" : (", first " + first).c_str())};
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Acceptance criteria report"};
    fs::path run_a, run_b;
    app.add_option("--run-a", run_a, "Pipeline output directory")->required();
    app.add_option("--run-b", run_b, "Second pipeline output directory with the same seed");
    CLI11_PARSE(app, argc, argv);

    int failures = 0;
    auto report = [&](int n, const char* name, const std::function<Outcome()>& check) {
        Outcome o;
        try {
            o = check();
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
        }
        failures += !o.pass;
        std::printf("%s C%d %s: %s\n", o.pass ? "PASS" : "FAIL", n, name, o.detail.c_str());
        std::fflush(stdout);
    };

    report(1, "neuron/MAP equivalence", c1_neuron_equivalence);
    report(2, "threshold formula", c2_gamma_formula);
    report(3, "MAP optimality", c3_map_optimality);
    report(4, "gradients", c4_gradients);

    Run run{run_a, {}, {}};
    auto with_run = [&](auto check) {
        return [&run, check]() -> Outcome {
            if (!run.present()) return {false, "run directory " + run.root.string() + " has no results"};
            return check(run);
        };
    };
    if (run.present()) {
        run.results = load_sweep_csv(run.root / "results.csv");
        run.background = load_sweep_csv(run.root / "background.csv");
    }
    report(5, "freeze invariant", with_run(c5_freeze));
    report(6, "clean accuracy", with_run(c6_clean));
    report(7, "degradation ordering", with_run(c7_degradation));
    report(8, "bias adjustment benefit", with_run(c8_bias_benefit));
    report(9, "crossover shift", with_run(c9_crossovers));
    report(10, "two-layer adjustment", with_run(c10_two_layer));
    report(11, "background reversal", with_run(c11_background));
    report(12, "dA comparison", with_run(c12_da));
    report(13, "reproducibility", [&] { return c13_reproducible(run_a, run_b); });
    return failures == 0 ? 0 : 1;
}
