#pragma once

// End-to-end desk-scale experiment: trains every network variant, builds the
// bias banks, sweeps all variants over the noise grids and writes CSV/SVG
// results under one output directory.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "checkpoint.hpp"
#include "controller.hpp"
#include "dataset.hpp"
#include "eval.hpp"
#include "training.hpp"

namespace biasnet {

namespace ids {
inline constexpr const char* zero = "zero";
inline constexpr const char* max = "max";
inline constexpr const char* mixed = "mixed";
inline constexpr const char* per_noise = "per-noise";
inline constexpr const char* zero_bias1 = "zero+bias1";
inline constexpr const char* zero_bias12 = "zero+bias12";
inline constexpr const char* max_bias1 = "max+bias1";
inline constexpr const char* controller = "controller";
inline constexpr const char* da_zero = "da-zero";
inline constexpr const char* da_max = "da-max";
inline constexpr const char* da_mixed = "da-mixed";
inline constexpr const char* bg_extreme = "bg-extreme";
inline constexpr const char* bg_extreme_bias = "bg-extreme+bias";
inline constexpr const char* bg_extreme_rev = "bg-extreme+bias+rev";
inline constexpr const char* bg_camo = "bg-camo";
inline constexpr const char* bg_camo_bias = "bg-camo+bias";
inline constexpr const char* bg_camo_rev = "bg-camo+bias+rev";
} // namespace ids

struct PipelineConfig {
    std::uint64_t seed = 1;
    std::size_t n_train = 10000, n_val = 2000, n_test = 2000;
    double awgn_max = 1.0;
    double grid_step = 0.1;
    double bg_step = 0.1;
    double body_level = 0.5;
    double extreme_bg_level = 0.0;
    double camo_bg_level = 0.5;
    BackgroundRule bg_rule = BackgroundRule::edge;
    double mixed_min = 0.0, mixed_max = 1.0;
    TrainConfig full, finetune, bias, da;
    bool verbose = false;

    static PipelineConfig desk(std::uint64_t seed)
    {
        PipelineConfig c;
        c.seed = seed;
        c.full = TrainConfig::desk();
        c.full.max_epochs = 25;
        c.full.patience = 4;
        c.finetune = TrainConfig::desk();
        c.finetune.max_epochs = 5;
        c.finetune.patience = 2;
        c.bias = TrainConfig::desk();
        c.bias.max_epochs = 4;
        c.bias.patience = 2;
        c.da = TrainConfig::desk();
        c.da.max_epochs = 15;
        c.da.patience = 3;
        return c;
    }

    /// Full-scale settings: batch 1000, 1000 epochs, patience 20, grid step 0.04.
    static PipelineConfig full_scale(std::uint64_t seed)
    {
        PipelineConfig c;
        c.seed = seed;
        c.n_train = 50000;
        c.n_val = 10000;
        c.n_test = 10000;
        c.grid_step = 0.04;
        c.bg_step = 0.1;
        c.full = c.finetune = c.bias = c.da = TrainConfig::full_scale();
        return c;
    }

    /// Shrinks the splits when fewer images are available than requested:
    /// test keeps its size, validation is capped at half of it, train takes the rest.
    void fit_to_pool(std::size_t pool)
    {
        if (n_train + n_val + n_test <= pool) return;
        if (pool < 100) throw ValueError("image pool of " + std::to_string(pool) + " is too small");
        n_test = std::min(n_test, pool / 5);
        n_val = std::min(n_val, n_test / 2);
        n_train = std::min(n_train, pool - n_test - n_val);
    }

    nlohmann::ordered_json snapshot() const
    {
        auto tc = [](const TrainConfig& t) {
            return nlohmann::ordered_json{{"batch_size", t.batch_size},
                                          {"learning_rate", t.learning_rate},
                                          {"max_epochs", t.max_epochs},
                                          {"patience", t.patience}};
        };
        return {{"seed", seed},
                {"n_train", n_train},
                {"n_val", n_val},
                {"n_test", n_test},
                {"awgn_max", awgn_max},
                {"grid_step", grid_step},
                {"bg_step", bg_step},
                {"body_level", body_level},
                {"extreme_bg_level", extreme_bg_level},
                {"camo_bg_level", camo_bg_level},
                {"background_rule", to_string(bg_rule)},
                {"mixed_range", {mixed_min, mixed_max}},
                {"full", tc(full)},
                {"finetune", tc(finetune)},
                {"bias", tc(bias)},
                {"da", tc(da)},
                {"rng", std::string(Rng::kAlgorithm)}};
    }
};

enum class SplitId : std::uint64_t { train = 0, validation = 1, test = 2 };

/// Seed of the noise baked into one (split, family, level) dataset.
inline std::uint64_t noise_seed(std::uint64_t root, SplitId split, NoiseKind kind, double level)
{
    const auto tag = 100 + 10 * static_cast<std::uint64_t>(split) + static_cast<std::uint64_t>(kind);
    return derive_seed(derive_seed(root, tag), static_cast<std::uint64_t>(std::llround(level * 1e6)));
}

/// Paths of every artifact a pipeline run writes.
struct RunLayout {
    std::filesystem::path root;

    std::filesystem::path model(const std::string& id) const { return root / "models" / (id + ".ckpt"); }
    std::filesystem::path da(const std::string& id) const { return root / "models" / (id + ".da"); }
    std::filesystem::path bank(const std::string& id) const { return root / "banks" / (id + ".bank"); }
    std::filesystem::path log(const std::string& id) const { return root / "logs" / (id + ".csv"); }
    std::filesystem::path results() const { return root / "results.csv"; }
    std::filesystem::path background() const { return root / "background.csv"; }
    std::filesystem::path crossovers() const { return root / "crossovers.csv"; }
    std::filesystem::path freeze() const { return root / "freeze.csv"; }
    std::filesystem::path curves_svg() const { return root / "curves.svg"; }
    std::filesystem::path background_svg() const { return root / "background.svg"; }
    std::filesystem::path bundle() const { return root / "bundle.json"; }
    std::filesystem::path config() const { return root / "config.json"; }
    /// Wall-clock seconds per full training run; not reproducible, hence not CSV.
    std::filesystem::path timings() const { return root / "timings.txt"; }
};

inline std::string level_tag(double level)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3f", level);
    return buf;
}

template <typename T = float>
class Pipeline {
public:
    Pipeline(PipelineConfig cfg, const ImageSet& pool, std::filesystem::path out_dir)
        : cfg_(std::move(cfg)), layout_{std::move(out_dir)}
    {
        cfg_.fit_to_pool(pool.size());
        splits_ = split_three(pool, cfg_.n_train, cfg_.n_val, cfg_.n_test, derive_seed(cfg_.seed, 1));
        grid_ = noise_grid(0.0, cfg_.awgn_max, cfg_.grid_step);
        bg_grid_ = noise_grid(0.0, 1.0, cfg_.bg_step);
    }

    const PipelineConfig& config() const { return cfg_; }
    const RunLayout& layout() const { return layout_; }
    const std::vector<double>& grid() const { return grid_; }
    const std::vector<double>& bg_grid() const { return bg_grid_; }

    void run()
    {
        std::filesystem::create_directories(layout_.root);
        write_text_file(layout_.config(), cfg_.snapshot().dump(2) + "\n");
        train_awgn_networks();
        build_awgn_banks();
        train_autoencoders();
        write_bundle();
        awgn_sweep();
        background_experiment();
        write_text_file(layout_.freeze(), freeze_csv_);
        write_text_file(layout_.timings(), timings_);
        note("done");
    }

    // Individual stages, public so the CLI can drive them separately.

    ImageSet awgn_set(SplitId split, double sigma) const
    {
        return corrupt_awgn(base(split), sigma, noise_seed(cfg_.seed, split, NoiseKind::awgn, sigma));
    }
    ImageSet mixed_set(SplitId split) const
    {
        return build_mixed(base(split), cfg_.mixed_min, cfg_.mixed_max,
                           noise_seed(cfg_.seed, split, NoiseKind::mixed_awgn, 0.0));
    }
    ImageSet background_set(SplitId split, double level) const
    {
        return corrupt_background(base(split), level, noise_seed(cfg_.seed, split, NoiseKind::background, level),
                                  cfg_.bg_rule);
    }
    const ImageSet& base(SplitId split) const
    {
        return split == SplitId::train ? splits_.train : split == SplitId::validation ? splits_.validation : splits_.test;
    }

private:
    using Params = LeNetParams<T>;

    void note(const std::string& msg) const
    {
        if (!cfg_.verbose) return;
        const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
        std::fprintf(stderr, "[pipeline %7.1fs] %s\n", s, msg.c_str());
    }

    TrainConfig with_seed(TrainConfig c, std::uint64_t tag) const
    {
        c.seed = derive_seed(cfg_.seed, tag);
        c.verbose = cfg_.verbose;
        return c;
    }

    Params train_and_save(const std::string& id, const ImageSet& train, const ImageSet& val, std::uint64_t tag)
    {
        note("training " + id + " on " + train.provenance.noise.to_string());
        const auto t0 = std::chrono::steady_clock::now();
        auto r = train_full<T>(train, val, with_seed(cfg_.full, tag));
        char buf[96];
        std::snprintf(buf, sizeof buf, "%s %.1f\n", id.c_str(),
                      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
        timings_ += buf;
        r.params.meta["network_id"] = id;
        save_checkpoint(r.params, layout_.model(id));
        r.log.write_csv(layout_.log(id));
        return std::move(r.params);
    }

    void train_awgn_networks()
    {
        const double top = grid_.back();
        zero_ = train_and_save(ids::zero, awgn_set(SplitId::train, 0.0), awgn_set(SplitId::validation, 0.0), 10);
        max_ = train_and_save(ids::max, awgn_set(SplitId::train, top), awgn_set(SplitId::validation, top), 11);
        mixed_ = train_and_save(ids::mixed, mixed_set(SplitId::train), mixed_set(SplitId::validation), 12);
        per_noise_.emplace(grid_.front(), zero_);
        per_noise_.emplace(top, max_);
        for (std::size_t i = 1; i + 1 < grid_.size(); ++i) {
            const double level = grid_[i];
            const std::string id = std::string(ids::per_noise) + "-" + level_tag(level);
            note("fine-tuning " + id);
            auto r = finetune_full(zero_, awgn_set(SplitId::train, level), awgn_set(SplitId::validation, level),
                                   with_seed(cfg_.finetune, 100 + i));
            r.params.meta["network_id"] = id;
            save_checkpoint(r.params, layout_.model(id));
            r.log.write_csv(layout_.log(id));
            per_noise_.emplace(level, std::move(r.params));
        }
    }

    BiasBank<T> bank_over(const std::string& id, const Params& base, const std::vector<double>& levels,
                          LayerSet layers, const std::string& kind,
                          const std::function<LevelData(double)>& data, std::uint64_t tag)
    {
        note("bias bank " + id + " (" + layers.to_string() + ", " + std::to_string(levels.size()) + " levels)");
        auto b = build_bias_bank(base, levels, data, with_seed(cfg_.bias, tag), layers, kind);
        b.bank.meta["bank_id"] = id;
        for (const auto& [level, log] : b.logs) log.write_csv(layout_.log(id + "-" + level_tag(level)));
        const auto expect = hex32(params_checksum(base, layers.tensor_names()));
        char buf[160];
        for (const auto& [level, crc] : b.frozen_checksums) {
            std::snprintf(buf, sizeof buf, "%s,%.6f,%s,%s\n", id.c_str(), level, expect.c_str(), hex32(crc).c_str());
            freeze_csv_ += buf;
        }
        b.bank.save(layout_.bank(id));
        return std::move(b.bank);
    }

    void build_awgn_banks()
    {
        auto data = [this](double level) {
            return LevelData{awgn_set(SplitId::train, level), awgn_set(SplitId::validation, level)};
        };
        bank_z1_ = bank_over(ids::zero_bias1, zero_, grid_, {true, false}, "awgn", data, 20);
        bank_z12_ = bank_over(ids::zero_bias12, zero_, grid_, {true, true}, "awgn", data, 21);
        bank_m1_ = bank_over(ids::max_bias1, max_, grid_, {true, false}, "awgn", data, 22);
    }

    void train_autoencoders()
    {
        auto one = [&](const std::string& id, const ImageSet& in, const ImageSet& val_in, std::uint64_t tag) {
            note("training " + id);
            auto r = train_da<T>(in, splits_.train, val_in, splits_.validation, with_seed(cfg_.da, tag));
            r.params.meta["network_id"] = id;
            save_da(r.params, layout_.da(id));
            r.log.write_csv(layout_.log(id));
            return std::move(r.params);
        };
        const double top = grid_.back();
        da_zero_ = one(ids::da_zero, awgn_set(SplitId::train, 0.0), awgn_set(SplitId::validation, 0.0), 30);
        da_max_ = one(ids::da_max, awgn_set(SplitId::train, top), awgn_set(SplitId::validation, top), 31);
        da_mixed_ = one(ids::da_mixed, mixed_set(SplitId::train), mixed_set(SplitId::validation), 32);
    }

    /// Switch level = crossover of the two bias-adjusted curves on validation data.
    void write_bundle()
    {
        std::map<double, ImageSet> val;
        for (double l : grid_) val.emplace(l, awgn_set(SplitId::validation, l));
        auto adjusted = [](const Params& p, const BiasBank<T>& bank) {
            return [&p, &bank](const ImageSet& set, double level) {
                return predict_set(apply_biases(p, bank, select_biases(bank, level, Interpolation::nearest).biases),
                                   set);
            };
        };
        const auto r = sweep({{ids::zero_bias1, adjusted(zero_, bank_z1_)}, {ids::max_bias1, adjusted(max_, bank_m1_)}},
                             grid_, val);
        const auto x = find_crossover(curve_of(r, ids::zero_bias1), curve_of(r, ids::max_bias1));
        switch_level_ = x ? *x : 0.5 * (grid_.front() + grid_.back());
        note("controller switch level " + std::to_string(switch_level_));
        BundleSpec b{layout_.model(ids::zero), layout_.model(ids::max), layout_.bank(ids::zero_bias1),
                     layout_.bank(ids::max_bias1), switch_level_, cfg_.body_level, Interpolation::nearest};
        save_bundle(b, layout_.bundle());
    }

    void awgn_sweep()
    {
        note("sweeping AWGN variants");
        std::map<double, ImageSet> tests;
        for (double l : grid_) tests.emplace(l, awgn_set(SplitId::test, l));

        ControllerState<T> state{zero_, max_, bank_z1_, bank_m1_, switch_level_, cfg_.body_level,
                                 Interpolation::nearest};
        state.validate();
        auto adjusted = [](const Params& p, const BiasBank<T>& bank) -> InferenceFn {
            return [&p, &bank](const ImageSet& set, double level) {
                return predict_set(apply_biases(p, bank, select_biases(bank, level, Interpolation::nearest).biases),
                                   set);
            };
        };
        auto with_da = [this](const DAParams<T>& da) -> InferenceFn {
            return [this, &da](const ImageSet& set, double) { return predict_set(zero_, denoise_set(da, set)); };
        };
        std::vector<Variant> variants{
            {ids::zero, plain_inference(zero_)},
            {ids::max, plain_inference(max_)},
            {ids::mixed, plain_inference(mixed_)},
            {ids::per_noise, [this](const ImageSet& set, double level) { return predict_set(per_noise_.at(level), set); }},
            {ids::zero_bias1, adjusted(zero_, bank_z1_)},
            {ids::zero_bias12, adjusted(zero_, bank_z12_)},
            {ids::max_bias1, adjusted(max_, bank_m1_)},
            {ids::controller,
             [&state](const ImageSet& set, double level) {
                 return infer_batch(state, set.all<T>(), NoiseMeasurement::awgn(level));
             }},
            {ids::da_zero, with_da(da_zero_)},
            {ids::da_max, with_da(da_max_)},
            {ids::da_mixed, with_da(da_mixed_)},
        };
        auto result = sweep(variants, grid_, tests);
        result.config["grid"] = std::to_string(grid_.size());
        emit_csv(result, layout_.results());

        std::vector<Curve> curves;
        for (const auto& id : result.network_ids()) curves.push_back(curve_of(result, id));
        PlotOptions o;
        o.title = "AWGN standard deviation vs detection rate";
        o.x_label = "AWGN standard deviation";
        o.markers = {0.12, 0.72};
        o.x_max = grid_.back();
        emit_plot(curves, layout_.curves_svg(), o);

        std::string x = "pair,before,after\n";
        auto cross = [&](const char* a, const char* b) {
            const auto v = find_crossover(curve_of(result, a), curve_of(result, b));
            if (!v) return std::string("none");
            char buf[32];
            std::snprintf(buf, sizeof buf, "%.6f", *v);
            return std::string(buf);
        };
        x += std::string("zero_vs_mixed,") + cross(ids::zero, ids::mixed) + "," + cross(ids::zero_bias1, ids::mixed) + "\n";
        x += std::string("max_vs_mixed,") + cross(ids::max, ids::mixed) + "," + cross(ids::max_bias1, ids::mixed) + "\n";
        write_text_file(layout_.crossovers(), x);
    }

    void background_experiment()
    {
        const double body = cfg_.body_level;
        struct Net {
            const char* plain;
            const char* bias;
            const char* rev;
            double level;
            std::uint64_t tag;
        };
        const Net nets[] = {{ids::bg_extreme, ids::bg_extreme_bias, ids::bg_extreme_rev, cfg_.extreme_bg_level, 40},
                            {ids::bg_camo, ids::bg_camo_bias, ids::bg_camo_rev, cfg_.camo_bg_level, 50}};

        std::map<double, ImageSet> tests;
        for (double l : bg_grid_) tests.emplace(l, background_set(SplitId::test, l));
        auto plain_data = [this](double level) {
            return LevelData{background_set(SplitId::train, level), background_set(SplitId::validation, level)};
        };
        auto complemented_data = [this](double level) {
            return LevelData{complement(background_set(SplitId::train, level)),
                             complement(background_set(SplitId::validation, level))};
        };

        SweepResult all;
        for (const auto& n : nets) {
            const auto net = train_and_save(n.plain, background_set(SplitId::train, n.level),
                                            background_set(SplitId::validation, n.level), n.tag);
            const auto bank = bank_over(n.bias, net, bg_grid_, {true, false}, "background", plain_data, n.tag + 1);
            // Reversal-aware bank: entries on the reversed side see complemented inputs.
            ControllerState<T> state{net, net, bank, bank, body, body, Interpolation::nearest, n.level};
            BiasBank<T> rev = bank;
            std::vector<double> reversed;
            for (double l : bg_grid_)
                if (decide_rule_reversal(state, NoiseMeasurement::background(l))) reversed.push_back(l);
            if (!reversed.empty()) {
                const auto upper = bank_over(std::string(n.rev) + "-far", net, reversed, {true, false}, "background",
                                             complemented_data, n.tag + 2);
                for (const auto& [level, b] : upper.entries) rev.entries[level] = b;
            }
            rev.meta["bank_id"] = n.rev;
            rev.meta["trained_background"] = level_tag(n.level);
            rev.save(layout_.bank(n.rev));
            state.zero_bank = state.max_bank = rev;
            state.validate();
            std::vector<Variant> variants{
                {n.plain, plain_inference(net)},
                {n.bias,
                 [&](const ImageSet& set, double level) {
                     return predict_set(
                         apply_biases(net, bank, select_biases(bank, level, Interpolation::nearest).biases), set);
                 }},
                {n.rev,
                 [&](const ImageSet& set, double level) {
                     return infer_batch(state, set.all<T>(), NoiseMeasurement::background(level));
                 }},
            };
            note("sweeping background variants of " + std::string(n.plain));
            all.append(sweep(variants, bg_grid_, tests));
        }
        emit_csv(all, layout_.background());
        std::vector<Curve> curves;
        for (const auto& id : all.network_ids()) curves.push_back(curve_of(all, id));
        PlotOptions o;
        o.title = "Background level vs detection rate";
        o.x_label = "background level";
        o.markers = {body};
        emit_plot(curves, layout_.background_svg(), o);
    }

    PipelineConfig cfg_;
    RunLayout layout_;
    Splits splits_;
    std::vector<double> grid_, bg_grid_;
    Params zero_, max_, mixed_;
    std::map<double, Params> per_noise_;
    BiasBank<T> bank_z1_, bank_z12_, bank_m1_;
    DAParams<T> da_zero_, da_max_, da_mixed_;
    double switch_level_ = 0.5;
    std::string freeze_csv_ = "bank_id,level,base_frozen_checksum,entry_frozen_checksum\n";
    std::string timings_;
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

} // namespace biasnet
