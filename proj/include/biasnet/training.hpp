#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "autoencoder.hpp"
#include "checkpoint.hpp"
#include "container.hpp"
#include "dataset.hpp"
#include "lenet.hpp"

namespace biasnet {

struct TrainConfig {
    std::size_t batch_size = 1000;
    double learning_rate = 0.05;
    std::size_t max_epochs = 1000;
    std::size_t patience = 20;
    std::uint64_t seed = 0;
    bool desk_scale = false;
    bool verbose = false;

    static TrainConfig full_scale() { return {}; }

    static TrainConfig desk()
    {
        TrainConfig c;
        c.batch_size = 100;
        c.max_epochs = 100;
        c.desk_scale = true;
        return c;
    }

    void validate() const
    {
        if (batch_size < 1) throw ValueError("batch_size must be >= 1");
        if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ValueError("learning_rate must be > 0");
        if (max_epochs < 1) throw ValueError("max_epochs must be >= 1");
        if (patience > max_epochs) throw ValueError("patience must not exceed max_epochs");
    }

    std::string describe() const
    {
        char buf[160];
        std::snprintf(buf, sizeof buf, "batch=%zu lr=%.6g max_epochs=%zu patience=%zu seed=%llu", batch_size,
                      learning_rate, max_epochs, patience, static_cast<unsigned long long>(seed));
        return buf;
    }
};

// ---------------------------------------------------------------------------
// Learning-curve log
// ---------------------------------------------------------------------------

struct LogRow {
    std::size_t epoch;
    std::string split;
    std::string metric;
    double value;
};

struct TrainLog {
    std::vector<LogRow> rows;

    void add(std::size_t epoch, std::string split, std::string metric, double value)
    {
        rows.push_back({epoch, std::move(split), std::move(metric), value});
    }

    std::string csv() const
    {
        std::string out = "epoch,split,metric,value\n";
        char buf[128];
        for (const auto& r : rows) {
            std::snprintf(buf, sizeof buf, "%zu,%s,%s,%.9g\n", r.epoch, r.split.c_str(), r.metric.c_str(), r.value);
            out += buf;
        }
        return out;
    }

    void write_csv(const std::filesystem::path& path) const
    {
        if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
        std::ofstream out(path, std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write training log '" + path.string() + "'");
        out << csv();
    }
};

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

template <typename T>
std::vector<Label> predict_set(const LeNetParams<T>& params, const ImageSet& set, std::size_t chunk = 500)
{
    std::vector<Label> out;
    out.reserve(set.size());
    std::vector<std::size_t> rows;
    for (std::size_t s = 0; s < set.size(); s += chunk) {
        rows.clear();
        for (std::size_t i = s; i < std::min(set.size(), s + chunk); ++i) rows.push_back(i);
        auto labels = argmax_rows(lenet_logits(params, set.batch<T>(rows)));
        out.insert(out.end(), labels.begin(), labels.end());
    }
    return out;
}

/// Fraction of misclassified images.
template <typename T>
double error_rate(const LeNetParams<T>& params, const ImageSet& set)
{
    if (set.size() == 0) throw ValueError("error_rate on an empty set");
    const auto pred = predict_set(params, set);
    std::size_t wrong = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) wrong += pred[i] != set.labels[i];
    return static_cast<double>(wrong) / static_cast<double>(set.size());
}

/// Which convolutional bias vectors a bank tunes.
struct LayerSet {
    bool conv1 = true;
    bool conv2 = false;

    bool empty() const { return !conv1 && !conv2; }
    std::string to_string() const
    {
        if (conv1 && conv2) return "conv1,conv2";
        if (conv1) return "conv1";
        if (conv2) return "conv2";
        return "";
    }
    static LayerSet parse(const std::string& s)
    {
        LayerSet l{false, false};
        std::stringstream ss(s);
        for (std::string tok; std::getline(ss, tok, ',');) {
            if (tok == "conv1") l.conv1 = true;
            else if (tok == "conv2") l.conv2 = true;
            else if (tok == "both") l.conv1 = l.conv2 = true;
            else throw ValueError("unknown layer '" + tok + "' (expected conv1, conv2)");
        }
        if (l.empty()) throw ValueError("layer set must name conv1 and/or conv2");
        return l;
    }
    std::set<std::string> tensor_names() const
    {
        std::set<std::string> n;
        if (conv1) n.insert("conv1.bias");
        if (conv2) n.insert("conv2.bias");
        return n;
    }
    friend bool operator==(const LayerSet&, const LayerSet&) = default;
};

template <typename T>
struct BiasVectors {
    Tensor<T> conv1; // empty when not tuned
    Tensor<T> conv2;

    friend bool operator==(const BiasVectors&, const BiasVectors&) = default;
};

template <typename T>
BiasVectors<T> extract_biases(const LeNetParams<T>& p, LayerSet layers)
{
    BiasVectors<T> b;
    if (layers.conv1) b.conv1 = p.conv1_b;
    if (layers.conv2) b.conv2 = p.conv2_b;
    return b;
}

/// Copy of `p` with the non-empty vectors of `b` substituted. No anchoring check.
template <typename T>
LeNetParams<T> substitute_biases(LeNetParams<T> p, const BiasVectors<T>& b)
{
    if (!b.conv1.empty()) {
        require_shape(b.conv1, p.conv1_b.shape(), "conv1 bias");
        p.conv1_b = b.conv1;
    }
    if (!b.conv2.empty()) {
        require_shape(b.conv2, p.conv2_b.shape(), "conv2 bias");
        p.conv2_b = b.conv2;
    }
    return p;
}

namespace detail {

inline void check_training_data(const ImageSet& data, const ImageSet& val)
{
    if (data.size() == 0) throw TrainingError("training set is empty");
    if (val.size() == 0) throw TrainingError("validation set is empty");
    data.validate();
    val.validate();
}

/// Minibatch SGD on `params` for the tensors selected by `mask`, early-stopped
/// on validation error. Returns the best-validation snapshot (epoch 0 = start).
template <typename T>
struct SgdOutcome {
    LeNetParams<T> best;
    std::size_t best_epoch = 0;
    double best_val_error = 1.0;
    std::size_t epochs_run = 0;
};

template <typename T>
SgdOutcome<T> sgd_train(LeNetParams<T> params, const ImageSet& data, const ImageSet& val, const TrainConfig& cfg,
                        ParamMask mask, TrainLog& log, const std::string& tag)
{
    cfg.validate();
    check_training_data(data, val);
    Rng order(derive_seed(cfg.seed, 0x0bd3u), 0);
    const T lr = static_cast<T>(cfg.learning_rate);

    SgdOutcome<T> out;
    out.best_val_error = error_rate(params, val);
    out.best = params;
    log.add(0, "validation", "error", out.best_val_error);

    std::vector<std::size_t> perm(data.size());
    std::vector<Label> labels;
    std::size_t since_best = 0;
    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
        order.shuffle(perm);
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t s = 0; s < perm.size(); s += cfg.batch_size) {
            const std::size_t n = std::min(cfg.batch_size, perm.size() - s);
            std::span<const std::size_t> rows(perm.data() + s, n);
            labels.clear();
            for (auto r : rows) labels.push_back(data.labels[r]);
            LeNetGraph<T> graph(params);
            graph.forward(data.batch<T>(rows));
            const double loss = graph.loss(labels);
            if (!std::isfinite(loss))
                throw TrainingError(tag + ": non-finite loss at epoch " + std::to_string(epoch) + " batch " +
                                    std::to_string(batches) + " (lower the learning rate?)");
            auto grads = graph.backward(labels, mask);
            auto dst = params.named();
            auto src = grads.named();
            for (std::size_t k = 0; k < dst.size(); ++k)
                if (!src[k].second->empty()) sgd_step(*dst[k].second, *src[k].second, lr);
            loss_sum += loss;
            ++batches;
        }
        const double train_loss = loss_sum / static_cast<double>(batches);
        const double val_err = error_rate(params, val);
        log.add(epoch, "train", "loss", train_loss);
        log.add(epoch, "validation", "error", val_err);
        out.epochs_run = epoch;
        if (cfg.verbose)
            std::fprintf(stderr, "[%s] epoch %zu loss %.5f val_err %.4f\n", tag.c_str(), epoch, train_loss, val_err);
        if (val_err < out.best_val_error) {
            out.best_val_error = val_err;
            out.best = params;
            out.best_epoch = epoch;
            since_best = 0;
        } else if (++since_best >= cfg.patience) {
            break;
        }
    }
    return out;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Full training and bias-only retraining
// ---------------------------------------------------------------------------

template <typename T>
struct TrainResult {
    LeNetParams<T> params;
    TrainLog log;
    std::size_t best_epoch = 0;
    double best_val_error = 1.0;
    std::size_t epochs_run = 0;
};

template <typename T = float>
TrainResult<T> train_full(const ImageSet& data, const ImageSet& val, const TrainConfig& cfg,
                          const LeNetArch& arch = LeNetArch::standard())
{
    detail::check_training_data(data, val);
    if (data.images.dim(2) != arch.input || data.images.dim(3) != arch.input)
        throw DimensionError("train_full: images are " + shape_string(data.images.shape()) + " but the model expects " +
                             std::to_string(arch.input) + "x" + std::to_string(arch.input));
    Rng init(derive_seed(cfg.seed, 0x1217u), 0);
    TrainResult<T> r;
    auto out = detail::sgd_train(init_lenet<T>(arch, init), data, val, cfg, ParamMask::all(), r.log,
                                 "train " + data.provenance.noise.to_string());
    r.params = std::move(out.best);
    r.best_epoch = out.best_epoch;
    r.best_val_error = out.best_val_error;
    r.epochs_run = out.epochs_run;
    r.params.meta["train_noise"] = data.provenance.noise.to_string();
    r.params.meta["train_seed"] = std::to_string(cfg.seed);
    r.params.meta["train_config"] = cfg.describe();
    r.params.meta["best_epoch"] = std::to_string(r.best_epoch);
    r.params.meta["epochs_run"] = std::to_string(r.epochs_run);
    return r;
}

/// Trains every parameter starting from `start` instead of a fresh initialization.
template <typename T>
TrainResult<T> finetune_full(const LeNetParams<T>& start, const ImageSet& data, const ImageSet& val,
                             const TrainConfig& cfg)
{
    TrainResult<T> r;
    auto out = detail::sgd_train(start, data, val, cfg, ParamMask::all(), r.log,
                                 "finetune " + data.provenance.noise.to_string());
    r.params = std::move(out.best);
    r.best_epoch = out.best_epoch;
    r.best_val_error = out.best_val_error;
    r.epochs_run = out.epochs_run;
    r.params.meta["train_noise"] = data.provenance.noise.to_string();
    r.params.meta["train_config"] = cfg.describe();
    r.params.meta["warm_start"] = params_id(start);
    return r;
}

template <typename T>
struct BiasRetrain {
    BiasVectors<T> biases;
    TrainLog log;
    std::size_t best_epoch = 0;
    double best_val_error = 1.0;
    std::uint32_t frozen_checksum = 0; // every tensor except the tuned biases, after training
};

/// SGD on the selected conv bias vectors only, starting from the base's own biases.
template <typename T>
BiasRetrain<T> retrain_biases(const LeNetParams<T>& base, const ImageSet& data, const ImageSet& val,
                              const TrainConfig& cfg, LayerSet layers)
{
    if (layers.empty()) throw ValueError("retrain_biases needs at least one layer");
    BiasRetrain<T> r;
    auto out = detail::sgd_train(base, data, val, cfg, ParamMask::biases(layers.conv1, layers.conv2), r.log,
                                 "biases " + data.provenance.noise.to_string());
    r.biases = extract_biases(out.best, layers);
    r.frozen_checksum = params_checksum(out.best, layers.tensor_names());
    r.best_epoch = out.best_epoch;
    r.best_val_error = out.best_val_error;
    return r;
}

// ---------------------------------------------------------------------------
// Bias banks
// ---------------------------------------------------------------------------

template <typename T>
struct BiasBank {
    std::string anchor_id;
    LayerSet layers;
    std::string kind = "awgn"; // or "background"
    std::map<double, BiasVectors<T>> entries;
    Meta meta;

    bool empty() const { return entries.empty(); }
    std::vector<double> levels() const
    {
        std::vector<double> k;
        for (const auto& [level, b] : entries) k.push_back(level);
        return k;
    }

    void check_entry(const BiasVectors<T>& b, std::size_t conv1_len, std::size_t conv2_len) const
    {
        if (layers.conv1 != !b.conv1.empty() || layers.conv2 != !b.conv2.empty())
            throw ValueError("bank entry does not match tuned layers " + layers.to_string());
        if (layers.conv1 && b.conv1.size() != conv1_len) throw DimensionError("bank conv1 bias length mismatch");
        if (layers.conv2 && b.conv2.size() != conv2_len) throw DimensionError("bank conv2 bias length mismatch");
    }

    void add(double level, BiasVectors<T> b)
    {
        if (!std::isfinite(level) || level < 0.0) throw ValueError("bank levels must be finite and >= 0");
        if (!entries.empty() && level <= entries.rbegin()->first)
            throw ValueError("bank levels must be added in strictly increasing order");
        const std::size_t c1 = entries.empty() ? b.conv1.size() : entries.begin()->second.conv1.size();
        const std::size_t c2 = entries.empty() ? b.conv2.size() : entries.begin()->second.conv2.size();
        check_entry(b, c1, c2);
        entries.emplace(level, std::move(b));
    }

    bool anchored_to(const LeNetParams<T>& p) const { return params_id(p) == anchor_id; }

    static std::string level_key(double level)
    {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.6f", level);
        return buf;
    }

    void save(const std::filesystem::path& path) const
    {
        Container c("bias-bank");
        c.meta()["anchor"] = anchor_id;
        c.meta()["layers"] = layers.to_string();
        c.meta()["noise_kind"] = kind;
        c.meta()["entries"] = std::to_string(entries.size());
        detail::put_meta(c, meta);
        std::size_t i = 0;
        for (const auto& [level, b] : entries) {
            // exact key kept as a separate f64 so round trips do not depend on the text form
            c.add("level/" + std::to_string(i++), Tensor<double>({1}, std::vector<double>{level}));
            if (layers.conv1) c.add("bias/conv1/" + level_key(level), b.conv1);
            if (layers.conv2) c.add("bias/conv2/" + level_key(level), b.conv2);
        }
        c.save(path);
    }

    static BiasBank load(const std::filesystem::path& path)
    {
        const auto c = Container::load(path);
        if (c.kind() != "bias-bank") throw FormatError(path.string() + ": not a bias-bank container");
        BiasBank bank;
        bank.anchor_id = c.meta_at("anchor");
        bank.layers = LayerSet::parse(c.meta_at("layers"));
        bank.kind = c.meta_at("noise_kind");
        bank.meta = detail::take_meta(c);
        const std::size_t n = std::stoull(c.meta_at("entries"));
        for (std::size_t i = 0; i < n; ++i) {
            const double level = c.get<double>("level/" + std::to_string(i))[0];
            BiasVectors<T> b;
            if (bank.layers.conv1) b.conv1 = c.get<T>("bias/conv1/" + level_key(level));
            if (bank.layers.conv2) b.conv2 = c.get<T>("bias/conv2/" + level_key(level));
            bank.add(level, std::move(b));
        }
        return bank;
    }
};

struct LevelData {
    ImageSet train;
    ImageSet validation;
};

template <typename T>
struct BankBuild {
    BiasBank<T> bank;
    std::map<double, TrainLog> logs;
    std::map<double, std::uint32_t> frozen_checksums;
};

/// One bias retraining per grid level; `data_for_level` supplies that level's splits.
template <typename T>
BankBuild<T> build_bias_bank(const LeNetParams<T>& base, const std::vector<double>& grid,
                             const std::function<LevelData(double)>& data_for_level, const TrainConfig& cfg,
                             LayerSet layers, const std::string& kind = "awgn")
{
    if (grid.empty()) throw ValueError("bias bank grid is empty");
    BankBuild<T> out;
    out.bank.anchor_id = params_id(base);
    out.bank.layers = layers;
    out.bank.kind = kind;
    out.bank.meta["init"] = "base-biases";
    out.bank.meta["config"] = cfg.describe();
    for (double level : grid) {
        const auto d = data_for_level(level);
        auto r = retrain_biases(base, d.train, d.validation, cfg, layers);
        out.bank.add(level, std::move(r.biases));
        out.logs.emplace(level, std::move(r.log));
        out.frozen_checksums.emplace(level, r.frozen_checksum);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Denoising autoencoder training
// ---------------------------------------------------------------------------

template <typename T>
struct DATrainResult {
    DAParams<T> params;
    TrainLog log;
    std::size_t best_epoch = 0;
    double best_val_loss = 0.0;
};

template <typename T>
double da_mean_loss(const DAParams<T>& p, const ImageSet& input, const ImageSet& target, std::size_t chunk = 500)
{
    double total = 0.0;
    std::vector<std::size_t> rows;
    for (std::size_t s = 0; s < input.size(); s += chunk) {
        rows.clear();
        for (std::size_t i = s; i < std::min(input.size(), s + chunk); ++i) rows.push_back(i);
        const auto z = da_forward(p, input.batch<T>(rows));
        total += da_cross_entropy(z.reshaped({rows.size(), p.visible()}),
                                  target.batch<T>(rows).reshaped({rows.size(), p.visible()})) *
                 static_cast<double>(rows.size());
    }
    return total / static_cast<double>(input.size());
}

/// SGD on reconstruction cross-entropy of clean targets from corrupted inputs,
/// early-stopped on held-out reconstruction loss.
template <typename T = float>
DATrainResult<T> train_da(const ImageSet& input, const ImageSet& target, const ImageSet& val_input,
                          const ImageSet& val_target, const TrainConfig& cfg, std::size_t hidden = 500)
{
    cfg.validate();
    detail::check_training_data(input, val_input);
    if (input.images.shape() != target.images.shape() || val_input.images.shape() != val_target.images.shape())
        throw DimensionError("train_da: corrupted and clean sets are not aligned");
    if (input.labels != target.labels) throw ValueError("train_da: corrupted and clean sets hold different images");
    const std::size_t V = input.pixels_per_image();
    Rng init(derive_seed(cfg.seed, 0xda01u), 0);
    Rng order(derive_seed(cfg.seed, 0xda02u), 0);
    const T lr = static_cast<T>(cfg.learning_rate);

    DATrainResult<T> r;
    auto params = init_da<T>(V, hidden, init);
    auto best = params;
    double best_loss = da_mean_loss(params, val_input, val_target);
    r.log.add(0, "validation", "cross_entropy", best_loss);
    std::vector<std::size_t> perm(input.size());
    std::size_t since_best = 0;
    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
        order.shuffle(perm);
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t s = 0; s < perm.size(); s += cfg.batch_size) {
            std::span<const std::size_t> rows(perm.data() + s, std::min(cfg.batch_size, perm.size() - s));
            auto step = da_loss_and_grads(params, input.batch<T>(rows), target.batch<T>(rows));
            if (!std::isfinite(step.loss))
                throw TrainingError("train_da: non-finite loss at epoch " + std::to_string(epoch));
            sgd_step(params.weights, step.grads.weights, lr);
            sgd_step(params.b_hidden, step.grads.b_hidden, lr);
            sgd_step(params.b_visible, step.grads.b_visible, lr);
            loss_sum += step.loss;
            ++batches;
        }
        const double val_loss = da_mean_loss(params, val_input, val_target);
        r.log.add(epoch, "train", "cross_entropy", loss_sum / static_cast<double>(batches));
        r.log.add(epoch, "validation", "cross_entropy", val_loss);
        if (cfg.verbose)
            std::fprintf(stderr, "[dA %s] epoch %zu val_ce %.4f\n", input.provenance.noise.to_string().c_str(), epoch,
                         val_loss);
        if (val_loss < best_loss) {
            best_loss = val_loss;
            best = params;
            r.best_epoch = epoch;
            since_best = 0;
        } else if (++since_best >= cfg.patience) {
            break;
        }
    }
    r.params = std::move(best);
    r.best_val_loss = best_loss;
    r.params.meta["train_noise"] = input.provenance.noise.to_string();
    r.params.meta["train_config"] = cfg.describe();
    return r;
}

/// Runs every image of `set` through the autoencoder (pixels stay in (0,1)).
template <typename T>
ImageSet denoise_set(const DAParams<T>& p, const ImageSet& set, std::size_t chunk = 500)
{
    ImageSet out = set;
    std::vector<std::size_t> rows;
    const std::size_t per = set.pixels_per_image();
    for (std::size_t s = 0; s < set.size(); s += chunk) {
        rows.clear();
        for (std::size_t i = s; i < std::min(set.size(), s + chunk); ++i) rows.push_back(i);
        const auto z = da_forward(p, set.batch<T>(rows));
        for (std::size_t i = 0; i < z.size(); ++i) out.images[s * per + i] = static_cast<float>(z[i]);
    }
    return out;
}

} // namespace biasnet
