#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "checkpoint.hpp"
#include "dataset.hpp"
#include "training.hpp"

namespace biasnet {

enum class MeasurementKind { awgn_sigma, background_level };

struct NoiseMeasurement {
    MeasurementKind kind = MeasurementKind::awgn_sigma;
    double level = 0.0;

    void validate() const
    {
        if (!std::isfinite(level) || level < 0.0) throw ValueError("noise measurement level must be >= 0");
        if (kind == MeasurementKind::background_level && level > 1.0)
            throw ValueError("background level must lie in [0,1]");
    }

    static NoiseMeasurement awgn(double sigma) { return {MeasurementKind::awgn_sigma, sigma}; }
    static NoiseMeasurement background(double level) { return {MeasurementKind::background_level, level}; }

    /// "awgn:<sigma>" or "background:<level>"
    static NoiseMeasurement parse(const std::string& text)
    {
        const auto spec = NoiseSpec::parse(text);
        NoiseMeasurement m;
        if (spec.kind == NoiseKind::awgn) m = awgn(spec.a);
        else if (spec.kind == NoiseKind::background) m = background(spec.a);
        else if (spec.kind == NoiseKind::clean) m = awgn(0.0);
        else throw ValueError("a measurement is awgn:<sigma> or background:<level>, got '" + text + "'");
        m.validate();
        return m;
    }

    const char* kind_name() const { return kind == MeasurementKind::awgn_sigma ? "awgn" : "background"; }
};

enum class ParamSet { zero, max };
enum class Interpolation { nearest, linear };

inline const char* to_string(ParamSet s) { return s == ParamSet::zero ? "zero" : "max"; }
inline const char* to_string(Interpolation i) { return i == Interpolation::nearest ? "nearest" : "linear"; }

inline Interpolation parse_interpolation(const std::string& s)
{
    if (s == "nearest") return Interpolation::nearest;
    if (s == "linear") return Interpolation::linear;
    throw ValueError("interpolation must be 'nearest' or 'linear', got '" + s + "'");
}

template <typename T>
struct ControllerState {
    LeNetParams<T> zero_params, max_params;
    BiasBank<T> zero_bank, max_bank;
    double switch_level = 0.5;
    double trained_body_level = 0.5;
    Interpolation interpolation = Interpolation::nearest;
    /// Background level the parameter sets were trained on.
    double trained_background_level = 0.0;

    void validate() const
    {
        if (!zero_bank.anchored_to(zero_params))
            throw AnchorError("zero bank anchors to " + zero_bank.anchor_id + " but zero parameters are " +
                              params_id(zero_params));
        if (!max_bank.anchored_to(max_params))
            throw AnchorError("max bank anchors to " + max_bank.anchor_id + " but max parameters are " +
                              params_id(max_params));
        if (zero_bank.empty() || max_bank.empty()) throw ValueError("controller banks must be nonempty");
        const double lo = std::min(zero_bank.entries.begin()->first, max_bank.entries.begin()->first);
        const double hi = std::max(zero_bank.entries.rbegin()->first, max_bank.entries.rbegin()->first);
        if (switch_level < lo || switch_level > hi)
            throw ValueError("switch_level must lie within the banks' grid range");
    }
};

/// zero iff level < switch_level; a tie selects max.
template <typename T>
ParamSet select_parameter_set(const ControllerState<T>& s, const NoiseMeasurement& m)
{
    return m.level < s.switch_level ? ParamSet::zero : ParamSet::max;
}

template <typename T>
struct BiasSelection {
    BiasVectors<T> biases;
    bool extrapolated = false;
};

namespace detail {

template <typename T>
Tensor<T> blend(const Tensor<T>& a, const Tensor<T>& b, double w)
{
    if (a.empty()) return a;
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i)
        out[i] = static_cast<T>((1.0 - w) * static_cast<double>(a[i]) + w * static_cast<double>(b[i]));
    return out;
}

} // namespace detail

/// nearest: entry with minimal |key - level| (ties to the lower key), clamped at the ends.
/// linear: convex combination of the bracketing entries; outside the grid it
/// extrapolates from the outermost pair and sets `extrapolated`.
template <typename T>
BiasSelection<T> select_biases(const BiasBank<T>& bank, double level, Interpolation mode)
{
    if (bank.empty()) throw ValueError("select_biases on an empty bank");
    const auto& e = bank.entries;
    BiasSelection<T> out;
    auto hit = e.find(level);
    if (hit != e.end()) {
        out.biases = hit->second;
        return out;
    }
    if (e.size() == 1) {
        out.biases = e.begin()->second;
        out.extrapolated = mode == Interpolation::linear;
        return out;
    }
    auto upper = e.upper_bound(level); // first key > level
    if (mode == Interpolation::nearest) {
        if (upper == e.begin()) out.biases = upper->second;
        else if (upper == e.end()) out.biases = std::prev(upper)->second;
        else {
            auto lower = std::prev(upper);
            out.biases = (upper->first - level) < (level - lower->first) ? upper->second : lower->second;
        }
        return out;
    }
    auto hi_it = upper == e.begin() ? std::next(e.begin()) : upper == e.end() ? std::prev(e.end()) : upper;
    auto lo_it = std::prev(hi_it);
    out.extrapolated = upper == e.begin() || upper == e.end();
    const double w = (level - lo_it->first) / (hi_it->first - lo_it->first);
    out.biases.conv1 = detail::blend(lo_it->second.conv1, hi_it->second.conv1, w);
    out.biases.conv2 = detail::blend(lo_it->second.conv2, hi_it->second.conv2, w);
    return out;
}

/// Copy of `params` with the bank's tuned bias vectors replaced by `biases`.
template <typename T>
LeNetParams<T> apply_biases(const LeNetParams<T>& params, const BiasBank<T>& bank, const BiasVectors<T>& biases)
{
    if (!bank.anchored_to(params))
        throw AnchorError("bias bank anchored to " + bank.anchor_id + " cannot be applied to parameters " +
                          params_id(params));
    bank.check_entry(biases, params.conv1_b.size(), params.conv2_b.size());
    return substitute_biases(params, biases);
}

/// Background measurements on the opposite side of the digit body from the
/// training background reverse the rule. A network trained with the background
/// at the body level has no side, so it never reverses.
template <typename T>
bool decide_rule_reversal(const ControllerState<T>& s, const NoiseMeasurement& m)
{
    if (m.kind != MeasurementKind::background_level) return false;
    const double body = s.trained_body_level, trained = s.trained_background_level;
    if (trained == body) return false;
    return trained < body ? m.level > body : m.level < body;
}

template <typename T>
Tensor<T> complement_input(Tensor<T> x)
{
    for (auto& v : x.storage()) v = T{1} - v;
    return x;
}

struct InferenceTrace {
    ParamSet chosen_set = ParamSet::zero;
    bool reversal = false;
    bool extrapolated = false;
};

/// Parameters the controller would run for measurement `m`.
template <typename T>
LeNetParams<T> configure(const ControllerState<T>& s, const NoiseMeasurement& m, InferenceTrace* trace = nullptr)
{
    m.validate();
    const ParamSet set = select_parameter_set(s, m);
    const auto& params = set == ParamSet::zero ? s.zero_params : s.max_params;
    const auto& bank = set == ParamSet::zero ? s.zero_bank : s.max_bank;
    const auto sel = select_biases(bank, m.level, s.interpolation);
    if (trace) *trace = {set, decide_rule_reversal(s, m), sel.extrapolated};
    return apply_biases(params, bank, sel.biases);
}

/// Labels for a batch [N,1,H,W] under one measurement.
template <typename T>
std::vector<Label> infer_batch(const ControllerState<T>& s, const Tensor<T>& batch, const NoiseMeasurement& m,
                               InferenceTrace* trace = nullptr)
{
    InferenceTrace t;
    const auto params = configure(s, m, &t);
    if (trace) *trace = t;
    return lenet_predict(params, t.reversal ? complement_input(batch) : batch);
}

template <typename T>
Label infer(const ControllerState<T>& s, const Tensor<T>& image, const NoiseMeasurement& m,
            InferenceTrace* trace = nullptr)
{
    const std::size_t side = s.zero_params.arch.input;
    if (image.size() != side * side)
        throw DimensionError("infer: expected one " + std::to_string(side) + "x" + std::to_string(side) +
                             " image, got " + shape_string(image.shape()));
    return infer_batch(s, image.reshaped({1, 1, side, side}), m, trace).front();
}

/// Robust AWGN sigma from one image: MAD of the residual against a 3x3 mean
/// filter over interior pixels, times 1.4826, divided by the residual's noise
/// gain sqrt(72/81). Clamped to [0,1].
template <typename T>
double estimate_noise_sigma(const Tensor<T>& image)
{
    if (image.rank() < 2) throw DimensionError("estimate_noise_sigma needs a 2-D image");
    const std::size_t H = image.dim(image.rank() - 2), W = image.dim(image.rank() - 1);
    if (image.size() != H * W) throw DimensionError("estimate_noise_sigma takes a single image");
    if (H < 3 || W < 3) return 0.0;
    std::vector<double> r;
    r.reserve((H - 2) * (W - 2));
    for (std::size_t i = 1; i + 1 < H; ++i)
        for (std::size_t j = 1; j + 1 < W; ++j) {
            double mean = 0.0;
            for (std::size_t a = i - 1; a <= i + 1; ++a)
                for (std::size_t b = j - 1; b <= j + 1; ++b) mean += image[a * W + b];
            r.push_back(image[i * W + j] - mean / 9.0);
        }
    auto median = [](std::vector<double> v) {
        const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
        std::nth_element(v.begin(), mid, v.end());
        double m = *mid;
        if (v.size() % 2 == 0) m = 0.5 * (m + *std::max_element(v.begin(), mid));
        return m;
    };
    const double med = median(r);
    for (auto& v : r) v = std::abs(v - med);
    const double sigma = 1.4826 * median(r) / std::sqrt(72.0 / 81.0);
    return std::clamp(sigma, 0.0, 1.0);
}

// ---------------------------------------------------------------------------
// Bundle file and inference log
// ---------------------------------------------------------------------------

struct BundleSpec {
    std::filesystem::path zero_params, max_params, zero_bank, max_bank;
    double switch_level = 0.5;
    double trained_body_level = 0.5;
    Interpolation interpolation = Interpolation::nearest;
    double trained_background_level = 0.0;
};

/// Writes the bundle manifest; referenced files are stored relative to its directory.
inline void save_bundle(const BundleSpec& b, const std::filesystem::path& path)
{
    const auto dir = std::filesystem::absolute(path).parent_path();
    auto rel = [&](const std::filesystem::path& p) {
        return std::filesystem::relative(std::filesystem::absolute(p), dir).generic_string();
    };
    nlohmann::ordered_json j;
    j["format"] = "biasnet-bundle";
    j["version"] = 1;
    j["zero_params"] = rel(b.zero_params);
    j["max_params"] = rel(b.max_params);
    j["zero_bank"] = rel(b.zero_bank);
    j["max_bank"] = rel(b.max_bank);
    j["switch_level"] = b.switch_level;
    j["trained_body_level"] = b.trained_body_level;
    j["interpolation"] = to_string(b.interpolation);
    j["trained_background_level"] = b.trained_background_level;
    std::filesystem::create_directories(dir);
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write bundle '" + path.string() + "'");
    out << j.dump(2) << '\n';
}

inline BundleSpec read_bundle(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open bundle '" + path.string() + "'");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    if (j.value("format", "") != "biasnet-bundle") throw BadMagicError(path.string() + ": not a controller bundle");
    if (j.value("version", 0) != 1) throw VersionError(path.string() + ": unsupported bundle version");
    const auto dir = std::filesystem::absolute(path).parent_path();
    BundleSpec b;
    try {
        b.zero_params = dir / j.at("zero_params").get<std::string>();
        b.max_params = dir / j.at("max_params").get<std::string>();
        b.zero_bank = dir / j.at("zero_bank").get<std::string>();
        b.max_bank = dir / j.at("max_bank").get<std::string>();
        b.switch_level = j.at("switch_level").get<double>();
        b.trained_body_level = j.value("trained_body_level", 0.5);
        b.interpolation = parse_interpolation(j.value("interpolation", "nearest"));
        b.trained_background_level = j.value("trained_background_level", 0.0);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    return b;
}

template <typename T = float>
ControllerState<T> load_controller(const std::filesystem::path& bundle_path)
{
    const auto b = read_bundle(bundle_path);
    ControllerState<T> s;
    s.zero_params = load_checkpoint<T>(b.zero_params);
    s.max_params = load_checkpoint<T>(b.max_params);
    s.zero_bank = BiasBank<T>::load(b.zero_bank);
    s.max_bank = BiasBank<T>::load(b.max_bank);
    s.switch_level = b.switch_level;
    s.trained_body_level = b.trained_body_level;
    s.interpolation = b.interpolation;
    s.trained_background_level = b.trained_background_level;
    s.validate();
    return s;
}

/// Appends one row, writing the header for new files. The trailing column
/// flags linear extrapolation beyond the bank grid.
inline void append_inference_log(const std::filesystem::path& path, const NoiseMeasurement& m,
                                 const InferenceTrace& t, Label label)
{
    const bool fresh = !std::filesystem::exists(path);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::app);
    if (!out) throw std::runtime_error("cannot append to inference log '" + path.string() + "'");
    if (fresh) out << "timestamp,measured_level,kind,chosen_set,reversal,label,extrapolated\n";
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char ts[32];
    std::strftime(ts, sizeof ts, "%Y-%m-%dT%H:%M:%SZ", &tm);
    char buf[160];
    std::snprintf(buf, sizeof buf, "%s,%.6f,%s,%s,%d,%d,%d\n", ts, m.level, m.kind_name(), to_string(t.chosen_set),
                  t.reversal ? 1 : 0, static_cast<int>(label), t.extrapolated ? 1 : 0);
    out << buf;
}

} // namespace biasnet
