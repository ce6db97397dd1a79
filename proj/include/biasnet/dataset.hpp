#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <zlib.h>

#include "container.hpp"
#include "errors.hpp"
#include "ops.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace biasnet {

// ---------------------------------------------------------------------------
// Noise descriptions
// ---------------------------------------------------------------------------

enum class NoiseKind { clean, awgn, background, mixed_awgn };

struct NoiseSpec {
    NoiseKind kind = NoiseKind::clean;
    double a = 0.0; // sigma, background level, or sigma_min
    double b = 0.0; // sigma_max for mixed
    std::uint64_t seed = 0;

    static NoiseSpec clean() { return {}; }
    static NoiseSpec awgn(double sigma, std::uint64_t seed = 0) { return {NoiseKind::awgn, sigma, 0.0, seed}; }
    static NoiseSpec background(double level, std::uint64_t seed = 0)
    {
        return {NoiseKind::background, level, 0.0, seed};
    }
    static NoiseSpec mixed(double lo, double hi, std::uint64_t seed = 0)
    {
        return {NoiseKind::mixed_awgn, lo, hi, seed};
    }

    /// Canonical text form: clean | awgn:<s> | background:<l> | mixed:<lo>,<hi>
    std::string to_string() const
    {
        char buf[96];
        switch (kind) {
        case NoiseKind::clean: return "clean";
        case NoiseKind::awgn: std::snprintf(buf, sizeof buf, "awgn:%.6f", a); break;
        case NoiseKind::background: std::snprintf(buf, sizeof buf, "background:%.6f", a); break;
        case NoiseKind::mixed_awgn: std::snprintf(buf, sizeof buf, "mixed:%.6f,%.6f", a, b); break;
        }
        return buf;
    }

    static NoiseSpec parse(const std::string& text)
    {
        const auto colon = text.find(':');
        const std::string head = text.substr(0, colon);
        const std::string tail = colon == std::string::npos ? "" : text.substr(colon + 1);
        auto number = [&](const std::string& s) {
            try {
                std::size_t used = 0;
                const double v = std::stod(s, &used);
                if (used != s.size()) throw std::invalid_argument(s);
                return v;
            } catch (const std::exception&) {
                throw ValueError("bad noise spec '" + text + "'");
            }
        };
        if (head == "clean" || head == "none") return clean();
        if (head == "awgn") return awgn(number(tail));
        if (head == "background" || head == "bg") return background(number(tail));
        if (head == "mixed") {
            if (tail.empty()) return mixed(0.0, 1.0);
            const auto comma = tail.find(',');
            if (comma == std::string::npos) throw ValueError("mixed noise needs 'mixed:<lo>,<hi>': " + text);
            return mixed(number(tail.substr(0, comma)), number(tail.substr(comma + 1)));
        }
        throw ValueError("unknown noise kind in '" + text + "' (expected clean, awgn, background or mixed)");
    }
};

// ---------------------------------------------------------------------------
// Image sets
// ---------------------------------------------------------------------------

struct Provenance {
    std::string source;
    NoiseSpec noise;
    std::vector<float> per_image_sigma; // filled by build_mixed
};

/// N single-channel images in [0,1] with digit labels.
struct ImageSet {
    Tensor<float> images; // [N,1,H,W]
    std::vector<Label> labels;
    Provenance provenance;

    std::size_t size() const noexcept { return labels.size(); }
    std::size_t pixels_per_image() const { return images.dim(2) * images.dim(3); }

    void validate() const
    {
        require_rank(images, 4, "ImageSet images");
        if (images.dim(1) != 1) throw DimensionError("ImageSet images must have one channel");
        if (images.dim(0) != labels.size())
            throw CountMismatchError("ImageSet has " + std::to_string(images.dim(0)) + " images but " +
                                     std::to_string(labels.size()) + " labels");
        for (float v : images.values())
            if (!(v >= 0.0f && v <= 1.0f)) throw ValueError("ImageSet pixel outside [0,1]");
    }

    /// Batch of the given rows, converted to T.
    template <typename T>
    Tensor<T> batch(std::span<const std::size_t> rows) const
    {
        const std::size_t per = pixels_per_image();
        Tensor<T> out({rows.size(), 1, images.dim(2), images.dim(3)});
        for (std::size_t r = 0; r < rows.size(); ++r) {
            const float* src = images.data() + rows[r] * per;
            std::copy(src, src + per, out.data() + r * per);
        }
        return out;
    }

    template <typename T>
    Tensor<T> all() const
    {
        return images.template cast<T>();
    }
};

inline ImageSet subset(const ImageSet& set, std::span<const std::size_t> rows)
{
    ImageSet out;
    out.images = set.batch<float>(rows);
    out.labels.reserve(rows.size());
    for (auto r : rows) out.labels.push_back(set.labels.at(r));
    out.provenance = set.provenance;
    if (!set.provenance.per_image_sigma.empty()) {
        out.provenance.per_image_sigma.clear();
        for (auto r : rows) out.provenance.per_image_sigma.push_back(set.provenance.per_image_sigma[r]);
    }
    return out;
}

struct Splits {
    ImageSet train, validation, test;
};

/// Disjoint train/validation/test subsets drawn by one seeded permutation.
inline Splits split_three(const ImageSet& set, std::size_t n_train, std::size_t n_val, std::size_t n_test,
                          std::uint64_t seed)
{
    if (n_train + n_val + n_test > set.size())
        throw ValueError("split sizes " + std::to_string(n_train + n_val + n_test) + " exceed " +
                         std::to_string(set.size()) + " available images");
    Rng rng(seed, 0x5u);
    auto perm = rng.permutation(set.size());
    auto part = [&](std::size_t from, std::size_t n) {
        std::vector<std::size_t> rows(perm.begin() + static_cast<std::ptrdiff_t>(from),
                                      perm.begin() + static_cast<std::ptrdiff_t>(from + n));
        std::sort(rows.begin(), rows.end());
        return subset(set, rows);
    };
    return {part(0, n_train), part(n_train, n_val), part(n_train + n_val, n_test)};
}

// ---------------------------------------------------------------------------
// IDX files (big-endian; optionally gzip-compressed)
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803u;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801u;

namespace detail {

inline std::vector<std::uint8_t> read_all_bytes(const std::filesystem::path& path)
{
    if (!std::filesystem::exists(path)) throw std::runtime_error("no such file: " + path.string());
    gzFile f = gzopen(path.string().c_str(), "rb"); // transparently reads uncompressed files too
    if (!f) throw std::runtime_error("cannot open " + path.string());
    std::vector<std::uint8_t> out;
    std::uint8_t buf[1 << 16];
    int n;
    while ((n = gzread(f, buf, sizeof buf)) > 0) out.insert(out.end(), buf, buf + n);
    const bool failed = n < 0;
    gzclose(f);
    if (failed) throw TruncatedError(path.string() + ": read error (corrupt compressed stream?)");
    return out;
}

inline std::uint32_t be32(const std::uint8_t* p)
{
    return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) | p[3];
}

inline void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v)
{
    for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

inline void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes)
{
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

} // namespace detail

inline ImageSet load_mnist_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path)
{
    const auto img = detail::read_all_bytes(images_path);
    const auto lab = detail::read_all_bytes(labels_path);
    if (img.size() < 16) throw TruncatedError(images_path.string() + ": shorter than the IDX image header");
    if (lab.size() < 8) throw TruncatedError(labels_path.string() + ": shorter than the IDX label header");
    if (detail::be32(img.data()) != kIdxImagesMagic)
        throw BadMagicError(images_path.string() + ": bad IDX image magic");
    if (detail::be32(lab.data()) != kIdxLabelsMagic)
        throw BadMagicError(labels_path.string() + ": bad IDX label magic");
    const std::size_t n = detail::be32(img.data() + 4), rows = detail::be32(img.data() + 8),
                      cols = detail::be32(img.data() + 12);
    const std::size_t nl = detail::be32(lab.data() + 4);
    if (n == 0 || rows == 0 || cols == 0) throw FormatError(images_path.string() + ": empty IDX image file");
    if (img.size() < 16 + n * rows * cols)
        throw TruncatedError(images_path.string() + ": image data truncated");
    if (lab.size() < 8 + nl) throw TruncatedError(labels_path.string() + ": label data truncated");
    if (n != nl)
        throw CountMismatchError("IDX count mismatch: " + std::to_string(n) + " images vs " + std::to_string(nl) +
                                 " labels");

    ImageSet set;
    set.images = Tensor<float>({n, 1, rows, cols});
    for (std::size_t i = 0; i < n * rows * cols; ++i) set.images[i] = static_cast<float>(img[16 + i]) / 255.0f;
    set.labels.assign(lab.begin() + 8, lab.begin() + 8 + static_cast<std::ptrdiff_t>(n));
    for (auto l : set.labels)
        if (l > 9) throw FormatError(labels_path.string() + ": label " + std::to_string(l) + " outside 0-9");
    set.provenance.source = images_path.filename().string();
    return set;
}

/// Writes pixels quantized to bytes (round to nearest of v*255).
inline void write_mnist_idx(const ImageSet& set, const std::filesystem::path& images_path,
                            const std::filesystem::path& labels_path)
{
    set.validate();
    const std::size_t n = set.size(), rows = set.images.dim(2), cols = set.images.dim(3);
    std::vector<std::uint8_t> img;
    img.reserve(16 + n * rows * cols);
    detail::put_be32(img, kIdxImagesMagic);
    detail::put_be32(img, static_cast<std::uint32_t>(n));
    detail::put_be32(img, static_cast<std::uint32_t>(rows));
    detail::put_be32(img, static_cast<std::uint32_t>(cols));
    for (float v : set.images.values()) img.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0f)));
    std::vector<std::uint8_t> lab;
    detail::put_be32(lab, kIdxLabelsMagic);
    detail::put_be32(lab, static_cast<std::uint32_t>(n));
    lab.insert(lab.end(), set.labels.begin(), set.labels.end());
    detail::write_bytes(images_path, img);
    detail::write_bytes(labels_path, lab);
}

/// Reads the per-digit JSON files shipped by the `mnist` npm package
/// (`<dir>/<d>.json`, each `{"data": [784*k floats]}` quantized from bytes).
inline ImageSet import_digit_json_dir(const std::filesystem::path& dir)
{
    std::vector<float> pixels;
    std::vector<Label> labels;
    for (int d = 0; d < 10; ++d) {
        const auto path = dir / (std::to_string(d) + ".json");
        std::ifstream in(path);
        if (!in) throw std::runtime_error("missing digit file " + path.string());
        const auto doc = nlohmann::json::parse(in);
        const auto& data = doc.at("data");
        if (data.size() % 784 != 0) throw FormatError(path.string() + ": pixel count not a multiple of 784");
        for (const auto& v : data) {
            const double x = v.get<double>();
            if (!(x >= 0.0 && x <= 1.0)) throw FormatError(path.string() + ": pixel outside [0,1]");
            pixels.push_back(static_cast<float>(std::lround(x * 255.0)) / 255.0f);
        }
        labels.insert(labels.end(), data.size() / 784, static_cast<Label>(d));
    }
    ImageSet set;
    set.images = Tensor<float>({labels.size(), 1, 28, 28}, std::move(pixels));
    set.labels = std::move(labels);
    set.provenance.source = "mnist-npm-digits";
    return set;
}

// ---------------------------------------------------------------------------
// Corruptions. Every random value is keyed by (seed, image index, pixel index).
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kPixelNoiseStream = 0x10u;
inline constexpr std::uint32_t kSigmaStream = 0x11u;

namespace detail {

inline void add_clamped_awgn(ImageSet& set, std::size_t image, double sigma, const KeyedRandom& noise)
{
    if (sigma == 0.0) return;
    const std::size_t per = set.pixels_per_image();
    float* px = set.images.data() + image * per;
    for (std::size_t j = 0; j < per; ++j) {
        const double v = px[j] + sigma * noise.normal(static_cast<std::uint32_t>(image), static_cast<std::uint32_t>(j));
        px[j] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
}

} // namespace detail

/// pixel' = clamp(pixel + n, 0, 1), n ~ N(0, sigma^2) independently per pixel.
inline ImageSet corrupt_awgn(const ImageSet& set, double sigma, std::uint64_t seed)
{
    if (!(sigma >= 0.0)) throw ValueError("AWGN sigma must be >= 0");
    ImageSet out = set;
    const KeyedRandom noise{seed, kPixelNoiseStream};
    for (std::size_t i = 0; i < out.size(); ++i) detail::add_clamped_awgn(out, i, sigma, noise);
    out.provenance.noise = NoiseSpec::awgn(sigma, seed);
    out.provenance.per_image_sigma.clear();
    return out;
}

/// How a background level is composed with the digit.
///   edge:  background pixels (pixel == 0) take `level`; stroke pixels become
///          0.5*pixel, so the body sits at 0.5 and antialiased edges stay darker
///          than mid-gray at every level, including 0.5.
///   blend: pixel' = level*(1 - pixel) + 0.5*pixel; at level 0.5 the image is
///          constant and carries no digit information.
enum class BackgroundRule { edge, blend };

inline BackgroundRule parse_background_rule(const std::string& s)
{
    if (s == "edge") return BackgroundRule::edge;
    if (s == "blend") return BackgroundRule::blend;
    throw ValueError("background rule must be edge or blend, got '" + s + "'");
}

inline std::string to_string(BackgroundRule r) { return r == BackgroundRule::edge ? "edge" : "blend"; }

/// Background goes to `level`, full strokes sit at 0.5. Deterministic; `seed`
/// is recorded only.
inline ImageSet corrupt_background(const ImageSet& set, double level, std::uint64_t seed = 0,
                                   BackgroundRule rule = BackgroundRule::edge)
{
    if (!(level >= 0.0 && level <= 1.0)) throw ValueError("background level must lie in [0,1]");
    ImageSet out = set;
    for (auto& v : out.images.storage()) {
        const double p = v;
        const double composed = rule == BackgroundRule::blend ? level * (1.0 - p) + 0.5 * p
                                : p == 0.0                    ? level
                                                              : 0.5 * p;
        v = static_cast<float>(std::clamp(composed, 0.0, 1.0));
    }
    out.provenance.noise = NoiseSpec::background(level, seed);
    out.provenance.per_image_sigma.clear();
    return out;
}

/// Each image gets its own sigma ~ U[sigma_min, sigma_max]; pixel noise is keyed
/// exactly as in corrupt_awgn, so a degenerate range reproduces it.
inline ImageSet build_mixed(const ImageSet& set, double sigma_min, double sigma_max, std::uint64_t seed)
{
    if (!(0.0 <= sigma_min && sigma_min <= sigma_max && sigma_max <= 1.0))
        throw ValueError("mixed noise range must satisfy 0 <= min <= max <= 1");
    ImageSet out = set;
    const KeyedRandom noise{seed, kPixelNoiseStream};
    const KeyedRandom pick{seed, kSigmaStream};
    out.provenance.per_image_sigma.resize(out.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double sigma =
            sigma_min == sigma_max ? sigma_min
                                   : sigma_min + (sigma_max - sigma_min) * pick.uniform(static_cast<std::uint32_t>(i), 0);
        out.provenance.per_image_sigma[i] = static_cast<float>(sigma);
        detail::add_clamped_awgn(out, i, sigma, noise);
    }
    out.provenance.noise = NoiseSpec::mixed(sigma_min, sigma_max, seed);
    return out;
}

/// Input complement x -> 1 - x (an involution on [0,1]).
inline ImageSet complement(const ImageSet& set)
{
    ImageSet out = set;
    for (auto& v : out.images.storage()) v = 1.0f - v;
    return out;
}

inline ImageSet apply_noise(const ImageSet& set, const NoiseSpec& spec, std::uint64_t seed,
                            BackgroundRule rule = BackgroundRule::edge)
{
    switch (spec.kind) {
    case NoiseKind::clean: {
        ImageSet out = set;
        out.provenance.noise = NoiseSpec::clean();
        out.provenance.noise.seed = seed;
        return out;
    }
    case NoiseKind::awgn: return corrupt_awgn(set, spec.a, seed);
    case NoiseKind::background: return corrupt_background(set, spec.a, seed, rule);
    case NoiseKind::mixed_awgn: return build_mixed(set, spec.a, spec.b, seed);
    }
    throw ValueError("unknown noise kind");
}

/// [lo, lo+step, ...] including hi (within 1e-9); levels are snapped to 1e-12
/// so that e.g. 3*0.04 compares equal to 0.12.
inline std::vector<double> noise_grid(double lo, double hi, double step)
{
    if (!(step > 0.0)) throw ValueError("noise grid step must be positive");
    if (hi < lo) throw ValueError("noise grid max below min");
    const auto n = static_cast<std::size_t>(std::floor((hi - lo) / step + 1e-9));
    std::vector<double> out;
    out.reserve(n + 2);
    for (std::size_t i = 0; i <= n; ++i) out.push_back(std::round((lo + static_cast<double>(i) * step) * 1e12) / 1e12);
    if (hi - out.back() > 1e-9) out.push_back(hi);
    else out.back() = std::min(out.back(), hi);
    return out;
}

// ---------------------------------------------------------------------------
// Dataset cache files
// ---------------------------------------------------------------------------

inline void save_imageset(const ImageSet& set, const std::filesystem::path& path)
{
    Container c("image-set");
    c.meta()["source"] = set.provenance.source.empty() ? "unknown" : set.provenance.source;
    c.meta()["noise"] = set.provenance.noise.to_string();
    c.meta()["noise_seed"] = std::to_string(set.provenance.noise.seed);
    c.add("images", set.images);
    c.add("labels", Tensor<std::uint8_t>({set.labels.size()}, set.labels));
    if (!set.provenance.per_image_sigma.empty())
        c.add("per_image_sigma",
              Tensor<float>({set.provenance.per_image_sigma.size()}, set.provenance.per_image_sigma));
    c.save(path);
}

inline ImageSet load_imageset(const std::filesystem::path& path)
{
    const auto c = Container::load(path);
    if (c.kind() != "image-set") throw FormatError(path.string() + ": not an image-set container");
    ImageSet set;
    set.images = c.get<float>("images");
    const auto labels = c.get<std::uint8_t>("labels");
    set.labels.assign(labels.values().begin(), labels.values().end());
    set.provenance.source = c.meta_at("source");
    set.provenance.noise = NoiseSpec::parse(c.meta_at("noise"));
    set.provenance.noise.seed = std::stoull(c.meta_at("noise_seed"));
    if (c.has("per_image_sigma")) {
        const auto s = c.get<float>("per_image_sigma");
        set.provenance.per_image_sigma.assign(s.values().begin(), s.values().end());
    }
    set.validate();
    return set;
}

} // namespace biasnet
