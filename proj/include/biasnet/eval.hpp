#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dataset.hpp"
#include "training.hpp"

namespace biasnet {

struct Score {
    std::size_t correct = 0;
    std::size_t n = 0;
    double rate() const { return static_cast<double>(correct) / static_cast<double>(n); }
};

inline Score score_labels(std::span<const Label> predicted, std::span<const Label> truth)
{
    if (predicted.size() != truth.size()) throw DimensionError("score: prediction count does not match labels");
    if (truth.empty()) throw ValueError("cannot score an empty dataset");
    Score s{0, truth.size()};
    for (std::size_t i = 0; i < truth.size(); ++i) s.correct += predicted[i] == truth[i];
    return s;
}

/// Detection rate: fraction of images whose predicted label is correct.
template <typename T>
double evaluate(const LeNetParams<T>& params, const ImageSet& set)
{
    if (set.size() == 0) throw ValueError("evaluate on an empty dataset");
    return score_labels(predict_set(params, set), set.labels).rate();
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

struct SweepRow {
    std::string network_id;
    double noise_level = 0.0;
    double detection_rate = 0.0;
    std::size_t n_samples = 0;

    friend bool operator==(const SweepRow&, const SweepRow&) = default;
};

struct SweepResult {
    std::vector<SweepRow> rows;
    Meta config;

    /// Row lookup; throws if absent.
    const SweepRow& at(const std::string& id, double level) const
    {
        for (const auto& r : rows)
            if (r.network_id == id && r.noise_level == level) return r;
        throw ValueError("sweep has no row for " + id + " at level " + std::to_string(level));
    }

    std::vector<std::string> network_ids() const
    {
        std::vector<std::string> ids;
        for (const auto& r : rows)
            if (std::find(ids.begin(), ids.end(), r.network_id) == ids.end()) ids.push_back(r.network_id);
        return ids;
    }

    void append(const SweepResult& other) { rows.insert(rows.end(), other.rows.begin(), other.rows.end()); }
};

/// Predicts labels for a test set recorded at `level`.
using InferenceFn = std::function<std::vector<Label>(const ImageSet& set, double level)>;

struct Variant {
    std::string id;
    InferenceFn predict;
};

template <typename T>
InferenceFn plain_inference(const LeNetParams<T>& params)
{
    return [&params](const ImageSet& set, double) { return predict_set(params, set); };
}

/// Every (variant, level) cell. `tests` must hold one set per grid level.
inline SweepResult sweep(const std::vector<Variant>& variants, const std::vector<double>& grid,
                         const std::map<double, ImageSet>& tests)
{
    SweepResult out;
    for (double level : grid)
        if (!tests.count(level)) throw ValueError("sweep: no test set for level " + std::to_string(level));
    for (const auto& v : variants)
        for (double level : grid) {
            const auto& set = tests.at(level);
            const auto s = score_labels(v.predict(set, level), set.labels);
            out.rows.push_back({v.id, level, s.rate(), s.n});
        }
    return out;
}

// ---------------------------------------------------------------------------
// Curves and crossovers
// ---------------------------------------------------------------------------

struct Curve {
    std::string network_id;
    std::vector<double> levels;
    std::vector<double> rates;

    void validate() const
    {
        if (levels.size() != rates.size()) throw DimensionError("curve levels and rates differ in length");
        for (std::size_t i = 1; i < levels.size(); ++i)
            if (!(levels[i] > levels[i - 1])) throw ValueError("curve levels must be strictly increasing");
    }

    double rate_at(double level) const
    {
        for (std::size_t i = 0; i < levels.size(); ++i)
            if (levels[i] == level) return rates[i];
        throw ValueError("curve " + network_id + " has no point at " + std::to_string(level));
    }

    double min_rate() const { return *std::min_element(rates.begin(), rates.end()); }
    double max_rate() const { return *std::max_element(rates.begin(), rates.end()); }
    double mean_rate() const
    {
        double s = 0.0;
        for (double r : rates) s += r;
        return s / static_cast<double>(rates.size());
    }
};

inline Curve curve_of(const SweepResult& r, const std::string& id)
{
    std::vector<std::pair<double, double>> pts;
    for (const auto& row : r.rows)
        if (row.network_id == id) pts.emplace_back(row.noise_level, row.detection_rate);
    if (pts.empty()) throw ValueError("sweep has no rows for network '" + id + "'");
    std::sort(pts.begin(), pts.end());
    Curve c{id, {}, {}};
    for (auto& [l, v] : pts) {
        c.levels.push_back(l);
        c.rates.push_back(v);
    }
    c.validate();
    return c;
}

/// Smallest level where sign(a - b) changes, linearly refined between the
/// bracketing grid points. Touching zero without changing sign is not a crossing.
inline std::optional<double> find_crossover(const Curve& a, const Curve& b)
{
    a.validate();
    b.validate();
    if (a.levels != b.levels) throw ValueError("find_crossover: curves " + a.network_id + " and " + b.network_id +
                                               " are on different grids");
    const std::size_t n = a.levels.size();
    std::vector<double> d(n);
    for (std::size_t i = 0; i < n; ++i) d[i] = a.rates[i] - b.rates[i];
    auto sign = [](double v) { return (v > 0.0) - (v < 0.0); };
    std::size_t p = 0;
    while (p < n && sign(d[p]) == 0) ++p;
    for (std::size_t i = p + 1; i < n; ++i) {
        const int si = sign(d[i]);
        if (si == 0) continue;
        if (si != sign(d[p])) {
            if (i > p + 1) return a.levels[p + 1]; // exact zero(s) between opposite signs
            const double x0 = a.levels[p], x1 = a.levels[i];
            return x0 + (x1 - x0) * d[p] / (d[p] - d[i]);
        }
        p = i;
    }
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// CSV and SVG emission
// ---------------------------------------------------------------------------

inline void write_text_file(const std::filesystem::path& path, const std::string& text)
{
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
    out << text;
    if (!out) throw std::runtime_error("write failed for '" + path.string() + "'");
}

inline std::string read_text_file(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

/// Rates are written with 17 significant digits so they parse back exactly.
inline std::string sweep_csv(const SweepResult& r)
{
    std::string out = "network_id,noise_level,detection_rate,n_samples\n";
    char buf[256];
    for (const auto& row : r.rows) {
        if (row.network_id.find_first_of(",\n\"") != std::string::npos)
            throw ValueError("network id '" + row.network_id + "' cannot be written to CSV");
        std::snprintf(buf, sizeof buf, "%s,%.6f,%.17g,%zu\n", row.network_id.c_str(), row.noise_level,
                      row.detection_rate, row.n_samples);
        out += buf;
    }
    return out;
}

inline void emit_csv(const SweepResult& r, const std::filesystem::path& path) { write_text_file(path, sweep_csv(r)); }

inline SweepResult parse_sweep_csv(const std::string& text)
{
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != "network_id,noise_level,detection_rate,n_samples")
        throw FormatError("sweep CSV: unexpected header '" + line + "'");
    SweepResult r;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ls(line);
        for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
        if (f.size() != 4) throw FormatError("sweep CSV line " + std::to_string(lineno) + ": expected 4 fields");
        try {
            r.rows.push_back({f[0], std::stod(f[1]), std::stod(f[2]), std::stoull(f[3])});
        } catch (const std::exception&) {
            throw FormatError("sweep CSV line " + std::to_string(lineno) + ": bad number");
        }
    }
    return r;
}

inline SweepResult load_sweep_csv(const std::filesystem::path& path)
{
    try {
        return parse_sweep_csv(read_text_file(path));
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

struct PlotOptions {
    std::string title;
    std::string x_label = "noise level";
    std::string y_label = "detection rate";
    std::vector<double> markers;
    double x_min = 0.0, x_max = 1.0;
    double y_min = 0.0, y_max = 1.0;
    double width = 720, height = 460;
    double left = 70, right = 190, top = 40, bottom = 60;

    double x_px(double v) const { return left + (v - x_min) / (x_max - x_min) * (width - left - right); }
    double y_px(double v) const { return height - bottom - (v - y_min) / (y_max - y_min) * (height - top - bottom); }
};

namespace detail {

inline std::string xml_escape(const std::string& s)
{
    std::string o;
    for (char c : s) {
        switch (c) {
        case '&': o += "&amp;"; break;
        case '<': o += "&lt;"; break;
        case '>': o += "&gt;"; break;
        case '"': o += "&quot;"; break;
        default: o += c;
        }
    }
    return o;
}

} // namespace detail

/// Self-contained SVG: one polyline per curve, axes, legend, dashed vertical markers.
inline std::string plot_svg(const std::vector<Curve>& curves, const PlotOptions& o)
{
    static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
                                    "#e377c2", "#7f7f7f", "#bcbd22", "#17becf", "#000000", "#393b79"};
    std::ostringstream s;
    char buf[256];
    auto num = [&](double v) {
        std::snprintf(buf, sizeof buf, "%.2f", v);
        return std::string(buf);
    };
    s << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(o.width) << "\" height=\"" << num(o.height)
      << "\" viewBox=\"0 0 " << num(o.width) << ' ' << num(o.height) << "\" font-family=\"sans-serif\">\n"
      << "<rect x=\"0\" y=\"0\" width=\"" << num(o.width) << "\" height=\"" << num(o.height) << "\" fill=\"white\"/>\n";
    if (!o.title.empty())
        s << "<text x=\"" << num(o.width / 2) << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">"
          << detail::xml_escape(o.title) << "</text>\n";
    const double x0 = o.x_px(o.x_min), x1 = o.x_px(o.x_max), y0 = o.y_px(o.y_min), y1 = o.y_px(o.y_max);
    s << "<g id=\"axes\" stroke=\"black\" stroke-width=\"1\">\n"
      << "<line x1=\"" << num(x0) << "\" y1=\"" << num(y0) << "\" x2=\"" << num(x1) << "\" y2=\"" << num(y0) << "\"/>\n"
      << "<line x1=\"" << num(x0) << "\" y1=\"" << num(y0) << "\" x2=\"" << num(x0) << "\" y2=\"" << num(y1) << "\"/>\n"
      << "</g>\n<g id=\"ticks\" font-size=\"11\">\n";
    for (int i = 0; i <= 10; ++i) {
        const double fx = o.x_min + (o.x_max - o.x_min) * i / 10.0, fy = o.y_min + (o.y_max - o.y_min) * i / 10.0;
        s << "<line x1=\"" << num(o.x_px(fx)) << "\" y1=\"" << num(y0) << "\" x2=\"" << num(o.x_px(fx)) << "\" y2=\""
          << num(y0 + 5) << "\" stroke=\"black\"/>"
          << "<text x=\"" << num(o.x_px(fx)) << "\" y=\"" << num(y0 + 18) << "\" text-anchor=\"middle\">" << num(fx)
          << "</text>\n"
          << "<line x1=\"" << num(x0 - 5) << "\" y1=\"" << num(o.y_px(fy)) << "\" x2=\"" << num(x0) << "\" y2=\""
          << num(o.y_px(fy)) << "\" stroke=\"black\"/>"
          << "<text x=\"" << num(x0 - 8) << "\" y=\"" << num(o.y_px(fy) + 4) << "\" text-anchor=\"end\">" << num(fy)
          << "</text>\n";
    }
    s << "</g>\n"
      << "<text x=\"" << num((x0 + x1) / 2) << "\" y=\"" << num(o.height - 15) << "\" text-anchor=\"middle\" font-size=\"13\">"
      << detail::xml_escape(o.x_label) << "</text>\n"
      << "<text x=\"18\" y=\"" << num((y0 + y1) / 2) << "\" text-anchor=\"middle\" font-size=\"13\" transform=\"rotate(-90 18 "
      << num((y0 + y1) / 2) << ")\">" << detail::xml_escape(o.y_label) << "</text>\n";
    for (double m : o.markers) {
        s << "<line class=\"marker\" data-level=\"" << m << "\" x1=\"" << num(o.x_px(m)) << "\" y1=\"" << num(y0)
          << "\" x2=\"" << num(o.x_px(m)) << "\" y2=\"" << num(y1)
          << "\" stroke=\"#555555\" stroke-dasharray=\"5,4\"/>\n";
    }
    for (std::size_t c = 0; c < curves.size(); ++c) {
        const auto& cv = curves[c];
        cv.validate();
        const char* color = palette[c % (sizeof palette / sizeof *palette)];
        s << "<polyline class=\"curve\" data-network=\"" << detail::xml_escape(cv.network_id)
          << "\" fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
        for (std::size_t i = 0; i < cv.levels.size(); ++i)
            s << (i ? " " : "") << num(o.x_px(cv.levels[i])) << ',' << num(o.y_px(cv.rates[i]));
        s << "\"/>\n";
        const double ly = o.top + 16.0 * static_cast<double>(c) + 10;
        s << "<line x1=\"" << num(o.width - o.right + 15) << "\" y1=\"" << num(ly) << "\" x2=\""
          << num(o.width - o.right + 40) << "\" y2=\"" << num(ly) << "\" stroke=\"" << color
          << "\" stroke-width=\"2\"/><text x=\"" << num(o.width - o.right + 45) << "\" y=\"" << num(ly + 4)
          << "\" font-size=\"11\">" << detail::xml_escape(cv.network_id) << "</text>\n";
    }
    s << "</svg>\n";
    return s.str();
}

inline void emit_plot(const std::vector<Curve>& curves, const std::filesystem::path& path, const PlotOptions& o = {})
{
    write_text_file(path, plot_svg(curves, o));
}

} // namespace biasnet
