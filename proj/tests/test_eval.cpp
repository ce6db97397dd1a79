#include <cmath>
#include <sstream>

#include <boost/property_tree/ptree.hpp>
#include <boost/property_tree/xml_parser.hpp>
#include <gtest/gtest.h>

#include <biasnet/eval.hpp>

using namespace biasnet;

namespace {

Curve line(std::string id, std::vector<double> levels, std::vector<double> rates)
{
    return {std::move(id), std::move(levels), std::move(rates)};
}

const std::vector<double> kGrid{0.0, 0.1, 0.2, 0.3, 0.4, 0.5};

} // namespace

TEST(Score, CountsMatches)
{
    const std::vector<Label> p{1, 2, 3, 4}, t{1, 0, 3, 0};
    const auto s = score_labels(p, t);
    EXPECT_EQ(s.correct, 2u);
    EXPECT_EQ(s.rate(), 0.5);
    EXPECT_THROW(score_labels(p, std::vector<Label>{1}), DimensionError);
    EXPECT_THROW(score_labels(std::vector<Label>{}, std::vector<Label>{}), ValueError);
}

TEST(Score, RandomGuessingWithinBinomialBound)
{
    Rng rng(31);
    const std::size_t n = 2000;
    std::vector<Label> p(n), t(n);
    for (std::size_t i = 0; i < n; ++i) {
        p[i] = static_cast<Label>(rng.below(10));
        t[i] = static_cast<Label>(rng.below(10));
    }
    EXPECT_NEAR(score_labels(p, t).rate(), 0.1, 4 * std::sqrt(0.09 / n));
}

TEST(Crossover, LinearRefinement)
{
    // a - b goes from +0.2 at 0.3 to -0.1 at 0.4: root at 0.3 + 0.1 * 2/3
    const auto a = line("a", kGrid, {0.9, 0.8, 0.7, 0.6, 0.3, 0.2});
    const auto b = line("b", kGrid, {0.4, 0.4, 0.4, 0.4, 0.4, 0.4});
    const auto x = find_crossover(a, b);
    ASSERT_TRUE(x);
    EXPECT_NEAR(*x, 0.3 + 0.1 * 2.0 / 3.0, 1e-12);
}

TEST(Crossover, SyntheticCrossingAt037)
{
    std::vector<double> grid, ra, rb;
    for (int i = 0; i <= 25; ++i) {
        const double l = 0.04 * i;
        grid.push_back(noise_grid(0, 1, 0.04)[static_cast<std::size_t>(i)]);
        ra.push_back(1.0 - l);
        rb.push_back(0.63);
    }
    const auto x = find_crossover(line("a", grid, ra), line("b", grid, rb));
    ASSERT_TRUE(x);
    EXPECT_NEAR(*x, 0.37, 1e-9);
}

TEST(Crossover, JitteredCurvesRecoverKnownCrossing)
{
    Rng rng(33);
    const auto grid = noise_grid(0, 1, 0.04);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> ra, rb;
        for (double l : grid) {
            ra.push_back(1.0 - l + rng.uniform(-0.01, 0.01));
            rb.push_back(0.63 + rng.uniform(-0.01, 0.01));
        }
        const auto x = find_crossover(line("a", grid, ra), line("b", grid, rb));
        ASSERT_TRUE(x);
        EXPECT_NEAR(*x, 0.37, 0.05);
    }
}

TEST(Crossover, SymmetricInArguments)
{
    const auto a = line("a", kGrid, {0.9, 0.7, 0.5, 0.3, 0.2, 0.1});
    const auto b = line("b", kGrid, {0.5, 0.5, 0.5, 0.5, 0.5, 0.5});
    EXPECT_EQ(find_crossover(a, b), find_crossover(b, a));
}

TEST(Crossover, NoneWhenDominated)
{
    const auto a = line("a", kGrid, {0.9, 0.8, 0.7, 0.6, 0.5, 0.4});
    const auto b = line("b", kGrid, {0.5, 0.4, 0.3, 0.2, 0.1, 0.0});
    EXPECT_FALSE(find_crossover(a, b));
}

TEST(Crossover, TouchWithoutSignChangeIsNotACrossing)
{
    const auto a = line("a", kGrid, {0.9, 0.8, 0.5, 0.8, 0.9, 0.9});
    const auto b = line("b", kGrid, {0.5, 0.5, 0.5, 0.5, 0.5, 0.5});
    EXPECT_FALSE(find_crossover(a, b));
}

TEST(Crossover, ExactZeroBetweenOppositeSigns)
{
    const auto a = line("a", kGrid, {0.9, 0.8, 0.5, 0.3, 0.2, 0.1});
    const auto b = line("b", kGrid, {0.5, 0.5, 0.5, 0.5, 0.5, 0.5});
    EXPECT_EQ(find_crossover(a, b), std::optional<double>(0.2));
}

TEST(Crossover, GridMismatchRejected)
{
    const auto a = line("a", {0.0, 0.1}, {0.5, 0.4});
    const auto b = line("b", {0.0, 0.2}, {0.4, 0.5});
    EXPECT_THROW(find_crossover(a, b), ValueError);
    EXPECT_THROW(find_crossover(line("c", {0.1, 0.0}, {0.1, 0.2}), a), ValueError);
}

TEST(Sweep, CellsAndLookups)
{
    std::map<double, ImageSet> tests;
    for (double l : {0.0, 0.5}) {
        ImageSet s;
        s.images = Tensor<float>({4, 1, 2, 2});
        s.labels = {0, 1, 2, 3};
        tests.emplace(l, s);
    }
    const std::vector<Variant> variants{
        {"always0", [](const ImageSet& s, double) { return std::vector<Label>(s.size(), 0); }},
        {"oracle", [](const ImageSet& s, double) { return s.labels; }},
    };
    const auto r = sweep(variants, {0.0, 0.5}, tests);
    EXPECT_EQ(r.rows.size(), 4u);
    EXPECT_EQ(r.at("always0", 0.5).detection_rate, 0.25);
    EXPECT_EQ(r.at("oracle", 0.0).detection_rate, 1.0);
    EXPECT_EQ(r.network_ids(), (std::vector<std::string>{"always0", "oracle"}));
    EXPECT_THROW(sweep(variants, {0.0, 0.3}, tests), ValueError);
    EXPECT_EQ(curve_of(r, "oracle").min_rate(), 1.0);
    EXPECT_THROW(curve_of(r, "missing"), ValueError);
}

TEST(SweepCsv, RoundTripIsExact)
{
    SweepResult r;
    Rng rng(32);
    for (const char* id : {"zero", "zero+bias1", "max"})
        for (double l : noise_grid(0, 1, 0.04)) r.rows.push_back({id, l, rng.uniform(), 2000});
    const auto text = sweep_csv(r);
    const auto back = parse_sweep_csv(text);
    EXPECT_EQ(back.rows, r.rows);
    EXPECT_EQ(sweep_csv(back), text);
    EXPECT_THROW(parse_sweep_csv("id,level\n"), FormatError);
    EXPECT_THROW(parse_sweep_csv("network_id,noise_level,detection_rate,n_samples\nzero,0.1,x,3\n"), FormatError);
    SweepResult bad;
    bad.rows.push_back({"a,b", 0.0, 0.5, 1});
    EXPECT_THROW(sweep_csv(bad), ValueError);
}

TEST(PlotSvg, ParsesWithCurvesAndMarkers)
{
    const std::vector<Curve> curves{line("zero", kGrid, {0.99, 0.9, 0.7, 0.5, 0.3, 0.2}),
                                    line("max<&>", kGrid, {0.7, 0.72, 0.74, 0.7, 0.6, 0.5})};
    PlotOptions o;
    o.title = "t";
    o.markers = {0.12, 0.72};
    const auto svg = plot_svg(curves, o);

    boost::property_tree::ptree tree;
    std::istringstream in(svg);
    ASSERT_NO_THROW(boost::property_tree::read_xml(in, tree));
    const auto& root = tree.get_child("svg");
    std::vector<std::string> networks;
    std::vector<std::pair<double, double>> markers; // level, x
    for (const auto& [tag, node] : root) {
        if (tag == "polyline" && node.get<std::string>("<xmlattr>.class", "") == "curve")
            networks.push_back(node.get<std::string>("<xmlattr>.data-network"));
        if (tag == "line" && node.get<std::string>("<xmlattr>.class", "") == "marker") {
            markers.emplace_back(node.get<double>("<xmlattr>.data-level"), node.get<double>("<xmlattr>.x1"));
            EXPECT_EQ(node.get<double>("<xmlattr>.x1"), node.get<double>("<xmlattr>.x2"));
            EXPECT_FALSE(node.get<std::string>("<xmlattr>.stroke-dasharray", "").empty());
        }
    }
    EXPECT_EQ(networks, (std::vector<std::string>{"zero", "max<&>"}));
    ASSERT_EQ(markers.size(), 2u);
    const double plot_width = o.width - o.left - o.right;
    for (const auto& [level, x] : markers) EXPECT_NEAR((x - o.left) / plot_width, level, 0.01);
}
