#include <cmath>
#include <filesystem>
#include <string>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <biasnet/pipeline.hpp>

// Trend properties checked against a finished desk-scale pipeline run,
// passed as --run <dir>.

using namespace biasnet;
namespace fs = std::filesystem;

namespace {

fs::path g_run;

constexpr double kPoint = 0.01;

const SweepResult& results()
{
    static const SweepResult r = load_sweep_csv(g_run / "results.csv");
    return r;
}

double rate(const std::string& id, double level) { return results().at(id, level).detection_rate; }

const std::vector<double>& grid()
{
    static const std::vector<double> g = curve_of(results(), ids::zero).levels;
    return g;
}

std::uint64_t run_seed()
{
    return nlohmann::json::parse(read_text_file(g_run / "config.json")).at("seed").get<std::uint64_t>();
}

} // namespace

TEST(DeskRun, ArtifactsPresent)
{
    for (const char* f : {"results.csv", "curves.svg", "crossovers.csv", "background.csv", "background.svg",
                          "freeze.csv", "bundle.json", "config.json"})
        EXPECT_TRUE(fs::exists(g_run / f)) << f;
}

TEST(DeskRun, CleanEndpointAccuracy)
{
    EXPECT_GE(rate(ids::zero, 0.0), 0.95);
}

TEST(DeskRun, BiasRetrainAtZeroIsAFixedPoint)
{
    const auto base = load_checkpoint<float>(g_run / "models" / "zero.ckpt");
    const auto bank = BiasBank<float>::load(g_run / "banks" / (std::string(ids::zero_bias1) + ".bank"));
    ASSERT_TRUE(bank.anchored_to(base));
    const auto& tuned = bank.entries.at(0.0).conv1;
    double dist = 0.0, norm = 0.0;
    for (std::size_t i = 0; i < tuned.size(); ++i) {
        dist += std::pow(tuned[i] - base.conv1_b[i], 2);
        norm += std::pow(base.conv1_b[i], 2);
    }
    EXPECT_LE(std::sqrt(dist), 0.1 * std::sqrt(norm) + 1e-3);
    EXPECT_NEAR(rate(ids::zero_bias1, 0.0), rate(ids::zero, 0.0), kPoint);
}

TEST(DeskRun, BiasRetrainAtHalfImproves)
{
    EXPECT_GT(rate(ids::zero_bias1, 0.5), rate(ids::zero, 0.5));
}

TEST(DeskRun, BankEntriesBeatBaseFromPointThree)
{
    for (double l : grid())
        if (l >= 0.3 - 1e-9) {
            EXPECT_GE(rate(ids::zero_bias1, l), rate(ids::zero, l)) << l;
            EXPECT_GE(rate(ids::zero_bias12, l), rate(ids::zero, l)) << l;
        }
}

TEST(DeskRun, HighNoiseBenefit)
{
    for (double l : grid())
        if (l >= 0.6 - 1e-9) EXPECT_GT(rate(ids::zero_bias1, l), rate(ids::zero, l)) << l;
}

TEST(DeskRun, ControllerTracksBestUnadjustedNetwork)
{
    for (double l : grid())
        EXPECT_GE(rate(ids::controller, l), std::max(rate(ids::zero, l), rate(ids::max, l)) - 2 * kPoint) << l;
}

TEST(DeskRun, PerNoiseTrainingIsBestEverywhere)
{
    for (double l : grid())
        for (const auto& id : results().network_ids())
            EXPECT_GE(rate(ids::per_noise, l), rate(id, l) - 2 * kPoint) << id << " at " << l;
}

TEST(DeskRun, CleanDaLossFallsMonotonically)
{
    std::istringstream in(read_text_file(g_run / "logs" / (std::string(ids::da_zero) + ".csv")));
    std::string line;
    std::getline(in, line);
    std::vector<double> train;
    while (std::getline(in, line)) {
        std::istringstream row(line);
        std::string epoch, split, metric, value;
        std::getline(row, epoch, ',');
        std::getline(row, split, ',');
        std::getline(row, metric, ',');
        std::getline(row, value, ',');
        if (split == "train") train.push_back(std::stod(value));
    }
    ASSERT_GE(train.size(), 2u);
    for (std::size_t e = 1; e < std::min<std::size_t>(train.size(), 10); ++e) EXPECT_LT(train[e], train[e - 1]) << e;
}

TEST(DeskRun, MixedDaReducesPixelErrorAtHalf)
{
    const auto pool = load_mnist_idx(g_run / "data" / "images-idx3-ubyte", g_run / "data" / "labels-idx1-ubyte");
    Pipeline<float> p(PipelineConfig::desk(run_seed()), pool, g_run);
    const auto clean = p.base(SplitId::test);
    const auto noisy = p.awgn_set(SplitId::test, 0.5);
    const auto den = denoise_set(load_da<float>(g_run / "models" / (std::string(ids::da_mixed) + ".da")), noisy);
    double before = 0.0, after = 0.0;
    for (std::size_t i = 0; i < clean.images.size(); ++i) {
        before += std::abs(noisy.images[i] - clean.images[i]);
        after += std::abs(den.images[i] - clean.images[i]);
    }
    EXPECT_LT(after, before);
}

TEST(DeskRun, CrossoversWithinUnitInterval)
{
    std::istringstream in(read_text_file(g_run / "crossovers.csv"));
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "pair,before,after");
    int rows = 0;
    while (std::getline(in, line)) {
        ++rows;
        std::istringstream row(line);
        std::string pair, v;
        std::getline(row, pair, ',');
        while (std::getline(row, v, ','))
            if (v != "none") {
                EXPECT_GE(std::stod(v), 0.0) << line;
                EXPECT_LE(std::stod(v), 1.0) << line;
            }
    }
    EXPECT_EQ(rows, 2);
}

int main(int argc, char** argv)
{
    ::testing::InitGoogleTest(&argc, argv);
    for (int i = 1; i + 1 < argc; ++i)
        if (std::string(argv[i]) == "--run") g_run = argv[i + 1];
    if (g_run.empty()) {
        std::fprintf(stderr, "usage: %s --run <pipeline output dir>\n", argv[0]);
        return 2;
    }
    return RUN_ALL_TESTS();
}
