// biasnet: command-line front end for the bias-bank noise-robustness experiments.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include <biasnet/checkpoint.hpp>
#include <biasnet/controller.hpp>
#include <biasnet/dataset.hpp>
#include <biasnet/eval.hpp>
#include <biasnet/pipeline.hpp>
#include <biasnet/training.hpp>

namespace fs = std::filesystem;
using namespace biasnet;

namespace {

struct Globals {
    std::uint64_t seed = 1;
    bool desk = false;
    fs::path out_dir = "out";
    std::string precision = "f32";
    std::string bg_rule = "edge";
    bool verbose = false;
};

fs::path data_dir(const Globals& g) { return g.out_dir / "data"; }

ImageSet load_pool(const Globals& g)
{
    const auto dir = data_dir(g);
    if (!fs::exists(dir / "images-idx3-ubyte"))
        throw std::runtime_error("no dataset under " + dir.string() + "; run `biasnet fetch-data --from <dir>` first");
    return load_mnist_idx(dir / "images-idx3-ubyte", dir / "labels-idx1-ubyte");
}

PipelineConfig make_config(const Globals& g)
{
    auto c = g.desk ? PipelineConfig::desk(g.seed) : PipelineConfig::full_scale(g.seed);
    c.verbose = g.verbose;
    c.bg_rule = parse_background_rule(g.bg_rule);
    return c;
}

/// "lo:hi:step" or a comma list.
std::vector<double> parse_grid(const std::string& s)
{
    if (s.find(':') != std::string::npos) {
        double lo, hi, step;
        if (std::sscanf(s.c_str(), "%lf:%lf:%lf", &lo, &hi, &step) != 3)
            throw ValueError("grid must be lo:hi:step or a comma list, got '" + s + "'");
        return noise_grid(lo, hi, step);
    }
    std::vector<double> out;
    std::stringstream ss(s);
    for (std::string tok; std::getline(ss, tok, ',');) out.push_back(std::stod(tok));
    if (out.empty()) throw ValueError("empty grid");
    return out;
}

SplitId parse_split(const std::string& s)
{
    if (s == "train") return SplitId::train;
    if (s == "validation" || s == "val") return SplitId::validation;
    if (s == "test") return SplitId::test;
    throw ValueError("split must be train, validation or test");
}

/// Finds IDX files or the npm `mnist` package's digit JSON under `from`.
ImageSet import_source(const fs::path& from)
{
    auto find = [&](std::initializer_list<const char*> names) -> std::optional<fs::path> {
        for (const char* n : names)
            for (const char* ext : {"", ".gz"})
                if (fs::exists(from / (std::string(n) + ext))) return from / (std::string(n) + ext);
        return std::nullopt;
    };
    auto tr_i = find({"train-images-idx3-ubyte", "train-images.idx3-ubyte"});
    auto tr_l = find({"train-labels-idx1-ubyte", "train-labels.idx1-ubyte"});
    auto te_i = find({"t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"});
    auto te_l = find({"t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"});
    if (tr_i && tr_l) {
        auto set = load_mnist_idx(*tr_i, *tr_l);
        if (te_i && te_l) {
            const auto test = load_mnist_idx(*te_i, *te_l);
            std::vector<float> px(set.images.storage());
            px.insert(px.end(), test.images.storage().begin(), test.images.storage().end());
            set.labels.insert(set.labels.end(), test.labels.begin(), test.labels.end());
            set.images = Tensor<float>({set.labels.size(), 1, 28, 28}, std::move(px));
        }
        set.provenance.source = "mnist-idx";
        return set;
    }
    for (const auto& dir : {from, from / "src" / "digits", from / "package" / "src" / "digits"})
        if (fs::exists(dir / "0.json")) return import_digit_json_dir(dir);
    throw std::runtime_error("no MNIST IDX files or digit JSON found under " + from.string());
}

template <typename T>
int cmd_train(const Globals& g, const std::string& noise, std::string id)
{
    Pipeline<T> p(make_config(g), load_pool(g), g.out_dir);
    const auto spec = NoiseSpec::parse(noise);
    auto set_for = [&](SplitId s) {
        switch (spec.kind) {
        case NoiseKind::clean: return p.awgn_set(s, 0.0);
        case NoiseKind::awgn: return p.awgn_set(s, spec.a);
        case NoiseKind::background: return p.background_set(s, spec.a);
        case NoiseKind::mixed_awgn:
            return build_mixed(p.base(s), spec.a, spec.b, noise_seed(g.seed, s, NoiseKind::mixed_awgn, 0.0));
        }
        throw ValueError("bad noise");
    };
    auto cfg = p.config().full;
    cfg.seed = derive_seed(g.seed, 10);
    cfg.verbose = g.verbose;
    auto r = train_full<T>(set_for(SplitId::train), set_for(SplitId::validation), cfg);
    if (id.empty()) id = "net-" + spec.to_string();
    for (auto& c : id)
        if (c == ':' || c == ',') c = '_';
    r.params.meta["network_id"] = id;
    save_checkpoint(r.params, p.layout().model(id));
    r.log.write_csv(p.layout().log(id));
    const double acc = evaluate(r.params, set_for(SplitId::test));
    std::printf("%s\tbest_epoch=%zu\tval_error=%.4f\ttest_rate=%.4f\n", p.layout().model(id).c_str(), r.best_epoch,
                r.best_val_error, acc);
    return 0;
}

template <typename T>
int cmd_retrain(const Globals& g, const fs::path& base_path, const std::string& grid_s, const std::string& layers_s,
                const std::string& kind, std::string id)
{
    Pipeline<T> p(make_config(g), load_pool(g), g.out_dir);
    const auto base = load_checkpoint<T>(base_path);
    const auto grid = parse_grid(grid_s);
    const auto layers = LayerSet::parse(layers_s);
    if (kind != "awgn" && kind != "background") throw ValueError("--kind must be awgn or background");
    auto data = [&](double level) {
        if (kind == "awgn") return LevelData{p.awgn_set(SplitId::train, level), p.awgn_set(SplitId::validation, level)};
        return LevelData{p.background_set(SplitId::train, level), p.background_set(SplitId::validation, level)};
    };
    auto cfg = p.config().bias;
    cfg.seed = derive_seed(g.seed, 20);
    cfg.verbose = g.verbose;
    auto b = build_bias_bank(base, grid, data, cfg, layers, kind);
    if (id.empty()) id = base_path.stem().string() + "+" + layers.to_string();
    b.bank.save(p.layout().bank(id));
    for (const auto& [level, log] : b.logs) log.write_csv(p.layout().log(id + "-" + level_tag(level)));
    std::printf("%s\tentries=%zu\tanchor=%s\n", p.layout().bank(id).c_str(), b.bank.entries.size(),
                b.bank.anchor_id.c_str());
    return 0;
}

template <typename T>
int cmd_train_da(const Globals& g, const std::string& noise, std::string id)
{
    Pipeline<T> p(make_config(g), load_pool(g), g.out_dir);
    const auto spec = NoiseSpec::parse(noise);
    auto corrupt = [&](SplitId s) {
        if (spec.kind == NoiseKind::mixed_awgn)
            return build_mixed(p.base(s), spec.a, spec.b, noise_seed(g.seed, s, NoiseKind::mixed_awgn, 0.0));
        if (spec.kind == NoiseKind::background) return p.background_set(s, spec.a);
        return p.awgn_set(s, spec.kind == NoiseKind::clean ? 0.0 : spec.a);
    };
    auto cfg = p.config().da;
    cfg.seed = derive_seed(g.seed, 30);
    cfg.verbose = g.verbose;
    auto r = train_da<T>(corrupt(SplitId::train), p.base(SplitId::train), corrupt(SplitId::validation),
                         p.base(SplitId::validation), cfg);
    if (id.empty()) id = "da-" + spec.to_string();
    for (auto& c : id)
        if (c == ':' || c == ',') c = '_';
    save_da(r.params, p.layout().da(id));
    r.log.write_csv(p.layout().log(id));
    std::printf("%s\tbest_epoch=%zu\tval_cross_entropy=%.4f\n", p.layout().da(id).c_str(), r.best_epoch,
                r.best_val_loss);
    return 0;
}

template <typename T>
int cmd_eval(const Globals& g, const fs::path& ckpt, const std::string& bank_path, const std::string& da_path,
             const std::string& grid_s, const std::string& kind, const std::string& csv_out)
{
    Pipeline<T> p(make_config(g), load_pool(g), g.out_dir);
    const auto params = load_checkpoint<T>(ckpt);
    std::optional<BiasBank<T>> bank;
    if (!bank_path.empty()) bank = BiasBank<T>::load(bank_path);
    std::optional<DAParams<T>> da;
    if (!da_path.empty()) da = load_da<T>(da_path);
    std::string id = ckpt.stem().string();
    if (bank) id += "+" + fs::path(bank_path).stem().string();
    if (da) id = fs::path(da_path).stem().string() + ">" + id;
    Variant v{id, [&](const ImageSet& set, double level) {
                  const auto net = bank ? apply_biases(params, *bank,
                                                       select_biases(*bank, level, Interpolation::nearest).biases)
                                        : params;
                  return predict_set(net, da ? denoise_set(*da, set) : set);
              }};
    const auto grid = parse_grid(grid_s);
    std::map<double, ImageSet> tests;
    for (double l : grid)
        tests.emplace(l, kind == "background" ? p.background_set(SplitId::test, l) : p.awgn_set(SplitId::test, l));
    const auto r = sweep({v}, grid, tests);
    if (!csv_out.empty()) emit_csv(r, csv_out);
    std::fputs(sweep_csv(r).c_str(), stdout);
    return 0;
}

template <typename T>
int cmd_sweep_all(const Globals& g)
{
    Pipeline<T> p(make_config(g), load_pool(g), g.out_dir);
    p.run();
    std::printf("%s\n%s\n%s\n%s\n", p.layout().results().c_str(), p.layout().curves_svg().c_str(),
                p.layout().background().c_str(), p.layout().crossovers().c_str());
    return 0;
}

template <typename T>
int cmd_infer(const Globals& g, const fs::path& bundle, const fs::path& image_path, std::size_t index,
              std::size_t count, const std::string& measurement, const std::string& log_path)
{
    const auto state = load_controller<T>(bundle);
    const auto set = load_imageset(image_path);
    if (index >= set.size()) throw ValueError("--index beyond the image set");
    count = std::min(count, set.size() - index);
    std::size_t correct = 0;
    for (std::size_t i = index; i < index + count; ++i) {
        const std::size_t row[] = {i};
        const auto img = set.batch<T>(row);
        const auto m = measurement == "auto" ? NoiseMeasurement::awgn(estimate_noise_sigma(img))
                                             : NoiseMeasurement::parse(measurement);
        InferenceTrace t;
        const Label label = infer(state, img, m, &t);
        correct += label == set.labels[i];
        if (!log_path.empty()) append_inference_log(log_path, m, t, label);
        if (count == 1)
            std::printf("label=%d\ttrue=%d\tset=%s\treversal=%d\tmeasured=%s:%.4f\n", label, set.labels[i],
                        to_string(t.chosen_set), t.reversal ? 1 : 0, m.kind_name(), m.level);
    }
    if (count > 1) std::printf("images=%zu\tcorrect=%zu\trate=%.4f\n", count, correct, double(correct) / count);
    (void)g;
    return 0;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Noise-robust LeNet via runtime-swapped convolutional bias banks"};
    app.require_subcommand(1);
    Globals g;
    app.add_option("--seed", g.seed, "Root seed for every derived job")->capture_default_str();
    app.add_flag("--desk-scale", g.desk, "Reduced data/epoch profile sized for a laptop CPU");
    app.add_option("--out-dir", g.out_dir, "Directory all outputs are written under")->capture_default_str();
    app.add_option("--precision", g.precision, "Numeric precision")
        ->check(CLI::IsMember({"f32", "f64"}))
        ->capture_default_str();
    app.add_option("--background-rule", g.bg_rule, "How background levels compose with the digit")
        ->check(CLI::IsMember({"edge", "blend"}))
        ->capture_default_str();
    app.add_flag("-v,--verbose", g.verbose, "Progress on stderr");
    app.fallthrough();

    auto* fetch = app.add_subcommand("fetch-data", "Import MNIST (IDX files or the npm `mnist` package) into out-dir/data");
    std::string from;
    fetch->add_option("--from", from, "Directory with IDX files or the npm mnist package")->required();

    auto* noisy = app.add_subcommand("make-noisy", "Write one corrupted split as an image-set file");
    std::string nkind = "awgn", nsplit = "test", nout;
    double nlevel = 0.0, nlevel_max = 1.0;
    std::optional<std::uint64_t> nseed;
    noisy->add_option("--kind", nkind)->check(CLI::IsMember({"clean", "awgn", "background", "mixed"}));
    noisy->add_option("--level", nlevel, "sigma, background level, or mixed sigma_min");
    noisy->add_option("--level-max", nlevel_max, "mixed sigma_max");
    noisy->add_option("--noise-seed", nseed, "Override the derived noise seed");
    noisy->add_option("--split", nsplit)->check(CLI::IsMember({"train", "validation", "test"}));
    noisy->add_option("--output", nout, "Output file (default out-dir/data/<kind>-<level>-<split>.set)");
    bool nidx = false;
    noisy->add_flag("--idx", nidx, "Also write IDX files next to the output");

    auto* train = app.add_subcommand("train", "Train a LeNet on one noise condition");
    std::string tnoise = "clean", tid;
    train->add_option("--noise", tnoise, "clean | awgn:<s> | background:<l> | mixed:<lo>,<hi>");
    train->add_option("--id", tid, "Network id (file stem)");

    auto* retrain = app.add_subcommand("retrain-biases", "Build a bias bank for a trained base network");
    std::string rbase, rgrid = "0:1:0.1", rlayers = "conv1", rkind = "awgn", rid;
    retrain->add_option("--base", rbase, "Base checkpoint")->required()->check(CLI::ExistingFile);
    retrain->add_option("--grid", rgrid, "lo:hi:step or comma list")->capture_default_str();
    retrain->add_option("--layers", rlayers, "conv1 or conv1,conv2")->capture_default_str();
    retrain->add_option("--kind", rkind, "awgn or background")->capture_default_str();
    retrain->add_option("--id", rid, "Bank id (file stem)");

    auto* tda = app.add_subcommand("train-da", "Train a denoising autoencoder preprocessor");
    std::string danoise = "mixed:0,1", daid;
    tda->add_option("--noise", danoise)->capture_default_str();
    tda->add_option("--id", daid);

    auto* bundle = app.add_subcommand("bundle", "Write a controller bundle");
    std::string bzero, bmax, bout;
    std::vector<std::string> bbanks;
    double bswitch = 0.5, bbody = 0.5, bbackground = 0.0;
    std::string binterp = "nearest";
    bundle->add_option("--zero", bzero, "Zero-noise checkpoint")->required()->check(CLI::ExistingFile);
    bundle->add_option("--max", bmax, "Max-noise checkpoint")->required()->check(CLI::ExistingFile);
    bundle->add_option("--banks", bbanks, "Zero bank then max bank")->required()->expected(2)->delimiter(',');
    bundle->add_option("--switch-level", bswitch)->capture_default_str();
    bundle->add_option("--body-level", bbody)->capture_default_str();
    bundle->add_option("--trained-background", bbackground, "Background level the networks were trained on")
        ->capture_default_str();
    bundle->add_option("--interpolation", binterp)->check(CLI::IsMember({"nearest", "linear"}));
    bundle->add_option("--output", bout, "Bundle path (default out-dir/bundle.json)");

    auto* eval = app.add_subcommand("eval", "Detection rate of one variant over a noise grid");
    std::string evariant, ebank, eda, egrid = "0:1:0.1", ekind = "awgn", ecsv;
    eval->add_option("--variant", evariant, "Checkpoint to evaluate")->required()->check(CLI::ExistingFile);
    eval->add_option("--bank", ebank, "Bias bank applied per level")->check(CLI::ExistingFile);
    eval->add_option("--da", eda, "Autoencoder preprocessor")->check(CLI::ExistingFile);
    eval->add_option("--grid", egrid)->capture_default_str();
    eval->add_option("--kind", ekind)->check(CLI::IsMember({"awgn", "background"}));
    eval->add_option("--csv", ecsv, "Also write the rows here");

    auto* sweep_cmd = app.add_subcommand("sweep", "Run experiment sweeps");
    bool sall = false;
    sweep_cmd->add_flag("--all", sall, "Train everything and sweep every variant")->required();

    auto* cross = app.add_subcommand("crossover", "Crossover level of two curves");
    std::string ca, cb, cin;
    cross->add_option("--a", ca)->required();
    cross->add_option("--b", cb)->required();
    cross->add_option("--in", cin, "Sweep CSV (default out-dir/results.csv)");

    auto* plot = app.add_subcommand("plot", "Render a sweep CSV as SVG");
    std::string pin, pout;
    std::vector<double> pmarkers{0.12, 0.72};
    plot->add_option("--in", pin)->required()->check(CLI::ExistingFile);
    plot->add_option("--out", pout)->required();
    plot->add_option("--markers", pmarkers)->delimiter(',');

    auto* inf = app.add_subcommand("infer", "Classify images through the runtime controller");
    std::string ibundle, iimage, imeas = "awgn:0", ilog;
    std::size_t iindex = 0, icount = 1;
    inf->add_option("--bundle", ibundle)->required()->check(CLI::ExistingFile);
    inf->add_option("--image", iimage, "Image-set file (see make-noisy)")->required()->check(CLI::ExistingFile);
    inf->add_option("--index", iindex)->capture_default_str();
    inf->add_option("--count", icount, "Classify this many consecutive images and report the rate");
    inf->add_option("--measurement", imeas, "awgn:<s> | background:<l> | auto")->capture_default_str();
    inf->add_option("--log", ilog, "Append rows to this inference log CSV");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    try {
        const bool f64 = g.precision == "f64";
        if (fetch->parsed()) {
            const auto set = import_source(from);
            write_mnist_idx(set, data_dir(g) / "images-idx3-ubyte", data_dir(g) / "labels-idx1-ubyte");
            std::printf("%zu images from %s -> %s\n", set.size(), set.provenance.source.c_str(),
                        data_dir(g).c_str());
        } else if (noisy->parsed()) {
            Pipeline<float> p(make_config(g), load_pool(g), g.out_dir);
            const auto split = parse_split(nsplit);
            NoiseSpec spec = nkind == "clean"        ? NoiseSpec::clean()
                             : nkind == "awgn"       ? NoiseSpec::awgn(nlevel)
                             : nkind == "background" ? NoiseSpec::background(nlevel)
                                                     : NoiseSpec::mixed(nlevel, nlevel_max);
            const auto kind_for_seed = spec.kind == NoiseKind::clean ? NoiseKind::awgn : spec.kind;
            const double seed_level = spec.kind == NoiseKind::mixed_awgn ? 0.0 : spec.a;
            const auto seed = nseed ? *nseed : noise_seed(g.seed, split, kind_for_seed, seed_level);
            const auto set = apply_noise(p.base(split), spec, seed, parse_background_rule(g.bg_rule));
            const fs::path out = nout.empty() ? data_dir(g) / (nkind + "-" + level_tag(nlevel) + "-" + nsplit + ".set")
                                              : fs::path(nout);
            save_imageset(set, out);
            if (nidx) {
                auto stem = out;
                stem.replace_extension();
                write_mnist_idx(set, stem.string() + "-images-idx3-ubyte", stem.string() + "-labels-idx1-ubyte");
            }
            std::printf("%s\t%zu images\t%s\n", out.c_str(), set.size(), set.provenance.noise.to_string().c_str());
        } else if (train->parsed()) {
            return f64 ? cmd_train<double>(g, tnoise, tid) : cmd_train<float>(g, tnoise, tid);
        } else if (retrain->parsed()) {
            return f64 ? cmd_retrain<double>(g, rbase, rgrid, rlayers, rkind, rid)
                       : cmd_retrain<float>(g, rbase, rgrid, rlayers, rkind, rid);
        } else if (tda->parsed()) {
            return f64 ? cmd_train_da<double>(g, danoise, daid) : cmd_train_da<float>(g, danoise, daid);
        } else if (bundle->parsed()) {
            BundleSpec b{bzero, bmax, bbanks.at(0), bbanks.at(1), bswitch, bbody, parse_interpolation(binterp), bbackground};
            const fs::path out = bout.empty() ? g.out_dir / "bundle.json" : fs::path(bout);
            save_bundle(b, out);
            load_controller<float>(out); // validates anchors and switch level
            std::printf("%s\n", out.c_str());
        } else if (eval->parsed()) {
            return f64 ? cmd_eval<double>(g, evariant, ebank, eda, egrid, ekind, ecsv)
                       : cmd_eval<float>(g, evariant, ebank, eda, egrid, ekind, ecsv);
        } else if (sweep_cmd->parsed()) {
            if (!sall) throw CLI::ValidationError("sweep currently requires --all");
            return f64 ? cmd_sweep_all<double>(g) : cmd_sweep_all<float>(g);
        } else if (cross->parsed()) {
            const auto r = load_sweep_csv(cin.empty() ? g.out_dir / "results.csv" : fs::path(cin));
            const auto x = find_crossover(curve_of(r, ca), curve_of(r, cb));
            if (x) std::printf("%.6f\n", *x);
            else std::printf("none\n");
        } else if (plot->parsed()) {
            const auto r = load_sweep_csv(pin);
            std::vector<Curve> curves;
            for (const auto& id : r.network_ids()) curves.push_back(curve_of(r, id));
            PlotOptions o;
            o.markers = pmarkers;
            double hi = 0.0;
            for (const auto& c : curves) hi = std::max(hi, c.levels.back());
            o.x_max = hi > 0.0 ? hi : 1.0;
            emit_plot(curves, pout, o);
            std::printf("%s\n", pout.c_str());
        } else if (inf->parsed()) {
            return f64 ? cmd_infer<double>(g, ibundle, iimage, iindex, icount, imeas, ilog)
                       : cmd_infer<float>(g, ibundle, iimage, iindex, icount, imeas, ilog);
        }
    } catch (const CLI::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
