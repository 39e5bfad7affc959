#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>

#include "regfactor/config.hpp"
#include "regfactor/dataset.hpp"
#include "regfactor/errors.hpp"
#include "regfactor/metrics.hpp"
#include "regfactor/netpbm.hpp"
#include "regfactor/train.hpp"

namespace fs = std::filesystem;

namespace regfactor::cli {

namespace {

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct GenArgs {
    std::string out;
    int64_t pairs = 512;
    std::optional<int64_t> val_pairs, test_pairs;
    int size = 64;
    int seq_len = 4;
    uint64_t seed = 1;
    bool force = false;
};

struct TrainArgs {
    std::string config, data, out, resume;
    std::optional<int> epochs, batch;
    std::optional<double> lr, lambda;
    std::optional<uint64_t> seed;
};

struct EvalArgs {
    std::string ckpt, data, split = "test", out;
    bool identity = false;
    int images = -1;
};

struct InferArgs {
    std::string ckpt, moving, fixed, out;
    int64_t t = 0;
};

struct BenchArgs {
    std::string ckpt;
    std::optional<int> size;
    int iters = 50;
    int warmup = 5;
};

std::string seq_name(int64_t seq, int64_t t) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%04lld_%lld", static_cast<long long>(seq), static_cast<long long>(t));
    return buf;
}

int cmd_gen(const GenArgs& a, std::ostream& out) {
    DatasetConfig cfg;
    cfg.size = a.size;
    cfg.seq_len = a.seq_len;
    cfg.seed = a.seed;
    cfg.train_pairs = a.pairs;
    cfg.val_pairs = a.val_pairs.value_or(std::max<int64_t>(1, a.pairs / 8));
    cfg.test_pairs = a.test_pairs.value_or(std::max<int64_t>(1, a.pairs / 8));
    try {
        cfg.validate();
    } catch (const ContractError& e) {
        throw UsageError(e.what());
    }
    const uint64_t checksum = write_dataset(cfg, a.out, worker_count(), a.force);
    for (auto split : kSplits) {
        const auto lengths = sequence_lengths(cfg.pairs(split), cfg.seq_len);
        out << split << ": " << cfg.pairs(split) << " pairs in " << lengths.size() << " sequences\n";
    }
    out << "checksum " << hex64(checksum) << '\n';
    return kOk;
}

int cmd_train(const TrainArgs& a, std::ostream& out) {
    ModelConfig model = ModelConfig::desk();
    TrainConfig train;
    std::string data = a.data, out_dir = a.out;
    bool size_given = false;
    if (!a.config.empty()) {
        if (!fs::exists(a.config)) throw UsageError("config file '" + a.config + "' does not exist");
        std::vector<ConfigEntry> entries;
        try {
            entries = parse_key_values(read_file(a.config));
        } catch (const FormatError& ex) {
            throw UsageError(a.config + ": " + ex.what());
        }
        for (const auto& e : entries) {
            const std::string where = a.config + ": line " + std::to_string(e.line) + ": ";
            try {
                if (e.key == "data") {
                    if (data.empty()) data = e.value;
                } else if (e.key == "out") {
                    if (out_dir.empty()) out_dir = e.value;
                } else if (model.apply(e.key, e.value)) {
                    size_given = size_given || e.key == "image_size";
                } else if (!train.apply(e.key, e.value)) {
                    throw UsageError(where + "unknown key '" + e.key + "'");
                }
            } catch (const FormatError& ex) {
                throw UsageError(where + ex.what());
            }
        }
    }
    if (a.epochs) train.epochs = *a.epochs;
    if (a.batch) train.batch = *a.batch;
    if (a.lr) train.lr = *a.lr;
    if (a.lambda) train.lambda = *a.lambda;
    if (a.seed) train.seed = *a.seed;
    if (data.empty()) throw UsageError("train: --data is required");
    if (out_dir.empty()) throw UsageError("train: --out is required");

    const DatasetConfig dataset = read_dataset_config(data);
    std::optional<Checkpoint> resume;
    if (!a.resume.empty()) {
        resume = load_checkpoint(a.resume);
        model = resume->model;
    } else if (!size_given) {
        model.image_size = dataset.size;
    }
    try {
        model.validate();
        train.validate();
    } catch (const ContractError& e) {
        throw UsageError(e.what());
    }
    if (model.image_size != dataset.size) {
        throw UsageError("image_size " + std::to_string(model.image_size) + " does not match dataset size " +
                         std::to_string(dataset.size));
    }

    const std::string resolved = "data=" + data + "\nout=" + out_dir + "\n" + model.to_text() + train.to_text();
    fs::create_directories(out_dir);
    write_file((fs::path(out_dir) / "config.txt").string(), resolved);
    out << "# resolved config\n" << resolved << std::flush;

    FitOptions options;
    options.data = data;
    options.out = out_dir;
    options.workers = worker_count();
    options.resume = std::move(resume);
    options.log = &out;
    const FitResult result = fit(model, train, options);
    out << "params " << param_count(result.last.params) << '\n';
    out << "epochs " << result.last.epoch << ", steps " << result.last.step << '\n';
    if (!result.epochs.empty()) out << "best val ssim " << result.best.best_ssim << '\n';
    out << "checkpoint " << (fs::path(out_dir) / "best.gper").string() << '\n';
    return kOk;
}

int cmd_eval(const EvalArgs& a, std::ostream& out) {
    if (a.ckpt.empty() && !a.identity) throw UsageError("eval: --ckpt is required unless --identity is given");
    const DatasetSplit split = load_split(a.data, a.split, worker_count());
    std::optional<RegistrationModel> model;
    int window = ModelConfig{}.window;
    if (!a.identity) {
        Checkpoint ckpt = load_checkpoint(a.ckpt);
        if (ckpt.model.image_size != split.size) {
            throw FormatError("checkpoint image_size " + std::to_string(ckpt.model.image_size) +
                              " does not match dataset size " + std::to_string(split.size));
        }
        model.emplace(ckpt.model, std::move(ckpt.params));
        window = model->config().window;
    }
    const fs::path dir(a.out);
    const fs::path images = dir / "images";
    fs::create_directories(images);
    // Position of each sample in split order, for the --images limit.
    std::map<int64_t, int64_t> offset;
    int64_t total = 0;
    for (const auto& seq : split.sequences) {
        offset[seq.front().sequence_id] = total;
        total += static_cast<int64_t>(seq.size());
    }
    const int64_t limit = a.images < 0 ? total : std::min<int64_t>(a.images, total);
    const SampleSink sink = [&](const RegistrationSample& s, const Tensor& registered) {
        if (offset.at(s.sequence_id) + s.t >= limit) return;
        const std::string stem = (images / (a.split + "_" + seq_name(s.sequence_id, s.t))).string();
        write_pgm(registered, stem + "_registered.pgm");
        write_pgm(diff_map(registered, s.fixed), stem + "_diff.pgm");
        write_ppm(rg_overlay(s.fixed, registered), stem + "_overlay.ppm");
        write_ppm(rg_overlay(s.fixed, s.moving), stem + "_overlay_unreg.ppm");
    };
    const Registrar registrar = model ? model_registrar(*model) : identity_registrar();
    const MetricsReport report = evaluate_split(registrar, split, window, worker_count(), sink);
    write_file((dir / "metrics.csv").string(), report.to_csv());
    write_file((dir / "summary.txt").string(), report.summary_text());
    out << "evaluated " << report.samples.size() << " samples of split '" << a.split << "'" << (a.identity ? " (identity)" : "")
        << ", images for " << limit << '\n';
    out << report.summary_text();
    return kOk;
}

int cmd_infer(const InferArgs& a, std::ostream& out) {
    const Checkpoint ckpt = load_checkpoint(a.ckpt);
    const Tensor moving = read_pgm(a.moving);
    const Tensor fixed = read_pgm(a.fixed);
    if (moving.shape() != fixed.shape()) {
        throw ShapeError("moving image " + shape_str(moving.shape()) + " and fixed image " + shape_str(fixed.shape()) +
                         " differ in size");
    }
    RegistrationModel model(ckpt.model, ckpt.params);
    FrameCache cache(model.config().window);
    const FrameRef ref{a.t, 0, &cache};
    const Shape batch{1, 1, moving.dim(0), moving.dim(1)};
    const Tensor registered =
        model.register_images(moving.reshaped(batch), fixed.reshaped(batch), std::span(&ref, 1)).reshaped(fixed.shape());
    const fs::path path(a.out);
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    write_pgm(registered, path.string());
    const fs::path diff = path.parent_path() / (path.stem().string() + "_diff.pgm");
    write_pgm(diff_map(registered, fixed), diff.string());
    const bool measurable = fixed.dim(0) >= 11 && fixed.dim(1) >= 11;
    out << "wrote " << path.string() << " and " << diff.string() << '\n';
    if (measurable) {
        out << "ssim " << ssim(registered, fixed) << " (unregistered " << ssim(moving, fixed) << ")\n";
        out << "psnr " << psnr(registered, fixed) << " (unregistered " << psnr(moving, fixed) << ")\n";
    }
    return kOk;
}

int cmd_bench(const BenchArgs& a, std::ostream& out) {
    if (a.iters < 1 || a.warmup < 0) throw UsageError("bench: --iters must be >= 1 and --warmup >= 0");
    const Checkpoint ckpt = load_checkpoint(a.ckpt);
    RegistrationModel model(ckpt.model, ckpt.params);
    const int size = a.size.value_or(ckpt.model.image_size);
    if (size < 8 || size % 8 != 0) throw UsageError("bench: --size must be a positive multiple of 8");
    Rng rng(7);
    Tensor moving(Shape{1, 1, size, size}), fixed(Shape{1, 1, size, size});
    for (double& v : moving.data()) v = rng.uniform();
    for (double& v : fixed.data()) v = rng.uniform();

    std::vector<double> ms;
    for (int i = 0; i < a.warmup + a.iters; ++i) {
        FrameCache cache(model.config().window);
        const FrameRef ref{0, 0, &cache};
        const auto t0 = std::chrono::steady_clock::now();
        model.register_images(moving, fixed, std::span(&ref, 1));
        const double elapsed = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        if (i >= a.warmup) ms.push_back(elapsed);
    }
    std::vector<double> sorted = ms;
    std::sort(sorted.begin(), sorted.end());
    const auto n = sorted.size();
    const double mean = mean_std(ms).mean;
    const double median = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
    const double p95 = sorted[static_cast<size_t>(std::ceil(0.95 * static_cast<double>(n))) - 1];
    out << std::fixed << std::setprecision(3);
    out << "size " << size << "x" << size << '\n';
    out << "params " << param_count(model.params()) << '\n';
    out << "iters " << n << '\n';
    out << "mean_ms " << mean << '\n';
    out << "median_ms " << median << '\n';
    out << "p95_ms " << p95 << '\n';
    out << "fps " << 1000.0 / mean << '\n';
    return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Scene/appearance factorized image registration toolkit", "regfactor"};
    app.require_subcommand(1);

    GenArgs gen;
    auto* g = app.add_subcommand("gen", "Generate a synthetic registration dataset");
    g->add_option("--out", gen.out, "Output directory")->required();
    g->add_option("--pairs", gen.pairs, "Training pairs (val/test default to pairs/8)")->check(CLI::PositiveNumber);
    g->add_option("--val-pairs", gen.val_pairs, "Validation pairs");
    g->add_option("--test-pairs", gen.test_pairs, "Test pairs");
    g->add_option("--size", gen.size, "Image side length (multiple of 8)");
    g->add_option("--seq-len", gen.seq_len, "Frames per sequence");
    g->add_option("--seed", gen.seed, "Master seed");
    g->add_flag("--force", gen.force, "Replace an existing dataset");

    TrainArgs train;
    auto* t = app.add_subcommand("train", "Train a model");
    t->add_option("--config", train.config, "key=value config file");
    t->add_option("--data", train.data, "Dataset root");
    t->add_option("--out", train.out, "Run directory");
    t->add_option("--epochs", train.epochs);
    t->add_option("--batch", train.batch);
    t->add_option("--lr", train.lr);
    t->add_option("--lambda", train.lambda);
    t->add_option("--seed", train.seed);
    t->add_option("--resume", train.resume, "Continue from a checkpoint");

    EvalArgs eval;
    auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
    e->add_option("--ckpt", eval.ckpt);
    e->add_option("--data", eval.data)->required();
    e->add_option("--split", eval.split)->check(CLI::IsMember({"train", "val", "test"}));
    e->add_option("--out", eval.out)->required();
    e->add_flag("--identity", eval.identity, "Use the moving image as the registered output");
    e->add_option("--images", eval.images, "Write image artifacts for the first N samples (-1: all)");

    InferArgs infer;
    auto* i = app.add_subcommand("infer", "Register a single image pair");
    i->add_option("--ckpt", infer.ckpt)->required();
    i->add_option("--moving", infer.moving)->required();
    i->add_option("--fixed", infer.fixed)->required();
    i->add_option("--t", infer.t, "Frame index")->check(CLI::NonNegativeNumber);
    i->add_option("--out", infer.out)->required();

    BenchArgs bench;
    auto* b = app.add_subcommand("bench", "Time forward passes");
    b->add_option("--ckpt", bench.ckpt)->required();
    b->add_option("--size", bench.size);
    b->add_option("--iters", bench.iters);
    b->add_option("--warmup", bench.warmup);

    try {
        app.parse(std::vector<std::string>(args.rbegin(), args.rend()));
    } catch (const CLI::ParseError& ex) {
        const int code = app.exit(ex, out, err);
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (g->parsed()) return cmd_gen(gen, out);
        if (t->parsed()) return cmd_train(train, out);
        if (e->parsed()) return cmd_eval(eval, out);
        if (i->parsed()) return cmd_infer(infer, out);
        return cmd_bench(bench, out);
    } catch (const UsageError& ex) {
        err << "error: " << ex.what() << '\n';
        return kUsage;
    } catch (const ContractError& ex) {
        err << "error: " << ex.what() << '\n';
        return kUsage;
    } catch (const RangeError& ex) {
        err << "error: " << ex.what() << '\n';
        return kUsage;
    } catch (const NumericError& ex) {
        err << "numeric error: " << ex.what() << '\n';
        return kNumeric;
    } catch (const std::exception& ex) {
        err << "error: " << ex.what() << '\n';
        return kData;
    }
}

}  // namespace regfactor::cli
