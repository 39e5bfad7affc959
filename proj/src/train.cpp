#include "regfactor/train.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <numeric>
#include <ostream>

#include "regfactor/config.hpp"
#include "regfactor/errors.hpp"
#include "regfactor/metrics.hpp"
#include "regfactor/netpbm.hpp"
#include "regfactor/ops.hpp"

namespace fs = std::filesystem;

namespace regfactor {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr std::string_view kMagic = "GPER";
constexpr std::string_view kMomentPrefix[2] = {"optimizer.m.", "optimizer.v."};

Tensor stack_images(std::span<const RegistrationSample* const> samples, bool moving) {
    const Tensor& first = moving ? samples[0]->moving : samples[0]->fixed;
    const int64_t h = first.dim(0), w = first.dim(1);
    Tensor out(Shape{static_cast<int64_t>(samples.size()), 1, h, w});
    for (size_t i = 0; i < samples.size(); ++i) {
        const Tensor& img = moving ? samples[i]->moving : samples[i]->fixed;
        if (img.shape() != first.shape()) throw ShapeError("batch images differ in size");
        std::copy(img.data().begin(), img.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(i * img.numel()));
    }
    return out;
}

template <typename T>
void put(std::string& out, T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

class Reader {
public:
    explicit Reader(std::string_view bytes) : bytes_(bytes) {}

    template <typename T>
    T get() {
        T v;
        std::memcpy(&v, take(sizeof(T)).data(), sizeof(T));
        return v;
    }
    std::string_view take(size_t n) {
        if (n > bytes_.size() - pos_) throw FormatError("checkpoint: truncated");
        const auto s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == bytes_.size(); }

private:
    std::string_view bytes_;
    size_t pos_ = 0;
};

void put_tensor(std::string& out, std::string_view name, const Shape& shape, std::span<const double> values) {
    put<uint32_t>(out, static_cast<uint32_t>(name.size()));
    out += name;
    put<uint32_t>(out, static_cast<uint32_t>(shape.size()));
    for (int64_t d : shape) put<int64_t>(out, d);
    const size_t at = out.size();
    out.resize(at + values.size() * sizeof(double));
    std::memcpy(out.data() + at, values.data(), values.size() * sizeof(double));
}

std::string state_text(const Checkpoint& c) {
    std::string s = c.model.to_text() + c.train.to_text();
    s += "epoch=" + std::to_string(c.epoch) + "\n";
    s += "step=" + std::to_string(c.step) + "\n";
    s += "best_ssim=" + format_double(c.best_ssim) + "\n";
    s += "adam_step=" + std::to_string(c.adam.step) + "\n";
    s += "adam_beta1=" + format_double(c.adam.beta1) + "\n";
    s += "adam_beta2=" + format_double(c.adam.beta2) + "\n";
    s += "adam_eps=" + format_double(c.adam.eps) + "\n";
    s += "rng=" + c.rng_state + "\n";
    return s;
}

std::string step_rows(std::span<const StepRecord> steps) {
    std::string out;
    for (const auto& s : steps) {
        out += std::to_string(s.epoch) + "," + std::to_string(s.step) + "," + format_double(s.lr) + "," +
               format_double(s.loss.recon) + "," + format_double(s.loss.scene) + "," + format_double(s.loss.total) + "\n";
    }
    return out;
}

std::string epoch_row(const EpochRecord& e) {
    std::string row = std::to_string(e.epoch);
    for (double v : {e.mean.recon, e.mean.scene, e.mean.total, e.val_ncc, e.val_ssim, e.val_psnr}) row += "," + format_double(v);
    return row + "," + std::to_string(e.skipped) + "\n";
}

void append_file(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::app);
    if (!f) throw FormatError("cannot write '" + path.string() + "'");
    f << text;
}

Checkpoint snapshot(const RegistrationModel& model, const TrainConfig& config, const AdamState& adam, int epoch,
                    int64_t step, double best_ssim, const Rng& rng) {
    Checkpoint c;
    c.model = model.config();
    c.train = config;
    c.epoch = epoch;
    c.step = step;
    c.best_ssim = best_ssim;
    c.rng_state = rng.state();
    c.params = model.params();
    c.adam = adam;
    return c;
}

}  // namespace

void TrainConfig::validate() const {
    auto require = [](bool ok, const char* what) {
        if (!ok) throw ContractError(std::string("train config: ") + what);
    };
    require(lr > 0.0, "lr must be positive");
    require(weight_decay >= 0.0, "weight_decay must be >= 0");
    require(epochs >= 0, "epochs must be >= 0");
    require(batch >= 1, "batch must be >= 1");
    require(clip_norm > 0.0, "clip_norm must be positive");
    require(lambda >= 0.0, "lambda must be >= 0");
}

bool TrainConfig::apply(const std::string& key, const std::string& value) {
    if (key == "lr") lr = parse_double(key, value);
    else if (key == "weight_decay") weight_decay = parse_double(key, value);
    else if (key == "epochs") epochs = parse_int(key, value);
    else if (key == "batch") batch = parse_int(key, value);
    else if (key == "clip_norm") clip_norm = parse_double(key, value);
    else if (key == "lambda") lambda = parse_double(key, value);
    else if (key == "seed") seed = parse_u64(key, value);
    else return false;
    return true;
}

std::string TrainConfig::to_text() const {
    return "lr=" + format_double(lr) + "\nweight_decay=" + format_double(weight_decay) +
           "\nepochs=" + std::to_string(epochs) + "\nbatch=" + std::to_string(batch) +
           "\nclip_norm=" + format_double(clip_norm) + "\nlambda=" + format_double(lambda) +
           "\nseed=" + std::to_string(seed) + "\n";
}

double cosine_lr(double epoch, double total, double lr0) {
    if (total <= 0.0) return lr0;
    const double e = std::clamp(epoch, 0.0, total);
    return std::max(0.0, lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * e / total)));
}

double grad_norm(const ModelParams& params) {
    double sq = 0.0;
    for (const auto& [name, t] : params)
        for (double g : t.grad()) sq += g * g;
    return std::sqrt(sq);
}

double clip_grad_norm(ModelParams& params, double max_norm) {
    const double norm = grad_norm(params);
    if (!std::isfinite(norm)) throw NumericError("clip_grad_norm: gradient norm is not finite");
    if (norm <= max_norm) return 1.0;
    const double scale = max_norm / norm;
    for (auto& [name, t] : params)
        for (double& g : t.grad()) g *= scale;
    return scale;
}

void adam_step(ModelParams& params, AdamState& state, double lr, double weight_decay) {
    const int64_t t = state.step + 1;
    const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(t));

    struct Pending {
        std::vector<double> p, m, v;
    };
    std::map<std::string_view, Pending> pending;
    for (const auto& [name, tensor] : params) {
        const size_t n = tensor.numel();
        const auto grad = tensor.grad();
        auto mi = state.m.find(name);
        auto vi = state.v.find(name);
        Pending next;
        next.p.assign(tensor.data().begin(), tensor.data().end());
        next.m = mi == state.m.end() ? std::vector<double>(n, 0.0) : mi->second;
        next.v = vi == state.v.end() ? std::vector<double>(n, 0.0) : vi->second;
        if (next.m.size() != n || next.v.size() != n) throw ShapeError("adam_step: moment size mismatch for " + name);
        for (size_t i = 0; i < n; ++i) {
            const double g = grad.empty() ? 0.0 : grad[i];
            next.p[i] -= lr * weight_decay * next.p[i];
            next.m[i] = state.beta1 * next.m[i] + (1.0 - state.beta1) * g;
            next.v[i] = state.beta2 * next.v[i] + (1.0 - state.beta2) * g * g;
            next.p[i] -= lr * (next.m[i] / c1) / (std::sqrt(next.v[i] / c2) + state.eps);
            if (!std::isfinite(next.p[i])) throw NumericError("adam_step: non-finite update for " + name);
        }
        pending.emplace(name, std::move(next));
    }
    for (auto& [name, tensor] : params) {
        Pending& next = pending.at(name);
        std::copy(next.p.begin(), next.p.end(), tensor.data().begin());
        state.m[name] = std::move(next.m);
        state.v[name] = std::move(next.v);
    }
    state.step = t;
}

LossReport train_step(RegistrationModel& model, std::span<const RegistrationSample* const> samples,
                      std::span<FrameCache* const> caches, AdamState& adam, const TrainConfig& config, double lr) {
    if (samples.empty() || samples.size() != caches.size()) throw ContractError("train_step: need one cache per sample");
    std::vector<FrameRef> frames;
    for (size_t i = 0; i < samples.size(); ++i) frames.push_back({samples[i]->t, samples[i]->sequence_id, caches[i]});
    Tape tape;
    const Var fixed = tape.constant(stack_images(samples, false));
    const RegistrationForward fwd = model.forward(tape, tape.constant(stack_images(samples, true)), fixed, frames);
    const LossTerms terms = total_loss(model, tape, fixed, fwd, config.lambda);
    model.params().zero_grad();
    tape.backward(terms.total);
    clip_grad_norm(model.params(), config.clip_norm);
    adam_step(model.params(), adam, lr, config.weight_decay);
    return terms.report();
}

LossReport batch_loss(RegistrationModel& model, std::span<const RegistrationSample* const> samples, double lambda) {
    std::map<int64_t, FrameCache> caches;
    std::vector<FrameRef> frames;
    for (const auto* s : samples) {
        auto it = caches.try_emplace(s->sequence_id, model.config().window).first;
        frames.push_back({s->t, s->sequence_id, &it->second});
    }
    Tape tape;
    const Var fixed = tape.constant(stack_images(samples, false));
    const RegistrationForward fwd = model.forward(tape, tape.constant(stack_images(samples, true)), fixed, frames);
    return total_loss(model, tape, fixed, fwd, lambda).report();
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
    std::string out(kMagic);
    put<uint32_t>(out, Checkpoint::kVersion);
    const std::string text = state_text(ckpt);
    put<uint64_t>(out, text.size());
    out += text;
    const auto count = ckpt.params.size() + ckpt.adam.m.size() + ckpt.adam.v.size();
    put<uint32_t>(out, static_cast<uint32_t>(count));
    for (const auto& [name, t] : ckpt.params) put_tensor(out, name, t.shape(), t.data());
    for (int k = 0; k < 2; ++k) {
        for (const auto& [name, values] : k == 0 ? ckpt.adam.m : ckpt.adam.v) {
            const Shape& shape = ckpt.params.contains(name) ? ckpt.params.at(name).shape()
                                                             : Shape{static_cast<int64_t>(values.size())};
            put_tensor(out, std::string(kMomentPrefix[k]) + name, shape, values);
        }
    }
    return out;
}

Checkpoint decode_checkpoint(std::string_view bytes) {
    Reader in(bytes);
    if (bytes.size() < kMagic.size() || in.take(kMagic.size()) != kMagic) throw FormatError("checkpoint: bad magic");
    const auto version = in.get<uint32_t>();
    if (version != Checkpoint::kVersion) {
        throw FormatError("checkpoint: unsupported version " + std::to_string(version) + " (expected " +
                          std::to_string(Checkpoint::kVersion) + ")");
    }
    const auto text_len = in.get<uint64_t>();
    if (text_len > bytes.size()) throw FormatError("checkpoint: truncated");
    const std::string_view text = in.take(static_cast<size_t>(text_len));

    Checkpoint c;
    try {
        for (const auto& e : parse_key_values(text)) {
            if (c.model.apply(e.key, e.value) || c.train.apply(e.key, e.value)) continue;
            if (e.key == "epoch") c.epoch = parse_int(e.key, e.value);
            else if (e.key == "step") c.step = parse_int(e.key, e.value);
            else if (e.key == "best_ssim") c.best_ssim = parse_double(e.key, e.value);
            else if (e.key == "adam_step") c.adam.step = parse_int(e.key, e.value);
            else if (e.key == "adam_beta1") c.adam.beta1 = parse_double(e.key, e.value);
            else if (e.key == "adam_beta2") c.adam.beta2 = parse_double(e.key, e.value);
            else if (e.key == "adam_eps") c.adam.eps = parse_double(e.key, e.value);
            else if (e.key == "rng") c.rng_state = e.value;
            else throw FormatError("line " + std::to_string(e.line) + ": unknown key '" + e.key + "'");
        }
        c.model.validate();
        c.train.validate();
    } catch (const std::exception& e) {
        throw FormatError(std::string("checkpoint config: ") + e.what());
    }

    const auto count = in.get<uint32_t>();
    for (uint32_t i = 0; i < count; ++i) {
        const std::string name(in.take(in.get<uint32_t>()));
        const auto rank = in.get<uint32_t>();
        if (rank > 8) throw FormatError("checkpoint: tensor '" + name + "' has rank " + std::to_string(rank));
        Shape shape;
        for (uint32_t r = 0; r < rank; ++r) {
            const auto d = in.get<int64_t>();
            if (d < 0 || d > (int64_t{1} << 32)) throw FormatError("checkpoint: bad dimension in '" + name + "'");
            shape.push_back(d);
        }
        const auto n = static_cast<size_t>(shape_numel(shape));
        if (n > bytes.size() / sizeof(double)) throw FormatError("checkpoint: truncated");
        const std::string_view raw = in.take(n * sizeof(double));
        std::vector<double> values(n);
        std::memcpy(values.data(), raw.data(), raw.size());
        if (name.starts_with(kMomentPrefix[0])) {
            c.adam.m[name.substr(kMomentPrefix[0].size())] = std::move(values);
        } else if (name.starts_with(kMomentPrefix[1])) {
            c.adam.v[name.substr(kMomentPrefix[1].size())] = std::move(values);
        } else {
            if (c.params.contains(name)) throw FormatError("checkpoint: duplicate tensor '" + name + "'");
            Tensor& t = c.params.add(name, shape);
            std::copy(values.begin(), values.end(), t.data().begin());
        }
    }
    if (!in.done()) throw FormatError("checkpoint: trailing bytes");
    return c;
}

void save_checkpoint(const Checkpoint& ckpt, const fs::path& path) { write_file(path.string(), encode_checkpoint(ckpt)); }

Checkpoint load_checkpoint(const fs::path& path) {
    if (!fs::exists(path)) throw FormatError("checkpoint '" + path.string() + "' does not exist");
    return decode_checkpoint(read_file(path.string()));
}

std::string train_log_csv(std::span<const StepRecord> steps) {
    return std::string(kTrainLogHeader) + "\n" + step_rows(steps);
}

FitResult fit(const ModelConfig& model_config, const TrainConfig& config, const FitOptions& options) {
    config.validate();
    model_config.validate();
    const DatasetConfig data_config = read_dataset_config(options.data);
    if (data_config.size != model_config.image_size) {
        throw ContractError("model image_size " + std::to_string(model_config.image_size) +
                            " does not match dataset size " + std::to_string(data_config.size));
    }
    const DatasetSplit train = load_split(options.data, "train", options.workers);
    std::optional<DatasetSplit> val;
    if (data_config.val_pairs > 0) val = load_split(options.data, "val", options.workers);

    std::optional<RegistrationModel> model;
    AdamState adam;
    Rng rng(derive_seed(config.seed, {0x5348554646ULL}));
    int start_epoch = 0;
    int64_t step = 0;
    double best_ssim = -1.0;
    FitResult result;
    if (options.resume) {
        const Checkpoint& r = *options.resume;
        if (!(r.model == model_config)) throw ContractError("resume: model config differs from the checkpoint");
        model.emplace(r.model, r.params);
        adam = r.adam;
        rng.set_state(r.rng_state);
        start_epoch = r.epoch;
        step = r.step;
        best_ssim = r.best_ssim;
        result.best = r;
        if (!options.out.empty() && fs::exists(options.out / "best.gper")) result.best = load_checkpoint(options.out / "best.gper");
    } else {
        model.emplace(model_config, config.seed);
    }

    if (!options.out.empty()) {
        fs::create_directories(options.out);
        if (!options.resume || !fs::exists(options.out / "train_log.csv")) {
            write_file((options.out / "train_log.csv").string(), std::string(kTrainLogHeader) + "\n");
            write_file((options.out / "epochs.csv").string(), "epoch,recon,scene,total,val_ncc,val_ssim,val_psnr,skipped\n");
        }
    }

    std::vector<const RegistrationSample*> stream;
    stream.reserve(train.pairs());
    const auto steps_per_epoch = static_cast<int64_t>((train.pairs() + static_cast<size_t>(config.batch) - 1) /
                                                      static_cast<size_t>(config.batch));
    const int stop = std::min(config.epochs, options.stop_after.value_or(config.epochs));

    result.last = snapshot(*model, config, adam, start_epoch, step, best_ssim, rng);
    if (!options.resume) result.best = result.last;

    for (int epoch = start_epoch; epoch < stop; ++epoch) {
        std::vector<size_t> order(train.sequences.size());
        std::iota(order.begin(), order.end(), size_t{0});
        for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(i) - 1))]);
        stream.clear();
        std::vector<FrameCache*> cache_of;
        std::vector<FrameCache> caches(train.sequences.size(), FrameCache(model->config().window));
        for (size_t s : order) {
            for (const auto& sample : train.sequences[s]) {
                stream.push_back(&sample);
                cache_of.push_back(&caches[s]);
            }
        }

        EpochRecord rec;
        rec.epoch = epoch + 1;
        std::vector<StepRecord> epoch_steps;
        for (int64_t b = 0; b < steps_per_epoch; ++b) {
            const size_t lo = static_cast<size_t>(b * config.batch);
            const size_t hi = std::min(stream.size(), lo + static_cast<size_t>(config.batch));
            const double lr = cosine_lr(epoch + static_cast<double>(b) / static_cast<double>(steps_per_epoch),
                                        config.epochs, config.lr);
            ++step;
            try {
                const LossReport loss = train_step(*model, std::span(stream).subspan(lo, hi - lo),
                                                   std::span(cache_of).subspan(lo, hi - lo), adam, config, lr);
                epoch_steps.push_back({epoch + 1, step, lr, loss});
            } catch (const NumericError& e) {
                ++rec.skipped;
                if (options.log) *options.log << "epoch " << epoch + 1 << " step " << step << " skipped: " << e.what() << '\n';
            }
        }
        for (const auto& s : epoch_steps) {
            rec.mean.recon += s.loss.recon;
            rec.mean.scene += s.loss.scene;
            rec.mean.total += s.loss.total;
        }
        if (!epoch_steps.empty()) {
            const auto n = static_cast<double>(epoch_steps.size());
            rec.mean.recon /= n;
            rec.mean.scene /= n;
            rec.mean.total /= n;
        }
        rec.mean.lambda = config.lambda;

        bool improved = !val;
        if (val) {
            const MetricsReport report = evaluate_split(*model, *val, options.workers);
            rec.val_ncc = report.summary(&SampleMetrics::ncc).mean;
            rec.val_ssim = report.summary(&SampleMetrics::ssim).mean;
            rec.val_psnr = report.summary(&SampleMetrics::psnr).mean;
            improved = rec.val_ssim > best_ssim;
            if (improved) best_ssim = rec.val_ssim;
        }
        result.last = snapshot(*model, config, adam, epoch + 1, step, best_ssim, rng);
        if (improved) result.best = result.last;

        if (options.log) {
            *options.log << "epoch " << rec.epoch << "/" << config.epochs << " loss " << rec.mean.total << " (recon "
                         << rec.mean.recon << ", scene " << rec.mean.scene << ") val ssim " << rec.val_ssim << " psnr "
                         << rec.val_psnr << std::endl;
        }
        if (!options.out.empty()) {
            append_file(options.out / "train_log.csv", step_rows(epoch_steps));
            append_file(options.out / "epochs.csv", epoch_row(rec));
            save_checkpoint(result.last, options.out / "last.gper");
            save_checkpoint(result.best, options.out / "best.gper");
        }
        result.steps.insert(result.steps.end(), epoch_steps.begin(), epoch_steps.end());
        result.epochs.push_back(rec);
    }
    if (!options.out.empty() && result.epochs.empty()) {
        save_checkpoint(result.last, options.out / "last.gper");
        save_checkpoint(result.best, options.out / "best.gper");
    }
    return result;
}

}  // namespace regfactor
