#include "regfactor/model.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>

#include "regfactor/config.hpp"
#include "regfactor/errors.hpp"
#include "regfactor/ops.hpp"
#include "regfactor/rng.hpp"

namespace regfactor {

// ---------------------------------------------------------------- config

ModelConfig ModelConfig::desk() {
    ModelConfig c;
    c.image_size = 64;
    return c;
}

void ModelConfig::validate() const {
    auto require = [](bool ok, const char* what) {
        if (!ok) throw ContractError(std::string("model config: ") + what);
    };
    require(image_size >= 8 && image_size % 8 == 0, "image_size must be a positive multiple of 8");
    require(in_channels == 1, "in_channels must be 1 (grayscale)");
    for (int c : encoder_channels) require(c >= 1, "encoder channels must be positive");
    for (int c : decoder_channels) require(c >= 1, "decoder channels must be positive");
    require(scene_channels >= 1 && appearance_dim >= 1 && appearance_hidden >= 1, "widths must be positive");
    require(gpe_dim >= 2 && gpe_dim % 2 == 0, "gpe_dim must be even");
    require(gpe_hidden >= 1, "gpe_hidden must be positive");
    require(heads >= 1 && gpe_dim % heads == 0, "gpe_dim must be divisible by heads");
    require(window >= 0, "window must be >= 0");
    require(alpha >= 0.0, "alpha must be >= 0");
    require(max_frames >= 1, "max_frames must be >= 1");
    require(eps > 0.0, "eps must be positive");
}

bool ModelConfig::apply(const std::string& key, const std::string& value) {
    auto list = [&](auto& arr) {
        const auto v = parse_int_list(key, value);
        if (v.size() != arr.size()) {
            throw FormatError("key '" + key + "' needs " + std::to_string(arr.size()) + " comma-separated values");
        }
        for (size_t i = 0; i < arr.size(); ++i) arr[i] = v[i];
    };
    if (key == "image_size") image_size = parse_int(key, value);
    else if (key == "in_channels") in_channels = parse_int(key, value);
    else if (key == "encoder_channels") list(encoder_channels);
    else if (key == "scene_channels") scene_channels = parse_int(key, value);
    else if (key == "appearance_dim") appearance_dim = parse_int(key, value);
    else if (key == "appearance_hidden") appearance_hidden = parse_int(key, value);
    else if (key == "gpe_dim") gpe_dim = parse_int(key, value);
    else if (key == "gpe_hidden") gpe_hidden = parse_int(key, value);
    else if (key == "heads") heads = parse_int(key, value);
    else if (key == "window") window = parse_int(key, value);
    else if (key == "alpha") alpha = parse_double(key, value);
    else if (key == "max_frames") max_frames = parse_int(key, value);
    else if (key == "decoder_channels") list(decoder_channels);
    else if (key == "eps") eps = parse_double(key, value);
    else return false;
    return true;
}

std::string ModelConfig::to_text() const {
    auto join = [](const auto& arr) {
        std::string s;
        for (size_t i = 0; i < arr.size(); ++i) s += (i ? "," : "") + std::to_string(arr[i]);
        return s;
    };
    std::ostringstream os;
    os << "image_size=" << image_size << '\n'
       << "in_channels=" << in_channels << '\n'
       << "encoder_channels=" << join(encoder_channels) << '\n'
       << "scene_channels=" << scene_channels << '\n'
       << "appearance_dim=" << appearance_dim << '\n'
       << "appearance_hidden=" << appearance_hidden << '\n'
       << "gpe_dim=" << gpe_dim << '\n'
       << "gpe_hidden=" << gpe_hidden << '\n'
       << "heads=" << heads << '\n'
       << "window=" << window << '\n'
       << "alpha=" << format_double(alpha) << '\n'
       << "max_frames=" << max_frames << '\n'
       << "decoder_channels=" << join(decoder_channels) << '\n'
       << "eps=" << format_double(eps) << '\n';
    return os.str();
}

ModelConfig ModelConfig::from_text(std::string_view text) {
    ModelConfig c;
    for (const auto& e : parse_key_values(text)) {
        if (!c.apply(e.key, e.value)) {
            throw FormatError("line " + std::to_string(e.line) + ": unknown model key '" + e.key + "'");
        }
    }
    c.validate();
    return c;
}

// ---------------------------------------------------------------- cache

FrameCache::FrameCache(int capacity) : capacity_(capacity) {
    if (capacity < 0) throw ContractError("frame cache capacity must be >= 0");
}

void FrameCache::push(int64_t sequence_id, std::vector<double> summary) {
    if (sequence_id_ && *sequence_id_ != sequence_id) {
        throw ContractError("frame cache bound to sequence " + std::to_string(*sequence_id_) +
                            " received a frame of sequence " + std::to_string(sequence_id));
    }
    sequence_id_ = sequence_id;
    if (capacity_ == 0) return;
    entries_.push_back(std::move(summary));
    while (entries_.size() > static_cast<size_t>(capacity_)) entries_.pop_front();
}

void FrameCache::reset() {
    entries_.clear();
    sequence_id_.reset();
}

// ---------------------------------------------------------------- params

Tensor& ModelParams::add(std::string name, Shape shape) {
    auto [it, inserted] = tensors_.try_emplace(std::move(name), std::move(shape));
    if (!inserted) throw ContractError("duplicate parameter name '" + it->first + "'");
    it->second.set_requires_grad(true);
    return it->second;
}

Tensor& ModelParams::at(std::string_view name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw ContractError("unknown parameter '" + std::string(name) + "'");
    return it->second;
}

const Tensor& ModelParams::at(std::string_view name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw ContractError("unknown parameter '" + std::string(name) + "'");
    return it->second;
}

void ModelParams::zero_grad() {
    for (auto& [name, t] : tensors_) t.zero_grad();
}

int64_t param_count(const ModelParams& params) {
    int64_t total = 0;
    for (const auto& [name, t] : params) total += static_cast<int64_t>(t.numel());
    return total;
}

std::vector<std::pair<std::string, int64_t>> param_breakdown(const ModelParams& params) {
    std::vector<std::pair<std::string, int64_t>> rows;
    for (const auto& [name, t] : params) {
        const std::string module = name.substr(0, name.find('.'));
        if (rows.empty() || rows.back().first != module) rows.emplace_back(module, 0);
        rows.back().second += static_cast<int64_t>(t.numel());
    }
    return rows;
}

std::string param_breakdown_table(const ModelParams& params) {
    std::ostringstream os;
    const double total = static_cast<double>(param_count(params));
    os << std::left << std::setw(12) << "module" << std::right << std::setw(12) << "params" << std::setw(9) << "share"
       << '\n';
    for (const auto& [module, n] : param_breakdown(params)) {
        os << std::left << std::setw(12) << module << std::right << std::setw(12) << n << std::setw(8) << std::fixed
           << std::setprecision(1) << (total > 0 ? 100.0 * n / total : 0.0) << "%\n";
    }
    os << std::left << std::setw(12) << "total" << std::right << std::setw(12) << param_count(params) << '\n';
    return os.str();
}

// ---------------------------------------------------------------- free functions

std::vector<double> sinusoidal_encoding(int64_t t, int d) {
    if (t < 0) throw ContractError("sinusoidal_encoding: negative frame index");
    if (d < 2 || d % 2 != 0) throw ContractError("sinusoidal_encoding: dimension must be even");
    std::vector<double> p(static_cast<size_t>(d));
    for (int i = 0; i < d / 2; ++i) {
        const double freq = std::pow(10000.0, -2.0 * i / d);
        p[static_cast<size_t>(2 * i)] = std::sin(static_cast<double>(t) * freq);
        p[static_cast<size_t>(2 * i + 1)] = std::cos(static_cast<double>(t) * freq);
    }
    return p;
}

Var adain(const Var& s, const Var& gamma, const Var& beta, double eps) {
    return channel_affine(instance_norm(s, eps), gamma, beta);
}

// ---------------------------------------------------------------- architecture

namespace {

enum class Init { fan_in, zeros, style, embedding };

struct ParamSpec {
    std::string name;
    Shape shape;
    Init init;
};

std::vector<ParamSpec> architecture(const ModelConfig& c) {
    std::vector<ParamSpec> specs;
    auto conv = [&](const std::string& name, int cin, int cout, bool bias) {
        specs.push_back({name + ".w", {cout, cin, 3, 3}, Init::fan_in});
        if (bias) specs.push_back({name + ".b", {cout}, Init::zeros});
    };
    auto dense = [&](const std::string& name, int din, int dout, bool bias) {
        specs.push_back({name + ".w", {dout, din}, Init::fan_in});
        if (bias) specs.push_back({name + ".b", {dout}, Init::zeros});
    };
    const auto& e = c.encoder_channels;

    // Scene encoder: every conv feeds an instance norm, so biases would be inert.
    conv("scene.stem", c.in_channels, e[0], false);
    for (int level = 1; level <= 3; ++level) {
        const std::string p = "scene.down" + std::to_string(level);
        conv(p, e[level - 1], e[level], false);
        conv(p + ".res1", e[level], e[level], false);
        conv(p + ".res2", e[level], e[level], false);
    }
    conv("scene.up1", e[3] + e[2], e[2], false);
    conv("scene.up2", e[2] + e[1], e[1], false);
    conv("scene.up3", e[1] + e[0], e[0], false);
    conv("scene.head", e[0], c.scene_channels, false);

    conv("appearance.conv0", c.in_channels, e[0], true);
    for (int i = 1; i < 4; ++i) conv("appearance.conv" + std::to_string(i), e[i - 1], e[i], true);
    dense("appearance.fc1", e[3], c.appearance_hidden, true);
    dense("appearance.fc2", c.appearance_hidden, c.appearance_dim, true);

    specs.push_back({"gpe.embedding", {c.max_frames, c.gpe_dim}, Init::embedding});
    dense("gpe.query", c.scene_channels, c.gpe_dim, false);
    dense("gpe.key", c.scene_channels, c.gpe_dim, false);
    dense("gpe.value", c.scene_channels, c.gpe_dim, false);
    dense("gpe.out", c.gpe_dim, c.gpe_dim, false);
    dense("gpe.fuse1", 2 * c.gpe_dim, c.gpe_hidden, true);
    dense("gpe.fuse2", c.gpe_hidden, c.gpe_dim, true);
    dense("gpe.proj", c.gpe_dim, c.scene_channels, false);

    int cin = c.scene_channels;
    for (int b = 0; b < 3; ++b) {
        const std::string p = "decoder.block" + std::to_string(b);
        specs.push_back({p + ".style.w", {2 * cin, c.appearance_dim}, Init::fan_in});
        specs.push_back({p + ".style.b", {2 * cin}, Init::style});
        conv(p + ".conv", cin, c.decoder_channels[static_cast<size_t>(b)], true);
        cin = c.decoder_channels[static_cast<size_t>(b)];
    }
    conv("decoder.head", cin, 1, true);
    return specs;
}

void require_divisible(const Var& image, int by, const char* what) {
    if (image.shape().size() != 4 || image.dim(1) != 1) {
        throw ShapeError(std::string(what) + ": expected [N,1,H,W], got " + shape_str(image.shape()));
    }
    if (image.dim(2) % by != 0 || image.dim(3) % by != 0) {
        throw ShapeError(std::string(what) + ": spatial size " + std::to_string(image.dim(2)) + "x" +
                         std::to_string(image.dim(3)) + " not divisible by " + std::to_string(by));
    }
}

}  // namespace

RegistrationModel::RegistrationModel(ModelConfig config, uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    build(seed);
}

RegistrationModel::RegistrationModel(ModelConfig config, ModelParams params)
    : config_(std::move(config)), params_(std::move(params)) {
    config_.validate();
    const auto specs = architecture(config_);
    if (specs.size() != params_.size()) {
        throw FormatError("parameter set has " + std::to_string(params_.size()) + " tensors, architecture needs " +
                          std::to_string(specs.size()));
    }
    for (const auto& s : specs) {
        if (!params_.contains(s.name)) throw FormatError("missing parameter '" + s.name + "'");
        Tensor& t = params_.at(s.name);
        if (t.shape() != s.shape) {
            throw FormatError("parameter '" + s.name + "' has shape " + shape_str(t.shape()) + ", expected " +
                              shape_str(s.shape));
        }
        t.set_requires_grad(true);
    }
}

void RegistrationModel::build(uint64_t seed) {
    Rng rng(seed);
    for (const auto& s : architecture(config_)) {
        Tensor& t = params_.add(s.name, s.shape);
        switch (s.init) {
            case Init::fan_in: {
                int64_t fan_in = 1;
                for (size_t a = 1; a < s.shape.size(); ++a) fan_in *= s.shape[a];
                const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
                for (double& v : t.data()) v = rng.uniform(-bound, bound);
                break;
            }
            case Init::zeros:
                break;
            case Init::style:
                // First half generates gamma: start at identity modulation.
                for (size_t i = 0; i < t.numel() / 2; ++i) t[i] = 1.0;
                break;
            case Init::embedding:
                for (double& v : t.data()) v = rng.normal(0.0, 0.02);
                break;
        }
    }
}

Var RegistrationModel::conv_in_relu(Tape& tape, const Var& x, const std::string& name, int stride) {
    return relu(instance_norm(conv2d(x, param(tape, name + ".w"), std::nullopt, stride, 1), config_.eps));
}

Var RegistrationModel::residual(Tape& tape, const Var& x, const std::string& prefix) {
    Var h = conv_in_relu(tape, x, prefix + ".res1", 1);
    h = instance_norm(conv2d(h, param(tape, prefix + ".res2.w"), std::nullopt, 1, 1), config_.eps);
    return relu(add(x, h));
}

Var RegistrationModel::scene_encode(Tape& tape, const Var& image) {
    require_divisible(image, 8, "scene_encode");
    Var e0 = conv_in_relu(tape, standardize(image, config_.eps), "scene.stem", 1);
    Var e1 = residual(tape, conv_in_relu(tape, e0, "scene.down1", 2), "scene.down1");
    Var e2 = residual(tape, conv_in_relu(tape, e1, "scene.down2", 2), "scene.down2");
    Var e3 = residual(tape, conv_in_relu(tape, e2, "scene.down3", 2), "scene.down3");
    Var u = conv_in_relu(tape, concat({bilinear_upsample(e3, 2), e2}, 1), "scene.up1", 1);
    u = conv_in_relu(tape, concat({bilinear_upsample(u, 2), e1}, 1), "scene.up2", 1);
    u = conv_in_relu(tape, concat({bilinear_upsample(u, 2), e0}, 1), "scene.up3", 1);
    return instance_norm(conv2d(u, param(tape, "scene.head.w"), std::nullopt, 1, 1), config_.eps);
}

Var RegistrationModel::appearance_pool(Tape& tape, const Var& image) {
    require_divisible(image, 8, "appearance_encode");
    Var h = image;
    for (int i = 0; i < 4; ++i) {
        const std::string p = "appearance.conv" + std::to_string(i);
        h = relu(conv2d(h, param(tape, p + ".w"), param(tape, p + ".b"), 2, 1));
    }
    return global_avg_pool(h);
}

Var RegistrationModel::appearance_encode(Tape& tape, const Var& image) {
    Var pooled = appearance_pool(tape, image);
    Var hidden = relu(linear(pooled, param(tape, "appearance.fc1.w"), param(tape, "appearance.fc1.b")));
    return linear(hidden, param(tape, "appearance.fc2.w"), param(tape, "appearance.fc2.b"));
}

Var RegistrationModel::adain(Tape& tape, const Var& s, const Var& code, int block,
                             const std::optional<Var>& reference) {
    if (block < 0 || block > 2) throw RangeError("adain: block index " + std::to_string(block) + " outside [0,2]");
    const std::string p = "decoder.block" + std::to_string(block);
    const int64_t c = s.dim(1);
    Var style = linear(code, param(tape, p + ".style.w"), param(tape, p + ".style.b"));
    if (style.dim(1) != 2 * c) {
        throw ShapeError("adain: block " + std::to_string(block) + " modulates " + std::to_string(style.dim(1) / 2) +
                         " channels, input has " + std::to_string(c));
    }
    Var gamma = slice(style, 1, 0, c);
    Var beta = slice(style, 1, c, c);
    if (reference) return channel_affine(instance_norm_ref(s, *reference, config_.eps), gamma, beta);
    return regfactor::adain(s, gamma, beta, config_.eps);
}

Var RegistrationModel::cross_frame_attention(Tape& tape, const Var& summary, const FrameCache& cache) {
    const int64_t cs = config_.scene_channels;
    if (summary.shape() != Shape{1, cs}) {
        throw ShapeError("cross_frame_attention: summary must be [1," + std::to_string(cs) + "], got " +
                         shape_str(summary.shape()));
    }
    Var keys_in = summary;
    if (!cache.empty()) {
        Tensor past(Shape{static_cast<int64_t>(cache.size()), cs});
        size_t k = 0;
        for (const auto& entry : cache.entries()) {
            if (static_cast<int64_t>(entry.size()) != cs) throw ShapeError("cross_frame_attention: cached summary width");
            for (double v : entry) past[k++] = v;
        }
        keys_in = concat({tape.constant(std::move(past)), summary}, 0);
    }
    Var q = linear(summary, param(tape, "gpe.query.w"), std::nullopt);
    Var k = linear(keys_in, param(tape, "gpe.key.w"), std::nullopt);
    Var v = linear(keys_in, param(tape, "gpe.value.w"), std::nullopt);
    const int64_t dh = config_.gpe_dim / config_.heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Var> heads;
    heads.reserve(static_cast<size_t>(config_.heads));
    for (int h = 0; h < config_.heads; ++h) {
        Var qh = slice(q, 1, h * dh, dh);
        Var kh = slice(k, 1, h * dh, dh);
        Var vh = slice(v, 1, h * dh, dh);
        Var weights = softmax(scale(matmul(qh, transpose(kh)), inv_sqrt));
        heads.push_back(matmul(weights, vh));
    }
    return linear(concat(heads, 1), param(tape, "gpe.out.w"), std::nullopt);
}

Var RegistrationModel::gpe_forward(Tape& tape, const Var& s, std::span<const FrameRef> frames) {
    if (s.shape().size() != 4 || s.dim(1) != config_.scene_channels) {
        throw ShapeError("gpe_forward: expected [N," + std::to_string(config_.scene_channels) + ",H,W], got " +
                         shape_str(s.shape()));
    }
    if (static_cast<int64_t>(frames.size()) != s.dim(0)) {
        throw ContractError("gpe_forward: " + std::to_string(frames.size()) + " frame refs for batch of " +
                            std::to_string(s.dim(0)));
    }
    for (const FrameRef& f : frames) {
        if (f.t < 0 || f.t >= config_.max_frames) {
            throw RangeError("frame index " + std::to_string(f.t) + " outside the embedding table of " +
                             std::to_string(config_.max_frames) + " rows");
        }
        if (!f.cache) throw ContractError("gpe_forward: missing frame cache");
    }
    Var summaries = global_avg_pool(s);
    std::vector<Var> deltas;
    deltas.reserve(frames.size());
    for (size_t i = 0; i < frames.size(); ++i) {
        const FrameRef& f = frames[i];
        Var summary = slice(summaries, 0, static_cast<int64_t>(i), 1);
        Var e = slice(param(tape, "gpe.embedding"), 0, f.t, 1);
        Var p = tape.constant(Tensor(Shape{1, config_.gpe_dim}, sinusoidal_encoding(f.t, config_.gpe_dim)));
        Var g = relu(linear(concat({e, p}, 1), param(tape, "gpe.fuse1.w"), param(tape, "gpe.fuse1.b")));
        g = linear(g, param(tape, "gpe.fuse2.w"), param(tape, "gpe.fuse2.b"));
        Var c = cross_frame_attention(tape, summary, *f.cache);
        deltas.push_back(linear(add(g, c), param(tape, "gpe.proj.w"), std::nullopt));
        auto sv = summary.value().data();
        f.cache->push(f.sequence_id, std::vector<double>(sv.begin(), sv.end()));
    }
    if (config_.alpha == 0.0) return s;
    return add_spatial_broadcast(s, scale(concat(deltas, 0), config_.alpha));
}

Var RegistrationModel::decode(Tape& tape, const Var& s, const Var& code, const std::optional<Var>& scene) {
    Var h = s;
    for (int b = 0; b < 3; ++b) {
        const std::string p = "decoder.block" + std::to_string(b);
        h = adain(tape, h, code, b, b == 0 ? scene : std::nullopt);
        h = relu(conv2d(h, param(tape, p + ".conv.w"), param(tape, p + ".conv.b"), 1, 1));
    }
    return sigmoid(conv2d(h, param(tape, "decoder.head.w"), param(tape, "decoder.head.b"), 1, 1));
}

RegistrationForward RegistrationModel::forward(Tape& tape, const Var& moving, const Var& fixed,
                                               std::span<const FrameRef> frames) {
    if (moving.shape() != fixed.shape()) {
        throw ShapeError("register: moving " + shape_str(moving.shape()) + " vs fixed " + shape_str(fixed.shape()));
    }
    RegistrationForward out;
    out.scene = scene_encode(tape, moving);
    out.code = appearance_encode(tape, fixed);
    out.enhanced = gpe_forward(tape, out.scene, frames);
    out.output = decode(tape, out.enhanced, out.code, out.scene);
    return out;
}

Tensor RegistrationModel::register_images(const Tensor& moving, const Tensor& fixed, std::span<const FrameRef> frames) {
    Tape tape;
    return forward(tape, tape.constant(moving), tape.constant(fixed), frames).output.value();
}

}  // namespace regfactor
