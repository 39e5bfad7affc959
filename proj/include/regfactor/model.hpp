#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "regfactor/tape.hpp"

namespace regfactor {

/// Architecture hyperparameters. Defaults describe the full 256x256 model;
/// desk() is the same network at 64x64.
struct ModelConfig {
    int image_size = 256;
    int in_channels = 1;
    std::array<int, 4> encoder_channels{32, 64, 128, 256};
    int scene_channels = 64;
    int appearance_dim = 32;
    int appearance_hidden = 128;
    int gpe_dim = 64;
    int gpe_hidden = 128;
    int heads = 4;
    int window = 2;
    double alpha = 0.1;
    int max_frames = 64;
    std::array<int, 3> decoder_channels{64, 32, 16};
    double eps = 1e-5;

    static ModelConfig desk();

    // Throws ContractError when an invariant fails (gpe_dim % heads, window >= 0, ...).
    void validate() const;

    // Assigns one `key=value` setting. Returns false for keys this struct does not own.
    bool apply(const std::string& key, const std::string& value);
    std::string to_text() const;
    static ModelConfig from_text(std::string_view text);

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Causal ring of spatially averaged scene summaries from earlier frames of one sequence.
class FrameCache {
public:
    explicit FrameCache(int capacity = 2);

    // Appends a summary, evicting the oldest beyond capacity. The first push after
    // construction or reset binds the cache to `sequence_id`; pushing another id is
    // a ContractError.
    void push(int64_t sequence_id, std::vector<double> summary);
    void reset();

    size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }
    int capacity() const { return capacity_; }
    std::optional<int64_t> sequence_id() const { return sequence_id_; }
    // Oldest first.
    const std::deque<std::vector<double>>& entries() const { return entries_; }

private:
    int capacity_;
    std::optional<int64_t> sequence_id_;
    std::deque<std::vector<double>> entries_;
};

// Empties the cache; the next push may bind a new sequence.
inline void reset_cache(FrameCache& cache) { cache.reset(); }

/// Named learnable tensors, iterated in name order.
class ModelParams {
public:
    using Map = std::map<std::string, Tensor, std::less<>>;

    Tensor& add(std::string name, Shape shape);
    Tensor& at(std::string_view name);
    const Tensor& at(std::string_view name) const;
    bool contains(std::string_view name) const { return tensors_.find(name) != tensors_.end(); }
    size_t size() const { return tensors_.size(); }
    bool empty() const { return tensors_.empty(); }

    Map::iterator begin() { return tensors_.begin(); }
    Map::iterator end() { return tensors_.end(); }
    Map::const_iterator begin() const { return tensors_.begin(); }
    Map::const_iterator end() const { return tensors_.end(); }

    void zero_grad();

private:
    Map tensors_;
};

// Total scalar count over all tensors.
int64_t param_count(const ModelParams& params);

// Element counts grouped by the name prefix before the first '.', in name order.
std::vector<std::pair<std::string, int64_t>> param_breakdown(const ModelParams& params);
std::string param_breakdown_table(const ModelParams& params);

/// p[2i] = sin(t / 10000^(2i/d)), p[2i+1] = cos(t / 10000^(2i/d)).
std::vector<double> sinusoidal_encoding(int64_t t, int d = 64);

/// gamma[n,c] * instance_norm(s)[n,c] + beta[n,c].
Var adain(const Var& s, const Var& gamma, const Var& beta, double eps);

// One batch item's position in its sequence. `cache` belongs to that sequence.
struct FrameRef {
    int64_t t = 0;
    int64_t sequence_id = 0;
    FrameCache* cache = nullptr;
};

struct RegistrationForward {
    Var scene;      // S(I_m), before temporal enrichment
    Var enhanced;   // scene after the position-encoding module
    Var code;       // A(I_f)
    Var output;     // registered image
};

/// Scene encoder, appearance encoder, temporal position encoding and AdaIN decoder.
///
/// Forward methods record onto the caller's tape and bind parameters through
/// tape.parameter(), so the model must outlive the tape. No operation resamples
/// the moving image: the registered output is synthesized, never warped.
class RegistrationModel {
public:
    RegistrationModel(ModelConfig config, uint64_t seed);
    // Adopts existing tensors; names and shapes must match the architecture exactly.
    RegistrationModel(ModelConfig config, ModelParams params);

    const ModelConfig& config() const { return config_; }
    ModelParams& params() { return params_; }
    const ModelParams& params() const { return params_; }

    // [N,1,H,W] -> [N,C_s,H,W]; H and W divisible by 8.
    Var scene_encode(Tape& tape, const Var& image);
    // [N,1,H,W] -> [N,appearance_dim]; H and W divisible by 8.
    Var appearance_encode(Tape& tape, const Var& image);
    // The conv stack and global average pool alone: [N,1,H,W] -> [N,encoder_channels[3]].
    Var appearance_pool(Tape& tape, const Var& image);
    // AdaIN with gamma/beta generated from `code` by decoder block `block`. With a
    // reference, the plane statistics come from it instead of `s`.
    Var adain(Tape& tape, const Var& s, const Var& code, int block, const std::optional<Var>& reference = std::nullopt);
    // Multi-head attention of the current summary [1,C_s] over the cached summaries
    // plus itself. Returns c_t as [1,gpe_dim].
    Var cross_frame_attention(Tape& tape, const Var& summary, const FrameCache& cache);
    // Adds alpha * W_proj (g_t + c_t) to every spatial location of each batch item and
    // pushes each item's pre-enrichment summary into its cache, in batch order.
    // frames.size() must equal the batch size. Throws RangeError for t >= max_frames.
    Var gpe_forward(Tape& tape, const Var& s, std::span<const FrameRef> frames);
    // [N,C_s,H,W] x [N,appearance_dim] -> [N,1,H,W] in (0,1). `scene` is the feature map
    // before enrichment; the first block normalizes with its statistics so the
    // spatially constant temporal shift is not cancelled. Without it, `s` is used.
    Var decode(Tape& tape, const Var& s, const Var& code, const std::optional<Var>& scene = std::nullopt);

    RegistrationForward forward(Tape& tape, const Var& moving, const Var& fixed, std::span<const FrameRef> frames);
    Var register_pair(Tape& tape, const Var& moving, const Var& fixed, std::span<const FrameRef> frames) {
        return forward(tape, moving, fixed, frames).output;
    }

    // Inference convenience on plain tensors.
    Tensor register_images(const Tensor& moving, const Tensor& fixed, std::span<const FrameRef> frames);

private:
    void build(uint64_t seed);
    Var param(Tape& tape, std::string_view name) { return tape.parameter(params_.at(name)); }
    Var conv_in_relu(Tape& tape, const Var& x, const std::string& name, int stride);
    Var residual(Tape& tape, const Var& x, const std::string& prefix);

    ModelConfig config_;
    ModelParams params_;
};

}  // namespace regfactor
