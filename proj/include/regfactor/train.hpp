#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "regfactor/dataset.hpp"
#include "regfactor/model.hpp"
#include "regfactor/objective.hpp"

namespace regfactor {

struct TrainConfig {
    double lr = 1e-4;
    double weight_decay = 1e-5;
    int epochs = 20;
    int batch = 8;
    double clip_norm = 1.0;
    double lambda = 10.0;
    uint64_t seed = 1;

    void validate() const;
    bool apply(const std::string& key, const std::string& value);
    std::string to_text() const;

    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// lr0 * 0.5 * (1 + cos(pi * epoch / total)); epoch may be fractional.
double cosine_lr(double epoch, double total, double lr0);

// Global L2 norm over the gradients of every parameter that has one.
double grad_norm(const ModelParams& params);

/// Scales all gradients by max_norm / norm when the global norm exceeds max_norm.
/// Returns the scale applied. Throws NumericError for a non-finite norm.
double clip_grad_norm(ModelParams& params, double max_norm);

struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int64_t step = 0;
    std::map<std::string, std::vector<double>, std::less<>> m;
    std::map<std::string, std::vector<double>, std::less<>> v;

    friend bool operator==(const AdamState&, const AdamState&) = default;
};

/// p <- p - lr*wd*p, then the bias-corrected Adam update. Parameters without a gradient
/// are treated as having a zero gradient. Nothing is modified when any new value would
/// be non-finite (NumericError).
void adam_step(ModelParams& params, AdamState& state, double lr, double weight_decay);

/// One optimizer step on a batch. caches[i] is the cache of samples[i]'s sequence;
/// samples of one sequence must appear in frame order.
LossReport train_step(RegistrationModel& model, std::span<const RegistrationSample* const> samples,
                      std::span<FrameCache* const> caches, AdamState& adam, const TrainConfig& config, double lr);

/// Loss of the batch under the current parameters, using throwaway caches.
LossReport batch_loss(RegistrationModel& model, std::span<const RegistrationSample* const> samples, double lambda);

struct Checkpoint {
    static constexpr uint32_t kVersion = 1;

    ModelConfig model;
    TrainConfig train;
    int epoch = 0;  // completed epochs
    int64_t step = 0;
    double best_ssim = -1.0;
    std::string rng_state;
    ModelParams params;
    AdamState adam;
};

/// "GPER", u32 version, u64 text length + config text, u32 tensor count, then per tensor
/// u32 name length, name, u32 rank, i64 dims, f64 values. All little-endian. Adam moments
/// are stored as tensors named "optimizer.m.<param>" and "optimizer.v.<param>".
std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::string_view bytes);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct StepRecord {
    int epoch = 0;     // 1-based
    int64_t step = 0;  // 1-based, global
    double lr = 0.0;
    LossReport loss;
};

struct EpochRecord {
    int epoch = 0;
    LossReport mean;
    double val_ncc = 0.0, val_ssim = 0.0, val_psnr = 0.0;
    int skipped = 0;
};

struct FitOptions {
    std::filesystem::path data;
    std::filesystem::path out;  // empty: nothing written
    int workers = 1;
    std::optional<Checkpoint> resume;
    std::optional<int> stop_after;  // stop once this many epochs are complete
    std::ostream* log = nullptr;
};

struct FitResult {
    Checkpoint last;
    Checkpoint best;
    std::vector<StepRecord> steps;
    std::vector<EpochRecord> epochs;
};

/// Shuffles sequences (never frames) every epoch, trains in batches of config.batch,
/// validates on the val split after each epoch and keeps the best-SSIM parameters.
/// With options.out set, writes train_log.csv, epochs.csv, last.gper and best.gper.
FitResult fit(const ModelConfig& model_config, const TrainConfig& config, const FitOptions& options);

inline constexpr std::string_view kTrainLogHeader = "epoch,step,lr,recon,scene,total";

std::string train_log_csv(std::span<const StepRecord> steps);

}  // namespace regfactor
