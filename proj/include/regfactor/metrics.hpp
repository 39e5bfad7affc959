#pragma once

#include <functional>
#include <string>
#include <vector>

#include "regfactor/dataset.hpp"
#include "regfactor/model.hpp"

namespace regfactor {

// All metrics take same-shaped images; 2-D [H,W] or any tensor treated as one plane
// where noted. Shape mismatches throw ShapeError.

/// Zero-mean normalized cross-correlation; 0 when either variance is below 1e-12.
double ncc(const Tensor& a, const Tensor& b);

struct SsimOptions {
    int window = 11;
    double sigma = 1.5;
    double k1 = 0.01;
    double k2 = 0.03;
    double range = 1.0;
};

/// Mean of the local SSIM map over the valid region of a normalized Gaussian window.
/// Requires [H,W] with min(H,W) >= window.
double ssim(const Tensor& a, const Tensor& b, const SsimOptions& opt = {});

inline constexpr double kPsnrCap = 99.0;

/// 10 log10(1 / MSE) for images in [0,1], capped at kPsnrCap.
double psnr(const Tensor& a, const Tensor& b);

/// |a - b| clamped to [0,1].
Tensor diff_map(const Tensor& a, const Tensor& b);

/// [3,H,W]: red = fixed, green = moving, blue = 0.
Tensor rg_overlay(const Tensor& fixed, const Tensor& moving);

struct SampleMetrics {
    int64_t seq_id = 0;
    int64_t frame_idx = 0;
    double ncc = 0.0, ssim = 0.0, psnr = 0.0;
    double ncc_unreg = 0.0, ssim_unreg = 0.0, psnr_unreg = 0.0;
};

struct MeanStd {
    double mean = 0.0;
    double std = 0.0;  // population
};

MeanStd mean_std(const std::vector<double>& values);

struct MetricsReport {
    std::string split;
    std::vector<SampleMetrics> samples;  // sequence order, then frame order

    MeanStd summary(double SampleMetrics::*field) const;
    std::string to_csv() const;
    // One line per metric: "<split> <name> mean±std".
    std::string summary_text() const;
};

inline constexpr std::string_view kMetricsHeader = "split,seq_id,frame_idx,ncc,ssim,psnr,ncc_unreg,ssim_unreg,psnr_unreg";

// Produces the registered image for one sample; `cache` is fresh at the start of each sequence.
using Registrar = std::function<Tensor(const RegistrationSample& sample, FrameCache& cache)>;

// Called once per sample with its registered image, possibly from worker threads.
using SampleSink = std::function<void(const RegistrationSample& sample, const Tensor& registered)>;

Registrar model_registrar(RegistrationModel& model);
Registrar identity_registrar();

/// Runs every sequence in frame order with its own cache; sequences may run in parallel.
/// Throws FormatError on an empty split.
MetricsReport evaluate_split(const Registrar& registrar, const DatasetSplit& split, int cache_capacity,
                             int workers = 1, const SampleSink& sink = {});
MetricsReport evaluate_split(RegistrationModel& model, const DatasetSplit& split, int workers = 1,
                             const SampleSink& sink = {});

}  // namespace regfactor
