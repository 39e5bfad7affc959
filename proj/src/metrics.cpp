#include "regfactor/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "regfactor/config.hpp"
#include "regfactor/errors.hpp"

namespace regfactor {

namespace {

void require_same(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

std::vector<double> gaussian_kernel(int size, double sigma) {
    std::vector<double> k(static_cast<size_t>(size));
    const double c = (size - 1) / 2.0;
    double sum = 0.0;
    for (int i = 0; i < size; ++i) sum += k[static_cast<size_t>(i)] = std::exp(-(i - c) * (i - c) / (2.0 * sigma * sigma));
    for (double& v : k) v /= sum;
    return k;
}

// Valid-region separable filtering of an [h,w] plane.
std::vector<double> filter_valid(std::span<const double> img, int64_t h, int64_t w, const std::vector<double>& k) {
    const auto n = static_cast<int64_t>(k.size());
    const int64_t oh = h - n + 1, ow = w - n + 1;
    std::vector<double> rows(static_cast<size_t>(h * ow));
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < ow; ++x) {
            double acc = 0.0;
            for (int64_t i = 0; i < n; ++i) acc += k[static_cast<size_t>(i)] * img[static_cast<size_t>(y * w + x + i)];
            rows[static_cast<size_t>(y * ow + x)] = acc;
        }
    std::vector<double> out(static_cast<size_t>(oh * ow));
    for (int64_t y = 0; y < oh; ++y)
        for (int64_t x = 0; x < ow; ++x) {
            double acc = 0.0;
            for (int64_t i = 0; i < n; ++i) acc += k[static_cast<size_t>(i)] * rows[static_cast<size_t>((y + i) * ow + x)];
            out[static_cast<size_t>(y * ow + x)] = acc;
        }
    return out;
}

Tensor as_batch(const Tensor& img) { return img.reshaped({1, 1, img.dim(0), img.dim(1)}); }

}  // namespace

double ncc(const Tensor& a, const Tensor& b) {
    require_same(a, b, "ncc");
    const auto n = static_cast<double>(a.numel());
    double ma = 0.0, mb = 0.0;
    for (size_t i = 0; i < a.numel(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (size_t i = 0; i < a.numel(); ++i) {
        const double da = a[i] - ma, db = b[i] - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if (saa / n < 1e-12 || sbb / n < 1e-12) return 0.0;
    return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

double ssim(const Tensor& a, const Tensor& b, const SsimOptions& opt) {
    require_same(a, b, "ssim");
    if (a.rank() != 2) throw ShapeError("ssim: expected [H,W], got " + shape_str(a.shape()));
    const int64_t h = a.dim(0), w = a.dim(1);
    if (h < opt.window || w < opt.window)
        throw ShapeError("ssim: image " + shape_str(a.shape()) + " is smaller than the " + std::to_string(opt.window) +
                         "x" + std::to_string(opt.window) + " window");
    const auto k = gaussian_kernel(opt.window, opt.sigma);
    std::vector<double> aa(a.numel()), bb(a.numel()), ab(a.numel());
    for (size_t i = 0; i < a.numel(); ++i) {
        aa[i] = a[i] * a[i];
        bb[i] = b[i] * b[i];
        ab[i] = a[i] * b[i];
    }
    const auto mu_a = filter_valid(a.data(), h, w, k), mu_b = filter_valid(b.data(), h, w, k);
    const auto e_aa = filter_valid(aa, h, w, k), e_bb = filter_valid(bb, h, w, k), e_ab = filter_valid(ab, h, w, k);
    const double c1 = (opt.k1 * opt.range) * (opt.k1 * opt.range), c2 = (opt.k2 * opt.range) * (opt.k2 * opt.range);
    double total = 0.0;
    for (size_t i = 0; i < mu_a.size(); ++i) {
        const double ma = mu_a[i], mb = mu_b[i];
        const double va = e_aa[i] - ma * ma, vb = e_bb[i] - mb * mb, cov = e_ab[i] - ma * mb;
        total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    return total / static_cast<double>(mu_a.size());
}

double psnr(const Tensor& a, const Tensor& b) {
    require_same(a, b, "psnr");
    double mse = 0.0;
    for (size_t i = 0; i < a.numel(); ++i) mse += (a[i] - b[i]) * (a[i] - b[i]);
    mse /= static_cast<double>(a.numel());
    if (mse <= 0.0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

Tensor diff_map(const Tensor& a, const Tensor& b) {
    require_same(a, b, "diff_map");
    Tensor out(a.shape());
    for (size_t i = 0; i < a.numel(); ++i) out[i] = std::min(1.0, std::abs(a[i] - b[i]));
    return out;
}

Tensor rg_overlay(const Tensor& fixed, const Tensor& moving) {
    require_same(fixed, moving, "rg_overlay");
    if (fixed.rank() != 2) throw ShapeError("rg_overlay: expected [H,W], got " + shape_str(fixed.shape()));
    const size_t plane = fixed.numel();
    Tensor out(Shape{3, fixed.dim(0), fixed.dim(1)}, 0.0);
    for (size_t i = 0; i < plane; ++i) {
        out[i] = std::clamp(fixed[i], 0.0, 1.0);
        out[plane + i] = std::clamp(moving[i], 0.0, 1.0);
    }
    return out;
}

MeanStd mean_std(const std::vector<double>& values) {
    MeanStd r;
    if (values.empty()) return r;
    for (double v : values) r.mean += v;
    r.mean /= static_cast<double>(values.size());
    double ss = 0.0;
    for (double v : values) ss += (v - r.mean) * (v - r.mean);
    r.std = std::sqrt(ss / static_cast<double>(values.size()));
    return r;
}

MeanStd MetricsReport::summary(double SampleMetrics::*field) const {
    std::vector<double> v;
    v.reserve(samples.size());
    for (const auto& s : samples) v.push_back(s.*field);
    return mean_std(v);
}

std::string MetricsReport::to_csv() const {
    std::string out = std::string(kMetricsHeader) + "\n";
    for (const auto& s : samples) {
        out += split + "," + std::to_string(s.seq_id) + "," + std::to_string(s.frame_idx);
        for (double v : {s.ncc, s.ssim, s.psnr, s.ncc_unreg, s.ssim_unreg, s.psnr_unreg}) out += "," + format_double(v);
        out += "\n";
    }
    return out;
}

std::string MetricsReport::summary_text() const {
    const std::pair<const char*, double SampleMetrics::*> fields[] = {
        {"ncc", &SampleMetrics::ncc},           {"ssim", &SampleMetrics::ssim},
        {"psnr", &SampleMetrics::psnr},         {"ncc_unreg", &SampleMetrics::ncc_unreg},
        {"ssim_unreg", &SampleMetrics::ssim_unreg}, {"psnr_unreg", &SampleMetrics::psnr_unreg},
    };
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(4);
    for (const auto& [name, field] : fields) {
        const MeanStd m = summary(field);
        os << split << ' ' << name << ' ' << m.mean << "±" << m.std << '\n';
    }
    return os.str();
}

Registrar model_registrar(RegistrationModel& model) {
    return [&model](const RegistrationSample& s, FrameCache& cache) {
        const FrameRef ref{s.t, s.sequence_id, &cache};
        const Tensor out = model.register_images(as_batch(s.moving), as_batch(s.fixed), std::span(&ref, 1));
        return out.reshaped(s.fixed.shape());
    };
}

Registrar identity_registrar() {
    return [](const RegistrationSample& s, FrameCache&) { return s.moving; };
}

MetricsReport evaluate_split(const Registrar& registrar, const DatasetSplit& split, int cache_capacity, int workers,
                             const SampleSink& sink) {
    if (split.pairs() == 0) throw FormatError("evaluate: split '" + split.name + "' is empty");
    std::vector<std::vector<SampleMetrics>> per_seq(split.sequences.size());
    parallel_for(split.sequences.size(), workers, [&](size_t i) {
        FrameCache cache(cache_capacity);
        for (const auto& s : split.sequences[i]) {
            const Tensor reg = registrar(s, cache);
            SampleMetrics m;
            m.seq_id = s.sequence_id;
            m.frame_idx = s.t;
            m.ncc = ncc(reg, s.fixed);
            m.ssim = ssim(reg, s.fixed);
            m.psnr = psnr(reg, s.fixed);
            m.ncc_unreg = ncc(s.moving, s.fixed);
            m.ssim_unreg = ssim(s.moving, s.fixed);
            m.psnr_unreg = psnr(s.moving, s.fixed);
            per_seq[i].push_back(m);
            if (sink) sink(s, reg);
        }
    });
    MetricsReport report;
    report.split = split.name;
    for (auto& seq : per_seq) report.samples.insert(report.samples.end(), seq.begin(), seq.end());
    return report;
}

MetricsReport evaluate_split(RegistrationModel& model, const DatasetSplit& split, int workers, const SampleSink& sink) {
    return evaluate_split(model_registrar(model), split, model.config().window, workers, sink);
}

}  // namespace regfactor
