#include "regfactor/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "regfactor/errors.hpp"

namespace regfactor {

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

void require_image(const Tensor& image, const char* what) {
    if (image.rank() != 2) throw ShapeError(std::string(what) + ": expected [H,W], got " + shape_str(image.shape()));
}

// Half-pixel bilinear upsampling of a [h,w] grid by `factor`, edges clamped.
std::vector<double> upsample(const std::vector<double>& grid, int h, int w, int factor) {
    auto taps = [factor](int n, int o, int& i0, int& i1, double& f) {
        double src = (o + 0.5) / factor - 0.5;
        if (src < 0.0) src = 0.0;
        i0 = std::min(static_cast<int>(std::floor(src)), n - 1);
        i1 = std::min(i0 + 1, n - 1);
        f = src - i0;
    };
    const int oh = h * factor, ow = w * factor;
    std::vector<double> out(static_cast<size_t>(oh) * static_cast<size_t>(ow));
    for (int y = 0; y < oh; ++y) {
        int y0, y1;
        double fy;
        taps(h, y, y0, y1, fy);
        for (int x = 0; x < ow; ++x) {
            int x0, x1;
            double fx;
            taps(w, x, x0, x1, fx);
            auto at = [&](int r, int c) { return grid[static_cast<size_t>(r) * static_cast<size_t>(w) + static_cast<size_t>(c)]; };
            const double top = at(y0, x0) + fx * (at(y0, x1) - at(y0, x0));
            const double bottom = at(y1, x0) + fx * (at(y1, x1) - at(y1, x0));
            out[static_cast<size_t>(y) * static_cast<size_t>(ow) + static_cast<size_t>(x)] = top + fy * (bottom - top);
        }
    }
    return out;
}

}  // namespace

bool AffineLimits::contains(const AffineParams& p) const {
    return std::abs(p.theta) <= theta && std::abs(p.tx) <= translation && std::abs(p.ty) <= translation &&
           p.sx >= scale_lo && p.sx <= scale_hi && p.sy >= scale_lo && p.sy <= scale_hi && std::abs(p.shear) <= shear;
}

bool AppearanceLimits::contains(const AppearanceParams& q) const {
    return q.gamma >= gamma_lo && q.gamma <= gamma_hi && q.gain >= gain_lo && q.gain <= gain_hi &&
           std::abs(q.bias) <= bias;
}

SceneSpec sample_scene(Rng& rng, int height, int width) {
    if (height < 8 || width < 8) throw ContractError("sample_scene: image must be at least 8x8");
    SceneSpec spec;
    spec.height = height;
    spec.width = width;
    const double unit = height / 256.0;
    const auto count = rng.uniform_int(6, 14);
    for (int64_t i = 0; i < count; ++i) {
        Blob b;
        b.cx = rng.uniform(0.0, width - 1.0);
        b.cy = rng.uniform(0.0, height - 1.0);
        b.sigma = rng.uniform(4.0, 24.0) * unit;
        b.amplitude = rng.uniform(0.3, 1.0);
        spec.blobs.push_back(b);
    }
    spec.noise_seed = rng.next_u64();
    return spec;
}

Tensor render_scene(const SceneSpec& spec) {
    const int h = spec.height, w = spec.width;
    Tensor img(Shape{h, w}, 0.0);
    for (const Blob& b : spec.blobs) {
        const double inv = 1.0 / (2.0 * b.sigma * b.sigma);
        for (int y = 0; y < h; ++y) {
            const double dy2 = (y - b.cy) * (y - b.cy);
            for (int x = 0; x < w; ++x) {
                img[static_cast<size_t>(y * w + x)] += b.amplitude * std::exp(-((x - b.cx) * (x - b.cx) + dy2) * inv);
            }
        }
    }
    if (spec.noise_amplitude != 0.0) {
        if (h % 8 != 0 || w % 8 != 0) throw ShapeError("render_scene: noise grid needs H, W divisible by 8");
        Rng noise(spec.noise_seed);
        std::vector<double> grid(static_cast<size_t>(h / 8) * static_cast<size_t>(w / 8));
        for (double& v : grid) v = noise.uniform(-1.0, 1.0) * spec.noise_amplitude;
        const auto field = upsample(grid, h / 8, w / 8, 8);
        for (size_t i = 0; i < field.size(); ++i) img[i] += field[i];
    }
    const auto [lo, hi] = std::minmax_element(img.data().begin(), img.data().end());
    const double mn = *lo, range = *hi - *lo;
    if (range < 1e-12) {
        for (double& v : img.data()) v = 0.0;
    } else {
        for (double& v : img.data()) v = (v - mn) / range;
    }
    return img;
}

Affine2D Affine2D::from_params(const AffineParams& p) {
    const double c = std::cos(p.theta * kDeg), s = std::sin(p.theta * kDeg);
    const double k = std::tan(p.shear * kDeg);
    // [[sx,0],[0,sy]] * [[1,k],[0,1]] * [[c,-s],[s,c]]
    Affine2D a;
    a.m = {p.sx * (c + k * s), p.sx * (-s + k * c), p.sy * s, p.sy * c};
    a.t = {p.tx, p.ty};
    return a;
}

Affine2D Affine2D::inverse() const {
    const double det = m[0] * m[3] - m[1] * m[2];
    if (std::abs(det) < 1e-12) throw NumericError("Affine2D::inverse: singular matrix");
    Affine2D r;
    r.m = {m[3] / det, -m[1] / det, -m[2] / det, m[0] / det};
    r.t = {-(r.m[0] * t[0] + r.m[1] * t[1]), -(r.m[2] * t[0] + r.m[3] * t[1])};
    return r;
}

Tensor warp_affine(const Tensor& image, const Affine2D& map) {
    require_image(image, "warp_affine");
    const int64_t h = image.dim(0), w = image.dim(1);
    const double cx = (w - 1) / 2.0, cy = (h - 1) / 2.0;
    const Affine2D inv = map.inverse();
    auto pixel = [&](int64_t y, int64_t x) {
        if (y < 0 || y >= h || x < 0 || x >= w) return 0.0;
        return image[static_cast<size_t>(y * w + x)];
    };
    Tensor out(Shape{h, w});
    for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x) {
            const double dx = x - cx, dy = y - cy;
            const double sx = inv.m[0] * dx + inv.m[1] * dy + inv.t[0] + cx;
            const double sy = inv.m[2] * dx + inv.m[3] * dy + inv.t[1] + cy;
            const double fx0 = std::floor(sx), fy0 = std::floor(sy);
            const double fx = sx - fx0, fy = sy - fy0;
            const auto x0 = static_cast<int64_t>(fx0), y0 = static_cast<int64_t>(fy0);
            const double top = pixel(y0, x0) + fx * (pixel(y0, x0 + 1) - pixel(y0, x0));
            const double bottom = pixel(y0 + 1, x0) + fx * (pixel(y0 + 1, x0 + 1) - pixel(y0 + 1, x0));
            out[static_cast<size_t>(y * w + x)] = top + fy * (bottom - top);
        }
    }
    return out;
}

Tensor appearance_shift(const Tensor& image, const AppearanceParams& q) {
    require_image(image, "appearance_shift");
    Tensor out = image;
    for (double& v : out.data()) v = std::clamp(q.gain * std::pow(v, q.gamma) + q.bias, 0.0, 1.0);
    return out;
}

AffineParams lerp(const AffineParams& a, const AffineParams& b, double w) {
    auto mix = [w](double x, double y) { return w == 0.0 ? x : (w == 1.0 ? y : x + w * (y - x)); };
    return {mix(a.theta, b.theta), mix(a.tx, b.tx), mix(a.ty, b.ty),
            mix(a.sx, b.sx),       mix(a.sy, b.sy), mix(a.shear, b.shear)};
}

Sequence make_sequence(uint64_t seed, int length, int height, int width, int64_t sequence_id, int max_frames) {
    if (length < 1) throw ContractError("make_sequence: length must be >= 1");
    if (length > max_frames) {
        throw RangeError("make_sequence: length " + std::to_string(length) + " exceeds the embedding table of " +
                         std::to_string(max_frames) + " frames");
    }
    Rng rng(seed);
    const SceneSpec spec = sample_scene(rng, height, width);
    const AffineLimits lim = AffineLimits::for_size(height);
    const AffineParams first = sample_affine(rng, lim);
    const AffineParams last = sample_affine(rng, lim);
    const AppearanceParams q = sample_appearance(rng);

    const Tensor base = render_scene(spec);
    const Tensor fixed = appearance_shift(base, q);
    Sequence seq;
    seq.reserve(static_cast<size_t>(length));
    for (int i = 0; i < length; ++i) {
        RegistrationSample s;
        s.affine = lerp(first, last, length == 1 ? 0.0 : static_cast<double>(i) / (length - 1));
        s.appearance = q;
        s.moving = warp_affine(base, s.affine);
        s.fixed = fixed;
        s.t = i;
        s.sequence_id = sequence_id;
        s.seed = seed;
        seq.push_back(std::move(s));
    }
    return seq;
}

}  // namespace regfactor
