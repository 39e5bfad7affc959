#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "regfactor/rng.hpp"
#include "regfactor/tensor.hpp"

namespace regfactor {

// Images are 2-D tensors [H,W] with values in [0,1].

struct AffineParams {
    double theta = 0.0;  // degrees
    double tx = 0.0;     // pixels
    double ty = 0.0;
    double sx = 1.0;
    double sy = 1.0;
    double shear = 0.0;  // degrees

    friend bool operator==(const AffineParams&, const AffineParams&) = default;
};

struct AppearanceParams {
    double gamma = 1.0;
    double gain = 1.0;
    double bias = 0.0;

    friend bool operator==(const AppearanceParams&, const AppearanceParams&) = default;
};

/// Sampling ranges. Translation is 20 px at 256 and scales linearly with size.
struct AffineLimits {
    double theta = 15.0;
    double translation = 20.0;
    double scale_lo = 0.85;
    double scale_hi = 1.15;
    double shear = 10.0;

    static AffineLimits for_size(int size) {
        AffineLimits l;
        l.translation = 20.0 * size / 256.0;
        return l;
    }
    bool contains(const AffineParams& p) const;
};

struct AppearanceLimits {
    double gamma_lo = 0.7, gamma_hi = 1.4;
    double gain_lo = 0.7, gain_hi = 1.3;
    double bias = 0.15;

    bool contains(const AppearanceParams& q) const;
};

struct Blob {
    double cx = 0.0, cy = 0.0;
    double sigma = 1.0;
    double amplitude = 1.0;
};

struct SceneSpec {
    int height = 64;
    int width = 64;
    std::vector<Blob> blobs;
    // White noise on an (H/8)x(W/8) grid in [-1,1] times this, bilinearly upsampled.
    double noise_amplitude = 0.15;
    uint64_t noise_seed = 0;
};

/// Blob count in [6,14], centers anywhere in the frame, sigma in [4,24]*H/256,
/// amplitude in [0.3,1].
SceneSpec sample_scene(Rng& rng, int height, int width);

/// Sum of blobs plus noise, min-max normalized to [0,1]. A flat field maps to zeros.
/// H and W must be divisible by 8 when noise_amplitude is nonzero.
Tensor render_scene(const SceneSpec& spec);

template <UniformSource R>
AffineParams sample_affine(R& rng, const AffineLimits& lim) {
    auto draw = [&](double lo, double hi) { return lo + (hi - lo) * static_cast<double>(rng.uniform()); };
    AffineParams p;
    p.theta = draw(-lim.theta, lim.theta);
    p.tx = draw(-lim.translation, lim.translation);
    p.ty = draw(-lim.translation, lim.translation);
    p.sx = draw(lim.scale_lo, lim.scale_hi);
    p.sy = draw(lim.scale_lo, lim.scale_hi);
    p.shear = draw(-lim.shear, lim.shear);
    return p;
}

template <UniformSource R>
AppearanceParams sample_appearance(R& rng, const AppearanceLimits& lim = {}) {
    auto draw = [&](double lo, double hi) { return lo + (hi - lo) * static_cast<double>(rng.uniform()); };
    AppearanceParams q;
    q.gamma = draw(lim.gamma_lo, lim.gamma_hi);
    q.gain = draw(lim.gain_lo, lim.gain_hi);
    q.bias = draw(-lim.bias, lim.bias);
    return q;
}

/// Point map x' = M x + t in pixel coordinates centered on ((W-1)/2, (H-1)/2).
struct Affine2D {
    std::array<double, 4> m{1.0, 0.0, 0.0, 1.0};  // row-major 2x2
    std::array<double, 2> t{0.0, 0.0};

    // M = scale * shear * rotation, then translation.
    static Affine2D from_params(const AffineParams& p);
    Affine2D inverse() const;
};

/// Moves content by `map`: out(y) = in(map^-1(y)), bilinear, reads outside the frame are 0.
Tensor warp_affine(const Tensor& image, const Affine2D& map);
inline Tensor warp_affine(const Tensor& image, const AffineParams& p) {
    return warp_affine(image, Affine2D::from_params(p));
}

/// clamp(gain * x^gamma + bias, 0, 1) per pixel.
Tensor appearance_shift(const Tensor& image, const AppearanceParams& q);

/// Field-wise linear interpolation.
AffineParams lerp(const AffineParams& a, const AffineParams& b, double w);

struct RegistrationSample {
    Tensor moving;  // geometry changed
    Tensor fixed;   // appearance changed; the registration target
    int64_t t = 0;
    int64_t sequence_id = 0;
    AffineParams affine;
    AppearanceParams appearance;
    uint64_t seed = 0;
};

using Sequence = std::vector<RegistrationSample>;

/// One scene per sequence; frame i uses the affine interpolated between two sampled
/// endpoints at i/(L-1); appearance is shared by all frames. Throws RangeError
/// when length exceeds max_frames and ContractError when it is < 1.
Sequence make_sequence(uint64_t seed, int length, int height, int width, int64_t sequence_id = 0,
                       int max_frames = 64);

}  // namespace regfactor
