#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "regfactor/tensor.hpp"

namespace regfactor::testing {

inline Tensor random_tensor(Shape shape, uint64_t seed, double lo = -1.0, double hi = 1.0) {
    std::mt19937_64 gen(seed);
    std::uniform_real_distribution<double> dist(lo, hi);
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = dist(gen);
    return t;
}

// Magnitudes in [0.5, 1.5] with random signs: keeps gradient components away from zero,
// where central differences lose relative accuracy to rounding.
inline Tensor random_signed(Shape shape, uint64_t seed) {
    std::mt19937_64 gen(seed);
    std::uniform_real_distribution<double> mag(0.5, 1.5);
    std::bernoulli_distribution sign(0.5);
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = sign(gen) ? mag(gen) : -mag(gen);
    return t;
}

// Moves every element at least `margin` away from zero so relu kinks are not straddled.
inline void nudge_from_zero(Tensor& t, double margin = 1e-3) {
    for (double& v : t.data()) {
        if (std::abs(v) < margin) v = v < 0.0 ? -margin : margin;
    }
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

// Direct 2-D sliding window, weights built in place, no separable passes.
inline double ssim_oracle(const Tensor& a, const Tensor& b) {
    const int64_t h = a.dim(0), w = a.dim(1);
    double weights[11][11];
    double norm = 0.0;
    for (int i = 0; i < 11; ++i)
        for (int j = 0; j < 11; ++j) norm += weights[i][j] = std::exp(-((i - 5.0) * (i - 5.0) + (j - 5.0) * (j - 5.0)) / 4.5);
    const double c1 = 1e-4, c2 = 9e-4;
    double total = 0.0;
    int count = 0;
    for (int64_t y = 0; y + 11 <= h; ++y) {
        for (int64_t x = 0; x + 11 <= w; ++x, ++count) {
            double ma = 0, mb = 0;
            for (int i = 0; i < 11; ++i)
                for (int j = 0; j < 11; ++j) {
                    const double wt = weights[i][j] / norm;
                    ma += wt * a[static_cast<size_t>((y + i) * w + x + j)];
                    mb += wt * b[static_cast<size_t>((y + i) * w + x + j)];
                }
            double va = 0, vb = 0, cov = 0;
            for (int i = 0; i < 11; ++i)
                for (int j = 0; j < 11; ++j) {
                    const double wt = weights[i][j] / norm;
                    const double da = a[static_cast<size_t>((y + i) * w + x + j)] - ma;
                    const double db = b[static_cast<size_t>((y + i) * w + x + j)] - mb;
                    va += wt * da * da;
                    vb += wt * db * db;
                    cov += wt * da * db;
                }
            total += (2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    return total / count;
}

}  // namespace regfactor::testing
