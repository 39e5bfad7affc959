#pragma once

#include <optional>
#include <span>
#include <vector>

#include "regfactor/tape.hpp"

namespace regfactor {

// Differentiable operations. Every function records onto the tape of its first
// operand and throws ShapeError on incompatible operands.

/// Direct cross-correlation with zero padding.
/// input [N,Cin,H,W], weight [Cout,Cin,kh,kw] (odd kernel), bias [Cout] -> [N,Cout,H',W'],
/// H' = (H + 2*padding - kh) / stride + 1.
Var conv2d(const Var& input, const Var& weight, const std::optional<Var>& bias, int stride, int padding);

/// Per-(n,c)-plane standardization with population variance: (x - mean) / sqrt(var + eps).
Var instance_norm(const Var& x, double eps);

/// Per-plane (x - mean) / sqrt(max(var, var_floor)). Exactly invariant to a*x + b
/// (a > 0) whenever a^2 var stays above the floor.
Var standardize(const Var& x, double var_floor);

/// (x - mean(ref)) / sqrt(var(ref) + eps) with per-plane statistics taken from `ref`.
Var instance_norm_ref(const Var& x, const Var& ref, double eps);

/// Bilinear upsampling by an integer factor with half-pixel centers (align-corners off).
Var bilinear_upsample(const Var& x, int factor);

/// [N,C,H,W] -> [N,C], mean over each plane.
Var global_avg_pool(const Var& x);

/// x [N,Din] times weight [Dout,Din] transposed, plus optional bias [Dout].
Var linear(const Var& x, const Var& weight, const std::optional<Var>& bias);

Var matmul(const Var& a, const Var& b);  // [m,k] x [k,n]
Var transpose(const Var& a);             // 2-D only

/// Max-subtracted softmax over the last axis.
Var softmax(const Var& x);

enum class Activation { relu, leaky_relu, sigmoid };
inline constexpr double kLeakySlope = 0.2;

Var relu(const Var& x);
Var leaky_relu(const Var& x, double slope = kLeakySlope);
Var sigmoid(const Var& x);
Var activation(const Var& x, Activation kind);

Var concat(std::span<const Var> xs, size_t axis);
Var concat(std::initializer_list<Var> xs, size_t axis);
Var slice(const Var& x, size_t axis, int64_t start, int64_t length);
Var reshape(const Var& x, Shape shape);

Var add(const Var& x, const Var& y);
Var sub(const Var& x, const Var& y);
Var mul(const Var& x, const Var& y);
Var scale(const Var& x, double c);

/// gamma[n,c] * x[n,c,:,:] + beta[n,c]; gamma and beta are [N,C].
Var channel_affine(const Var& x, const Var& gamma, const Var& beta);

/// x[n,c,:,:] + v[n,c]: adds one vector identically at every spatial location.
Var add_spatial_broadcast(const Var& x, const Var& v);

Var sum(const Var& x);
Var mean_abs(const Var& x);
Var mean_sq(const Var& x);

}  // namespace regfactor
