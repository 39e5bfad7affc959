#include "regfactor/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "regfactor/errors.hpp"

namespace regfactor {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapCMat = Eigen::Map<const RowMat>;

using Node = Tape::Node;

void require_rank(const Var& x, size_t rank, const char* op) {
    if (x.shape().size() != rank) {
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(x.shape()));
    }
}

void require_same_shape(const Var& x, const Var& y, const char* op) {
    if (x.shape() != y.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(x.shape()) + " vs " +
                         shape_str(y.shape()));
    }
}

struct ConvGeometry {
    int64_t n, cin, h, w, cout, kh, kw, ho, wo, stride, pad;
    int64_t k() const { return cin * kh * kw; }
    int64_t p() const { return ho * wo; }
};

void im2col(const double* x, const ConvGeometry& g, double* col) {
    for (int64_t c = 0; c < g.cin; ++c) {
        const double* plane = x + c * g.h * g.w;
        for (int64_t i = 0; i < g.kh; ++i) {
            for (int64_t j = 0; j < g.kw; ++j) {
                double* row = col + ((c * g.kh + i) * g.kw + j) * g.p();
                for (int64_t oy = 0; oy < g.ho; ++oy) {
                    const int64_t iy = oy * g.stride - g.pad + i;
                    double* dst = row + oy * g.wo;
                    if (iy < 0 || iy >= g.h) {
                        std::fill(dst, dst + g.wo, 0.0);
                        continue;
                    }
                    const double* src = plane + iy * g.w;
                    for (int64_t ox = 0; ox < g.wo; ++ox) {
                        const int64_t ix = ox * g.stride - g.pad + j;
                        dst[ox] = (ix >= 0 && ix < g.w) ? src[ix] : 0.0;
                    }
                }
            }
        }
    }
}

void col2im_add(const double* col, const ConvGeometry& g, double* dx) {
    for (int64_t c = 0; c < g.cin; ++c) {
        double* plane = dx + c * g.h * g.w;
        for (int64_t i = 0; i < g.kh; ++i) {
            for (int64_t j = 0; j < g.kw; ++j) {
                const double* row = col + ((c * g.kh + i) * g.kw + j) * g.p();
                for (int64_t oy = 0; oy < g.ho; ++oy) {
                    const int64_t iy = oy * g.stride - g.pad + i;
                    if (iy < 0 || iy >= g.h) continue;
                    const double* src = row + oy * g.wo;
                    double* dst = plane + iy * g.w;
                    for (int64_t ox = 0; ox < g.wo; ++ox) {
                        const int64_t ix = ox * g.stride - g.pad + j;
                        if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

// Shared elementwise unary op with derivative expressed through input and output.
template <typename F, typename D>
Var unary(const Var& x, std::string_view op, F f, D dfdx) {
    const Tensor& xv = x.value();
    Tensor out(xv.shape());
    auto xd = xv.data();
    auto od = out.data();
    for (size_t i = 0; i < od.size(); ++i) od[i] = f(xd[i]);
    return x.tape().record(op, std::move(out), {x}, [dfdx](const Node& o, std::span<Node* const> in) {
        if (!in[0]->needs_grad) return;
        auto xd = in[0]->value().data();
        auto yd = o.value().data();
        for (size_t i = 0; i < o.grad.size(); ++i) in[0]->grad[i] += o.grad[i] * dfdx(xd[i], yd[i]);
    });
}

}  // namespace

Var conv2d(const Var& input, const Var& weight, const std::optional<Var>& bias, int stride, int padding) {
    require_rank(input, 4, "conv2d");
    require_rank(weight, 4, "conv2d");
    const Shape& xs = input.shape();
    const Shape& ws = weight.shape();
    if (xs[1] != ws[1]) {
        throw ShapeError("conv2d: input channels " + std::to_string(xs[1]) + " != weight channels " +
                         std::to_string(ws[1]));
    }
    if (ws[2] % 2 == 0 || ws[3] % 2 == 0) throw ShapeError("conv2d: kernel extents must be odd");
    if (stride != 1 && stride != 2) throw ShapeError("conv2d: stride must be 1 or 2");
    if (padding < 0) throw ShapeError("conv2d: negative padding");
    if (bias && (bias->shape().size() != 1 || bias->dim(0) != ws[0])) {
        throw ShapeError("conv2d: bias shape " + shape_str(bias->shape()) + " for " + std::to_string(ws[0]) +
                         " output channels");
    }
    ConvGeometry g{xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], ws[3], 0, 0, stride, padding};
    const int64_t hnum = g.h + 2 * g.pad - g.kh;
    const int64_t wnum = g.w + 2 * g.pad - g.kw;
    if (hnum < 0 || wnum < 0) throw ShapeError("conv2d: kernel larger than padded input");
    g.ho = hnum / g.stride + 1;
    g.wo = wnum / g.stride + 1;

    Tensor out(Shape{g.n, g.cout, g.ho, g.wo});
    Buffer col(static_cast<size_t>(g.k() * g.p()));
    MapCMat wm(weight.value().data().data(), g.cout, g.k());
    for (int64_t n = 0; n < g.n; ++n) {
        im2col(input.value().data().data() + n * g.cin * g.h * g.w, g, col.data());
        MapMat ym(out.data().data() + n * g.cout * g.p(), g.cout, g.p());
        ym.noalias() = wm * MapCMat(col.data(), g.k(), g.p());
        if (bias) {
            auto b = bias->value().data();
            for (int64_t c = 0; c < g.cout; ++c) ym.row(c).array() += b[static_cast<size_t>(c)];
        }
    }

    std::vector<Var> inputs{input, weight};
    if (bias) inputs.push_back(*bias);
    return input.tape().record("conv2d", std::move(out), std::move(inputs),
                               [g](const Node& o, std::span<Node* const> in) {
        Node& x = *in[0];
        Node& w = *in[1];
        Buffer col(static_cast<size_t>(g.k() * g.p()));
        MapCMat wm(w.value().data().data(), g.cout, g.k());
        for (int64_t n = 0; n < g.n; ++n) {
            MapCMat gy(o.grad.data() + n * g.cout * g.p(), g.cout, g.p());
            if (w.needs_grad) {
                im2col(x.value().data().data() + n * g.cin * g.h * g.w, g, col.data());
                MapMat(w.grad.data(), g.cout, g.k()).noalias() += gy * MapCMat(col.data(), g.k(), g.p()).transpose();
            }
            if (x.needs_grad) {
                MapMat(col.data(), g.k(), g.p()).noalias() = wm.transpose() * gy;
                col2im_add(col.data(), g, x.grad.data() + n * g.cin * g.h * g.w);
            }
            if (in.size() > 2 && in[2]->needs_grad) {
                for (int64_t c = 0; c < g.cout; ++c) in[2]->grad[static_cast<size_t>(c)] += gy.row(c).sum();
            }
        }
    });
}

namespace {

// floor_var: r = 1/sqrt(max(var, eps)) instead of 1/sqrt(var + eps).
Var plane_norm(const Var& x, double eps, bool floor_var, const char* name) {
    require_rank(x, 4, name);
    if (!(eps > 0.0)) throw ContractError(std::string(name) + ": eps must be positive");
    const Shape& s = x.shape();
    const int64_t planes = s[0] * s[1];
    const int64_t hw = s[2] * s[3];
    Tensor out(s);
    std::vector<double> inv_std(static_cast<size_t>(planes));
    std::vector<char> clamped(static_cast<size_t>(planes), 0);
    const double* xd = x.value().data().data();
    double* yd = out.data().data();
    for (int64_t p = 0; p < planes; ++p) {
        const double* src = xd + p * hw;
        double mean = 0.0;
        for (int64_t i = 0; i < hw; ++i) mean += src[i];
        mean /= static_cast<double>(hw);
        double var = 0.0;
        for (int64_t i = 0; i < hw; ++i) var += (src[i] - mean) * (src[i] - mean);
        var /= static_cast<double>(hw);
        double r;
        if (floor_var) {
            clamped[static_cast<size_t>(p)] = var <= eps;
            r = 1.0 / std::sqrt(std::max(var, eps));
        } else {
            r = 1.0 / std::sqrt(var + eps);
        }
        inv_std[static_cast<size_t>(p)] = r;
        for (int64_t i = 0; i < hw; ++i) yd[p * hw + i] = (src[i] - mean) * r;
    }
    return x.tape().record(name, std::move(out), {x},
                           [planes, hw, inv_std = std::move(inv_std), clamped = std::move(clamped)](
                               const Node& o, std::span<Node* const> in) {
        if (!in[0]->needs_grad) return;
        const double* y = o.value().data().data();
        const double inv_n = 1.0 / static_cast<double>(hw);
        for (int64_t p = 0; p < planes; ++p) {
            const double* gy = o.grad.data() + p * hw;
            const double* yp = y + p * hw;
            double gmean = 0.0;
            double gymean = 0.0;
            for (int64_t i = 0; i < hw; ++i) {
                gmean += gy[i];
                gymean += gy[i] * yp[i];
            }
            gmean *= inv_n;
            gymean *= inv_n;
            if (clamped[static_cast<size_t>(p)]) gymean = 0.0;
            const double r = inv_std[static_cast<size_t>(p)];
            double* gx = in[0]->grad.data() + p * hw;
            for (int64_t i = 0; i < hw; ++i) gx[i] += r * (gy[i] - gmean - yp[i] * gymean);
        }
    });
}

}  // namespace

Var instance_norm(const Var& x, double eps) { return plane_norm(x, eps, false, "instance_norm"); }

Var standardize(const Var& x, double var_floor) { return plane_norm(x, var_floor, true, "standardize"); }

Var instance_norm_ref(const Var& x, const Var& ref, double eps) {
    require_rank(x, 4, "instance_norm_ref");
    if (x.shape() != ref.shape()) {
        throw ShapeError("instance_norm_ref: " + shape_str(x.shape()) + " vs reference " + shape_str(ref.shape()));
    }
    if (!(eps > 0.0)) throw ContractError("instance_norm_ref: eps must be positive");
    const Shape& s = x.shape();
    const int64_t planes = s[0] * s[1];
    const int64_t hw = s[2] * s[3];
    Tensor out(s);
    std::vector<double> means(static_cast<size_t>(planes)), inv_std(static_cast<size_t>(planes));
    const double* xd = x.value().data().data();
    const double* rd = ref.value().data().data();
    double* yd = out.data().data();
    for (int64_t p = 0; p < planes; ++p) {
        const double* src = rd + p * hw;
        double mean = 0.0;
        for (int64_t i = 0; i < hw; ++i) mean += src[i];
        mean /= static_cast<double>(hw);
        double var = 0.0;
        for (int64_t i = 0; i < hw; ++i) var += (src[i] - mean) * (src[i] - mean);
        var /= static_cast<double>(hw);
        const double r = 1.0 / std::sqrt(var + eps);
        means[static_cast<size_t>(p)] = mean;
        inv_std[static_cast<size_t>(p)] = r;
        for (int64_t i = 0; i < hw; ++i) yd[p * hw + i] = (xd[p * hw + i] - mean) * r;
    }
    return x.tape().record("instance_norm_ref", std::move(out), {x, ref},
                           [planes, hw, means = std::move(means), inv_std = std::move(inv_std)](
                               const Node& o, std::span<Node* const> in) {
        const double* xd = in[0]->value().data().data();
        const double* rd = in[1]->value().data().data();
        const double inv_n = 1.0 / static_cast<double>(hw);
        for (int64_t p = 0; p < planes; ++p) {
            const double* gy = o.grad.data() + p * hw;
            const double mean = means[static_cast<size_t>(p)];
            const double r = inv_std[static_cast<size_t>(p)];
            if (in[0]->needs_grad) {
                double* gx = in[0]->grad.data() + p * hw;
                for (int64_t i = 0; i < hw; ++i) gx[i] += gy[i] * r;
            }
            if (in[1]->needs_grad) {
                double gsum = 0.0, gcentered = 0.0;
                for (int64_t i = 0; i < hw; ++i) {
                    gsum += gy[i];
                    gcentered += gy[i] * (xd[p * hw + i] - mean);
                }
                // d/dmean = -r sum(g); d/dvar = -r^3/2 sum(g (x - mean)).
                const double gmean = -r * gsum;
                const double gvar = -0.5 * r * r * r * gcentered;
                double* gr = in[1]->grad.data() + p * hw;
                for (int64_t i = 0; i < hw; ++i) {
                    gr[i] += (gmean + 2.0 * gvar * (rd[p * hw + i] - mean)) * inv_n;
                }
            }
        }
    });
}

namespace {

// Source taps for one output coordinate under the half-pixel rule.
struct Tap {
    int64_t i0, i1;
    double w1;
};

std::vector<Tap> upsample_taps(int64_t in, int factor) {
    std::vector<Tap> taps(static_cast<size_t>(in * factor));
    for (int64_t o = 0; o < in * factor; ++o) {
        double src = (static_cast<double>(o) + 0.5) / factor - 0.5;
        if (src < 0.0) src = 0.0;
        const auto i0 = std::min(static_cast<int64_t>(std::floor(src)), in - 1);
        const int64_t i1 = std::min(i0 + 1, in - 1);
        taps[static_cast<size_t>(o)] = {i0, i1, src - static_cast<double>(i0)};
    }
    return taps;
}

}  // namespace

Var bilinear_upsample(const Var& x, int factor) {
    require_rank(x, 4, "bilinear_upsample");
    if (factor < 2) throw ContractError("bilinear_upsample: factor must be >= 2");
    const Shape& s = x.shape();
    const int64_t planes = s[0] * s[1];
    const int64_t h = s[2], w = s[3], oh = h * factor, ow = w * factor;
    auto ty = upsample_taps(h, factor);
    auto tx = upsample_taps(w, factor);
    Tensor out(Shape{s[0], s[1], oh, ow});
    const double* xd = x.value().data().data();
    double* yd = out.data().data();
    for (int64_t p = 0; p < planes; ++p) {
        const double* src = xd + p * h * w;
        for (int64_t oy = 0; oy < oh; ++oy) {
            const Tap& a = ty[static_cast<size_t>(oy)];
            for (int64_t ox = 0; ox < ow; ++ox) {
                const Tap& b = tx[static_cast<size_t>(ox)];
                const double top = src[a.i0 * w + b.i0] * (1.0 - b.w1) + src[a.i0 * w + b.i1] * b.w1;
                const double bot = src[a.i1 * w + b.i0] * (1.0 - b.w1) + src[a.i1 * w + b.i1] * b.w1;
                yd[(p * oh + oy) * ow + ox] = top * (1.0 - a.w1) + bot * a.w1;
            }
        }
    }
    return x.tape().record("bilinear_upsample", std::move(out), {x},
                           [=](const Node& o, std::span<Node* const> in) {
        if (!in[0]->needs_grad) return;
        for (int64_t p = 0; p < planes; ++p) {
            double* gx = in[0]->grad.data() + p * h * w;
            for (int64_t oy = 0; oy < oh; ++oy) {
                const Tap& a = ty[static_cast<size_t>(oy)];
                for (int64_t ox = 0; ox < ow; ++ox) {
                    const Tap& b = tx[static_cast<size_t>(ox)];
                    const double g = o.grad[static_cast<size_t>((p * oh + oy) * ow + ox)];
                    gx[a.i0 * w + b.i0] += g * (1.0 - a.w1) * (1.0 - b.w1);
                    gx[a.i0 * w + b.i1] += g * (1.0 - a.w1) * b.w1;
                    gx[a.i1 * w + b.i0] += g * a.w1 * (1.0 - b.w1);
                    gx[a.i1 * w + b.i1] += g * a.w1 * b.w1;
                }
            }
        }
    });
}

Var global_avg_pool(const Var& x) {
    require_rank(x, 4, "global_avg_pool");
    const Shape& s = x.shape();
    const int64_t planes = s[0] * s[1];
    const int64_t hw = s[2] * s[3];
    Tensor out(Shape{s[0], s[1]});
    const double* xd = x.value().data().data();
    for (int64_t p = 0; p < planes; ++p) {
        double acc = 0.0;
        for (int64_t i = 0; i < hw; ++i) acc += xd[p * hw + i];
        out[static_cast<size_t>(p)] = acc / static_cast<double>(hw);
    }
    return x.tape().record("global_avg_pool", std::move(out), {x}, [planes, hw](const Node& o, std::span<Node* const> in) {
        if (!in[0]->needs_grad) return;
        const double inv = 1.0 / static_cast<double>(hw);
        for (int64_t p = 0; p < planes; ++p) {
            const double g = o.grad[static_cast<size_t>(p)] * inv;
            double* gx = in[0]->grad.data() + p * hw;
            for (int64_t i = 0; i < hw; ++i) gx[i] += g;
        }
    });
}

Var linear(const Var& x, const Var& weight, const std::optional<Var>& bias) {
    require_rank(x, 2, "linear");
    require_rank(weight, 2, "linear");
    const int64_t n = x.dim(0), din = x.dim(1), dout = weight.dim(0);
    if (weight.dim(1) != din) {
        throw ShapeError("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(weight.shape()));
    }
    if (bias && (bias->shape().size() != 1 || bias->dim(0) != dout)) {
        throw ShapeError("linear: bias shape " + shape_str(bias->shape()));
    }
    Tensor out(Shape{n, dout});
    MapMat ym(out.data().data(), n, dout);
    ym.noalias() = MapCMat(x.value().data().data(), n, din) * MapCMat(weight.value().data().data(), dout, din).transpose();
    if (bias) {
        Eigen::Map<const Eigen::RowVectorXd> b(bias->value().data().data(), dout);
        ym.rowwise() += b;
    }
    std::vector<Var> inputs{x, weight};
    if (bias) inputs.push_back(*bias);
    return x.tape().record("linear", std::move(out), std::move(inputs), [n, din, dout](const Node& o, std::span<Node* const> in) {
        MapCMat gy(o.grad.data(), n, dout);
        if (in[0]->needs_grad) {
            MapMat(in[0]->grad.data(), n, din).noalias() += gy * MapCMat(in[1]->value().data().data(), dout, din);
        }
        if (in[1]->needs_grad) {
            MapMat(in[1]->grad.data(), dout, din).noalias() += gy.transpose() * MapCMat(in[0]->value().data().data(), n, din);
        }
        if (in.size() > 2 && in[2]->needs_grad) {
            Eigen::Map<Eigen::RowVectorXd>(in[2]->grad.data(), dout) += gy.colwise().sum();
        }
    });
}

Var matmul(const Var& a, const Var& b) {
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    Tensor out(Shape{m, n});
    MapMat(out.data().data(), m, n).noalias() =
        MapCMat(a.value().data().data(), m, k) * MapCMat(b.value().data().data(), k, n);
    return a.tape().record("matmul", std::move(out), {a, b}, [m, k, n](const Node& o, std::span<Node* const> in) {
        MapCMat gy(o.grad.data(), m, n);
        if (in[0]->needs_grad) {
            MapMat(in[0]->grad.data(), m, k).noalias() += gy * MapCMat(in[1]->value().data().data(), k, n).transpose();
        }
        if (in[1]->needs_grad) {
            MapMat(in[1]->grad.data(), k, n).noalias() += MapCMat(in[0]->value().data().data(), m, k).transpose() * gy;
        }
    });
}

Var transpose(const Var& a) {
    require_rank(a, 2, "transpose");
    const int64_t r = a.dim(0), c = a.dim(1);
    Tensor out(Shape{c, r});
    MapMat(out.data().data(), c, r) = MapCMat(a.value().data().data(), r, c).transpose();
    return a.tape().record("transpose", std::move(out), {a}, [r, c](const Node& o, std::span<Node* const> in) {
        if (!in[0]->needs_grad) return;
        MapMat(in[0]->grad.data(), r, c) += MapCMat(o.grad.data(), c, r).transpose();
    });
}

Var softmax(const Var& x) {
    if (x.shape().empty()) throw ShapeError("softmax: rank-0 input");
    const int64_t d = x.shape().back();
    const int64_t rows = static_cast<int64_t>(x.numel()) / d;
    Tensor out(x.shape());
    const double* xd = x.value().data().data();
    double* yd = out.data().data();
    for (int64_t r = 0; r < rows; ++r) {
        const double* src = xd + r * d;
        double* dst = yd + r * d;
        const double mx = *std::max_element(src, src + d);
        double total = 0.0;
        for (int64_t i = 0; i < d; ++i) {
            dst[i] = std::exp(src[i] - mx);
            total += dst[i];
        }
        for (int64_t i = 0; i < d; ++i) dst[i] /= total;
    }
    return x.tape().record("softmax", std::move(out), {x}, [rows, d](const Node& o, std::span<Node* const> in) {
        if (!in[0]->needs_grad) return;
        const double* y = o.value().data().data();
        for (int64_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (int64_t i = 0; i < d; ++i) dot += o.grad[static_cast<size_t>(r * d + i)] * y[r * d + i];
            for (int64_t i = 0; i < d; ++i) {
                const auto k = static_cast<size_t>(r * d + i);
                in[0]->grad[k] += y[k] * (o.grad[k] - dot);
            }
        }
    });
}

Var relu(const Var& x) {
    return unary(
        x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
        [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Var leaky_relu(const Var& x, double slope) {
    return unary(
        x, "leaky_relu", [slope](double v) { return v > 0.0 ? v : slope * v; },
        [slope](double v, double) { return v > 0.0 ? 1.0 : slope; });
}

Var sigmoid(const Var& x) {
    return unary(
        x, "sigmoid",
        [](double v) {
            if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
            const double e = std::exp(v);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

Var activation(const Var& x, Activation kind) {
    switch (kind) {
        case Activation::relu:
            return relu(x);
        case Activation::leaky_relu:
            return leaky_relu(x, kLeakySlope);
        case Activation::sigmoid:
            return sigmoid(x);
    }
    throw ContractError("activation: unknown kind");
}

Var concat(std::initializer_list<Var> xs, size_t axis) {
    return concat(std::span<const Var>(xs.begin(), xs.size()), axis);
}

Var concat(std::span<const Var> xs, size_t axis) {
    if (xs.empty()) throw ShapeError("concat: no operands");
    const Shape& first = xs[0].shape();
    if (axis >= first.size()) throw ShapeError("concat: axis out of range for " + shape_str(first));
    Shape out_shape = first;
    out_shape[axis] = 0;
    for (const Var& v : xs) {
        const Shape& s = v.shape();
        bool ok = s.size() == first.size();
        for (size_t a = 0; ok && a < s.size(); ++a) ok = (a == axis) || s[a] == first[a];
        if (!ok) throw ShapeError("concat: " + shape_str(s) + " incompatible with " + shape_str(first));
        out_shape[axis] += s[axis];
    }
    int64_t outer = 1, inner = 1;
    for (size_t a = 0; a < axis; ++a) outer *= first[a];
    for (size_t a = axis + 1; a < first.size(); ++a) inner *= first[a];
    std::vector<int64_t> chunk;
    for (const Var& v : xs) chunk.push_back(v.shape()[axis] * inner);
    const int64_t out_chunk = out_shape[axis] * inner;

    Tensor out(out_shape);
    int64_t offset = 0;
    for (size_t k = 0; k < xs.size(); ++k) {
        const double* src = xs[k].value().data().data();
        for (int64_t o = 0; o < outer; ++o) {
            std::copy_n(src + o * chunk[k], chunk[k], out.data().data() + o * out_chunk + offset);
        }
        offset += chunk[k];
    }
    std::vector<Var> inputs(xs.begin(), xs.end());
    return xs[0].tape().record("concat", std::move(out), std::move(inputs),
                               [outer, out_chunk, chunk](const Node& o, std::span<Node* const> in) {
        int64_t offset = 0;
        for (size_t k = 0; k < in.size(); ++k) {
            if (in[k]->needs_grad) {
                for (int64_t r = 0; r < outer; ++r) {
                    const double* g = o.grad.data() + r * out_chunk + offset;
                    double* dst = in[k]->grad.data() + r * chunk[k];
                    for (int64_t i = 0; i < chunk[k]; ++i) dst[i] += g[i];
                }
            }
            offset += chunk[k];
        }
    });
}

Var slice(const Var& x, size_t axis, int64_t start, int64_t length) {
    const Shape& s = x.shape();
    if (axis >= s.size()) throw ShapeError("slice: axis out of range for " + shape_str(s));
    if (start < 0 || length < 1 || start + length > s[axis]) {
        throw ShapeError("slice: [" + std::to_string(start) + ", +" + std::to_string(length) + ") outside axis of " +
                         std::to_string(s[axis]));
    }
    int64_t outer = 1, inner = 1;
    for (size_t a = 0; a < axis; ++a) outer *= s[a];
    for (size_t a = axis + 1; a < s.size(); ++a) inner *= s[a];
    Shape out_shape = s;
    out_shape[axis] = length;
    Tensor out(out_shape);
    const int64_t src_chunk = s[axis] * inner, dst_chunk = length * inner, off = start * inner;
    const double* xd = x.value().data().data();
    for (int64_t o = 0; o < outer; ++o) std::copy_n(xd + o * src_chunk + off, dst_chunk, out.data().data() + o * dst_chunk);
    return x.tape().record("slice", std::move(out), {x}, [=](const Node& o, std::span<Node* const> in) {
        if (!in[0]->needs_grad) return;
        for (int64_t r = 0; r < outer; ++r) {
            const double* g = o.grad.data() + r * dst_chunk;
            double* dst = in[0]->grad.data() + r * src_chunk + off;
            for (int64_t i = 0; i < dst_chunk; ++i) dst[i] += g[i];
        }
    });
}

Var reshape(const Var& x, Shape shape) {
    Tensor out = x.value().reshaped(std::move(shape));
    return x.tape().record("reshape", std::move(out), {x}, [](const Node& o, std::span<Node* const> in) {
        if (!in[0]->needs_grad) return;
        for (size_t i = 0; i < o.grad.size(); ++i) in[0]->grad[i] += o.grad[i];
    });
}

namespace {

template <typename F, typename DX, typename DY>
Var binary(const Var& x, const Var& y, const char* op, F f, DX dx, DY dy) {
    require_same_shape(x, y, op);
    Tensor out(x.shape());
    auto xd = x.value().data();
    auto yd = y.value().data();
    auto od = out.data();
    for (size_t i = 0; i < od.size(); ++i) od[i] = f(xd[i], yd[i]);
    return x.tape().record(op, std::move(out), {x, y}, [dx, dy](const Node& o, std::span<Node* const> in) {
        auto xd = in[0]->value().data();
        auto yd = in[1]->value().data();
        if (in[0]->needs_grad) {
            for (size_t i = 0; i < o.grad.size(); ++i) in[0]->grad[i] += o.grad[i] * dx(xd[i], yd[i]);
        }
        if (in[1]->needs_grad) {
            for (size_t i = 0; i < o.grad.size(); ++i) in[1]->grad[i] += o.grad[i] * dy(xd[i], yd[i]);
        }
    });
}

}  // namespace

Var add(const Var& x, const Var& y) {
    return binary(
        x, y, "add", [](double a, double b) { return a + b; }, [](double, double) { return 1.0; },
        [](double, double) { return 1.0; });
}

Var sub(const Var& x, const Var& y) {
    return binary(
        x, y, "sub", [](double a, double b) { return a - b; }, [](double, double) { return 1.0; },
        [](double, double) { return -1.0; });
}

Var mul(const Var& x, const Var& y) {
    return binary(
        x, y, "mul", [](double a, double b) { return a * b; }, [](double, double b) { return b; },
        [](double a, double) { return a; });
}

Var scale(const Var& x, double c) {
    return unary(
        x, "scale", [c](double v) { return c * v; }, [c](double, double) { return c; });
}

Var channel_affine(const Var& x, const Var& gamma, const Var& beta) {
    require_rank(x, 4, "channel_affine");
    const Shape& s = x.shape();
    const Shape pc{s[0], s[1]};
    if (gamma.shape() != pc || beta.shape() != pc) {
        throw ShapeError("channel_affine: gamma/beta must be " + shape_str(pc) + ", got " + shape_str(gamma.shape()) +
                         " and " + shape_str(beta.shape()));
    }
    const int64_t planes = s[0] * s[1], hw = s[2] * s[3];
    Tensor out(s);
    const double* xd = x.value().data().data();
    for (int64_t p = 0; p < planes; ++p) {
        const double g = gamma.value()[static_cast<size_t>(p)];
        const double b = beta.value()[static_cast<size_t>(p)];
        for (int64_t i = 0; i < hw; ++i) out[static_cast<size_t>(p * hw + i)] = g * xd[p * hw + i] + b;
    }
    return x.tape().record("channel_affine", std::move(out), {x, gamma, beta},
                           [planes, hw](const Node& o, std::span<Node* const> in) {
        const double* xd = in[0]->value().data().data();
        for (int64_t p = 0; p < planes; ++p) {
            const double* g = o.grad.data() + p * hw;
            const double gam = in[1]->value()[static_cast<size_t>(p)];
            if (in[0]->needs_grad) {
                double* gx = in[0]->grad.data() + p * hw;
                for (int64_t i = 0; i < hw; ++i) gx[i] += gam * g[i];
            }
            if (in[1]->needs_grad) {
                double acc = 0.0;
                for (int64_t i = 0; i < hw; ++i) acc += g[i] * xd[p * hw + i];
                in[1]->grad[static_cast<size_t>(p)] += acc;
            }
            if (in[2]->needs_grad) {
                double acc = 0.0;
                for (int64_t i = 0; i < hw; ++i) acc += g[i];
                in[2]->grad[static_cast<size_t>(p)] += acc;
            }
        }
    });
}

Var add_spatial_broadcast(const Var& x, const Var& v) {
    require_rank(x, 4, "add_spatial_broadcast");
    const Shape& s = x.shape();
    if (v.shape() != Shape{s[0], s[1]}) {
        throw ShapeError("add_spatial_broadcast: vector " + shape_str(v.shape()) + " for " + shape_str(s));
    }
    const int64_t planes = s[0] * s[1], hw = s[2] * s[3];
    Tensor out = x.value();
    out.clear_grad();
    for (int64_t p = 0; p < planes; ++p) {
        const double b = v.value()[static_cast<size_t>(p)];
        for (int64_t i = 0; i < hw; ++i) out[static_cast<size_t>(p * hw + i)] += b;
    }
    return x.tape().record("add_spatial_broadcast", std::move(out), {x, v},
                           [planes, hw](const Node& o, std::span<Node* const> in) {
        if (in[0]->needs_grad) {
            for (size_t i = 0; i < o.grad.size(); ++i) in[0]->grad[i] += o.grad[i];
        }
        if (in[1]->needs_grad) {
            for (int64_t p = 0; p < planes; ++p) {
                double acc = 0.0;
                for (int64_t i = 0; i < hw; ++i) acc += o.grad[static_cast<size_t>(p * hw + i)];
                in[1]->grad[static_cast<size_t>(p)] += acc;
            }
        }
    });
}

namespace {

template <typename F, typename D>
Var reduce_mean(const Var& x, const char* op, double norm, F f, D df) {
    double acc = 0.0;
    for (double v : x.value().data()) acc += f(v);
    return x.tape().record(op, Tensor::scalar(acc / norm), {x}, [norm, df](const Node& o, std::span<Node* const> in) {
        if (!in[0]->needs_grad) return;
        const double g = o.grad[0] / norm;
        auto xd = in[0]->value().data();
        for (size_t i = 0; i < xd.size(); ++i) in[0]->grad[i] += g * df(xd[i]);
    });
}

}  // namespace

Var sum(const Var& x) {
    return reduce_mean(
        x, "sum", 1.0, [](double v) { return v; }, [](double) { return 1.0; });
}

Var mean_abs(const Var& x) {
    return reduce_mean(
        x, "mean_abs", static_cast<double>(x.numel()), [](double v) { return std::abs(v); },
        [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Var mean_sq(const Var& x) {
    return reduce_mean(
        x, "mean_sq", static_cast<double>(x.numel()), [](double v) { return v * v; }, [](double v) { return 2.0 * v; });
}

}  // namespace regfactor
