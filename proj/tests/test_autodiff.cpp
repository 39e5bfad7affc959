// Reverse-mode gradients against central differences, plus tape semantics.

#include <doctest.h>

#include <functional>
#include <string>

#include "regfactor/errors.hpp"
#include "regfactor/gradcheck.hpp"
#include "regfactor/ops.hpp"
#include "test_util.hpp"

using namespace regfactor;
using regfactor::testing::nudge_from_zero;
using regfactor::testing::random_signed;
using regfactor::testing::random_tensor;

namespace {

constexpr double kTol = 1e-6;
constexpr double kEps = 1e-6;

// Projects an op output onto a fixed random direction so every output element matters.
Var project(const Var& y, uint64_t seed) {
    Tape& tape = y.tape();
    return sum(mul(y, tape.constant(random_signed(y.shape(), seed))));
}

using UnaryBuilder = std::function<Var(Tape&, const Var&)>;

// Runs the check with respect to one operand on three random instances.
void check_wrt(const std::string& name, const Shape& shape, const UnaryBuilder& build, bool nudge = false) {
    for (uint64_t trial = 0; trial < 3; ++trial) {
        Tensor x = random_tensor(shape, 1000 + trial * 17);
        if (nudge) nudge_from_zero(x);
        const double err = finite_diff_check(
            ScalarFnOf([&](Tape& tape, const Var& xv) { return project(build(tape, xv), 77 + trial); }), x, kEps);
        INFO(name << " trial " << trial << " rel err " << err);
        CHECK(err < kTol);
    }
}

}  // namespace

TEST_CASE("gradients: conv2d w.r.t. input, weight and bias") {
    const Tensor w0 = random_tensor({3, 2, 3, 3}, 1);
    const Tensor b0 = random_tensor({3}, 2);
    const Tensor x0 = random_tensor({2, 2, 5, 5}, 3);
    for (int stride : {1, 2}) {
        check_wrt("conv input", {2, 2, 5, 5}, [&](Tape& t, const Var& x) {
            return conv2d(x, t.constant(w0), t.constant(b0), stride, 1);
        });
        check_wrt("conv weight", {3, 2, 3, 3}, [&](Tape& t, const Var& w) {
            return conv2d(t.constant(x0), w, t.constant(b0), stride, 1);
        });
        check_wrt("conv bias", {3}, [&](Tape& t, const Var& b) {
            return conv2d(t.constant(x0), t.constant(w0), b, stride, 1);
        });
    }
}

TEST_CASE("gradients: normalization, resampling, pooling") {
    check_wrt("instance_norm", {2, 3, 4, 4}, [](Tape&, const Var& x) { return instance_norm(x, 1e-5); });
    check_wrt("standardize", {2, 3, 4, 4}, [](Tape&, const Var& x) { return standardize(x, 1e-5); });
    const Tensor ref0 = random_tensor({2, 3, 4, 4}, 41, -2.0, 3.0), x0 = random_tensor({2, 3, 4, 4}, 42);
    check_wrt("instance_norm_ref x", {2, 3, 4, 4}, [&](Tape& t, const Var& x) {
        return instance_norm_ref(x, t.constant(ref0), 1e-5);
    });
    check_wrt("instance_norm_ref ref", {2, 3, 4, 4}, [&](Tape& t, const Var& r) {
        return instance_norm_ref(t.constant(x0), r, 1e-5);
    });
    check_wrt("instance_norm_ref shared", {2, 3, 4, 4}, [](Tape&, const Var& x) {
        return instance_norm_ref(x, x, 1e-5);
    });
    // Floor active on every plane: variance of U(-1,1) is ~1/3.
    check_wrt("standardize floored", {1, 2, 3, 3}, [](Tape&, const Var& x) { return standardize(x, 10.0); });
    check_wrt("bilinear_upsample x2", {1, 2, 3, 4}, [](Tape&, const Var& x) { return bilinear_upsample(x, 2); });
    check_wrt("bilinear_upsample x3", {1, 1, 3, 3}, [](Tape&, const Var& x) { return bilinear_upsample(x, 3); });
    check_wrt("global_avg_pool", {2, 3, 4, 5}, [](Tape&, const Var& x) { return global_avg_pool(x); });
}

TEST_CASE("gradients: dense algebra") {
    const Tensor w0 = random_tensor({4, 5}, 4), b0 = random_tensor({4}, 5), x0 = random_tensor({3, 5}, 6);
    check_wrt("linear x", {3, 5}, [&](Tape& t, const Var& x) { return linear(x, t.constant(w0), t.constant(b0)); });
    check_wrt("linear w", {4, 5}, [&](Tape& t, const Var& w) { return linear(t.constant(x0), w, t.constant(b0)); });
    check_wrt("linear b", {4}, [&](Tape& t, const Var& b) { return linear(t.constant(x0), t.constant(w0), b); });
    const Tensor m0 = random_tensor({5, 2}, 7);
    check_wrt("matmul a", {3, 5}, [&](Tape& t, const Var& a) { return matmul(a, t.constant(m0)); });
    check_wrt("matmul b", {5, 2}, [&](Tape& t, const Var& b) { return matmul(t.constant(x0), b); });
    check_wrt("transpose", {3, 5}, [](Tape&, const Var& a) { return transpose(a); });
    check_wrt("softmax", {3, 4}, [](Tape&, const Var& x) { return softmax(x); });
}

TEST_CASE("gradients: activations") {
    check_wrt("relu", {2, 7}, [](Tape&, const Var& x) { return relu(x); }, true);
    check_wrt("leaky_relu", {2, 7}, [](Tape&, const Var& x) { return leaky_relu(x); }, true);
    check_wrt("sigmoid", {2, 7}, [](Tape&, const Var& x) { return sigmoid(x); });
}

TEST_CASE("gradients: structural and elementwise ops") {
    const Tensor other = random_tensor({2, 3, 2, 2}, 8);
    check_wrt("concat", {2, 3, 2, 2}, [&](Tape& t, const Var& x) { return concat({t.constant(other), x, x}, 1); });
    check_wrt("slice", {2, 6, 2, 2}, [](Tape&, const Var& x) { return slice(x, 1, 2, 3); });
    check_wrt("reshape", {2, 6}, [](Tape&, const Var& x) { return reshape(x, {3, 4}); });
    check_wrt("add", {2, 3, 2, 2}, [&](Tape& t, const Var& x) { return add(x, t.constant(other)); });
    check_wrt("sub", {2, 3, 2, 2}, [&](Tape& t, const Var& x) { return sub(t.constant(other), x); });
    check_wrt("mul", {2, 3, 2, 2}, [&](Tape&, const Var& x) { return mul(x, x); });
    check_wrt("scale", {2, 3}, [](Tape&, const Var& x) { return scale(x, -2.5); });
    const Tensor g0 = random_signed({2, 3}, 9), b0 = random_tensor({2, 3}, 10);
    check_wrt("channel_affine x", {2, 3, 2, 2},
              [&](Tape& t, const Var& x) { return channel_affine(x, t.constant(g0), t.constant(b0)); });
    check_wrt("channel_affine gamma", {2, 3},
              [&](Tape& t, const Var& g) { return channel_affine(t.constant(other), g, t.constant(b0)); });
    check_wrt("channel_affine beta", {2, 3},
              [&](Tape& t, const Var& b) { return channel_affine(t.constant(other), t.constant(g0), b); });
    check_wrt("add_spatial_broadcast", {2, 3},
              [&](Tape& t, const Var& v) { return add_spatial_broadcast(t.constant(other), v); });
}

TEST_CASE("gradients: reductions") {
    for (uint64_t trial = 0; trial < 3; ++trial) {
        Tensor x = random_tensor({3, 4}, 200 + trial);
        nudge_from_zero(x);
        // Linear: central differences carry no truncation error, so a wide step isolates rounding.
        CHECK(finite_diff_check(ScalarFnOf([](Tape&, const Var& v) { return sum(v); }), x, 1e-3) < 1e-10);
        CHECK(finite_diff_check(ScalarFnOf([](Tape&, const Var& v) { return mean_abs(v); }), x) < kTol);
        CHECK(finite_diff_check(ScalarFnOf([](Tape&, const Var& v) { return mean_sq(v); }), x) < kTol);
    }
}

TEST_CASE("gradients: mean_sq of conv2d on a 4x4 image") {
    const Tensor w0 = random_tensor({2, 1, 3, 3}, 11);
    Tensor x = random_tensor({1, 1, 4, 4}, 12);
    const double err = finite_diff_check(
        ScalarFnOf([&](Tape& t, const Var& v) { return mean_sq(conv2d(v, t.constant(w0), std::nullopt, 1, 1)); }), x);
    CHECK(err < 1e-6);
}

TEST_CASE("backward: hand derivatives") {
    Tensor x(Shape{2}, {1.0, 2.0});
    x.set_requires_grad(true);
    Tensor p(Shape{3}, 0.5);
    p.set_requires_grad(true);
    Tape tape;
    Var xv = tape.parameter(x);
    tape.parameter(p);
    tape.backward(mean_sq(xv));
    CHECK(x.grad()[0] == 1.0);
    CHECK(x.grad()[1] == 2.0);
    for (double g : p.grad()) CHECK(g == 0.0);
}

TEST_CASE("backward: repeated calls accumulate exactly") {
    Tensor w = random_tensor({2, 3}, 21);
    w.set_requires_grad(true);
    Tape tape;
    Var loss = mean_sq(linear(tape.constant(random_tensor({4, 3}, 22)), tape.parameter(w), std::nullopt));
    tape.backward(loss);
    const std::vector<double> once(w.grad().begin(), w.grad().end());
    tape.backward(loss);
    for (size_t i = 0; i < once.size(); ++i) CHECK(w.grad()[i] == 2.0 * once[i]);
}

TEST_CASE("backward: non-scalar loss is a contract error") {
    Tape tape;
    Tensor x(Shape{2}, 1.0);
    x.set_requires_grad(true);
    CHECK_THROWS_AS(tape.backward(scale(tape.parameter(x), 2.0)), ContractError);
}

TEST_CASE("backward: parameters without requires_grad receive nothing") {
    Tensor frozen(Shape{2}, 1.0);
    Tape tape;
    tape.backward(sum(tape.parameter(frozen)));
    CHECK_FALSE(frozen.has_grad());
}

TEST_CASE("tape: operands precede results and leaves are shared") {
    Tensor w = random_tensor({1, 1, 3, 3}, 30);
    w.set_requires_grad(true);
    Tape tape;
    Var x = tape.constant(random_tensor({1, 1, 4, 4}, 31));
    Var a = conv2d(x, tape.parameter(w), std::nullopt, 1, 1);
    Var b = conv2d(x, tape.parameter(w), std::nullopt, 1, 1);
    CHECK(tape.parameter(w).id() == tape.parameter(w).id());
    Var loss = mean_sq(add(a, b));
    for (size_t i = 0; i < tape.size(); ++i)
        for (size_t in : tape.node(i).inputs) CHECK(in < i);
    const double err = finite_diff_check(
        ScalarFn([&](Tape& t) {
            Var xx = t.constant(x.value());
            return mean_sq(add(conv2d(xx, t.parameter(w), std::nullopt, 1, 1), conv2d(xx, t.parameter(w), std::nullopt, 1, 1)));
        }),
        w);
    CHECK(err < kTol);
    (void)loss;
}
