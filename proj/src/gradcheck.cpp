#include "regfactor/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace regfactor {

double finite_diff_check(const ScalarFn& f, Tensor& x, double eps, std::span<const size_t> coords) {
    const bool had_requires = x.requires_grad();
    const bool had_grad = x.has_grad();
    std::vector<double> saved_grad(x.grad().begin(), x.grad().end());
    x.set_requires_grad(true);
    x.zero_grad();

    {
        Tape tape;
        Var loss = f(tape);
        tape.backward(loss);
    }
    std::vector<double> analytic(x.grad().begin(), x.grad().end());

    std::vector<size_t> all;
    if (coords.empty()) {
        all.resize(x.numel());
        std::iota(all.begin(), all.end(), size_t{0});
        coords = all;
    }

    auto eval = [&] {
        Tape tape;
        return f(tape).item();
    };

    double worst = 0.0;
    for (size_t i : coords) {
        const double orig = x[i];
        // Use the steps actually representable around orig, not the nominal eps.
        const double hi = orig + eps;
        const double lo = orig - eps;
        x[i] = hi;
        const double up = eval();
        x[i] = lo;
        const double down = eval();
        x[i] = orig;
        const double numeric = (up - down) / (hi - lo);
        const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
        worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }

    if (had_grad) {
        std::copy(saved_grad.begin(), saved_grad.end(), x.grad().begin());
    } else {
        x.clear_grad();
    }
    x.set_requires_grad(had_requires);
    return worst;
}

double finite_diff_check(const ScalarFnOf& f, Tensor& x, double eps, std::span<const size_t> coords) {
    return finite_diff_check(ScalarFn([&](Tape& tape) { return f(tape, tape.parameter(x)); }), x, eps, coords);
}

}  // namespace regfactor
