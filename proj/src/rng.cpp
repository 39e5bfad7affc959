#include "regfactor/rng.hpp"

#include <cmath>
#include <cstdint>
#include <numbers>
#include <sstream>

#include "regfactor/errors.hpp"

namespace regfactor {

uint64_t splitmix64(uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

uint64_t derive_seed(uint64_t master, std::initializer_list<uint64_t> keys) {
    uint64_t h = splitmix64(master);
    for (uint64_t k : keys) h = splitmix64(h ^ splitmix64(k + 0x632BE59BD9B4E019ULL));
    return h;
}

int64_t Rng::uniform_int(int64_t lo, int64_t hi) {
    const auto span = static_cast<uint64_t>(hi - lo) + 1;
    // Rejection sampling keeps the draw unbiased.
    const uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    uint64_t r = engine_();
    while (r >= limit) r = engine_();
    return lo + static_cast<int64_t>(r % span);
}

double Rng::normal(double mean, double stddev) {
    // Box-Muller; 1 - u keeps the log argument in (0, 1].
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return mean + stddev * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::string Rng::state() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
}

void Rng::set_state(const std::string& text) {
    std::istringstream is(text);
    is >> engine_;
    if (!is) throw FormatError("invalid RNG state");
}

}  // namespace regfactor
