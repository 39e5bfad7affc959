#pragma once

#include <concepts>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <string>

namespace regfactor {

// Anything that yields uniform doubles in [0, 1). Samplers take this instead of a
// concrete engine so tests can substitute fixed sequences.
template <typename T>
concept UniformSource = requires(T& src) {
    { src.uniform() } -> std::convertible_to<double>;
};

uint64_t splitmix64(uint64_t x);

// Order-sensitive key derivation: every (master, a, b, ...) tuple gets an independent stream.
uint64_t derive_seed(uint64_t master, std::initializer_list<uint64_t> keys);

/// Seedable generator with platform-independent conversions (the std distributions
/// are implementation-defined, which would break golden files across toolchains).
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    // Inclusive integer range.
    int64_t uniform_int(int64_t lo, int64_t hi);
    double normal(double mean = 0.0, double stddev = 1.0);
    uint64_t next_u64() { return engine_(); }

    std::string state() const;
    void set_state(const std::string& text);

private:
    std::mt19937_64 engine_;
};

}  // namespace regfactor
