#pragma once

#include <cstddef>
#include <cstdint>
#include <random>

namespace fda {

std::uint64_t splitmix64(std::uint64_t x);

// Seeded generator whose draws are identical across standard libraries:
// only the raw mt19937_64 stream is used, never std:: distributions.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(splitmix64(seed)) {}

    std::uint64_t next() { return engine_(); }
    double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }
    std::size_t index(std::size_t n) { return static_cast<std::size_t>(engine_() % n); }
    double normal();

private:
    std::mt19937_64 engine_;
};

} // namespace fda
