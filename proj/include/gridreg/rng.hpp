#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <random>

namespace gridreg {

/// SplitMix64 finaliser; used to derive independent stream seeds.
constexpr std::uint64_t mix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

/// Module-level random streams. Every random draw in the project is keyed by
/// (seed, stream, counter) so results never depend on call order elsewhere.
enum class Stream : std::uint64_t {
    phantom = 1,
    gt_field = 2,
    intensity_noise = 3,
    label_noise = 4,
    mc_samples = 5,
    init_params = 6,
    grid_sampler = 7,
    batch_sampler = 8,
    test = 99,
};

/// Counter-based generator factory: the same key always yields the same engine state.
inline std::mt19937_64 make_engine(std::uint64_t seed, Stream stream, std::uint64_t counter = 0) {
    const std::uint64_t key = mix64(mix64(mix64(seed) ^ static_cast<std::uint64_t>(stream)) ^ counter);
    return std::mt19937_64(key);
}

/// Standard-normal draws via Box-Muller on 53-bit uniforms (portable across standard libraries).
template <typename Derived>
void fill_standard_normal(Eigen::DenseBase<Derived>& out, std::mt19937_64& engine) {
    using Scalar = typename Derived::Scalar;
    auto uniform = [&engine] { return (static_cast<double>(engine() >> 11) + 0.5) * 0x1.0p-53; };
    const Eigen::Index n = out.size();
    for (Eigen::Index i = 0; i < n; i += 2) {
        const double r = std::sqrt(-2.0 * std::log(uniform()));
        const double theta = 2.0 * 3.14159265358979323846 * uniform();
        out(i) = static_cast<Scalar>(r * std::cos(theta));
        if (i + 1 < n) {
            out(i + 1) = static_cast<Scalar>(r * std::sin(theta));
        }
    }
}

/// Uniform draw in [lo, hi) from 53 random bits.
inline double uniform_real(std::mt19937_64& engine, double lo, double hi) {
    return lo + (hi - lo) * (static_cast<double>(engine() >> 11) * 0x1.0p-53);
}

} // namespace gridreg
