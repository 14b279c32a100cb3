#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace g2t {

/// Deterministic pseudo-random generator based on splitmix64.
/// State transition: state += 0x9E3779B97F4A7C15, output = finalizer(state),
/// where the finalizer is the splitmix64 xor-shift-multiply mix. Identical
/// seeds produce identical streams on every platform. Child generators are
/// derived from the parent's seed and a stream index, so they are independent
/// of how many values the parent has drawn.
class Rng {
public:
    explicit Rng(std::uint64_t seed);

    std::uint64_t next_u64();

    /// Uniform in [0, 1).
    double uniform();

    /// Uniform integer in [0, n). n must be > 0.
    std::size_t uniform_int(std::size_t n);

    /// Box-Muller normal deviate.
    double normal(double mean = 0.0, double stddev = 1.0);

    /// Categorical draw; weights need not be normalized but must be
    /// nonnegative with a positive sum.
    std::size_t categorical(std::span<const double> weights);

    /// Independent substream keyed by `stream`. Does not consume state.
    Rng child(std::uint64_t stream) const;

    std::uint64_t seed() const { return seed_; }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = uniform_int(i);
            std::swap(v[i - 1], v[j]);
        }
    }

    /// k distinct indices drawn uniformly from [0, n) without replacement.
    std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k);

private:
    std::uint64_t seed_;
    std::uint64_t state_;
};

} // namespace g2t
