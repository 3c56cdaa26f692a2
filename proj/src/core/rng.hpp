#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace headgate {

// mt19937_64 with fixed derivation formulas on top, so streams are identical
// across platforms and standard library versions (std::*_distribution is not
// pinned by the standard; these are).
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // uniform in [0, n)
    uint64_t next_below(uint64_t n) {
        return static_cast<uint64_t>((static_cast<__uint128_t>(next_u64()) * n) >> 64);
    }

    // uniform double in [0, 1), 53 mantissa bits
    double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double next_uniform(double lo, double hi) { return lo + (hi - lo) * next_unit(); }

    // Box-Muller; one value per call, the pair partner is cached
    double next_normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = next_unit();
        double u2 = next_unit();
        while (u1 <= 0.0) u1 = next_unit();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    float next_normal_f(float stddev) { return static_cast<float>(next_normal()) * stddev; }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(next_below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 gen_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

} // namespace headgate
