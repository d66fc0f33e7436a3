#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace synbind {

// splitmix64 finalizer; derives independent child seeds so per-sample and
// per-step streams do not depend on evaluation order.
inline uint64_t mix_seed(uint64_t seed, uint64_t stream) {
    uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// Deterministic RNG. std::mt19937_64 output is pinned by the standard; the
// normal/uniform transforms live here because stdlib distributions are not
// portable across library versions.
class Rng {
public:
    explicit Rng(uint64_t seed) : seed_(seed), engine_(seed) {}

    uint64_t seed() const { return seed_; }
    uint64_t next_u64() { return engine_(); }

    // uniform in [0, 1)
    double uniform() { return (engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    uint64_t uniform_index(uint64_t n) {
        return static_cast<uint64_t>(uniform() * static_cast<double>(n)) % n;
    }

    // standard normal via Box-Muller
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * M_PI * u2;
        spare_      = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    float normal_f() { return static_cast<float>(normal()); }

    // Independent stream derived from this generator's seed (not its state).
    Rng child(uint64_t stream) const { return Rng(mix_seed(seed_, stream)); }

private:
    uint64_t seed_;
    std::mt19937_64 engine_;
    bool have_spare_ = false;
    double spare_    = 0.0;
};

}  // namespace synbind
