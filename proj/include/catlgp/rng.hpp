#pragma once

#include <cmath>
#include <cstdint>

namespace catlgp {

// All randomness in the library flows through SplitMix64 streams derived from
// a single user seed. Streams are addressed by (seed, tag, indices...), so a
// draw never depends on how many draws other streams made. That makes results
// reproducible bit-for-bit and independent of loop order or thread schedule.

inline std::uint64_t splitmix64(std::uint64_t& state) {
    state += 0x9e3779b97f4a7c15ull;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

inline std::uint64_t substream(std::uint64_t key, std::uint64_t a) {
    std::uint64_t s = key ^ (0x9e3779b97f4a7c15ull + a * 0xd1342543de82ef95ull);
    return splitmix64(s);
}
inline std::uint64_t substream(std::uint64_t key, std::uint64_t a, std::uint64_t b) {
    return substream(substream(key, a), b);
}
inline std::uint64_t substream(std::uint64_t key, std::uint64_t a, std::uint64_t b,
                               std::uint64_t c) {
    return substream(substream(substream(key, a), b), c);
}
inline std::uint64_t substream(std::uint64_t key, std::uint64_t a, std::uint64_t b,
                               std::uint64_t c, std::uint64_t e) {
    return substream(substream(substream(substream(key, a), b), c), e);
}

// Stream tags. Keep these unique; they partition the seed space by purpose.
namespace streams {
constexpr std::uint64_t x_noise = 1;      // q(X) reparameterization draws
constexpr std::uint64_t u_noise = 2;      // q(U) reparameterization draws
constexpr std::uint64_t f_noise = 3;      // conditional f draws
constexpr std::uint64_t sim_gp = 4;       // forward simulation GP draws
constexpr std::uint64_t sim_cat = 5;      // forward simulation category draws
constexpr std::uint64_t init = 6;         // initialization
constexpr std::uint64_t iteration = 7;    // per-iteration training noise
constexpr std::uint64_t eval = 8;         // reported ELBO evaluations
constexpr std::uint64_t restart = 9;      // multi-restart seeds
constexpr std::uint64_t candidate = 10;   // per-Q seeds in dimension selection
constexpr std::uint64_t predict = 11;     // predictive draws
constexpr std::uint64_t cluster = 12;     // synthetic cluster assignment
constexpr std::uint64_t prior = 13;       // latent prior draws
} // namespace streams

class RngStream {
  public:
    explicit RngStream(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() { return splitmix64(state_); }

    // uniform on [0, 1)
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    // standard normal, Box-Muller; the second value of each pair is cached
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        constexpr double two_pi = 6.283185307179586476925286766559;
        double u1 = double((next_u64() >> 11) + 1) * 0x1.0p-53; // (0, 1]
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        spare_ = r * std::sin(two_pi * u2);
        have_spare_ = true;
        return r * std::cos(two_pi * u2);
    }

  private:
    std::uint64_t state_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

} // namespace catlgp
