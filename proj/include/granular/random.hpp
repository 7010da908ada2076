#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>

#include "granular/rootfind.hpp"
#include "granular/special.hpp"

namespace granular {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t& state) {
    state += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace detail

/// Derives an unrelated 64-bit seed from a base seed, a tag and an index.
/// Used to key disjoint substream families (training labels, evaluation,
/// reseeding studies) off one user-facing seed.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag, std::uint64_t index = 0) {
    std::uint64_t s = base ^ (tag * 0xd1342543de82ef95ULL);
    std::uint64_t h = detail::splitmix64(s);
    s = h ^ (index * 0xda942042e4dd58b5ULL);
    return detail::splitmix64(s);
}

/// Deterministic random stream keyed by (seed, stream_id).
///
/// A xoshiro256++ generator whose 256-bit state is expanded from the key via
/// SplitMix64, so distinct stream ids give unrelated sequences and the same
/// key always reproduces the same variates. Streams are value types and can
/// be handed to worker threads freely.
class RandomStream {
public:
    explicit RandomStream(std::uint64_t seed, std::uint64_t stream_id = 0) {
        std::uint64_t x = seed;
        const std::uint64_t mixed = detail::splitmix64(x);
        x = mixed ^ (stream_id * 0xda942042e4dd58b5ULL + 0x9e3779b97f4a7c15ULL);
        for (auto& w : state_) w = detail::splitmix64(x);
        if ((state_[0] | state_[1] | state_[2] | state_[3]) == 0) state_[0] = 1;
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    /// Uniform draw on the open interval (0, 1).
    double uniform() {
        return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer on {lo, ..., hi} inclusive.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        const auto span = static_cast<std::uint64_t>(hi - lo + 1);
        return lo + static_cast<std::int64_t>(next_u64() % span);
    }

    double normal() { return norm_quantile(uniform()); }

    double exponential(double rate) { return -std::log(uniform()) / rate; }

    /// Gamma(shape, scale) via Marsaglia-Tsang; shapes below 1 are boosted
    /// through Gamma(shape+1) and a power-of-uniform correction.
    double gamma(double shape, double scale) {
        if (!(shape > 0.0) || !(scale > 0.0)) {
            throw std::invalid_argument("RandomStream::gamma: shape and scale must be positive");
        }
        if (shape < 1.0) {
            const double u = uniform();
            return gamma(shape + 1.0, scale) * std::pow(u, 1.0 / shape);
        }
        const double d = shape - 1.0 / 3.0;
        const double c = 1.0 / std::sqrt(9.0 * d);
        for (;;) {
            double z;
            double v;
            do {
                z = normal();
                v = 1.0 + c * z;
            } while (v <= 0.0);
            v = v * v * v;
            const double u = uniform();
            const double z2 = z * z;
            if (u < 1.0 - 0.0331 * z2 * z2) return d * v * scale;
            if (std::log(u) < 0.5 * z2 + d * (1.0 - v + std::log(v))) return d * v * scale;
        }
    }

    double beta(double alpha, double beta_shape) {
        for (;;) {
            const double x = gamma(alpha, 1.0);
            const double y = gamma(beta_shape, 1.0);
            if (x + y > 0.0) return x / (x + y);
        }
    }

private:
    static std::uint64_t rotl(std::uint64_t v, int k) { return (v << k) | (v >> (64 - k)); }

    std::array<std::uint64_t, 4> state_;
};

/// Systematic factor X ~ Gamma(xi, 1/xi): mean 1, variance 1/xi.
struct GammaFactorSpec {
    double xi = 0.25;
};

/// Beta LGD with mean elgd and variance nu * elgd * (1 - elgd).
/// nu == 0 degenerates to the point mass at elgd.
struct BetaLgdSpec {
    double elgd = 0.45;
    double nu = 0.25;

    double alpha() const { return elgd * (1.0 / nu - 1.0); }
    double beta() const { return (1.0 - elgd) * (1.0 / nu - 1.0); }
};

inline void validate(const GammaFactorSpec& spec) {
    if (!(spec.xi > 0.0)) throw std::invalid_argument("GammaFactorSpec: xi must be positive");
}

inline void validate(const BetaLgdSpec& spec) {
    if (!(spec.elgd > 0.0 && spec.elgd < 1.0)) {
        throw std::invalid_argument("BetaLgdSpec: elgd must lie in (0,1)");
    }
    if (spec.nu < 0.0 || spec.nu >= 1.0) {
        throw std::invalid_argument("BetaLgdSpec: nu must lie in [0,1)");
    }
}

inline double sample_gamma(const GammaFactorSpec& spec, RandomStream& stream) {
    validate(spec);
    return stream.gamma(spec.xi, 1.0 / spec.xi);
}

/// Draw with the default scale 1/xi replaced, e.g. by the tilted 1/(xi - t).
inline double sample_gamma(const GammaFactorSpec& spec, double scale_override, RandomStream& stream) {
    validate(spec);
    if (!(scale_override > 0.0)) {
        throw std::invalid_argument("sample_gamma: scale override must be positive");
    }
    return stream.gamma(spec.xi, scale_override);
}

inline double sample_beta_lgd(const BetaLgdSpec& spec, RandomStream& stream) {
    validate(spec);
    if (spec.nu == 0.0) return spec.elgd;
    return stream.beta(spec.alpha(), spec.beta());
}

inline double gamma_cdf(const GammaFactorSpec& spec, double x) {
    validate(spec);
    if (x <= 0.0) return 0.0;
    return gamma_p(spec.xi, x * spec.xi);
}

inline double gamma_density(const GammaFactorSpec& spec, double x) {
    validate(spec);
    if (x <= 0.0) return 0.0;
    return std::exp(spec.xi * std::log(spec.xi) + (spec.xi - 1.0) * std::log(x) -
                    x * spec.xi - std::lgamma(spec.xi));
}

/// Quantile of the mean-1 Gamma factor by safeguarded Newton on the CDF.
inline double gamma_quantile(const GammaFactorSpec& spec, double q) {
    validate(spec);
    if (!(q > 0.0 && q < 1.0)) {
        throw std::invalid_argument("gamma_quantile: q must lie in (0,1)");
    }
    double lo = 0.0;
    double hi = 1.0;
    while (gamma_cdf(spec, hi) < q) {
        hi *= 2.0;
        if (hi > 1e12) throw std::runtime_error("gamma_quantile: bracket expansion failed");
    }
    double x = 0.5 * hi;
    for (int iter = 0; iter < 200; ++iter) {
        const double err = gamma_cdf(spec, x) - q;
        if (err > 0.0) {
            hi = x;
        } else {
            lo = x;
        }
        if (std::fabs(err) < 1e-14 || (hi - lo) < 1e-13 * std::max(1.0, hi)) break;
        const double dens = gamma_density(spec, x);
        double next = (dens > 0.0) ? x - err / dens : 0.5 * (lo + hi);
        if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
        x = next;
    }
    return x;
}

}  // namespace granular
