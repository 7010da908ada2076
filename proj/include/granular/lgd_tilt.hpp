#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "granular/random.hpp"

namespace granular {
namespace detail {

/// Confluent-hypergeometric series for the Beta mgf: E[e^{c L}] with
/// L ~ Beta(a, b) equals 1F1(a; a+b; c). All terms are positive, so the
/// series is evaluated in log space for stability at large c.
inline double log_beta_mgf(double a, double b, double c) {
    if (c == 0.0) return 0.0;
    if (c < 0.0) {
        // 1F1(a; a+b; c) = e^c 1F1(b; a+b; -c) (Kummer), keeps terms positive.
        return c + log_beta_mgf(b, a, -c);
    }
    double log_term = 0.0;  // k = 0 term is 1
    double max_log = 0.0;
    std::vector<double> logs = {0.0};
    const int kmax = 2000;
    for (int k = 0; k < kmax; ++k) {
        log_term += std::log((a + k) * c / ((a + b + k) * (k + 1.0)));
        logs.push_back(log_term);
        max_log = std::max(max_log, log_term);
        if (log_term < max_log - 45.0 && k > c) break;
    }
    double sum = 0.0;
    for (double lt : logs) sum += std::exp(lt - max_log);
    return max_log + std::log(sum);
}

/// Mean of the exponentially tilted Beta: d/dc log M(c).
inline double tilted_beta_mean(double a, double b, double c) {
    const double log_m = log_beta_mgf(a, b, c);
    const double log_m1 = log_beta_mgf(a + 1.0, b, c);
    return (a / (a + b)) * std::exp(log_m1 - log_m);
}

/// Sampler for the exponentially tilted LGD distribution
/// g(l) = f(l) e^{c l} / M(c) of a Beta(alpha, beta) severity, built as an
/// equal-probability quantile table with power-law end segments so the
/// density ratio f/g stays exact for the actual sampling measure.
class TiltedLgdSampler {
public:
    static constexpr int kSegments = 128;

    TiltedLgdSampler() = default;

    TiltedLgdSampler(const BetaLgdSpec& spec, double c) {
        validate(spec);
        c_ = c;
        if (spec.nu == 0.0) {
            degenerate_ = true;
            elgd_ = spec.elgd;
            log_mgf_ = c * spec.elgd;
            tilted_mean_ = spec.elgd;
            return;
        }
        alpha_ = spec.alpha();
        beta_ = spec.beta();
        log_beta_fn_ = std::lgamma(alpha_) + std::lgamma(beta_) - std::lgamma(alpha_ + beta_);
        log_mgf_ = log_beta_mgf(alpha_, beta_, c);
        tilted_mean_ = tilted_beta_mean(alpha_, beta_, c);
        build_nodes();
    }

    bool degenerate() const { return degenerate_; }
    double log_mgf() const { return log_mgf_; }
    double tilted_mean() const { return tilted_mean_; }

    /// Draws a severity and accumulates log(f(l)/g(l)) into log_ratio, the
    /// exact correction for the table-based sampling density.
    double draw(RandomStream& stream, double& log_ratio) const {
        if (degenerate_) {
            log_ratio += 0.0;
            return elgd_;
        }
        const double u = stream.uniform() * kSegments;
        int j = static_cast<int>(u);
        if (j >= kSegments) j = kSegments - 1;
        const double frac = u - j;
        const double lo = nodes_[j];
        const double hi = nodes_[j + 1];
        double l;
        double log_g;
        const double seg_log_prob = -std::log(static_cast<double>(kSegments));
        if (j == 0) {
            // Power-law segment matching the l^{alpha-1} singularity.
            l = hi * std::pow(frac, 1.0 / alpha_);
            l = std::max(l, 1e-300);
            log_g = seg_log_prob + std::log(alpha_) - alpha_ * std::log(hi) +
                    (alpha_ - 1.0) * std::log(l);
        } else if (j == kSegments - 1) {
            // Mirror segment matching the (1-l)^{beta-1} endpoint.
            const double w = (1.0 - lo);
            const double one_minus = w * std::pow(1.0 - frac, 1.0 / beta_);
            l = 1.0 - std::max(one_minus, 1e-300);
            log_g = seg_log_prob + std::log(beta_) - beta_ * std::log(w) +
                    (beta_ - 1.0) * std::log(std::max(1.0 - l, 1e-300));
        } else {
            l = lo + frac * (hi - lo);
            log_g = seg_log_prob - std::log(hi - lo);
        }
        l = std::min(std::max(l, 1e-300), 1.0 - 1e-16);
        const double log_f = (alpha_ - 1.0) * std::log(l) +
                             (beta_ - 1.0) * std::log1p(-l) - log_beta_fn_;
        log_ratio += log_f - log_g;
        return l;
    }

private:
    void build_nodes() {
        // Cumulative unnormalized tilted density on a fine grid, using
        // substitutions that absorb both endpoint singularities:
        // left half in v = l^alpha, right half in w = (1-l)^beta.
        const int half = 4096;
        std::vector<double> grid_l, cum;
        grid_l.reserve(2 * half + 1);
        cum.reserve(2 * half + 1);

        auto integrand_exp = [&](double l) {
            // h(l) = l^{a-1} (1-l)^{b-1} e^{c(l-1)}, bounded for c >= 0.
            return (beta_ - 1.0) * std::log1p(-std::min(l, 1.0 - 1e-16)) +
                   c_ * (l - 1.0) + (alpha_ - 1.0) * std::log(std::max(l, 1e-300));
        };
        (void)integrand_exp;

        grid_l.push_back(0.0);
        cum.push_back(0.0);
        double acc = 0.0;
        // left: l = v^{1/alpha}, dl contribution: h(l) l^{1-alpha} / alpha dv
        const double v_half = std::pow(0.5, alpha_);
        double prev_g = left_transformed(1e-12 * v_half);
        double prev_v = 1e-12 * v_half;
        for (int i = 1; i <= half; ++i) {
            const double v = v_half * i / half;
            const double g = left_transformed(v);
            acc += 0.5 * (prev_g + g) * (v - prev_v);
            prev_g = g;
            prev_v = v;
            grid_l.push_back(std::pow(v, 1.0 / alpha_));
            cum.push_back(acc);
        }
        // right: l = 1 - w^{1/beta}, from l=0.5 to l=1 means w from 0.5^beta to 0
        const double w_half = std::pow(0.5, beta_);
        double prev_gw = right_transformed(w_half);
        double prev_w = w_half;
        for (int i = 1; i <= half; ++i) {
            const double w = w_half * (half - i) / half;
            const double g = (w > 0.0) ? right_transformed(w) : right_transformed(1e-14 * w_half);
            acc += 0.5 * (prev_gw + g) * (prev_w - w);
            prev_gw = g;
            prev_w = w;
            grid_l.push_back(1.0 - std::pow(w, 1.0 / beta_));
            cum.push_back(acc);
        }

        const double total = acc;
        if (!(total > 0.0)) throw std::runtime_error("TiltedLgdSampler: degenerate density");
        nodes_.assign(kSegments + 1, 0.0);
        nodes_[0] = 0.0;
        nodes_[kSegments] = 1.0;
        std::size_t pos = 0;
        for (int s = 1; s < kSegments; ++s) {
            const double target = total * s / kSegments;
            while (pos + 1 < cum.size() && cum[pos + 1] < target) ++pos;
            const double c0 = cum[pos], c1 = cum[pos + 1];
            const double t = (c1 > c0) ? (target - c0) / (c1 - c0) : 0.0;
            nodes_[s] = grid_l[pos] + t * (grid_l[pos + 1] - grid_l[pos]);
        }
    }

    // Unnormalized tilted density in the left substituted variable v = l^alpha:
    // f(l) e^{c(l-1)} dl = (1/alpha) (1-l)^{beta-1} e^{c(l-1)} dv.
    double left_transformed(double v) const {
        const double l = std::pow(v, 1.0 / alpha_);
        return (1.0 / alpha_) * std::pow(1.0 - std::min(l, 1.0 - 1e-16), beta_ - 1.0) *
               std::exp(c_ * (l - 1.0));
    }

    // Right substituted variable w = (1-l)^beta:
    // f(l) e^{c(l-1)} dl = (1/beta) l^{alpha-1} e^{c(l-1)} dw.
    double right_transformed(double w) const {
        const double l = 1.0 - std::pow(w, 1.0 / beta_);
        return (1.0 / beta_) * std::pow(std::max(l, 1e-300), alpha_ - 1.0) *
               std::exp(c_ * (l - 1.0));
    }

    bool degenerate_ = false;
    double elgd_ = 0.0;
    double alpha_ = 1.0;
    double beta_ = 1.0;
    double c_ = 0.0;
    double log_beta_fn_ = 0.0;
    double log_mgf_ = 0.0;
    double tilted_mean_ = 0.0;
    std::vector<double> nodes_;
};

}  // namespace detail
}  // namespace granular
