#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "granular/portfolio.hpp"
#include "granular/random.hpp"
#include "granular/special.hpp"

namespace granular {

/// Training-distribution sampler configuration. The PD support and weights
/// are the empirical sovereign-grade distribution; the printed weights sum
/// to 0.99992 and are renormalized on use.
struct SamplerConfig {
    int n_min = 10;
    int n_max = 100;
    double theta_min = 4.0;
    double theta_max = 30.0;
    std::vector<double> pd_support = {0.0,    0.01,   0.0002, 0.0004, 0.0006, 0.0011, 0.0018,
                                      0.004,  0.009,  0.0146, 0.0238, 0.0759, 0.5147};
    std::vector<double> pd_weights = {0.00049, 0.02297, 0.00881, 0.02627, 0.06454, 0.05865,
                                      0.06928, 0.03111, 0.11070, 0.07672, 0.19922, 0.10282,
                                      0.22834};
    double omega_min = 0.0;
    double omega_max = 1.0;
    double rho_min = 0.15;
    double rho_max = 0.7;
    double coupon_min = 0.0;
    double coupon_max = 0.1;
    double maturity_min = 1.0;
    double maturity_max = 10.0;
    std::vector<double> elgd_choices = {0.45, 0.10};
    double nu = 0.25;
};

inline void validate(const SamplerConfig& cfg) {
    if (cfg.n_min < 1 || cfg.n_max < cfg.n_min) {
        throw std::invalid_argument("SamplerConfig: obligor count range is empty");
    }
    if (!(cfg.theta_min > 0.0) || cfg.theta_max < cfg.theta_min) {
        throw std::invalid_argument("SamplerConfig: theta range is invalid");
    }
    if (cfg.pd_support.size() != cfg.pd_weights.size() || cfg.pd_support.empty()) {
        throw std::invalid_argument("SamplerConfig: pd support/weights mismatch");
    }
    double wsum = 0.0;
    for (double w : cfg.pd_weights) {
        if (w < 0.0) throw std::invalid_argument("SamplerConfig: negative pd weight");
        wsum += w;
    }
    if (std::fabs(wsum - 1.0) > 1e-3) {
        throw std::invalid_argument("SamplerConfig: pd weights too far from a distribution");
    }
    if (cfg.elgd_choices.empty()) throw std::invalid_argument("SamplerConfig: no elgd choices");
}

/// Normalized weight defect of the printed PD weights (logged by the CLI).
inline double pd_weight_defect(const SamplerConfig& cfg) {
    double wsum = 0.0;
    for (double w : cfg.pd_weights) wsum += w;
    return 1.0 - wsum;
}

namespace detail {

inline std::size_t sample_categorical(const std::vector<double>& weights, double total,
                                      RandomStream& stream) {
    const double u = stream.uniform() * total;
    double cum = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        cum += weights[i];
        if (u < cum) return i;
    }
    return weights.size() - 1;
}

}  // namespace detail

/// Draws a synthetic actuarial portfolio: N ~ U{n_min..n_max}, one shared
/// exponential-rate theta and one shared ELGD per portfolio, PDs from the
/// categorical support, omegas uniform.
inline ActuarialPortfolio sample_actuarial_portfolio(const SamplerConfig& cfg,
                                                     RandomStream& stream) {
    validate(cfg);
    double wsum = 0.0;
    for (double w : cfg.pd_weights) wsum += w;

    ActuarialPortfolio p;
    p.lgd_nu = cfg.nu;
    const int n = static_cast<int>(stream.uniform_int(cfg.n_min, cfg.n_max));
    const double theta = stream.uniform(cfg.theta_min, cfg.theta_max);
    const double elgd =
        cfg.elgd_choices[stream.uniform_int(0, static_cast<int>(cfg.elgd_choices.size()) - 1)];
    p.obligors.reserve(n);
    for (int i = 0; i < n; ++i) {
        ActuarialObligor ob;
        ob.id = "ob" + std::to_string(i + 1);
        ob.exposure = stream.exponential(theta);
        ob.pd = cfg.pd_support[detail::sample_categorical(cfg.pd_weights, wsum, stream)];
        ob.elgd = elgd;
        ob.omega = stream.uniform(cfg.omega_min, cfg.omega_max);
        p.obligors.push_back(ob);
    }
    return p;
}

/// Maps the PD support onto the matrix's non-default grades by nearest
/// one-period default probability; ties resolve toward the better grade.
inline std::vector<int> map_pd_support_to_grades(const SamplerConfig& cfg,
                                                 const TransitionMatrix& tm) {
    std::vector<int> grades(cfg.pd_support.size(), 1);
    for (std::size_t i = 0; i < cfg.pd_support.size(); ++i) {
        double best = std::numeric_limits<double>::infinity();
        for (int g = 1; g < tm.n_states(); ++g) {
            const double diff = std::fabs(tm.default_prob(g) - cfg.pd_support[i]);
            if (diff < best || (diff == best && g > grades[i])) {
                best = diff;
                grades[i] = g;
            }
        }
    }
    return grades;
}

/// Draws a synthetic MtM portfolio; ratings reuse the PD weight vector
/// mapped to grades, maturities are rounded to the accrual grid.
inline MtmPortfolio sample_mtm_portfolio(const SamplerConfig& cfg, const TransitionMatrix& tm,
                                         RandomStream& stream, double delta = 0.5) {
    validate(cfg);
    double wsum = 0.0;
    for (double w : cfg.pd_weights) wsum += w;
    const auto grade_map = map_pd_support_to_grades(cfg, tm);

    MtmPortfolio p;
    p.lgd_nu = cfg.nu;
    const int n = static_cast<int>(stream.uniform_int(cfg.n_min, cfg.n_max));
    const double theta = stream.uniform(cfg.theta_min, cfg.theta_max);
    const double elgd =
        cfg.elgd_choices[stream.uniform_int(0, static_cast<int>(cfg.elgd_choices.size()) - 1)];
    p.obligors.reserve(n);
    for (int i = 0; i < n; ++i) {
        MtmObligor ob;
        ob.id = "ob" + std::to_string(i + 1);
        ob.exposure = stream.exponential(theta);
        ob.rating = grade_map[detail::sample_categorical(cfg.pd_weights, wsum, stream)];
        ob.elgd = elgd;
        ob.rho = stream.uniform(cfg.rho_min, cfg.rho_max);
        ob.coupon = stream.uniform(cfg.coupon_min, cfg.coupon_max);
        const double raw_maturity = stream.uniform(cfg.maturity_min, cfg.maturity_max);
        ob.maturity = std::max(delta, std::round(raw_maturity / delta) * delta);
        p.obligors.push_back(ob);
    }
    return p;
}

/// Basel IRB corporate asset correlation, interpolating between 24% (pd -> 0)
/// and 12% (pd -> 1) with exponential weight.
inline double irb_asset_correlation(double pd) {
    const double w = (1.0 - std::exp(-50.0 * pd)) / (1.0 - std::exp(-50.0));
    return 0.12 * w + 0.24 * (1.0 - w);
}

struct OmegaCalibration {
    double omega = 0.0;
    double unclamped = 0.0;
    bool clamped = false;
    bool zero_pd = false;
};

/// Factor loading such that the UL capital ELGD PD omega (x_q - 1) matches
/// the IRB capital at confidence q, clamped to [0,1].
inline OmegaCalibration calibrate_omega(double pd, double elgd, double rho, double xi, double q) {
    OmegaCalibration out;
    if (!(pd > 0.0)) {
        out.zero_pd = true;
        return out;
    }
    if (!(elgd > 0.0)) throw std::invalid_argument("calibrate_omega: elgd must be positive");
    const double x_q = gamma_quantile(GammaFactorSpec{xi}, q);
    const double k_irb =
        elgd * (norm_cdf((norm_quantile(pd) + std::sqrt(rho) * norm_quantile(q)) /
                         std::sqrt(1.0 - rho)) -
                pd);
    out.unclamped = k_irb / (elgd * pd * (x_q - 1.0));
    out.omega = std::clamp(out.unclamped, 0.0, 1.0);
    out.clamped = out.omega != out.unclamped;
    return out;
}

}  // namespace granular
