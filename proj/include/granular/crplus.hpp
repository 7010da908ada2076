#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "granular/analytic_actuarial.hpp"
#include "granular/lgd_tilt.hpp"
#include "granular/parallel.hpp"
#include "granular/portfolio.hpp"
#include "granular/random.hpp"
#include "granular/rootfind.hpp"

namespace granular {

struct CrPlusParams {
    double xi = 0.25;           // Gamma factor precision
    double q = 0.999;           // confidence level
    std::size_t n_sims = 100000;
    std::uint64_t seed = 0;
    int threads = 1;
};

/// Exponential tilting parameters: tau tilts the conditional loss, t the
/// Gamma factor. t stays below xi so the tilted factor remains a proper
/// Gamma(xi, 1/(xi - t)).
struct TiltingSolution {
    double tau = 0.0;
    double t = 0.0;
    bool no_tilt = false;  // all pd * omega were zero, sampling untilted
};

struct WeightedLossSample {
    double loss = 0.0;
    double weight = 1.0;
};

struct VarEstimate {
    double value = 0.0;
    double ess = 0.0;             // (sum w)^2 / sum w^2
    double weight_sum = 0.0;
    double clamp_fraction = 0.0;  // fraction of paths with a clamped conditional PD
    bool no_tilt = false;
};

struct GaResult {
    double ga = 0.0;
    double var_q = 0.0;
    double conditional_loss = 0.0;
    double ess = 0.0;
    double clamp_fraction = 0.0;
    bool no_tilt = false;
};

/// Conditional default probability PD * (1 + omega * (x - 1)), clamped to
/// [0,1] because the Gamma factor is unbounded.
inline double conditional_pd(double pd, double omega, double x) {
    const double raw = pd * (1.0 + omega * (x - 1.0));
    return std::clamp(raw, 0.0, 1.0);
}

/// Expected loss conditional on the factor value x.
inline double conditional_expected_loss(const ActuarialPortfolio& p, double x) {
    const auto shares = exposure_shares(p);
    double sum = 0.0;
    for (std::size_t n = 0; n < p.obligors.size(); ++n) {
        const auto& ob = p.obligors[n];
        sum += shares[n] * ob.elgd * conditional_pd(ob.pd, ob.omega, x);
    }
    return sum;
}

/// Solves the tilting equation matching the tilted factor mean to the
/// factor quantile: sum_n pd_n omega_n (e^{tau a_n elgd_n} - 1) = xi (1 - 1/x_q).
inline TiltingSolution solve_tilting(const ActuarialPortfolio& p, const CrPlusParams& params) {
    const auto shares = exposure_shares(p);
    double sensitivity = 0.0;
    for (const auto& ob : p.obligors) sensitivity += ob.pd * ob.omega;
    if (!(sensitivity > 0.0)) {
        return TiltingSolution{0.0, 0.0, true};
    }

    const double x_q = gamma_quantile(GammaFactorSpec{params.xi}, params.q);
    const double target = params.xi * (1.0 - 1.0 / x_q);

    auto tilt_sum = [&](double tau) {
        double s = 0.0;
        for (std::size_t n = 0; n < p.obligors.size(); ++n) {
            const auto& ob = p.obligors[n];
            const double arg = std::min(tau * shares[n] * ob.elgd, 700.0);
            s += ob.pd * ob.omega * std::expm1(arg);
        }
        return s;
    };

    const double tau = solve_monotone([&](double v) { return tilt_sum(v) - target; }, -1.0, 1.0,
                                      RootOptions{1e-12, 300, 128});
    TiltingSolution sol;
    sol.tau = tau;
    sol.t = tilt_sum(tau);
    return sol;
}

namespace detail {

struct CrObligorData {
    double share;
    double pd;
    double omega;
    double elgd;
    BetaLgdSpec lgd;
};

inline std::vector<CrObligorData> cr_obligor_data(const ActuarialPortfolio& p) {
    validate(p);
    const auto shares = exposure_shares(p);
    std::vector<CrObligorData> data(p.obligors.size());
    for (std::size_t n = 0; n < p.obligors.size(); ++n) {
        const auto& ob = p.obligors[n];
        data[n] = {shares[n], ob.pd, ob.omega, ob.elgd, BetaLgdSpec{ob.elgd, p.lgd_nu}};
        validate(data[n].lgd);
    }
    return data;
}

/// Weighted empirical quantile in tail form: the smallest loss whose
/// strictly-above tail mass sum w 1{L > y} drops to (1-q) K. Only tail
/// weights enter, so the (well-sampled, down-weighted) tail region sets the
/// estimator's noise; with unit weights this is the usual ceil(qK) order
/// statistic.
inline VarEstimate weighted_quantile(std::vector<WeightedLossSample>& samples, double q) {
    const std::size_t k = samples.size();
    std::vector<std::size_t> idx(k);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        if (samples[a].loss != samples[b].loss) return samples[a].loss < samples[b].loss;
        return a < b;
    });
    double total = 0.0;
    double total_sq = 0.0;
    for (const auto& s : samples) {
        total += s.weight;
        total_sq += s.weight * s.weight;
    }
    const double budget = (1.0 - q) * static_cast<double>(k);
    double tail = 0.0;
    double value = samples[idx.front()].loss;
    for (std::size_t j = k; j-- > 0;) {
        tail += samples[idx[j]].weight;
        if (tail > budget) {
            value = samples[idx[j]].loss;
            break;
        }
    }
    VarEstimate est;
    est.value = value;
    est.weight_sum = total;
    est.ess = total_sq > 0.0 ? total * total / total_sq : 0.0;
    return est;
}

}  // namespace detail

/// Plain Monte Carlo losses L = sum_n a_n LGD_n D_n under the untilted model.
inline std::vector<double> simulate_loss_plain(const ActuarialPortfolio& p,
                                               const CrPlusParams& params) {
    const auto data = detail::cr_obligor_data(p);
    const GammaFactorSpec factor{params.xi};
    validate(factor);
    std::vector<double> losses(params.n_sims);
    parallel_chunks(params.n_sims, kChunkSize, params.threads,
                    [&](std::size_t chunk, std::size_t begin, std::size_t end) {
                        RandomStream stream(params.seed, chunk);
                        for (std::size_t k = begin; k < end; ++k) {
                            const double x = sample_gamma(factor, stream);
                            double loss = 0.0;
                            for (const auto& ob : data) {
                                const double pi = conditional_pd(ob.pd, ob.omega, x);
                                if (stream.uniform() < pi) {
                                    loss += ob.share * sample_beta_lgd(ob.lgd, stream);
                                }
                            }
                            losses[k] = loss;
                        }
                    });
    return losses;
}

/// Quantile of the plain Monte Carlo loss distribution (unit weights).
inline VarEstimate plain_var(const ActuarialPortfolio& p, const CrPlusParams& params,
                             std::vector<WeightedLossSample>* out_samples = nullptr) {
    const auto losses = simulate_loss_plain(p, params);
    std::vector<WeightedLossSample> samples(losses.size());
    for (std::size_t i = 0; i < losses.size(); ++i) samples[i] = {losses[i], 1.0};
    auto est = detail::weighted_quantile(samples, params.q);
    if (out_samples) *out_samples = std::move(samples);
    return est;
}

/// Resolved importance-sampling measure for one run: the loss-tilt tau, the
/// coupled factor tilt t = sum pd omega (M_lgd(tau a) - 1) that keeps the
/// likelihood ratio nearly flat in the factor, and per-obligor tilted-LGD
/// samplers. Defaults and severities are tilted jointly, so the resulting
/// weight is (up to the flat factor term) a decreasing function of the loss.
struct IsDesign {
    double tau = 0.0;
    double t = 0.0;
    bool no_tilt = false;
    bool capped = false;        // target level not attainable inside t < xi
    double target_loss = 0.0;   // tilted-mean level the tau solve aimed at
    std::vector<double> log_mgf_lgd;                   // per obligor, ln M(tau a)
    std::vector<detail::TiltedLgdSampler> lgd;         // per obligor
};

/// Builds the sampling measure for is_var. The factor tilt matches the
/// tilted factor mean to the quantile x_q; the loss tilt tau is then solved
/// independently so the jointly tilted conditional loss mean at x_q reaches
/// target_loss. Severity mgfs enter both the Bernoulli tilt and the weights.
inline IsDesign build_is_design(const ActuarialPortfolio& p, const CrPlusParams& params,
                                double target_loss) {
    const auto data = detail::cr_obligor_data(p);
    IsDesign design;
    design.lgd.resize(data.size());
    design.log_mgf_lgd.assign(data.size(), 0.0);

    double sensitivity = 0.0;
    for (const auto& ob : p.obligors) sensitivity += ob.pd * ob.omega;
    if (!(sensitivity > 0.0)) {
        design.no_tilt = true;
        for (std::size_t n = 0; n < data.size(); ++n) {
            design.lgd[n] = detail::TiltedLgdSampler(data[n].lgd, 0.0);
        }
        return design;
    }

    const double x_q = gamma_quantile(GammaFactorSpec{params.xi}, params.q);
    design.t = params.xi * (1.0 - 1.0 / x_q);
    design.target_loss = target_loss;

    // Jointly tilted conditional loss mean at the factor quantile.
    const double c_cap = 300.0;
    auto cond_mean_tilted = [&](double tau) {
        double sum = 0.0;
        for (const auto& ob : data) {
            const double c = std::min(tau * ob.share, c_cap);
            double lm, mean;
            if (ob.lgd.nu == 0.0) {
                lm = c * ob.elgd;
                mean = ob.elgd;
            } else {
                lm = detail::log_beta_mgf(ob.lgd.alpha(), ob.lgd.beta(), c);
                mean = detail::tilted_beta_mean(ob.lgd.alpha(), ob.lgd.beta(), c);
            }
            const double pi = conditional_pd(ob.pd, ob.omega, x_q);
            double p_tilt;
            if (pi <= 0.0) {
                p_tilt = 0.0;
            } else if (pi >= 1.0) {
                p_tilt = 1.0;
            } else {
                p_tilt = 1.0 / (1.0 + (1.0 - pi) / pi * std::exp(-lm));
            }
            sum += ob.share * mean * p_tilt;
        }
        return sum;
    };

    double tau = 0.0;
    if (cond_mean_tilted(0.0) < target_loss) {
        double hi = 1.0;
        bool attainable = true;
        while (cond_mean_tilted(hi) < target_loss) {
            hi *= 2.0;
            if (hi > 1e9) {
                attainable = false;
                design.capped = true;
                break;
            }
        }
        if (attainable) {
            double a = hi / 2.0 < 1.0 ? 0.0 : hi / 2.0;
            double b = hi;
            for (int i = 0; i < 100; ++i) {
                const double mid = 0.5 * (a + b);
                if (cond_mean_tilted(mid) < target_loss) a = mid; else b = mid;
                if (b - a < 1e-10 * std::max(1.0, b)) break;
            }
            tau = 0.5 * (a + b);
        } else {
            tau = 1e9;
        }
    }

    design.tau = tau;
    for (std::size_t n = 0; n < data.size(); ++n) {
        design.lgd[n] =
            detail::TiltedLgdSampler(data[n].lgd, std::min(tau * data[n].share, c_cap));
        design.log_mgf_lgd[n] = design.lgd[n].log_mgf();
    }
    return design;
}

namespace detail {

// One simulation pass under a fixed IS design. Weights are exact likelihood
// ratios of the realized sampling measure, accumulated in log space;
// severities are drawn only on the default branch.
inline VarEstimate run_is_design(const std::vector<CrObligorData>& data, const IsDesign& design,
                                 const CrPlusParams& params, std::uint64_t seed,
                                 std::size_t n_sims,
                                 std::vector<WeightedLossSample>* out_samples = nullptr) {
    const GammaFactorSpec factor{params.xi};
    const double t = design.t;
    const double scale = 1.0 / (params.xi - t);
    const double log_mgf_factor = -params.xi * std::log1p(-t / params.xi);

    std::vector<WeightedLossSample> samples(n_sims);
    std::vector<std::uint8_t> clamped(n_sims, 0);
    parallel_chunks(
        n_sims, kChunkSize, params.threads,
        [&](std::size_t chunk, std::size_t begin, std::size_t end) {
            RandomStream stream(seed, chunk);
            for (std::size_t k = begin; k < end; ++k) {
                const double x = sample_gamma(factor, scale, stream);
                double loss = 0.0;
                double log_w = 0.0;
                bool any_clamped = false;
                for (std::size_t n = 0; n < data.size(); ++n) {
                    const auto& ob = data[n];
                    const double raw = ob.pd * (1.0 + ob.omega * (x - 1.0));
                    const double pi = std::clamp(raw, 0.0, 1.0);
                    any_clamped |= (pi != raw);
                    const double lm = design.log_mgf_lgd[n];
                    // log(1 - pi + pi M), stable for large log M
                    double log_denom;
                    double p_tilt;
                    if (pi <= 0.0) {
                        log_denom = 0.0;
                        p_tilt = 0.0;
                    } else if (pi >= 1.0) {
                        log_denom = lm;
                        p_tilt = 1.0;
                    } else {
                        const double em = std::exp(-lm);
                        log_denom = lm + std::log(pi + (1.0 - pi) * em);
                        p_tilt = 1.0 / (1.0 + (1.0 - pi) / pi * em);
                    }
                    if (stream.uniform() < p_tilt) {
                        double log_fg = 0.0;
                        const double lgd = design.lgd[n].draw(stream, log_fg);
                        loss += ob.share * lgd;
                        log_w += log_denom - lm + log_fg;
                    } else {
                        log_w += log_denom;
                    }
                }
                log_w += -t * x + log_mgf_factor;
                samples[k] = {loss, std::exp(log_w)};
                clamped[k] = any_clamped ? 1 : 0;
            }
        });

    auto est = weighted_quantile(samples, params.q);
    est.no_tilt = design.no_tilt;
    std::size_t n_clamped = 0;
    for (auto c : clamped) n_clamped += c;
    est.clamp_fraction = static_cast<double>(n_clamped) / static_cast<double>(n_sims);
    if (out_samples) *out_samples = std::move(samples);
    return est;
}

}  // namespace detail

/// Importance-sampled VaR, two-stage: a short pilot run tilted toward the
/// first-order quantile proxy locates the quantile, then the main run
/// re-tilts so the tilted loss mean sits at the pilot estimate. Both stages
/// draw the factor from the tilted Gamma, defaults from Bernoullis tilted by
/// the severity mgf, and severities from the exponentially tilted Beta.
inline VarEstimate is_var(const ActuarialPortfolio& p, const CrPlusParams& params,
                          std::vector<WeightedLossSample>* out_samples = nullptr) {
    const auto data = detail::cr_obligor_data(p);
    validate(GammaFactorSpec{params.xi});

    double ga_hint = 0.0;
    try {
        ga_hint = ga_first_order_actuarial(p, params.xi, params.q);
    } catch (const std::exception&) {
        ga_hint = 0.0;
    }
    const double x_q = gamma_quantile(GammaFactorSpec{params.xi}, params.q);
    const double cond = conditional_expected_loss(p, x_q);

    IsDesign design = build_is_design(p, params, cond + std::max(ga_hint, 0.0));
    if (!design.no_tilt) {
        const std::size_t pilot_sims = std::max<std::size_t>(2000, params.n_sims / 20);
        const auto pilot = detail::run_is_design(data, design, params,
                                              derive_seed(params.seed, 0x50494c4f), pilot_sims);
        design = build_is_design(p, params, std::max(pilot.value, cond));
    }
    return detail::run_is_design(data, design, params, params.seed, params.n_sims, out_samples);
}

/// Exact actuarial granularity adjustment: IS quantile of the loss minus the
/// expected loss conditional on the factor quantile.
inline GaResult ga_exact_actuarial(const ActuarialPortfolio& p, const CrPlusParams& params,
                                   std::vector<WeightedLossSample>* out_samples = nullptr) {
    const double x_q = gamma_quantile(GammaFactorSpec{params.xi}, params.q);
    const auto est = is_var(p, params, out_samples);
    GaResult r;
    r.var_q = est.value;
    r.conditional_loss = conditional_expected_loss(p, x_q);
    r.ga = r.var_q - r.conditional_loss;
    r.ess = est.ess;
    r.clamp_fraction = est.clamp_fraction;
    r.no_tilt = est.no_tilt;
    return r;
}

}  // namespace granular
