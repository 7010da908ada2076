#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <tuple>
#include <vector>

#include "granular/crplus.hpp"  // VarEstimate, WeightedLossSample, GaResult, weighted_quantile
#include "granular/parallel.hpp"
#include "granular/portfolio.hpp"
#include "granular/random.hpp"
#include "granular/rootfind.hpp"
#include "granular/special.hpp"
#include "granular/yield_curve.hpp"

namespace granular {

struct MtmMarketParams {
    double horizon = 1.0;   // T, years
    double accrual = 0.5;   // coupon accrual period delta
    YieldCurve curve = YieldCurve::flat(0.0);
    double sharpe = 0.4;    // market Sharpe ratio for risk-neutral conversion
    double q = 0.999;
    std::size_t n_sims = 100000;
    std::uint64_t seed = 0;
    int threads = 1;
};

inline void validate(const MtmMarketParams& mkt) {
    if (!(mkt.horizon > 0.0) || !(mkt.accrual > 0.0)) {
        throw std::invalid_argument("MtmMarketParams: horizon and accrual must be positive");
    }
    const double steps = mkt.horizon / mkt.accrual;
    if (std::fabs(steps - std::round(steps)) > 1e-9) {
        throw std::invalid_argument("MtmMarketParams: horizon must be a coupon date");
    }
    if (mkt.sharpe < 0.0) throw std::invalid_argument("MtmMarketParams: sharpe must be nonnegative");
    if (!(mkt.q > 0.0 && mkt.q < 1.0)) throw std::invalid_argument("MtmMarketParams: q in (0,1)");
}

/// Migration thresholds C_{g,s} = Phi^{-1}(sum_{i<=s} p_{g,i}). upper[g][s]
/// holds the upper threshold of state s; the lower threshold of state 0 is
/// -inf and upper[g][S] = +inf. Cumulative sums are clipped away from {0,1}
/// before inversion.
struct ThresholdTable {
    std::vector<std::vector<double>> upper;

    int n_states() const { return static_cast<int>(upper.empty() ? 0 : upper[0].size()); }
};

inline ThresholdTable thresholds(const TransitionMatrix& tm) {
    const int n = tm.n_states();
    ThresholdTable th;
    th.upper.assign(n, std::vector<double>(n, 0.0));
    constexpr double clip = 1e-12;
    for (int g = 0; g < n; ++g) {
        double cum = 0.0;
        for (int s = 0; s < n - 1; ++s) {
            cum += tm.probs[g][s];
            th.upper[g][s] = norm_quantile(std::clamp(cum, clip, 1.0 - clip));
        }
        th.upper[g][n - 1] = std::numeric_limits<double>::infinity();
    }
    return th;
}

/// Conditional migration probabilities pi_{ns}(x) for an obligor in grade g.
/// Consecutive equal thresholds (zero-probability states) reuse the cached
/// CDF value, which keeps the hot path cheap on sparse rows.
inline void conditional_migration(const ThresholdTable& th, int g, double x, double rho,
                                  std::vector<double>& out) {
    const int n = th.n_states();
    out.resize(n);
    const double sr = std::sqrt(rho);
    const double inv_den = 1.0 / std::sqrt(1.0 - rho);
    double prev_thr = -std::numeric_limits<double>::infinity();
    double prev_cdf = 0.0;
    for (int s = 0; s < n; ++s) {
        const double thr = th.upper[g][s];
        double cdf;
        if (thr == prev_thr) {
            cdf = prev_cdf;
        } else if (std::isinf(thr)) {
            cdf = thr > 0.0 ? 1.0 : 0.0;
        } else {
            cdf = norm_cdf((thr - x * sr) * inv_den);
        }
        out[s] = std::max(0.0, cdf - prev_cdf);
        prev_thr = thr;
        prev_cdf = cdf;
    }
}

inline std::vector<double> conditional_migration(const ThresholdTable& th, int g, double x,
                                                 double rho) {
    std::vector<double> out;
    conditional_migration(th, g, x, rho, out);
    return out;
}

/// Cumulative physical default probabilities from powers of the annual
/// transition matrix: cum[y][g] = P(default by year y | grade g at 0).
struct CumulativeDefaultTable {
    std::vector<std::vector<double>> cum;  // [year][grade]

    int max_years() const { return static_cast<int>(cum.size()) - 1; }
};

inline CumulativeDefaultTable cumulative_default_table(const TransitionMatrix& tm, int years) {
    const int n = tm.n_states();
    CumulativeDefaultTable table;
    table.cum.assign(years + 1, std::vector<double>(n, 0.0));
    std::vector<std::vector<double>> power(n, std::vector<double>(n, 0.0));
    for (int i = 0; i < n; ++i) power[i][i] = 1.0;
    for (int y = 1; y <= years; ++y) {
        std::vector<std::vector<double>> next(n, std::vector<double>(n, 0.0));
        for (int i = 0; i < n; ++i) {
            for (int k = 0; k < n; ++k) {
                const double pik = power[i][k];
                if (pik == 0.0) continue;
                const auto& row = tm.probs[k];
                for (int j = 0; j < n; ++j) next[i][j] += pik * row[j];
            }
        }
        power.swap(next);
        for (int g = 0; g < n; ++g) table.cum[y][g] = power[g][0];
    }
    return table;
}

/// Physical cumulative default probability at a fractional tenor via
/// monotone piecewise-linear interpolation between integer years.
inline double physical_default_prob(const CumulativeDefaultTable& table, int grade, double t) {
    if (t <= 0.0) return 0.0;
    const int max_y = table.max_years();
    if (t >= max_y) return table.cum[max_y][grade];
    const int lo = static_cast<int>(std::floor(t));
    const double w = t - lo;
    return (1.0 - w) * table.cum[lo][grade] + w * table.cum[lo + 1][grade];
}

/// KMV-style risk-neutral conversion with market Sharpe ratio psi:
/// p*(t) = Phi(Phi^{-1}(p(t)) + psi sqrt(t) sqrt(rho)).
inline double risk_neutral_default_prob(const CumulativeDefaultTable& table, int grade, double rho,
                                        double psi, double t) {
    const double p = physical_default_prob(table, grade, t);
    if (p <= 0.0) return 0.0;
    if (p >= 1.0) return 1.0;
    return norm_cdf(norm_quantile(p) + psi * std::sqrt(t) * std::sqrt(rho));
}

inline std::vector<double> risk_neutral_default_curve(const TransitionMatrix& tm, int grade,
                                                      double rho, double psi,
                                                      const std::vector<double>& tenors) {
    double max_t = 0.0;
    for (double t : tenors) max_t = std::max(max_t, t);
    const auto table = cumulative_default_table(tm, static_cast<int>(std::ceil(max_t)) + 1);
    std::vector<double> out;
    out.reserve(tenors.size());
    for (double t : tenors) out.push_back(risk_neutral_default_prob(table, grade, rho, psi, t));
    return out;
}

/// Bond values at 0 and at the horizon per rating state, plus the return
/// ratios lambda_{ns} = P_{nT}(s)/P_{n0}. The default entry uses ELGD; the
/// simulation substitutes the realized LGD through default_return().
struct BondValuation {
    double p0 = 1.0;
    std::vector<double> pT;       // state s = 0..S, expectation mode
    std::vector<double> lambda;   // pT[s] / p0
    double carry_T = 0.0;         // coupons paid before T compounded to T
    double fwd_value_T = 1.0;     // default-free value F(T)

    double default_value(double lgd) const { return carry_T + (1.0 - lgd) * fwd_value_T; }
    double default_return(double lgd) const { return default_value(lgd) / p0; }
};

namespace detail {

struct CouponGrid {
    std::vector<double> times;  // t_1 .. t_m, t_m = maturity
    double delta;
    double coupon;
};

inline CouponGrid coupon_grid(const MtmObligor& ob, const MtmMarketParams& mkt) {
    const int m = std::max<int>(1, static_cast<int>(std::llround(ob.maturity / mkt.accrual)));
    CouponGrid grid;
    grid.delta = mkt.accrual;
    grid.coupon = ob.coupon;
    grid.times.resize(m);
    for (int k = 0; k < m; ++k) grid.times[k] = (k + 1) * mkt.accrual;
    return grid;
}

// Default-free forward value at time t of the remaining cash flows.
inline double default_free_value(const CouponGrid& grid, const YieldCurve& curve, double t) {
    const double dt = curve.discount(t);
    double v = 0.0;
    for (double tk : grid.times) {
        if (tk >= t - 1e-12) v += grid.coupon * grid.delta * curve.discount(tk) / dt;
    }
    v += curve.discount(grid.times.back()) / dt;
    return v;
}

}  // namespace detail

/// Current price of the defaultable coupon bond, discounting the expected
/// default losses at the obligor's risk-neutral default curve.
inline double price_bond_t0(const MtmObligor& ob, const MtmMarketParams& mkt,
                            const CumulativeDefaultTable& table) {
    const auto grid = detail::coupon_grid(ob, mkt);
    double p0 = detail::default_free_value(grid, mkt.curve, 0.0);
    double prev_p = 0.0;
    for (double tk : grid.times) {
        const double p_star = risk_neutral_default_prob(table, ob.rating, ob.rho, mkt.sharpe, tk);
        p0 -= mkt.curve.discount(tk) * (p_star - prev_p) * ob.elgd *
              detail::default_free_value(grid, mkt.curve, tk);
        prev_p = p_star;
    }
    if (!(p0 > 0.0)) throw std::runtime_error("price_bond_t0: nonpositive bond price");
    return p0;
}

/// Bond value at the horizon conditional on state s. Non-default states use
/// the risk-neutral curve restarted from grade s (Markov identity); the
/// default state applies the supplied LGD to the default-free value.
inline double price_bond_tT(const MtmObligor& ob, const MtmMarketParams& mkt,
                            const CumulativeDefaultTable& table, int state, double lgd) {
    const auto grid = detail::coupon_grid(ob, mkt);
    const double T = mkt.horizon;
    const double dT = mkt.curve.discount(T);
    double carry = 0.0;
    for (double tk : grid.times) {
        if (tk < T - 1e-12) carry += grid.coupon * grid.delta * mkt.curve.discount(tk) / dT;
    }
    const double fT = detail::default_free_value(grid, mkt.curve, T);
    if (state == 0) {
        if (!(lgd >= 0.0 && lgd <= 1.0)) {
            throw std::invalid_argument("price_bond_tT: default state requires an LGD in [0,1]");
        }
        return carry + (1.0 - lgd) * fT;
    }
    double value = carry + fT;
    double prev_p = 0.0;
    for (double tk : grid.times) {
        if (tk <= T + 1e-12) continue;
        const double p_star =
            risk_neutral_default_prob(table, state, ob.rho, mkt.sharpe, tk - T);
        value -= (mkt.curve.discount(tk) / dT) * (p_star - prev_p) * ob.elgd *
                 detail::default_free_value(grid, mkt.curve, tk);
        prev_p = p_star;
    }
    return value;
}

inline BondValuation value_bond(const MtmObligor& ob, const MtmMarketParams& mkt,
                                const CumulativeDefaultTable& table, int n_states) {
    BondValuation val;
    val.p0 = price_bond_t0(ob, mkt, table);
    val.pT.resize(n_states);
    val.lambda.resize(n_states);
    for (int s = 0; s < n_states; ++s) {
        val.pT[s] = price_bond_tT(ob, mkt, table, s, ob.elgd);
        val.lambda[s] = val.pT[s] / val.p0;
    }
    const auto grid = detail::coupon_grid(ob, mkt);
    const double dT = mkt.curve.discount(mkt.horizon);
    val.carry_T = 0.0;
    for (double tk : grid.times) {
        if (tk < mkt.horizon - 1e-12) val.carry_T += grid.coupon * grid.delta * mkt.curve.discount(tk) / dT;
    }
    val.fwd_value_T = detail::default_free_value(grid, mkt.curve, mkt.horizon);
    return val;
}

/// Precomputed, read-only state shared by all MtM operations on a portfolio:
/// thresholds, bond valuations, exposure shares and obligor groups that share
/// identical parameters (so homogeneous portfolios revalue each path once).
struct MtmValuations {
    MtmMarketParams mkt;
    std::vector<MtmObligor> obligors;  // maturities aligned to the accrual grid
    std::vector<double> shares;
    std::vector<BetaLgdSpec> lgd_specs;
    ThresholdTable th;
    std::vector<BondValuation> bonds;
    double x_tail = 0.0;     // Phi^{-1}(1 - q), the loss-relevant factor value
    double discount_T = 1.0;
    int n_states = 0;
    int maturity_adjustments = 0;
    std::vector<std::vector<int>> groups;
};

inline MtmValuations prepare_valuations(const MtmPortfolio& p, const MtmMarketParams& mkt,
                                        const TransitionMatrix& tm) {
    validate(mkt);
    validate(p, tm.n_grades());
    MtmValuations vals;
    vals.mkt = mkt;
    vals.obligors = p.obligors;
    vals.n_states = tm.n_states();

    double max_maturity = mkt.horizon;
    for (auto& ob : vals.obligors) {
        const double steps = std::max(std::round(ob.maturity / mkt.accrual),
                                      std::round(mkt.horizon / mkt.accrual));
        const double aligned = steps * mkt.accrual;
        if (std::fabs(aligned - ob.maturity) > 1e-9) ++vals.maturity_adjustments;
        ob.maturity = aligned;
        max_maturity = std::max(max_maturity, aligned);
    }

    vals.shares = exposure_shares(vals.obligors);
    vals.lgd_specs.reserve(vals.obligors.size());
    for (const auto& ob : vals.obligors) {
        vals.lgd_specs.push_back(BetaLgdSpec{ob.elgd, p.lgd_nu});
        validate(vals.lgd_specs.back());
    }
    vals.th = thresholds(tm);
    vals.x_tail = norm_quantile(1.0 - mkt.q);
    vals.discount_T = mkt.curve.discount(mkt.horizon);

    const auto table = cumulative_default_table(tm, static_cast<int>(std::ceil(max_maturity)) + 1);
    vals.bonds.reserve(vals.obligors.size());
    for (const auto& ob : vals.obligors) {
        vals.bonds.push_back(value_bond(ob, mkt, table, vals.n_states));
    }

    std::map<std::tuple<int, double, double, double, double, double>, std::size_t> keys;
    for (std::size_t n = 0; n < vals.obligors.size(); ++n) {
        const auto& ob = vals.obligors[n];
        const auto key = std::make_tuple(ob.rating, ob.rho, vals.shares[n], ob.elgd, ob.coupon,
                                         ob.maturity);
        const auto it = keys.find(key);
        if (it == keys.end()) {
            keys.emplace(key, vals.groups.size());
            vals.groups.push_back({static_cast<int>(n)});
        } else {
            vals.groups[it->second].push_back(static_cast<int>(n));
        }
    }
    return vals;
}

/// Conditional expected return of obligor n given X = x.
inline double mu_obligor(const MtmValuations& vals, std::size_t n, double x) {
    std::vector<double> pis;
    conditional_migration(vals.th, vals.obligors[n].rating, x, vals.obligors[n].rho, pis);
    double mu = 0.0;
    for (int s = 0; s < vals.n_states; ++s) mu += vals.bonds[n].lambda[s] * pis[s];
    return mu;
}

/// Portfolio-level conditional expected return sum_n a_n mu_n(x).
inline double mu_conditional(const MtmValuations& vals, double x) {
    double mu = 0.0;
    std::vector<double> pis;
    for (std::size_t n = 0; n < vals.obligors.size(); ++n) {
        conditional_migration(vals.th, vals.obligors[n].rating, x, vals.obligors[n].rho, pis);
        double mn = 0.0;
        for (int s = 0; s < vals.n_states; ++s) mn += vals.bonds[n].lambda[s] * pis[s];
        mu += vals.shares[n] * mn;
    }
    return mu;
}

/// Conditional mean of the negative-return loss L = -sum a_n R_n given x.
inline double conditional_mean_loss(const MtmValuations& vals, double x) {
    return -mu_conditional(vals, x);
}

/// Tail conditional loss c = E[L | alpha_{1-q}(X)], the tilting target.
inline double tilt_target(const MtmValuations& vals) {
    return conditional_mean_loss(vals, vals.x_tail);
}

struct TiltResult {
    double t = 0.0;
    bool boundary = false;  // c was outside the attainable conditional range
};

namespace detail {

// Derivative of the conditional cumulant of L given x, computed with a
// per-obligor exponent shift so extreme t never overflows.
inline double cumulant_derivative(const MtmValuations& vals, double t, double x,
                                  std::vector<double>& pis) {
    double total = 0.0;
    for (const auto& group : vals.groups) {
        const int n0 = group.front();
        const auto& ob = vals.obligors[n0];
        conditional_migration(vals.th, ob.rating, x, ob.rho, pis);
        const double a = vals.shares[n0];
        const auto& lambda = vals.bonds[n0].lambda;
        double max_e = -std::numeric_limits<double>::infinity();
        for (int s = 0; s < vals.n_states; ++s) {
            if (pis[s] > 0.0) max_e = std::max(max_e, -t * a * lambda[s]);
        }
        double den = 0.0;
        double num = 0.0;
        for (int s = 0; s < vals.n_states; ++s) {
            if (pis[s] <= 0.0) continue;
            const double w = std::exp(-t * a * lambda[s] - max_e) * pis[s];
            den += w;
            num += -a * lambda[s] * w;
        }
        total += static_cast<double>(group.size()) * num / den;
    }
    return total;
}

}  // namespace detail

/// Solves d/dt ln M_{L|X=x}(t) = c for the per-path tilting parameter t.
inline TiltResult solve_tilt_t(const MtmValuations& vals, double c, double x) {
    std::vector<double> pis;
    auto f = [&](double t) { return detail::cumulant_derivative(vals, t, x, pis) - c; };
    const double f0 = f(0.0);
    if (std::fabs(f0) <= 1e-12) return {0.0, false};

    // The cumulant derivative is increasing in t.
    double lo = 0.0, hi = 0.0;
    constexpr double t_limit = 1e8;
    if (f0 < 0.0) {
        hi = 1.0;
        while (f(hi) < 0.0) {
            hi *= 4.0;
            if (hi > t_limit) return {t_limit, true};
        }
        lo = hi / 4.0 < 1.0 ? 0.0 : hi / 4.0;
    } else {
        lo = -1.0;
        while (f(lo) > 0.0) {
            lo *= 4.0;
            if (lo < -t_limit) return {-t_limit, true};
        }
        hi = lo / 4.0 > -1.0 ? 0.0 : lo / 4.0;
    }
    const double t = solve_monotone(f, lo, hi, RootOptions{1e-10, 300, 0});
    return {t, false};
}

/// Mean shift for the Gaussian factor: the boundary point of
/// min{x^2 : E[L|X=x] > c}, i.e. the root of -sum a_n mu_n(x) = c.
inline double solve_factor_shift(const MtmValuations& vals, double c) {
    auto f = [&](double x) { return conditional_mean_loss(vals, x) - c; };
    return solve_monotone(f, vals.x_tail - 1.0, vals.x_tail + 1.0, RootOptions{1e-10, 300, 64});
}

inline double solve_factor_shift(const MtmValuations& vals) {
    return solve_factor_shift(vals, tilt_target(vals));
}

/// Plain Monte Carlo quantile of the negative-return loss. The realized LGD
/// is drawn only on the default branch.
inline VarEstimate plain_var_mtm(const MtmValuations& vals,
                                 std::vector<WeightedLossSample>* out_samples = nullptr) {
    const std::size_t K = vals.mkt.n_sims;
    std::vector<WeightedLossSample> samples(K);
    parallel_chunks(K, kChunkSize, vals.mkt.threads,
                    [&](std::size_t chunk, std::size_t begin, std::size_t end) {
                        RandomStream stream(vals.mkt.seed, chunk);
                        std::vector<double> pis;
                        for (std::size_t k = begin; k < end; ++k) {
                            const double x = stream.normal();
                            double loss = 0.0;
                            for (const auto& group : vals.groups) {
                                const int n0 = group.front();
                                const auto& ob0 = vals.obligors[n0];
                                conditional_migration(vals.th, ob0.rating, x, ob0.rho, pis);
                                const double a = vals.shares[n0];
                                const auto& bond = vals.bonds[n0];
                                for (int n : group) {
                                    const double u = stream.uniform();
                                    int state = vals.n_states - 1;
                                    double cum = 0.0;
                                    for (int s = 0; s < vals.n_states; ++s) {
                                        cum += pis[s];
                                        if (u < cum) {
                                            state = s;
                                            break;
                                        }
                                    }
                                    double ret;
                                    if (state == 0) {
                                        const double lgd =
                                            sample_beta_lgd(vals.lgd_specs[n], stream);
                                        ret = bond.default_return(lgd);
                                    } else {
                                        ret = bond.lambda[state];
                                    }
                                    loss -= a * ret;
                                }
                            }
                            samples[k] = {loss, 1.0};
                        }
                    });
    auto est = detail::weighted_quantile(samples, vals.mkt.q);
    if (out_samples) *out_samples = std::move(samples);
    return est;
}

namespace detail {

/// Per-portfolio context for the severity-aware tilt: group-level bond
/// quantities, an exponent cap, and the fixed two-component Gaussian factor
/// mixture covering both the systematic tail region and the deep all-default
/// region, so factor weights stay moderate across the loss-relevant range.
struct MtmTiltContext {
    double t_cap = 0.0;
    double mix_m1 = 0.0;       // component 1: N(x_tail, 1)
    double mix_m2 = 0.0;       // component 2: N(mu_deep, s2^2)
    double mix_s2 = 2.0;
    std::vector<double> v_full;   // per group: default return at zero LGD
    std::vector<double> b_coeff;  // per group: F(T)/P0, LGD sensitivity

    double sample_factor(RandomStream& stream) const {
        const bool deep = stream.uniform() < 0.5;
        const double z = stream.normal();
        return deep ? mix_m2 + mix_s2 * z : mix_m1 + z;
    }

    double log_factor_ratio(double x) const {
        const double e1 = -0.5 * (x - mix_m1) * (x - mix_m1);
        const double z2 = (x - mix_m2) / mix_s2;
        const double e2 = -0.5 * z2 * z2 - std::log(mix_s2);
        const double m = std::max(e1, e2);
        const double log_g = m + std::log(0.5 * std::exp(e1 - m) + 0.5 * std::exp(e2 - m));
        return -0.5 * x * x - log_g;
    }

    MtmTiltContext(const MtmValuations& vals) {
        double max_scale = 1e-12;
        v_full.resize(vals.groups.size());
        b_coeff.resize(vals.groups.size());
        for (std::size_t g = 0; g < vals.groups.size(); ++g) {
            const int n0 = vals.groups[g].front();
            const double a = vals.shares[n0];
            const auto& bond = vals.bonds[n0];
            for (double l : bond.lambda) max_scale = std::max(max_scale, a * std::fabs(l));
            max_scale = std::max(max_scale, a * bond.default_return(0.0));
            v_full[g] = bond.default_return(0.0);
            b_coeff[g] = bond.fwd_value_T / bond.p0;
        }
        t_cap = 300.0 / max_scale;

        // Deep mixture component: the factor level where the conditional
        // mean loss has covered 90% of its headroom toward the ELGD
        // all-default ceiling, capped a few sigmas below component 1.
        mix_m1 = vals.x_tail;
        mix_m2 = vals.x_tail;
        const double c0 = conditional_mean_loss(vals, vals.x_tail);
        double c_elgd = 0.0;
        for (std::size_t n = 0; n < vals.obligors.size(); ++n) {
            c_elgd -= vals.shares[n] * vals.bonds[n].lambda[0];
        }
        if (c_elgd > c0 + 1e-12) {
            const double c_deep = c0 + 0.9 * (c_elgd - c0);
            try {
                const double mu = solve_factor_shift(vals, c_deep);
                mix_m2 = std::clamp(mu, vals.x_tail - 6.0, vals.x_tail);
            } catch (const std::exception&) {
                mix_m2 = vals.x_tail - 4.0;
            }
        }
    }
};

/// Resolved sampling measure for one pass: a single global tilt t shared by
/// all paths, with exact per-group tilted-severity samplers at c = t a B.
/// A global t keeps the severity tables exact, so the likelihood ratio is a
/// function of the realized loss and factor alone.
struct MtmSevDesign {
    double t = 0.0;
    std::vector<TiltedLgdSampler> tables;  // per group
    std::vector<double> log_mgf_sev;       // per group
};

// Jointly tilted conditional loss mean at factor level x, severity mgfs from
// the exact series.
inline double cond_mean_tilted_sev(const MtmValuations& vals, const MtmTiltContext& ctx,
                                   double t, double x, std::vector<double>& pis) {
    double total = 0.0;
    for (std::size_t g = 0; g < vals.groups.size(); ++g) {
        const int n0 = vals.groups[g].front();
        const auto& ob = vals.obligors[n0];
        conditional_migration(vals.th, ob.rating, x, ob.rho, pis);
        const double a = vals.shares[n0];
        const auto& lambda = vals.bonds[n0].lambda;
        const double cq = std::min(t * a * ctx.b_coeff[g], 600.0);
        const auto& spec = vals.lgd_specs[n0];
        double log_m, sev_mean;
        if (spec.nu == 0.0) {
            log_m = cq * spec.elgd;
            sev_mean = spec.elgd;
        } else {
            log_m = log_beta_mgf(spec.alpha(), spec.beta(), cq);
            sev_mean = tilted_beta_mean(spec.alpha(), spec.beta(), cq);
        }
        const double v_tilted = ctx.v_full[g] - ctx.b_coeff[g] * sev_mean;
        const double e_default = -t * a * ctx.v_full[g] + log_m;

        double max_e = pis[0] > 0.0 ? e_default : -std::numeric_limits<double>::infinity();
        for (int s = 1; s < vals.n_states; ++s) {
            if (pis[s] > 0.0) max_e = std::max(max_e, -t * a * lambda[s]);
        }
        double den = 0.0;
        double num = 0.0;
        if (pis[0] > 0.0) {
            const double w = std::exp(e_default - max_e) * pis[0];
            den += w;
            num += v_tilted * w;
        }
        for (int s = 1; s < vals.n_states; ++s) {
            if (pis[s] <= 0.0) continue;
            const double w = std::exp(-t * a * lambda[s] - max_e) * pis[s];
            den += w;
            num += lambda[s] * w;
        }
        total -= static_cast<double>(vals.groups[g].size()) * a * num / den;
    }
    return total;
}

/// Solves for the global tilt whose jointly tilted conditional mean at the
/// tail factor level reaches the target, then builds the exact severity
/// samplers.
inline MtmSevDesign build_mtm_design(const MtmValuations& vals, const MtmTiltContext& ctx,
                                     double target) {
    MtmSevDesign design;
    std::vector<double> pis;
    const double x_ref = ctx.mix_m1;
    auto f = [&](double t) { return cond_mean_tilted_sev(vals, ctx, t, x_ref, pis) - target; };
    if (f(0.0) < 0.0) {
        if (f(ctx.t_cap) <= 0.0) {
            design.t = ctx.t_cap;
        } else {
            double lo = 0.0, hi = ctx.t_cap;
            for (int i = 0; i < 120; ++i) {
                const double mid = 0.5 * (lo + hi);
                if (f(mid) < 0.0) lo = mid; else hi = mid;
                if (hi - lo < 1e-9 * std::max(1.0, hi)) break;
            }
            design.t = 0.5 * (lo + hi);
        }
    }
    design.tables.reserve(vals.groups.size());
    design.log_mgf_sev.resize(vals.groups.size());
    for (std::size_t g = 0; g < vals.groups.size(); ++g) {
        const int n0 = vals.groups[g].front();
        const double cq = std::min(design.t * vals.shares[n0] * ctx.b_coeff[g], 600.0);
        design.tables.emplace_back(vals.lgd_specs[n0], cq);
        design.log_mgf_sev[g] = design.tables[g].log_mgf();
    }
    return design;
}

// One simulation pass under a resolved design: factor from the mixture,
// states from the t-tilted categorical, default severities from the exact
// tilted samplers. Each log-weight term is the exact ratio of the realized
// measure, so weights reduce to exp(-t L) times the per-obligor mgfs and
// the factor ratio.
inline VarEstimate run_mtm_design(const MtmValuations& vals, const MtmTiltContext& ctx,
                                  const MtmSevDesign& design, std::uint64_t seed,
                                  std::size_t n_sims,
                                  std::vector<WeightedLossSample>* out_samples = nullptr) {
    const double t = design.t;
    std::vector<WeightedLossSample> samples(n_sims);
    parallel_chunks(
        n_sims, kChunkSize, vals.mkt.threads,
        [&](std::size_t chunk, std::size_t begin, std::size_t end) {
            RandomStream stream(seed, chunk);
            std::vector<double> pis;
            std::vector<double> tail_cum(vals.n_states, 0.0);
            for (std::size_t k = begin; k < end; ++k) {
                const double x = ctx.sample_factor(stream);
                double loss = 0.0;
                double log_w = 0.0;
                for (std::size_t g = 0; g < vals.groups.size(); ++g) {
                    const auto& group = vals.groups[g];
                    const int n0 = group.front();
                    const auto& ob0 = vals.obligors[n0];
                    conditional_migration(vals.th, ob0.rating, x, ob0.rho, pis);
                    const double a = vals.shares[n0];
                    const auto& bond = vals.bonds[n0];
                    const double log_mgf_sev = design.log_mgf_sev[g];
                    const double e_default = -t * a * ctx.v_full[g] + log_mgf_sev;
                    // Tilted (unnormalized) state weights, shared across the
                    // group's members.
                    const double w0 = pis[0] > 0.0 ? std::exp(e_default) * pis[0] : 0.0;
                    double cum = 0.0;
                    for (int s = 1; s < vals.n_states; ++s) {
                        if (pis[s] > 0.0) {
                            cum += std::exp(-t * a * bond.lambda[s]) * pis[s];
                        }
                        tail_cum[s] = cum;
                    }
                    const double norm = w0 + cum;
                    const double log_norm = std::log(norm);
                    for (std::size_t m = 0; m < group.size(); ++m) {
                        const double u = stream.uniform() * norm;
                        if (u < w0 || cum <= 0.0) {
                            double log_fg = 0.0;
                            const double lgd = design.tables[g].draw(stream, log_fg);
                            const double v0 = ctx.v_full[g] - ctx.b_coeff[g] * lgd;
                            loss -= a * v0;
                            log_w += log_norm + t * a * ctx.v_full[g] - log_mgf_sev + log_fg;
                        } else {
                            const double target = u - w0;
                            int state = vals.n_states - 1;
                            for (int s = 1; s < vals.n_states; ++s) {
                                if (target < tail_cum[s]) {
                                    state = s;
                                    break;
                                }
                            }
                            loss -= a * bond.lambda[state];
                            log_w += log_norm + t * a * bond.lambda[state];
                        }
                    }
                }
                log_w += ctx.log_factor_ratio(x);
                samples[k] = {loss, std::exp(log_w)};
            }
        });
    auto est = weighted_quantile(samples, vals.mkt.q);
    if (out_samples) *out_samples = std::move(samples);
    return est;
}

}  // namespace detail

/// Importance-sampled quantile of the negative-return loss, two-stage. The
/// pilot pass runs under a defensively deep tilt (target halfway to the
/// full-wipeout ceiling, so the quantile is inside the sampled range no
/// matter how far it sits beyond the ASRF proxy); the main pass re-solves
/// the global tilt so the conditional tilted mean at the tail factor level
/// sits at the pilot estimate.
inline VarEstimate is_var_mtm(const MtmValuations& vals,
                              std::vector<WeightedLossSample>* out_samples = nullptr) {
    const detail::MtmTiltContext ctx(vals);
    const double c0 = tilt_target(vals);

    // Attainable ceiling of the conditional mean loss: every obligor in
    // default with full severity (x -> -inf, LGD -> 1).
    double c_wipeout = 0.0;
    for (std::size_t g = 0; g < vals.groups.size(); ++g) {
        c_wipeout -= static_cast<double>(vals.groups[g].size()) *
                     vals.shares[vals.groups[g].front()] *
                     (ctx.v_full[g] - ctx.b_coeff[g]);
    }

    auto clamp_tilt = [&](double c) {
        return std::clamp(c, c0, c0 + 0.95 * std::max(c_wipeout - c0, 0.0));
    };

    double c_tilt = c0;
    if (c_wipeout > c0 + 1e-12) {
        const double c_deep = c0 + 0.5 * (c_wipeout - c0);
        const std::size_t pilot_sims = std::max<std::size_t>(4000, vals.mkt.n_sims / 20);
        const auto pilot_design = detail::build_mtm_design(vals, ctx, clamp_tilt(c_deep));
        const auto pilot = detail::run_mtm_design(vals, ctx, pilot_design,
                                                  derive_seed(vals.mkt.seed, 0x50494c4f),
                                                  pilot_sims);
        c_tilt = clamp_tilt(pilot.value);
    }
    const auto design = detail::build_mtm_design(vals, ctx, c_tilt);
    return detail::run_mtm_design(vals, ctx, design, vals.mkt.seed, vals.mkt.n_sims, out_samples);
}

/// Exact MtM granularity adjustment, Eq.-(14) style: discounted gap between
/// the loss quantile and the conditional loss at the factor tail.
inline GaResult ga_exact_mtm(const MtmValuations& vals,
                             std::vector<WeightedLossSample>* out_samples = nullptr) {
    const double c = tilt_target(vals);
    const auto est = is_var_mtm(vals, out_samples);
    GaResult r;
    r.var_q = est.value;
    r.conditional_loss = c;
    r.ga = vals.discount_T * (est.value - c);
    r.ess = est.ess;
    return r;
}

inline GaResult ga_exact_mtm(const MtmPortfolio& p, const MtmMarketParams& mkt,
                             const TransitionMatrix& tm,
                             std::vector<WeightedLossSample>* out_samples = nullptr) {
    const auto vals = prepare_valuations(p, mkt, tm);
    return ga_exact_mtm(vals, out_samples);
}

}  // namespace granular
