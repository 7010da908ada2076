#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "granular/analytic.hpp"
#include "granular/cmetrics.hpp"
#include "granular/crplus.hpp"
#include "granular/mlp.hpp"
#include "granular/sampler.hpp"
#include "granular/train.hpp"

namespace granular {

struct ErrorStats {
    std::size_t n_portfolios = 0;
    double mean = 0.0;
    double std = 0.0;
    double min = 0.0;
    double p25 = 0.0;
    double p50 = 0.0;
    double p75 = 0.0;
    double max = 0.0;
};

inline ErrorStats summarize(std::vector<double> values) {
    ErrorStats s;
    s.n_portfolios = values.size();
    if (values.empty()) return s;
    std::sort(values.begin(), values.end());
    double sum = 0.0;
    for (double v : values) sum += v;
    s.mean = sum / values.size();
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.std = values.size() > 1 ? std::sqrt(ss / (values.size() - 1)) : 0.0;
    s.min = values.front();
    s.max = values.back();
    auto quantile = [&](double q) {
        const double pos = q * (values.size() - 1);
        const std::size_t lo = static_cast<std::size_t>(pos);
        const double w = pos - lo;
        return lo + 1 < values.size() ? (1.0 - w) * values[lo] + w * values[lo + 1] : values[lo];
    };
    s.p25 = quantile(0.25);
    s.p50 = quantile(0.50);
    s.p75 = quantile(0.75);
    return s;
}

/// Spearman rank correlation with average ranks on ties.
inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.size() < 2) {
        throw std::invalid_argument("spearman: need two equally sized samples");
    }
    auto ranks = [](const std::vector<double>& v) {
        const std::size_t n = v.size();
        std::vector<std::size_t> idx(n);
        for (std::size_t i = 0; i < n; ++i) idx[i] = i;
        std::sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) { return v[x] < v[y]; });
        std::vector<double> r(n);
        std::size_t i = 0;
        while (i < n) {
            std::size_t j = i;
            while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
            const double avg = 0.5 * (i + j) + 1.0;
            for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
            i = j + 1;
        }
        return r;
    };
    const auto ra = ranks(a);
    const auto rb = ranks(b);
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        ma += ra[i];
        mb += rb[i];
    }
    ma /= ra.size();
    mb /= rb.size();
    double cov = 0.0, va = 0.0, vb = 0.0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        cov += (ra[i] - ma) * (rb[i] - mb);
        va += (ra[i] - ma) * (ra[i] - ma);
        vb += (rb[i] - mb) * (rb[i] - mb);
    }
    if (va == 0.0 || vb == 0.0) return 0.0;
    return cov / std::sqrt(va * vb);
}

struct EvalRow {
    std::string id;
    int n_obligors = 0;
    double ga_mc = 0.0;
    double ga_first = 0.0;
    double ga_nn = 0.0;
};

struct EvalReport {
    std::vector<EvalRow> rows;
    ErrorStats nn_all, first_all;      // |method - MC| over all portfolios
    ErrorStats nn_small, first_small;  // the sub-25-obligor slice
    int small_cutoff = 25;
};

namespace detail {

inline void finalize_report(EvalReport& report) {
    std::vector<double> nn_err, first_err, nn_err_small, first_err_small;
    for (const auto& row : report.rows) {
        const double en = std::fabs(row.ga_nn - row.ga_mc);
        const double ef = std::fabs(row.ga_first - row.ga_mc);
        nn_err.push_back(en);
        first_err.push_back(ef);
        if (row.n_obligors < report.small_cutoff) {
            nn_err_small.push_back(en);
            first_err_small.push_back(ef);
        }
    }
    report.nn_all = summarize(nn_err);
    report.first_all = summarize(first_err);
    report.nn_small = summarize(nn_err_small);
    report.first_small = summarize(first_err_small);
}

}  // namespace detail

/// Compares the NN GA and first-order GA against the IS Monte Carlo GA on a
/// set of test portfolios. Evaluation seeds derive from a family disjoint
/// from the training tags.
inline EvalReport evaluate_methods(const std::vector<ActuarialPortfolio>& portfolios,
                                   const CrPlusParams& engine, const MlpModel& model,
                                   std::uint64_t eval_seed) {
    EvalReport report;
    for (std::size_t i = 0; i < portfolios.size(); ++i) {
        const auto& p = portfolios[i];
        CrPlusParams params = engine;
        params.seed = derive_seed(eval_seed, kTagEval, i);
        EvalRow row;
        row.id = "portfolio_" + std::to_string(i);
        row.n_obligors = static_cast<int>(p.obligors.size());
        row.ga_mc = ga_exact_actuarial(p, params).ga;
        row.ga_first = ga_first_order_actuarial(p, params.xi, params.q);
        row.ga_nn = predict_ga(model, p, params.xi, params.q);
        report.rows.push_back(row);
    }
    detail::finalize_report(report);
    return report;
}

inline EvalReport evaluate_methods(const std::vector<MtmPortfolio>& portfolios,
                                   const MtmMarketParams& mkt, const TransitionMatrix& tm,
                                   const MlpModel& model, std::uint64_t eval_seed) {
    EvalReport report;
    for (std::size_t i = 0; i < portfolios.size(); ++i) {
        const auto& p = portfolios[i];
        MtmMarketParams params = mkt;
        params.seed = derive_seed(eval_seed, kTagEval, i);
        const auto vals = prepare_valuations(p, params, tm);
        EvalRow row;
        row.id = "portfolio_" + std::to_string(i);
        row.n_obligors = static_cast<int>(p.obligors.size());
        row.ga_mc = ga_exact_mtm(vals).ga;
        row.ga_first = ga_first_order_mtm(vals);
        row.ga_nn = model.forward(encode_mtm(p, tm.n_grades(), row.ga_first, model.meta));
        report.rows.push_back(row);
    }
    detail::finalize_report(report);
    return report;
}

struct TraceRow {
    std::size_t k = 0;          // paths consumed so far
    double plain_estimate = 0.0;
    double is_estimate = 0.0;
};

namespace detail {

inline double prefix_quantile(const std::vector<WeightedLossSample>& samples, std::size_t k,
                              double q) {
    std::vector<WeightedLossSample> prefix(samples.begin(), samples.begin() + k);
    return weighted_quantile(prefix, q).value;
}

}  // namespace detail

/// Running plain and IS quantile estimates after each block of 1000 paths.
inline std::vector<TraceRow> convergence_trace(const ActuarialPortfolio& p,
                                               const CrPlusParams& params, std::size_t k_max) {
    CrPlusParams run = params;
    run.n_sims = k_max;
    std::vector<WeightedLossSample> plain_samples, is_samples;
    plain_var(p, run, &plain_samples);
    run.seed = derive_seed(params.seed, 0x49535452);  // disjoint IS stream family
    is_var(p, run, &is_samples);
    std::vector<TraceRow> trace;
    for (std::size_t k = 1000; k <= k_max; k += 1000) {
        trace.push_back({k, detail::prefix_quantile(plain_samples, k, params.q),
                         detail::prefix_quantile(is_samples, k, params.q)});
    }
    return trace;
}

inline std::vector<TraceRow> convergence_trace(const MtmValuations& vals, std::size_t k_max) {
    MtmValuations run = vals;
    run.mkt.n_sims = k_max;
    std::vector<WeightedLossSample> plain_samples, is_samples;
    plain_var_mtm(run, &plain_samples);
    run.mkt.seed = derive_seed(vals.mkt.seed, 0x49535452);
    is_var_mtm(run, &is_samples);
    std::vector<TraceRow> trace;
    for (std::size_t k = 1000; k <= k_max; k += 1000) {
        trace.push_back({k, detail::prefix_quantile(plain_samples, k, vals.mkt.q),
                         detail::prefix_quantile(is_samples, k, vals.mkt.q)});
    }
    return trace;
}

struct ObligorDeltaRow {
    std::string id;
    double share = 0.0;
    double delta_ga = 0.0;
    bool applicable = true;  // false when no further downgrade exists
};

struct SensitivityReport {
    std::vector<std::pair<int, double>> ga_vs_count;  // obligors remaining, GA
    std::vector<ObligorDeltaRow> downgrade;
    std::vector<ObligorDeltaRow> weight_bump;
    double weight_bump_size = 0.01;
};

/// Sensitivity battery around a base portfolio using a caller-supplied GA
/// evaluator (analytic, NN or MC): GA versus obligor count (deleting
/// obligors from the back), GA response to a one-notch downgrade, and GA
/// response to a one-point exposure-share increase with renormalization.
///
/// The generic Portfolio type must support the Downgrade/Bump policies below.
template <typename Portfolio, typename Evaluator, typename Downgrade>
SensitivityReport sensitivity_battery(const Portfolio& base, Evaluator&& evaluate,
                                      Downgrade&& downgrade_obligor, double bump = 0.01) {
    SensitivityReport report;
    report.weight_bump_size = bump;
    const double ga_base = evaluate(base);
    const auto shares = exposure_shares(base.obligors);

    Portfolio reduced = base;
    report.ga_vs_count.emplace_back(static_cast<int>(reduced.obligors.size()), ga_base);
    while (reduced.obligors.size() > 2) {
        reduced.obligors.pop_back();
        report.ga_vs_count.emplace_back(static_cast<int>(reduced.obligors.size()),
                                        evaluate(reduced));
    }

    for (std::size_t n = 0; n < base.obligors.size(); ++n) {
        ObligorDeltaRow row;
        row.id = base.obligors[n].id;
        row.share = shares[n];
        Portfolio bumped = base;
        if (downgrade_obligor(bumped.obligors[n])) {
            row.delta_ga = evaluate(bumped) - ga_base;
        } else {
            row.applicable = false;
        }
        report.downgrade.push_back(row);
    }

    double total = 0.0;
    for (const auto& ob : base.obligors) total += ob.exposure;
    for (std::size_t n = 0; n < base.obligors.size(); ++n) {
        ObligorDeltaRow row;
        row.id = base.obligors[n].id;
        row.share = shares[n];
        Portfolio bumped = base;
        // Raise the obligor's share by `bump`; the share normalization
        // inside the engines renormalizes the rest.
        const double target_share = shares[n] + bump;
        bumped.obligors[n].exposure = target_share / (1.0 - target_share) *
                                      (total - base.obligors[n].exposure);
        row.delta_ga = evaluate(bumped) - ga_base;
        report.weight_bump.push_back(row);
    }
    return report;
}

/// One-notch downgrade policies. Actuarial obligors step to the next-worse
/// PD on the sampler support; MtM obligors step one grade toward default.
/// Returns false when the obligor is already at the worst grade.
inline bool downgrade_one_notch(ActuarialObligor& ob, const std::vector<double>& pd_support) {
    std::vector<double> sorted = pd_support;
    std::sort(sorted.begin(), sorted.end());
    for (double pd : sorted) {
        if (pd > ob.pd) {
            ob.pd = pd;
            return true;
        }
    }
    return false;
}

inline bool downgrade_one_notch(MtmObligor& ob) {
    if (ob.rating <= 1) return false;
    ob.rating -= 1;
    return true;
}

}  // namespace granular
