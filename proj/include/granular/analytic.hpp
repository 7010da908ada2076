#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "granular/analytic_actuarial.hpp"
#include "granular/cmetrics.hpp"
#include "granular/portfolio.hpp"
#include "granular/random.hpp"
#include "granular/special.hpp"

namespace granular {

struct PiDerivatives {
    double d1 = 0.0;
    double d2 = 0.0;
    double d3 = 0.0;
};

/// Closed-form derivatives of the conditional migration probability
/// pi_{ns}(x) in the factor, using phi'(u) = -u phi(u).
inline PiDerivatives pi_derivatives(const ThresholdTable& th, int g, int s, double rho, double x) {
    const double b = std::sqrt(rho / (1.0 - rho));
    const double inv_den = 1.0 / std::sqrt(1.0 - rho);
    const double sr = std::sqrt(rho);

    auto terms = [&](double thr, double& phi, double& u) {
        if (std::isinf(thr)) {
            phi = 0.0;
            u = thr > 0 ? 1.0 : -1.0;  // unused when phi == 0
            return;
        }
        u = (thr - x * sr) * inv_den;
        phi = norm_pdf(u);
    };

    const double upper = th.upper[g][s];
    const double lower = s > 0 ? th.upper[g][s - 1] : -std::numeric_limits<double>::infinity();
    double phi_u, u_u, phi_l, u_l;
    terms(upper, phi_u, u_u);
    terms(lower, phi_l, u_l);

    PiDerivatives d;
    d.d1 = -b * (phi_u - phi_l);
    d.d2 = -b * b * (u_u * phi_u - u_l * phi_l);
    d.d3 = b * b * b * ((1.0 - u_u * u_u) * phi_u - (1.0 - u_l * u_l) * phi_l);
    return d;
}

/// First-order MtM granularity adjustment evaluated at the loss-relevant
/// factor tail x* = Phi^{-1}(1-q):
///   GA = 0.5 e^{-rT} [ -x* G/H + (G'H - G H')/H^2 ],
/// with G = sum a^2 sigma^2, H = sum a mu'. The default state carries the
/// idiosyncratic recovery variance (F(T)/P0)^2 VLGD^2.
inline double ga_first_order_mtm(const MtmValuations& vals) {
    const double x = vals.x_tail;
    const int S1 = vals.n_states;

    double G = 0.0, Gp = 0.0, H = 0.0, Hp = 0.0;
    std::vector<double> pis;
    for (std::size_t n = 0; n < vals.obligors.size(); ++n) {
        const auto& ob = vals.obligors[n];
        const auto& bond = vals.bonds[n];
        conditional_migration(vals.th, ob.rating, x, ob.rho, pis);

        const double vlgd2 = vals.lgd_specs[n].nu * ob.elgd * (1.0 - ob.elgd);
        const double xi2_default =
            (bond.fwd_value_T / bond.p0) * (bond.fwd_value_T / bond.p0) * vlgd2;

        double mu = 0.0, mu1 = 0.0, mu2 = 0.0, second = 0.0, second1 = 0.0;
        for (int s = 0; s < S1; ++s) {
            const auto d = pi_derivatives(vals.th, ob.rating, s, ob.rho, x);
            const double lam = bond.lambda[s];
            const double xi2 = (s == 0) ? xi2_default : 0.0;
            mu += lam * pis[s];
            mu1 += lam * d.d1;
            mu2 += lam * d.d2;
            second += (xi2 + lam * lam) * pis[s];
            second1 += (xi2 + lam * lam) * d.d1;
        }
        const double sigma2 = second - mu * mu;
        const double dsigma2 = second1 - 2.0 * mu * mu1;

        const double a = vals.shares[n];
        G += a * a * sigma2;
        Gp += a * a * dsigma2;
        H += a * mu1;
        Hp += a * mu2;
    }
    if (std::fabs(H) < 1e-12) {
        throw std::runtime_error("ga_first_order_mtm: degenerate conditional-mean derivative");
    }
    return 0.5 * vals.discount_T * (-x * G / H + (Gp * H - G * Hp) / (H * H));
}

inline double ga_first_order_mtm(const MtmPortfolio& p, const MtmMarketParams& mkt,
                                 const TransitionMatrix& tm) {
    return ga_first_order_mtm(prepare_valuations(p, mkt, tm));
}

}  // namespace granular
