#pragma once

#include <cmath>
#include <stdexcept>

#include "granular/portfolio.hpp"
#include "granular/random.hpp"

namespace granular {

/// First-order actuarial granularity adjustment in the reserve/capital
/// parameterization: R_n = ELGD PD, K_n = ELGD PD omega (x_q - 1),
/// C_n = (VLGD^2 + ELGD^2)/ELGD, delta = (x_q - 1)(xi + (1 - xi)/x_q).
inline double ga_first_order_actuarial(const ActuarialPortfolio& p, double xi, double q) {
    validate(p);
    const auto shares = exposure_shares(p);
    const double x_q = gamma_quantile(GammaFactorSpec{xi}, q);
    const double delta = (x_q - 1.0) * (xi + (1.0 - xi) / x_q);

    double k_star = 0.0;
    for (std::size_t n = 0; n < p.obligors.size(); ++n) {
        const auto& ob = p.obligors[n];
        k_star += shares[n] * ob.elgd * ob.pd * ob.omega * (x_q - 1.0);
    }
    if (!(k_star > 0.0)) {
        throw std::invalid_argument("ga_first_order_actuarial: aggregate UL capital is zero");
    }

    double ga = 0.0;
    for (std::size_t n = 0; n < p.obligors.size(); ++n) {
        const auto& ob = p.obligors[n];
        const double reserve = ob.elgd * ob.pd;
        const double capital = reserve * ob.omega * (x_q - 1.0);
        const double vlgd2 = p.lgd_nu * ob.elgd * (1.0 - ob.elgd);
        const double cn = (vlgd2 + ob.elgd * ob.elgd) / ob.elgd;
        const double ratio = vlgd2 / (ob.elgd * ob.elgd);
        const double kr = capital + reserve;
        ga += shares[n] * shares[n] *
              (delta * (cn * kr + kr * kr * ratio) - capital * (cn + 2.0 * kr * ratio));
    }
    return ga / (2.0 * k_star);
}

}  // namespace granular
