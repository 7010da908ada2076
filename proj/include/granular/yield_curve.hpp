#pragma once

#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

namespace granular {

/// Continuously compounded zero curve: flat rate or Nelson-Siegel-Svensson.
struct YieldCurve {
    enum class Kind { flat, nss };

    Kind kind = Kind::flat;
    double rate = 0.0;  // flat
    double beta0 = 0.0, beta1 = 0.0, beta2 = 0.0, beta3 = 0.0;
    double tau1 = 1.0, tau2 = 1.0;

    static YieldCurve flat(double r) {
        YieldCurve c;
        c.kind = Kind::flat;
        c.rate = r;
        return c;
    }

    static YieldCurve nss(double b0, double b1, double b2, double b3, double t1, double t2) {
        if (!(t1 > 0.0) || !(t2 > 0.0)) {
            throw std::invalid_argument("YieldCurve: tau parameters must be positive");
        }
        YieldCurve c;
        c.kind = Kind::nss;
        c.beta0 = b0;
        c.beta1 = b1;
        c.beta2 = b2;
        c.beta3 = b3;
        c.tau1 = t1;
        c.tau2 = t2;
        return c;
    }

    double yield(double t) const {
        if (kind == Kind::flat) return rate;
        const double x1 = t / tau1;
        const double x2 = t / tau2;
        const double f1 = decay_ratio(x1);          // (1 - e^-x)/x
        const double f2 = f1 - std::exp(-x1);
        const double f3 = decay_ratio(x2) - std::exp(-x2);
        return beta0 + beta1 * f1 + beta2 * f2 + beta3 * f3;
    }

    double discount(double t) const {
        if (t <= 0.0) return 1.0;
        return std::exp(-yield(t) * t);
    }

private:
    static double decay_ratio(double x) {
        if (std::fabs(x) < 1e-8) return 1.0 - 0.5 * x;
        return (1.0 - std::exp(-x)) / x;
    }
};

inline YieldCurve load_yield_curve(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot open yield curve file: " + path);
    nlohmann::json j;
    in >> j;
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "flat") {
        return YieldCurve::flat(j.at("rate").get<double>());
    }
    if (kind == "nelson-siegel-svensson") {
        return YieldCurve::nss(j.at("beta0").get<double>(), j.at("beta1").get<double>(),
                               j.at("beta2").get<double>(), j.at("beta3").get<double>(),
                               j.at("tau1").get<double>(), j.at("tau2").get<double>());
    }
    throw std::invalid_argument("unknown yield curve kind: " + kind);
}

}  // namespace granular
