#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace granular {

/// Signals that a root could not be bracketed after bounded expansion.
class NoSignChangeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct RootOptions {
    double tol = 1e-10;
    int max_iter = 200;
    int max_expansions = 64;
};

/// Root of a continuous monotone function on [lo, hi] by a hybrid
/// secant/bisection scheme. The bracket is expanded geometrically when the
/// initial endpoints do not straddle a sign change.
template <typename F>
double solve_monotone(F&& f, double lo, double hi, const RootOptions& opt = {}) {
    if (lo > hi) std::swap(lo, hi);
    double flo = f(lo);
    double fhi = f(hi);
    if (std::fabs(flo) <= opt.tol) return lo;
    if (std::fabs(fhi) <= opt.tol) return hi;

    int expansions = 0;
    while (flo * fhi > 0.0) {
        if (++expansions > opt.max_expansions) {
            throw NoSignChangeError("solve_monotone: no sign change after bracket expansion");
        }
        const double width = std::max(hi - lo, 1e-8);
        if (std::fabs(flo) < std::fabs(fhi)) {
            lo -= width;
            flo = f(lo);
        } else {
            hi += width;
            fhi = f(hi);
        }
    }

    double a = lo, fa = flo;
    double b = hi, fb = fhi;
    for (int iter = 0; iter < opt.max_iter; ++iter) {
        double c;
        if (std::fabs(fb - fa) > 0.0) {
            c = b - fb * (b - a) / (fb - fa);  // secant step
            if (!(c > std::min(a, b) && c < std::max(a, b))) c = 0.5 * (a + b);
        } else {
            c = 0.5 * (a + b);
        }
        const double fc = f(c);
        if (std::fabs(fc) <= opt.tol || std::fabs(b - a) <= opt.tol) return c;
        if (fa * fc <= 0.0) {
            b = c;
            fb = fc;
        } else {
            a = c;
            fa = fc;
        }
    }
    return 0.5 * (a + b);
}

}  // namespace granular
