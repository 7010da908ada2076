#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace granular {

/// Raised when an input file violates its schema or a field is out of range.
class SchemaError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

enum class ModelKind { actuarial, mtm };

inline const char* to_string(ModelKind kind) {
    return kind == ModelKind::actuarial ? "actuarial" : "mtm";
}

struct ActuarialObligor {
    std::string id;
    double exposure = 0.0;  // EAD, currency units
    double pd = 0.0;        // unconditional default probability
    double elgd = 0.45;     // expected loss given default
    double omega = 0.0;     // factor loading
};

struct MtmObligor {
    std::string id;
    double exposure = 0.0;  // current market value
    int rating = 1;         // grade index into the transition matrix, 1..S
    double elgd = 0.45;
    double rho = 0.3;       // asset correlation
    double coupon = 0.0;    // annual coupon rate
    double maturity = 1.0;  // years
};

struct ActuarialPortfolio {
    std::vector<ActuarialObligor> obligors;
    double lgd_nu = 0.25;
};

struct MtmPortfolio {
    std::vector<MtmObligor> obligors;
    double lgd_nu = 0.25;
};

/// Row-stochastic rating migration table. Index 0 is the absorbing default
/// state; indices 1..S run from the worst non-default grade to the best.
struct TransitionMatrix {
    std::vector<std::string> labels;          // size S+1, labels[0] = default
    std::vector<std::vector<double>> probs;   // probs[g][s], fractions

    int n_states() const { return static_cast<int>(labels.size()); }  // S+1
    int n_grades() const { return n_states() - 1; }                   // S

    int grade_index(const std::string& label) const {
        for (std::size_t i = 0; i < labels.size(); ++i) {
            if (labels[i] == label) return static_cast<int>(i);
        }
        throw SchemaError("unknown rating label: " + label);
    }

    /// Unconditional one-period default probability of grade g.
    double default_prob(int g) const { return probs.at(g).at(0); }
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    std::stringstream ss(line);
    while (std::getline(ss, field, ',')) {
        while (!field.empty() && (field.back() == '\r' || field.back() == ' ')) field.pop_back();
        std::size_t start = 0;
        while (start < field.size() && field[start] == ' ') ++start;
        out.push_back(field.substr(start));
    }
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

inline double parse_double(const std::string& s, const std::string& context) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(s, &pos);
        if (pos != s.size()) throw SchemaError("trailing characters in numeric field: " + context);
        return v;
    } catch (const SchemaError&) {
        throw;
    } catch (const std::exception&) {
        throw SchemaError("cannot parse '" + s + "' as a number (" + context + ")");
    }
}

inline std::vector<std::string> read_lines(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw SchemaError("cannot open file: " + path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        lines.push_back(line);
    }
    return lines;
}

}  // namespace detail

template <typename Obligor>
std::vector<double> exposure_shares(const std::vector<Obligor>& obligors) {
    double total = 0.0;
    for (const auto& ob : obligors) total += ob.exposure;
    if (!(total > 0.0)) throw SchemaError("total exposure must be positive");
    std::vector<double> shares(obligors.size());
    for (std::size_t i = 0; i < obligors.size(); ++i) shares[i] = obligors[i].exposure / total;
    return shares;
}

inline std::vector<double> exposure_shares(const ActuarialPortfolio& p) {
    return exposure_shares(p.obligors);
}
inline std::vector<double> exposure_shares(const MtmPortfolio& p) {
    return exposure_shares(p.obligors);
}

struct LoadOptions {
    std::size_t max_obligors = 100;
    double lgd_nu = 0.25;
};

inline void validate(const ActuarialPortfolio& p) {
    if (p.obligors.empty()) throw SchemaError("empty portfolio");
    if (!(p.lgd_nu >= 0.0 && p.lgd_nu < 1.0)) throw SchemaError("lgd_nu must lie in [0,1)");
    for (const auto& ob : p.obligors) {
        if (!(ob.exposure > 0.0)) throw SchemaError("exposure must be positive: " + ob.id);
        if (!(ob.pd >= 0.0 && ob.pd <= 1.0)) throw SchemaError("pd out of [0,1]: " + ob.id);
        if (!(ob.elgd > 0.0 && ob.elgd < 1.0)) throw SchemaError("elgd out of (0,1): " + ob.id);
        if (!(ob.omega >= 0.0 && ob.omega <= 1.0)) throw SchemaError("omega out of [0,1]: " + ob.id);
    }
}

inline void validate(const MtmPortfolio& p, int n_grades) {
    if (p.obligors.empty()) throw SchemaError("empty portfolio");
    if (!(p.lgd_nu >= 0.0 && p.lgd_nu < 1.0)) throw SchemaError("lgd_nu must lie in [0,1)");
    for (const auto& ob : p.obligors) {
        if (!(ob.exposure > 0.0)) throw SchemaError("exposure must be positive: " + ob.id);
        if (ob.rating < 1 || ob.rating > n_grades) throw SchemaError("rating index out of range: " + ob.id);
        if (!(ob.elgd > 0.0 && ob.elgd < 1.0)) throw SchemaError("elgd out of (0,1): " + ob.id);
        if (!(ob.rho > 0.0 && ob.rho < 1.0)) throw SchemaError("rho out of (0,1): " + ob.id);
        if (ob.coupon < 0.0) throw SchemaError("coupon must be nonnegative: " + ob.id);
        if (!(ob.maturity > 0.0)) throw SchemaError("maturity must be positive: " + ob.id);
    }
}

inline ActuarialPortfolio load_actuarial_portfolio(const std::string& path, const LoadOptions& opt = {}) {
    const auto lines = detail::read_lines(path);
    if (lines.empty()) throw SchemaError("empty portfolio file: " + path);
    const auto header = detail::split_csv_line(lines[0]);
    const std::vector<std::string> expected = {"obligor_id", "exposure", "pd", "elgd", "omega"};
    if (header != expected) {
        throw SchemaError("actuarial portfolio header must be obligor_id,exposure,pd,elgd,omega");
    }
    ActuarialPortfolio p;
    p.lgd_nu = opt.lgd_nu;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        const auto f = detail::split_csv_line(lines[i]);
        if (f.size() != 5) throw SchemaError("row " + std::to_string(i) + ": expected 5 columns");
        ActuarialObligor ob;
        ob.id = f[0];
        ob.exposure = detail::parse_double(f[1], "exposure");
        ob.pd = detail::parse_double(f[2], "pd");
        ob.elgd = detail::parse_double(f[3], "elgd");
        ob.omega = detail::parse_double(f[4], "omega");
        p.obligors.push_back(ob);
    }
    if (p.obligors.size() > opt.max_obligors) {
        throw SchemaError("portfolio exceeds the configured obligor maximum");
    }
    validate(p);
    return p;
}

inline MtmPortfolio load_mtm_portfolio(const std::string& path, const TransitionMatrix& tm,
                                       const LoadOptions& opt = {}) {
    const auto lines = detail::read_lines(path);
    if (lines.empty()) throw SchemaError("empty portfolio file: " + path);
    const auto header = detail::split_csv_line(lines[0]);
    const std::vector<std::string> expected = {"obligor_id", "exposure", "rating",
                                               "elgd",       "rho",      "coupon",
                                               "maturity"};
    if (header != expected) {
        throw SchemaError(
            "mtm portfolio header must be obligor_id,exposure,rating,elgd,rho,coupon,maturity");
    }
    MtmPortfolio p;
    p.lgd_nu = opt.lgd_nu;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        const auto f = detail::split_csv_line(lines[i]);
        if (f.size() != 7) throw SchemaError("row " + std::to_string(i) + ": expected 7 columns");
        MtmObligor ob;
        ob.id = f[0];
        ob.exposure = detail::parse_double(f[1], "exposure");
        ob.rating = tm.grade_index(f[2]);
        if (ob.rating == 0) throw SchemaError("obligor cannot start in the default state: " + ob.id);
        ob.elgd = detail::parse_double(f[3], "elgd");
        ob.rho = detail::parse_double(f[4], "rho");
        ob.coupon = detail::parse_double(f[5], "coupon");
        ob.maturity = detail::parse_double(f[6], "maturity");
        p.obligors.push_back(ob);
    }
    if (p.obligors.size() > opt.max_obligors) {
        throw SchemaError("portfolio exceeds the configured obligor maximum");
    }
    validate(p, tm.n_grades());
    return p;
}

inline void save_actuarial_portfolio(const ActuarialPortfolio& p, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write file: " + path);
    out.precision(17);
    out << "obligor_id,exposure,pd,elgd,omega\n";
    for (const auto& ob : p.obligors) {
        out << ob.id << ',' << ob.exposure << ',' << ob.pd << ',' << ob.elgd << ',' << ob.omega
            << '\n';
    }
}

inline void save_mtm_portfolio(const MtmPortfolio& p, const TransitionMatrix& tm,
                               const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write file: " + path);
    out.precision(17);
    out << "obligor_id,exposure,rating,elgd,rho,coupon,maturity\n";
    for (const auto& ob : p.obligors) {
        out << ob.id << ',' << ob.exposure << ',' << tm.labels.at(ob.rating) << ',' << ob.elgd
            << ',' << ob.rho << ',' << ob.coupon << ',' << ob.maturity << '\n';
    }
}

/// Loads a transition matrix CSV: header row and leading column carry grade
/// labels, the body is in percent, non-default columns ordered best to worst.
/// Rows are renormalized when their sum is within 1e-4 of one. Internally the
/// default grade moves to index 0 and the non-default grades are reversed so
/// that index 1 is the worst grade.
inline TransitionMatrix load_transition_matrix(const std::string& path,
                                               const std::string& default_label = "D") {
    const auto lines = detail::read_lines(path);
    if (lines.size() < 2) throw SchemaError("transition matrix file too short: " + path);
    auto header = detail::split_csv_line(lines[0]);
    if (header.size() < 3) throw SchemaError("transition matrix needs at least two grades");
    if (!header[0].empty()) throw SchemaError("transition matrix header must start with an empty cell");
    const std::vector<std::string> col_labels(header.begin() + 1, header.end());
    const std::size_t n = col_labels.size();
    if (lines.size() != n + 1) throw SchemaError("transition matrix must be square");

    // Raw matrix in file column order, rows aligned to columns by label.
    std::vector<std::vector<double>> raw(n, std::vector<double>(n, 0.0));
    std::vector<bool> seen(n, false);
    for (std::size_t i = 1; i < lines.size(); ++i) {
        const auto f = detail::split_csv_line(lines[i]);
        if (f.size() != n + 1) throw SchemaError("row " + std::to_string(i) + ": wrong column count");
        const auto it = std::find(col_labels.begin(), col_labels.end(), f[0]);
        if (it == col_labels.end()) throw SchemaError("row label not in header: " + f[0]);
        const std::size_t r = static_cast<std::size_t>(it - col_labels.begin());
        if (seen[r]) throw SchemaError("duplicate row label: " + f[0]);
        seen[r] = true;
        for (std::size_t j = 0; j < n; ++j) {
            const double pct = detail::parse_double(f[j + 1], "transition probability");
            if (pct < 0.0) throw SchemaError("negative transition probability in row " + f[0]);
            raw[r][j] = pct / 100.0;
        }
    }

    const auto def_it = std::find(col_labels.begin(), col_labels.end(), default_label);
    if (def_it == col_labels.end()) throw SchemaError("default grade label not found: " + default_label);
    const std::size_t def = static_cast<std::size_t>(def_it - col_labels.begin());

    // Internal order: default first, then non-default grades worst to best.
    std::vector<std::size_t> order;
    order.push_back(def);
    for (std::size_t j = n; j-- > 0;) {
        if (j != def) order.push_back(j);
    }

    TransitionMatrix tm;
    tm.labels.reserve(n);
    tm.probs.assign(n, std::vector<double>(n, 0.0));
    for (std::size_t gi = 0; gi < n; ++gi) tm.labels.push_back(col_labels[order[gi]]);
    for (std::size_t gi = 0; gi < n; ++gi) {
        double sum = 0.0;
        for (std::size_t sj = 0; sj < n; ++sj) {
            tm.probs[gi][sj] = raw[order[gi]][order[sj]];
            sum += tm.probs[gi][sj];
        }
        if (std::fabs(sum - 1.0) > 1e-4 + 1e-12) {
            throw SchemaError("row sum violation for grade " + tm.labels[gi]);
        }
        for (auto& v : tm.probs[gi]) v /= sum;
    }
    if (std::fabs(tm.probs[0][0] - 1.0) > 1e-9) {
        throw SchemaError("default row must be absorbing");
    }
    return tm;
}

inline void save_transition_matrix(const TransitionMatrix& tm, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write file: " + path);
    out.precision(17);
    const int n = tm.n_states();
    // File order: best grade first, default last (the loading convention).
    std::vector<int> order;
    for (int g = n - 1; g >= 1; --g) order.push_back(g);
    order.push_back(0);
    for (int j : order) out << ',' << tm.labels[j];
    out << '\n';
    for (int gi : order) {
        out << tm.labels[gi];
        for (int sj : order) out << ',' << tm.probs[gi][sj] * 100.0;
        out << '\n';
    }
}

}  // namespace granular
