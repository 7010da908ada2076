#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "granular/portfolio.hpp"
#include "granular/random.hpp"

namespace granular {

struct EncodingMeta {
    ModelKind kind = ModelKind::actuarial;
    int max_obligors = 100;       // fixed encoding width N-bar
    double ga1st_scale = 10.0;    // scaling of the first-order-GA feature

    int input_width() const {
        return (kind == ModelKind::actuarial ? 4 : 6) * max_obligors + 1;
    }
};

/// Fully connected rectifier network mapping the padded portfolio encoding
/// to a scalar GA. Hidden layers use ReLU, the output layer is affine.
struct MlpModel {
    std::vector<int> layer_sizes;               // input, hidden..., 1
    std::vector<std::vector<double>> weights;   // per layer, row-major [out][in]
    std::vector<std::vector<double>> biases;    // per layer
    EncodingMeta meta;

    int n_layers() const { return static_cast<int>(weights.size()); }

    double forward(std::span<const double> x) const {
        if (static_cast<int>(x.size()) != layer_sizes.front()) {
            throw std::invalid_argument("MlpModel::forward: input width mismatch");
        }
        std::vector<double> act(x.begin(), x.end());
        std::vector<double> next;
        for (int l = 0; l < n_layers(); ++l) {
            const int in = layer_sizes[l];
            const int out = layer_sizes[l + 1];
            next.assign(out, 0.0);
            const double* w = weights[l].data();
            for (int o = 0; o < out; ++o) {
                double z = biases[l][o];
                const double* row = w + static_cast<std::size_t>(o) * in;
                for (int i = 0; i < in; ++i) z += row[i] * act[i];
                next[o] = (l + 1 < n_layers()) ? std::max(0.0, z) : z;
            }
            act.swap(next);
        }
        return act[0];
    }
};

/// He-style initialization scaled for rectifier layers.
inline MlpModel init_mlp(const std::vector<int>& layer_sizes, const EncodingMeta& meta,
                         RandomStream& stream) {
    if (layer_sizes.size() < 2 || layer_sizes.back() != 1) {
        throw std::invalid_argument("init_mlp: need input..hidden..1 layer sizes");
    }
    if (layer_sizes.front() != meta.input_width()) {
        throw std::invalid_argument("init_mlp: input width does not match encoding");
    }
    MlpModel m;
    m.layer_sizes = layer_sizes;
    m.meta = meta;
    for (std::size_t l = 0; l + 1 < layer_sizes.size(); ++l) {
        const int in = layer_sizes[l];
        const int out = layer_sizes[l + 1];
        const double scale = std::sqrt(2.0 / in);
        std::vector<double> w(static_cast<std::size_t>(in) * out);
        for (auto& v : w) v = stream.normal() * scale;
        m.weights.push_back(std::move(w));
        m.biases.emplace_back(out, 0.0);
    }
    return m;
}

struct MlpGradients {
    std::vector<std::vector<double>> weights;
    std::vector<std::vector<double>> biases;

    explicit MlpGradients(const MlpModel& m) { reset(m); }

    void reset(const MlpModel& m) {
        weights.clear();
        biases.clear();
        for (const auto& w : m.weights) weights.emplace_back(w.size(), 0.0);
        for (const auto& b : m.biases) biases.emplace_back(b.size(), 0.0);
    }
};

/// Accumulates the squared-error gradient for one sample into grads and
/// returns the squared error. Standard reverse-mode pass over the affine
/// layers with the rectifier mask.
inline double backprop(const MlpModel& m, std::span<const double> x, double target,
                       MlpGradients& grads) {
    const int L = m.n_layers();
    std::vector<std::vector<double>> activations(L + 1);
    std::vector<std::vector<double>> preacts(L);
    activations[0].assign(x.begin(), x.end());
    for (int l = 0; l < L; ++l) {
        const int in = m.layer_sizes[l];
        const int out = m.layer_sizes[l + 1];
        preacts[l].assign(out, 0.0);
        activations[l + 1].assign(out, 0.0);
        const double* w = m.weights[l].data();
        for (int o = 0; o < out; ++o) {
            double z = m.biases[l][o];
            const double* row = w + static_cast<std::size_t>(o) * in;
            for (int i = 0; i < in; ++i) z += row[i] * activations[l][i];
            preacts[l][o] = z;
            activations[l + 1][o] = (l + 1 < L) ? std::max(0.0, z) : z;
        }
    }

    const double err = activations[L][0] - target;
    std::vector<double> delta = {2.0 * err};
    for (int l = L - 1; l >= 0; --l) {
        const int in = m.layer_sizes[l];
        const int out = m.layer_sizes[l + 1];
        for (int o = 0; o < out; ++o) {
            const double d = delta[o];
            grads.biases[l][o] += d;
            double* grow = grads.weights[l].data() + static_cast<std::size_t>(o) * in;
            const double* act = activations[l].data();
            for (int i = 0; i < in; ++i) grow[i] += d * act[i];
        }
        if (l > 0) {
            std::vector<double> prev(in, 0.0);
            const double* w = m.weights[l].data();
            for (int o = 0; o < out; ++o) {
                const double d = delta[o];
                const double* row = w + static_cast<std::size_t>(o) * in;
                for (int i = 0; i < in; ++i) prev[i] += d * row[i];
            }
            for (int i = 0; i < in; ++i) {
                if (preacts[l - 1][i] <= 0.0) prev[i] = 0.0;
            }
            delta.swap(prev);
        }
    }
    return err * err;
}

/// Adam optimizer state (step 1e-4, moment decays 0.9 / 0.999 by default).
struct AdamState {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    long step = 0;
    std::vector<std::vector<double>> mw, vw, mb, vb;

    explicit AdamState(const MlpModel& m) {
        for (const auto& w : m.weights) {
            mw.emplace_back(w.size(), 0.0);
            vw.emplace_back(w.size(), 0.0);
        }
        for (const auto& b : m.biases) {
            mb.emplace_back(b.size(), 0.0);
            vb.emplace_back(b.size(), 0.0);
        }
    }

    void apply(MlpModel& m, const MlpGradients& grads, double batch_scale) {
        ++step;
        const double c1 = 1.0 - std::pow(beta1, step);
        const double c2 = 1.0 - std::pow(beta2, step);
        auto update = [&](std::vector<double>& p, const std::vector<double>& g,
                          std::vector<double>& mv, std::vector<double>& vv) {
            for (std::size_t i = 0; i < p.size(); ++i) {
                const double gi = g[i] * batch_scale;
                mv[i] = beta1 * mv[i] + (1.0 - beta1) * gi;
                vv[i] = beta2 * vv[i] + (1.0 - beta2) * gi * gi;
                p[i] -= lr * (mv[i] / c1) / (std::sqrt(vv[i] / c2) + eps);
            }
        };
        for (int l = 0; l < m.n_layers(); ++l) {
            update(m.weights[l], grads.weights[l], mw[l], vw[l]);
            update(m.biases[l], grads.biases[l], mb[l], vb[l]);
        }
    }
};

namespace detail {

// Canonical obligor order for the padded encoding: descending exposure
// share, remaining fields as deterministic tie-breakers.
inline std::vector<std::size_t> canonical_order(const std::vector<double>& shares,
                                                auto tie_less, std::size_t n) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        if (shares[a] != shares[b]) return shares[a] > shares[b];
        return tie_less(a, b);
    });
    return idx;
}

inline std::uint64_t fnv1a64(const unsigned char* data, std::size_t len) {
    std::uint64_t h = 1469598103934665603ULL;
    for (std::size_t i = 0; i < len; ++i) {
        h ^= data[i];
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::string base64_encode(const unsigned char* data, std::size_t len) {
    static const char table[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    std::string out;
    out.reserve((len + 2) / 3 * 4);
    for (std::size_t i = 0; i < len; i += 3) {
        std::uint32_t v = data[i] << 16;
        if (i + 1 < len) v |= data[i + 1] << 8;
        if (i + 2 < len) v |= data[i + 2];
        out.push_back(table[(v >> 18) & 63]);
        out.push_back(table[(v >> 12) & 63]);
        out.push_back(i + 1 < len ? table[(v >> 6) & 63] : '=');
        out.push_back(i + 2 < len ? table[v & 63] : '=');
    }
    return out;
}

inline std::vector<unsigned char> base64_decode(const std::string& s) {
    auto value = [](char c) -> int {
        if (c >= 'A' && c <= 'Z') return c - 'A';
        if (c >= 'a' && c <= 'z') return c - 'a' + 26;
        if (c >= '0' && c <= '9') return c - '0' + 52;
        if (c == '+') return 62;
        if (c == '/') return 63;
        return -1;
    };
    std::vector<unsigned char> out;
    out.reserve(s.size() / 4 * 3);
    std::uint32_t acc = 0;
    int bits = 0;
    for (char c : s) {
        if (c == '=') break;
        const int v = value(c);
        if (v < 0) throw std::runtime_error("base64: invalid character");
        acc = (acc << 6) | static_cast<std::uint32_t>(v);
        bits += 6;
        if (bits >= 8) {
            bits -= 8;
            out.push_back(static_cast<unsigned char>((acc >> bits) & 0xff));
        }
    }
    return out;
}

inline std::string encode_doubles(const std::vector<double>& v) {
    // Serialized little-endian; this code assumes a little-endian host.
    return base64_encode(reinterpret_cast<const unsigned char*>(v.data()),
                         v.size() * sizeof(double));
}

inline std::vector<double> decode_doubles(const std::string& s, std::size_t expected) {
    const auto bytes = base64_decode(s);
    if (bytes.size() != expected * sizeof(double)) {
        throw std::runtime_error("model file: array length mismatch");
    }
    std::vector<double> v(expected);
    std::memcpy(v.data(), bytes.data(), bytes.size());
    return v;
}

}  // namespace detail

/// Zero-padded actuarial feature vector (a, PD, ELGD, omega, GA1st) with
/// obligors canonically sorted by descending exposure share.
inline std::vector<double> encode_actuarial(const ActuarialPortfolio& p, double ga1st,
                                            const EncodingMeta& meta) {
    if (meta.kind != ModelKind::actuarial) {
        throw std::invalid_argument("encode_actuarial: encoding is not actuarial");
    }
    const std::size_t n = p.obligors.size();
    if (n > static_cast<std::size_t>(meta.max_obligors)) {
        throw std::invalid_argument("encode_actuarial: too many obligors for the encoding");
    }
    const auto shares = exposure_shares(p);
    const auto idx = detail::canonical_order(
        shares,
        [&](std::size_t a, std::size_t b) {
            const auto& oa = p.obligors[a];
            const auto& ob = p.obligors[b];
            return std::tie(oa.pd, oa.elgd, oa.omega) < std::tie(ob.pd, ob.elgd, ob.omega);
        },
        n);

    const int nbar = meta.max_obligors;
    std::vector<double> x(meta.input_width(), 0.0);
    for (std::size_t j = 0; j < n; ++j) {
        const auto& ob = p.obligors[idx[j]];
        x[j] = shares[idx[j]];
        x[nbar + j] = ob.pd;
        x[2 * nbar + j] = ob.elgd;
        x[3 * nbar + j] = ob.omega;
    }
    x[4 * nbar] = ga1st * meta.ga1st_scale;
    return x;
}

/// Zero-padded MtM feature vector (a, ELGD, rho, c, g/S, tau, GA1st).
inline std::vector<double> encode_mtm(const MtmPortfolio& p, int n_grades, double ga1st,
                                      const EncodingMeta& meta) {
    if (meta.kind != ModelKind::mtm) {
        throw std::invalid_argument("encode_mtm: encoding is not mtm");
    }
    const std::size_t n = p.obligors.size();
    if (n > static_cast<std::size_t>(meta.max_obligors)) {
        throw std::invalid_argument("encode_mtm: too many obligors for the encoding");
    }
    const auto shares = exposure_shares(p);
    const auto idx = detail::canonical_order(
        shares,
        [&](std::size_t a, std::size_t b) {
            const auto& oa = p.obligors[a];
            const auto& ob = p.obligors[b];
            return std::tie(oa.rating, oa.elgd, oa.rho, oa.coupon, oa.maturity) <
                   std::tie(ob.rating, ob.elgd, ob.rho, ob.coupon, ob.maturity);
        },
        n);

    const int nbar = meta.max_obligors;
    std::vector<double> x(meta.input_width(), 0.0);
    for (std::size_t j = 0; j < n; ++j) {
        const auto& ob = p.obligors[idx[j]];
        x[j] = shares[idx[j]];
        x[nbar + j] = ob.elgd;
        x[2 * nbar + j] = ob.rho;
        x[3 * nbar + j] = ob.coupon;
        x[4 * nbar + j] = static_cast<double>(ob.rating) / n_grades;
        x[5 * nbar + j] = ob.maturity;
    }
    x[6 * nbar] = ga1st * meta.ga1st_scale;
    return x;
}

/// Recovers the non-padding fields of an encoded actuarial portfolio; the
/// encoding is a bijection on canonically sorted inputs.
inline ActuarialPortfolio decode_actuarial(std::span<const double> x, const EncodingMeta& meta,
                                           double nu = 0.25) {
    const int nbar = meta.max_obligors;
    ActuarialPortfolio p;
    p.lgd_nu = nu;
    for (int j = 0; j < nbar; ++j) {
        if (x[j] == 0.0) break;
        ActuarialObligor ob;
        ob.id = "ob" + std::to_string(j + 1);
        ob.exposure = x[j];
        ob.pd = x[nbar + j];
        ob.elgd = x[2 * nbar + j];
        ob.omega = x[3 * nbar + j];
        p.obligors.push_back(ob);
    }
    return p;
}

inline constexpr int kModelFormatVersion = 1;

inline void save_model(const MlpModel& m, const std::string& path) {
    nlohmann::json j;
    j["version"] = kModelFormatVersion;
    j["kind"] = to_string(m.meta.kind);
    j["max_obligors"] = m.meta.max_obligors;
    j["ga1st_scale"] = m.meta.ga1st_scale;
    j["layer_sizes"] = m.layer_sizes;
    std::uint64_t checksum = 1469598103934665603ULL;
    auto fold = [&](const std::vector<double>& v) {
        const auto* bytes = reinterpret_cast<const unsigned char*>(v.data());
        for (std::size_t i = 0; i < v.size() * sizeof(double); ++i) {
            checksum ^= bytes[i];
            checksum *= 1099511628211ULL;
        }
    };
    std::vector<std::string> wb64, bb64;
    for (const auto& w : m.weights) {
        fold(w);
        wb64.push_back(detail::encode_doubles(w));
    }
    for (const auto& b : m.biases) {
        fold(b);
        bb64.push_back(detail::encode_doubles(b));
    }
    j["weights"] = wb64;
    j["biases"] = bb64;
    char hex[17];
    std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(checksum));
    j["checksum"] = std::string(hex);
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write model file: " + path);
    out << j.dump(1);
}

inline MlpModel load_model(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open model file: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw std::runtime_error(std::string("model file: invalid JSON (") + e.what() + ")");
    }
    if (j.at("version").get<int>() != kModelFormatVersion) {
        throw std::runtime_error("model file: version mismatch");
    }
    MlpModel m;
    const std::string kind = j.at("kind").get<std::string>();
    m.meta.kind = (kind == "actuarial") ? ModelKind::actuarial : ModelKind::mtm;
    m.meta.max_obligors = j.at("max_obligors").get<int>();
    m.meta.ga1st_scale = j.at("ga1st_scale").get<double>();
    m.layer_sizes = j.at("layer_sizes").get<std::vector<int>>();
    const auto wb64 = j.at("weights").get<std::vector<std::string>>();
    const auto bb64 = j.at("biases").get<std::vector<std::string>>();
    if (wb64.size() + 1 != m.layer_sizes.size() || bb64.size() != wb64.size()) {
        throw std::runtime_error("model file: layer count mismatch");
    }
    for (std::size_t l = 0; l + 1 < m.layer_sizes.size(); ++l) {
        const auto in_w = static_cast<std::size_t>(m.layer_sizes[l]);
        const auto out_w = static_cast<std::size_t>(m.layer_sizes[l + 1]);
        m.weights.push_back(detail::decode_doubles(wb64[l], in_w * out_w));
        m.biases.push_back(detail::decode_doubles(bb64[l], out_w));
    }
    std::uint64_t checksum = 1469598103934665603ULL;
    auto fold = [&](const std::vector<double>& v) {
        const auto* bytes = reinterpret_cast<const unsigned char*>(v.data());
        for (std::size_t i = 0; i < v.size() * sizeof(double); ++i) {
            checksum ^= bytes[i];
            checksum *= 1099511628211ULL;
        }
    };
    for (const auto& w : m.weights) fold(w);
    for (const auto& b : m.biases) fold(b);
    char hex[17];
    std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(checksum));
    if (j.at("checksum").get<std::string>() != hex) {
        throw std::runtime_error("model file: checksum failure");
    }
    return m;
}

}  // namespace granular
