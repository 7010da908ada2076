#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "granular/analytic.hpp"
#include "granular/cmetrics.hpp"
#include "granular/crplus.hpp"
#include "granular/mlp.hpp"
#include "granular/parallel.hpp"
#include "granular/sampler.hpp"

namespace granular {

// Substream tags for the seed families used around training.
inline constexpr std::uint64_t kTagSamplePortfolio = 0x53414d50;
inline constexpr std::uint64_t kTagLabelEngine = 0x4c41424c;
inline constexpr std::uint64_t kTagShuffle = 0x53485546;
inline constexpr std::uint64_t kTagInit = 0x494e4954;
inline constexpr std::uint64_t kTagEval = 0x4556414c;

struct TrainConfig {
    int n_iter = 10000;                 // labeled portfolios to generate
    std::size_t sims_per_label = 1000000;
    double learning_rate = 1e-4;
    double lr_decay = 1.0;              // per-epoch multiplier
    int epochs = 300;
    int batch_size = 32;
    std::uint64_t seed = 0;
    std::vector<int> hidden = {512, 512, 512, 512, 512};
    int max_obligors = 100;
    int threads = 1;
    std::string label_cache;            // optional JSONL path, resumable
    std::string train_log;              // optional CSV iter,loss,label,pred
    double validation_fraction = 0.05;
    double divergence_limit = 1e6;
    double max_skip_fraction = 0.01;
};

struct LabeledSample {
    std::vector<double> features;
    double label = 0.0;
    double ga1st = 0.0;
    int n_obligors = 0;
};

struct TrainResult {
    MlpModel model;
    double best_val_mse = 0.0;
    double final_train_mse = 0.0;
    int n_samples = 0;
    int skipped = 0;
};

namespace detail {

inline std::uint64_t fnv1a64_str(const std::string& s) {
    return fnv1a64(reinterpret_cast<const unsigned char*>(s.data()), s.size());
}

inline std::string train_config_hash(const TrainConfig& cfg, const SamplerConfig& scfg,
                                     ModelKind kind, double q, const std::string& engine_tag) {
    std::string key = to_string(kind);
    key += '|' + engine_tag;
    key += '|' + std::to_string(cfg.seed) + '|' + std::to_string(cfg.sims_per_label);
    key += '|' + std::to_string(cfg.max_obligors) + '|' + std::to_string(q);
    key += '|' + std::to_string(scfg.n_min) + ':' + std::to_string(scfg.n_max);
    key += '|' + std::to_string(scfg.theta_min) + ':' + std::to_string(scfg.theta_max);
    key += '|' + std::to_string(scfg.nu);
    for (double v : scfg.pd_support) key += ',' + std::to_string(v);
    for (double v : scfg.elgd_choices) key += ',' + std::to_string(v);
    char hex[17];
    std::snprintf(hex, sizeof hex, "%016llx",
                  static_cast<unsigned long long>(fnv1a64_str(key)));
    return hex;
}

inline std::vector<LabeledSample> read_label_cache(const std::string& path,
                                                   const std::string& config_hash, int n_needed) {
    std::vector<LabeledSample> out;
    std::ifstream in(path);
    if (!in) return out;
    std::string line;
    if (!std::getline(in, line)) return out;
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(line);
    } catch (const std::exception&) {
        return out;
    }
    if (!header.contains("config_hash") || header["config_hash"] != config_hash) return out;
    while (static_cast<int>(out.size()) < n_needed && std::getline(in, line)) {
        if (line.empty()) continue;
        nlohmann::json row;
        try {
            row = nlohmann::json::parse(line);
        } catch (const std::exception&) {
            break;
        }
        LabeledSample s;
        s.features = row.at("x").get<std::vector<double>>();
        s.label = row.at("y").get<double>();
        s.ga1st = row.at("g").get<double>();
        s.n_obligors = row.at("n").get<int>();
        out.push_back(std::move(s));
    }
    return out;
}

inline void write_label_cache(const std::string& path, const std::string& config_hash,
                              const std::vector<LabeledSample>& samples) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write label cache: " + path);
    nlohmann::json header;
    header["config_hash"] = config_hash;
    out << header.dump() << '\n';
    for (const auto& s : samples) {
        nlohmann::json row;
        row["x"] = s.features;
        row["y"] = s.label;
        row["g"] = s.ga1st;
        row["n"] = s.n_obligors;
        out << row.dump() << '\n';
    }
}

}  // namespace detail

/// Backprop training over a fixed labeled set: mini-batch Adam with a
/// deterministic shuffle, a 95/5 train/validation split and best-checkpoint
/// selection on validation MSE.
inline TrainResult train_on_samples(const std::vector<LabeledSample>& samples,
                                    const TrainConfig& cfg, const EncodingMeta& meta) {
    if (samples.empty()) throw std::invalid_argument("train_on_samples: no labeled samples");

    std::vector<int> layers = {meta.input_width()};
    for (int h : cfg.hidden) layers.push_back(h);
    layers.push_back(1);

    RandomStream init_stream(derive_seed(cfg.seed, kTagInit));
    MlpModel model = init_mlp(layers, meta, init_stream);

    // Every k-th sample is held out for validation.
    const int val_stride =
        cfg.validation_fraction > 0.0
            ? std::max(2, static_cast<int>(std::lround(1.0 / cfg.validation_fraction)))
            : 0;
    std::vector<std::size_t> train_idx, val_idx;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (val_stride > 0 && static_cast<int>(i % val_stride) == val_stride - 1) {
            val_idx.push_back(i);
        } else {
            train_idx.push_back(i);
        }
    }
    if (train_idx.empty()) train_idx.push_back(0);

    auto mse_on = [&](const MlpModel& m, const std::vector<std::size_t>& idx) {
        if (idx.empty()) return 0.0;
        double sum = 0.0;
        for (std::size_t i : idx) {
            const double err = m.forward(samples[i].features) - samples[i].label;
            sum += err * err;
        }
        return sum / static_cast<double>(idx.size());
    };

    std::ofstream log;
    if (!cfg.train_log.empty()) {
        log.open(cfg.train_log);
        if (!log) throw std::runtime_error("cannot write train log: " + cfg.train_log);
        log << "iter,loss,label,pred\n";
        log.precision(12);
    }

    AdamState adam(model);
    MlpGradients grads(model);
    MlpModel best = model;
    double best_val = mse_on(model, val_idx.empty() ? train_idx : val_idx);
    long global_step = 0;
    double last_train_mse = 0.0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        adam.lr = cfg.learning_rate * std::pow(cfg.lr_decay, epoch);
        RandomStream shuffle_stream(derive_seed(cfg.seed, kTagShuffle, epoch));
        std::vector<std::size_t> order = train_idx;
        for (std::size_t i = order.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(shuffle_stream.uniform_int(0, i - 1));
            std::swap(order[i - 1], order[j]);
        }

        double epoch_loss = 0.0;
        std::size_t pos = 0;
        while (pos < order.size()) {
            const std::size_t end = std::min(order.size(), pos + cfg.batch_size);
            grads.reset(model);
            double batch_loss = 0.0;
            for (std::size_t b = pos; b < end; ++b) {
                batch_loss += backprop(model, samples[order[b]].features,
                                       samples[order[b]].label, grads);
            }
            const double count = static_cast<double>(end - pos);
            batch_loss /= count;
            if (!std::isfinite(batch_loss) || batch_loss > cfg.divergence_limit) {
                throw std::runtime_error("train: loss diverged at step " +
                                         std::to_string(global_step));
            }
            adam.apply(model, grads, 1.0 / count);
            ++global_step;
            epoch_loss += batch_loss * count;
            if (log.is_open()) {
                const auto& first = samples[order[pos]];
                log << global_step << ',' << batch_loss << ',' << first.label << ','
                    << model.forward(first.features) << '\n';
            }
            pos = end;
        }
        last_train_mse = epoch_loss / static_cast<double>(order.size());

        const double val = mse_on(model, val_idx.empty() ? train_idx : val_idx);
        if (val < best_val) {
            best_val = val;
            best = model;
        }
    }

    TrainResult result;
    result.model = std::move(best);
    result.best_val_mse = best_val;
    result.final_train_mse = last_train_mse;
    result.n_samples = static_cast<int>(samples.size());
    return result;
}

/// Labels one sampled actuarial portfolio: exact GA via the IS engine plus
/// the first-order feature.
inline LabeledSample label_actuarial(const ActuarialPortfolio& p, const CrPlusParams& params,
                                     const EncodingMeta& meta) {
    LabeledSample s;
    s.label = ga_exact_actuarial(p, params).ga;
    s.ga1st = ga_first_order_actuarial(p, params.xi, params.q);
    s.features = encode_actuarial(p, s.ga1st, meta);
    s.n_obligors = static_cast<int>(p.obligors.size());
    return s;
}

inline LabeledSample label_mtm(const MtmPortfolio& p, const MtmMarketParams& mkt,
                               const TransitionMatrix& tm, const EncodingMeta& meta) {
    const auto vals = prepare_valuations(p, mkt, tm);
    LabeledSample s;
    s.label = ga_exact_mtm(vals).ga;
    s.ga1st = ga_first_order_mtm(vals);
    s.features = encode_mtm(p, tm.n_grades(), s.ga1st, meta);
    s.n_obligors = static_cast<int>(p.obligors.size());
    return s;
}

namespace detail {

// Generates labels for portfolio indices [0, n_iter). Portfolios are keyed
// by index so worker scheduling cannot change the dataset; failed labels
// are skipped up to the configured fraction.
template <typename LabelFn>
std::vector<LabeledSample> generate_labels(const TrainConfig& cfg, int n_existing,
                                           LabelFn&& label_fn) {
    const int n_new = cfg.n_iter - n_existing;
    if (n_new <= 0) return {};
    std::vector<LabeledSample> out(n_new);
    std::vector<std::uint8_t> ok(n_new, 0);
    parallel_chunks(static_cast<std::size_t>(n_new), 1, cfg.threads,
                    [&](std::size_t chunk, std::size_t begin, std::size_t) {
                        (void)chunk;
                        const int index = n_existing + static_cast<int>(begin);
                        try {
                            out[begin] = label_fn(index);
                            ok[begin] = 1;
                        } catch (const std::exception&) {
                            ok[begin] = 0;
                        }
                    });
    std::vector<LabeledSample> kept;
    kept.reserve(n_new);
    int skipped = 0;
    for (int i = 0; i < n_new; ++i) {
        if (ok[i]) {
            kept.push_back(std::move(out[i]));
        } else {
            ++skipped;
        }
    }
    if (skipped > cfg.max_skip_fraction * cfg.n_iter) {
        throw std::runtime_error("train: too many label failures (" + std::to_string(skipped) +
                                 ")");
    }
    return kept;
}

}  // namespace detail

/// Actuarial training loop: sample portfolio, label with the IS engine,
/// regress the GA onto the padded encoding. Labels are cached to disk when
/// a cache path is configured.
inline TrainResult train_actuarial(const TrainConfig& cfg, const SamplerConfig& scfg,
                                   const CrPlusParams& engine) {
    EncodingMeta meta{ModelKind::actuarial, cfg.max_obligors};
    const std::string hash = detail::train_config_hash(
        cfg, scfg, ModelKind::actuarial, engine.q, "xi=" + std::to_string(engine.xi));

    std::vector<LabeledSample> samples;
    if (!cfg.label_cache.empty()) {
        samples = detail::read_label_cache(cfg.label_cache, hash, cfg.n_iter);
    }
    const int existing = static_cast<int>(samples.size());
    auto fresh = detail::generate_labels(cfg, existing, [&](int index) {
        RandomStream stream(derive_seed(cfg.seed, kTagSamplePortfolio, index));
        const auto p = sample_actuarial_portfolio(scfg, stream);
        CrPlusParams params = engine;
        params.n_sims = cfg.sims_per_label;
        params.seed = derive_seed(cfg.seed, kTagLabelEngine, index);
        params.threads = 1;
        return label_actuarial(p, params, meta);
    });
    const int skipped = (cfg.n_iter - existing) - static_cast<int>(fresh.size());
    for (auto& s : fresh) samples.push_back(std::move(s));
    if (!cfg.label_cache.empty()) {
        detail::write_label_cache(cfg.label_cache, hash, samples);
    }

    TrainResult result = train_on_samples(samples, cfg, meta);
    result.skipped = skipped;
    return result;
}

inline TrainResult train_mtm(const TrainConfig& cfg, const SamplerConfig& scfg,
                             const MtmMarketParams& mkt, const TransitionMatrix& tm) {
    EncodingMeta meta{ModelKind::mtm, cfg.max_obligors};
    const std::string hash = detail::train_config_hash(
        cfg, scfg, ModelKind::mtm, mkt.q, "psi=" + std::to_string(mkt.sharpe));

    std::vector<LabeledSample> samples;
    if (!cfg.label_cache.empty()) {
        samples = detail::read_label_cache(cfg.label_cache, hash, cfg.n_iter);
    }
    const int existing = static_cast<int>(samples.size());
    auto fresh = detail::generate_labels(cfg, existing, [&](int index) {
        RandomStream stream(derive_seed(cfg.seed, kTagSamplePortfolio, index));
        const auto p = sample_mtm_portfolio(scfg, tm, stream, mkt.accrual);
        MtmMarketParams params = mkt;
        params.n_sims = cfg.sims_per_label;
        params.seed = derive_seed(cfg.seed, kTagLabelEngine, index);
        params.threads = 1;
        return label_mtm(p, params, tm, meta);
    });
    const int skipped = (cfg.n_iter - existing) - static_cast<int>(fresh.size());
    for (auto& s : fresh) samples.push_back(std::move(s));
    if (!cfg.label_cache.empty()) {
        detail::write_label_cache(cfg.label_cache, hash, samples);
    }

    TrainResult result = train_on_samples(samples, cfg, meta);
    result.skipped = skipped;
    return result;
}

/// Inference: compute the first-order feature, encode and run the network.
inline double predict_ga(const MlpModel& m, const ActuarialPortfolio& p, double xi, double q) {
    if (m.meta.kind != ModelKind::actuarial) {
        throw std::invalid_argument("predict_ga: model kind mismatch (expected actuarial)");
    }
    const double ga1st = ga_first_order_actuarial(p, xi, q);
    return m.forward(encode_actuarial(p, ga1st, m.meta));
}

inline double predict_ga(const MlpModel& m, const MtmPortfolio& p, const MtmMarketParams& mkt,
                         const TransitionMatrix& tm) {
    if (m.meta.kind != ModelKind::mtm) {
        throw std::invalid_argument("predict_ga: model kind mismatch (expected mtm)");
    }
    const double ga1st = ga_first_order_mtm(p, mkt, tm);
    return m.forward(encode_mtm(p, tm.n_grades(), ga1st, m.meta));
}

}  // namespace granular
