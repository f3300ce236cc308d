#ifndef FEWSHOT_EVALUATION_HPP
#define FEWSHOT_EVALUATION_HPP

#include "fewshot/csv.hpp"
#include "fewshot/dataset.hpp"
#include "fewshot/pipeline.hpp"
#include "fewshot/predictor.hpp"
#include "json.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <exception>
#include <limits>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

/**
 * @file evaluation.hpp
 *
 * @brief ROC analysis and the fold protocols: cross-validation inside the
 * validation split and cross-testing on the test split, each pooling all
 * fold predictions into one ROC curve per condition.
 */

namespace fewshot {

struct RocPoint {
    double fpr;
    double tpr;
    double threshold;
};

struct RocResult {
    std::string condition;
    std::optional<double> auc; // absent for single-class input
    std::string reason;
    std::vector<RocPoint> points;
    std::size_t positives = 0;
    std::size_t negatives = 0;
};

/**
 * AUC as the Mann-Whitney statistic with half credit for ties. The curve is
 * swept from the highest threshold down with tied scores grouped into a
 * single step, so its trapezoidal area equals the AUC.
 */
inline RocResult roc_auc(std::span<const double> scores, std::span<const std::uint8_t> labels,
                         std::string condition = {}) {
    if (scores.size() != labels.size()) {
        throw std::invalid_argument("scores and labels differ in length");
    }
    RocResult out;
    out.condition = std::move(condition);
    for (auto y : labels) {
        (y ? out.positives : out.negatives)++;
    }
    if (out.positives == 0 || out.negatives == 0) {
        out.reason = out.positives == 0 ? "no positive samples" : "no negative samples";
        return out;
    }

    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

    const auto pos = static_cast<double>(out.positives);
    const auto neg = static_cast<double>(out.negatives);
    std::uint64_t tp = 0, fp = 0;
    std::uint64_t twice_u = 0; // 2 * (concordant + 0.5 * tied)
    out.points.push_back({0.0, 0.0, std::numeric_limits<double>::infinity()});
    for (std::size_t i = 0; i < order.size();) {
        const double threshold = scores[order[i]];
        std::uint64_t group_pos = 0, group_neg = 0;
        for (; i < order.size() && scores[order[i]] == threshold; ++i) {
            (labels[order[i]] ? group_pos : group_neg)++;
        }
        twice_u += group_neg * (2 * tp + group_pos);
        tp += group_pos;
        fp += group_neg;
        out.points.push_back({static_cast<double>(fp) / neg, static_cast<double>(tp) / pos, threshold});
    }
    out.auc = static_cast<double>(twice_u) / (2.0 * pos * neg);
    return out;
}

/// Trapezoidal area under a curve's points.
inline double trapezoid_area(const std::vector<RocPoint>& points) {
    double area = 0.0;
    for (std::size_t i = 1; i < points.size(); ++i) {
        area += (points[i].fpr - points[i - 1].fpr) * 0.5 * (points[i].tpr + points[i - 1].tpr);
    }
    return area;
}

enum class Protocol { CrossValidation, CrossTesting };

inline const char* to_string(Protocol p) { return p == Protocol::CrossValidation ? "cv" : "test"; }

struct FoldSummary {
    std::size_t fold = 0;
    std::size_t reference_size = 0;
    std::size_t predicted_size = 0;
    std::vector<std::string> skipped_conditions;
    double tsne_final_cost = 0.0;
};

struct PooledPrediction {
    std::string sample_id;
    std::size_t fold = 0;
    std::vector<double> q;
};

struct EvaluationReport {
    Protocol protocol = Protocol::CrossValidation;
    std::vector<RocResult> rocs; // one per condition, dataset order
    std::optional<double> average_auc;
    std::optional<double> average_auc_rare;
    std::size_t frequent_count = 0;
    std::vector<FoldSummary> folds;
    std::vector<PooledPrediction> predictions;
    nlohmann::json config;
    std::string config_digest;
};

namespace detail {

inline std::optional<double> mean_of(const std::vector<double>& values) {
    if (values.empty()) {
        return std::nullopt;
    }
    return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

struct FoldOutcome {
    FoldSummary summary;
    std::vector<std::size_t> predicted; // dataset rows
    Eigen::MatrixXd q;
    std::vector<bool> condition_ok;
};

inline FoldOutcome run_fold(const Dataset& dataset, const std::vector<std::size_t>& fixed_reference,
                            const std::vector<std::size_t>& evaluated, const std::vector<std::size_t>& fold_of,
                            std::size_t fold, const PipelineConfig& config) {
    FoldOutcome out;
    out.summary.fold = fold;
    std::vector<std::size_t> reference = fixed_reference;
    for (std::size_t e = 0; e < evaluated.size(); ++e) {
        (fold_of[e] == fold ? out.predicted : reference).push_back(evaluated[e]);
    }
    std::sort(reference.begin(), reference.end());
    out.summary.reference_size = reference.size();
    out.summary.predicted_size = out.predicted.size();
    out.condition_ok.assign(dataset.condition_count(), false);
    if (out.predicted.empty()) {
        return out;
    }

    std::set<std::string> reference_patients;
    for (auto r : reference) {
        reference_patients.insert(dataset.records[r].patient_id);
    }
    for (auto p : out.predicted) {
        if (reference_patients.count(dataset.records[p].patient_id)) {
            throw std::logic_error("patient '" + dataset.records[p].patient_id + "' appears in both the reference set and fold " +
                                   std::to_string(fold));
        }
    }

    const auto learned = fit_pipeline(dataset, reference, config, config.seed + fold);
    out.summary.tsne_final_cost = learned.embedding.final_cost;
    out.q = predict_batch(learned.predictor, dataset.feature_matrix(out.predicted));
    std::fill(out.condition_ok.begin(), out.condition_ok.end(), true);
    for (auto c : learned.conditions.omitted) {
        out.condition_ok[c] = false;
        out.summary.skipped_conditions.push_back(dataset.condition_names[c]);
    }
    return out;
}

} // namespace detail

/**
 * Shared fold loop. For fold f the reference set is `fixed_reference` plus
 * every evaluated sample outside f; the samples in f are predicted. Folds may
 * run on several threads; results are pooled in fold order either way.
 */
inline EvaluationReport run_protocol(const Dataset& dataset, const std::vector<std::size_t>& fixed_reference,
                                     const std::vector<std::size_t>& evaluated, const FoldAssignment& folds,
                                     const PipelineConfig& config, Protocol protocol, unsigned threads = 1) {
    std::vector<std::size_t> fold_of(evaluated.size());
    for (std::size_t e = 0; e < evaluated.size(); ++e) {
        const auto& id = dataset.records[evaluated[e]].sample_id;
        const auto it = folds.fold.find(id);
        if (it == folds.fold.end()) {
            throw std::invalid_argument("sample '" + id + "' has no fold");
        }
        if (it->second >= folds.n_folds) {
            throw std::invalid_argument("sample '" + id + "' has fold index out of range");
        }
        fold_of[e] = it->second;
    }

    std::vector<detail::FoldOutcome> outcomes(folds.n_folds);
    threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(folds.n_folds)));
    if (threads == 1) {
        for (std::size_t f = 0; f < folds.n_folds; ++f) {
            outcomes[f] = detail::run_fold(dataset, fixed_reference, evaluated, fold_of, f, config);
        }
    } else {
        std::vector<std::exception_ptr> errors(folds.n_folds);
        std::vector<std::thread> workers;
        for (unsigned t = 0; t < threads; ++t) {
            workers.emplace_back([&, t] {
                for (std::size_t f = t; f < folds.n_folds; f += threads) {
                    try {
                        outcomes[f] = detail::run_fold(dataset, fixed_reference, evaluated, fold_of, f, config);
                    } catch (...) {
                        errors[f] = std::current_exception();
                    }
                }
            });
        }
        for (auto& w : workers) {
            w.join();
        }
        for (auto& e : errors) {
            if (e) {
                std::rethrow_exception(e);
            }
        }
    }

    EvaluationReport report;
    report.protocol = protocol;
    report.frequent_count = config.frequent_count;
    report.config = to_json(config);
    report.config_digest = digest(report.config);

    const auto n_conditions = dataset.condition_count();
    std::vector<std::vector<double>> scores(n_conditions);
    std::vector<std::vector<std::uint8_t>> labels(n_conditions);
    for (auto& o : outcomes) {
        for (std::size_t r = 0; r < o.predicted.size(); ++r) {
            const auto& rec = dataset.records[o.predicted[r]];
            PooledPrediction pred{rec.sample_id, o.summary.fold, {}};
            for (std::size_t c = 0; c < n_conditions; ++c) {
                const double q = o.q(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
                pred.q.push_back(q);
                if (o.condition_ok[c]) {
                    scores[c].push_back(q);
                    labels[c].push_back(rec.labels[c]);
                }
            }
            report.predictions.push_back(std::move(pred));
        }
        report.folds.push_back(std::move(o.summary));
    }

    std::vector<double> all, rare;
    for (std::size_t c = 0; c < n_conditions; ++c) {
        auto roc = roc_auc(scores[c], labels[c], dataset.condition_names[c]);
        if (roc.auc) {
            all.push_back(*roc.auc);
            if (c >= config.frequent_count) {
                rare.push_back(*roc.auc);
            }
        }
        report.rocs.push_back(std::move(roc));
    }
    report.average_auc = detail::mean_of(all);
    report.average_auc_rare = detail::mean_of(rare);
    return report;
}

/// Folds over the validation split; the reference set is the other nine folds.
inline EvaluationReport cross_validate(const Dataset& dataset, const SplitAssignment& splits, const FoldAssignment& folds,
                                       const PipelineConfig& config, unsigned threads = 1) {
    return run_protocol(dataset, {}, splits.indices(dataset, Split::Valid), folds, config, Protocol::CrossValidation,
                        threads);
}

/// Folds over the test split; the reference set is the validation split plus the other nine test folds.
inline EvaluationReport cross_test(const Dataset& dataset, const SplitAssignment& splits, const FoldAssignment& folds,
                                   const PipelineConfig& config, unsigned threads = 1) {
    return run_protocol(dataset, splits.indices(dataset, Split::Valid), splits.indices(dataset, Split::Test), folds,
                        config, Protocol::CrossTesting, threads);
}

/// Patient-grouped folds over the samples of one split.
inline FoldAssignment folds_for_split(const Dataset& dataset, const SplitAssignment& splits, Split split,
                                      std::size_t n_folds, std::uint64_t seed) {
    std::vector<std::string> ids, patients;
    for (auto i : splits.indices(dataset, split)) {
        ids.push_back(dataset.records[i].sample_id);
        patients.push_back(dataset.records[i].patient_id);
    }
    return assign_folds(ids, patients, n_folds, seed);
}

inline nlohmann::json to_json(const EvaluationReport& report) {
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    nlohmann::json conditions = nlohmann::json::array();
    for (std::size_t c = 0; c < report.rocs.size(); ++c) {
        const auto& r = report.rocs[c];
        nlohmann::json entry = {{"index", c},
                                {"name", r.condition},
                                {"rare", c >= report.frequent_count},
                                {"auc", opt(r.auc)},
                                {"positives", r.positives},
                                {"negatives", r.negatives}};
        if (!r.reason.empty()) {
            entry["reason"] = r.reason;
        }
        conditions.push_back(std::move(entry));
    }
    nlohmann::json folds = nlohmann::json::array();
    for (const auto& f : report.folds) {
        folds.push_back({{"fold", f.fold},
                         {"reference_size", f.reference_size},
                         {"predicted_size", f.predicted_size},
                         {"skipped_conditions", f.skipped_conditions},
                         {"tsne_final_cost", f.tsne_final_cost}});
    }
    nlohmann::json predictions = nlohmann::json::array();
    for (const auto& p : report.predictions) {
        predictions.push_back({p.sample_id, p.fold, p.q});
    }
    return {{"protocol", to_string(report.protocol)},
            {"config", report.config},
            {"config_digest", report.config_digest},
            {"conditions", conditions},
            {"average_auc", opt(report.average_auc)},
            {"average_auc_rare", opt(report.average_auc_rare)},
            {"folds", folds},
            {"predictions_digest", digest(predictions)}};
}

inline void write_roc_csv(const std::string& path, const RocResult& roc) {
    auto out = open_output(path);
    out << "fpr,tpr,threshold\n";
    for (const auto& p : roc.points) {
        out << format_double(p.fpr) << ',' << format_double(p.tpr) << ','
            << (std::isinf(p.threshold) ? std::string("inf") : format_double(p.threshold)) << '\n';
    }
}

inline void write_predictions_csv(const std::string& path, const EvaluationReport& report,
                                  const std::vector<std::string>& condition_names) {
    auto out = open_output(path);
    out << "sample_id,fold";
    for (const auto& n : condition_names) {
        out << ',' << n;
    }
    out << '\n';
    for (const auto& p : report.predictions) {
        out << p.sample_id << ',' << p.fold;
        for (double q : p.q) {
            out << ',' << format_double(q);
        }
        out << '\n';
    }
}

enum class SweepParam { PcaDims, EmbedDims, Perplexity, K };

inline const char* to_string(SweepParam p) {
    switch (p) {
    case SweepParam::PcaDims:
        return "pprime";
    case SweepParam::EmbedDims:
        return "psecond";
    case SweepParam::Perplexity:
        return "perplexity";
    default:
        return "k";
    }
}

inline SweepParam sweep_param_from_string(const std::string& s) {
    if (s == "pprime") {
        return SweepParam::PcaDims;
    }
    if (s == "psecond") {
        return SweepParam::EmbedDims;
    }
    if (s == "perplexity") {
        return SweepParam::Perplexity;
    }
    if (s == "k") {
        return SweepParam::K;
    }
    throw std::invalid_argument("unknown sweep parameter '" + s + "'");
}

struct SweepRow {
    SweepParam param;
    std::string value;
    std::optional<double> average_auc;
    std::optional<double> average_auc_rare;
};

/// Applies one swept value to a config. For pprime, "inf" (or 0) disables PCA.
inline PipelineConfig with_parameter(PipelineConfig config, SweepParam param, const std::string& value) {
    switch (param) {
    case SweepParam::PcaDims:
        config.pca_dims = (value == "inf" || value == "none") ? 0 : std::stoi(value);
        break;
    case SweepParam::EmbedDims:
        config.embed_dims = std::stoi(value);
        break;
    case SweepParam::Perplexity:
        config.perplexity = std::stod(value);
        break;
    case SweepParam::K:
        config.k = static_cast<std::size_t>(std::stoul(value));
        break;
    }
    return config;
}

/**
 * One protocol run per value of each swept parameter, all other parameters
 * held at `base`.
 */
inline std::vector<SweepRow> parameter_sweep(const Dataset& dataset, const SplitAssignment& splits,
                                             const FoldAssignment& folds,
                                             const std::vector<std::pair<SweepParam, std::vector<std::string>>>& grid,
                                             const PipelineConfig& base, Protocol protocol = Protocol::CrossValidation,
                                             unsigned threads = 1) {
    std::vector<SweepRow> rows;
    for (const auto& [param, values] : grid) {
        for (const auto& value : values) {
            const auto config = with_parameter(base, param, value);
            const auto report = protocol == Protocol::CrossValidation
                                    ? cross_validate(dataset, splits, folds, config, threads)
                                    : cross_test(dataset, splits, folds, config, threads);
            rows.push_back({param, value, report.average_auc, report.average_auc_rare});
        }
    }
    return rows;
}

inline void write_sweep_csv(const std::string& path, const std::vector<SweepRow>& rows) {
    auto out = open_output(path);
    out << "param,value,avg_auc,avg_auc_rare\n";
    for (const auto& r : rows) {
        out << to_string(r.param) << ',' << r.value << ','
            << (r.average_auc ? format_double(*r.average_auc) : std::string("nan")) << ','
            << (r.average_auc_rare ? format_double(*r.average_auc_rare) : std::string("nan")) << '\n';
    }
}

} // namespace fewshot

#endif
