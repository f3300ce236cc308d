#ifndef FEWSHOT_DENSITY_HPP
#define FEWSHOT_DENSITY_HPP

#include "fewshot/csv.hpp"
#include "json.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

/**
 * @file density.hpp
 *
 * @brief Per-condition Parzen-Rosenblatt densities in the embedding space and
 * the presence probability F / (F + F-bar).
 */

namespace fewshot {

/// Scott's rule: count^(-1 / (dim + 4)).
inline double scott_bandwidth(std::size_t count, int dim) {
    if (count < 1) {
        throw std::invalid_argument("Scott bandwidth needs a positive sample count");
    }
    return std::pow(static_cast<double>(count), -1.0 / (static_cast<double>(dim) + 4.0));
}

/**
 * Kernel normalization.
 *
 * `Paper` applies the one-dimensional Gaussian (2 pi)^(-1/2) exp(-|x|^2 / 2)
 * to the scaled offset x = (tau - tau_j) / h. `Normalized` additionally
 * divides by (2 pi)^((d-1)/2) h^d so the estimate integrates to 1 in d
 * dimensions. The two agree for d = 1, h = 1.
 */
enum class KernelNorm { Normalized, Paper };

inline const char* to_string(KernelNorm k) { return k == KernelNorm::Normalized ? "normalized" : "paper"; }

inline KernelNorm kernel_norm_from_string(const std::string& s) {
    if (s == "normalized") {
        return KernelNorm::Normalized;
    }
    if (s == "paper") {
        return KernelNorm::Paper;
    }
    throw std::invalid_argument("unknown kernel normalization '" + s + "'");
}

inline double kernel_constant(double h, Eigen::Index dim, KernelNorm norm) {
    if (norm == KernelNorm::Paper) {
        return 1.0 / std::sqrt(2.0 * std::numbers::pi);
    }
    return std::pow(2.0 * std::numbers::pi, -0.5 * static_cast<double>(dim)) * std::pow(h, -static_cast<double>(dim));
}

/// (1/m) sum_j K((tau - points_j) / h) over the rows of `points`.
inline double density_at(const Eigen::Ref<const Eigen::MatrixXd>& points, double h,
                         const Eigen::Ref<const Eigen::VectorXd>& tau, KernelNorm norm = KernelNorm::Normalized) {
    if (points.rows() < 1) {
        throw std::invalid_argument("density needs at least one kernel center");
    }
    if (!(h > 0.0)) {
        throw std::invalid_argument("bandwidth must be positive");
    }
    if (points.cols() != tau.size()) {
        throw std::invalid_argument("query dimension does not match kernel centers");
    }
    const double inv_two_h2 = 1.0 / (2.0 * h * h);
    double sum = 0.0;
    for (Eigen::Index j = 0; j < points.rows(); ++j) {
        sum += std::exp(-(points.row(j).transpose() - tau).squaredNorm() * inv_two_h2);
    }
    return kernel_constant(h, points.cols(), norm) * sum / static_cast<double>(points.rows());
}

struct PresenceProbability {
    double value = 0.0;
    bool prior_fallback = false;
};

/// F / (F + F-bar); `prior` is returned, flagged, when both densities are 0.
inline PresenceProbability presence_probability(double positive_density, double negative_density, double prior) {
    if (positive_density < 0.0 || negative_density < 0.0 || std::isnan(positive_density) ||
        std::isnan(negative_density)) {
        throw std::invalid_argument("densities must be non-negative");
    }
    const double total = positive_density + negative_density;
    if (total == 0.0) {
        return {prior, true};
    }
    return {positive_density / total, false};
}

struct ConditionModel {
    std::size_t index = 0;
    std::string name;
    Eigen::MatrixXd positive_points;
    Eigen::MatrixXd negative_points;
    double h_pos = 1.0;
    double h_neg = 1.0;
    KernelNorm norm = KernelNorm::Normalized;

    Eigen::Index dim() const { return positive_points.cols(); }

    double prior() const {
        const auto pos = static_cast<double>(positive_points.rows());
        return pos / (pos + static_cast<double>(negative_points.rows()));
    }

    PresenceProbability probability(const Eigen::Ref<const Eigen::VectorXd>& tau) const {
        return presence_probability(density_at(positive_points, h_pos, tau, norm),
                                    density_at(negative_points, h_neg, tau, norm), prior());
    }
};

struct ReferenceProbabilities {
    Eigen::MatrixXd q; // reference samples x conditions
    std::vector<std::string> sample_ids;
    std::size_t prior_fallbacks = 0;
};

struct ConditionFit {
    std::vector<ConditionModel> models;
    ReferenceProbabilities reference;
    /// Conditions without both positive and negative reference samples. Their
    /// q column holds the empirical prior (0 or 1).
    std::vector<std::size_t> omitted;
};

/**
 * Fits one positive and one negative density per condition on the embedded
 * reference samples, then evaluates q at every reference sample (its own
 * kernel included).
 */
inline ConditionFit fit_condition_models(const Eigen::Ref<const Eigen::MatrixXd>& tau,
                                         const std::vector<std::vector<std::uint8_t>>& labels,
                                         const std::vector<std::string>& condition_names,
                                         const std::vector<std::string>& sample_ids,
                                         KernelNorm norm = KernelNorm::Normalized) {
    const auto m = tau.rows();
    const auto dim = static_cast<int>(tau.cols());
    if (static_cast<std::size_t>(m) != labels.size()) {
        throw std::invalid_argument("labels are not aligned with the embedding");
    }
    const std::size_t n_conditions = condition_names.size();

    ConditionFit out;
    out.reference.q = Eigen::MatrixXd::Zero(m, static_cast<Eigen::Index>(n_conditions));
    out.reference.sample_ids = sample_ids;

    for (std::size_t c = 0; c < n_conditions; ++c) {
        std::vector<Eigen::Index> pos, neg;
        for (Eigen::Index i = 0; i < m; ++i) {
            const auto& row = labels[static_cast<std::size_t>(i)];
            if (row.size() != n_conditions) {
                throw std::invalid_argument("label row has wrong length");
            }
            (row[c] ? pos : neg).push_back(i);
        }
        const auto col = static_cast<Eigen::Index>(c);
        if (pos.empty() || neg.empty()) {
            out.omitted.push_back(c);
            out.reference.q.col(col).setConstant(pos.empty() ? 0.0 : 1.0);
            continue;
        }

        ConditionModel model;
        model.index = c;
        model.name = condition_names[c];
        model.norm = norm;
        model.positive_points = tau(pos, Eigen::all);
        model.negative_points = tau(neg, Eigen::all);
        model.h_pos = scott_bandwidth(pos.size(), dim);
        model.h_neg = scott_bandwidth(neg.size(), dim);

        for (Eigen::Index i = 0; i < m; ++i) {
            const auto p = model.probability(tau.row(i).transpose());
            out.reference.q(i, col) = p.value;
            out.reference.prior_fallbacks += p.prior_fallback;
        }
        out.models.push_back(std::move(model));
    }
    return out;
}

namespace detail {

inline nlohmann::json rows_to_json(const Eigen::MatrixXd& m) {
    nlohmann::json out = nlohmann::json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        std::vector<double> row(static_cast<std::size_t>(m.cols()));
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            row[static_cast<std::size_t>(c)] = m(r, c);
        }
        out.push_back(std::move(row));
    }
    return out;
}

inline Eigen::MatrixXd rows_from_json(const nlohmann::json& in, Eigen::Index cols) {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(in.size()), cols);
    for (std::size_t r = 0; r < in.size(); ++r) {
        const auto row = in[r].get<std::vector<double>>();
        if (static_cast<Eigen::Index>(row.size()) != cols) {
            throw std::runtime_error("matrix row has wrong length");
        }
        for (std::size_t c = 0; c < row.size(); ++c) {
            out(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = row[c];
        }
    }
    return out;
}

} // namespace detail

inline nlohmann::json to_json(const ConditionModel& model) {
    return {{"n", model.index},
            {"name", model.name},
            {"h_pos", model.h_pos},
            {"h_neg", model.h_neg},
            {"kernel", to_string(model.norm)},
            {"pos", detail::rows_to_json(model.positive_points)},
            {"neg", detail::rows_to_json(model.negative_points)}};
}

inline ConditionModel condition_model_from_json(const nlohmann::json& in, Eigen::Index dim) {
    ConditionModel model;
    model.index = in.at("n").get<std::size_t>();
    model.name = in.at("name").get<std::string>();
    model.h_pos = in.at("h_pos").get<double>();
    model.h_neg = in.at("h_neg").get<double>();
    model.norm = kernel_norm_from_string(in.value("kernel", std::string("normalized")));
    model.positive_points = detail::rows_from_json(in.at("pos"), dim);
    model.negative_points = detail::rows_from_json(in.at("neg"), dim);
    return model;
}

inline void write_reference_csv(const std::string& path, const ReferenceProbabilities& ref,
                                const std::vector<std::string>& condition_names) {
    auto out = open_output(path);
    out << "sample_id";
    for (const auto& name : condition_names) {
        out << ',' << name;
    }
    out << '\n';
    for (Eigen::Index i = 0; i < ref.q.rows(); ++i) {
        out << ref.sample_ids[static_cast<std::size_t>(i)];
        for (Eigen::Index c = 0; c < ref.q.cols(); ++c) {
            out << ',' << format_double(ref.q(i, c));
        }
        out << '\n';
    }
}

} // namespace fewshot

#endif
