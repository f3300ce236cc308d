#ifndef FEWSHOT_PREDICTOR_HPP
#define FEWSHOT_PREDICTOR_HPP

#include "fewshot/density.hpp"
#include "fewshot/pca.hpp"
#include "json.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

/**
 * @file predictor.hpp
 *
 * @brief Inference for unseen feature vectors: projection into the PCA space
 * followed by inverse-distance K-nearest-neighbor regression over the exact
 * reference probabilities.
 */

namespace fewshot {

/// Distances below this are treated as an exact match.
inline constexpr double zero_distance = 1e-12;

/// Neighbor sets whose K-th and (K+1)-th distances differ by less than this are unstable.
inline constexpr double neighbor_tie_tolerance = 1e-9;

struct Neighbor {
    Eigen::Index row;
    double distance;
};

class UnstableNeighborhood : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Predictor {
    PcaModel pca;
    Eigen::MatrixXd reference_pi; // m x p_prime
    Eigen::MatrixXd reference_q;  // m x conditions
    std::vector<std::string> reference_ids;
    std::size_t k = 3;
    std::vector<std::string> condition_names;
    nlohmann::json metadata = nlohmann::json::object();

    std::size_t condition_count() const { return static_cast<std::size_t>(reference_q.cols()); }

    void validate() const {
        if (reference_pi.rows() == 0) {
            throw std::invalid_argument("predictor has an empty reference set");
        }
        if (reference_pi.rows() != reference_q.rows()) {
            throw std::invalid_argument("reference coordinates and probabilities differ in row count");
        }
        if (k < 1 || static_cast<Eigen::Index>(k) > reference_pi.rows()) {
            throw std::invalid_argument("K must lie in [1, " + std::to_string(reference_pi.rows()) + "]");
        }
        if (reference_pi.cols() != pca.p_prime) {
            throw std::invalid_argument("reference coordinates do not match the PCA output dimension");
        }
    }

    /// All reference rows sorted by distance to `pi`, ties broken by row index.
    std::vector<Neighbor> ranked_neighbors(const Eigen::Ref<const Eigen::VectorXd>& pi, std::size_t count) const {
        std::vector<Neighbor> all(static_cast<std::size_t>(reference_pi.rows()));
        for (Eigen::Index r = 0; r < reference_pi.rows(); ++r) {
            all[static_cast<std::size_t>(r)] = {r, (reference_pi.row(r).transpose() - pi).norm()};
        }
        count = std::min(count, all.size());
        std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(count), all.end(),
                          [](const Neighbor& a, const Neighbor& b) {
                              return a.distance < b.distance || (a.distance == b.distance && a.row < b.row);
                          });
        all.resize(count);
        return all;
    }
};

namespace detail {

inline Eigen::VectorXd knn_regress(const Predictor& model, const std::vector<Neighbor>& neighbors) {
    const auto n_conditions = model.reference_q.cols();
    Eigen::VectorXd out = Eigen::VectorXd::Zero(n_conditions);

    std::size_t exact = 0;
    for (const auto& nb : neighbors) {
        if (nb.distance < zero_distance) {
            out += model.reference_q.row(nb.row).transpose();
            ++exact;
        }
    }
    if (exact > 0) {
        return out / static_cast<double>(exact);
    }

    double weight_sum = 0.0;
    for (const auto& nb : neighbors) {
        const double w = 1.0 / nb.distance;
        out += w * model.reference_q.row(nb.row).transpose();
        weight_sum += w;
    }
    return out / weight_sum;
}

} // namespace detail

/**
 * q-hat for every condition. Weights are 1/d over the K nearest reference
 * rows in the PCA space; if any of them lies within 1e-12, the result is the
 * plain mean over those exact matches.
 */
inline Eigen::VectorXd predict(const Predictor& model, const Eigen::Ref<const Eigen::VectorXd>& gamma) {
    model.validate();
    const Eigen::VectorXd pi = model.pca.project(gamma);
    return detail::knn_regress(model, model.ranked_neighbors(pi, model.k));
}

inline Eigen::MatrixXd predict_batch(const Predictor& model, const Eigen::Ref<const Eigen::MatrixXd>& gammas) {
    model.validate();
    Eigen::MatrixXd out(gammas.rows(), model.reference_q.cols());
    for (Eigen::Index r = 0; r < gammas.rows(); ++r) {
        out.row(r) = predict(model, gammas.row(r).transpose()).transpose();
    }
    return out;
}

/**
 * Gradient of q-hat for `condition` with respect to the input feature vector,
 * holding the neighbor set fixed and chaining through the PCA projection.
 *
 * With w_k = 1/d_k and W = sum_k w_k:
 *   d(q-hat)/d(pi) = -(1/W) sum_k (q_k - q-hat) (pi - pi_k) / d_k^3
 */
inline Eigen::VectorXd prediction_gradient(const Predictor& model, const Eigen::Ref<const Eigen::VectorXd>& gamma,
                                           std::size_t condition) {
    model.validate();
    if (condition >= model.condition_count()) {
        throw std::out_of_range("condition index " + std::to_string(condition) + " out of range");
    }
    const Eigen::VectorXd pi = model.pca.project(gamma);
    const auto ranked = model.ranked_neighbors(pi, model.k + 1);

    if (ranked.size() > model.k) {
        const auto& last = ranked[model.k - 1];
        const auto& next = ranked[model.k];
        if (next.distance - last.distance < neighbor_tie_tolerance) {
            auto id = [&](Eigen::Index r) {
                return r < static_cast<Eigen::Index>(model.reference_ids.size())
                           ? model.reference_ids[static_cast<std::size_t>(r)]
                           : "#" + std::to_string(r);
            };
            throw UnstableNeighborhood("neighbor set is unstable: reference samples " + id(last.row) + " and " +
                                       id(next.row) + " are tied at distance " + std::to_string(last.distance));
        }
    }
    const std::vector<Neighbor> neighbors(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(model.k));
    for (const auto& nb : neighbors) {
        if (nb.distance < zero_distance) {
            throw UnstableNeighborhood("gradient undefined: input coincides with a reference sample");
        }
    }

    const auto col = static_cast<Eigen::Index>(condition);
    double weight_sum = 0.0, weighted = 0.0;
    for (const auto& nb : neighbors) {
        weight_sum += 1.0 / nb.distance;
        weighted += model.reference_q(nb.row, col) / nb.distance;
    }
    const double estimate = weighted / weight_sum;

    Eigen::VectorXd d_pi = Eigen::VectorXd::Zero(pi.size());
    for (const auto& nb : neighbors) {
        const double d3 = nb.distance * nb.distance * nb.distance;
        d_pi -= (model.reference_q(nb.row, col) - estimate) / d3 * (pi - model.reference_pi.row(nb.row).transpose());
    }
    d_pi /= weight_sum;
    return model.pca.jacobian().transpose() * d_pi;
}

inline nlohmann::json to_json(const Predictor& model) {
    return {{"format", "fewshot-predictor/1"},
            {"k", model.k},
            {"condition_names", model.condition_names},
            {"reference_ids", model.reference_ids},
            {"pca", to_json(model.pca)},
            {"reference_pi", detail::rows_to_json(model.reference_pi)},
            {"reference_q", detail::rows_to_json(model.reference_q)},
            {"metadata", model.metadata}};
}

inline Predictor predictor_from_json(const nlohmann::json& in) {
    Predictor model;
    model.k = in.at("k").get<std::size_t>();
    model.condition_names = in.at("condition_names").get<std::vector<std::string>>();
    model.reference_ids = in.value("reference_ids", std::vector<std::string>{});
    model.pca = pca_from_json(in.at("pca"));
    model.reference_pi = detail::rows_from_json(in.at("reference_pi"), model.pca.p_prime);
    model.reference_q =
        detail::rows_from_json(in.at("reference_q"), static_cast<Eigen::Index>(model.condition_names.size()));
    model.metadata = in.value("metadata", nlohmann::json::object());
    model.validate();
    return model;
}

inline void save_predictor(const std::string& path, const Predictor& model) {
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("cannot write '" + path + "'");
    }
    out << to_json(model).dump(1) << '\n';
}

inline Predictor load_predictor(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot open '" + path + "'");
    }
    return predictor_from_json(nlohmann::json::parse(in));
}

} // namespace fewshot

#endif
