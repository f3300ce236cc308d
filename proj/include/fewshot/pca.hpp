#ifndef FEWSHOT_PCA_HPP
#define FEWSHOT_PCA_HPP

#include "json.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

/**
 * @file pca.hpp
 *
 * @brief Principal component reduction of feature vectors.
 */

namespace fewshot {

/**
 * @brief Linear map from the P-dimensional feature space to P' dimensions.
 *
 * Rows of `components` are orthonormal and ordered by decreasing eigenvalue.
 * A `passthrough` model is the identity (no reduction), used when neighbor
 * search should run in the original feature space.
 */
struct PcaModel {
    Eigen::VectorXd mean;
    Eigen::MatrixXd components; // p_prime x p
    Eigen::VectorXd eigenvalues;
    Eigen::Index p = 0;
    Eigen::Index p_prime = 0;
    bool passthrough = false;
    std::vector<std::string> warnings;

    static PcaModel identity(Eigen::Index dim) {
        PcaModel m;
        m.p = dim;
        m.p_prime = dim;
        m.passthrough = true;
        m.mean = Eigen::VectorXd::Zero(dim);
        return m;
    }

    Eigen::VectorXd project(const Eigen::Ref<const Eigen::VectorXd>& gamma) const {
        if (gamma.size() != p) {
            throw std::invalid_argument("feature vector has length " + std::to_string(gamma.size()) + ", model expects " +
                                        std::to_string(p));
        }
        if (passthrough) {
            return gamma;
        }
        return components * (gamma - mean);
    }

    /// Projects every row of `matrix`.
    Eigen::MatrixXd project_rows(const Eigen::Ref<const Eigen::MatrixXd>& matrix) const {
        if (matrix.cols() != p) {
            throw std::invalid_argument("feature matrix has " + std::to_string(matrix.cols()) + " columns, model expects " +
                                        std::to_string(p));
        }
        if (passthrough) {
            return matrix;
        }
        return (matrix.rowwise() - mean.transpose()) * components.transpose();
    }

    /// Jacobian of `project`, i.e. d(pi)/d(gamma).
    Eigen::MatrixXd jacobian() const {
        if (passthrough) {
            return Eigen::MatrixXd::Identity(p, p);
        }
        return components;
    }
};

/**
 * Fits the top-`p_prime` principal axes of the sample covariance (divisor
 * n - 1) through an SVD of the centered data. Each component is signed so that
 * its largest-magnitude entry is positive. `p_prime` above min(P, n) is
 * clamped and the clamp is recorded in `warnings`.
 */
inline PcaModel fit_pca(const Eigen::Ref<const Eigen::MatrixXd>& matrix, Eigen::Index p_prime) {
    const auto n = matrix.rows();
    const auto dim = matrix.cols();
    if (n < 2) {
        throw std::invalid_argument("PCA needs at least 2 samples");
    }
    if (p_prime < 1) {
        throw std::invalid_argument("PCA output dimension must be >= 1");
    }

    PcaModel model;
    model.p = dim;
    const auto limit = std::min(dim, n);
    if (p_prime > limit) {
        model.warnings.push_back("p_prime " + std::to_string(p_prime) + " clamped to " + std::to_string(limit));
        p_prime = limit;
    }
    model.p_prime = p_prime;
    model.mean = matrix.colwise().mean().transpose();

    const Eigen::MatrixXd centered = matrix.rowwise() - model.mean.transpose();
    Eigen::BDCSVD<Eigen::MatrixXd> svd(centered, Eigen::ComputeThinV);
    const auto& singular = svd.singularValues();
    const auto& v = svd.matrixV();

    model.components.resize(p_prime, dim);
    model.eigenvalues.resize(p_prime);
    for (Eigen::Index k = 0; k < p_prime; ++k) {
        Eigen::VectorXd axis = v.col(k);
        const double value = singular(k) * singular(k) / static_cast<double>(n - 1);
        Eigen::Index argmax = 0;
        axis.cwiseAbs().maxCoeff(&argmax);
        if (axis(argmax) < 0) {
            axis = -axis;
        }
        model.components.row(k) = axis.transpose();
        model.eigenvalues(k) = value;
    }
    return model;
}

inline nlohmann::json to_json(const PcaModel& model) {
    nlohmann::json out;
    out["p"] = model.p;
    out["p_prime"] = model.p_prime;
    out["passthrough"] = model.passthrough;
    out["mean"] = std::vector<double>(model.mean.data(), model.mean.data() + model.mean.size());
    out["eigenvalues"] = std::vector<double>(model.eigenvalues.data(), model.eigenvalues.data() + model.eigenvalues.size());
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index r = 0; r < model.components.rows(); ++r) {
        std::vector<double> row(static_cast<std::size_t>(model.components.cols()));
        for (Eigen::Index c = 0; c < model.components.cols(); ++c) {
            row[static_cast<std::size_t>(c)] = model.components(r, c);
        }
        rows.push_back(row);
    }
    out["components"] = rows;
    if (!model.warnings.empty()) {
        out["warnings"] = model.warnings;
    }
    return out;
}

inline PcaModel pca_from_json(const nlohmann::json& in) {
    PcaModel model;
    model.p = in.at("p").get<Eigen::Index>();
    model.p_prime = in.at("p_prime").get<Eigen::Index>();
    model.passthrough = in.value("passthrough", false);
    const auto mean = in.at("mean").get<std::vector<double>>();
    model.mean = Eigen::Map<const Eigen::VectorXd>(mean.data(), static_cast<Eigen::Index>(mean.size()));
    const auto eig = in.at("eigenvalues").get<std::vector<double>>();
    model.eigenvalues = Eigen::Map<const Eigen::VectorXd>(eig.data(), static_cast<Eigen::Index>(eig.size()));
    const auto& rows = in.at("components");
    if (!model.passthrough) {
        model.components.resize(static_cast<Eigen::Index>(rows.size()), model.p);
        for (std::size_t r = 0; r < rows.size(); ++r) {
            const auto row = rows[r].get<std::vector<double>>();
            if (static_cast<Eigen::Index>(row.size()) != model.p) {
                throw std::runtime_error("PCA component row has wrong length");
            }
            for (std::size_t c = 0; c < row.size(); ++c) {
                model.components(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = row[c];
            }
        }
    }
    if (model.mean.size() != model.p || (!model.passthrough && model.components.rows() != model.p_prime)) {
        throw std::runtime_error("inconsistent PCA model dimensions");
    }
    if (in.contains("warnings")) {
        model.warnings = in.at("warnings").get<std::vector<std::string>>();
    }
    return model;
}

} // namespace fewshot

#endif
