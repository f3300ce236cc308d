#ifndef FEWSHOT_TSNE_HPP
#define FEWSHOT_TSNE_HPP

#include "fewshot/csv.hpp"
#include "fewshot/random.hpp"
#include "json.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

/**
 * @file tsne.hpp
 *
 * @brief Exact stochastic neighbor embedding of reference vectors.
 *
 * Input affinities are Gaussian conditionals whose per-sample bandwidth is
 * calibrated by bisection to a target perplexity. Two output models are
 * available:
 *
 * - `Kernel::StudentT`: symmetrized joint affinities against a Cauchy output
 *   kernel (the usual t-SNE objective).
 * - `Kernel::PaperSne`: per-sample conditional output distributions with the
 *   fixed Gaussian bandwidth 1/sqrt(2), so each output affinity is
 *   exp(-|tau_i - tau_j|^2), and the cost is the sum of row-wise KL divergences.
 *
 * Gradients are exact O(n^2) and accumulated sequentially, so a run is
 * bit-reproducible for a given seed.
 */

namespace fewshot {

enum class Kernel { StudentT, PaperSne };

inline const char* to_string(Kernel k) { return k == Kernel::StudentT ? "student_t" : "paper_sne"; }

inline Kernel kernel_from_string(const std::string& s) {
    if (s == "student_t") {
        return Kernel::StudentT;
    }
    if (s == "paper_sne") {
        return Kernel::PaperSne;
    }
    throw std::invalid_argument("unknown t-SNE variant '" + s + "' (expected student_t or paper_sne)");
}

struct TsneConfig {
    double perplexity = 30.0;
    int output_dim = 2;
    int iterations = 1000;
    double learning_rate = 200.0;
    double initial_momentum = 0.5;
    double final_momentum = 0.8;
    int momentum_switch_iteration = 250;
    double early_exaggeration = 12.0;
    int exaggeration_iterations = 250;
    Kernel kernel = Kernel::StudentT;
    std::uint64_t seed = 42;
    /// Reserved for a tree-based approximation; only 0 (exact) is implemented.
    double barnes_hut_theta = 0.0;
    int cost_trace_interval = 50;
    bool adaptive_gains = true;

    /// Defaults for `k`. The Gaussian output kernel is much stiffer than the
    /// Student-t one and diverges under the Student-t step size, so it runs
    /// with a small learning rate and no early exaggeration.
    static TsneConfig defaults(Kernel k) {
        TsneConfig c;
        c.kernel = k;
        if (k == Kernel::PaperSne) {
            c.learning_rate = 0.1;
            c.early_exaggeration = 1.0;
        }
        return c;
    }
};

inline nlohmann::json to_json(const TsneConfig& c) {
    return {{"perplexity", c.perplexity},
            {"output_dim", c.output_dim},
            {"iterations", c.iterations},
            {"learning_rate", c.learning_rate},
            {"initial_momentum", c.initial_momentum},
            {"final_momentum", c.final_momentum},
            {"momentum_switch_iteration", c.momentum_switch_iteration},
            {"early_exaggeration", c.early_exaggeration},
            {"exaggeration_iterations", c.exaggeration_iterations},
            {"variant", to_string(c.kernel)},
            {"seed", c.seed},
            {"barnes_hut_theta", c.barnes_hut_theta},
            {"adaptive_gains", c.adaptive_gains}};
}

struct BandwidthCalibration {
    double bandwidth = 1.0;
    std::vector<double> row;
    double perplexity = 0.0;
    int iterations = 0;
    std::string warning; // empty when the target was met
};

/// Perplexity 2^H of a probability row, H in bits; zero entries contribute nothing.
inline double perplexity_of(std::span<const double> row) {
    double entropy = 0.0;
    for (double p : row) {
        if (p > 0.0) {
            entropy -= p * std::log2(p);
        }
    }
    return std::exp2(entropy);
}

/**
 * Finds h such that the conditional row p_j = exp(-d_j / (2 h^2)) / Z has
 * perplexity `target`. `squared_distances` holds the squared distances to
 * the candidate neighbors (the sample itself excluded).
 *
 * The search runs on log(beta), beta = 1 / (2 h^2), for at most 100 steps;
 * it stops when the entropy (in nats) is within 1e-6 of log(target).
 */
inline BandwidthCalibration calibrate_bandwidth(std::span<const double> squared_distances, double target) {
    const std::size_t m = squared_distances.size();
    if (m < 2) {
        throw std::invalid_argument("bandwidth calibration needs at least 2 neighbors");
    }
    if (!(target > 0.0) || !(target < static_cast<double>(m))) {
        throw std::invalid_argument("perplexity " + std::to_string(target) + " must lie in (0, " + std::to_string(m) +
                                    ")");
    }
    double dmin = std::numeric_limits<double>::infinity(), dmax = 0.0;
    for (double d : squared_distances) {
        if (!std::isfinite(d) || d < 0.0) {
            throw std::invalid_argument("squared distances must be finite and non-negative");
        }
        dmin = std::min(dmin, d);
        dmax = std::max(dmax, d);
    }

    BandwidthCalibration out;
    out.row.assign(m, 1.0 / static_cast<double>(m));
    // Differences at rounding level (e.g. a computed equilateral layout) count as equidistant.
    if (dmax - dmin <= 1e-12 * dmax) {
        out.bandwidth = 1.0;
        out.perplexity = static_cast<double>(m);
        out.warning = dmax == 0.0 ? "all neighbor distances are zero; using a uniform row"
                                  : "all neighbors are equidistant; perplexity is fixed at the neighbor count";
        return out;
    }

    const double log_target = std::log(target);
    auto evaluate = [&](double beta) {
        // Shifting by dmin leaves the normalized row unchanged and avoids underflow.
        double sum = 0.0, weighted = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
            const double shifted = squared_distances[j] - dmin;
            const double w = std::exp(-beta * shifted);
            out.row[j] = w;
            sum += w;
            weighted += w * shifted;
        }
        for (auto& p : out.row) {
            p /= sum;
        }
        return std::log(sum) + beta * weighted / sum; // entropy in nats
    };

    // Start at the inverse mean spread; the bracket grows by factors of e until found.
    double spread = 0.0;
    for (double d : squared_distances) {
        spread += d - dmin;
    }
    double log_beta = -std::log(spread / static_cast<double>(m));
    double lo = -std::numeric_limits<double>::infinity();
    double hi = std::numeric_limits<double>::infinity();
    double entropy = evaluate(std::exp(log_beta));
    int it = 0;
    for (; it < 100; ++it) {
        if (std::abs(entropy - log_target) <= 1e-6) {
            break;
        }
        if (entropy > log_target) {
            lo = log_beta; // too flat: sharpen
            log_beta = std::isfinite(hi) ? 0.5 * (lo + hi) : log_beta + 1.0;
        } else {
            hi = log_beta;
            log_beta = std::isfinite(lo) ? 0.5 * (lo + hi) : log_beta - 1.0;
        }
        entropy = evaluate(std::exp(log_beta));
    }
    out.iterations = it;
    out.bandwidth = std::sqrt(0.5 * std::exp(-log_beta));
    out.perplexity = std::exp(entropy);
    if (std::abs(out.perplexity - target) > 1e-4 * target) {
        out.warning = "perplexity " + std::to_string(target) + " unreachable; reached " +
                      std::to_string(out.perplexity) + " after " + std::to_string(it) + " iterations";
    }
    return out;
}

/// Pairwise squared Euclidean distances between rows.
inline Eigen::MatrixXd squared_distances(const Eigen::Ref<const Eigen::MatrixXd>& x) {
    const auto n = x.rows();
    Eigen::MatrixXd d(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        d(i, i) = 0.0;
        for (Eigen::Index j = i + 1; j < n; ++j) {
            const double v = (x.row(i) - x.row(j)).squaredNorm();
            d(i, j) = v;
            d(j, i) = v;
        }
    }
    return d;
}

struct ConditionalAffinities {
    Eigen::MatrixXd p; // row i holds p_{j|i}; zero diagonal
    std::vector<double> bandwidths;
    std::vector<std::string> warnings;
};

inline ConditionalAffinities conditional_matrix(const Eigen::Ref<const Eigen::MatrixXd>& points, double perplexity) {
    const auto n = points.rows();
    if (n < 3) {
        throw std::invalid_argument("conditional affinities need at least 3 points");
    }
    const Eigen::MatrixXd d = squared_distances(points);
    ConditionalAffinities out;
    out.p = Eigen::MatrixXd::Zero(n, n);
    out.bandwidths.resize(static_cast<std::size_t>(n));
    std::vector<double> others(static_cast<std::size_t>(n - 1));
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0, k = 0; j < n; ++j) {
            if (j != i) {
                others[static_cast<std::size_t>(k++)] = d(i, j);
            }
        }
        auto cal = calibrate_bandwidth(others, perplexity);
        for (Eigen::Index j = 0, k = 0; j < n; ++j) {
            if (j != i) {
                out.p(i, j) = cal.row[static_cast<std::size_t>(k++)];
            }
        }
        out.bandwidths[static_cast<std::size_t>(i)] = cal.bandwidth;
        if (!cal.warning.empty()) {
            out.warnings.push_back("row " + std::to_string(i) + ": " + cal.warning);
        }
    }
    return out;
}

namespace detail {

inline double log_sum_exp(std::span<const double> values) {
    double top = -std::numeric_limits<double>::infinity();
    for (double v : values) {
        top = std::max(top, v);
    }
    if (!std::isfinite(top)) {
        return top;
    }
    double sum = 0.0;
    for (double v : values) {
        sum += std::exp(v - top);
    }
    return top + std::log(sum);
}

} // namespace detail

/**
 * Gradient of the KL cost with respect to `tau` from the symmetrized input
 * affinities `sym` (p_ij + p_ji, zero diagonal), scaled by `exaggeration`.
 * Writes into `gradient`, which must already be n x dims.
 */
inline void tsne_gradient(const Eigen::MatrixXd& sym, const Eigen::Ref<const Eigen::MatrixXd>& tau, Kernel kernel,
                          Eigen::MatrixXd& gradient, double exaggeration, Eigen::MatrixXd& scratch) {
    const auto n = tau.rows();
    const auto dims = tau.cols();
    gradient.setZero(n, dims);
    scratch.resize(n, n);

    if (kernel == Kernel::StudentT) {
        // scratch holds the Student-t weights w_ij = 1 / (1 + d_ij).
        double z = 0.0;
        for (Eigen::Index j = 0; j < n; ++j) {
            scratch(j, j) = 0.0;
            for (Eigen::Index i = j + 1; i < n; ++i) {
                double d = 0.0;
                for (Eigen::Index k = 0; k < dims; ++k) {
                    const double diff = tau(i, k) - tau(j, k);
                    d += diff * diff;
                }
                const double w = 1.0 / (1.0 + d);
                scratch(i, j) = w;
                scratch(j, i) = w;
                z += 2.0 * w;
            }
        }
        const double scale = exaggeration / (2.0 * static_cast<double>(n));
        for (Eigen::Index j = 0; j < n; ++j) {
            for (Eigen::Index i = j + 1; i < n; ++i) {
                const double w = scratch(i, j);
                const double coeff = 4.0 * (scale * sym(i, j) - w / z) * w;
                for (Eigen::Index k = 0; k < dims; ++k) {
                    const double step = coeff * (tau(i, k) - tau(j, k));
                    gradient(i, k) += step;
                    gradient(j, k) -= step;
                }
            }
        }
        return;
    }

    // scratch(j, i) holds q_{j|i} = exp(-d_ij) / sum_k exp(-d_ik), computed column by column.
    for (Eigen::Index i = 0; i < n; ++i) {
        double dmin = std::numeric_limits<double>::infinity();
        for (Eigen::Index j = 0; j < n; ++j) {
            double d = 0.0;
            for (Eigen::Index k = 0; k < dims; ++k) {
                const double diff = tau(i, k) - tau(j, k);
                d += diff * diff;
            }
            scratch(j, i) = d;
            if (j != i) {
                dmin = std::min(dmin, d);
            }
        }
        double sum = 0.0;
        for (Eigen::Index j = 0; j < n; ++j) {
            const double e = j == i ? 0.0 : std::exp(dmin - scratch(j, i));
            scratch(j, i) = e;
            sum += e;
        }
        scratch.col(i) /= sum;
    }
    for (Eigen::Index j = 0; j < n; ++j) {
        for (Eigen::Index i = j + 1; i < n; ++i) {
            const double coeff = 2.0 * (exaggeration * sym(i, j) - scratch(j, i) - scratch(i, j));
            for (Eigen::Index k = 0; k < dims; ++k) {
                const double step = coeff * (tau(i, k) - tau(j, k));
                gradient(i, k) += step;
                gradient(j, k) -= step;
            }
        }
    }
}

/**
 * KL cost and its gradient with respect to `tau`. The input affinities are
 * multiplied by `exaggeration` for the gradient only; the returned cost always
 * uses the plain affinities.
 */
inline double tsne_cost_gradient(const Eigen::Ref<const Eigen::MatrixXd>& conditional,
                                 const Eigen::Ref<const Eigen::MatrixXd>& tau, Kernel kernel, Eigen::MatrixXd* gradient,
                                 double exaggeration = 1.0) {
    const auto n = tau.rows();
    if (conditional.rows() != n || conditional.cols() != n) {
        throw std::invalid_argument("affinity matrix does not match the embedding size");
    }
    if (gradient) {
        const Eigen::MatrixXd sym = conditional + conditional.transpose();
        Eigen::MatrixXd scratch;
        tsne_gradient(sym, tau, kernel, *gradient, exaggeration, scratch);
    }
    const Eigen::MatrixXd d = squared_distances(tau);
    double cost = 0.0;

    if (kernel == Kernel::StudentT) {
        const double scale = 1.0 / (2.0 * static_cast<double>(n));
        double z = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            for (Eigen::Index j = 0; j < n; ++j) {
                if (i != j) {
                    z += 1.0 / (1.0 + d(i, j));
                }
            }
        }
        const double log_z = std::log(z);
        for (Eigen::Index i = 0; i < n; ++i) {
            for (Eigen::Index j = 0; j < n; ++j) {
                const double pij = (conditional(i, j) + conditional(j, i)) * scale;
                if (i != j && pij > 0.0) {
                    cost += pij * (std::log(pij) + std::log1p(d(i, j)) + log_z);
                }
            }
        }
        return cost;
    }

    // log q_{j|i} = -d_ij - logsumexp_k(-d_ik)
    std::vector<double> exponents;
    exponents.reserve(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
        exponents.clear();
        for (Eigen::Index k = 0; k < n; ++k) {
            if (k != i) {
                exponents.push_back(-d(i, k));
            }
        }
        const double lse = detail::log_sum_exp(exponents);
        for (Eigen::Index j = 0; j < n; ++j) {
            if (i != j && conditional(i, j) > 0.0) {
                cost += conditional(i, j) * (std::log(conditional(i, j)) + d(i, j) + lse);
            }
        }
    }
    return cost;
}

/// KL cost only. Terms with zero input affinity contribute 0.
inline double tsne_cost(const Eigen::Ref<const Eigen::MatrixXd>& conditional, const Eigen::Ref<const Eigen::MatrixXd>& tau,
                        Kernel kernel) {
    return tsne_cost_gradient(conditional, tau, kernel, nullptr);
}

struct NeighborEmbedding {
    Eigen::MatrixXd tau; // n x output_dim
    std::vector<double> bandwidths;
    double initial_cost = 0.0;
    double final_cost = 0.0;
    std::vector<std::pair<int, double>> cost_trace; // (iteration, cost)
    TsneConfig config;
    std::vector<std::string> sample_ids;
    std::vector<std::string> warnings;
};

class TsneDivergence : public std::runtime_error {
public:
    TsneDivergence(int iteration, std::vector<std::pair<int, double>> trace)
        : std::runtime_error("t-SNE optimization produced a non-finite value at iteration " + std::to_string(iteration)),
          iteration_(iteration), trace_(std::move(trace)) {}

    int iteration() const { return iteration_; }
    const std::vector<std::pair<int, double>>& trace() const { return trace_; }

private:
    int iteration_;
    std::vector<std::pair<int, double>> trace_;
};

/**
 * Embeds the rows of `points` into `config.output_dim` dimensions.
 *
 * Gradient descent with momentum, per-coordinate adaptive gains and early
 * exaggeration; the embedding is re-centered after every step. Initial
 * coordinates are drawn from N(0, 1e-4^2) with the configured seed.
 */
inline NeighborEmbedding fit_tsne(const Eigen::Ref<const Eigen::MatrixXd>& points, const TsneConfig& config) {
    const auto n = points.rows();
    if (n < 5) {
        throw std::invalid_argument("t-SNE needs at least 5 points, got " + std::to_string(n));
    }
    if (config.output_dim < 1) {
        throw std::invalid_argument("t-SNE output dimension must be >= 1");
    }
    if (!(config.perplexity < static_cast<double>(n))) {
        throw std::invalid_argument("perplexity " + std::to_string(config.perplexity) + " must be below the point count " +
                                    std::to_string(n));
    }
    if (config.barnes_hut_theta != 0.0) {
        throw std::invalid_argument("only exact t-SNE (theta = 0) is implemented");
    }

    NeighborEmbedding out;
    out.config = config;
    auto affinities = conditional_matrix(points, config.perplexity);
    out.bandwidths = std::move(affinities.bandwidths);
    out.warnings = std::move(affinities.warnings);
    const Eigen::MatrixXd& p = affinities.p;

    const auto dims = static_cast<Eigen::Index>(config.output_dim);
    Rng rng(config.seed);
    Eigen::MatrixXd tau(n, dims);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index k = 0; k < dims; ++k) {
            tau(i, k) = rng.normal(0.0, 1e-4);
        }
    }

    out.initial_cost = tsne_cost(p, tau, config.kernel);
    out.cost_trace.emplace_back(0, out.initial_cost);

    const Eigen::MatrixXd sym = p + p.transpose();
    Eigen::MatrixXd gradient(n, dims), scratch(n, n);
    Eigen::MatrixXd velocity = Eigen::MatrixXd::Zero(n, dims);
    Eigen::MatrixXd gains = Eigen::MatrixXd::Ones(n, dims);

    for (int it = 0; it < config.iterations; ++it) {
        const double exaggeration = it < config.exaggeration_iterations ? config.early_exaggeration : 1.0;
        const double momentum = it < config.momentum_switch_iteration ? config.initial_momentum : config.final_momentum;
        tsne_gradient(sym, tau, config.kernel, gradient, exaggeration, scratch);

        for (Eigen::Index i = 0; i < n; ++i) {
            for (Eigen::Index k = 0; k < dims; ++k) {
                const bool same_sign = (gradient(i, k) > 0.0) == (velocity(i, k) > 0.0);
                if (config.adaptive_gains) {
                    gains(i, k) = same_sign ? std::max(gains(i, k) * 0.8, 0.01) : gains(i, k) + 0.2;
                }
                velocity(i, k) = momentum * velocity(i, k) - config.learning_rate * gains(i, k) * gradient(i, k);
                tau(i, k) += velocity(i, k);
            }
        }
        tau.rowwise() -= tau.colwise().mean();

        if (!tau.allFinite()) {
            out.cost_trace.emplace_back(it, std::numeric_limits<double>::quiet_NaN());
            throw TsneDivergence(it, out.cost_trace);
        }
        if (config.cost_trace_interval > 0 && (it + 1) % config.cost_trace_interval == 0) {
            const double cost = tsne_cost(p, tau, config.kernel);
            out.cost_trace.emplace_back(it + 1, cost);
            if (!std::isfinite(cost)) {
                throw TsneDivergence(it, out.cost_trace);
            }
        }
    }

    out.final_cost = tsne_cost(p, tau, config.kernel);
    if (!std::isfinite(out.final_cost)) {
        throw TsneDivergence(config.iterations, out.cost_trace);
    }
    if (out.cost_trace.back().first != config.iterations) {
        out.cost_trace.emplace_back(config.iterations, out.final_cost);
    }
    out.tau = std::move(tau);
    return out;
}

inline void write_embedding_csv(const std::string& path, const NeighborEmbedding& e) {
    auto out = open_output(path);
    out << "sample_id";
    for (Eigen::Index k = 0; k < e.tau.cols(); ++k) {
        out << ",t" << k;
    }
    out << '\n';
    for (Eigen::Index i = 0; i < e.tau.rows(); ++i) {
        out << (static_cast<std::size_t>(i) < e.sample_ids.size() ? e.sample_ids[static_cast<std::size_t>(i)]
                                                                   : std::to_string(i));
        for (Eigen::Index k = 0; k < e.tau.cols(); ++k) {
            out << ',' << format_double(e.tau(i, k));
        }
        out << '\n';
    }
}

/// JSON sidecar: configuration, bandwidths, costs and warnings.
inline nlohmann::json embedding_sidecar(const NeighborEmbedding& e) {
    nlohmann::json trace = nlohmann::json::array();
    for (const auto& [it, c] : e.cost_trace) {
        trace.push_back({{"iteration", it}, {"cost", c}});
    }
    return {{"config", to_json(e.config)},
            {"bandwidths", e.bandwidths},
            {"initial_cost", e.initial_cost},
            {"final_cost", e.final_cost},
            {"cost_trace", trace},
            {"warnings", e.warnings}};
}

} // namespace fewshot

#endif
