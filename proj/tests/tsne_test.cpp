#include <gtest/gtest.h>

#include "fewshot/random.hpp"
#include "fewshot/tsne.hpp"
#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

using fewshot::Kernel;

namespace {

Eigen::MatrixXd to_eigen(const oracle::Matrix& m) {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(m.size()), static_cast<Eigen::Index>(m.front().size()));
    for (std::size_t r = 0; r < m.size(); ++r) {
        for (std::size_t c = 0; c < m[r].size(); ++c) {
            out(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = m[r][c];
        }
    }
    return out;
}

oracle::Matrix to_rows(const Eigen::MatrixXd& m) {
    oracle::Matrix out(static_cast<std::size_t>(m.rows()), std::vector<double>(static_cast<std::size_t>(m.cols())));
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            out[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)] = m(r, c);
        }
    }
    return out;
}

// 3 isotropic clusters, `per` points each, means 10 sigma apart along distinct axes.
Eigen::MatrixXd three_clusters(int per, int dim, std::uint64_t seed) {
    fewshot::Rng rng(seed);
    Eigen::MatrixXd x(3 * per, dim);
    const double offset = 10.0 / std::sqrt(2.0);
    for (int c = 0; c < 3; ++c) {
        for (int i = 0; i < per; ++i) {
            for (int d = 0; d < dim; ++d) {
                x(c * per + i, d) = rng.normal() + (d == c ? offset : 0.0);
            }
        }
    }
    return x;
}

} // namespace

TEST(Calibration, EquidistantNeighborsGiveUniformRow) {
    const std::vector<double> d(5, 2.25);
    const auto cal = fewshot::calibrate_bandwidth(d, 3.0);
    for (double p : cal.row) {
        EXPECT_DOUBLE_EQ(p, 0.2);
    }
    EXPECT_DOUBLE_EQ(fewshot::perplexity_of(cal.row), 5.0);
    EXPECT_FALSE(cal.warning.empty());
}

TEST(Calibration, AllZeroDistancesWarn) {
    const std::vector<double> d(4, 0.0);
    const auto cal = fewshot::calibrate_bandwidth(d, 2.0);
    EXPECT_DOUBLE_EQ(cal.bandwidth, 1.0);
    EXPECT_DOUBLE_EQ(cal.row[3], 0.25);
    EXPECT_NE(cal.warning.find("zero"), std::string::npos);
}

TEST(Calibration, TwoNeighborsHitTargetEntropy) {
    // Squared distances 1 and 4; reference values from a 30-digit root solve.
    const std::vector<double> d = {1.0, 4.0};
    const auto cal = fewshot::calibrate_bandwidth(d, 1.5);
    EXPECT_NEAR(cal.bandwidth, 0.909593380709149457, 1e-6);
    EXPECT_NEAR(cal.row[0], 0.859723493002535263, 1e-6);
    EXPECT_NEAR(fewshot::perplexity_of(cal.row), 1.5, 1e-4 * 1.5);
    EXPECT_TRUE(cal.warning.empty());

    // The returned row is the kernel definition evaluated at the returned h.
    const oracle::Matrix pts = {{0.0}, {1.0}, {-2.0}};
    const auto row = oracle::conditional_row(pts, 0, cal.bandwidth);
    EXPECT_NEAR(cal.row[0], row[1], 1e-12);
    EXPECT_NEAR(cal.row[1], row[2], 1e-12);
}

TEST(Calibration, RejectsBadInput) {
    const std::vector<double> d = {1.0, 2.0, 3.0};
    EXPECT_THROW(fewshot::calibrate_bandwidth(d, 3.0), std::invalid_argument);
    EXPECT_THROW(fewshot::calibrate_bandwidth(d, 0.0), std::invalid_argument);
    EXPECT_THROW(fewshot::calibrate_bandwidth(std::vector<double>{1.0}, 0.5), std::invalid_argument);
    EXPECT_THROW(fewshot::calibrate_bandwidth(std::vector<double>{1.0, -1.0}, 1.5), std::invalid_argument);
    EXPECT_THROW(fewshot::calibrate_bandwidth(std::vector<double>{1.0, NAN}, 1.5), std::invalid_argument);
}

TEST(Calibration, PerplexityWithinToleranceOnRandomRows) {
    for (std::uint32_t seed = 1; seed <= 20; ++seed) {
        const auto pts = oracle::random_matrix(40, 6, seed, 3.0);
        std::vector<double> d;
        for (std::size_t j = 1; j < pts.size(); ++j) {
            d.push_back(oracle::squared_distance(pts[0], pts[j]));
        }
        for (double target : {2.0, 5.0, 15.0, 30.0}) {
            const auto cal = fewshot::calibrate_bandwidth(d, target);
            EXPECT_LE(std::abs(fewshot::perplexity_of(cal.row) - target), 1e-4 * target);
            EXPECT_LE(cal.iterations, 100);
        }
    }
}

TEST(ConditionalMatrix, EquilateralTriangle) {
    Eigen::MatrixXd x(3, 2);
    x << 0, 0, 1, 0, 0.5, std::sqrt(3.0) / 2.0;
    const auto aff = fewshot::conditional_matrix(x, 1.5);
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) {
            EXPECT_NEAR(aff.p(i, j), i == j ? 0.0 : 0.5, 1e-12);
        }
    }
}

TEST(ConditionalMatrix, DuplicatedPairPicksEachOther) {
    Eigen::MatrixXd x(6, 2);
    x << 0, 0, 0, 0, 20, 0, 0, 20, -20, 0, 0, -20;
    const auto aff = fewshot::conditional_matrix(x, 1.01);
    EXPECT_GT(aff.p(0, 1), 0.99);
    EXPECT_GT(aff.p(1, 0), 0.99);
}

TEST(ConditionalMatrix, MatchesDirectFormula) {
    const auto raw = oracle::random_matrix(10, 5, 42);
    const auto aff = fewshot::conditional_matrix(to_eigen(raw), 4.0);
    for (std::size_t i = 0; i < raw.size(); ++i) {
        const auto row = oracle::conditional_row(raw, i, aff.bandwidths[i]);
        double sum = 0.0;
        for (std::size_t j = 0; j < raw.size(); ++j) {
            EXPECT_NEAR(aff.p(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)), row[j], 1e-10);
            sum += aff.p(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
        }
        EXPECT_NEAR(sum, 1.0, 1e-12);
        EXPECT_EQ(aff.p(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)), 0.0);
    }
    EXPECT_THROW(fewshot::conditional_matrix(Eigen::MatrixXd::Zero(2, 2), 1.0), std::invalid_argument);
}

TEST(TsneCost, MatchesSummationOracle) {
    for (std::uint32_t seed : {1u, 2u, 3u}) {
        const auto pts = oracle::random_matrix(4, 3, seed);
        const auto y = oracle::random_matrix(4, 2, seed + 100);
        const auto p = fewshot::conditional_matrix(to_eigen(pts), 2.0).p;
        const auto prows = to_rows(p);
        EXPECT_NEAR(fewshot::tsne_cost(p, to_eigen(y), Kernel::PaperSne), oracle::sne_cost(prows, y), 1e-10);
        EXPECT_NEAR(fewshot::tsne_cost(p, to_eigen(y), Kernel::StudentT), oracle::tsne_cost(prows, y), 1e-10);
    }
}

TEST(TsneCost, ZeroWhenOutputMatchesInput) {
    // With bandwidth 1/sqrt(2) the input conditionals equal the output ones on the same points.
    const auto raw = oracle::random_matrix(6, 2, 5);
    Eigen::MatrixXd p = Eigen::MatrixXd::Zero(6, 6);
    for (std::size_t i = 0; i < raw.size(); ++i) {
        const auto row = oracle::conditional_row(raw, i, 1.0 / std::sqrt(2.0));
        for (std::size_t j = 0; j < raw.size(); ++j) {
            p(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = row[j];
        }
    }
    EXPECT_NEAR(fewshot::tsne_cost(p, to_eigen(raw), Kernel::PaperSne), 0.0, 1e-12);
}

TEST(TsneCost, NonNegative) {
    for (std::uint32_t seed = 10; seed < 30; ++seed) {
        const auto p = fewshot::conditional_matrix(to_eigen(oracle::random_matrix(8, 4, seed)), 3.0).p;
        const auto y = to_eigen(oracle::random_matrix(8, 2, seed * 7, 5.0));
        EXPECT_GE(fewshot::tsne_cost(p, y, Kernel::PaperSne), 0.0);
        EXPECT_GE(fewshot::tsne_cost(p, y, Kernel::StudentT), 0.0);
    }
}

TEST(TsneCost, GradientMatchesFiniteDifferences) {
    for (Kernel kernel : {Kernel::StudentT, Kernel::PaperSne}) {
        for (std::uint32_t seed : {3u, 4u, 5u}) {
            const auto p = fewshot::conditional_matrix(to_eigen(oracle::random_matrix(10, 4, seed)), 3.0).p;
            const Eigen::MatrixXd y = to_eigen(oracle::random_matrix(10, 2, seed + 50, 2.0));
            Eigen::MatrixXd grad;
            fewshot::tsne_cost_gradient(p, y, kernel, &grad);

            std::vector<double> flat(y.data(), y.data() + y.size());
            const auto f = [&](const std::vector<double>& v) {
                const Eigen::Map<const Eigen::MatrixXd> m(v.data(), y.rows(), y.cols());
                return fewshot::tsne_cost(p, m, kernel);
            };
            const auto numeric = oracle::central_difference(f, flat, 1e-5);
            const std::vector<double> analytic(grad.data(), grad.data() + grad.size());
            EXPECT_LT(oracle::relative_error(analytic, numeric), 1e-4) << fewshot::to_string(kernel) << " seed " << seed;
        }
    }
}

TEST(TsneCost, InvariantUnderRigidMotion) {
    const auto p = fewshot::conditional_matrix(to_eigen(oracle::random_matrix(9, 3, 77)), 3.0).p;
    const Eigen::MatrixXd y = to_eigen(oracle::random_matrix(9, 2, 78, 3.0));
    const double angle = 0.7;
    Eigen::Matrix2d rot;
    rot << std::cos(angle), -std::sin(angle), std::sin(angle), std::cos(angle);
    const Eigen::MatrixXd moved = (y * rot.transpose()).rowwise() + Eigen::RowVector2d(4.0, -2.5);
    for (Kernel kernel : {Kernel::StudentT, Kernel::PaperSne}) {
        EXPECT_NEAR(fewshot::tsne_cost(p, y, kernel), fewshot::tsne_cost(p, moved, kernel), 1e-9);
    }
}

namespace {

double own_cluster_fraction(const Eigen::MatrixXd& tau, int per) {
    const auto n = tau.rows();
    int good = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
        std::vector<std::pair<double, Eigen::Index>> dist;
        for (Eigen::Index j = 0; j < n; ++j) {
            if (j != i) {
                dist.emplace_back((tau.row(i) - tau.row(j)).squaredNorm(), j);
            }
        }
        std::partial_sort(dist.begin(), dist.begin() + 10, dist.end());
        int same = 0;
        for (int k = 0; k < 10; ++k) {
            same += dist[static_cast<std::size_t>(k)].second / per == i / per;
        }
        good += same > 5;
    }
    return static_cast<double>(good) / static_cast<double>(n);
}

} // namespace

TEST(FitTsne, SeparatesClustersBothVariants) {
    const auto x = three_clusters(30, 50, 2024);
    for (Kernel kernel : {Kernel::StudentT, Kernel::PaperSne}) {
        auto config = fewshot::TsneConfig::defaults(kernel);
        config.seed = 9;
        const auto e = fewshot::fit_tsne(x, config);
        EXPECT_GE(own_cluster_fraction(e.tau, 30), 0.95) << fewshot::to_string(kernel);
        EXPECT_LT(e.final_cost, e.initial_cost);
        EXPECT_EQ(e.cost_trace.front().first, 0);
        EXPECT_EQ(e.cost_trace.back().first, config.iterations);
        EXPECT_EQ(e.bandwidths.size(), 90u);
    }
}

TEST(FitTsne, DeterministicForSeed) {
    const auto x = three_clusters(8, 5, 3);
    fewshot::TsneConfig config;
    config.perplexity = 5.0;
    config.iterations = 300;
    const auto a = fewshot::fit_tsne(x, config);
    const auto b = fewshot::fit_tsne(x, config);
    EXPECT_TRUE(a.tau == b.tau);
    config.seed = 43;
    const auto c = fewshot::fit_tsne(x, config);
    EXPECT_FALSE(a.tau == c.tau);
}

TEST(FitTsne, RejectsBadConfig) {
    const auto x = three_clusters(2, 3, 1);
    fewshot::TsneConfig config;
    EXPECT_THROW(fewshot::fit_tsne(x, config), std::invalid_argument); // perplexity 30 >= 6 points
    config.perplexity = 2.0;
    config.barnes_hut_theta = 0.5;
    EXPECT_THROW(fewshot::fit_tsne(x, config), std::invalid_argument);
    EXPECT_THROW(fewshot::fit_tsne(three_clusters(1, 3, 1), fewshot::TsneConfig{}), std::invalid_argument);
}

TEST(FitTsne, DivergenceReportsIteration) {
    const auto x = three_clusters(4, 3, 1);
    fewshot::TsneConfig config;
    config.perplexity = 3.0;
    config.learning_rate = 1e300;
    try {
        fewshot::fit_tsne(x, config);
        FAIL() << "expected divergence";
    } catch (const fewshot::TsneDivergence& e) {
        EXPECT_GE(e.iteration(), 0);
        EXPECT_FALSE(e.trace().empty());
    }
}
