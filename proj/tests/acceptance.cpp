// Acceptance suite: prints one PASS/FAIL line per criterion and exits
// nonzero if any criterion fails. Independent reference computations come
// from oracles.hpp.

#include "fewshot/dataset.hpp"
#include "fewshot/density.hpp"
#include "fewshot/evaluation.hpp"
#include "fewshot/pca.hpp"
#include "fewshot/pipeline.hpp"
#include "fewshot/predictor.hpp"
#include "fewshot/preprocess.hpp"
#include "fewshot/synth.hpp"
#include "fewshot/tsne.hpp"
#include "oracles.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* format, double a, double b = 0.0, double c = 0.0) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), format, a, b, c);
    return buf;
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

Eigen::MatrixXd random_eigen(Eigen::Index rows, Eigen::Index cols, std::uint32_t seed, double scale = 1.0) {
    const auto m = oracle::random_matrix(static_cast<std::size_t>(rows), static_cast<std::size_t>(cols), seed, scale);
    Eigen::MatrixXd out(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
        for (Eigen::Index c = 0; c < cols; ++c) {
            out(r, c) = m[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
        }
    }
    return out;
}

// 1 -------------------------------------------------------------------------

Outcome auc_oracle() {
    std::mt19937 gen(101);
    int mismatches = 0;
    for (int trial = 0; trial < 200; ++trial) {
        const int n = 2 + static_cast<int>(gen() % 49);
        const int levels = 1 + static_cast<int>(gen() % 8); // few levels force ties
        std::vector<double> scores(static_cast<std::size_t>(n));
        std::vector<std::uint8_t> labels(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            scores[static_cast<std::size_t>(i)] = static_cast<double>(gen() % static_cast<unsigned>(levels)) / levels;
            labels[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(gen() % 2);
        }
        labels[0] = 1;
        labels[1] = 0;
        const auto roc = fewshot::roc_auc(scores, labels);
        if (!roc.auc || *roc.auc != oracle::mann_whitney_auc(scores, labels)) {
            ++mismatches;
        }
    }
    return {mismatches == 0, std::to_string(mismatches) + " of 200 instances differ from the all-pairs count"};
}

// 2 -------------------------------------------------------------------------

Outcome gradient_checks() {
    double worst_tsne = 0.0, worst_predictor = 0.0;
    int instances = 0;
    for (auto kernel : {fewshot::Kernel::StudentT, fewshot::Kernel::PaperSne}) {
        for (std::uint32_t seed = 1; seed <= 3; ++seed) {
            const Eigen::MatrixXd x = random_eigen(12, 5, seed, 2.0);
            const Eigen::MatrixXd p = fewshot::conditional_matrix(x, 4.0).p;
            const Eigen::MatrixXd y = random_eigen(12, 2, seed + 50, 1.5);
            Eigen::MatrixXd grad;
            fewshot::tsne_cost_gradient(p, y, kernel, &grad);

            const auto prows = to_rows(p);
            std::vector<double> flat(y.data(), y.data() + y.size()); // column-major
            auto cost = [&](const std::vector<double>& v) {
                oracle::Matrix yy(12, std::vector<double>(2));
                for (std::size_t i = 0; i < 12; ++i) {
                    yy[i][0] = v[i];
                    yy[i][1] = v[12 + i];
                }
                return kernel == fewshot::Kernel::StudentT ? oracle::tsne_cost(prows, yy) : oracle::sne_cost(prows, yy);
            };
            const auto numeric = oracle::central_difference(cost, flat, 1e-5);
            const std::vector<double> analytic(grad.data(), grad.data() + grad.size());
            worst_tsne = std::max(worst_tsne, oracle::relative_error(analytic, numeric));
            ++instances;
        }
    }

    for (std::uint32_t seed = 1; seed <= 3; ++seed) {
        const Eigen::MatrixXd features = random_eigen(40, 6, seed + 10, 3.0);
        fewshot::Predictor model;
        model.pca = fewshot::fit_pca(features, 4);
        model.reference_pi = model.pca.project_rows(features);
        model.reference_q = (random_eigen(40, 2, seed + 20).array() + 1.0) / 2.0;
        model.k = 3;
        model.condition_names = {"a", "b"};
        for (int i = 0; i < 40; ++i) {
            model.reference_ids.push_back("r" + std::to_string(i));
        }
        const Eigen::VectorXd gamma = random_eigen(6, 1, seed + 30, 3.0);

        // Forward model re-derived from the definition: project, take the K
        // nearest reference rows, weight by inverse distance.
        auto forward = [&](const std::vector<double>& g) {
            Eigen::VectorXd v = Eigen::Map<const Eigen::VectorXd>(g.data(), static_cast<Eigen::Index>(g.size()));
            const Eigen::VectorXd pi = model.pca.components * (v - model.pca.mean);
            std::vector<std::pair<double, Eigen::Index>> d;
            for (Eigen::Index r = 0; r < model.reference_pi.rows(); ++r) {
                d.emplace_back((model.reference_pi.row(r).transpose() - pi).norm(), r);
            }
            std::sort(d.begin(), d.end());
            double num = 0.0, den = 0.0;
            for (std::size_t k = 0; k < model.k; ++k) {
                num += model.reference_q(d[k].second, 1) / d[k].first;
                den += 1.0 / d[k].first;
            }
            return num / den;
        };
        const std::vector<double> g(gamma.data(), gamma.data() + gamma.size());
        const auto numeric = oracle::central_difference(forward, g, 1e-6);
        const Eigen::VectorXd analytic = fewshot::prediction_gradient(model, gamma, 1);
        worst_predictor = std::max(
            worst_predictor, oracle::relative_error(std::vector<double>(analytic.data(), analytic.data() + analytic.size()), numeric));
        ++instances;
    }
    return {worst_tsne < 1e-4 && worst_predictor < 1e-4,
            fmt("max relative error t-SNE %.2e, predictor %.2e", worst_tsne, worst_predictor) + " over " +
                std::to_string(instances) + " instances"};
}

// 3 -------------------------------------------------------------------------

Outcome perplexity_calibration() {
    double worst = 0.0;
    for (std::uint32_t set = 0; set < 20; ++set) {
        const Eigen::MatrixXd x = random_eigen(100, 50, 1000 + set);
        const auto affinities = fewshot::conditional_matrix(x, 30.0);
        for (Eigen::Index i = 0; i < affinities.p.rows(); ++i) {
            double entropy = 0.0; // nats
            for (Eigen::Index j = 0; j < affinities.p.cols(); ++j) {
                const double p = affinities.p(i, j);
                if (p > 0.0) {
                    entropy -= p * std::log(p);
                }
            }
            worst = std::max(worst, std::abs(std::exp(entropy) - 30.0) / 30.0);
        }
    }
    return {worst <= 1e-4, fmt("max relative perplexity error %.2e over 2000 rows", worst)};
}

// 4 -------------------------------------------------------------------------

Outcome kde_checks() {
    double worst_sum = 0.0;
    for (std::uint32_t seed = 0; seed < 10; ++seed) {
        const Eigen::MatrixXd pts = random_eigen(30, 2, 500 + seed, 2.0);
        const Eigen::MatrixXd queries = random_eigen(20, 2, 600 + seed, 3.0);
        const double h = 0.3 + 0.1 * seed;
        const auto rows = to_rows(pts);
        for (Eigen::Index q = 0; q < queries.rows(); ++q) {
            const std::vector<double> tau{queries(q, 0), queries(q, 1)};
            const double expected_paper = oracle::parzen(rows, h, tau);
            // In 2-D the normalized kernel adds the factor 1 / (sqrt(2 pi) h^2).
            const double expected_norm = expected_paper / (std::sqrt(2.0 * std::numbers::pi) * h * h);
            const double got_paper = fewshot::density_at(pts, h, queries.row(q).transpose(), fewshot::KernelNorm::Paper);
            const double got_norm = fewshot::density_at(pts, h, queries.row(q).transpose(), fewshot::KernelNorm::Normalized);
            worst_sum = std::max({worst_sum, std::abs(got_paper - expected_paper) / std::max(expected_paper, 1e-300),
                                  std::abs(got_norm - expected_norm) / std::max(expected_norm, 1e-300)});
        }
    }

    const Eigen::MatrixXd pts = random_eigen(40, 2, 77, 1.0);
    const double h = fewshot::scott_bandwidth(40, 2);
    const double step = 0.02;
    double integral = 0.0;
    for (double a = -6.0; a < 6.0; a += step) {
        for (double b = -6.0; b < 6.0; b += step) {
            integral += fewshot::density_at(pts, h, Eigen::Vector2d(a + step / 2, b + step / 2)) * step * step;
        }
    }
    const double scott = fewshot::scott_bandwidth(64, 2);
    const bool pass = worst_sum <= 1e-12 && std::abs(integral - 1.0) <= 1e-2 && scott == 0.5;
    return {pass, fmt("direct-sum relative error %.2e, grid integral %.6f, Scott(64, 2) = %.17g", worst_sum, integral, scott)};
}

// Shared fixture for 5, 6 and 7 ---------------------------------------------

struct Fixture {
    fewshot::Dataset dataset;
    fewshot::SplitAssignment splits;
    fewshot::FoldAssignment valid_folds;
    fewshot::FoldAssignment test_folds;
    fewshot::PipelineConfig config;
};

const Fixture& fixture() {
    static const Fixture f = [] {
        fewshot::SynthSpec spec; // 50-D, 5 x 200 frequent, 3 x 10 rare, separation 8, no noise
        spec.seed = 7;
        Fixture out;
        out.dataset = fewshot::generate(spec).dataset();
        out.config.frequent_count = 5;
        out.config.seed = 7;
        const auto balanced = fewshot::build_balanced_subset(out.dataset, out.config.frequent_count,
                                                             out.config.per_condition_cap, out.config.normal_count,
                                                             out.config.seed);
        out.splits = fewshot::assign_splits(out.dataset, balanced, out.config.seed);
        out.valid_folds = fewshot::folds_for_split(out.dataset, out.splits, fewshot::Split::Valid, 10, out.config.seed);
        out.test_folds = fewshot::folds_for_split(out.dataset, out.splits, fewshot::Split::Test, 10, out.config.seed);
        return out;
    }();
    return f;
}

std::vector<fewshot::EvaluationReport> protocol_runs; // every report produced by 5 and 6, for 7

// 5 -------------------------------------------------------------------------

Outcome few_shot_end_to_end() {
    const auto& f = fixture();
    const auto report = fewshot::cross_test(f.dataset, f.splits, f.test_folds, f.config);
    protocol_runs.push_back(report);
    std::ostringstream detail;
    bool pass = true;
    for (std::size_t c = f.config.frequent_count; c < report.rocs.size(); ++c) {
        const auto& roc = report.rocs[c];
        detail << roc.condition << " AUC " << (roc.auc ? fmt("%.4f", *roc.auc) : std::string("n/a")) << " (" << roc.positives
               << " pos); ";
        pass = pass && roc.auc && *roc.auc >= 0.95;
    }
    detail << "average " << fmt("%.4f", report.average_auc.value_or(NAN));
    return {pass, detail.str()};
}

// 6 -------------------------------------------------------------------------

Outcome degradation_sweep() {
    const auto& f = fixture();
    const std::vector<std::pair<fewshot::SweepParam, std::vector<std::string>>> grid = {
        {fewshot::SweepParam::K, {"1", "3", "9", "27"}},
        {fewshot::SweepParam::EmbedDims, {"2", "3"}},
    };
    const auto rows =
        fewshot::parameter_sweep(f.dataset, f.splits, f.test_folds, grid, f.config, fewshot::Protocol::CrossTesting);
    bool complete = rows.size() == 6;
    double best_k = -1.0, k3 = -1.0;
    std::ostringstream detail;
    for (const auto& r : rows) {
        complete = complete && r.average_auc.has_value();
        const double v = r.average_auc.value_or(NAN);
        detail << fewshot::to_string(r.param) << "=" << r.value << ":" << fmt("%.4f", v) << " ";
        if (r.param == fewshot::SweepParam::K) {
            best_k = std::max(best_k, v);
            if (r.value == "3") {
                k3 = v;
            }
        }
    }
    const bool pass = complete && k3 >= 0.0 && best_k - k3 <= 0.05;
    detail << "| K=3 gap to best " << fmt("%.4f", best_k - k3);
    return {pass, detail.str()};
}

// 7 -------------------------------------------------------------------------

Outcome protocol_invariants() {
    const auto& f = fixture();
    const auto& ds = f.dataset;

    // Re-run both protocols twice to cover CV as well and compare byte for byte.
    const auto cv_a = fewshot::cross_validate(ds, f.splits, f.valid_folds, f.config);
    const auto cv_b = fewshot::cross_validate(ds, f.splits, f.valid_folds, f.config, 3);
    const auto ct_b = fewshot::cross_test(ds, f.splits, f.test_folds, f.config);
    bool identical = fewshot::to_json(cv_a).dump() == fewshot::to_json(cv_b).dump();
    if (!protocol_runs.empty()) {
        identical = identical && fewshot::to_json(protocol_runs.front()).dump() == fewshot::to_json(ct_b).dump();
    }

    std::size_t leaks = 0, wrong_fold = 0, duplicates = 0, missing = 0, size_mismatch = 0;
    auto check = [&](const fewshot::EvaluationReport& report, fewshot::Split evaluated, const fewshot::FoldAssignment& folds,
                     bool fixed_valid) {
        std::map<std::string, int> seen;
        for (const auto& p : report.predictions) {
            ++seen[p.sample_id];
            if (folds.fold.at(p.sample_id) != p.fold) {
                ++wrong_fold;
            }
        }
        const auto eval_rows = f.splits.indices(ds, evaluated);
        for (auto i : eval_rows) {
            const auto it = seen.find(ds.records[i].sample_id);
            if (it == seen.end()) {
                ++missing;
            } else if (it->second != 1) {
                ++duplicates;
            }
        }
        for (const auto& summary : report.folds) {
            std::set<std::string> predicted_patients, reference_patients;
            std::size_t reference = 0;
            for (auto i : eval_rows) {
                const auto& r = ds.records[i];
                if (folds.fold.at(r.sample_id) == summary.fold) {
                    predicted_patients.insert(r.patient_id);
                } else {
                    reference_patients.insert(r.patient_id);
                    ++reference;
                }
            }
            if (fixed_valid) {
                for (auto i : f.splits.indices(ds, fewshot::Split::Valid)) {
                    reference_patients.insert(ds.records[i].patient_id);
                    ++reference;
                }
            }
            for (const auto& p : predicted_patients) {
                leaks += reference_patients.count(p);
            }
            size_mismatch += reference != summary.reference_size;
        }
    };
    check(cv_a, fewshot::Split::Valid, f.valid_folds, false);
    check(ct_b, fewshot::Split::Test, f.test_folds, true);
    for (const auto& r : protocol_runs) {
        check(r, fewshot::Split::Test, f.test_folds, true);
    }
    std::ostringstream detail;
    detail << "patient leaks " << leaks << ", wrong fold " << wrong_fold << ", unscored " << missing << ", scored twice " << duplicates
           << ", reference size mismatches " << size_mismatch << ", reruns identical " << (identical ? "yes" : "no");
    return {leaks == 0 && wrong_fold == 0 && missing == 0 && duplicates == 0 && size_mismatch == 0 && identical, detail.str()};
}

// 8 -------------------------------------------------------------------------

Outcome balanced_caps() {
    std::vector<fewshot::SampleRecord> records;
    std::mt19937 gen(8);
    std::normal_distribution<double> normal;
    auto add = [&](std::uint8_t big, std::uint8_t small, std::uint8_t rare) {
        fewshot::SampleRecord r;
        r.sample_id = "s" + std::to_string(records.size());
        r.patient_id = "p" + std::to_string(records.size() / 2);
        r.features = {normal(gen), normal(gen)};
        r.labels = {big, small, rare};
        records.push_back(std::move(r));
    };
    for (int i = 0; i < 1950; ++i) add(1, 0, 0);
    for (int i = 0; i < 50; ++i) add(1, 0, 1); // big and rare together
    for (int i = 0; i < 300; ++i) add(0, 1, 0);
    for (int i = 0; i < 20; ++i) add(0, 0, 1);
    for (int i = 0; i < 400; ++i) add(0, 0, 0);
    const auto ds = fewshot::make_dataset(records, {"big", "small", "rare"});

    const auto selected = fewshot::build_balanced_subset(ds, 2, 1500, 5000, 8);
    std::size_t big = 0, rare = 0;
    for (const auto& id : selected) {
        const auto& r = ds.records[ds.index_of(id)];
        big += r.labels[0];
        rare += r.labels[2];
    }
    std::ostringstream detail;
    detail << "big-condition positives selected " << big << " of 2000, rare-positive selected " << rare
           << ", subset size " << selected.size();
    return {big == 1500 && rare == 0, detail.str()};
}

// 9 -------------------------------------------------------------------------

Outcome tsne_quality() {
    const int per_cluster = 100, dim = 50;
    std::mt19937 gen(9);
    std::normal_distribution<double> normal;
    Eigen::MatrixXd x(3 * per_cluster, dim);
    std::vector<int> cluster;
    for (int c = 0; c < 3; ++c) {
        for (int i = 0; i < per_cluster; ++i) {
            for (int d = 0; d < dim; ++d) {
                x(c * per_cluster + i, d) = normal(gen) + (d == c ? 10.0 : 0.0);
            }
            cluster.push_back(c);
        }
    }
    std::ostringstream detail;
    bool pass = true;
    for (auto kernel : {fewshot::Kernel::StudentT, fewshot::Kernel::PaperSne}) {
        auto config = fewshot::TsneConfig::defaults(kernel);
        config.seed = 9;
        const auto e = fewshot::fit_tsne(x, config);
        int majority = 0;
        for (Eigen::Index i = 0; i < e.tau.rows(); ++i) {
            std::vector<std::pair<double, Eigen::Index>> d;
            for (Eigen::Index j = 0; j < e.tau.rows(); ++j) {
                if (j != i) {
                    d.emplace_back((e.tau.row(i) - e.tau.row(j)).squaredNorm(), j);
                }
            }
            std::partial_sort(d.begin(), d.begin() + 10, d.end());
            int same = 0;
            for (int k = 0; k < 10; ++k) {
                same += cluster[static_cast<std::size_t>(d[static_cast<std::size_t>(k)].second)] ==
                        cluster[static_cast<std::size_t>(i)];
            }
            majority += same > 5;
        }
        const double fraction = static_cast<double>(majority) / static_cast<double>(e.tau.rows());
        detail << fewshot::to_string(kernel) << fmt(" %.3f (cost %.3g -> %.3g); ", fraction, e.initial_cost, e.final_cost);
        pass = pass && fraction >= 0.95 && e.final_cost < e.initial_cost;
    }
    return {pass, detail.str()};
}

// 10 ------------------------------------------------------------------------

Outcome preprocessing() {
    bool sizes_ok = true;
    for (auto [w, h] : std::vector<std::pair<int, int>>{{640, 480}, {299, 299}, {120, 300}, {1000, 1000}, {17, 9}}) {
        fewshot::RgbImage img(w, h);
        for (auto& v : img.pixels) {
            v = 120;
        }
        const auto out = fewshot::preprocess_fundus(img).image;
        sizes_ok = sizes_ok && out.width == 299 && out.height == 299;
    }

    int worst_y = 0, worst_chroma = 0;
    const std::vector<std::array<std::uint8_t, 3>> colors = {{120, 120, 120}, {200, 90, 40}, {40, 160, 90},
                                                             {90, 70, 180},   {30, 30, 30},  {230, 220, 210}};
    for (const auto& c : colors) {
        fewshot::RgbImage img(320, 320);
        for (std::size_t i = 0; i < img.pixels.size(); i += 3) {
            std::copy(c.begin(), c.end(), img.pixels.begin() + static_cast<std::ptrdiff_t>(i));
        }
        const auto out = fewshot::preprocess_fundus(img).image;
        cv::Mat in_ycc, out_ycc;
        cv::cvtColor(cv::Mat(1, 1, CV_8UC3, const_cast<std::uint8_t*>(c.data())), in_ycc, cv::COLOR_RGB2YCrCb);
        cv::cvtColor(cv::Mat(out.height, out.width, CV_8UC3, const_cast<std::uint8_t*>(out.pixels.data())), out_ycc,
                     cv::COLOR_RGB2YCrCb);
        const auto ref = in_ycc.at<cv::Vec3b>(0, 0);
        for (int y = 0; y < out_ycc.rows; ++y) {
            for (int x = 0; x < out_ycc.cols; ++x) {
                const auto v = out_ycc.at<cv::Vec3b>(y, x);
                worst_y = std::max(worst_y, std::abs(v[0] - 128));
                worst_chroma = std::max({worst_chroma, std::abs(v[1] - ref[1]), std::abs(v[2] - ref[2])});
            }
        }
    }
    std::ostringstream detail;
    detail << "all outputs 299x299: " << (sizes_ok ? "yes" : "no") << ", max |Y - 128| " << worst_y
           << ", max chroma change " << worst_chroma;
    return {sizes_ok && worst_y <= 1 && worst_chroma <= 1, detail.str()};
}

} // namespace

int main() {
    struct Criterion {
        int id;
        const char* name;
        double limit_seconds; // 0: no limit
        std::function<Outcome()> run;
    };
    const std::vector<Criterion> criteria = {
        {1, "AUC equals the all-pairs Mann-Whitney count", 5, auc_oracle},
        {2, "analytic gradients match central differences", 30, gradient_checks},
        {3, "perplexity calibration", 30, perplexity_calibration},
        {4, "density estimate correctness", 10, kde_checks},
        {5, "rare conditions detected under 10-fold cross-testing", 180, few_shot_end_to_end},
        {6, "parameter sweep over K and embedding dimension", 600, degradation_sweep},
        {7, "protocol invariants", 0, protocol_invariants},
        {8, "balanced-subset caps", 0, balanced_caps},
        {9, "t-SNE cluster quality, both kernels", 120, tsne_quality},
        {10, "image preprocessing", 0, preprocessing},
    };

    int failures = 0;
    for (const auto& c : criteria) {
        const auto t0 = Clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double elapsed = seconds_since(t0);
        bool pass = o.pass;
        std::string timing = fmt("%.2fs", elapsed);
        if (c.limit_seconds > 0) {
            timing += fmt(" (limit %.0fs)", c.limit_seconds);
            pass = pass && elapsed < c.limit_seconds;
        }
        std::printf("%s  %2d  %s: %s [%s]\n", pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str(), timing.c_str());
        std::fflush(stdout);
        failures += pass ? 0 : 1;
    }
    std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failures, criteria.size());
    return failures == 0 ? 0 : 1;
}
