#ifndef FEWSHOT_SYNTH_HPP
#define FEWSHOT_SYNTH_HPP

#include "fewshot/csv.hpp"
#include "fewshot/dataset.hpp"
#include "fewshot/random.hpp"
#include "json.hpp"

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

/**
 * @file synth.hpp
 *
 * @brief Gaussian-mixture fixtures with frequent and rare conditions.
 *
 * Each condition is an isotropic Gaussian cluster whose mean lies on a sphere
 * of radius `separation * within_std` around the origin; normal samples form
 * a cluster at the origin. Co-occurring samples carry two frequent labels and
 * sit midway between the two means; they count toward both conditions'
 * totals, so every condition ends with exactly its configured frequency.
 * Label noise draws a sample's features from a different cluster while
 * keeping its labels.
 */

namespace fewshot {

struct SynthSpec {
    int dim = 50;
    int n_frequent = 5;
    int n_rare = 3;
    int frequent_samples = 200;
    int rare_samples = 10;
    int normal_samples = 200;
    double separation = 8.0;
    double within_std = 1.0;
    double label_noise = 0.0;
    /// Fraction of each frequent condition's samples shared with the next frequent condition.
    double cooccurrence = 0.0;
    std::uint64_t seed = 7;

    void validate() const {
        if (dim < 1 || n_frequent < 1 || n_rare < 0 || frequent_samples < 1 || (n_rare > 0 && rare_samples < 1) ||
            normal_samples < 0) {
            throw std::invalid_argument("synth spec counts must be positive");
        }
        if (!(separation > 0.0) || !(within_std > 0.0)) {
            throw std::invalid_argument("synth separation and spread must be positive");
        }
        if (label_noise < 0.0 || label_noise > 1.0) {
            throw std::invalid_argument("label noise must lie in [0, 1]");
        }
        if (cooccurrence < 0.0 || cooccurrence > 0.5 || (cooccurrence > 0.0 && n_frequent < 2)) {
            throw std::invalid_argument("co-occurrence must lie in [0, 0.5] and needs two frequent conditions");
        }
    }
};

inline nlohmann::json to_json(const SynthSpec& s) {
    return {{"dim", s.dim},
            {"n_frequent", s.n_frequent},
            {"n_rare", s.n_rare},
            {"frequent_samples", s.frequent_samples},
            {"rare_samples", s.rare_samples},
            {"normal_samples", s.normal_samples},
            {"separation", s.separation},
            {"within_std", s.within_std},
            {"label_noise", s.label_noise},
            {"cooccurrence", s.cooccurrence},
            {"seed", s.seed}};
}

inline SynthSpec synth_spec_from_json(const nlohmann::json& in) {
    SynthSpec s;
    s.dim = in.value("dim", s.dim);
    s.n_frequent = in.value("n_frequent", s.n_frequent);
    s.n_rare = in.value("n_rare", s.n_rare);
    s.frequent_samples = in.value("frequent_samples", s.frequent_samples);
    s.rare_samples = in.value("rare_samples", s.rare_samples);
    s.normal_samples = in.value("normal_samples", s.normal_samples);
    s.separation = in.value("separation", s.separation);
    s.within_std = in.value("within_std", s.within_std);
    s.label_noise = in.value("label_noise", s.label_noise);
    s.cooccurrence = in.value("cooccurrence", s.cooccurrence);
    s.seed = in.value("seed", s.seed);
    return s;
}

struct SynthData {
    std::vector<SampleRecord> records;
    std::vector<std::string> condition_names;
    std::vector<std::string> cluster; // ground-truth cluster of each record's features
    std::vector<std::vector<double>> means;

    Dataset dataset() const { return make_dataset(records, condition_names); }
};

inline SynthData generate(const SynthSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);
    const auto dim = static_cast<std::size_t>(spec.dim);
    const auto n_conditions = static_cast<std::size_t>(spec.n_frequent + spec.n_rare);

    SynthData out;
    for (int c = 0; c < spec.n_frequent; ++c) {
        out.condition_names.push_back("frequent_" + std::to_string(c));
    }
    for (int c = 0; c < spec.n_rare; ++c) {
        out.condition_names.push_back("rare_" + std::to_string(c));
    }

    const double radius = spec.separation * spec.within_std;
    for (std::size_t c = 0; c < n_conditions; ++c) {
        std::vector<double> direction(dim);
        double norm = 0.0;
        do {
            norm = 0.0;
            for (auto& v : direction) {
                v = rng.normal();
                norm += v * v;
            }
        } while (norm == 0.0);
        norm = std::sqrt(norm);
        for (auto& v : direction) {
            v *= radius / norm;
        }
        out.means.push_back(std::move(direction));
    }
    const std::vector<double> origin(dim, 0.0);

    struct Planned {
        std::vector<std::uint8_t> labels;
        std::vector<double> center;
        std::string cluster;
    };
    std::vector<Planned> plan;

    std::vector<int> remaining(n_conditions);
    for (std::size_t c = 0; c < n_conditions; ++c) {
        remaining[c] = static_cast<int>(c) < spec.n_frequent ? spec.frequent_samples : spec.rare_samples;
    }
    if (spec.cooccurrence > 0.0) {
        const int pairs = static_cast<int>(std::lround(spec.cooccurrence * spec.frequent_samples));
        for (int a = 0; a < spec.n_frequent; ++a) {
            const int b = (a + 1) % spec.n_frequent;
            if (spec.n_frequent == 2 && a == 1) {
                break; // the single pair (0, 1) is already covered
            }
            for (int k = 0; k < pairs; ++k) {
                Planned p;
                p.labels.assign(n_conditions, 0);
                p.labels[static_cast<std::size_t>(a)] = 1;
                p.labels[static_cast<std::size_t>(b)] = 1;
                p.center.resize(dim);
                for (std::size_t d = 0; d < dim; ++d) {
                    p.center[d] = 0.5 * (out.means[static_cast<std::size_t>(a)][d] + out.means[static_cast<std::size_t>(b)][d]);
                }
                p.cluster = out.condition_names[static_cast<std::size_t>(a)] + "+" +
                            out.condition_names[static_cast<std::size_t>(b)];
                plan.push_back(std::move(p));
            }
            remaining[static_cast<std::size_t>(a)] -= pairs;
            remaining[static_cast<std::size_t>(b)] -= pairs;
        }
    }
    for (std::size_t c = 0; c < n_conditions; ++c) {
        if (remaining[c] < 0) {
            throw std::invalid_argument("co-occurrence rate leaves no room in condition " + out.condition_names[c]);
        }
        for (int k = 0; k < remaining[c]; ++k) {
            Planned p;
            p.labels.assign(n_conditions, 0);
            p.labels[c] = 1;
            p.center = out.means[c];
            p.cluster = out.condition_names[c];
            plan.push_back(std::move(p));
        }
    }
    for (int k = 0; k < spec.normal_samples; ++k) {
        plan.push_back({std::vector<std::uint8_t>(n_conditions, 0), origin, "normal"});
    }

    // Label noise: swap in another cluster's center (conditions or the origin).
    if (spec.label_noise > 0.0) {
        for (auto& p : plan) {
            if (rng.uniform() < spec.label_noise) {
                const auto pick = rng.below(n_conditions + 1);
                const auto& center = pick == n_conditions ? origin : out.means[pick];
                const std::string name = pick == n_conditions ? "normal" : out.condition_names[pick];
                if (name != p.cluster) {
                    p.center = center;
                    p.cluster = name;
                }
            }
        }
    }

    rng.shuffle(plan);

    // Patients own one or two consecutive samples.
    std::size_t patient = 0;
    for (std::size_t i = 0; i < plan.size(); ++patient) {
        const std::size_t take = (rng.uniform() < 0.5 && i + 1 < plan.size()) ? 2 : 1;
        for (std::size_t t = 0; t < take; ++t, ++i) {
            SampleRecord rec;
            char id[32];
            std::snprintf(id, sizeof(id), "s%05zu", i);
            rec.sample_id = id;
            std::snprintf(id, sizeof(id), "p%05zu", patient);
            rec.patient_id = id;
            rec.labels = plan[i].labels;
            rec.features.resize(dim);
            for (std::size_t d = 0; d < dim; ++d) {
                rec.features[d] = plan[i].center[d] + spec.within_std * rng.normal();
            }
            out.records.push_back(std::move(rec));
            out.cluster.push_back(plan[i].cluster);
        }
    }
    return out;
}

/// Writes features.csv, labels.csv and clusters.csv into `dir`.
inline void write_synth(const std::string& dir, const SynthData& data) {
    std::filesystem::create_directories(dir);
    const std::filesystem::path base(dir);
    {
        auto out = open_output((base / "features.csv").string());
        out << "sample_id,patient_id";
        const auto dim = data.records.empty() ? 0 : data.records.front().features.size();
        for (std::size_t d = 0; d < dim; ++d) {
            out << ",f" << d;
        }
        out << '\n';
        for (const auto& r : data.records) {
            out << r.sample_id << ',' << r.patient_id;
            for (double v : r.features) {
                out << ',' << format_double(v);
            }
            out << '\n';
        }
    }
    {
        auto out = open_output((base / "labels.csv").string());
        out << "sample_id";
        for (const auto& n : data.condition_names) {
            out << ',' << n;
        }
        out << '\n';
        for (const auto& r : data.records) {
            out << r.sample_id;
            for (auto y : r.labels) {
                out << ',' << static_cast<int>(y);
            }
            out << '\n';
        }
    }
    {
        auto out = open_output((base / "clusters.csv").string());
        out << "sample_id,cluster\n";
        for (std::size_t i = 0; i < data.records.size(); ++i) {
            out << data.records[i].sample_id << ',' << data.cluster[i] << '\n';
        }
    }
}

} // namespace fewshot

#endif
