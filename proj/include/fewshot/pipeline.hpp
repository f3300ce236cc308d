#ifndef FEWSHOT_PIPELINE_HPP
#define FEWSHOT_PIPELINE_HPP

#include "fewshot/dataset.hpp"
#include "fewshot/density.hpp"
#include "fewshot/pca.hpp"
#include "fewshot/predictor.hpp"
#include "fewshot/tsne.hpp"
#include "json.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

/**
 * @file pipeline.hpp
 *
 * @brief The learning pipeline on a reference set:
 * PCA -> t-SNE -> per-condition densities -> exact q -> Predictor.
 */

namespace fewshot {

struct PipelineConfig {
    std::size_t frequent_count = 1; // M
    /// PCA output dimension; 0 disables PCA and neighbor search runs in the feature space.
    int pca_dims = 50;
    int embed_dims = 2;
    double perplexity = 30.0;
    std::size_t k = 3;
    Kernel tsne_kernel = Kernel::StudentT;
    int tsne_iterations = 1000;
    /// Unset selects the variant's default step size.
    std::optional<double> learning_rate;
    KernelNorm density_norm = KernelNorm::Normalized;
    std::uint64_t seed = 1;
    std::size_t n_folds = 10;
    std::size_t per_condition_cap = 1500;
    std::size_t normal_count = 5000;

    TsneConfig tsne(std::uint64_t tsne_seed) const {
        TsneConfig c = TsneConfig::defaults(tsne_kernel);
        c.perplexity = perplexity;
        c.output_dim = embed_dims;
        c.iterations = tsne_iterations;
        if (learning_rate) {
            c.learning_rate = *learning_rate;
        }
        c.seed = tsne_seed;
        return c;
    }
};

inline nlohmann::json to_json(const PipelineConfig& c) {
    return {{"m", c.frequent_count},
            {"pca_dims", c.pca_dims},
            {"embed_dims", c.embed_dims},
            {"perplexity", c.perplexity},
            {"k", c.k},
            {"tsne_variant", to_string(c.tsne_kernel)},
            {"tsne_iterations", c.tsne_iterations},
            {"learning_rate", c.learning_rate ? nlohmann::json(*c.learning_rate) : nlohmann::json(nullptr)},
            {"density_kernel", to_string(c.density_norm)},
            {"seed", c.seed},
            {"n_folds", c.n_folds},
            {"cap", c.per_condition_cap},
            {"normals", c.normal_count}};
}

/// Missing keys keep their defaults.
inline PipelineConfig pipeline_config_from_json(const nlohmann::json& in) {
    PipelineConfig c;
    c.frequent_count = in.value("m", c.frequent_count);
    c.pca_dims = in.value("pca_dims", c.pca_dims);
    c.embed_dims = in.value("embed_dims", c.embed_dims);
    c.perplexity = in.value("perplexity", c.perplexity);
    c.k = in.value("k", c.k);
    c.tsne_kernel = kernel_from_string(in.value("tsne_variant", std::string(to_string(c.tsne_kernel))));
    c.tsne_iterations = in.value("tsne_iterations", c.tsne_iterations);
    if (in.contains("learning_rate") && !in.at("learning_rate").is_null()) {
        c.learning_rate = in.at("learning_rate").get<double>();
    }
    c.density_norm = kernel_norm_from_string(in.value("density_kernel", std::string(to_string(c.density_norm))));
    c.seed = in.value("seed", c.seed);
    c.n_folds = in.value("n_folds", c.n_folds);
    c.per_condition_cap = in.value("cap", c.per_condition_cap);
    c.normal_count = in.value("normals", c.normal_count);
    return c;
}

/// FNV-1a over the compact JSON dump (keys are sorted, so the dump is canonical).
inline std::string digest(const nlohmann::json& value) {
    const auto text = value.dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    static const char* hex = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i, h >>= 4) {
        out[static_cast<std::size_t>(i)] = hex[h & 0xF];
    }
    return out;
}

struct LearnedModel {
    Predictor predictor;
    NeighborEmbedding embedding;
    ConditionFit conditions;
};

/**
 * Runs the learning pipeline on the reference rows `reference` of `dataset`.
 * `tsne_seed` seeds the embedding initialization.
 */
inline LearnedModel fit_pipeline(const Dataset& dataset, const std::vector<std::size_t>& reference,
                                 const PipelineConfig& config, std::uint64_t tsne_seed) {
    const Eigen::MatrixXd features = dataset.feature_matrix(reference);
    std::vector<std::string> ids;
    ids.reserve(reference.size());
    for (auto i : reference) {
        ids.push_back(dataset.records[i].sample_id);
    }

    LearnedModel out;
    out.predictor.pca = config.pca_dims > 0 ? fit_pca(features, config.pca_dims) : PcaModel::identity(features.cols());
    const Eigen::MatrixXd pi = out.predictor.pca.project_rows(features);

    out.embedding = fit_tsne(pi, config.tsne(tsne_seed));
    out.embedding.sample_ids = ids;

    out.conditions =
        fit_condition_models(out.embedding.tau, dataset.label_rows(reference), dataset.condition_names, ids,
                             config.density_norm);

    out.predictor.reference_pi = pi;
    out.predictor.reference_q = out.conditions.reference.q;
    out.predictor.reference_ids = ids;
    out.predictor.k = config.k;
    out.predictor.condition_names = dataset.condition_names;
    out.predictor.metadata = {{"config", to_json(config)},
                              {"config_digest", digest(to_json(config))},
                              {"tsne_seed", tsne_seed},
                              {"reference_count", reference.size()},
                              {"tsne_final_cost", out.embedding.final_cost}};
    out.predictor.validate();
    return out;
}

} // namespace fewshot

#endif
