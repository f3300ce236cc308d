// fewshot: command-line front end for the few-shot condition detection pipeline.
//
// Every subcommand writes its outputs under --out. Files are first written
// with a ".partial" suffix and renamed once the command has succeeded, so a
// failed run leaves its partial artifacts in place for inspection.

#include "fewshot/dataset.hpp"
#include "fewshot/density.hpp"
#include "fewshot/evaluation.hpp"
#include "fewshot/pca.hpp"
#include "fewshot/pipeline.hpp"
#include "fewshot/predictor.hpp"
#include "fewshot/preprocess.hpp"
#include "fewshot/synth.hpp"
#include "fewshot/tsne.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Stable process exit codes, one per stage.
enum Exit : int {
    ok = 0,
    dataset = 2,
    split = 3,
    pca = 4,
    tsne = 5,
    density = 6,
    predictor = 7,
    evaluate = 8,
    preprocess = 9,
    synth = 10,
    output = 11,
    internal = 12,
    usage = 64,
};

const std::map<std::string, int>& stage_codes() {
    static const std::map<std::string, int> codes = {
        {"dataset", Exit::dataset},       {"split", Exit::split},         {"pca", Exit::pca},
        {"tsne", Exit::tsne},             {"density", Exit::density},     {"predictor", Exit::predictor},
        {"evaluate", Exit::evaluate},     {"preprocess", Exit::preprocess}, {"synth", Exit::synth},
        {"output", Exit::output},         {"config", Exit::output},
    };
    return codes;
}

class StageError : public std::runtime_error {
public:
    StageError(std::string stage, const std::string& message)
        : std::runtime_error(message), stage_(std::move(stage)) {}
    const std::string& stage() const { return stage_; }
    int code() const {
        const auto it = stage_codes().find(stage_);
        return it == stage_codes().end() ? Exit::internal : it->second;
    }

private:
    std::string stage_;
};

/// Line-delimited JSON events on stderr (or a file).
class Logger {
public:
    void open(const std::string& path) {
        if (!path.empty()) {
            file_.open(path, std::ios::app);
            if (!file_) {
                throw StageError("output", "cannot open log file '" + path + "'");
            }
        }
    }

    void event(const std::string& name, json fields = json::object()) {
        fields["event"] = name;
        fields["elapsed_ms"] = elapsed_ms();
        (file_.is_open() ? static_cast<std::ostream&>(file_) : std::cerr) << fields.dump() << std::endl;
    }

    void warnings(const std::string& stage, const std::vector<std::string>& messages) {
        for (const auto& m : messages) {
            event("warning", {{"stage", stage}, {"message", m}});
        }
    }

    double elapsed_ms() const {
        return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
    std::ofstream file_;
};

Logger logger;

/// Runs `fn` as stage `name`, logging its duration and tagging any failure with the stage.
template <typename Fn>
auto stage(const std::string& name, Fn&& fn, json counts = json::object()) {
    const double t0 = logger.elapsed_ms();
    logger.event("stage_start", {{"stage", name}});
    try {
        if constexpr (std::is_void_v<decltype(fn())>) {
            fn();
            counts["stage"] = name;
            counts["duration_ms"] = logger.elapsed_ms() - t0;
            logger.event("stage_end", counts);
        } else {
            auto result = fn();
            counts["stage"] = name;
            counts["duration_ms"] = logger.elapsed_ms() - t0;
            logger.event("stage_end", counts);
            return result;
        }
    } catch (const StageError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError(name, e.what());
    }
}

/// Output files of one command: written as NAME.partial, renamed on commit.
class Artifacts {
public:
    /// `root` is a directory unless `single_file` is set.
    explicit Artifacts(std::string root, bool single_file = false) : root_(std::move(root)), single_(single_file) {
        try {
            fs::create_directories(single_ ? fs::path(root_).parent_path().empty() ? fs::path(".")
                                                                                     : fs::path(root_).parent_path()
                                           : fs::path(root_));
        } catch (const std::exception& e) {
            throw StageError("output", e.what());
        }
    }

    /// Partial path for artifact `name` (relative to the output directory).
    std::string path(const std::string& name, const std::string& kind) {
        const fs::path final_path = single_ ? fs::path(root_) : fs::path(root_) / name;
        if (final_path.has_parent_path()) {
            fs::create_directories(final_path.parent_path());
        }
        entries_.push_back({final_path, kind, single_ ? final_path.filename().string() : name});
        return final_path.string() + ".partial";
    }

    std::string file() { return path(fs::path(root_).filename().string(), "output"); }

    void write_json(const std::string& name, const std::string& kind, const json& value) {
        std::ofstream out(path(name, kind));
        if (!out) {
            throw StageError("output", "cannot write '" + name + "'");
        }
        out << value.dump(2) << '\n';
    }

    /// Renames every partial file and writes manifest.json (directory outputs only).
    void commit(json manifest) {
        for (const auto& e : entries_) {
            const auto partial = e.final_path.string() + ".partial";
            if (fs::exists(partial)) {
                fs::rename(partial, e.final_path);
            }
        }
        if (single_) {
            return;
        }
        manifest["status"] = "ok";
        manifest["artifacts"] = listing();
        const auto target = fs::path(root_) / "manifest.json";
        std::ofstream(target.string() + ".partial") << manifest.dump(2) << '\n';
        fs::rename(target.string() + ".partial", target);
        fs::remove(fs::path(root_) / "manifest.json.partial");
    }

    /// Leaves the partial files and records the failure next to them.
    void fail(json manifest, const StageError& error) noexcept {
        try {
            if (single_) {
                return;
            }
            manifest["status"] = "failed";
            manifest["error"] = {{"stage", error.stage()}, {"code", error.code()}, {"message", error.what()}};
            manifest["artifacts"] = listing();
            std::ofstream(fs::path(root_) / "manifest.json.partial") << manifest.dump(2) << '\n';
        } catch (...) {
        }
    }

private:
    struct Entry {
        fs::path final_path;
        std::string kind;
        std::string name;
    };

    json listing() const {
        json out = json::array();
        for (const auto& e : entries_) {
            out.push_back({{"path", e.name}, {"kind", e.kind}});
        }
        return out;
    }

    std::string root_;
    bool single_;
    std::vector<Entry> entries_;
};

// ---------------------------------------------------------------------------
// Matrix CSV: sample_id[,patient_id],v0,...

struct MatrixCsv {
    std::vector<std::string> ids;
    std::vector<std::string> columns;
    Eigen::MatrixXd values;
};

MatrixCsv read_matrix_csv(const std::string& path) {
    const auto table = fewshot::read_csv(path);
    if (table.header.empty() || table.header[0] != "sample_id") {
        throw fewshot::DataError("'" + path + "' must start with a sample_id column", 1);
    }
    const std::size_t first = table.header.size() > 1 && table.header[1] == "patient_id" ? 2 : 1;
    MatrixCsv out;
    out.columns.assign(table.header.begin() + static_cast<std::ptrdiff_t>(first), table.header.end());
    out.values.resize(static_cast<Eigen::Index>(table.rows.size()), static_cast<Eigen::Index>(out.columns.size()));
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
        out.ids.push_back(table.rows[r][0]);
        for (std::size_t c = first; c < table.rows[r].size(); ++c) {
            double v = 0.0;
            if (!fewshot::parse_double(table.rows[r][c], v) || !std::isfinite(v)) {
                throw fewshot::DataError("non-numeric or non-finite value '" + table.rows[r][c] + "' in '" + path + "'",
                                         table.line_numbers[r]);
            }
            out.values(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c - first)) = v;
        }
    }
    return out;
}

void write_matrix_csv(const std::string& path, const std::string& prefix, const std::vector<std::string>& ids,
                      const Eigen::MatrixXd& values, const std::vector<std::string>& names = {}) {
    auto out = fewshot::open_output(path);
    out << "sample_id";
    for (Eigen::Index c = 0; c < values.cols(); ++c) {
        out << ',' << (names.empty() ? prefix + std::to_string(c) : names[static_cast<std::size_t>(c)]);
    }
    out << '\n';
    for (Eigen::Index r = 0; r < values.rows(); ++r) {
        out << ids[static_cast<std::size_t>(r)];
        for (Eigen::Index c = 0; c < values.cols(); ++c) {
            out << ',' << fewshot::format_double(values(r, c));
        }
        out << '\n';
    }
}

json read_json_file(const std::string& path, const std::string& stage_name) {
    std::ifstream in(path);
    if (!in) {
        throw StageError(stage_name, "cannot open '" + path + "'");
    }
    try {
        return json::parse(in);
    } catch (const std::exception& e) {
        throw StageError(stage_name, "'" + path + "' is not valid JSON: " + e.what());
    }
}

/// Labels file alone, conditions re-sorted by descending frequency (as in load_dataset).
fewshot::Dataset read_labels_only(const std::string& path) {
    const auto table = fewshot::read_csv(path);
    if (table.header.size() < 2 || table.header[0] != "sample_id") {
        throw fewshot::DataError("labels header must be sample_id,<condition names>", 1);
    }
    std::vector<std::string> names;
    std::ptrdiff_t normal_column = -1;
    for (std::size_t c = 1; c < table.header.size(); ++c) {
        if (table.header[c] == "is_normal") {
            normal_column = static_cast<std::ptrdiff_t>(c);
        } else {
            names.push_back(table.header[c]);
        }
    }
    std::vector<fewshot::SampleRecord> records;
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
        fewshot::SampleRecord rec;
        rec.sample_id = table.rows[r][0];
        rec.patient_id = rec.sample_id;
        for (std::size_t c = 1; c < table.rows[r].size(); ++c) {
            if (static_cast<std::ptrdiff_t>(c) == normal_column) {
                continue;
            }
            const auto& v = table.rows[r][c];
            if (v != "0" && v != "1") {
                throw fewshot::DataError("label '" + v + "' is not 0 or 1", table.line_numbers[r]);
            }
            rec.labels.push_back(static_cast<std::uint8_t>(v == "1"));
        }
        records.push_back(std::move(rec));
    }
    return fewshot::make_dataset(std::move(records), std::move(names));
}

std::vector<std::string> split_list(const std::string& text) {
    std::vector<std::string> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const auto t = fewshot::detail::trim(item);
        if (!t.empty()) {
            out.emplace_back(t);
        }
    }
    return out;
}

std::string safe_name(const std::string& name) {
    std::string out;
    for (char c : name) {
        out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.') ? c : '_';
    }
    return out;
}

// ---------------------------------------------------------------------------
// Options shared by subcommands.

struct Globals {
    std::optional<std::uint64_t> seed;
    unsigned threads = 1;
    std::string out;
    std::string log;
};

struct PipelineOptions {
    std::string config_path;
    std::optional<std::size_t> m;
    std::optional<int> pca_dims;
    std::optional<int> embed_dims;
    std::optional<double> perplexity;
    std::optional<std::size_t> k;
    std::optional<std::string> variant;
    std::optional<int> iterations;
    std::optional<double> learning_rate;
    std::optional<std::string> density_kernel;
    std::optional<std::size_t> folds;
    std::optional<std::size_t> cap;
    std::optional<std::size_t> normals;

    void add_to(CLI::App* app) {
        app->add_option("--config", config_path, "Pipeline config JSON (missing keys keep defaults)");
        app->add_option("--m", m, "Number of frequent conditions M");
        app->add_option("--pca-dims", pca_dims, "PCA output dimension P' (0 disables PCA)");
        app->add_option("--embed-dims", embed_dims, "Embedding dimension P''");
        app->add_option("--perplexity", perplexity, "t-SNE perplexity");
        app->add_option("--k", k, "Neighbors used by the predictor");
        app->add_option("--variant", variant, "t-SNE variant")->check(CLI::IsMember({"student_t", "paper_sne"}));
        app->add_option("--iters", iterations, "t-SNE iterations");
        app->add_option("--learning-rate", learning_rate, "t-SNE learning rate (default depends on the variant)");
        app->add_option("--density-kernel", density_kernel, "Kernel normalization")
            ->check(CLI::IsMember({"normalized", "paper"}));
        app->add_option("--folds", folds, "Number of folds");
        app->add_option("--cap", cap, "Per-condition cap of the balanced subset");
        app->add_option("--normals", normals, "Normal samples in the balanced subset");
    }

    fewshot::PipelineConfig resolve(const Globals& g) const {
        fewshot::PipelineConfig c;
        try {
            if (!config_path.empty()) {
                c = fewshot::pipeline_config_from_json(read_json_file(config_path, "config"));
            }
            if (m) c.frequent_count = *m;
            if (pca_dims) c.pca_dims = *pca_dims;
            if (embed_dims) c.embed_dims = *embed_dims;
            if (perplexity) c.perplexity = *perplexity;
            if (k) c.k = *k;
            if (variant) c.tsne_kernel = fewshot::kernel_from_string(*variant);
            if (iterations) c.tsne_iterations = *iterations;
            if (learning_rate) c.learning_rate = *learning_rate;
            if (density_kernel) c.density_norm = fewshot::kernel_norm_from_string(*density_kernel);
            if (folds) c.n_folds = *folds;
            if (cap) c.per_condition_cap = *cap;
            if (normals) c.normal_count = *normals;
            if (g.seed) c.seed = *g.seed;
        } catch (const StageError&) {
            throw;
        } catch (const std::exception& e) {
            throw StageError("config", e.what());
        }
        return c;
    }
};

json base_manifest(const std::string& command, const std::vector<std::string>& argv) {
    return {{"tool", "fewshot"}, {"command", command}, {"argv", argv}};
}

/// Runs a directory-producing command, committing or failing its artifacts.
int run_command(const std::string& command, const Globals& g, const std::vector<std::string>& argv,
                const std::function<void(Artifacts&, json&)>& body) {
    if (g.out.empty()) {
        throw StageError("config", "--out is required");
    }
    Artifacts artifacts(g.out);
    json manifest = base_manifest(command, argv);
    try {
        body(artifacts, manifest);
        stage("output", [&] { artifacts.commit(manifest); });
    } catch (const StageError& e) {
        artifacts.fail(manifest, e);
        throw;
    }
    return Exit::ok;
}

struct SplitOutputs {
    std::set<std::string> balanced;
    fewshot::SplitAssignment splits;
    fewshot::FoldAssignment valid_folds;
    fewshot::FoldAssignment test_folds;
};

SplitOutputs make_splits(const fewshot::Dataset& ds, const fewshot::PipelineConfig& c) {
    SplitOutputs out;
    out.balanced = fewshot::build_balanced_subset(ds, c.frequent_count, c.per_condition_cap, c.normal_count, c.seed);
    out.splits = fewshot::assign_splits(ds, out.balanced, c.seed);
    out.valid_folds = fewshot::folds_for_split(ds, out.splits, fewshot::Split::Valid, c.n_folds, c.seed);
    out.test_folds = fewshot::folds_for_split(ds, out.splits, fewshot::Split::Test, c.n_folds, c.seed);
    return out;
}

void write_split_outputs(Artifacts& a, const fewshot::Dataset& ds, const SplitOutputs& s) {
    fewshot::write_split_csv(a.path("splits.csv", "splits"), ds, s.splits);
    {
        auto out = fewshot::open_output(a.path("balanced.csv", "balanced_subset"));
        out << "sample_id\n";
        for (const auto& id : s.balanced) {
            out << id << '\n';
        }
    }
    for (const auto& [name, folds] : {std::pair{"folds_valid.csv", &s.valid_folds}, std::pair{"folds_test.csv", &s.test_folds}}) {
        std::vector<std::string> ids;
        for (const auto& [id, f] : folds->fold) {
            ids.push_back(id);
        }
        fewshot::write_fold_csv(a.path(name, "folds"), ids, *folds);
    }
}

fewshot::FoldAssignment read_fold_csv(const std::string& path) {
    const auto table = fewshot::read_csv(path);
    if (table.header.size() != 2 || table.header[0] != "sample_id" || table.header[1] != "fold") {
        throw fewshot::DataError("fold file header must be sample_id,fold", 1);
    }
    fewshot::FoldAssignment out;
    out.n_folds = 0;
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
        std::size_t f = 0;
        try {
            f = std::stoul(table.rows[r][1]);
        } catch (const std::exception&) {
            throw fewshot::DataError("fold '" + table.rows[r][1] + "' is not a non-negative integer", table.line_numbers[r]);
        }
        out.fold[table.rows[r][0]] = f;
        out.n_folds = std::max(out.n_folds, f + 1);
    }
    return out;
}

json dataset_counts(const fewshot::Dataset& ds) {
    return {{"samples", ds.size()}, {"dimension", ds.dimension()}, {"conditions", ds.condition_count()}};
}

void write_report(Artifacts& a, const fewshot::EvaluationReport& report, const fewshot::Dataset& ds,
                  const std::string& prefix) {
    a.write_json(prefix + "report.json", "report", fewshot::to_json(report));
    fewshot::write_predictions_csv(a.path(prefix + "predictions.csv", "predictions"), report, ds.condition_names);
    for (std::size_t c = 0; c < report.rocs.size(); ++c) {
        if (report.rocs[c].auc) {
            char index[16];
            std::snprintf(index, sizeof(index), "%02zu", c);
            fewshot::write_roc_csv(a.path(prefix + "roc/" + index + "_" + safe_name(report.rocs[c].condition) + ".csv", "roc"),
                                   report.rocs[c]);
        }
    }
}

json report_summary(const fewshot::EvaluationReport& r) {
    auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
    return {{"protocol", fewshot::to_string(r.protocol)},
            {"average_auc", opt(r.average_auc)},
            {"average_auc_rare", opt(r.average_auc_rare)},
            {"report_digest", fewshot::digest(fewshot::to_json(r))}};
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Few-shot detection of rare conditions from feature vectors"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Show help for every subcommand");

    Globals g;
    auto add_globals = [&](CLI::App* sub) {
        sub->add_option("--seed", g.seed, "Seed for every random step");
        sub->add_option("--threads", g.threads, "Worker threads for fold-level parallelism")->check(CLI::PositiveNumber);
        sub->add_option("--out", g.out, "Output directory (or file for predict/gradient)");
        sub->add_option("--log", g.log, "Append JSON log events to this file instead of stderr");
    };

    std::vector<std::string> args(argv, argv + argc);
    std::function<int()> action;

    // split ------------------------------------------------------------------
    std::string features_path, labels_path;
    PipelineOptions split_opts;
    auto* split_cmd = app.add_subcommand("split", "Balanced subset, LEARN/VALID/TEST split and patient folds");
    add_globals(split_cmd);
    split_cmd->add_option("--features", features_path, "Features CSV")->required();
    split_cmd->add_option("--labels", labels_path, "Labels CSV")->required();
    split_opts.add_to(split_cmd);
    split_cmd->callback([&] {
        action = [&] {
            const auto config = split_opts.resolve(g);
            return run_command("split", g, args, [&](Artifacts& a, json& manifest) {
                manifest["config"] = fewshot::to_json(config);
                const auto ds = stage("dataset", [&] { return fewshot::load_dataset(features_path, labels_path); });
                const auto s = stage("split", [&] { return make_splits(ds, config); });
                stage("output", [&] { write_split_outputs(a, ds, s); });
                manifest["counts"] = {{"balanced", s.balanced.size()},
                                      {"learn", s.splits.indices(ds, fewshot::Split::Learn).size()},
                                      {"valid", s.splits.indices(ds, fewshot::Split::Valid).size()},
                                      {"test", s.splits.indices(ds, fewshot::Split::Test).size()}};
            });
        };
    });

    // preprocess -------------------------------------------------------------
    std::string image_dir;
    fewshot::PreprocessOptions pre_opts;
    auto* pre_cmd = app.add_subcommand("preprocess", "Crop, resize and luminance-normalize fundus PNG images");
    add_globals(pre_cmd);
    pre_cmd->add_option("--in", image_dir, "Directory of PNG images")->required()->check(CLI::ExistingDirectory);
    pre_cmd->add_option("--roi-threshold", pre_opts.roi_threshold, "Field-of-view luminance threshold");
    pre_cmd->add_option("--sigma", pre_opts.sigma, "Background Gaussian sigma in pixels");
    pre_cmd->add_option("--size", pre_opts.output_size, "Output side length")->check(CLI::PositiveNumber);
    pre_cmd->callback([&] {
        action = [&] {
            return run_command("preprocess", g, args, [&](Artifacts& a, json& manifest) {
                std::vector<fs::path> inputs;
                for (const auto& entry : fs::directory_iterator(image_dir)) {
                    auto ext = entry.path().extension().string();
                    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
                    if (entry.is_regular_file() && ext == ".png") {
                        inputs.push_back(entry.path());
                    }
                }
                std::sort(inputs.begin(), inputs.end());
                json images = json::array();
                stage("preprocess", [&] {
                    for (const auto& p : inputs) {
                        const auto result = fewshot::preprocess_fundus(fewshot::read_png(p.string()), pre_opts);
                        logger.warnings("preprocess", result.warnings);
                        fewshot::write_png(a.path(p.filename().string(), "image"), result.image);
                        images.push_back({{"input", p.filename().string()},
                                          {"roi", {result.roi.x, result.roi.y, result.roi.width, result.roi.height}},
                                          {"warnings", result.warnings}});
                    }
                }, {{"images", inputs.size()}});
                manifest["options"] = {{"roi_threshold", pre_opts.roi_threshold},
                                       {"sigma", pre_opts.sigma},
                                       {"output_size", pre_opts.output_size}};
                manifest["images"] = images;
            });
        };
    });

    // synth ------------------------------------------------------------------
    std::string spec_path;
    auto* synth_cmd = app.add_subcommand("synth", "Generate a Gaussian-mixture fixture");
    add_globals(synth_cmd);
    synth_cmd->add_option("--spec", spec_path, "Generator spec JSON (missing keys keep defaults)");
    synth_cmd->callback([&] {
        action = [&] {
            return run_command("synth", g, args, [&](Artifacts& a, json& manifest) {
                auto spec = stage("synth", [&] {
                    auto s = spec_path.empty() ? fewshot::SynthSpec{}
                                               : fewshot::synth_spec_from_json(read_json_file(spec_path, "synth"));
                    if (g.seed) {
                        s.seed = *g.seed;
                    }
                    s.validate();
                    return s;
                });
                const auto data = stage("synth", [&] { return fewshot::generate(spec); });
                stage("output", [&] {
                    fewshot::write_synth(g.out, data);
                    a.path("features.csv", "features");
                    a.path("labels.csv", "labels");
                    a.path("clusters.csv", "clusters");
                    for (const char* name : {"features.csv", "labels.csv", "clusters.csv"}) {
                        fs::rename(fs::path(g.out) / name, fs::path(g.out) / (std::string(name) + ".partial"));
                    }
                    a.write_json("spec.json", "spec", fewshot::to_json(spec));
                });
                manifest["spec"] = fewshot::to_json(spec);
                manifest["counts"] = {{"samples", data.records.size()}};
            });
        };
    });

    // pca --------------------------------------------------------------------
    int pca_dims = 50;
    auto* pca_cmd = app.add_subcommand("pca", "Fit PCA on a features CSV and project it");
    add_globals(pca_cmd);
    pca_cmd->add_option("--features", features_path, "Features CSV (sample_id[,patient_id],f0,...)")->required();
    pca_cmd->add_option("--dims", pca_dims, "Output dimension P' (0 keeps the features unchanged)");
    pca_cmd->callback([&] {
        action = [&] {
            return run_command("pca", g, args, [&](Artifacts& a, json& manifest) {
                const auto m = stage("dataset", [&] { return read_matrix_csv(features_path); });
                const auto model = stage("pca", [&] {
                    return pca_dims > 0 ? fewshot::fit_pca(m.values, pca_dims) : fewshot::PcaModel::identity(m.values.cols());
                });
                logger.warnings("pca", model.warnings);
                stage("output", [&] {
                    a.write_json("pca.json", "pca_model", fewshot::to_json(model));
                    write_matrix_csv(a.path("pi.csv", "projection"), "pi", m.ids, model.project_rows(m.values));
                });
                manifest["p"] = model.p;
                manifest["p_prime"] = model.p_prime;
                manifest["warnings"] = model.warnings;
            });
        };
    });

    // tsne -------------------------------------------------------------------
    std::string tsne_in;
    fewshot::TsneConfig tsne_config;
    std::string tsne_variant = "student_t";
    std::optional<double> tsne_lr;
    auto* tsne_cmd = app.add_subcommand("tsne", "Embed rows of a CSV with t-SNE");
    add_globals(tsne_cmd);
    tsne_cmd->add_option("--in", tsne_in, "Input CSV (sample_id,v0,...)")->required();
    tsne_cmd->add_option("--perplexity", tsne_config.perplexity, "Perplexity");
    tsne_cmd->add_option("--dims", tsne_config.output_dim, "Output dimension")->check(CLI::PositiveNumber);
    tsne_cmd->add_option("--iters", tsne_config.iterations, "Iterations");
    tsne_cmd->add_option("--variant", tsne_variant, "Kernel variant")->check(CLI::IsMember({"student_t", "paper_sne"}));
    tsne_cmd->add_option("--learning-rate", tsne_lr, "Learning rate (default depends on the variant)");
    tsne_cmd->callback([&] {
        action = [&] {
            return run_command("tsne", g, args, [&](Artifacts& a, json& manifest) {
                const auto m = stage("dataset", [&] { return read_matrix_csv(tsne_in); });
                auto config = fewshot::TsneConfig::defaults(fewshot::kernel_from_string(tsne_variant));
                config.perplexity = tsne_config.perplexity;
                config.output_dim = tsne_config.output_dim;
                config.iterations = tsne_config.iterations;
                if (tsne_lr) {
                    config.learning_rate = *tsne_lr;
                }
                if (g.seed) {
                    config.seed = *g.seed;
                }
                auto e = stage("tsne", [&] { return fewshot::fit_tsne(m.values, config); }, {{"points", m.ids.size()}});
                e.sample_ids = m.ids;
                logger.warnings("tsne", e.warnings);
                stage("output", [&] {
                    fewshot::write_embedding_csv(a.path("embedding.csv", "embedding"), e);
                    a.write_json("embedding.json", "embedding_sidecar", fewshot::embedding_sidecar(e));
                });
                manifest["config"] = fewshot::to_json(config);
                manifest["final_cost"] = e.final_cost;
            });
        };
    });

    // fit-density ------------------------------------------------------------
    std::string embedding_path, pca_model_path, pi_path, norm_name = "normalized";
    std::size_t predictor_k = 3;
    auto* dens_cmd = app.add_subcommand("fit-density", "Per-condition densities and reference probabilities");
    add_globals(dens_cmd);
    dens_cmd->add_option("--embedding", embedding_path, "Embedding CSV (sample_id,t0,...)")->required();
    dens_cmd->add_option("--labels", labels_path, "Labels CSV")->required();
    dens_cmd->add_option("--density-kernel", norm_name, "Kernel normalization")->check(CLI::IsMember({"normalized", "paper"}));
    dens_cmd->add_option("--pca", pca_model_path, "PCA model JSON; with --pi also writes predictor.json");
    dens_cmd->add_option("--pi", pi_path, "PCA coordinates CSV of the same samples");
    dens_cmd->add_option("--k", predictor_k, "Neighbors used by the predictor")->check(CLI::PositiveNumber);
    dens_cmd->callback([&] {
        action = [&] {
            if (pca_model_path.empty() != pi_path.empty()) {
                throw StageError("config", "--pca and --pi must be given together");
            }
            return run_command("fit-density", g, args, [&](Artifacts& a, json& manifest) {
                const auto emb = stage("dataset", [&] { return read_matrix_csv(embedding_path); });
                const auto labels = stage("dataset", [&] {
                    const auto all = read_labels_only(labels_path);
                    std::vector<std::size_t> rows;
                    for (const auto& id : emb.ids) {
                        rows.push_back(all.index_of(id));
                    }
                    return std::pair{all, all.label_rows(rows)};
                });
                const auto& names = labels.first.condition_names;
                const auto fit = stage("density", [&] {
                    return fewshot::fit_condition_models(emb.values, labels.second, names, emb.ids,
                                                         fewshot::kernel_norm_from_string(norm_name));
                });
                json models = json::array();
                for (const auto& m : fit.models) {
                    models.push_back(fewshot::to_json(m));
                }
                json omitted = json::array();
                for (auto c : fit.omitted) {
                    omitted.push_back(names[c]);
                    logger.event("warning", {{"stage", "density"}, {"message", "condition '" + names[c] + "' omitted"}});
                }
                stage("output", [&] {
                    a.write_json("conditions.json", "condition_models",
                                 {{"dim", emb.values.cols()}, {"models", models}, {"omitted", omitted},
                                  {"prior_fallbacks", fit.reference.prior_fallbacks}});
                    fewshot::write_reference_csv(a.path("reference_q.csv", "reference_probabilities"), fit.reference, names);
                });
                if (!pca_model_path.empty()) {
                    const auto model = stage("predictor", [&] {
                        fewshot::Predictor p;
                        p.pca = fewshot::pca_from_json(read_json_file(pca_model_path, "predictor"));
                        const auto pi = read_matrix_csv(pi_path);
                        if (pi.ids != emb.ids) {
                            throw std::invalid_argument("--pi rows do not match the embedding rows");
                        }
                        p.reference_pi = pi.values;
                        p.reference_q = fit.reference.q;
                        p.reference_ids = emb.ids;
                        p.k = predictor_k;
                        p.condition_names = names;
                        p.validate();
                        return p;
                    });
                    stage("output", [&] { fewshot::save_predictor(a.path("predictor.json", "predictor"), model); });
                }
                manifest["omitted"] = omitted;
            });
        };
    });

    // predict / gradient -----------------------------------------------------
    std::string model_path, condition_name;
    auto* predict_cmd = app.add_subcommand("predict", "Score new feature vectors with a predictor");
    add_globals(predict_cmd);
    predict_cmd->add_option("--model", model_path, "predictor.json")->required();
    predict_cmd->add_option("--features", features_path, "Features CSV")->required();
    auto* grad_cmd = app.add_subcommand("gradient", "Gradient of one condition's score with respect to the features");
    add_globals(grad_cmd);
    grad_cmd->add_option("--model", model_path, "predictor.json")->required();
    grad_cmd->add_option("--features", features_path, "Features CSV")->required();
    grad_cmd->add_option("--condition", condition_name, "Condition name")->required();

    auto single_file = [&](const std::function<void(const std::string&)>& body) {
        if (g.out.empty()) {
            throw StageError("config", "--out is required");
        }
        Artifacts a(g.out, true);
        body(a.file());
        a.commit({});
        return static_cast<int>(Exit::ok);
    };
    predict_cmd->callback([&] {
        action = [&] {
            return single_file([&](const std::string& out_path) {
                const auto model = stage("predictor", [&] { return fewshot::load_predictor(model_path); });
                const auto m = stage("dataset", [&] { return read_matrix_csv(features_path); });
                const auto q = stage("predictor", [&] { return fewshot::predict_batch(model, m.values); },
                                     {{"samples", m.ids.size()}});
                stage("output", [&] { write_matrix_csv(out_path, "q", m.ids, q, model.condition_names); });
            });
        };
    });
    grad_cmd->callback([&] {
        action = [&] {
            return single_file([&](const std::string& out_path) {
                const auto model = stage("predictor", [&] { return fewshot::load_predictor(model_path); });
                const auto it = std::find(model.condition_names.begin(), model.condition_names.end(), condition_name);
                if (it == model.condition_names.end()) {
                    throw StageError("predictor", "unknown condition '" + condition_name + "'");
                }
                const auto c = static_cast<std::size_t>(it - model.condition_names.begin());
                const auto m = stage("dataset", [&] { return read_matrix_csv(features_path); });
                const auto grads = stage("predictor", [&] {
                    Eigen::MatrixXd out(m.values.rows(), m.values.cols());
                    for (Eigen::Index r = 0; r < m.values.rows(); ++r) {
                        try {
                            out.row(r) = fewshot::prediction_gradient(model, m.values.row(r).transpose(), c).transpose();
                        } catch (const fewshot::UnstableNeighborhood& e) {
                            // Undefined where the input sits on a neighbor or a neighbor tie.
                            out.row(r).setConstant(std::numeric_limits<double>::quiet_NaN());
                            logger.event("warning", {{"stage", "predictor"},
                                                     {"sample_id", m.ids[static_cast<std::size_t>(r)]},
                                                     {"message", e.what()}});
                        }
                    }
                    return out;
                });
                stage("output", [&] { write_matrix_csv(out_path, "d", m.ids, grads); });
            });
        };
    });

    // evaluate / sweep / run ---------------------------------------------------
    std::string splits_path, folds_path, mode = "test";
    PipelineOptions eval_opts;
    auto* eval_cmd = app.add_subcommand("evaluate", "Cross-validation or cross-testing with pooled ROC curves");
    add_globals(eval_cmd);
    eval_cmd->add_option("--features", features_path, "Features CSV")->required();
    eval_cmd->add_option("--labels", labels_path, "Labels CSV")->required();
    eval_cmd->add_option("--splits", splits_path, "Split CSV (computed from the seed when absent)");
    eval_cmd->add_option("--fold-file", folds_path, "Fold CSV over the evaluated split (computed when absent)");
    eval_cmd->add_option("--mode", mode, "cv (VALID folds) or test (TEST folds)")->check(CLI::IsMember({"cv", "test"}));
    eval_opts.add_to(eval_cmd);

    std::vector<std::string> sweep_params, sweep_values;
    auto* sweep_cmd = app.add_subcommand("sweep", "Average AUC as a function of one parameter at a time");
    add_globals(sweep_cmd);
    sweep_cmd->add_option("--features", features_path, "Features CSV")->required();
    sweep_cmd->add_option("--labels", labels_path, "Labels CSV")->required();
    sweep_cmd->add_option("--param", sweep_params, "Swept parameter (repeatable)")
        ->required()
        ->check(CLI::IsMember({"pprime", "psecond", "perplexity", "k"}));
    sweep_cmd->add_option("--values", sweep_values, "Comma-separated values, one list per --param")->required();
    std::string sweep_mode = "cv";
    sweep_cmd->add_option("--mode", sweep_mode, "cv (default) or test")->check(CLI::IsMember({"cv", "test"}));
    eval_opts.add_to(sweep_cmd);

    auto* run_cmd = app.add_subcommand("run", "Split, evaluate and fit the final predictor");
    add_globals(run_cmd);
    run_cmd->add_option("--features", features_path, "Features CSV")->required();
    run_cmd->add_option("--labels", labels_path, "Labels CSV")->required();
    run_cmd->add_option("--mode", mode, "cv or test")->check(CLI::IsMember({"cv", "test"}));
    eval_opts.add_to(run_cmd);

    // Loads the dataset and either reads or derives splits and folds for the chosen mode.
    auto prepare = [&](const fewshot::PipelineConfig& config, Artifacts& a, json& manifest, bool write_splits) {
        auto ds = stage("dataset", [&] { return fewshot::load_dataset(features_path, labels_path); },
                        json::object());
        logger.event("dataset", dataset_counts(ds));
        const auto evaluated = mode == "cv" ? fewshot::Split::Valid : fewshot::Split::Test;
        auto s = stage("split", [&] {
            SplitOutputs out;
            if (splits_path.empty()) {
                out = make_splits(ds, config);
            } else {
                out.splits = fewshot::read_split_csv(splits_path);
                for (const auto& r : ds.records) {
                    if (!out.splits.assignment.count(r.sample_id)) {
                        throw fewshot::DataError("sample '" + r.sample_id + "' missing from the split file", 0);
                    }
                }
            }
            auto& folds = evaluated == fewshot::Split::Valid ? out.valid_folds : out.test_folds;
            if (!folds_path.empty()) {
                folds = read_fold_csv(folds_path);
            } else if (!splits_path.empty()) {
                folds = fewshot::folds_for_split(ds, out.splits, evaluated, config.n_folds, config.seed);
            }
            return out;
        });
        if (write_splits && splits_path.empty()) {
            stage("output", [&] { write_split_outputs(a, ds, s); });
        }
        manifest["inputs"] = {{"features", features_path}, {"labels", labels_path}};
        manifest["dataset"] = dataset_counts(ds);
        return std::pair{std::move(ds), std::move(s)};
    };

    auto evaluate_with = [&](const fewshot::Dataset& ds, const SplitOutputs& s, const fewshot::PipelineConfig& config) {
        return stage("evaluate", [&] {
            return mode == "cv" ? fewshot::cross_validate(ds, s.splits, s.valid_folds, config, g.threads)
                                : fewshot::cross_test(ds, s.splits, s.test_folds, config, g.threads);
        });
    };

    eval_cmd->callback([&] {
        action = [&] {
            const auto config = eval_opts.resolve(g);
            return run_command("evaluate", g, args, [&](Artifacts& a, json& manifest) {
                manifest["config"] = fewshot::to_json(config);
                manifest["config_digest"] = fewshot::digest(fewshot::to_json(config));
                const auto [ds, s] = prepare(config, a, manifest, true);
                const auto report = evaluate_with(ds, s, config);
                stage("output", [&] { write_report(a, report, ds, ""); });
                manifest["summary"] = report_summary(report);
            });
        };
    });

    sweep_cmd->callback([&] {
        action = [&] {
            mode = sweep_mode;
            if (sweep_params.size() != sweep_values.size()) {
                throw StageError("config", "give one --values list per --param");
            }
            const auto config = eval_opts.resolve(g);
            return run_command("sweep", g, args, [&](Artifacts& a, json& manifest) {
                manifest["config"] = fewshot::to_json(config);
                manifest["config_digest"] = fewshot::digest(fewshot::to_json(config));
                const auto [ds, s] = prepare(config, a, manifest, false);
                std::vector<std::pair<fewshot::SweepParam, std::vector<std::string>>> grid;
                for (std::size_t i = 0; i < sweep_params.size(); ++i) {
                    grid.emplace_back(fewshot::sweep_param_from_string(sweep_params[i]), split_list(sweep_values[i]));
                }
                const auto rows = stage("evaluate", [&] {
                    const auto protocol = mode == "cv" ? fewshot::Protocol::CrossValidation : fewshot::Protocol::CrossTesting;
                    return fewshot::parameter_sweep(ds, s.splits, mode == "cv" ? s.valid_folds : s.test_folds, grid, config,
                                                    protocol, g.threads);
                });
                stage("output", [&] { fewshot::write_sweep_csv(a.path("sweep.csv", "sweep"), rows); });
                manifest["mode"] = mode;
                manifest["rows"] = rows.size();
            });
        };
    });

    run_cmd->callback([&] {
        action = [&] {
            const auto config = eval_opts.resolve(g);
            return run_command("run", g, args, [&](Artifacts& a, json& manifest) {
                manifest["config"] = fewshot::to_json(config);
                manifest["config_digest"] = fewshot::digest(fewshot::to_json(config));
                manifest["mode"] = mode;
                const auto [ds, s] = prepare(config, a, manifest, true);
                const auto report = evaluate_with(ds, s, config);
                stage("output", [&] { write_report(a, report, ds, ""); });

                // Final model: every labeled sample of VALID and TEST as reference.
                auto reference = s.splits.indices(ds, fewshot::Split::Valid);
                const auto test = s.splits.indices(ds, fewshot::Split::Test);
                reference.insert(reference.end(), test.begin(), test.end());
                std::sort(reference.begin(), reference.end());
                const auto learned = stage("predictor", [&] { return fewshot::fit_pipeline(ds, reference, config, config.seed); },
                                           {{"reference", reference.size()}});
                logger.warnings("pca", learned.predictor.pca.warnings);
                logger.warnings("tsne", learned.embedding.warnings);
                stage("output", [&] {
                    fewshot::save_predictor(a.path("predictor.json", "predictor"), learned.predictor);
                    fewshot::write_embedding_csv(a.path("embedding.csv", "embedding"), learned.embedding);
                    a.write_json("embedding.json", "embedding_sidecar", fewshot::embedding_sidecar(learned.embedding));
                    fewshot::write_reference_csv(a.path("reference_q.csv", "reference_probabilities"),
                                                 learned.conditions.reference, ds.condition_names);
                });
                manifest["summary"] = report_summary(report);
            });
        };
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return Exit::usage;
    }

    try {
        logger.open(g.log);
        logger.event("start", {{"argv", args}});
        const int code = action();
        logger.event("done", {{"code", code}});
        return code;
    } catch (const StageError& e) {
        logger.event("error", {{"stage", e.stage()}, {"code", e.code()}, {"message", e.what()}});
        std::cerr << "fewshot: " << e.stage() << ": " << e.what() << '\n';
        return e.code();
    } catch (const std::exception& e) {
        logger.event("error", {{"stage", "internal"}, {"code", Exit::internal}, {"message", e.what()}});
        std::cerr << "fewshot: " << e.what() << '\n';
        return Exit::internal;
    }
}
