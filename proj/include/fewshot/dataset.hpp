#ifndef FEWSHOT_DATASET_HPP
#define FEWSHOT_DATASET_HPP

#include "fewshot/csv.hpp"
#include "fewshot/random.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

/**
 * @file dataset.hpp
 *
 * @brief Feature/label ingestion, balanced subset construction and
 * patient-grouped split and fold assignment.
 */

namespace fewshot {

struct SampleRecord {
    std::string sample_id;
    std::string patient_id;
    std::vector<double> features;
    std::vector<std::uint8_t> labels;

    bool is_normal() const {
        return std::all_of(labels.begin(), labels.end(), [](std::uint8_t y) { return y == 0; });
    }
};

/**
 * @brief Samples with conditions sorted by decreasing frequency.
 *
 * `original_condition_order[n]` is the column position, in the labels file,
 * of the condition now stored at index `n`.
 */
struct Dataset {
    std::vector<SampleRecord> records;
    std::vector<std::string> condition_names;
    std::vector<std::size_t> original_condition_order;
    std::vector<std::size_t> frequencies;

    std::size_t size() const { return records.size(); }
    std::size_t dimension() const { return records.empty() ? 0 : records.front().features.size(); }
    std::size_t condition_count() const { return condition_names.size(); }

    std::size_t index_of(const std::string& sample_id) const {
        for (std::size_t i = 0; i < records.size(); ++i) {
            if (records[i].sample_id == sample_id) {
                return i;
            }
        }
        throw std::out_of_range("unknown sample_id '" + sample_id + "'");
    }

    /// Rows of the selected records, in the given order.
    Eigen::MatrixXd feature_matrix(const std::vector<std::size_t>& indices) const {
        Eigen::MatrixXd out(static_cast<Eigen::Index>(indices.size()), static_cast<Eigen::Index>(dimension()));
        for (std::size_t r = 0; r < indices.size(); ++r) {
            const auto& f = records[indices[r]].features;
            for (std::size_t c = 0; c < f.size(); ++c) {
                out(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = f[c];
            }
        }
        return out;
    }

    std::vector<std::vector<std::uint8_t>> label_rows(const std::vector<std::size_t>& indices) const {
        std::vector<std::vector<std::uint8_t>> out;
        out.reserve(indices.size());
        for (auto i : indices) {
            out.push_back(records[i].labels);
        }
        return out;
    }
};

/**
 * Builds a dataset from records already in memory. Computes frequencies and
 * stably re-sorts conditions by decreasing frequency.
 */
inline Dataset make_dataset(std::vector<SampleRecord> records, std::vector<std::string> condition_names) {
    const std::size_t n_conditions = condition_names.size();
    std::vector<std::size_t> counts(n_conditions, 0);
    for (const auto& r : records) {
        if (r.labels.size() != n_conditions) {
            throw DataError("sample '" + r.sample_id + "' has " + std::to_string(r.labels.size()) + " labels, expected " +
                            std::to_string(n_conditions));
        }
        for (std::size_t n = 0; n < n_conditions; ++n) {
            counts[n] += r.labels[n];
        }
    }

    std::vector<std::size_t> order(n_conditions);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return counts[a] > counts[b]; });

    Dataset out;
    out.original_condition_order = order;
    for (auto o : order) {
        out.condition_names.push_back(condition_names[o]);
        out.frequencies.push_back(counts[o]);
    }
    for (auto& r : records) {
        std::vector<std::uint8_t> sorted(n_conditions);
        for (std::size_t n = 0; n < n_conditions; ++n) {
            sorted[n] = r.labels[order[n]];
        }
        r.labels = std::move(sorted);
    }
    out.records = std::move(records);
    return out;
}

/**
 * Loads `sample_id,patient_id,f0..` and `sample_id,<names>..` CSV files.
 * Rows are matched by sample_id; the features file fixes the record order.
 * An optional `is_normal` label column is checked against the all-zero rule
 * and then dropped.
 */
inline Dataset load_dataset(const std::string& features_path, const std::string& labels_path) {
    const auto features = read_csv(features_path);
    const auto labels = read_csv(labels_path);

    if (features.header.size() < 3 || features.header[0] != "sample_id" || features.header[1] != "patient_id") {
        throw DataError("'" + features_path + "': header must be sample_id,patient_id,f0,...", 1);
    }
    if (labels.header.size() < 2 || labels.header[0] != "sample_id") {
        throw DataError("'" + labels_path + "': header must be sample_id,<condition>,...", 1);
    }

    std::vector<std::string> names;
    std::ptrdiff_t normal_column = -1;
    for (std::size_t c = 1; c < labels.header.size(); ++c) {
        if (labels.header[c] == "is_normal") {
            normal_column = static_cast<std::ptrdiff_t>(c);
        } else {
            names.push_back(labels.header[c]);
        }
    }
    if (names.empty()) {
        throw DataError("'" + labels_path + "': no condition columns", 1);
    }

    std::unordered_map<std::string, std::size_t> label_row_of;
    for (std::size_t r = 0; r < labels.rows.size(); ++r) {
        const auto& row = labels.rows[r];
        if (!label_row_of.emplace(row[0], r).second) {
            throw DataError("'" + labels_path + "': duplicate sample_id '" + row[0] + "'", labels.line_numbers[r]);
        }
        for (std::size_t c = 1; c < row.size(); ++c) {
            if (row[c] != "0" && row[c] != "1") {
                throw DataError("'" + labels_path + "': non-binary label '" + row[c] + "' in column '" +
                                    labels.header[c] + "'",
                                labels.line_numbers[r]);
            }
        }
    }

    const std::size_t dim = features.header.size() - 2;
    std::vector<SampleRecord> records;
    records.reserve(features.rows.size());
    std::set<std::string> seen;
    for (std::size_t r = 0; r < features.rows.size(); ++r) {
        const auto& row = features.rows[r];
        const auto line = features.line_numbers[r];
        if (!seen.insert(row[0]).second) {
            throw DataError("'" + features_path + "': duplicate sample_id '" + row[0] + "'", line);
        }
        SampleRecord rec;
        rec.sample_id = row[0];
        rec.patient_id = row[1];
        rec.features.resize(dim);
        for (std::size_t c = 0; c < dim; ++c) {
            double v;
            if (!parse_double(row[c + 2], v)) {
                throw DataError("'" + features_path + "': cannot parse '" + row[c + 2] + "' as a number", line);
            }
            if (!std::isfinite(v)) {
                throw DataError("'" + features_path + "': non-finite feature in column '" + features.header[c + 2] + "'",
                                line);
            }
            rec.features[c] = v;
        }

        const auto found = label_row_of.find(rec.sample_id);
        if (found == label_row_of.end()) {
            throw DataError("'" + labels_path + "': no labels for sample_id '" + rec.sample_id + "'", line);
        }
        const auto& lrow = labels.rows[found->second];
        for (std::size_t c = 1; c < lrow.size(); ++c) {
            if (static_cast<std::ptrdiff_t>(c) != normal_column) {
                rec.labels.push_back(lrow[c] == "1" ? 1 : 0);
            }
        }
        if (normal_column >= 0) {
            const bool flagged = lrow[static_cast<std::size_t>(normal_column)] == "1";
            if (flagged != rec.is_normal()) {
                throw DataError("'" + labels_path + "': is_normal disagrees with condition labels for '" +
                                    rec.sample_id + "'",
                                labels.line_numbers[found->second]);
            }
        }
        records.push_back(std::move(rec));
    }
    if (records.empty()) {
        throw DataError("'" + features_path + "': no samples");
    }
    if (label_row_of.size() != records.size()) {
        for (std::size_t r = 0; r < labels.rows.size(); ++r) {
            if (!seen.count(labels.rows[r][0])) {
                throw DataError("'" + labels_path + "': sample_id '" + labels.rows[r][0] + "' has no features",
                                labels.line_numbers[r]);
            }
        }
    }
    return make_dataset(std::move(records), std::move(names));
}

/**
 * @brief Balanced subset B_M used to populate the learning split.
 *
 * Conditions c_M down to c_1 are visited in turn. Samples positive for the
 * current condition are drawn at random until all are taken or the number of
 * selected samples positive for it (from any earlier step) reaches the cap.
 * Samples positive for a rare condition (index >= M, zero-based) are never
 * eligible. Finally up to `normal_count` normal samples are drawn.
 */
inline std::set<std::string> build_balanced_subset(const Dataset& dataset, std::size_t frequent_count,
                                                   std::size_t per_condition_cap, std::size_t normal_count,
                                                   std::uint64_t seed) {
    const auto n_conditions = dataset.condition_count();
    if (frequent_count < 1 || frequent_count > n_conditions) {
        throw std::invalid_argument("M must lie in [1, " + std::to_string(n_conditions) + "], got " +
                                    std::to_string(frequent_count));
    }

    Rng rng(seed);
    const auto& records = dataset.records;
    std::vector<bool> eligible(records.size(), true), selected(records.size(), false);
    for (std::size_t i = 0; i < records.size(); ++i) {
        for (std::size_t n = frequent_count; n < n_conditions; ++n) {
            if (records[i].labels[n]) {
                eligible[i] = false;
                break;
            }
        }
    }

    for (std::size_t step = frequent_count; step-- > 0;) {
        std::size_t already = 0;
        std::vector<std::size_t> candidates;
        for (std::size_t i = 0; i < records.size(); ++i) {
            if (!records[i].labels[step]) {
                continue;
            }
            if (selected[i]) {
                ++already;
            } else if (eligible[i]) {
                candidates.push_back(i);
            }
        }
        rng.shuffle(candidates);
        for (std::size_t k = 0; k < candidates.size() && already < per_condition_cap; ++k, ++already) {
            selected[candidates[k]] = true;
        }
    }

    std::vector<std::size_t> normals;
    for (std::size_t i = 0; i < records.size(); ++i) {
        if (!selected[i] && records[i].is_normal()) {
            normals.push_back(i);
        }
    }
    rng.shuffle(normals);
    for (std::size_t k = 0; k < std::min(normal_count, normals.size()); ++k) {
        selected[normals[k]] = true;
    }

    std::set<std::string> out;
    for (std::size_t i = 0; i < records.size(); ++i) {
        if (selected[i]) {
            out.insert(records[i].sample_id);
        }
    }
    return out;
}

enum class Split : std::uint8_t { Learn = 0, Valid = 1, Test = 2 };

inline const char* to_string(Split s) {
    switch (s) {
    case Split::Learn:
        return "LEARN";
    case Split::Valid:
        return "VALID";
    default:
        return "TEST";
    }
}

inline Split split_from_string(const std::string& s) {
    if (s == "LEARN") {
        return Split::Learn;
    }
    if (s == "VALID") {
        return Split::Valid;
    }
    if (s == "TEST") {
        return Split::Test;
    }
    throw DataError("unknown split '" + s + "'");
}

struct SplitAssignment {
    std::map<std::string, Split> assignment;
    std::uint64_t seed = 0;

    /// Dataset row indices assigned to `split`, in dataset order.
    std::vector<std::size_t> indices(const Dataset& dataset, Split split) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < dataset.size(); ++i) {
            if (assignment.at(dataset.records[i].sample_id) == split) {
                out.push_back(i);
            }
        }
        return out;
    }
};

struct FoldAssignment {
    std::map<std::string, std::size_t> fold;
    std::size_t n_folds = 10;
};

namespace detail {

struct PatientGroup {
    std::vector<std::size_t> members;
    std::vector<std::size_t> positives; // per condition
    std::size_t rarest = 0;             // smallest side-frequency among its positive conditions
};

/**
 * Greedy patient-grouped stratified split of one side (balanced or not).
 * Groups are visited rarest-condition first (random order within ties); each
 * goes to the split with the largest relative deficit over the conditions it
 * carries, among splits whose integer size target it still fits.
 */
inline void stratified_assign(const std::vector<std::size_t>& order_groups, std::vector<PatientGroup>& groups,
                              const std::vector<Split>& splits, const std::vector<double>& fractions,
                              std::size_t n_conditions, std::vector<Split>& out) {
    std::size_t total = 0;
    std::vector<std::size_t> condition_total(n_conditions, 0);
    for (auto g : order_groups) {
        total += groups[g].members.size();
        for (std::size_t n = 0; n < n_conditions; ++n) {
            condition_total[n] += groups[g].positives[n];
        }
    }
    if (total == 0) {
        return;
    }

    // Largest-remainder rounding of the size targets.
    const std::size_t n_splits = splits.size();
    std::vector<std::size_t> target(n_splits);
    std::vector<std::pair<double, std::size_t>> remainders;
    std::size_t assigned = 0;
    for (std::size_t s = 0; s < n_splits; ++s) {
        const double exact = fractions[s] * static_cast<double>(total);
        target[s] = static_cast<std::size_t>(std::floor(exact + 1e-9));
        assigned += target[s];
        remainders.emplace_back(exact - static_cast<double>(target[s]), s);
    }
    std::stable_sort(remainders.begin(), remainders.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t k = 0; assigned < total; ++k, ++assigned) {
        ++target[remainders[k % n_splits].second];
    }

    std::vector<std::size_t> size(n_splits, 0);
    std::vector<std::vector<std::size_t>> condition_count(n_splits, std::vector<std::size_t>(n_conditions, 0));

    for (auto g : order_groups) {
        const auto& group = groups[g];
        const auto gsize = group.members.size();

        auto score = [&](std::size_t s) {
            double value = 0.0;
            bool any = false;
            for (std::size_t n = 0; n < n_conditions; ++n) {
                if (group.positives[n] == 0) {
                    continue;
                }
                any = true;
                const double want = fractions[s] * static_cast<double>(condition_total[n]);
                value += static_cast<double>(group.positives[n]) *
                         (1.0 - static_cast<double>(condition_count[s][n]) / want);
            }
            if (!any) {
                value = 1.0 - static_cast<double>(size[s]) / static_cast<double>(target[s]);
            }
            return value;
        };

        std::ptrdiff_t best = -1;
        double best_score = 0.0;
        for (std::size_t s = 0; s < n_splits; ++s) {
            if (target[s] == 0 || size[s] + gsize > target[s]) {
                continue;
            }
            const double sc = score(s);
            if (best < 0 || sc > best_score + 1e-12) {
                best = static_cast<std::ptrdiff_t>(s);
                best_score = sc;
            }
        }
        if (best < 0) {
            // No split has room for the whole group: take the one with most room left.
            std::ptrdiff_t room_best = 0;
            for (std::size_t s = 1; s < n_splits; ++s) {
                const auto room = static_cast<std::ptrdiff_t>(target[s]) - static_cast<std::ptrdiff_t>(size[s]);
                const auto cur = static_cast<std::ptrdiff_t>(target[static_cast<std::size_t>(room_best)]) -
                                 static_cast<std::ptrdiff_t>(size[static_cast<std::size_t>(room_best)]);
                if (room > cur) {
                    room_best = static_cast<std::ptrdiff_t>(s);
                }
            }
            best = room_best;
        }

        const auto s = static_cast<std::size_t>(best);
        size[s] += gsize;
        for (std::size_t n = 0; n < n_conditions; ++n) {
            condition_count[s][n] += group.positives[n];
        }
        for (auto m : group.members) {
            out[m] = splits[s];
        }
    }
}

} // namespace detail

/**
 * Patient-grouped split: B_M goes 80/10/10 to LEARN/VALID/TEST and the rest
 * of the dataset 20/80 to VALID/TEST. A patient whose samples straddle the
 * boundary follows the side holding the majority of them (ties: balanced).
 */
inline SplitAssignment assign_splits(const Dataset& dataset, const std::set<std::string>& balanced, std::uint64_t seed) {
    const auto n_conditions = dataset.condition_count();
    {
        std::set<std::string> known;
        for (const auto& r : dataset.records) {
            known.insert(r.sample_id);
        }
        for (const auto& id : balanced) {
            if (!known.count(id)) {
                throw std::invalid_argument("balanced subset names unknown sample_id '" + id + "'");
            }
        }
    }

    std::map<std::string, std::size_t> group_of;
    std::vector<detail::PatientGroup> groups;
    std::vector<std::size_t> in_balanced;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        const auto& rec = dataset.records[i];
        auto [it, inserted] = group_of.emplace(rec.patient_id, groups.size());
        if (inserted) {
            groups.push_back({{}, std::vector<std::size_t>(n_conditions, 0), 0});
            in_balanced.push_back(0);
        }
        auto& g = groups[it->second];
        g.members.push_back(i);
        for (std::size_t n = 0; n < n_conditions; ++n) {
            g.positives[n] += rec.labels[n];
        }
        in_balanced[it->second] += balanced.count(rec.sample_id);
    }

    std::vector<std::size_t> balanced_side, other_side;
    for (std::size_t g = 0; g < groups.size(); ++g) {
        const auto inside = in_balanced[g];
        const auto outside = groups[g].members.size() - inside;
        (inside >= outside ? balanced_side : other_side).push_back(g);
    }

    Rng rng(seed);
    auto prepare = [&](std::vector<std::size_t>& side) {
        std::vector<std::size_t> freq(n_conditions, 0);
        for (auto g : side) {
            for (std::size_t n = 0; n < n_conditions; ++n) {
                freq[n] += groups[g].positives[n];
            }
        }
        for (auto g : side) {
            auto& grp = groups[g];
            grp.rarest = std::numeric_limits<std::size_t>::max();
            for (std::size_t n = 0; n < n_conditions; ++n) {
                if (grp.positives[n]) {
                    grp.rarest = std::min(grp.rarest, freq[n]);
                }
            }
        }
        rng.shuffle(side);
        std::stable_sort(side.begin(), side.end(),
                         [&](std::size_t a, std::size_t b) { return groups[a].rarest < groups[b].rarest; });
    };
    prepare(balanced_side);
    prepare(other_side);

    std::vector<Split> per_sample(dataset.size(), Split::Test);
    detail::stratified_assign(balanced_side, groups, {Split::Learn, Split::Valid, Split::Test}, {0.8, 0.1, 0.1},
                              n_conditions, per_sample);
    detail::stratified_assign(other_side, groups, {Split::Valid, Split::Test}, {0.2, 0.8}, n_conditions, per_sample);

    SplitAssignment out;
    out.seed = seed;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        out.assignment.emplace(dataset.records[i].sample_id, per_sample[i]);
    }
    return out;
}

/// Patients are shuffled by seed and dealt round-robin into folds.
inline FoldAssignment assign_folds(const std::vector<std::string>& sample_ids, const std::vector<std::string>& patient_ids,
                                   std::size_t n_folds, std::uint64_t seed) {
    if (sample_ids.size() != patient_ids.size()) {
        throw std::invalid_argument("sample_ids and patient_ids differ in length");
    }
    if (n_folds < 2) {
        throw std::invalid_argument("need at least 2 folds");
    }
    std::set<std::string> unique(patient_ids.begin(), patient_ids.end());
    if (unique.size() < n_folds) {
        throw std::invalid_argument("only " + std::to_string(unique.size()) + " distinct patients for " +
                                    std::to_string(n_folds) + " folds");
    }
    std::vector<std::string> patients(unique.begin(), unique.end());
    Rng rng(seed);
    rng.shuffle(patients);

    std::map<std::string, std::size_t> patient_fold;
    for (std::size_t k = 0; k < patients.size(); ++k) {
        patient_fold[patients[k]] = k % n_folds;
    }
    FoldAssignment out;
    out.n_folds = n_folds;
    for (std::size_t i = 0; i < sample_ids.size(); ++i) {
        out.fold[sample_ids[i]] = patient_fold[patient_ids[i]];
    }
    return out;
}

inline void write_split_csv(const std::string& path, const Dataset& dataset, const SplitAssignment& splits) {
    auto out = open_output(path);
    out << "sample_id,assignment\n";
    for (const auto& r : dataset.records) {
        out << r.sample_id << ',' << to_string(splits.assignment.at(r.sample_id)) << '\n';
    }
}

inline void write_fold_csv(const std::string& path, const std::vector<std::string>& sample_ids,
                           const FoldAssignment& folds) {
    auto out = open_output(path);
    out << "sample_id,fold\n";
    for (const auto& id : sample_ids) {
        out << id << ',' << folds.fold.at(id) << '\n';
    }
}

inline SplitAssignment read_split_csv(const std::string& path) {
    const auto table = read_csv(path);
    if (table.header.size() != 2 || table.header[0] != "sample_id" || table.header[1] != "assignment") {
        throw DataError("'" + path + "': header must be sample_id,assignment", 1);
    }
    SplitAssignment out;
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
        try {
            out.assignment[table.rows[r][0]] = split_from_string(table.rows[r][1]);
        } catch (const DataError& e) {
            throw DataError(std::string("'") + path + "': " + e.what(), table.line_numbers[r]);
        }
    }
    return out;
}

} // namespace fewshot

#endif
