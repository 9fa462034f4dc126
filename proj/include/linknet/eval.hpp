#pragma once
// Recall@K for predicate classification (PredCls) and scene graph
// classification (SGCls), attention alignment, heatmap export, and the
// ablation grid runner.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "linknet/model.hpp"
#include "linknet/train.hpp"

namespace linknet {

enum class Task { predcls, sgcls };

inline const char* to_string(Task t) { return t == Task::predcls ? "predcls" : "sgcls"; }

inline Task task_from_string(const std::string& text)
{
    if (text == "predcls") return Task::predcls;
    if (text == "sgcls") return Task::sgcls;
    throw ConfigError("task", "expected predcls or sgcls, got '" + text + "'");
}

struct Triplet {
    std::size_t subj_idx = 0;
    int subj_class = 0;
    int predicate = 1;
    std::size_t obj_idx = 0;
    int obj_class = 0;
    double score = 0.0;
};

/// Ranking order: score descending, then (subj_idx, obj_idx, predicate) ascending.
inline bool ranks_before(const Triplet& a, const Triplet& b)
{
    if (a.score != b.score) return a.score > b.score;
    if (a.subj_idx != b.subj_idx) return a.subj_idx < b.subj_idx;
    if (a.obj_idx != b.obj_idx) return a.obj_idx < b.obj_idx;
    return a.predicate < b.predicate;
}

namespace detail {

inline std::vector<double> softmax_row(std::span<const double> row)
{
    const double peak = *std::max_element(row.begin(), row.end());
    std::vector<double> out(row.size());
    double total = 0.0;
    for (std::size_t j = 0; j < row.size(); ++j) total += (out[j] = std::exp(row[j] - peak));
    for (auto& v : out) v /= total;
    return out;
}

} // namespace detail

/// One triplet per ordered pair (graph constraint): the best non-background
/// predicate, scored P(predicate) * P(subject class) * P(object class). Under
/// PredCls the classes are ground truth with probability 1; under SGCls they are
/// the argmax of O4 with their softmax probabilities.
inline std::vector<Triplet> predict_triplets(const ModelOutput& output, const Scene& scene, Task task)
{
    const std::size_t n = scene.size();
    std::vector<int> classes(n);
    std::vector<double> class_prob(n, 1.0);
    for (std::size_t i = 0; i < n; ++i) {
        if (task == Task::predcls) {
            classes[i] = scene.objects[i].class_id;
        } else {
            const auto probs = detail::softmax_row(output.o4.row_span(i));
            const auto best = static_cast<std::size_t>(std::max_element(probs.begin(), probs.end()) - probs.begin());
            classes[i] = static_cast<int>(best);
            class_prob[i] = probs[best];
        }
    }
    const auto pairs = ordered_pairs(n);
    std::vector<Triplet> ranked;
    ranked.reserve(pairs.size());
    for (std::size_t r = 0; r < pairs.size(); ++r) {
        const auto probs = detail::softmax_row(output.g2.row_span(r));
        std::size_t best = 1;
        for (std::size_t p = 2; p < probs.size(); ++p)
            if (probs[p] > probs[best]) best = p;
        const auto [i, j] = pairs[r];
        ranked.push_back({i, classes[i], static_cast<int>(best), j, classes[j], probs[best] * class_prob[i] * class_prob[j]});
    }
    std::sort(ranked.begin(), ranked.end(), ranks_before);
    return ranked;
}

struct GtTriplet {
    std::size_t subj_idx = 0;
    int subj_class = 0;
    int predicate = 1;
    std::size_t obj_idx = 0;
    int obj_class = 0;
};

inline std::vector<GtTriplet> gt_triplets(const Scene& scene)
{
    std::vector<GtTriplet> out;
    for (const auto& rel : scene.relations) {
        const auto s = static_cast<std::size_t>(rel.subj), o = static_cast<std::size_t>(rel.obj);
        out.push_back({s, scene.objects[s].class_id, rel.predicate, o, scene.objects[o].class_id});
    }
    return out;
}

inline bool triplet_matches(const Triplet& t, const GtTriplet& g)
{
    return t.subj_idx == g.subj_idx && t.obj_idx == g.obj_idx && t.predicate == g.predicate &&
           t.subj_class == g.subj_class && t.obj_class == g.obj_class;
}

/// Which ground-truth triplets appear among the first k ranked ones. Each GT
/// triplet and each prediction is used at most once.
inline std::vector<bool> match_top_k(const std::vector<Triplet>& ranked, const std::vector<GtTriplet>& gt, int k)
{
    if (k <= 0) throw std::invalid_argument("recall@K needs K >= 1");
    std::vector<bool> matched(gt.size(), false);
    const std::size_t limit = std::min(ranked.size(), static_cast<std::size_t>(k));
    for (std::size_t r = 0; r < limit; ++r) {
        for (std::size_t g = 0; g < gt.size(); ++g) {
            if (!matched[g] && triplet_matches(ranked[r], gt[g])) {
                matched[g] = true;
                break;
            }
        }
    }
    return matched;
}

/// Fraction of ground truth recovered in the top k; nullopt for a scene without
/// ground truth (such scenes are skipped when averaging).
inline std::optional<double> recall_at_k(const std::vector<Triplet>& ranked, const std::vector<GtTriplet>& gt, int k)
{
    const auto matched = match_top_k(ranked, gt, k);
    if (gt.empty()) return std::nullopt;
    const auto hits = std::count(matched.begin(), matched.end(), true);
    return static_cast<double>(hits) / static_cast<double>(gt.size());
}

/// Mean symmetrized weight on related pairs minus the mean on unrelated pairs,
/// over i < j. nullopt when either group is empty.
inline std::optional<double> attention_alignment(const Tensor& attention, const Tensor& adjacency)
{
    const std::size_t n = attention.rows();
    if (attention.cols() != n || adjacency.rows() != n || adjacency.cols() != n)
        throw DimensionError("attention_alignment: expected matching square matrices");
    double related = 0.0, unrelated = 0.0;
    std::size_t n_related = 0, n_unrelated = 0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            const double folded = 0.5 * (attention(i, j) + attention(j, i));
            if (adjacency(i, j) != 0.0 || adjacency(j, i) != 0.0) {
                related += folded;
                ++n_related;
            } else {
                unrelated += folded;
                ++n_unrelated;
            }
        }
    if (n_related == 0 || n_unrelated == 0) return std::nullopt;
    return related / static_cast<double>(n_related) - unrelated / static_cast<double>(n_unrelated);
}

/// Upper triangle of the symmetrized matrix; diagonal and lower triangle zero.
inline Tensor fold_upper(const Tensor& m)
{
    const std::size_t n = m.rows();
    Tensor out({n, n});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) out(i, j) = 0.5 * (m(i, j) + m(j, i));
    return out;
}

// ---------------------------------------------------------------------------
// Reports

struct EvalReport {
    Task task = Task::sgcls;
    std::map<int, double> recall;               ///< K -> mean recall over counted scenes
    int per_predicate_k = 0;                    ///< K used for the per-predicate table
    std::map<int, double> per_predicate_recall; ///< predicate -> matched / total
    std::map<int, std::size_t> per_predicate_total;
    std::optional<double> attention_alignment;  ///< mean over scenes where defined
    std::size_t n_scenes = 0;
    std::size_t n_counted = 0; ///< scenes with at least one GT triplet
};

/// Attention used for alignment: the first object-stage block, absent without blocks.
inline const Tensor* alignment_attention(const ModelOutput& out)
{
    return out.object_attention.empty() ? nullptr : &out.object_attention.front();
}

inline EvalReport evaluate(const std::vector<Scene>& scenes, const ModelParams& params, const ModelConfig& cfg, Task task,
                           std::vector<int> ks = {20, 50, 100})
{
    if (ks.empty()) throw std::invalid_argument("evaluate: no K values");
    std::sort(ks.begin(), ks.end());
    ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
    if (ks.front() <= 0) throw std::invalid_argument("recall@K needs K >= 1");
    EvalReport report;
    report.task = task;
    report.n_scenes = scenes.size();
    report.per_predicate_k = ks.back();
    std::map<int, double> sums;
    std::map<int, std::size_t> hits_by_predicate;
    double alignment_sum = 0.0;
    std::size_t alignment_count = 0;
    for (const Scene& scene : scenes) {
        const auto out = forward(scene, params, cfg);
        const auto ranked = predict_triplets(out, scene, task);
        const auto gt = gt_triplets(scene);
        if (!gt.empty()) {
            ++report.n_counted;
            for (int k : ks) sums[k] += *recall_at_k(ranked, gt, k);
            const auto matched = match_top_k(ranked, gt, ks.back());
            for (std::size_t g = 0; g < gt.size(); ++g) {
                ++report.per_predicate_total[gt[g].predicate];
                if (matched[g]) ++hits_by_predicate[gt[g].predicate];
            }
        }
        if (const Tensor* r = alignment_attention(out)) {
            if (auto a = attention_alignment(*r, relation_adjacency(scene))) {
                alignment_sum += *a;
                ++alignment_count;
            }
        }
    }
    for (int k : ks) report.recall[k] = report.n_counted ? sums[k] / static_cast<double>(report.n_counted) : 0.0;
    for (const auto& [predicate, total] : report.per_predicate_total)
        report.per_predicate_recall[predicate] =
            static_cast<double>(hits_by_predicate[predicate]) / static_cast<double>(total);
    if (alignment_count) report.attention_alignment = alignment_sum / static_cast<double>(alignment_count);
    return report;
}

inline json to_json(const EvalReport& r)
{
    json recall = json::object();
    for (const auto& [k, v] : r.recall) recall["R@" + std::to_string(k)] = v;
    json per_predicate = json::object();
    for (const auto& [p, v] : r.per_predicate_recall)
        per_predicate[std::to_string(p)] = {{"recall", v}, {"count", r.per_predicate_total.at(p)}};
    return {{"task", to_string(r.task)},
            {"recall", recall},
            {"per_predicate_k", r.per_predicate_k},
            {"per_predicate_recall", per_predicate},
            {"attention_alignment", r.attention_alignment ? json(*r.attention_alignment) : json(nullptr)},
            {"n_scenes", r.n_scenes},
            {"n_counted_scenes", r.n_counted}};
}

// ---------------------------------------------------------------------------
// Heatmaps

inline std::string format_double(double v)
{
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

/// Writes `<stem>.csv` (shortest round-trip decimals) and `<stem>.pgm` (binary
/// P5, min-max normalized to 0..255; a constant matrix maps to all zeros).
inline void export_heatmap(const Tensor& m, const std::string& stem)
{
    {
        std::ofstream csv(stem + ".csv", std::ios::binary | std::ios::trunc);
        if (!csv) throw std::ios_base::failure("cannot open " + stem + ".csv");
        for (std::size_t i = 0; i < m.rows(); ++i) {
            for (std::size_t j = 0; j < m.cols(); ++j) csv << (j ? "," : "") << format_double(m(i, j));
            csv << '\n';
        }
        if (!csv) throw std::ios_base::failure("write failed for " + stem + ".csv");
    }
    const auto [lo_it, hi_it] = std::minmax_element(m.data().begin(), m.data().end());
    const double lo = *lo_it, range = *hi_it - *lo_it;
    std::ofstream pgm(stem + ".pgm", std::ios::binary | std::ios::trunc);
    if (!pgm) throw std::ios_base::failure("cannot open " + stem + ".pgm");
    pgm << "P5\n" << m.cols() << ' ' << m.rows() << "\n255\n";
    for (double v : m.data()) {
        const double scaled = range > 0.0 ? 255.0 * (v - lo) / range : 0.0;
        pgm.put(static_cast<char>(static_cast<unsigned char>(std::lround(scaled))));
    }
    if (!pgm) throw std::ios_base::failure("write failed for " + stem + ".pgm");
}

inline Tensor read_csv_matrix(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::ios_base::failure("cannot open " + path);
    std::vector<double> values;
    std::size_t rows = 0, cols = 0;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::size_t count = 0;
        std::size_t start = 0;
        while (start <= line.size()) {
            const auto stop = std::min(line.find(',', start), line.size());
            double v = 0.0;
            const auto res = std::from_chars(line.data() + start, line.data() + stop, v);
            if (res.ec != std::errc{}) throw std::runtime_error("bad number in " + path);
            values.push_back(v);
            ++count;
            start = stop + 1;
        }
        if (rows == 0) cols = count;
        else if (count != cols) throw std::runtime_error("ragged CSV " + path);
        ++rows;
    }
    return Tensor({rows, cols}, std::move(values));
}

// ---------------------------------------------------------------------------
// Training + evaluation composition and the ablation grid

struct RunResult {
    ModelParams params;
    std::vector<EpochMetrics> history;
    EvalReport report;
};

/// Trains from scratch with `train.seed` and evaluates on `eval_set`.
inline RunResult train_and_evaluate(const std::vector<Scene>& train_set, const std::vector<Scene>& eval_set,
                                    const ModelConfig& cfg, const TrainConfig& train, Task task,
                                    const std::vector<int>& ks = {20, 50, 100})
{
    auto state = init_train_state(cfg, train);
    auto history = run_training(state, train_set, cfg, train);
    auto report = evaluate(eval_set, state.params, cfg, task, ks);
    return {std::move(state.params), std::move(history), std::move(report)};
}

struct AblationCell {
    std::string name;
    json delta = json::object(); ///< ModelConfig fields that differ from the baseline
};

struct AblationGrid {
    ModelConfig baseline;
    std::vector<AblationCell> cells;
};

inline ModelConfig apply_delta(const ModelConfig& baseline, const json& delta)
{
    json merged = to_json(baseline);
    for (const auto& [key, value] : delta.items()) {
        if (!merged.contains(key)) throw ConfigError(key, "unknown model config field in ablation delta");
        merged[key] = value;
    }
    return model_config_from_json(merged);
}

/// Every row of the hyper-parameter, E0-construction and module ablations,
/// plus the attention-free stack.
inline AblationGrid standard_ablation_grid(const ModelConfig& baseline)
{
    AblationGrid grid{baseline, {{"baseline", json::object()}}};
    for (int rem : {1, 3, 4}) grid.cells.push_back({"rem_count=" + std::to_string(rem), {{"rem_count", rem}}});
    grid.cells.push_back({"rem_count=0", {{"rem_count", 0}}});
    for (int r : {1, 4, 8}) grid.cells.push_back({"reduction_ratio=" + std::to_string(r), {{"reduction_ratio", r}}});
    grid.cells.push_back({"e0=argmax_only", {{"e0_construction", "argmax_only"}}});
    grid.cells.push_back({"e0=o3_only", {{"e0_construction", "o3_only"}}});
    grid.cells.push_back({"rem_only", {{"enable_glem", false}, {"enable_gce", false}}});
    grid.cells.push_back({"rem+glem", {{"enable_gce", false}}});
    grid.cells.push_back({"rem+gce", {{"enable_glem", false}}});
    grid.cells.push_back({"sigmoid", {{"row_op", "sigmoid"}}});
    grid.cells.push_back({"euclidean_rem_only", {{"similarity", "euclidean"}, {"enable_glem", false}, {"enable_gce", false}}});
    grid.cells.push_back({"euclidean", {{"similarity", "euclidean"}}});
    return grid;
}

inline json to_json(const AblationGrid& grid)
{
    json cells = json::array();
    for (const auto& c : grid.cells) cells.push_back({{"name", c.name}, {"delta", c.delta}});
    return {{"baseline", to_json(grid.baseline)}, {"cells", cells}};
}

inline AblationGrid ablation_grid_from_json(const json& j)
{
    AblationGrid grid;
    grid.baseline = j.contains("baseline") ? model_config_from_json(j.at("baseline")) : ModelConfig{};
    if (!j.contains("cells")) return standard_ablation_grid(grid.baseline);
    for (const auto& c : j.at("cells")) {
        AblationCell cell{c.at("name").get<std::string>(), c.value("delta", json::object())};
        apply_delta(grid.baseline, cell.delta);
        grid.cells.push_back(std::move(cell));
    }
    return grid;
}

struct AblationRun {
    std::string cell;
    std::uint64_t seed = 0;
    bool ok = false;
    std::string error;
    EvalReport report;
};

using AblationProgress = std::function<void(const AblationRun&)>;

/// Trains every cell from scratch once per seed and evaluates SGCls recall.
/// A failing run is recorded and the grid continues.
inline std::vector<AblationRun> run_ablation(const AblationGrid& grid, const std::vector<Scene>& train_set,
                                             const std::vector<Scene>& eval_set, TrainConfig train,
                                             const std::vector<std::uint64_t>& seeds,
                                             const AblationProgress& progress = {})
{
    if (seeds.size() < 3) throw std::invalid_argument("run_ablation: at least 3 seeds per cell are required");
    std::vector<AblationRun> runs;
    for (const auto& cell : grid.cells) {
        const ModelConfig cfg = apply_delta(grid.baseline, cell.delta);
        for (auto seed : seeds) {
            AblationRun run{cell.name, seed, false, {}, {}};
            train.seed = seed;
            try {
                run.report = train_and_evaluate(train_set, eval_set, cfg, train, Task::sgcls).report;
                run.ok = true;
            } catch (const std::exception& e) {
                run.error = e.what();
            }
            if (progress) progress(run);
            runs.push_back(std::move(run));
        }
    }
    return runs;
}

struct MeanStd {
    double mean = 0.0;
    double std = 0.0; ///< sample standard deviation; 0 for a single value
    std::size_t n = 0;
};

inline MeanStd mean_std(const std::vector<double>& values)
{
    MeanStd out;
    out.n = values.size();
    if (values.empty()) return out;
    out.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
    if (values.size() > 1) {
        double ss = 0.0;
        for (double v : values) ss += (v - out.mean) * (v - out.mean);
        out.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
    }
    return out;
}

struct CellSummary {
    std::string cell;
    std::map<int, MeanStd> recall;
    std::size_t failures = 0;
};

inline std::vector<CellSummary> summarize(const std::vector<AblationRun>& runs)
{
    std::vector<CellSummary> out;
    std::map<std::string, std::map<int, std::vector<double>>> values;
    for (const auto& run : runs) {
        auto it = std::find_if(out.begin(), out.end(), [&](const CellSummary& s) { return s.cell == run.cell; });
        if (it == out.end()) {
            out.push_back({run.cell, {}, 0});
            it = std::prev(out.end());
        }
        if (!run.ok) {
            ++it->failures;
            continue;
        }
        for (const auto& [k, v] : run.report.recall) values[run.cell][k].push_back(v);
    }
    for (auto& s : out)
        for (const auto& [k, vs] : values[s.cell]) s.recall[k] = mean_std(vs);
    return out;
}

/// Columns: cell, seed, R@20, R@50, R@100, status. Failed runs leave the recall
/// columns empty and carry the error text in status.
inline std::string ablation_csv(const std::vector<AblationRun>& runs)
{
    std::ostringstream out;
    out << "cell,seed,R@20,R@50,R@100,status\n";
    for (const auto& run : runs) {
        out << run.cell << ',' << run.seed;
        for (int k : {20, 50, 100}) {
            out << ',';
            if (run.ok && run.report.recall.count(k)) out << format_double(run.report.recall.at(k));
        }
        std::string status = run.ok ? "ok" : run.error;
        std::replace(status.begin(), status.end(), ',', ';');
        std::replace(status.begin(), status.end(), '\n', ' ');
        out << ',' << status << '\n';
    }
    return out.str();
}

inline std::string ablation_summary_csv(const std::vector<CellSummary>& summary)
{
    std::ostringstream out;
    out << "cell,runs,failures,R@20_mean,R@20_std,R@50_mean,R@50_std,R@100_mean,R@100_std\n";
    for (const auto& s : summary) {
        const std::size_t n = s.recall.empty() ? 0 : s.recall.begin()->second.n;
        out << s.cell << ',' << n << ',' << s.failures;
        for (int k : {20, 50, 100}) {
            if (auto it = s.recall.find(k); it != s.recall.end())
                out << ',' << format_double(it->second.mean) << ',' << format_double(it->second.std);
            else
                out << ",,";
        }
        out << '\n';
    }
    return out.str();
}

} // namespace linknet
