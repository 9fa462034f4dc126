#pragma once
// Scenes, the synthetic scene generator, and JSON-lines dataset persistence.
//
// The generator stands in for a detector front end. Each scene is a chain of
// objects where consecutive objects are related subject -> object. Classes come
// in twin pairs (2g, 2g+1) that share a group prototype, so a single object's
// feature and label distribution barely separate the twins; what separates them
// is the group of the object it points to. Predicates on a relation are either
// read off the subject/object box layout through the geometric rule table or
// drawn from a class-pair prior, as fixed per class pair by the semantic table.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "linknet/tensor.hpp"

namespace linknet {

using json = nlohmann::json;

class SceneError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public std::invalid_argument {
public:
    ConfigError(std::string field, const std::string& message)
        : std::invalid_argument(field + ": " + message), field_(std::move(field))
    {}
    const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

class DatasetError : public std::runtime_error {
public:
    DatasetError(std::size_t line, const std::string& message)
        : std::runtime_error("line " + std::to_string(line) + ": " + message), line_(line)
    {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

struct Box {
    double x = 0.0; ///< center
    double y = 0.0; ///< center
    double w = 1.0;
    double h = 1.0;

    friend bool operator==(const Box&, const Box&) = default;
};

struct SceneObject {
    Box box;
    int class_id = 0;
    std::vector<double> feature;
    std::vector<double> label_dist; ///< simulated detector class distribution

    friend bool operator==(const SceneObject&, const SceneObject&) = default;
};

/// Directed, predicate-labelled edge. Predicate 0 is background and never stored.
struct Relation {
    int subj = 0;
    int obj = 0;
    int predicate = 1;

    friend bool operator==(const Relation&, const Relation&) = default;
};

struct Scene {
    std::string scene_id;
    std::vector<SceneObject> objects;
    std::vector<Relation> relations;
    Tensor grid; ///< d_img × H × W

    std::size_t size() const noexcept { return objects.size(); }
    friend bool operator==(const Scene&, const Scene&) = default;
};

/// Region over the normalized offsets (dx / w_s, dy / h_s) that implies a predicate.
struct GeometricRule {
    int predicate = 1;
    double dx_min = -std::numeric_limits<double>::infinity();
    double dx_max = std::numeric_limits<double>::infinity();
    double dy_min = -std::numeric_limits<double>::infinity();
    double dy_max = std::numeric_limits<double>::infinity();

    bool contains(double dx, double dy) const
    {
        return dx >= dx_min && dx < dx_max && dy >= dy_min && dy < dy_max;
    }
    friend bool operator==(const GeometricRule&, const GeometricRule&) = default;
};

enum class PredicateSource { geometric, semantic };

struct PairRule {
    PredicateSource source = PredicateSource::semantic;
    int predicate = 1; ///< preferred predicate when source is semantic
    friend bool operator==(const PairRule&, const PairRule&) = default;
};

struct GenConfig {
    int num_object_classes = 10;
    int num_predicates = 6;
    int min_objects = 3;
    int max_objects = 12;
    int roi_dim = 32;
    int image_dim = 16;
    int grid_height = 8;
    int grid_width = 8;
    double feature_noise_sigma = 0.3;
    double label_noise = 1.0;
    double grid_noise_sigma = 1.0;
    /// Standard deviation of group prototypes; twin offsets are relative to it.
    double prototype_scale = 0.3;
    double twin_separation = 0.05;
    double geometry_fraction = 0.6;
    double layout_threshold = 0.75;
    double semantic_prior_strength = 0.9;
    double chain_break_probability = 0.15;
    /// Linked objects share a random code added to both features, with standard
    /// deviation link_code_scale * feature_noise_sigma.
    double link_code_scale = 1.0;
    /// The object of each link carries an imprint of its subject's class, of
    /// standard deviation imprint_scale * prototype_scale.
    double imprint_scale = 2.0;
    std::uint64_t rng_seed = 7;
    /// Empty tables are filled with defaults derived from the fields above.
    std::vector<GeometricRule> geometric_rule_table;
    std::vector<PairRule> semantic_rule_table; ///< indexed subject_class * C_obj + object_class

    void validate() const
    {
        if (num_object_classes < 2) throw ConfigError("C_obj", "must be >= 2");
        if (num_predicates < 2) throw ConfigError("C_rel", "must be >= 2 (background plus at least one predicate)");
        if (min_objects < 2) throw ConfigError("N_range", "minimum object count must be >= 2");
        if (max_objects < min_objects) throw ConfigError("N_range", "maximum below minimum");
        if (roi_dim < 1) throw ConfigError("d_roi", "must be positive");
        if (image_dim < 1) throw ConfigError("d_img", "must be positive");
        if (grid_height < 1) throw ConfigError("grid_height", "must be positive");
        if (grid_width < 1) throw ConfigError("grid_width", "must be positive");
        if (!(feature_noise_sigma >= 0.0)) throw ConfigError("feature_noise_sigma", "must be >= 0");
        if (!(label_noise >= 0.0 && label_noise <= 1.0)) throw ConfigError("label_noise", "must lie in [0, 1]");
        if (!(grid_noise_sigma >= 0.0)) throw ConfigError("grid_noise_sigma", "must be >= 0");
        if (!(geometry_fraction >= 0.0 && geometry_fraction <= 1.0))
            throw ConfigError("geometry_fraction", "must lie in [0, 1]");
        if (!(layout_threshold > 0.0)) throw ConfigError("layout_threshold", "must be positive");
        if (!(semantic_prior_strength >= 0.0 && semantic_prior_strength <= 1.0))
            throw ConfigError("semantic_prior_strength", "must lie in [0, 1]");
        if (!(chain_break_probability >= 0.0 && chain_break_probability <= 1.0))
            throw ConfigError("chain_break_probability", "must lie in [0, 1]");
        if (!(prototype_scale > 0.0)) throw ConfigError("prototype_scale", "must be positive");
        if (!(twin_separation >= 0.0)) throw ConfigError("twin_separation", "must be >= 0");
        if (!(link_code_scale >= 0.0)) throw ConfigError("link_code_scale", "must be >= 0");
        if (!(imprint_scale >= 0.0)) throw ConfigError("imprint_scale", "must be >= 0");
        for (const auto& rule : geometric_rule_table) {
            if (rule.predicate < 1 || rule.predicate >= num_predicates)
                throw ConfigError("geometric_rule_table", "predicate out of range");
        }
        if (!semantic_rule_table.empty()) {
            const auto expected = static_cast<std::size_t>(num_object_classes) * num_object_classes;
            if (semantic_rule_table.size() != expected)
                throw ConfigError("semantic_rule_table", "needs C_obj * C_obj entries");
            for (const auto& rule : semantic_rule_table) {
                if (rule.predicate < 1 || rule.predicate >= num_predicates)
                    throw ConfigError("semantic_rule_table", "predicate out of range");
            }
        }
    }
};

// ---------------------------------------------------------------------------
// Small helpers shared by the model and the evaluator.

inline int twin_class(int class_id, int num_classes)
{
    const int twin = class_id ^ 1;
    return twin < num_classes ? twin : class_id;
}

inline int class_group(int class_id) { return class_id / 2; }

inline int group_count(int num_classes) { return (num_classes + 1) / 2; }

/// Group that objects of `class_id` point to along a chain.
inline int partner_group(int class_id, int num_classes)
{
    const int groups = group_count(num_classes);
    return (class_group(class_id) + 1 + (class_id & 1)) % groups;
}

/// Ordered pairs (i, j), i != j, row-major over i then j.
inline std::vector<std::pair<std::size_t, std::size_t>> ordered_pairs(std::size_t n)
{
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    pairs.reserve(n * (n > 0 ? n - 1 : 0));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (i != j) pairs.emplace_back(i, j);
    return pairs;
}

/// Row index of pair (i, j) in ordered_pairs(n).
inline std::size_t pair_index(std::size_t i, std::size_t j, std::size_t n) { return i * (n - 1) + (j < i ? j : j - 1); }

/// Predicate per ordered pair with 0 for unannotated pairs.
inline std::vector<std::size_t> pair_labels(const Scene& scene)
{
    const std::size_t n = scene.size();
    std::vector<std::size_t> labels(n * (n - 1), 0);
    for (const auto& rel : scene.relations) {
        labels[pair_index(static_cast<std::size_t>(rel.subj), static_cast<std::size_t>(rel.obj), n)] =
            static_cast<std::size_t>(rel.predicate);
    }
    return labels;
}

/// Multi-hot vector of classes present in the scene, as 1×C_obj.
inline Tensor class_presence(const Scene& scene, int num_classes)
{
    Tensor out({1, static_cast<std::size_t>(num_classes)});
    for (const auto& obj : scene.objects) out(0, static_cast<std::size_t>(obj.class_id)) = 1.0;
    return out;
}

/// Symmetric 0/1 adjacency: 1 where a relation exists in either direction.
inline Tensor relation_adjacency(const Scene& scene)
{
    const std::size_t n = scene.size();
    Tensor adj({n, n});
    for (const auto& rel : scene.relations) {
        adj(static_cast<std::size_t>(rel.subj), static_cast<std::size_t>(rel.obj)) = 1.0;
        adj(static_cast<std::size_t>(rel.obj), static_cast<std::size_t>(rel.subj)) = 1.0;
    }
    return adj;
}

/// Normalized subject -> object offsets used by the geometric rule table.
inline std::pair<double, double> normalized_offset(const Box& s, const Box& o)
{
    return {(o.x - s.x) / s.w, (o.y - s.y) / s.h};
}

inline std::optional<int> geometric_predicate(const std::vector<GeometricRule>& rules, const Box& s, const Box& o)
{
    const auto [dx, dy] = normalized_offset(s, o);
    for (const auto& rule : rules)
        if (rule.contains(dx, dy)) return rule.predicate;
    return std::nullopt;
}

/// Throws SceneError on any broken invariant. `num_classes` of 0 skips class checks.
inline void validate_scene(const Scene& scene, int num_classes = 0)
{
    const std::size_t n = scene.size();
    if (n < 2) throw SceneError("scene " + scene.scene_id + " has fewer than 2 objects");
    const std::size_t roi = scene.objects.front().feature.size();
    const std::size_t classes = scene.objects.front().label_dist.size();
    if (roi == 0) throw SceneError("empty object feature");
    if (classes == 0) throw SceneError("empty label distribution");
    for (const auto& obj : scene.objects) {
        if (!(obj.box.w > 0.0) || !(obj.box.h > 0.0)) throw SceneError("box extents must be positive");
        if (obj.feature.size() != roi) throw SceneError("inconsistent feature width");
        if (obj.label_dist.size() != classes) throw SceneError("inconsistent label distribution width");
        if (obj.class_id < 0 || static_cast<std::size_t>(obj.class_id) >= classes)
            throw SceneError("class_id out of range");
        if (num_classes > 0 && static_cast<std::size_t>(num_classes) != classes)
            throw SceneError("label distribution width differs from C_obj");
        double total = 0.0;
        for (double p : obj.label_dist) {
            if (!(p >= 0.0)) throw SceneError("negative label probability");
            total += p;
        }
        if (std::abs(total - 1.0) > 1e-9) throw SceneError("label_dist does not sum to 1");
    }
    std::set<std::pair<int, int>> seen;
    for (const auto& rel : scene.relations) {
        if (rel.subj < 0 || rel.obj < 0 || static_cast<std::size_t>(rel.subj) >= n ||
            static_cast<std::size_t>(rel.obj) >= n)
            throw SceneError("relation index out of range");
        if (rel.subj == rel.obj) throw SceneError("relation with subj == obj");
        if (rel.predicate < 1) throw SceneError("relation predicate must be >= 1 (0 is background)");
        if (!seen.emplace(rel.subj, rel.obj).second) throw SceneError("duplicate relation for an ordered pair");
    }
    if (scene.grid.rank() != 3) throw SceneError("grid must be channels x height x width");
}

// ---------------------------------------------------------------------------
// Default rule tables

/// Default geometric regions. With three or more geometric predicates:
/// above (dy < -t), below (dy >= t), beside (otherwise).
inline std::vector<GeometricRule> default_geometric_rules(int num_predicates, double threshold)
{
    constexpr double inf = std::numeric_limits<double>::infinity();
    const int available = num_predicates - 1;
    std::vector<GeometricRule> rules;
    if (available >= 3) {
        rules.push_back({1, -inf, inf, -inf, -threshold});
        rules.push_back({2, -inf, inf, threshold, inf});
        rules.push_back({3, -inf, inf, -inf, inf});
    } else if (available == 2) {
        rules.push_back({1, -inf, inf, -inf, 0.0});
        rules.push_back({2, -inf, inf, -inf, inf});
    } else {
        rules.push_back({1, -inf, inf, -inf, inf});
    }
    return rules;
}

inline std::vector<int> geometric_predicate_set(const std::vector<GeometricRule>& rules)
{
    std::vector<int> out;
    for (const auto& r : rules)
        if (std::find(out.begin(), out.end(), r.predicate) == out.end()) out.push_back(r.predicate);
    std::sort(out.begin(), out.end());
    return out;
}

/// Predicates not claimed by the geometric table; all predicates if none remain.
inline std::vector<int> semantic_predicate_set(int num_predicates, const std::vector<GeometricRule>& rules)
{
    const auto geo = geometric_predicate_set(rules);
    std::vector<int> out;
    for (int p = 1; p < num_predicates; ++p)
        if (std::find(geo.begin(), geo.end(), p) == geo.end()) out.push_back(p);
    if (out.empty())
        for (int p = 1; p < num_predicates; ++p) out.push_back(p);
    return out;
}

/// Class-pair table. Pairs that chains can produce and all other pairs are
/// shuffled separately and the leading geometry_fraction of each marked geometric,
/// so the realized fraction of geometry-ruled relations tracks the setting.
inline std::vector<PairRule> default_semantic_rules(const GenConfig& cfg, const std::vector<GeometricRule>& geo)
{
    const int c = cfg.num_object_classes;
    const auto semantic = semantic_predicate_set(cfg.num_predicates, geo);
    std::mt19937_64 rng(cfg.rng_seed ^ 0x5eed5eedULL);
    std::vector<PairRule> table(static_cast<std::size_t>(c) * c);
    std::vector<std::size_t> reachable, other;
    for (int s = 0; s < c; ++s)
        for (int o = 0; o < c; ++o) {
            const auto idx = static_cast<std::size_t>(s) * c + o;
            (class_group(o) == partner_group(s, c) ? reachable : other).push_back(idx);
            std::uniform_int_distribution<std::size_t> pick(0, semantic.size() - 1);
            table[idx].predicate = semantic[pick(rng)];
        }
    for (auto* bucket : {&reachable, &other}) {
        std::shuffle(bucket->begin(), bucket->end(), rng);
        const auto n_geo = static_cast<std::size_t>(std::llround(cfg.geometry_fraction * bucket->size()));
        for (std::size_t k = 0; k < bucket->size(); ++k)
            table[(*bucket)[k]].source = k < n_geo ? PredicateSource::geometric : PredicateSource::semantic;
    }
    return table;
}

/// Copy of `cfg` with empty rule tables replaced by their defaults.
inline GenConfig resolve_tables(GenConfig cfg)
{
    if (cfg.geometric_rule_table.empty())
        cfg.geometric_rule_table = default_geometric_rules(cfg.num_predicates, cfg.layout_threshold);
    if (cfg.semantic_rule_table.empty()) cfg.semantic_rule_table = default_semantic_rules(cfg, cfg.geometric_rule_table);
    return cfg;
}

// ---------------------------------------------------------------------------
// Generator

inline std::uint64_t splitmix64(std::uint64_t x)
{
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

class SceneGenerator {
public:
    explicit SceneGenerator(GenConfig cfg) : cfg_(resolve_tables(std::move(cfg)))
    {
        cfg_.validate();
        const auto c = static_cast<std::size_t>(cfg_.num_object_classes);
        const auto roi = static_cast<std::size_t>(cfg_.roi_dim);
        const auto img = static_cast<std::size_t>(cfg_.image_dim);
        std::mt19937_64 rng(cfg_.rng_seed);
        std::normal_distribution<double> normal(0.0, 1.0);
        const auto groups = static_cast<std::size_t>(group_count(cfg_.num_object_classes));
        std::vector<std::vector<double>> group_proto(groups, std::vector<double>(roi));
        for (auto& g : group_proto)
            for (auto& v : g) v = cfg_.prototype_scale * normal(rng);
        roi_prototypes_.assign(c, std::vector<double>(roi));
        for (std::size_t k = 0; k < c; ++k)
            for (std::size_t d = 0; d < roi; ++d)
                roi_prototypes_[k][d] = group_proto[k / 2][d] + cfg_.prototype_scale * cfg_.twin_separation * normal(rng);
        imprints_.assign(c, std::vector<double>(roi));
        for (auto& imprint : imprints_)
            for (auto& v : imprint) v = cfg_.prototype_scale * cfg_.imprint_scale * normal(rng);
        image_prototypes_.assign(c, std::vector<double>(img));
        for (auto& proto : image_prototypes_)
            for (auto& v : proto) v = normal(rng);
    }

    const GenConfig& config() const noexcept { return cfg_; }
    const std::vector<double>& roi_prototype(int class_id) const { return roi_prototypes_.at(class_id); }
    const std::vector<double>& image_prototype(int class_id) const { return image_prototypes_.at(class_id); }
    /// Added to an object's feature when its chain predecessor has class `class_id`.
    const std::vector<double>& imprint(int class_id) const { return imprints_.at(class_id); }

    Scene generate(std::uint64_t seed) const
    {
        std::mt19937_64 rng(splitmix64(cfg_.rng_seed ^ splitmix64(seed)));
        std::normal_distribution<double> normal(0.0, 1.0);
        std::uniform_real_distribution<double> unit(0.0, 1.0);
        const int c = cfg_.num_object_classes;

        Scene scene;
        scene.scene_id = "scene-" + std::to_string(seed);
        std::uniform_int_distribution<int> count(cfg_.min_objects, cfg_.max_objects);
        const int n = count(rng);

        std::vector<int> classes(static_cast<std::size_t>(n));
        std::vector<std::pair<int, int>> chain_links;
        std::uniform_int_distribution<int> any_class(0, c - 1);
        for (int i = 0; i < n; ++i) {
            if (i == 0 || unit(rng) < cfg_.chain_break_probability) {
                classes[i] = any_class(rng);
            } else {
                const int group = partner_group(classes[i - 1], c);
                int cls = 2 * group + (unit(rng) < 0.5 ? 1 : 0);
                if (cls >= c) cls = 2 * group;
                classes[i] = cls;
                chain_links.emplace_back(i - 1, i);
            }
        }
        // Objects are stored in a random order so indices carry no chain position.
        std::vector<int> slot(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) slot[i] = i;
        std::shuffle(slot.begin(), slot.end(), rng);

        scene.objects.resize(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) scene.objects[slot[i]].class_id = classes[i];
        for (auto& obj : scene.objects) {
            obj.box.x = unit(rng);
            obj.box.y = unit(rng);
            obj.box.w = 0.1 + 0.3 * unit(rng);
            obj.box.h = 0.1 + 0.3 * unit(rng);
        }
        for (auto& obj : scene.objects) {
            const auto& proto = roi_prototypes_[obj.class_id];
            obj.feature.resize(proto.size());
            for (std::size_t d = 0; d < proto.size(); ++d)
                obj.feature[d] = proto[d] + cfg_.feature_noise_sigma * normal(rng);
        }
        const double code_sigma = cfg_.link_code_scale * cfg_.feature_noise_sigma;
        for (const auto& [from, to] : chain_links) {
            auto& a = scene.objects[slot[from]].feature;
            auto& b = scene.objects[slot[to]].feature;
            const auto& imprint = imprints_[classes[from]];
            for (std::size_t d = 0; d < a.size(); ++d) {
                const double code = code_sigma * normal(rng);
                a[d] += code;
                b[d] += code + imprint[d];
            }
        }
        for (auto& obj : scene.objects) {
            obj.label_dist.assign(static_cast<std::size_t>(c), 0.0);
            const double confusion = cfg_.label_noise * unit(rng);
            const int twin = twin_class(obj.class_id, c);
            if (twin == obj.class_id || confusion == 0.0) {
                obj.label_dist[obj.class_id] = 1.0;
            } else {
                obj.label_dist[obj.class_id] = 1.0 - confusion;
                obj.label_dist[twin] = confusion;
            }
        }

        const auto semantic = semantic_predicate_set(cfg_.num_predicates, cfg_.geometric_rule_table);
        for (const auto& [from, to] : chain_links) {
            Relation rel{slot[from], slot[to], 0};
            const auto& s = scene.objects[rel.subj];
            const auto& o = scene.objects[rel.obj];
            const auto& rule = pair_rule(s.class_id, o.class_id);
            std::optional<int> predicate;
            if (rule.source == PredicateSource::geometric)
                predicate = geometric_predicate(cfg_.geometric_rule_table, s.box, o.box);
            const double draw = unit(rng);
            if (!predicate) {
                predicate = rule.predicate;
                if (draw >= cfg_.semantic_prior_strength && semantic.size() > 1) {
                    std::uniform_int_distribution<std::size_t> other(0, semantic.size() - 2);
                    std::size_t k = other(rng);
                    auto it = std::find(semantic.begin(), semantic.end(), rule.predicate);
                    if (it != semantic.end() && k >= static_cast<std::size_t>(it - semantic.begin())) ++k;
                    predicate = semantic[std::min(k, semantic.size() - 1)];
                }
            }
            rel.predicate = *predicate;
            scene.relations.push_back(rel);
        }
        std::sort(scene.relations.begin(), scene.relations.end(),
                  [](const Relation& a, const Relation& b) { return std::pair(a.subj, a.obj) < std::pair(b.subj, b.obj); });

        const auto img = static_cast<std::size_t>(cfg_.image_dim);
        const auto gh = static_cast<std::size_t>(cfg_.grid_height);
        const auto gw = static_cast<std::size_t>(cfg_.grid_width);
        scene.grid = Tensor({img, gh, gw});
        for (const auto& obj : scene.objects) {
            const auto row = std::min(gh - 1, static_cast<std::size_t>(std::max(0.0, obj.box.y) * gh));
            const auto col = std::min(gw - 1, static_cast<std::size_t>(std::max(0.0, obj.box.x) * gw));
            const auto& proto = image_prototypes_[obj.class_id];
            for (std::size_t ch = 0; ch < img; ++ch) scene.grid[(ch * gh + row) * gw + col] += proto[ch];
        }
        for (auto& v : scene.grid.data()) v += cfg_.grid_noise_sigma * normal(rng);
        return scene;
    }

    const PairRule& pair_rule(int subject_class, int object_class) const
    {
        return cfg_.semantic_rule_table[static_cast<std::size_t>(subject_class) * cfg_.num_object_classes +
                                        object_class];
    }

private:
    GenConfig cfg_;
    std::vector<std::vector<double>> roi_prototypes_;
    std::vector<std::vector<double>> imprints_;
    std::vector<std::vector<double>> image_prototypes_;
};

inline Scene generate_scene(const GenConfig& cfg, std::uint64_t seed) { return SceneGenerator(cfg).generate(seed); }

/// `count` scenes with independent per-scene seeds derived from `seed`.
inline std::vector<Scene> generate_dataset(const GenConfig& cfg, std::size_t count, std::uint64_t seed)
{
    SceneGenerator gen(cfg);
    std::vector<Scene> scenes;
    scenes.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        scenes.push_back(gen.generate(splitmix64(seed) + i));
        scenes.back().scene_id = "scene-" + std::to_string(i);
    }
    return scenes;
}

/// Stand-in for the union-region feature of objects i and j: the mean of the two
/// object features plus a fixed sinusoidal code of the union box. Symmetric in
/// (i, j) since both terms are.
inline std::vector<double> union_feature(const Scene& scene, std::size_t i, std::size_t j)
{
    if (i == j) throw std::invalid_argument("union_feature: i == j");
    const auto& a = scene.objects.at(i);
    const auto& b = scene.objects.at(j);
    const double x0 = std::min(a.box.x - a.box.w / 2, b.box.x - b.box.w / 2);
    const double x1 = std::max(a.box.x + a.box.w / 2, b.box.x + b.box.w / 2);
    const double y0 = std::min(a.box.y - a.box.h / 2, b.box.y - b.box.h / 2);
    const double y1 = std::max(a.box.y + a.box.h / 2, b.box.y + b.box.h / 2);
    const double coords[4] = {(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0};
    std::vector<double> out(a.feature.size());
    for (std::size_t d = 0; d < out.size(); ++d) {
        const double freq = static_cast<double>(d / 4 + 1);
        out[d] = 0.5 * (a.feature[d] + b.feature[d]) + 0.5 * std::sin(freq * std::numbers::pi * coords[d % 4]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// JSON

inline json bound_to_json(double v) { return std::isinf(v) ? json(nullptr) : json(v); }

inline double bound_from_json(const json& j, double unbounded) { return j.is_null() ? unbounded : j.get<double>(); }

inline json to_json(const GeometricRule& r)
{
    return {{"predicate", r.predicate},
            {"dx_min", bound_to_json(r.dx_min)},
            {"dx_max", bound_to_json(r.dx_max)},
            {"dy_min", bound_to_json(r.dy_min)},
            {"dy_max", bound_to_json(r.dy_max)}};
}

inline GeometricRule geometric_rule_from_json(const json& j)
{
    constexpr double inf = std::numeric_limits<double>::infinity();
    GeometricRule r;
    r.predicate = j.at("predicate").get<int>();
    r.dx_min = bound_from_json(j.value("dx_min", json(nullptr)), -inf);
    r.dx_max = bound_from_json(j.value("dx_max", json(nullptr)), inf);
    r.dy_min = bound_from_json(j.value("dy_min", json(nullptr)), -inf);
    r.dy_max = bound_from_json(j.value("dy_max", json(nullptr)), inf);
    return r;
}

inline json to_json(const GenConfig& cfg)
{
    const GenConfig full = resolve_tables(cfg);
    json geo = json::array();
    for (const auto& r : full.geometric_rule_table) geo.push_back(to_json(r));
    json sem = json::array();
    const int c = full.num_object_classes;
    for (std::size_t k = 0; k < full.semantic_rule_table.size(); ++k) {
        const auto& r = full.semantic_rule_table[k];
        sem.push_back({{"subject_class", static_cast<int>(k) / c},
                       {"object_class", static_cast<int>(k) % c},
                       {"source", r.source == PredicateSource::geometric ? "geometric" : "semantic"},
                       {"predicate", r.predicate}});
    }
    return {{"C_obj", full.num_object_classes},
            {"C_rel", full.num_predicates},
            {"N_range", {full.min_objects, full.max_objects}},
            {"d_roi", full.roi_dim},
            {"d_img", full.image_dim},
            {"grid_height", full.grid_height},
            {"grid_width", full.grid_width},
            {"feature_noise_sigma", full.feature_noise_sigma},
            {"label_noise", full.label_noise},
            {"grid_noise_sigma", full.grid_noise_sigma},
            {"prototype_scale", full.prototype_scale},
            {"twin_separation", full.twin_separation},
            {"geometry_fraction", full.geometry_fraction},
            {"layout_threshold", full.layout_threshold},
            {"semantic_prior_strength", full.semantic_prior_strength},
            {"chain_break_probability", full.chain_break_probability},
            {"link_code_scale", full.link_code_scale},
            {"imprint_scale", full.imprint_scale},
            {"rng_seed", full.rng_seed},
            {"geometric_rule_table", geo},
            {"semantic_rule_table", sem}};
}

/// Missing keys take defaults. Throws ConfigError naming the offending field.
inline GenConfig gen_config_from_json(const json& j)
{
    GenConfig cfg;
    auto field = [&](const char* key, auto& target) {
        if (!j.contains(key)) return;
        try {
            target = j.at(key).get<std::decay_t<decltype(target)>>();
        } catch (const json::exception& e) {
            throw ConfigError(key, e.what());
        }
    };
    if (!j.is_object()) throw ConfigError("<root>", "config must be a JSON object");
    field("C_obj", cfg.num_object_classes);
    field("C_rel", cfg.num_predicates);
    if (j.contains("N_range")) {
        const auto& range = j.at("N_range");
        if (!range.is_array() || range.size() != 2) throw ConfigError("N_range", "expected [min, max]");
        cfg.min_objects = range[0].get<int>();
        cfg.max_objects = range[1].get<int>();
    }
    field("d_roi", cfg.roi_dim);
    field("d_img", cfg.image_dim);
    field("grid_height", cfg.grid_height);
    field("grid_width", cfg.grid_width);
    field("feature_noise_sigma", cfg.feature_noise_sigma);
    field("label_noise", cfg.label_noise);
    field("grid_noise_sigma", cfg.grid_noise_sigma);
    field("prototype_scale", cfg.prototype_scale);
    field("twin_separation", cfg.twin_separation);
    field("geometry_fraction", cfg.geometry_fraction);
    field("layout_threshold", cfg.layout_threshold);
    field("semantic_prior_strength", cfg.semantic_prior_strength);
    field("chain_break_probability", cfg.chain_break_probability);
    field("link_code_scale", cfg.link_code_scale);
    field("imprint_scale", cfg.imprint_scale);
    field("rng_seed", cfg.rng_seed);
    try {
        if (j.contains("geometric_rule_table"))
            for (const auto& r : j.at("geometric_rule_table")) cfg.geometric_rule_table.push_back(geometric_rule_from_json(r));
    } catch (const json::exception& e) {
        throw ConfigError("geometric_rule_table", e.what());
    }
    if (j.contains("semantic_rule_table")) {
        const int c = cfg.num_object_classes;
        cfg.semantic_rule_table.assign(static_cast<std::size_t>(std::max(c, 0)) * std::max(c, 0), PairRule{});
        try {
            for (const auto& r : j.at("semantic_rule_table")) {
                const int s = r.at("subject_class").get<int>();
                const int o = r.at("object_class").get<int>();
                if (s < 0 || o < 0 || s >= c || o >= c) throw ConfigError("semantic_rule_table", "class out of range");
                auto& entry = cfg.semantic_rule_table[static_cast<std::size_t>(s) * c + o];
                entry.source = r.at("source").get<std::string>() == "geometric" ? PredicateSource::geometric
                                                                                 : PredicateSource::semantic;
                entry.predicate = r.at("predicate").get<int>();
            }
        } catch (const json::exception& e) {
            throw ConfigError("semantic_rule_table", e.what());
        }
    }
    cfg.validate();
    return cfg;
}

inline json to_json(const Scene& scene)
{
    json objects = json::array();
    for (const auto& obj : scene.objects) {
        objects.push_back({{"box", {{"x", obj.box.x}, {"y", obj.box.y}, {"w", obj.box.w}, {"h", obj.box.h}}},
                           {"class_id", obj.class_id},
                           {"feature", obj.feature},
                           {"label_dist", obj.label_dist}});
    }
    json relations = json::array();
    for (const auto& rel : scene.relations)
        relations.push_back({{"subj", rel.subj}, {"obj", rel.obj}, {"predicate", rel.predicate}});
    return {{"v", 1},
            {"scene_id", scene.scene_id},
            {"objects", objects},
            {"relations", relations},
            {"grid", {{"shape", scene.grid.shape()}, {"data", scene.grid.values()}}}};
}

inline Scene scene_from_json(const json& j)
{
    if (!j.is_object()) throw SceneError("scene must be a JSON object");
    if (j.value("v", 0) != 1) throw SceneError("unsupported scene schema version");
    Scene scene;
    scene.scene_id = j.at("scene_id").get<std::string>();
    for (const auto& o : j.at("objects")) {
        SceneObject obj;
        const auto& b = o.at("box");
        obj.box = {b.at("x").get<double>(), b.at("y").get<double>(), b.at("w").get<double>(), b.at("h").get<double>()};
        obj.class_id = o.at("class_id").get<int>();
        obj.feature = o.at("feature").get<std::vector<double>>();
        obj.label_dist = o.at("label_dist").get<std::vector<double>>();
        scene.objects.push_back(std::move(obj));
    }
    for (const auto& r : j.at("relations"))
        scene.relations.push_back({r.at("subj").get<int>(), r.at("obj").get<int>(), r.at("predicate").get<int>()});
    const auto& grid = j.at("grid");
    scene.grid = Tensor(grid.at("shape").get<Shape>(), grid.at("data").get<std::vector<double>>());
    validate_scene(scene);
    return scene;
}

inline void write_dataset(const std::vector<Scene>& scenes, const std::string& path)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::ios_base::failure("cannot open " + path + " for writing");
    for (const auto& scene : scenes) out << to_json(scene).dump() << '\n';
    if (!out) throw std::ios_base::failure("write failed for " + path);
}

/// Blank lines are skipped. Malformed lines raise DatasetError with a 1-based line number.
inline std::vector<Scene> read_dataset(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::ios_base::failure("cannot open " + path);
    std::vector<Scene> scenes;
    std::string line;
    std::size_t number = 0;
    while (std::getline(in, line)) {
        ++number;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            scenes.push_back(scene_from_json(json::parse(line)));
        } catch (const std::exception& e) {
            throw DatasetError(number, e.what());
        }
    }
    return scenes;
}

} // namespace linknet
