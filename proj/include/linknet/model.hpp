#pragma once
// LinkNet computation graph.
//
// Object stage: O0 = [f_roi | K0 l | c] -> relational embedding blocks with fc
// projections -> O3 (contextual features) -> O4 (class logits).
// Edge stage: E0 = [K1 onehot(argmax O4) | O3] -> relational embedding blocks ->
// E1 = [subject half | object half].
// Relation head: per ordered pair, subject(i) * object(j) * proj(F_ij), joined
// with the embedded box layout and mapped to predicate logits.
//
// Every linear map is affine (weight [in×out] plus bias [1×out]). ReLU follows
// every fc except the logit heads and the query/key/value projections.

#include <array>
#include <cmath>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "linknet/autodiff.hpp"
#include "linknet/scene.hpp"
#include "linknet/tensor.hpp"

namespace linknet {

/// Raised when a scene or checkpoint does not fit a model configuration.
class MismatchError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class RowOp { softmax, sigmoid };
enum class Similarity { dot, euclidean };
/// Which branches build E0.
enum class EdgeInput { both, argmax_only, o3_only };

struct ModelConfig {
    int num_object_classes = 10; // C_obj
    int num_predicates = 6;      // C_rel, background included
    int roi_dim = 32;            // d_roi
    int image_dim = 16;          // d_img, grid channels
    int label_embed_dim = 16;    // d_label_emb
    int context_dim = 16;        // d_ctx
    int object_dim = 32;         // d_o2
    int edge_dim = 32;           // d_edge, per half of E1
    int geo_dim = 8;             // d_geo
    int reduction_ratio = 2;
    int rem_count = 2; ///< per stage; 0 builds the attention-free fc stack
    RowOp row_op = RowOp::softmax;
    Similarity similarity = Similarity::dot;
    bool enable_glem = true;
    bool enable_gce = true;
    EdgeInput edge_input = EdgeInput::both;
    double lambda_rel = 1.0;
    double lambda_gce = 1.0;

    static int reduced(int width, int ratio) { return (width + ratio - 1) / ratio; }

    int o0_dim() const { return roi_dim + label_embed_dim + context_dim; }
    int e0_dim() const
    {
        return (edge_input != EdgeInput::o3_only ? label_embed_dim : 0) +
               (edge_input != EdgeInput::argmax_only ? object_dim : 0);
    }

    void validate() const
    {
        auto positive = [](const char* key, int v) {
            if (v < 1) throw ConfigError(key, "must be positive");
        };
        if (num_object_classes < 2) throw ConfigError("C_obj", "must be >= 2");
        if (num_predicates < 2) throw ConfigError("C_rel", "must be >= 2 (background plus at least one predicate)");
        positive("d_roi", roi_dim);
        positive("d_img", image_dim);
        positive("d_label_emb", label_embed_dim);
        positive("d_ctx", context_dim);
        positive("d_o2", object_dim);
        positive("d_edge", edge_dim);
        positive("d_geo", geo_dim);
        positive("reduction_ratio", reduction_ratio);
        if (rem_count < 0 || rem_count > 4) throw ConfigError("rem_count", "must lie in [0, 4]");
        if (!(lambda_rel >= 0.0)) throw ConfigError("lambda1", "must be >= 0");
        if (!(lambda_gce >= 0.0)) throw ConfigError("lambda2", "must be >= 0");
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Widths used at full scale. Class counts stay at their desk values.
inline ModelConfig full_scale_config()
{
    ModelConfig cfg;
    cfg.roi_dim = 4096;
    cfg.image_dim = 512;
    cfg.label_embed_dim = 200;
    cfg.context_dim = 512;
    cfg.object_dim = 256;
    cfg.edge_dim = 4096;
    cfg.geo_dim = 128;
    return cfg;
}

// ---------------------------------------------------------------------------
// Parameters

template <class T>
struct Affine {
    T weight; ///< in × out
    T bias;   ///< 1 × out
};

/// One relational embedding block: query/key/value projections and the fc
/// that maps the attended values back to the block width.
template <class T>
struct RemBlock {
    Affine<T> query;
    Affine<T> key;
    Affine<T> value;
    Affine<T> output;
};

template <class T>
struct BasicParams {
    Affine<T> label_embed;   // K0
    Affine<T> context_proj;  // pooled grid -> c
    Affine<T> presence_head; // c -> multi-label logits
    std::vector<RemBlock<T>> object_rems;
    Affine<T> object_fc;     // fc1
    Affine<T> object_logits; // fc3
    Affine<T> class_embed;   // K1
    std::vector<RemBlock<T>> edge_rems;
    Affine<T> edge_fc;
    Affine<T> edge_lift;     // -> E1
    Affine<T> union_proj;    // F -> d_edge
    Affine<T> layout_embed;  // K2
    Affine<T> relation_logits; // fc4

    /// Calls f(name, member) for every tensor in a fixed order.
    template <class F>
    void visit(F&& f) { visit_impl(*this, f); }
    template <class F>
    void visit(F&& f) const { visit_impl(*this, f); }

private:
    template <class Self, class F>
    static void visit_impl(Self& self, F& f)
    {
        auto affine = [&](const std::string& name, auto& a) {
            f(name + ".weight", a.weight);
            f(name + ".bias", a.bias);
        };
        auto rem = [&](const std::string& name, auto& block) {
            affine(name + ".query", block.query);
            affine(name + ".key", block.key);
            affine(name + ".value", block.value);
            affine(name + ".output", block.output);
        };
        affine("label_embed", self.label_embed);
        affine("context_proj", self.context_proj);
        affine("presence_head", self.presence_head);
        for (std::size_t k = 0; k < self.object_rems.size(); ++k) rem("object_rem." + std::to_string(k), self.object_rems[k]);
        affine("object_fc", self.object_fc);
        affine("object_logits", self.object_logits);
        affine("class_embed", self.class_embed);
        for (std::size_t k = 0; k < self.edge_rems.size(); ++k) rem("edge_rem." + std::to_string(k), self.edge_rems[k]);
        affine("edge_fc", self.edge_fc);
        affine("edge_lift", self.edge_lift);
        affine("union_proj", self.union_proj);
        affine("layout_embed", self.layout_embed);
        affine("relation_logits", self.relation_logits);
    }
};

using ModelParams = BasicParams<Tensor>;

/// Same layout as `src`, each member produced by f(name, const T&).
template <class U, class T, class F>
BasicParams<U> map_params(const BasicParams<T>& src, F&& f)
{
    BasicParams<U> out;
    out.object_rems.resize(src.object_rems.size());
    out.edge_rems.resize(src.edge_rems.size());
    std::vector<U*> slots;
    out.visit([&](const std::string&, U& member) { slots.push_back(&member); });
    std::size_t k = 0;
    src.visit([&](const std::string& name, const T& member) { *slots[k++] = f(name, member); });
    return out;
}

/// Zero-valued parameters with the shapes `cfg` implies.
inline ModelParams zero_params(const ModelConfig& cfg)
{
    cfg.validate();
    auto affine = [](int in, int out) {
        return Affine<Tensor>{Tensor({static_cast<std::size_t>(in), static_cast<std::size_t>(out)}),
                              Tensor({1, static_cast<std::size_t>(out)})};
    };
    auto rem = [&](int width) {
        const int inner = ModelConfig::reduced(width, cfg.reduction_ratio);
        return RemBlock<Tensor>{affine(width, inner), affine(width, inner), affine(width, inner), affine(inner, width)};
    };
    ModelParams p;
    p.label_embed = affine(cfg.num_object_classes, cfg.label_embed_dim);
    p.context_proj = affine(cfg.image_dim, cfg.context_dim);
    p.presence_head = affine(cfg.context_dim, cfg.num_object_classes);
    for (int k = 0; k < cfg.rem_count; ++k) p.object_rems.push_back(rem(k == 0 ? cfg.o0_dim() : cfg.object_dim));
    p.object_fc = affine(cfg.o0_dim(), cfg.object_dim);
    p.object_logits = affine(cfg.object_dim, cfg.num_object_classes);
    p.class_embed = affine(cfg.num_object_classes, cfg.label_embed_dim);
    for (int k = 0; k < cfg.rem_count; ++k) p.edge_rems.push_back(rem(k == 0 ? cfg.e0_dim() : cfg.object_dim));
    p.edge_fc = affine(cfg.e0_dim(), cfg.object_dim);
    p.edge_lift = affine(cfg.object_dim, 2 * cfg.edge_dim);
    p.union_proj = affine(cfg.roi_dim, cfg.edge_dim);
    p.layout_embed = affine(4, cfg.geo_dim);
    p.relation_logits = affine(cfg.edge_dim + cfg.geo_dim, cfg.num_predicates);
    return p;
}

inline std::size_t parameter_count(const ModelParams& p)
{
    std::size_t total = 0;
    p.visit([&](const std::string&, const Tensor& t) { total += t.size(); });
    return total;
}

/// Throws MismatchError if the scene cannot be fed to a model with `cfg`.
inline void check_compatible(const Scene& scene, const ModelConfig& cfg)
{
    const auto where = "scene " + scene.scene_id + ": ";
    for (const auto& obj : scene.objects) {
        if (obj.label_dist.size() != static_cast<std::size_t>(cfg.num_object_classes))
            throw MismatchError(where + "label distribution width " + std::to_string(obj.label_dist.size()) +
                                " != C_obj " + std::to_string(cfg.num_object_classes));
        if (obj.class_id < 0 || obj.class_id >= cfg.num_object_classes)
            throw MismatchError(where + "class_id outside C_obj");
        if (obj.feature.size() != static_cast<std::size_t>(cfg.roi_dim))
            throw MismatchError(where + "feature width " + std::to_string(obj.feature.size()) + " != d_roi " +
                                std::to_string(cfg.roi_dim));
    }
    for (const auto& rel : scene.relations)
        if (rel.predicate >= cfg.num_predicates) throw MismatchError(where + "predicate outside C_rel");
    if (scene.grid.rank() != 3 || scene.grid.shape()[0] != static_cast<std::size_t>(cfg.image_dim))
        throw MismatchError(where + "grid channels differ from d_img " + std::to_string(cfg.image_dim));
}

// ---------------------------------------------------------------------------
// Building blocks

inline Var affine(const Var& x, const Affine<Var>& a) { return add_row_bias(matmul(x, a.weight), a.bias); }

inline Var affine_relu(const Var& x, const Affine<Var>& a) { return relu(affine(x, a)); }

struct RelationalEmbedding {
    Var attention; ///< N × N
    Var output;    ///< same shape as the input
};

/// S = (X Wq)(X Wk)^T for dot similarity, or -||(X Wq)_i - (X Wk)_j||^2;
/// R = row_op(S); X_out = X + relu(fc(R (X Wv))).
inline RelationalEmbedding relational_embedding(const Var& x, const RemBlock<Var>& block, RowOp row_op,
                                                Similarity similarity)
{
    if (block.query.weight.rows() != x.cols()) {
        throw DimensionError("relational_embedding: input width " + std::to_string(x.cols()) +
                             " does not match projection " + shape_string(block.query.weight.shape()));
    }
    const Var q = affine(x, block.query);
    const Var k = affine(x, block.key);
    const Var v = affine(x, block.value);
    const Var scores = similarity == Similarity::dot ? matmul_nt(q, k) : neg_sq_dist(q, k);
    const Var attention = row_op == RowOp::softmax ? row_softmax(scores) : row_sigmoid(scores);
    const Var update = affine_relu(matmul(attention, v), block.output);
    return {attention, add(x, update)};
}

/// Relative layout of object box `o` with respect to subject box `s`.
inline std::array<double, 4> geometric_layout(const Box& s, const Box& o)
{
    if (!(s.w > 0.0) || !(s.h > 0.0) || !(o.w > 0.0) || !(o.h > 0.0))
        throw std::invalid_argument("geometric_layout: box extents must be positive");
    return {(o.x - s.x) / s.w, (o.y - s.y) / s.h, std::log(o.w / s.w), std::log(o.h / s.h)};
}

/// One-hot of the row-wise argmax; ties resolve to the lowest index.
inline Tensor one_hot_argmax(const Tensor& logits)
{
    Tensor out(logits.shape());
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < logits.cols(); ++j)
            if (logits(i, j) > logits(i, best)) best = j;
        out(i, best) = 1.0;
    }
    return out;
}

inline std::vector<std::size_t> argmax_rows(const Tensor& logits)
{
    std::vector<std::size_t> out(logits.rows());
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < logits.cols(); ++j)
            if (logits(i, j) > logits(i, best)) best = j;
        out[i] = best;
    }
    return out;
}

struct ContextEncoding {
    Var context;  ///< 1 × d_ctx
    Var presence; ///< 1 × C_obj, sigmoid probabilities
};

/// Average-pools the grid over space, projects to c, and predicts class presence from c.
inline ContextEncoding global_context_encode(const Var& grid, const BasicParams<Var>& p)
{
    const Shape& shape = grid.shape();
    if (shape.size() != 3) throw DimensionError("global_context_encode: grid must be 3-D, got " + shape_string(shape));
    const Var flat = reshape(grid, {shape[0], shape[1] * shape[2]});
    const Var pooled = transpose(row_mean(flat));
    const Var context = affine(pooled, p.context_proj);
    return {context, row_sigmoid(affine(context, p.presence_head))};
}

/// Rows are concat(feature_i, l_i K0, c); `context` is 1 × d_ctx, broadcast to every row.
inline Var build_o0(const Scene& scene, const Var& context, const BasicParams<Var>& p)
{
    Tape& tape = context.tape();
    const std::size_t n = scene.size();
    const std::size_t roi = scene.objects.front().feature.size();
    const std::size_t classes = scene.objects.front().label_dist.size();
    Tensor features({n, roi}), labels({n, classes});
    for (std::size_t i = 0; i < n; ++i) {
        std::copy(scene.objects[i].feature.begin(), scene.objects[i].feature.end(), &features(i, 0));
        std::copy(scene.objects[i].label_dist.begin(), scene.objects[i].label_dist.end(), &labels(i, 0));
    }
    const Var label_part = affine(tape.constant(std::move(labels)), p.label_embed);
    const Var context_rows = gather_rows(context, std::vector<std::size_t>(n, 0));
    return concat_cols({tape.constant(std::move(features)), label_part, context_rows});
}

struct ObjectStage {
    Var o1, o2, o3, o4;
    std::vector<Var> attention;
};

/// First block at the O0 width, then fc to d_o2, then the remaining blocks at d_o2.
inline ObjectStage object_stage(const Var& o0, const BasicParams<Var>& p, const ModelConfig& cfg)
{
    ObjectStage out;
    Var x = o0;
    if (!p.object_rems.empty()) {
        auto first = relational_embedding(x, p.object_rems[0], cfg.row_op, cfg.similarity);
        out.attention.push_back(first.attention);
        x = first.output;
    }
    out.o1 = x;
    x = affine_relu(x, p.object_fc);
    out.o2 = x;
    for (std::size_t k = 1; k < p.object_rems.size(); ++k) {
        auto block = relational_embedding(x, p.object_rems[k], cfg.row_op, cfg.similarity);
        out.attention.push_back(block.attention);
        x = block.output;
    }
    out.o3 = x;
    out.o4 = affine(x, p.object_logits);
    return out;
}

struct EdgeStage {
    Var e0, e1;
    std::vector<Var> attention;
};

/// The argmax branch is a constant: no gradient reaches O4 through it.
inline EdgeStage edge_stage(const Var& o4, const Var& o3, const BasicParams<Var>& p, const ModelConfig& cfg)
{
    Tape& tape = o4.tape();
    std::vector<Var> parts;
    if (cfg.edge_input != EdgeInput::o3_only)
        parts.push_back(affine(tape.constant(one_hot_argmax(o4.value())), p.class_embed));
    if (cfg.edge_input != EdgeInput::argmax_only) parts.push_back(o3);
    EdgeStage out;
    out.e0 = parts.size() == 1 ? parts.front() : concat_cols(parts);
    Var x = out.e0;
    if (!p.edge_rems.empty()) {
        auto first = relational_embedding(x, p.edge_rems[0], cfg.row_op, cfg.similarity);
        out.attention.push_back(first.attention);
        x = first.output;
    }
    x = affine_relu(x, p.edge_fc);
    for (std::size_t k = 1; k < p.edge_rems.size(); ++k) {
        auto block = relational_embedding(x, p.edge_rems[k], cfg.row_op, cfg.similarity);
        out.attention.push_back(block.attention);
        x = block.output;
    }
    out.e1 = affine_relu(x, p.edge_lift);
    return out;
}

/// Union features for every ordered pair, rows in ordered_pairs() order.
inline Tensor union_features(const Scene& scene)
{
    const auto pairs = ordered_pairs(scene.size());
    const std::size_t width = scene.objects.front().feature.size();
    Tensor out({pairs.size(), width});
    for (std::size_t r = 0; r < pairs.size(); ++r) {
        const auto f = union_feature(scene, pairs[r].first, pairs[r].second);
        std::copy(f.begin(), f.end(), &out(r, 0));
    }
    return out;
}

inline Tensor pair_layouts(const Scene& scene)
{
    const auto pairs = ordered_pairs(scene.size());
    Tensor out({pairs.size(), 4});
    for (std::size_t r = 0; r < pairs.size(); ++r) {
        const auto b = geometric_layout(scene.objects[pairs[r].first].box, scene.objects[pairs[r].second].box);
        std::copy(b.begin(), b.end(), &out(r, 0));
    }
    return out;
}

struct RelationHead {
    Var g0, g1, g2;
};

/// G0 = subject(i) * object(j) * relu(proj(F_ij)), G1 = [G0 | K2 b_o|s] (zeros when
/// GLEM is off), G2 = fc4(G1). Rows follow ordered_pairs().
inline RelationHead relation_head(const Var& e1, const Scene& scene, const BasicParams<Var>& p,
                                  const ModelConfig& cfg)
{
    Tape& tape = e1.tape();
    const std::size_t n = scene.size();
    const auto d = static_cast<std::size_t>(cfg.edge_dim);
    if (e1.cols() != 2 * d) throw DimensionError("relation_head: E1 width must be 2 * d_edge");
    const auto pairs = ordered_pairs(n);
    std::vector<std::size_t> subj, obj;
    for (const auto& [i, j] : pairs) {
        subj.push_back(i);
        obj.push_back(j);
    }
    const Var subject = gather_rows(slice_cols(e1, 0, d), subj);
    const Var object = gather_rows(slice_cols(e1, d, 2 * d), obj);
    const Var unions = affine_relu(tape.constant(union_features(scene)), p.union_proj);
    RelationHead out;
    out.g0 = mul(mul(subject, object), unions);
    const Var geo = cfg.enable_glem
                        ? affine(tape.constant(pair_layouts(scene)), p.layout_embed)
                        : tape.constant(Tensor({pairs.size(), static_cast<std::size_t>(cfg.geo_dim)}));
    out.g1 = concat_cols({out.g0, geo});
    out.g2 = affine(out.g1, p.relation_logits);
    return out;
}

// ---------------------------------------------------------------------------
// Losses

/// Mean softmax cross-entropy over objects.
inline Var obj_cls_loss(const Var& o4, const std::vector<std::size_t>& classes)
{
    return softmax_cross_entropy(o4, classes);
}

/// Mean softmax cross-entropy over all ordered pairs; background pairs carry label 0.
inline Var rel_cls_loss(const Var& g2, const std::vector<std::size_t>& pair_labels)
{
    return softmax_cross_entropy(g2, pair_labels);
}

/// Multi-label presence loss: summed two-term binary cross-entropy.
inline Var gce_loss(const Var& presence, const Tensor& gt_presence)
{
    return binary_cross_entropy_sum(presence, gt_presence);
}

inline double total_loss(double object, double relation, double context, double lambda_rel = 1.0,
                         double lambda_gce = 1.0)
{
    return object + lambda_rel * relation + lambda_gce * context;
}

inline Var total_loss(const Var& object, const Var& relation, const Var& context, double lambda_rel,
                      double lambda_gce)
{
    return add(add(object, scale(relation, lambda_rel)), scale(context, lambda_gce));
}

// ---------------------------------------------------------------------------
// Forward

struct LossTerms {
    double object = 0.0;
    double relation = 0.0;
    double context = 0.0;
    double total = 0.0;
};

/// Every intermediate symbol of one forward pass, as values.
struct ModelOutput {
    Tensor o0, o1, o2, o3, o4;
    std::vector<Tensor> object_attention;
    std::vector<Tensor> edge_attention;
    Tensor context;  ///< c, 1 × d_ctx (zeros with GCE off)
    Tensor presence; ///< M̂, 1 × C_obj; empty with GCE off
    Tensor e0, e1;
    Tensor g0, g1, g2;
    Tensor layout; ///< b_o|s per pair, N(N-1) × 4
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    LossTerms losses;
};

struct ForwardGraph {
    Var o0;
    ObjectStage objects;
    std::optional<ContextEncoding> context;
    Var context_row;
    EdgeStage edges;
    RelationHead relations;
    Var object_loss, relation_loss, context_loss, total;
};

inline ForwardGraph build_forward(Tape& tape, const Scene& scene, const BasicParams<Var>& p, const ModelConfig& cfg)
{
    check_compatible(scene, cfg);
    ForwardGraph g;
    if (cfg.enable_gce) {
        g.context = global_context_encode(tape.constant(scene.grid), p);
        g.context_row = g.context->context;
    } else {
        g.context_row = tape.constant(Tensor({1, static_cast<std::size_t>(cfg.context_dim)}));
    }
    g.o0 = build_o0(scene, g.context_row, p);
    g.objects = object_stage(g.o0, p, cfg);
    g.edges = edge_stage(g.objects.o4, g.objects.o3, p, cfg);
    g.relations = relation_head(g.edges.e1, scene, p, cfg);

    std::vector<std::size_t> classes;
    for (const auto& obj : scene.objects) classes.push_back(static_cast<std::size_t>(obj.class_id));
    g.object_loss = obj_cls_loss(g.objects.o4, classes);
    g.relation_loss = rel_cls_loss(g.relations.g2, pair_labels(scene));
    g.context_loss = g.context ? gce_loss(g.context->presence, class_presence(scene, cfg.num_object_classes))
                               : tape.constant(Tensor({1, 1}));
    g.total = total_loss(g.object_loss, g.relation_loss, g.context_loss, cfg.lambda_rel, cfg.lambda_gce);
    return g;
}

inline BasicParams<Var> bind_params(Tape& tape, const ModelParams& params, bool requires_grad)
{
    return map_params<Var>(params, [&](const std::string&, const Tensor& t) { return tape.leaf(t, requires_grad); });
}

inline LossTerms loss_terms(const ForwardGraph& g)
{
    return {g.object_loss.value()[0], g.relation_loss.value()[0], g.context_loss.value()[0], g.total.value()[0]};
}

inline ModelOutput forward(const Scene& scene, const ModelParams& params, const ModelConfig& cfg)
{
    Tape tape;
    const auto p = bind_params(tape, params, false);
    const auto g = build_forward(tape, scene, p, cfg);
    ModelOutput out;
    out.o0 = g.o0.value();
    out.o1 = g.objects.o1.value();
    out.o2 = g.objects.o2.value();
    out.o3 = g.objects.o3.value();
    out.o4 = g.objects.o4.value();
    for (const auto& r : g.objects.attention) out.object_attention.push_back(r.value());
    for (const auto& r : g.edges.attention) out.edge_attention.push_back(r.value());
    out.context = g.context_row.value();
    if (g.context) out.presence = g.context->presence.value();
    out.e0 = g.edges.e0.value();
    out.e1 = g.edges.e1.value();
    out.g0 = g.relations.g0.value();
    out.g1 = g.relations.g1.value();
    out.g2 = g.relations.g2.value();
    out.layout = pair_layouts(scene);
    out.pairs = ordered_pairs(scene.size());
    out.losses = loss_terms(g);
    return out;
}

inline double total_loss_value(const Scene& scene, const ModelParams& params, const ModelConfig& cfg)
{
    Tape tape;
    const auto p = bind_params(tape, params, false);
    return build_forward(tape, scene, p, cfg).total.value()[0];
}

struct GradientResult {
    LossTerms losses;
    ModelParams gradients;
};

inline GradientResult loss_and_gradients(const Scene& scene, const ModelParams& params, const ModelConfig& cfg)
{
    Tape tape;
    const auto p = bind_params(tape, params, true);
    const auto g = build_forward(tape, scene, p, cfg);
    tape.backward(g.total);
    return {loss_terms(g), map_params<Tensor>(p, [](const std::string&, const Var& v) { return v.grad(); })};
}

// ---------------------------------------------------------------------------
// JSON

inline const char* to_string(RowOp op) { return op == RowOp::softmax ? "softmax" : "sigmoid"; }
inline const char* to_string(Similarity s) { return s == Similarity::dot ? "dot" : "euclidean"; }
inline const char* to_string(EdgeInput e)
{
    switch (e) {
    case EdgeInput::argmax_only: return "argmax_only";
    case EdgeInput::o3_only: return "o3_only";
    default: return "both";
    }
}

inline json to_json(const ModelConfig& cfg)
{
    return {{"C_obj", cfg.num_object_classes},
            {"C_rel", cfg.num_predicates},
            {"d_roi", cfg.roi_dim},
            {"d_img", cfg.image_dim},
            {"d_label_emb", cfg.label_embed_dim},
            {"d_ctx", cfg.context_dim},
            {"d_o2", cfg.object_dim},
            {"d_edge", cfg.edge_dim},
            {"d_geo", cfg.geo_dim},
            {"reduction_ratio", cfg.reduction_ratio},
            {"rem_count", cfg.rem_count},
            {"row_op", to_string(cfg.row_op)},
            {"similarity", to_string(cfg.similarity)},
            {"enable_glem", cfg.enable_glem},
            {"enable_gce", cfg.enable_gce},
            {"e0_construction", to_string(cfg.edge_input)},
            {"lambda1", cfg.lambda_rel},
            {"lambda2", cfg.lambda_gce}};
}

inline ModelConfig model_config_from_json(const json& j)
{
    if (!j.is_object()) throw ConfigError("<root>", "model config must be a JSON object");
    ModelConfig cfg;
    auto field = [&](const char* key, auto& target) {
        if (!j.contains(key)) return;
        try {
            target = j.at(key).get<std::decay_t<decltype(target)>>();
        } catch (const json::exception& e) {
            throw ConfigError(key, e.what());
        }
    };
    field("C_obj", cfg.num_object_classes);
    field("C_rel", cfg.num_predicates);
    field("d_roi", cfg.roi_dim);
    field("d_img", cfg.image_dim);
    field("d_label_emb", cfg.label_embed_dim);
    field("d_ctx", cfg.context_dim);
    field("d_o2", cfg.object_dim);
    field("d_edge", cfg.edge_dim);
    field("d_geo", cfg.geo_dim);
    field("reduction_ratio", cfg.reduction_ratio);
    field("rem_count", cfg.rem_count);
    field("enable_glem", cfg.enable_glem);
    field("enable_gce", cfg.enable_gce);
    field("lambda1", cfg.lambda_rel);
    field("lambda2", cfg.lambda_gce);
    std::string text;
    if (j.contains("row_op")) {
        field("row_op", text);
        if (text == "softmax") cfg.row_op = RowOp::softmax;
        else if (text == "sigmoid") cfg.row_op = RowOp::sigmoid;
        else throw ConfigError("row_op", "expected softmax or sigmoid");
    }
    if (j.contains("similarity")) {
        field("similarity", text);
        if (text == "dot") cfg.similarity = Similarity::dot;
        else if (text == "euclidean") cfg.similarity = Similarity::euclidean;
        else throw ConfigError("similarity", "expected dot or euclidean");
    }
    if (j.contains("e0_construction")) {
        field("e0_construction", text);
        if (text == "both") cfg.edge_input = EdgeInput::both;
        else if (text == "argmax_only") cfg.edge_input = EdgeInput::argmax_only;
        else if (text == "o3_only") cfg.edge_input = EdgeInput::o3_only;
        else throw ConfigError("e0_construction", "expected both, argmax_only or o3_only");
    }
    cfg.validate();
    return cfg;
}

} // namespace linknet
