#pragma once
// Parameter initialization, optimizers, the mini-batch loop, and checkpoints.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "linknet/model.hpp"

namespace linknet {

enum class OptimizerKind { sgd, adam };

struct TrainConfig {
    OptimizerKind optimizer = OptimizerKind::adam;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    int epochs = 10;
    int batch_size = 8;
    std::uint64_t seed = 1;
    std::optional<double> gradient_clip_norm;

    void validate() const
    {
        if (!(learning_rate >= 0.0)) throw ConfigError("learning_rate", "must be >= 0");
        if (epochs < 0) throw ConfigError("epochs", "must be >= 0");
        if (batch_size < 1) throw ConfigError("batch_size", "must be >= 1");
        if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("beta1", "must lie in [0, 1)");
        if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("beta2", "must lie in [0, 1)");
        if (!(epsilon > 0.0)) throw ConfigError("epsilon", "must be positive");
        if (gradient_clip_norm && !(*gradient_clip_norm > 0.0))
            throw ConfigError("gradient_clip_norm", "must be positive when set");
    }
};

/// Training produced a non-finite loss or gradient.
class DivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Glorot-uniform weights, a = sqrt(6 / (fan_in + fan_out)); zero biases.
inline ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed)
{
    ModelParams params = zero_params(cfg);
    std::mt19937_64 rng(seed);
    params.visit([&](const std::string& name, Tensor& t) {
        if (name.ends_with(".bias")) return;
        const double a = std::sqrt(6.0 / static_cast<double>(t.rows() + t.cols()));
        std::uniform_real_distribution<double> dist(-a, a);
        for (auto& v : t.data()) v = dist(rng);
    });
    return params;
}

struct OptimizerState {
    OptimizerKind kind = OptimizerKind::adam;
    std::int64_t step = 0;
    ModelParams first_moment;  ///< Adam only
    ModelParams second_moment; ///< Adam only
};

inline OptimizerState make_optimizer_state(const ModelConfig& cfg, const TrainConfig& train)
{
    OptimizerState state;
    state.kind = train.optimizer;
    if (train.optimizer == OptimizerKind::adam) {
        state.first_moment = zero_params(cfg);
        state.second_moment = zero_params(cfg);
    }
    return state;
}

namespace detail {

inline void check_finite(const LossTerms& terms, const std::string& where)
{
    auto check = [&](double v, const char* term) {
        if (!std::isfinite(v)) throw DivergenceError("non-finite " + std::string(term) + " loss " + where);
    };
    check(terms.object, "object classification");
    check(terms.relation, "relation classification");
    check(terms.context, "global context");
    check(terms.total, "total");
}

inline std::vector<Tensor*> tensors_of(ModelParams& p)
{
    std::vector<Tensor*> out;
    p.visit([&](const std::string&, Tensor& t) { out.push_back(&t); });
    return out;
}

} // namespace detail

/// Gradients of the total loss averaged over `batch`, plus mean loss terms.
inline GradientResult batch_gradients(const ModelParams& params, std::span<const Scene> batch, const ModelConfig& cfg)
{
    if (batch.empty()) throw std::invalid_argument("batch_gradients: empty batch");
    GradientResult acc{{}, zero_params(cfg)};
    auto sums = detail::tensors_of(acc.gradients);
    for (const Scene& scene : batch) {
        auto result = loss_and_gradients(scene, params, cfg);
        detail::check_finite(result.losses, "in scene " + scene.scene_id);
        auto grads = detail::tensors_of(result.gradients);
        for (std::size_t k = 0; k < sums.size(); ++k) {
            auto dst = sums[k]->data();
            auto src = grads[k]->data();
            for (std::size_t e = 0; e < dst.size(); ++e) dst[e] += src[e];
        }
        acc.losses.object += result.losses.object;
        acc.losses.relation += result.losses.relation;
        acc.losses.context += result.losses.context;
        acc.losses.total += result.losses.total;
    }
    const double inv = 1.0 / static_cast<double>(batch.size());
    for (auto* t : sums)
        for (auto& v : t->data()) v *= inv;
    acc.losses.object *= inv;
    acc.losses.relation *= inv;
    acc.losses.context *= inv;
    acc.losses.total *= inv;
    return acc;
}

/// One optimizer update on the batch-averaged gradient. Returns the mean losses
/// at the pre-update parameters.
inline LossTerms train_step(ModelParams& params, std::span<const Scene> batch, const ModelConfig& cfg,
                            const TrainConfig& train, OptimizerState& state)
{
    auto result = batch_gradients(params, batch, cfg);
    auto grads = detail::tensors_of(result.gradients);

    double norm_sq = 0.0;
    for (const auto* g : grads)
        for (double v : g->data()) norm_sq += v * v;
    if (!std::isfinite(norm_sq)) throw DivergenceError("non-finite gradient");
    if (train.gradient_clip_norm && std::sqrt(norm_sq) > *train.gradient_clip_norm) {
        const double factor = *train.gradient_clip_norm / std::sqrt(norm_sq);
        for (auto* g : grads)
            for (auto& v : g->data()) v *= factor;
    }

    auto values = detail::tensors_of(params);
    ++state.step;
    if (state.kind == OptimizerKind::sgd) {
        for (std::size_t k = 0; k < values.size(); ++k) {
            auto p = values[k]->data();
            auto g = grads[k]->data();
            for (std::size_t e = 0; e < p.size(); ++e) p[e] -= train.learning_rate * g[e];
        }
        return result.losses;
    }
    auto m = detail::tensors_of(state.first_moment);
    auto v = detail::tensors_of(state.second_moment);
    const double t = static_cast<double>(state.step);
    const double correction1 = 1.0 - std::pow(train.beta1, t);
    const double correction2 = 1.0 - std::pow(train.beta2, t);
    for (std::size_t k = 0; k < values.size(); ++k) {
        auto p = values[k]->data();
        auto g = grads[k]->data();
        auto mk = m[k]->data();
        auto vk = v[k]->data();
        for (std::size_t e = 0; e < p.size(); ++e) {
            mk[e] = train.beta1 * mk[e] + (1.0 - train.beta1) * g[e];
            vk[e] = train.beta2 * vk[e] + (1.0 - train.beta2) * g[e] * g[e];
            const double mhat = mk[e] / correction1;
            const double vhat = vk[e] / correction2;
            p[e] -= train.learning_rate * mhat / (std::sqrt(vhat) + train.epsilon);
        }
    }
    return result.losses;
}

struct TrainState {
    ModelParams params;
    OptimizerState optimizer;
    std::mt19937_64 rng;
    int epoch = 0; ///< completed epochs
};

inline TrainState init_train_state(const ModelConfig& cfg, const TrainConfig& train)
{
    cfg.validate();
    train.validate();
    return {init_params(cfg, train.seed), make_optimizer_state(cfg, train), std::mt19937_64(splitmix64(train.seed)), 0};
}

struct EpochMetrics {
    int epoch = 0; ///< 1-based
    LossTerms mean;
    std::size_t steps = 0;
};

using EpochCallback = std::function<void(const EpochMetrics&, const TrainState&)>;

/// Continues from state.epoch up to train.epochs. Scene order is reshuffled
/// each epoch from the state's generator.
inline std::vector<EpochMetrics> run_training(TrainState& state, const std::vector<Scene>& dataset,
                                              const ModelConfig& cfg, const TrainConfig& train,
                                              const EpochCallback& on_epoch = {})
{
    cfg.validate();
    train.validate();
    std::vector<EpochMetrics> history;
    if (dataset.empty()) return history;
    std::vector<std::size_t> order(dataset.size());
    std::vector<Scene> batch;
    while (state.epoch < train.epochs) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        for (std::size_t i = order.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(state.rng() % i);
            std::swap(order[i - 1], order[j]);
        }
        EpochMetrics metrics;
        metrics.epoch = state.epoch + 1;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(train.batch_size)) {
            batch.clear();
            const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(train.batch_size));
            for (std::size_t k = start; k < stop; ++k) batch.push_back(dataset[order[k]]);
            LossTerms step;
            try {
                step = train_step(state.params, batch, cfg, train, state.optimizer);
            } catch (const DivergenceError& e) {
                throw DivergenceError(std::string(e.what()) + " (epoch " + std::to_string(metrics.epoch) + ", step " +
                                      std::to_string(metrics.steps + 1) + ")");
            }
            metrics.mean.object += step.object;
            metrics.mean.relation += step.relation;
            metrics.mean.context += step.context;
            metrics.mean.total += step.total;
            ++metrics.steps;
        }
        const double inv = 1.0 / static_cast<double>(metrics.steps);
        metrics.mean.object *= inv;
        metrics.mean.relation *= inv;
        metrics.mean.context *= inv;
        metrics.mean.total *= inv;
        ++state.epoch;
        history.push_back(metrics);
        if (on_epoch) on_epoch(metrics, state);
    }
    return history;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr int checkpoint_schema_version = 1;

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};
class CheckpointVersionError : public CheckpointError {
public:
    using CheckpointError::CheckpointError;
};
class MissingTensorError : public CheckpointError {
public:
    explicit MissingTensorError(const std::string& name) : CheckpointError("missing tensor " + name), name_(name) {}
    const std::string& name() const noexcept { return name_; }

private:
    std::string name_;
};
class ShapeMismatchError : public CheckpointError {
public:
    ShapeMismatchError(const std::string& name, const Shape& expected, const Shape& found)
        : CheckpointError("shape mismatch for tensor " + name + ": expected " + shape_string(expected) + ", found " +
                          shape_string(found)),
          name_(name)
    {}
    const std::string& name() const noexcept { return name_; }

private:
    std::string name_;
};

struct Checkpoint {
    int schema_version = checkpoint_schema_version;
    ModelConfig model;
    ModelParams params;
    OptimizerState optimizer;
    std::string rng_state;
    int epoch = 0;
};

inline std::string rng_to_string(const std::mt19937_64& rng)
{
    std::ostringstream out;
    out << rng;
    return out.str();
}

inline std::mt19937_64 rng_from_string(const std::string& text)
{
    std::mt19937_64 rng;
    if (text.empty()) return rng;
    std::istringstream in(text);
    in >> rng;
    if (!in) throw CheckpointError("malformed rng state");
    return rng;
}

inline Checkpoint make_checkpoint(const ModelConfig& cfg, const TrainState& state)
{
    return {checkpoint_schema_version, cfg, state.params, state.optimizer, rng_to_string(state.rng), state.epoch};
}

inline TrainState train_state_from(const Checkpoint& ckpt)
{
    return {ckpt.params, ckpt.optimizer, rng_from_string(ckpt.rng_state), ckpt.epoch};
}

namespace detail {

inline json tensors_to_json(const ModelParams& params)
{
    json out = json::array();
    params.visit([&](const std::string& name, const Tensor& t) {
        out.push_back({{"name", name}, {"shape", t.shape()}, {"values", t.values()}});
    });
    return out;
}

/// Fills `target` (already shaped) from a named-tensor list.
inline void tensors_from_json(const json& list, ModelParams& target, const std::string& prefix)
{
    std::map<std::string, const json*> by_name;
    for (const auto& entry : list) {
        const auto name = entry.at("name").get<std::string>();
        if (!by_name.emplace(name, &entry).second) throw CheckpointError("duplicate tensor " + prefix + name);
    }
    std::size_t used = 0;
    target.visit([&](const std::string& name, Tensor& t) {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw MissingTensorError(prefix + name);
        const auto shape = it->second->at("shape").get<Shape>();
        if (shape != t.shape()) throw ShapeMismatchError(prefix + name, t.shape(), shape);
        auto values = it->second->at("values").get<std::vector<double>>();
        if (values.size() != t.size()) throw ShapeMismatchError(prefix + name, t.shape(), {values.size()});
        t = Tensor(shape, std::move(values));
        ++used;
    });
    if (used != by_name.size()) throw CheckpointError("checkpoint has tensors the model does not define");
}

} // namespace detail

inline json to_json(const Checkpoint& ckpt)
{
    json optimizer = {{"kind", ckpt.optimizer.kind == OptimizerKind::adam ? "adam" : "sgd"},
                      {"step", ckpt.optimizer.step}};
    if (ckpt.optimizer.kind == OptimizerKind::adam) {
        optimizer["first_moment"] = detail::tensors_to_json(ckpt.optimizer.first_moment);
        optimizer["second_moment"] = detail::tensors_to_json(ckpt.optimizer.second_moment);
    }
    return {{"schema_version", ckpt.schema_version},
            {"model_config", to_json(ckpt.model)},
            {"tensors", detail::tensors_to_json(ckpt.params)},
            {"optimizer", optimizer},
            {"rng_state", ckpt.rng_state},
            {"epoch", ckpt.epoch}};
}

inline Checkpoint checkpoint_from_json(const json& j)
{
    const int version = j.value("schema_version", -1);
    if (version != checkpoint_schema_version)
        throw CheckpointVersionError("checkpoint schema_version " + std::to_string(version) + ", expected " +
                                     std::to_string(checkpoint_schema_version));
    Checkpoint ckpt;
    ckpt.model = model_config_from_json(j.at("model_config"));
    ckpt.params = zero_params(ckpt.model);
    detail::tensors_from_json(j.at("tensors"), ckpt.params, "");
    const auto& opt = j.at("optimizer");
    const auto kind = opt.at("kind").get<std::string>();
    if (kind != "adam" && kind != "sgd") throw CheckpointError("unknown optimizer " + kind);
    ckpt.optimizer.kind = kind == "adam" ? OptimizerKind::adam : OptimizerKind::sgd;
    ckpt.optimizer.step = opt.at("step").get<std::int64_t>();
    if (ckpt.optimizer.kind == OptimizerKind::adam) {
        ckpt.optimizer.first_moment = zero_params(ckpt.model);
        ckpt.optimizer.second_moment = zero_params(ckpt.model);
        detail::tensors_from_json(opt.at("first_moment"), ckpt.optimizer.first_moment, "first_moment/");
        detail::tensors_from_json(opt.at("second_moment"), ckpt.optimizer.second_moment, "second_moment/");
    }
    ckpt.rng_state = j.at("rng_state").get<std::string>();
    ckpt.epoch = j.at("epoch").get<int>();
    return ckpt;
}

/// Writes via a temporary file and rename so readers never see a partial file.
inline void write_text_atomic(const std::filesystem::path& path, const std::string& text)
{
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::ios_base::failure("cannot open " + tmp.string() + " for writing");
        out << text;
        if (!out) throw std::ios_base::failure("write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt)
{
    write_text_atomic(path, to_json(ckpt).dump());
}

inline Checkpoint load_checkpoint(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::ios_base::failure("cannot open " + path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw CheckpointError(std::string("malformed checkpoint: ") + e.what());
    }
    try {
        return checkpoint_from_json(j);
    } catch (const json::exception& e) {
        throw CheckpointError(std::string("malformed checkpoint: ") + e.what());
    }
}

inline json to_json(const TrainConfig& cfg)
{
    json j = {{"optimizer", cfg.optimizer == OptimizerKind::adam ? "adam" : "sgd"},
              {"learning_rate", cfg.learning_rate},
              {"beta1", cfg.beta1},
              {"beta2", cfg.beta2},
              {"epsilon", cfg.epsilon},
              {"epochs", cfg.epochs},
              {"batch_size", cfg.batch_size},
              {"seed", cfg.seed},
              {"gradient_clip_norm", nullptr}};
    if (cfg.gradient_clip_norm) j["gradient_clip_norm"] = *cfg.gradient_clip_norm;
    return j;
}

inline TrainConfig train_config_from_json(const json& j)
{
    if (!j.is_object()) throw ConfigError("<root>", "train config must be a JSON object");
    TrainConfig cfg;
    auto field = [&](const char* key, auto& target) {
        if (!j.contains(key)) return;
        try {
            target = j.at(key).get<std::decay_t<decltype(target)>>();
        } catch (const json::exception& e) {
            throw ConfigError(key, e.what());
        }
    };
    if (j.contains("optimizer")) {
        std::string kind;
        field("optimizer", kind);
        if (kind == "adam") cfg.optimizer = OptimizerKind::adam;
        else if (kind == "sgd") cfg.optimizer = OptimizerKind::sgd;
        else throw ConfigError("optimizer", "expected adam or sgd");
    }
    field("learning_rate", cfg.learning_rate);
    field("beta1", cfg.beta1);
    field("beta2", cfg.beta2);
    field("epsilon", cfg.epsilon);
    field("epochs", cfg.epochs);
    field("batch_size", cfg.batch_size);
    field("seed", cfg.seed);
    if (j.contains("gradient_clip_norm") && !j.at("gradient_clip_norm").is_null()) {
        double clip = 0.0;
        field("gradient_clip_norm", clip);
        cfg.gradient_clip_norm = clip;
    }
    cfg.validate();
    return cfg;
}

} // namespace linknet
