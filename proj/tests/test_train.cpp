#include <gtest/gtest.h>

#include <cmath>

#include "linknet/linknet.hpp"
#include "test_util.hpp"

using namespace linknet;

namespace {

std::vector<Scene> small_dataset(std::size_t count, std::uint64_t seed)
{
    return generate_dataset(GenConfig{}, count, seed);
}

bool params_equal(const ModelParams& a, const ModelParams& b)
{
    std::vector<const Tensor*> left;
    a.visit([&](const std::string&, const Tensor& t) { left.push_back(&t); });
    std::size_t k = 0;
    bool same = true;
    b.visit([&](const std::string&, const Tensor& t) { same = same && k < left.size() && *left[k++] == t; });
    return same && k == left.size();
}

double mean_total_loss(const std::vector<Scene>& data, const ModelParams& p, const ModelConfig& cfg)
{
    double s = 0.0;
    for (const auto& scene : data) s += total_loss_value(scene, p, cfg);
    return s / static_cast<double>(data.size());
}

} // namespace

TEST(Train, InitIsDeterministicWithZeroBiases)
{
    const ModelConfig cfg;
    EXPECT_TRUE(params_equal(init_params(cfg, 3), init_params(cfg, 3)));
    EXPECT_FALSE(params_equal(init_params(cfg, 3), init_params(cfg, 4)));
    init_params(cfg, 3).visit([](const std::string& name, const Tensor& t) {
        if (!name.ends_with(".bias")) return;
        for (double v : t.data()) EXPECT_EQ(v, 0.0) << name;
    });
}

TEST(Train, InitSpreadMatchesGlorotBound)
{
    ModelConfig cfg;
    cfg.roi_dim = 256;
    cfg.edge_dim = 256;
    cfg.object_dim = 128;
    std::size_t checked = 0;
    init_params(cfg, 5).visit([&](const std::string& name, const Tensor& t) {
        if (name.ends_with(".bias") || t.size() < 10000) return;
        const double a = std::sqrt(6.0 / static_cast<double>(t.rows() + t.cols()));
        double mean = 0.0, sq = 0.0;
        for (double v : t.data()) mean += v;
        mean /= static_cast<double>(t.size());
        for (double v : t.data()) sq += (v - mean) * (v - mean);
        const double stdev = std::sqrt(sq / static_cast<double>(t.size() - 1));
        EXPECT_NEAR(stdev, a / std::sqrt(3.0), 0.1 * a / std::sqrt(3.0)) << name;
        ++checked;
    });
    EXPECT_GE(checked, 3u);
}

TEST(Train, ZeroLearningRateLeavesParametersUnchanged)
{
    const ModelConfig cfg;
    const auto data = small_dataset(4, 1);
    for (auto kind : {OptimizerKind::sgd, OptimizerKind::adam}) {
        TrainConfig tc;
        tc.optimizer = kind;
        tc.learning_rate = 0.0;
        tc.epochs = 2;
        tc.batch_size = 2;
        auto state = init_train_state(cfg, tc);
        const ModelParams before = state.params;
        run_training(state, data, cfg, tc);
        EXPECT_TRUE(params_equal(before, state.params));
        EXPECT_EQ(state.epoch, 2);
    }
}

TEST(Train, SgdStepFollowsFiniteDifferenceGradient)
{
    const ModelConfig cfg;
    const auto data = small_dataset(1, 2);
    TrainConfig tc;
    tc.optimizer = OptimizerKind::sgd;
    tc.learning_rate = 0.1;
    ModelParams params = init_params(cfg, 7);
    const ModelParams before = params;
    OptimizerState opt = make_optimizer_state(cfg, tc);
    train_step(params, data, cfg, tc, opt);

    // Central differences, coordinate by coordinate, on a scratch copy.
    ModelParams probe = before;
    std::vector<Tensor*> probe_tensors, after_tensors;
    probe.visit([&](const std::string&, Tensor& t) { probe_tensors.push_back(&t); });
    params.visit([&](const std::string&, Tensor& t) { after_tensors.push_back(&t); });
    const double eps = 1e-6;
    double worst = 0.0;
    for (std::size_t k = 0; k < probe_tensors.size(); ++k) {
        auto values = probe_tensors[k]->data();
        for (std::size_t e = 0; e < values.size(); ++e) {
            const double saved = values[e];
            values[e] = saved + eps;
            const double up = total_loss_value(data[0], probe, cfg);
            values[e] = saved - eps;
            const double down = total_loss_value(data[0], probe, cfg);
            values[e] = saved;
            const double expected = saved - tc.learning_rate * (up - down) / (2 * eps);
            worst = std::max(worst, std::abs((*after_tensors[k])[e] - expected));
        }
    }
    EXPECT_LT(worst, 1e-8);
}

TEST(Train, OverfitsEightScenesInFiftySteps)
{
    const ModelConfig cfg;
    const auto data = generate_dataset(GenConfig{}, 8, 11);
    TrainConfig tc;
    tc.learning_rate = 0.02;
    tc.batch_size = 8;
    tc.epochs = 50;
    auto state = init_train_state(cfg, tc);
    const double initial = mean_total_loss(data, state.params, cfg);
    const auto history = run_training(state, data, cfg, tc);
    ASSERT_EQ(history.size(), 50u);
    EXPECT_DOUBLE_EQ(history.front().mean.total, initial);
    EXPECT_LT(history.back().mean.total, history.front().mean.total);
    EXPECT_LT(mean_total_loss(data, state.params, cfg), 0.1 * initial);
}

TEST(Train, DisabledContextHeadGetsExactlyZeroGradient)
{
    ModelConfig cfg;
    cfg.enable_gce = false;
    cfg.lambda_gce = 0.0;
    for (const auto& scene : small_dataset(3, 4)) {
        const auto g = loss_and_gradients(scene, init_params(cfg, 2), cfg).gradients;
        for (const Tensor* t : {&g.context_proj.weight, &g.context_proj.bias, &g.presence_head.weight,
                                &g.presence_head.bias})
            for (double v : t->data()) EXPECT_EQ(v, 0.0);
    }
}

TEST(Train, NonFiniteGradientRaisesDivergence)
{
    const ModelConfig cfg;
    auto data = small_dataset(2, 5);
    data[1].objects[0].feature[0] = std::nan("");
    TrainConfig tc;
    tc.epochs = 1;
    auto state = init_train_state(cfg, tc);
    EXPECT_THROW(run_training(state, data, cfg, tc), DivergenceError);
}

TEST(Train, InvalidConfigsAreRejected)
{
    TrainConfig tc;
    tc.batch_size = 0;
    EXPECT_THROW(tc.validate(), ConfigError);
    EXPECT_THROW(train_config_from_json(json{{"learning_rate", -1.0}}), ConfigError);
    EXPECT_THROW(train_config_from_json(json{{"optimizer", "rmsprop"}}), ConfigError);
    tc = train_config_from_json(json{{"optimizer", "sgd"}, {"epochs", 0}});
    EXPECT_EQ(tc.optimizer, OptimizerKind::sgd);
    EXPECT_EQ(tc.epochs, 0);
}

TEST(Train, CheckpointRoundTripAndErrors)
{
    testutil::TempDir dir("train");
    const ModelConfig cfg;
    TrainConfig tc;
    tc.epochs = 1;
    auto state = init_train_state(cfg, tc);
    run_training(state, small_dataset(4, 6), cfg, tc);
    const Checkpoint ckpt = make_checkpoint(cfg, state);
    const auto path = dir.file("c.json");
    save_checkpoint(path, ckpt);
    const Checkpoint back = load_checkpoint(path);
    EXPECT_EQ(back.model, cfg);
    EXPECT_TRUE(params_equal(back.params, ckpt.params));
    EXPECT_TRUE(params_equal(back.optimizer.first_moment, ckpt.optimizer.first_moment));
    EXPECT_TRUE(params_equal(back.optimizer.second_moment, ckpt.optimizer.second_moment));
    EXPECT_EQ(back.optimizer.step, ckpt.optimizer.step);
    EXPECT_EQ(back.rng_state, ckpt.rng_state);
    EXPECT_EQ(back.epoch, 1);
    EXPECT_EQ(to_json(back).dump(), to_json(ckpt).dump());
    EXPECT_FALSE(std::filesystem::exists(path + ".tmp"));

    json j = to_json(ckpt);
    j["schema_version"] = 2;
    EXPECT_THROW(checkpoint_from_json(j), CheckpointVersionError);

    j = to_json(ckpt);
    j["tensors"].erase(3);
    try {
        checkpoint_from_json(j);
        FAIL();
    } catch (const MissingTensorError& e) {
        EXPECT_EQ(e.name(), "context_proj.bias");
    }

    j = to_json(ckpt);
    j["tensors"][0]["shape"] = {3, 3};
    try {
        checkpoint_from_json(j);
        FAIL();
    } catch (const ShapeMismatchError& e) {
        EXPECT_EQ(e.name(), "label_embed.weight");
    }

    std::ofstream(dir.file("garbage.json")) << "{";
    EXPECT_THROW(load_checkpoint(dir.file("garbage.json")), CheckpointError);
}

TEST(Train, ResumeMatchesUninterruptedRun)
{
    testutil::TempDir dir("train");
    const ModelConfig cfg;
    const auto data = small_dataset(10, 7);
    TrainConfig tc;
    tc.epochs = 4;
    tc.batch_size = 3;
    tc.learning_rate = 5e-3;

    auto full = init_train_state(cfg, tc);
    run_training(full, data, cfg, tc);

    TrainConfig half = tc;
    half.epochs = 2;
    auto first = init_train_state(cfg, half);
    run_training(first, data, cfg, half);
    save_checkpoint(dir.file("half.json"), make_checkpoint(cfg, first));
    auto resumed = train_state_from(load_checkpoint(dir.file("half.json")));
    run_training(resumed, data, cfg, tc);

    EXPECT_EQ(resumed.epoch, 4);
    EXPECT_EQ(to_json(make_checkpoint(cfg, resumed)).dump(), to_json(make_checkpoint(cfg, full)).dump());
}

TEST(Train, FullRunIsDeterministic)
{
    const ModelConfig cfg;
    const auto data = small_dataset(6, 8);
    TrainConfig tc;
    tc.epochs = 2;
    tc.batch_size = 4;
    auto a = init_train_state(cfg, tc), b = init_train_state(cfg, tc);
    run_training(a, data, cfg, tc);
    run_training(b, data, cfg, tc);
    EXPECT_EQ(to_json(make_checkpoint(cfg, a)).dump(), to_json(make_checkpoint(cfg, b)).dump());
}
