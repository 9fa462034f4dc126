// Acceptance suite: one PASS/FAIL line per criterion. Exit status is nonzero
// when any criterion fails.

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>

#include "brute_force.hpp"
#include "commands.hpp"
#include "linknet/linknet.hpp"
#include "oracle.hpp"
#include "test_util.hpp"

using namespace linknet;

namespace {

constexpr double gradient_tolerance = 1e-4;
constexpr double gradient_budget_seconds = 60.0;
constexpr double oracle_tolerance = 1e-12;
constexpr double softmax_tolerance = 1e-12;
constexpr double layout_tolerance = 1e-12;
constexpr double permutation_tolerance = 1e-10;
constexpr double learnability_factor = 3.0;
constexpr double training_budget_seconds = 300.0;
constexpr double overfit_ratio = 0.1;

// Learning protocol shared by criteria 4-7.
constexpr std::size_t train_scenes = 500;
constexpr std::size_t heldout_scenes = 100;
constexpr std::uint64_t heldout_seed_offset = 1000;
constexpr int protocol_epochs = 30;
constexpr double protocol_lr = 3e-3;
constexpr std::size_t protocol_batch = 8;
const std::vector<std::uint64_t> protocol_seeds = {1, 2, 3};

double seconds_since(std::chrono::steady_clock::time_point t0)
{
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

/// Collects failures for one criterion and a short summary of measured values.
struct Check {
    bool ok = true;
    std::ostringstream detail;
    std::vector<std::string> failures;

    void require(bool cond, const std::string& what)
    {
        if (!cond) {
            ok = false;
            if (failures.size() < 5) failures.push_back(what);
        }
    }
};

std::string fmt(double v)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4g", v);
    return buf;
}

Scene scene_with(std::size_t n, std::uint64_t seed)
{
    GenConfig gen;
    gen.min_objects = static_cast<int>(n);
    gen.max_objects = static_cast<int>(n);
    return generate_scene(gen, seed);
}

ModelParams params_with_biases(const ModelConfig& cfg, std::uint64_t seed)
{
    ModelParams p = init_params(cfg, seed);
    std::mt19937_64 rng(seed + 1000);
    std::uniform_real_distribution<double> dist(-0.1, 0.1);
    p.visit([&](const std::string& name, Tensor& t) {
        if (name.ends_with(".bias"))
            for (auto& v : t.data()) v = dist(rng);
    });
    return p;
}

void gradient_fidelity(Check& c)
{
    const auto t0 = std::chrono::steady_clock::now();
    double worst = 0.0;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const auto report = cli::gradcheck_model(ModelConfig{}, seed, 1e-7);
        worst = std::max(worst, report.max_rel_error);
        c.require(report.max_rel_error < gradient_tolerance,
                  "seed " + std::to_string(seed) + " error " + fmt(report.max_rel_error) + " at " + report.worst_param);
    }
    const double secs = seconds_since(t0);
    c.require(secs < gradient_budget_seconds, "runtime " + fmt(secs) + " s");
    c.detail << "max rel error " << fmt(worst) << ", " << fmt(secs) << " s";
}

void forward_oracle(Check& c)
{
    const ModelConfig cfg;
    double worst = 0.0;
    auto track = [&](double d, const char* what) {
        worst = std::max(worst, d);
        c.require(d < oracle_tolerance, std::string(what) + " differs by " + fmt(d));
    };
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        const Scene scene = scene_with(3, seed);
        const ModelParams p = params_with_biases(cfg, seed);
        const auto out = forward(scene, p, cfg);
        const auto ref = oracle::forward(scene, p, cfg);
        track(oracle::max_diff(out.o0, ref.o0), "O0");
        track(oracle::max_diff(out.o1, ref.o1), "O1");
        track(oracle::max_diff(out.o2, ref.o2), "O2");
        track(oracle::max_diff(out.o3, ref.o3), "O3");
        track(oracle::max_diff(out.o4, ref.o4), "O4");
        for (std::size_t k = 0; k < ref.object_attention.size(); ++k)
            track(oracle::max_diff(out.object_attention[k], ref.object_attention[k]), "object attention");
        for (std::size_t k = 0; k < ref.edge_attention.size(); ++k)
            track(oracle::max_diff(out.edge_attention[k], ref.edge_attention[k]), "edge attention");
        track(oracle::max_diff(out.context, ref.context), "context");
        track(oracle::max_diff(out.presence, ref.presence), "presence");
        track(oracle::max_diff(out.e0, ref.e0), "E0");
        track(oracle::max_diff(out.e1, ref.e1), "E1");
        track(oracle::max_diff(out.g0, ref.g0), "G0");
        track(oracle::max_diff(out.g1, ref.g1), "G1");
        track(oracle::max_diff(out.g2, ref.g2), "G2");
        track(oracle::max_diff(out.layout, ref.layout), "layout");
        track(std::abs(out.losses.object - ref.object_loss), "object loss");
        track(std::abs(out.losses.relation - ref.relation_loss), "relation loss");
        track(std::abs(out.losses.context - ref.context_loss), "context loss");
        track(std::abs(out.losses.total - ref.total), "total loss");
    }
    c.detail << "max abs diff " << fmt(worst) << " over 10 scenes";
}

void invariant_suite(Check& c)
{
    const ModelConfig cfg;
    const ModelParams p = params_with_biases(cfg, 21);

    double softmax_worst = 0.0;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        const auto out = forward(scene_with(3 + seed % 10, seed), p, cfg);
        std::vector<Tensor> all = out.object_attention;
        all.insert(all.end(), out.edge_attention.begin(), out.edge_attention.end());
        for (const auto& r : all)
            for (std::size_t i = 0; i < r.rows(); ++i) {
                double s = 0.0;
                for (std::size_t j = 0; j < r.cols(); ++j) s += r(i, j);
                softmax_worst = std::max(softmax_worst, std::abs(s - 1.0));
            }
    }
    c.require(softmax_worst < softmax_tolerance, "softmax row sum off by " + fmt(softmax_worst));

    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> pos(-1.0, 1.0), ext(0.1, 1.0), sc(0.25, 4.0);
    double layout_worst = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        const Box s{pos(rng), pos(rng), ext(rng), ext(rng)}, o{pos(rng), pos(rng), ext(rng), ext(rng)};
        const double dx = pos(rng) * 10, dy = pos(rng) * 10, k = sc(rng);
        const auto base = geometric_layout(s, o);
        const auto moved = geometric_layout({s.x + dx, s.y + dy, s.w, s.h}, {o.x + dx, o.y + dy, o.w, o.h});
        const auto scaled = geometric_layout({s.x * k, s.y * k, s.w * k, s.h * k}, {o.x * k, o.y * k, o.w * k, o.h * k});
        for (std::size_t d = 0; d < 4; ++d)
            layout_worst = std::max({layout_worst, std::abs(moved[d] - base[d]), std::abs(scaled[d] - base[d])});
    }
    c.require(layout_worst < layout_tolerance, "layout invariance off by " + fmt(layout_worst));

    double perm_worst = 0.0;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const Scene scene = scene_with(6, 200 + seed);
        const std::size_t n = scene.size();
        std::vector<std::size_t> perm(n), where(n);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        Scene moved = scene;
        for (std::size_t k = 0; k < n; ++k) {
            moved.objects[k] = scene.objects[perm[k]];
            where[perm[k]] = k;
        }
        for (auto& rel : moved.relations) {
            rel.subj = static_cast<int>(where[static_cast<std::size_t>(rel.subj)]);
            rel.obj = static_cast<int>(where[static_cast<std::size_t>(rel.obj)]);
        }
        const auto a = forward(scene, p, cfg), b = forward(moved, p, cfg);
        for (std::size_t k = 0; k < n; ++k)
            for (std::size_t col = 0; col < a.o4.cols(); ++col)
                perm_worst = std::max(perm_worst, std::abs(b.o4(k, col) - a.o4(perm[k], col)));
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                if (i == j) continue;
                const std::size_t rb = pair_index(i, j, n), ra = pair_index(perm[i], perm[j], n);
                for (std::size_t col = 0; col < a.g2.cols(); ++col)
                    perm_worst = std::max(perm_worst, std::abs(b.g2(rb, col) - a.g2(ra, col)));
            }
    }
    c.require(perm_worst < permutation_tolerance, "permutation equivariance off by " + fmt(perm_worst));

    // Recall: exhaustive matcher on N <= 5, half on model outputs and half on
    // quantized logits so ties in score are exercised.
    GenConfig small;
    small.min_objects = 2;
    small.max_objects = 5;
    std::uniform_int_distribution<int> level(0, 2);
    int cases = 0, mismatches = 0, non_monotone = 0;
    for (std::uint64_t seed = 0; cases < 1000; ++seed) {
        const Scene scene = generate_scene(small, 5000 + seed);
        if (scene.relations.empty()) continue;
        ModelOutput out = forward(scene, p, cfg);
        if (seed % 2 == 1) {
            for (auto& v : out.o4.data()) v = level(rng);
            for (auto& v : out.g2.data()) v = level(rng);
        }
        const auto gt = gt_triplets(scene);
        for (Task task : {Task::predcls, Task::sgcls}) {
            const auto ranked = predict_triplets(out, scene, task);
            double previous = 0.0;
            for (int k : {1, 2, 3, 5, 10, 20}) {
                const double r = *recall_at_k(ranked, gt, k);
                mismatches += r != *brute_force::recall(scene, out, task, k);
                non_monotone += r < previous;
                previous = r;
            }
        }
        ++cases;
    }
    c.require(mismatches == 0, std::to_string(mismatches) + " recall values differ from the exhaustive matcher");
    c.require(non_monotone == 0, std::to_string(non_monotone) + " recall drops as K grows");
    c.detail << "softmax " << fmt(softmax_worst) << ", layout " << fmt(layout_worst) << ", permutation "
             << fmt(perm_worst) << ", " << cases << " recall cases";
}

struct ProtocolRun {
    EvalReport report;
    double seconds = 0.0;
    double untrained_r20 = 0.0; ///< exhaustive matcher on initial parameters
};

/// Mean exhaustive-matcher recall@20 over scenes with at least one GT triplet.
double brute_force_r20(const std::vector<Scene>& scenes, const ModelParams& p, const ModelConfig& cfg)
{
    double sum = 0.0;
    std::size_t counted = 0;
    for (const auto& scene : scenes)
        if (auto r = brute_force::recall(scene, forward(scene, p, cfg), Task::sgcls, 20)) {
            sum += *r;
            ++counted;
        }
    return sum / static_cast<double>(counted);
}

std::vector<ProtocolRun> run_protocol(const ModelConfig& cfg)
{
    const GenConfig gen;
    std::vector<ProtocolRun> runs;
    for (std::uint64_t seed : protocol_seeds) {
        const auto train_set = generate_dataset(gen, train_scenes, seed);
        const auto heldout = generate_dataset(gen, heldout_scenes, heldout_seed_offset + seed);
        TrainConfig tc;
        tc.learning_rate = protocol_lr;
        tc.epochs = protocol_epochs;
        tc.batch_size = protocol_batch;
        tc.seed = seed;
        ProtocolRun run;
        auto state = init_train_state(cfg, tc);
        run.untrained_r20 = brute_force_r20(heldout, state.params, cfg);
        const auto t0 = std::chrono::steady_clock::now();
        run_training(state, train_set, cfg, tc);
        run.seconds = seconds_since(t0);
        run.report = evaluate(heldout, state.params, cfg, Task::sgcls);
        runs.push_back(std::move(run));
    }
    return runs;
}

MeanStd over_runs(const std::vector<ProtocolRun>& runs, const std::function<double(const ProtocolRun&)>& f)
{
    std::vector<double> v;
    for (const auto& r : runs) v.push_back(f(r));
    return mean_std(v);
}

std::string show(const MeanStd& m) { return fmt(m.mean) + " +- " + fmt(m.std); }

/// Runs for the default model and the two ablations, trained once and shared.
struct ProtocolResults {
    std::vector<ProtocolRun> full, no_rem, no_glem;
};

const ProtocolResults& protocol()
{
    static const ProtocolResults results = [] {
        ProtocolResults r;
        const ModelConfig full;
        r.full = run_protocol(full);
        ModelConfig no_rem = full;
        no_rem.rem_count = 0;
        r.no_rem = run_protocol(no_rem);
        ModelConfig no_glem = full;
        no_glem.enable_glem = false;
        r.no_glem = run_protocol(no_glem);
        return r;
    }();
    return results;
}

void learnability(Check& c)
{
    const auto& runs = protocol().full;
    const auto trained = over_runs(runs, [](const ProtocolRun& r) { return r.report.recall.at(20); });
    const auto baseline = over_runs(runs, [](const ProtocolRun& r) { return r.untrained_r20; });
    double slowest = 0.0;
    for (const auto& r : runs) slowest = std::max(slowest, r.seconds);
    c.require(trained.mean >= learnability_factor * baseline.mean,
              "trained " + fmt(trained.mean) + " < 3 x baseline " + fmt(baseline.mean));
    c.require(trained.mean > 0.0, "trained recall is zero");
    c.require(slowest <= training_budget_seconds, "training took " + fmt(slowest) + " s");
    c.detail << "SGCls R@20 " << show(trained) << " vs untrained " << show(baseline) << ", slowest run " << fmt(slowest)
             << " s";
}

void glem_direction(Check& c)
{
    const GenConfig gen = resolve_tables(GenConfig{});
    std::vector<int> geometric;
    for (const auto& rule : gen.geometric_rule_table) geometric.push_back(rule.predicate);
    auto geo_recall = [&](const ProtocolRun& r) {
        double s = 0.0;
        for (int p : geometric) s += r.report.per_predicate_recall.at(p);
        return s / static_cast<double>(geometric.size());
    };
    const auto on = over_runs(protocol().full, geo_recall);
    const auto off = over_runs(protocol().no_glem, geo_recall);
    c.require(on.mean - on.std > off.mean + off.std, "gap overlaps");
    c.detail << "geometric predicate recall with layout " << show(on) << ", without " << show(off);
}

void rem_direction(Check& c)
{
    auto r20 = [](const ProtocolRun& r) { return r.report.recall.at(20); };
    const auto with = over_runs(protocol().full, r20);
    const auto without = over_runs(protocol().no_rem, r20);
    c.require(with.mean > without.mean, "2 blocks do not beat 0 blocks");
    c.detail << "SGCls R@20 with 2 blocks " << show(with) << ", without " << show(without);
}

void attention_alignment_positive(Check& c)
{
    std::vector<double> values;
    for (const auto& r : protocol().full) {
        const double a = r.report.attention_alignment.value_or(-1.0);
        c.require(r.report.attention_alignment.has_value() && a > 0.0, "alignment " + fmt(a));
        values.push_back(a);
    }
    c.detail << "alignment per seed";
    for (double v : values) c.detail << " " << fmt(v);
}

void determinism_and_persistence(Check& c)
{
    testutil::TempDir dir("acceptance");
    const GenConfig gen;
    const ModelConfig cfg;
    const auto data = generate_dataset(gen, 20, 77);
    c.require(data == generate_dataset(gen, 20, 77), "dataset generation differs");
    write_dataset(data, dir.file("d.jsonl"));
    c.require(read_dataset(dir.file("d.jsonl")) == data, "dataset round trip lossy");

    TrainConfig tc;
    tc.epochs = 4;
    tc.batch_size = 4;
    tc.seed = 9;
    auto a = init_train_state(cfg, tc), b = init_train_state(cfg, tc);
    run_training(a, data, cfg, tc);
    run_training(b, data, cfg, tc);
    save_checkpoint(dir.file("a.json"), make_checkpoint(cfg, a));
    save_checkpoint(dir.file("b.json"), make_checkpoint(cfg, b));
    const std::string bytes = testutil::read_file(dir.file("a.json"));
    c.require(bytes == testutil::read_file(dir.file("b.json")), "checkpoints differ");

    const Checkpoint loaded = load_checkpoint(dir.file("a.json"));
    save_checkpoint(dir.file("a2.json"), loaded);
    c.require(testutil::read_file(dir.file("a2.json")) == bytes, "checkpoint round trip lossy");
    c.require(forward(data[0], loaded.params, loaded.model).losses.total ==
                  forward(data[0], a.params, cfg).losses.total,
              "reloaded parameters change the loss");

    TrainConfig half = tc;
    half.epochs = 2;
    auto first = init_train_state(cfg, half);
    run_training(first, data, cfg, half);
    save_checkpoint(dir.file("half.json"), make_checkpoint(cfg, first));
    auto resumed = train_state_from(load_checkpoint(dir.file("half.json")));
    run_training(resumed, data, cfg, tc);
    save_checkpoint(dir.file("resumed.json"), make_checkpoint(cfg, resumed));
    c.require(testutil::read_file(dir.file("resumed.json")) == bytes, "resumed run differs");
    c.detail << "checkpoint " << bytes.size() << " bytes, identical across reruns, reload and resume";
}

void overfit(Check& c)
{
    const ModelConfig cfg;
    const auto data = generate_dataset(GenConfig{}, 8, 11);
    TrainConfig tc;
    tc.learning_rate = 1e-2;
    tc.batch_size = 8;
    tc.epochs = 500;
    auto state = init_train_state(cfg, tc);
    auto mean_loss = [&] {
        double s = 0.0;
        for (const auto& scene : data) s += total_loss_value(scene, state.params, cfg);
        return s / static_cast<double>(data.size());
    };
    const double initial = mean_loss();
    run_training(state, data, cfg, tc);
    c.require(state.optimizer.step == 500, "expected 500 steps, got " + std::to_string(state.optimizer.step));
    const double final_loss = mean_loss();
    const double r100 = evaluate(data, state.params, cfg, Task::predcls).recall.at(100);
    c.require(final_loss < overfit_ratio * initial, "loss ratio " + fmt(final_loss / initial));
    c.require(r100 == 1.0, "PredCls R@100 " + fmt(r100));
    c.detail << "loss " << fmt(initial) << " -> " << fmt(final_loss) << ", PredCls R@100 " << fmt(r100);
}

} // namespace

int main()
{
    struct Criterion {
        int id;
        const char* name;
        void (*body)(Check&);
    };
    const std::vector<Criterion> criteria = {
        {1, "gradient fidelity", gradient_fidelity},
        {2, "forward pass matches straight-line oracle", forward_oracle},
        {3, "invariant suite", invariant_suite},
        {4, "learnability", learnability},
        {5, "layout encoding helps geometric predicates", glem_direction},
        {6, "relational blocks beat block-free model", rem_direction},
        {7, "attention alignment positive", attention_alignment_positive},
        {8, "determinism and persistence", determinism_and_persistence},
        {9, "overfit sanity", overfit},
    };
    int failed = 0;
    for (const auto& crit : criteria) {
        Check c;
        try {
            crit.body(c);
        } catch (const std::exception& e) {
            c.ok = false;
            c.failures.push_back(std::string("exception: ") + e.what());
        }
        std::cout << (c.ok ? "PASS" : "FAIL") << " " << crit.id << " " << crit.name << ": " << c.detail.str();
        for (const auto& f : c.failures) std::cout << "; " << f;
        std::cout << std::endl;
        failed += !c.ok;
    }
    return failed == 0 ? 0 : 1;
}
