#pragma once
// Subcommand implementations for the linknet tool. Each run_* function returns
// a process exit code; run_guarded maps library exceptions onto the documented
// codes.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "linknet/linknet.hpp"

#ifndef LINKNET_VERSION
#define LINKNET_VERSION "dev"
#endif

namespace linknet::cli {

namespace fs = std::filesystem;

enum ExitCode : int {
    exit_ok = 0,
    exit_config = 2,
    exit_io = 3,
    exit_divergence = 4,
    exit_mismatch = 5,
    exit_gradcheck = 6,
};

inline json read_json_file(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::ios_base::failure("cannot open " + path);
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError(path, std::string("invalid JSON: ") + e.what());
    }
}

inline GenConfig load_gen_config(const std::string& path)
{
    GenConfig cfg = path.empty() ? GenConfig{} : gen_config_from_json(read_json_file(path));
    cfg.validate();
    return resolve_tables(cfg);
}

inline ModelConfig load_model_config(const std::string& path)
{
    ModelConfig cfg = path.empty() ? ModelConfig{} : model_config_from_json(read_json_file(path));
    cfg.validate();
    return cfg;
}

inline TrainConfig load_train_config(const std::string& path)
{
    TrainConfig cfg = path.empty() ? TrainConfig{} : train_config_from_json(read_json_file(path));
    cfg.validate();
    return cfg;
}

/// Run record written next to an output: what ran, with which fully defaulted
/// configs, seeds and paths.
struct Manifest {
    std::string command;
    json config = json::object();
    json seeds = json::object();
    json inputs = json::object();
    json outputs = json::object();
    std::chrono::steady_clock::time_point started = std::chrono::steady_clock::now();
};

inline fs::path manifest_path_for(const fs::path& output)
{
    auto p = output;
    p += ".manifest.json";
    return p;
}

inline void write_manifest(const fs::path& path, const Manifest& m)
{
    const double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - m.started).count();
    json j = {{"command", m.command},          {"tool_version", LINKNET_VERSION},
              {"config", m.config},            {"seeds", m.seeds},
              {"inputs", m.inputs},            {"outputs", m.outputs},
              {"wall_clock_seconds", seconds}};
    write_text_atomic(path, j.dump(2) + "\n");
}

inline std::string dataset_text(const std::vector<Scene>& scenes)
{
    std::string text;
    for (const auto& scene : scenes) {
        text += to_json(scene).dump();
        text += '\n';
    }
    return text;
}

inline std::vector<int> parse_k_list(const std::string& text)
{
    std::vector<int> ks;
    std::stringstream in(text);
    std::string item;
    while (std::getline(in, item, ',')) {
        if (item.empty()) continue;
        std::size_t used = 0;
        int k = 0;
        try {
            k = std::stoi(item, &used);
        } catch (const std::exception&) {
            throw ConfigError("k", "not an integer: " + item);
        }
        if (used != item.size()) throw ConfigError("k", "not an integer: " + item);
        if (k <= 0) throw ConfigError("k", "K must be >= 1");
        ks.push_back(k);
    }
    if (ks.empty()) throw ConfigError("k", "empty K list");
    std::sort(ks.begin(), ks.end());
    ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
    return ks;
}

// ---------------------------------------------------------------------------
// gen-data

struct GenDataOptions {
    std::string config;
    std::string out;
    std::size_t scenes = 100;
    std::uint64_t seed = 1;
};

inline int run_gen_data(const GenDataOptions& o, std::ostream& log)
{
    Manifest m{"gen-data"};
    const GenConfig cfg = load_gen_config(o.config);
    const auto scenes = generate_dataset(cfg, o.scenes, o.seed);
    write_text_atomic(o.out, dataset_text(scenes));
    m.config = {{"generator", to_json(cfg)}, {"scenes", o.scenes}};
    m.seeds = {{"dataset", o.seed}};
    m.inputs = {{"config", o.config}};
    m.outputs = {{"dataset", o.out}};
    write_manifest(manifest_path_for(o.out), m);
    log << "wrote " << scenes.size() << " scenes to " << o.out << "\n";
    return exit_ok;
}

// ---------------------------------------------------------------------------
// train

struct TrainOptions {
    std::string data;
    std::string model_config;
    std::string train_config;
    std::string out;
    std::string resume;
};

inline fs::path loss_csv_path_for(const fs::path& ckpt)
{
    auto p = ckpt;
    p += ".losses.csv";
    return p;
}

inline int run_train(const TrainOptions& o, std::ostream& log)
{
    Manifest m{"train"};
    const TrainConfig tcfg = load_train_config(o.train_config);
    const auto dataset = read_dataset(o.data);

    ModelConfig mcfg;
    TrainState state;
    std::string csv = "epoch,total,object,relation,context\n";
    if (!o.resume.empty()) {
        const Checkpoint ckpt = load_checkpoint(o.resume);
        mcfg = o.model_config.empty() ? ckpt.model : load_model_config(o.model_config);
        if (to_json(mcfg) != to_json(ckpt.model))
            throw MismatchError("model config differs from the checkpoint being resumed");
        if (ckpt.optimizer.kind != tcfg.optimizer)
            throw MismatchError("optimizer differs from the checkpoint being resumed");
        state = train_state_from(ckpt);
        const auto prior = loss_csv_path_for(o.resume);
        if (std::ifstream in(prior); in) {
            std::stringstream buffer;
            buffer << in.rdbuf();
            csv = buffer.str();
        }
    } else {
        mcfg = load_model_config(o.model_config);
        state = init_train_state(mcfg, tcfg);
    }
    for (const auto& scene : dataset) check_compatible(scene, mcfg);

    run_training(state, dataset, mcfg, tcfg, [&](const EpochMetrics& e, const TrainState&) {
        csv += std::to_string(e.epoch) + "," + format_double(e.mean.total) + "," + format_double(e.mean.object) + "," +
               format_double(e.mean.relation) + "," + format_double(e.mean.context) + "\n";
        log << "epoch " << e.epoch << " total " << e.mean.total << " object " << e.mean.object << " relation "
            << e.mean.relation << " context " << e.mean.context << "\n";
    });

    save_checkpoint(o.out, make_checkpoint(mcfg, state));
    write_text_atomic(loss_csv_path_for(o.out), csv);
    m.config = {{"model", to_json(mcfg)}, {"train", to_json(tcfg)}};
    m.seeds = {{"train", tcfg.seed}};
    m.inputs = {{"data", o.data},
                {"model_config", o.model_config},
                {"train_config", o.train_config},
                {"resume", o.resume}};
    m.outputs = {{"checkpoint", o.out}, {"losses", loss_csv_path_for(o.out).string()}};
    write_manifest(manifest_path_for(o.out), m);
    log << "wrote checkpoint " << o.out << " at epoch " << state.epoch << "\n";
    return exit_ok;
}

// ---------------------------------------------------------------------------
// eval

struct EvalOptions {
    std::string data;
    std::string ckpt;
    std::string task = "sgcls";
    std::string k = "20,50,100";
    std::string report;
};

inline int run_eval(const EvalOptions& o, std::ostream& log)
{
    Manifest m{"eval"};
    const Task task = task_from_string(o.task);
    const auto ks = parse_k_list(o.k);
    const Checkpoint ckpt = load_checkpoint(o.ckpt);
    const auto dataset = read_dataset(o.data);
    for (const auto& scene : dataset) check_compatible(scene, ckpt.model);

    const EvalReport report = evaluate(dataset, ckpt.params, ckpt.model, task, ks);
    write_text_atomic(o.report, to_json(report).dump(2) + "\n");
    m.config = {{"model", to_json(ckpt.model)}, {"task", to_string(task)}, {"k", ks}};
    m.inputs = {{"data", o.data}, {"checkpoint", o.ckpt}};
    m.outputs = {{"report", o.report}};
    write_manifest(manifest_path_for(o.report), m);

    log << to_string(task) << " scenes=" << report.n_scenes;
    for (const auto& [k, r] : report.recall) log << " R@" << k << "=" << r;
    if (report.attention_alignment) log << " alignment=" << *report.attention_alignment;
    log << "\n";
    return exit_ok;
}

// ---------------------------------------------------------------------------
// inspect

struct InspectOptions {
    std::string ckpt;
    std::string data;
    std::string scene_id;
    std::string out;
};

inline int run_inspect(const InspectOptions& o, std::ostream& log)
{
    Manifest m{"inspect"};
    const Checkpoint ckpt = load_checkpoint(o.ckpt);
    const auto dataset = read_dataset(o.data);
    const auto it = std::find_if(dataset.begin(), dataset.end(), [&](const Scene& s) { return s.scene_id == o.scene_id; });
    if (it == dataset.end()) throw ConfigError("scene-id", "no scene with id " + o.scene_id + " in " + o.data);
    const Scene& scene = *it;
    check_compatible(scene, ckpt.model);

    fs::create_directories(o.out);
    const fs::path dir(o.out);
    const ModelOutput out = forward(scene, ckpt.params, ckpt.model);
    json files = json::array();
    auto export_one = [&](const Tensor& t, const std::string& stem) {
        export_heatmap(t, (dir / stem).string());
        files.push_back(stem + ".csv");
        files.push_back(stem + ".pgm");
    };
    for (std::size_t k = 0; k < out.object_attention.size(); ++k)
        export_one(out.object_attention[k], "object_rem_" + std::to_string(k + 1));
    for (std::size_t k = 0; k < out.edge_attention.size(); ++k)
        export_one(out.edge_attention[k], "edge_rem_" + std::to_string(k + 1));
    const Tensor adjacency = relation_adjacency(scene);
    export_one(adjacency, "gt_adjacency");
    export_one(fold_upper(adjacency), "gt_folded");

    json summary = {{"scene_id", scene.scene_id}, {"n_objects", scene.objects.size()}, {"alignment", nullptr}};
    if (const Tensor* r = alignment_attention(out)) {
        export_one(fold_upper(*r), "attention_folded");
        if (auto a = attention_alignment(*r, adjacency)) summary["alignment"] = *a;
    }
    summary["files"] = files;
    write_text_atomic(dir / "inspect.json", summary.dump(2) + "\n");

    m.config = {{"model", to_json(ckpt.model)}, {"scene_id", o.scene_id}};
    m.inputs = {{"checkpoint", o.ckpt}, {"data", o.data}};
    m.outputs = {{"directory", o.out}, {"files", files}};
    write_manifest(dir / "manifest.json", m);

    log << "scene " << scene.scene_id << ": wrote " << files.size() << " files to " << o.out;
    if (summary["alignment"].is_number()) log << ", alignment " << summary["alignment"].get<double>();
    log << "\n";
    return exit_ok;
}

// ---------------------------------------------------------------------------
// gradcheck

inline constexpr double gradcheck_tolerance = 1e-4;

/// Scene used for gradient checking: three objects, dimensions taken from `cfg`.
inline Scene gradcheck_scene(const ModelConfig& cfg, std::uint64_t seed)
{
    GenConfig gen;
    gen.num_object_classes = cfg.num_object_classes;
    gen.num_predicates = cfg.num_predicates;
    gen.roi_dim = cfg.roi_dim;
    gen.image_dim = cfg.image_dim;
    gen.min_objects = 3;
    gen.max_objects = 3;
    return generate_scene(gen, seed);
}

/// Compares reverse-mode gradients of total_loss with central differences over
/// every parameter. `sabotage` perturbs one analytic entry as a negative control.
inline GradCheckReport gradcheck_model(const ModelConfig& cfg, std::uint64_t seed, double eps, bool sabotage = false)
{
    cfg.validate();
    const Scene scene = gradcheck_scene(cfg, seed);
    ModelParams params = init_params(cfg, seed);
    GradientResult analytic = loss_and_gradients(scene, params, cfg);
    if (sabotage) {
        auto& g = analytic.gradients.relation_logits.weight;
        g[0] += 0.5 + 0.5 * std::abs(g[0]);
    }

    std::vector<const Tensor*> grads;
    analytic.gradients.visit([&](const std::string&, const Tensor& t) { grads.push_back(&t); });
    std::vector<GradCheckTarget> targets;
    std::size_t k = 0;
    params.visit([&](const std::string& name, Tensor& t) { targets.push_back({name, &t, grads[k++]}); });
    return finite_diff_check([&] { return total_loss_value(scene, params, cfg); }, targets, eps);
}

struct GradcheckOptions {
    std::string model_config;
    std::uint64_t seed = 1;
    double eps = 1e-7;
    bool sabotage = false;
};

inline int run_gradcheck(const GradcheckOptions& o, std::ostream& log)
{
    const ModelConfig cfg = load_model_config(o.model_config);
    if (!(o.eps > 0.0)) throw ConfigError("eps", "must be positive");
    const auto report = gradcheck_model(cfg, o.seed, o.eps, o.sabotage);
    const bool pass = report.max_rel_error < gradcheck_tolerance;
    log << "max relative error " << report.max_rel_error << " over " << report.coordinates << " coordinates";
    if (!pass) log << "; worst parameter " << report.worst_param << "[" << report.worst_index << "]";
    log << (pass ? " PASS" : " FAIL") << "\n";
    return pass ? exit_ok : exit_gradcheck;
}

// ---------------------------------------------------------------------------
// ablate

struct AblateOptions {
    std::string data;
    std::string eval_data;
    std::string grid;
    std::string train_config;
    std::size_t seeds = 3;
    std::string out;
};

inline int run_ablate(const AblateOptions& o, std::ostream& log)
{
    Manifest m{"ablate"};
    const TrainConfig tcfg = load_train_config(o.train_config);
    const AblationGrid grid = o.grid.empty() ? standard_ablation_grid(ModelConfig{}) : ablation_grid_from_json(read_json_file(o.grid));
    if (o.seeds < 3) throw ConfigError("seeds", "at least 3 seeds per cell are required");
    const auto train_set = read_dataset(o.data);
    const auto eval_set = o.eval_data.empty() ? train_set : read_dataset(o.eval_data);
    for (const auto& cell : grid.cells) {
        const ModelConfig cfg = apply_delta(grid.baseline, cell.delta);
        for (const auto& scene : train_set) check_compatible(scene, cfg);
        for (const auto& scene : eval_set) check_compatible(scene, cfg);
    }
    std::vector<std::uint64_t> seeds;
    for (std::size_t s = 0; s < o.seeds; ++s) seeds.push_back(tcfg.seed + s);

    const auto runs = run_ablation(grid, train_set, eval_set, tcfg, seeds, [&](const AblationRun& r) {
        log << r.cell << " seed " << r.seed << ": ";
        if (r.ok)
            log << "R@20 " << r.report.recall.at(20) << "\n";
        else
            log << "failed: " << r.error << "\n";
    });
    write_text_atomic(o.out, ablation_csv(runs));
    fs::path summary_path = o.out;
    summary_path += ".summary.csv";
    write_text_atomic(summary_path, ablation_summary_csv(summarize(runs)));

    m.config = {{"grid", to_json(grid)}, {"train", to_json(tcfg)}};
    m.seeds = {{"cells", seeds}};
    m.inputs = {{"data", o.data}, {"eval_data", o.eval_data.empty() ? o.data : o.eval_data}, {"grid", o.grid}};
    m.outputs = {{"table", o.out}, {"summary", summary_path.string()}};
    write_manifest(manifest_path_for(o.out), m);

    const bool any_ok = std::any_of(runs.begin(), runs.end(), [](const AblationRun& r) { return r.ok; });
    return any_ok ? exit_ok : exit_divergence;
}

// ---------------------------------------------------------------------------

/// Runs `body` and converts exceptions into exit codes with a message on `err`.
inline int run_guarded(const std::function<int()>& body, std::ostream& err)
{
    try {
        return body();
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return exit_config;
    } catch (const DivergenceError& e) {
        err << "divergence: " << e.what() << "\n";
        return exit_divergence;
    } catch (const MismatchError& e) {
        err << "mismatch: " << e.what() << "\n";
        return exit_mismatch;
    } catch (const CheckpointError& e) {
        err << "checkpoint mismatch: " << e.what() << "\n";
        return exit_mismatch;
    } catch (const DatasetError& e) {
        err << "dataset error: " << e.what() << "\n";
        return exit_io;
    } catch (const std::ios_base::failure& e) {
        err << "I/O error: " << e.what() << "\n";
        return exit_io;
    } catch (const fs::filesystem_error& e) {
        err << "I/O error: " << e.what() << "\n";
        return exit_io;
    } catch (const std::invalid_argument& e) {
        err << "config error: " << e.what() << "\n";
        return exit_config;
    }
}

} // namespace linknet::cli
