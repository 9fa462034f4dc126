// linknet: generate synthetic scenes, train, evaluate, inspect attention, check
// gradients and run ablation grids.

#include <iostream>

#include <CLI11.hpp>

#include "commands.hpp"

int main(int argc, char** argv)
{
    using namespace linknet::cli;

    CLI::App app{"Scene-graph generation with relational embeddings on synthetic scenes"};
    app.set_version_flag("--version", LINKNET_VERSION);
    app.require_subcommand(1);

    GenDataOptions gen;
    auto* gen_cmd = app.add_subcommand("gen-data", "Generate a JSONL dataset of synthetic scenes");
    gen_cmd->add_option("--config", gen.config, "Generator config JSON (defaults when omitted)");
    gen_cmd->add_option("--out", gen.out, "Output dataset path")->required();
    gen_cmd->add_option("--scenes", gen.scenes, "Number of scenes");
    gen_cmd->add_option("--seed", gen.seed, "Dataset seed");

    TrainOptions train;
    auto* train_cmd = app.add_subcommand("train", "Train a model and write a checkpoint");
    train_cmd->add_option("--data", train.data, "Training dataset (JSONL)")->required();
    train_cmd->add_option("--model-config", train.model_config, "Model config JSON");
    train_cmd->add_option("--train-config", train.train_config, "Training config JSON");
    train_cmd->add_option("--out", train.out, "Checkpoint path")->required();
    train_cmd->add_option("--resume", train.resume, "Continue from this checkpoint");

    EvalOptions eval;
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate recall@K of a checkpoint");
    eval_cmd->add_option("--data", eval.data, "Evaluation dataset (JSONL)")->required();
    eval_cmd->add_option("--ckpt", eval.ckpt, "Checkpoint")->required();
    eval_cmd->add_option("--task", eval.task, "predcls or sgcls");
    eval_cmd->add_option("--k", eval.k, "Comma-separated K values");
    eval_cmd->add_option("--report", eval.report, "Report JSON path")->required();

    InspectOptions inspect;
    auto* inspect_cmd = app.add_subcommand("inspect", "Export attention heatmaps for one scene");
    inspect_cmd->add_option("--ckpt", inspect.ckpt, "Checkpoint")->required();
    inspect_cmd->add_option("--data", inspect.data, "Dataset containing the scene")->required();
    inspect_cmd->add_option("--scene-id", inspect.scene_id, "Scene id")->required();
    inspect_cmd->add_option("--out", inspect.out, "Output directory")->required();

    GradcheckOptions grad;
    auto* grad_cmd = app.add_subcommand("gradcheck", "Compare gradients with central finite differences");
    grad_cmd->add_option("--model-config", grad.model_config, "Model config JSON");
    grad_cmd->add_option("--seed", grad.seed, "Seed for the scene and the parameters");
    grad_cmd->add_option("--eps", grad.eps, "Finite-difference step");
    grad_cmd->add_flag("--sabotage", grad.sabotage, "Corrupt one analytic gradient entry (negative control)");

    AblateOptions ablate;
    auto* ablate_cmd = app.add_subcommand("ablate", "Train and evaluate every cell of an ablation grid");
    ablate_cmd->add_option("--data", ablate.data, "Training dataset (JSONL)")->required();
    ablate_cmd->add_option("--eval-data", ablate.eval_data, "Evaluation dataset (defaults to --data)");
    ablate_cmd->add_option("--grid", ablate.grid, "Grid JSON (standard grid when omitted)");
    ablate_cmd->add_option("--train-config", ablate.train_config, "Training config JSON");
    ablate_cmd->add_option("--seeds", ablate.seeds, "Seeds per cell (>= 3)");
    ablate_cmd->add_option("--out", ablate.out, "Output CSV path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return exit_config;
    }

    return run_guarded(
        [&]() -> int {
            if (*gen_cmd) return run_gen_data(gen, std::cout);
            if (*train_cmd) return run_train(train, std::cout);
            if (*eval_cmd) return run_eval(eval, std::cout);
            if (*inspect_cmd) return run_inspect(inspect, std::cout);
            if (*grad_cmd) return run_gradcheck(grad, std::cout);
            return run_ablate(ablate, std::cout);
        },
        std::cerr);
}
