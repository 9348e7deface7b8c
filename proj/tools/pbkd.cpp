#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "pbkd/pipeline.hpp"
#include "pbkd/weights_io.hpp"

int main(int argc, char** argv) {
    pbkd::RunConfig cfg;
    std::string policy_name = "round_robin";
    std::string loss_name = "local_only";

    CLI::App app{"blockwise knowledge distillation with parallel block training"};
    app.set_config("--config", "", "flat key=value config file; command-line flags win");

    app.add_option("--seed", cfg.global_seed, "global RNG seed")->capture_default_str();
    app.add_option("--workers", cfg.workers, "number of parallel workers")->capture_default_str();
    app.add_option("--policy", policy_name, "scheduling policy: round_robin, wfd, work_stealing")
        ->capture_default_str();
    app.add_option("--epochs-per-block", cfg.epochs_per_block,
                   "training epochs per replacement block")
        ->capture_default_str();
    app.add_option("--eval-every", cfg.eval_every, "evaluate a block every N epochs")
        ->capture_default_str();
    app.add_option("--threshold", cfg.threshold,
                   "accuracy a block must beat to be used (-1: teacher accuracy minus 0.02)")
        ->capture_default_str();
    app.add_option("--lambda-local", cfg.lambda_local, "local loss weight in combined mode")
        ->capture_default_str();
    app.add_option("--loss-mode", loss_name, "block training loss: local_only or combined")
        ->capture_default_str();
    app.add_option("--finetune-epochs", cfg.finetune_epochs, "fine-tuning epochs after reassembly")
        ->capture_default_str();
    app.add_flag("--freeze-non-replaced,!--no-freeze-non-replaced", cfg.freeze_non_replaced,
                 "fine-tune only replacement blocks");
    app.add_option("--preprocess-threads", cfg.preprocess_threads,
                   "dataset preprocessing thread count")
        ->capture_default_str();
    app.add_option("--dataset", cfg.dataset, "'synthetic' or path to CIFAR-10 binary data")
        ->capture_default_str();
    app.add_option("--dataset-size", cfg.dataset_size, "synthetic dataset sample count")
        ->capture_default_str();
    app.add_option("--eval-fraction", cfg.eval_fraction, "held-out fraction for evaluation")
        ->capture_default_str();
    app.add_option("--batch-size", cfg.batch_size, "minibatch size")->capture_default_str();
    app.add_option("--teacher-epochs", cfg.teacher_epochs, "teacher training epochs")
        ->capture_default_str();
    app.add_option("--lr", cfg.lr, "learning rate for teacher and block training")
        ->capture_default_str();
    app.add_option("--finetune-lr", cfg.finetune_lr, "fine-tuning learning rate")
        ->capture_default_str();
    app.add_option("--momentum", cfg.momentum, "SGD momentum")->capture_default_str();
    app.add_option("--max-steps", cfg.max_steps, "cap on optimizer steps per block (0 = no cap)")
        ->capture_default_str();
    app.add_option("--idle-watts", cfg.idle_watts, "synthetic power model idle draw")
        ->capture_default_str();
    app.add_option("--active-watts", cfg.active_watts,
                   "synthetic power model per-busy-worker draw")
        ->capture_default_str();
    app.add_option("--sampling-hz", cfg.sampling_hz, "counter sampling frequency")
        ->capture_default_str();
    app.add_option("--out", cfg.output_dir, "output directory")->capture_default_str();
    app.add_option("--model", cfg.model_spec, "model description JSON");
    app.add_option("--teacher-weights", cfg.teacher_weights, "teacher checkpoint to distill from");
    app.add_option("--weights", cfg.weights_path, "checkpoint to evaluate");
    app.add_option("--profile", cfg.profile, "runtime profile CSV (task_id,weight_seconds)");
    app.add_option("--trace", cfg.trace_path, "trace CSV for report");
    app.add_option("--counters", cfg.counters_path, "counter CSV for report");

    CLI::App* c_teacher =
        app.add_subcommand("train-teacher", "train a teacher checkpoint on the configured dataset");
    CLI::App* c_distill = app.add_subcommand(
        "distill", "replace conv blocks with independently trained depthwise-separable blocks");
    CLI::App* c_plan =
        app.add_subcommand("plan", "show the schedule implied by a runtime profile");
    CLI::App* c_flops =
        app.add_subcommand("flops", "per-block MAC and parameter counts for a model");
    CLI::App* c_report =
        app.add_subcommand("report", "compute speedup/efficiency/greenup metrics from a trace");
    CLI::App* c_eval = app.add_subcommand("eval", "evaluate a checkpoint on the held-out split");
    for (CLI::App* sub : {c_teacher, c_distill, c_plan, c_flops, c_report, c_eval})
        sub->fallthrough();
    app.require_subcommand(1);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        cfg.policy = pbkd::schedule_policy_from_name(policy_name);
        cfg.loss_mode = pbkd::loss_mode_from_name(loss_name);
        if (app.got_subcommand(c_teacher))
            pbkd::cmd_train_teacher(cfg);
        else if (app.got_subcommand(c_distill))
            pbkd::cmd_distill(cfg);
        else if (app.got_subcommand(c_plan))
            pbkd::cmd_plan(cfg);
        else if (app.got_subcommand(c_flops))
            pbkd::cmd_flops(cfg);
        else if (app.got_subcommand(c_report))
            pbkd::cmd_report(cfg);
        else if (app.got_subcommand(c_eval))
            pbkd::cmd_eval(cfg);
    } catch (const pbkd::NothingToDo& e) {
        std::cerr << "nothing to do: " << e.what() << "\n";
        return 3;
    } catch (const pbkd::WeightsError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 4;
    }
    return 0;
}
