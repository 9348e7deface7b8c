#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include "pbkd/dataset.hpp"
#include "pbkd/distill.hpp"
#include "pbkd/metrics.hpp"
#include "pbkd/runtime.hpp"
#include "pbkd/scheduler.hpp"

namespace pbkd {

// Raised when a command has nothing to operate on (exit code 3), as opposed
// to bad input (exit code 2).
struct NothingToDo : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct RunConfig {
    uint64_t global_seed = 42;
    int workers = 1;
    SchedulePolicy policy = SchedulePolicy::RoundRobin;
    int epochs_per_block = 30;
    int eval_every = 2;
    double threshold = -1.0;  // -1 resolves to teacher accuracy minus 0.02
    float lambda_local = 1.0f;
    LossMode loss_mode = LossMode::LocalOnly;
    int finetune_epochs = 20;
    bool freeze_non_replaced = true;
    int preprocess_threads = 4;
    std::string dataset = "synthetic";  // "synthetic" or a CIFAR-10 binary path
    int dataset_size = 1000;            // synthetic sample count
    double eval_fraction = 0.1;
    int batch_size = 50;
    int teacher_epochs = 30;
    float lr = 0.05f;
    float finetune_lr = 0.005f;
    float momentum = 0.9f;
    long max_steps = 0;
    double idle_watts = 50.0;
    double active_watts = 100.0;
    double sampling_hz = 1.0;
    std::string output_dir = "pbkd_out";
    std::string model_spec;       // model description JSON
    std::string teacher_weights;  // teacher checkpoint for distill
    std::string weights_path;     // checkpoint to evaluate
    std::string profile;          // runtime profile CSV for scheduling
    std::string trace_path;       // trace CSV for report
    std::string counters_path;    // counter CSV for report
};

// The resolved configuration as the flat key=value text written next to the
// run artifacts.
std::string config_to_text(const RunConfig& cfg);
void validate_config(const RunConfig& cfg);

Dataset load_dataset_from_config(const RunConfig& cfg);
SplitIndices split_for_config(const Dataset& d, const RunConfig& cfg);

struct TeacherOutputs {
    double eval_accuracy = 0.0;
    std::string weights_file;
};

// train-teacher: fit the model spec on the configured dataset, write the
// checkpoint and a JSON summary into the output directory.
TeacherOutputs cmd_train_teacher(const RunConfig& cfg);

struct DistillOutputs {
    double teacher_accuracy = 0.0;
    double threshold = 0.0;
    int task_count = 0;
    int replaced_count = 0;
    double student_accuracy_before = 0.0;
    double student_accuracy = 0.0;
    long long teacher_macs = 0;
    long long student_macs = 0;
    double sim_serial_s = 0.0;
    double sim_parallel_s = 0.0;
    double sim_speedup = 0.0;
    double sim_efficiency = 0.0;
    double sim_greenup = 0.0;
    double sim_powerup = 0.0;
    double wall_time_s = 0.0;
    std::string student_weights_file;
    uint64_t student_file_hash = 0;
};

// distill: identify replaceable blocks, schedule, train them in parallel,
// reassemble gated by the threshold, fine-tune, and write weights +
// replacement_log.json + trace.csv + report.json + config-resolved.txt.
DistillOutputs cmd_distill(const RunConfig& cfg);

// plan: print the schedule a profile implies (table + JSON).
void cmd_plan(const RunConfig& cfg);

// flops: print the per-block cost table for a model spec (table + JSON).
void cmd_flops(const RunConfig& cfg);

// report: compute the metric set from a trace (and optional counter file).
void cmd_report(const RunConfig& cfg);

struct EvalOutputs {
    double accuracy = 0.0;
};

// eval: score a checkpoint on the held-out split of the configured dataset.
EvalOutputs cmd_eval(const RunConfig& cfg);

}  // namespace pbkd
