#include "pbkd/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "pbkd/weights_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace pbkd {

namespace {

// Seed stream tags so each consumer of the global seed gets its own stream.
constexpr uint64_t kSeedDataset = 0xda7a;
constexpr uint64_t kSeedSplit = 0x5711;
constexpr uint64_t kSeedTeacherInit = 0x7e11;
constexpr uint64_t kSeedTeacherTrain = 0x7e12;
constexpr uint64_t kSeedFinetune = 0xf17e;

std::string fmt_double(double v) {
    std::ostringstream s;
    s.precision(17);
    s << v;
    return s.str();
}

std::string fmt_float(float v) {
    std::ostringstream s;
    s.precision(9);
    s << v;
    return s.str();
}

std::string fmt2(double v) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(2) << v;
    return s.str();
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw SpecError(path + ": cannot open for writing");
    f << text;
    if (!f) throw SpecError(path + ": write failed");
}

json eval_history_json(const std::vector<EvalPoint>& history) {
    json arr = json::array();
    for (const EvalPoint& p : history) arr.push_back({{"epoch", p.epoch}, {"accuracy", p.accuracy}});
    return arr;
}

// Scheduling weights from the cost table when no measured profile exists:
// one weight unit per million MACs of the block.
std::vector<TaskWeight> mac_proxy_weights(const Network& net, const std::vector<int>& blocks) {
    const CostTable table = count_macs_params(net);
    std::vector<TaskWeight> out;
    for (int k : blocks) {
        const std::string prefix = net.blocks[static_cast<size_t>(k) - 1].name + "/";
        double macs = 0;
        for (const CostRow& r : table.rows)
            if (r.layer.rfind(prefix, 0) == 0) macs += static_cast<double>(r.macs);
        out.push_back({k, macs * 1e-6});
    }
    return out;
}

SchedulePlan build_plan(SchedulePolicy policy, const std::vector<int>& ids,
                        const std::vector<TaskWeight>& weights, int workers) {
    if (policy == SchedulePolicy::WFD) return wfd_bin_pack(weights, workers);
    SchedulePlan p = round_robin(ids, workers);
    p.predicted_makespan = makespan(p, weights);
    p.policy = policy;  // work stealing starts from the round-robin distribution
    return p;
}

double counter_total(const std::vector<CounterSample>& samples, const std::string& name) {
    const std::vector<CounterSample> s = filter_counter(samples, name);
    if (s.size() < 2) throw SpecError("counter '" + name + "' needs at least 2 samples");
    for (size_t i = 1; i < s.size(); ++i)
        if (s[i].value < s[i - 1].value)
            throw SpecError("cumulative counter '" + name + "' decreases at sample " +
                            std::to_string(i));
    return s.back().value - s.front().value;
}

bool has_counter(const std::vector<CounterSample>& samples, const std::string& name) {
    for (const CounterSample& s : samples)
        if (s.counter == name) return true;
    return false;
}

}  // namespace

std::string config_to_text(const RunConfig& cfg) {
    std::ostringstream s;
    s << "seed=" << cfg.global_seed << "\n";
    s << "workers=" << cfg.workers << "\n";
    s << "policy=" << schedule_policy_name(cfg.policy) << "\n";
    s << "epochs-per-block=" << cfg.epochs_per_block << "\n";
    s << "eval-every=" << cfg.eval_every << "\n";
    s << "threshold=" << fmt_double(cfg.threshold) << "\n";
    s << "lambda-local=" << fmt_float(cfg.lambda_local) << "\n";
    s << "loss-mode=" << loss_mode_name(cfg.loss_mode) << "\n";
    s << "finetune-epochs=" << cfg.finetune_epochs << "\n";
    s << "freeze-non-replaced=" << (cfg.freeze_non_replaced ? "true" : "false") << "\n";
    s << "preprocess-threads=" << cfg.preprocess_threads << "\n";
    s << "dataset=" << cfg.dataset << "\n";
    s << "dataset-size=" << cfg.dataset_size << "\n";
    s << "eval-fraction=" << fmt_double(cfg.eval_fraction) << "\n";
    s << "batch-size=" << cfg.batch_size << "\n";
    s << "teacher-epochs=" << cfg.teacher_epochs << "\n";
    s << "lr=" << fmt_float(cfg.lr) << "\n";
    s << "finetune-lr=" << fmt_float(cfg.finetune_lr) << "\n";
    s << "momentum=" << fmt_float(cfg.momentum) << "\n";
    s << "max-steps=" << cfg.max_steps << "\n";
    s << "idle-watts=" << fmt_double(cfg.idle_watts) << "\n";
    s << "active-watts=" << fmt_double(cfg.active_watts) << "\n";
    s << "sampling-hz=" << fmt_double(cfg.sampling_hz) << "\n";
    s << "out=" << cfg.output_dir << "\n";
    if (!cfg.model_spec.empty()) s << "model=" << cfg.model_spec << "\n";
    if (!cfg.teacher_weights.empty()) s << "teacher-weights=" << cfg.teacher_weights << "\n";
    if (!cfg.weights_path.empty()) s << "weights=" << cfg.weights_path << "\n";
    if (!cfg.profile.empty()) s << "profile=" << cfg.profile << "\n";
    if (!cfg.trace_path.empty()) s << "trace=" << cfg.trace_path << "\n";
    if (!cfg.counters_path.empty()) s << "counters=" << cfg.counters_path << "\n";
    return s.str();
}

void validate_config(const RunConfig& cfg) {
    if (cfg.workers < 1) throw SpecError("workers must be at least 1");
    if (cfg.epochs_per_block < 1) throw SpecError("epochs-per-block must be at least 1");
    if (cfg.eval_every < 1) throw SpecError("eval-every must be at least 1");
    if (cfg.finetune_epochs < 0) throw SpecError("finetune-epochs must be non-negative");
    if (cfg.teacher_epochs < 0) throw SpecError("teacher-epochs must be non-negative");
    if (cfg.batch_size < 1) throw SpecError("batch-size must be at least 1");
    if (cfg.preprocess_threads < 1) throw SpecError("preprocess-threads must be at least 1");
    if (cfg.threshold != -1.0 && (cfg.threshold < 0.0 || cfg.threshold > 1.0))
        throw SpecError("threshold must lie in [0,1], or -1 for teacher accuracy minus 0.02");
    if (cfg.lambda_local < 0) throw SpecError("lambda-local must be non-negative");
    if (!(cfg.eval_fraction > 0.0 && cfg.eval_fraction < 1.0))
        throw SpecError("eval-fraction must lie strictly between 0 and 1");
    if (!(cfg.lr > 0)) throw SpecError("lr must be positive");
    if (!(cfg.finetune_lr > 0)) throw SpecError("finetune-lr must be positive");
    if (cfg.momentum < 0 || cfg.momentum >= 1) throw SpecError("momentum must lie in [0,1)");
    if (cfg.max_steps < 0) throw SpecError("max-steps must be non-negative");
    if (cfg.idle_watts < 0 || cfg.active_watts < 0)
        throw SpecError("wattages must be non-negative");
    if (!(cfg.sampling_hz > 0)) throw SpecError("sampling-hz must be positive");
    if (cfg.dataset == "synthetic" && cfg.dataset_size < 20)
        throw SpecError("dataset-size must be at least 20 for the synthetic set");
}

Dataset load_dataset_from_config(const RunConfig& cfg) {
    if (cfg.dataset == "synthetic")
        return make_synthetic_dataset(cfg.dataset_size, mix_seed(cfg.global_seed, kSeedDataset),
                                      cfg.preprocess_threads);
    return load_cifar10(cfg.dataset);
}

SplitIndices split_for_config(const Dataset& d, const RunConfig& cfg) {
    return stratified_split(d, cfg.eval_fraction, mix_seed(cfg.global_seed, kSeedSplit));
}

TeacherOutputs cmd_train_teacher(const RunConfig& cfg) {
    validate_config(cfg);
    if (cfg.model_spec.empty()) throw SpecError("train-teacher needs --model");
    Network net = load_model_spec_file(cfg.model_spec);
    init_weights(net, mix_seed(cfg.global_seed, kSeedTeacherInit));
    const Dataset data = load_dataset_from_config(cfg);
    const SplitIndices split = split_for_config(data, cfg);

    const TeacherTrainResult tr =
        train_teacher(net, data, split, cfg.teacher_epochs, cfg.lr, cfg.momentum, cfg.batch_size,
                      mix_seed(cfg.global_seed, kSeedTeacherTrain));

    fs::create_directories(cfg.output_dir);
    TeacherOutputs out;
    out.eval_accuracy = tr.final_eval;
    out.weights_file = cfg.output_dir + "/teacher.pbkd";
    save_weights(out.weights_file, arrays_from_network(net));

    json summary;
    summary["model"] = net.name;
    summary["eval_accuracy"] = tr.final_eval;
    summary["epochs"] = cfg.teacher_epochs;
    summary["train_samples"] = split.train_idx.size();
    summary["eval_samples"] = split.eval_idx.size();
    summary["loss_history"] = tr.loss_history;
    summary["eval_history"] = eval_history_json(tr.eval_history);
    write_text_file(cfg.output_dir + "/teacher_summary.json", summary.dump(2) + "\n");
    write_text_file(cfg.output_dir + "/config-resolved.txt", config_to_text(cfg));

    std::cout << "teacher '" << net.name << "' accuracy " << std::fixed << std::setprecision(4)
              << tr.final_eval << " on " << split.eval_idx.size() << " held-out samples\n"
              << "wrote " << out.weights_file << "\n";
    std::cout.unsetf(std::ios::fixed);
    return out;
}

DistillOutputs cmd_distill(const RunConfig& cfg) {
    validate_config(cfg);
    if (cfg.model_spec.empty()) throw SpecError("distill needs --model");
    if (cfg.teacher_weights.empty()) throw SpecError("distill needs --teacher-weights");

    Network teacher = load_model_spec_file(cfg.model_spec);
    load_into_network(teacher, load_weights(cfg.teacher_weights), cfg.teacher_weights);
    const Dataset data = load_dataset_from_config(cfg);
    const SplitIndices split = split_for_config(data, cfg);

    const std::vector<int> replaceable = identify_replaceable(teacher);
    if (replaceable.empty())
        throw NothingToDo("model '" + teacher.name + "' has no replaceable blocks");

    DistillOutputs out;
    out.teacher_accuracy = evaluate_network(teacher, data, split.eval_idx, cfg.batch_size);
    out.threshold = cfg.threshold >= 0 ? cfg.threshold
                                       : std::max(0.0, out.teacher_accuracy - 0.02);

    std::vector<DistillTask> tasks;
    for (int k : replaceable) {
        DistillTask t;
        t.block_index = k;
        t.kind = CandidateKind::TwoLayer;
        t.epochs = cfg.epochs_per_block;
        t.eval_every = cfg.eval_every;
        t.seed = mix_seed(cfg.global_seed, static_cast<uint64_t>(k));
        t.threshold = out.threshold;
        t.loss_mode = cfg.loss_mode;
        t.lambda_local = cfg.lambda_local;
        t.lr = cfg.lr;
        t.momentum = cfg.momentum;
        t.batch_size = cfg.batch_size;
        t.max_steps = cfg.max_steps;
        tasks.push_back(t);
    }
    out.task_count = static_cast<int>(tasks.size());

    std::vector<TaskWeight> weights;
    std::string weights_source;
    if (!cfg.profile.empty()) {
        weights = load_profile_csv(cfg.profile);
        weights_source = "profile";
        std::map<int, bool> have;
        for (const TaskWeight& w : weights) have[w.task_id] = true;
        for (int k : replaceable)
            if (!have.count(k))
                throw SpecError(cfg.profile + ": no weight for block " + std::to_string(k));
    } else {
        weights = mac_proxy_weights(teacher, replaceable);
        weights_source = "mac_proxy";
        if (cfg.policy == SchedulePolicy::WFD)
            std::cout << "note: no runtime profile given, using MAC-count weights for wfd\n";
    }

    const SchedulePlan plan = build_plan(cfg.policy, replaceable, weights, cfg.workers);
    RunParallelResult run = run_parallel(teacher, data, split, tasks, plan);
    out.wall_time_s = run.wall_time_s;

    AssembledStudent assembled = reassemble(teacher, run.results, out.threshold);
    for (const ReplacementDecision& d : assembled.decisions)
        if (d.replaced) ++out.replaced_count;
    out.student_accuracy_before =
        evaluate_network(assembled.net, data, split.eval_idx, cfg.batch_size);

    const FinetuneResult ft =
        finetune(assembled.net, data, split, cfg.finetune_epochs, cfg.freeze_non_replaced,
                 cfg.finetune_lr, cfg.momentum, cfg.batch_size,
                 mix_seed(cfg.global_seed, kSeedFinetune));
    out.student_accuracy = ft.final_eval;

    out.teacher_macs = count_macs_params(teacher).total_macs;
    out.student_macs = count_macs_params(assembled.net).total_macs;

    // Deterministic schedule metrics: replay the plan (and a one-worker
    // serial baseline) on the same task weights used for scheduling.
    const SchedulePlan serial_plan = round_robin(replaceable, 1);
    const SimResult sim_ser = simulate_execution(serial_plan, weights);
    const SimResult sim_par = simulate_execution(plan, weights);
    const double serial_energy =
        energy_integrate(synthetic_power_model(sim_ser.trace, cfg.idle_watts, cfg.active_watts));
    const double parallel_energy =
        energy_integrate(synthetic_power_model(sim_par.trace, cfg.idle_watts, cfg.active_watts));
    const MetricsReport rep = build_metrics_report(sim_ser.wall_time, sim_par.wall_time,
                                                   cfg.workers, serial_energy, parallel_energy,
                                                   sim_par.trace);
    out.sim_serial_s = rep.serial_time;
    out.sim_parallel_s = rep.parallel_time;
    out.sim_speedup = rep.speedup;
    out.sim_efficiency = rep.efficiency;
    out.sim_greenup = rep.greenup;
    out.sim_powerup = rep.powerup;

    fs::create_directories(cfg.output_dir);
    out.student_weights_file = cfg.output_dir + "/student.pbkd";
    save_weights(out.student_weights_file, arrays_from_network(assembled.net));
    out.student_file_hash = file_hash(out.student_weights_file);
    save_trace_csv(cfg.output_dir + "/trace.csv", run.trace);
    write_text_file(cfg.output_dir + "/config-resolved.txt", config_to_text(cfg));

    json log;
    log["teacher_accuracy"] = out.teacher_accuracy;
    log["threshold"] = out.threshold;
    log["decisions"] = json::array();
    for (size_t i = 0; i < assembled.decisions.size(); ++i) {
        const ReplacementDecision& d = assembled.decisions[i];
        const TrainedBlockResult& r = run.results[i];
        json e;
        e["block_index"] = d.block_index;
        e["kind"] = d.kind;
        e["replaced"] = d.replaced;
        e["failed"] = d.failed;
        e["best_eval"] = d.best_eval;
        e["threshold"] = d.threshold;
        e["note"] = d.note;
        e["eval_history"] = eval_history_json(r.eval_history);
        e["loss_history"] = r.loss_history;
        e["final_local_loss"] = r.final_local_loss;
        e["wall_time_s"] = r.wall_time_s;
        log["decisions"].push_back(e);
    }
    write_text_file(cfg.output_dir + "/replacement_log.json", log.dump(2) + "\n");

    json report = json::parse(metrics_report_json(rep));
    report["accuracy"] = {{"teacher", out.teacher_accuracy},
                          {"student_before_finetune", out.student_accuracy_before},
                          {"student", out.student_accuracy},
                          {"threshold", out.threshold}};
    report["replacements"] = {{"replaced", out.replaced_count}, {"task_count", out.task_count}};
    report["cost"] = {{"teacher_macs", out.teacher_macs},
                      {"student_macs", out.student_macs},
                      {"mac_ratio", static_cast<double>(out.student_macs) /
                                        static_cast<double>(out.teacher_macs)}};
    json jweights = json::array();
    for (const TaskWeight& w : weights)
        jweights.push_back({{"task_id", w.task_id}, {"weight_seconds", w.weight}});
    report["schedule"] = {{"policy", schedule_policy_name(cfg.policy)},
                          {"workers", cfg.workers},
                          {"weights_source", weights_source},
                          {"task_weights", jweights},
                          {"predicted_makespan", plan.predicted_makespan}};
    json measured;
    measured["wall_time_s"] = run.wall_time_s;
    measured["per_task_wall_s"] = json::object();
    for (const TrainedBlockResult& r : run.results)
        measured["per_task_wall_s"][std::to_string(r.block_index)] = r.wall_time_s;
    report["measured"] = measured;
    write_text_file(cfg.output_dir + "/report.json", report.dump(2) + "\n");

    std::cout << "teacher accuracy " << fmt2(out.teacher_accuracy) << ", threshold "
              << fmt2(out.threshold) << "\n";
    for (const ReplacementDecision& d : assembled.decisions) {
        std::cout << "block " << d.block_index << " (" << d.kind << "): best eval "
                  << fmt2(d.best_eval)
                  << (d.replaced ? " -> replaced" : " -> kept teacher block");
        if (!d.note.empty()) std::cout << " (" << d.note << ")";
        std::cout << "\n";
    }
    std::cout << "student accuracy " << fmt2(out.student_accuracy) << " (before fine-tune "
              << fmt2(out.student_accuracy_before) << ")\n"
              << "MACs " << out.student_macs << " vs " << out.teacher_macs << " ("
              << fmt2(static_cast<double>(out.student_macs) /
                      static_cast<double>(out.teacher_macs))
              << "x)\n"
              << "simulated speedup " << fmt2(out.sim_speedup) << ", efficiency "
              << fmt2(out.sim_efficiency) << ", greenup " << fmt2(out.sim_greenup)
              << ", powerup " << fmt2(out.sim_powerup) << "\n"
              << "wrote run artifacts to " << cfg.output_dir << "\n";
    return out;
}

void cmd_plan(const RunConfig& cfg) {
    validate_config(cfg);
    if (cfg.profile.empty()) throw SpecError("plan needs --profile");
    const std::vector<TaskWeight> weights = load_profile_csv(cfg.profile);
    if (weights.empty()) throw NothingToDo(cfg.profile + ": profile lists no tasks");
    std::vector<int> ids;
    double total = 0;
    for (const TaskWeight& w : weights) {
        ids.push_back(w.task_id);
        total += w.weight;
    }

    const SchedulePlan plan = build_plan(cfg.policy, ids, weights, cfg.workers);
    double span = plan.predicted_makespan;
    if (cfg.policy == SchedulePolicy::WorkStealing)
        span = simulate_execution(plan, weights).wall_time;

    std::map<int, double> weight_of;
    for (const TaskWeight& w : weights) weight_of[w.task_id] = w.weight;
    std::cout << "policy " << schedule_policy_name(cfg.policy) << ", " << cfg.workers
              << " workers, " << weights.size() << " tasks\n";
    for (size_t w = 0; w < plan.assignments.size(); ++w) {
        double load = 0;
        std::cout << "worker " << w << ":";
        for (int id : plan.assignments[w]) {
            std::cout << " " << id;
            load += weight_of[id];
        }
        std::cout << "  (load " << fmt2(load) << ")\n";
    }
    std::cout << (cfg.policy == SchedulePolicy::WorkStealing ? "simulated wall " : "makespan ")
              << fmt2(span) << " of " << fmt2(total) << " total seconds\n";

    json j;
    j["policy"] = schedule_policy_name(cfg.policy);
    j["workers"] = cfg.workers;
    j["assignments"] = plan.assignments;
    j["makespan"] = span;
    j["total_weight"] = total;
    std::cout << j.dump() << "\n";
}

void cmd_flops(const RunConfig& cfg) {
    if (cfg.model_spec.empty()) throw SpecError("flops needs --model");
    const Network net = load_model_spec_file(cfg.model_spec);
    const CostTable table = count_macs_params(net);

    struct BlockCost {
        std::string name;
        std::string kind;
        bool replaceable = false;
        long long macs = 0;
        long long params = 0;
    };
    std::vector<BlockCost> rows;
    auto block_rows = [&table](const std::string& name) {
        std::pair<long long, long long> sums{0, 0};
        const std::string prefix = name + "/";
        for (const CostRow& r : table.rows)
            if (r.layer.rfind(prefix, 0) == 0) {
                sums.first += r.macs;
                sums.second += r.params;
            }
        return sums;
    };
    for (const Block& b : net.blocks) {
        const auto [macs, params] = block_rows(b.name);
        rows.push_back({b.name, b.spec_kind, b.replaceable, macs, params});
    }
    if (net.has_classifier()) {
        const auto [macs, params] = block_rows(net.classifier.name);
        rows.push_back({net.classifier.name, "classifier", false, macs, params});
    }

    size_t name_w = 5;
    for (const BlockCost& r : rows) name_w = std::max(name_w, r.name.size());
    std::cout << std::left << std::setw(static_cast<int>(name_w) + 2) << "block"
              << std::setw(14) << "kind" << std::setw(13) << "replaceable" << std::right
              << std::setw(14) << "macs" << std::setw(12) << "params" << "\n";
    int replaceable_count = 0;
    for (const BlockCost& r : rows) {
        std::cout << std::left << std::setw(static_cast<int>(name_w) + 2) << r.name
                  << std::setw(14) << r.kind << std::setw(13) << (r.replaceable ? "yes" : "no")
                  << std::right << std::setw(14) << r.macs << std::setw(12) << r.params << "\n";
        if (r.replaceable) ++replaceable_count;
    }
    std::cout << "total macs " << table.total_macs << ", total params " << table.total_params
              << ", conv macs " << table.conv_macs() << ", conv params " << table.conv_params()
              << "\n"
              << replaceable_count << " replaceable blocks\n";

    json j;
    j["model"] = net.name;
    j["total_macs"] = table.total_macs;
    j["total_params"] = table.total_params;
    j["conv_macs"] = table.conv_macs();
    j["conv_params"] = table.conv_params();
    j["replaceable_blocks"] = replaceable_count;
    j["blocks"] = json::array();
    for (const BlockCost& r : rows)
        j["blocks"].push_back({{"name", r.name},
                               {"kind", r.kind},
                               {"replaceable", r.replaceable},
                               {"macs", r.macs},
                               {"params", r.params}});
    std::cout << j.dump() << "\n";
}

void cmd_report(const RunConfig& cfg) {
    validate_config(cfg);
    if (cfg.trace_path.empty()) throw SpecError("report needs --trace");
    const std::vector<TraceEvent> trace = load_trace_csv(cfg.trace_path);
    const std::vector<TaskSpan> spans = task_spans_from_trace(trace);
    if (spans.empty()) throw NothingToDo(cfg.trace_path + ": trace contains no tasks");

    double serial_time = 0;
    double wall = 0;
    int workers = 1;
    for (const TaskSpan& s : spans) serial_time += s.end_s - s.start_s;
    for (const TraceEvent& e : trace) {
        wall = std::max(wall, e.timestamp_s);
        workers = std::max(workers, e.worker_id + 1);
    }

    double serial_energy = 0;
    double parallel_energy = 0;
    std::string energy_source;
    std::vector<CounterSample> counters;
    json extras;
    if (!cfg.counters_path.empty()) counters = load_counter_csv(cfg.counters_path);
    if (has_counter(counters, "serial_cpu_energy_joules") &&
        has_counter(counters, "parallel_cpu_energy_joules")) {
        serial_energy = counter_total(counters, "serial_cpu_energy_joules");
        parallel_energy = counter_total(counters, "parallel_cpu_energy_joules");
        energy_source = "counters";
    } else {
        // Replay the trace through the synthetic power model, against a
        // serial baseline with the same tasks back to back on one worker.
        std::vector<TraceEvent> serial_trace;
        double t = 0;
        for (const TaskSpan& s : spans) {
            const double dur = s.end_s - s.start_s;
            serial_trace.push_back({t, 0, s.task_id, TraceEventKind::TaskStart});
            serial_trace.push_back({t + dur, 0, s.task_id, TraceEventKind::TaskEnd});
            t += dur;
        }
        serial_energy = energy_integrate(
            synthetic_power_model(serial_trace, cfg.idle_watts, cfg.active_watts));
        parallel_energy =
            energy_integrate(synthetic_power_model(trace, cfg.idle_watts, cfg.active_watts));
        energy_source = "synthetic_model";
    }

    if (has_counter(counters, "cpu_energy_joules")) {
        const std::vector<double> watts =
            cpu_avg_power(filter_counter(counters, "cpu_energy_joules"), cfg.sampling_hz);
        double mean = 0;
        for (double w : watts) mean += w;
        mean /= static_cast<double>(watts.size());
        extras["cpu_avg_power_watts"] = watts;
        extras["cpu_mean_power_watts"] = mean;
    }
    if (has_counter(counters, "cpu_user_ticks") && has_counter(counters, "cpu_kernel_ticks") &&
        has_counter(counters, "cpu_total_ticks")) {
        auto deltas = [&counters](const std::string& name) {
            const std::vector<CounterSample> s = filter_counter(counters, name);
            std::vector<double> d;
            for (size_t i = 1; i < s.size(); ++i) d.push_back(s[i].value - s[i - 1].value);
            return d;
        };
        const UsageSeries usage = cpu_avg_usage(deltas("cpu_user_ticks"),
                                                deltas("cpu_kernel_ticks"),
                                                deltas("cpu_total_ticks"));
        for (const std::string& w : usage.warnings) std::cout << "warning: " << w << "\n";
        extras["cpu_usage"] = usage.usage;
        extras["cpu_usage_warnings"] = usage.warnings;
    }

    const MetricsReport rep =
        build_metrics_report(serial_time, wall, workers, serial_energy, parallel_energy, trace);
    json j = json::parse(metrics_report_json(rep));
    j["energy_source"] = energy_source;
    for (auto& [key, value] : extras.items()) j[key] = value;

    fs::create_directories(cfg.output_dir);
    write_text_file(cfg.output_dir + "/report.json", j.dump(2) + "\n");
    save_task_timeline_csv(cfg.output_dir + "/timeline.csv", rep.task_spans);

    std::cout << "serial " << fmt2(rep.serial_time) << " s, parallel " << fmt2(rep.parallel_time)
              << " s, " << workers << " workers\n"
              << "speedup " << fmt2(rep.speedup) << ", efficiency " << fmt2(rep.efficiency)
              << "\n"
              << "serial energy " << fmt2(rep.serial_energy) << " J, parallel energy "
              << fmt2(rep.parallel_energy) << " J\n"
              << "greenup " << fmt2(rep.greenup) << ", powerup " << fmt2(rep.powerup)
              << " (derived)\n"
              << "wrote report to " << cfg.output_dir << "\n";
}

EvalOutputs cmd_eval(const RunConfig& cfg) {
    validate_config(cfg);
    if (cfg.model_spec.empty()) throw SpecError("eval needs --model");
    if (cfg.weights_path.empty()) throw SpecError("eval needs --weights");
    const Network structure = load_model_spec_file(cfg.model_spec);
    const Network net =
        rebuild_network_from_arrays(structure, load_weights(cfg.weights_path), cfg.weights_path);
    const Dataset data = load_dataset_from_config(cfg);
    const SplitIndices split = split_for_config(data, cfg);

    EvalOutputs out;
    out.accuracy = evaluate_network(net, data, split.eval_idx, cfg.batch_size);
    std::cout << "accuracy " << std::fixed << std::setprecision(4) << out.accuracy << " on "
              << split.eval_idx.size() << " held-out samples\n";
    std::cout.unsetf(std::ios::fixed);
    return out;
}

}  // namespace pbkd
