#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pbkd/distill.hpp"
#include "pbkd/scheduler.hpp"

namespace pbkd {

enum class TraceEventKind { Dispatch, TaskStart, TaskEnd, Steal, Gather };

const char* trace_event_kind_name(TraceEventKind k);
TraceEventKind trace_event_kind_from_name(const std::string& name);  // throws SpecError

struct TraceEvent {
    double timestamp_s = 0.0;
    int worker_id = 0;
    int task_id = 0;  // -1 for events not tied to a task (gather)
    TraceEventKind kind = TraceEventKind::Dispatch;
};

// Trace file: CSV with header `timestamp_s,worker_id,task_id,kind`.
void save_trace_csv(const std::string& path, const std::vector<TraceEvent>& trace);
std::vector<TraceEvent> load_trace_csv(const std::string& path);
std::vector<TraceEvent> parse_trace_csv(const std::string& text, const std::string& origin);

struct RunParallelResult {
    std::vector<TrainedBlockResult> results;  // gathered in ascending task id order
    std::vector<TraceEvent> trace;
    double wall_time_s = 0.0;
};

// Execute distillation tasks on a pool of worker threads following the plan.
// Workers communicate exactly twice (dispatch and gather); under the
// work-stealing policy an idle worker additionally removes tasks from the
// tail of another worker's queue (owners consume from the head). Task
// failures are isolated: the gather reports them, siblings complete. Task id
// == block index.
RunParallelResult run_parallel(const Network& teacher, const Dataset& data,
                               const SplitIndices& split, const std::vector<DistillTask>& tasks,
                               const SchedulePlan& plan);

struct SimOptions {
    // Randomize victim choice and let idle workers hesitate before stealing.
    // Owners still consume their own queues immediately and stolen tasks
    // start executing at the moment of the steal, which keeps the simulated
    // wall time within the single-worker total.
    bool randomized = false;
    uint64_t seed = 0;
};

struct SimResult {
    double wall_time = 0.0;
    std::vector<TraceEvent> trace;
};

// Replay a schedule on ideal workers where each task takes exactly its
// weight in seconds. Static plans run each queue back to back; the
// work-stealing policy is simulated event-driven, with the deterministic
// victim being the worker holding the largest remaining queued weight.
SimResult simulate_execution(const SchedulePlan& plan, const std::vector<TaskWeight>& weights,
                             const SimOptions& opts = {});

}  // namespace pbkd
