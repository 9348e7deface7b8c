#pragma once

#include <string>
#include <utility>
#include <vector>

#include "pbkd/runtime.hpp"

namespace pbkd {

// One row of a replayed hardware counter trace. Counters are either
// cumulative (cpu_energy_joules, cpu_*_ticks) or instantaneous (power_watts).
struct CounterSample {
    double timestamp_s = 0.0;
    std::string counter;
    double value = 0.0;
};

// Counter trace file: CSV with header `timestamp_s,counter,value`.
std::vector<CounterSample> parse_counter_csv(const std::string& text, const std::string& origin);
std::vector<CounterSample> load_counter_csv(const std::string& path);
void save_counter_csv(const std::string& path, const std::vector<CounterSample>& samples);

// Samples of one named counter, in file order. Throws if timestamps go
// backwards for that counter.
std::vector<CounterSample> filter_counter(const std::vector<CounterSample>& samples,
                                          const std::string& name);

struct PowerSample {
    double timestamp_s = 0.0;
    double watts = 0.0;
};

// speedup = serial / parallel, efficiency = speedup / workers.
std::pair<double, double> speedup_efficiency(double serial_time, double parallel_time,
                                             int worker_count);

// greenup = serial energy / parallel energy.
double greenup(double serial_energy, double parallel_energy);

// powerup = speedup / greenup (derived metric, not defined in the sources
// the rest of this module follows).
double powerup(double speedup, double greenup);

// Average power per sampling interval from a cumulative joule counter:
// (E_{i+1} - E_i) * frequency. A decreasing counter is a corrupt trace.
std::vector<double> cpu_avg_power(const std::vector<CounterSample>& energy_samples,
                                  double sampling_frequency_hz);

struct UsageSeries {
    std::vector<double> usage;  // one fraction per usable interval
    std::vector<std::string> warnings;
};

// Utilization per interval from per-interval tick deltas:
// (duser + dkernel) / dtotal, clamped to [0,1] with a warning; zero-total
// intervals are skipped with a warning.
UsageSeries cpu_avg_usage(const std::vector<double>& user_deltas,
                          const std::vector<double>& kernel_deltas,
                          const std::vector<double>& total_deltas);

// Trapezoidal integral of an instantaneous power series, in joules.
double energy_integrate(const std::vector<PowerSample>& samples);

// Instantaneous power implied by a trace: idle_watts plus active_watts for
// every worker busy at that moment. Emits doubled samples at each busy-count
// change so the step function integrates exactly.
std::vector<PowerSample> synthetic_power_model(const std::vector<TraceEvent>& trace,
                                               double idle_watts,
                                               double active_watts_per_worker);

struct WorkerBusy {
    int worker_id = 0;
    double busy_s = 0.0;
    double busy_fraction = 0.0;
};

struct TaskSpan {
    int task_id = 0;
    int worker_id = 0;
    double start_s = 0.0;
    double end_s = 0.0;
};

struct MetricsReport {
    double serial_time = 0.0;
    double parallel_time = 0.0;
    double speedup = 0.0;
    double efficiency = 0.0;
    double serial_energy = 0.0;
    double parallel_energy = 0.0;
    double greenup = 0.0;
    double powerup = 0.0;  // derived: speedup / greenup
    int worker_count = 0;
    std::vector<WorkerBusy> worker_busy;
    std::vector<TaskSpan> task_spans;
};

// Assemble the ratio metrics plus per-worker busy fractions and per-task
// spans extracted from the trace.
MetricsReport build_metrics_report(double serial_time, double parallel_time, int worker_count,
                                   double serial_energy, double parallel_energy,
                                   const std::vector<TraceEvent>& trace);

// Full-precision JSON for the report; ratios are rounded to 2 decimals only
// for display elsewhere.
std::string metrics_report_json(const MetricsReport& report);

// Per-task timeline CSV (`task_id,worker_id,start_s,end_s`), one row per
// task, suitable for Gantt plotting.
void save_task_timeline_csv(const std::string& path, const std::vector<TaskSpan>& spans);

// Task spans extracted from start/end pairs in a trace. Throws on missing
// or duplicated pairs.
std::vector<TaskSpan> task_spans_from_trace(const std::vector<TraceEvent>& trace);

}  // namespace pbkd
