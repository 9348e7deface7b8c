#include "pbkd/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

namespace pbkd {

std::vector<CounterSample> parse_counter_csv(const std::string& text, const std::string& origin) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line)) throw SpecError(origin + ": empty counter file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "timestamp_s,counter,value")
        throw SpecError(origin + ": line 1: expected header 'timestamp_s,counter,value'");

    std::vector<CounterSample> out;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const size_t c1 = line.find(',');
        const size_t c2 = c1 == std::string::npos ? std::string::npos : line.find(',', c1 + 1);
        if (c2 == std::string::npos)
            throw SpecError(origin + ": line " + std::to_string(line_no) + ": expected 3 fields");
        CounterSample s;
        s.counter = line.substr(c1 + 1, c2 - c1 - 1);
        try {
            size_t used = 0;
            const std::string ts = line.substr(0, c1);
            s.timestamp_s = std::stod(ts, &used);
            if (used != ts.size()) throw std::invalid_argument("trailing characters");
            const std::string val = line.substr(c2 + 1);
            s.value = std::stod(val, &used);
            if (used != val.size()) throw std::invalid_argument("trailing characters");
        } catch (const std::exception&) {
            throw SpecError(origin + ": line " + std::to_string(line_no) + ": malformed row '" +
                            line + "'");
        }
        if (s.counter.empty())
            throw SpecError(origin + ": line " + std::to_string(line_no) + ": empty counter name");
        out.push_back(std::move(s));
    }
    return out;
}

std::vector<CounterSample> load_counter_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw SpecError(path + ": cannot open counter file");
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return parse_counter_csv(text, path);
}

void save_counter_csv(const std::string& path, const std::vector<CounterSample>& samples) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw SpecError(path + ": cannot open for writing");
    std::ostringstream body;
    body.precision(17);
    body << "timestamp_s,counter,value\n";
    for (const CounterSample& s : samples)
        body << s.timestamp_s << "," << s.counter << "," << s.value << "\n";
    f << body.str();
    if (!f) throw SpecError(path + ": write failed");
}

std::vector<CounterSample> filter_counter(const std::vector<CounterSample>& samples,
                                          const std::string& name) {
    std::vector<CounterSample> out;
    for (const CounterSample& s : samples) {
        if (s.counter != name) continue;
        if (!out.empty() && s.timestamp_s < out.back().timestamp_s)
            throw SpecError("counter '" + name + "' timestamps go backwards at " +
                            std::to_string(s.timestamp_s));
        out.push_back(s);
    }
    return out;
}

std::pair<double, double> speedup_efficiency(double serial_time, double parallel_time,
                                             int worker_count) {
    if (!(serial_time > 0)) throw SpecError("serial time must be positive");
    if (!(parallel_time > 0)) throw SpecError("parallel time must be positive");
    if (worker_count < 1) throw SpecError("worker_count must be at least 1");
    const double sp = serial_time / parallel_time;
    return {sp, sp / worker_count};
}

double greenup(double serial_energy, double parallel_energy) {
    if (!(serial_energy > 0)) throw SpecError("serial energy must be positive");
    if (!(parallel_energy > 0)) throw SpecError("parallel energy must be positive");
    return serial_energy / parallel_energy;
}

double powerup(double speedup, double greenup) {
    if (!(speedup > 0)) throw SpecError("speedup must be positive");
    if (!(greenup > 0)) throw SpecError("greenup must be positive");
    return speedup / greenup;
}

std::vector<double> cpu_avg_power(const std::vector<CounterSample>& energy_samples,
                                  double sampling_frequency_hz) {
    if (energy_samples.size() < 2)
        throw SpecError("average power needs at least 2 cumulative energy samples");
    if (!(sampling_frequency_hz > 0)) throw SpecError("sampling frequency must be positive");
    std::vector<double> watts;
    watts.reserve(energy_samples.size() - 1);
    for (size_t i = 1; i < energy_samples.size(); ++i) {
        const double delta = energy_samples[i].value - energy_samples[i - 1].value;
        if (delta < 0)
            throw SpecError("cumulative energy counter decreases at sample " + std::to_string(i) +
                            " (corrupt trace)");
        watts.push_back(delta * sampling_frequency_hz);
    }
    return watts;
}

UsageSeries cpu_avg_usage(const std::vector<double>& user_deltas,
                          const std::vector<double>& kernel_deltas,
                          const std::vector<double>& total_deltas) {
    if (user_deltas.size() != kernel_deltas.size() || user_deltas.size() != total_deltas.size())
        throw SpecError("tick delta series must have equal lengths");
    UsageSeries out;
    for (size_t i = 0; i < total_deltas.size(); ++i) {
        if (total_deltas[i] == 0) {
            out.warnings.push_back("interval " + std::to_string(i) +
                                   ": zero total-tick delta, skipped");
            continue;
        }
        double u = (user_deltas[i] + kernel_deltas[i]) / total_deltas[i];
        if (u < 0 || u > 1) {
            std::ostringstream w;
            w << "interval " << i << ": utilization " << u << " clamped to [0,1]";
            out.warnings.push_back(w.str());
            u = std::clamp(u, 0.0, 1.0);
        }
        out.usage.push_back(u);
    }
    return out;
}

double energy_integrate(const std::vector<PowerSample>& samples) {
    if (samples.size() < 2)
        throw SpecError("energy integration needs at least 2 power samples");
    double joules = 0.0;
    for (size_t i = 1; i < samples.size(); ++i) {
        const double dt = samples[i].timestamp_s - samples[i - 1].timestamp_s;
        if (dt < 0)
            throw SpecError("power samples out of order at index " + std::to_string(i));
        joules += 0.5 * (samples[i].watts + samples[i - 1].watts) * dt;
    }
    return joules;
}

std::vector<PowerSample> synthetic_power_model(const std::vector<TraceEvent>& trace,
                                               double idle_watts,
                                               double active_watts_per_worker) {
    if (idle_watts < 0 || active_watts_per_worker < 0)
        throw SpecError("power model wattages must be non-negative");
    std::map<double, int> change;  // net busy-count change per instant
    double end = 0.0;
    for (const TraceEvent& e : trace) {
        if (e.timestamp_s < 0) throw SpecError("trace timestamps must be non-negative");
        end = std::max(end, e.timestamp_s);
        if (e.kind == TraceEventKind::TaskStart) change[e.timestamp_s] += 1;
        if (e.kind == TraceEventKind::TaskEnd) change[e.timestamp_s] -= 1;
    }

    auto power = [&](int busy) { return idle_watts + active_watts_per_worker * busy; };
    int busy = 0;
    auto it = change.begin();
    while (it != change.end() && it->first <= 0.0) {
        busy += it->second;
        ++it;
    }
    std::vector<PowerSample> out;
    out.push_back({0.0, power(busy)});
    for (; it != change.end(); ++it) {
        if (it->second == 0) continue;  // back-to-back start/end, no level change
        out.push_back({it->first, power(busy)});
        busy += it->second;
        out.push_back({it->first, power(busy)});
    }
    if (end > out.back().timestamp_s) out.push_back({end, power(busy)});
    if (out.size() < 2) out.push_back(out.back());  // degenerate zero-length run
    return out;
}

std::vector<TaskSpan> task_spans_from_trace(const std::vector<TraceEvent>& trace) {
    std::map<int, TaskSpan> open;
    std::vector<TaskSpan> done;
    for (const TraceEvent& e : trace) {
        if (e.kind == TraceEventKind::TaskStart) {
            if (open.count(e.task_id))
                throw SpecError("task " + std::to_string(e.task_id) + " started twice");
            open[e.task_id] = {e.task_id, e.worker_id, e.timestamp_s, e.timestamp_s};
        } else if (e.kind == TraceEventKind::TaskEnd) {
            auto it = open.find(e.task_id);
            if (it == open.end())
                throw SpecError("task " + std::to_string(e.task_id) + " ended without starting");
            it->second.end_s = e.timestamp_s;
            done.push_back(it->second);
            open.erase(it);
        }
    }
    if (!open.empty())
        throw SpecError("task " + std::to_string(open.begin()->first) + " never ended");
    std::sort(done.begin(), done.end(),
              [](const TaskSpan& a, const TaskSpan& b) { return a.task_id < b.task_id; });
    return done;
}

MetricsReport build_metrics_report(double serial_time, double parallel_time, int worker_count,
                                   double serial_energy, double parallel_energy,
                                   const std::vector<TraceEvent>& trace) {
    MetricsReport r;
    r.serial_time = serial_time;
    r.parallel_time = parallel_time;
    r.worker_count = worker_count;
    std::tie(r.speedup, r.efficiency) = speedup_efficiency(serial_time, parallel_time,
                                                           worker_count);
    r.serial_energy = serial_energy;
    r.parallel_energy = parallel_energy;
    r.greenup = greenup(serial_energy, parallel_energy);
    r.powerup = powerup(r.speedup, r.greenup);
    r.task_spans = task_spans_from_trace(trace);

    std::map<int, double> busy;
    for (const TaskSpan& s : r.task_spans) busy[s.worker_id] += s.end_s - s.start_s;
    for (int w = 0; w < worker_count; ++w) {
        WorkerBusy wb;
        wb.worker_id = w;
        wb.busy_s = busy.count(w) ? busy[w] : 0.0;
        wb.busy_fraction = parallel_time > 0 ? wb.busy_s / parallel_time : 0.0;
        r.worker_busy.push_back(wb);
    }
    return r;
}

std::string metrics_report_json(const MetricsReport& report) {
    nlohmann::json j;
    j["serial_time_s"] = report.serial_time;
    j["parallel_time_s"] = report.parallel_time;
    j["speedup"] = report.speedup;
    j["efficiency"] = report.efficiency;
    j["serial_energy_j"] = report.serial_energy;
    j["parallel_energy_j"] = report.parallel_energy;
    j["greenup"] = report.greenup;
    j["powerup"] = report.powerup;
    j["powerup_note"] = "derived metric: speedup / greenup";
    j["worker_count"] = report.worker_count;
    j["worker_busy"] = nlohmann::json::array();
    for (const WorkerBusy& w : report.worker_busy)
        j["worker_busy"].push_back({{"worker_id", w.worker_id},
                                    {"busy_s", w.busy_s},
                                    {"busy_fraction", w.busy_fraction}});
    j["task_spans"] = nlohmann::json::array();
    for (const TaskSpan& s : report.task_spans)
        j["task_spans"].push_back({{"task_id", s.task_id},
                                   {"worker_id", s.worker_id},
                                   {"start_s", s.start_s},
                                   {"end_s", s.end_s}});
    return j.dump(2);
}

void save_task_timeline_csv(const std::string& path, const std::vector<TaskSpan>& spans) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw SpecError(path + ": cannot open for writing");
    std::ostringstream body;
    body.precision(17);
    body << "task_id,worker_id,start_s,end_s\n";
    for (const TaskSpan& s : spans)
        body << s.task_id << "," << s.worker_id << "," << s.start_s << "," << s.end_s << "\n";
    f << body.str();
    if (!f) throw SpecError(path + ": write failed");
}

}  // namespace pbkd
