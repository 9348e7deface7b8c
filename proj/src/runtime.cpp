#include "pbkd/runtime.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <deque>
#include <fstream>
#include <map>
#include <mutex>
#include <queue>
#include <random>
#include <sstream>
#include <thread>
#include <tuple>

namespace pbkd {

namespace {

std::map<int, double> weight_lookup(const std::vector<TaskWeight>& weights) {
    std::map<int, double> by_id;
    for (const TaskWeight& t : weights) {
        if (!(t.weight > 0))
            throw SpecError("task " + std::to_string(t.task_id) + " has non-positive weight");
        if (!by_id.emplace(t.task_id, t.weight).second)
            throw SpecError("duplicate task id " + std::to_string(t.task_id));
    }
    return by_id;
}

void validate_plan_shape(const SchedulePlan& plan) {
    if (plan.worker_count < 1) throw SpecError("worker_count must be at least 1");
    if (plan.assignments.size() != static_cast<size_t>(plan.worker_count))
        throw SpecError("plan has " + std::to_string(plan.assignments.size()) +
                        " worker lists for worker_count " + std::to_string(plan.worker_count));
}

}  // namespace

const char* trace_event_kind_name(TraceEventKind k) {
    switch (k) {
        case TraceEventKind::Dispatch: return "dispatch";
        case TraceEventKind::TaskStart: return "task_start";
        case TraceEventKind::TaskEnd: return "task_end";
        case TraceEventKind::Steal: return "steal";
        case TraceEventKind::Gather: return "gather";
    }
    return "unknown";
}

TraceEventKind trace_event_kind_from_name(const std::string& name) {
    if (name == "dispatch") return TraceEventKind::Dispatch;
    if (name == "task_start") return TraceEventKind::TaskStart;
    if (name == "task_end") return TraceEventKind::TaskEnd;
    if (name == "steal") return TraceEventKind::Steal;
    if (name == "gather") return TraceEventKind::Gather;
    throw SpecError("unknown trace event kind '" + name + "'");
}

void save_trace_csv(const std::string& path, const std::vector<TraceEvent>& trace) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw SpecError(path + ": cannot open for writing");
    std::ostringstream body;
    body.precision(17);
    body << "timestamp_s,worker_id,task_id,kind\n";
    for (const TraceEvent& e : trace)
        body << e.timestamp_s << "," << e.worker_id << "," << e.task_id << ","
             << trace_event_kind_name(e.kind) << "\n";
    f << body.str();
    if (!f) throw SpecError(path + ": write failed");
}

std::vector<TraceEvent> parse_trace_csv(const std::string& text, const std::string& origin) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line)) throw SpecError(origin + ": empty trace file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "timestamp_s,worker_id,task_id,kind")
        throw SpecError(origin + ": line 1: expected header 'timestamp_s,worker_id,task_id,kind'");

    std::vector<TraceEvent> out;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::array<std::string, 4> field;
        size_t at = 0;
        for (int i = 0; i < 3; ++i) {
            const size_t comma = line.find(',', at);
            if (comma == std::string::npos)
                throw SpecError(origin + ": line " + std::to_string(line_no) +
                                ": expected 4 fields");
            field[static_cast<size_t>(i)] = line.substr(at, comma - at);
            at = comma + 1;
        }
        field[3] = line.substr(at);
        TraceEvent e;
        try {
            size_t used = 0;
            e.timestamp_s = std::stod(field[0], &used);
            if (used != field[0].size()) throw std::invalid_argument("trailing characters");
            e.worker_id = std::stoi(field[1], &used);
            if (used != field[1].size()) throw std::invalid_argument("trailing characters");
            e.task_id = std::stoi(field[2], &used);
            if (used != field[2].size()) throw std::invalid_argument("trailing characters");
        } catch (const std::exception&) {
            throw SpecError(origin + ": line " + std::to_string(line_no) + ": malformed row '" +
                            line + "'");
        }
        e.kind = trace_event_kind_from_name(field[3]);
        out.push_back(e);
    }
    return out;
}

std::vector<TraceEvent> load_trace_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw SpecError(path + ": cannot open trace");
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return parse_trace_csv(text, path);
}

RunParallelResult run_parallel(const Network& teacher, const Dataset& data,
                               const SplitIndices& split, const std::vector<DistillTask>& tasks,
                               const SchedulePlan& plan) {
    validate_plan_shape(plan);

    std::map<int, size_t> task_by_id;
    for (size_t i = 0; i < tasks.size(); ++i)
        if (!task_by_id.emplace(tasks[i].block_index, i).second)
            throw SpecError("two tasks reference block " + std::to_string(tasks[i].block_index));

    struct WorkerQueue {
        std::deque<size_t> q;
        std::mutex m;
    };
    std::vector<WorkerQueue> queues(static_cast<size_t>(plan.worker_count));
    size_t planned = 0;
    {
        std::map<int, int> seen;
        for (size_t w = 0; w < plan.assignments.size(); ++w) {
            for (int id : plan.assignments[w]) {
                auto it = task_by_id.find(id);
                if (it == task_by_id.end())
                    throw SpecError("plan references unknown task id " + std::to_string(id));
                if (++seen[id] > 1)
                    throw SpecError("plan assigns task " + std::to_string(id) + " twice");
                queues[w].q.push_back(it->second);
                ++planned;
            }
        }
    }
    if (planned != tasks.size())
        throw SpecError("plan covers " + std::to_string(planned) + " of " +
                        std::to_string(tasks.size()) + " tasks");

    RunParallelResult out;
    out.results.resize(tasks.size());
    std::mutex trace_mutex;
    const auto t0 = std::chrono::steady_clock::now();
    auto add_event = [&](TraceEventKind kind, int worker, int task) {
        std::lock_guard<std::mutex> lk(trace_mutex);
        TraceEvent e;
        e.timestamp_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        e.worker_id = worker;
        e.task_id = task;
        e.kind = kind;
        out.trace.push_back(e);
    };

    // Sync point 1: dispatch. Initial assignments are fixed before any
    // worker starts; this is the only broadcast.
    for (size_t w = 0; w < queues.size(); ++w)
        for (size_t ti : queues[w].q)
            add_event(TraceEventKind::Dispatch, static_cast<int>(w), tasks[ti].block_index);

    const bool stealing = plan.policy == SchedulePolicy::WorkStealing;
    auto worker_fn = [&](int w) {
        for (;;) {
            size_t ti = 0;
            bool have = false;
            {
                // Owners consume their own queue from the head.
                std::lock_guard<std::mutex> lk(queues[static_cast<size_t>(w)].m);
                auto& q = queues[static_cast<size_t>(w)].q;
                if (!q.empty()) {
                    ti = q.front();
                    q.pop_front();
                    have = true;
                }
            }
            if (!have && stealing) {
                // Thieves scan in index order and take from the tail.
                for (int v = 0; v < plan.worker_count && !have; ++v) {
                    if (v == w) continue;
                    std::lock_guard<std::mutex> lk(queues[static_cast<size_t>(v)].m);
                    auto& q = queues[static_cast<size_t>(v)].q;
                    if (!q.empty()) {
                        ti = q.back();
                        q.pop_back();
                        have = true;
                        add_event(TraceEventKind::Steal, w, tasks[ti].block_index);
                    }
                }
            }
            if (!have) return;  // queues only drain, so nothing can appear later

            const int id = tasks[ti].block_index;
            add_event(TraceEventKind::TaskStart, w, id);
            TrainedBlockResult r;
            try {
                r = train_block(teacher, tasks[ti], data, split);
            } catch (const std::exception& e) {
                r = TrainedBlockResult{};
                r.block_index = id;
                r.kind = candidate_kind_name(tasks[ti].kind);
                r.failed = true;
                r.failure = e.what();
            }
            add_event(TraceEventKind::TaskEnd, w, id);
            out.results[ti] = std::move(r);
        }
    };

    if (plan.worker_count == 1) {
        worker_fn(0);
    } else {
        std::vector<std::thread> pool;
        pool.reserve(static_cast<size_t>(plan.worker_count));
        for (int w = 0; w < plan.worker_count; ++w) pool.emplace_back(worker_fn, w);
        for (std::thread& t : pool) t.join();
    }

    // Sync point 2: gather everything at one collector, in task-id order.
    add_event(TraceEventKind::Gather, 0, -1);
    out.wall_time_s = out.trace.back().timestamp_s;
    std::sort(out.results.begin(), out.results.end(),
              [](const TrainedBlockResult& a, const TrainedBlockResult& b) {
                  return a.block_index < b.block_index;
              });
    return out;
}

SimResult simulate_execution(const SchedulePlan& plan, const std::vector<TaskWeight>& weights,
                             const SimOptions& opts) {
    validate_plan_shape(plan);
    const std::map<int, double> weight_of = weight_lookup(weights);
    std::map<int, int> seen;
    for (const std::vector<int>& tasks : plan.assignments)
        for (int id : tasks) {
            if (!weight_of.count(id))
                throw SpecError("task " + std::to_string(id) + " in the plan has no weight");
            if (++seen[id] > 1)
                throw SpecError("plan assigns task " + std::to_string(id) + " twice");
        }

    SimResult out;
    for (size_t w = 0; w < plan.assignments.size(); ++w)
        for (int id : plan.assignments[w])
            out.trace.push_back({0.0, static_cast<int>(w), id, TraceEventKind::Dispatch});

    double wall = 0.0;
    if (plan.policy != SchedulePolicy::WorkStealing) {
        // Static plans: each worker runs its queue back to back.
        std::vector<TraceEvent> events;
        for (size_t w = 0; w < plan.assignments.size(); ++w) {
            double t = 0.0;
            for (int id : plan.assignments[w]) {
                const double dur = weight_of.at(id);
                events.push_back({t, static_cast<int>(w), id, TraceEventKind::TaskStart});
                events.push_back({t + dur, static_cast<int>(w), id, TraceEventKind::TaskEnd});
                t += dur;
            }
            wall = std::max(wall, t);
        }
        std::stable_sort(events.begin(), events.end(),
                         [](const TraceEvent& a, const TraceEvent& b) {
                             return a.timestamp_s < b.timestamp_s;
                         });
        out.trace.insert(out.trace.end(), events.begin(), events.end());
    } else {
        // Event-driven stealing. Owners pop their own head immediately;
        // an idle worker steals one task from a victim's tail and starts it
        // at the moment of the steal. Hesitation before a steal is safe:
        // while the task sits unstolen in its owner's queue the owner is
        // busy, so any stolen task still finishes within the serial total.
        std::mt19937_64 rng(opts.seed);
        std::vector<std::deque<int>> queues(plan.assignments.size());
        double max_weight = 0.0;
        for (size_t w = 0; w < plan.assignments.size(); ++w)
            for (int id : plan.assignments[w]) {
                queues[w].push_back(id);
                max_weight = std::max(max_weight, weight_of.at(id));
            }

        struct IdleEvent {
            double t;
            uint64_t priority;  // randomizes ordering of simultaneous wakeups
            uint64_t seq;
            int w;
        };
        auto later = [](const IdleEvent& a, const IdleEvent& b) {
            return std::tie(a.t, a.priority, a.seq) > std::tie(b.t, b.priority, b.seq);
        };
        std::priority_queue<IdleEvent, std::vector<IdleEvent>, decltype(later)> idle(later);
        uint64_t seq = 0;
        auto wake = [&](double t, int w) {
            idle.push({t, opts.randomized ? rng() : 0, seq++, w});
        };
        for (size_t w = 0; w < plan.assignments.size(); ++w) wake(0.0, static_cast<int>(w));

        std::vector<int> hesitations(plan.assignments.size(), 0);
        while (!idle.empty()) {
            const IdleEvent ev = idle.top();
            idle.pop();
            const int w = ev.w;
            auto& own = queues[static_cast<size_t>(w)];
            int task = -1;
            if (!own.empty()) {
                task = own.front();
                own.pop_front();
            } else {
                std::vector<int> victims;
                for (size_t v = 0; v < queues.size(); ++v)
                    if (static_cast<int>(v) != w && !queues[v].empty())
                        victims.push_back(static_cast<int>(v));
                if (victims.empty()) continue;  // nothing queued anywhere: retire

                if (opts.randomized && hesitations[static_cast<size_t>(w)] < 64 &&
                    (rng() & 1u) != 0) {
                    ++hesitations[static_cast<size_t>(w)];
                    std::uniform_real_distribution<double> lag(0.0, max_weight);
                    wake(ev.t + lag(rng), w);
                    continue;
                }
                hesitations[static_cast<size_t>(w)] = 0;

                int victim = victims[0];
                if (opts.randomized) {
                    std::uniform_int_distribution<size_t> pick(0, victims.size() - 1);
                    victim = victims[pick(rng)];
                } else {
                    // Deterministic rule: the victim with the largest
                    // remaining queued weight, ties to the lowest index.
                    double best = -1.0;
                    for (int v : victims) {
                        double sum = 0.0;
                        for (int id : queues[static_cast<size_t>(v)]) sum += weight_of.at(id);
                        if (sum > best) {
                            best = sum;
                            victim = v;
                        }
                    }
                }
                task = queues[static_cast<size_t>(victim)].back();
                queues[static_cast<size_t>(victim)].pop_back();
                out.trace.push_back({ev.t, w, task, TraceEventKind::Steal});
            }
            const double dur = weight_of.at(task);
            out.trace.push_back({ev.t, w, task, TraceEventKind::TaskStart});
            out.trace.push_back({ev.t + dur, w, task, TraceEventKind::TaskEnd});
            wall = std::max(wall, ev.t + dur);
            wake(ev.t + dur, w);
        }
        // Task end events were emitted at start time; restore time order.
        std::stable_sort(out.trace.begin(), out.trace.end(),
                         [](const TraceEvent& a, const TraceEvent& b) {
                             if (a.kind == TraceEventKind::Dispatch ||
                                 b.kind == TraceEventKind::Dispatch)
                                 return a.kind == TraceEventKind::Dispatch &&
                                        b.kind != TraceEventKind::Dispatch;
                             return a.timestamp_s < b.timestamp_s;
                         });
    }

    out.trace.push_back({wall, 0, -1, TraceEventKind::Gather});
    out.wall_time = wall;
    return out;
}

}  // namespace pbkd
