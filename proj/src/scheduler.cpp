#include "pbkd/scheduler.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

namespace pbkd {

namespace {

void check_weights(const std::vector<TaskWeight>& weights) {
    std::set<int> ids;
    for (const TaskWeight& t : weights) {
        if (!(t.weight > 0))
            throw SpecError("task " + std::to_string(t.task_id) + " has non-positive weight " +
                            std::to_string(t.weight));
        if (!ids.insert(t.task_id).second)
            throw SpecError("duplicate task id " + std::to_string(t.task_id));
    }
}

}  // namespace

const char* schedule_policy_name(SchedulePolicy p) {
    switch (p) {
        case SchedulePolicy::RoundRobin: return "round_robin";
        case SchedulePolicy::WFD: return "wfd";
        case SchedulePolicy::WorkStealing: return "work_stealing";
    }
    return "unknown";
}

SchedulePolicy schedule_policy_from_name(const std::string& name) {
    if (name == "round_robin") return SchedulePolicy::RoundRobin;
    if (name == "wfd") return SchedulePolicy::WFD;
    if (name == "work_stealing") return SchedulePolicy::WorkStealing;
    throw SpecError("unknown scheduling policy '" + name +
                    "' (expected round_robin, wfd, or work_stealing)");
}

SchedulePlan round_robin(const std::vector<int>& task_ids, int worker_count) {
    if (worker_count < 1) throw SpecError("worker_count must be at least 1");
    std::set<int> seen;
    for (int id : task_ids)
        if (!seen.insert(id).second) throw SpecError("duplicate task id " + std::to_string(id));
    SchedulePlan plan;
    plan.worker_count = worker_count;
    plan.policy = SchedulePolicy::RoundRobin;
    plan.assignments.assign(static_cast<size_t>(worker_count), {});
    for (size_t i = 0; i < task_ids.size(); ++i)
        plan.assignments[i % static_cast<size_t>(worker_count)].push_back(task_ids[i]);
    return plan;
}

SchedulePlan wfd_bin_pack(const std::vector<TaskWeight>& weights, int worker_count) {
    if (worker_count < 1) throw SpecError("worker_count must be at least 1");
    check_weights(weights);

    std::vector<TaskWeight> order = weights;
    std::stable_sort(order.begin(), order.end(), [](const TaskWeight& a, const TaskWeight& b) {
        if (a.weight != b.weight) return a.weight > b.weight;
        return a.task_id < b.task_id;
    });

    SchedulePlan plan;
    plan.worker_count = worker_count;
    plan.policy = SchedulePolicy::WFD;
    plan.assignments.assign(static_cast<size_t>(worker_count), {});
    std::vector<double> load(static_cast<size_t>(worker_count), 0.0);
    for (const TaskWeight& t : order) {
        size_t bin = 0;
        for (size_t w = 1; w < load.size(); ++w)
            if (load[w] < load[bin]) bin = w;
        plan.assignments[bin].push_back(t.task_id);
        load[bin] += t.weight;
    }
    plan.predicted_makespan = *std::max_element(load.begin(), load.end());
    return plan;
}

double makespan(const SchedulePlan& plan, const std::vector<TaskWeight>& weights) {
    std::vector<std::pair<int, double>> lookup;
    lookup.reserve(weights.size());
    for (const TaskWeight& t : weights) lookup.emplace_back(t.task_id, t.weight);
    std::sort(lookup.begin(), lookup.end());

    double worst = 0.0;
    for (const std::vector<int>& tasks : plan.assignments) {
        double sum = 0.0;
        for (int id : tasks) {
            auto it = std::lower_bound(lookup.begin(), lookup.end(),
                                       std::make_pair(id, -std::numeric_limits<double>::max()));
            if (it == lookup.end() || it->first != id)
                throw SpecError("task " + std::to_string(id) + " in the plan has no weight");
            sum += it->second;
        }
        worst = std::max(worst, sum);
    }
    return worst;
}

namespace {

struct BruteState {
    const std::vector<double>* weights = nullptr;
    std::vector<double> load;
    std::vector<double> suffix_max;  // largest remaining weight from position i on
    double best = std::numeric_limits<double>::max();

    void place(size_t i) {
        if (i == weights->size()) {
            best = std::min(best, *std::max_element(load.begin(), load.end()));
            return;
        }
        const double w = (*weights)[i];
        // Any completion is at least the largest remaining single weight.
        bool tried_empty = false;
        for (size_t b = 0; b < load.size(); ++b) {
            if (load[b] == 0.0) {
                if (tried_empty) continue;  // empty bins are interchangeable
                tried_empty = true;
            }
            if (load[b] + w >= best) continue;
            load[b] += w;
            if (std::max(load[b], suffix_max[i + 1]) < best) place(i + 1);
            load[b] -= w;
        }
    }
};

}  // namespace

double brute_force_schedule(const std::vector<TaskWeight>& weights, int worker_count) {
    if (worker_count < 1) throw SpecError("worker_count must be at least 1");
    if (weights.size() > 14)
        throw SpecError("exhaustive search is limited to 14 tasks, got " +
                        std::to_string(weights.size()));
    if (worker_count > 4)
        throw SpecError("exhaustive search is limited to 4 workers, got " +
                        std::to_string(worker_count));
    check_weights(weights);
    if (weights.empty()) return 0.0;

    std::vector<double> w;
    w.reserve(weights.size());
    for (const TaskWeight& t : weights) w.push_back(t.weight);
    std::sort(w.begin(), w.end(), std::greater<>());  // big items first prune hardest

    BruteState st;
    st.weights = &w;
    st.load.assign(static_cast<size_t>(worker_count), 0.0);
    st.suffix_max.assign(w.size() + 1, 0.0);
    for (size_t i = w.size(); i-- > 0;) st.suffix_max[i] = std::max(st.suffix_max[i + 1], w[i]);
    // Seed the bound with the greedy LPT solution so pruning bites early.
    {
        std::vector<double> load(static_cast<size_t>(worker_count), 0.0);
        for (double x : w) {
            size_t bin = 0;
            for (size_t b = 1; b < load.size(); ++b)
                if (load[b] < load[bin]) bin = b;
            load[bin] += x;
        }
        st.best = *std::max_element(load.begin(), load.end());
    }
    st.place(0);
    return st.best;
}

std::vector<TaskWeight> parse_profile_csv(const std::string& text, const std::string& origin) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line)) throw SpecError(origin + ": empty profile file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "task_id,weight_seconds")
        throw SpecError(origin + ": line 1: expected header 'task_id,weight_seconds', got '" +
                        line + "'");

    std::vector<TaskWeight> out;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const size_t comma = line.find(',');
        if (comma == std::string::npos)
            throw SpecError(origin + ": line " + std::to_string(line_no) + ": expected 2 fields");
        TaskWeight t;
        try {
            size_t used = 0;
            t.task_id = std::stoi(line.substr(0, comma), &used);
            if (used != comma) throw std::invalid_argument("trailing characters");
            const std::string rest = line.substr(comma + 1);
            t.weight = std::stod(rest, &used);
            if (used != rest.size()) throw std::invalid_argument("trailing characters");
        } catch (const std::exception&) {
            throw SpecError(origin + ": line " + std::to_string(line_no) + ": malformed row '" +
                            line + "'");
        }
        if (!(t.weight > 0))
            throw SpecError(origin + ": line " + std::to_string(line_no) +
                            ": weight must be positive");
        out.push_back(t);
    }
    check_weights(out);
    return out;
}

std::vector<TaskWeight> load_profile_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw SpecError(path + ": cannot open profile");
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return parse_profile_csv(text, path);
}

void save_profile_csv(const std::string& path, const std::vector<TaskWeight>& weights) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw SpecError(path + ": cannot open for writing");
    f << "task_id,weight_seconds\n";
    std::ostringstream body;
    body.precision(17);
    for (const TaskWeight& t : weights) body << t.task_id << "," << t.weight << "\n";
    f << body.str();
    if (!f) throw SpecError(path + ": write failed");
}

}  // namespace pbkd
