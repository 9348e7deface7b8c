#pragma once

#include <string>
#include <vector>

#include "pbkd/model.hpp"  // SpecError

namespace pbkd {

struct TaskWeight {
    int task_id = 0;
    double weight = 0.0;  // predicted runtime in seconds or abstract cost units
};

enum class SchedulePolicy { RoundRobin, WFD, WorkStealing };

const char* schedule_policy_name(SchedulePolicy p);
SchedulePolicy schedule_policy_from_name(const std::string& name);  // throws SpecError

struct SchedulePlan {
    std::vector<std::vector<int>> assignments;  // per-worker ordered task ids
    int worker_count = 0;
    SchedulePolicy policy = SchedulePolicy::RoundRobin;
    double predicted_makespan = 0.0;  // max per-worker weight sum; 0 when weights unknown
};

// Task i goes to worker i % worker_count, preserving order. Weight-blind, so
// predicted_makespan is left for makespan() to fill in.
SchedulePlan round_robin(const std::vector<int>& task_ids, int worker_count);

// Worst Fit Decreasing: stable-sort by weight descending (ties by ascending
// task id), place each task into the currently least-loaded worker (ties by
// lowest worker index).
SchedulePlan wfd_bin_pack(const std::vector<TaskWeight>& weights, int worker_count);

// Max over workers of the sum of assigned task weights. Every task in the
// plan must have a weight.
double makespan(const SchedulePlan& plan, const std::vector<TaskWeight>& weights);

// Minimum achievable makespan by exhaustive branch-and-bound. Only for small
// instances: task count <= 14, worker_count <= 4.
double brute_force_schedule(const std::vector<TaskWeight>& weights, int worker_count);

// Runtime profile file: CSV with header `task_id,weight_seconds`.
std::vector<TaskWeight> load_profile_csv(const std::string& path);
void save_profile_csv(const std::string& path, const std::vector<TaskWeight>& weights);
std::vector<TaskWeight> parse_profile_csv(const std::string& text, const std::string& origin);

}  // namespace pbkd
