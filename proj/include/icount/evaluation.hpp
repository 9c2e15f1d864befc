#pragma once

#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "icount/data.hpp"
#include "icount/methods.hpp"
#include "icount/metrics.hpp"
#include "icount/network.hpp"

namespace icount {

/// Predicted counts for every sample of one split with head tau.
template <typename T>
std::vector<PredictionRecord> predict_split(const ModelState<T>& state, std::size_t tau,
                                            std::span<const Sample> samples, std::size_t chunk = 16) {
  std::vector<PredictionRecord> out;
  std::size_t begin = 0;
  while (begin < samples.size()) {
    std::size_t end = begin + 1;
    while (end < samples.size() && end - begin < chunk && samples[end].image.height == samples[begin].image.height &&
           samples[end].image.width == samples[begin].image.width) {
      ++end;
    }
    const auto inference = infer_task(make_image_batch<T>(samples.subspan(begin, end - begin)), tau, state);
    for (std::size_t i = begin; i < end; ++i) {
      out.push_back({tau, samples[i].id, inference.counts[i - begin], static_cast<double>(samples[i].points.size())});
    }
    begin = end;
  }
  return out;
}

/// Row of the evaluation matrix after task t_eval: metrics on test sets 1..t_eval.
template <typename T>
EvalRow sequence_eval(const ModelState<T>& state, std::span<const TaskDataset> tasks, std::size_t t_eval) {
  if (t_eval == 0 || t_eval > state.completed_tasks()) {
    throw std::invalid_argument("cannot evaluate after task " + std::to_string(t_eval) + ": " +
                                std::to_string(state.completed_tasks()) + " tasks completed");
  }
  if (tasks.size() < t_eval) throw std::invalid_argument("missing test set for task " + std::to_string(tasks.size() + 1));
  EvalRow row;
  row.after_task = t_eval;
  for (std::size_t tau = 1; tau <= t_eval; ++tau) {
    const auto& test = tasks[tau - 1].test;
    if (test.empty()) throw std::invalid_argument("test set of task " + std::to_string(tau) + " is empty");
    row.tasks.push_back(task_metrics(tau, tasks[tau - 1].class_name, predict_split(state, tau, test)));
  }
  return row;
}

inline nlohmann::json report_to_json(const MetricsReport& report) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : report.rows) {
    nlohmann::json tasks = nlohmann::json::array();
    for (const auto& t : row.tasks) {
      tasks.push_back({{"task", t.task},
                       {"class", t.class_name},
                       {"rmse", t.rmse},
                       {"mae", t.mae},
                       {"nae", t.nae},
                       {"samples", t.samples},
                       {"excluded_from_nae", t.excluded_from_nae}});
    }
    rows.push_back({{"after_task", row.after_task}, {"tasks", tasks}});
  }
  return rows;
}

inline MetricsReport report_from_json(const nlohmann::json& j) {
  MetricsReport report;
  for (const auto& r : j) {
    EvalRow row;
    row.after_task = r.at("after_task").get<std::size_t>();
    for (const auto& t : r.at("tasks")) {
      TaskMetrics m;
      m.task = t.at("task").get<std::size_t>();
      m.class_name = t.at("class").get<std::string>();
      m.rmse = t.at("rmse").get<double>();
      m.mae = t.at("mae").get<double>();
      m.nae = t.at("nae").get<double>();
      m.samples = t.at("samples").get<std::size_t>();
      m.excluded_from_nae = t.at("excluded_from_nae").get<std::vector<std::string>>();
      row.tasks.push_back(std::move(m));
    }
    report.rows.push_back(std::move(row));
  }
  return report;
}

}  // namespace icount
