#pragma once

#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace icount {

struct PredictionRecord {
  std::size_t task = 0;
  std::string sample_id;
  double predicted = 0.0;
  double truth = 0.0;
};

class MetricError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

inline void require_records(const std::vector<PredictionRecord>& records, const char* metric) {
  if (records.empty()) throw MetricError(std::string(metric) + ": no records");
}

}  // namespace detail

inline double rmse(const std::vector<PredictionRecord>& records) {
  detail::require_records(records, "rmse");
  double acc = 0.0;
  for (const auto& r : records) acc += (r.predicted - r.truth) * (r.predicted - r.truth);
  return std::sqrt(acc / static_cast<double>(records.size()));
}

inline double mae(const std::vector<PredictionRecord>& records) {
  detail::require_records(records, "mae");
  double acc = 0.0;
  for (const auto& r : records) acc += std::abs(r.predicted - r.truth);
  return acc / static_cast<double>(records.size());
}

/// Mean of |y_hat - y| / y. Every y must be positive.
inline double nae(const std::vector<PredictionRecord>& records) {
  detail::require_records(records, "nae");
  double acc = 0.0;
  for (const auto& r : records) {
    if (!(r.truth > 0.0)) throw MetricError("nae: sample '" + r.sample_id + "' has zero ground-truth count");
    acc += std::abs(r.predicted - r.truth) / r.truth;
  }
  return acc / static_cast<double>(records.size());
}

inline double avg_nae(const std::vector<double>& per_task) {
  if (per_task.empty()) throw MetricError("avg_nae: no tasks");
  return std::accumulate(per_task.begin(), per_task.end(), 0.0) / static_cast<double>(per_task.size());
}

struct TaskMetrics {
  std::size_t task = 0;
  std::string class_name;
  double rmse = 0.0;
  double mae = 0.0;
  double nae = 0.0;
  std::size_t samples = 0;
  std::vector<std::string> excluded_from_nae;  // ids with zero ground truth
};

/// Metrics for one task's records; zero-count samples are left out of NAE
/// (and listed) instead of failing the whole evaluation.
inline TaskMetrics task_metrics(std::size_t task, const std::string& class_name,
                                const std::vector<PredictionRecord>& records) {
  TaskMetrics m;
  m.task = task;
  m.class_name = class_name;
  m.samples = records.size();
  m.rmse = rmse(records);
  m.mae = mae(records);
  std::vector<PredictionRecord> positive;
  for (const auto& r : records) {
    if (r.truth > 0.0) {
      positive.push_back(r);
    } else {
      m.excluded_from_nae.push_back(r.sample_id);
    }
  }
  m.nae = positive.empty() ? 0.0 : nae(positive);
  return m;
}

/// Row of the after-each-task matrix: metrics on tasks 1..t_eval after
/// training task t_eval.
struct EvalRow {
  std::size_t after_task = 0;
  std::vector<TaskMetrics> tasks;

  std::vector<double> naes() const {
    std::vector<double> out;
    for (const auto& t : tasks) out.push_back(t.nae);
    return out;
  }
  double average_nae() const { return avg_nae(naes()); }
};

struct MetricsReport {
  std::vector<EvalRow> rows;  // rows[t-1] evaluated after task t

  /// NAE of task tau (1-based) after task t (1-based).
  double nae_at(std::size_t t, std::size_t tau) const { return rows.at(t - 1).tasks.at(tau - 1).nae; }
  const EvalRow& final_row() const { return rows.back(); }
};

namespace detail {

inline std::string fmt(double v, int precision) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << v;
  return os.str();
}

inline std::string exact(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace detail

/// Long-format CSV: after_task, task, class, metric, value.
inline std::string curve_csv(const MetricsReport& report) {
  std::ostringstream os;
  os << "after_task,task,class,rmse,mae,nae\n";
  for (const auto& row : report.rows) {
    for (const auto& t : row.tasks) {
      os << row.after_task << ',' << t.task << ',' << t.class_name << ',' << detail::exact(t.rmse) << ','
         << detail::exact(t.mae) << ',' << detail::exact(t.nae) << '\n';
    }
  }
  return os.str();
}

/// One row per (after_task, task, metric).
inline std::string metrics_long_csv(const MetricsReport& report) {
  std::ostringstream os;
  os << "after_task,task,metric,value\n";
  for (const auto& row : report.rows) {
    for (const auto& t : row.tasks) {
      os << row.after_task << ',' << t.task << ",rmse," << detail::exact(t.rmse) << '\n';
      os << row.after_task << ',' << t.task << ",mae," << detail::exact(t.mae) << '\n';
      os << row.after_task << ',' << t.task << ",nae," << detail::exact(t.nae) << '\n';
    }
  }
  return os.str();
}

/// Final-row summary: per task MSE (reported as RMSE), MAE, NAE, then Avg NAE.
inline std::string summary_csv(const MetricsReport& report, const std::string& method) {
  const auto& row = report.final_row();
  std::ostringstream os;
  os << "method";
  for (const auto& t : row.tasks) os << ',' << t.class_name << "_mse," << t.class_name << "_mae," << t.class_name << "_nae";
  os << ",avg_nae\n" << method;
  for (const auto& t : row.tasks) {
    os << ',' << detail::exact(t.rmse) << ',' << detail::exact(t.mae) << ',' << detail::exact(t.nae);
  }
  os << ',' << detail::exact(row.average_nae()) << '\n';
  return os.str();
}

inline std::string summary_markdown(const MetricsReport& report, const std::string& method) {
  const auto& row = report.final_row();
  std::ostringstream os;
  os << "| Dataset |";
  for (const auto& t : row.tasks) os << ' ' << t.class_name << " | | |";
  os << " Avg |\n|---|";
  for (std::size_t i = 0; i < row.tasks.size(); ++i) os << "---|---|---|";
  os << "---|\n| Metric |";
  for (std::size_t i = 0; i < row.tasks.size(); ++i) os << " MSE | MAE | NAE |";
  os << " NAE |\n| " << method << " |";
  for (const auto& t : row.tasks) {
    os << ' ' << detail::fmt(t.rmse, 2) << " | " << detail::fmt(t.mae, 2) << " | " << detail::fmt(t.nae, 3) << " |";
  }
  os << ' ' << detail::fmt(row.average_nae(), 3) << " |\n";
  return os.str();
}

}  // namespace icount
