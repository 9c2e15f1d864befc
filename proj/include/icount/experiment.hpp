#pragma once

#include <fcntl.h>
#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "icount/checkpoint.hpp"
#include "icount/data.hpp"
#include "icount/evaluation.hpp"
#include "icount/methods.hpp"
#include "icount/metrics.hpp"
#include "icount/network.hpp"

namespace icount {

using nlohmann::json;

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Error raised inside the task loop; carries the failing task index.
class RunError : public std::runtime_error {
 public:
  RunError(std::size_t task, const std::string& what)
      : std::runtime_error("task " + std::to_string(task) + ": " + what), task_(task) {}
  std::size_t task() const { return task_; }

 private:
  std::size_t task_;
};

struct AnnotationPaths {
  std::string train;
  std::string test;
};

struct TaskSource {
  std::variant<SyntheticSpec, AnnotationPaths> source;
};

enum class Precision { Float64, Float32 };

struct ExperimentConfig {
  std::string output_dir = "runs/default";
  MethodConfig method;
  TrainSchedule schedule;
  NetworkConfig network;
  std::optional<std::size_t> head_depth;
  LossConfig loss;
  std::vector<TaskSource> sequence;
  Precision precision = Precision::Float64;
};

/// The default four-task shape benchmark: each task counts one shape/colour
/// class while the other classes appear unannotated.
inline std::vector<SyntheticSpec> default_sequence() {
  const std::vector<ShapeKind> shapes{ShapeKind::Disk, ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Ring};
  const std::vector<std::array<double, 3>> colors{{0.95, 0.35, 0.25}, {0.3, 0.85, 0.35}, {0.3, 0.45, 0.95}, {0.9, 0.85, 0.3}};
  std::vector<SyntheticSpec> out;
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    SyntheticSpec s;
    s.shape = shapes[i];
    s.color = colors[i];
    for (std::size_t j = 0; j < shapes.size(); ++j) {
      if (j == i) continue;
      s.distractors.push_back(shapes[j]);
      s.distractor_colors.push_back(colors[j]);
    }
    s.distractor_min = 2;
    s.distractor_max = 6;
    out.push_back(s);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Config parsing

namespace detail {

/// Reads keys of one JSON object and rejects any it did not consume.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  template <typename V>
  void get(const std::string& key, V& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<V>();
    } catch (const json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  bool has(const std::string& key) const { return j_.contains(key); }
  const json& at(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }
  void mark(const std::string& key) { seen_.insert(key); }
  std::string path(const std::string& key) const { return where_ + "." + key; }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError(where_ + ": unknown key '" + key + "'");
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

inline SyntheticSpec parse_synthetic(const json& j, const std::string& where, SyntheticSpec s) {
  ObjectReader r(j, where);
  std::string shape = to_string(s.shape);
  r.get("shape", shape);
  s.shape = parse_shape(shape);
  r.get("count_min", s.count_min);
  r.get("count_max", s.count_max);
  r.get("radius_min", s.radius_min);
  r.get("radius_max", s.radius_max);
  r.get("noise", s.noise);
  r.get("width", s.width);
  r.get("height", s.height);
  r.get("train_samples", s.train_samples);
  r.get("test_samples", s.test_samples);
  r.get("seed", s.seed);
  std::vector<std::string> distractors;
  for (auto d : s.distractors) distractors.push_back(to_string(d));
  if (r.has("distractors") && !r.has("distractor_colors")) s.distractor_colors.clear();
  r.get("distractors", distractors);
  s.distractors.clear();
  for (const auto& d : distractors) s.distractors.push_back(parse_shape(d));
  r.get("distractor_min", s.distractor_min);
  r.get("distractor_max", s.distractor_max);
  r.get("color", s.color);
  r.get("distractor_colors", s.distractor_colors);
  r.get("background", s.background);
  r.finish();
  try {
    s.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(where + ": " + e.what());
  }
  return s;
}

inline json synthetic_to_json(const SyntheticSpec& s) {
  std::vector<std::string> distractors;
  for (auto d : s.distractors) distractors.push_back(to_string(d));
  return {{"shape", to_string(s.shape)},
          {"count_min", s.count_min},
          {"count_max", s.count_max},
          {"radius_min", s.radius_min},
          {"radius_max", s.radius_max},
          {"noise", s.noise},
          {"width", s.width},
          {"height", s.height},
          {"train_samples", s.train_samples},
          {"test_samples", s.test_samples},
          {"seed", s.seed},
          {"distractors", distractors},
          {"distractor_min", s.distractor_min},
          {"distractor_max", s.distractor_max},
          {"color", s.color},
          {"distractor_colors", s.distractor_colors},
          {"background", s.background}};
}

inline std::uint64_t default_data_seed(std::uint64_t run_seed, std::size_t task) {
  return derive_seed(run_seed, 0xDA7A, task);
}

}  // namespace detail

/// Parses and validates a config. Missing keys take defaults; unknown keys
/// are errors.
inline ExperimentConfig parse_config(const json& j) {
  ExperimentConfig c;
  detail::ObjectReader top(j, "config");
  top.get("output_dir", c.output_dir);
  std::string precision = "float64";
  top.get("precision", precision);
  if (precision == "float64") {
    c.precision = Precision::Float64;
  } else if (precision == "float32") {
    c.precision = Precision::Float32;
  } else {
    throw ConfigError("config.precision: expected float64 or float32, got '" + precision + "'");
  }

  if (top.has("method")) {
    detail::ObjectReader r(top.at("method"), "config.method");
    std::string kind = to_string(c.method.kind);
    r.get("kind", kind);
    try {
      c.method.kind = parse_method(kind);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("config.method.kind: ") + e.what());
    }
    r.get("lambda", c.method.lambda);
    r.get("squared_l2", c.method.squared_l2);
    r.get("importance_decay", c.method.importance_decay);
    r.finish();
  }
  if (c.method.lambda < 0.0) throw ConfigError("config.method.lambda must be nonnegative");

  if (top.has("schedule")) {
    detail::ObjectReader r(top.at("schedule"), "config.schedule");
    r.get("epochs", c.schedule.epochs);
    r.get("batch_size", c.schedule.batch_size);
    r.get("seed", c.schedule.seed);
    r.get("crop", c.schedule.crop);
    r.get("flip_probability", c.schedule.flip_probability);
    r.get("head_output_bias", c.schedule.head_output_bias);
    r.get("learning_rate", c.schedule.optimizer.learning_rate);
    r.get("beta1", c.schedule.optimizer.beta1);
    r.get("beta2", c.schedule.optimizer.beta2);
    r.get("adam_epsilon", c.schedule.optimizer.epsilon);
    r.get("weight_decay", c.schedule.optimizer.weight_decay);
    r.finish();
  }
  try {
    c.schedule.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config.schedule: ") + e.what());
  }
  if (!(c.schedule.optimizer.learning_rate > 0.0)) throw ConfigError("config.schedule.learning_rate must be positive");

  if (top.has("network")) {
    detail::ObjectReader r(top.at("network"), "config.network");
    r.get("stride", c.network.stride);
    r.get("extractor_channels", c.network.extractor_channels);
    r.get("head_channels", c.network.head_channels);
    r.get("adaptor_bias", c.network.adaptor_bias);
    if (r.has("head_depth") && !r.at("head_depth").is_null()) {
      std::size_t d = 0;
      r.get("head_depth", d);
      c.head_depth = d;
    }
    r.mark("head_depth");
    r.finish();
  }
  try {
    c.network.validate();
    if (c.head_depth) c.network = with_head_depth(c.network, *c.head_depth);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config.network: ") + e.what());
  }

  if (top.has("loss")) {
    detail::ObjectReader r(top.at("loss"), "config.loss");
    r.get("lambda1", c.loss.lambda1);
    r.get("lambda2", c.loss.lambda2);
    r.get("ot_epsilon", c.loss.ot.epsilon);
    r.get("ot_iterations", c.loss.ot.max_iterations);
    r.get("ot_tolerance", c.loss.ot.tolerance);
    r.get("normalize_cost", c.loss.ot.normalize_cost);
    r.finish();
  }
  try {
    c.loss.ot.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config.loss: ") + e.what());
  }
  if (c.loss.lambda1 < 0.0 || c.loss.lambda2 < 0.0) throw ConfigError("config.loss: lambdas must be nonnegative");

  const auto defaults = default_sequence();
  if (top.has("sequence")) {
    const auto& seq = top.at("sequence");
    if (!seq.is_array() || seq.empty()) throw ConfigError("config.sequence: expected a nonempty array");
    for (std::size_t i = 0; i < seq.size(); ++i) {
      const std::string where = "config.sequence[" + std::to_string(i) + "]";
      detail::ObjectReader r(seq[i], where);
      if (r.has("synthetic") == r.has("annotations")) {
        throw ConfigError(where + ": give exactly one of 'synthetic' or 'annotations'");
      }
      if (r.has("synthetic")) {
        SyntheticSpec base = defaults[i % defaults.size()];
        base.seed = detail::default_data_seed(c.schedule.seed, i + 1);
        c.sequence.push_back({detail::parse_synthetic(r.at("synthetic"), where + ".synthetic", base)});
      } else {
        detail::ObjectReader a(r.at("annotations"), where + ".annotations");
        AnnotationPaths paths;
        a.get("train", paths.train);
        a.get("test", paths.test);
        a.finish();
        if (paths.train.empty() || paths.test.empty()) throw ConfigError(where + ".annotations: train and test paths required");
        c.sequence.push_back({paths});
      }
      r.finish();
    }
  } else {
    for (std::size_t i = 0; i < defaults.size(); ++i) {
      SyntheticSpec s = defaults[i];
      s.seed = detail::default_data_seed(c.schedule.seed, i + 1);
      c.sequence.push_back({s});
    }
  }
  top.finish();
  return c;
}

/// Fully resolved config with every default spelled out.
inline json config_to_json(const ExperimentConfig& c) {
  json seq = json::array();
  for (const auto& t : c.sequence) {
    if (const auto* s = std::get_if<SyntheticSpec>(&t.source)) {
      seq.push_back({{"synthetic", detail::synthetic_to_json(*s)}});
    } else {
      const auto& p = std::get<AnnotationPaths>(t.source);
      seq.push_back({{"annotations", {{"train", p.train}, {"test", p.test}}}});
    }
  }
  return {{"output_dir", c.output_dir},
          {"precision", c.precision == Precision::Float64 ? "float64" : "float32"},
          {"method",
           {{"kind", to_string(c.method.kind)},
            {"lambda", c.method.lambda},
            {"squared_l2", c.method.squared_l2},
            {"importance_decay", c.method.importance_decay}}},
          {"schedule",
           {{"epochs", c.schedule.epochs},
            {"batch_size", c.schedule.batch_size},
            {"seed", c.schedule.seed},
            {"crop", c.schedule.crop},
            {"flip_probability", c.schedule.flip_probability},
            {"head_output_bias", c.schedule.head_output_bias},
            {"learning_rate", c.schedule.optimizer.learning_rate},
            {"beta1", c.schedule.optimizer.beta1},
            {"beta2", c.schedule.optimizer.beta2},
            {"adam_epsilon", c.schedule.optimizer.epsilon},
            {"weight_decay", c.schedule.optimizer.weight_decay}}},
          {"network",
           {{"stride", c.network.stride},
            {"extractor_channels", c.network.extractor_channels},
            {"head_channels", c.network.head_channels},
            {"head_depth", c.head_depth ? json(*c.head_depth) : json(nullptr)},
            {"adaptor_bias", c.network.adaptor_bias}}},
          {"loss",
           {{"lambda1", c.loss.lambda1},
            {"lambda2", c.loss.lambda2},
            {"ot_epsilon", c.loss.ot.epsilon},
            {"ot_iterations", c.loss.ot.max_iterations},
            {"ot_tolerance", c.loss.ot.tolerance},
            {"normalize_cost", c.loss.ot.normalize_cost}}},
          {"sequence", seq}};
}

inline json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

inline ExperimentConfig load_config(const std::filesystem::path& path) { return parse_config(read_json_file(path)); }

inline std::vector<TaskDataset> materialize_sequence(const ExperimentConfig& c) {
  std::vector<TaskDataset> out;
  for (const auto& t : c.sequence) {
    if (const auto* s = std::get_if<SyntheticSpec>(&t.source)) {
      out.push_back(synth_generate(*s));
    } else {
      const auto& p = std::get<AnnotationPaths>(t.source);
      out.push_back(load_task(p.train, p.test));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Running

struct RunOptions {
  /// Stop after this many completed tasks (simulates an interruption).
  std::optional<std::size_t> stop_after;
  bool quiet = true;
};

struct RunArtifacts {
  std::filesystem::path output_dir;
  MetricsReport report;
  std::string method;
  std::size_t completed_tasks = 0;
  std::size_t total_tasks = 0;
};

namespace detail {

class RunLock {
 public:
  explicit RunLock(const std::filesystem::path& dir) : path_(dir / "run.lock") {
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) throw std::runtime_error("output directory " + dir.string() + " is locked by another run (" + path_.string() + ")");
    const auto pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
    ::close(fd);
  }
  ~RunLock() {
    std::error_code ec;
    std::filesystem::remove(path_, ec);
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::filesystem::path path_;
};

inline void write_text(const std::filesystem::path& path, const std::string& text) { write_atomic(path, text); }

inline json step_to_json(const StepLog& s) {
  return {{"task", s.task},       {"epoch", s.epoch}, {"step", s.step},   {"counting", s.counting}, {"ot", s.ot},
          {"tv", s.tv},           {"reg", s.reg},     {"total", s.total}, {"ot_skipped", s.ot_skipped}};
}

/// Keeps only log lines of tasks <= keep (drops a partially trained task).
inline void truncate_log(const std::filesystem::path& path, std::size_t keep) {
  if (!std::filesystem::exists(path)) return;
  std::ifstream in(path);
  std::string line, kept;
  while (std::getline(in, line)) {
    try {
      if (json::parse(line).at("task").get<std::size_t>() <= keep) kept += line + "\n";
    } catch (const json::exception&) {
    }
  }
  in.close();
  write_text(path, kept);
}

inline std::filesystem::path checkpoint_path(const std::filesystem::path& dir, std::size_t t) {
  return dir / "checkpoints" / ("task_" + std::to_string(t) + ".ckpt");
}

}  // namespace detail

/// Writes summary.csv, summary.md, curve.csv and metrics.csv for a report.
inline void emit_tables(const std::filesystem::path& dir, const MetricsReport& report, const std::string& method) {
  if (report.rows.empty()) throw std::invalid_argument("no evaluation rows to emit");
  detail::write_text(dir / "summary.csv", summary_csv(report, method));
  detail::write_text(dir / "summary.md", summary_markdown(report, method));
  detail::write_text(dir / "curve.csv", curve_csv(report));
  detail::write_text(dir / "metrics.csv", metrics_long_csv(report));
  detail::write_text(dir / "report.json", report_to_json(report).dump(2) + "\n");
}

namespace detail {

template <typename T>
RunArtifacts run_loop(const ExperimentConfig& c, ModelState<T> state, MetricsReport report, const RunOptions& opts) {
  const std::filesystem::path dir = c.output_dir;
  std::filesystem::create_directories(dir / "checkpoints");
  RunLock lock(dir);
  write_text(dir / "resolved_config.json", config_to_json(c).dump(2) + "\n");
  std::filesystem::remove(dir / "error.json");

  const auto datasets = materialize_sequence(c);
  const std::size_t total = datasets.size();
  truncate_log(dir / "train_log.jsonl", state.completed_tasks());
  std::ofstream log(dir / "train_log.jsonl", std::ios::app);

  RunArtifacts art;
  art.output_dir = dir;
  art.method = to_string(c.method.kind);
  art.total_tasks = total;
  for (std::size_t t = state.completed_tasks() + 1; t <= total; ++t) {
    if (opts.stop_after && state.completed_tasks() >= *opts.stop_after) break;
    try {
      train_task<T>(t, datasets[t - 1], c.method, c.schedule, c.loss, state, [&](const StepLog& s) {
        log << step_to_json(s).dump() << '\n';
      });
      log.flush();
      report.rows.push_back(sequence_eval<T>(state, datasets, t));
      json extra = {{"report", report_to_json(report)}, {"config", config_to_json(c)}};
      save_checkpoint(checkpoint_path(dir, t), state, extra);
      write_text(dir / "latest_checkpoint.txt", checkpoint_path(dir, t).filename().string() + "\n");
      emit_tables(dir, report, art.method);
      if (!opts.quiet) {
        std::fprintf(stderr, "task %zu/%zu (%s) done: avg NAE %.4f\n", t, total, datasets[t - 1].class_name.c_str(),
                     report.rows.back().average_nae());
      }
    } catch (const std::exception& e) {
      log.flush();
      json err = {{"error", "task_failed"}, {"task", t}, {"message", e.what()}};
      write_text(dir / "error.json", err.dump(2) + "\n");
      throw RunError(t, e.what());
    }
  }
  art.report = report;
  art.completed_tasks = state.completed_tasks();
  return art;
}

template <typename T>
RunArtifacts run_typed(const ExperimentConfig& c, const RunOptions& opts) {
  const std::filesystem::path dir = c.output_dir;
  if (std::filesystem::exists(dir / "latest_checkpoint.txt")) {
    throw std::runtime_error("output directory " + dir.string() + " already holds a run; use resume or a new directory");
  }
  Rng rng(derive_seed(c.schedule.seed, 0xF00D, 0));
  return run_loop<T>(c, ModelState<T>::create(c.network, c.method.kind, rng), MetricsReport{}, opts);
}

template <typename T>
RunArtifacts resume_typed(const ExperimentConfig& c, const std::filesystem::path& checkpoint, const RunOptions& opts) {
  auto loaded = load_checkpoint<T>(checkpoint);
  if (!(loaded.state.network == c.network)) throw ConfigError("checkpoint network does not match the config");
  if (loaded.state.method != c.method.kind) {
    throw ConfigError("checkpoint method " + to_string(loaded.state.method) + " does not match config method " +
                      to_string(c.method.kind));
  }
  if (loaded.state.completed_tasks() > c.sequence.size()) throw ConfigError("checkpoint has more tasks than the config");
  MetricsReport report = report_from_json(loaded.extra.at("report"));
  if (report.rows.size() != loaded.state.completed_tasks()) throw CheckpointError("checkpoint report is inconsistent");
  if (loaded.state.completed_tasks() == c.sequence.size()) {
    RunArtifacts art;
    art.output_dir = c.output_dir;
    art.report = report;
    art.method = to_string(c.method.kind);
    art.completed_tasks = art.total_tasks = c.sequence.size();
    return art;
  }
  return run_loop<T>(c, std::move(loaded.state), std::move(report), opts);
}

}  // namespace detail

/// Trains every task in order, evaluating all seen tasks after each one and
/// persisting a checkpoint plus reports at each task boundary.
inline RunArtifacts run(const ExperimentConfig& c, const RunOptions& opts = {}) {
  return c.precision == Precision::Float64 ? detail::run_typed<double>(c, opts) : detail::run_typed<float>(c, opts);
}

/// Latest checkpoint recorded in an output directory.
inline std::filesystem::path latest_checkpoint(const std::filesystem::path& dir) {
  std::ifstream in(dir / "latest_checkpoint.txt");
  std::string name;
  if (!(in >> name)) throw CheckpointError("no checkpoint recorded in " + dir.string());
  return dir / "checkpoints" / name;
}

/// Continues a run from a checkpoint (by default the latest in output_dir).
inline RunArtifacts resume(const ExperimentConfig& c, std::optional<std::filesystem::path> checkpoint = std::nullopt,
                           const RunOptions& opts = {}) {
  const auto path = checkpoint ? *checkpoint : latest_checkpoint(c.output_dir);
  return c.precision == Precision::Float64 ? detail::resume_typed<double>(c, path, opts)
                                           : detail::resume_typed<float>(c, path, opts);
}

/// Re-scores a checkpoint on the config's test sets.
inline MetricsReport evaluate_checkpoint(const ExperimentConfig& c, const std::filesystem::path& checkpoint) {
  auto eval = [&](auto tag) {
    using T = decltype(tag);
    auto loaded = load_checkpoint<T>(checkpoint);
    const auto datasets = materialize_sequence(c);
    MetricsReport report;
    report.rows.push_back(sequence_eval<T>(loaded.state, datasets, loaded.state.completed_tasks()));
    return report;
  };
  return c.precision == Precision::Float64 ? eval(double{}) : eval(float{});
}

}  // namespace icount
