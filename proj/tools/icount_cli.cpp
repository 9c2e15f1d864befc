#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include "icount/icount.hpp"

namespace {

using icount::json;

struct Overrides {
  std::optional<std::string> output_dir;
  std::optional<std::string> method;
  std::optional<double> lambda;
  std::optional<std::size_t> epochs;
  std::optional<std::size_t> batch_size;
  std::optional<std::uint64_t> seed;
  std::optional<double> learning_rate;
  std::optional<std::size_t> head_depth;
  std::optional<std::string> precision;
  std::optional<double> lambda1;
  std::optional<double> lambda2;

  void add_to(CLI::App* app) {
    app->add_option("--out", output_dir, "Output directory");
    app->add_option("--method", method, "FT, LWF, FD, EWC, MAS, DMD_NO_ADAPT or DMD");
    app->add_option("--lambda", lambda, "Regularization weight");
    app->add_option("--epochs", epochs, "Epochs per task");
    app->add_option("--batch-size", batch_size, "Batch size");
    app->add_option("--seed", seed, "Run seed");
    app->add_option("--lr", learning_rate, "Adam learning rate");
    app->add_option("--head-depth", head_depth, "Hidden layers in each counter head");
    app->add_option("--precision", precision, "float64 or float32");
    app->add_option("--lambda1", lambda1, "OT loss weight");
    app->add_option("--lambda2", lambda2, "TV loss weight");
  }

  void apply(json& j) const {
    if (output_dir) j["output_dir"] = *output_dir;
    if (precision) j["precision"] = *precision;
    if (method) j["method"]["kind"] = *method;
    if (lambda) j["method"]["lambda"] = *lambda;
    if (epochs) j["schedule"]["epochs"] = *epochs;
    if (batch_size) j["schedule"]["batch_size"] = *batch_size;
    if (seed) j["schedule"]["seed"] = *seed;
    if (learning_rate) j["schedule"]["learning_rate"] = *learning_rate;
    if (head_depth) j["network"]["head_depth"] = *head_depth;
    if (lambda1) j["loss"]["lambda1"] = *lambda1;
    if (lambda2) j["loss"]["lambda2"] = *lambda2;
  }
};

icount::ExperimentConfig resolve(const std::string& path, const Overrides& o) {
  json j = path.empty() ? json::object() : icount::read_json_file(path);
  o.apply(j);
  return icount::parse_config(j);
}

int fail(const std::string& kind, const std::string& message, std::optional<std::size_t> task = std::nullopt) {
  json err = {{"error", kind}, {"message", message}};
  if (task) err["task"] = *task;
  std::cerr << err.dump() << std::endl;
  return kind == "config_error" ? 2 : 1;
}

void print_summary(const icount::RunArtifacts& art) {
  if (art.report.rows.empty()) return;
  std::cout << icount::summary_markdown(art.report, art.method);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Incremental object counting experiments"};
  app.require_subcommand(1);

  std::string config_path, checkpoint, out_dir;
  Overrides overrides;
  bool verbose = false;
  std::optional<std::size_t> stop_after;

  auto* run = app.add_subcommand("run", "Train a task sequence from scratch");
  run->add_option("-c,--config", config_path, "JSON experiment config (defaults used when omitted)");
  run->add_option("--stop-after", stop_after, "Stop after this many tasks");
  run->add_flag("-v,--verbose", verbose, "Report progress on stderr");
  overrides.add_to(run);

  auto* resume = app.add_subcommand("resume", "Continue a run from its latest (or a given) checkpoint");
  resume->add_option("-c,--config", config_path, "JSON experiment config");
  resume->add_option("--checkpoint", checkpoint, "Checkpoint file");
  resume->add_flag("-v,--verbose", verbose, "Report progress on stderr");
  overrides.add_to(resume);

  auto* eval = app.add_subcommand("eval", "Re-score a checkpoint on the config's test sets");
  eval->add_option("-c,--config", config_path, "JSON experiment config");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  overrides.add_to(eval);

  std::string shape = "disk";
  std::uint64_t synth_seed = 1;
  std::size_t train_n = 80, test_n = 40;
  auto* synth = app.add_subcommand("synth", "Write a synthetic task as PNG images plus annotation files");
  synth->add_option("--shape", shape, "disk, square, triangle or ring");
  synth->add_option("--seed", synth_seed, "Data seed");
  synth->add_option("--train", train_n, "Training samples");
  synth->add_option("--test", test_n, "Test samples");
  synth->add_option("--out", out_dir, "Output directory")->required();

  auto* tables = app.add_subcommand("tables", "Re-emit summary and curve tables from a run directory");
  tables->add_option("--out", out_dir, "Run directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) {
      const auto cfg = resolve(config_path, overrides);
      icount::RunOptions opts;
      opts.stop_after = stop_after;
      opts.quiet = !verbose;
      print_summary(icount::run(cfg, opts));
    } else if (resume->parsed()) {
      const auto cfg = resolve(config_path, overrides);
      icount::RunOptions opts;
      opts.quiet = !verbose;
      print_summary(icount::resume(cfg, checkpoint.empty() ? std::nullopt : std::optional<std::filesystem::path>(checkpoint), opts));
    } else if (eval->parsed()) {
      const auto cfg = resolve(config_path, overrides);
      const auto report = icount::evaluate_checkpoint(cfg, checkpoint);
      std::cout << icount::curve_csv(report);
    } else if (synth->parsed()) {
      auto specs = icount::default_sequence();
      icount::SyntheticSpec spec = specs.front();
      for (const auto& s : specs) {
        if (icount::to_string(s.shape) == shape) spec = s;
      }
      spec.shape = icount::parse_shape(shape);
      spec.seed = synth_seed;
      spec.train_samples = train_n;
      spec.test_samples = test_n;
      icount::save_task(out_dir, icount::synth_generate(spec));
      std::cout << json({{"train", out_dir + "/train.json"}, {"test", out_dir + "/test.json"}}).dump() << '\n';
    } else if (tables->parsed()) {
      const auto report_json = icount::read_json_file(std::filesystem::path(out_dir) / "report.json");
      const auto cfg_json = icount::read_json_file(std::filesystem::path(out_dir) / "resolved_config.json");
      const auto report = icount::report_from_json(report_json);
      const std::string method = cfg_json.at("method").at("kind").get<std::string>();
      icount::emit_tables(out_dir, report, method);
      std::cout << icount::summary_markdown(report, method);
    }
  } catch (const icount::ConfigError& e) {
    return fail("config_error", e.what());
  } catch (const icount::RunError& e) {
    return fail("run_error", e.what(), e.task());
  } catch (const std::exception& e) {
    return fail("error", e.what());
  }
  return 0;
}
