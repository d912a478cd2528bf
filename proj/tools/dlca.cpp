// Command-line front end: train, infer, extract, prune, export, experiment,
// report.

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "dlca/error.hpp"
#include "dlca/harness.hpp"
#include "dlca/rng.hpp"

namespace fs = std::filesystem;
using namespace dlca;

namespace {

void fail_json(const char* kind, const std::string& message, int code) {
  std::cerr << nlohmann::json{{"error", kind}, {"message", message}, {"exit_code", code}}.dump() << '\n';
}

// Flags shared by commands that run or train a model.
struct RunFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out_dir = "out";
  std::string boundary;
  double async_rate = 0.0;
  std::string fault = "none";
  std::string format = "png";
  std::vector<std::size_t> frames;

  TrainConfig load(std::string_view experiment) const {
    TrainConfig c = config.empty() ? default_config(experiment) : load_config(config);
    if (seed) c.seed = *seed;
    return c;
  }
};

void add_seed(CLI::App* cmd, RunFlags& f) { cmd->add_option("--seed", f.seed, "Master seed"); }

void add_run_flags(CLI::App* cmd, RunFlags& f) {
  cmd->add_option("--out-dir", f.out_dir, "Output directory");
  cmd->add_option("--boundary", f.boundary, "pad0, pad1 or torus")->check(CLI::IsMember({"pad0", "pad1", "torus"}));
  cmd->add_option("--async-rate", f.async_rate, "Fraction of cells updated per step (0 = synchronous)")
      ->check(CLI::Range(0.0, 1.0));
  cmd->add_option("--fault", f.fault, "none | permanent:i,j,h,w | transient:i,j,h,w,revive | roaming:size,seed");
  cmd->add_option("--format", f.format, "Frame format")->check(CLI::IsMember({"png", "pbm"}));
  cmd->add_option("--frames", f.frames, "Steps to write frames for")->delimiter(',');
}

void print(const nlohmann::json& j) { std::cout << j.dump(2) << '\n'; }

nlohmann::json census_json(const HardCircuit& c) {
  const GateCensus g = census(c);
  nlohmann::json hist = nlohmann::json::object();
  for (int op = 0; op < kNumGates; ++op) {
    if (g.histogram[op] > 0) hist[std::string(gate_name(gate_from_opcode(op)))] = g.histogram[op];
  }
  return {{"total", g.total}, {"active", g.active}, {"histogram", hist}};
}

int cmd_train(const RunFlags& f) {
  TrainConfig c = f.load("checkerboard");
  if (!f.boundary.empty()) c.boundary = boundary_from_name(f.boundary);
  if (f.async_rate > 0.0) c.async_rate = f.async_rate;
  TrainOptions opts;
  opts.out_dir = f.out_dir;
  opts.on_step = [](const LossRecord& r) {
    if (r.step % 50 == 0) std::cerr << "step " << r.step << " loss " << r.loss << '\n';
  };
  const TrainResult r = train(c, opts);
  write_json_file(config_to_json(c), fs::path(f.out_dir) / "config.json");
  nlohmann::json out = {{"experiment", c.experiment},
                        {"seed", c.seed},
                        {"epochs_run", r.epochs_run},
                        {"solved", r.solved},
                        {"final_loss", r.history.empty() ? 0.0 : r.history.back().loss},
                        {"model", (fs::path(f.out_dir) / "model.json").string()}};
  if (c.experiment == "gol") out["gol_score"] = gol_hard_score(r.model);
  print(out);
  return 0;
}

int cmd_infer(const RunFlags& f, const std::string& model_path, std::size_t size, std::size_t steps) {
  const CaModel model = load_model(model_path);
  TrainConfig c = f.load(model.channels() == 1 ? "gol" : "checkerboard");
  if (model.channels() != c.arch.channels) throw ConfigError("model channel count does not match the config");
  const bool is_gol = c.experiment == "gol";
  const Boundary boundary = !f.boundary.empty() ? boundary_from_name(f.boundary)
                            : is_gol            ? Boundary::toroidal()
                                                : c.boundary;
  if (size == 0) size = is_gol ? 32 : c.grid_size;
  if (steps == 0) steps = c.steps;
  const ImageFormat format = image_format_from_name(f.format);
  const bool rgb = c.target == "colored_grid";

  const BitGrid g0 = is_gol ? initial_grid(InitPolicy::bernoulli(0.5), size, size, 1, c.seed)
                            : initial_grid(c.init_state, size, size, model.channels(), c.seed);
  const UpdateSchedule schedule = f.async_rate > 0.0 ? UpdateSchedule::async(f.async_rate, derive_seed(c.seed, 1))
                                                     : UpdateSchedule::synchronous();
  const FaultPolicy fault = fault_from_spec(f.fault);
  const auto traj = hard_rollout_packed(crystallize(model), g0, steps, boundary, schedule, fault.hook(size, size));

  std::vector<std::size_t> frames = f.frames;
  if (frames.empty()) frames = {0, steps};
  nlohmann::json files = nlohmann::json::array();
  for (std::size_t t : frames) {
    if (t >= traj.size()) continue;
    const fs::path p = fs::path(f.out_dir) / frame_name(t, format);
    if (format == ImageFormat::Png) {
      write_grid_png(traj[t], p, rgb);
    } else {
      write_grid_text(traj[t], p, rgb);
    }
    files.push_back(p.string());
  }
  nlohmann::json out = {{"size", size}, {"steps", steps}, {"frames", files}};
  if (!is_gol && (size == c.grid_size || c.target == "checkerboard")) {
    const Target target = make_target(c.target, size);
    std::vector<double> err;
    for (const auto& g : traj) err.push_back(dlca::error_t(target, g));
    out["error_t"] = err;
    out["final_accuracy"] = pixel_accuracy(traj.back(), target);
  }
  print(out);
  return 0;
}

int cmd_extract(const std::string& model_path, const std::string& out_dir) {
  const CircuitModel cm = crystallize(load_model(model_path));
  nlohmann::json out = {{"kernels", nlohmann::json::array()}};
  for (std::size_t k = 0; k < cm.kernels.size(); ++k) {
    const fs::path p = fs::path(out_dir) / ("kernel_" + std::to_string(k) + ".json");
    export_circuit(cm.kernels[k], CircuitFormat::NetlistJson, p);
    out["kernels"].push_back({{"file", p.string()}, {"census", census_json(cm.kernels[k])}});
  }
  const fs::path up = fs::path(out_dir) / "update.json";
  export_circuit(cm.update, CircuitFormat::NetlistJson, up);
  out["update"] = {{"file", up.string()}, {"census", census_json(cm.update)}};
  print(out);
  return 0;
}

int cmd_prune(const std::string& in, const std::string& out) {
  const HardCircuit c = load_circuit(in);
  const HardCircuit p = prune(c);
  export_circuit(p, CircuitFormat::NetlistJson, out);
  print({{"before", census_json(c)}, {"after", census_json(p)}, {"out", out}});
  return 0;
}

int cmd_export(const std::string& in, const std::string& format, const std::string& out) {
  const HardCircuit c = load_circuit(in);
  export_circuit(c, format == "dot" ? CircuitFormat::Dot : CircuitFormat::NetlistJson, out);
  print({{"out", out}, {"nodes", c.num_nodes()}});
  return 0;
}

int cmd_experiment(const RunFlags& f, const std::string& name, const std::string& checkpoint, bool verbose) {
  ExperimentOptions o;
  if (!f.config.empty() || f.seed) o.config = f.load(name);
  o.out_dir = f.out_dir;
  o.checkpoint = checkpoint;
  o.format = image_format_from_name(f.format);
  if (!f.frames.empty()) o.frames = f.frames;
  if (!f.boundary.empty()) o.boundary = boundary_from_name(f.boundary);
  o.async_rate = f.async_rate;
  o.fault = fault_from_spec(f.fault);
  o.verbose = verbose;
  const RunReport r = run_experiment(name, o);
  print(r.to_json());
  return 0;
}

int cmd_async_study(const std::string& sync_path, const std::string& async_path, const std::string& out_dir,
                    std::size_t seeds, double rate) {
  AsyncStudyOptions o;
  o.out_dir = out_dir;
  o.rate = rate;
  o.seeds.clear();
  for (std::size_t s = 0; s < seeds; ++s) o.seeds.push_back(s);
  const AsyncStudyReport r = run_async_study(load_model(sync_path), load_model(async_path), o);
  print({{"sync_mean_after_fault", r.sync_mean_after_fault},
         {"async_mean_after_fault", r.async_mean_after_fault},
         {"seeds_async_lower", r.seeds_async_lower},
         {"seeds", seeds},
         {"files", r.files}});
  return 0;
}

std::string fmt_opt(const nlohmann::json& j) { return j.is_null() ? "-" : j.dump(); }

int cmd_report(const std::vector<std::string>& paths) {
  std::cout << "experiment     seed  active  pruned  reference  accuracy\n";
  for (const auto& p : paths) {
    const nlohmann::json r = read_json_file(fs::is_directory(p) ? fs::path(p) / "report.json" : fs::path(p));
    if (r.value("kind", "") != "run_report") throw CheckpointError(p + " is not a run report");
    const auto& g = r.at("gates");
    std::string ref = fmt_opt(g.at("reference_active"));
    if (!g.at("reference_pruned").is_null()) ref += "/" + g.at("reference_pruned").dump();
    std::string acc = "-";
    if (r.contains("gol_score")) {
      acc = r.at("gol_score").dump() + "/512";
    } else if (!r.at("rollouts").empty()) {
      acc.clear();
      for (const auto& ro : r.at("rollouts")) {
        if (!acc.empty()) acc += " ";
        acc += ro.at("name").get<std::string>() + "=" + std::to_string(ro.at("final_accuracy").get<double>());
      }
    }
    std::printf("%-14s %4llu  %6zu  %6zu  %9s  %s\n", r.at("experiment").get<std::string>().c_str(),
                static_cast<unsigned long long>(r.at("seed").get<std::uint64_t>()), g.at("active").get<std::size_t>(),
                g.at("pruned_active").get<std::size_t>(), ref.c_str(), acc.c_str());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Differentiable logic cellular automata"};
  app.require_subcommand(1);

  RunFlags flags;
  std::string model_path, in_path, out_path, name, checkpoint, export_format = "dot", sync_path, async_path;
  std::size_t size = 0, steps = 0, seeds = 5;
  double study_rate = 0.6;
  bool verbose = false;
  std::vector<std::string> report_paths;

  auto* train_cmd = app.add_subcommand("train", "Train a model from a config");
  train_cmd->add_option("--config", flags.config, "Config JSON")->check(CLI::ExistingFile);
  add_seed(train_cmd, flags);
  train_cmd->add_option("--out-dir", flags.out_dir, "Output directory");
  train_cmd->add_option("--boundary", flags.boundary, "pad0, pad1 or torus")
      ->check(CLI::IsMember({"pad0", "pad1", "torus"}));
  train_cmd->add_option("--async-rate", flags.async_rate, "Asynchronous training rate")->check(CLI::Range(0.0, 1.0));

  auto* infer_cmd = app.add_subcommand("infer", "Hard rollout of a trained model");
  infer_cmd->add_option("--model", model_path, "Model JSON")->required()->check(CLI::ExistingFile);
  infer_cmd->add_option("--config", flags.config, "Config JSON")->check(CLI::ExistingFile);
  add_seed(infer_cmd, flags);
  infer_cmd->add_option("--size", size, "Grid side (default: training size)");
  infer_cmd->add_option("--steps", steps, "Steps (default: training steps)");
  add_run_flags(infer_cmd, flags);

  auto* extract_cmd = app.add_subcommand("extract", "Crystallize a model into netlists");
  extract_cmd->add_option("--model", model_path, "Model JSON")->required()->check(CLI::ExistingFile);
  extract_cmd->add_option("--out-dir", flags.out_dir, "Output directory");

  auto* prune_cmd = app.add_subcommand("prune", "Prune a netlist");
  prune_cmd->add_option("--in", in_path, "Netlist JSON")->required()->check(CLI::ExistingFile);
  prune_cmd->add_option("--out", out_path, "Output netlist JSON")->required();

  auto* export_cmd = app.add_subcommand("export", "Convert a netlist");
  export_cmd->add_option("--in", in_path, "Netlist JSON")->required()->check(CLI::ExistingFile);
  export_cmd->add_option("--format", export_format, "dot or netlist_json")
      ->check(CLI::IsMember({"dot", "netlist_json"}));
  export_cmd->add_option("--out", out_path, "Output file")->required();

  auto* exp_cmd = app.add_subcommand("experiment", "Train (or load) and evaluate one experiment");
  exp_cmd->add_option("name", name, "gol, checkerboard, lizard or colored_grid")
      ->required()
      ->check(CLI::IsMember({"gol", "checkerboard", "lizard", "colored_grid"}));
  exp_cmd->add_option("--config", flags.config, "Config JSON")->check(CLI::ExistingFile);
  add_seed(exp_cmd, flags);
  exp_cmd->add_option("--checkpoint", checkpoint, "Skip training and load this model")->check(CLI::ExistingFile);
  exp_cmd->add_flag("--verbose", verbose, "Print training progress");
  add_run_flags(exp_cmd, flags);

  auto* study_cmd = app.add_subcommand("async-study", "Fault-injection comparison of two checkerboard models");
  study_cmd->add_option("--sync-model", sync_path, "Synchronously trained model")->required()->check(CLI::ExistingFile);
  study_cmd->add_option("--async-model", async_path, "Asynchronously trained model")
      ->required()
      ->check(CLI::ExistingFile);
  study_cmd->add_option("--seeds", seeds, "Number of seeds")->check(CLI::PositiveNumber);
  study_cmd->add_option("--async-rate", study_rate, "Update rate")->check(CLI::Range(0.0, 1.0));
  study_cmd->add_option("--out-dir", flags.out_dir, "Output directory");

  auto* report_cmd = app.add_subcommand("report", "Summarize run reports");
  report_cmd->add_option("reports", report_paths, "report.json files or run directories")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    fail_json("usage", e.what(), 2);
    return 2;
  }

  try {
    if (*train_cmd) return cmd_train(flags);
    if (*infer_cmd) return cmd_infer(flags, model_path, size, steps);
    if (*extract_cmd) return cmd_extract(model_path, flags.out_dir);
    if (*prune_cmd) return cmd_prune(in_path, out_path);
    if (*export_cmd) return cmd_export(in_path, export_format, out_path);
    if (*exp_cmd) return cmd_experiment(flags, name, checkpoint, verbose);
    if (*study_cmd) return cmd_async_study(sync_path, async_path, flags.out_dir, seeds, study_rate);
    if (*report_cmd) return cmd_report(report_paths);
  } catch (const dlca::Error& e) {
    fail_json(e.kind(), e.what(), 1);
    return 1;
  } catch (const std::exception& e) {
    fail_json("internal", e.what(), 1);
    return 1;
  }
  return 0;
}
