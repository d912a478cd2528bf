#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dlca/ca.hpp"

namespace dlca {

// ---------------------------------------------------------------------------
// Game of Life rule table

struct GolSample {
  std::array<std::uint8_t, 9> patch{};  // 3x3, row-major
  std::uint8_t label = 0;               // next state of the center cell
};

std::uint8_t gol_rule(bool alive, int live_neighbors);

// All 512 patches, patch k encodes bit (8 - r) of k at row-major slot r.
std::vector<GolSample> gol_dataset();

// Reorders a row-major 3x3 patch into neighborhood order (center first).
std::array<std::uint8_t, 9> patch_to_neighborhood(const std::array<std::uint8_t, 9>& patch);

// Reference next generation with the given boundary.
BitGrid gol_step_reference(const BitGrid& grid, const Boundary& boundary);

// ---------------------------------------------------------------------------
// Targets and initial states

struct Target {
  enum class Kind { GolRuleTable, Image, RgbImage };
  Kind kind = Kind::Image;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 1;        // 1 for Image, 3 for RgbImage
  std::vector<std::uint8_t> data;  // H*W*channels

  std::uint8_t at(std::size_t i, std::size_t j, std::size_t c = 0) const {
    return data[(i * width + j) * channels + c];
  }
};

// kind: "gol", "checkerboard", "lizard", "colored_grid".
Target make_target(std::string_view kind, std::size_t size);

// Bundled bitmaps, one string per row. Lizard uses '#'/'.'; the colored grid
// uses K R G B Y C M W for the eight RGB corners.
std::span<const std::string_view> lizard_rows();
std::span<const std::string_view> colored_grid_rows();

struct InitPolicy {
  enum class Kind { Bernoulli, AllZero, CenterSeed };
  Kind kind = Kind::Bernoulli;
  double p = 0.5;
  std::vector<std::uint8_t> seed_state;  // CenterSeed; empty means all ones

  static InitPolicy bernoulli(double p) { return {Kind::Bernoulli, p, {}}; }
  static InitPolicy all_zero() { return {Kind::AllZero, 0.0, {}}; }
  static InitPolicy center_seed(std::vector<std::uint8_t> state = {}) {
    return {Kind::CenterSeed, 0.0, std::move(state)};
  }
};

BitGrid initial_grid(const InitPolicy& policy, std::size_t height, std::size_t width, std::size_t channels,
                     std::uint64_t seed);

// ---------------------------------------------------------------------------
// Losses (sums of squared errors)

struct VectorLoss {
  double loss = 0.0;
  std::vector<double> grad;
};

VectorLoss loss_gol(std::span<const double> pred, std::span<const std::uint8_t> labels);

struct GridLoss {
  double loss = 0.0;
  CellGrid grad;
};

GridLoss loss_channel0(const CellGrid& grid, const Target& target);
GridLoss loss_rgb(const CellGrid& grid, const Target& target);
// Dispatches on the target kind.
GridLoss loss_for_target(const CellGrid& grid, const Target& target);

// Fraction of target pixels (over the target's channels) the grid matches.
double pixel_accuracy(const BitGrid& grid, const Target& target);

// ---------------------------------------------------------------------------
// Optimizer

struct AdamSettings {
  double learning_rate = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double epsilon = 1e-8;
  double clip_norm = 1.0;  // <= 0 disables clipping
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::size_t t = 0;
};

// One adaptive-moment update of `params` from `grads` (already clipped).
void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state,
               const AdamSettings& settings);

// Scales all gradient spans so their joint L2 norm is at most clip_norm.
// Returns the norm before clipping.
double clip_global_norm(std::span<const std::span<double>> grads, double clip_norm);

class ModelOptimizer {
 public:
  ModelOptimizer(const CaModel& model, AdamSettings settings);

  // Clips `grad` in place, then updates every network. Returns the
  // pre-clip gradient norm.
  double step(CaModel& model, ModelGrad& grad);

  const AdamSettings& settings() const { return settings_; }

 private:
  AdamSettings settings_;
  std::vector<AdamState> kernels_;
  AdamState update_;
};

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  std::string experiment = "checkerboard";  // gol | checkerboard | lizard | colored_grid
  CaArchitecture arch;
  std::string target = "checkerboard";
  std::size_t grid_size = 16;
  std::size_t steps = 20;  // rollout length T
  Boundary boundary = Boundary::constant(0);
  double async_rate = 0.0;  // 0 = synchronous
  InitPolicy init_state;
  AdamSettings optimizer;
  std::size_t epochs = 1000;  // optimizer steps
  std::size_t batch = 1;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;
  std::size_t eval_every = 50;
  std::size_t eval_inits = 4;
  bool stop_when_solved = true;
  // First optimizer step whose rollout runs straight-through (argmax gates
  // forward, relaxed gradients backward); -1 keeps every step relaxed.
  std::int64_t straight_through_from = -1;
};

TrainConfig default_config(std::string_view experiment);
// Overlays the keys present in `doc` onto default_config(doc["experiment"]).
TrainConfig config_from_json(const nlohmann::json& doc);
nlohmann::json config_to_json(const TrainConfig& config);
TrainConfig load_config(const std::filesystem::path& path);

struct LossRecord {
  std::size_t step = 0;
  double loss = 0.0;
  double wall_ms = 0.0;
};

struct TrainResult {
  CaModel model;
  std::vector<LossRecord> history;
  bool solved = false;
  std::size_t epochs_run = 0;
  bool out_of_time = false;  // stopped by TrainOptions::time_budget_ms
};

struct TrainOptions {
  std::filesystem::path out_dir;  // empty: no files written
  std::function<void(const LossRecord&)> on_step;
  // Called after every optimizer step with the updated model.
  std::function<void(std::size_t step, const CaModel&)> on_model;
  double time_budget_ms = 0.0;  // 0: no wall-clock limit
  // Start from this model instead of a fresh initialization (fresh Adam state).
  std::optional<CaModel> initial_model;
};

TrainResult train(const TrainConfig& config, const TrainOptions& options = {});

// Soft GoL pass over the full rule table; returns the loss and accumulates
// gradients into `grad`.
double gol_epoch(const CaModel& model, std::span<const GolSample> data, ModelGrad& grad);
// Number of rule-table entries the crystallized model predicts correctly.
std::size_t gol_hard_score(const CaModel& model);

// Hard rollouts of `config`'s pattern task from `count` fresh inits; returns
// the minimum pixel accuracy at the final step.
double pattern_hard_accuracy(const CaModel& model, const TrainConfig& config, const Target& target,
                             std::size_t count, std::uint64_t seed);

void write_loss_history(std::span<const LossRecord> history, const std::filesystem::path& path);

}  // namespace dlca
