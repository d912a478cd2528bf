#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dlca/circuit.hpp"
#include "dlca/training.hpp"

namespace dlca {

// Sum of absolute differences over the target's channels (channel 0 for
// images, channels 0-2 for RGB targets).
double error_t(const Target& target, const BitGrid& grid);

struct Region {
  std::size_t row = 0;
  std::size_t col = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  bool contains(std::size_t i, std::size_t j) const {
    return i >= row && i < row + height && j >= col && j < col + width;
  }
};

// Disabled cells are forced to all-zero state after every step they are
// disabled in; they stay on the grid and neighbors read the zeros.
struct FaultPolicy {
  enum class Kind { None, Permanent, Transient, Roaming };
  Kind kind = Kind::None;
  Region region;                // Permanent, Transient
  std::size_t revive_step = 0;  // Transient: disabled while t < revive_step
  std::size_t size = 10;        // Roaming square side
  std::uint64_t seed = 0;       // Roaming position stream
  // Roaming only: active for steps in [first_step, last_step).
  std::size_t first_step = 0;
  std::size_t last_step = SIZE_MAX;

  static FaultPolicy none() { return {}; }
  static FaultPolicy permanent(Region r) { return {Kind::Permanent, r}; }
  static FaultPolicy transient(Region r, std::size_t revive) { return {Kind::Transient, r, revive}; }
  static FaultPolicy roaming(std::size_t size, std::uint64_t seed) {
    FaultPolicy f;
    f.kind = Kind::Roaming;
    f.size = size;
    f.seed = seed;
    return f;
  }

  // Throws ConfigError if the region does not fit a height x width grid.
  void validate(std::size_t height, std::size_t width) const;
  // Region disabled after step t (1-based), if any.
  std::optional<Region> disabled_region(std::size_t height, std::size_t width, std::size_t t) const;
  // Hook for rollout_hard / hard_rollout_packed. Empty for Kind::None.
  StepHook hook(std::size_t height, std::size_t width) const;
};

// "none", "permanent:i,j,h,w", "transient:i,j,h,w,revive", "roaming:size,seed"
// or "roaming:size,seed,first,last".
FaultPolicy fault_from_spec(std::string_view spec);
std::string fault_spec(const FaultPolicy& policy);

// ---------------------------------------------------------------------------
// Image output. Encoder settings are fixed so identical grids give identical
// files.

enum class ImageFormat { Png, Pbm };
std::string_view image_format_name(ImageFormat format);
ImageFormat image_format_from_name(std::string_view name);

// 8-bit gray (channels = 1) or RGB (channels = 3) pixels, row-major.
void write_png(const std::filesystem::path& path, std::size_t width, std::size_t height, std::size_t channels,
               const std::vector<std::uint8_t>& pixels);

// Channel 0 as black/white, or channels 0-2 as RGB when `rgb`; each cell is
// drawn as a scale x scale block.
void write_grid_png(const BitGrid& grid, const std::filesystem::path& path, bool rgb = false, std::size_t scale = 8);
// Plain PBM (P1) of channel 0, or plain PPM (P3) of channels 0-2 when `rgb`.
// PBM writes 1 for live cells, which viewers show as black.
void write_grid_text(const BitGrid& grid, const std::filesystem::path& path, bool rgb = false);

struct PlotSeries {
  std::string name;
  std::vector<double> values;
};

// Line chart with axes and a color-swatch legend; no text rendering.
void write_line_plot(const std::filesystem::path& path, const std::vector<PlotSeries>& series,
                     std::size_t width = 640, std::size_t height = 400);

// "frame_00012.png" style names.
std::string frame_name(std::size_t t, ImageFormat format);

// ---------------------------------------------------------------------------
// Runs

// FNV-1a of the config's canonical JSON.
std::string config_hash(const TrainConfig& config);

struct GateCountReport {
  std::size_t active = 0;        // all kernels + update, before pruning
  std::size_t total = 0;
  std::size_t pruned_active = 0;  // after whole-model pruning
  std::size_t pruned_total = 0;
  std::vector<std::size_t> live_channels;
  // Values printed in the original experiments, for side-by-side output.
  std::optional<std::size_t> reference_active;
  std::optional<std::size_t> reference_pruned;
};

GateCountReport gate_counts(const CircuitModel& model, std::span<const std::size_t> observed_channels);

struct RolloutReport {
  std::string name;  // e.g. "train_scale", "generalization"
  std::size_t size = 0;
  std::size_t steps = 0;
  std::vector<double> error;  // Error_t for t = 0..steps
  double final_accuracy = 0.0;
};

struct RunReport {
  std::string experiment;
  std::uint64_t seed = 0;
  std::string config_hash;
  double train_wall_ms = 0.0;
  double total_wall_ms = 0.0;
  bool trained = false;  // false when loaded from a checkpoint
  std::size_t epochs_run = 0;
  bool solved = false;
  std::optional<std::size_t> gol_score;        // out of 512
  std::optional<bool> gol_oracle_match;         // 32x32 torus vs reference
  std::vector<RolloutReport> rollouts;
  GateCountReport gates;
  std::vector<std::string> files;  // relative to the output directory

  nlohmann::json to_json() const;
};

struct ExperimentOptions {
  std::optional<TrainConfig> config;      // default_config(name) when empty
  std::filesystem::path out_dir = "out";
  std::filesystem::path checkpoint;       // load instead of training when set
  ImageFormat format = ImageFormat::Png;
  std::optional<std::vector<std::size_t>> frames;  // overrides frame steps
  std::optional<Boundary> boundary;                 // inference boundary
  double async_rate = 0.0;                          // inference schedule
  FaultPolicy fault;
  bool write_frames = true;
  bool verbose = false;
};

RunReport run_experiment(std::string_view name, const ExperimentOptions& options);

struct AsyncStudyOptions {
  std::filesystem::path out_dir = "out/async_study";
  std::size_t grid_size = 64;
  std::size_t steps = 300;
  double rate = 0.6;
  std::size_t fault_size = 10;
  // Roaming faults for steps [first, last). The 64x64 pattern forms by about
  // t=150 at rate 0.6, so the fault hits a finished pattern and the last 50
  // steps show recovery.
  std::size_t fault_first = 150;
  std::size_t fault_last = 250;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  Boundary boundary = Boundary::constant(0);
  std::string target = "checkerboard";
};

struct AsyncStudyReport {
  std::vector<std::vector<double>> sync_errors;  // [seed][t]
  std::vector<std::vector<double>> async_errors;
  std::vector<double> sync_mean;  // mean over seeds, per t
  std::vector<double> async_mean;
  double sync_mean_after_fault = 0.0;  // mean Error_t over t >= fault_first
  double async_mean_after_fault = 0.0;
  std::size_t seeds_async_lower = 0;  // seeds where async mean < sync mean
  std::vector<std::string> files;

  nlohmann::json to_json() const;
};

// Both models run under the same asynchronous schedule and roaming faults.
AsyncStudyReport run_async_study(const CaModel& sync_model, const CaModel& async_model,
                                 const AsyncStudyOptions& options);

}  // namespace dlca
