#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dlca/network.hpp"

namespace dlca {

// H x W x C tensor stored row-major with channels innermost.
template <class T>
struct Grid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<T> values;

  Grid() = default;
  Grid(std::size_t h, std::size_t w, std::size_t c, T fill = T{})
      : height(h), width(w), channels(c), values(h * w * c, fill) {}

  std::size_t cells() const { return height * width; }
  std::size_t index(std::size_t i, std::size_t j, std::size_t c) const { return (i * width + j) * channels + c; }
  T& at(std::size_t i, std::size_t j, std::size_t c) { return values[index(i, j, c)]; }
  const T& at(std::size_t i, std::size_t j, std::size_t c) const { return values[index(i, j, c)]; }

  friend bool operator==(const Grid&, const Grid&) = default;
};

using CellGrid = Grid<double>;
using BitGrid = Grid<std::uint8_t>;

CellGrid to_soft(const BitGrid& grid);
// Thresholds at 0.5.
BitGrid to_hard(const CellGrid& grid);

struct Boundary {
  enum class Mode { ConstantPad, Toroidal };
  Mode mode = Mode::ConstantPad;
  // Pad bit per channel; a single entry applies to every channel.
  std::vector<std::uint8_t> pad{0};

  static Boundary constant(std::uint8_t value) { return {Mode::ConstantPad, {value}}; }
  static Boundary constant(std::vector<std::uint8_t> per_channel) { return {Mode::ConstantPad, std::move(per_channel)}; }
  static Boundary toroidal() { return {Mode::Toroidal, {0}}; }

  std::uint8_t pad_value(std::size_t channel) const { return pad.size() == 1 ? pad[0] : pad.at(channel); }
};

// "pad0", "pad1" or "torus".
std::string boundary_name(const Boundary& boundary);
Boundary boundary_from_name(std::string_view name);

struct UpdateSchedule {
  bool asynchronous = false;
  double rate = 1.0;
  std::uint64_t seed = 0;

  static UpdateSchedule synchronous() { return {}; }
  static UpdateSchedule async(double rate, std::uint64_t seed) { return {true, rate, seed}; }
};

// 1 for cells that recompute their state at `step_index`. Synchronous
// schedules return all ones; asynchronous masks are i.i.d. Bernoulli(rate).
std::vector<std::uint8_t> update_mask(const UpdateSchedule& schedule, std::size_t height, std::size_t width,
                                      std::size_t step_index);

// Neighborhood order: center, then NW, N, NE, W, E, SW, S, SE.
inline constexpr std::array<std::array<int, 2>, 9> kNeighborOffsets = {{
    {0, 0}, {-1, -1}, {-1, 0}, {-1, 1}, {0, -1}, {0, 1}, {1, -1}, {1, 0}, {1, 1},
}};

// Resolves (i + di, j + dj); returns false for padded (out-of-grid) reads.
bool resolve_neighbor(std::size_t height, std::size_t width, std::size_t i, std::size_t j, int di, int dj,
                      const Boundary& boundary, std::size_t& ni, std::size_t& nj);

template <class T>
std::array<T, 9> neighborhood(const Grid<T>& grid, std::size_t i, std::size_t j, std::size_t c,
                              const Boundary& boundary) {
  std::array<T, 9> out{};
  for (std::size_t r = 0; r < 9; ++r) {
    std::size_t ni = 0, nj = 0;
    if (resolve_neighbor(grid.height, grid.width, i, j, kNeighborOffsets[r][0], kNeighborOffsets[r][1], boundary,
                         ni, nj)) {
      out[r] = grid.at(ni, nj, c);
    } else {
      out[r] = static_cast<T>(boundary.pad_value(c));
    }
  }
  return out;
}

struct CaArchitecture {
  std::size_t channels = 1;
  std::size_t num_kernels = 1;
  std::vector<std::size_t> kernel_widths{8, 4, 2, 1};
  WiringPolicy kernel_wiring = WiringPolicy::CenterNeighbors;
  std::vector<std::size_t> update_widths;
  WiringPolicy update_wiring = WiringPolicy::CoverInputsThenRandom;
  InitSpec kernel_init;
  InitSpec update_init;
  double temperature = 1.0;
};

class CaModel {
 public:
  CaModel() = default;
  CaModel(std::vector<LogicNetwork> kernels, LogicNetwork update, std::size_t channels);

  std::size_t channels() const { return channels_; }
  std::size_t num_kernels() const { return kernels_.size(); }
  std::size_t kernel_bits() const { return kernels_.front().output_width(); }
  std::size_t perception_width() const { return num_kernels() * channels_ * kernel_bits(); }
  std::size_t update_input_width() const { return channels_ + perception_width(); }

  const std::vector<LogicNetwork>& kernels() const { return kernels_; }
  std::vector<LogicNetwork>& kernels() { return kernels_; }
  const LogicNetwork& update() const { return update_; }
  LogicNetwork& update() { return update_; }

  std::size_t num_parameters() const;

 private:
  std::vector<LogicNetwork> kernels_;
  LogicNetwork update_;
  std::size_t channels_ = 0;
};

CaModel build_model(const CaArchitecture& arch, std::uint64_t seed);

nlohmann::json model_to_json(const CaModel& model);
CaModel model_from_json(const nlohmann::json& doc);
void save_model(const CaModel& model, const std::filesystem::path& path);
CaModel load_model(const std::filesystem::path& path);

// Mixture polynomials for every network of a model, computed once per
// parameter update.
struct SoftPlan {
  std::vector<std::vector<GatePolynomial>> kernels;
  std::vector<GatePolynomial> update;
};
SoftPlan make_soft_plan(const CaModel& model);
// Forward plan that evaluates every node with its argmax gate.
SoftPlan make_argmax_plan(const CaModel& model);

// Perception output for every cell, layout [kernel][channel][bit] per cell.
Grid<double> perceive_soft(const CellGrid& grid, const CaModel& model, const Boundary& boundary);
Grid<std::uint8_t> perceive_hard(const BitGrid& grid, const CaModel& model, const Boundary& boundary);

struct StepTape {
  std::vector<ActivationTape> kernels;
  ActivationTape update;
  std::vector<std::uint8_t> mask;
};

// One soft step with an explicit update mask (empty mask = all cells).
CellGrid step_soft(const CellGrid& grid, const CaModel& model, const SoftPlan& plan, const Boundary& boundary,
                   std::span<const std::uint8_t> mask, StepTape* tape);

struct SoftStepResult {
  CellGrid grid;
  StepTape tape;
};
SoftStepResult step_soft(const CellGrid& grid, const CaModel& model, const Boundary& boundary,
                         const UpdateSchedule& schedule, std::size_t step_index = 0);

BitGrid step_hard(const BitGrid& grid, const CaModel& model, const Boundary& boundary,
                  std::span<const std::uint8_t> mask);
BitGrid step_hard(const BitGrid& grid, const CaModel& model, const Boundary& boundary,
                  const UpdateSchedule& schedule, std::size_t step_index = 0);

struct SoftTrajectory {
  Boundary boundary;
  std::vector<CellGrid> grids;
  std::vector<StepTape> tapes;
};

// With straight_through the forward pass runs the argmax gates while
// backprop_through_time still differentiates the relaxed mixture, so the
// loss is measured on the crystallized dynamics.
SoftTrajectory rollout_soft(const CellGrid& grid0, const CaModel& model, std::size_t steps,
                            const Boundary& boundary, const UpdateSchedule& schedule,
                            bool straight_through = false);

// Called after step t produced grid t (1-based); may modify the grid in place.
using StepHook = std::function<void(std::size_t t, BitGrid& grid)>;

std::vector<BitGrid> rollout_hard(const BitGrid& grid0, const CaModel& model, std::size_t steps,
                                  const Boundary& boundary, const UpdateSchedule& schedule,
                                  const StepHook& hook = {});

struct ModelGrad {
  std::vector<std::vector<double>> kernels;  // flat logits gradient per kernel
  std::vector<double> update;
  std::vector<double> initial_grid;  // dL/d grid0, H*W*C

  double squared_norm() const;
};

ModelGrad zero_grad(const CaModel& model);

// Reverse pass over a soft rollout given dL/d(final grid). Accumulates into
// `grad` so several rollouts can share one buffer.
void backprop_through_time(const SoftTrajectory& trajectory, const CaModel& model, const CellGrid& final_grad,
                           ModelGrad& grad);

}  // namespace dlca
