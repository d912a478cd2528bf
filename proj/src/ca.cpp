#include "dlca/ca.hpp"

#include <string>

#include "dlca/error.hpp"
#include "dlca/rng.hpp"

namespace dlca {

namespace {

void check_grid(std::size_t channels, const CaModel& model) {
  if (channels != model.channels()) {
    throw ShapeError("grid has " + std::to_string(channels) + " channels, model expects " +
                     std::to_string(model.channels()));
  }
}

// Kernel input matrix [9][H*W*C], column = cell * C + c.
template <class T>
std::vector<T> gather_neighborhoods(const Grid<T>& grid, const Boundary& boundary) {
  const std::size_t n = grid.values.size();
  const std::size_t C = grid.channels;
  std::vector<T> out(9 * n);
  for (std::size_t r = 0; r < 9; ++r) {
    const int di = kNeighborOffsets[r][0];
    const int dj = kNeighborOffsets[r][1];
    T* row = out.data() + r * n;
    for (std::size_t i = 0; i < grid.height; ++i) {
      for (std::size_t j = 0; j < grid.width; ++j) {
        std::size_t ni = 0, nj = 0;
        const std::size_t col = (i * grid.width + j) * C;
        if (resolve_neighbor(grid.height, grid.width, i, j, di, dj, boundary, ni, nj)) {
          const T* src = grid.values.data() + (ni * grid.width + nj) * C;
          for (std::size_t c = 0; c < C; ++c) row[col + c] = src[c];
        } else {
          for (std::size_t c = 0; c < C; ++c) row[col + c] = static_cast<T>(boundary.pad_value(c));
        }
      }
    }
  }
  return out;
}

// Writes the state rows and one kernel's perception rows of the update
// input matrix [C + K*C*bits][H*W].
template <class T>
void place_state_rows(const Grid<T>& grid, std::vector<T>& update_in) {
  const std::size_t cells = grid.cells();
  const std::size_t C = grid.channels;
  for (std::size_t cell = 0; cell < cells; ++cell) {
    for (std::size_t c = 0; c < C; ++c) update_in[c * cells + cell] = grid.values[cell * C + c];
  }
}

template <class T>
void place_kernel_rows(std::span<const T> kernel_out, std::size_t k, std::size_t bits, std::size_t cells,
                       std::size_t C, std::vector<T>& update_in) {
  const std::size_t n = cells * C;
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t b = 0; b < bits; ++b) {
      T* dst = update_in.data() + (C + (k * C + c) * bits + b) * cells;
      const T* src = kernel_out.data() + b * n + c;
      for (std::size_t cell = 0; cell < cells; ++cell) dst[cell] = src[cell * C];
    }
  }
}

template <class T>
Grid<T> perception_grid(std::span<const T> update_in, std::size_t height, std::size_t width, std::size_t C,
                        std::size_t P) {
  Grid<T> out(height, width, P);
  const std::size_t cells = height * width;
  for (std::size_t p = 0; p < P; ++p) {
    for (std::size_t cell = 0; cell < cells; ++cell) out.values[cell * P + p] = update_in[(C + p) * cells + cell];
  }
  return out;
}

std::vector<double> soft_update_input(const CellGrid& grid, const CaModel& model, const SoftPlan& plan,
                                      const Boundary& boundary, std::vector<ActivationTape>& kernel_tapes) {
  const std::size_t cells = grid.cells();
  const std::size_t C = grid.channels;
  const std::size_t bits = model.kernel_bits();
  const std::vector<double> x = gather_neighborhoods(grid, boundary);
  std::vector<double> update_in(model.update_input_width() * cells);
  place_state_rows(grid, update_in);
  kernel_tapes.resize(model.num_kernels());
  for (std::size_t k = 0; k < model.num_kernels(); ++k) {
    forward_soft_batch(model.kernels()[k], plan.kernels[k], x, cells * C, kernel_tapes[k]);
    place_kernel_rows<double>(kernel_tapes[k].output(), k, bits, cells, C, update_in);
  }
  return update_in;
}

std::vector<std::uint8_t> hard_update_input(const BitGrid& grid, const CaModel& model, const Boundary& boundary) {
  const std::size_t cells = grid.cells();
  const std::size_t C = grid.channels;
  const std::size_t bits = model.kernel_bits();
  const std::vector<std::uint8_t> x = gather_neighborhoods(grid, boundary);
  std::vector<std::uint8_t> update_in(model.update_input_width() * cells);
  place_state_rows(grid, update_in);
  for (std::size_t k = 0; k < model.num_kernels(); ++k) {
    const auto out = forward_hard_batch(model.kernels()[k], x, cells * C);
    place_kernel_rows<std::uint8_t>(out, k, bits, cells, C, update_in);
  }
  return update_in;
}

}  // namespace

CellGrid to_soft(const BitGrid& grid) {
  CellGrid out(grid.height, grid.width, grid.channels);
  for (std::size_t i = 0; i < grid.values.size(); ++i) out.values[i] = grid.values[i];
  return out;
}

BitGrid to_hard(const CellGrid& grid) {
  BitGrid out(grid.height, grid.width, grid.channels);
  for (std::size_t i = 0; i < grid.values.size(); ++i) out.values[i] = grid.values[i] >= 0.5 ? 1 : 0;
  return out;
}

std::vector<std::uint8_t> update_mask(const UpdateSchedule& schedule, std::size_t height, std::size_t width,
                                      std::size_t step_index) {
  std::vector<std::uint8_t> mask(height * width, 1);
  if (!schedule.asynchronous) return mask;
  if (!(schedule.rate > 0.0 && schedule.rate <= 1.0)) throw ConfigError("async rate must be in (0, 1]");
  Rng rng(derive_seed(schedule.seed, 0x6d61736b, step_index));
  for (auto& m : mask) m = rng.uniform() < schedule.rate ? 1 : 0;
  return mask;
}

bool resolve_neighbor(std::size_t height, std::size_t width, std::size_t i, std::size_t j, int di, int dj,
                      const Boundary& boundary, std::size_t& ni, std::size_t& nj) {
  const auto h = static_cast<long long>(height);
  const auto w = static_cast<long long>(width);
  long long y = static_cast<long long>(i) + di;
  long long x = static_cast<long long>(j) + dj;
  if (boundary.mode == Boundary::Mode::Toroidal) {
    y = ((y % h) + h) % h;
    x = ((x % w) + w) % w;
  } else if (y < 0 || y >= h || x < 0 || x >= w) {
    return false;
  }
  ni = static_cast<std::size_t>(y);
  nj = static_cast<std::size_t>(x);
  return true;
}

std::string boundary_name(const Boundary& b) {
  if (b.mode == Boundary::Mode::Toroidal) return "torus";
  return b.pad_value(0) ? "pad1" : "pad0";
}

Boundary boundary_from_name(std::string_view name) {
  if (name == "pad0") return Boundary::constant(0);
  if (name == "pad1") return Boundary::constant(1);
  if (name == "torus") return Boundary::toroidal();
  throw ConfigError("unknown boundary '" + std::string(name) + "' (expected pad0, pad1 or torus)");
}

CaModel::CaModel(std::vector<LogicNetwork> kernels, LogicNetwork update, std::size_t channels)
    : kernels_(std::move(kernels)), update_(std::move(update)), channels_(channels) {
  if (channels_ == 0) throw ConfigError("model needs at least one channel");
  if (kernels_.empty()) throw ConfigError("model needs at least one perception kernel");
  for (const auto& k : kernels_) {
    if (k.input_width() != 9) throw ShapeError("perception kernels must take 9 inputs");
    if (k.output_width() != kernels_.front().output_width()) {
      throw ShapeError("all perception kernels must have the same output width");
    }
  }
  if (update_.input_width() != update_input_width()) {
    throw ShapeError("update network input width " + std::to_string(update_.input_width()) + " != " +
                     std::to_string(update_input_width()));
  }
  if (update_.output_width() != channels_) throw ShapeError("update network must output one bit per channel");
}

std::size_t CaModel::num_parameters() const {
  std::size_t n = update_.logits().size();
  for (const auto& k : kernels_) n += k.logits().size();
  return n;
}

CaModel build_model(const CaArchitecture& arch, std::uint64_t seed) {
  if (arch.update_widths.empty() || arch.update_widths.back() != arch.channels) {
    throw ConfigError("update network's last layer width must equal the channel count");
  }
  std::vector<LogicNetwork> kernels;
  for (std::size_t k = 0; k < arch.num_kernels; ++k) {
    auto wiring = build_wiring(9, arch.kernel_widths, arch.kernel_wiring, derive_seed(seed, 0x6b77, k));
    kernels.push_back(init_params(std::move(wiring), arch.kernel_init, derive_seed(seed, 0x6b69, k), arch.temperature));
  }
  const std::size_t bits = arch.kernel_widths.back();
  const std::size_t update_in = arch.channels + arch.num_kernels * arch.channels * bits;
  auto wiring = build_wiring(update_in, arch.update_widths, arch.update_wiring, derive_seed(seed, 0x7577));
  auto update = init_params(std::move(wiring), arch.update_init, derive_seed(seed, 0x7569), arch.temperature);
  return CaModel(std::move(kernels), std::move(update), arch.channels);
}

nlohmann::json model_to_json(const CaModel& model) {
  nlohmann::json kernels = nlohmann::json::array();
  for (const auto& k : model.kernels()) kernels.push_back(network_to_json(k));
  return {
      {"format_version", kCheckpointVersion},
      {"kind", "ca_model"},
      {"channels", model.channels()},
      {"kernels", kernels},
      {"update", network_to_json(model.update())},
  };
}

CaModel model_from_json(const nlohmann::json& doc) {
  try {
    const int version = doc.at("format_version").get<int>();
    if (version != kCheckpointVersion) {
      throw CheckpointError("model format_version " + std::to_string(version) + " is not supported");
    }
    if (doc.at("kind").get<std::string>() != "ca_model") throw CheckpointError("corrupt model: kind is not ca_model");
    std::vector<LogicNetwork> kernels;
    for (const auto& k : doc.at("kernels")) kernels.push_back(network_from_json(k));
    return CaModel(std::move(kernels), network_from_json(doc.at("update")), doc.at("channels").get<std::size_t>());
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("corrupt model: ") + e.what());
  } catch (const CheckpointError&) {
    throw;
  } catch (const Error& e) {
    throw CheckpointError(std::string("corrupt model: ") + e.what());
  }
}

void save_model(const CaModel& model, const std::filesystem::path& path) { write_json_file(model_to_json(model), path); }

CaModel load_model(const std::filesystem::path& path) { return model_from_json(read_json_file(path)); }

SoftPlan make_soft_plan(const CaModel& model) {
  SoftPlan plan;
  for (const auto& k : model.kernels()) plan.kernels.push_back(mixture_polynomials(k));
  plan.update = mixture_polynomials(model.update());
  return plan;
}

SoftPlan make_argmax_plan(const CaModel& model) {
  SoftPlan plan;
  for (const auto& k : model.kernels()) plan.kernels.push_back(argmax_polynomials(k));
  plan.update = argmax_polynomials(model.update());
  return plan;
}

Grid<double> perceive_soft(const CellGrid& grid, const CaModel& model, const Boundary& boundary) {
  check_grid(grid.channels, model);
  std::vector<ActivationTape> tapes;
  const auto update_in = soft_update_input(grid, model, make_soft_plan(model), boundary, tapes);
  return perception_grid<double>(update_in, grid.height, grid.width, grid.channels, model.perception_width());
}

Grid<std::uint8_t> perceive_hard(const BitGrid& grid, const CaModel& model, const Boundary& boundary) {
  check_grid(grid.channels, model);
  const auto update_in = hard_update_input(grid, model, boundary);
  return perception_grid<std::uint8_t>(update_in, grid.height, grid.width, grid.channels,
                                       model.perception_width());
}

CellGrid step_soft(const CellGrid& grid, const CaModel& model, const SoftPlan& plan, const Boundary& boundary,
                   std::span<const std::uint8_t> mask, StepTape* tape) {
  check_grid(grid.channels, model);
  const std::size_t cells = grid.cells();
  const std::size_t C = grid.channels;
  if (!mask.empty() && mask.size() != cells) throw ShapeError("update mask size mismatch");

  StepTape local;
  StepTape& t = tape ? *tape : local;
  const auto update_in = soft_update_input(grid, model, plan, boundary, t.kernels);
  forward_soft_batch(model.update(), plan.update, update_in, cells, t.update);
  t.mask.assign(mask.begin(), mask.end());

  CellGrid next = grid;
  const auto out = t.update.output();
  for (std::size_t cell = 0; cell < cells; ++cell) {
    if (!mask.empty() && !mask[cell]) continue;
    for (std::size_t c = 0; c < C; ++c) next.values[cell * C + c] = out[c * cells + cell];
  }
  return next;
}

SoftStepResult step_soft(const CellGrid& grid, const CaModel& model, const Boundary& boundary,
                         const UpdateSchedule& schedule, std::size_t step_index) {
  SoftStepResult r;
  const auto mask = update_mask(schedule, grid.height, grid.width, step_index);
  r.grid = step_soft(grid, model, make_soft_plan(model), boundary, mask, &r.tape);
  return r;
}

BitGrid step_hard(const BitGrid& grid, const CaModel& model, const Boundary& boundary,
                  std::span<const std::uint8_t> mask) {
  check_grid(grid.channels, model);
  const std::size_t cells = grid.cells();
  const std::size_t C = grid.channels;
  if (!mask.empty() && mask.size() != cells) throw ShapeError("update mask size mismatch");
  const auto update_in = hard_update_input(grid, model, boundary);
  const auto out = forward_hard_batch(model.update(), update_in, cells);
  BitGrid next = grid;
  for (std::size_t cell = 0; cell < cells; ++cell) {
    if (!mask.empty() && !mask[cell]) continue;
    for (std::size_t c = 0; c < C; ++c) next.values[cell * C + c] = out[c * cells + cell];
  }
  return next;
}

BitGrid step_hard(const BitGrid& grid, const CaModel& model, const Boundary& boundary,
                  const UpdateSchedule& schedule, std::size_t step_index) {
  return step_hard(grid, model, boundary, update_mask(schedule, grid.height, grid.width, step_index));
}

SoftTrajectory rollout_soft(const CellGrid& grid0, const CaModel& model, std::size_t steps,
                            const Boundary& boundary, const UpdateSchedule& schedule, bool straight_through) {
  if (steps == 0) throw ConfigError("rollout needs at least one step");
  SoftTrajectory traj;
  traj.boundary = boundary;
  traj.grids.reserve(steps + 1);
  traj.tapes.resize(steps);
  traj.grids.push_back(grid0);
  const SoftPlan plan = straight_through ? make_argmax_plan(model) : make_soft_plan(model);
  for (std::size_t t = 0; t < steps; ++t) {
    const auto mask = schedule.asynchronous ? update_mask(schedule, grid0.height, grid0.width, t)
                                            : std::vector<std::uint8_t>{};
    traj.grids.push_back(step_soft(traj.grids.back(), model, plan, boundary, mask, &traj.tapes[t]));
  }
  return traj;
}

std::vector<BitGrid> rollout_hard(const BitGrid& grid0, const CaModel& model, std::size_t steps,
                                  const Boundary& boundary, const UpdateSchedule& schedule, const StepHook& hook) {
  if (steps == 0) throw ConfigError("rollout needs at least one step");
  std::vector<BitGrid> out;
  out.reserve(steps + 1);
  out.push_back(grid0);
  for (std::size_t t = 0; t < steps; ++t) {
    BitGrid next = step_hard(out.back(), model, boundary, schedule, t);
    if (hook) hook(t + 1, next);
    out.push_back(std::move(next));
  }
  return out;
}

double ModelGrad::squared_norm() const {
  double s = 0.0;
  for (const auto& k : kernels) {
    for (double v : k) s += v * v;
  }
  for (double v : update) s += v * v;
  return s;
}

ModelGrad zero_grad(const CaModel& model) {
  ModelGrad g;
  for (const auto& k : model.kernels()) g.kernels.emplace_back(k.logits().size(), 0.0);
  g.update.assign(model.update().logits().size(), 0.0);
  return g;
}

void backprop_through_time(const SoftTrajectory& trajectory, const CaModel& model, const CellGrid& final_grad,
                           ModelGrad& grad) {
  if (trajectory.tapes.empty() || trajectory.grids.size() != trajectory.tapes.size() + 1) {
    throw ShapeError("trajectory has no soft tapes");
  }
  const CellGrid& first = trajectory.grids.front();
  if (final_grad.height != first.height || final_grad.width != first.width ||
      final_grad.channels != first.channels) {
    throw ShapeError("final gradient shape does not match the trajectory");
  }
  check_grid(first.channels, model);
  if (grad.kernels.size() != model.num_kernels()) throw ShapeError("gradient buffer does not match the model");

  const std::size_t H = first.height;
  const std::size_t W = first.width;
  const std::size_t C = first.channels;
  const std::size_t cells = H * W;
  const std::size_t n = cells * C;
  const std::size_t bits = model.kernel_bits();
  const Boundary& boundary = trajectory.boundary;
  const SoftPlan plan = make_soft_plan(model);

  std::vector<std::vector<GatePolynomial>> kernel_poly(model.num_kernels());
  for (std::size_t k = 0; k < model.num_kernels(); ++k) kernel_poly[k].assign(model.kernels()[k].num_nodes(), {});
  std::vector<GatePolynomial> update_poly(model.update().num_nodes());

  std::vector<double> grad_next = final_grad.values;
  std::vector<double> grad_grid(n);
  std::vector<double> out_grad(C * cells);
  std::vector<double> update_in_grad(model.update_input_width() * cells);
  std::vector<double> kernel_out_grad(bits * n);
  std::vector<double> kernel_in_grad(9 * n);

  for (std::size_t t = trajectory.tapes.size(); t-- > 0;) {
    const StepTape& tape = trajectory.tapes[t];
    const bool masked = !tape.mask.empty();

    // Frozen cells copy their state forward, so their gradient passes
    // straight through; updated cells route it into the update network.
    for (std::size_t cell = 0; cell < cells; ++cell) {
      const bool updated = !masked || tape.mask[cell];
      for (std::size_t c = 0; c < C; ++c) {
        const double g = grad_next[cell * C + c];
        out_grad[c * cells + cell] = updated ? g : 0.0;
        grad_grid[cell * C + c] = updated ? 0.0 : g;
      }
    }

    backward_batch(model.update(), plan.update, tape.update, out_grad, update_poly, update_in_grad);
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t cell = 0; cell < cells; ++cell) grad_grid[cell * C + c] += update_in_grad[c * cells + cell];
    }

    for (std::size_t k = 0; k < model.num_kernels(); ++k) {
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t b = 0; b < bits; ++b) {
          const double* src = update_in_grad.data() + (C + (k * C + c) * bits + b) * cells;
          double* dst = kernel_out_grad.data() + b * n + c;
          for (std::size_t cell = 0; cell < cells; ++cell) dst[cell * C] = src[cell];
        }
      }
      backward_batch(model.kernels()[k], plan.kernels[k], tape.kernels[k], kernel_out_grad, kernel_poly[k],
                     kernel_in_grad);
      // Transpose of the neighborhood gather.
      for (std::size_t r = 0; r < 9; ++r) {
        const double* row = kernel_in_grad.data() + r * n;
        for (std::size_t i = 0; i < H; ++i) {
          for (std::size_t j = 0; j < W; ++j) {
            std::size_t ni = 0, nj = 0;
            if (!resolve_neighbor(H, W, i, j, kNeighborOffsets[r][0], kNeighborOffsets[r][1], boundary, ni, nj)) {
              continue;
            }
            const double* src = row + (i * W + j) * C;
            double* dst = grad_grid.data() + (ni * W + nj) * C;
            for (std::size_t c = 0; c < C; ++c) dst[c] += src[c];
          }
        }
      }
    }
    grad_next.swap(grad_grid);
  }

  for (std::size_t k = 0; k < model.num_kernels(); ++k) {
    accumulate_logit_grads(model.kernels()[k], kernel_poly[k], grad.kernels[k]);
  }
  accumulate_logit_grads(model.update(), update_poly, grad.update);
  grad.initial_grid = std::move(grad_next);
}

}  // namespace dlca
