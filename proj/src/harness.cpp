#include "dlca/harness.hpp"

#include <png.h>

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "dlca/error.hpp"
#include "dlca/rng.hpp"

namespace dlca {

namespace fs = std::filesystem;

namespace {

double elapsed_ms(std::chrono::steady_clock::time_point since) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - since).count();
}

std::vector<std::size_t> parse_numbers(std::string_view text, std::string_view what) {
  std::vector<std::size_t> out;
  std::string item;
  std::istringstream in{std::string(text)};
  while (std::getline(in, item, ',')) {
    try {
      std::size_t used = 0;
      const unsigned long long v = std::stoull(item, &used);
      if (used != item.size()) throw std::invalid_argument("trailing characters");
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw ConfigError("bad number '" + item + "' in " + std::string(what));
    }
  }
  return out;
}

// Collects the files a run writes, relative to its output directory.
class Artifacts {
 public:
  explicit Artifacts(fs::path root) : root_(std::move(root)) {}

  fs::path add(const fs::path& relative) {
    files_.push_back(relative.generic_string());
    const fs::path full = root_ / relative;
    if (full.has_parent_path()) fs::create_directories(full.parent_path());
    return full;
  }
  void add_existing(const fs::path& relative) {
    if (fs::exists(root_ / relative)) files_.push_back(relative.generic_string());
  }
  const fs::path& root() const { return root_; }
  std::vector<std::string> files() const { return files_; }

 private:
  fs::path root_;
  std::vector<std::string> files_;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

// Target of `size` x `size` with the source centered on a zero canvas.
Target embed_target(const Target& src, std::size_t size) {
  if (size < src.height || size < src.width) throw ConfigError("canvas smaller than target");
  Target t = src;
  t.height = size;
  t.width = size;
  t.data.assign(size * size * src.channels, 0);
  const std::size_t oi = (size - src.height) / 2;
  const std::size_t oj = (size - src.width) / 2;
  for (std::size_t i = 0; i < src.height; ++i) {
    for (std::size_t j = 0; j < src.width; ++j) {
      for (std::size_t c = 0; c < src.channels; ++c) {
        t.data[((i + oi) * size + j + oj) * src.channels + c] = src.at(i, j, c);
      }
    }
  }
  return t;
}

std::string csv_number(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

}  // namespace

double error_t(const Target& target, const BitGrid& grid) {
  if (target.height != grid.height || target.width != grid.width) throw ShapeError("target and grid sizes differ");
  if (grid.channels < target.channels) throw ShapeError("grid has fewer channels than the target");
  double err = 0.0;
  for (std::size_t i = 0; i < grid.height; ++i) {
    for (std::size_t j = 0; j < grid.width; ++j) {
      for (std::size_t c = 0; c < target.channels; ++c) {
        err += std::abs(static_cast<double>(target.at(i, j, c)) - static_cast<double>(grid.at(i, j, c)));
      }
    }
  }
  return err;
}

void FaultPolicy::validate(std::size_t height, std::size_t width) const {
  switch (kind) {
    case Kind::None:
      return;
    case Kind::Permanent:
    case Kind::Transient:
      if (region.height == 0 || region.width == 0 || region.row + region.height > height ||
          region.col + region.width > width) {
        throw ConfigError("fault region does not fit the grid");
      }
      return;
    case Kind::Roaming:
      if (size == 0 || size > height || size > width) throw ConfigError("roaming fault larger than the grid");
      return;
  }
}

std::optional<Region> FaultPolicy::disabled_region(std::size_t height, std::size_t width, std::size_t t) const {
  switch (kind) {
    case Kind::None:
      return std::nullopt;
    case Kind::Permanent:
      return region;
    case Kind::Transient:
      if (t < revive_step) return region;
      return std::nullopt;
    case Kind::Roaming: {
      if (t < first_step || t >= last_step) return std::nullopt;
      Rng rng(derive_seed(seed, 0x666c74, t));
      Region r;
      r.height = size;
      r.width = size;
      r.row = rng.index(height - size + 1);
      r.col = rng.index(width - size + 1);
      return r;
    }
  }
  return std::nullopt;
}

StepHook FaultPolicy::hook(std::size_t height, std::size_t width) const {
  if (kind == Kind::None) return {};
  validate(height, width);
  FaultPolicy self = *this;
  return [self, height, width](std::size_t t, BitGrid& grid) {
    const auto r = self.disabled_region(height, width, t);
    if (!r) return;
    for (std::size_t i = r->row; i < r->row + r->height; ++i) {
      for (std::size_t j = r->col; j < r->col + r->width; ++j) {
        for (std::size_t c = 0; c < grid.channels; ++c) grid.at(i, j, c) = 0;
      }
    }
  };
}

FaultPolicy fault_from_spec(std::string_view spec) {
  if (spec.empty() || spec == "none") return FaultPolicy::none();
  const auto colon = spec.find(':');
  if (colon == std::string_view::npos) throw ConfigError("bad fault spec '" + std::string(spec) + "'");
  const std::string_view kind = spec.substr(0, colon);
  const auto n = parse_numbers(spec.substr(colon + 1), "fault spec");
  if (kind == "permanent" && n.size() == 4) return FaultPolicy::permanent({n[0], n[1], n[2], n[3]});
  if (kind == "transient" && n.size() == 5) return FaultPolicy::transient({n[0], n[1], n[2], n[3]}, n[4]);
  if (kind == "roaming" && (n.size() == 2 || n.size() == 4)) {
    FaultPolicy f = FaultPolicy::roaming(n[0], n[1]);
    if (n.size() == 4) {
      f.first_step = n[2];
      f.last_step = n[3];
    }
    return f;
  }
  throw ConfigError("bad fault spec '" + std::string(spec) + "'");
}

std::string fault_spec(const FaultPolicy& f) {
  std::ostringstream os;
  switch (f.kind) {
    case FaultPolicy::Kind::None:
      return "none";
    case FaultPolicy::Kind::Permanent:
      os << "permanent:" << f.region.row << ',' << f.region.col << ',' << f.region.height << ',' << f.region.width;
      break;
    case FaultPolicy::Kind::Transient:
      os << "transient:" << f.region.row << ',' << f.region.col << ',' << f.region.height << ',' << f.region.width
         << ',' << f.revive_step;
      break;
    case FaultPolicy::Kind::Roaming:
      os << "roaming:" << f.size << ',' << f.seed;
      if (f.first_step != 0 || f.last_step != SIZE_MAX) os << ',' << f.first_step << ',' << f.last_step;
      break;
  }
  return os.str();
}

std::string_view image_format_name(ImageFormat format) { return format == ImageFormat::Png ? "png" : "pbm"; }

ImageFormat image_format_from_name(std::string_view name) {
  if (name == "png") return ImageFormat::Png;
  if (name == "pbm") return ImageFormat::Pbm;
  throw ConfigError("unknown image format '" + std::string(name) + "'");
}

void write_png(const fs::path& path, std::size_t width, std::size_t height, std::size_t channels,
               const std::vector<std::uint8_t>& pixels) {
  if (channels != 1 && channels != 3) throw ShapeError("png needs 1 or 3 channels");
  if (pixels.size() != width * height * channels) throw ShapeError("png pixel buffer size mismatch");
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw IoError("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, nullptr);
    std::fclose(fp);
    throw IoError("png allocation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw IoError("png encoding failed for " + path.string());
  }
  png_init_io(png, fp);
  png_set_compression_level(png, 9);
  png_set_filter(png, PNG_FILTER_TYPE_BASE, PNG_FILTER_NONE);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
               channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_BASE, PNG_FILTER_TYPE_BASE);
  png_write_info(png, info);
  for (std::size_t y = 0; y < height; ++y) {
    png_write_row(png, const_cast<png_bytep>(pixels.data() + y * width * channels));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  if (std::fclose(fp) != 0) throw IoError("write failed for " + path.string());
}

void write_grid_png(const BitGrid& grid, const fs::path& path, bool rgb, std::size_t scale) {
  if (rgb && grid.channels < 3) throw ShapeError("rgb output needs three channels");
  if (scale == 0) scale = 1;
  const std::size_t ch = rgb ? 3 : 1;
  const std::size_t w = grid.width * scale;
  const std::size_t h = grid.height * scale;
  std::vector<std::uint8_t> px(w * h * ch);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < ch; ++c) {
        px[(y * w + x) * ch + c] = grid.at(y / scale, x / scale, c) ? 255 : 0;
      }
    }
  }
  write_png(path, w, h, ch, px);
}

void write_grid_text(const BitGrid& grid, const fs::path& path, bool rgb) {
  if (rgb && grid.channels < 3) throw ShapeError("rgb output needs three channels");
  std::ostringstream os;
  os << (rgb ? "P3\n" : "P1\n") << grid.width << ' ' << grid.height << '\n';
  if (rgb) os << "1\n";
  for (std::size_t i = 0; i < grid.height; ++i) {
    for (std::size_t j = 0; j < grid.width; ++j) {
      if (j > 0) os << ' ';
      if (rgb) {
        os << int(grid.at(i, j, 0)) << ' ' << int(grid.at(i, j, 1)) << ' ' << int(grid.at(i, j, 2));
      } else {
        os << int(grid.at(i, j, 0));
      }
    }
    os << '\n';
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_text(path, os.str());
}

void write_line_plot(const fs::path& path, const std::vector<PlotSeries>& series, std::size_t width,
                     std::size_t height) {
  static constexpr std::array<std::array<std::uint8_t, 3>, 6> kColors = {{
      {31, 119, 180}, {214, 39, 40}, {44, 160, 44}, {255, 127, 14}, {148, 103, 189}, {23, 190, 207}}};
  std::vector<std::uint8_t> px(width * height * 3, 255);
  auto put = [&](long x, long y, const std::array<std::uint8_t, 3>& c) {
    if (x < 0 || y < 0 || x >= static_cast<long>(width) || y >= static_cast<long>(height)) return;
    std::copy(c.begin(), c.end(), px.begin() + (y * static_cast<long>(width) + x) * 3);
  };
  auto line = [&](long x0, long y0, long x1, long y1, const std::array<std::uint8_t, 3>& c) {
    const long dx = std::abs(x1 - x0), sx = x0 < x1 ? 1 : -1;
    const long dy = -std::abs(y1 - y0), sy = y0 < y1 ? 1 : -1;
    long err = dx + dy;
    while (true) {
      put(x0, y0, c);
      if (x0 == x1 && y0 == y1) break;
      const long e2 = 2 * err;
      if (e2 >= dy) {
        err += dy;
        x0 += sx;
      }
      if (e2 <= dx) {
        err += dx;
        y0 += sy;
      }
    }
  };

  const long left = 40, right = static_cast<long>(width) - 20;
  const long top = 20, bottom = static_cast<long>(height) - 30;
  const std::array<std::uint8_t, 3> black{0, 0, 0}, grey{220, 220, 220};
  std::size_t max_len = 2;
  double max_v = 0.0;
  for (const auto& s : series) {
    max_len = std::max(max_len, s.values.size());
    for (double v : s.values) {
      if (std::isfinite(v)) max_v = std::max(max_v, v);
    }
  }
  if (max_v <= 0.0) max_v = 1.0;
  for (int k = 1; k <= 4; ++k) {
    const long y = bottom - (bottom - top) * k / 4;
    line(left, y, right, y, grey);
  }
  line(left, bottom, right, bottom, black);
  line(left, top, left, bottom, black);
  auto to_x = [&](std::size_t i) {
    return left + static_cast<long>(std::lround(double(i) * double(right - left) / double(max_len - 1)));
  };
  auto to_y = [&](double v) { return bottom - static_cast<long>(std::lround(v / max_v * double(bottom - top))); };
  for (std::size_t s = 0; s < series.size(); ++s) {
    const auto& c = kColors[s % kColors.size()];
    const auto& v = series[s].values;
    for (std::size_t i = 1; i < v.size(); ++i) line(to_x(i - 1), to_y(v[i - 1]), to_x(i), to_y(v[i]), c);
    // Legend swatch, top right.
    const long y0 = top + 4 + static_cast<long>(s) * 12;
    for (long y = y0; y < y0 + 8; ++y) line(right - 24, y, right - 4, y, c);
  }
  write_png(path, width, height, 3, px);
}

std::string frame_name(std::size_t t, ImageFormat format) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "frame_%05zu.%s", t, format == ImageFormat::Png ? "png" : "pbm");
  return buf;
}

std::string config_hash(const TrainConfig& config) {
  const std::string text = config_to_json(config).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

GateCountReport gate_counts(const CircuitModel& model, std::span<const std::size_t> observed_channels) {
  const ModelPruneReport pr = prune_model(model, observed_channels);
  GateCountReport g;
  g.active = pr.active_before;
  g.total = pr.total_before;
  g.pruned_active = pr.active_after;
  g.pruned_total = pr.total_after;
  g.live_channels = pr.live_channels;
  return g;
}

namespace {

nlohmann::json optional_json(const std::optional<std::size_t>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

}  // namespace

nlohmann::json RunReport::to_json() const {
  nlohmann::json rollouts_json = nlohmann::json::array();
  for (const auto& r : rollouts) {
    rollouts_json.push_back({{"name", r.name},
                             {"size", r.size},
                             {"steps", r.steps},
                             {"error_t", r.error},
                             {"final_accuracy", r.final_accuracy}});
  }
  nlohmann::json j = {
      {"format_version", kCheckpointVersion},
      {"kind", "run_report"},
      {"experiment", experiment},
      {"seed", seed},
      {"config_hash", config_hash},
      {"trained", trained},
      {"epochs_run", epochs_run},
      {"solved", solved},
      {"train_wall_ms", train_wall_ms},
      {"total_wall_ms", total_wall_ms},
      {"rollouts", rollouts_json},
      {"gates",
       {{"active", gates.active},
        {"total", gates.total},
        {"pruned_active", gates.pruned_active},
        {"pruned_total", gates.pruned_total},
        {"live_channels", gates.live_channels},
        {"reference_active", optional_json(gates.reference_active)},
        {"reference_pruned", optional_json(gates.reference_pruned)}}},
      {"files", files},
  };
  if (gol_score) j["gol_score"] = *gol_score;
  if (gol_oracle_match) j["gol_oracle_match"] = *gol_oracle_match;
  return j;
}

namespace {

struct RolloutPlan {
  std::string name;
  std::size_t size = 0;
  std::size_t steps = 0;
  std::vector<std::size_t> frames;
  Target target;  // empty data: no error series
};

void write_frame(Artifacts& art, const std::string& dir, const BitGrid& g, std::size_t t, ImageFormat format,
                 bool rgb) {
  const fs::path rel = fs::path("frames") / dir / frame_name(t, format);
  const fs::path full = art.add(rel);
  if (format == ImageFormat::Png) {
    write_grid_png(g, full, rgb);
  } else {
    write_grid_text(g, full, rgb);
  }
}

std::vector<std::size_t> reference_observed(const TrainConfig& config) {
  if (config.target == "colored_grid") return {0, 1, 2};
  return {0};
}

}  // namespace

RunReport run_experiment(std::string_view name, const ExperimentOptions& options) {
  const auto start = std::chrono::steady_clock::now();
  const TrainConfig config = options.config ? *options.config : default_config(name);
  if (config.experiment != name) {
    throw ConfigError("config is for experiment '" + config.experiment + "', not '" + std::string(name) + "'");
  }
  const bool is_gol = name == "gol";
  Artifacts art(options.out_dir);
  fs::create_directories(options.out_dir);

  RunReport report;
  report.experiment = std::string(name);
  report.seed = config.seed;
  report.config_hash = config_hash(config);

  write_json_file(config_to_json(config), art.add("config.json"));

  CaModel model;
  if (!options.checkpoint.empty()) {
    model = load_model(options.checkpoint);
  } else {
    TrainOptions topts;
    topts.out_dir = options.out_dir;
    if (options.verbose) {
      topts.on_step = [](const LossRecord& r) {
        if (r.step % 50 == 0) std::cerr << "step " << r.step << " loss " << r.loss << '\n';
      };
    }
    TrainResult tr = train(config, topts);
    report.trained = true;
    report.epochs_run = tr.epochs_run;
    report.solved = tr.solved;
    report.train_wall_ms = tr.history.empty() ? 0.0 : tr.history.back().wall_ms;
    model = std::move(tr.model);
    art.add_existing("model.json");
    art.add_existing("loss_history.csv");
    art.add_existing("checkpoint.json");
  }
  if (model.channels() != config.arch.channels) throw CheckpointError("checkpoint does not match the config");

  const CircuitModel circuits = crystallize(model);
  const auto observed = reference_observed(config);
  report.gates = gate_counts(circuits, observed);
  if (name == "gol") {
    report.gates.reference_active = 336;
  } else if (name == "checkerboard") {
    report.gates.reference_active = 22;
    report.gates.reference_pruned = 5;
  } else if (name == "lizard") {
    report.gates.reference_active = 577;
  } else if (name == "colored_grid") {
    report.gates.reference_active = 465;
  }

  // Netlists: the update circuit pruned to the observed channels, plus the
  // raw update circuit and kernels.
  const ModelPruneReport pruned = prune_model(circuits, observed);
  export_circuit(circuits.update, CircuitFormat::NetlistJson, art.add("netlist/update.json"));
  export_circuit(pruned.update, CircuitFormat::NetlistJson, art.add("netlist/update_pruned.json"));
  export_circuit(pruned.update, CircuitFormat::Dot, art.add("netlist/update_pruned.dot"));
  for (std::size_t k = 0; k < circuits.kernels.size(); ++k) {
    export_circuit(circuits.kernels[k], CircuitFormat::NetlistJson,
                   art.add("netlist/kernel_" + std::to_string(k) + ".json"));
  }

  const Boundary boundary = options.boundary ? *options.boundary
                            : is_gol         ? Boundary::toroidal()
                                             : config.boundary;
  const double rate = options.async_rate > 0.0 ? options.async_rate : 0.0;

  std::vector<RolloutPlan> plans;
  if (is_gol) {
    report.gol_score = gol_hard_score(model);
    plans.push_back({"gol_32", 32, 90, {0, 60, 84}, {}});
  } else {
    const Target target = make_target(config.target, config.grid_size);
    if (name == "checkerboard") {
      plans.push_back({"train_scale", config.grid_size, config.steps, {0, 10, 20}, target});
      const std::size_t big = 4 * config.grid_size;
      plans.push_back({"generalization", big, 4 * config.steps, {0, 40, 80}, make_target(config.target, big)});
    } else if (name == "lizard") {
      plans.push_back({"train_scale", config.grid_size, config.steps, {0, config.steps / 2, config.steps}, target});
      plans.push_back({"generalization", 2 * config.grid_size, 13, {0, 6, 13}, embed_target(target, 2 * config.grid_size)});
    } else {
      plans.push_back({"train_scale", config.grid_size, config.steps, {0, config.steps / 2, config.steps}, target});
    }
  }
  if (options.frames) {
    for (auto& p : plans) p.frames = *options.frames;
  }

  const bool rgb = config.target == "colored_grid";
  std::ostringstream csv;
  csv << "rollout,t,error\n";
  bool oracle_ok = true;
  bool oracle_checked = false;
  for (std::size_t pi = 0; pi < plans.size(); ++pi) {
    const RolloutPlan& plan = plans[pi];
    const std::uint64_t seed = derive_seed(config.seed, 0x696e6665, pi);
    const BitGrid g0 = is_gol ? initial_grid(InitPolicy::bernoulli(0.5), plan.size, plan.size, 1, seed)
                              : initial_grid(config.init_state, plan.size, plan.size, model.channels(), seed);
    const UpdateSchedule schedule =
        rate > 0.0 ? UpdateSchedule::async(rate, derive_seed(seed, 0x61737963)) : UpdateSchedule::synchronous();
    const auto traj =
        hard_rollout_packed(circuits, g0, plan.steps, boundary, schedule, options.fault.hook(plan.size, plan.size));

    RolloutReport rr;
    rr.name = plan.name;
    rr.size = plan.size;
    rr.steps = plan.steps;
    if (is_gol) {
      // The reference rule has no notion of masks or faults.
      if (!schedule.asynchronous && options.fault.kind == FaultPolicy::Kind::None) {
        oracle_checked = true;
        BitGrid ref = g0;
        for (std::size_t t = 1; t < traj.size(); ++t) {
          ref = gol_step_reference(ref, boundary);
          oracle_ok = oracle_ok && ref == traj[t];
        }
      }
    } else {
      for (std::size_t t = 0; t < traj.size(); ++t) {
        rr.error.push_back(error_t(plan.target, traj[t]));
        csv << plan.name << ',' << t << ',' << csv_number(rr.error.back()) << '\n';
      }
      rr.final_accuracy = pixel_accuracy(traj.back(), plan.target);
    }
    if (options.write_frames) {
      for (std::size_t t : plan.frames) {
        if (t < traj.size()) write_frame(art, plan.name, traj[t], t, options.format, rgb);
      }
    }
    report.rollouts.push_back(std::move(rr));
  }
  if (oracle_checked) report.gol_oracle_match = oracle_ok;
  if (!is_gol) {
    write_text(art.add("error_t.csv"), csv.str());
  }

  report.total_wall_ms = elapsed_ms(start);
  art.add("report.json");
  report.files = art.files();
  write_json_file(report.to_json(), options.out_dir / "report.json");
  return report;
}

nlohmann::json AsyncStudyReport::to_json() const {
  return {{"format_version", kCheckpointVersion},
          {"kind", "async_study"},
          {"sync_errors", sync_errors},
          {"async_errors", async_errors},
          {"sync_mean", sync_mean},
          {"async_mean", async_mean},
          {"sync_mean_after_fault", sync_mean_after_fault},
          {"async_mean_after_fault", async_mean_after_fault},
          {"seeds", sync_errors.size()},
          {"seeds_async_lower", seeds_async_lower},
          {"async_lower_on_average", async_mean_after_fault < sync_mean_after_fault},
          {"files", files}};
}

AsyncStudyReport run_async_study(const CaModel& sync_model, const CaModel& async_model,
                                 const AsyncStudyOptions& options) {
  if (sync_model.channels() != async_model.channels()) throw CheckpointError("models have different channel counts");
  if (options.seeds.empty()) throw ConfigError("async study needs at least one seed");
  if (options.fault_first > options.steps) throw ConfigError("fault window starts after the rollout ends");
  const Target target = make_target(options.target, options.grid_size);
  const CircuitModel sync_c = crystallize(sync_model);
  const CircuitModel async_c = crystallize(async_model);
  Artifacts art(options.out_dir);
  fs::create_directories(options.out_dir);

  AsyncStudyReport rep;
  const std::size_t n = options.seeds.size();
  rep.sync_mean.assign(options.steps + 1, 0.0);
  rep.async_mean.assign(options.steps + 1, 0.0);
  for (std::uint64_t seed : options.seeds) {
    const BitGrid g0 = initial_grid(InitPolicy::bernoulli(0.5), options.grid_size, options.grid_size,
                                    sync_model.channels(), derive_seed(seed, 0x696e6974));
    const UpdateSchedule schedule = UpdateSchedule::async(options.rate, derive_seed(seed, 0x61737963));
    FaultPolicy fault = FaultPolicy::roaming(options.fault_size, derive_seed(seed, 0x666c74));
    fault.first_step = options.fault_first;
    fault.last_step = options.fault_last;
    const StepHook hook = fault.hook(options.grid_size, options.grid_size);

    double sync_sum = 0.0, async_sum = 0.0;
    for (int which = 0; which < 2; ++which) {
      const auto traj = hard_rollout_packed(which == 0 ? sync_c : async_c, g0, options.steps, options.boundary,
                                            schedule, hook);
      std::vector<double> err;
      for (const auto& g : traj) err.push_back(error_t(target, g));
      auto& mean = which == 0 ? rep.sync_mean : rep.async_mean;
      double& sum = which == 0 ? sync_sum : async_sum;
      for (std::size_t t = 0; t < err.size(); ++t) {
        mean[t] += err[t] / static_cast<double>(n);
        if (t >= options.fault_first) sum += err[t];
      }
      (which == 0 ? rep.sync_errors : rep.async_errors).push_back(std::move(err));
    }
    if (async_sum < sync_sum) ++rep.seeds_async_lower;
  }
  const std::size_t after = options.steps + 1 - options.fault_first;
  for (std::size_t t = options.fault_first; t <= options.steps; ++t) {
    rep.sync_mean_after_fault += rep.sync_mean[t] / static_cast<double>(after);
    rep.async_mean_after_fault += rep.async_mean[t] / static_cast<double>(after);
  }

  std::ostringstream mean_csv;
  mean_csv << "t,sync_mean,async_mean\n";
  for (std::size_t t = 0; t <= options.steps; ++t) {
    mean_csv << t << ',' << csv_number(rep.sync_mean[t]) << ',' << csv_number(rep.async_mean[t]) << '\n';
  }
  write_text(art.add("error_mean.csv"), mean_csv.str());
  std::ostringstream seed_csv;
  seed_csv << "seed,model,t,error\n";
  for (std::size_t s = 0; s < n; ++s) {
    for (int which = 0; which < 2; ++which) {
      const auto& err = (which == 0 ? rep.sync_errors : rep.async_errors)[s];
      for (std::size_t t = 0; t < err.size(); ++t) {
        seed_csv << options.seeds[s] << ',' << (which == 0 ? "sync" : "async") << ',' << t << ','
                 << csv_number(err[t]) << '\n';
      }
    }
  }
  write_text(art.add("error_per_seed.csv"), seed_csv.str());
  write_line_plot(art.add("error_plot.png"), {{"sync", rep.sync_mean}, {"async", rep.async_mean}});
  art.add("report.json");
  rep.files = art.files();
  write_json_file(rep.to_json(), options.out_dir / "report.json");
  return rep;
}

}  // namespace dlca
