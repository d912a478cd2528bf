#include <doctest.h>

#include <png.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "dlca/error.hpp"
#include "dlca/harness.hpp"
#include "support.hpp"

using namespace dlca;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("dlca_test_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Decodes with libpng's simplified API into 8-bit gray or RGB.
std::vector<std::uint8_t> read_png(const fs::path& p, std::size_t& w, std::size_t& h, bool rgb) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  REQUIRE(png_image_begin_read_from_file(&img, p.string().c_str()) != 0);
  img.format = rgb ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(img));
  REQUIRE(png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr) != 0);
  w = img.width;
  h = img.height;
  return buf;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(DLCA_CLI) + " " + args + " > /dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

TrainConfig tiny_checkerboard() {
  TrainConfig c = default_config("checkerboard");
  c.arch.channels = 2;
  c.arch.num_kernels = 2;
  c.arch.kernel_widths = {4, 2};
  c.arch.update_widths = {16, 8, 2};
  c.grid_size = 8;
  c.steps = 4;
  c.epochs = 3;
  c.eval_every = 0;
  return c;
}

}  // namespace

TEST_CASE("error_t examples") {
  const Target cb = make_target("checkerboard", 64);
  BitGrid exact(64, 64, 2);
  BitGrid wrong(64, 64, 2);
  for (std::size_t i = 0; i < 64; ++i) {
    for (std::size_t j = 0; j < 64; ++j) {
      exact.at(i, j, 0) = cb.at(i, j);
      wrong.at(i, j, 0) = 1 - cb.at(i, j);
      wrong.at(i, j, 1) = 1;
    }
  }
  CHECK(dlca::error_t(cb, exact) == 0.0);
  CHECK(dlca::error_t(cb, wrong) == 4096.0);
  BitGrid one = exact;
  one.at(10, 20, 0) ^= 1;
  CHECK(dlca::error_t(cb, one) == 1.0);

  const Target rgb = make_target("colored_grid", 14);
  BitGrid zero(14, 14, 4);
  std::size_t ones = 0;
  for (auto v : rgb.data) ones += v;
  CHECK(dlca::error_t(rgb, zero) == static_cast<double>(ones));

  CHECK_THROWS_AS(dlca::error_t(cb, BitGrid(16, 16, 1)), ShapeError);
}

TEST_CASE("error_t equals mismatch count against pixel accuracy") {
  Rng rng(3);
  const Target cb = make_target("checkerboard", 16);
  for (int trial = 0; trial < 20; ++trial) {
    const BitGrid g = dlca::test::random_grid(rng, 16, 16, 3);
    CHECK(dlca::error_t(cb, g) == doctest::Approx(256.0 * (1.0 - pixel_accuracy(g, cb))));
  }
}

TEST_CASE("fault spec parsing") {
  CHECK(fault_from_spec("none").kind == FaultPolicy::Kind::None);
  const FaultPolicy p = fault_from_spec("permanent:1,2,3,4");
  CHECK(p.kind == FaultPolicy::Kind::Permanent);
  CHECK(p.region.row == 1);
  CHECK(p.region.col == 2);
  CHECK(p.region.height == 3);
  CHECK(p.region.width == 4);
  const FaultPolicy t = fault_from_spec("transient:0,0,5,5,12");
  CHECK(t.kind == FaultPolicy::Kind::Transient);
  CHECK(t.revive_step == 12);
  const FaultPolicy r = fault_from_spec("roaming:10,7,50,100");
  CHECK(r.kind == FaultPolicy::Kind::Roaming);
  CHECK(r.size == 10);
  CHECK(r.seed == 7);
  CHECK(r.first_step == 50);
  CHECK(r.last_step == 100);
  for (const char* s : {"none", "permanent:1,2,3,4", "transient:0,0,5,5,12", "roaming:10,7", "roaming:10,7,50,100"}) {
    CHECK(fault_spec(fault_from_spec(s)) == s);
  }
  CHECK(fault_from_spec("").kind == FaultPolicy::Kind::None);
  for (const char* s : {"permanent", "permanent:1,2,3", "transient:1,2,3,4", "roaming:x,1", "melt:1,2", "permanent:1,2,3,4,5"}) {
    CHECK_THROWS_AS(fault_from_spec(s), ConfigError);
  }
}

TEST_CASE("fault regions and validation") {
  const FaultPolicy p = FaultPolicy::permanent({2, 3, 4, 5});
  CHECK_NOTHROW(p.validate(8, 8));
  CHECK_THROWS_AS(p.validate(5, 8), ConfigError);
  CHECK_THROWS_AS(FaultPolicy::permanent({0, 0, 0, 3}).validate(8, 8), ConfigError);
  CHECK(p.disabled_region(8, 8, 1).has_value());
  CHECK(p.disabled_region(8, 8, 1000).has_value());

  const FaultPolicy t = FaultPolicy::transient({0, 0, 2, 2}, 4);
  CHECK(t.disabled_region(8, 8, 3).has_value());
  CHECK(!t.disabled_region(8, 8, 4).has_value());

  CHECK(!FaultPolicy::none().disabled_region(8, 8, 1).has_value());
  CHECK(!FaultPolicy::none().hook(8, 8));

  FaultPolicy r = FaultPolicy::roaming(10, 3);
  r.first_step = 5;
  r.last_step = 20;
  std::set<std::pair<std::size_t, std::size_t>> corners;
  for (std::size_t step = 1; step < 30; ++step) {
    const auto reg = r.disabled_region(64, 64, step);
    if (step < 5 || step >= 20) {
      CHECK(!reg.has_value());
      continue;
    }
    REQUIRE(reg.has_value());
    CHECK(reg->height == 10);
    CHECK(reg->width == 10);
    CHECK(reg->row + 10 <= 64);
    CHECK(reg->col + 10 <= 64);
    corners.insert({reg->row, reg->col});
    const auto again = r.disabled_region(64, 64, step);
    CHECK(again->row == reg->row);
    CHECK(again->col == reg->col);
  }
  CHECK(corners.size() > 5);  // it actually roams
  CHECK_THROWS_AS(FaultPolicy::roaming(70, 0).validate(64, 64), ConfigError);
}

TEST_CASE("fault hook zeros the region and neighbors read zeros") {
  BitGrid g(12, 12, 3, 1);
  const FaultPolicy p = FaultPolicy::permanent({4, 5, 2, 3});
  const StepHook hook = p.hook(12, 12);
  REQUIRE(hook);
  hook(1, g);
  for (std::size_t i = 0; i < 12; ++i) {
    for (std::size_t j = 0; j < 12; ++j) {
      for (std::size_t c = 0; c < 3; ++c) CHECK(g.at(i, j, c) == (p.region.contains(i, j) ? 0 : 1));
    }
  }

  // A cell next to the region sees zeros in its neighborhood.
  const auto nb = neighborhood(g, 3, 5, 0, Boundary::constant(1));
  CHECK(nb[0] == 1);  // center
  CHECK(nb[7] == 0);  // S is (4, 5)

  // Under a rollout the region stays dark while other cells evolve.
  const CaModel m = dlca::test::small_model(3, 2, 4);
  Rng rng(1);
  const BitGrid g0 = dlca::test::random_grid(rng, 12, 12, 3);
  const auto traj = rollout_hard(g0, m, 5, Boundary::toroidal(), UpdateSchedule::synchronous(), hook);
  for (std::size_t t = 1; t < traj.size(); ++t) {
    for (std::size_t i = 4; i < 6; ++i) {
      for (std::size_t j = 5; j < 8; ++j) {
        for (std::size_t c = 0; c < 3; ++c) CHECK(traj[t].at(i, j, c) == 0);
      }
    }
  }
  CHECK(traj[0].values == g0.values);
}

TEST_CASE("png output decodes and is byte-identical across runs") {
  const fs::path dir = scratch_dir("png");
  Rng rng(2);
  const BitGrid g = dlca::test::random_grid(rng, 9, 13, 3);
  write_grid_png(g, dir / "a.png", false, 2);
  write_grid_png(g, dir / "b.png", false, 2);
  CHECK(slurp(dir / "a.png") == slurp(dir / "b.png"));
  CHECK(slurp(dir / "a.png").substr(1, 3) == "PNG");

  std::size_t w = 0, h = 0;
  const auto gray = read_png(dir / "a.png", w, h, false);
  CHECK(w == 26);
  CHECK(h == 18);
  for (std::size_t i = 0; i < 9; ++i) {
    for (std::size_t j = 0; j < 13; ++j) {
      CHECK(gray[(2 * i + 1) * w + 2 * j + 1] == (g.at(i, j, 0) ? 255 : 0));
    }
  }

  write_grid_png(g, dir / "c.png", true, 1);
  const auto rgb = read_png(dir / "c.png", w, h, true);
  CHECK(w == 13);
  for (std::size_t i = 0; i < 9; ++i) {
    for (std::size_t j = 0; j < 13; ++j) {
      for (std::size_t c = 0; c < 3; ++c) CHECK(rgb[(i * w + j) * 3 + c] == (g.at(i, j, c) ? 255 : 0));
    }
  }
  CHECK_THROWS_AS(write_grid_png(BitGrid(2, 2, 1), dir / "x.png", true), ShapeError);
  CHECK_THROWS_AS(write_png(dir / "y.png", 2, 2, 2, std::vector<std::uint8_t>(8)), ShapeError);
  fs::remove_all(dir);
}

TEST_CASE("pbm and ppm output") {
  const fs::path dir = scratch_dir("pbm");
  BitGrid g(2, 3, 3);
  g.at(0, 1, 0) = 1;
  g.at(1, 2, 2) = 1;
  write_grid_text(g, dir / "g.pbm");
  CHECK(slurp(dir / "g.pbm") == "P1\n3 2\n0 1 0\n0 0 0\n");
  write_grid_text(g, dir / "g.ppm", true);
  const std::string ppm = slurp(dir / "g.ppm");
  CHECK(ppm.rfind("P3\n3 2\n1\n", 0) == 0);
  fs::remove_all(dir);
}

TEST_CASE("line plot and frame names") {
  const fs::path dir = scratch_dir("plot");
  std::vector<PlotSeries> s = {{"a", {0, 1, 4, 9, 16}}, {"b", {16, 9, 4, 1, 0}}};
  write_line_plot(dir / "p.png", s);
  write_line_plot(dir / "q.png", s);
  CHECK(slurp(dir / "p.png") == slurp(dir / "q.png"));
  std::size_t w = 0, h = 0;
  read_png(dir / "p.png", w, h, true);
  CHECK(w == 640);
  CHECK(h == 400);
  CHECK(frame_name(12, ImageFormat::Png) == "frame_00012.png");
  CHECK(frame_name(0, ImageFormat::Pbm) == "frame_00000.pbm");
  CHECK(image_format_from_name("pbm") == ImageFormat::Pbm);
  CHECK_THROWS_AS(image_format_from_name("gif"), ConfigError);
  fs::remove_all(dir);
}

TEST_CASE("config hash") {
  const TrainConfig a = default_config("checkerboard");
  TrainConfig b = a;
  CHECK(config_hash(a) == config_hash(b));
  CHECK(config_hash(a).size() == 16);
  b.seed = 1;
  CHECK(config_hash(a) != config_hash(b));
}

TEST_CASE("gate count report") {
  const CaModel m = dlca::test::small_model(3, 2, 11);
  const CircuitModel cm = crystallize(m);
  const std::size_t obs[1] = {0};
  const GateCountReport r = gate_counts(cm, obs);
  std::size_t active = 0, total = 0;
  for (const auto& k : cm.kernels) {
    active += census(k).active;
    total += census(k).total;
  }
  active += census(cm.update).active;
  total += census(cm.update).total;
  CHECK(r.active == active);
  CHECK(r.total == total);
  CHECK(r.pruned_active <= r.active);
  CHECK(r.pruned_total <= r.total);
}

TEST_CASE("experiment run from a checkpoint writes every reported file") {
  const fs::path dir = scratch_dir("experiment");
  const TrainConfig c = tiny_checkerboard();
  save_model(build_model(c.arch, 3), dir / "ckpt.json");
  ExperimentOptions o;
  o.config = c;
  o.out_dir = dir / "run";
  o.checkpoint = dir / "ckpt.json";
  const RunReport r = run_experiment("checkerboard", o);
  CHECK(!r.trained);
  CHECK(r.experiment == "checkerboard");
  REQUIRE(r.rollouts.size() == 2);
  CHECK(r.rollouts[0].size == 8);
  CHECK(r.rollouts[0].error.size() == 5);
  CHECK(r.rollouts[1].size == 32);
  CHECK(r.rollouts[1].steps == 16);
  const Target t = make_target("checkerboard", 8);
  CHECK(r.rollouts[0].error.back() == doctest::Approx(64.0 * (1.0 - r.rollouts[0].final_accuracy)));
  for (const auto& f : r.files) CHECK_MESSAGE(fs::exists(o.out_dir / f), f);
  for (const char* f : {"config.json", "report.json", "error_t.csv", "netlist/update.json",
                        "netlist/update_pruned.dot"}) {
    CHECK_MESSAGE(std::find(r.files.begin(), r.files.end(), f) != r.files.end(), f);
  }
  const auto j = read_json_file(o.out_dir / "report.json");
  CHECK(j.at("kind") == "run_report");
  CHECK(j.at("config_hash") == config_hash(c));
  CHECK(j == r.to_json());

  // Same inputs, same frames.
  ExperimentOptions o2 = o;
  o2.out_dir = dir / "run2";
  const RunReport r2 = run_experiment("checkerboard", o2);
  CHECK(r2.files == r.files);
  for (const auto& f : r.files) {
    if (f.find("frame_") != std::string::npos) CHECK(slurp(o.out_dir / f) == slurp(o2.out_dir / f));
  }
  fs::remove_all(dir);
}

TEST_CASE("experiment with training, async inference and faults") {
  const fs::path dir = scratch_dir("experiment_train");
  ExperimentOptions o;
  o.config = tiny_checkerboard();
  o.out_dir = dir;
  o.async_rate = 0.6;
  o.fault = FaultPolicy::permanent({0, 0, 2, 2});
  o.format = ImageFormat::Pbm;
  o.frames = std::vector<std::size_t>{1, 2};
  const RunReport r = run_experiment("checkerboard", o);
  CHECK(r.trained);
  CHECK(r.epochs_run == 3);
  CHECK(fs::exists(dir / "model.json"));
  CHECK(fs::exists(dir / "loss_history.csv"));
  CHECK(fs::exists(dir / "frames" / "train_scale" / "frame_00001.pbm"));
  CHECK(!fs::exists(dir / "frames" / "train_scale" / "frame_00000.pbm"));

  ExperimentOptions bad = o;
  bad.fault = FaultPolicy::permanent({0, 0, 20, 2});
  CHECK_THROWS_AS(run_experiment("checkerboard", bad), ConfigError);
  CHECK_THROWS_AS(run_experiment("mandelbrot", o), ConfigError);
  fs::remove_all(dir);
}

TEST_CASE("async study report") {
  const fs::path dir = scratch_dir("study");
  const CaModel a = dlca::test::small_model(2, 2, 1);
  const CaModel b = dlca::test::small_model(2, 2, 2);
  AsyncStudyOptions o;
  o.out_dir = dir;
  o.grid_size = 16;
  o.steps = 12;
  o.fault_size = 4;
  o.fault_first = 3;
  o.fault_last = 8;
  o.seeds = {0, 1, 2};
  const AsyncStudyReport r = run_async_study(a, b, o);
  REQUIRE(r.sync_errors.size() == 3);
  REQUIRE(r.async_errors.size() == 3);
  CHECK(r.sync_errors[0].size() == 13);
  CHECK(r.sync_mean.size() == 13);
  double m0 = 0.0;
  for (const auto& e : r.sync_errors) m0 += e[5];
  CHECK(r.sync_mean[5] == doctest::Approx(m0 / 3.0));
  CHECK(r.seeds_async_lower <= 3);
  for (const auto& f : r.files) CHECK_MESSAGE(fs::exists(dir / f), f);
  CHECK(fs::exists(dir / "error_plot.png"));
  CHECK(fs::exists(dir / "error_mean.csv"));

  // Same model on both sides gives identical curves.
  const AsyncStudyReport same = run_async_study(a, a, o);
  CHECK(same.sync_errors == same.async_errors);
  CHECK(same.seeds_async_lower == 0);
  fs::remove_all(dir);
}

TEST_CASE("cli: usage errors and netlist pipeline") {
  CHECK(run_cli("--bogus") == 2);
  CHECK(run_cli("") != 0);
  CHECK(run_cli("prune --in /nonexistent.json --out x.json") == 2);

  const fs::path dir = scratch_dir("cli");
  const CaModel m = dlca::test::small_model(2, 2, 5);
  save_model(m, dir / "model.json");
  CHECK(run_cli("extract --model " + (dir / "model.json").string() + " --out-dir " + (dir / "net").string()) == 0);
  REQUIRE(fs::exists(dir / "net" / "update.json"));
  CHECK(run_cli("prune --in " + (dir / "net" / "update.json").string() + " --out " + (dir / "p.json").string()) == 0);
  CHECK(run_cli("export --in " + (dir / "p.json").string() + " --format dot --out " + (dir / "p.dot").string()) == 0);
  CHECK(slurp(dir / "p.dot").rfind("digraph", 0) == 0);
  CHECK(load_circuit(dir / "p.json") == prune(crystallize(m).update));

  nlohmann::json cfg = {{"experiment", "checkerboard"}, {"channels", 2}, {"num_kernels", 2},
                        {"kernel_widths", {4, 2}}, {"update_widths", {12, 8, 2}}};
  write_json_file(cfg, dir / "cfg.json");
  // The default checkerboard config has 8 channels.
  CHECK(run_cli("infer --model " + (dir / "model.json").string()) == 1);
  CHECK(run_cli("infer --model " + (dir / "model.json").string() + " --config " + (dir / "cfg.json").string() + " --size 10 --steps 3 --format pbm --out-dir " +
                (dir / "inf").string()) == 0);
  CHECK(fs::exists(dir / "inf" / "frame_00003.pbm"));
  CHECK(run_cli("infer --model " + (dir / "model.json").string() + " --config " + (dir / "cfg.json").string() +
                " --fault permanent:0,0,50,50 --out-dir " +
                (dir / "inf").string()) == 1);
  {
    std::ofstream(dir / "broken.json") << "{ not json";
  }
  CHECK(run_cli("prune --in " + (dir / "broken.json").string() + " --out " + (dir / "q.json").string()) == 1);
  fs::remove_all(dir);
}
