#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "dlca/error.hpp"
#include "dlca/network.hpp"
#include "support.hpp"

using namespace dlca;
using dlca::test::grad_close;

namespace {

LogicNetwork one_hot_net(const WiringSpec& w, const std::vector<GateOp>& gates, double margin = 30.0) {
  std::vector<double> logits(w.total_nodes() * kNumGates, 0.0);
  for (std::size_t n = 0; n < w.total_nodes(); ++n) logits[n * kNumGates + opcode(gates[n % gates.size()])] = margin;
  return LogicNetwork(w, logits);
}

LogicNetwork random_net(std::size_t inputs, std::vector<std::size_t> widths, std::uint64_t seed, double sigma = 1.0) {
  return init_params(build_wiring(inputs, widths, WiringPolicy::UniformRandom, seed), InitSpec::normal(sigma), seed);
}

double weighted_output(const LogicNetwork& net, std::span<const double> x, std::span<const double> w) {
  const auto out = forward_soft(net, x).output;
  double s = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) s += w[i] * out[i];
  return s;
}

std::filesystem::path temp_path(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "dlca_tests";
  std::filesystem::create_directories(dir);
  return dir / name;
}

// Checks analytic parameter and input gradients of sum(w * output) against
// central differences.
void check_gradients(LogicNetwork net, Rng& rng, double rtol) {
  const auto x = dlca::test::random_unit(rng, net.input_width());
  std::vector<double> w(net.output_width());
  for (auto& v : w) v = rng.normal();
  const auto fwd = forward_soft(net, x);
  const NetworkGrad g = backward(net, fwd.tape, w);
  const double h = 1e-5;
  for (std::size_t i = 0; i < net.logits().size(); ++i) {
    const double orig = net.logits()[i];
    net.logits()[i] = orig + h;
    const double fp = weighted_output(net, x, w);
    net.logits()[i] = orig - h;
    const double fm = weighted_output(net, x, w);
    net.logits()[i] = orig;
    const double fd = (fp - fm) / (2 * h);
    CHECK_MESSAGE(grad_close(g.param_grads[i], fd, rtol), "logit ", i, ": ", g.param_grads[i], " vs ", fd);
  }
  for (std::size_t i = 0; i < x.size(); ++i) {
    auto xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    const double fd = (weighted_output(net, xp, w) - weighted_output(net, xm, w)) / (2 * h);
    CHECK(grad_close(g.input_grad[i], fd, rtol));
  }
}

}  // namespace

TEST_CASE("covering wiring uses every input") {
  const std::vector<std::size_t> widths{128, 64, 32};
  const WiringSpec w = build_wiring(17, widths, WiringPolicy::CoverInputsThenRandom, 3);
  std::set<std::uint32_t> used;
  for (const auto& c : w.layer(0)) {
    used.insert(c.in0);
    used.insert(c.in1);
  }
  CHECK(used.size() == 17);
}

TEST_CASE("covering wiring property: coverage whenever 2*width >= inputs") {
  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t inputs = 2 + rng.index(60);
    const std::size_t width = (inputs + 1) / 2 + rng.index(40);
    const std::vector<std::size_t> widths{width, 1 + rng.index(width)};
    const WiringSpec w = build_wiring(inputs, widths, WiringPolicy::CoverInputsThenRandom, rng.next());
    std::set<std::uint32_t> used;
    for (std::size_t l = 0; l < w.num_layers(); ++l) {
      for (const auto& c : w.layer(l)) {
        CHECK(c.in0 != c.in1);
        CHECK(c.in0 < w.prev_width(l));
        CHECK(c.in1 < w.prev_width(l));
        if (l == 0) {
          used.insert(c.in0);
          used.insert(c.in1);
        }
      }
    }
    CHECK(used.size() == inputs);
  }
}

TEST_CASE("wiring is deterministic in the seed") {
  const std::vector<std::size_t> widths{32, 16, 8};
  for (auto policy : {WiringPolicy::CoverInputsThenRandom, WiringPolicy::UniformRandom}) {
    CHECK(build_wiring(20, widths, policy, 7) == build_wiring(20, widths, policy, 7));
    CHECK_FALSE(build_wiring(20, widths, policy, 7) == build_wiring(20, widths, policy, 8));
  }
}

TEST_CASE("halving pairs wiring") {
  const std::vector<std::size_t> widths{8, 4, 2, 1};
  const WiringSpec w = build_wiring(16, widths, WiringPolicy::HalvingPairs, 0);
  for (std::size_t l = 0; l < w.num_layers(); ++l) {
    for (std::size_t i = 0; i < w.layer_width(l); ++i) {
      CHECK(w.layer(l)[i].in0 == 2 * i);
      CHECK(w.layer(l)[i].in1 == 2 * i + 1);
    }
  }
  const std::vector<std::size_t> too_wide{8};
  CHECK_THROWS_AS(build_wiring(9, too_wide, WiringPolicy::HalvingPairs, 0), ConfigError);
}

TEST_CASE("center-neighbor kernel wiring pairs the center with each neighbor") {
  const std::vector<std::size_t> widths{8, 4, 2};
  const WiringSpec w = build_wiring(9, widths, WiringPolicy::CenterNeighbors, 0);
  for (std::size_t k = 0; k < 8; ++k) {
    CHECK(w.layer(0)[k].in0 == 0);
    CHECK(w.layer(0)[k].in1 == k + 1);
  }
  CHECK(w.layer(1)[1].in0 == 2);
  CHECK(w.layer(1)[1].in1 == 3);
}

TEST_CASE("wiring validation") {
  const std::vector<std::size_t> bad{1, 2};
  CHECK_THROWS_AS(build_wiring(4, bad, WiringPolicy::UniformRandom, 0), ConfigError);
  const std::vector<std::size_t> empty;
  CHECK_THROWS_AS(build_wiring(4, empty, WiringPolicy::UniformRandom, 0), ConfigError);
  const std::vector<std::size_t> zero{3, 0};
  CHECK_THROWS_AS(build_wiring(4, zero, WiringPolicy::UniformRandom, 0), ConfigError);
  CHECK_THROWS_AS(WiringSpec(3, {{{1, 1}}}), ConfigError);
  CHECK_THROWS_AS(WiringSpec(3, {{{0, 3}}}), ConfigError);
  CHECK(wiring_policy_from_name("halving_pairs") == WiringPolicy::HalvingPairs);
  CHECK_THROWS_AS(wiring_policy_from_name("spiral"), ConfigError);
}

TEST_CASE("init_params") {
  const std::vector<std::size_t> widths{6, 3};
  const WiringSpec w = build_wiring(5, widths, WiringPolicy::UniformRandom, 1);
  SUBCASE("sigma 0 gives uniform mixtures") {
    const LogicNetwork net = init_params(w, InitSpec::normal(0.0), 4);
    for (double v : net.logits()) CHECK(v == 0.0);
    const std::vector<double> zeros(5, 0.0);
    const auto fwd = forward_soft(net, zeros);
    for (double v : fwd.tape.layers[0]) CHECK(v == doctest::Approx(0.5).epsilon(1e-12));
  }
  SUBCASE("same seed, same parameters") {
    CHECK(init_params(w, InitSpec::normal(1.0), 9).logits()[7] == init_params(w, InitSpec::normal(1.0), 9).logits()[7]);
    const auto a = init_params(w, InitSpec::normal(1.0), 9);
    const auto b = init_params(w, InitSpec::normal(1.0), 9);
    CHECK(std::equal(a.logits().begin(), a.logits().end(), b.logits().begin()));
  }
  SUBCASE("pass-through bias makes A the argmax") {
    // Noise is kept small relative to the bias so the argmax is guaranteed.
    const LogicNetwork net = init_params(w, InitSpec::passthrough(5.0, 0.3), 2);
    for (std::size_t n = 0; n < net.num_nodes(); ++n) CHECK(net.node_gate(n) == GateOp::A);
  }
}

TEST_CASE("forward_soft examples") {
  SUBCASE("single AND node") {
    const LogicNetwork net = one_hot_net(WiringSpec(2, {{{0, 1}}}), {GateOp::And});
    const std::vector<double> x{1.0, 1.0};
    CHECK(forward_soft(net, x).output[0] == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("all-FALSE network") {
    const std::vector<std::size_t> widths{8, 4};
    const LogicNetwork net = one_hot_net(build_wiring(6, widths, WiringPolicy::UniformRandom, 1), {GateOp::False});
    Rng rng(3);
    const auto out = forward_soft(net, dlca::test::random_unit(rng, 6)).output;
    for (double v : out) CHECK(std::abs(v) < 1e-9);
  }
  SUBCASE("layer-by-layer recomposition") {
    const LogicNetwork net = random_net(7, {10, 6, 3}, 5);
    Rng rng(5);
    const auto x = dlca::test::random_unit(rng, 7);
    std::vector<double> prev = x;
    const WiringSpec& w = net.wiring();
    for (std::size_t l = 0; l < w.num_layers(); ++l) {
      std::vector<double> cur;
      for (std::size_t j = 0; j < w.layer_width(l); ++j) {
        GateDistribution d;
        const auto lg = net.node_logits(w.layer_offset(l) + j);
        std::copy(lg.begin(), lg.end(), d.logits.begin());
        cur.push_back(mixture_forward(d, prev[w.layer(l)[j].in0], prev[w.layer(l)[j].in1]));
      }
      prev = cur;
    }
    const auto out = forward_soft(net, x).output;
    for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == doctest::Approx(prev[i]).epsilon(1e-12));
  }
  SUBCASE("length mismatch") {
    const LogicNetwork net = random_net(4, {3}, 1);
    const std::vector<double> x(5, 0.5);
    CHECK_THROWS_AS(forward_soft(net, x), ShapeError);
  }
}

TEST_CASE("forward_soft outputs stay in [0,1]") {
  Rng rng(6);
  for (int trial = 0; trial < 30; ++trial) {
    const LogicNetwork net = random_net(6, {12, 8, 4}, rng.next(), 3.0);
    for (double v : forward_soft(net, dlca::test::random_unit(rng, 6)).output) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
}

TEST_CASE("batched forward equals per-sample forward") {
  const LogicNetwork net = random_net(5, {9, 4}, 8);
  Rng rng(8);
  const std::size_t batch = 7;
  std::vector<std::vector<double>> xs;
  std::vector<double> packed(5 * batch);
  for (std::size_t b = 0; b < batch; ++b) {
    xs.push_back(dlca::test::random_unit(rng, 5));
    for (std::size_t i = 0; i < 5; ++i) packed[i * batch + b] = xs[b][i];
  }
  ActivationTape tape;
  const auto polys = mixture_polynomials(net);
  forward_soft_batch(net, polys, packed, batch, tape);
  for (std::size_t b = 0; b < batch; ++b) {
    const auto single = forward_soft(net, xs[b]).output;
    for (std::size_t o = 0; o < single.size(); ++o) CHECK(tape.output()[o * batch + b] == doctest::Approx(single[o]));
  }
}

TEST_CASE("backward: per-node logit gradients sum to zero") {
  Rng rng(9);
  const LogicNetwork net = random_net(6, {10, 5, 2}, 9);
  const auto fwd = forward_soft(net, dlca::test::random_unit(rng, 6));
  const std::vector<double> og{0.7, -1.3};
  const NetworkGrad g = backward(net, fwd.tape, og);
  for (std::size_t n = 0; n < net.num_nodes(); ++n) {
    double s = 0.0;
    for (int k = 0; k < kNumGates; ++k) s += g.param_grads[n * kNumGates + k];
    CHECK(std::abs(s) < 1e-7);
  }
}

TEST_CASE("backward matches finite differences on a 2-layer net") {
  Rng rng(10);
  check_gradients(random_net(5, {6, 3}, 10), rng, 1e-4);
}

TEST_CASE("backward matches finite differences on deeper nets up to 200 nodes") {
  Rng rng(11);
  check_gradients(random_net(12, {80, 60, 40, 16, 4}, 11), rng, 1e-4);
  check_gradients(random_net(9, {16, 8, 4, 2, 1}, 12, 2.0), rng, 1e-4);
}

TEST_CASE("backward through a pass-through chain routes the output gradient") {
  // Layer 0 picks inputs (3,1),(0,2),(4,0); layer 1 picks (2,0),(1,2).
  const WiringSpec w(5, {{{3, 1}, {0, 2}, {4, 0}}, {{2, 0}, {1, 2}}});
  const LogicNetwork net = one_hot_net(w, {GateOp::A}, 60.0);
  const std::vector<double> x{0.1, 0.2, 0.3, 0.4, 0.5};
  const auto fwd = forward_soft(net, x);
  CHECK(fwd.output[0] == doctest::Approx(0.5));
  CHECK(fwd.output[1] == doctest::Approx(0.1));
  const std::vector<double> og{2.0, -3.0};
  const NetworkGrad g = backward(net, fwd.tape, og);
  const std::vector<double> expected{-3.0, 0.0, 0.0, 0.0, 2.0};
  for (std::size_t i = 0; i < 5; ++i) CHECK(g.input_grad[i] == doctest::Approx(expected[i]).epsilon(1e-9));
}

TEST_CASE("backward rejects a wrong-sized output gradient") {
  const LogicNetwork net = random_net(4, {3, 2}, 1);
  const std::vector<double> x(4, 0.5);
  const auto fwd = forward_soft(net, x);
  const std::vector<double> og(3, 1.0);
  CHECK_THROWS_AS(backward(net, fwd.tape, og), ShapeError);
}

TEST_CASE("forward_hard") {
  SUBCASE("one-hot nets agree with soft, exhaustively") {
    Rng rng(12);
    for (int trial = 0; trial < 20; ++trial) {
      const std::vector<std::size_t> widths{7, 5, 3};
      const WiringSpec w = build_wiring(6, widths, WiringPolicy::UniformRandom, rng.next());
      std::vector<GateOp> gates;
      for (std::size_t n = 0; n < w.total_nodes(); ++n) gates.push_back(gate_from_opcode(int(rng.index(16))));
      const LogicNetwork net = one_hot_net(w, gates, 200.0);
      for (int bits = 0; bits < 64; ++bits) {
        std::vector<std::uint8_t> xb(6);
        std::vector<double> xs(6);
        for (int i = 0; i < 6; ++i) xs[i] = xb[i] = (bits >> i) & 1;
        const auto hard = forward_hard(net, xb);
        const auto soft = forward_soft(net, xs).output;
        for (std::size_t o = 0; o < hard.size(); ++o) CHECK(double(hard[o]) == std::round(soft[o]));
      }
    }
  }
  SUBCASE("sharpened nets are within 1e-6 of hard") {
    Rng rng(13);
    for (int trial = 0; trial < 20; ++trial) {
      const LogicNetwork net = sharpened(random_net(8, {12, 6, 3}, rng.next()), 30.0);
      const auto xb = dlca::test::random_bits(rng, 8);
      const std::vector<double> xs(xb.begin(), xb.end());
      const auto hard = forward_hard(net, xb);
      const auto soft = forward_soft(net, xs).output;
      for (std::size_t o = 0; o < hard.size(); ++o) CHECK(std::abs(soft[o] - hard[o]) < 1e-6);
    }
  }
  SUBCASE("all-TRUE network") {
    const std::vector<std::size_t> widths{5, 3};
    const LogicNetwork net = one_hot_net(build_wiring(4, widths, WiringPolicy::UniformRandom, 2), {GateOp::True});
    const std::vector<std::uint8_t> x{0, 1, 0, 0};
    for (auto v : forward_hard(net, x)) CHECK(v == 1);
  }
  SUBCASE("argmax ties go to the lowest opcode") {
    std::vector<double> logits(kNumGates, 0.0);
    logits[opcode(GateOp::Or)] = 1.0;
    logits[opcode(GateOp::Nand)] = 1.0;
    const LogicNetwork net(WiringSpec(2, {{{0, 1}}}), logits);
    CHECK(net.node_gate(0) == GateOp::Or);
  }
  SUBCASE("input validation") {
    const LogicNetwork net = random_net(3, {2}, 1);
    const std::vector<std::uint8_t> two{0, 2, 1};
    const std::vector<std::uint8_t> short_in{0, 1};
    CHECK_THROWS_AS(forward_hard(net, two), ShapeError);
    CHECK_THROWS_AS(forward_hard(net, short_in), ShapeError);
  }
}

TEST_CASE("checkpoint round trip") {
  const std::vector<std::size_t> widths{10, 6, 2};
  const WiringSpec w = build_wiring(7, widths, WiringPolicy::CoverInputsThenRandom, 42);
  const LogicNetwork net = init_params(w, InitSpec::passthrough(2.0, 0.7), 43, 1.5);
  const auto path = temp_path("net.json");
  save_params(net, path);
  const LogicNetwork back = load_params(path);
  CHECK(back.wiring() == net.wiring());
  CHECK(std::equal(net.logits().begin(), net.logits().end(), back.logits().begin(), back.logits().end()));
  CHECK(back.temperature() == net.temperature());
  CHECK(back.init_seed() == 43);
  CHECK(back.wiring().seed() == 42);
  Rng rng(4);
  const auto x = dlca::test::random_unit(rng, 7);
  const auto a = forward_soft(net, x).output;
  const auto b = forward_soft(back, x).output;
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);

  const nlohmann::json doc = read_json_file(path);
  CHECK(doc.at("layer_widths") == nlohmann::json(widths));
  CHECK(doc.at("wiring").at("seed") == 42);
  CHECK(doc.at("init").at("seed") == 43);
  CHECK(doc.at("format_version") == kCheckpointVersion);
}

TEST_CASE("checkpoint errors") {
  const LogicNetwork net = random_net(5, {4, 2}, 3);
  const auto path = temp_path("net_bad.json");
  save_params(net, path);
  std::string text;
  {
    std::ifstream in(path);
    text.assign(std::istreambuf_iterator<char>(in), {});
  }
  SUBCASE("truncated") {
    std::ofstream(path, std::ios::trunc) << text.substr(0, text.size() / 2);
    CHECK_THROWS_AS(load_params(path), CheckpointError);
  }
  SUBCASE("version mismatch") {
    nlohmann::json doc = nlohmann::json::parse(text);
    doc["format_version"] = 99;
    std::ofstream(path, std::ios::trunc) << doc.dump();
    CHECK_THROWS_AS(load_params(path), CheckpointError);
  }
  SUBCASE("wrong logit count") {
    nlohmann::json doc = nlohmann::json::parse(text);
    doc["logits"].erase(doc["logits"].begin());
    std::ofstream(path, std::ios::trunc) << doc.dump();
    CHECK_THROWS_AS(load_params(path), CheckpointError);
  }
  SUBCASE("missing file") { CHECK_THROWS_AS(load_params(temp_path("does_not_exist.json")), IoError); }
}
