#include "dlca/network.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>

#include "dlca/error.hpp"
#include "dlca/rng.hpp"

namespace dlca {

namespace {

constexpr std::string_view kPolicyNames[] = {"cover_inputs_then_random", "halving_pairs", "uniform_random",
                                             "center_neighbors"};

std::vector<Connection> uniform_layer(std::size_t prev, std::size_t width, Rng& rng) {
  std::vector<Connection> out(width);
  for (auto& c : out) {
    c.in0 = static_cast<std::uint32_t>(rng.index(prev));
    std::size_t other = rng.index(prev - 1);
    if (other >= c.in0) ++other;
    c.in1 = static_cast<std::uint32_t>(other);
  }
  return out;
}

std::vector<Connection> covering_layer(std::size_t prev, std::size_t width, Rng& rng) {
  const std::size_t slots = 2 * width;
  std::vector<std::uint32_t> pool;
  pool.reserve(slots + prev);
  std::vector<std::uint32_t> perm(prev);
  while (pool.size() < slots) {
    for (std::size_t i = 0; i < prev; ++i) perm[i] = static_cast<std::uint32_t>(i);
    rng.shuffle(std::span<std::uint32_t>(perm));
    pool.insert(pool.end(), perm.begin(), perm.end());
  }
  pool.resize(slots);

  std::vector<Connection> out(width);
  for (std::size_t i = 0; i < width; ++i) out[i] = {pool[2 * i], pool[2 * i + 1]};

  // Resolve in0 == in1 by swapping second inputs between nodes, which keeps
  // the multiset of used inputs (and thus the coverage) intact.
  for (std::size_t i = 0; i < width; ++i) {
    if (out[i].in0 != out[i].in1) continue;
    bool fixed = false;
    for (std::size_t step = 1; step < width && !fixed; ++step) {
      const std::size_t j = (i + step) % width;
      if (out[j].in1 != out[i].in0 && out[i].in1 != out[j].in0) {
        std::swap(out[i].in1, out[j].in1);
        fixed = true;
      }
    }
    if (!fixed) {
      std::size_t other = rng.index(prev - 1);
      if (other >= out[i].in0) ++other;
      out[i].in1 = static_cast<std::uint32_t>(other);
    }
  }
  return out;
}

std::vector<Connection> halving_layer(std::size_t prev, std::size_t width) {
  if (prev < 2 * width) {
    throw ConfigError("halving_pairs needs a previous layer of width >= " + std::to_string(2 * width) + ", got " +
                      std::to_string(prev));
  }
  std::vector<Connection> out(width);
  for (std::size_t i = 0; i < width; ++i) {
    out[i] = {static_cast<std::uint32_t>(2 * i), static_cast<std::uint32_t>(2 * i + 1)};
  }
  return out;
}

void validate_finite(std::span<const double> values) {
  for (double v : values) {
    if (!std::isfinite(v)) throw CheckpointError("non-finite logit");
  }
}

}  // namespace

std::string_view wiring_policy_name(WiringPolicy policy) { return kPolicyNames[static_cast<int>(policy)]; }

WiringPolicy wiring_policy_from_name(std::string_view name) {
  for (int i = 0; i < 4; ++i) {
    if (kPolicyNames[i] == name) return static_cast<WiringPolicy>(i);
  }
  throw ConfigError("unknown wiring policy '" + std::string(name) + "'");
}

WiringSpec::WiringSpec(std::size_t input_width, std::vector<std::vector<Connection>> layers, WiringPolicy policy,
                       std::uint64_t seed)
    : input_width_(input_width), layers_(std::move(layers)), policy_(policy), seed_(seed) {
  if (layers_.empty()) throw ConfigError("network needs at least one layer");
  std::size_t prev = input_width_;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    if (layers_[l].empty()) throw ConfigError("layer " + std::to_string(l) + " has width 0");
    if (prev < 2) throw ConfigError("layer " + std::to_string(l) + " reads a previous layer of width < 2");
    for (const Connection& c : layers_[l]) {
      if (c.in0 >= prev || c.in1 >= prev) {
        throw ConfigError("layer " + std::to_string(l) + " connection out of range");
      }
      if (c.in0 == c.in1) throw ConfigError("layer " + std::to_string(l) + " connection has in0 == in1");
    }
    offsets_.push_back(total_nodes_);
    total_nodes_ += layers_[l].size();
    prev = layers_[l].size();
  }
}

std::vector<std::size_t> WiringSpec::layer_widths() const {
  std::vector<std::size_t> out;
  for (const auto& l : layers_) out.push_back(l.size());
  return out;
}

WiringSpec build_wiring(std::size_t input_width, std::span<const std::size_t> layer_widths, WiringPolicy policy,
                        std::uint64_t seed) {
  if (layer_widths.empty()) throw ConfigError("layer_widths must be non-empty");
  Rng rng(derive_seed(seed, 0x77697265));
  std::vector<std::vector<Connection>> layers;
  std::size_t prev = input_width;
  for (std::size_t l = 0; l < layer_widths.size(); ++l) {
    const std::size_t width = layer_widths[l];
    if (width == 0) throw ConfigError("layer widths must be >= 1");
    if (prev < 2) {
      throw ConfigError("layer " + std::to_string(l) + " of width " + std::to_string(width) +
                        " cannot read a previous layer of width " + std::to_string(prev));
    }
    switch (policy) {
      case WiringPolicy::UniformRandom:
        layers.push_back(uniform_layer(prev, width, rng));
        break;
      case WiringPolicy::CoverInputsThenRandom:
        layers.push_back(covering_layer(prev, width, rng));
        break;
      case WiringPolicy::HalvingPairs:
        layers.push_back(halving_layer(prev, width));
        break;
      case WiringPolicy::CenterNeighbors:
        if (l == 0) {
          if (prev != 9) throw ConfigError("center_neighbors wiring needs a 9-wide input");
          std::vector<Connection> first(width);
          for (std::size_t k = 0; k < width; ++k) first[k] = {0, static_cast<std::uint32_t>(1 + k % 8)};
          layers.push_back(std::move(first));
        } else if (prev >= 2 * width) {
          layers.push_back(halving_layer(prev, width));
        } else {
          layers.push_back(covering_layer(prev, width, rng));
        }
        break;
    }
    prev = width;
  }
  return WiringSpec(input_width, std::move(layers), policy, seed);
}

LogicNetwork::LogicNetwork(WiringSpec wiring, std::vector<double> logits, InitSpec init, std::uint64_t init_seed,
                           double temperature)
    : wiring_(std::move(wiring)),
      logits_(std::move(logits)),
      init_(init),
      init_seed_(init_seed),
      temperature_(temperature) {
  if (logits_.size() != wiring_.total_nodes() * kNumGates) {
    throw ShapeError("logit count " + std::to_string(logits_.size()) + " does not match " +
                     std::to_string(wiring_.total_nodes()) + " nodes");
  }
  if (!(temperature_ > 0.0)) throw ConfigError("temperature must be positive");
}

LogicNetwork init_params(WiringSpec wiring, const InitSpec& init, std::uint64_t seed, double temperature) {
  Rng rng(derive_seed(seed, 0x696e6974));
  std::vector<double> logits(wiring.total_nodes() * kNumGates);
  for (std::size_t n = 0; n < wiring.total_nodes(); ++n) {
    for (int g = 0; g < kNumGates; ++g) logits[n * kNumGates + g] = init.sigma * rng.normal();
    if (init.kind == InitSpec::Kind::PassthroughBias) logits[n * kNumGates + opcode(GateOp::A)] += init.bias;
  }
  return LogicNetwork(std::move(wiring), std::move(logits), init, seed, temperature);
}

LogicNetwork sharpened(const LogicNetwork& net, double margin) {
  std::vector<double> logits(net.logits().size(), 0.0);
  for (std::size_t n = 0; n < net.num_nodes(); ++n) logits[n * kNumGates + opcode(net.node_gate(n))] = margin;
  return LogicNetwork(net.wiring(), std::move(logits), net.init(), net.init_seed(), net.temperature());
}

std::vector<GatePolynomial> mixture_polynomials(const LogicNetwork& net) {
  std::vector<GatePolynomial> out(net.num_nodes());
  for (std::size_t n = 0; n < out.size(); ++n) {
    out[n] = mixture_polynomial(softmax(net.node_logits(n), net.temperature()));
  }
  return out;
}

std::vector<GatePolynomial> argmax_polynomials(const LogicNetwork& net) {
  std::vector<GatePolynomial> out(net.num_nodes());
  for (std::size_t n = 0; n < out.size(); ++n) out[n] = gate_polynomial(net.node_gate(n));
  return out;
}

void forward_soft_batch(const LogicNetwork& net, std::span<const GatePolynomial> polys,
                        std::span<const double> input, std::size_t batch, ActivationTape& tape) {
  const WiringSpec& w = net.wiring();
  if (input.size() != w.input_width() * batch) {
    throw ShapeError("forward input has " + std::to_string(input.size()) + " values, expected " +
                     std::to_string(w.input_width() * batch));
  }
  tape.batch = batch;
  tape.input.assign(input.begin(), input.end());
  tape.layers.resize(w.num_layers());
  const double* prev = tape.input.data();
  for (std::size_t l = 0; l < w.num_layers(); ++l) {
    const auto conns = w.layer(l);
    const std::size_t offset = w.layer_offset(l);
    std::vector<double>& cur = tape.layers[l];
    cur.resize(conns.size() * batch);
    for (std::size_t j = 0; j < conns.size(); ++j) {
      const GatePolynomial p = polys[offset + j];
      const double* __restrict x0 = prev + conns[j].in0 * batch;
      const double* __restrict x1 = prev + conns[j].in1 * batch;
      double* __restrict out = cur.data() + j * batch;
      for (std::size_t b = 0; b < batch; ++b) {
        out[b] = p.c + p.ca * x0[b] + p.cb * x1[b] + p.cab * x0[b] * x1[b];
      }
    }
    prev = cur.data();
  }
}

void backward_batch(const LogicNetwork& net, std::span<const GatePolynomial> polys, const ActivationTape& tape,
                    std::span<const double> output_grad, std::span<GatePolynomial> poly_grads,
                    std::span<double> input_grad) {
  const WiringSpec& w = net.wiring();
  const std::size_t batch = tape.batch;
  if (tape.layers.size() != w.num_layers()) throw ShapeError("tape does not match network depth");
  if (output_grad.size() != w.output_width() * batch) throw ShapeError("output gradient shape mismatch");
  if (poly_grads.size() != w.total_nodes()) throw ShapeError("poly_grads shape mismatch");
  if (!input_grad.empty() && input_grad.size() != w.input_width() * batch) {
    throw ShapeError("input gradient shape mismatch");
  }

  std::vector<double> grad_cur(output_grad.begin(), output_grad.end());
  std::vector<double> grad_prev;
  for (std::size_t l = w.num_layers(); l-- > 0;) {
    const auto conns = w.layer(l);
    const std::size_t offset = w.layer_offset(l);
    const double* prev = l == 0 ? tape.input.data() : tape.layers[l - 1].data();
    const bool want_prev = l > 0 || !input_grad.empty();
    if (want_prev) grad_prev.assign(w.prev_width(l) * batch, 0.0);

    for (std::size_t j = 0; j < conns.size(); ++j) {
      const GatePolynomial p = polys[offset + j];
      const double* __restrict x0 = prev + conns[j].in0 * batch;
      const double* __restrict x1 = prev + conns[j].in1 * batch;
      const double* __restrict g = grad_cur.data() + j * batch;
      double s_c = 0.0, s_a = 0.0, s_b = 0.0, s_ab = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const double gg = g[b];
        s_c += gg;
        s_a += gg * x0[b];
        s_b += gg * x1[b];
        s_ab += gg * x0[b] * x1[b];
      }
      GatePolynomial& acc = poly_grads[offset + j];
      acc.c += s_c;
      acc.ca += s_a;
      acc.cb += s_b;
      acc.cab += s_ab;
      if (want_prev) {
        double* __restrict gp0 = grad_prev.data() + conns[j].in0 * batch;
        double* __restrict gp1 = grad_prev.data() + conns[j].in1 * batch;
        for (std::size_t b = 0; b < batch; ++b) {
          gp0[b] += g[b] * (p.ca + p.cab * x1[b]);
          gp1[b] += g[b] * (p.cb + p.cab * x0[b]);
        }
      }
    }
    if (want_prev) grad_cur.swap(grad_prev);
  }
  if (!input_grad.empty()) std::copy(grad_cur.begin(), grad_cur.end(), input_grad.begin());
}

void accumulate_logit_grads(const LogicNetwork& net, std::span<const GatePolynomial> poly_grads,
                            std::span<double> out) {
  if (out.size() != net.num_nodes() * kNumGates) throw ShapeError("logit gradient shape mismatch");
  GateLogits tmp{};
  for (std::size_t n = 0; n < net.num_nodes(); ++n) {
    const GateProbs probs = softmax(net.node_logits(n), net.temperature());
    polynomial_grad_to_logits(probs, poly_grads[n], net.temperature(), tmp);
    for (int g = 0; g < kNumGates; ++g) out[n * kNumGates + g] += tmp[g];
  }
}

SoftForward forward_soft(const LogicNetwork& net, std::span<const double> input) {
  SoftForward out;
  const auto polys = mixture_polynomials(net);
  forward_soft_batch(net, polys, input, 1, out.tape);
  const auto o = out.tape.output();
  out.output.assign(o.begin(), o.end());
  return out;
}

NetworkGrad backward(const LogicNetwork& net, const ActivationTape& tape, std::span<const double> output_grad) {
  if (tape.batch != 1) throw ShapeError("backward() expects a single-sample tape");
  const auto polys = mixture_polynomials(net);
  std::vector<GatePolynomial> poly_grads(net.num_nodes());
  NetworkGrad out;
  out.input_grad.assign(net.input_width(), 0.0);
  backward_batch(net, polys, tape, output_grad, poly_grads, out.input_grad);
  out.param_grads.assign(net.num_nodes() * kNumGates, 0.0);
  accumulate_logit_grads(net, poly_grads, out.param_grads);
  return out;
}

std::vector<std::uint8_t> forward_hard_batch(const LogicNetwork& net, std::span<const std::uint8_t> input,
                                             std::size_t batch) {
  const WiringSpec& w = net.wiring();
  if (input.size() != w.input_width() * batch) throw ShapeError("hard forward input shape mismatch");
  std::vector<std::uint8_t> prev(input.begin(), input.end());
  std::vector<std::uint8_t> cur;
  for (std::size_t l = 0; l < w.num_layers(); ++l) {
    const auto conns = w.layer(l);
    const std::size_t offset = w.layer_offset(l);
    cur.assign(conns.size() * batch, 0);
    for (std::size_t j = 0; j < conns.size(); ++j) {
      const int code = opcode(net.node_gate(offset + j));
      const std::uint8_t* x0 = prev.data() + conns[j].in0 * batch;
      const std::uint8_t* x1 = prev.data() + conns[j].in1 * batch;
      std::uint8_t* out = cur.data() + j * batch;
      for (std::size_t b = 0; b < batch; ++b) {
        const int row = ((x0[b] & 1) << 1) | (x1[b] & 1);
        out[b] = static_cast<std::uint8_t>((code >> (3 - row)) & 1);
      }
    }
    prev.swap(cur);
  }
  return prev;
}

std::vector<std::uint8_t> forward_hard(const LogicNetwork& net, std::span<const std::uint8_t> input) {
  for (std::uint8_t v : input) {
    if (v > 1) throw ShapeError("hard forward input must be binary");
  }
  return forward_hard_batch(net, input, 1);
}

nlohmann::json network_to_json(const LogicNetwork& net) {
  const WiringSpec& w = net.wiring();
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t l = 0; l < w.num_layers(); ++l) {
    std::vector<std::uint32_t> flat;
    for (const Connection& c : w.layer(l)) {
      flat.push_back(c.in0);
      flat.push_back(c.in1);
    }
    layers.push_back(flat);
  }
  const InitSpec& init = net.init();
  return {
      {"format_version", kCheckpointVersion},
      {"kind", "logic_network"},
      {"input_width", w.input_width()},
      {"layer_widths", w.layer_widths()},
      {"wiring", {{"policy", wiring_policy_name(w.policy())}, {"seed", w.seed()}, {"layers", layers}}},
      {"init",
       {{"kind", init.kind == InitSpec::Kind::Normal ? "normal" : "passthrough_bias"},
        {"sigma", init.sigma},
        {"bias", init.bias},
        {"seed", net.init_seed()}}},
      {"temperature", net.temperature()},
      {"logits", std::vector<double>(net.logits().begin(), net.logits().end())},
  };
}

LogicNetwork network_from_json(const nlohmann::json& doc) {
  try {
    if (!doc.is_object()) throw CheckpointError("corrupt checkpoint: not a JSON object");
    const int version = doc.at("format_version").get<int>();
    if (version != kCheckpointVersion) {
      throw CheckpointError("checkpoint format_version " + std::to_string(version) + " is not supported (expected " +
                            std::to_string(kCheckpointVersion) + ")");
    }
    if (doc.at("kind").get<std::string>() != "logic_network") {
      throw CheckpointError("corrupt checkpoint: kind is not logic_network");
    }
    const auto input_width = doc.at("input_width").get<std::size_t>();
    const auto widths = doc.at("layer_widths").get<std::vector<std::size_t>>();
    const auto& wj = doc.at("wiring");
    std::vector<std::vector<Connection>> layers;
    const auto& lj = wj.at("layers");
    if (lj.size() != widths.size()) throw CheckpointError("corrupt checkpoint: layer count mismatch");
    for (std::size_t l = 0; l < widths.size(); ++l) {
      const auto flat = lj[l].get<std::vector<std::uint32_t>>();
      if (flat.size() != 2 * widths[l]) throw CheckpointError("corrupt checkpoint: layer width mismatch");
      std::vector<Connection> conns(widths[l]);
      for (std::size_t i = 0; i < widths[l]; ++i) conns[i] = {flat[2 * i], flat[2 * i + 1]};
      layers.push_back(std::move(conns));
    }
    WiringSpec wiring(input_width, std::move(layers), wiring_policy_from_name(wj.at("policy").get<std::string>()),
                      wj.at("seed").get<std::uint64_t>());
    const auto& ij = doc.at("init");
    InitSpec init;
    init.kind = ij.at("kind").get<std::string>() == "normal" ? InitSpec::Kind::Normal
                                                              : InitSpec::Kind::PassthroughBias;
    init.sigma = ij.at("sigma").get<double>();
    init.bias = ij.at("bias").get<double>();
    auto logits = doc.at("logits").get<std::vector<double>>();
    validate_finite(logits);
    return LogicNetwork(std::move(wiring), std::move(logits), init, ij.at("seed").get<std::uint64_t>(),
                        doc.at("temperature").get<double>());
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint: ") + e.what());
  } catch (const CheckpointError&) {
    throw;
  } catch (const Error& e) {
    throw CheckpointError(std::string("corrupt checkpoint: ") + e.what());
  }
}

nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  try {
    return nlohmann::json::parse(buf.str());
  } catch (const nlohmann::json::parse_error& e) {
    throw CheckpointError("corrupt file " + path.string() + ": " + e.what());
  }
}

void write_json_file(const nlohmann::json& doc, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << doc.dump(1) << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

void save_params(const LogicNetwork& net, const std::filesystem::path& path) {
  write_json_file(network_to_json(net), path);
}

LogicNetwork load_params(const std::filesystem::path& path) { return network_from_json(read_json_file(path)); }

}  // namespace dlca
