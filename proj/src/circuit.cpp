#include "dlca/circuit.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "dlca/error.hpp"

namespace dlca {

namespace {

// Simplified value of a signal during pruning.
struct Signal {
  enum class Kind { Const0, Const1, Ref };
  Kind kind = Kind::Ref;
  SignalRef ref = 0;

  static Signal constant(bool v) { return {v ? Kind::Const1 : Kind::Const0, 0}; }
  static Signal of(SignalRef r) { return {Kind::Ref, r}; }
  bool is_const() const { return kind != Kind::Ref; }
  bool value() const { return kind == Kind::Const1; }
};

bool depends_on_a(GateOp op) {
  return eval_hard(op, false, false) != eval_hard(op, true, false) ||
         eval_hard(op, false, true) != eval_hard(op, true, true);
}

bool depends_on_b(GateOp op) {
  return eval_hard(op, false, false) != eval_hard(op, false, true) ||
         eval_hard(op, true, false) != eval_hard(op, true, true);
}

constexpr std::uint64_t lane_mask(std::size_t lanes) {
  return lanes >= 64 ? ~std::uint64_t{0} : ((std::uint64_t{1} << lanes) - 1);
}

}  // namespace

HardCircuit::HardCircuit(std::size_t input_width, std::vector<CircuitNode> nodes, std::vector<SignalRef> outputs)
    : input_width_(input_width), nodes_(std::move(nodes)), outputs_(std::move(outputs)) {
  for (std::size_t k = 0; k < nodes_.size(); ++k) {
    const std::size_t limit = input_width_ + k;
    if (nodes_[k].in0 >= limit || nodes_[k].in1 >= limit) {
      throw ShapeError("circuit node " + std::to_string(k) + " does not reference strictly earlier signals");
    }
    if (opcode(nodes_[k].op) < 0 || opcode(nodes_[k].op) >= kNumGates) throw ShapeError("bad opcode");
  }
  for (SignalRef r : outputs_) {
    if (r >= num_signals()) throw ShapeError("circuit output reference out of range");
  }
}

HardCircuit crystallize(const LogicNetwork& net) {
  const WiringSpec& w = net.wiring();
  const auto base = static_cast<SignalRef>(w.input_width());
  std::vector<CircuitNode> nodes;
  nodes.reserve(net.num_nodes());
  for (std::size_t l = 0; l < w.num_layers(); ++l) {
    const SignalRef prev_base = l == 0 ? 0 : base + static_cast<SignalRef>(w.layer_offset(l - 1));
    const auto conns = w.layer(l);
    for (std::size_t j = 0; j < conns.size(); ++j) {
      nodes.push_back({net.node_gate(w.layer_offset(l) + j), prev_base + conns[j].in0, prev_base + conns[j].in1});
    }
  }
  std::vector<SignalRef> outputs;
  const SignalRef last = base + static_cast<SignalRef>(w.layer_offset(w.num_layers() - 1));
  for (std::size_t j = 0; j < w.output_width(); ++j) outputs.push_back(last + static_cast<SignalRef>(j));
  return HardCircuit(w.input_width(), std::move(nodes), std::move(outputs));
}

GateCensus census(const HardCircuit& circuit) {
  GateCensus c;
  c.total = circuit.num_nodes();
  for (const auto& n : circuit.nodes()) {
    ++c.histogram[opcode(n.op)];
    if (!is_passthrough(n.op)) ++c.active;
  }
  return c;
}

HardCircuit prune(const HardCircuit& circuit) {
  const std::size_t in_w = circuit.input_width();
  const auto nodes = circuit.nodes();

  // Forward simplification. Kept nodes stay in the original index space.
  std::vector<Signal> sig(circuit.num_signals());
  for (std::size_t i = 0; i < in_w; ++i) sig[i] = Signal::of(static_cast<SignalRef>(i));
  std::vector<CircuitNode> rewritten(nodes.begin(), nodes.end());

  for (std::size_t k = 0; k < nodes.size(); ++k) {
    const SignalRef self = static_cast<SignalRef>(in_w + k);
    GateOp op = nodes[k].op;
    Signal a = sig[nodes[k].in0];
    Signal b = sig[nodes[k].in1];

    if (!depends_on_a(op) && !depends_on_b(op)) {
      sig[self] = Signal::constant(eval_hard(op, false, false));
      continue;
    }
    // Reduce to a function of one signal where possible: f(x) given by
    // (f0, f1) = (f(0), f(1)).
    bool single = false;
    Signal x;
    bool f0 = false, f1 = false;
    if (!depends_on_b(op)) {
      single = true;
      x = a;
      f0 = eval_hard(op, false, false);
      f1 = eval_hard(op, true, false);
    } else if (!depends_on_a(op)) {
      single = true;
      x = b;
      f0 = eval_hard(op, false, false);
      f1 = eval_hard(op, false, true);
    } else if (a.is_const() && b.is_const()) {
      sig[self] = Signal::constant(eval_hard(op, a.value(), b.value()));
      continue;
    } else if (a.is_const()) {
      single = true;
      x = b;
      f0 = eval_hard(op, a.value(), false);
      f1 = eval_hard(op, a.value(), true);
    } else if (b.is_const()) {
      single = true;
      x = a;
      f0 = eval_hard(op, false, b.value());
      f1 = eval_hard(op, true, b.value());
    } else if (a.ref == b.ref) {
      single = true;
      x = a;
      f0 = eval_hard(op, false, false);
      f1 = eval_hard(op, true, true);
    }

    if (single) {
      if (x.is_const()) {
        sig[self] = Signal::constant(x.value() ? f1 : f0);
      } else if (f0 == f1) {
        sig[self] = Signal::constant(f0);
      } else if (!f0 && f1) {
        sig[self] = x;
      } else {
        rewritten[k] = {GateOp::NotA, x.ref, x.ref};
        sig[self] = Signal::of(self);
      }
      continue;
    }
    rewritten[k] = {op, a.ref, b.ref};
    sig[self] = Signal::of(self);
  }

  // Reachability from the outputs over the rewritten graph.
  std::vector<char> live(circuit.num_signals(), 0);
  bool need0 = false, need1 = false;
  for (SignalRef r : circuit.outputs()) {
    const Signal s = sig[r];
    if (s.is_const()) {
      (s.value() ? need1 : need0) = true;
    } else {
      live[s.ref] = 1;
    }
  }
  for (std::size_t k = nodes.size(); k-- > 0;) {
    const std::size_t self = in_w + k;
    if (!live[self]) continue;
    live[rewritten[k].in0] = 1;
    live[rewritten[k].in1] = 1;
  }

  std::vector<CircuitNode> out_nodes;
  const SignalRef const_ref = 0;
  SignalRef const0 = 0, const1 = 0;
  if ((need0 || need1) && in_w == 0) throw ShapeError("constant outputs need at least one circuit input");
  if (need0) {
    const0 = static_cast<SignalRef>(in_w + out_nodes.size());
    out_nodes.push_back({GateOp::False, const_ref, const_ref});
  }
  if (need1) {
    const1 = static_cast<SignalRef>(in_w + out_nodes.size());
    out_nodes.push_back({GateOp::True, const_ref, const_ref});
  }
  std::vector<SignalRef> remap(circuit.num_signals(), 0);
  for (std::size_t i = 0; i < in_w; ++i) remap[i] = static_cast<SignalRef>(i);
  for (std::size_t k = 0; k < nodes.size(); ++k) {
    const std::size_t self = in_w + k;
    if (!live[self]) continue;
    remap[self] = static_cast<SignalRef>(in_w + out_nodes.size());
    out_nodes.push_back({rewritten[k].op, remap[rewritten[k].in0], remap[rewritten[k].in1]});
  }
  std::vector<SignalRef> outputs;
  for (SignalRef r : circuit.outputs()) {
    const Signal s = sig[r];
    if (s.is_const()) {
      outputs.push_back(s.value() ? const1 : const0);
    } else {
      outputs.push_back(remap[s.ref]);
    }
  }
  return HardCircuit(in_w, std::move(out_nodes), std::move(outputs));
}

std::vector<std::uint8_t> eval_naive(const HardCircuit& circuit, std::span<const std::uint8_t> input) {
  if (input.size() != circuit.input_width()) throw ShapeError("circuit input width mismatch");
  std::vector<std::uint8_t> v(circuit.num_signals());
  for (std::size_t i = 0; i < input.size(); ++i) {
    if (input[i] > 1) throw ShapeError("circuit inputs must be binary");
    v[i] = input[i];
  }
  const auto nodes = circuit.nodes();
  for (std::size_t k = 0; k < nodes.size(); ++k) {
    v[circuit.input_width() + k] = eval_hard(nodes[k].op, v[nodes[k].in0] != 0, v[nodes[k].in1] != 0) ? 1 : 0;
  }
  std::vector<std::uint8_t> out;
  for (SignalRef r : circuit.outputs()) out.push_back(v[r]);
  return out;
}

void eval_packed_batch(const HardCircuit& circuit, std::span<const std::uint64_t> inputs, std::size_t words,
                       std::vector<std::uint64_t>& scratch, std::span<std::uint64_t> outputs) {
  const std::size_t in_w = circuit.input_width();
  if (inputs.size() != in_w * words) throw ShapeError("packed input shape mismatch");
  if (outputs.size() != circuit.outputs().size() * words) throw ShapeError("packed output shape mismatch");
  scratch.resize(circuit.num_signals() * words);
  std::copy(inputs.begin(), inputs.end(), scratch.begin());
  const auto nodes = circuit.nodes();
  for (std::size_t k = 0; k < nodes.size(); ++k) {
    const std::uint64_t* a = scratch.data() + nodes[k].in0 * words;
    const std::uint64_t* b = scratch.data() + nodes[k].in1 * words;
    std::uint64_t* out = scratch.data() + (in_w + k) * words;
    const GateOp op = nodes[k].op;
    for (std::size_t w = 0; w < words; ++w) out[w] = eval_word(op, a[w], b[w]);
  }
  const auto outs = circuit.outputs();
  for (std::size_t o = 0; o < outs.size(); ++o) {
    std::copy_n(scratch.data() + outs[o] * words, words, outputs.begin() + o * words);
  }
}

std::vector<std::uint64_t> eval_packed(const HardCircuit& circuit, std::span<const std::uint64_t> inputs,
                                       std::size_t lanes) {
  if (lanes > 64) throw ShapeError("lane count " + std::to_string(lanes) + " exceeds the 64-bit word width");
  std::vector<std::uint64_t> scratch;
  std::vector<std::uint64_t> out(circuit.outputs().size());
  eval_packed_batch(circuit, inputs, 1, scratch, out);
  const std::uint64_t mask = lane_mask(lanes);
  for (auto& w : out) w &= mask;
  return out;
}

std::string to_dot(const HardCircuit& circuit, std::string_view name) {
  std::ostringstream os;
  os << "digraph " << name << " {\n  rankdir=LR;\n";
  for (std::size_t i = 0; i < circuit.input_width(); ++i) {
    os << "  s" << i << " [shape=circle, label=\"in" << i << "\"];\n";
  }
  const auto nodes = circuit.nodes();
  for (std::size_t k = 0; k < nodes.size(); ++k) {
    os << "  s" << circuit.input_width() + k << " [shape=box, label=\"" << gate_name(nodes[k].op) << "\"];\n";
  }
  for (std::size_t k = 0; k < nodes.size(); ++k) {
    const std::size_t self = circuit.input_width() + k;
    if (is_constant(nodes[k].op)) continue;
    os << "  s" << nodes[k].in0 << " -> s" << self << " [label=\"a\"];\n";
    os << "  s" << nodes[k].in1 << " -> s" << self << " [label=\"b\"];\n";
  }
  const auto outs = circuit.outputs();
  for (std::size_t o = 0; o < outs.size(); ++o) {
    os << "  out" << o << " [shape=doublecircle, label=\"out" << o << "\"];\n";
    os << "  s" << outs[o] << " -> out" << o << ";\n";
  }
  os << "}\n";
  return os.str();
}

nlohmann::json circuit_to_json(const HardCircuit& circuit) {
  nlohmann::json nodes = nlohmann::json::array();
  const auto ns = circuit.nodes();
  for (std::size_t k = 0; k < ns.size(); ++k) {
    nodes.push_back({{"id", circuit.input_width() + k},
                     {"op", opcode(ns[k].op)},
                     {"name", gate_name(ns[k].op)},
                     {"in0", ns[k].in0},
                     {"in1", ns[k].in1}});
  }
  return {{"format_version", kCheckpointVersion},
          {"kind", "netlist"},
          {"input_width", circuit.input_width()},
          {"nodes", nodes},
          {"outputs", std::vector<SignalRef>(circuit.outputs().begin(), circuit.outputs().end())}};
}

HardCircuit circuit_from_json(const nlohmann::json& doc) {
  try {
    const int version = doc.at("format_version").get<int>();
    if (version != kCheckpointVersion) {
      throw CheckpointError("netlist format_version " + std::to_string(version) + " is not supported");
    }
    const auto in_w = doc.at("input_width").get<std::size_t>();
    std::vector<CircuitNode> nodes;
    for (const auto& n : doc.at("nodes")) {
      const auto id = n.at("id").get<std::size_t>();
      if (id != in_w + nodes.size()) throw CheckpointError("netlist node ids must be consecutive");
      const int op = n.at("op").get<int>();
      if (op < 0 || op >= kNumGates) throw CheckpointError("netlist opcode out of range");
      nodes.push_back({static_cast<GateOp>(op), n.at("in0").get<SignalRef>(), n.at("in1").get<SignalRef>()});
    }
    return HardCircuit(in_w, std::move(nodes), doc.at("outputs").get<std::vector<SignalRef>>());
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("corrupt netlist: ") + e.what());
  } catch (const ShapeError& e) {
    throw CheckpointError(std::string("corrupt netlist: ") + e.what());
  }
}

void export_circuit(const HardCircuit& circuit, CircuitFormat format, const std::filesystem::path& path) {
  if (format == CircuitFormat::NetlistJson) {
    write_json_file(circuit_to_json(circuit), path);
    return;
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << to_dot(circuit);
  if (!out) throw IoError("write failed for " + path.string());
}

HardCircuit load_circuit(const std::filesystem::path& path) { return circuit_from_json(read_json_file(path)); }

CircuitModel crystallize(const CaModel& model) {
  CircuitModel out;
  for (const auto& k : model.kernels()) out.kernels.push_back(crystallize(k));
  out.update = crystallize(model.update());
  out.channels = model.channels();
  out.kernel_bits = model.kernel_bits();
  return out;
}

namespace {

// Row-aligned bit planes: word (c, i, w) holds columns [64w, 64w + 64) of
// row i in channel c.
class PackedGrid {
 public:
  PackedGrid(std::size_t h, std::size_t w, std::size_t c)
      : height(h), width(w), channels(c), words_per_row((w + 63) / 64), bits(c * h * words_per_row, 0) {}

  static PackedGrid pack(const BitGrid& g) {
    PackedGrid p(g.height, g.width, g.channels);
    for (std::size_t i = 0; i < g.height; ++i) {
      for (std::size_t j = 0; j < g.width; ++j) {
        for (std::size_t c = 0; c < g.channels; ++c) {
          if (g.at(i, j, c)) p.row(c, i)[j / 64] |= std::uint64_t{1} << (j % 64);
        }
      }
    }
    return p;
  }

  BitGrid unpack() const {
    BitGrid g(height, width, channels);
    for (std::size_t i = 0; i < height; ++i) {
      for (std::size_t j = 0; j < width; ++j) {
        for (std::size_t c = 0; c < channels; ++c) g.at(i, j, c) = (row(c, i)[j / 64] >> (j % 64)) & 1;
      }
    }
    return g;
  }

  std::uint64_t* row(std::size_t c, std::size_t i) { return bits.data() + (c * height + i) * words_per_row; }
  const std::uint64_t* row(std::size_t c, std::size_t i) const {
    return bits.data() + (c * height + i) * words_per_row;
  }
  std::uint64_t last_word_mask() const { return lane_mask(width - 64 * (words_per_row - 1)); }

  std::size_t height, width, channels, words_per_row;
  std::vector<std::uint64_t> bits;
};

bool get_bit(const std::uint64_t* row, std::size_t j) { return (row[j / 64] >> (j % 64)) & 1; }

// Row i+di shifted so that lane j reads column j+dj, with boundary handling.
void shifted_row(const PackedGrid& g, std::size_t c, std::size_t i, int di, int dj, const Boundary& boundary,
                 std::span<std::uint64_t> out) {
  const std::size_t nw = g.words_per_row;
  const bool torus = boundary.mode == Boundary::Mode::Toroidal;
  const bool pad = boundary.pad_value(c) != 0;
  const std::uint64_t last_mask = g.last_word_mask();

  const long long y = static_cast<long long>(i) + di;
  const long long h = static_cast<long long>(g.height);
  if (!torus && (y < 0 || y >= h)) {
    for (std::size_t w = 0; w < nw; ++w) out[w] = pad ? ~std::uint64_t{0} : 0;
    out[nw - 1] &= last_mask;
    return;
  }
  const std::uint64_t* src = g.row(c, static_cast<std::size_t>(((y % h) + h) % h));
  const std::size_t W = g.width;
  if (dj == 0) {
    std::copy_n(src, nw, out.begin());
  } else if (dj == 1) {
    for (std::size_t w = 0; w < nw; ++w) out[w] = (src[w] >> 1) | (w + 1 < nw ? src[w + 1] << 63 : 0);
    const bool edge = torus ? get_bit(src, 0) : pad;
    const std::size_t j = W - 1;
    out[j / 64] = (out[j / 64] & ~(std::uint64_t{1} << (j % 64))) | (std::uint64_t{edge} << (j % 64));
  } else {
    for (std::size_t w = 0; w < nw; ++w) out[w] = (src[w] << 1) | (w > 0 ? src[w - 1] >> 63 : 0);
    const bool edge = torus ? get_bit(src, W - 1) : pad;
    out[0] = (out[0] & ~std::uint64_t{1}) | std::uint64_t{edge};
  }
  out[nw - 1] &= last_mask;
}

}  // namespace

std::vector<BitGrid> hard_rollout_packed(const CircuitModel& model, const BitGrid& grid0, std::size_t steps,
                                         const Boundary& boundary, const UpdateSchedule& schedule,
                                         const StepHook& hook) {
  if (steps == 0) throw ConfigError("rollout needs at least one step");
  if (grid0.channels != model.channels) throw ShapeError("grid channel count does not match the circuit model");
  const std::size_t H = grid0.height;
  const std::size_t C = model.channels;
  const std::size_t bits = model.kernel_bits;
  PackedGrid state = PackedGrid::pack(grid0);
  const std::size_t nw = state.words_per_row;
  const std::size_t plane = H * nw;  // words per channel plane
  const std::size_t kernel_words = C * plane;
  const std::size_t update_in_width = C + model.perception_width();
  if (model.update.input_width() != update_in_width) throw ShapeError("update circuit input width mismatch");

  std::vector<std::uint64_t> kernel_in(9 * kernel_words);
  std::vector<std::uint64_t> kernel_out(bits * kernel_words);
  std::vector<std::uint64_t> update_in(update_in_width * plane);
  std::vector<std::uint64_t> update_out(C * plane);
  std::vector<std::uint64_t> scratch;

  std::vector<BitGrid> out;
  out.reserve(steps + 1);
  out.push_back(grid0);
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t r = 0; r < 9; ++r) {
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t i = 0; i < H; ++i) {
          shifted_row(state, c, i, kNeighborOffsets[r][0], kNeighborOffsets[r][1], boundary,
                      std::span<std::uint64_t>(kernel_in.data() + r * kernel_words + (c * H + i) * nw, nw));
        }
      }
    }
    std::copy(state.bits.begin(), state.bits.end(), update_in.begin());
    for (std::size_t k = 0; k < model.kernels.size(); ++k) {
      eval_packed_batch(model.kernels[k], kernel_in, kernel_words, scratch, kernel_out);
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t b = 0; b < bits; ++b) {
          std::copy_n(kernel_out.data() + b * kernel_words + c * plane, plane,
                      update_in.data() + (C + (k * C + c) * bits + b) * plane);
        }
      }
    }
    eval_packed_batch(model.update, update_in, plane, scratch, update_out);

    std::vector<std::uint64_t> mask_words(plane, ~std::uint64_t{0});
    if (schedule.asynchronous) {
      const auto mask = update_mask(schedule, H, grid0.width, t);
      std::fill(mask_words.begin(), mask_words.end(), 0);
      for (std::size_t i = 0; i < H; ++i) {
        for (std::size_t j = 0; j < grid0.width; ++j) {
          if (mask[i * grid0.width + j]) mask_words[i * nw + j / 64] |= std::uint64_t{1} << (j % 64);
        }
      }
    }
    const std::uint64_t last_mask = state.last_word_mask();
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t i = 0; i < H; ++i) {
        std::uint64_t* dst = state.row(c, i);
        const std::uint64_t* src = update_out.data() + c * plane + i * nw;
        const std::uint64_t* m = mask_words.data() + i * nw;
        for (std::size_t w = 0; w < nw; ++w) dst[w] = (src[w] & m[w]) | (dst[w] & ~m[w]);
        dst[nw - 1] &= last_mask;
      }
    }

    BitGrid next = state.unpack();
    if (hook) {
      hook(t + 1, next);
      state = PackedGrid::pack(next);
    }
    out.push_back(std::move(next));
  }
  return out;
}

ModelPruneReport prune_model(const CircuitModel& model, std::span<const std::size_t> observed_channels) {
  ModelPruneReport report;
  const std::size_t C = model.channels;
  const std::size_t bits = model.kernel_bits;
  for (const auto& k : model.kernels) {
    const GateCensus cs = census(k);
    report.active_before += cs.active;
    report.total_before += cs.total;
  }
  const GateCensus ucs = census(model.update);
  report.active_before += ucs.active;
  report.total_before += ucs.total;

  std::set<std::size_t> live(observed_channels.begin(), observed_channels.end());
  for (std::size_t c : live) {
    if (c >= C) throw ShapeError("observed channel out of range");
  }
  std::vector<char> input_used;
  while (true) {
    std::vector<SignalRef> outs;
    for (std::size_t c : live) outs.push_back(model.update.outputs()[c]);
    const std::vector<CircuitNode> nodes(model.update.nodes().begin(), model.update.nodes().end());
    report.update = prune(HardCircuit(model.update.input_width(), nodes, outs));

    input_used.assign(model.update.input_width(), 0);
    for (const auto& n : report.update.nodes()) {
      if (is_constant(n.op)) continue;
      if (n.in0 < input_used.size()) input_used[n.in0] = 1;
      if (n.in1 < input_used.size()) input_used[n.in1] = 1;
    }
    for (SignalRef r : report.update.outputs()) {
      if (r < input_used.size()) input_used[r] = 1;
    }
    std::set<std::size_t> next = live;
    for (std::size_t idx = 0; idx < input_used.size(); ++idx) {
      if (!input_used[idx]) continue;
      next.insert(idx < C ? idx : ((idx - C) / bits) % C);
    }
    if (next == live) break;
    live = std::move(next);
  }
  report.live_channels.assign(live.begin(), live.end());

  const GateCensus pcs = census(report.update);
  report.active_after += pcs.active;
  report.total_after += pcs.total;
  for (std::size_t k = 0; k < model.kernels.size(); ++k) {
    std::set<SignalRef> wanted;
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t b = 0; b < bits; ++b) {
        if (input_used[C + (k * C + c) * bits + b]) wanted.insert(model.kernels[k].outputs()[b]);
      }
    }
    const std::vector<CircuitNode> nodes(model.kernels[k].nodes().begin(), model.kernels[k].nodes().end());
    HardCircuit pruned = prune(HardCircuit(model.kernels[k].input_width(), nodes,
                                           std::vector<SignalRef>(wanted.begin(), wanted.end())));
    const GateCensus kcs = census(pruned);
    report.active_after += kcs.active;
    report.total_after += kcs.total;
    report.kernels.push_back(std::move(pruned));
  }
  return report;
}

}  // namespace dlca
