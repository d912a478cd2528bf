#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "dlca/gates.hpp"

namespace dlca {

struct Connection {
  std::uint32_t in0 = 0;
  std::uint32_t in1 = 0;

  friend bool operator==(const Connection&, const Connection&) = default;
};

enum class WiringPolicy {
  // Every previous-layer output is used at least once when the layer has
  // enough input slots; the remaining slots are random.
  CoverInputsThenRandom,
  // Node i reads (2i, 2i+1).
  HalvingPairs,
  UniformRandom,
  // Perception kernels over a 9-cell neighborhood (center first): first-layer
  // node k reads (center, neighbor k); deeper layers use halving pairs.
  CenterNeighbors,
};

std::string_view wiring_policy_name(WiringPolicy policy);
WiringPolicy wiring_policy_from_name(std::string_view name);

class WiringSpec {
 public:
  WiringSpec() = default;
  // Validates every connection; throws ConfigError on bad indices.
  WiringSpec(std::size_t input_width, std::vector<std::vector<Connection>> layers,
             WiringPolicy policy = WiringPolicy::UniformRandom, std::uint64_t seed = 0);

  std::size_t input_width() const { return input_width_; }
  std::size_t num_layers() const { return layers_.size(); }
  std::span<const Connection> layer(std::size_t l) const { return layers_[l]; }
  std::size_t layer_width(std::size_t l) const { return layers_[l].size(); }
  std::size_t prev_width(std::size_t l) const { return l == 0 ? input_width_ : layers_[l - 1].size(); }
  std::size_t output_width() const { return layers_.empty() ? 0 : layers_.back().size(); }
  std::size_t total_nodes() const { return total_nodes_; }
  // Global index of the first node of layer l.
  std::size_t layer_offset(std::size_t l) const { return offsets_[l]; }
  std::vector<std::size_t> layer_widths() const;

  WiringPolicy policy() const { return policy_; }
  std::uint64_t seed() const { return seed_; }

  friend bool operator==(const WiringSpec& a, const WiringSpec& b) {
    return a.input_width_ == b.input_width_ && a.layers_ == b.layers_;
  }

 private:
  std::size_t input_width_ = 0;
  std::vector<std::vector<Connection>> layers_;
  std::vector<std::size_t> offsets_;
  std::size_t total_nodes_ = 0;
  WiringPolicy policy_ = WiringPolicy::UniformRandom;
  std::uint64_t seed_ = 0;
};

WiringSpec build_wiring(std::size_t input_width, std::span<const std::size_t> layer_widths, WiringPolicy policy,
                        std::uint64_t seed);

struct InitSpec {
  enum class Kind { Normal, PassthroughBias };
  Kind kind = Kind::Normal;
  double sigma = 1.0;
  // Added to the opcode-3 ("A") logit under PassthroughBias.
  double bias = 0.0;

  static InitSpec normal(double sigma) { return {Kind::Normal, sigma, 0.0}; }
  static InitSpec passthrough(double bias, double sigma = 1.0) { return {Kind::PassthroughBias, sigma, bias}; }
};

class LogicNetwork {
 public:
  LogicNetwork() = default;
  LogicNetwork(WiringSpec wiring, std::vector<double> logits, InitSpec init = {}, std::uint64_t init_seed = 0,
               double temperature = 1.0);

  const WiringSpec& wiring() const { return wiring_; }
  std::size_t num_nodes() const { return wiring_.total_nodes(); }
  std::size_t input_width() const { return wiring_.input_width(); }
  std::size_t output_width() const { return wiring_.output_width(); }

  std::span<const double, kNumGates> node_logits(std::size_t node) const {
    return std::span<const double, kNumGates>(logits_.data() + node * kNumGates, kNumGates);
  }
  std::span<double, kNumGates> node_logits(std::size_t node) {
    return std::span<double, kNumGates>(logits_.data() + node * kNumGates, kNumGates);
  }
  // Flat view, 16 logits per node in node order.
  std::span<const double> logits() const { return logits_; }
  std::span<double> logits() { return logits_; }

  const InitSpec& init() const { return init_; }
  std::uint64_t init_seed() const { return init_seed_; }
  double temperature() const { return temperature_; }

  GateOp node_gate(std::size_t node) const { return argmax_gate(node_logits(node)); }

 private:
  WiringSpec wiring_;
  std::vector<double> logits_;
  InitSpec init_;
  std::uint64_t init_seed_ = 0;
  double temperature_ = 1.0;
};

LogicNetwork init_params(WiringSpec wiring, const InitSpec& init, std::uint64_t seed, double temperature = 1.0);

// Copy whose logits are `margin` on each node's argmax gate and 0 elsewhere.
LogicNetwork sharpened(const LogicNetwork& net, double margin = 30.0);

// Per-node mixture polynomial at the network's temperature.
std::vector<GatePolynomial> mixture_polynomials(const LogicNetwork& net);
// Polynomial of each node's argmax gate (the crystallized circuit).
std::vector<GatePolynomial> argmax_polynomials(const LogicNetwork& net);

// Activations are node-major: value of node n for batch item b lives at
// [n * batch + b]. Only layer outputs are stored; gate inputs are recovered
// through the wiring.
struct ActivationTape {
  std::size_t batch = 0;
  std::vector<double> input;
  std::vector<std::vector<double>> layers;

  std::span<const double> output() const { return layers.back(); }
};

void forward_soft_batch(const LogicNetwork& net, std::span<const GatePolynomial> polys,
                        std::span<const double> input, std::size_t batch, ActivationTape& tape);

// Accumulates (+=) coefficient gradients into poly_grads. input_grad is
// overwritten when non-empty; pass an empty span to skip it.
void backward_batch(const LogicNetwork& net, std::span<const GatePolynomial> polys, const ActivationTape& tape,
                    std::span<const double> output_grad, std::span<GatePolynomial> poly_grads,
                    std::span<double> input_grad);

// Converts accumulated coefficient gradients into logit gradients (flat,
// 16 per node), accumulating into `out`.
void accumulate_logit_grads(const LogicNetwork& net, std::span<const GatePolynomial> poly_grads,
                            std::span<double> out);

struct SoftForward {
  std::vector<double> output;
  ActivationTape tape;
};

SoftForward forward_soft(const LogicNetwork& net, std::span<const double> input);

struct NetworkGrad {
  std::vector<double> param_grads;  // 16 per node
  std::vector<double> input_grad;
};

NetworkGrad backward(const LogicNetwork& net, const ActivationTape& tape, std::span<const double> output_grad);

std::vector<std::uint8_t> forward_hard(const LogicNetwork& net, std::span<const std::uint8_t> input);

// Node-major byte batch evaluation with argmax gates.
std::vector<std::uint8_t> forward_hard_batch(const LogicNetwork& net, std::span<const std::uint8_t> input,
                                             std::size_t batch);

inline constexpr int kCheckpointVersion = 1;

nlohmann::json network_to_json(const LogicNetwork& net);
LogicNetwork network_from_json(const nlohmann::json& doc);

void save_params(const LogicNetwork& net, const std::filesystem::path& path);
LogicNetwork load_params(const std::filesystem::path& path);

// Shared helpers for versioned JSON documents.
nlohmann::json read_json_file(const std::filesystem::path& path);
void write_json_file(const nlohmann::json& doc, const std::filesystem::path& path);

}  // namespace dlca
