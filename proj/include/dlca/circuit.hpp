#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dlca/ca.hpp"

namespace dlca {

// References share one index space: [0, input_width) are circuit inputs and
// input_width + k is node k.
using SignalRef = std::uint32_t;

struct CircuitNode {
  GateOp op = GateOp::False;
  SignalRef in0 = 0;
  SignalRef in1 = 0;

  friend bool operator==(const CircuitNode&, const CircuitNode&) = default;
};

class HardCircuit {
 public:
  HardCircuit() = default;
  // Throws ShapeError unless every reference points strictly backward.
  HardCircuit(std::size_t input_width, std::vector<CircuitNode> nodes, std::vector<SignalRef> outputs);

  std::size_t input_width() const { return input_width_; }
  std::size_t num_nodes() const { return nodes_.size(); }
  std::size_t num_signals() const { return input_width_ + nodes_.size(); }
  std::span<const CircuitNode> nodes() const { return nodes_; }
  std::span<const SignalRef> outputs() const { return outputs_; }

  friend bool operator==(const HardCircuit&, const HardCircuit&) = default;

 private:
  std::size_t input_width_ = 0;
  std::vector<CircuitNode> nodes_;
  std::vector<SignalRef> outputs_;
};

// Argmax gate per node; wiring copied verbatim.
HardCircuit crystallize(const LogicNetwork& net);

struct GateCensus {
  std::size_t total = 0;
  std::size_t active = 0;  // excludes pass-through A and B
  std::array<std::size_t, kNumGates> histogram{};
};

GateCensus census(const HardCircuit& circuit);

// Behavior-preserving simplification: pass-through folding, constant
// propagation, single-input canonicalization, then removal of everything not
// reachable from the outputs.
HardCircuit prune(const HardCircuit& circuit);

std::vector<std::uint8_t> eval_naive(const HardCircuit& circuit, std::span<const std::uint8_t> input);

// Lane l of every input word is an independent evaluation; lanes >= `lanes`
// are zero in the result.
std::vector<std::uint64_t> eval_packed(const HardCircuit& circuit, std::span<const std::uint64_t> inputs,
                                       std::size_t lanes = 64);

// Word-batch form: inputs [input_width][words], outputs [outputs][words].
void eval_packed_batch(const HardCircuit& circuit, std::span<const std::uint64_t> inputs, std::size_t words,
                       std::vector<std::uint64_t>& scratch, std::span<std::uint64_t> outputs);

enum class CircuitFormat { Dot, NetlistJson };

std::string to_dot(const HardCircuit& circuit, std::string_view name = "circuit");
nlohmann::json circuit_to_json(const HardCircuit& circuit);
HardCircuit circuit_from_json(const nlohmann::json& doc);
void export_circuit(const HardCircuit& circuit, CircuitFormat format, const std::filesystem::path& path);
HardCircuit load_circuit(const std::filesystem::path& path);

// Crystallized counterpart of a CaModel.
struct CircuitModel {
  std::vector<HardCircuit> kernels;
  HardCircuit update;
  std::size_t channels = 0;
  std::size_t kernel_bits = 0;

  std::size_t perception_width() const { return kernels.size() * channels * kernel_bits; }
};

CircuitModel crystallize(const CaModel& model);

// Bit-packed hard rollout; bit-identical to rollout_hard() on the source model.
std::vector<BitGrid> hard_rollout_packed(const CircuitModel& model, const BitGrid& grid0, std::size_t steps,
                                         const Boundary& boundary, const UpdateSchedule& schedule,
                                         const StepHook& hook = {});

// Whole-model liveness: starting from the observed channels, keeps the
// update-network outputs and kernel bits that can influence them over any
// number of steps.
struct ModelPruneReport {
  std::vector<std::size_t> live_channels;
  HardCircuit update;                // pruned, outputs = live channels
  std::vector<HardCircuit> kernels;  // pruned, outputs = bits actually read
  std::size_t active_before = 0;     // all kernels + update, unpruned
  std::size_t active_after = 0;
  std::size_t total_before = 0;
  std::size_t total_after = 0;
};

ModelPruneReport prune_model(const CircuitModel& model, std::span<const std::size_t> observed_channels);

}  // namespace dlca
