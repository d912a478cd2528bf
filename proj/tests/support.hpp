#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "dlca/ca.hpp"
#include "dlca/circuit.hpp"
#include "dlca/rng.hpp"

namespace dlca::test {

// |a - b| relative to the larger magnitude; exact zeros compare equal.
inline double rel_err(double a, double b, double floor = 1e-12) {
  const double scale = std::max({std::abs(a), std::abs(b), floor});
  return std::abs(a - b) / scale;
}

// Relative tolerance with a small absolute floor for gradients that are
// zero up to rounding.
inline bool grad_close(double analytic, double numeric, double rtol, double atol = 1e-9) {
  return std::abs(analytic - numeric) <= rtol * std::max(std::abs(analytic), std::abs(numeric)) + atol;
}

inline std::vector<double> random_unit(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform();
  return v;
}

inline std::vector<std::uint8_t> random_bits(Rng& rng, std::size_t n) {
  std::vector<std::uint8_t> v(n);
  for (auto& x : v) x = rng.bernoulli(0.5) ? 1 : 0;
  return v;
}

inline BitGrid random_grid(Rng& rng, std::size_t h, std::size_t w, std::size_t c) {
  BitGrid g(h, w, c);
  for (auto& x : g.values) x = rng.bernoulli(0.5) ? 1 : 0;
  return g;
}

inline CellGrid random_soft_grid(Rng& rng, std::size_t h, std::size_t w, std::size_t c) {
  CellGrid g(h, w, c);
  for (auto& x : g.values) x = rng.uniform();
  return g;
}

// Small model with random wiring and logits.
inline CaModel small_model(std::size_t channels, std::size_t kernels, std::uint64_t seed,
                           std::vector<std::size_t> kernel_widths = {4, 2},
                           std::vector<std::size_t> hidden = {12, 8}) {
  CaArchitecture a;
  a.channels = channels;
  a.num_kernels = kernels;
  a.kernel_widths = std::move(kernel_widths);
  a.kernel_wiring = WiringPolicy::UniformRandom;
  a.update_widths = std::move(hidden);
  a.update_widths.push_back(channels);
  a.kernel_init = InitSpec::normal(1.0);
  a.update_init = InitSpec::normal(1.0);
  return build_model(a, seed);
}

inline CaModel sharpened_model(const CaModel& m, double margin = 30.0) {
  std::vector<LogicNetwork> ks;
  for (const auto& k : m.kernels()) ks.push_back(sharpened(k, margin));
  return CaModel(std::move(ks), sharpened(m.update(), margin), m.channels());
}

// Random layered circuit with backward references only.
inline HardCircuit random_circuit(Rng& rng, std::size_t inputs, std::size_t nodes, std::size_t outputs) {
  std::vector<CircuitNode> ns;
  for (std::size_t k = 0; k < nodes; ++k) {
    const std::size_t avail = inputs + k;
    ns.push_back({gate_from_opcode(static_cast<int>(rng.index(kNumGates))), static_cast<SignalRef>(rng.index(avail)),
                  static_cast<SignalRef>(rng.index(avail))});
  }
  std::vector<SignalRef> outs;
  for (std::size_t o = 0; o < outputs; ++o) outs.push_back(static_cast<SignalRef>(rng.index(inputs + nodes)));
  return HardCircuit(inputs, std::move(ns), std::move(outs));
}

}  // namespace dlca::test
