#include "dlca/gates.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace dlca {

namespace {

constexpr std::array<std::string_view, kNumGates> kGateNames = {
    "FALSE", "AND", "A AND (NOT B)", "A",   "(NOT A) AND B", "B",    "XOR",  "OR",
    "NOR",   "XNOR", "NOT B",        "A OR (NOT B)", "NOT A", "(NOT A) OR B", "NAND", "TRUE",
};

// Rows of the relaxation table as (c, ca, cb, cab).
constexpr std::array<GatePolynomial, kNumGates> kPolynomials = {{
    {0, 0, 0, 0},    // FALSE
    {0, 0, 0, 1},    // AND
    {0, 1, 0, -1},   // A AND (NOT B)
    {0, 1, 0, 0},    // A
    {0, 0, 1, -1},   // (NOT A) AND B
    {0, 0, 1, 0},    // B
    {0, 1, 1, -2},   // XOR
    {0, 1, 1, -1},   // OR
    {1, -1, -1, 1},  // NOR
    {1, -1, -1, 2},  // XNOR
    {1, 0, -1, 0},   // NOT B
    {1, 0, -1, 1},   // A OR (NOT B)
    {1, -1, 0, 0},   // NOT A
    {1, -1, 0, 1},   // (NOT A) OR B
    {1, 0, 0, -1},   // NAND
    {1, 0, 0, 0},    // TRUE
}};

}  // namespace

std::string_view gate_name(GateOp op) { return kGateNames[opcode(op)]; }

std::optional<GateOp> gate_from_name(std::string_view name) {
  for (int i = 0; i < kNumGates; ++i) {
    if (kGateNames[i] == name) return static_cast<GateOp>(i);
  }
  return std::nullopt;
}

bool eval_hard(GateOp op, bool a, bool b) {
  // Opcode bits enumerate the truth table: bit (2*a + b) of the reversed
  // code. FALSE=0000, AND=0001 over (ab = 00, 01, 10, 11).
  const int code = opcode(op);
  const int row = (a ? 2 : 0) + (b ? 1 : 0);
  return ((code >> (3 - row)) & 1) != 0;
}

double eval_soft(GateOp op, double a, double b) {
  switch (op) {
    case GateOp::False: return 0.0;
    case GateOp::And: return a * b;
    case GateOp::AAndNotB: return a - a * b;
    case GateOp::A: return a;
    case GateOp::NotAAndB: return b - a * b;
    case GateOp::B: return b;
    case GateOp::Xor: return a + b - 2.0 * a * b;
    case GateOp::Or: return a + b - a * b;
    case GateOp::Nor: return 1.0 - (a + b - a * b);
    case GateOp::Xnor: return 1.0 - (a + b - 2.0 * a * b);
    case GateOp::NotB: return 1.0 - b;
    case GateOp::AOrNotB: return 1.0 - b + a * b;
    case GateOp::NotA: return 1.0 - a;
    case GateOp::NotAOrB: return 1.0 - a + a * b;
    case GateOp::Nand: return 1.0 - a * b;
    case GateOp::True: return 1.0;
  }
  return 0.0;
}

SoftGrad eval_soft_grad(GateOp op, double a, double b) {
  switch (op) {
    case GateOp::False: return {0.0, 0.0};
    case GateOp::And: return {b, a};
    case GateOp::AAndNotB: return {1.0 - b, -a};
    case GateOp::A: return {1.0, 0.0};
    case GateOp::NotAAndB: return {-b, 1.0 - a};
    case GateOp::B: return {0.0, 1.0};
    case GateOp::Xor: return {1.0 - 2.0 * b, 1.0 - 2.0 * a};
    case GateOp::Or: return {1.0 - b, 1.0 - a};
    case GateOp::Nor: return {b - 1.0, a - 1.0};
    case GateOp::Xnor: return {2.0 * b - 1.0, 2.0 * a - 1.0};
    case GateOp::NotB: return {0.0, -1.0};
    case GateOp::AOrNotB: return {b, a - 1.0};
    case GateOp::NotA: return {-1.0, 0.0};
    case GateOp::NotAOrB: return {b - 1.0, a};
    case GateOp::Nand: return {-b, -a};
    case GateOp::True: return {0.0, 0.0};
  }
  return {};
}

std::uint64_t eval_word(GateOp op, std::uint64_t a, std::uint64_t b) {
  switch (op) {
    case GateOp::False: return 0;
    case GateOp::And: return a & b;
    case GateOp::AAndNotB: return a & ~b;
    case GateOp::A: return a;
    case GateOp::NotAAndB: return ~a & b;
    case GateOp::B: return b;
    case GateOp::Xor: return a ^ b;
    case GateOp::Or: return a | b;
    case GateOp::Nor: return ~(a | b);
    case GateOp::Xnor: return ~(a ^ b);
    case GateOp::NotB: return ~b;
    case GateOp::AOrNotB: return a | ~b;
    case GateOp::NotA: return ~a;
    case GateOp::NotAOrB: return ~a | b;
    case GateOp::Nand: return ~(a & b);
    case GateOp::True: return ~std::uint64_t{0};
  }
  return 0;
}

GatePolynomial gate_polynomial(GateOp op) { return kPolynomials[opcode(op)]; }

GateDistribution GateDistribution::one_hot(GateOp op, double margin) {
  GateDistribution d;
  d.logits[opcode(op)] = margin;
  return d;
}

GateProbs softmax(std::span<const double, kNumGates> logits, double temperature) {
  GateProbs p{};
  const double inv_t = 1.0 / temperature;
  const double peak = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (int g = 0; g < kNumGates; ++g) {
    p[g] = std::exp((logits[g] - peak) * inv_t);
    total += p[g];
  }
  for (double& v : p) v /= total;
  return p;
}

GateOp argmax_gate(std::span<const double, kNumGates> logits) {
  int best = 0;
  for (int g = 1; g < kNumGates; ++g) {
    if (logits[g] > logits[best]) best = g;
  }
  return static_cast<GateOp>(best);
}

GatePolynomial mixture_polynomial(const GateProbs& probs) {
  GatePolynomial w;
  for (int g = 0; g < kNumGates; ++g) {
    const GatePolynomial& m = kPolynomials[g];
    w.c += probs[g] * m.c;
    w.ca += probs[g] * m.ca;
    w.cb += probs[g] * m.cb;
    w.cab += probs[g] * m.cab;
  }
  return w;
}

double mixture_forward(const GateDistribution& dist, double a, double b, double temperature) {
  const GateProbs p = softmax(dist.logits, temperature);
  double out = 0.0;
  for (int g = 0; g < kNumGates; ++g) out += p[g] * eval_soft(static_cast<GateOp>(g), a, b);
  return out;
}

MixtureGrad mixture_backward(const GateDistribution& dist, double a, double b, double upstream,
                             double temperature) {
  const GateProbs p = softmax(dist.logits, temperature);
  MixtureGrad out;
  GateProbs values{};
  double mean = 0.0;
  for (int g = 0; g < kNumGates; ++g) {
    const auto op = static_cast<GateOp>(g);
    values[g] = eval_soft(op, a, b);
    mean += p[g] * values[g];
    const SoftGrad sg = eval_soft_grad(op, a, b);
    out.da += p[g] * sg.da;
    out.db += p[g] * sg.db;
  }
  out.da *= upstream;
  out.db *= upstream;
  for (int g = 0; g < kNumGates; ++g) {
    out.dlogits[g] = upstream * p[g] * (values[g] - mean) / temperature;
  }
  return out;
}

void polynomial_grad_to_logits(const GateProbs& probs, const GatePolynomial& dpoly, double temperature,
                               std::span<double, kNumGates> dlogits) {
  // d/dp_g = <M_g, dpoly>; softmax Jacobian on top.
  GateProbs dp{};
  double mean = 0.0;
  for (int g = 0; g < kNumGates; ++g) {
    const GatePolynomial& m = kPolynomials[g];
    dp[g] = m.c * dpoly.c + m.ca * dpoly.ca + m.cb * dpoly.cb + m.cab * dpoly.cab;
    mean += probs[g] * dp[g];
  }
  const double inv_t = 1.0 / temperature;
  for (int g = 0; g < kNumGates; ++g) dlogits[g] = probs[g] * (dp[g] - mean) * inv_t;
}

}  // namespace dlca
