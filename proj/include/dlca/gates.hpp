#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string_view>

namespace dlca {

// The 16 two-input boolean functions. The numeric values are the on-disk
// opcode and must never be reordered.
enum class GateOp : std::uint8_t {
  False = 0,
  And = 1,
  AAndNotB = 2,
  A = 3,
  NotAAndB = 4,
  B = 5,
  Xor = 6,
  Or = 7,
  Nor = 8,
  Xnor = 9,
  NotB = 10,
  AOrNotB = 11,
  NotA = 12,
  NotAOrB = 13,
  Nand = 14,
  True = 15,
};

inline constexpr int kNumGates = 16;

constexpr int opcode(GateOp op) { return static_cast<int>(op); }
constexpr GateOp gate_from_opcode(int code) { return static_cast<GateOp>(code & 15); }

constexpr bool is_passthrough(GateOp op) { return op == GateOp::A || op == GateOp::B; }
constexpr bool is_constant(GateOp op) { return op == GateOp::False || op == GateOp::True; }

std::string_view gate_name(GateOp op);
std::optional<GateOp> gate_from_name(std::string_view name);

bool eval_hard(GateOp op, bool a, bool b);
double eval_soft(GateOp op, double a, double b);

struct SoftGrad {
  double da = 0.0;
  double db = 0.0;
};
SoftGrad eval_soft_grad(GateOp op, double a, double b);

// Bitwise evaluation on 64 independent lanes.
std::uint64_t eval_word(GateOp op, std::uint64_t a, std::uint64_t b);

// Every relaxation is bilinear: c + ca*a + cb*b + cab*a*b. A mixture of
// gates is therefore also a single bilinear form, which is what the batched
// network engine evaluates.
struct GatePolynomial {
  double c = 0.0;
  double ca = 0.0;
  double cb = 0.0;
  double cab = 0.0;

  double operator()(double a, double b) const { return c + ca * a + cb * b + cab * a * b; }
  double d_da(double b) const { return ca + cab * b; }
  double d_db(double a) const { return cb + cab * a; }
};

GatePolynomial gate_polynomial(GateOp op);

using GateLogits = std::array<double, kNumGates>;
using GateProbs = std::array<double, kNumGates>;

struct GateDistribution {
  GateLogits logits{};

  static GateDistribution uniform() { return {}; }
  // Logit `margin` on `op`, zero elsewhere.
  static GateDistribution one_hot(GateOp op, double margin = 30.0);
};

GateProbs softmax(std::span<const double, kNumGates> logits, double temperature = 1.0);

// Most probable gate; ties resolve to the lowest opcode.
GateOp argmax_gate(std::span<const double, kNumGates> logits);

GatePolynomial mixture_polynomial(const GateProbs& probs);

double mixture_forward(const GateDistribution& dist, double a, double b, double temperature = 1.0);

struct MixtureGrad {
  GateLogits dlogits{};
  double da = 0.0;
  double db = 0.0;
};

MixtureGrad mixture_backward(const GateDistribution& dist, double a, double b, double upstream,
                             double temperature = 1.0);

// Chain rule from a gradient on the mixture polynomial coefficients back to
// the logits that produced `probs`.
void polynomial_grad_to_logits(const GateProbs& probs, const GatePolynomial& dpoly, double temperature,
                               std::span<double, kNumGates> dlogits);

}  // namespace dlca
