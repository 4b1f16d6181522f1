#pragma once

// Reverse-mode automatic differentiation over dense 2-D tensors.
//
// A Tape records every operation in execution order, so its node list is
// topologically sorted by construction. Var is a cheap handle (tape, index).
// Only the operations needed by the distillation losses and models exist.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "mstkd/matrix.hpp"
#include "mstkd/rng.hpp"

namespace mstkd::ad {

enum class Mode { kTrain, kEval };

inline constexpr double kNormEpsilon = 1e-12;
inline constexpr double kCosineClamp = 1e-7;

class Tape;

class Var {
 public:
  Var() = default;

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Matrix& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  double item() const;  // value of a 1×1 tensor

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  // Receives the gradient of the loss w.r.t. the node's output (and the
  // output itself) and pushes contributions to its inputs through
  // Tape::accumulate.
  using BackwardFn = std::function<void(Tape&, const Matrix& out_grad,
                                        const Matrix& out_value)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Matrix value);      // differentiable input
  Var constant(Matrix value);  // no gradient

  const Matrix& value(Var v) const;
  bool requires_grad(Var v) const;
  bool has_grad(Var v) const;
  // Throws ContractError when backward has not populated this node.
  const Matrix& grad(Var v) const;

  // Seeds d(loss)/d(loss) = 1 and propagates in reverse record order.
  // Clears any gradients from an earlier call first.
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }

  // Used by operation implementations.
  Var record(Matrix value, std::vector<std::size_t> inputs, BackwardFn fn);
  void accumulate(std::size_t id, const Matrix& delta);

 private:
  struct Node {
    Matrix value;
    std::optional<Matrix> grad;
    bool requires_grad = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
  };

  const Node& node(Var v) const;

  std::vector<Node> nodes_;
};

// Structural ops.
Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);  // elementwise
Var scale(Var a, double factor);
Var add_row_bias(Var x, Var bias);  // bias is 1×cols, broadcast over rows
Var concat_cols(std::span<const Var> parts);
Var detach(Var a);  // same value, gradient blocked

// Reductions (all return 1×1).
Var sum(Var a);
Var mean(Var a);
Var mean_squared_error(Var a, Var b);

// Activations and regularizers.
Var leaky_relu(Var x, double slope);
Var dropout(Var x, double p, Mode mode, Rng& rng);

// Row-wise L2 normalization. Throws DegenerateEmbeddingError when a row norm
// is <= kNormEpsilon.
Var l2_normalize(Var x);

// Elementwise arccos of the input clamped to [-1+eps, 1-eps]; zero gradient
// where clamping is active.
Var arccos_clamped(Var x, double eps = kCosineClamp);
Var cos(Var x);

// Angular margin on the target column of each row of a cosine matrix:
// out[i, y_i] = cos(arccos(c) + margin_i), other entries are the clamped
// cosine. Clamping to [-1+eps, 1-eps] applies to every entry.
Var cos_margin(Var cosines, std::span<const std::uint32_t> labels,
               std::span<const double> margins, double eps = kCosineClamp);

// Per-row log-sum-exp (n×1), computed with max subtraction.
Var log_sum_exp_rows(Var x);
// out[i] = x[i, labels[i]] as an n×1 column.
Var pick(Var x, std::span<const std::uint32_t> labels);
// Per-row -log softmax(x)[label] (n×1). Written as (max - x_y) + log1p(rest)
// so a confident correct row keeps its tiny loss instead of cancelling to 0.
Var cross_entropy_rows(Var x, std::span<const std::uint32_t> labels);

}  // namespace mstkd::ad
