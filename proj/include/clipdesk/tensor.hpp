#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace clipdesk {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);

// Row-major 64-bit dense array. Rank 1 tensors behave as a single row.
struct Tensor {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation or zero_grad()
  bool requires_grad = false;

  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor scalar(double value, bool requires_grad = false);

  std::size_t size() const noexcept { return data.size(); }
  std::size_t rank() const noexcept { return shape.size(); }
  std::size_t rows() const noexcept;
  std::size_t cols() const noexcept;

  double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }
  const double* row(std::size_t r) const { return data.data() + r * cols(); }
  double* row(std::size_t r) { return data.data() + r * cols(); }

  bool has_grad() const noexcept { return !grad.empty(); }
  void zero_grad();
};

class Tape;

// Handle to a value recorded on a Tape.
struct Var {
  const Tape* tape = nullptr;
  std::uint32_t id = 0;
};

// Reverse-mode tape. Values are recorded in execution order, so the node list
// is topologically sorted by construction and backward is one reverse sweep.
//
// Leaves registered with leaf() alias caller-owned tensors, which must outlive
// the tape. After backward(), every leaf with requires_grad has dLoss/dLeaf
// added into its grad buffer. A tape supports exactly one backward pass.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor& tensor);
  // Aliases a caller-owned tensor that never receives gradients.
  Var input(const Tensor& tensor);
  Var constant(Tensor tensor);
  const Tensor& value(Var v) const;
  std::size_t node_count() const noexcept { return nodes_.size(); }

  Var matmul(Var a, Var b);
  Var transpose(Var x);
  Var relu(Var x);
  Var exp(Var x);
  Var add(Var a, Var b);
  // Adds a 1×n row to every row of an m×n value.
  Var add_row_broadcast(Var x, Var row);
  Var mean_pool_rows(Var x);
  // Mean over consecutive row groups; lengths must sum to the row count.
  Var segment_mean_rows(Var x, std::vector<std::size_t> lengths);
  // x multiplied by a 1×1 value that participates in differentiation.
  Var scale_by_scalar_param(Var x, Var s);
  Var scale(Var x, double factor);
  Var embedding_lookup(Var table, std::vector<std::size_t> ids);
  Var l2_normalize_rows(Var x);
  Var log_softmax_rows(Var x);
  // -(1/m) Σ_i x[i, targets[i]] as a 1×1 value.
  Var mean_nll(Var log_probs, std::vector<std::size_t> targets);
  // -(Σ_i w_i x[i, targets[i]]) / Σ_i w_i with non-negative weights.
  Var weighted_nll(Var log_probs, std::vector<std::size_t> targets, std::vector<double> weights);
  Var sum(Var x);
  Var sum_squares(Var x);

  void backward(Var loss);

 private:
  enum class Op : std::uint8_t {
    kMatmul,
    kTranspose,
    kRelu,
    kExp,
    kAdd,
    kAddRow,
    kSegmentMean,
    kScaleParam,
    kScale,
    kLookup,
    kNormalize,
    kLogSoftmax,
    kMeanNll,
    kWeightedNll,
    kSum,
    kSumSquares,
  };

  struct Slot {
    Tensor owned;
    const Tensor* view = nullptr;
    Tensor* target = nullptr;  // set for leaves that collect gradients
    bool needs_grad = false;
  };

  struct Node {
    Op op;
    std::uint32_t in0 = 0;
    std::uint32_t in1 = 0;
    std::uint32_t out = 0;
    std::vector<std::size_t> aux;
    double factor = 0.0;
    std::vector<double> coef;  // per-row weights of kWeightedNll, already normalized
  };

  std::uint32_t check(Var v) const;
  const Tensor& at(std::uint32_t id) const;
  Var record(Op op, Tensor out, std::uint32_t in0, std::uint32_t in1,
             std::vector<std::size_t> aux = {}, double factor = 0.0);
  void backprop(const Node& node, std::vector<std::vector<double>>& grads);

  std::deque<Slot> slots_;
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

// Fills every grad buffer with zeros, allocating where needed.
void zero_grads(std::span<Tensor* const> tensors);

// Largest |analytic - central difference| / max(1, |analytic|, |central|)
// over sampled coordinates of every tensor in params. f must build the loss on
// the tape it is handed and be deterministic; grad buffers of params are
// overwritten. At least `samples` coordinates (or all) are checked per tensor.
double grad_check(const std::function<Var(Tape&)>& f, std::span<Tensor* const> params,
                  double h, std::size_t samples = 50, std::uint64_t seed = 0);

}  // namespace clipdesk
