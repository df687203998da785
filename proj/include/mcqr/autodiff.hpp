#pragma once

// Reverse-mode differentiation over an explicit, append-only tape.
//
// Every forward op appends one node holding its value, the ids of its inputs
// and a backward closure. Because inputs always precede outputs, replaying the
// tape from the loss towards the front visits every node exactly once.

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mcqr/tensor.hpp"

namespace mcqr {

/// A learnable array. `grad` accumulates across backward passes until
/// zero_grad() is called.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  std::size_t index = 0;  // position inside its ParameterSet

  void zero_grad() { grad = Tensor(value.shape(), 0.0); }
};

/// Gradient buffers indexed by Parameter::index. Used when several tapes run
/// against the same parameters and gradients must be reduced in a fixed order.
using GradientBuffers = std::vector<Tensor>;

class Tape;

/// Handle to one node of a Tape. Cheap to copy; only valid while the tape
/// keeps the node (see Tape::truncate / Tape::clear).
class DTensor {
 public:
  DTensor() = default;
  DTensor(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const;
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Tensor& value() const;
  const Tensor& grad() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

enum class OpTag : std::uint8_t {
  Constant,
  Param,
  MatMul,
  MatMulNT,
  Add,
  AddRow,
  Mul,
  MulCol,
  Affine,
  Relu,
  Sigmoid,
  Log,
  Softmax,
  LayerNorm,
  GatherRows,
  ConcatRows,
  SliceRows,
  Sum,
  Pick,
  ScatterCols,
  PadCols,
  RelativeBias,
  Attention,
};

const char* op_name(OpTag tag);

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  struct Node {
    OpTag op;
    std::vector<std::size_t> inputs;
    Tensor value;
    Tensor grad;  // empty until something flows into it
    BackwardFn backward;
    Parameter* param = nullptr;
    std::shared_ptr<const Tensor> cache;  // op-specific saved intermediate
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  DTensor constant(Tensor value);
  DTensor param(Parameter& p);

  /// Appends a node. `backward` may be empty for ops with no differentiable
  /// inputs.
  DTensor push(OpTag op, std::vector<std::size_t> inputs, Tensor value, BackwardFn backward,
               std::shared_ptr<const Tensor> cache = nullptr);

  const Node& node(std::size_t id) const { return nodes_[id]; }
  Node& node(std::size_t id) { return nodes_[id]; }
  std::size_t size() const { return nodes_.size(); }

  /// Adds `delta` into the gradient of node `id`, allocating it on first use.
  void accumulate(std::size_t id, std::span<const double> delta);
  /// True when gradient must flow into node `id` (a parameter or an op with a
  /// differentiable input).
  bool needs_grad(std::size_t id) const;
  Tensor& grad_buffer(std::size_t id);

  /// Seeds d(loss)/d(loss) = seed and propagates to every reachable node.
  /// Parameter leaves add their gradient into Parameter::grad.
  /// A tape can be replayed once; call clear() before recording again.
  void backward(DTensor loss, double seed = 1.0);
  /// Same, but parameter gradients go to `sink[param.index]` instead.
  void backward(DTensor loss, GradientBuffers& sink, double seed = 1.0);

  /// Drops every node at position >= size. Handles to dropped nodes dangle.
  void truncate(std::size_t size);
  void clear();
  bool consumed() const { return consumed_; }

 private:
  void propagate(DTensor loss, double seed);

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

// ---------------------------------------------------------------------------
// Differentiable ops. Shapes are matrices unless noted; no broadcasting beyond
// what each op documents.

DTensor matmul(DTensor a, DTensor b);     // (m×k)·(k×n)
DTensor matmul_nt(DTensor a, DTensor b);  // (m×k)·(n×k)ᵀ
DTensor add(DTensor a, DTensor b);        // same shape
DTensor add_row(DTensor a, DTensor row);  // (m×n) + (n) broadcast over rows
DTensor mul(DTensor a, DTensor b);        // elementwise, same shape
DTensor mul_col(DTensor a, DTensor col);  // (m×n) ⊙ (m×1) broadcast over columns
DTensor affine(DTensor a, double scale, double shift = 0.0);
DTensor relu(DTensor a);
DTensor sigmoid(DTensor a);
DTensor log(DTensor a);
DTensor softmax(DTensor a, std::size_t axis);
DTensor layer_norm(DTensor x, DTensor gain, DTensor bias, double eps);
DTensor gather_rows(DTensor table, std::vector<std::size_t> ids);
DTensor concat_rows(DTensor a, DTensor b);
DTensor slice_rows(DTensor a, std::size_t begin, std::size_t end);
DTensor sum(DTensor a);  // scalar of shape {1}
/// out[r] = a[r, cols[r]], shape (m×1).
DTensor pick(DTensor a, std::vector<std::size_t> cols);
/// out (m×width); out[r, cols[s]] += a[r, s].
DTensor scatter_cols(DTensor a, std::vector<std::size_t> cols, std::size_t width);
/// Right-pads columns with zeros up to `width`.
DTensor pad_cols(DTensor a, std::size_t width);

/// Looks up a (buckets×heads) table into a heads×Tq×Tk bias. A bucket of -1
/// yields zero bias for that pair.
DTensor relative_bias(DTensor table, std::shared_ptr<const std::vector<int>> buckets,
                      std::size_t tq, std::size_t tk);

/// Row-major Tq×Tk mask; nonzero = key visible to query.
using AttentionMask = std::shared_ptr<const std::vector<std::uint8_t>>;

/// Multi-head scaled dot-product attention over pre-projected inputs.
/// q: Tq×d, k,v: Tk×d, optional bias heads×Tq×Tk, optional mask. Every query
/// row must see at least one key. The node caches probabilities
/// (heads×Tq×Tk), readable through attention_probs().
DTensor attention(DTensor q, DTensor k, DTensor v, std::size_t heads,
                  std::optional<DTensor> bias = std::nullopt, AttentionMask mask = nullptr);
const Tensor& attention_probs(DTensor attn);

}  // namespace mcqr
