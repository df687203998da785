#include "mcqr/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

namespace mcqr {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using CMatMap = Eigen::Map<const RowMat>;
using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using CStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

CMatMap as_mat(const Tensor& t) {
  return CMatMap(t.data(), static_cast<Eigen::Index>(t.rows()),
                 static_cast<Eigen::Index>(t.cols()));
}
MatMap as_mat(Tensor& t) {
  return MatMap(t.data(), static_cast<Eigen::Index>(t.rows()),
                static_cast<Eigen::Index>(t.cols()));
}

// Forward products run row by row in a fixed order, so a row's result does not
// depend on how many other rows the operands have (GEMM blocking would).
template <class A, class B, class Out>
void rowwise_product(const A& a, const B& b, Out&& out) {
  out.setZero();
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index k = 0; k < a.cols(); ++k) out.row(i) += a(i, k) * b.row(k);
}

template <class A, class B, class Out>
void rowwise_product_nt(const A& a, const B& b, Out&& out) {
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < b.rows(); ++j) out(i, j) = a.row(i).dot(b.row(j));
}

void require_matrix(const DTensor& t, const char* op) {
  require(t.value().rank() == 2,
          std::string(op) + ": expected a matrix, got shape " + shape_str(t.shape()));
}

void require_same_tape(const DTensor& a, const DTensor& b) {
  require(&a.tape() == &b.tape(), "operands belong to different tapes");
}

}  // namespace

const char* op_name(OpTag tag) {
  switch (tag) {
    case OpTag::Constant: return "constant";
    case OpTag::Param: return "param";
    case OpTag::MatMul: return "matmul";
    case OpTag::MatMulNT: return "matmul_nt";
    case OpTag::Add: return "add";
    case OpTag::AddRow: return "add_row";
    case OpTag::Mul: return "mul";
    case OpTag::MulCol: return "mul_col";
    case OpTag::Affine: return "affine";
    case OpTag::Relu: return "relu";
    case OpTag::Sigmoid: return "sigmoid";
    case OpTag::Log: return "log";
    case OpTag::Softmax: return "softmax";
    case OpTag::LayerNorm: return "layer_norm";
    case OpTag::GatherRows: return "gather_rows";
    case OpTag::ConcatRows: return "concat_rows";
    case OpTag::SliceRows: return "slice_rows";
    case OpTag::Sum: return "sum";
    case OpTag::Pick: return "pick";
    case OpTag::ScatterCols: return "scatter_cols";
    case OpTag::PadCols: return "pad_cols";
    case OpTag::RelativeBias: return "relative_bias";
    case OpTag::Attention: return "attention";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// DTensor / Tape

Tape& DTensor::tape() const {
  require(tape_ != nullptr, "use of an unbound DTensor");
  return *tape_;
}
const Tensor& DTensor::value() const { return tape().node(id_).value; }
const Tensor& DTensor::grad() const { return tape().node(id_).grad; }

DTensor Tape::constant(Tensor value) {
  return push(OpTag::Constant, {}, std::move(value), nullptr);
}

DTensor Tape::param(Parameter& p) {
  require(!consumed_, "recording onto a tape that was already replayed; call clear() first");
  Node n{OpTag::Param, {}, p.value, {}, nullptr, &p, nullptr};
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

DTensor Tape::push(OpTag op, std::vector<std::size_t> inputs, Tensor value, BackwardFn backward,
                   std::shared_ptr<const Tensor> cache) {
  require(!consumed_, "recording onto a tape that was already replayed; call clear() first");
  for (auto in : inputs) require(in < nodes_.size(), "tape input id out of range");
  bool differentiable = false;
  for (auto in : inputs) differentiable = differentiable || needs_grad(in);
  if (!differentiable) backward = nullptr;
  nodes_.push_back(Node{op, std::move(inputs), std::move(value), {}, std::move(backward), nullptr,
                        std::move(cache)});
  return {this, nodes_.size() - 1};
}

bool Tape::needs_grad(std::size_t id) const {
  const Node& n = nodes_[id];
  return n.param != nullptr || n.backward != nullptr;
}

Tensor& Tape::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad = Tensor(n.value.shape(), 0.0);
  return n.grad;
}

void Tape::accumulate(std::size_t id, std::span<const double> delta) {
  Tensor& g = grad_buffer(id);
  require(g.size() == delta.size(), "gradient size mismatch");
  for (std::size_t i = 0; i < delta.size(); ++i) g[i] += delta[i];
}

void Tape::propagate(DTensor loss, double seed) {
  require(&loss.tape() == this, "loss does not belong to this tape");
  require(!consumed_, "backward called twice on the same recording");
  require(loss.value().size() == 1,
          "backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  consumed_ = true;
  grad_buffer(loss.id())[0] += seed;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.grad.empty() || !n.backward) continue;
    n.backward(*this, i);
  }
}

void Tape::backward(DTensor loss, double seed) {
  propagate(loss, seed);
  for (auto& n : nodes_) {
    if (!n.param || n.grad.empty()) continue;
    Parameter& p = *n.param;
    if (p.grad.size() != p.value.size()) p.zero_grad();
    for (std::size_t j = 0; j < n.grad.size(); ++j) p.grad[j] += n.grad[j];
  }
}

void Tape::backward(DTensor loss, GradientBuffers& sink, double seed) {
  propagate(loss, seed);
  for (auto& n : nodes_) {
    if (!n.param || n.grad.empty()) continue;
    require(n.param->index < sink.size(), "gradient sink too small for parameter " + n.param->name);
    Tensor& g = sink[n.param->index];
    if (g.size() != n.grad.size()) g = Tensor(n.grad.shape(), 0.0);
    for (std::size_t j = 0; j < n.grad.size(); ++j) g[j] += n.grad[j];
  }
}

void Tape::truncate(std::size_t size) {
  require(size <= nodes_.size(), "truncate beyond tape size");
  nodes_.resize(size);
}

void Tape::clear() {
  nodes_.clear();
  consumed_ = false;
}

// ---------------------------------------------------------------------------
// Ops

DTensor matmul(DTensor a, DTensor b) {
  require_same_tape(a, b);
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  require(a.cols() == b.rows(), "matmul: inner dimensions differ " + shape_str(a.shape()) + " x " +
                                    shape_str(b.shape()));
  Tensor out({a.rows(), b.cols()});
  rowwise_product(as_mat(a.value()), as_mat(b.value()), as_mat(out));
  const auto ia = a.id(), ib = b.id();
  return a.tape().push(OpTag::MatMul, {ia, ib}, std::move(out), [ia, ib](Tape& t, std::size_t self) {
    const Tensor& g = t.node(self).grad;
    if (t.needs_grad(ia))
      as_mat(t.grad_buffer(ia)).noalias() += as_mat(g) * as_mat(t.node(ib).value).transpose();
    if (t.needs_grad(ib))
      as_mat(t.grad_buffer(ib)).noalias() += as_mat(t.node(ia).value).transpose() * as_mat(g);
  });
}

DTensor matmul_nt(DTensor a, DTensor b) {
  require_same_tape(a, b);
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  require(a.cols() == b.cols(), "matmul_nt: inner dimensions differ " + shape_str(a.shape()) +
                                    " x " + shape_str(b.shape()) + "^T");
  Tensor out({a.rows(), b.rows()});
  rowwise_product_nt(as_mat(a.value()), as_mat(b.value()), as_mat(out));
  const auto ia = a.id(), ib = b.id();
  return a.tape().push(OpTag::MatMulNT, {ia, ib}, std::move(out),
                       [ia, ib](Tape& t, std::size_t self) {
                         const Tensor& g = t.node(self).grad;
                         if (t.needs_grad(ia))
                           as_mat(t.grad_buffer(ia)).noalias() += as_mat(g) * as_mat(t.node(ib).value);
                         if (t.needs_grad(ib))
                           as_mat(t.grad_buffer(ib)).noalias() +=
                               as_mat(g).transpose() * as_mat(t.node(ia).value);
                       });
}

DTensor add(DTensor a, DTensor b) {
  require_same_tape(a, b);
  require(a.shape() == b.shape(),
          "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape().push(OpTag::Add, {ia, ib}, std::move(out), [ia, ib](Tape& t, std::size_t self) {
    const Tensor& g = t.node(self).grad;
    if (t.needs_grad(ia)) t.accumulate(ia, g.values());
    if (t.needs_grad(ib)) t.accumulate(ib, g.values());
  });
}

DTensor add_row(DTensor a, DTensor row) {
  require_same_tape(a, row);
  require(row.value().size() == a.cols(), "add_row: row of size " +
                                              std::to_string(row.value().size()) +
                                              " for matrix " + shape_str(a.shape()));
  Tensor out = a.value();
  const Tensor& rv = row.value();
  const std::size_t n = a.cols();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += rv[i % n];
  const auto ia = a.id(), ir = row.id();
  return a.tape().push(OpTag::AddRow, {ia, ir}, std::move(out),
                       [ia, ir, n](Tape& t, std::size_t self) {
                         const Tensor& g = t.node(self).grad;
                         if (t.needs_grad(ia)) t.accumulate(ia, g.values());
                         if (t.needs_grad(ir)) {
                           Tensor& gr = t.grad_buffer(ir);
                           for (std::size_t i = 0; i < g.size(); ++i) gr[i % n] += g[i];
                         }
                       });
}

DTensor mul(DTensor a, DTensor b) {
  require_same_tape(a, b);
  require(a.shape() == b.shape(),
          "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape().push(OpTag::Mul, {ia, ib}, std::move(out), [ia, ib](Tape& t, std::size_t self) {
    const Tensor& g = t.node(self).grad;
    if (t.needs_grad(ia)) {
      Tensor& ga = t.grad_buffer(ia);
      const Tensor& bv = t.node(ib).value;
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.needs_grad(ib)) {
      Tensor& gb = t.grad_buffer(ib);
      const Tensor& av = t.node(ia).value;
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

DTensor mul_col(DTensor a, DTensor col) {
  require_same_tape(a, col);
  require_matrix(a, "mul_col");
  require(col.value().size() == a.rows(), "mul_col: column of size " +
                                              std::to_string(col.value().size()) +
                                              " for matrix " + shape_str(a.shape()));
  Tensor out = a.value();
  const Tensor& cv = col.value();
  const std::size_t n = a.cols();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= cv[i / n];
  const auto ia = a.id(), ic = col.id();
  return a.tape().push(OpTag::MulCol, {ia, ic}, std::move(out),
                       [ia, ic, n](Tape& t, std::size_t self) {
                         const Tensor& g = t.node(self).grad;
                         if (t.needs_grad(ia)) {
                           Tensor& ga = t.grad_buffer(ia);
                           const Tensor& cv = t.node(ic).value;
                           for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * cv[i / n];
                         }
                         if (t.needs_grad(ic)) {
                           Tensor& gc = t.grad_buffer(ic);
                           const Tensor& av = t.node(ia).value;
                           for (std::size_t i = 0; i < g.size(); ++i) gc[i / n] += g[i] * av[i];
                         }
                       });
}

DTensor affine(DTensor a, double scale, double shift) {
  Tensor out = a.value();
  for (auto& v : out.values()) v = v * scale + shift;
  const auto ia = a.id();
  return a.tape().push(OpTag::Affine, {ia}, std::move(out), [ia, scale](Tape& t, std::size_t self) {
    const Tensor& g = t.node(self).grad;
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * scale;
  });
}

DTensor relu(DTensor a) {
  Tensor out = a.value();
  for (auto& v : out.values()) v = v > 0.0 ? v : 0.0;
  const auto ia = a.id();
  return a.tape().push(OpTag::Relu, {ia}, std::move(out), [ia](Tape& t, std::size_t self) {
    const Tensor& g = t.node(self).grad;
    const Tensor& y = t.node(self).value;
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (y[i] > 0.0) ga[i] += g[i];
  });
}

DTensor sigmoid(DTensor a) {
  Tensor out = a.value();
  for (auto& v : out.values()) {
    // Stable in both tails.
    v = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  const auto ia = a.id();
  return a.tape().push(OpTag::Sigmoid, {ia}, std::move(out), [ia](Tape& t, std::size_t self) {
    const Tensor& g = t.node(self).grad;
    const Tensor& y = t.node(self).value;
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

DTensor log(DTensor a) {
  Tensor out = a.value();
  for (auto& v : out.values()) v = std::log(v);
  const auto ia = a.id();
  return a.tape().push(OpTag::Log, {ia}, std::move(out), [ia](Tape& t, std::size_t self) {
    const Tensor& g = t.node(self).grad;
    const Tensor& x = t.node(ia).value;
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / x[i];
  });
}

DTensor softmax(DTensor a, std::size_t axis) {
  const Shape& shape = a.shape();
  require(axis < shape.size(), "softmax: axis " + std::to_string(axis) + " invalid for shape " +
                                   shape_str(shape));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::size_t n = shape[axis];

  Tensor out = a.value();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t j = 0; j < inner; ++j) {
      const std::size_t base = o * n * inner + j;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, out[base + i * inner]);
      double z = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        double& v = out[base + i * inner];
        v = std::exp(v - mx);
        z += v;
      }
      for (std::size_t i = 0; i < n; ++i) out[base + i * inner] /= z;
    }
  }
  const auto ia = a.id();
  return a.tape().push(OpTag::Softmax, {ia}, std::move(out),
                       [ia, outer, inner, n](Tape& t, std::size_t self) {
                         const Tensor& g = t.node(self).grad;
                         const Tensor& y = t.node(self).value;
                         Tensor& ga = t.grad_buffer(ia);
                         for (std::size_t o = 0; o < outer; ++o) {
                           for (std::size_t j = 0; j < inner; ++j) {
                             const std::size_t base = o * n * inner + j;
                             double dot = 0.0;
                             for (std::size_t i = 0; i < n; ++i)
                               dot += g[base + i * inner] * y[base + i * inner];
                             for (std::size_t i = 0; i < n; ++i) {
                               const std::size_t k = base + i * inner;
                               ga[k] += y[k] * (g[k] - dot);
                             }
                           }
                         }
                       });
}

DTensor layer_norm(DTensor x, DTensor gain, DTensor bias, double eps) {
  require_same_tape(x, gain);
  require_same_tape(x, bias);
  require(eps > 0.0, "layer_norm: eps must be positive");
  const std::size_t n = x.cols();
  require(gain.value().size() == n && bias.value().size() == n,
          "layer_norm: gain/bias must match last axis of " + shape_str(x.shape()));
  const std::size_t rows = x.value().rows();

  Tensor out(x.shape());
  auto saved = std::make_shared<Tensor>(Shape{rows, n + 1});  // xhat | rstd
  const Tensor& xv = x.value();
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * n;
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += row[i];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (row[i] - mean) * (row[i] - mean);
    var /= static_cast<double>(n);
    const double rstd = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < n; ++i) {
      const double xhat = (row[i] - mean) * rstd;
      saved->at(r, i) = xhat;
      out[r * n + i] = xhat * gv[i] + bv[i];
    }
    saved->at(r, n) = rstd;
  }
  const auto ix = x.id(), ig = gain.id(), ib = bias.id();
  return x.tape().push(
      OpTag::LayerNorm, {ix, ig, ib}, std::move(out),
      [ix, ig, ib, rows, n](Tape& t, std::size_t self) {
        const Tensor& g = t.node(self).grad;
        const Tensor& saved = *t.node(self).cache;
        const Tensor& gv = t.node(ig).value;
        if (t.needs_grad(ig) || t.needs_grad(ib)) {
          Tensor& gg = t.grad_buffer(ig);
          Tensor& gb = t.grad_buffer(ib);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t i = 0; i < n; ++i) {
              gg[i] += g[r * n + i] * saved.at(r, i);
              gb[i] += g[r * n + i];
            }
        }
        if (!t.needs_grad(ix)) return;
        Tensor& gx = t.grad_buffer(ix);
        const double inv_n = 1.0 / static_cast<double>(n);
        for (std::size_t r = 0; r < rows; ++r) {
          double mean_d = 0.0, mean_dx = 0.0;
          for (std::size_t i = 0; i < n; ++i) {
            const double d = g[r * n + i] * gv[i];
            mean_d += d;
            mean_dx += d * saved.at(r, i);
          }
          mean_d *= inv_n;
          mean_dx *= inv_n;
          const double rstd = saved.at(r, n);
          for (std::size_t i = 0; i < n; ++i) {
            const double d = g[r * n + i] * gv[i];
            gx[r * n + i] += rstd * (d - mean_d - saved.at(r, i) * mean_dx);
          }
        }
      },
      saved);
}

DTensor gather_rows(DTensor table, std::vector<std::size_t> ids) {
  require_matrix(table, "gather_rows");
  require(!ids.empty(), "gather_rows: empty id list");
  const std::size_t n = table.cols();
  Tensor out({ids.size(), n});
  const Tensor& tv = table.value();
  for (std::size_t r = 0; r < ids.size(); ++r) {
    require(ids[r] < table.rows(), "gather_rows: id " + std::to_string(ids[r]) + " out of range");
    std::copy_n(tv.data() + ids[r] * n, n, out.data() + r * n);
  }
  const auto it = table.id();
  return table.tape().push(OpTag::GatherRows, {it}, std::move(out),
                           [it, ids = std::move(ids), n](Tape& t, std::size_t self) {
                             const Tensor& g = t.node(self).grad;
                             Tensor& gt = t.grad_buffer(it);
                             for (std::size_t r = 0; r < ids.size(); ++r)
                               for (std::size_t i = 0; i < n; ++i)
                                 gt[ids[r] * n + i] += g[r * n + i];
                           });
}

DTensor concat_rows(DTensor a, DTensor b) {
  require_same_tape(a, b);
  require_matrix(a, "concat_rows");
  require_matrix(b, "concat_rows");
  require(a.cols() == b.cols(), "concat_rows: column mismatch");
  Tensor out({a.rows() + b.rows(), a.cols()});
  std::copy(a.value().values().begin(), a.value().values().end(), out.data());
  std::copy(b.value().values().begin(), b.value().values().end(), out.data() + a.value().size());
  const auto ia = a.id(), ib = b.id();
  const std::size_t split = a.value().size();
  return a.tape().push(OpTag::ConcatRows, {ia, ib}, std::move(out),
                       [ia, ib, split](Tape& t, std::size_t self) {
                         auto g = t.node(self).grad.values();
                         if (t.needs_grad(ia)) t.accumulate(ia, g.subspan(0, split));
                         if (t.needs_grad(ib)) t.accumulate(ib, g.subspan(split));
                       });
}

DTensor slice_rows(DTensor a, std::size_t begin, std::size_t end) {
  require_matrix(a, "slice_rows");
  require(begin < end && end <= a.rows(), "slice_rows: invalid range [" + std::to_string(begin) +
                                              "," + std::to_string(end) + ") of " +
                                              std::to_string(a.rows()) + " rows");
  const std::size_t n = a.cols();
  Tensor out({end - begin, n});
  std::copy_n(a.value().data() + begin * n, (end - begin) * n, out.data());
  const auto ia = a.id();
  return a.tape().push(OpTag::SliceRows, {ia}, std::move(out),
                       [ia, begin, n](Tape& t, std::size_t self) {
                         const Tensor& g = t.node(self).grad;
                         Tensor& ga = t.grad_buffer(ia);
                         for (std::size_t i = 0; i < g.size(); ++i) ga[begin * n + i] += g[i];
                       });
}

DTensor sum(DTensor a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  const auto ia = a.id();
  return a.tape().push(OpTag::Sum, {ia}, Tensor::scalar(s), [ia](Tape& t, std::size_t self) {
    const double g = t.node(self).grad[0];
    for (auto& v : t.grad_buffer(ia).values()) v += g;
  });
}

DTensor pick(DTensor a, std::vector<std::size_t> cols) {
  require_matrix(a, "pick");
  require(cols.size() == a.rows(), "pick: need one column per row");
  const std::size_t n = a.cols();
  Tensor out({cols.size(), 1});
  for (std::size_t r = 0; r < cols.size(); ++r) {
    require(cols[r] < n, "pick: column " + std::to_string(cols[r]) + " out of range");
    out[r] = a.value()[r * n + cols[r]];
  }
  const auto ia = a.id();
  return a.tape().push(OpTag::Pick, {ia}, std::move(out),
                       [ia, cols = std::move(cols), n](Tape& t, std::size_t self) {
                         const Tensor& g = t.node(self).grad;
                         Tensor& ga = t.grad_buffer(ia);
                         for (std::size_t r = 0; r < cols.size(); ++r) ga[r * n + cols[r]] += g[r];
                       });
}

DTensor scatter_cols(DTensor a, std::vector<std::size_t> cols, std::size_t width) {
  require_matrix(a, "scatter_cols");
  require(cols.size() == a.cols(), "scatter_cols: need one target column per input column");
  for (auto c : cols) require(c < width, "scatter_cols: target column out of range");
  const std::size_t rows = a.rows(), n = a.cols();
  Tensor out({rows, width});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t s = 0; s < n; ++s) out[r * width + cols[s]] += a.value()[r * n + s];
  const auto ia = a.id();
  return a.tape().push(OpTag::ScatterCols, {ia}, std::move(out),
                       [ia, cols = std::move(cols), rows, n, width](Tape& t, std::size_t self) {
                         const Tensor& g = t.node(self).grad;
                         Tensor& ga = t.grad_buffer(ia);
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t s = 0; s < n; ++s)
                             ga[r * n + s] += g[r * width + cols[s]];
                       });
}

DTensor pad_cols(DTensor a, std::size_t width) {
  require_matrix(a, "pad_cols");
  require(width >= a.cols(), "pad_cols: width smaller than input");
  if (width == a.cols()) return a;
  const std::size_t rows = a.rows(), n = a.cols();
  Tensor out({rows, width});
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(a.value().data() + r * n, n, out.data() + r * width);
  const auto ia = a.id();
  return a.tape().push(OpTag::PadCols, {ia}, std::move(out),
                       [ia, rows, n, width](Tape& t, std::size_t self) {
                         const Tensor& g = t.node(self).grad;
                         Tensor& ga = t.grad_buffer(ia);
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t i = 0; i < n; ++i) ga[r * n + i] += g[r * width + i];
                       });
}

DTensor relative_bias(DTensor table, std::shared_ptr<const std::vector<int>> buckets,
                      std::size_t tq, std::size_t tk) {
  require_matrix(table, "relative_bias");
  require(buckets && buckets->size() == tq * tk, "relative_bias: bucket grid size mismatch");
  const std::size_t heads = table.cols();
  const std::size_t num_buckets = table.rows();
  for (int b : *buckets)
    require(b < static_cast<int>(num_buckets), "relative_bias: bucket out of range");
  Tensor out({heads, tq, tk});
  const Tensor& tv = table.value();
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t p = 0; p < tq * tk; ++p) {
      const int b = (*buckets)[p];
      if (b >= 0) out[h * tq * tk + p] = tv[static_cast<std::size_t>(b) * heads + h];
    }
  const auto it = table.id();
  return table.tape().push(OpTag::RelativeBias, {it}, std::move(out),
                           [it, buckets, heads, tq, tk](Tape& t, std::size_t self) {
                             const Tensor& g = t.node(self).grad;
                             Tensor& gt = t.grad_buffer(it);
                             for (std::size_t h = 0; h < heads; ++h)
                               for (std::size_t p = 0; p < tq * tk; ++p) {
                                 const int b = (*buckets)[p];
                                 if (b >= 0)
                                   gt[static_cast<std::size_t>(b) * heads + h] +=
                                       g[h * tq * tk + p];
                               }
                           });
}

DTensor attention(DTensor q, DTensor k, DTensor v, std::size_t heads, std::optional<DTensor> bias,
                  AttentionMask mask) {
  require_same_tape(q, k);
  require_same_tape(q, v);
  require_matrix(q, "attention");
  require_matrix(k, "attention");
  require_matrix(v, "attention");
  const std::size_t tq = q.rows(), tk = k.rows(), d = q.cols();
  require(k.cols() == d && v.cols() == d && v.rows() == tk, "attention: q/k/v shape mismatch");
  require(heads > 0 && d % heads == 0, "attention: width must be divisible by heads");
  if (bias) {
    require_same_tape(q, *bias);
    require(bias->shape() == Shape({heads, tq, tk}), "attention: bias must be heads x Tq x Tk");
  }
  if (mask) require(mask->size() == tq * tk, "attention: mask must be Tq x Tk");

  const std::size_t dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  auto probs = std::make_shared<Tensor>(Shape{heads, tq, tk});
  Tensor out({tq, d});
  const auto ld = static_cast<Eigen::Index>(d);
  const auto etq = static_cast<Eigen::Index>(tq), etk = static_cast<Eigen::Index>(tk),
             edh = static_cast<Eigen::Index>(dh);

  for (std::size_t h = 0; h < heads; ++h) {
    CStridedMap qh(q.value().data() + h * dh, etq, edh, Eigen::OuterStride<>(ld));
    CStridedMap kh(k.value().data() + h * dh, etk, edh, Eigen::OuterStride<>(ld));
    CStridedMap vh(v.value().data() + h * dh, etk, edh, Eigen::OuterStride<>(ld));
    MatMap p(probs->data() + h * tq * tk, etq, etk);
    rowwise_product_nt(qh, kh, p);
    p *= scale;
    if (bias) p += CMatMap(bias->value().data() + h * tq * tk, etq, etk);
    for (std::size_t i = 0; i < tq; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      bool any = false;
      for (std::size_t j = 0; j < tk; ++j) {
        if (mask && !(*mask)[i * tk + j]) continue;
        mx = std::max(mx, p(i, j));
        any = true;
      }
      require(any, "attention: query row sees no key");
      double z = 0.0;
      for (std::size_t j = 0; j < tk; ++j) {
        if (mask && !(*mask)[i * tk + j]) {
          p(i, j) = 0.0;
          continue;
        }
        p(i, j) = std::exp(p(i, j) - mx);
        z += p(i, j);
      }
      p.row(static_cast<Eigen::Index>(i)) /= z;
    }
    StridedMap oh(out.data() + h * dh, etq, edh, Eigen::OuterStride<>(ld));
    rowwise_product(p, vh, oh);
  }

  std::vector<std::size_t> inputs{q.id(), k.id(), v.id()};
  if (bias) inputs.push_back(bias->id());
  const auto iq = q.id(), ik = k.id(), iv = v.id();
  const std::optional<std::size_t> ibias =
      bias ? std::optional<std::size_t>(bias->id()) : std::nullopt;
  return q.tape().push(
      OpTag::Attention, std::move(inputs), std::move(out),
      [=](Tape& t, std::size_t self) {
        const Tensor& g = t.node(self).grad;
        const Tensor& probs = *t.node(self).cache;
        const Tensor& qv = t.node(iq).value;
        const Tensor& kv = t.node(ik).value;
        const Tensor& vv = t.node(iv).value;
        RowMat dp(etq, etk), ds(etq, etk);
        for (std::size_t h = 0; h < heads; ++h) {
          CStridedMap gh(g.data() + h * dh, etq, edh, Eigen::OuterStride<>(ld));
          CStridedMap qh(qv.data() + h * dh, etq, edh, Eigen::OuterStride<>(ld));
          CStridedMap kh(kv.data() + h * dh, etk, edh, Eigen::OuterStride<>(ld));
          CStridedMap vh(vv.data() + h * dh, etk, edh, Eigen::OuterStride<>(ld));
          CMatMap p(probs.data() + h * tq * tk, etq, etk);
          if (t.needs_grad(iv)) {
            StridedMap gvh(t.grad_buffer(iv).data() + h * dh, etk, edh, Eigen::OuterStride<>(ld));
            gvh.noalias() += p.transpose() * gh;
          }
          dp.noalias() = gh * vh.transpose();
          for (Eigen::Index i = 0; i < etq; ++i) {
            const double dot = p.row(i).dot(dp.row(i));
            ds.row(i) = p.row(i).array() * (dp.row(i).array() - dot);
          }
          if (ibias && t.needs_grad(*ibias))
            MatMap(t.grad_buffer(*ibias).data() + h * tq * tk, etq, etk) += ds;
          if (t.needs_grad(iq)) {
            StridedMap gqh(t.grad_buffer(iq).data() + h * dh, etq, edh, Eigen::OuterStride<>(ld));
            gqh.noalias() += (ds * kh) * scale;
          }
          if (t.needs_grad(ik)) {
            StridedMap gkh(t.grad_buffer(ik).data() + h * dh, etk, edh, Eigen::OuterStride<>(ld));
            gkh.noalias() += (ds.transpose() * qh) * scale;
          }
        }
      },
      probs);
}

const Tensor& attention_probs(DTensor attn) {
  const auto& n = attn.tape().node(attn.id());
  require(n.op == OpTag::Attention && n.cache, "attention_probs: not an attention node");
  return *n.cache;
}

}  // namespace mcqr
