#include "idt/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace idt::nd {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;
using ConstStrided = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
using MutStrided = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;

Tape& tape_of(Var v) {
  if (v.tape == nullptr) throw std::invalid_argument("Var is not attached to a tape");
  return *v.tape;
}

Tape& common_tape(Var a, Var b) {
  if (a.tape != b.tape) throw std::invalid_argument("Vars belong to different tapes");
  return tape_of(a);
}

void require_same_shape(Var a, Var b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
}

void require_matrix(Var a, const char* op) {
  if (a.value().rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
  }
}

// Elementwise unary op; `deriv(x, y)` returns dy/dx.
template <typename F, typename D>
Var unary(Var a, F forward, D deriv) {
  const Tensor& x = a.value();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = forward(x[i]);
  Tensor y(x.shape(), std::move(out));
  Tensor xs = x;
  Tensor ys = y;
  return tape_of(a).record(std::move(y), {a}, [xs, ys, deriv](const BackwardContext& ctx) {
    if (!ctx.inputs[0]) return;
    auto& ga = *ctx.inputs[0];
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += ctx.grad_out[i] * deriv(xs[i], ys[i]);
  });
}

double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

}  // namespace

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// ---- Tensor ---------------------------------------------------------------

Tensor::Tensor() : data_(std::make_shared<const std::vector<double>>(1, 0.0)) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)) {
  for (auto e : shape_) {
    if (e == 0) throw ShapeError("tensor extents must be positive: " + shape_str(shape_));
  }
  if (shape_size(shape_) != data.size()) {
    throw ShapeError("tensor shape " + shape_str(shape_) + " does not match " +
                     std::to_string(data.size()) + " elements");
  }
  data_ = std::make_shared<const std::vector<double>>(std::move(data));
}

Tensor Tensor::zeros(Shape shape) { return filled(std::move(shape), 0.0); }

Tensor Tensor::filled(Shape shape, double value) {
  const auto n = shape_size(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape_));
  return (*data_)[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != size()) {
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  Tensor t = *this;
  t.shape_ = std::move(shape);
  return t;
}

bool operator==(const Tensor& a, const Tensor& b) {
  return a.shape_ == b.shape_ && *a.data_ == *b.data_;
}

// ---- Tape -----------------------------------------------------------------

const Tensor& Var::value() const { return tape_of(*this).value(*this); }

Var Tape::leaf(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, true});
  return Var{this, nodes_.size() - 1};
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, false});
  return Var{this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  Node node{std::move(value), {}, std::move(backward), false};
  node.inputs.reserve(inputs.size());
  for (const Var& in : inputs) {
    if (!owns(in)) throw std::invalid_argument("operation input is not recorded on this tape");
    node.inputs.push_back(in.id);
    node.requires_grad = node.requires_grad || nodes_[in.id].requires_grad;
  }
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1};
}

const Tensor& Tape::value(Var v) const {
  if (!owns(v)) throw std::invalid_argument("Var is not recorded on this tape");
  return nodes_[v.id].value;
}

bool Tape::requires_grad(Var v) const {
  if (!owns(v)) throw std::invalid_argument("Var is not recorded on this tape");
  return nodes_[v.id].requires_grad;
}

std::vector<Tensor> Tape::grad(Var output, std::span<const Var> inputs) const {
  if (!owns(output)) throw std::invalid_argument("grad: output is not recorded on this tape");
  if (!nodes_[output.id].value.is_scalar()) {
    throw ShapeError("grad: output must be a scalar, got " +
                     shape_str(nodes_[output.id].value.shape()));
  }
  std::vector<bool> keep(nodes_.size(), false);
  for (const Var& in : inputs) {
    if (!owns(in)) throw std::invalid_argument("grad: input is not recorded on this tape");
    keep[in.id] = true;
  }

  std::vector<std::vector<double>> grads(nodes_.size());
  grads[output.id].assign(1, 1.0);
  std::vector<std::vector<double>*> ptrs;
  for (std::size_t i = output.id + 1; i-- > 0;) {
    const Node& node = nodes_[i];
    if (grads[i].empty() || !node.requires_grad || !node.backward) continue;
    ptrs.assign(node.inputs.size(), nullptr);
    for (std::size_t j = 0; j < node.inputs.size(); ++j) {
      const std::size_t in = node.inputs[j];
      if (!nodes_[in].requires_grad) continue;
      if (grads[in].empty()) grads[in].assign(nodes_[in].value.size(), 0.0);
      ptrs[j] = &grads[in];
    }
    node.backward(BackwardContext{grads[i], ptrs});
    if (!keep[i]) std::vector<double>().swap(grads[i]);
  }

  std::vector<Tensor> result;
  result.reserve(inputs.size());
  for (const Var& in : inputs) {
    const Shape& shape = nodes_[in.id].value.shape();
    if (grads[in.id].empty()) {
      result.push_back(Tensor::zeros(shape));
    } else {
      result.emplace_back(shape, grads[in.id]);
    }
  }
  return result;
}

std::vector<Tensor> grad(Var output, std::span<const Var> inputs) {
  return tape_of(output).grad(output, inputs);
}

// ---- elementwise ----------------------------------------------------------

Var add(Var a, Var b) {
  require_same_shape(a, b, "add");
  Tape& t = common_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return t.record(Tensor(x.shape(), std::move(out)), {a, b}, [](const BackwardContext& ctx) {
    for (auto* g : ctx.inputs) {
      if (!g) continue;
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += ctx.grad_out[i];
    }
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a, b, "sub");
  Tape& t = common_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return t.record(Tensor(x.shape(), std::move(out)), {a, b}, [](const BackwardContext& ctx) {
    if (auto* g = ctx.inputs[0]) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += ctx.grad_out[i];
    }
    if (auto* g = ctx.inputs[1]) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= ctx.grad_out[i];
    }
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a, b, "mul");
  Tape& t = common_tape(a, b);
  Tensor x = a.value();
  Tensor y = b.value();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return t.record(Tensor(x.shape(), std::move(out)), {a, b}, [x, y](const BackwardContext& ctx) {
    if (auto* g = ctx.inputs[0]) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += ctx.grad_out[i] * y[i];
    }
    if (auto* g = ctx.inputs[1]) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += ctx.grad_out[i] * x[i];
    }
  });
}

Var neg(Var a) { return scale(a, -1.0); }

Var scale(Var a, double c) {
  return unary(a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Var add_scalar(Var a, double c) {
  return unary(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Var exp(Var a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(Var a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var abs(Var a) {
  return unary(
      a, [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Var square(Var a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var sigmoid(Var a) {
  return unary(a, sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}

Var softplus(Var a) {
  return unary(
      a, [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); },
      [](double x, double) { return sigmoid_scalar(x); });
}

Var gelu(Var a) {
  return unary(
      a,
      [](double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x))); },
      [](double x, double) {
        const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
      });
}

// ---- reductions -----------------------------------------------------------

Var sum(Var a) {
  const Tensor& x = a.value();
  double s = 0.0;
  for (double v : x.data()) s += v;
  return tape_of(a).record(Tensor::scalar(s), {a}, [](const BackwardContext& ctx) {
    if (auto* g = ctx.inputs[0]) {
      for (auto& v : *g) v += ctx.grad_out[0];
    }
  });
}

Var mean(Var a) {
  const Tensor& x = a.value();
  double s = 0.0;
  for (double v : x.data()) s += v;
  const double inv = 1.0 / static_cast<double>(x.size());
  return tape_of(a).record(Tensor::scalar(s * inv), {a}, [inv](const BackwardContext& ctx) {
    if (auto* g = ctx.inputs[0]) {
      const double d = ctx.grad_out[0] * inv;
      for (auto& v : *g) v += d;
    }
  });
}

Var mean_rows(Var a) {
  require_matrix(a, "mean_rows");
  const Tensor& x = a.value();
  const std::size_t n = x.dim(0);
  const std::size_t d = x.dim(1);
  std::vector<double> out(d, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < d; ++c) out[c] += x[r * d + c];
  }
  const double inv = 1.0 / static_cast<double>(n);
  for (auto& v : out) v *= inv;
  return tape_of(a).record(Tensor({1, d}, std::move(out)), {a},
                           [n, d, inv](const BackwardContext& ctx) {
                             auto* g = ctx.inputs[0];
                             if (!g) return;
                             for (std::size_t r = 0; r < n; ++r) {
                               for (std::size_t c = 0; c < d; ++c) {
                                 (*g)[r * d + c] += ctx.grad_out[c] * inv;
                               }
                             }
                           });
}

// ---- shape and indexing ---------------------------------------------------

Var reshape(Var a, Shape shape) {
  Tensor y = a.value().reshaped(std::move(shape));
  return tape_of(a).record(std::move(y), {a}, [](const BackwardContext& ctx) {
    if (auto* g = ctx.inputs[0]) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += ctx.grad_out[i];
    }
  });
}

Var gather(Var a, std::vector<std::size_t> indices, Shape shape) {
  const Tensor& x = a.value();
  if (shape_size(shape) != indices.size()) {
    throw ShapeError("gather: shape " + shape_str(shape) + " does not match index count");
  }
  std::vector<double> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= x.size()) throw ShapeError("gather: index out of range");
    out[i] = x[indices[i]];
  }
  return tape_of(a).record(Tensor(std::move(shape), std::move(out)), {a},
                           [idx = std::move(indices)](const BackwardContext& ctx) {
                             auto* g = ctx.inputs[0];
                             if (!g) return;
                             for (std::size_t i = 0; i < idx.size(); ++i) {
                               (*g)[idx[i]] += ctx.grad_out[i];
                             }
                           });
}

Var gather_rows(Var a, std::span<const std::size_t> indices) {
  require_matrix(a, "gather_rows");
  const Tensor& x = a.value();
  const std::size_t n = x.dim(0);
  const std::size_t d = x.dim(1);
  std::vector<std::size_t> rows(indices.begin(), indices.end());
  std::vector<double> out(rows.size() * d);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n) throw ShapeError("gather_rows: row index out of range");
    std::copy_n(x.ptr() + rows[i] * d, d, out.data() + i * d);
  }
  const std::size_t count = rows.size();
  return tape_of(a).record(Tensor({count, d}, std::move(out)), {a},
                           [rows = std::move(rows), d](const BackwardContext& ctx) {
                             auto* g = ctx.inputs[0];
                             if (!g) return;
                             for (std::size_t i = 0; i < rows.size(); ++i) {
                               for (std::size_t c = 0; c < d; ++c) {
                                 (*g)[rows[i] * d + c] += ctx.grad_out[i * d + c];
                               }
                             }
                           });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  Tape& t = tape_of(parts[0]);
  require_matrix(parts[0], "concat_rows");
  const std::size_t d = parts[0].value().dim(1);
  std::size_t rows = 0;
  std::vector<std::size_t> offsets;
  for (const Var& p : parts) {
    require_matrix(p, "concat_rows");
    if (p.tape != &t) throw std::invalid_argument("concat_rows: Vars belong to different tapes");
    if (p.value().dim(1) != d) throw ShapeError("concat_rows: column count mismatch");
    offsets.push_back(rows * d);
    rows += p.value().dim(0);
  }
  std::vector<double> out;
  out.reserve(rows * d);
  for (const Var& p : parts) {
    auto data = p.value().data();
    out.insert(out.end(), data.begin(), data.end());
  }
  return t.record(Tensor({rows, d}, std::move(out)), {parts.begin(), parts.end()},
                  [offsets = std::move(offsets)](const BackwardContext& ctx) {
                    for (std::size_t j = 0; j < ctx.inputs.size(); ++j) {
                      auto* g = ctx.inputs[j];
                      if (!g) continue;
                      for (std::size_t i = 0; i < g->size(); ++i) {
                        (*g)[i] += ctx.grad_out[offsets[j] + i];
                      }
                    }
                  });
}

// ---- linear algebra -------------------------------------------------------

Var matmul(Var a, Var b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  Tape& t = common_tape(a, b);
  Tensor x = a.value();
  Tensor y = b.value();
  const std::size_t n = x.dim(0);
  const std::size_t k = x.dim(1);
  const std::size_t m = y.dim(1);
  if (y.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ " + shape_str(x.shape()) + " x " +
                     shape_str(y.shape()));
  }
  std::vector<double> out(n * m);
  MutMap(out.data(), n, m).noalias() = ConstMap(x.ptr(), n, k) * ConstMap(y.ptr(), k, m);
  return t.record(Tensor({n, m}, std::move(out)), {a, b},
                  [x, y, n, k, m](const BackwardContext& ctx) {
                    ConstMap go(ctx.grad_out.data(), n, m);
                    if (auto* g = ctx.inputs[0]) {
                      MutMap(g->data(), n, k).noalias() += go * ConstMap(y.ptr(), k, m).transpose();
                    }
                    if (auto* g = ctx.inputs[1]) {
                      MutMap(g->data(), k, m).noalias() += ConstMap(x.ptr(), n, k).transpose() * go;
                    }
                  });
}

Var add_row(Var x, Var bias) {
  Tape& t = common_tape(x, bias);
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  if (xv.rank() == 0 || bv.size() != xv.shape().back()) {
    throw ShapeError("add_row: bias " + shape_str(bv.shape()) + " does not match " +
                     shape_str(xv.shape()));
  }
  const std::size_t d = bv.size();
  const std::size_t rows = xv.size() / d;
  std::vector<double> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = xv[r * d + c] + bv[c];
  }
  return t.record(Tensor(xv.shape(), std::move(out)), {x, bias},
                  [rows, d](const BackwardContext& ctx) {
                    if (auto* g = ctx.inputs[0]) {
                      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += ctx.grad_out[i];
                    }
                    if (auto* g = ctx.inputs[1]) {
                      for (std::size_t r = 0; r < rows; ++r) {
                        for (std::size_t c = 0; c < d; ++c) (*g)[c] += ctx.grad_out[r * d + c];
                      }
                    }
                  });
}

Var linear(Var x, Var weight, Var bias) { return add_row(matmul(x, weight), bias); }

Var normalize_rows3(Var a) {
  require_matrix(a, "normalize_rows3");
  const Tensor& x = a.value();
  if (x.dim(1) != 3) throw ShapeError("normalize_rows3: expected [n,3]");
  const std::size_t n = x.dim(0);
  std::vector<double> out(n * 3);
  std::vector<double> norms(n);
  for (std::size_t r = 0; r < n; ++r) {
    const double* p = x.ptr() + 3 * r;
    const double len = std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
    norms[r] = len;
    if (len < 1e-12) {
      out[3 * r + 0] = 0.0;
      out[3 * r + 1] = 0.0;
      out[3 * r + 2] = 1.0;
    } else {
      for (int c = 0; c < 3; ++c) out[3 * r + c] = p[c] / len;
    }
  }
  Tensor y({n, 3}, std::move(out));
  return tape_of(a).record(y, {a}, [y, norms = std::move(norms), n](const BackwardContext& ctx) {
    auto* g = ctx.inputs[0];
    if (!g) return;
    for (std::size_t r = 0; r < n; ++r) {
      if (norms[r] < 1e-12) continue;
      const double* go = ctx.grad_out.data() + 3 * r;
      const double dot = go[0] * y[3 * r] + go[1] * y[3 * r + 1] + go[2] * y[3 * r + 2];
      for (std::size_t c = 0; c < 3; ++c) {
        (*g)[3 * r + c] += (go[c] - y[3 * r + c] * dot) / norms[r];
      }
    }
  });
}

// ---- attention ------------------------------------------------------------

Var attention(Var q, Var k, Var v) {
  require_matrix(q, "attention");
  require_matrix(k, "attention");
  require_matrix(v, "attention");
  const AttentionSegment all{0, q.value().dim(0), 0, k.value().dim(0)};
  return multi_head_attention(q, k, v, 1, std::span<const AttentionSegment>(&all, 1));
}

Var multi_head_attention(Var q, Var k, Var v, std::size_t heads,
                         std::span<const AttentionSegment> segments) {
  require_matrix(q, "attention");
  require_matrix(k, "attention");
  require_matrix(v, "attention");
  Tape& t = common_tape(q, k);
  if (v.tape != &t) throw std::invalid_argument("attention: Vars belong to different tapes");
  Tensor qv = q.value();
  Tensor kv = k.value();
  Tensor vv = v.value();
  const std::size_t nq = qv.dim(0);
  const std::size_t nk = kv.dim(0);
  const std::size_t d = qv.dim(1);
  const std::size_t dv = vv.dim(1);
  if (kv.dim(1) != d || vv.dim(0) != nk) {
    throw ShapeError("attention: shape mismatch Q" + shape_str(qv.shape()) + " K" +
                     shape_str(kv.shape()) + " V" + shape_str(vv.shape()));
  }
  if (heads == 0 || d % heads != 0 || dv % heads != 0) {
    throw ShapeError("attention: head count must divide the feature dimensions");
  }
  for (const auto& s : segments) {
    if (s.q_begin >= s.q_end || s.q_end > nq || s.k_begin >= s.k_end || s.k_end > nk) {
      throw ShapeError("attention: invalid segment bounds");
    }
  }
  const std::size_t dh = d / heads;
  const std::size_t dvh = dv / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  // Softmax weights per (segment, head), kept for the backward pass.
  auto probs = std::make_shared<std::vector<RowMat>>();
  probs->reserve(segments.size() * heads);
  std::vector<double> out(nq * dv, 0.0);
  for (const auto& s : segments) {
    const auto rq = static_cast<Eigen::Index>(s.q_end - s.q_begin);
    const auto rk = static_cast<Eigen::Index>(s.k_end - s.k_begin);
    for (std::size_t h = 0; h < heads; ++h) {
      ConstStrided qh(qv.ptr() + s.q_begin * d + h * dh, rq, dh, Eigen::OuterStride<>(d));
      ConstStrided kh(kv.ptr() + s.k_begin * d + h * dh, rk, dh, Eigen::OuterStride<>(d));
      ConstStrided vh(vv.ptr() + s.k_begin * dv + h * dvh, rk, dvh, Eigen::OuterStride<>(dv));
      RowMat p = (qh * kh.transpose()) * inv_sqrt;
      for (Eigen::Index r = 0; r < rq; ++r) {
        const double mx = p.row(r).maxCoeff();
        p.row(r) = (p.row(r).array() - mx).exp();
        p.row(r) /= p.row(r).sum();
      }
      MutStrided oh(out.data() + s.q_begin * dv + h * dvh, rq, dvh, Eigen::OuterStride<>(dv));
      oh.noalias() = p * vh;
      probs->push_back(std::move(p));
    }
  }

  std::vector<AttentionSegment> segs(segments.begin(), segments.end());
  return t.record(
      Tensor({nq, dv}, std::move(out)), {q, k, v},
      [qv, kv, vv, probs, segs = std::move(segs), heads, d, dv, dh, dvh,
       inv_sqrt](const BackwardContext& ctx) {
        auto* gq = ctx.inputs[0];
        auto* gk = ctx.inputs[1];
        auto* gv = ctx.inputs[2];
        std::size_t idx = 0;
        for (const auto& s : segs) {
          const auto rq = static_cast<Eigen::Index>(s.q_end - s.q_begin);
          const auto rk = static_cast<Eigen::Index>(s.k_end - s.k_begin);
          for (std::size_t h = 0; h < heads; ++h, ++idx) {
            const RowMat& p = (*probs)[idx];
            ConstStrided go(ctx.grad_out.data() + s.q_begin * dv + h * dvh, rq, dvh,
                            Eigen::OuterStride<>(dv));
            ConstStrided qh(qv.ptr() + s.q_begin * d + h * dh, rq, dh, Eigen::OuterStride<>(d));
            ConstStrided kh(kv.ptr() + s.k_begin * d + h * dh, rk, dh, Eigen::OuterStride<>(d));
            ConstStrided vh(vv.ptr() + s.k_begin * dv + h * dvh, rk, dvh,
                            Eigen::OuterStride<>(dv));
            if (gv) {
              MutStrided gvh(gv->data() + s.k_begin * dv + h * dvh, rk, dvh,
                             Eigen::OuterStride<>(dv));
              gvh.noalias() += p.transpose() * go;
            }
            if (!gq && !gk) continue;
            RowMat dp = go * vh.transpose();
            const Eigen::VectorXd row_dot = (dp.array() * p.array()).rowwise().sum();
            RowMat ds = p.array() * (dp.colwise() - row_dot).array();
            ds *= inv_sqrt;
            if (gq) {
              MutStrided gqh(gq->data() + s.q_begin * d + h * dh, rq, dh, Eigen::OuterStride<>(d));
              gqh.noalias() += ds * kh;
            }
            if (gk) {
              MutStrided gkh(gk->data() + s.k_begin * d + h * dh, rk, dh, Eigen::OuterStride<>(d));
              gkh.noalias() += ds.transpose() * qh;
            }
          }
        }
      });
}

Var layer_norm(Var x, Var gain, Var bias) {
  Tape& t = common_tape(x, gain);
  if (bias.tape != &t) throw std::invalid_argument("layer_norm: Vars belong to different tapes");
  const Tensor& xv = x.value();
  Tensor gv = gain.value();
  const Tensor& bv = bias.value();
  if (xv.rank() == 0) throw ShapeError("layer_norm: input must have a feature axis");
  const std::size_t d = xv.shape().back();
  if (gv.size() != d || bv.size() != d) {
    throw ShapeError("layer_norm: gain/bias size must equal last axis " + std::to_string(d));
  }
  const std::size_t rows = xv.size() / d;
  std::vector<double> xhat(xv.size());
  std::vector<double> rstd(rows);
  std::vector<double> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* p = xv.ptr() + r * d;
    double mu = 0.0;
    for (std::size_t c = 0; c < d; ++c) mu += p[c];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (p[c] - mu) * (p[c] - mu);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + kLayerNormEps);
    rstd[r] = rs;
    for (std::size_t c = 0; c < d; ++c) {
      const double h = (p[c] - mu) * rs;
      xhat[r * d + c] = h;
      out[r * d + c] = h * gv[c] + bv[c];
    }
  }
  return t.record(
      Tensor(xv.shape(), std::move(out)), {x, gain, bias},
      [gv, xhat = std::move(xhat), rstd = std::move(rstd), rows, d](const BackwardContext& ctx) {
        auto* gx = ctx.inputs[0];
        auto* gg = ctx.inputs[1];
        auto* gb = ctx.inputs[2];
        const double inv_d = 1.0 / static_cast<double>(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* go = ctx.grad_out.data() + r * d;
          const double* h = xhat.data() + r * d;
          if (gg || gb) {
            for (std::size_t c = 0; c < d; ++c) {
              if (gg) (*gg)[c] += go[c] * h[c];
              if (gb) (*gb)[c] += go[c];
            }
          }
          if (!gx) continue;
          double mean_dh = 0.0;
          double mean_dh_h = 0.0;
          for (std::size_t c = 0; c < d; ++c) {
            const double dh = go[c] * gv[c];
            mean_dh += dh;
            mean_dh_h += dh * h[c];
          }
          mean_dh *= inv_d;
          mean_dh_h *= inv_d;
          for (std::size_t c = 0; c < d; ++c) {
            const double dh = go[c] * gv[c];
            (*gx)[r * d + c] += rstd[r] * (dh - mean_dh - h[c] * mean_dh_h);
          }
        }
      });
}

}  // namespace idt::nd
