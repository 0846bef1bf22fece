#pragma once

// Dense float64 tensors and a tape-based reverse-mode differentiator.
//
// A Tensor is an immutable value: shape plus row-major data held behind a
// shared pointer, so copies are cheap and safe to share across threads.
// A Tape records every operation applied to Vars (handles to tape nodes) and
// replays the recorded local-gradient rules in exact reverse creation order.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace idt::nd {

using Shape = std::vector<std::size_t>;

inline constexpr double kLayerNormEps = 1e-5;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape);
  static Tensor filled(Shape shape, double value);
  static Tensor scalar(double value);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_->size(); }
  std::span<const double> data() const { return *data_; }
  const double* ptr() const { return data_->data(); }
  double operator[](std::size_t i) const { return (*data_)[i]; }
  double at(std::size_t row, std::size_t col) const {
    return (*data_)[row * shape_.back() + col];
  }
  double item() const;
  bool is_scalar() const { return data_->size() == 1; }

  // Same data, new shape with equal element count.
  Tensor reshaped(Shape shape) const;
  std::vector<double> to_vector() const { return *data_; }

  friend bool operator==(const Tensor& a, const Tensor& b);

 private:
  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
};

class Tape;

// Handle to a node recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
};

// Gradient buffers handed to a node's backward rule. `inputs[i]` is null when
// the i-th input does not require a gradient.
struct BackwardContext {
  std::span<const double> grad_out;
  std::span<std::vector<double>* const> inputs;
};

using BackwardFn = std::function<void(const BackwardContext&)>;

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Differentiable input.
  Var leaf(Tensor value);
  // Input that never receives a gradient.
  Var constant(Tensor value);

  Var record(Tensor value, std::vector<Var> inputs, BackwardFn backward);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;
  std::size_t size() const { return nodes_.size(); }
  bool owns(Var v) const { return v.tape == this && v.id < nodes_.size(); }

  // d(output)/d(input) for each input; output must be a scalar on this tape.
  std::vector<Tensor> grad(Var output, std::span<const Var> inputs) const;

 private:
  struct Node {
    Tensor value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
};

std::vector<Tensor> grad(Var output, std::span<const Var> inputs);

// ---- elementwise ----------------------------------------------------------
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var neg(Var a);
Var scale(Var a, double c);
Var add_scalar(Var a, double c);
Var exp(Var a);
Var log(Var a);
Var abs(Var a);
Var square(Var a);
Var sigmoid(Var a);
Var softplus(Var a);
Var gelu(Var a);

// ---- reductions -----------------------------------------------------------
Var sum(Var a);
Var mean(Var a);
// [n, d] -> [1, d]
Var mean_rows(Var a);

// ---- shape and indexing ---------------------------------------------------
Var reshape(Var a, Shape shape);
// Flat gather: out[i] = a[indices[i]]; backward scatter-adds.
Var gather(Var a, std::vector<std::size_t> indices, Shape shape);
// Row gather on a matrix [n, d] -> [indices.size(), d].
Var gather_rows(Var a, std::span<const std::size_t> indices);
Var concat_rows(std::span<const Var> parts);

// ---- linear algebra -------------------------------------------------------
// [n, k] x [k, m] -> [n, m]
Var matmul(Var a, Var b);
// x [n, d] + bias [d] broadcast over rows.
Var add_row(Var x, Var bias);
Var linear(Var x, Var weight, Var bias);

// Per-row unit normalisation of an [n, 3] matrix; rows with norm below 1e-12
// map to +z and pass no gradient.
Var normalize_rows3(Var a);

// ---- transformer building blocks -----------------------------------------
// softmax(Q Kᵀ / sqrt(d)) V, max-subtracted softmax.
Var attention(Var q, Var k, Var v);

// Block of rows [q_begin, q_end) attending to rows [k_begin, k_end).
struct AttentionSegment {
  std::size_t q_begin, q_end, k_begin, k_end;
};

// Multi-head scaled dot-product attention. Columns of q/k/v are split into
// `heads` equal groups; each segment is an independent attention problem.
// Rows of q not covered by a segment produce zeros.
Var multi_head_attention(Var q, Var k, Var v, std::size_t heads,
                         std::span<const AttentionSegment> segments);

// Normalise over the last axis (eps kLayerNormEps) then apply gain and bias.
Var layer_norm(Var x, Var gain, Var bias);

}  // namespace idt::nd
