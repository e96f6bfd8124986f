#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace mct {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);

class Tape;

/// Dense row-major f64 array. A tensor produced by an operation on a tracked
/// input carries a handle into the tape that recorded it; otherwise it is a
/// plain immutable value.
///
/// Rank-1 tensors of extent n behave as 1×n rows in matrix operations.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data);
  explicit Tensor(Shape shape);

  static Tensor scalar(double value);
  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);
  static Tensor filled(Shape shape, double value);
  static Tensor identity(std::size_t n);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const { return data_; }
  std::span<double> mutable_data() { return data_; }
  double operator[](std::size_t i) const { return data_[i]; }
  double at(std::size_t row, std::size_t col) const { return data_[row * cols() + col]; }
  double item() const;

  bool tracked() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  int node() const { return node_; }

  /// Copy of the values without the tape handle.
  Tensor detach() const;

 private:
  friend class Tape;

  Shape shape_;
  std::vector<double> data_;
  Tape* tape_ = nullptr;
  int node_ = -1;
};

/// Boolean matrix; `true` entries are the positions a masked op acts on.
class Mask {
 public:
  Mask() = default;
  Mask(std::size_t rows, std::size_t cols, bool value = false);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool operator()(std::size_t r, std::size_t c) const { return bits_[r * cols_ + c] != 0; }
  void set(std::size_t r, std::size_t c, bool value) { bits_[r * cols_ + c] = value ? 1 : 0; }
  Mask inverted() const;
  std::size_t count() const;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<std::uint8_t> bits_;
};

/// Debug-only corruption of one backward rule, used to prove that the
/// gradient checker catches broken derivatives.
enum class Fault { kNone, kNegateSoftmaxGrad };

/// Writable views onto the gradient buffers of a node's inputs during the
/// reverse sweep. `input(k)` is empty when input k is untracked.
class GradAccess {
 public:
  GradAccess(std::vector<std::vector<double>>& grads, const std::vector<int>& inputs,
             const std::vector<std::size_t>& sizes)
      : grads_(grads), inputs_(inputs), sizes_(sizes) {}

  std::span<double> input(std::size_t slot);

 private:
  std::vector<std::vector<double>>& grads_;
  const std::vector<int>& inputs_;
  const std::vector<std::size_t>& sizes_;
};

/// Result of a reverse sweep, indexed by tape node id.
class Gradients {
 public:
  Gradients(std::vector<std::vector<double>> grads, std::vector<Shape> shapes)
      : grads_(std::move(grads)), shapes_(std::move(shapes)) {}

  bool has(int node) const;
  /// Gradient of a node; zeros when the sweep never reached it.
  Tensor at(int node) const;
  Tensor of(const Tensor& x) const;
  std::span<const double> raw(int node) const;

 private:
  std::vector<std::vector<double>> grads_;
  std::vector<Shape> shapes_;
};

/// Append-only record of one forward pass. Single-threaded; owned by exactly
/// one forward/backward pass.
class Tape {
 public:
  using BackwardFn = std::function<void(std::span<const double> grad_out, GradAccess& access)>;

  explicit Tape(Fault fault = Fault::kNone) : fault_(fault) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers a gradient-tracked leaf holding a copy of `value`.
  Tensor leaf(const Tensor& value);

  /// Records an op node. Inputs that are untracked get id -1.
  Tensor record(const char* kind, Tensor value, std::initializer_list<const Tensor*> inputs,
                BackwardFn backward);
  Tensor record(const char* kind, Tensor value, const std::vector<const Tensor*>& inputs,
                BackwardFn backward);

  std::size_t size() const { return nodes_.size(); }
  const char* kind(int node) const { return nodes_[static_cast<std::size_t>(node)].kind; }
  const std::vector<int>& inputs(int node) const { return nodes_[static_cast<std::size_t>(node)].inputs; }
  Fault fault() const { return fault_; }

 private:
  friend Gradients backward(const Tape& tape, const Tensor& root);

  struct Node {
    const char* kind;
    std::vector<int> inputs;
    std::vector<std::size_t> input_sizes;
    Shape shape;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
  Fault fault_;
};

/// Reverse topological sweep from a scalar root.
Gradients backward(const Tape& tape, const Tensor& root);

// Operations. Every op is gradient-tracked when any input is tracked.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
/// Adds a length-n vector to every row of an m×n matrix.
Tensor add_bias(const Tensor& x, const Tensor& bias);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor softmax_rows(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count);
/// Sets positions where `mask` is true to `value`; no gradient flows there.
Tensor masked_fill(const Tensor& x, const Mask& mask, double value);
Tensor embedding_rows(const Tensor& table, std::span<const int> ids);
Tensor sum(const Tensor& x);
/// Column means of an m×n matrix as a 1×n row.
Tensor mean_rows(const Tensor& x);
/// Σ_k weights[k] · parts[k]; all parts share one shape.
Tensor weighted_sum(std::span<const Tensor> parts, const Tensor& weights);
/// Multiplies x by the single entry of a one-element tensor.
Tensor scale_by(const Tensor& x, const Tensor& factor);
/// Mean over rows with mask[i] != 0 of −log softmax(logits[i])[targets[i]].
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> targets,
                             std::span<const std::uint8_t> active);

}  // namespace mct
