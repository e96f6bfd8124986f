#include "mct/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "mct/errors.hpp"

namespace mct {

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

std::size_t shape_product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

void require_rank2(const Tensor& x, const char* op) {
  if (x.rank() == 0 || x.rank() > 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_string(x.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

bool any_tracked(std::initializer_list<const Tensor*> xs) {
  return std::any_of(xs.begin(), xs.end(), [](const Tensor* t) { return t->tracked(); });
}

Tape* tape_of(std::initializer_list<const Tensor*> xs) {
  Tape* tape = nullptr;
  for (const Tensor* t : xs) {
    if (!t->tracked()) continue;
    if (tape && t->tape() != tape) throw ContractError("operation mixes tensors from different tapes");
    tape = t->tape();
  }
  return tape;
}

Tape* tape_of(std::span<const Tensor> xs, std::initializer_list<const Tensor*> extra = {}) {
  Tape* tape = tape_of(extra);
  for (const Tensor& t : xs) {
    if (!t.tracked()) continue;
    if (tape && t.tape() != tape) throw ContractError("operation mixes tensors from different tapes");
    tape = t.tape();
  }
  return tape;
}

// C[m×n] += A[m×k]·B[k×n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m×k] += G[m×n]·Bᵀ where B is k×n
void gemm_nt(const double* g, const double* b, double* c, std::size_t m, std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
      c[i * k + p] += acc;
    }
  }
}

// C[k×n] += Aᵀ·G where A is m×k, G is m×n
void gemm_tn(const double* a, const double* g, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * grow[j];
    }
  }
}

std::vector<double> copy_data(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  for (std::size_t extent : shape_) {
    if (extent == 0) throw ShapeError("tensor extents must be positive, got " + shape_string(shape_));
  }
  if (shape_product(shape_) != data_.size()) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                     shape_string(shape_));
  }
}

Tensor::Tensor(Shape shape) : Tensor(shape, std::vector<double>(shape_product(shape), 0.0)) {}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

Tensor Tensor::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor({n}, std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
  return Tensor({rows, cols}, std::move(values));
}

Tensor Tensor::filled(Shape shape, double value) {
  const std::size_t n = shape_product(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::identity(std::size_t n) {
  Tensor out({n, n});
  for (std::size_t i = 0; i < n; ++i) out.data_[i * n + i] = 1.0;
  return out;
}

std::size_t Tensor::rows() const {
  if (shape_.size() <= 1) return 1;
  return shape_product(shape_) / shape_.back();
}

std::size_t Tensor::cols() const { return shape_.empty() ? 0 : shape_.back(); }

double Tensor::item() const {
  if (data_.size() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape_));
  return data_[0];
}

Tensor Tensor::detach() const { return Tensor(shape_, data_); }

// ---------------------------------------------------------------------------
// Mask

Mask::Mask(std::size_t rows, std::size_t cols, bool value)
    : rows_(rows), cols_(cols), bits_(rows * cols, value ? 1 : 0) {}

Mask Mask::inverted() const {
  Mask out = *this;
  for (auto& b : out.bits_) b = b ? 0 : 1;
  return out;
}

std::size_t Mask::count() const { return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), 1)); }

// ---------------------------------------------------------------------------
// Tape / backward

std::span<double> GradAccess::input(std::size_t slot) {
  const int id = inputs_[slot];
  if (id < 0) return {};
  auto& buf = grads_[static_cast<std::size_t>(id)];
  if (buf.empty()) buf.assign(sizes_[slot], 0.0);
  return buf;
}

bool Gradients::has(int node) const {
  return node >= 0 && static_cast<std::size_t>(node) < grads_.size() && !grads_[static_cast<std::size_t>(node)].empty();
}

Tensor Gradients::at(int node) const {
  if (node < 0 || static_cast<std::size_t>(node) >= shapes_.size()) {
    throw IndexError("gradient lookup for unknown node " + std::to_string(node));
  }
  const auto idx = static_cast<std::size_t>(node);
  if (grads_[idx].empty()) return Tensor(shapes_[idx]);
  return Tensor(shapes_[idx], grads_[idx]);
}

Tensor Gradients::of(const Tensor& x) const {
  if (!x.tracked()) throw ContractError("gradient requested for an untracked tensor");
  return at(x.node());
}

std::span<const double> Gradients::raw(int node) const { return grads_.at(static_cast<std::size_t>(node)); }

Tensor Tape::leaf(const Tensor& value) {
  Tensor out = value.detach();
  out.tape_ = this;
  out.node_ = static_cast<int>(nodes_.size());
  nodes_.push_back(Node{"leaf", {}, {}, out.shape_, nullptr});
  return out;
}

Tensor Tape::record(const char* kind, Tensor value, std::initializer_list<const Tensor*> inputs,
                    BackwardFn backward) {
  return record(kind, std::move(value), std::vector<const Tensor*>(inputs), std::move(backward));
}

Tensor Tape::record(const char* kind, Tensor value, const std::vector<const Tensor*>& inputs,
                    BackwardFn backward) {
  Node node{kind, {}, {}, value.shape_, std::move(backward)};
  node.inputs.reserve(inputs.size());
  for (const Tensor* in : inputs) {
    node.inputs.push_back(in->tracked() ? in->node() : -1);
    node.input_sizes.push_back(in->size());
  }
  value.tape_ = this;
  value.node_ = static_cast<int>(nodes_.size());
  nodes_.push_back(std::move(node));
  return value;
}

Gradients backward(const Tape& tape, const Tensor& root) {
  if (root.size() != 1) {
    throw ContractError("backward root must be scalar, got shape " + shape_string(root.shape()));
  }
  if (root.tape() != &tape) throw ContractError("backward root was not recorded on this tape");

  std::vector<std::vector<double>> grads(tape.nodes_.size());
  grads[static_cast<std::size_t>(root.node())] = {1.0};
  for (int id = root.node(); id >= 0; --id) {
    const auto& node = tape.nodes_[static_cast<std::size_t>(id)];
    const auto& g = grads[static_cast<std::size_t>(id)];
    if (g.empty() || !node.backward) continue;
    GradAccess access(grads, node.inputs, node.input_sizes);
    // `g` stays valid: inputs always have smaller ids, so no reallocation of this slot.
    node.backward(g, access);
  }
  std::vector<Shape> shapes;
  shapes.reserve(tape.nodes_.size());
  for (const auto& n : tape.nodes_) shapes.push_back(n.shape);
  return Gradients(std::move(grads), std::move(shapes));
}

// ---------------------------------------------------------------------------
// Operations

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul: inner dimensions disagree, " + shape_string(a.shape()) + " x " +
                     shape_string(b.shape()));
  }
  Tensor out({m, n});
  gemm_nn(a.data().data(), b.data().data(), out.mutable_data().data(), m, k, n);
  if (!any_tracked({&a, &b})) return out;

  std::vector<double> av = b.tracked() ? copy_data(a) : std::vector<double>{};
  std::vector<double> bv = a.tracked() ? copy_data(b) : std::vector<double>{};
  return tape_of({&a, &b})->record(
      "matmul", std::move(out), {&a, &b},
      [av = std::move(av), bv = std::move(bv), m, k, n](std::span<const double> g, GradAccess& acc) {
        if (auto ga = acc.input(0); !ga.empty()) gemm_nt(g.data(), bv.data(), ga.data(), m, n, k);
        if (auto gb = acc.input(1); !gb.empty()) gemm_tn(av.data(), g.data(), gb.data(), m, k, n);
      });
}

Tensor transpose(const Tensor& x) {
  require_rank2(x, "transpose");
  const std::size_t m = x.rows(), n = x.cols();
  Tensor out({n, m});
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) o[j * m + i] = x.data()[i * n + j];
  if (!x.tracked()) return out;
  return x.tape()->record("transpose", std::move(out), {&x}, [m, n](std::span<const double> g, GradAccess& acc) {
    auto gx = acc.input(0);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[j * m + i];
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out(a.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] + b[i];
  if (!any_tracked({&a, &b})) return out;
  return tape_of({&a, &b})->record("add", std::move(out), {&a, &b}, [](std::span<const double> g, GradAccess& acc) {
    for (std::size_t slot = 0; slot < 2; ++slot) {
      auto gi = acc.input(slot);
      for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += g[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out(a.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] * b[i];
  if (!any_tracked({&a, &b})) return out;
  return tape_of({&a, &b})->record(
      "mul", std::move(out), {&a, &b},
      [av = copy_data(a), bv = copy_data(b)](std::span<const double> g, GradAccess& acc) {
        if (auto ga = acc.input(0); !ga.empty())
          for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * bv[i];
        if (auto gb = acc.input(1); !gb.empty())
          for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * av[i];
      });
}

Tensor scale(const Tensor& x, double factor) {
  Tensor out(x.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * factor;
  if (!x.tracked()) return out;
  return x.tape()->record("scale", std::move(out), {&x}, [factor](std::span<const double> g, GradAccess& acc) {
    auto gx = acc.input(0);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * factor;
  });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_rank2(x, "add_bias");
  const std::size_t m = x.rows(), n = x.cols();
  if (bias.size() != n) {
    throw ShapeError("add_bias: bias " + shape_string(bias.shape()) + " does not fit rows of " +
                     shape_string(x.shape()));
  }
  Tensor out(x.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) o[i * n + j] = x[i * n + j] + bias[j];
  if (!any_tracked({&x, &bias})) return out;
  return tape_of({&x, &bias})->record("add_bias", std::move(out), {&x, &bias},
                                      [m, n](std::span<const double> g, GradAccess& acc) {
                                        if (auto gx = acc.input(0); !gx.empty())
                                          for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
                                        if (auto gb = acc.input(1); !gb.empty())
                                          for (std::size_t i = 0; i < m; ++i)
                                            for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
                                      });
}

Tensor relu(const Tensor& x) {
  Tensor out(x.shape());
  auto o = out.mutable_data();
  // x < 0 rather than x > 0 so NaN propagates instead of becoming 0.
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] < 0.0 ? 0.0 : x[i];
  if (!x.tracked()) return out;
  std::vector<std::uint8_t> active(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) active[i] = x[i] > 0.0;
  return x.tape()->record("relu", std::move(out), {&x},
                          [active = std::move(active)](std::span<const double> g, GradAccess& acc) {
                            auto gx = acc.input(0);
                            for (std::size_t i = 0; i < gx.size(); ++i)
                              if (active[i]) gx[i] += g[i];
                          });
}

Tensor sigmoid(const Tensor& x) {
  Tensor out(x.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) {
    const double v = x[i];
    if (v >= 0.0) {
      o[i] = 1.0 / (1.0 + std::exp(-v));
    } else {
      const double e = std::exp(v);
      o[i] = e / (1.0 + e);
    }
  }
  if (!x.tracked()) return out;
  return x.tape()->record("sigmoid", out.detach(), {&x},
                          [y = copy_data(out)](std::span<const double> g, GradAccess& acc) {
                            auto gx = acc.input(0);
                            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * y[i] * (1.0 - y[i]);
                          });
}

Tensor tanh(const Tensor& x) {
  Tensor out(x.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::tanh(x[i]);
  if (!x.tracked()) return out;
  return x.tape()->record("tanh", out.detach(), {&x}, [y = copy_data(out)](std::span<const double> g, GradAccess& acc) {
    auto gx = acc.input(0);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * (1.0 - y[i] * y[i]);
  });
}

Tensor softmax_rows(const Tensor& x) {
  require_rank2(x, "softmax_rows");
  const std::size_t m = x.rows(), n = x.cols();
  Tensor out(x.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = x.data().data() + i * n;
    const double mx = *std::max_element(row, row + n);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      o[i * n + j] = std::exp(row[j] - mx);
      total += o[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) o[i * n + j] /= total;
  }
  if (!x.tracked()) return out;
  const double sign = x.tape()->fault() == Fault::kNegateSoftmaxGrad ? -1.0 : 1.0;
  return x.tape()->record("softmax_rows", out.detach(), {&x},
                          [y = copy_data(out), m, n, sign](std::span<const double> g, GradAccess& acc) {
                            auto gx = acc.input(0);
                            for (std::size_t i = 0; i < m; ++i) {
                              double dot = 0.0;
                              for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
                              for (std::size_t j = 0; j < n; ++j)
                                gx[i * n + j] += sign * y[i * n + j] * (g[i * n + j] - dot);
                            }
                          });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_rank2(x, "layer_norm");
  const std::size_t m = x.rows(), n = x.cols();
  if (gain.size() != n || bias.size() != n) {
    throw ShapeError("layer_norm: gain " + shape_string(gain.shape()) + " / bias " + shape_string(bias.shape()) +
                     " do not match width of " + shape_string(x.shape()));
  }
  Tensor out(x.shape());
  auto o = out.mutable_data();
  std::vector<double> xhat(x.size());
  std::vector<double> inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = x.data().data() + i * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += row[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(n);
    const double denom = std::sqrt(var + eps);
    inv_std[i] = denom > 0.0 ? 1.0 / denom : 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (row[j] - mean) * inv_std[i];
      o[i * n + j] = xhat[i * n + j] * gain[j] + bias[j];
    }
  }
  if (!any_tracked({&x, &gain, &bias})) return out;
  return tape_of({&x, &gain, &bias})
      ->record("layer_norm", std::move(out), {&x, &gain, &bias},
               [xhat = std::move(xhat), inv_std = std::move(inv_std), gv = copy_data(gain), m,
                n](std::span<const double> g, GradAccess& acc) {
                 auto gx = acc.input(0);
                 auto gg = acc.input(1);
                 auto gb = acc.input(2);
                 const double inv_n = 1.0 / static_cast<double>(n);
                 for (std::size_t i = 0; i < m; ++i) {
                   const double* gy = g.data() + i * n;
                   const double* xh = xhat.data() + i * n;
                   if (!gg.empty())
                     for (std::size_t j = 0; j < n; ++j) gg[j] += gy[j] * xh[j];
                   if (!gb.empty())
                     for (std::size_t j = 0; j < n; ++j) gb[j] += gy[j];
                   if (gx.empty()) continue;
                   double mean_d = 0.0, mean_dx = 0.0;
                   for (std::size_t j = 0; j < n; ++j) {
                     const double d = gy[j] * gv[j];
                     mean_d += d;
                     mean_dx += d * xh[j];
                   }
                   mean_d *= inv_n;
                   mean_dx *= inv_n;
                   for (std::size_t j = 0; j < n; ++j)
                     gx[i * n + j] += inv_std[i] * (gy[j] * gv[j] - mean_d - xh[j] * mean_dx);
                 }
               });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no parts");
  const std::size_t m = parts[0].rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    require_rank2(p, "concat_cols");
    if (p.rows() != m) {
      throw ShapeError("concat_cols: row count mismatch " + shape_string(parts[0].shape()) + " vs " +
                       shape_string(p.shape()));
    }
    widths.push_back(p.cols());
    total += p.cols();
  }
  Tensor out({m, total});
  auto o = out.mutable_data();
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < widths[k]; ++j) o[i * total + offset + j] = parts[k][i * widths[k] + j];
    offset += widths[k];
  }
  Tape* tape = tape_of(parts);
  if (!tape) return out;
  std::vector<const Tensor*> inputs;
  for (const Tensor& p : parts) inputs.push_back(&p);
  return tape->record("concat_cols", std::move(out), inputs,
                      [widths, m, total](std::span<const double> g, GradAccess& acc) {
                        std::size_t off = 0;
                        for (std::size_t k = 0; k < widths.size(); ++k) {
                          auto gk = acc.input(k);
                          if (!gk.empty())
                            for (std::size_t i = 0; i < m; ++i)
                              for (std::size_t j = 0; j < widths[k]; ++j) gk[i * widths[k] + j] += g[i * total + off + j];
                          off += widths[k];
                        }
                      });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no parts");
  const std::size_t n = parts[0].cols();
  std::size_t total_rows = 0;
  std::vector<std::size_t> sizes;
  for (const Tensor& p : parts) {
    require_rank2(p, "concat_rows");
    if (p.cols() != n) {
      throw ShapeError("concat_rows: width mismatch " + shape_string(parts[0].shape()) + " vs " +
                       shape_string(p.shape()));
    }
    total_rows += p.rows();
    sizes.push_back(p.size());
  }
  std::vector<double> data;
  data.reserve(total_rows * n);
  for (const Tensor& p : parts) data.insert(data.end(), p.data().begin(), p.data().end());
  Tensor out({total_rows, n}, std::move(data));
  Tape* tape = tape_of(parts);
  if (!tape) return out;
  std::vector<const Tensor*> inputs;
  for (const Tensor& p : parts) inputs.push_back(&p);
  return tape->record("concat_rows", std::move(out), inputs, [sizes](std::span<const double> g, GradAccess& acc) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < sizes.size(); ++k) {
      auto gk = acc.input(k);
      for (std::size_t i = 0; i < gk.size(); ++i) gk[i] += g[off + i];
      off += sizes[k];
    }
  });
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count) {
  require_rank2(x, "slice_rows");
  if (count == 0 || begin + count > x.rows()) {
    throw IndexError("slice_rows: rows [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                     ") out of range for " + shape_string(x.shape()));
  }
  const std::size_t n = x.cols();
  std::vector<double> data(x.data().begin() + static_cast<std::ptrdiff_t>(begin * n),
                           x.data().begin() + static_cast<std::ptrdiff_t>((begin + count) * n));
  Tensor out({count, n}, std::move(data));
  if (!x.tracked()) return out;
  return x.tape()->record("slice_rows", std::move(out), {&x},
                          [off = begin * n](std::span<const double> g, GradAccess& acc) {
                            auto gx = acc.input(0);
                            for (std::size_t i = 0; i < g.size(); ++i) gx[off + i] += g[i];
                          });
}

Tensor masked_fill(const Tensor& x, const Mask& mask, double value) {
  require_rank2(x, "masked_fill");
  if (mask.rows() != x.rows() || mask.cols() != x.cols()) {
    throw ShapeError("masked_fill: mask " + shape_string({mask.rows(), mask.cols()}) + " vs tensor " +
                     shape_string(x.shape()));
  }
  const std::size_t n = x.cols();
  Tensor out = x.detach();
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (mask(i, j)) o[i * n + j] = value;
  if (!x.tracked()) return out;
  return x.tape()->record("masked_fill", std::move(out), {&x}, [mask, n](std::span<const double> g, GradAccess& acc) {
    auto gx = acc.input(0);
    for (std::size_t i = 0; i < mask.rows(); ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (!mask(i, j)) gx[i * n + j] += g[i * n + j];
  });
}

Tensor embedding_rows(const Tensor& table, std::span<const int> ids) {
  require_rank2(table, "embedding_rows");
  if (ids.empty()) throw ShapeError("embedding_rows: empty id list");
  const std::size_t v = table.rows(), d = table.cols();
  Tensor out({ids.size(), d});
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v) {
      throw IndexError("embedding_rows: id " + std::to_string(ids[i]) + " outside table of " + std::to_string(v) +
                       " rows");
    }
    std::copy_n(table.data().begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(ids[i]) * d), d,
                o.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  if (!table.tracked()) return out;
  return table.tape()->record("embedding_rows", std::move(out), {&table},
                              [ids = std::vector<int>(ids.begin(), ids.end()), d](std::span<const double> g,
                                                                                 GradAccess& acc) {
                                auto gt = acc.input(0);
                                for (std::size_t i = 0; i < ids.size(); ++i)
                                  for (std::size_t j = 0; j < d; ++j)
                                    gt[static_cast<std::size_t>(ids[i]) * d + j] += g[i * d + j];
                              });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  Tensor out = Tensor::scalar(total);
  if (!x.tracked()) return out;
  return x.tape()->record("sum", std::move(out), {&x}, [](std::span<const double> g, GradAccess& acc) {
    auto gx = acc.input(0);
    for (double& v : gx) v += g[0];
  });
}

Tensor mean_rows(const Tensor& x) {
  require_rank2(x, "mean_rows");
  const std::size_t m = x.rows(), n = x.cols();
  Tensor out({1, n});
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) o[j] += x[i * n + j];
  for (double& v : o) v /= static_cast<double>(m);
  if (!x.tracked()) return out;
  return x.tape()->record("mean_rows", std::move(out), {&x}, [m, n](std::span<const double> g, GradAccess& acc) {
    auto gx = acc.input(0);
    const double inv = 1.0 / static_cast<double>(m);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[j] * inv;
  });
}

Tensor weighted_sum(std::span<const Tensor> parts, const Tensor& weights) {
  if (parts.empty()) throw ShapeError("weighted_sum: no parts");
  if (weights.size() != parts.size()) {
    throw ShapeError("weighted_sum: " + std::to_string(parts.size()) + " parts but weights " +
                     shape_string(weights.shape()));
  }
  for (const Tensor& p : parts) require_same_shape(parts[0], p, "weighted_sum");
  Tensor out(parts[0].shape());
  auto o = out.mutable_data();
  for (std::size_t k = 0; k < parts.size(); ++k)
    for (std::size_t i = 0; i < o.size(); ++i) o[i] += weights[k] * parts[k][i];
  Tape* tape = tape_of(parts, {&weights});
  if (!tape) return out;
  std::vector<const Tensor*> inputs;
  std::vector<std::vector<double>> saved;
  for (const Tensor& p : parts) {
    inputs.push_back(&p);
    saved.push_back(copy_data(p));
  }
  inputs.push_back(&weights);
  return tape->record("weighted_sum", std::move(out), inputs,
                      [saved = std::move(saved), w = copy_data(weights)](std::span<const double> g, GradAccess& acc) {
                        const std::size_t k_parts = saved.size();
                        for (std::size_t k = 0; k < k_parts; ++k) {
                          auto gk = acc.input(k);
                          for (std::size_t i = 0; i < gk.size(); ++i) gk[i] += w[k] * g[i];
                        }
                        if (auto gw = acc.input(k_parts); !gw.empty()) {
                          for (std::size_t k = 0; k < k_parts; ++k) {
                            double dot = 0.0;
                            for (std::size_t i = 0; i < g.size(); ++i) dot += g[i] * saved[k][i];
                            gw[k] += dot;
                          }
                        }
                      });
}

Tensor scale_by(const Tensor& x, const Tensor& factor) {
  if (factor.size() != 1) throw ShapeError("scale_by: factor must have one element, got " + shape_string(factor.shape()));
  const double s = factor[0];
  Tensor out(x.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * s;
  if (!any_tracked({&x, &factor})) return out;
  return tape_of({&x, &factor})
      ->record("scale_by", std::move(out), {&x, &factor},
               [xv = copy_data(x), s](std::span<const double> g, GradAccess& acc) {
                 if (auto gx = acc.input(0); !gx.empty())
                   for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * s;
                 if (auto gs = acc.input(1); !gs.empty()) {
                   double dot = 0.0;
                   for (std::size_t i = 0; i < g.size(); ++i) dot += g[i] * xv[i];
                   gs[0] += dot;
                 }
               });
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> targets, std::span<const std::uint8_t> active) {
  require_rank2(logits, "softmax_cross_entropy");
  const std::size_t m = logits.rows(), n = logits.cols();
  if (targets.size() != m || active.size() != m) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(targets.size()) + " targets and " +
                     std::to_string(active.size()) + " mask entries for logits " + shape_string(logits.shape()));
  }
  std::size_t count = 0;
  for (std::size_t i = 0; i < m; ++i) {
    if (!active[i]) continue;
    ++count;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= n) {
      throw IndexError("softmax_cross_entropy: target " + std::to_string(targets[i]) + " outside " +
                       std::to_string(n) + " classes");
    }
  }
  if (count == 0) throw ContractError("softmax_cross_entropy: no active positions");

  std::vector<double> probs(logits.size(), 0.0);
  double loss = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    if (!active[i]) continue;
    const double* row = logits.data().data() + i * n;
    const double mx = *std::max_element(row, row + n);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) total += std::exp(row[j] - mx);
    const double lse = mx + std::log(total);
    loss += lse - row[targets[i]];
    for (std::size_t j = 0; j < n; ++j) probs[i * n + j] = std::exp(row[j] - lse);
  }
  const double inv = 1.0 / static_cast<double>(count);
  Tensor out = Tensor::scalar(loss * inv);
  if (!logits.tracked()) return out;
  return logits.tape()->record(
      "softmax_cross_entropy", std::move(out), {&logits},
      [probs = std::move(probs), tgt = std::vector<int>(targets.begin(), targets.end()),
       act = std::vector<std::uint8_t>(active.begin(), active.end()), inv, n](std::span<const double> g,
                                                                              GradAccess& acc) {
        auto gl = acc.input(0);
        const double s = g[0] * inv;
        for (std::size_t i = 0; i < act.size(); ++i) {
          if (!act[i]) continue;
          for (std::size_t j = 0; j < n; ++j) gl[i * n + j] += s * probs[i * n + j];
          gl[i * n + static_cast<std::size_t>(tgt[i])] -= s;
        }
      });
}

}  // namespace mct
