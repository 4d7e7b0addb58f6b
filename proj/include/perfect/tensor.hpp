#pragma once

// Dense row-major tensors of doubles with tape-free reverse-mode
// differentiation: every op result keeps shared ownership of its inputs and a
// closure that pushes its gradient back to them. Dropping the loss tensor
// frees the graph; parameter leaves persist across steps.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace perfect {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {
struct Node;
}

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t size() const;
  std::size_t dim() const { return shape().size(); }
  // First dimension, and the product of the remaining ones.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> values() const;
  // Writable view; only valid on leaves (parameters, inputs).
  std::span<double> mutable_values();
  double item() const;
  double at(std::size_t row, std::size_t col) const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  // New leaf holding a copy of the values, no history.
  Tensor detach() const;

  // Identity of the underlying storage (two handles may share a node).
  const void* id() const { return node_.get(); }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;

  friend class OpBuilder;
  friend void backward(const Tensor& loss);
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Disables graph recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Elements allocated for op results on this thread since the last reset.
std::size_t op_elements();
void reset_op_elements();

// Populates grad on every requires_grad ancestor of a scalar loss. Gradients
// add into whatever is already stored; callers zero leaves between steps.
void backward(const Tensor& loss);

// ---------------------------------------------------------------- linear algebra

// a[m×k] · b[k×n]
Tensor matmul(const Tensor& a, const Tensor& b);
// a[m×k] · b[n×k]ᵀ
Tensor matmul_nt(const Tensor& a, const Tensor& b);

// ---------------------------------------------------------------- elementwise

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
// x[m×n] + bias[n] on every row.
Tensor add_row(const Tensor& x, const Tensor& bias);

// Tanh approximation: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³))).
Tensor gelu(const Tensor& x);
double gelu_value(double x);

// ---------------------------------------------------------------- reductions

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// ---------------------------------------------------------------- shape / indexing

Tensor reshape(const Tensor& x, Shape shape);
// out[i] = x[index[i]] (rows); backward scatter-adds.
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> index);
Tensor concat_rows(const Tensor& a, const Tensor& b);
// out[g] = Σ over (row, col) in groups[g] of x[row, col]; shape {groups.size()}.
Tensor pick_sum(const Tensor& x,
                const std::vector<std::vector<std::pair<std::size_t, std::size_t>>>& groups);

// ---------------------------------------------------------------- nn

inline constexpr double kLayerNormEps = 1e-5;

// Per-row (last axis) standardization, scaled by gain and shifted by bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = kLayerNormEps);

Tensor softmax_rows(const Tensor& x);
Tensor log_softmax_rows(const Tensor& x);

// Multi-head scaled dot-product attention over a padded batch. q, k, v are
// [batch·seq × H]; key_mask holds batch·seq flags (0 = padding, never
// attended to). Bidirectional: no causal mask.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t batch,
                 std::size_t seq, std::size_t heads, std::span<const unsigned char> key_mask);

// Per-slot class scores. hidden is [R·M × H] with rows ordered (example, slot);
// labels is the label-embedding tensor [K × M × H]. Row (r, i) of the result
// is L_i · h_(r,i), a K-vector.
Tensor slot_scores(const Tensor& hidden, const Tensor& labels);

// Mean over rows of Σ_{k≠y} max(0, margin − t_y + t_k), divided by K when
// divide_by_classes is set.
Tensor multiclass_hinge(const Tensor& scores, std::span<const std::size_t> targets, double margin,
                        bool divide_by_classes);

// Mean over rows of −log softmax(t)_y.
Tensor softmax_cross_entropy(const Tensor& scores, std::span<const std::size_t> targets);

}  // namespace perfect
