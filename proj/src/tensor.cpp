#include "perfect/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "perfect/errors.hpp"

namespace perfect {

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;
  bool requires_grad = false;
  bool leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into parents that require grad.
  std::function<void(Node&)> backward_fn;

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(values.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

namespace {

thread_local bool g_grad_enabled = true;
thread_local std::size_t g_op_elements = 0;

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
}

void require_matrix(const Tensor& t, const char* op) {
  if (t.dim() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_string(t.shape()));
  }
}

}  // namespace

// Assembles op results. A result records its parents only when recording is
// enabled and at least one parent requires grad.
class OpBuilder {
 public:
  using Fn = std::function<void(detail::Node&)>;

  static Tensor make(Shape shape, std::vector<double> values, std::initializer_list<Tensor> inputs,
                     Fn fn) {
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->values = std::move(values);
    node->leaf = false;
    g_op_elements += node->values.size();
    bool needs = false;
    if (g_grad_enabled) {
      for (const auto& in : inputs) needs = needs || in.node_->requires_grad;
    }
    if (needs) {
      node->requires_grad = true;
      for (const auto& in : inputs) node->parents.push_back(in.node_);
      node->backward_fn = std::move(fn);
    }
    return Tensor(std::move(node));
  }

  static detail::Node& node(const Tensor& t) { return *t.node_; }
};

namespace {

// Gradient slot of the i-th parent, or nullptr if it does not take gradients.
std::vector<double>* parent_grad(detail::Node& self, std::size_t i) {
  auto& p = *self.parents[i];
  return p.requires_grad ? &p.ensure_grad() : nullptr;
}

}  // namespace

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "×" : "") << shape[i];
  out << ']';
  return out.str();
}

// ------------------------------------------------------------------ Tensor

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_size(shape) != values.size()) {
    throw DimensionError("tensor: shape " + shape_string(shape) + " does not hold " +
                         std::to_string(values.size()) + " values");
  }
  node_ = std::make_shared<detail::Node>();
  node_->shape = std::move(shape);
  node_->values = std::move(values);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_size(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::size() const { return node_->values.size(); }
std::size_t Tensor::rows() const { return shape().empty() ? 1 : shape()[0]; }
std::size_t Tensor::cols() const { return rows() == 0 ? 0 : size() / rows(); }
std::span<const double> Tensor::values() const { return node_->values; }

std::span<double> Tensor::mutable_values() {
  if (!node_->leaf) throw ContractError("mutable_values: tensor is not a leaf");
  return node_->values;
}

double Tensor::item() const {
  if (size() != 1) throw ContractError("item: tensor of shape " + shape_string(shape()) + " is not scalar");
  return node_->values[0];
}

double Tensor::at(std::size_t row, std::size_t col) const { return node_->values[row * cols() + col]; }

bool Tensor::requires_grad() const { return node_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  if (!node_->leaf) throw ContractError("set_requires_grad: tensor is not a leaf");
  node_->requires_grad = flag;
  if (!flag) node_->grad.clear();
}

bool Tensor::is_leaf() const { return node_->leaf; }
bool Tensor::has_grad() const { return !node_->grad.empty(); }
std::span<const double> Tensor::grad() const { return node_->grad; }

void Tensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return Tensor(shape(), node_->values, false); }

std::size_t op_elements() { return g_op_elements; }
void reset_op_elements() { g_op_elements = 0; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " +
                        (loss.defined() ? shape_string(loss.shape()) : std::string("<undefined>")));
  }
  auto* root = loss.node_.get();
  if (!root->requires_grad) return;

  // Iterative post-order DFS gives a topological order (parents before children).
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{root, 0}};
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      auto* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
  }
}

// ------------------------------------------------------------------ linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const auto m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul: inner dimensions disagree, " + shape_string(a.shape()) + " · " +
                         shape_string(b.shape()));
  }
  std::vector<double> out(m * n);
  MatMap(out.data(), m, n).noalias() = ConstMatMap(a.values().data(), m, k) * ConstMatMap(b.values().data(), k, n);
  return OpBuilder::make({m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
    ConstMatMap dout(self.grad.data(), m, n);
    const auto& av = self.parents[0]->values;
    const auto& bv = self.parents[1]->values;
    if (auto* ga = parent_grad(self, 0)) {
      MatMap(ga->data(), m, k).noalias() += dout * ConstMatMap(bv.data(), k, n).transpose();
    }
    if (auto* gb = parent_grad(self, 1)) {
      MatMap(gb->data(), k, n).noalias() += ConstMatMap(av.data(), m, k).transpose() * dout;
    }
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  const auto m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
  if (b.shape()[1] != k) {
    throw DimensionError("matmul_nt: inner dimensions disagree, " + shape_string(a.shape()) + " · " +
                         shape_string(b.shape()) + "ᵀ");
  }
  std::vector<double> out(m * n);
  MatMap(out.data(), m, n).noalias() =
      ConstMatMap(a.values().data(), m, k) * ConstMatMap(b.values().data(), n, k).transpose();
  return OpBuilder::make({m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
    ConstMatMap dout(self.grad.data(), m, n);
    const auto& av = self.parents[0]->values;
    const auto& bv = self.parents[1]->values;
    if (auto* ga = parent_grad(self, 0)) {
      MatMap(ga->data(), m, k).noalias() += dout * ConstMatMap(bv.data(), n, k);
    }
    if (auto* gb = parent_grad(self, 1)) {
      MatMap(gb->data(), n, k).noalias() += dout.transpose() * ConstMatMap(av.data(), m, k);
    }
  });
}

// ------------------------------------------------------------------ elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
  return OpBuilder::make(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (auto* g = parent_grad(self, p)) {
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
      }
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
  return OpBuilder::make(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    if (auto* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
    if (auto* g = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
  return OpBuilder::make(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    const auto& av = self.parents[0]->values;
    const auto& bv = self.parents[1]->values;
    if (auto* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * bv[i];
    }
    if (auto* g = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * av[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * factor;
  return OpBuilder::make(a.shape(), std::move(out), {a}, [factor](detail::Node& self) {
    if (auto* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * factor;
    }
  });
}

Tensor add_row(const Tensor& x, const Tensor& bias) {
  const auto n = x.cols();
  if (bias.size() != n) {
    throw DimensionError("add_row: bias " + shape_string(bias.shape()) + " does not match rows of " +
                         shape_string(x.shape()));
  }
  const auto m = x.rows();
  std::vector<double> out(x.values().begin(), x.values().end());
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] += bias.values()[c];
  }
  return OpBuilder::make(x.shape(), std::move(out), {x, bias}, [m, n](detail::Node& self) {
    if (auto* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
    if (auto* g = parent_grad(self, 1)) {
      for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t c = 0; c < n; ++c) (*g)[c] += self.grad[r * n + c];
      }
    }
  });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // √(2/π)
constexpr double kGeluA = 0.044715;

// tanh through one exp; cheaper than std::tanh and accurate to a few ulp of 1.
double fast_tanh(double u) {
  if (u > 20.0) return 1.0;
  if (u < -20.0) return -1.0;
  return 1.0 - 2.0 / (std::exp(2.0 * u) + 1.0);
}
}  // namespace

double gelu_value(double x) { return 0.5 * x * (1.0 + fast_tanh(kGeluC * (x + kGeluA * x * x * x))); }

Tensor gelu(const Tensor& x) {
  const auto& xv = x.values();
  std::vector<double> out(x.size());
  const bool keep = g_grad_enabled && x.requires_grad();
  std::vector<double> slope(keep ? x.size() : 0);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = xv[i];
    const double t = fast_tanh(kGeluC * (v + kGeluA * v * v * v));
    out[i] = 0.5 * v * (1.0 + t);
    if (keep) slope[i] = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
  }
  return OpBuilder::make(x.shape(), std::move(out), {x}, [slope = std::move(slope)](detail::Node& self) {
    if (auto* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * slope[i];
    }
  });
}

// ------------------------------------------------------------------ reductions

Tensor sum(const Tensor& x) {
  const double total = std::accumulate(x.values().begin(), x.values().end(), 0.0);
  return OpBuilder::make({1}, {total}, {x}, [](detail::Node& self) {
    if (auto* g = parent_grad(self, 0)) {
      for (auto& v : *g) v += self.grad[0];
    }
  });
}

Tensor mean(const Tensor& x) {
  if (x.size() == 0) throw ContractError("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

// ------------------------------------------------------------------ shape / indexing

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_size(shape) != x.size()) {
    throw DimensionError("reshape: " + shape_string(x.shape()) + " to " + shape_string(shape));
  }
  std::vector<double> out(x.values().begin(), x.values().end());
  return OpBuilder::make(std::move(shape), std::move(out), {x}, [](detail::Node& self) {
    if (auto* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
  });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> index) {
  const auto n = x.cols();
  const auto rows = x.rows();
  std::vector<double> out(index.size() * n);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= rows) {
      throw DimensionError("gather_rows: index " + std::to_string(index[i]) + " out of range for " +
                           shape_string(x.shape()));
    }
    std::copy_n(x.values().begin() + static_cast<std::ptrdiff_t>(index[i] * n), n, out.begin() + static_cast<std::ptrdiff_t>(i * n));
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return OpBuilder::make({index.size(), n}, std::move(out), {x}, [idx = std::move(idx), n](detail::Node& self) {
    if (auto* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < idx.size(); ++i) {
        for (std::size_t c = 0; c < n; ++c) (*g)[idx[i] * n + c] += self.grad[i * n + c];
      }
    }
  });
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("concat_rows: column mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
  const auto n = a.cols();
  std::vector<double> out(a.values().begin(), a.values().end());
  out.insert(out.end(), b.values().begin(), b.values().end());
  const auto split = a.size();
  return OpBuilder::make({a.rows() + b.rows(), n}, std::move(out), {a, b}, [split](detail::Node& self) {
    if (auto* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
    if (auto* g = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[split + i];
    }
  });
}

Tensor pick_sum(const Tensor& x,
                const std::vector<std::vector<std::pair<std::size_t, std::size_t>>>& groups) {
  const auto n = x.cols();
  std::vector<double> out(groups.size(), 0.0);
  for (std::size_t g = 0; g < groups.size(); ++g) {
    for (const auto& [r, c] : groups[g]) {
      if (r >= x.rows() || c >= n) throw DimensionError("pick_sum: element out of range");
      out[g] += x.values()[r * n + c];
    }
  }
  return OpBuilder::make({groups.size()}, std::move(out), {x}, [groups, n](detail::Node& self) {
    if (auto* grad = parent_grad(self, 0)) {
      for (std::size_t g = 0; g < groups.size(); ++g) {
        for (const auto& [r, c] : groups[g]) (*grad)[r * n + c] += self.grad[g];
      }
    }
  });
}

// ------------------------------------------------------------------ nn

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const auto n = x.cols();
  const auto m = x.rows();
  if (gain.size() != n || bias.size() != n) {
    throw DimensionError("layer_norm: gain/bias " + shape_string(gain.shape()) + "/" +
                         shape_string(bias.shape()) + " vs normalized axis of " + shape_string(x.shape()));
  }
  std::vector<double> xhat(x.size());
  std::vector<double> rstd(m);
  std::vector<double> out(x.size());
  const auto& xv = x.values();
  for (std::size_t r = 0; r < m; ++r) {
    const double* row = xv.data() + r * n;
    double mu = 0.0;
    for (std::size_t c = 0; c < n; ++c) mu += row[c];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t c = 0; c < n; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<double>(n);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < n; ++c) {
      xhat[r * n + c] = (row[c] - mu) * rstd[r];
      out[r * n + c] = xhat[r * n + c] * gain.values()[c] + bias.values()[c];
    }
  }
  return OpBuilder::make(x.shape(), std::move(out), {x, gain, bias},
                         [m, n, xhat = std::move(xhat), rstd = std::move(rstd)](detail::Node& self) {
    const auto& gv = self.parents[1]->values;
    const auto& dy = self.grad;
    if (auto* gx = parent_grad(self, 0)) {
      for (std::size_t r = 0; r < m; ++r) {
        double mean_d = 0.0, mean_dx = 0.0;
        for (std::size_t c = 0; c < n; ++c) {
          const double d = dy[r * n + c] * gv[c];
          mean_d += d;
          mean_dx += d * xhat[r * n + c];
        }
        mean_d /= static_cast<double>(n);
        mean_dx /= static_cast<double>(n);
        for (std::size_t c = 0; c < n; ++c) {
          const double d = dy[r * n + c] * gv[c];
          (*gx)[r * n + c] += rstd[r] * (d - mean_d - xhat[r * n + c] * mean_dx);
        }
      }
    }
    if (auto* gg = parent_grad(self, 1)) {
      for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t c = 0; c < n; ++c) (*gg)[c] += dy[r * n + c] * xhat[r * n + c];
      }
    }
    if (auto* gb = parent_grad(self, 2)) {
      for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t c = 0; c < n; ++c) (*gb)[c] += dy[r * n + c];
      }
    }
  });
}

namespace {

void softmax_row(const double* in, double* out, std::size_t n) {
  double hi = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < n; ++c) hi = std::max(hi, in[c]);
  double total = 0.0;
  for (std::size_t c = 0; c < n; ++c) {
    out[c] = std::exp(in[c] - hi);
    total += out[c];
  }
  for (std::size_t c = 0; c < n; ++c) out[c] /= total;
}

double log_sum_exp(const double* in, std::size_t n) {
  double hi = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < n; ++c) hi = std::max(hi, in[c]);
  double total = 0.0;
  for (std::size_t c = 0; c < n; ++c) total += std::exp(in[c] - hi);
  return hi + std::log(total);
}

}  // namespace

Tensor softmax_rows(const Tensor& x) {
  const auto m = x.rows(), n = x.cols();
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < m; ++r) softmax_row(x.values().data() + r * n, out.data() + r * n, n);
  return OpBuilder::make(x.shape(), out, {x}, [m, n, probs = out](detail::Node& self) {
    if (auto* g = parent_grad(self, 0)) {
      for (std::size_t r = 0; r < m; ++r) {
        double dot = 0.0;
        for (std::size_t c = 0; c < n; ++c) dot += self.grad[r * n + c] * probs[r * n + c];
        for (std::size_t c = 0; c < n; ++c) (*g)[r * n + c] += probs[r * n + c] * (self.grad[r * n + c] - dot);
      }
    }
  });
}

Tensor log_softmax_rows(const Tensor& x) {
  const auto m = x.rows(), n = x.cols();
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < m; ++r) {
    const double* row = x.values().data() + r * n;
    const double lse = log_sum_exp(row, n);
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = row[c] - lse;
  }
  return OpBuilder::make(x.shape(), out, {x}, [m, n, logp = out](detail::Node& self) {
    if (auto* g = parent_grad(self, 0)) {
      for (std::size_t r = 0; r < m; ++r) {
        double total = 0.0;
        for (std::size_t c = 0; c < n; ++c) total += self.grad[r * n + c];
        for (std::size_t c = 0; c < n; ++c) {
          (*g)[r * n + c] += self.grad[r * n + c] - std::exp(logp[r * n + c]) * total;
        }
      }
    }
  });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t batch,
                 std::size_t seq, std::size_t heads, std::span<const unsigned char> key_mask) {
  require_same_shape(q, k, "attention");
  require_same_shape(q, v, "attention");
  const auto width = q.cols();
  if (q.rows() != batch * seq || key_mask.size() != batch * seq) {
    throw DimensionError("attention: expected " + std::to_string(batch * seq) + " rows, got " +
                         std::to_string(q.rows()));
  }
  if (heads == 0 || width % heads != 0) {
    throw DimensionError("attention: width " + std::to_string(width) + " not divisible by " +
                         std::to_string(heads) + " heads");
  }
  const auto head_dim = width / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
  using Strided = Eigen::Map<const RowMatrix, 0, Eigen::OuterStride<>>;
  using MutStrided = Eigen::Map<RowMatrix, 0, Eigen::OuterStride<>>;
  const auto ld = static_cast<Eigen::Index>(width);
  const auto s = static_cast<Eigen::Index>(seq), hd = static_cast<Eigen::Index>(head_dim);
  auto block = [&](std::span<const double> data, std::size_t b, std::size_t h) {
    return Strided(data.data() + b * seq * width + h * head_dim, s, hd, Eigen::OuterStride<>(ld));
  };

  // probs[b, h] is a seq × seq row-stochastic matrix; masked keys get 0.
  std::vector<double> probs(batch * heads * seq * seq, 0.0);
  std::vector<double> out(q.size(), 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    const unsigned char* live = key_mask.data() + b * seq;
    for (std::size_t h = 0; h < heads; ++h) {
      MatMap p(probs.data() + (b * heads + h) * seq * seq, s, s);
      p.noalias() = block(q.values(), b, h) * block(k.values(), b, h).transpose();
      for (Eigen::Index i = 0; i < s; ++i) {
        double hi = -std::numeric_limits<double>::infinity();
        for (Eigen::Index j = 0; j < s; ++j) {
          if (live[j]) hi = std::max(hi, p(i, j));
        }
        double total = 0.0;
        for (Eigen::Index j = 0; j < s; ++j) {
          p(i, j) = live[j] ? std::exp((p(i, j) - hi) * inv_sqrt) : 0.0;
          total += p(i, j);
        }
        if (total > 0.0) p.row(i) /= total;  // every key masked: row stays zero
      }
      MutStrided(out.data() + b * seq * width + h * head_dim, s, hd, Eigen::OuterStride<>(ld)).noalias() =
          p * block(v.values(), b, h);
    }
  }

  return OpBuilder::make(q.shape(), std::move(out), {q, k, v},
                         [batch, seq, heads, head_dim, width, inv_sqrt, probs = std::move(probs)](detail::Node& self) {
    const auto ld = static_cast<Eigen::Index>(width);
    const auto s = static_cast<Eigen::Index>(seq), hd = static_cast<Eigen::Index>(head_dim);
    auto view = [&](const std::vector<double>& data, std::size_t b, std::size_t h) {
      return Strided(data.data() + b * seq * width + h * head_dim, s, hd, Eigen::OuterStride<>(ld));
    };
    auto mut = [&](std::vector<double>* data, std::size_t b, std::size_t h) {
      return MutStrided(data->data() + b * seq * width + h * head_dim, s, hd, Eigen::OuterStride<>(ld));
    };
    auto* gq = parent_grad(self, 0);
    auto* gk = parent_grad(self, 1);
    auto* gv = parent_grad(self, 2);
    RowMatrix dp(s, s);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t h = 0; h < heads; ++h) {
        ConstMatMap p(probs.data() + (b * heads + h) * seq * seq, s, s);
        const auto dout = view(self.grad, b, h);
        if (gv) mut(gv, b, h).noalias() += p.transpose() * dout;
        if (!gq && !gk) continue;
        dp.noalias() = dout * view(self.parents[2]->values, b, h).transpose();
        // Softmax backward, then the 1/√d scale of the logits.
        const Eigen::VectorXd weighted = (dp.array() * p.array()).rowwise().sum();
        dp = (p.array() * (dp.colwise() - weighted).array()) * inv_sqrt;
        if (gq) mut(gq, b, h).noalias() += dp * view(self.parents[1]->values, b, h);
        if (gk) mut(gk, b, h).noalias() += dp.transpose() * view(self.parents[0]->values, b, h);
      }
    }
  });
}

Tensor slot_scores(const Tensor& hidden, const Tensor& labels) {
  if (labels.dim() != 3) {
    throw DimensionError("slot_scores: label embedding must be K×M×H, got " + shape_string(labels.shape()));
  }
  const auto classes = labels.shape()[0], slots = labels.shape()[1], width = labels.shape()[2];
  if (hidden.cols() != width || hidden.rows() % slots != 0) {
    throw DimensionError("slot_scores: hidden " + shape_string(hidden.shape()) +
                         " incompatible with label embedding " + shape_string(labels.shape()));
  }
  const auto rows = hidden.rows();
  const auto& hv = hidden.values();
  const auto& lv = labels.values();
  std::vector<double> out(rows * classes, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const auto slot = r % slots;
    for (std::size_t k = 0; k < classes; ++k) {
      const double* l = lv.data() + (k * slots + slot) * width;
      double dot = 0.0;
      for (std::size_t d = 0; d < width; ++d) dot += l[d] * hv[r * width + d];
      out[r * classes + k] = dot;
    }
  }
  return OpBuilder::make({rows, classes}, std::move(out), {hidden, labels},
                         [rows, classes, slots, width](detail::Node& self) {
    const auto& hv = self.parents[0]->values;
    const auto& lv = self.parents[1]->values;
    auto* gh = parent_grad(self, 0);
    auto* gl = parent_grad(self, 1);
    for (std::size_t r = 0; r < rows; ++r) {
      const auto slot = r % slots;
      for (std::size_t k = 0; k < classes; ++k) {
        const double d_out = self.grad[r * classes + k];
        if (d_out == 0.0) continue;
        const auto lbase = (k * slots + slot) * width;
        for (std::size_t d = 0; d < width; ++d) {
          if (gh) (*gh)[r * width + d] += d_out * lv[lbase + d];
          if (gl) (*gl)[lbase + d] += d_out * hv[r * width + d];
        }
      }
    }
  });
}

Tensor multiclass_hinge(const Tensor& scores, std::span<const std::size_t> targets, double margin,
                        bool divide_by_classes) {
  require_matrix(scores, "multiclass_hinge");
  const auto rows = scores.rows(), classes = scores.cols();
  if (targets.size() != rows || rows == 0) {
    throw ContractError("multiclass_hinge: " + std::to_string(targets.size()) + " targets for " +
                        std::to_string(rows) + " score rows");
  }
  const double norm = (divide_by_classes ? static_cast<double>(classes) : 1.0) * static_cast<double>(rows);
  std::vector<double> coef(scores.size(), 0.0);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const auto y = targets[r];
    if (y >= classes) throw ContractError("multiclass_hinge: target out of range");
    const double* t = scores.values().data() + r * classes;
    for (std::size_t k = 0; k < classes; ++k) {
      if (k == y) continue;
      const double slack = margin - t[y] + t[k];
      // NaN slack falls through so a diverged model is not scored as zero loss.
      if (!(slack <= 0.0)) {
        total += slack;
        coef[r * classes + k] += 1.0 / norm;
        coef[r * classes + y] -= 1.0 / norm;
      }
    }
  }
  return OpBuilder::make({1}, {total / norm}, {scores}, [coef = std::move(coef)](detail::Node& self) {
    if (auto* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[0] * coef[i];
    }
  });
}

Tensor softmax_cross_entropy(const Tensor& scores, std::span<const std::size_t> targets) {
  require_matrix(scores, "softmax_cross_entropy");
  const auto rows = scores.rows(), classes = scores.cols();
  if (targets.size() != rows || rows == 0) {
    throw ContractError("softmax_cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                        std::to_string(rows) + " score rows");
  }
  std::vector<double> dlogits(scores.size());
  double total = 0.0;
  const double inv = 1.0 / static_cast<double>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const auto y = targets[r];
    if (y >= classes) throw ContractError("softmax_cross_entropy: target out of range");
    const double* t = scores.values().data() + r * classes;
    total += log_sum_exp(t, classes) - t[y];
    softmax_row(t, dlogits.data() + r * classes, classes);
    dlogits[r * classes + y] -= 1.0;
    for (std::size_t k = 0; k < classes; ++k) dlogits[r * classes + k] *= inv;
  }
  return OpBuilder::make({1}, {total * inv}, {scores}, [d = std::move(dlogits)](detail::Node& self) {
    if (auto* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[0] * d[i];
    }
  });
}

}  // namespace perfect
