#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace mwpgen {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace detail {
struct Node {
  Matrix value;
  Matrix grad;  // empty until something flows into it
  bool requires_grad = false;
  bool on_tape = false;
  std::function<void()> backward;

  void accumulate(const Matrix& g);
  template <typename Expr>
  void accumulate_expr(const Expr& g) {
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad += g;
    }
  }
};
}  // namespace detail

// Handle to a shaped array of doubles taking part in reverse-mode
// differentiation. Copies share the same storage.
class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Matrix value);
  static Tensor parameter(Matrix value);
  static Tensor scalar(double v);

  bool defined() const { return node_ != nullptr; }
  const Matrix& value() const { return node_->value; }
  // Direct access for optimizers and checkpoint loading; never call on a
  // tensor that is part of a live record.
  Matrix& mutable_value() { return node_->value; }
  const Matrix& grad() const { return node_->grad; }
  bool has_grad() const { return node_->grad.size() != 0; }
  void zero_grad() { node_->grad.resize(0, 0); }
  bool requires_grad() const { return node_->requires_grad; }

  std::size_t rows() const { return static_cast<std::size_t>(node_->value.rows()); }
  std::size_t cols() const { return static_cast<std::size_t>(node_->value.cols()); }
  std::array<std::size_t, 2> shape() const { return {rows(), cols()}; }
  double item() const;

  // Throws a numerical error if any value is NaN or infinite.
  void validate(const std::string& what) const;

  detail::Node* node() const { return node_.get(); }

 private:
  friend class Tape;
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
  std::shared_ptr<detail::Node> node_;
};

// The computation record. Every primitive appends its output here; backward
// walks the record in exact reverse order of creation. A tape constructed
// with record=false computes values only (inference).
class Tape {
 public:
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  Tensor add(const Tensor& a, const Tensor& b);
  Tensor sub(const Tensor& a, const Tensor& b);
  Tensor mul(const Tensor& a, const Tensor& b);
  // a (n x m) + row (1 x m) broadcast over rows.
  Tensor add_row(const Tensor& a, const Tensor& row);
  // Row i of a scaled by gate(i, 0).
  Tensor scale_rows(const Tensor& a, const Tensor& gate);
  Tensor scalar_mul(const Tensor& a, double s);
  Tensor matmul(const Tensor& a, const Tensor& b);
  // a * b^T without materializing the transpose as a separate record entry.
  Tensor matmul_nt(const Tensor& a, const Tensor& b);
  Tensor transpose(const Tensor& a);
  // axis 0 stacks rows, axis 1 stacks columns.
  Tensor concat(std::span<const Tensor> parts, int axis);
  Tensor slice(const Tensor& a, int axis, std::size_t begin, std::size_t length);
  Tensor embedding_gather(const Tensor& table, std::span<const int> ids);
  // Row-wise softmax of scale * a. With causal=true, entry (i, j) for
  // j > i + offset is excluded (probability exactly 0).
  Tensor softmax_rows(const Tensor& a, double scale = 1.0, bool causal = false,
                      std::size_t offset = 0);
  Tensor sigmoid(const Tensor& a);
  Tensor log(const Tensor& a);
  Tensor exp(const Tensor& a);
  Tensor gelu(const Tensor& a);
  Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                    double eps = 1e-5);
  // Per-row cross entropy (n x 1). A negative target yields 0 for that row.
  Tensor cross_entropy_from_logits(const Tensor& logits, std::span<const int> targets);
  Tensor sum(const Tensor& a);
  Tensor mean(const Tensor& a);

  // Forward value is `forward`; backward passes the incoming gradient to `x`
  // unchanged.
  Tensor straight_through(const Tensor& x, Matrix forward);
  // y = f(x) elementwise, with dy/dx supplied as a precomputed matrix.
  Tensor elementwise(const Tensor& x, Matrix value, Matrix derivative);

  // Populates grads of every reachable tensor. loss must be 1 x 1.
  // Intermediate grads are reset first, so repeated calls accumulate into
  // leaves only.
  void backward(const Tensor& loss);

 private:
  Tensor make(Matrix value, bool requires_grad);
  bool needs_grad(std::initializer_list<const Tensor*> inputs) const;

  bool record_;
  std::vector<Tensor> nodes_;
};

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<Matrix> m;
  std::vector<Matrix> v;
  long step = 0;

  void init(std::span<const Tensor> params);
};

// One bias-corrected Adam update. Throws before touching anything if a
// gradient is non-finite.
void adam_step(std::span<Tensor> params, AdamState& state, const AdamConfig& cfg);

// Rescales gradients so their global L2 norm is at most max_norm. Returns the
// norm before clipping.
double clip_grad_norm(std::span<Tensor> params, double max_norm);

}  // namespace mwpgen
