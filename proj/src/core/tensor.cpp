#include "tensor.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "error.hpp"

namespace mwpgen {

namespace {

std::string shape_str(const Tensor& t) {
  std::ostringstream os;
  os << "[" << t.rows() << "x" << t.cols() << "]";
  return os.str();
}

[[noreturn]] void shape_error(const char* tag, std::initializer_list<const Tensor*> ts) {
  std::ostringstream os;
  os << tag << ": incompatible shapes";
  for (const Tensor* t : ts) os << " " << shape_str(*t);
  fail_usage(os.str(), tag);
}

void require_same(const char* tag, const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_error(tag, {&a, &b});
}

}  // namespace

void detail::Node::accumulate(const Matrix& g) {
  if (grad.size() == 0) {
    grad = g;
  } else {
    grad += g;
  }
}

Tensor Tensor::constant(Matrix value) {
  auto n = std::make_shared<detail::Node>();
  n->value = std::move(value);
  return Tensor(std::move(n));
}

Tensor Tensor::parameter(Matrix value) {
  auto n = std::make_shared<detail::Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(double v) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return constant(std::move(m));
}

double Tensor::item() const {
  if (node_->value.size() != 1) fail_usage("item() on non-scalar tensor " + shape_str(*this));
  return node_->value(0, 0);
}

void Tensor::validate(const std::string& what) const {
  if (!node_->value.allFinite()) fail_numerical("non-finite values in " + what, what);
}

Tensor Tape::make(Matrix value, bool requires_grad) {
  auto n = std::make_shared<detail::Node>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  n->on_tape = true;
  Tensor t(std::move(n));
  if (record_) nodes_.push_back(t);
  return t;
}

bool Tape::needs_grad(std::initializer_list<const Tensor*> inputs) const {
  if (!record_) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

Tensor Tape::add(const Tensor& a, const Tensor& b) {
  require_same("add", a, b);
  Tensor out = make(a.value() + b.value(), needs_grad({&a, &b}));
  if (out.requires_grad()) {
    detail::Node* o = out.node();
    out.node()->backward = [o, a, b] {
      if (a.requires_grad()) a.node()->accumulate(o->grad);
      if (b.requires_grad()) b.node()->accumulate(o->grad);
    };
  }
  return out;
}

Tensor Tape::sub(const Tensor& a, const Tensor& b) {
  require_same("sub", a, b);
  Tensor out = make(a.value() - b.value(), needs_grad({&a, &b}));
  if (out.requires_grad()) {
    detail::Node* o = out.node();
    out.node()->backward = [o, a, b] {
      if (a.requires_grad()) a.node()->accumulate(o->grad);
      if (b.requires_grad()) b.node()->accumulate_expr(-o->grad);
    };
  }
  return out;
}

Tensor Tape::mul(const Tensor& a, const Tensor& b) {
  require_same("mul", a, b);
  Tensor out = make(a.value().cwiseProduct(b.value()), needs_grad({&a, &b}));
  if (out.requires_grad()) {
    detail::Node* o = out.node();
    out.node()->backward = [o, a, b] {
      if (a.requires_grad()) a.node()->accumulate_expr(o->grad.cwiseProduct(b.value()));
      if (b.requires_grad()) b.node()->accumulate_expr(o->grad.cwiseProduct(a.value()));
    };
  }
  return out;
}

Tensor Tape::add_row(const Tensor& a, const Tensor& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) shape_error("add_row", {&a, &row});
  Matrix v = a.value();
  v.rowwise() += row.value().row(0);
  Tensor out = make(std::move(v), needs_grad({&a, &row}));
  if (out.requires_grad()) {
    detail::Node* o = out.node();
    out.node()->backward = [o, a, row] {
      if (a.requires_grad()) a.node()->accumulate(o->grad);
      if (row.requires_grad()) row.node()->accumulate_expr(o->grad.colwise().sum());
    };
  }
  return out;
}

Tensor Tape::scale_rows(const Tensor& a, const Tensor& gate) {
  if (gate.cols() != 1 || gate.rows() != a.rows()) shape_error("scale_rows", {&a, &gate});
  Matrix v = a.value().array().colwise() * gate.value().col(0).array();
  Tensor out = make(std::move(v), needs_grad({&a, &gate}));
  if (out.requires_grad()) {
    detail::Node* o = out.node();
    out.node()->backward = [o, a, gate] {
      if (a.requires_grad()) {
        Matrix g = o->grad.array().colwise() * gate.value().col(0).array();
        a.node()->accumulate(g);
      }
      if (gate.requires_grad()) {
        Matrix g = o->grad.cwiseProduct(a.value()).rowwise().sum();
        gate.node()->accumulate(g);
      }
    };
  }
  return out;
}

Tensor Tape::scalar_mul(const Tensor& a, double s) {
  Tensor out = make(a.value() * s, needs_grad({&a}));
  if (out.requires_grad()) {
    detail::Node* o = out.node();
    out.node()->backward = [o, a, s] { a.node()->accumulate_expr(o->grad * s); };
  }
  return out;
}

Tensor Tape::matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) shape_error("matmul", {&a, &b});
  Matrix v = a.value() * b.value();
  Tensor out = make(std::move(v), needs_grad({&a, &b}));
  if (out.requires_grad()) {
    detail::Node* o = out.node();
    out.node()->backward = [o, a, b] {
      if (a.requires_grad()) a.node()->accumulate_expr(o->grad * b.value().transpose());
      if (b.requires_grad()) b.node()->accumulate_expr(a.value().transpose() * o->grad);
    };
  }
  return out;
}

Tensor Tape::matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) shape_error("matmul_nt", {&a, &b});
  Matrix v = a.value() * b.value().transpose();
  Tensor out = make(std::move(v), needs_grad({&a, &b}));
  if (out.requires_grad()) {
    detail::Node* o = out.node();
    out.node()->backward = [o, a, b] {
      if (a.requires_grad()) a.node()->accumulate_expr(o->grad * b.value());
      if (b.requires_grad()) b.node()->accumulate_expr(o->grad.transpose() * a.value());
    };
  }
  return out;
}

Tensor Tape::transpose(const Tensor& a) {
  Tensor out = make(a.value().transpose(), needs_grad({&a}));
  if (out.requires_grad()) {
    detail::Node* o = out.node();
    out.node()->backward = [o, a] { a.node()->accumulate_expr(o->grad.transpose()); };
  }
  return out;
}

Tensor Tape::concat(std::span<const Tensor> parts, int axis) {
  if (parts.empty()) fail_usage("concat: no inputs", "concat");
  if (axis != 0 && axis != 1) fail_usage("concat: axis must be 0 or 1", "concat");
  std::size_t rows = 0, cols = 0;
  bool grad = false;
  for (const Tensor& p : parts) {
    if (axis == 0) {
      if (p.cols() != parts[0].cols()) shape_error("concat", {&parts[0], &p});
      rows += p.rows();
    } else {
      if (p.rows() != parts[0].rows()) shape_error("concat", {&parts[0], &p});
      cols += p.cols();
    }
    grad = grad || p.requires_grad();
  }
  if (axis == 0) cols = parts[0].cols();
  else rows = parts[0].rows();
  Matrix v(rows, cols);
  std::size_t at = 0;
  for (const Tensor& p : parts) {
    if (axis == 0) {
      v.middleRows(at, p.rows()) = p.value();
      at += p.rows();
    } else {
      v.middleCols(at, p.cols()) = p.value();
      at += p.cols();
    }
  }
  Tensor out = make(std::move(v), record_ && grad);
  if (out.requires_grad()) {
    detail::Node* o = out.node();
    std::vector<Tensor> ins(parts.begin(), parts.end());
    out.node()->backward = [o, ins = std::move(ins), axis] {
      std::size_t pos = 0;
      for (const Tensor& p : ins) {
        if (axis == 0) {
          if (p.requires_grad()) p.node()->accumulate_expr(o->grad.middleRows(pos, p.rows()));
          pos += p.rows();
        } else {
          if (p.requires_grad()) p.node()->accumulate_expr(o->grad.middleCols(pos, p.cols()));
          pos += p.cols();
        }
      }
    };
  }
  return out;
}

Tensor Tape::slice(const Tensor& a, int axis, std::size_t begin, std::size_t length) {
  const std::size_t extent = axis == 0 ? a.rows() : a.cols();
  if ((axis != 0 && axis != 1) || begin + length > extent) shape_error("slice", {&a});
  Matrix v = axis == 0 ? Matrix(a.value().middleRows(begin, length))
                       : Matrix(a.value().middleCols(begin, length));
  Tensor out = make(std::move(v), needs_grad({&a}));
  if (out.requires_grad()) {
    detail::Node* o = out.node();
    out.node()->backward = [o, a, axis, begin, length] {
      detail::Node* n = a.node();
      if (n->grad.size() == 0) n->grad = Matrix::Zero(a.rows(), a.cols());
      if (axis == 0) {
        n->grad.middleRows(begin, length) += o->grad;
      } else {
        n->grad.middleCols(begin, length) += o->grad;
      }
    };
  }
  return out;
}

Tensor Tape::embedding_gather(const Tensor& table, std::span<const int> ids) {
  Matrix v(ids.size(), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= table.rows()) {
      fail_usage("embedding_gather: id " + std::to_string(ids[i]) + " out of range for " +
                     shape_str(table),
                 "embedding_gather");
    }
    v.row(i) = table.value().row(ids[i]);
  }
  Tensor out = make(std::move(v), needs_grad({&table}));
  if (out.requires_grad()) {
    detail::Node* o = out.node();
    std::vector<int> idv(ids.begin(), ids.end());
    out.node()->backward = [o, table, idv = std::move(idv)] {
      detail::Node* n = table.node();
      if (n->grad.size() == 0) n->grad = Matrix::Zero(table.rows(), table.cols());
      for (std::size_t i = 0; i < idv.size(); ++i) n->grad.row(idv[i]) += o->grad.row(i);
    };
  }
  return out;
}

Tensor Tape::softmax_rows(const Tensor& a, double scale, bool causal, std::size_t offset) {
  const Eigen::Index n = a.value().rows(), m = a.value().cols();
  Matrix y = Matrix::Zero(n, m);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Index width =
        causal ? std::min<Eigen::Index>(m, i + 1 + static_cast<Eigen::Index>(offset)) : m;
    auto src = a.value().row(i).head(width);
    const double mx = src.maxCoeff();
    auto dst = y.row(i).head(width);
    dst = ((src.array() - mx) * scale).exp().matrix();
    dst /= dst.sum();
  }
  Tensor out = make(std::move(y), needs_grad({&a}));
  if (out.requires_grad()) {
    detail::Node* o = out.node();
    out.node()->backward = [o, a, scale] {
      const Matrix& y = o->value;
      Eigen::VectorXd dots = o->grad.cwiseProduct(y).rowwise().sum();
      Matrix g = (o->grad.colwise() - dots).cwiseProduct(y) * scale;
      a.node()->accumulate(g);
    };
  }
  return out;
}

Tensor Tape::elementwise(const Tensor& x, Matrix value, Matrix derivative) {
  Tensor out = make(std::move(value), needs_grad({&x}));
  if (out.requires_grad()) {
    detail::Node* o = out.node();
    out.node()->backward = [o, x, d = std::move(derivative)] {
      x.node()->accumulate_expr(o->grad.cwiseProduct(d));
    };
  }
  return out;
}

Tensor Tape::sigmoid(const Tensor& a) {
  Matrix y = a.value().unaryExpr([](double v) {
    if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
  });
  Matrix d = y.array() * (1.0 - y.array());
  return elementwise(a, std::move(y), std::move(d));
}

Tensor Tape::log(const Tensor& a) {
  Matrix y = a.value().array().log();
  Matrix d = a.value().array().inverse();
  return elementwise(a, std::move(y), std::move(d));
}

Tensor Tape::exp(const Tensor& a) {
  Matrix y = a.value().array().exp();
  Matrix d = y;
  return elementwise(a, std::move(y), std::move(d));
}

Tensor Tape::gelu(const Tensor& a) {
  // tanh approximation
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double k = 0.044715;
  const Matrix& x = a.value();
  Matrix y(x.rows(), x.cols()), d(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double v = x.data()[i];
    const double u = c * (v + k * v * v * v);
    const double t = std::tanh(u);
    y.data()[i] = 0.5 * v * (1.0 + t);
    d.data()[i] = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * c * (1.0 + 3.0 * k * v * v);
  }
  return elementwise(a, std::move(y), std::move(d));
}

Tensor Tape::layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const Eigen::Index n = x.value().rows(), m = x.value().cols();
  if (gain.rows() != 1 || bias.rows() != 1 || gain.cols() != static_cast<std::size_t>(m) ||
      bias.cols() != static_cast<std::size_t>(m)) {
    shape_error("layer_norm", {&x, &gain, &bias});
  }
  Matrix xhat(n, m);
  Eigen::VectorXd inv_std(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mu = x.value().row(i).mean();
    auto centered = x.value().row(i).array() - mu;
    const double var = centered.square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (centered * inv_std(i)).matrix();
  }
  Matrix y = xhat.array().rowwise() * gain.value().row(0).array();
  y.rowwise() += bias.value().row(0);
  Tensor out = make(std::move(y), needs_grad({&x, &gain, &bias}));
  if (out.requires_grad()) {
    detail::Node* o = out.node();
    out.node()->backward = [o, x, gain, bias, xhat = std::move(xhat),
                            inv_std = std::move(inv_std)] {
      const Matrix& gy = o->grad;
      if (gain.requires_grad()) gain.node()->accumulate_expr(gy.cwiseProduct(xhat).colwise().sum());
      if (bias.requires_grad()) bias.node()->accumulate_expr(gy.colwise().sum());
      if (x.requires_grad()) {
        Matrix gxhat = gy.array().rowwise() * gain.value().row(0).array();
        const double m = static_cast<double>(gxhat.cols());
        Eigen::VectorXd mean_g = gxhat.rowwise().sum() / m;
        Eigen::VectorXd mean_gx = gxhat.cwiseProduct(xhat).rowwise().sum() / m;
        Matrix gx = gxhat;
        gx.colwise() -= mean_g;
        gx -= (xhat.array().colwise() * mean_gx.array()).matrix();
        gx = gx.array().colwise() * inv_std.array();
        x.node()->accumulate(gx);
      }
    };
  }
  return out;
}

Tensor Tape::cross_entropy_from_logits(const Tensor& logits, std::span<const int> targets) {
  const Eigen::Index n = logits.value().rows(), v = logits.value().cols();
  if (targets.size() != static_cast<std::size_t>(n)) {
    fail_usage("cross_entropy_from_logits: " + std::to_string(targets.size()) +
                   " targets for " + shape_str(logits),
               "cross_entropy_from_logits");
  }
  Matrix probs(n, v);
  Matrix loss = Matrix::Zero(n, 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    auto row = logits.value().row(i);
    const double mx = row.maxCoeff();
    probs.row(i) = (row.array() - mx).exp().matrix();
    const double z = probs.row(i).sum();
    probs.row(i) /= z;
    const int t = targets[i];
    if (t >= v) fail_usage("cross_entropy_from_logits: target out of range", "cross_entropy");
    if (t >= 0) loss(i, 0) = -(row(t) - mx - std::log(z));
  }
  Tensor out = make(std::move(loss), needs_grad({&logits}));
  if (out.requires_grad()) {
    detail::Node* o = out.node();
    std::vector<int> tv(targets.begin(), targets.end());
    out.node()->backward = [o, logits, probs = std::move(probs), tv = std::move(tv)] {
      Matrix g = probs;
      for (std::size_t i = 0; i < tv.size(); ++i) {
        if (tv[i] < 0) {
          g.row(i).setZero();
          continue;
        }
        g(i, tv[i]) -= 1.0;
        g.row(i) *= o->grad(i, 0);
      }
      logits.node()->accumulate(g);
    };
  }
  return out;
}

Tensor Tape::sum(const Tensor& a) {
  Matrix v(1, 1);
  v(0, 0) = a.value().sum();
  Tensor out = make(std::move(v), needs_grad({&a}));
  if (out.requires_grad()) {
    detail::Node* o = out.node();
    out.node()->backward = [o, a] {
      a.node()->accumulate(Matrix::Constant(a.rows(), a.cols(), o->grad(0, 0)));
    };
  }
  return out;
}

Tensor Tape::mean(const Tensor& a) {
  const double count = static_cast<double>(a.value().size());
  if (count == 0) fail_usage("mean of empty tensor", "mean");
  return scalar_mul(sum(a), 1.0 / count);
}

Tensor Tape::straight_through(const Tensor& x, Matrix forward) {
  if (forward.rows() != x.value().rows() || forward.cols() != x.value().cols()) {
    fail_usage("straight_through: forward value shape mismatch", "straight_through");
  }
  Tensor out = make(std::move(forward), needs_grad({&x}));
  if (out.requires_grad()) {
    detail::Node* o = out.node();
    out.node()->backward = [o, x] { x.node()->accumulate(o->grad); };
  }
  return out;
}

void Tape::backward(const Tensor& loss) {
  if (loss.value().size() != 1) {
    fail_usage("backward: loss must be scalar, got " + shape_str(loss), "backward");
  }
  if (!record_) fail_usage("backward on a non-recording tape", "backward");
  for (Tensor& t : nodes_) t.zero_grad();
  if (!loss.requires_grad()) return;
  loss.node()->grad = Matrix::Ones(1, 1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    detail::Node* n = it->node();
    if (n->backward && n->grad.size() != 0) n->backward();
  }
}

void AdamState::init(std::span<const Tensor> params) {
  m.clear();
  v.clear();
  for (const Tensor& p : params) {
    m.push_back(Matrix::Zero(p.rows(), p.cols()));
    v.push_back(Matrix::Zero(p.rows(), p.cols()));
  }
  step = 0;
}

void adam_step(std::span<Tensor> params, AdamState& state, const AdamConfig& cfg) {
  if (state.m.size() != params.size()) fail_usage("adam_step: state does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.m[i].rows() != params[i].value().rows() ||
        state.m[i].cols() != params[i].value().cols()) {
      fail_usage("adam_step: state shape mismatch for parameter " + std::to_string(i));
    }
    if (params[i].has_grad() && !params[i].grad().allFinite()) {
      fail_numerical("adam_step: non-finite gradient for parameter " + std::to_string(i));
    }
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix& m = state.m[i];
    Matrix& v = state.v[i];
    if (params[i].has_grad()) {
      const Matrix& g = params[i].grad();
      m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
      v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.cwiseProduct(g);
    } else {
      m *= cfg.beta1;
      v *= cfg.beta2;
    }
    auto update = (m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg.eps);
    params[i].mutable_value().array() -= cfg.lr * update;
  }
}

double clip_grad_norm(std::span<Tensor> params, double max_norm) {
  double sq = 0.0;
  for (const Tensor& p : params) {
    if (p.has_grad()) sq += p.grad().squaredNorm();
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (Tensor& p : params) {
      if (p.has_grad()) p.node()->grad *= s;
    }
  }
  return norm;
}

}  // namespace mwpgen
