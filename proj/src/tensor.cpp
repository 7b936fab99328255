#include "cpkd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <unordered_set>

namespace cpkd {

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> back;
  bool requires_grad{false};
  bool backward_done{false};
  const char* opname{"leaf"};
};

}  // namespace detail

using detail::Node;

struct ValueAccess {
  static const std::shared_ptr<Node>& node(const Value& v) { return v.n_; }
  static Value make(std::shared_ptr<Node> n) { return Value(std::move(n)); }
};

namespace {

std::vector<double>& gref(Node& n) {
  if (n.grad.empty()) n.grad.assign(n.data.size(), 0.0);
  return n.grad;
}

std::shared_ptr<Node> make_node(const char* op, Shape shape, std::size_t fill_size) {
  auto n = std::make_shared<Node>();
  n->opname = op;
  n->shape = std::move(shape);
  n->data.assign(fill_size, 0.0);
  return n;
}

const std::shared_ptr<Node>& need(const Value& v, const char* op) {
  const auto& n = ValueAccess::node(v);
  if (!n) throw ValidationError(std::string(op) + ": undefined value");
  return n;
}

// Normalized 2-D view used for broadcasting rank<=2 shapes.
struct Dim2 {
  std::size_t r{1}, c{1};
};

Dim2 as2d(const Shape& s, const char* op) {
  if (s.size() == 1) return {1, s[0]};
  if (s.size() == 2) return {s[0], s[1]};
  throw ValidationError(std::string(op) + ": rank " + std::to_string(s.size()) +
                        " not broadcastable, shape " + shape_str(s));
}

struct Bcast {
  std::size_t R, C;    // output dims
  Dim2 a, b;           // input dims
  bool out_rank2;
};

Bcast broadcast_dims(const Shape& sa, const Shape& sb, const char* op) {
  Dim2 a = as2d(sa, op), b = as2d(sb, op);
  auto merge = [&](std::size_t x, std::size_t y) -> std::size_t {
    if (x == y || y == 1) return x;
    if (x == 1) return y;
    throw ValidationError(std::string(op) + ": shapes " + shape_str(sa) + " and " + shape_str(sb) +
                          " are not broadcastable");
  };
  Bcast bc;
  bc.R = merge(a.r, b.r);
  bc.C = merge(a.c, b.c);
  bc.a = a;
  bc.b = b;
  bc.out_rank2 = sa.size() == 2 || sb.size() == 2;
  return bc;
}

template <class F, class DA, class DB>
Value binary_ew(const Value& va, const Value& vb, const char* op, F f, DA dfa, DB dfb) {
  const auto& a = need(va, op);
  const auto& b = need(vb, op);
  std::shared_ptr<Node> n;
  if (a->shape == b->shape) {
    // Equal shapes of any rank: direct elementwise.
    n = make_node(op, a->shape, a->data.size());
    const double* pa = a->data.data();
    const double* pb = b->data.data();
    double* po = n->data.data();
    for (std::size_t i = 0; i < n->data.size(); ++i) po[i] = f(pa[i], pb[i]);
    n->inputs = {a, b};
    n->requires_grad = a->requires_grad || b->requires_grad;
    if (n->requires_grad) {
      n->back = [f, dfa, dfb](Node& self) {
        Node& A = *self.inputs[0];
        Node& B = *self.inputs[1];
        const double* pa = A.data.data();
        const double* pb = B.data.data();
        const double* g = self.grad.data();
        if (A.requires_grad) {
          double* ga = gref(A).data();
          for (std::size_t i = 0; i < self.data.size(); ++i) ga[i] += dfa(pa[i], pb[i]) * g[i];
        }
        if (B.requires_grad) {
          double* gb = gref(B).data();
          for (std::size_t i = 0; i < self.data.size(); ++i) gb[i] += dfb(pa[i], pb[i]) * g[i];
        }
      };
    }
    return ValueAccess::make(std::move(n));
  }

  Bcast bc = broadcast_dims(a->shape, b->shape, op);
  Shape out_shape = bc.out_rank2 ? Shape{bc.R, bc.C} : Shape{bc.C};
  n = make_node(op, out_shape, bc.R * bc.C);
  {
    const double* pa = a->data.data();
    const double* pb = b->data.data();
    double* po = n->data.data();
    for (std::size_t i = 0; i < bc.R; ++i) {
      std::size_t ia = (bc.a.r == 1 ? 0 : i) * bc.a.c;
      std::size_t ib = (bc.b.r == 1 ? 0 : i) * bc.b.c;
      for (std::size_t j = 0; j < bc.C; ++j) {
        double av = pa[ia + (bc.a.c == 1 ? 0 : j)];
        double bv = pb[ib + (bc.b.c == 1 ? 0 : j)];
        po[i * bc.C + j] = f(av, bv);
      }
    }
  }
  n->inputs = {a, b};
  n->requires_grad = a->requires_grad || b->requires_grad;
  if (n->requires_grad) {
    n->back = [bc, dfa, dfb](Node& self) {
      Node& A = *self.inputs[0];
      Node& B = *self.inputs[1];
      const double* pa = A.data.data();
      const double* pb = B.data.data();
      const double* g = self.grad.data();
      double* ga = A.requires_grad ? gref(A).data() : nullptr;
      double* gb = B.requires_grad ? gref(B).data() : nullptr;
      for (std::size_t i = 0; i < bc.R; ++i) {
        std::size_t ia = (bc.a.r == 1 ? 0 : i) * bc.a.c;
        std::size_t ib = (bc.b.r == 1 ? 0 : i) * bc.b.c;
        for (std::size_t j = 0; j < bc.C; ++j) {
          std::size_t ka = ia + (bc.a.c == 1 ? 0 : j);
          std::size_t kb = ib + (bc.b.c == 1 ? 0 : j);
          double gv = g[i * bc.C + j];
          if (ga) ga[ka] += dfa(pa[ka], pb[kb]) * gv;
          if (gb) gb[kb] += dfb(pa[ka], pb[kb]) * gv;
        }
      }
    };
  }
  return ValueAccess::make(std::move(n));
}

template <class F, class DF>
Value unary_ew(const Value& va, const char* op, F f, DF df) {
  const auto& a = need(va, op);
  auto n = make_node(op, a->shape, a->data.size());
  const double* pa = a->data.data();
  double* po = n->data.data();
  for (std::size_t i = 0; i < n->data.size(); ++i) po[i] = f(pa[i]);
  n->inputs = {a};
  n->requires_grad = a->requires_grad;
  if (n->requires_grad) {
    n->back = [df](Node& self) {
      Node& A = *self.inputs[0];
      const double* pa = A.data.data();
      const double* py = self.data.data();
      const double* g = self.grad.data();
      double* ga = gref(A).data();
      for (std::size_t i = 0; i < self.data.size(); ++i) ga[i] += df(pa[i], py[i]) * g[i];
    };
  }
  return ValueAccess::make(std::move(n));
}

double stable_sigmoid(double x) {
  if (x >= 0.0) {
    double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

// --- Value -----------------------------------------------------------------

std::string shape_str(const Shape& s) {
  std::string r = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) r += ",";
    r += std::to_string(s[i]);
  }
  return r + "]";
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

Value Value::constant(std::vector<double> data, Shape shape) {
  if (shape.empty() || shape_numel(shape) != data.size())
    throw ValidationError("Value::constant: data size " + std::to_string(data.size()) +
                          " does not match shape " + shape_str(shape));
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  return ValueAccess::make(std::move(n));
}

Value Value::variable(std::vector<double> data, Shape shape) {
  Value v = constant(std::move(data), std::move(shape));
  ValueAccess::node(v)->requires_grad = true;
  return v;
}

Value Value::scalar(double x) { return constant({x}, {1}); }

Value Value::from_mat(const Mat& m, bool requires_grad) {
  if (m.rows == 0 || m.cols == 0) throw ValidationError("Value::from_mat: empty matrix");
  Value v = constant(m.v, {m.rows, m.cols});
  ValueAccess::node(v)->requires_grad = requires_grad;
  return v;
}

const Shape& Value::shape() const { return need(*this, "shape")->shape; }
std::size_t Value::numel() const { return need(*this, "numel")->data.size(); }
const std::vector<double>& Value::data() const { return need(*this, "data")->data; }

double Value::item() const {
  const auto& n = need(*this, "item");
  if (n->data.size() != 1)
    throw ValidationError("item: value has " + std::to_string(n->data.size()) + " elements, expected 1");
  return n->data[0];
}

Mat Value::to_mat() const {
  const auto& n = need(*this, "to_mat");
  if (n->shape.size() != 2) throw ValidationError("to_mat: shape " + shape_str(n->shape) + " is not rank-2");
  Mat m(n->shape[0], n->shape[1]);
  m.v = n->data;
  return m;
}

bool Value::requires_grad() const { return need(*this, "requires_grad")->requires_grad; }

const std::vector<double>& Value::grad() const {
  const auto& n = need(*this, "grad");
  if (!n->requires_grad) throw ValidationError("grad: value does not track gradients");
  if (n->grad.empty()) throw ValidationError("grad: backward has not populated a gradient for this value");
  return n->grad;
}

std::vector<double> Value::grad_or_zero() const {
  const auto& n = need(*this, "grad_or_zero");
  if (n->grad.empty()) return std::vector<double>(n->data.size(), 0.0);
  return n->grad;
}

// --- elementwise -------------------------------------------------------------

Value add(const Value& a, const Value& b) {
  return binary_ew(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Value sub(const Value& a, const Value& b) {
  return binary_ew(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Value mul(const Value& a, const Value& b) {
  return binary_ew(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Value divide(const Value& a, const Value& b) {
  return binary_ew(
      a, b, "div", [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Value neg(const Value& a) {
  return unary_ew(
      a, "neg", [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Value affine(const Value& a, double scale, double shift) {
  return unary_ew(
      a, "affine", [scale, shift](double x) { return scale * x + shift; },
      [scale](double, double) { return scale; });
}

Value exp_v(const Value& a) {
  return unary_ew(
      a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Value log_v(const Value& a) {
  const auto& n = need(a, "log");
  for (std::size_t i = 0; i < n->data.size(); ++i) {
    if (!(n->data[i] > 0.0)) {
      char buf[96];
      std::snprintf(buf, sizeof(buf), "log: non-positive element %g at index %zu", n->data[i], i);
      throw ValidationError(buf);
    }
  }
  return unary_ew(
      a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Value sigmoid(const Value& a) {
  return unary_ew(
      a, "sigmoid", [](double x) { return stable_sigmoid(x); },
      [](double, double y) { return y * (1.0 - y); });
}

Value tanh_v(const Value& a) {
  return unary_ew(
      a, "tanh", [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Value softplus(const Value& a) {
  return unary_ew(
      a, "softplus", [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); },
      [](double x, double) { return stable_sigmoid(x); });
}

Value clamp(const Value& a, double lo, double hi) {
  if (!(lo <= hi)) throw ValidationError("clamp: lo > hi");
  return unary_ew(
      a, "clamp", [lo, hi](double x) { return std::min(std::max(x, lo), hi); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Value max_const(const Value& a, double c) { return clamp(a, c, std::numeric_limits<double>::infinity()); }

Value min_const(const Value& a, double c) { return clamp(a, -std::numeric_limits<double>::infinity(), c); }

// --- matmul / conv -----------------------------------------------------------

Value matmul(const Value& va, const Value& vb) {
  const auto& a = need(va, "matmul");
  const auto& b = need(vb, "matmul");
  if (a->shape.size() != 2 || b->shape.size() != 2 || a->shape[1] != b->shape[0])
    throw ValidationError("matmul: incompatible shapes " + shape_str(a->shape) + " and " + shape_str(b->shape));
  std::size_t m = a->shape[0], k = a->shape[1], nn = b->shape[1];
  auto n = make_node("matmul", {m, nn}, m * nn);
  {
    const double* pa = a->data.data();
    const double* pb = b->data.data();
    double* po = n->data.data();
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t kk = 0; kk < k; ++kk) {
        double av = pa[i * k + kk];
        const double* br = pb + kk * nn;
        double* orow = po + i * nn;
        for (std::size_t j = 0; j < nn; ++j) orow[j] += av * br[j];
      }
    }
  }
  n->inputs = {a, b};
  n->requires_grad = a->requires_grad || b->requires_grad;
  if (n->requires_grad) {
    n->back = [m, k, nn](Node& self) {
      Node& A = *self.inputs[0];
      Node& B = *self.inputs[1];
      const double* g = self.grad.data();
      if (A.requires_grad) {
        double* ga = gref(A).data();
        const double* pb = B.data.data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t kk = 0; kk < k; ++kk) {
            double acc = 0.0;
            const double* br = pb + kk * nn;
            const double* gr = g + i * nn;
            for (std::size_t j = 0; j < nn; ++j) acc += gr[j] * br[j];
            ga[i * k + kk] += acc;
          }
      }
      if (B.requires_grad) {
        double* gb = gref(B).data();
        const double* pa = A.data.data();
        for (std::size_t i = 0; i < m; ++i) {
          const double* gr = g + i * nn;
          for (std::size_t kk = 0; kk < k; ++kk) {
            double av = pa[i * k + kk];
            double* br = gb + kk * nn;
            for (std::size_t j = 0; j < nn; ++j) br[j] += av * gr[j];
          }
        }
      }
    };
  }
  return ValueAccess::make(std::move(n));
}

Value conv1d(const Value& vx, const Value& vw, std::size_t dilation) {
  const auto& x = need(vx, "conv1d");
  const auto& w = need(vw, "conv1d");
  if (x->shape.size() != 2 || w->shape.size() != 3 || w->shape[1] != x->shape[1])
    throw ValidationError("conv1d: incompatible shapes " + shape_str(x->shape) + " and " + shape_str(w->shape));
  if (dilation == 0) throw ValidationError("conv1d: dilation must be positive");
  std::size_t T = x->shape[0], cin = x->shape[1];
  std::size_t K = w->shape[0], cout = w->shape[2];
  auto n = make_node("conv1d", {T, cout}, T * cout);
  long center = static_cast<long>((K - 1) / 2);
  long dil = static_cast<long>(dilation);
  {
    const double* px = x->data.data();
    const double* pw = w->data.data();
    double* po = n->data.data();
    for (std::size_t t = 0; t < T; ++t) {
      double* orow = po + t * cout;
      for (std::size_t j = 0; j < K; ++j) {
        long tt = static_cast<long>(t) + (static_cast<long>(j) - center) * dil;
        if (tt < 0 || tt >= static_cast<long>(T)) continue;
        const double* xr = px + static_cast<std::size_t>(tt) * cin;
        const double* wj = pw + j * cin * cout;
        for (std::size_t ci = 0; ci < cin; ++ci) {
          double xv = xr[ci];
          const double* wr = wj + ci * cout;
          for (std::size_t co = 0; co < cout; ++co) orow[co] += xv * wr[co];
        }
      }
    }
  }
  n->inputs = {x, w};
  n->requires_grad = x->requires_grad || w->requires_grad;
  if (n->requires_grad) {
    n->back = [T, cin, K, cout, center, dil](Node& self) {
      Node& X = *self.inputs[0];
      Node& W = *self.inputs[1];
      const double* g = self.grad.data();
      const double* px = X.data.data();
      const double* pw = W.data.data();
      double* gx = X.requires_grad ? gref(X).data() : nullptr;
      double* gw = W.requires_grad ? gref(W).data() : nullptr;
      for (std::size_t t = 0; t < T; ++t) {
        const double* gr = g + t * cout;
        for (std::size_t j = 0; j < K; ++j) {
          long tt = static_cast<long>(t) + (static_cast<long>(j) - center) * dil;
          if (tt < 0 || tt >= static_cast<long>(T)) continue;
          std::size_t off = static_cast<std::size_t>(tt) * cin;
          const double* wj = pw + j * cin * cout;
          for (std::size_t ci = 0; ci < cin; ++ci) {
            const double* wr = wj + ci * cout;
            if (gx) {
              double acc = 0.0;
              for (std::size_t co = 0; co < cout; ++co) acc += gr[co] * wr[co];
              gx[off + ci] += acc;
            }
            if (gw) {
              double xv = px[off + ci];
              double* gwr = gw + j * cin * cout + ci * cout;
              for (std::size_t co = 0; co < cout; ++co) gwr[co] += xv * gr[co];
            }
          }
        }
      }
    };
  }
  return ValueAccess::make(std::move(n));
}

// --- reductions ----------------------------------------------------------------

namespace {

Value reduce_axis(const Value& va, int axis, bool take_mean, const char* op) {
  const auto& a = need(va, op);
  if (a->shape.size() == 1) {
    if (axis != 0) throw ValidationError(std::string(op) + ": axis out of range for rank-1");
    return take_mean ? mean_all(va) : sum_all(va);
  }
  if (a->shape.size() != 2 || (axis != 0 && axis != 1))
    throw ValidationError(std::string(op) + ": need rank-2 and axis 0/1, got shape " + shape_str(a->shape));
  std::size_t R = a->shape[0], C = a->shape[1];
  std::size_t out_n = axis == 1 ? R : C;
  double scale = take_mean ? 1.0 / static_cast<double>(axis == 1 ? C : R) : 1.0;
  auto n = make_node(op, {out_n}, out_n);
  const double* pa = a->data.data();
  double* po = n->data.data();
  for (std::size_t i = 0; i < R; ++i)
    for (std::size_t j = 0; j < C; ++j) po[axis == 1 ? i : j] += pa[i * C + j];
  if (take_mean)
    for (std::size_t i = 0; i < out_n; ++i) po[i] *= scale;
  n->inputs = {a};
  n->requires_grad = a->requires_grad;
  if (n->requires_grad) {
    n->back = [R, C, axis, scale](Node& self) {
      Node& A = *self.inputs[0];
      double* ga = gref(A).data();
      const double* g = self.grad.data();
      for (std::size_t i = 0; i < R; ++i)
        for (std::size_t j = 0; j < C; ++j) ga[i * C + j] += g[axis == 1 ? i : j] * scale;
    };
  }
  return ValueAccess::make(std::move(n));
}

Value reduce_all(const Value& va, bool take_mean, const char* op) {
  const auto& a = need(va, op);
  double scale = take_mean ? 1.0 / static_cast<double>(a->data.size()) : 1.0;
  auto n = make_node(op, {1}, 1);
  double acc = 0.0;
  for (double x : a->data) acc += x;
  n->data[0] = acc * scale;
  n->inputs = {a};
  n->requires_grad = a->requires_grad;
  if (n->requires_grad) {
    n->back = [scale](Node& self) {
      Node& A = *self.inputs[0];
      double* ga = gref(A).data();
      double g = self.grad[0] * scale;
      for (std::size_t i = 0; i < A.data.size(); ++i) ga[i] += g;
    };
  }
  return ValueAccess::make(std::move(n));
}

}  // namespace

Value sum(const Value& a, int axis) { return reduce_axis(a, axis, false, "sum"); }
Value mean(const Value& a, int axis) { return reduce_axis(a, axis, true, "mean"); }
Value sum_all(const Value& a) { return reduce_all(a, false, "sum_all"); }
Value mean_all(const Value& a) { return reduce_all(a, true, "mean_all"); }

Value softmax(const Value& va, int axis) {
  const auto& a = need(va, "softmax");
  if (a->shape.size() != 2 || (axis != 0 && axis != 1))
    throw ValidationError("softmax: need rank-2 and axis 0/1, got shape " + shape_str(a->shape));
  std::size_t R = a->shape[0], C = a->shape[1];
  std::size_t lanes = axis == 1 ? R : C;    // independent distributions
  std::size_t width = axis == 1 ? C : R;    // elements per distribution
  auto at = [&](std::size_t lane, std::size_t k) { return axis == 1 ? lane * C + k : k * C + lane; };
  auto n = make_node("softmax", a->shape, a->data.size());
  const double* pa = a->data.data();
  double* po = n->data.data();
  for (std::size_t l = 0; l < lanes; ++l) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < width; ++k) m = std::max(m, pa[at(l, k)]);
    double s = 0.0;
    for (std::size_t k = 0; k < width; ++k) {
      double e = std::exp(pa[at(l, k)] - m);
      po[at(l, k)] = e;
      s += e;
    }
    for (std::size_t k = 0; k < width; ++k) po[at(l, k)] /= s;
  }
  n->inputs = {a};
  n->requires_grad = a->requires_grad;
  if (n->requires_grad) {
    n->back = [R, C, axis](Node& self) {
      Node& A = *self.inputs[0];
      double* ga = gref(A).data();
      const double* y = self.data.data();
      const double* g = self.grad.data();
      std::size_t lanes = axis == 1 ? R : C;
      std::size_t width = axis == 1 ? C : R;
      auto at = [&](std::size_t lane, std::size_t k) { return axis == 1 ? lane * C + k : k * C + lane; };
      for (std::size_t l = 0; l < lanes; ++l) {
        double dot = 0.0;
        for (std::size_t k = 0; k < width; ++k) dot += g[at(l, k)] * y[at(l, k)];
        for (std::size_t k = 0; k < width; ++k) {
          std::size_t idx = at(l, k);
          ga[idx] += y[idx] * (g[idx] - dot);
        }
      }
    };
  }
  return ValueAccess::make(std::move(n));
}

Value logsumexp(const Value& va, int axis) {
  const auto& a = need(va, "logsumexp");
  if (a->shape.size() != 2 || (axis != 0 && axis != 1))
    throw ValidationError("logsumexp: need rank-2 and axis 0/1, got shape " + shape_str(a->shape));
  std::size_t R = a->shape[0], C = a->shape[1];
  std::size_t lanes = axis == 1 ? R : C;
  std::size_t width = axis == 1 ? C : R;
  auto at = [&](std::size_t lane, std::size_t k) { return axis == 1 ? lane * C + k : k * C + lane; };
  auto n = make_node("logsumexp", {lanes}, lanes);
  const double* pa = a->data.data();
  double* po = n->data.data();
  for (std::size_t l = 0; l < lanes; ++l) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < width; ++k) m = std::max(m, pa[at(l, k)]);
    double s = 0.0;
    for (std::size_t k = 0; k < width; ++k) s += std::exp(pa[at(l, k)] - m);
    po[l] = m + std::log(s);
  }
  n->inputs = {a};
  n->requires_grad = a->requires_grad;
  if (n->requires_grad) {
    n->back = [R, C, axis](Node& self) {
      Node& A = *self.inputs[0];
      double* ga = gref(A).data();
      const double* x = A.data.data();
      const double* y = self.data.data();
      const double* g = self.grad.data();
      std::size_t lanes = axis == 1 ? R : C;
      std::size_t width = axis == 1 ? C : R;
      auto at = [&](std::size_t lane, std::size_t k) { return axis == 1 ? lane * C + k : k * C + lane; };
      for (std::size_t l = 0; l < lanes; ++l)
        for (std::size_t k = 0; k < width; ++k) {
          std::size_t idx = at(l, k);
          ga[idx] += std::exp(x[idx] - y[l]) * g[l];
        }
    };
  }
  return ValueAccess::make(std::move(n));
}

Value logsumexp_all(const Value& va) {
  const auto& a = need(va, "logsumexp_all");
  if (a->data.empty()) throw ValidationError("logsumexp_all: empty input");
  auto n = make_node("logsumexp_all", {1}, 1);
  const double* pa = a->data.data();
  double m = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < a->data.size(); ++i) m = std::max(m, pa[i]);
  double s = 0.0;
  for (std::size_t i = 0; i < a->data.size(); ++i) s += std::exp(pa[i] - m);
  n->data[0] = m + std::log(s);
  n->inputs = {a};
  n->requires_grad = a->requires_grad;
  if (n->requires_grad) {
    n->back = [](Node& self) {
      Node& A = *self.inputs[0];
      double* ga = gref(A).data();
      const double* x = A.data.data();
      double y = self.data[0];
      double g = self.grad[0];
      for (std::size_t i = 0; i < A.data.size(); ++i) ga[i] += std::exp(x[i] - y) * g;
    };
  }
  return ValueAccess::make(std::move(n));
}

// --- structure ops ---------------------------------------------------------------

Value concat(std::span<const Value> parts, int axis) {
  if (parts.empty()) throw ValidationError("concat: no inputs");
  std::vector<std::shared_ptr<Node>> ins;
  ins.reserve(parts.size());
  for (const auto& p : parts) ins.push_back(need(p, "concat"));
  std::size_t rank = ins[0]->shape.size();
  for (const auto& in : ins)
    if (in->shape.size() != rank)
      throw ValidationError("concat: mixed ranks " + shape_str(ins[0]->shape) + " and " + shape_str(in->shape));
  if (rank == 1) {
    if (axis != 0) throw ValidationError("concat: rank-1 supports axis 0 only");
    std::size_t total = 0;
    for (const auto& in : ins) total += in->shape[0];
    auto n = make_node("concat", {total}, total);
    std::size_t off = 0;
    for (const auto& in : ins) {
      std::copy(in->data.begin(), in->data.end(), n->data.begin() + off);
      off += in->data.size();
    }
    n->inputs = ins;
    for (const auto& in : ins) n->requires_grad = n->requires_grad || in->requires_grad;
    if (n->requires_grad) {
      n->back = [](Node& self) {
        std::size_t off = 0;
        for (auto& in : self.inputs) {
          if (in->requires_grad) {
            double* gi = gref(*in).data();
            for (std::size_t i = 0; i < in->data.size(); ++i) gi[i] += self.grad[off + i];
          }
          off += in->data.size();
        }
      };
    }
    return ValueAccess::make(std::move(n));
  }
  if (rank != 2 || (axis != 0 && axis != 1))
    throw ValidationError("concat: need rank-1/2 and axis 0/1");
  std::size_t fixed = axis == 0 ? ins[0]->shape[1] : ins[0]->shape[0];
  std::size_t total = 0;
  for (const auto& in : ins) {
    std::size_t f = axis == 0 ? in->shape[1] : in->shape[0];
    if (f != fixed)
      throw ValidationError("concat: shapes " + shape_str(ins[0]->shape) + " and " + shape_str(in->shape) +
                            " disagree off the concat axis");
    total += axis == 0 ? in->shape[0] : in->shape[1];
  }
  Shape out = axis == 0 ? Shape{total, fixed} : Shape{fixed, total};
  auto n = make_node("concat", out, total * fixed);
  if (axis == 0) {
    std::size_t off = 0;
    for (const auto& in : ins) {
      std::copy(in->data.begin(), in->data.end(), n->data.begin() + off);
      off += in->data.size();
    }
  } else {
    std::size_t col_off = 0;
    for (const auto& in : ins) {
      std::size_t w = in->shape[1];
      for (std::size_t i = 0; i < fixed; ++i)
        std::copy(in->data.begin() + i * w, in->data.begin() + (i + 1) * w,
                  n->data.begin() + i * total + col_off);
      col_off += w;
    }
  }
  n->inputs = ins;
  for (const auto& in : ins) n->requires_grad = n->requires_grad || in->requires_grad;
  if (n->requires_grad) {
    n->back = [axis, fixed, total](Node& self) {
      if (axis == 0) {
        std::size_t off = 0;
        for (auto& in : self.inputs) {
          if (in->requires_grad) {
            double* gi = gref(*in).data();
            for (std::size_t i = 0; i < in->data.size(); ++i) gi[i] += self.grad[off + i];
          }
          off += in->data.size();
        }
      } else {
        std::size_t col_off = 0;
        for (auto& in : self.inputs) {
          std::size_t w = in->shape[1];
          if (in->requires_grad) {
            double* gi = gref(*in).data();
            for (std::size_t i = 0; i < fixed; ++i)
              for (std::size_t j = 0; j < w; ++j) gi[i * w + j] += self.grad[i * total + col_off + j];
          }
          col_off += w;
        }
      }
    };
  }
  return ValueAccess::make(std::move(n));
}

Value slice_rows(const Value& va, std::size_t i0, std::size_t i1) {
  const auto& a = need(va, "slice_rows");
  std::size_t rank = a->shape.size();
  if (rank != 1 && rank != 2) throw ValidationError("slice_rows: need rank-1/2");
  std::size_t rows = a->shape[0];
  if (!(i0 < i1 && i1 <= rows))
    throw ValidationError("slice_rows: range [" + std::to_string(i0) + "," + std::to_string(i1) +
                          ") invalid for shape " + shape_str(a->shape));
  std::size_t w = rank == 2 ? a->shape[1] : 1;
  Shape out = rank == 2 ? Shape{i1 - i0, w} : Shape{i1 - i0};
  auto n = make_node("slice_rows", out, (i1 - i0) * w);
  std::copy(a->data.begin() + i0 * w, a->data.begin() + i1 * w, n->data.begin());
  n->inputs = {a};
  n->requires_grad = a->requires_grad;
  if (n->requires_grad) {
    n->back = [i0, w](Node& self) {
      Node& A = *self.inputs[0];
      double* ga = gref(A).data();
      for (std::size_t i = 0; i < self.data.size(); ++i) ga[i0 * w + i] += self.grad[i];
    };
  }
  return ValueAccess::make(std::move(n));
}

Value column(const Value& va, std::size_t j) {
  const auto& a = need(va, "column");
  if (a->shape.size() != 2 || j >= a->shape[1])
    throw ValidationError("column: index " + std::to_string(j) + " invalid for shape " + shape_str(a->shape));
  std::size_t R = a->shape[0], C = a->shape[1];
  auto n = make_node("column", {R}, R);
  for (std::size_t i = 0; i < R; ++i) n->data[i] = a->data[i * C + j];
  n->inputs = {a};
  n->requires_grad = a->requires_grad;
  if (n->requires_grad) {
    n->back = [j, C](Node& self) {
      Node& A = *self.inputs[0];
      double* ga = gref(A).data();
      for (std::size_t i = 0; i < self.data.size(); ++i) ga[i * C + j] += self.grad[i];
    };
  }
  return ValueAccess::make(std::move(n));
}

Value element(const Value& va, std::size_t i, std::size_t j) {
  const auto& a = need(va, "element");
  if (a->shape.size() != 2 || i >= a->shape[0] || j >= a->shape[1])
    throw ValidationError("element: index (" + std::to_string(i) + "," + std::to_string(j) +
                          ") invalid for shape " + shape_str(a->shape));
  std::size_t idx = i * a->shape[1] + j;
  auto n = make_node("element", {1}, 1);
  n->data[0] = a->data[idx];
  n->inputs = {a};
  n->requires_grad = a->requires_grad;
  if (n->requires_grad) {
    n->back = [idx](Node& self) { gref(*self.inputs[0])[idx] += self.grad[0]; };
  }
  return ValueAccess::make(std::move(n));
}

Value element(const Value& va, std::size_t i) {
  const auto& a = need(va, "element");
  if (a->shape.size() != 1 || i >= a->shape[0])
    throw ValidationError("element: index " + std::to_string(i) + " invalid for shape " + shape_str(a->shape));
  auto n = make_node("element", {1}, 1);
  n->data[0] = a->data[i];
  n->inputs = {a};
  n->requires_grad = a->requires_grad;
  if (n->requires_grad) {
    n->back = [i](Node& self) { gref(*self.inputs[0])[i] += self.grad[0]; };
  }
  return ValueAccess::make(std::move(n));
}

Value reshape(const Value& va, Shape shape) {
  const auto& a = need(va, "reshape");
  if (shape.empty() || shape_numel(shape) != a->data.size())
    throw ValidationError("reshape: cannot view " + shape_str(a->shape) + " as " + shape_str(shape));
  auto n = make_node("reshape", std::move(shape), a->data.size());
  n->data = a->data;
  n->inputs = {a};
  n->requires_grad = a->requires_grad;
  if (n->requires_grad) {
    n->back = [](Node& self) {
      Node& A = *self.inputs[0];
      double* ga = gref(A).data();
      for (std::size_t i = 0; i < self.data.size(); ++i) ga[i] += self.grad[i];
    };
  }
  return ValueAccess::make(std::move(n));
}

// --- backward / grad_check ------------------------------------------------------

void backward(const Value& root) {
  const auto& rn = need(root, "backward");
  if (rn->data.size() != 1)
    throw ValidationError("backward: root has " + std::to_string(rn->data.size()) + " elements, expected scalar");
  if (rn->backward_done) throw ValidationError("backward: already run from this root; graphs are single-shot");
  rn->backward_done = true;
  if (!rn->requires_grad) return;  // constant graph: all gradients are zero

  struct Frame {
    Node* n;
    std::size_t next;
  };
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<Frame> stack;
  stack.push_back({rn.get(), 0});
  seen.insert(rn.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.n->inputs.size()) {
      Node* c = f.n->inputs[f.next].get();
      ++f.next;
      if (c->requires_grad && seen.insert(c).second) stack.push_back({c, 0});
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }
  rn->grad.assign(1, 1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->back && !n->grad.empty()) n->back(*n);
  }
}

double grad_check(const std::function<Value(const Value&)>& fn, std::vector<double> point, double step) {
  if (point.empty()) throw ValidationError("grad_check: empty point");
  if (!(step > 0.0)) throw ValidationError("grad_check: step must be positive");
  Shape shape{point.size()};
  Value x = Value::variable(point, shape);
  Value y = fn(x);
  if (y.numel() != 1) throw ValidationError("grad_check: function must return a scalar");
  backward(y);
  std::vector<double> analytic = x.grad_or_zero();

  auto eval = [&](const std::vector<double>& p) {
    double v = fn(Value::constant(p, shape)).item();
    if (!std::isfinite(v)) throw ValidationError("grad_check: non-finite function value");
    return v;
  };
  double max_err = 0.0;
  std::vector<double> p = point;
  for (std::size_t i = 0; i < point.size(); ++i) {
    double keep = p[i];
    p[i] = keep + step;
    double fp = eval(p);
    p[i] = keep - step;
    double fm = eval(p);
    p[i] = keep;
    double numeric = (fp - fm) / (2.0 * step);
    if (!std::isfinite(analytic[i]) || !std::isfinite(numeric))
      throw ValidationError("grad_check: non-finite derivative at coordinate " + std::to_string(i));
    double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric));
    max_err = std::max(max_err, err);
  }
  return max_err;
}

}  // namespace cpkd
