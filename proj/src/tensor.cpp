#include "structlm/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "structlm/errors.hpp"

namespace structlm {

namespace {

std::atomic<std::uint64_t> g_next_seq{1};
thread_local bool t_grad_enabled = true;

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

NodePtr make_leaf(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("tensor data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  node->seq = g_next_seq.fetch_add(1, std::memory_order_relaxed);
  if (requires_grad) node->ensure_grad();
  return node;
}

// Builds an op output. Records history only when some input needs gradients.
Tensor make_result(Shape shape, std::vector<double> data, std::initializer_list<const Tensor*> inputs,
                   std::function<void(Node&)> backward_fn) {
  auto node = make_leaf(std::move(shape), std::move(data), false);
  if (!t_grad_enabled) return Tensor(node);
  bool any = false;
  for (const Tensor* t : inputs) any = any || t->requires_grad();
  if (!any) return Tensor(node);
  node->requires_grad = true;
  node->ensure_grad();
  for (const Tensor* t : inputs) node->parents.push_back(t->node_ptr());
  node->backward = std::move(backward_fn);
  return Tensor(node);
}

Tensor make_result_list(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                        std::function<void(Node&)> backward_fn) {
  auto node = make_leaf(std::move(shape), std::move(data), false);
  if (!t_grad_enabled) return Tensor(node);
  bool any = false;
  for (const Tensor& t : inputs) any = any || t.requires_grad();
  if (!any) return Tensor(node);
  node->requires_grad = true;
  node->ensure_grad();
  for (const Tensor& t : inputs) node->parents.push_back(t.node_ptr());
  node->backward = std::move(backward_fn);
  return Tensor(node);
}

// Parent gradient buffer, or nullptr when that parent needs none.
double* pgrad(Node& self, std::size_t i) {
  Node& p = *self.parents[i];
  if (!p.requires_grad) return nullptr;
  p.ensure_grad();
  return p.grad.data();
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw std::invalid_argument(std::string(op) + ": undefined tensor");
}

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t n = 1;
  std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for shape " + shape_str(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

struct Broadcast {
  Shape out;
  bool same = false;
  std::vector<std::size_t> ia;
  std::vector<std::size_t> ib;
};

Broadcast broadcast(const Shape& a, const Shape& b, const char* op) {
  Broadcast bc;
  if (a == b) {
    bc.out = a;
    bc.same = true;
    return bc;
  }
  const std::size_t rank = std::max(a.size(), b.size());
  Shape pa(rank, 1), pb(rank, 1);
  std::copy(a.begin(), a.end(), pa.begin() + static_cast<std::ptrdiff_t>(rank - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + static_cast<std::ptrdiff_t>(rank - b.size()));
  bc.out.resize(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1) {
      throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                           shape_str(b));
    }
    bc.out[i] = std::max(pa[i], pb[i]);
  }
  std::vector<std::size_t> sa(rank, 0), sb(rank, 0);
  std::size_t stride_a = 1, stride_b = 1;
  for (std::size_t i = rank; i-- > 0;) {
    sa[i] = pa[i] == 1 ? 0 : stride_a;
    sb[i] = pb[i] == 1 ? 0 : stride_b;
    stride_a *= pa[i];
    stride_b *= pb[i];
  }
  const std::size_t total = shape_numel(bc.out);
  bc.ia.resize(total);
  bc.ib.resize(total);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t flat = 0; flat < total; ++flat) {
    bc.ia[flat] = oa;
    bc.ib[flat] = ob;
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < bc.out[d]) break;
      oa -= sa[d] * idx[d];
      ob -= sb[d] * idx[d];
      idx[d] = 0;
    }
  }
  return bc;
}

enum class BinOp { kAdd, kSub, kMul, kDiv };

Tensor binary(const Tensor& a, const Tensor& b, BinOp op, const char* name) {
  require_defined(a, name);
  require_defined(b, name);
  auto bc = std::make_shared<Broadcast>(broadcast(a.shape(), b.shape(), name));
  const auto da = a.data();
  const auto db = b.data();
  const std::size_t total = shape_numel(bc->out);
  std::vector<double> out(total);
  for (std::size_t i = 0; i < total; ++i) {
    const double x = da[bc->same ? i : bc->ia[i]];
    const double y = db[bc->same ? i : bc->ib[i]];
    switch (op) {
      case BinOp::kAdd: out[i] = x + y; break;
      case BinOp::kSub: out[i] = x - y; break;
      case BinOp::kMul: out[i] = x * y; break;
      case BinOp::kDiv: out[i] = x / y; break;
    }
  }
  return make_result(bc->out, std::move(out), {&a, &b}, [bc, op](Node& self) {
    const Node& na = *self.parents[0];
    const Node& nb = *self.parents[1];
    double* ga = pgrad(self, 0);
    double* gb = pgrad(self, 1);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const std::size_t ia = bc->same ? i : bc->ia[i];
      const std::size_t ib = bc->same ? i : bc->ib[i];
      const double g = self.grad[i];
      switch (op) {
        case BinOp::kAdd:
          if (ga) ga[ia] += g;
          if (gb) gb[ib] += g;
          break;
        case BinOp::kSub:
          if (ga) ga[ia] += g;
          if (gb) gb[ib] -= g;
          break;
        case BinOp::kMul:
          if (ga) ga[ia] += g * nb.data[ib];
          if (gb) gb[ib] += g * na.data[ia];
          break;
        case BinOp::kDiv: {
          const double y = nb.data[ib];
          if (ga) ga[ia] += g / y;
          if (gb) gb[ib] -= g * na.data[ia] / (y * y);
          break;
        }
      }
    }
  });
}

// Elementwise unary op given value and derivative-from-(input, output).
template <typename F, typename DF>
Tensor unary(const Tensor& x, const char* name, F f, DF df) {
  require_defined(x, name);
  const auto dx = x.data();
  std::vector<double> out(dx.size());
  for (std::size_t i = 0; i < dx.size(); ++i) out[i] = f(dx[i]);
  return make_result(x.shape(), std::move(out), {&x}, [df](Node& self) {
    double* g = pgrad(self, 0);
    if (!g) return;
    const Node& in = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      g[i] += self.grad[i] * df(in.data[i], self.data[i]);
    }
  });
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

void detail::Node::ensure_grad() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
}

// ---------------------------------------------------------------- Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return Tensor(make_leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return Tensor(make_leaf(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  return Tensor(make_leaf(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(make_leaf({}, {value}, requires_grad));
}

const Shape& Tensor::shape() const {
  require_defined(*this, "shape");
  return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape().size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  }
  return node_->shape[axis];
}

std::size_t Tensor::numel() const { return node_ ? node_->data.size() : 0; }

std::span<const double> Tensor::data() const {
  require_defined(*this, "data");
  return node_->data;
}

std::span<double> Tensor::mutable_data() {
  require_defined(*this, "mutable_data");
  return node_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  const Shape& s = shape();
  if (index.size() != s.size()) throw DimensionError("at(): rank mismatch for " + shape_str(s));
  std::size_t flat = 0;
  std::size_t d = 0;
  for (std::size_t i : index) {
    if (i >= s[d]) throw DimensionError("at(): index out of range for " + shape_str(s));
    flat = flat * s[d] + i;
    ++d;
  }
  return node_->data[flat];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool value) {
  require_defined(*this, "set_requires_grad");
  node_->requires_grad = value;
  if (value) node_->ensure_grad();
}

std::span<const double> Tensor::grad() const {
  require_defined(*this, "grad");
  node_->ensure_grad();
  return node_->grad;
}

std::span<double> Tensor::mutable_grad() {
  require_defined(*this, "mutable_grad");
  node_->ensure_grad();
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
  return Tensor(make_leaf(shape(), node_->data, false));
}

// ---------------------------------------------------------------- Tape

Tape::Tape(const Tensor& loss) : loss_(loss.node_ptr()) {
  require_defined(loss, "backward");
  if (loss.numel() != 1) {
    throw DimensionError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  std::unordered_set<const Node*> seen;
  std::vector<Node*> stack{loss_.get()};
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    if (!n->requires_grad || !seen.insert(n).second) continue;
    order_.push_back(n);
    for (const auto& p : n->parents) stack.push_back(p.get());
  }
  std::sort(order_.begin(), order_.end(), [](const Node* a, const Node* b) { return a->seq < b->seq; });
}

void Tape::replay() {
  if (!loss_->requires_grad) return;
  for (Node* n : order_) {
    if (!n->is_leaf()) n->grad.assign(n->data.size(), 0.0);
  }
  loss_->ensure_grad();
  loss_->grad[0] += 1.0;
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    if (!(*it)->is_leaf()) (*it)->backward(**it);
  }
}

void backward(const Tensor& loss) {
  Tape tape(loss);
  tape.replay();
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
bool grad_enabled() { return t_grad_enabled; }

// ---------------------------------------------------------------- elementwise

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::kAdd, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::kSub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::kMul, "mul"); }
Tensor div(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::kDiv, "div"); }

Tensor scale(const Tensor& x, double factor) {
  return unary(x, "scale", [factor](double v) { return v * factor; },
               [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double value) {
  return unary(x, "add_scalar", [value](double v) { return v + value; },
               [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor exp(const Tensor& x) {
  return unary(x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(x, "sigmoid", stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& x) {
  return unary(x, "tanh", [](double v) { return std::tanh(v); },
               [](double, double y) { return 1.0 - y * y; });
}

Tensor gelu(const Tensor& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  return unary(
      x, "gelu", [](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
      [inv_sqrt_2pi](double v, double) {
        return 0.5 * (1.0 + std::erf(v * kInvSqrt2)) + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
      });
}

Tensor softplus(const Tensor& x) {
  return unary(
      x, "softplus",
      [](double v) { return v > 0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); },
      [](double v, double) { return stable_sigmoid(v); });
}

// ---------------------------------------------------------------- linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  const auto da = a.data();
  const auto db = b.data();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = da[i * k + p];
      if (av == 0.0) continue;
      const double* brow = &db[p * n];
      double* orow = &out[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return make_result({m, n}, std::move(out), {&a, &b}, [m, k, n](Node& self) {
    const Node& na = *self.parents[0];
    const Node& nb = *self.parents[1];
    double* ga = pgrad(self, 0);
    double* gb = pgrad(self, 1);
    const double* g = self.grad.data();
    if (ga) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * nb.data[p * n + j];
          ga[i * k + p] += acc;
        }
      }
    }
    if (gb) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double av = na.data[i * k + p];
          if (av == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av * g[i * n + j];
        }
      }
    }
  });
}

Tensor transpose(const Tensor& x) {
  require_defined(x, "transpose");
  if (x.rank() != 2) throw DimensionError("transpose expects rank 2, got " + shape_str(x.shape()));
  const std::size_t r = x.dim(0), c = x.dim(1);
  const auto d = x.data();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = d[i * c + j];
  return make_result({c, r}, std::move(out), {&x}, [r, c](Node& self) {
    double* g = pgrad(self, 0);
    if (!g) return;
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  require_defined(x, "reshape");
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  const auto d = x.data();
  return make_result(std::move(shape), std::vector<double>(d.begin(), d.end()), {&x}, [](Node& self) {
    double* g = pgrad(self, 0);
    if (!g) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  require_defined(x, "slice");
  const AxisSplit s = split_axis(x.shape(), axis, "slice");
  if (begin > end || end > s.n) {
    throw DimensionError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") out of bounds for " + shape_str(x.shape()) + " on axis " +
                         std::to_string(axis));
  }
  const std::size_t len = end - begin;
  Shape out_shape = x.shape();
  out_shape[axis] = len;
  const auto d = x.data();
  std::vector<double> out(s.outer * len * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t k = 0; k < len; ++k)
      for (std::size_t i = 0; i < s.inner; ++i)
        out[(o * len + k) * s.inner + i] = d[(o * s.n + begin + k) * s.inner + i];
  return make_result(std::move(out_shape), std::move(out), {&x}, [s, begin, len](Node& self) {
    double* g = pgrad(self, 0);
    if (!g) return;
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t k = 0; k < len; ++k)
        for (std::size_t i = 0; i < s.inner; ++i)
          g[(o * s.n + begin + k) * s.inner + i] += self.grad[(o * len + k) * s.inner + i];
  });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no tensors");
  for (const auto& p : parts) require_defined(p, "concat");
  const Shape& first = parts.front().shape();
  std::vector<std::size_t> offsets;
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size() && axis < s.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == first[i];
    if (!ok) {
      throw DimensionError("concat: shape " + shape_str(s) + " incompatible with " + shape_str(first) +
                           " on axis " + std::to_string(axis));
    }
    offsets.push_back(total);
    total += s[axis];
  }
  Shape out_shape = first;
  out_shape[axis] = total;
  const AxisSplit so = split_axis(out_shape, axis, "concat");
  std::vector<double> out(shape_numel(out_shape));
  std::vector<std::size_t> lens;
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    const auto d = parts[pi].data();
    const std::size_t len = parts[pi].shape()[axis];
    lens.push_back(len);
    for (std::size_t o = 0; o < so.outer; ++o)
      for (std::size_t k = 0; k < len; ++k)
        for (std::size_t i = 0; i < so.inner; ++i)
          out[(o * total + offsets[pi] + k) * so.inner + i] = d[(o * len + k) * so.inner + i];
  }
  return make_result_list(std::move(out_shape), std::move(out), parts,
                          [so, total, offsets, lens](Node& self) {
                            for (std::size_t pi = 0; pi < lens.size(); ++pi) {
                              double* g = pgrad(self, pi);
                              if (!g) continue;
                              for (std::size_t o = 0; o < so.outer; ++o)
                                for (std::size_t k = 0; k < lens[pi]; ++k)
                                  for (std::size_t i = 0; i < so.inner; ++i)
                                    g[(o * lens[pi] + k) * so.inner + i] +=
                                        self.grad[(o * total + offsets[pi] + k) * so.inner + i];
                            }
                          });
}

// ---------------------------------------------------------------- reductions

Tensor sum(const Tensor& x) {
  require_defined(x, "sum");
  const auto d = x.data();
  double acc = 0.0;
  for (double v : d) acc += v;
  return make_result({}, {acc}, {&x}, [](Node& self) {
    double* g = pgrad(self, 0);
    if (!g) return;
    const std::size_t n = self.parents[0]->data.size();
    for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
  });
}

Tensor sum_axis(const Tensor& x, std::size_t axis, bool keepdim) {
  require_defined(x, "sum_axis");
  const AxisSplit s = split_axis(x.shape(), axis, "sum_axis");
  Shape out_shape = x.shape();
  if (keepdim) {
    out_shape[axis] = 1;
  } else {
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  }
  const auto d = x.data();
  std::vector<double> out(s.outer * s.inner, 0.0);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t k = 0; k < s.n; ++k)
      for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] += d[(o * s.n + k) * s.inner + i];
  return make_result(std::move(out_shape), std::move(out), {&x}, [s](Node& self) {
    double* g = pgrad(self, 0);
    if (!g) return;
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t k = 0; k < s.n; ++k)
        for (std::size_t i = 0; i < s.inner; ++i) g[(o * s.n + k) * s.inner + i] += self.grad[o * s.inner + i];
  });
}

Tensor dot(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("dot: shapes differ " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  return sum(mul(a, b));
}

Tensor cumsum(const Tensor& x, std::size_t axis) {
  require_defined(x, "cumsum");
  const AxisSplit s = split_axis(x.shape(), axis, "cumsum");
  const auto d = x.data();
  std::vector<double> out(d.size());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      double acc = 0.0;
      for (std::size_t k = 0; k < s.n; ++k) {
        const std::size_t idx = (o * s.n + k) * s.inner + i;
        acc += d[idx];
        out[idx] = acc;
      }
    }
  return make_result(x.shape(), std::move(out), {&x}, [s](Node& self) {
    double* g = pgrad(self, 0);
    if (!g) return;
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        double acc = 0.0;
        for (std::size_t k = s.n; k-- > 0;) {
          const std::size_t idx = (o * s.n + k) * s.inner + i;
          acc += self.grad[idx];
          g[idx] += acc;
        }
      }
  });
}

// ---------------------------------------------------------------- softmax family

Tensor softmax(const Tensor& x, std::size_t axis) {
  require_defined(x, "softmax");
  const AxisSplit s = split_axis(x.shape(), axis, "softmax");
  if (s.n == 0) throw DimensionError("softmax over empty axis of " + shape_str(x.shape()));
  const auto d = x.data();
  std::vector<double> out(d.size());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      auto at = [&](std::size_t k) { return (o * s.n + k) * s.inner + i; };
      double mx = d[at(0)];
      for (std::size_t k = 1; k < s.n; ++k) mx = std::max(mx, d[at(k)]);
      double z = 0.0;
      for (std::size_t k = 0; k < s.n; ++k) {
        out[at(k)] = std::exp(d[at(k)] - mx);
        z += out[at(k)];
      }
      for (std::size_t k = 0; k < s.n; ++k) out[at(k)] /= z;
    }
  return make_result(x.shape(), std::move(out), {&x}, [s](Node& self) {
    double* g = pgrad(self, 0);
    if (!g) return;
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        auto at = [&](std::size_t k) { return (o * s.n + k) * s.inner + i; };
        double inner = 0.0;
        for (std::size_t k = 0; k < s.n; ++k) inner += self.grad[at(k)] * self.data[at(k)];
        for (std::size_t k = 0; k < s.n; ++k) g[at(k)] += self.data[at(k)] * (self.grad[at(k)] - inner);
      }
  });
}

Tensor log_softmax(const Tensor& x, std::size_t axis) {
  require_defined(x, "log_softmax");
  const AxisSplit s = split_axis(x.shape(), axis, "log_softmax");
  if (s.n == 0) throw DimensionError("log_softmax over empty axis of " + shape_str(x.shape()));
  const auto d = x.data();
  std::vector<double> out(d.size());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      auto at = [&](std::size_t k) { return (o * s.n + k) * s.inner + i; };
      double mx = d[at(0)];
      for (std::size_t k = 1; k < s.n; ++k) mx = std::max(mx, d[at(k)]);
      double z = 0.0;
      for (std::size_t k = 0; k < s.n; ++k) z += std::exp(d[at(k)] - mx);
      const double lse = mx + std::log(z);
      for (std::size_t k = 0; k < s.n; ++k) out[at(k)] = d[at(k)] - lse;
    }
  return make_result(x.shape(), std::move(out), {&x}, [s](Node& self) {
    double* g = pgrad(self, 0);
    if (!g) return;
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        auto at = [&](std::size_t k) { return (o * s.n + k) * s.inner + i; };
        double total = 0.0;
        for (std::size_t k = 0; k < s.n; ++k) total += self.grad[at(k)];
        for (std::size_t k = 0; k < s.n; ++k)
          g[at(k)] += self.grad[at(k)] - std::exp(self.data[at(k)]) * total;
      }
  });
}

// ---------------------------------------------------------------- layers

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_defined(x, "layer_norm");
  if (!(eps > 0.0)) throw ConfigError("layer_norm: eps must be positive");
  if (x.rank() == 0) throw DimensionError("layer_norm: scalar input");
  const std::size_t n = x.shape().back();
  const std::size_t rows = n == 0 ? 0 : x.numel() / n;
  for (const Tensor* p : {&gain, &bias}) {
    if (p->defined() && p->numel() != n) {
      throw DimensionError("layer_norm: parameter shape " + shape_str(p->shape()) +
                           " does not match last axis of " + shape_str(x.shape()));
    }
  }
  const auto d = x.data();
  const bool has_gain = gain.defined();
  const bool has_bias = bias.defined();
  const auto gd = has_gain ? gain.data() : std::span<const double>{};
  const auto bd = has_bias ? bias.data() : std::span<const double>{};
  auto xhat = std::make_shared<std::vector<double>>(d.size());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(d.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = &d[r * n];
    double mean = 0.0;
    for (std::size_t k = 0; k < n; ++k) mean += row[k];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t k = 0; k < n; ++k) var += (row[k] - mean) * (row[k] - mean);
    var /= static_cast<double>(n);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t k = 0; k < n; ++k) {
      const double h = (row[k] - mean) * rs;
      (*xhat)[r * n + k] = h;
      out[r * n + k] = h * (has_gain ? gd[k] : 1.0) + (has_bias ? bd[k] : 0.0);
    }
  }
  auto backward_fn = [xhat, rstd, rows, n, has_gain, has_bias](Node& self) {
    double* gx = pgrad(self, 0);
    double* gg = has_gain ? pgrad(self, 1) : nullptr;
    double* gb = has_bias ? pgrad(self, has_gain ? 2 : 1) : nullptr;
    const Node* gain_node = has_gain ? self.parents[1].get() : nullptr;
    std::vector<double> dxhat(n);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* dy = &self.grad[r * n];
      const double* xh = &(*xhat)[r * n];
      double mean_d = 0.0, mean_dx = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        dxhat[k] = dy[k] * (gain_node ? gain_node->data[k] : 1.0);
        mean_d += dxhat[k];
        mean_dx += dxhat[k] * xh[k];
        if (gg) gg[k] += dy[k] * xh[k];
        if (gb) gb[k] += dy[k];
      }
      mean_d /= static_cast<double>(n);
      mean_dx /= static_cast<double>(n);
      if (gx) {
        for (std::size_t k = 0; k < n; ++k) gx[r * n + k] += (*rstd)[r] * (dxhat[k] - mean_d - xh[k] * mean_dx);
      }
    }
  };
  if (has_gain && has_bias) return make_result(x.shape(), std::move(out), {&x, &gain, &bias}, backward_fn);
  if (has_gain) return make_result(x.shape(), std::move(out), {&x, &gain}, backward_fn);
  if (has_bias) return make_result(x.shape(), std::move(out), {&x, &bias}, backward_fn);
  return make_result(x.shape(), std::move(out), {&x}, backward_fn);
}

Tensor conv1d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t padding) {
  require_defined(x, "conv1d");
  require_defined(weight, "conv1d");
  if (weight.rank() != 3) {
    throw DimensionError("conv1d: weight must be [C_out x k x C_in], got " + shape_str(weight.shape()));
  }
  const std::size_t cout = weight.dim(0), k = weight.dim(1), cin = weight.dim(2);
  if (k % 2 == 0) throw ConfigError("conv1d: kernel size must be odd, got " + std::to_string(k));
  if (padding != (k - 1) / 2) {
    throw ConfigError("conv1d: padding " + std::to_string(padding) + " does not preserve length for kernel " +
                      std::to_string(k));
  }
  if (x.rank() != 2 || x.dim(1) != cin) {
    throw DimensionError("conv1d: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(weight.shape()));
  }
  if (bias.defined() && bias.numel() != cout) {
    throw DimensionError("conv1d: bias " + shape_str(bias.shape()) + " does not match C_out " +
                         std::to_string(cout));
  }
  const std::size_t len = x.dim(0);
  const auto dx = x.data();
  const auto dw = weight.data();
  std::vector<double> out(len * cout, 0.0);
  for (std::size_t t = 0; t < len; ++t) {
    for (std::size_t o = 0; o < cout; ++o) {
      double acc = bias.defined() ? bias.data()[o] : 0.0;
      for (std::size_t u = 0; u < k; ++u) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + u) - static_cast<std::ptrdiff_t>(padding);
        if (src < 0 || src >= static_cast<std::ptrdiff_t>(len)) continue;
        const double* xr = &dx[static_cast<std::size_t>(src) * cin];
        const double* wr = &dw[(o * k + u) * cin];
        for (std::size_t c = 0; c < cin; ++c) acc += wr[c] * xr[c];
      }
      out[t * cout + o] = acc;
    }
  }
  const bool has_bias = bias.defined();
  auto backward_fn = [len, cout, k, cin, padding, has_bias](Node& self) {
    const Node& nx = *self.parents[0];
    const Node& nw = *self.parents[1];
    double* gx = pgrad(self, 0);
    double* gw = pgrad(self, 1);
    double* gb = has_bias ? pgrad(self, 2) : nullptr;
    for (std::size_t t = 0; t < len; ++t) {
      for (std::size_t o = 0; o < cout; ++o) {
        const double g = self.grad[t * cout + o];
        if (g == 0.0) continue;
        if (gb) gb[o] += g;
        for (std::size_t u = 0; u < k; ++u) {
          const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + u) - static_cast<std::ptrdiff_t>(padding);
          if (src < 0 || src >= static_cast<std::ptrdiff_t>(len)) continue;
          const std::size_t s = static_cast<std::size_t>(src);
          for (std::size_t c = 0; c < cin; ++c) {
            if (gx) gx[s * cin + c] += g * nw.data[(o * k + u) * cin + c];
            if (gw) gw[(o * k + u) * cin + c] += g * nx.data[s * cin + c];
          }
        }
      }
    }
  };
  if (has_bias) return make_result({len, cout}, std::move(out), {&x, &weight, &bias}, backward_fn);
  return make_result({len, cout}, std::move(out), {&x, &weight}, backward_fn);
}

Tensor embedding(const Tensor& table, std::span<const std::int64_t> ids) {
  require_defined(table, "embedding");
  if (table.rank() != 2) throw DimensionError("embedding: table must be rank 2, got " + shape_str(table.shape()));
  const std::size_t vocab = table.dim(0), width = table.dim(1);
  const auto d = table.data();
  auto rows = std::make_shared<std::vector<std::size_t>>();
  rows->reserve(ids.size());
  std::vector<double> out(ids.size() * width);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw DataError("embedding: id " + std::to_string(ids[i]) + " out of range for table of " +
                      std::to_string(vocab) + " rows");
    }
    const std::size_t r = static_cast<std::size_t>(ids[i]);
    rows->push_back(r);
    std::copy_n(&d[r * width], width, &out[i * width]);
  }
  return make_result({ids.size(), width}, std::move(out), {&table}, [rows, width](Node& self) {
    double* g = pgrad(self, 0);
    if (!g) return;
    for (std::size_t i = 0; i < rows->size(); ++i)
      for (std::size_t c = 0; c < width; ++c) g[(*rows)[i] * width + c] += self.grad[i * width + c];
  });
}

Tensor dropout(const Tensor& x, double p, Rng& rng, bool train) {
  require_defined(x, "dropout");
  if (p < 0.0 || p >= 1.0) throw ConfigError("dropout: probability must lie in [0, 1)");
  if (!train || p == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - p);
  auto mask = std::make_shared<std::vector<double>>(x.numel());
  for (double& m : *mask) m = rng.uniform() >= p ? keep_scale : 0.0;
  const auto d = x.data();
  std::vector<double> out(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) out[i] = d[i] * (*mask)[i];
  return make_result(x.shape(), std::move(out), {&x}, [mask](Node& self) {
    double* g = pgrad(self, 0);
    if (!g) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * (*mask)[i];
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> targets, std::int64_t ignore_index,
                     Reduction reduction) {
  require_defined(logits, "cross_entropy");
  if (logits.rank() != 2 || logits.dim(0) != targets.size()) {
    throw DimensionError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                         std::to_string(targets.size()) + " targets");
  }
  const std::size_t rows = logits.dim(0), vocab = logits.dim(1);
  const auto d = logits.data();
  auto probs = std::make_shared<std::vector<double>>(rows * vocab, 0.0);
  auto tgt = std::make_shared<std::vector<std::int64_t>>(targets.begin(), targets.end());
  double loss = 0.0;
  std::size_t counted = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const std::int64_t t = targets[r];
    if (t == ignore_index) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw DataError("cross_entropy: target " + std::to_string(t) + " out of range");
    }
    const double* row = &d[r * vocab];
    double mx = row[0];
    for (std::size_t k = 1; k < vocab; ++k) mx = std::max(mx, row[k]);
    double z = 0.0;
    for (std::size_t k = 0; k < vocab; ++k) z += std::exp(row[k] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t k = 0; k < vocab; ++k) (*probs)[r * vocab + k] = std::exp(row[k] - lse);
    loss -= row[t] - lse;
    ++counted;
  }
  if (counted == 0 && reduction == Reduction::kMean) return Tensor::scalar(0.0);
  const double denom = reduction == Reduction::kMean ? static_cast<double>(counted) : 1.0;
  return make_result({}, {loss / denom}, {&logits}, [probs, tgt, rows, vocab, ignore_index, denom](Node& self) {
    double* g = pgrad(self, 0);
    if (!g) return;
    const double scale_factor = self.grad[0] / denom;
    for (std::size_t r = 0; r < rows; ++r) {
      const std::int64_t t = (*tgt)[r];
      if (t == ignore_index) continue;
      for (std::size_t k = 0; k < vocab; ++k) g[r * vocab + k] += scale_factor * (*probs)[r * vocab + k];
      g[r * vocab + static_cast<std::size_t>(t)] -= scale_factor;
    }
  });
}

}  // namespace structlm
