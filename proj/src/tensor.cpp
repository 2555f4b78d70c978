#include "robustit/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace rit::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

[[noreturn]] void fail(const std::string& what) { throw std::invalid_argument(what); }

bool any_grad(const std::vector<Tensor>& xs) {
  for (const auto& x : xs)
    if (x.requires_grad()) return true;
  return false;
}

// Builds the output node; the backward closure is attached only when some
// input is differentiable.
Tensor make(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
            std::function<void(Node&)> fn) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  if (any_grad(inputs)) {
    n->requires_grad = true;
    for (const auto& x : inputs) n->inputs.push_back(x.ptr());
    n->backward_fn = std::move(fn);
  }
  return Tensor(n);
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

struct Bcast {
  Shape out;
  std::size_t na, nb;
};

Bcast broadcast(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return {a.shape(), a.numel(), b.numel()};
  if (is_suffix(b.shape(), a.shape())) return {a.shape(), a.numel(), b.numel()};
  if (is_suffix(a.shape(), b.shape())) return {b.shape(), a.numel(), b.numel()};
  fail(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
       " are not suffix-broadcastable");
}

void accumulate(Node& in, const std::vector<double>& g_out) {
  // g_out has the output length; fold onto in's (possibly smaller) length.
  if (!in.requires_grad) return;
  auto& g = in.ensure_grad();
  const std::size_t n = g.size();
  if (n == 0) return;
  for (std::size_t j = 0; j < g_out.size(); j += n)
    for (std::size_t k = 0; k < n; ++k) g[k] += g_out[j + k];
}

// out[i] = f(x[i % |x|], y[i % |y|]) where one operand repeats along the leading axes.
template <class F>
std::vector<double> zip(const std::vector<double>& x, const std::vector<double>& y, std::size_t n, F f) {
  std::vector<double> out(n);
  const std::size_t na = x.size(), nb = y.size();
  if (n == 0) return out;
  if (na == n && nb == n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = f(x[i], y[i]);
  } else if (na == n) {
    for (std::size_t j = 0; j < n; j += nb)
      for (std::size_t k = 0; k < nb; ++k) out[j + k] = f(x[j + k], y[k]);
  } else {
    for (std::size_t j = 0; j < n; j += na)
      for (std::size_t k = 0; k < na; ++k) out[j + k] = f(x[k], y[j + k]);
  }
  return out;
}

// ga[i % |ga|] += g[i] * other[i % |other|]; at most one of ga, other is shorter than g.
void fold_product(std::vector<double>& ga, const std::vector<double>& g, const std::vector<double>& other) {
  const std::size_t m = ga.size(), n = g.size(), no = other.size();
  if (m == 0 || no == 0) return;
  if (m == n) {
    for (std::size_t j = 0; j < n; j += no)
      for (std::size_t k = 0; k < no; ++k) ga[j + k] += g[j + k] * other[k];
  } else {
    for (std::size_t j = 0; j < n; j += m)
      for (std::size_t k = 0; k < m; ++k) ga[k] += g[j + k] * other[j + k];
  }
}

template <class F>
std::vector<double> unary(const Tensor& a, F f) {
  std::vector<double> out(a.numel());
  const auto& x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
  return out;
}

}  // namespace

std::size_t numel_of(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
  os << ']';
  return os.str();
}

std::vector<double>& Node::ensure_grad() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  return grad;
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
  if (numel_of(shape) != data.size())
    fail("tensor: shape " + shape_str(shape) + " does not match " + std::to_string(data.size()) +
         " values");
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->requires_grad = requires_grad;
  return Tensor(n);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  std::vector<double> d(numel_of(shape), v);
  return from(std::move(shape), std::move(d), requires_grad);
}

Tensor Tensor::scalar(double v, bool requires_grad) { return from({}, {v}, requires_grad); }

double Tensor::item() const {
  if (numel() != 1) fail("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
  return n_->data[0];
}

void Tensor::zero_grad() {
  if (n_->requires_grad) n_->grad.assign(n_->data.size(), 0.0);
}

Tensor Tensor::detach() const { return from(shape(), data()); }

Tape build_tape(const Tensor& root) {
  Tape tape;
  if (!root.requires_grad()) return tape;
  std::unordered_set<Node*> seen;
  // Iterative post-order DFS.
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node(), 0}};
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->inputs.size()) {
      Node* c = n->inputs[i++].get();
      if (c->requires_grad && seen.insert(c).second) stack.push_back({c, 0});
    } else {
      tape.nodes.push_back(n);
      stack.pop_back();
    }
  }
  return tape;
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1)
    fail("backward: loss must be a scalar, got shape " + (loss.defined() ? shape_str(loss.shape()) : "<undefined>"));
  if (!loss.requires_grad()) return;
  Tape tape = build_tape(loss);
  for (Node* n : tape.nodes)
    if (!n->is_leaf()) n->grad.assign(n->data.size(), 0.0);
  loss.node()->ensure_grad()[0] += 1.0;
  for (auto it = tape.nodes.rbegin(); it != tape.nodes.rend(); ++it)
    if (!(*it)->is_leaf()) (*it)->backward_fn(**it);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    fail("matmul: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " do not agree");
  const auto m = static_cast<Eigen::Index>(a.dim(0)), k = static_cast<Eigen::Index>(a.dim(1)),
             n = static_cast<Eigen::Index>(b.dim(1));
  std::vector<double> out(static_cast<std::size_t>(m * n));
  Map(out.data(), m, n).noalias() = MapC(a.data().data(), m, k) * MapC(b.data().data(), k, n);
  return make({a.dim(0), b.dim(1)}, std::move(out), {a, b}, [m, k, n](Node& self) {
    Node& A = *self.inputs[0];
    Node& B = *self.inputs[1];
    MapC g(self.grad.data(), m, n);
    if (A.requires_grad)
      Map(A.ensure_grad().data(), m, k).noalias() += g * MapC(B.data.data(), k, n).transpose();
    if (B.requires_grad)
      Map(B.ensure_grad().data(), k, n).noalias() += MapC(A.data.data(), m, k).transpose() * g;
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  auto bc = broadcast(a, b, "add");
  const auto &x = a.data(), &y = b.data();
  auto out = zip(x, y, numel_of(bc.out), std::plus<double>());
  return make(bc.out, std::move(out), {a, b}, [](Node& self) {
    accumulate(*self.inputs[0], self.grad);
    accumulate(*self.inputs[1], self.grad);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  auto bc = broadcast(a, b, "sub");
  const auto &x = a.data(), &y = b.data();
  auto out = zip(x, y, numel_of(bc.out), std::minus<double>());
  return make(bc.out, std::move(out), {a, b}, [](Node& self) {
    accumulate(*self.inputs[0], self.grad);
    if (self.inputs[1]->requires_grad) {
      std::vector<double> neg(self.grad.size());
      for (std::size_t i = 0; i < neg.size(); ++i) neg[i] = -self.grad[i];
      accumulate(*self.inputs[1], neg);
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  auto bc = broadcast(a, b, "mul");
  const auto &x = a.data(), &y = b.data();
  auto out = zip(x, y, numel_of(bc.out), std::multiplies<double>());
  return make(bc.out, std::move(out), {a, b}, [](Node& self) {
    Node& A = *self.inputs[0];
    Node& B = *self.inputs[1];
    if (A.requires_grad) fold_product(A.ensure_grad(), self.grad, B.data);
    if (B.requires_grad) fold_product(B.ensure_grad(), self.grad, A.data);
  });
}

Tensor scale(const Tensor& a, double c) {
  auto r = unary(a, [c](double v) { return c * v; });
  return make(a.shape(), std::move(r), {a}, [c](Node& self) {
    Node& A = *self.inputs[0];
    auto& ga = A.ensure_grad();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += c * self.grad[i];
  });
}

Tensor sigmoid(const Tensor& a) {
  auto r = unary(a, [](double v) {
    // Split by sign so exp never overflows.
    if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
  });
  return make(a.shape(), std::move(r), {a}, [](Node& self) {
    auto& ga = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < ga.size(); ++i) {
      const double s = self.data[i];
      ga[i] += self.grad[i] * s * (1.0 - s);
    }
  });
}

Tensor tanh(const Tensor& a) {
  auto r = unary(a, [](double v) { return std::tanh(v); });
  return make(a.shape(), std::move(r), {a}, [](Node& self) {
    auto& ga = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < ga.size(); ++i) {
      const double t = self.data[i];
      ga[i] += self.grad[i] * (1.0 - t * t);
    }
  });
}

Tensor relu(const Tensor& a) {
  auto r = unary(a, [](double v) { return v > 0 ? v : 0.0; });
  return make(a.shape(), std::move(r), {a}, [](Node& self) {
    Node& A = *self.inputs[0];
    auto& ga = A.ensure_grad();
    for (std::size_t i = 0; i < ga.size(); ++i)
      if (A.data[i] > 0) ga[i] += self.grad[i];
  });
}

Tensor abs(const Tensor& a) {
  auto r = unary(a, [](double v) { return std::fabs(v); });
  return make(a.shape(), std::move(r), {a}, [](Node& self) {
    Node& A = *self.inputs[0];
    auto& ga = A.ensure_grad();
    for (std::size_t i = 0; i < ga.size(); ++i) {
      const double x = A.data[i];
      const double sgn = x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0);
      ga[i] += self.grad[i] * sgn;
    }
  });
}

Tensor elementwise(OpKind kind, const std::vector<Tensor>& in, double c) {
  auto need = [&](std::size_t n) {
    if (in.size() != n) fail("elementwise: expected " + std::to_string(n) + " operands");
  };
  switch (kind) {
    case OpKind::add: need(2); return add(in[0], in[1]);
    case OpKind::sub: need(2); return sub(in[0], in[1]);
    case OpKind::mul: need(2); return mul(in[0], in[1]);
    case OpKind::sigmoid: need(1); return sigmoid(in[0]);
    case OpKind::relu: need(1); return relu(in[0]);
    case OpKind::abs: need(1); return abs(in[0]);
    case OpKind::tanh: need(1); return tanh(in[0]);
    case OpKind::scale: need(1); return scale(in[0], c);
  }
  fail("elementwise: unknown op");
}

namespace {

Tensor reduce(const Tensor& x, const std::vector<std::size_t>& axes, bool mean) {
  const auto& s = x.shape();
  std::vector<bool> drop(s.size(), false);
  for (auto ax : axes) {
    if (ax >= s.size()) fail("reduce: axis " + std::to_string(ax) + " out of range for shape " + shape_str(s));
    drop[ax] = true;
  }
  Shape out_shape;
  std::size_t count = 1;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (drop[i]) count *= s[i];
    else out_shape.push_back(s[i]);
  }
  const double w = mean ? 1.0 / static_cast<double>(count) : 1.0;
  const auto& d = x.data();
  std::vector<double> out(numel_of(out_shape), 0.0);

  // Contiguous block of reduced axes: view as [outer, mid, inner].
  std::size_t first = s.size(), last = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (drop[i]) first = std::min(first, i), last = i;
  bool contiguous = true;
  for (std::size_t i = first; i <= last && i < s.size(); ++i) contiguous = contiguous && drop[i];
  if (contiguous && first < s.size()) {
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < first; ++i) outer *= s[i];
    for (std::size_t i = last + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t mid = count;
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t m = 0; m < mid; ++m) {
        const double* src = d.data() + (o * mid + m) * inner;
        double* dst = out.data() + o * inner;
        for (std::size_t k = 0; k < inner; ++k) dst[k] += src[k];
      }
    if (mean)
      for (auto& v : out) v *= w;
    return make(out_shape, std::move(out), {x}, [outer, mid, inner, w](Node& self) {
      auto& g = self.inputs[0]->ensure_grad();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t m = 0; m < mid; ++m) {
          double* dst = g.data() + (o * mid + m) * inner;
          const double* src = self.grad.data() + o * inner;
          for (std::size_t k = 0; k < inner; ++k) dst[k] += w * src[k];
        }
    });
  }

  // General case: map every input index to its output index.
  std::vector<std::size_t> map(x.numel());
  std::vector<std::size_t> idx(s.size(), 0);
  for (std::size_t f = 0; f < x.numel(); ++f) {
    std::size_t o = 0;
    for (std::size_t i = 0; i < s.size(); ++i)
      if (!drop[i]) o = o * s[i] + idx[i];
    map[f] = o;
    for (std::size_t i = s.size(); i-- > 0;) {
      if (++idx[i] < s[i]) break;
      idx[i] = 0;
    }
  }
  for (std::size_t f = 0; f < d.size(); ++f) out[map[f]] += d[f];
  if (mean)
    for (auto& v : out) v *= w;
  return make(out_shape, std::move(out), {x}, [map = std::move(map), w](Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t f = 0; f < g.size(); ++f) g[f] += w * self.grad[map[f]];
  });
}

}  // namespace

Tensor reduce_sum(const Tensor& x, const std::vector<std::size_t>& axes) { return reduce(x, axes, false); }
Tensor reduce_mean(const Tensor& x, const std::vector<std::size_t>& axes) { return reduce(x, axes, true); }

Tensor sum_all(const Tensor& x) {
  std::vector<std::size_t> axes(x.rank());
  for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = i;
  return reduce_sum(x, axes);
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel_of(shape) != x.numel())
    fail("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  return make(std::move(shape), x.data(), {x}, [](Node& self) { accumulate(*self.inputs[0], self.grad); });
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0))
    fail("concat_cols: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " do not agree");
  const std::size_t r = a.dim(0), p = a.dim(1), q = b.dim(1);
  std::vector<double> out(r * (p + q));
  for (std::size_t i = 0; i < r; ++i) {
    std::copy_n(a.data().begin() + i * p, p, out.begin() + i * (p + q));
    std::copy_n(b.data().begin() + i * q, q, out.begin() + i * (p + q) + p);
  }
  return make({r, p + q}, std::move(out), {a, b}, [r, p, q](Node& self) {
    Node& A = *self.inputs[0];
    Node& B = *self.inputs[1];
    if (A.requires_grad) {
      auto& g = A.ensure_grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < p; ++j) g[i * p + j] += self.grad[i * (p + q) + j];
    }
    if (B.requires_grad) {
      auto& g = B.ensure_grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < q; ++j) g[i * q + j] += self.grad[i * (p + q) + p + j];
    }
  });
}

Tensor embedding(const Tensor& table, const std::vector<int>& ids, std::size_t rows, std::size_t cols) {
  if (table.rank() != 2) fail("embedding: table must be rank 2, got " + shape_str(table.shape()));
  if (ids.size() != rows * cols) fail("embedding: id count does not match rows*cols");
  const std::size_t V = table.dim(0), d = table.dim(1);
  for (int t : ids)
    if (t < 0 || static_cast<std::size_t>(t) >= V)
      fail("embedding: token id " + std::to_string(t) + " outside vocabulary of " + std::to_string(V));
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(table.data().begin() + static_cast<std::size_t>(ids[i]) * d, d, out.begin() + i * d);
  return make({rows, cols, d}, std::move(out), {table}, [ids, d](Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) g[static_cast<std::size_t>(ids[i]) * d + j] += self.grad[i * d + j];
  });
}

Tensor patchify(const Tensor& images, std::size_t p) {
  if (images.rank() != 4) fail("patchify: expected [B, H, W, C], got " + shape_str(images.shape()));
  const std::size_t B = images.dim(0), H = images.dim(1), W = images.dim(2), C = images.dim(3);
  if (p == 0 || H % p || W % p) fail("patchify: patch " + std::to_string(p) + " does not divide the image");
  const std::size_t gh = H / p, gw = W / p, N = gh * gw, PD = p * p * C;
  // Each patch row is a contiguous run of p*C values in the image.
  const std::size_t run = p * C;
  auto rows = [=](auto&& f) {
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t gr = 0; gr < gh; ++gr)
        for (std::size_t gc = 0; gc < gw; ++gc)
          for (std::size_t r = 0; r < p; ++r)
            f(((b * N + gr * gw + gc) * p + r) * run, ((b * H + gr * p + r) * W + gc * p) * C);
  };
  std::vector<double> out(B * N * PD);
  const double* img = images.data().data();
  rows([&](std::size_t o, std::size_t i) { std::copy_n(img + i, run, out.data() + o); });
  return make({B, N, PD}, std::move(out), {images}, [rows, run](Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    rows([&](std::size_t o, std::size_t i) {
      for (std::size_t k = 0; k < run; ++k) g[i + k] += self.grad[o + k];
    });
  });
}
Tensor paste_patch(const Tensor& images, const Tensor& patch, std::size_t r0, std::size_t c0) {
  if (images.rank() != 4 || patch.rank() != 3 || patch.dim(0) != patch.dim(1) || patch.dim(2) != images.dim(3))
    fail("paste_patch: shapes " + shape_str(images.shape()) + " and " + shape_str(patch.shape()) + " do not agree");
  const std::size_t B = images.dim(0), H = images.dim(1), W = images.dim(2), C = images.dim(3), k = patch.dim(0);
  if (k == 0 || r0 + k > H || c0 + k > W) fail("paste_patch: patch exceeds the image");
  std::vector<double> out = images.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t r = 0; r < k; ++r)
      for (std::size_t c = 0; c < k; ++c)
        for (std::size_t ch = 0; ch < C; ++ch)
          out[((b * H + r0 + r) * W + c0 + c) * C + ch] = patch.data()[(r * k + c) * C + ch];
  return make(images.shape(), std::move(out), {images, patch}, [B, H, W, C, k, r0, c0](Node& self) {
    Node& I = *self.inputs[0];
    Node& P = *self.inputs[1];
    auto inside = [&](std::size_t r, std::size_t c) { return r >= r0 && r < r0 + k && c >= c0 && c < c0 + k; };
    if (I.requires_grad) {
      auto& g = I.ensure_grad();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t r = 0; r < H; ++r)
          for (std::size_t c = 0; c < W; ++c)
            if (!inside(r, c))
              for (std::size_t ch = 0; ch < C; ++ch) {
                const std::size_t i = ((b * H + r) * W + c) * C + ch;
                g[i] += self.grad[i];
              }
    }
    if (P.requires_grad) {
      auto& g = P.ensure_grad();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t r = 0; r < k; ++r)
          for (std::size_t c = 0; c < k; ++c)
            for (std::size_t ch = 0; ch < C; ++ch)
              g[(r * k + c) * C + ch] += self.grad[((b * H + r0 + r) * W + c0 + c) * C + ch];
    }
  });
}

Tensor sq_l2_distance(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    fail("sq_l2_distance: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = a.at(i) - b.at(i);
    s += d * d;
  }
  return make({}, {s}, {a, b}, [](Node& self) {
    Node& A = *self.inputs[0];
    Node& B = *self.inputs[1];
    const double g = self.grad[0];
    if (A.requires_grad) {
      auto& ga = A.ensure_grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += 2.0 * g * (A.data[i] - B.data[i]);
    }
    if (B.requires_grad) {
      auto& gb = B.ensure_grad();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= 2.0 * g * (A.data[i] - B.data[i]);
    }
  });
}

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
  if (logits.rank() != 2) fail("softmax_cross_entropy: logits must be rank 2, got " + shape_str(logits.shape()));
  const std::size_t R = logits.dim(0), V = logits.dim(1);
  if (targets.size() != R) fail("softmax_cross_entropy: one target per row required");
  for (int t : targets)
    if (t < 0 || static_cast<std::size_t>(t) >= V)
      fail("softmax_cross_entropy: target " + std::to_string(t) + " out of range for " + std::to_string(V) + " classes");
  std::vector<double> prob(R * V);
  double loss = 0.0;
  const auto& z = logits.data();
  for (std::size_t i = 0; i < R; ++i) {
    const double* row = z.data() + i * V;
    const double m = *std::max_element(row, row + V);
    double s = 0.0;
    for (std::size_t j = 0; j < V; ++j) s += std::exp(row[j] - m);
    const double lse = m + std::log(s);
    for (std::size_t j = 0; j < V; ++j) prob[i * V + j] = std::exp(row[j] - lse);
    loss += lse - row[targets[i]];
  }
  loss /= static_cast<double>(R);
  return make({}, {loss}, {logits}, [prob = std::move(prob), targets, R, V](Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    const double w = self.grad[0] / static_cast<double>(R);
    for (std::size_t i = 0; i < R; ++i)
      for (std::size_t j = 0; j < V; ++j) {
        const double y = static_cast<std::size_t>(targets[i]) == j ? 1.0 : 0.0;
        g[i * V + j] += w * (prob[i * V + j] - y);
      }
  });
}

}  // namespace rit::ad
