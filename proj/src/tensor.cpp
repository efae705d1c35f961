#include "microprobe/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "microprobe/error.hpp"

namespace microprobe::ad {

namespace {

#ifdef NDEBUG
bool g_debug_checks = false;
#else
bool g_debug_checks = true;
#endif

template <class T>
using NodePtr = std::shared_ptr<Node<T>>;

template <class T>
void check_finite(const Tensor<T>& x, const char* op) {
  if (!g_debug_checks) return;
  for (T v : x.data()) {
    if (!std::isfinite(v)) {
      throw Error(std::string(op) + ": non-finite input value");
    }
  }
}

template <class T>
bool any_grad(std::initializer_list<const Tensor<T>*> xs) {
  return std::any_of(xs.begin(), xs.end(), [](const Tensor<T>* t) { return t->requires_grad(); });
}

template <class T>
NodePtr<T> new_node(Shape shape, std::vector<T> value) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  return n;
}

std::vector<std::size_t> contiguous_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t d = s.size(); d-- > 1;) st[d - 1] = st[d] * s[d];
  return st;
}

// Strides of `in` when viewed through the broadcast shape `out` (zero where
// the dim is stretched or missing).
std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> st(out.size(), 0);
  const auto cs = contiguous_strides(in);
  const std::size_t off = out.size() - in.size();
  for (std::size_t d = 0; d < in.size(); ++d) {
    st[off + d] = (in[d] == 1 && out[off + d] != 1) ? 0 : cs[d];
  }
  return st;
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast " + to_string(a) + " with " +
                       to_string(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// Visits every element of `out` in row-major order with the matching
// offsets into two broadcast operands.
template <class F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, F&& f) {
  const std::size_t rank = out.size();
  if (rank == 0) {
    f(std::size_t{0}, std::size_t{0}, std::size_t{0});
    return;
  }
  const std::size_t total = numel(out);
  const std::size_t inner = out.back();
  if (total == 0 || inner == 0) return;
  const std::size_t sa_in = sa.back();
  const std::size_t sb_in = sb.back();
  std::vector<std::size_t> idx(rank - 1, 0);
  std::size_t base_a = 0, base_b = 0;
  for (std::size_t o = 0; o < total; o += inner) {
    for (std::size_t j = 0; j < inner; ++j) f(o + j, base_a + j * sa_in, base_b + j * sb_in);
    for (std::size_t d = rank - 1; d-- > 0;) {
      ++idx[d];
      base_a += sa[d];
      base_b += sb[d];
      if (idx[d] < out[d]) break;
      base_a -= sa[d] * out[d];
      base_b -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

// Element-wise binary op with broadcasting. `da`/`db` give the local
// partial derivatives given (a, b, out).
template <class T, class Fwd, class DA, class DB>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, const char* name, Fwd fwd, DA da,
                    DB db) {
  check_finite(a, name);
  check_finite(b, name);
  Shape out_shape = broadcast_shape(a.shape(), b.shape(), name);
  auto sa = broadcast_strides(a.shape(), out_shape);
  auto sb = broadcast_strides(b.shape(), out_shape);
  std::vector<T> out(numel(out_shape));
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(pa[i], pb[i]);
  } else {
    for_each_broadcast(out_shape, sa, sb,
                       [&](std::size_t o, std::size_t ia, std::size_t ib) { out[o] = fwd(pa[ia], pb[ib]); });
  }
  auto node = new_node<T>(out_shape, std::move(out));
  if (any_grad<T>({&a, &b})) {
    node->requires_grad = true;
    node->parents = {a.node(), b.node()};
    auto na = a.node();
    auto nb = b.node();
    node->backward_fn = [na, nb, sa, sb, da, db](Node<T>& self) {
      const auto& g = self.grad;
      const auto& va = na->value;
      const auto& vb = nb->value;
      const auto& vo = self.value;
      T* ga = na->requires_grad ? na->ensure_grad().data() : nullptr;
      T* gb = nb->requires_grad ? nb->ensure_grad().data() : nullptr;
      for_each_broadcast(self.shape, sa, sb, [&](std::size_t o, std::size_t ia, std::size_t ib) {
        if (ga) ga[ia] += g[o] * da(va[ia], vb[ib], vo[o]);
        if (gb) gb[ib] += g[o] * db(va[ia], vb[ib], vo[o]);
      });
    };
  }
  return Tensor<T>(node);
}

// Element-wise unary op; `d` gives dy/dx from (x, y).
template <class T, class Fwd, class D>
Tensor<T> unary_op(const Tensor<T>& x, const char* name, Fwd fwd, D d) {
  check_finite(x, name);
  std::vector<T> out(x.numel());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(in[i]);
  auto node = new_node<T>(x.shape(), std::move(out));
  if (x.requires_grad()) {
    node->requires_grad = true;
    node->parents = {x.node()};
    auto nx = x.node();
    node->backward_fn = [nx, d](Node<T>& self) {
      auto& gx = nx->ensure_grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * d(nx->value[i], self.value[i]);
    };
  }
  return Tensor<T>(node);
}

// C[m,n] += A[m,k] B[k,n]. Each output row depends only on its own input
// row, always summed in the same order, so results do not change with the
// number of rows.
template <class T>
void gemm_nn(const T* A, const T* B, T* C, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* c = C + i * n;
    const T* a = A + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[p];
      const T* b = B + p * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

// C[k,n] += A[m,k]^T G[m,n]
template <class T>
void gemm_tn(const T* A, const T* G, T* C, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* g = G + i * n;
    const T* a = A + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[p];
      if (av == T(0)) continue;
      T* c = C + p * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += av * g[j];
    }
  }
}

template <class T>
std::vector<T> transposed(const T* B, std::size_t rows, std::size_t cols) {
  std::vector<T> t(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) t[c * rows + r] = B[r * cols + c];
  return t;
}

struct ConvGeometry {
  std::size_t nb, cin, cout, kh, kw;
  std::ptrdiff_t h, w;

  std::pair<std::ptrdiff_t, std::ptrdiff_t> row_range(std::ptrdiff_t d) const {
    return {std::max<std::ptrdiff_t>(0, -d), std::min(h, h - d)};
  }
  std::pair<std::ptrdiff_t, std::ptrdiff_t> col_range(std::ptrdiff_t d) const {
    return {std::max<std::ptrdiff_t>(0, -d), std::min(w, w - d)};
  }

  // f(in_plane_offset, out_plane_offset, weight_index, dy, dx) for every
  // (batch, cout, cin, ky, kx) tap, in a fixed order.
  template <class F>
  void for_each_tap(F&& f) const {
    const auto plane = static_cast<std::size_t>(h * w);
    const auto ph = static_cast<std::ptrdiff_t>(kh / 2), pw = static_cast<std::ptrdiff_t>(kw / 2);
    for (std::size_t b = 0; b < nb; ++b)
      for (std::size_t co = 0; co < cout; ++co)
        for (std::size_t ci = 0; ci < cin; ++ci)
          for (std::size_t ky = 0; ky < kh; ++ky)
            for (std::size_t kx = 0; kx < kw; ++kx)
              f((b * cin + ci) * plane, (b * cout + co) * plane, ((co * cin + ci) * kh + ky) * kw + kx,
                static_cast<std::ptrdiff_t>(ky) - ph, static_cast<std::ptrdiff_t>(kx) - pw);
  }
};

struct AxisTable {
  std::vector<std::size_t> lo, hi;
  std::vector<double> frac;
};

// align-corners=false sample positions for a 2x upsample of `n` cells.
AxisTable bilinear_table(std::size_t n) {
  AxisTable t;
  const std::size_t m = 2 * n;
  t.lo.resize(m);
  t.hi.resize(m);
  t.frac.resize(m);
  for (std::size_t o = 0; o < m; ++o) {
    double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
    if (src < 0) src = 0;
    auto i0 = static_cast<std::size_t>(std::floor(src));
    if (i0 > n - 1) i0 = n - 1;
    t.lo[o] = i0;
    t.hi[o] = std::min(i0 + 1, n - 1);
    t.frac[o] = src - static_cast<double>(i0);
  }
  return t;
}

}  // namespace

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ']';
  return os.str();
}

void set_debug_checks(bool enabled) { g_debug_checks = enabled; }
bool debug_checks() { return g_debug_checks; }

// ---------------------------------------------------------------------------
// Tensor members

template <class T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <class T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  const std::size_t n = ad::numel(shape);
  auto node = new_node<T>(std::move(shape), std::vector<T>(n, value));
  node->requires_grad = requires_grad;
  return Tensor(node);
}

template <class T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
  if (ad::numel(shape) != values.size()) {
    throw ShapeError("Tensor::from: shape " + ad::to_string(shape) + " needs " +
                     std::to_string(ad::numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  auto node = new_node<T>(std::move(shape), std::move(values));
  node->requires_grad = requires_grad;
  return Tensor(node);
}

template <class T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return from(Shape{}, {value}, requires_grad);
}

template <class T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item: tensor of shape " + ad::to_string(shape()) + " is not a scalar");
  return node_->value[0];
}

template <class T>
std::span<const T> Tensor<T>::grad() const {
  return node_->ensure_grad();
}

template <class T>
void Tensor<T>::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
}

template <class T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor::from(shape(), node_->value, false);
}

template <class T>
void Tensor<T>::backward() const {
  if (numel() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " + ad::to_string(shape()));
  }
  if (!node_->requires_grad) return;

  // Iterative post-order DFS; `order` ends up topologically sorted with the
  // root last.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node<T>* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->ensure_grad()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
  for (Node<T>* n : order) {
    if (!n->backward_fn) continue;
    n->backward_fn = nullptr;
    n->parents.clear();
    n->grad.clear();
    n->grad.shrink_to_fit();
  }
}

// ---------------------------------------------------------------------------
// Element-wise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      a, b, "add", [](T x, T y) { return x + y; }, [](T, T, T) { return T(1); },
      [](T, T, T) { return T(1); });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T, T, T) { return T(1); },
      [](T, T, T) { return T(-1); });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y, T) { return y; },
      [](T x, T, T) { return x; });
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      a, b, "div", [](T x, T y) { return x / y; }, [](T, T y, T) { return T(1) / y; },
      [](T, T y, T o) { return -o / y; });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  return unary_op(x, "scale", [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <class T>
Tensor<T> log(const Tensor<T>& x) {
  return unary_op(x, "log", [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <class T>
Tensor<T> exp(const Tensor<T>& x) {
  return unary_op(x, "exp", [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return unary_op(
      x, "relu", [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> softplus(const Tensor<T>& x) {
  return unary_op(
      x, "softplus",
      [](T v) { return v > T(0) ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); },
      [](T v, T) { return T(1) / (T(1) + std::exp(-v)); });
}

// ---------------------------------------------------------------------------
// Matrix products

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  check_finite(a, "matmul");
  check_finite(b, "matmul");
  if (a.rank() == 3 && b.rank() == 3) return bmm(a, b);
  if (a.rank() < 2 || b.rank() != 2 || a.shape().back() != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  const std::size_t k = b.dim(0), n = b.dim(1);
  const std::size_t m = a.numel() / k;
  Shape out_shape = a.shape();
  out_shape.back() = n;
  std::vector<T> out(m * n, T(0));
  gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  auto node = new_node<T>(out_shape, std::move(out));
  if (any_grad<T>({&a, &b})) {
    node->requires_grad = true;
    node->parents = {a.node(), b.node()};
    auto na = a.node(), nb = b.node();
    node->backward_fn = [na, nb, m, k, n](Node<T>& self) {
      if (na->requires_grad) {
        auto bt = transposed(nb->value.data(), k, n);
        gemm_nn(self.grad.data(), bt.data(), na->ensure_grad().data(), m, n, k);
      }
      if (nb->requires_grad) gemm_tn(na->value.data(), self.grad.data(), nb->ensure_grad().data(), m, k, n);
    };
  }
  return Tensor<T>(node);
}

template <class T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b) {
  check_finite(a, "bmm");
  check_finite(b, "bmm");
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
    throw ShapeError("bmm: incompatible shapes " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  const std::size_t bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  std::vector<T> out(bs * m * n, T(0));
  for (std::size_t i = 0; i < bs; ++i) {
    gemm_nn(a.data().data() + i * m * k, b.data().data() + i * k * n, out.data() + i * m * n, m, k, n);
  }
  auto node = new_node<T>(Shape{bs, m, n}, std::move(out));
  if (any_grad<T>({&a, &b})) {
    node->requires_grad = true;
    node->parents = {a.node(), b.node()};
    auto na = a.node(), nb = b.node();
    node->backward_fn = [na, nb, bs, m, k, n](Node<T>& self) {
      for (std::size_t i = 0; i < bs; ++i) {
        const T* g = self.grad.data() + i * m * n;
        if (na->requires_grad) {
          auto bt = transposed(nb->value.data() + i * k * n, k, n);
          gemm_nn(g, bt.data(), na->ensure_grad().data() + i * m * k, m, n, k);
        }
        if (nb->requires_grad) {
          gemm_tn(na->value.data() + i * m * k, g, nb->ensure_grad().data() + i * k * n, m, k, n);
        }
      }
    };
  }
  return Tensor<T>(node);
}

// ---------------------------------------------------------------------------
// Softmax family

template <class T>
Tensor<T> softmax(const Tensor<T>& x) {
  check_finite(x, "softmax");
  if (x.rank() == 0) throw ShapeError("softmax: needs rank >= 1");
  const std::size_t n = x.shape().back();
  const std::size_t rows = n ? x.numel() / n : 0;
  std::vector<T> out(x.numel());
  const T* in = x.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xi = in + r * n;
    T* yi = out.data() + r * n;
    const T mx = *std::max_element(xi, xi + n);
    T s = 0;
    for (std::size_t j = 0; j < n; ++j) {
      yi[j] = std::exp(xi[j] - mx);
      s += yi[j];
    }
    for (std::size_t j = 0; j < n; ++j) yi[j] /= s;
  }
  auto node = new_node<T>(x.shape(), std::move(out));
  if (x.requires_grad()) {
    node->requires_grad = true;
    node->parents = {x.node()};
    auto nx = x.node();
    node->backward_fn = [nx, rows, n](Node<T>& self) {
      auto& gx = nx->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const T* y = self.value.data() + r * n;
        const T* g = self.grad.data() + r * n;
        T dot = 0;
        for (std::size_t j = 0; j < n; ++j) dot += g[j] * y[j];
        for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += y[j] * (g[j] - dot);
      }
    };
  }
  return Tensor<T>(node);
}

template <class T>
Tensor<T> log_softmax(const Tensor<T>& x) {
  check_finite(x, "log_softmax");
  if (x.rank() == 0) throw ShapeError("log_softmax: needs rank >= 1");
  const std::size_t n = x.shape().back();
  const std::size_t rows = n ? x.numel() / n : 0;
  std::vector<T> out(x.numel());
  const T* in = x.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xi = in + r * n;
    T* yi = out.data() + r * n;
    const T mx = *std::max_element(xi, xi + n);
    T s = 0;
    for (std::size_t j = 0; j < n; ++j) s += std::exp(xi[j] - mx);
    const T lse = mx + std::log(s);
    for (std::size_t j = 0; j < n; ++j) yi[j] = xi[j] - lse;
  }
  auto node = new_node<T>(x.shape(), std::move(out));
  if (x.requires_grad()) {
    node->requires_grad = true;
    node->parents = {x.node()};
    auto nx = x.node();
    node->backward_fn = [nx, rows, n](Node<T>& self) {
      auto& gx = nx->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const T* y = self.value.data() + r * n;
        const T* g = self.grad.data() + r * n;
        T gs = 0;
        for (std::size_t j = 0; j < n; ++j) gs += g[j];
        for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += g[j] - std::exp(y[j]) * gs;
      }
    };
  }
  return Tensor<T>(node);
}

// ---------------------------------------------------------------------------
// Convolution and resampling

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  check_finite(x, "conv2d");
  check_finite(weight, "conv2d");
  check_finite(bias, "conv2d");
  const bool batched = x.rank() == 4;
  if ((x.rank() != 3 && !batched) || weight.rank() != 4 || bias.rank() != 1) {
    throw ShapeError("conv2d: expected x [Cin,H,W] or [N,Cin,H,W], weight [Cout,Cin,kh,kw], bias [Cout]; got " +
                     to_string(x.shape()) + ", " + to_string(weight.shape()) + ", " + to_string(bias.shape()));
  }
  const std::size_t nb = batched ? x.dim(0) : 1;
  const std::size_t cin = x.dim(batched ? 1 : 0);
  const std::size_t h = x.dim(batched ? 2 : 1);
  const std::size_t w = x.dim(batched ? 3 : 2);
  const std::size_t cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (weight.dim(1) != cin || bias.dim(0) != cout || kh % 2 == 0 || kw % 2 == 0) {
    throw ShapeError("conv2d: weight " + to_string(weight.shape()) + " / bias " + to_string(bias.shape()) +
                     " do not match input " + to_string(x.shape()) + " (odd kernels only)");
  }
  const ConvGeometry geo{nb, cin, cout, kh, kw, static_cast<std::ptrdiff_t>(h), static_cast<std::ptrdiff_t>(w)};
  const std::size_t plane = h * w;

  std::vector<T> out(nb * cout * plane);
  const T* pb = bias.data().data();
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t co = 0; co < cout; ++co)
      std::fill_n(out.begin() + static_cast<std::ptrdiff_t>((b * cout + co) * plane), plane, pb[co]);
  const T* px = x.data().data();
  const T* pwt = weight.data().data();
  const std::ptrdiff_t W = geo.w;
  geo.for_each_tap([&](std::size_t in_off, std::size_t out_off, std::size_t wi, std::ptrdiff_t dy, std::ptrdiff_t dx) {
    const T wv = pwt[wi];
    const auto [y0, y1] = geo.row_range(dy);
    const auto [x0, x1] = geo.col_range(dx);
    for (std::ptrdiff_t y = y0; y < y1; ++y) {
      const T* src = px + in_off + (y + dy) * W + dx;
      T* dst = out.data() + out_off + y * W;
      for (std::ptrdiff_t xx = x0; xx < x1; ++xx) dst[xx] += wv * src[xx];
    }
  });

  Shape out_shape = batched ? Shape{nb, cout, h, w} : Shape{cout, h, w};
  auto node = new_node<T>(out_shape, std::move(out));
  if (any_grad<T>({&x, &weight, &bias})) {
    node->requires_grad = true;
    node->parents = {x.node(), weight.node(), bias.node()};
    auto nx = x.node(), nw = weight.node(), nbias = bias.node();
    node->backward_fn = [nx, nw, nbias, geo, nb, cout, plane](Node<T>& self) {
      const std::ptrdiff_t W = geo.w;
      const T* g = self.grad.data();
      T* gx = nx->requires_grad ? nx->ensure_grad().data() : nullptr;
      T* gw = nw->requires_grad ? nw->ensure_grad().data() : nullptr;
      const T* xv = nx->value.data();
      const T* wv = nw->value.data();
      if (nbias->requires_grad) {
        auto& gb = nbias->ensure_grad();
        for (std::size_t b = 0; b < nb; ++b)
          for (std::size_t co = 0; co < cout; ++co) {
            T s = 0;
            const T* gp = g + (b * cout + co) * plane;
            for (std::size_t i = 0; i < plane; ++i) s += gp[i];
            gb[co] += s;
          }
      }
      if (!gx && !gw) return;
      geo.for_each_tap([&](std::size_t in_off, std::size_t out_off, std::size_t wi, std::ptrdiff_t dy,
                           std::ptrdiff_t dx) {
        const auto [y0, y1] = geo.row_range(dy);
        const auto [x0, x1] = geo.col_range(dx);
        T acc = 0;
        for (std::ptrdiff_t y = y0; y < y1; ++y) {
          const T* gp = g + out_off + y * W;
          if (gx) {
            T* dst = gx + in_off + (y + dy) * W + dx;
            const T wvv = wv[wi];
            for (std::ptrdiff_t xx = x0; xx < x1; ++xx) dst[xx] += wvv * gp[xx];
          }
          if (gw) {
            const T* src = xv + in_off + (y + dy) * W + dx;
            for (std::ptrdiff_t xx = x0; xx < x1; ++xx) acc += gp[xx] * src[xx];
          }
        }
        if (gw) gw[wi] += acc;
      });
    };
  }
  return Tensor<T>(node);
}

template <class T>
Tensor<T> upsample2x(const Tensor<T>& x, Upsample mode) {
  check_finite(x, "upsample2x");
  if (x.rank() < 2) throw ShapeError("upsample2x: needs rank >= 2, got " + to_string(x.shape()));
  const std::size_t h = x.dim(x.rank() - 2), w = x.dim(x.rank() - 1);
  const std::size_t planes = x.numel() / (h * w);
  const std::size_t oh = 2 * h, ow = 2 * w;
  Shape out_shape = x.shape();
  out_shape[out_shape.size() - 2] = oh;
  out_shape.back() = ow;

  AxisTable ty, tx;
  if (mode == Upsample::bilinear) {
    ty = bilinear_table(h);
    tx = bilinear_table(w);
  }
  std::vector<T> out(planes * oh * ow);
  const T* in = x.data().data();
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = in + p * h * w;
    T* dst = out.data() + p * oh * ow;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        if (mode == Upsample::nearest) {
          dst[oy * ow + ox] = src[(oy / 2) * w + ox / 2];
        } else {
          const T fy = static_cast<T>(ty.frac[oy]), fx = static_cast<T>(tx.frac[ox]);
          const T v00 = src[ty.lo[oy] * w + tx.lo[ox]], v01 = src[ty.lo[oy] * w + tx.hi[ox]];
          const T v10 = src[ty.hi[oy] * w + tx.lo[ox]], v11 = src[ty.hi[oy] * w + tx.hi[ox]];
          dst[oy * ow + ox] = (T(1) - fy) * ((T(1) - fx) * v00 + fx * v01) + fy * ((T(1) - fx) * v10 + fx * v11);
        }
      }
    }
  }
  auto node = new_node<T>(out_shape, std::move(out));
  if (x.requires_grad()) {
    node->requires_grad = true;
    node->parents = {x.node()};
    auto nx = x.node();
    node->backward_fn = [nx, mode, ty, tx, planes, h, w, oh, ow](Node<T>& self) {
      auto& gx = nx->ensure_grad();
      for (std::size_t p = 0; p < planes; ++p) {
        T* gsrc = gx.data() + p * h * w;
        const T* g = self.grad.data() + p * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const T gv = g[oy * ow + ox];
            if (mode == Upsample::nearest) {
              gsrc[(oy / 2) * w + ox / 2] += gv;
            } else {
              const T fy = static_cast<T>(ty.frac[oy]), fx = static_cast<T>(tx.frac[ox]);
              gsrc[ty.lo[oy] * w + tx.lo[ox]] += gv * (T(1) - fy) * (T(1) - fx);
              gsrc[ty.lo[oy] * w + tx.hi[ox]] += gv * (T(1) - fy) * fx;
              gsrc[ty.hi[oy] * w + tx.lo[ox]] += gv * fy * (T(1) - fx);
              gsrc[ty.hi[oy] * w + tx.hi[ox]] += gv * fy * fx;
            }
          }
        }
      }
    };
  }
  return Tensor<T>(node);
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  auto node = new_node<T>(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
  if (x.requires_grad()) {
    node->requires_grad = true;
    node->parents = {x.node()};
    auto nx = x.node();
    node->backward_fn = [nx](Node<T>& self) {
      auto& gx = nx->ensure_grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
    };
  }
  return Tensor<T>(node);
}

template <class T>
Tensor<T> transpose(const Tensor<T>& x) {
  if (x.rank() < 2) throw ShapeError("transpose: needs rank >= 2, got " + to_string(x.shape()));
  const std::size_t m = x.dim(x.rank() - 2), n = x.dim(x.rank() - 1);
  const std::size_t batch = x.numel() / (m * n);
  Shape out_shape = x.shape();
  std::swap(out_shape[out_shape.size() - 2], out_shape.back());
  std::vector<T> out(x.numel());
  for (std::size_t b = 0; b < batch; ++b) {
    auto t = transposed(x.data().data() + b * m * n, m, n);
    std::copy(t.begin(), t.end(), out.begin() + static_cast<std::ptrdiff_t>(b * m * n));
  }
  auto node = new_node<T>(out_shape, std::move(out));
  if (x.requires_grad()) {
    node->requires_grad = true;
    node->parents = {x.node()};
    auto nx = x.node();
    node->backward_fn = [nx, batch, m, n](Node<T>& self) {
      auto& gx = nx->ensure_grad();
      for (std::size_t b = 0; b < batch; ++b) {
        const T* g = self.grad.data() + b * m * n;
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) gx[b * m * n + i * n + j] += g[j * m + i];
      }
    };
  }
  return Tensor<T>(node);
}

template <class T>
Tensor<T> masked_fill(const Tensor<T>& x, const Mask& mask, T value) {
  if (numel(mask.shape) != mask.bits.size()) throw ShapeError("masked_fill: mask bits do not match its shape");
  if (broadcast_shape(x.shape(), mask.shape, "masked_fill") != x.shape()) {
    throw ShapeError("masked_fill: mask " + to_string(mask.shape) + " does not broadcast to " +
                     to_string(x.shape()));
  }
  const auto sx = contiguous_strides(x.shape());
  const auto sm = broadcast_strides(mask.shape, x.shape());
  std::vector<T> out(x.data().begin(), x.data().end());
  for_each_broadcast(x.shape(), sx, sm, [&](std::size_t o, std::size_t, std::size_t im) {
    if (mask.bits[im]) out[o] = value;
  });
  auto node = new_node<T>(x.shape(), std::move(out));
  if (x.requires_grad()) {
    node->requires_grad = true;
    node->parents = {x.node()};
    auto nx = x.node();
    node->backward_fn = [nx, mask, sx, sm](Node<T>& self) {
      auto& gx = nx->ensure_grad();
      for_each_broadcast(self.shape, sx, sm, [&](std::size_t o, std::size_t, std::size_t im) {
        if (!mask.bits[im]) gx[o] += self.grad[o];
      });
    };
  }
  return Tensor<T>(node);
}

namespace {

template <class T>
Tensor<T> reduce_sum(const Tensor<T>& x, std::vector<std::size_t> axes, bool keepdim, T factor, const char* name) {
  check_finite(x, name);
  const std::size_t r = x.rank();
  if (axes.empty()) {
    axes.resize(r);
    std::iota(axes.begin(), axes.end(), std::size_t{0});
  }
  std::vector<bool> reduced(r, false);
  for (std::size_t a : axes) {
    if (a >= r) throw ShapeError(std::string(name) + ": axis " + std::to_string(a) + " out of range for " + to_string(x.shape()));
    reduced[a] = true;
  }
  Shape kept(r);
  Shape out_shape;
  for (std::size_t d = 0; d < r; ++d) {
    kept[d] = reduced[d] ? 1 : x.dim(d);
    if (!reduced[d] || keepdim) out_shape.push_back(kept[d]);
  }
  const auto sx = contiguous_strides(x.shape());
  const auto so = broadcast_strides(kept, x.shape());
  std::vector<T> out(numel(kept), T(0));
  const T* in = x.data().data();
  for_each_broadcast(x.shape(), sx, so, [&](std::size_t, std::size_t ix, std::size_t io) { out[io] += in[ix]; });
  if (factor != T(1))
    for (T& v : out) v *= factor;
  auto node = new_node<T>(out_shape, std::move(out));
  if (x.requires_grad()) {
    node->requires_grad = true;
    node->parents = {x.node()};
    auto nx = x.node();
    Shape xs = x.shape();
    node->backward_fn = [nx, xs, sx, so, factor](Node<T>& self) {
      auto& gx = nx->ensure_grad();
      for_each_broadcast(xs, sx, so, [&](std::size_t, std::size_t ix, std::size_t io) {
        gx[ix] += self.grad[io] * factor;
      });
    };
  }
  return Tensor<T>(node);
}

}  // namespace

template <class T>
Tensor<T> sum(const Tensor<T>& x, std::vector<std::size_t> axes, bool keepdim) {
  return reduce_sum(x, std::move(axes), keepdim, T(1), "sum");
}

template <class T>
Tensor<T> mean(const Tensor<T>& x, std::vector<std::size_t> axes, bool keepdim) {
  std::size_t count = 1;
  if (axes.empty()) {
    count = x.numel();
  } else {
    for (std::size_t a : axes) count *= a < x.rank() ? x.dim(a) : 1;
  }
  if (count == 0) throw ShapeError("mean: reduction over an empty extent");
  return reduce_sum(x, std::move(axes), keepdim, T(1) / static_cast<T>(count), "mean");
}

template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> rows) {
  if (x.rank() != 2) throw ShapeError("gather_rows: expected [N, K], got " + to_string(x.shape()));
  const std::size_t n = x.dim(0), k = x.dim(1);
  std::vector<T> out(rows.size() * k);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n) throw ShapeError("gather_rows: row " + std::to_string(rows[i]) + " out of range for " + to_string(x.shape()));
    std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(rows[i] * k), k, out.begin() + static_cast<std::ptrdiff_t>(i * k));
  }
  auto node = new_node<T>(Shape{rows.size(), k}, std::move(out));
  if (x.requires_grad()) {
    node->requires_grad = true;
    node->parents = {x.node()};
    auto nx = x.node();
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    node->backward_fn = [nx, idx, k](Node<T>& self) {
      auto& gx = nx->ensure_grad();
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < k; ++j) gx[idx[i] * k + j] += self.grad[i * k + j];
    };
  }
  return Tensor<T>(node);
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Shape lead = parts[0].shape();
  if (lead.empty()) throw ShapeError("concat: scalars cannot be concatenated");
  lead.pop_back();
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  bool needs_grad = false;
  for (const auto& p : parts) {
    Shape l = p.shape();
    l.pop_back();
    if (l != lead) throw ShapeError("concat: leading dims differ: " + to_string(parts[0].shape()) + " vs " + to_string(p.shape()));
    widths.push_back(p.shape().back());
    total += p.shape().back();
    needs_grad = needs_grad || p.requires_grad();
  }
  const std::size_t rows = numel(lead);
  std::vector<T> out(rows * total);
  std::size_t off = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const T* src = parts[i].data().data();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(src + r * widths[i], widths[i], out.begin() + static_cast<std::ptrdiff_t>(r * total + off));
    off += widths[i];
  }
  Shape out_shape = lead;
  out_shape.push_back(total);
  auto node = new_node<T>(out_shape, std::move(out));
  if (needs_grad) {
    node->requires_grad = true;
    std::vector<NodePtr<T>> ps;
    for (const auto& p : parts) ps.push_back(p.node());
    node->parents = ps;
    node->backward_fn = [ps, widths, rows, total](Node<T>& self) {
      std::size_t o = 0;
      for (std::size_t i = 0; i < ps.size(); ++i) {
        if (ps[i]->requires_grad) {
          auto& g = ps[i]->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < widths[i]; ++j) g[r * widths[i] + j] += self.grad[r * total + o + j];
        }
        o += widths[i];
      }
    };
  }
  return Tensor<T>(node);
}

// ---------------------------------------------------------------------------

#define MICROPROBE_INSTANTIATE(T)                                                               \
  template class Tensor<T>;                                                                    \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> scale(const Tensor<T>&, T);                                               \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> bmm(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> softmax(const Tensor<T>&);                                                \
  template Tensor<T> log_softmax(const Tensor<T>&);                                            \
  template Tensor<T> log(const Tensor<T>&);                                                    \
  template Tensor<T> exp(const Tensor<T>&);                                                    \
  template Tensor<T> relu(const Tensor<T>&);                                                   \
  template Tensor<T> softplus(const Tensor<T>&);                                               \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);             \
  template Tensor<T> upsample2x(const Tensor<T>&, Upsample);                                   \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                         \
  template Tensor<T> transpose(const Tensor<T>&);                                              \
  template Tensor<T> masked_fill(const Tensor<T>&, const Mask&, T);                            \
  template Tensor<T> sum(const Tensor<T>&, std::vector<std::size_t>, bool);                    \
  template Tensor<T> mean(const Tensor<T>&, std::vector<std::size_t>, bool);                   \
  template Tensor<T> gather_rows(const Tensor<T>&, std::span<const std::size_t>);              \
  template Tensor<T> concat(const std::vector<Tensor<T>>&);

MICROPROBE_INSTANTIATE(float)
MICROPROBE_INSTANTIATE(double)

#undef MICROPROBE_INSTANTIATE

}  // namespace microprobe::ad
