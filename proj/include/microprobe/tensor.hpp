#pragma once

// Dense row-major tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a cheap handle to a shared node. Every op allocates a new node
// holding its value; when any input requires a gradient the node also
// records its parents and a closure that propagates the output gradient
// back to them. backward() walks that graph once and then drops the
// recorded closures of intermediate nodes, so each forward pass builds a
// fresh tape. Leaves (parameters, constant inputs) keep their gradients
// until zero_grad().
//
// Instantiated for float (training) and double (gradient checks).

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace microprobe::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Enables the finiteness check on op inputs. On by default in debug builds.
void set_debug_checks(bool enabled);
bool debug_checks();

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until a gradient reaches the node
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const T> data() const { return node_->value; }
  /// Direct write access; meant for leaves (initialisation, optimiser steps).
  std::span<T> mutable_data() { return node_->value; }
  T item() const;
  T operator[](std::size_t i) const { return node_->value[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return !node_->backward_fn; }
  /// Gradient of a leaf; all zeros if nothing has been accumulated yet.
  std::span<const T> grad() const;
  void zero_grad();

  /// Reverse sweep from this scalar. Throws ShapeError for non-scalars.
  void backward() const;

  /// Same values, no history.
  Tensor detach() const;

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Boolean mask with its own shape, broadcast against the filled tensor.
struct Mask {
  Shape shape;
  std::vector<std::uint8_t> bits;
};

// Element-wise binary ops broadcast numpy-style (right-aligned, size-1 dims
// stretch). All probe math only needs leading batch dims and trailing
// singletons, but the general rule costs nothing extra here.
template <class T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> scale(const Tensor<T>& x, T factor);

/// [..., m, k] x [k, n] -> [..., m, n]; rank-3 inputs with equal batch dims
/// multiply batch-wise.
template <class T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
/// Strict batched form: [b, m, k] x [b, k, n].
template <class T> Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b);

template <class T> Tensor<T> softmax(const Tensor<T>& x);      // over last dim
template <class T> Tensor<T> log_softmax(const Tensor<T>& x);  // over last dim
template <class T> Tensor<T> log(const Tensor<T>& x);
template <class T> Tensor<T> exp(const Tensor<T>& x);
template <class T> Tensor<T> relu(const Tensor<T>& x);
template <class T> Tensor<T> softplus(const Tensor<T>& x);

/// [Cin, H, W] or [N, Cin, H, W] with weight [Cout, Cin, kh, kw] and bias
/// [Cout]; stride 1, zero padding of kh/2 and kw/2 (odd kernels keep size).
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

enum class Upsample { nearest, bilinear };
/// Doubles the last two dims. Bilinear uses the align-corners=false grid.
template <class T> Tensor<T> upsample2x(const Tensor<T>& x, Upsample mode);

template <class T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <class T> Tensor<T> transpose(const Tensor<T>& x);  // last two dims
template <class T> Tensor<T> masked_fill(const Tensor<T>& x, const Mask& mask, T value);

/// Empty axes reduces everything to a scalar.
template <class T>
Tensor<T> sum(const Tensor<T>& x, std::vector<std::size_t> axes = {}, bool keepdim = false);
template <class T>
Tensor<T> mean(const Tensor<T>& x, std::vector<std::size_t> axes = {}, bool keepdim = false);

/// Rows of a [N, K] tensor picked by index -> [P, K].
template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> rows);
/// Concatenation along the last dim; leading dims must agree.
template <class T> Tensor<T> concat(const std::vector<Tensor<T>>& parts);

template <class T> Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <class T> Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <class T> Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <class T> Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }

}  // namespace microprobe::ad
