#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "caswit/error.hpp"

namespace caswit {

// Shapes are row-major everywhere; a rank-0 shape is a scalar with one
// element. Token order for attention is row-major over (height, width).
using Shape = std::vector<int>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Thread-local autograd switch. Graph construction is skipped while off.
bool grad_enabled();
void set_grad_enabled(bool on);

struct NoGradGuard {
  NoGradGuard() : prev_(grad_enabled()) { set_grad_enabled(false); }
  ~NoGradGuard() { set_grad_enabled(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode<T>>> parents;
  std::function<void(const TensorNode<T>&)> backward_fn;
};

template <typename T>
void accumulate_grad(TensorNode<T>& node, const T* g, std::size_t n);

// Value-semantics handle onto a shared graph node. Copies alias the node;
// parameters are shared across modules by copying handles.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<T> data,
                          bool requires_grad = false);
  static Tensor randn(Shape shape, T stddev, std::mt19937& rng,
                      bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  std::size_t numel() const { return node_->data.size(); }

  std::vector<T>& data() { return node_->data; }
  const std::vector<T>& data() const { return node_->data; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::vector<T>& grad();
  const std::vector<T>& grad() const;
  void zero_grad();

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  T item() const;
  T at(std::initializer_list<int> idx) const;

  // Reverse-mode sweep from a scalar root; grad accumulates additively on
  // every requires_grad ancestor.
  void backward() const;

  std::shared_ptr<TensorNode<T>> node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<TensorNode<T>> node)
      : node_(std::move(node)) {}
  std::shared_ptr<TensorNode<T>> node_;

  template <typename U>
  friend Tensor<U> wrap_node(std::shared_ptr<TensorNode<U>> node);
};

template <typename T>
Tensor<T> wrap_node(std::shared_ptr<TensorNode<T>> node) {
  return Tensor<T>(std::move(node));
}

namespace detail {
// Builds an op result. The graph edge and backward_fn are attached only
// when grad mode is on and some parent requires grad.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data,
                      const std::vector<Tensor<T>>& parents,
                      std::function<void(const TensorNode<T>&)> backward_fn);
}  // namespace detail

// ---- elementwise / linear algebra -----------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T s);
// x * s where s is a scalar (shape []) tensor; gradient flows into s.
template <typename T>
Tensor<T> scale_t(const Tensor<T>& x, const Tensor<T>& s);
// x[..., C] + b[C], broadcast over leading dims.
template <typename T>
Tensor<T> add_rowwise(const Tensor<T>& x, const Tensor<T>& b);

template <typename T>
Tensor<T> tanh(const Tensor<T>& x);
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);  // [m,k]x[k,n]
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b);  // [B,m,k]x[B,k,n]

// ---- shape ops -------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <typename T>
Tensor<T> transpose(const Tensor<T>& x, int axis_a, int axis_b);
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, int axis);
// Repeats the whole array `times` along axis 0: [x; x; ...].
template <typename T>
Tensor<T> tile0(const Tensor<T>& x, int times);
// Repeats each axis-0 slice `times` consecutively.
template <typename T>
Tensor<T> repeat_interleave0(const Tensor<T>& x, int times);
// out[i] = table[index[i]] over axis-0 rows; backward scatter-adds.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, const std::vector<int>& index);
// Cyclic 2D shift of an [H,W,C] map.
template <typename T>
Tensor<T> roll2d(const Tensor<T>& x, int shift_h, int shift_w);

// ---- reductions / normalization -------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& x);   // -> shape []
template <typename T>
Tensor<T> mean(const Tensor<T>& x);  // -> shape []
template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x);
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps);

// ---- spatial ops on [H,W,C] maps -------------------------------------------

template <typename T>
Tensor<T> avg_pool2x2(const Tensor<T>& x);
template <typename T>
Tensor<T> adaptive_avg_pool2d(const Tensor<T>& x, int out_h, int out_w);
template <typename T>
Tensor<T> upsample_nearest2d(const Tensor<T>& x, int factor);
template <typename T>
Tensor<T> upsample_bilinear2d(const Tensor<T>& x, int out_h, int out_w);
// Zero-padded 3x3 im2col: [H,W,C] -> [H*W, 9*C].
template <typename T>
Tensor<T> unfold3x3(const Tensor<T>& x);
// [H,W,C*s^2] -> [H*s,W*s,C]; channel block (i*s+j) of cell (p,q) lands at
// pixel (p*s+i, q*s+j).
template <typename T>
Tensor<T> pixel_shuffle(const Tensor<T>& x, int stride);
template <typename T>
Tensor<T> space_to_depth(const Tensor<T>& x, int stride);

// ---- composite layers -------------------------------------------------------

// x[...,C] @ w[C,D] + b[D]; b may be undefined for no bias.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);
template <typename T>
Tensor<T> conv1x1(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);
// w is [9*C_in, C_out].
template <typename T>
Tensor<T> conv3x3(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

// Rows of x[N,C] where mask is set are replaced by `token`[C]; gradient
// flows into the token from masked rows and into x from the rest.
template <typename T>
Tensor<T> mask_rows(const Tensor<T>& x, const std::vector<bool>& mask,
                    const Tensor<T>& token);

}  // namespace caswit
