#include "caswit/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace caswit {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {
thread_local bool g_grad_enabled = true;

void check_shape(const Shape& shape) {
  for (int d : shape) {
    if (d <= 0) {
      throw Error(ErrorKind::Dimension,
                  "non-positive dimension in shape " + shape_str(shape));
    }
  }
}

std::vector<std::size_t> row_strides(const Shape& shape) {
  std::vector<std::size_t> s(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) {
    s[i] = s[i + 1] * static_cast<std::size_t>(shape[i + 1]);
  }
  return s;
}

// C[m,n] += A[m,k] * B[k,n]
template <typename T>
void mm_acc(const T* a, const T* b, T* c, int m, int k, int n) {
  const long long work = 1LL * m * k * n;
#pragma omp parallel for schedule(static) if (work > 262144)
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<std::size_t>(i) * k;
    T* crow = c + static_cast<std::size_t>(i) * n;
    for (int l = 0; l < k; ++l) {
      const T av = arow[l];
      const T* brow = b + static_cast<std::size_t>(l) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
std::vector<T> transpose2d(const T* x, int rows, int cols) {
  std::vector<T> out(static_cast<std::size_t>(rows) * cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j)
      out[static_cast<std::size_t>(j) * rows + i] =
          x[static_cast<std::size_t>(i) * cols + j];
  return out;
}
}  // namespace

bool grad_enabled() { return g_grad_enabled; }
void set_grad_enabled(bool on) { g_grad_enabled = on; }

template <typename T>
void accumulate_grad(TensorNode<T>& node, const T* g, std::size_t n) {
  if (node.grad.empty()) node.grad.assign(node.data.size(), T(0));
  for (std::size_t i = 0; i < n; ++i) node.grad[i] += g[i];
}

// ---- Tensor ----------------------------------------------------------------

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  check_shape(shape);
  auto node = std::make_shared<TensorNode<T>>();
  node->data.assign(shape_numel(shape), value);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return wrap_node(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::from_data(Shape shape, std::vector<T> data,
                               bool requires_grad) {
  check_shape(shape);
  if (shape_numel(shape) != data.size()) {
    throw Error(ErrorKind::Dimension,
                "data length " + std::to_string(data.size()) +
                    " does not match shape " + shape_str(shape));
  }
  auto node = std::make_shared<TensorNode<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  return wrap_node(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::randn(Shape shape, T stddev, std::mt19937& rng,
                           bool requires_grad) {
  check_shape(shape);
  std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
  std::vector<T> data(shape_numel(shape));
  for (auto& v : data) v = static_cast<T>(dist(rng));
  return from_data(std::move(shape), std::move(data), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  auto node = std::make_shared<TensorNode<T>>();
  node->data.assign(1, value);
  node->requires_grad = requires_grad;
  return wrap_node(std::move(node));
}

template <typename T>
std::vector<T>& Tensor<T>::grad() {
  if (node_->grad.empty()) node_->grad.assign(node_->data.size(), T(0));
  return node_->grad;
}

template <typename T>
const std::vector<T>& Tensor<T>::grad() const {
  if (node_->grad.empty()) node_->grad.assign(node_->data.size(), T(0));
  return node_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
  node_->grad.assign(node_->data.size(), T(0));
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) {
    throw Error(ErrorKind::Usage,
                "item() on non-scalar tensor " + shape_str(shape()));
  }
  return node_->data[0];
}

template <typename T>
T Tensor<T>::at(std::initializer_list<int> idx) const {
  if (idx.size() != node_->shape.size()) {
    throw Error(ErrorKind::Usage, "at(): rank mismatch");
  }
  const auto strides = row_strides(node_->shape);
  std::size_t flat = 0;
  std::size_t k = 0;
  for (int i : idx) {
    if (i < 0 || i >= node_->shape[k]) {
      throw Error(ErrorKind::Usage, "at(): index out of range");
    }
    flat += static_cast<std::size_t>(i) * strides[k];
    ++k;
  }
  return node_->data[flat];
}

template <typename T>
void Tensor<T>::backward() const {
  if (!defined() || numel() != 1 || !node_->shape.empty()) {
    throw Error(ErrorKind::Usage,
                "backward() requires a scalar (shape []) root");
  }
  if (!node_->requires_grad) {
    throw Error(ErrorKind::Usage, "backward() root does not require grad");
  }
  // Post-order DFS: ancestors first, root last; each node visited once.
  std::vector<TensorNode<T>*> order;
  std::unordered_set<const TensorNode<T>*> seen;
  std::vector<std::pair<TensorNode<T>*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      TensorNode<T>* p = n->parents[next].get();
      ++next;
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  node_->grad.assign(1, T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode<T>* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

namespace detail {
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data,
                      const std::vector<Tensor<T>>& parents,
                      std::function<void(const TensorNode<T>&)> backward_fn) {
  auto out = Tensor<T>::from_data(std::move(shape), std::move(data));
  if (grad_enabled()) {
    bool needs = false;
    for (const auto& p : parents) needs = needs || p.requires_grad();
    if (needs) {
      auto node = out.node();
      node->requires_grad = true;
      node->parents.reserve(parents.size());
      for (const auto& p : parents) node->parents.push_back(p.node());
      node->backward_fn = std::move(backward_fn);
    }
  }
  return out;
}
}  // namespace detail

// ---- elementwise ------------------------------------------------------------

namespace {
template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b,
                        const char* op) {
  if (a.shape() != b.shape()) {
    throw Error(ErrorKind::Dimension, std::string(op) + ": shape mismatch " +
                                          shape_str(a.shape()) + " vs " +
                                          shape_str(b.shape()));
  }
}
}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  const auto& da = a.data();
  const auto& db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] + db[i];
  auto an = a.node();
  auto bn = b.node();
  return detail::make_result<T>(
      a.shape(), std::move(out), {a, b}, [an, bn](const TensorNode<T>& o) {
        if (an->requires_grad) accumulate_grad(*an, o.grad.data(), o.grad.size());
        if (bn->requires_grad) accumulate_grad(*bn, o.grad.data(), o.grad.size());
      });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return add(a, scale(b, T(-1)));
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  const auto& da = a.data();
  const auto& db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] * db[i];
  auto an = a.node();
  auto bn = b.node();
  return detail::make_result<T>(
      a.shape(), std::move(out), {a, b}, [an, bn](const TensorNode<T>& o) {
        if (an->requires_grad) {
          std::vector<T> g(o.grad.size());
          for (std::size_t i = 0; i < g.size(); ++i)
            g[i] = o.grad[i] * bn->data[i];
          accumulate_grad(*an, g.data(), g.size());
        }
        if (bn->requires_grad) {
          std::vector<T> g(o.grad.size());
          for (std::size_t i = 0; i < g.size(); ++i)
            g[i] = o.grad[i] * an->data[i];
          accumulate_grad(*bn, g.data(), g.size());
        }
      });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  std::vector<T> out(x.numel());
  const auto& dx = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = dx[i] * s;
  auto xn = x.node();
  return detail::make_result<T>(
      x.shape(), std::move(out), {x}, [xn, s](const TensorNode<T>& o) {
        std::vector<T> g(o.grad.size());
        for (std::size_t i = 0; i < g.size(); ++i) g[i] = o.grad[i] * s;
        accumulate_grad(*xn, g.data(), g.size());
      });
}

template <typename T>
Tensor<T> scale_t(const Tensor<T>& x, const Tensor<T>& s) {
  if (s.numel() != 1) {
    throw Error(ErrorKind::Dimension, "scale_t: scale must be scalar");
  }
  const T sv = s.data()[0];
  std::vector<T> out(x.numel());
  const auto& dx = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = dx[i] * sv;
  auto xn = x.node();
  auto sn = s.node();
  return detail::make_result<T>(
      x.shape(), std::move(out), {x, s}, [xn, sn, sv](const TensorNode<T>& o) {
        if (xn->requires_grad) {
          std::vector<T> g(o.grad.size());
          for (std::size_t i = 0; i < g.size(); ++i) g[i] = o.grad[i] * sv;
          accumulate_grad(*xn, g.data(), g.size());
        }
        if (sn->requires_grad) {
          T acc = 0;
          for (std::size_t i = 0; i < o.grad.size(); ++i)
            acc += o.grad[i] * xn->data[i];
          accumulate_grad(*sn, &acc, 1);
        }
      });
}

template <typename T>
Tensor<T> add_rowwise(const Tensor<T>& x, const Tensor<T>& b) {
  if (x.rank() < 1 || b.rank() != 1 ||
      x.dim(x.rank() - 1) != b.dim(0)) {
    throw Error(ErrorKind::Dimension,
                "add_rowwise: " + shape_str(x.shape()) + " vs " +
                    shape_str(b.shape()));
  }
  const std::size_t c = static_cast<std::size_t>(b.dim(0));
  std::vector<T> out(x.numel());
  const auto& dx = x.data();
  const auto& db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = dx[i] + db[i % c];
  auto xn = x.node();
  auto bn = b.node();
  return detail::make_result<T>(
      x.shape(), std::move(out), {x, b}, [xn, bn, c](const TensorNode<T>& o) {
        if (xn->requires_grad)
          accumulate_grad(*xn, o.grad.data(), o.grad.size());
        if (bn->requires_grad) {
          std::vector<T> g(c, T(0));
          for (std::size_t i = 0; i < o.grad.size(); ++i)
            g[i % c] += o.grad[i];
          accumulate_grad(*bn, g.data(), g.size());
        }
      });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  const auto& dx = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(dx[i]);
  auto xn = x.node();
  return detail::make_result<T>(
      x.shape(), std::move(out), {x}, [xn](const TensorNode<T>& o) {
        std::vector<T> g(o.grad.size());
        for (std::size_t i = 0; i < g.size(); ++i)
          g[i] = o.grad[i] * (T(1) - o.data[i] * o.data[i]);
        accumulate_grad(*xn, g.data(), g.size());
      });
}

// tanh-approximation GELU; smooth and differentiable everywhere.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  std::vector<T> out(x.numel());
  const auto& dx = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = static_cast<double>(dx[i]);
    out[i] = static_cast<T>(0.5 * v * (1.0 + std::tanh(kC * (v + kA * v * v * v))));
  }
  auto xn = x.node();
  return detail::make_result<T>(
      x.shape(), std::move(out), {x}, [xn](const TensorNode<T>& o) {
        constexpr double kC = 0.7978845608028654;
        constexpr double kA = 0.044715;
        std::vector<T> g(o.grad.size());
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double v = static_cast<double>(xn->data[i]);
          const double u = kC * (v + kA * v * v * v);
          const double t = std::tanh(u);
          const double du = kC * (1.0 + 3.0 * kA * v * v);
          const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
          g[i] = o.grad[i] * static_cast<T>(d);
        }
        accumulate_grad(*xn, g.data(), g.size());
      });
}

// ---- matmul -----------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw Error(ErrorKind::Dimension, "matmul: incompatible shapes " +
                                          shape_str(a.shape()) + " and " +
                                          shape_str(b.shape()));
  }
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(static_cast<std::size_t>(m) * n, T(0));
  mm_acc(a.data().data(), b.data().data(), out.data(), m, k, n);
  auto an = a.node();
  auto bn = b.node();
  return detail::make_result<T>(
      {m, n}, std::move(out), {a, b},
      [an, bn, m, k, n](const TensorNode<T>& o) {
        if (an->requires_grad) {
          // dA = dC * B^T
          auto bt = transpose2d(bn->data.data(), k, n);
          std::vector<T> g(static_cast<std::size_t>(m) * k, T(0));
          mm_acc(o.grad.data(), bt.data(), g.data(), m, n, k);
          accumulate_grad(*an, g.data(), g.size());
        }
        if (bn->requires_grad) {
          // dB = A^T * dC
          auto at = transpose2d(an->data.data(), m, k);
          std::vector<T> g(static_cast<std::size_t>(k) * n, T(0));
          mm_acc(at.data(), o.grad.data(), g.data(), k, m, n);
          accumulate_grad(*bn, g.data(), g.size());
        }
      });
}

template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) ||
      a.dim(2) != b.dim(1)) {
    throw Error(ErrorKind::Dimension, "bmm: incompatible shapes " +
                                          shape_str(a.shape()) + " and " +
                                          shape_str(b.shape()));
  }
  const int bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  const std::size_t sa = static_cast<std::size_t>(m) * k;
  const std::size_t sb = static_cast<std::size_t>(k) * n;
  const std::size_t sc = static_cast<std::size_t>(m) * n;
  std::vector<T> out(static_cast<std::size_t>(bs) * sc, T(0));
  for (int i = 0; i < bs; ++i) {
    mm_acc(a.data().data() + i * sa, b.data().data() + i * sb,
           out.data() + i * sc, m, k, n);
  }
  auto an = a.node();
  auto bn = b.node();
  return detail::make_result<T>(
      {bs, m, n}, std::move(out), {a, b},
      [an, bn, bs, m, k, n, sa, sb, sc](const TensorNode<T>& o) {
        if (an->requires_grad) {
          std::vector<T> g(an->data.size(), T(0));
          for (int i = 0; i < bs; ++i) {
            auto bt = transpose2d(bn->data.data() + i * sb, k, n);
            mm_acc(o.grad.data() + i * sc, bt.data(), g.data() + i * sa, m, n,
                   k);
          }
          accumulate_grad(*an, g.data(), g.size());
        }
        if (bn->requires_grad) {
          std::vector<T> g(bn->data.size(), T(0));
          for (int i = 0; i < bs; ++i) {
            auto at = transpose2d(an->data.data() + i * sa, m, k);
            mm_acc(at.data(), o.grad.data() + i * sc, g.data() + i * sb, k, m,
                   n);
          }
          accumulate_grad(*bn, g.data(), g.size());
        }
      });
}

// ---- shape ops --------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  check_shape(shape);
  if (shape_numel(shape) != x.numel()) {
    throw Error(ErrorKind::Dimension,
                "reshape: cannot view " + shape_str(x.shape()) + " as " +
                    shape_str(shape));
  }
  auto xn = x.node();
  return detail::make_result<T>(
      std::move(shape), std::vector<T>(x.data()), {x},
      [xn](const TensorNode<T>& o) {
        accumulate_grad(*xn, o.grad.data(), o.grad.size());
      });
}

namespace {
template <typename T>
std::vector<T> permute_axes(const std::vector<T>& in, const Shape& shape,
                            int a, int b) {
  Shape out_shape = shape;
  std::swap(out_shape[a], out_shape[b]);
  const auto in_strides = row_strides(shape);
  const auto out_strides = row_strides(out_shape);
  const int rank = static_cast<int>(shape.size());
  std::vector<T> out(in.size());
  std::vector<int> idx(rank, 0);
  for (std::size_t flat = 0; flat < in.size(); ++flat) {
    std::size_t rem = flat;
    std::size_t oflat = 0;
    for (int d = 0; d < rank; ++d) {
      idx[d] = static_cast<int>(rem / in_strides[d]);
      rem %= in_strides[d];
    }
    std::swap(idx[a], idx[b]);
    for (int d = 0; d < rank; ++d)
      oflat += static_cast<std::size_t>(idx[d]) * out_strides[d];
    out[oflat] = in[flat];
  }
  return out;
}
}  // namespace

template <typename T>
Tensor<T> transpose(const Tensor<T>& x, int axis_a, int axis_b) {
  const int r = x.rank();
  if (axis_a < 0 || axis_b < 0 || axis_a >= r || axis_b >= r) {
    throw Error(ErrorKind::Dimension, "transpose: axis out of range");
  }
  Shape out_shape = x.shape();
  std::swap(out_shape[axis_a], out_shape[axis_b]);
  auto out = permute_axes(x.data(), x.shape(), axis_a, axis_b);
  auto xn = x.node();
  return detail::make_result<T>(
      std::move(out_shape), std::move(out), {x},
      [xn, axis_a, axis_b](const TensorNode<T>& o) {
        auto g = permute_axes(o.grad, o.shape, axis_a, axis_b);
        accumulate_grad(*xn, g.data(), g.size());
      });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, int axis) {
  if (xs.empty()) throw Error(ErrorKind::Usage, "concat: no inputs");
  const int rank = xs[0].rank();
  if (axis < 0 || axis >= rank) {
    throw Error(ErrorKind::Dimension, "concat: axis out of range");
  }
  Shape out_shape = xs[0].shape();
  int total_axis = 0;
  for (const auto& x : xs) {
    if (x.rank() != rank) {
      throw Error(ErrorKind::Dimension, "concat: rank mismatch");
    }
    for (int d = 0; d < rank; ++d) {
      if (d != axis && x.dim(d) != out_shape[d]) {
        throw Error(ErrorKind::Dimension,
                    "concat: shape mismatch at non-concat axis");
      }
    }
    total_axis += x.dim(axis);
  }
  out_shape[axis] = total_axis;

  // outer = product of dims before axis, inner = product after.
  std::size_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= static_cast<std::size_t>(out_shape[d]);
  for (int d = axis + 1; d < rank; ++d)
    inner *= static_cast<std::size_t>(out_shape[d]);

  std::vector<T> out(shape_numel(out_shape));
  const std::size_t out_row = static_cast<std::size_t>(total_axis) * inner;
  std::size_t off = 0;
  std::vector<std::size_t> offsets;
  for (const auto& x : xs) {
    offsets.push_back(off);
    const std::size_t part = static_cast<std::size_t>(x.dim(axis)) * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(x.data().data() + o * part, part,
                  out.data() + o * out_row + off);
    }
    off += part;
  }

  std::vector<std::shared_ptr<TensorNode<T>>> nodes;
  std::vector<std::size_t> parts;
  for (const auto& x : xs) {
    nodes.push_back(x.node());
    parts.push_back(static_cast<std::size_t>(x.dim(axis)) * inner);
  }
  return detail::make_result<T>(
      std::move(out_shape), std::move(out), xs,
      [nodes, parts, offsets, outer, out_row](const TensorNode<T>& o) {
        for (std::size_t i = 0; i < nodes.size(); ++i) {
          if (!nodes[i]->requires_grad) continue;
          std::vector<T> g(nodes[i]->data.size());
          for (std::size_t ot = 0; ot < outer; ++ot) {
            std::copy_n(o.grad.data() + ot * out_row + offsets[i], parts[i],
                        g.data() + ot * parts[i]);
          }
          accumulate_grad(*nodes[i], g.data(), g.size());
        }
      });
}

template <typename T>
Tensor<T> tile0(const Tensor<T>& x, int times) {
  if (times < 1) throw Error(ErrorKind::Usage, "tile0: times < 1");
  Shape out_shape = x.shape();
  if (out_shape.empty()) out_shape = {1};
  out_shape[0] *= times;
  const std::size_t block = x.numel();
  std::vector<T> out(block * static_cast<std::size_t>(times));
  for (int t = 0; t < times; ++t)
    std::copy_n(x.data().data(), block, out.data() + t * block);
  auto xn = x.node();
  return detail::make_result<T>(
      std::move(out_shape), std::move(out), {x},
      [xn, times, block](const TensorNode<T>& o) {
        std::vector<T> g(block, T(0));
        for (int t = 0; t < times; ++t)
          for (std::size_t i = 0; i < block; ++i)
            g[i] += o.grad[t * block + i];
        accumulate_grad(*xn, g.data(), g.size());
      });
}

template <typename T>
Tensor<T> repeat_interleave0(const Tensor<T>& x, int times) {
  if (times < 1) throw Error(ErrorKind::Usage, "repeat_interleave0: times < 1");
  if (x.rank() < 1) throw Error(ErrorKind::Dimension, "repeat_interleave0: rank 0");
  Shape out_shape = x.shape();
  out_shape[0] *= times;
  const std::size_t slice = x.numel() / static_cast<std::size_t>(x.dim(0));
  const int b = x.dim(0);
  std::vector<T> out(x.numel() * static_cast<std::size_t>(times));
  for (int i = 0; i < b; ++i)
    for (int t = 0; t < times; ++t)
      std::copy_n(x.data().data() + i * slice, slice,
                  out.data() + (static_cast<std::size_t>(i) * times + t) * slice);
  auto xn = x.node();
  return detail::make_result<T>(
      std::move(out_shape), std::move(out), {x},
      [xn, times, slice, b](const TensorNode<T>& o) {
        std::vector<T> g(xn->data.size(), T(0));
        for (int i = 0; i < b; ++i)
          for (int t = 0; t < times; ++t)
            for (std::size_t k = 0; k < slice; ++k)
              g[i * slice + k] +=
                  o.grad[(static_cast<std::size_t>(i) * times + t) * slice + k];
        accumulate_grad(*xn, g.data(), g.size());
      });
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, const std::vector<int>& index) {
  if (table.rank() != 2) {
    throw Error(ErrorKind::Dimension, "gather_rows: table must be 2D");
  }
  const int rows = table.dim(0);
  const std::size_t c = static_cast<std::size_t>(table.dim(1));
  for (int i : index) {
    if (i < 0 || i >= rows) {
      throw Error(ErrorKind::Usage, "gather_rows: index out of range");
    }
  }
  std::vector<T> out(index.size() * c);
  for (std::size_t i = 0; i < index.size(); ++i)
    std::copy_n(table.data().data() + static_cast<std::size_t>(index[i]) * c, c,
                out.data() + i * c);
  auto tn = table.node();
  return detail::make_result<T>(
      {static_cast<int>(index.size()), static_cast<int>(c)}, std::move(out),
      {table}, [tn, index, c](const TensorNode<T>& o) {
        std::vector<T> g(tn->data.size(), T(0));
        for (std::size_t i = 0; i < index.size(); ++i)
          for (std::size_t j = 0; j < c; ++j)
            g[static_cast<std::size_t>(index[i]) * c + j] += o.grad[i * c + j];
        accumulate_grad(*tn, g.data(), g.size());
      });
}

template <typename T>
Tensor<T> roll2d(const Tensor<T>& x, int shift_h, int shift_w) {
  if (x.rank() != 3) throw Error(ErrorKind::Dimension, "roll2d: want [H,W,C]");
  const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
  auto wrap = [](int v, int m) { return ((v % m) + m) % m; };
  std::vector<T> out(x.numel());
  const auto& dx = x.data();
  for (int i = 0; i < h; ++i) {
    const int si = wrap(i - shift_h, h);
    for (int j = 0; j < w; ++j) {
      const int sj = wrap(j - shift_w, w);
      std::copy_n(dx.data() + (static_cast<std::size_t>(si) * w + sj) * c, c,
                  out.data() + (static_cast<std::size_t>(i) * w + j) * c);
    }
  }
  auto xn = x.node();
  return detail::make_result<T>(
      x.shape(), std::move(out), {x},
      [xn, h, w, c, shift_h, shift_w](const TensorNode<T>& o) {
        auto wrap = [](int v, int m) { return ((v % m) + m) % m; };
        std::vector<T> g(o.grad.size());
        for (int i = 0; i < h; ++i) {
          const int si = wrap(i - shift_h, h);
          for (int j = 0; j < w; ++j) {
            const int sj = wrap(j - shift_w, w);
            for (int k = 0; k < c; ++k)
              g[(static_cast<std::size_t>(si) * w + sj) * c + k] =
                  o.grad[(static_cast<std::size_t>(i) * w + j) * c + k];
          }
        }
        accumulate_grad(*xn, g.data(), g.size());
      });
}

// ---- reductions / normalization ----------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.data()) acc += v;
  auto xn = x.node();
  std::vector<T> out{acc};
  return detail::make_result<T>(
      Shape{}, std::move(out), {x}, [xn](const TensorNode<T>& o) {
        std::vector<T> g(xn->data.size(), o.grad[0]);
        accumulate_grad(*xn, g.data(), g.size());
      });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  if (x.rank() < 1 || x.dim(x.rank() - 1) < 1) {
    throw Error(ErrorKind::Dimension, "softmax_lastdim: empty last dimension");
  }
  const std::size_t c = static_cast<std::size_t>(x.dim(x.rank() - 1));
  const std::size_t rows = x.numel() / c;
  std::vector<T> out(x.numel());
  const auto& dx = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = dx.data() + r * c;
    T* o = out.data() + r * c;
    T mx = in[0];
    for (std::size_t i = 1; i < c; ++i) mx = std::max(mx, in[i]);
    T denom = 0;
    for (std::size_t i = 0; i < c; ++i) {
      o[i] = std::exp(in[i] - mx);
      denom += o[i];
    }
    for (std::size_t i = 0; i < c; ++i) o[i] /= denom;
  }
  auto xn = x.node();
  return detail::make_result<T>(
      x.shape(), std::move(out), {x}, [xn, c, rows](const TensorNode<T>& o) {
        std::vector<T> g(o.grad.size());
        for (std::size_t r = 0; r < rows; ++r) {
          const T* y = o.data.data() + r * c;
          const T* dy = o.grad.data() + r * c;
          T dot = 0;
          for (std::size_t i = 0; i < c; ++i) dot += dy[i] * y[i];
          for (std::size_t i = 0; i < c; ++i)
            g[r * c + i] = y[i] * (dy[i] - dot);
        }
        accumulate_grad(*xn, g.data(), g.size());
      });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps) {
  if (eps <= T(0)) {
    throw Error(ErrorKind::Parameter, "layer_norm: eps must be positive");
  }
  const int last = x.dim(x.rank() - 1);
  if (gamma.rank() != 1 || beta.rank() != 1 || gamma.dim(0) != last ||
      beta.dim(0) != last) {
    throw Error(ErrorKind::Dimension,
                "layer_norm: gamma/beta must match last dim " +
                    std::to_string(last));
  }
  const std::size_t c = static_cast<std::size_t>(last);
  const std::size_t rows = x.numel() / c;
  std::vector<T> out(x.numel());
  std::vector<T> xhat(x.numel());
  std::vector<T> inv_sigma(rows);
  const auto& dx = x.data();
  const auto& dg = gamma.data();
  const auto& db = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = dx.data() + r * c;
    T mu = 0;
    for (std::size_t i = 0; i < c; ++i) mu += in[i];
    mu /= static_cast<T>(c);
    T var = 0;
    for (std::size_t i = 0; i < c; ++i) var += (in[i] - mu) * (in[i] - mu);
    var /= static_cast<T>(c);
    const T is = T(1) / std::sqrt(var + eps);
    inv_sigma[r] = is;
    for (std::size_t i = 0; i < c; ++i) {
      const T xh = (in[i] - mu) * is;
      xhat[r * c + i] = xh;
      out[r * c + i] = dg[i] * xh + db[i];
    }
  }
  auto xn = x.node();
  auto gn = gamma.node();
  auto bn = beta.node();
  return detail::make_result<T>(
      x.shape(), std::move(out), {x, gamma, beta},
      [xn, gn, bn, c, rows, xhat = std::move(xhat),
       inv_sigma = std::move(inv_sigma)](const TensorNode<T>& o) {
        if (gn->requires_grad || bn->requires_grad) {
          std::vector<T> dgamma(c, T(0)), dbeta(c, T(0));
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t i = 0; i < c; ++i) {
              dgamma[i] += o.grad[r * c + i] * xhat[r * c + i];
              dbeta[i] += o.grad[r * c + i];
            }
          if (gn->requires_grad)
            accumulate_grad(*gn, dgamma.data(), dgamma.size());
          if (bn->requires_grad)
            accumulate_grad(*bn, dbeta.data(), dbeta.size());
        }
        if (xn->requires_grad) {
          std::vector<T> g(o.grad.size());
          for (std::size_t r = 0; r < rows; ++r) {
            T m1 = 0, m2 = 0;
            for (std::size_t i = 0; i < c; ++i) {
              const T dxh = o.grad[r * c + i] * gn->data[i];
              m1 += dxh;
              m2 += dxh * xhat[r * c + i];
            }
            m1 /= static_cast<T>(c);
            m2 /= static_cast<T>(c);
            for (std::size_t i = 0; i < c; ++i) {
              const T dxh = o.grad[r * c + i] * gn->data[i];
              g[r * c + i] =
                  (dxh - m1 - xhat[r * c + i] * m2) * inv_sigma[r];
            }
          }
          accumulate_grad(*xn, g.data(), g.size());
        }
      });
}

// ---- spatial ops --------------------------------------------------------------

namespace {
template <typename T>
void require_hwc(const Tensor<T>& x, const char* op) {
  if (x.rank() != 3) {
    throw Error(ErrorKind::Dimension,
                std::string(op) + ": want [H,W,C], got " + shape_str(x.shape()));
  }
}
}  // namespace

template <typename T>
Tensor<T> avg_pool2x2(const Tensor<T>& x) {
  require_hwc(x, "avg_pool2x2");
  const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
  if (h % 2 || w % 2) {
    throw Error(ErrorKind::Dimension, "avg_pool2x2: odd spatial dims");
  }
  return adaptive_avg_pool2d(x, h / 2, w / 2);
}

template <typename T>
Tensor<T> adaptive_avg_pool2d(const Tensor<T>& x, int out_h, int out_w) {
  require_hwc(x, "adaptive_avg_pool2d");
  const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
  if (out_h < 1 || out_w < 1 || h % out_h || w % out_w) {
    throw Error(ErrorKind::Config,
                "adaptive_avg_pool2d: output " + std::to_string(out_h) + "x" +
                    std::to_string(out_w) + " must divide input " +
                    std::to_string(h) + "x" + std::to_string(w));
  }
  const int bh = h / out_h, bw = w / out_w;
  const T inv = T(1) / static_cast<T>(bh * bw);
  std::vector<T> out(static_cast<std::size_t>(out_h) * out_w * c, T(0));
  const auto& dx = x.data();
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      const std::size_t o =
          (static_cast<std::size_t>(i / bh) * out_w + j / bw) * c;
      const std::size_t s = (static_cast<std::size_t>(i) * w + j) * c;
      for (int k = 0; k < c; ++k) out[o + k] += dx[s + k] * inv;
    }
  auto xn = x.node();
  return detail::make_result<T>(
      {out_h, out_w, c}, std::move(out), {x},
      [xn, h, w, c, bh, bw, out_w, inv](const TensorNode<T>& o) {
        std::vector<T> g(xn->data.size());
        for (int i = 0; i < h; ++i)
          for (int j = 0; j < w; ++j) {
            const std::size_t oo =
                (static_cast<std::size_t>(i / bh) * out_w + j / bw) * c;
            const std::size_t s = (static_cast<std::size_t>(i) * w + j) * c;
            for (int k = 0; k < c; ++k) g[s + k] = o.grad[oo + k] * inv;
          }
        accumulate_grad(*xn, g.data(), g.size());
      });
}

template <typename T>
Tensor<T> upsample_nearest2d(const Tensor<T>& x, int factor) {
  require_hwc(x, "upsample_nearest2d");
  if (factor < 1) throw Error(ErrorKind::Usage, "upsample_nearest2d: factor < 1");
  const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
  const int oh = h * factor, ow = w * factor;
  std::vector<T> out(static_cast<std::size_t>(oh) * ow * c);
  const auto& dx = x.data();
  for (int i = 0; i < oh; ++i)
    for (int j = 0; j < ow; ++j)
      std::copy_n(
          dx.data() + (static_cast<std::size_t>(i / factor) * w + j / factor) * c,
          c, out.data() + (static_cast<std::size_t>(i) * ow + j) * c);
  auto xn = x.node();
  return detail::make_result<T>(
      {oh, ow, c}, std::move(out), {x},
      [xn, h, w, c, factor, ow](const TensorNode<T>& o) {
        std::vector<T> g(xn->data.size(), T(0));
        const int oh2 = h * factor;
        for (int i = 0; i < oh2; ++i)
          for (int j = 0; j < ow; ++j) {
            const std::size_t s =
                (static_cast<std::size_t>(i / factor) * w + j / factor) * c;
            const std::size_t oo = (static_cast<std::size_t>(i) * ow + j) * c;
            for (int k = 0; k < c; ++k) g[s + k] += o.grad[oo + k];
          }
        accumulate_grad(*xn, g.data(), g.size());
      });
}

namespace {
// half-pixel source mapping with edge clamping (align_corners=false).
struct LerpTap {
  int lo, hi;
  double w_hi;
};

LerpTap bilinear_tap(int dst, int in_size, int out_size) {
  const double src =
      (static_cast<double>(dst) + 0.5) * in_size / out_size - 0.5;
  double fl = std::floor(src);
  double frac = src - fl;
  int lo = static_cast<int>(fl);
  int hi = lo + 1;
  if (lo < 0) {
    lo = 0;
    hi = 0;
    frac = 0.0;
  }
  if (hi >= in_size) {
    hi = in_size - 1;
    if (lo >= in_size) lo = in_size - 1;
    if (lo == hi) frac = 0.0;
  }
  return {lo, hi, frac};
}
}  // namespace

template <typename T>
Tensor<T> upsample_bilinear2d(const Tensor<T>& x, int out_h, int out_w) {
  require_hwc(x, "upsample_bilinear2d");
  if (out_h < 1 || out_w < 1) {
    throw Error(ErrorKind::Usage, "upsample_bilinear2d: empty output");
  }
  const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
  std::vector<LerpTap> ti(out_h), tj(out_w);
  for (int i = 0; i < out_h; ++i) ti[i] = bilinear_tap(i, h, out_h);
  for (int j = 0; j < out_w; ++j) tj[j] = bilinear_tap(j, w, out_w);
  std::vector<T> out(static_cast<std::size_t>(out_h) * out_w * c);
  const auto& dx = x.data();
  auto src = [&](int i, int j, int k) {
    return dx[(static_cast<std::size_t>(i) * w + j) * c + k];
  };
  for (int i = 0; i < out_h; ++i)
    for (int j = 0; j < out_w; ++j) {
      const auto& a = ti[i];
      const auto& b = tj[j];
      for (int k = 0; k < c; ++k) {
        const double v00 = src(a.lo, b.lo, k), v01 = src(a.lo, b.hi, k);
        const double v10 = src(a.hi, b.lo, k), v11 = src(a.hi, b.hi, k);
        const double top = v00 + (v01 - v00) * b.w_hi;
        const double bot = v10 + (v11 - v10) * b.w_hi;
        out[(static_cast<std::size_t>(i) * out_w + j) * c + k] =
            static_cast<T>(top + (bot - top) * a.w_hi);
      }
    }
  auto xn = x.node();
  return detail::make_result<T>(
      {out_h, out_w, c}, std::move(out), {x},
      [xn, w, c, out_h, out_w, ti = std::move(ti),
       tj = std::move(tj)](const TensorNode<T>& o) {
        std::vector<T> g(xn->data.size(), T(0));
        for (int i = 0; i < out_h; ++i)
          for (int j = 0; j < out_w; ++j) {
            const auto& a = ti[i];
            const auto& b = tj[j];
            const double wi = a.w_hi, wj = b.w_hi;
            for (int k = 0; k < c; ++k) {
              const T go =
                  o.grad[(static_cast<std::size_t>(i) * out_w + j) * c + k];
              g[(static_cast<std::size_t>(a.lo) * w + b.lo) * c + k] +=
                  static_cast<T>((1 - wi) * (1 - wj)) * go;
              g[(static_cast<std::size_t>(a.lo) * w + b.hi) * c + k] +=
                  static_cast<T>((1 - wi) * wj) * go;
              g[(static_cast<std::size_t>(a.hi) * w + b.lo) * c + k] +=
                  static_cast<T>(wi * (1 - wj)) * go;
              g[(static_cast<std::size_t>(a.hi) * w + b.hi) * c + k] +=
                  static_cast<T>(wi * wj) * go;
            }
          }
        accumulate_grad(*xn, g.data(), g.size());
      });
}

template <typename T>
Tensor<T> unfold3x3(const Tensor<T>& x) {
  require_hwc(x, "unfold3x3");
  const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
  std::vector<T> out(static_cast<std::size_t>(h) * w * 9 * c, T(0));
  const auto& dx = x.data();
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      T* orow = out.data() + (static_cast<std::size_t>(i) * w + j) * 9 * c;
      for (int dy = 0; dy < 3; ++dy)
        for (int dxx = 0; dxx < 3; ++dxx) {
          const int si = i + dy - 1, sj = j + dxx - 1;
          if (si < 0 || si >= h || sj < 0 || sj >= w) continue;
          std::copy_n(dx.data() + (static_cast<std::size_t>(si) * w + sj) * c,
                      c, orow + (dy * 3 + dxx) * c);
        }
    }
  auto xn = x.node();
  return detail::make_result<T>(
      {h * w, 9 * c}, std::move(out), {x},
      [xn, h, w, c](const TensorNode<T>& o) {
        std::vector<T> g(xn->data.size(), T(0));
        for (int i = 0; i < h; ++i)
          for (int j = 0; j < w; ++j) {
            const T* orow =
                o.grad.data() + (static_cast<std::size_t>(i) * w + j) * 9 * c;
            for (int dy = 0; dy < 3; ++dy)
              for (int dxx = 0; dxx < 3; ++dxx) {
                const int si = i + dy - 1, sj = j + dxx - 1;
                if (si < 0 || si >= h || sj < 0 || sj >= w) continue;
                T* grow = g.data() + (static_cast<std::size_t>(si) * w + sj) * c;
                const T* src = orow + (dy * 3 + dxx) * c;
                for (int k = 0; k < c; ++k) grow[k] += src[k];
              }
          }
        accumulate_grad(*xn, g.data(), g.size());
      });
}

template <typename T>
Tensor<T> pixel_shuffle(const Tensor<T>& x, int stride) {
  require_hwc(x, "pixel_shuffle");
  if (stride < 1) throw Error(ErrorKind::Usage, "pixel_shuffle: stride < 1");
  const int h = x.dim(0), w = x.dim(1), cs = x.dim(2);
  const int s2 = stride * stride;
  if (cs % s2) {
    throw Error(ErrorKind::Dimension,
                "pixel_shuffle: channels not divisible by stride^2");
  }
  const int c = cs / s2;
  const int oh = h * stride, ow = w * stride;
  std::vector<T> out(static_cast<std::size_t>(oh) * ow * c);
  const auto& dx = x.data();
  for (int p = 0; p < h; ++p)
    for (int q = 0; q < w; ++q)
      for (int i = 0; i < stride; ++i)
        for (int j = 0; j < stride; ++j) {
          const std::size_t src =
              (static_cast<std::size_t>(p) * w + q) * cs +
              static_cast<std::size_t>(i * stride + j) * c;
          const std::size_t dst =
              (static_cast<std::size_t>(p * stride + i) * ow +
               (q * stride + j)) *
              c;
          std::copy_n(dx.data() + src, c, out.data() + dst);
        }
  auto xn = x.node();
  return detail::make_result<T>(
      {oh, ow, c}, std::move(out), {x},
      [xn, h, w, cs, c, stride, ow](const TensorNode<T>& o) {
        std::vector<T> g(xn->data.size());
        for (int p = 0; p < h; ++p)
          for (int q = 0; q < w; ++q)
            for (int i = 0; i < stride; ++i)
              for (int j = 0; j < stride; ++j) {
                const std::size_t src =
                    (static_cast<std::size_t>(p) * w + q) * cs +
                    static_cast<std::size_t>(i * stride + j) * c;
                const std::size_t dst =
                    (static_cast<std::size_t>(p * stride + i) * ow +
                     (q * stride + j)) *
                    c;
                for (int k = 0; k < c; ++k) g[src + k] = o.grad[dst + k];
              }
        accumulate_grad(*xn, g.data(), g.size());
      });
}

template <typename T>
Tensor<T> space_to_depth(const Tensor<T>& x, int stride) {
  require_hwc(x, "space_to_depth");
  const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
  if (stride < 1 || h % stride || w % stride) {
    throw Error(ErrorKind::Dimension, "space_to_depth: dims not divisible");
  }
  const int oh = h / stride, ow = w / stride;
  const int oc = c * stride * stride;
  std::vector<T> out(x.numel());
  const auto& dx = x.data();
  for (int p = 0; p < oh; ++p)
    for (int q = 0; q < ow; ++q)
      for (int i = 0; i < stride; ++i)
        for (int j = 0; j < stride; ++j) {
          const std::size_t src =
              (static_cast<std::size_t>(p * stride + i) * w +
               (q * stride + j)) *
              c;
          const std::size_t dst =
              (static_cast<std::size_t>(p) * ow + q) * oc +
              static_cast<std::size_t>(i * stride + j) * c;
          std::copy_n(dx.data() + src, c, out.data() + dst);
        }
  auto xn = x.node();
  return detail::make_result<T>(
      {oh, ow, oc}, std::move(out), {x},
      [xn, oh, ow, c, oc, stride, w](const TensorNode<T>& o) {
        std::vector<T> g(xn->data.size());
        for (int p = 0; p < oh; ++p)
          for (int q = 0; q < ow; ++q)
            for (int i = 0; i < stride; ++i)
              for (int j = 0; j < stride; ++j) {
                const std::size_t src =
                    (static_cast<std::size_t>(p * stride + i) * w +
                     (q * stride + j)) *
                    c;
                const std::size_t dst =
                    (static_cast<std::size_t>(p) * ow + q) * oc +
                    static_cast<std::size_t>(i * stride + j) * c;
                for (int k = 0; k < c; ++k) g[src + k] = o.grad[dst + k];
              }
        accumulate_grad(*xn, g.data(), g.size());
      });
}

// ---- composite layers ----------------------------------------------------------

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (w.rank() != 2) throw Error(ErrorKind::Dimension, "linear: w must be 2D");
  const int cin = w.dim(0);
  const int last = x.dim(x.rank() - 1);
  if (last != cin) {
    throw Error(ErrorKind::Dimension,
                "linear: input channels " + std::to_string(last) +
                    " != weight rows " + std::to_string(cin));
  }
  const int rows = static_cast<int>(x.numel() / static_cast<std::size_t>(cin));
  auto flat = reshape(x, {rows, cin});
  auto y = matmul(flat, w);
  if (b.defined()) y = add_rowwise(y, b);
  Shape out_shape = x.shape();
  out_shape.back() = w.dim(1);
  return reshape(y, std::move(out_shape));
}

template <typename T>
Tensor<T> conv1x1(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  require_hwc(x, "conv1x1");
  return linear(x, w, b);
}

template <typename T>
Tensor<T> conv3x3(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  require_hwc(x, "conv3x3");
  const int h = x.dim(0), wd = x.dim(1), c = x.dim(2);
  if (w.rank() != 2 || w.dim(0) != 9 * c) {
    throw Error(ErrorKind::Dimension, "conv3x3: weight must be [9*C_in, C_out]");
  }
  auto cols = unfold3x3(x);
  auto y = matmul(cols, w);
  if (b.defined()) y = add_rowwise(y, b);
  return reshape(y, {h, wd, w.dim(1)});
}

template <typename T>
Tensor<T> mask_rows(const Tensor<T>& x, const std::vector<bool>& mask,
                    const Tensor<T>& token) {
  if (x.rank() != 2) throw Error(ErrorKind::Dimension, "mask_rows: x must be [N,C]");
  const int n = x.dim(0), c = x.dim(1);
  if (static_cast<int>(mask.size()) != n) {
    throw Error(ErrorKind::Dimension, "mask_rows: mask length mismatch");
  }
  if (token.rank() != 1 || token.dim(0) != c) {
    throw Error(ErrorKind::Dimension, "mask_rows: token length mismatch");
  }
  std::vector<T> out(x.numel());
  const auto& dx = x.data();
  const auto& dt = token.data();
  for (int i = 0; i < n; ++i) {
    if (mask[static_cast<std::size_t>(i)])
      std::copy_n(dt.data(), c, out.data() + static_cast<std::size_t>(i) * c);
    else
      std::copy_n(dx.data() + static_cast<std::size_t>(i) * c, c,
                  out.data() + static_cast<std::size_t>(i) * c);
  }
  auto xn = x.node();
  auto tn = token.node();
  return detail::make_result<T>(
      x.shape(), std::move(out), {x, token},
      [xn, tn, mask, n, c](const TensorNode<T>& o) {
        if (xn->requires_grad) {
          std::vector<T> g(xn->data.size(), T(0));
          for (int i = 0; i < n; ++i)
            if (!mask[static_cast<std::size_t>(i)])
              std::copy_n(o.grad.data() + static_cast<std::size_t>(i) * c, c,
                          g.data() + static_cast<std::size_t>(i) * c);
          accumulate_grad(*xn, g.data(), g.size());
        }
        if (tn->requires_grad) {
          std::vector<T> g(static_cast<std::size_t>(c), T(0));
          for (int i = 0; i < n; ++i)
            if (mask[static_cast<std::size_t>(i)])
              for (int k = 0; k < c; ++k)
                g[k] += o.grad[static_cast<std::size_t>(i) * c + k];
          accumulate_grad(*tn, g.data(), g.size());
        }
      });
}

// ---- explicit instantiations ----------------------------------------------------

template void accumulate_grad<float>(TensorNode<float>&, const float*,
                                     std::size_t);
template void accumulate_grad<double>(TensorNode<double>&, const double*,
                                      std::size_t);

template class Tensor<float>;
template class Tensor<double>;

namespace detail {
template Tensor<float> make_result<float>(
    Shape, std::vector<float>, const std::vector<Tensor<float>>&,
    std::function<void(const TensorNode<float>&)>);
template Tensor<double> make_result<double>(
    Shape, std::vector<double>, const std::vector<Tensor<double>>&,
    std::function<void(const TensorNode<double>&)>);
}  // namespace detail

#define CASWIT_INSTANTIATE_OPS(T)                                             \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                 \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                 \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                 \
  template Tensor<T> scale(const Tensor<T>&, T);                              \
  template Tensor<T> scale_t(const Tensor<T>&, const Tensor<T>&);             \
  template Tensor<T> add_rowwise(const Tensor<T>&, const Tensor<T>&);         \
  template Tensor<T> tanh(const Tensor<T>&);                                  \
  template Tensor<T> gelu(const Tensor<T>&);                                  \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);              \
  template Tensor<T> bmm(const Tensor<T>&, const Tensor<T>&);                 \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                        \
  template Tensor<T> transpose(const Tensor<T>&, int, int);                   \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, int);              \
  template Tensor<T> tile0(const Tensor<T>&, int);                            \
  template Tensor<T> repeat_interleave0(const Tensor<T>&, int);               \
  template Tensor<T> gather_rows(const Tensor<T>&, const std::vector<int>&);  \
  template Tensor<T> roll2d(const Tensor<T>&, int, int);                      \
  template Tensor<T> sum(const Tensor<T>&);                                   \
  template Tensor<T> mean(const Tensor<T>&);                                  \
  template Tensor<T> softmax_lastdim(const Tensor<T>&);                       \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&,           \
                                const Tensor<T>&, T);                         \
  template Tensor<T> avg_pool2x2(const Tensor<T>&);                           \
  template Tensor<T> adaptive_avg_pool2d(const Tensor<T>&, int, int);         \
  template Tensor<T> upsample_nearest2d(const Tensor<T>&, int);               \
  template Tensor<T> upsample_bilinear2d(const Tensor<T>&, int, int);         \
  template Tensor<T> unfold3x3(const Tensor<T>&);                             \
  template Tensor<T> pixel_shuffle(const Tensor<T>&, int);                    \
  template Tensor<T> space_to_depth(const Tensor<T>&, int);                   \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&,               \
                            const Tensor<T>&);                                \
  template Tensor<T> conv1x1(const Tensor<T>&, const Tensor<T>&,              \
                             const Tensor<T>&);                               \
  template Tensor<T> conv3x3(const Tensor<T>&, const Tensor<T>&,              \
                             const Tensor<T>&);                               \
  template Tensor<T> mask_rows(const Tensor<T>&, const std::vector<bool>&,    \
                               const Tensor<T>&);

CASWIT_INSTANTIATE_OPS(float)
CASWIT_INSTANTIATE_OPS(double)

#undef CASWIT_INSTANTIATE_OPS

}  // namespace caswit
