#include "aqt/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace aqt {

namespace {

template <typename T>
using NodePtr = std::shared_ptr<detail::Node<T>>;

// Creates an output node; it joins the graph only when some input needs a grad.
template <typename T>
NodePtr<T> make_output(Shape shape, std::vector<T> data, std::initializer_list<const BasicTensor<T>*> inputs) {
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  if (detail::grad_enabled()) {
    const bool any = std::any_of(inputs.begin(), inputs.end(), [](const auto* t) { return t->requires_grad(); });
    if (any) {
      node->requires_grad = true;
      for (const auto* t : inputs) node->parents.push_back(t->node());
    }
  }
  return node;
}

// C[M,N] (+)= op(A)[M,K] * op(B)[K,N]; A is stored [K,M] when trans_a, B is stored [N,K] when trans_b.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
          bool accumulate) {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Index = Eigen::Index;
  Eigen::Map<Mat> cm(c, static_cast<Index>(m), static_cast<Index>(n));
  if (!accumulate) cm.setZero();
  if (m == 0 || n == 0 || k == 0) return;
  Eigen::Map<const Mat> am(a, static_cast<Index>(trans_a ? k : m), static_cast<Index>(trans_a ? m : k));
  Eigen::Map<const Mat> bm(b, static_cast<Index>(trans_b ? n : k), static_cast<Index>(trans_b ? k : n));
  if (!trans_a && !trans_b) {
    cm.noalias() += am * bm;
  } else if (!trans_a && trans_b) {
    cm.noalias() += am * bm.transpose();
  } else if (trans_a && !trans_b) {
    cm.noalias() += am.transpose() * bm;
  } else {
    cm.noalias() += am.transpose() * bm.transpose();
  }
}

std::vector<std::size_t> contiguous_strides(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t d = shape.size(); d-- > 1;) strides[d - 1] = strides[d] * shape[d];
  return strides;
}

// Strides of `in` laid against the broadcast output shape; zero on broadcast axes.
std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  const auto base = contiguous_strides(in);
  std::vector<std::size_t> strides(out.size(), 0);
  const std::size_t offset = out.size() - in.size();
  for (std::size_t d = 0; d < in.size(); ++d) {
    strides[d + offset] = (in[d] == 1 && out[d + offset] != 1) ? 0 : base[d];
  }
  return strides;
}

template <typename F>
void broadcast_loop(const Shape& out, const std::vector<std::size_t>& sa, const std::vector<std::size_t>& sb, F&& f) {
  const std::size_t total = shape_numel(out);
  if (total == 0) return;
  const std::size_t rank = out.size();
  if (rank == 0) {
    f(0, 0, 0);
    return;
  }
  const std::size_t inner = out[rank - 1];
  const std::size_t ia_step = sa[rank - 1];
  const std::size_t ib_step = sb[rank - 1];
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ia = 0;
  std::size_t ib = 0;
  for (std::size_t o = 0; o < total; o += inner) {
    for (std::size_t j = 0; j < inner; ++j) f(o + j, ia + j * ia_step, ib + j * ib_step);
    for (std::size_t d = rank - 1; d-- > 0;) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

enum class BinaryKind { Add, Sub, Mul };

template <typename T>
BasicTensor<T> binary(const BasicTensor<T>& a, const BasicTensor<T>& b, BinaryKind kind) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape());
  const auto sa = broadcast_strides(a.shape(), out_shape);
  const auto sb = broadcast_strides(b.shape(), out_shape);
  std::vector<T> out(shape_numel(out_shape));
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  const bool same = a.shape() == b.shape();
  switch (kind) {
    case BinaryKind::Add:
      if (same) {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] + pb[i];
      } else {
        broadcast_loop(out_shape, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = pa[i] + pb[j]; });
      }
      break;
    case BinaryKind::Sub:
      if (same) {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] - pb[i];
      } else {
        broadcast_loop(out_shape, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = pa[i] - pb[j]; });
      }
      break;
    case BinaryKind::Mul:
      if (same) {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] * pb[i];
      } else {
        broadcast_loop(out_shape, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = pa[i] * pb[j]; });
      }
      break;
  }
  auto node = make_output<T>(out_shape, std::move(out), {&a, &b});
  if (node->requires_grad) {
    node->backward = [sa, sb, kind, same](detail::Node<T>& self) {
      auto& na = *self.parents[0];
      auto& nb = *self.parents[1];
      const T* g = self.grad.data();
      const bool want_a = na.requires_grad;
      const bool want_b = nb.requires_grad;
      T* ga = want_a ? na.ensure_grad().data() : nullptr;
      T* gb = want_b ? nb.ensure_grad().data() : nullptr;
      const T* va = na.data.data();
      const T* vb = nb.data.data();
      auto body = [&](std::size_t o, std::size_t i, std::size_t j) {
        switch (kind) {
          case BinaryKind::Add:
            if (ga) ga[i] += g[o];
            if (gb) gb[j] += g[o];
            break;
          case BinaryKind::Sub:
            if (ga) ga[i] += g[o];
            if (gb) gb[j] -= g[o];
            break;
          case BinaryKind::Mul:
            if (ga) ga[i] += g[o] * vb[j];
            if (gb) gb[j] += g[o] * va[i];
            break;
        }
      };
      if (same) {
        for (std::size_t o = 0; o < self.grad.size(); ++o) body(o, o, o);
      } else {
        broadcast_loop(self.shape, sa, sb, body);
      }
    };
  }
  return BasicTensor<T>::from_node(std::move(node));
}

template <typename T, typename Fwd, typename Deriv>
BasicTensor<T> unary(const BasicTensor<T>& x, Fwd fwd, Deriv deriv) {
  std::vector<T> out(x.numel());
  const T* px = x.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(px[i]);
  auto node = make_output<T>(x.shape(), std::move(out), {&x});
  if (node->requires_grad) {
    node->backward = [deriv](detail::Node<T>& self) {
      auto& nx = *self.parents[0];
      auto& gx = nx.ensure_grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * deriv(nx.data[i], self.data[i]);
    };
  }
  return BasicTensor<T>::from_node(std::move(node));
}

struct MatmulDims {
  std::size_t batch = 1;
  std::size_t m = 0;
  std::size_t k = 0;
  std::size_t n = 0;
  bool shared_b = true;
  Shape out;
};

template <typename T>
MatmulDims matmul_dims(const BasicTensor<T>& a, const BasicTensor<T>& b, bool trans_b) {
  if (a.dim() < 2 || b.dim() < 2) throw DimensionError("matmul needs operands of rank >= 2");
  MatmulDims d;
  d.m = a.shape()[a.dim() - 2];
  d.k = a.shape()[a.dim() - 1];
  const std::size_t bk = trans_b ? b.shape()[b.dim() - 1] : b.shape()[b.dim() - 2];
  d.n = trans_b ? b.shape()[b.dim() - 2] : b.shape()[b.dim() - 1];
  if (bk != d.k) {
    throw DimensionError("matmul inner dimensions disagree: " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()) + (trans_b ? "^T" : ""));
  }
  for (std::size_t i = 0; i + 2 < a.dim(); ++i) d.batch *= a.shape()[i];
  d.shared_b = b.dim() == 2;
  if (!d.shared_b) {
    if (b.dim() != a.dim() || !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin())) {
      throw DimensionError("matmul batch dimensions disagree: " + shape_string(a.shape()) + " vs " +
                           shape_string(b.shape()));
    }
  }
  d.out = Shape(a.shape().begin(), a.shape().end() - 2);
  d.out.push_back(d.m);
  d.out.push_back(d.n);
  return d;
}

template <typename T>
BasicTensor<T> matmul_impl(const BasicTensor<T>& a, const BasicTensor<T>& b, bool trans_b) {
  const auto d = matmul_dims(a, b, trans_b);
  std::vector<T> out(shape_numel(d.out));
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  if (d.shared_b) {
    gemm(false, trans_b, d.batch * d.m, d.n, d.k, pa, pb, out.data(), false);
  } else {
    for (std::size_t i = 0; i < d.batch; ++i) {
      gemm(false, trans_b, d.m, d.n, d.k, pa + i * d.m * d.k, pb + i * d.k * d.n, out.data() + i * d.m * d.n, false);
    }
  }
  auto node = make_output<T>(d.out, std::move(out), {&a, &b});
  if (node->requires_grad) {
    node->backward = [d, trans_b](detail::Node<T>& self) {
      auto& na = *self.parents[0];
      auto& nb = *self.parents[1];
      const T* g = self.grad.data();
      const std::size_t rows = d.shared_b ? d.batch * d.m : d.m;
      const std::size_t groups = d.shared_b ? 1 : d.batch;
      for (std::size_t i = 0; i < groups; ++i) {
        const T* gi = g + i * rows * d.n;
        const T* ai = na.data.data() + i * rows * d.k;
        const T* bi = nb.data.data() + i * d.k * d.n;
        if (na.requires_grad) {
          T* ga = na.ensure_grad().data() + i * rows * d.k;
          // dA = dC * op(B)^T
          gemm(false, !trans_b, rows, d.k, d.n, gi, bi, ga, true);
        }
        if (nb.requires_grad) {
          T* gb = nb.ensure_grad().data() + i * d.k * d.n;
          if (trans_b) {
            gemm(true, false, d.n, d.k, rows, gi, ai, gb, true);
          } else {
            gemm(true, false, d.k, d.n, rows, ai, gi, gb, true);
          }
        }
      }
    };
  }
  return BasicTensor<T>::from_node(std::move(node));
}

template <typename T>
BasicTensor<T> linear_impl(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>* bias) {
  if (weight.dim() != 2) throw DimensionError("linear weight must be [out, in]");
  if (x.dim() < 1) throw DimensionError("linear input must have rank >= 1");
  const std::size_t out_features = weight.shape()[0];
  const std::size_t in_features = weight.shape()[1];
  if (x.shape().back() != in_features) {
    throw DimensionError("linear input width " + std::to_string(x.shape().back()) + " does not match weight " +
                         shape_string(weight.shape()));
  }
  if (bias && (bias->dim() != 1 || bias->shape()[0] != out_features)) {
    throw DimensionError("linear bias must be [out]");
  }
  const std::size_t rows = x.numel() / in_features;
  Shape out_shape = x.shape();
  out_shape.back() = out_features;
  std::vector<T> out(rows * out_features);
  gemm(false, true, rows, out_features, in_features, x.data().data(), weight.data().data(), out.data(), false);
  if (bias) {
    const T* pb = bias->data().data();
    for (std::size_t r = 0; r < rows; ++r) {
      T* row = out.data() + r * out_features;
      for (std::size_t o = 0; o < out_features; ++o) row[o] += pb[o];
    }
  }
  NodePtr<T> node = bias ? make_output<T>(out_shape, std::move(out), {&x, &weight, bias})
                         : make_output<T>(out_shape, std::move(out), {&x, &weight});
  if (node->requires_grad) {
    node->backward = [rows, in_features, out_features](detail::Node<T>& self) {
      auto& nx = *self.parents[0];
      auto& nw = *self.parents[1];
      const T* g = self.grad.data();
      if (nx.requires_grad) {
        gemm(false, false, rows, in_features, out_features, g, nw.data.data(), nx.ensure_grad().data(), true);
      }
      if (nw.requires_grad) {
        gemm(true, false, out_features, in_features, rows, g, nx.data.data(), nw.ensure_grad().data(), true);
      }
      if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
        auto& gb = self.parents[2]->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
          const T* row = g + r * out_features;
          for (std::size_t o = 0; o < out_features; ++o) gb[o] += row[o];
        }
      }
    };
  }
  return BasicTensor<T>::from_node(std::move(node));
}

struct ConvDims {
  std::size_t n, c, h, w, o, kh, kw, stride, oh, ow;
  std::size_t patch() const { return c * kh * kw; }
  std::size_t positions() const { return oh * ow; }
};

template <typename T>
void im2col(const T* image, const ConvDims& d, T* cols) {
  const std::size_t p = d.positions();
  for (std::size_t ci = 0; ci < d.c; ++ci) {
    for (std::size_t ki = 0; ki < d.kh; ++ki) {
      for (std::size_t kj = 0; kj < d.kw; ++kj) {
        T* row = cols + ((ci * d.kh + ki) * d.kw + kj) * p;
        const T* plane = image + ci * d.h * d.w;
        for (std::size_t y = 0; y < d.oh; ++y) {
          const T* src = plane + (y * d.stride + ki) * d.w + kj;
          for (std::size_t x = 0; x < d.ow; ++x) row[y * d.ow + x] = src[x * d.stride];
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, const ConvDims& d, T* image) {
  const std::size_t p = d.positions();
  for (std::size_t ci = 0; ci < d.c; ++ci) {
    for (std::size_t ki = 0; ki < d.kh; ++ki) {
      for (std::size_t kj = 0; kj < d.kw; ++kj) {
        const T* row = cols + ((ci * d.kh + ki) * d.kw + kj) * p;
        T* plane = image + ci * d.h * d.w;
        for (std::size_t y = 0; y < d.oh; ++y) {
          T* dst = plane + (y * d.stride + ki) * d.w + kj;
          for (std::size_t x = 0; x < d.ow; ++x) dst[x * d.stride] += row[y * d.ow + x];
        }
      }
    }
  }
}

template <typename T>
BasicTensor<T> conv2d_impl(const BasicTensor<T>& input, const BasicTensor<T>& kernel, const BasicTensor<T>* bias,
                           std::size_t stride) {
  if (input.dim() != 4) throw DimensionError("conv2d input must be [N, C, H, W], got " + shape_string(input.shape()));
  if (kernel.dim() != 4) throw DimensionError("conv2d kernel must be [O, C, kh, kw]");
  if (stride < 1) throw ContractError("conv2d stride must be >= 1");
  ConvDims d{};
  d.n = input.shape()[0];
  d.c = input.shape()[1];
  d.h = input.shape()[2];
  d.w = input.shape()[3];
  d.o = kernel.shape()[0];
  d.kh = kernel.shape()[2];
  d.kw = kernel.shape()[3];
  d.stride = stride;
  if (kernel.shape()[1] != d.c) {
    throw DimensionError("conv2d channel mismatch: input " + shape_string(input.shape()) + ", kernel " +
                         shape_string(kernel.shape()));
  }
  if (d.h < d.kh || d.w < d.kw) {
    throw DimensionError("conv2d input " + shape_string(input.shape()) + " smaller than kernel " +
                         shape_string(kernel.shape()));
  }
  if (bias && (bias->dim() != 1 || bias->shape()[0] != d.o)) throw DimensionError("conv2d bias must be [O]");
  d.oh = (d.h - d.kh) / stride + 1;
  d.ow = (d.w - d.kw) / stride + 1;

  const std::size_t p = d.positions();
  std::vector<T> out(d.n * d.o * p);
  std::vector<T> cols(d.patch() * p);
  for (std::size_t i = 0; i < d.n; ++i) {
    im2col(input.data().data() + i * d.c * d.h * d.w, d, cols.data());
    T* dst = out.data() + i * d.o * p;
    gemm(false, false, d.o, p, d.patch(), kernel.data().data(), cols.data(), dst, false);
    if (bias) {
      for (std::size_t oc = 0; oc < d.o; ++oc) {
        const T b = bias->data()[oc];
        for (std::size_t j = 0; j < p; ++j) dst[oc * p + j] += b;
      }
    }
  }
  Shape out_shape{d.n, d.o, d.oh, d.ow};
  NodePtr<T> node = bias ? make_output<T>(out_shape, std::move(out), {&input, &kernel, bias})
                         : make_output<T>(out_shape, std::move(out), {&input, &kernel});
  if (node->requires_grad) {
    node->backward = [d](detail::Node<T>& self) {
      auto& nin = *self.parents[0];
      auto& nk = *self.parents[1];
      const std::size_t p = d.positions();
      std::vector<T> cols(d.patch() * p);
      std::vector<T> dcols(nin.requires_grad ? d.patch() * p : 0);
      for (std::size_t i = 0; i < d.n; ++i) {
        const T* g = self.grad.data() + i * d.o * p;
        if (nk.requires_grad) {
          im2col(nin.data.data() + i * d.c * d.h * d.w, d, cols.data());
          gemm(false, true, d.o, d.patch(), p, g, cols.data(), nk.ensure_grad().data(), true);
        }
        if (nin.requires_grad) {
          gemm(true, false, d.patch(), p, d.o, nk.data.data(), g, dcols.data(), false);
          col2im_add(dcols.data(), d, nin.ensure_grad().data() + i * d.c * d.h * d.w);
        }
      }
      if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
        auto& gb = self.parents[2]->ensure_grad();
        for (std::size_t i = 0; i < d.n; ++i) {
          for (std::size_t oc = 0; oc < d.o; ++oc) {
            const T* g = self.grad.data() + (i * d.o + oc) * p;
            T acc = 0;
            for (std::size_t j = 0; j < p; ++j) acc += g[j];
            gb[oc] += acc;
          }
        }
      }
    };
  }
  return BasicTensor<T>::from_node(std::move(node));
}

template <typename T>
void require_finite_input(const BasicTensor<T>& x, const char* op) {
  for (const T v : x.data()) {
    if (std::isnan(v)) throw NumericError(std::string(op) + ": NaN input");
  }
}

// Splits a shape at `axis` into (outer, length, inner) extents.
struct AxisSplit {
  std::size_t outer = 1, length = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_string(shape));
  AxisSplit s;
  for (std::size_t d = 0; d < axis; ++d) s.outer *= shape[d];
  s.length = shape[axis];
  for (std::size_t d = axis + 1; d < shape.size(); ++d) s.inner *= shape[d];
  return s;
}

}  // namespace

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError("cannot broadcast " + shape_string(a) + " with " + shape_string(b));
    }
    out[i] = da == 1 ? db : da;
  }
  return out;
}

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return binary(a, b, BinaryKind::Add);
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return binary(a, b, BinaryKind::Sub);
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return binary(a, b, BinaryKind::Mul);
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, T factor) {
  return unary(x, [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
BasicTensor<T> add_scalar(const BasicTensor<T>& x, T value) {
  return unary(x, [value](T v) { return v + value; }, [](T, T) { return T(1); });
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  return unary(x, [](T v) { return v > T(0) ? v : T(0); }, [](T in, T) { return in > T(0) ? T(1) : T(0); });
}

template <typename T>
BasicTensor<T> square(const BasicTensor<T>& x) {
  return unary(x, [](T v) { return v * v; }, [](T in, T) { return T(2) * in; });
}

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return matmul_impl(a, b, false);
}

template <typename T>
BasicTensor<T> matmul_nt(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return matmul_impl(a, b, true);
}

template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias) {
  return linear_impl(x, weight, &bias);
}

template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight) {
  return linear_impl<T>(x, weight, nullptr);
}

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& kernel, std::size_t stride) {
  return conv2d_impl<T>(input, kernel, nullptr, stride);
}

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& kernel, const BasicTensor<T>& bias,
                      std::size_t stride) {
  return conv2d_impl(input, kernel, &bias, stride);
}

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x) {
  if (x.dim() < 1 || x.shape().back() == 0) throw DimensionError("softmax needs a non-empty last axis");
  require_finite_input(x, "softmax");
  const std::size_t width = x.shape().back();
  const std::size_t rows = x.numel() / width;
  std::vector<T> out(x.numel());
  const T* px = x.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = px + r * width;
    T* y = out.data() + r * width;
    const T peak = *std::max_element(in, in + width);
    T total = 0;
    for (std::size_t j = 0; j < width; ++j) {
      y[j] = std::exp(in[j] - peak);
      total += y[j];
    }
    for (std::size_t j = 0; j < width; ++j) y[j] /= total;
  }
  auto node = make_output<T>(x.shape(), std::move(out), {&x});
  if (node->requires_grad) {
    node->backward = [rows, width](detail::Node<T>& self) {
      auto& gx = self.parents[0]->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const T* y = self.data.data() + r * width;
        const T* g = self.grad.data() + r * width;
        T dot = 0;
        for (std::size_t j = 0; j < width; ++j) dot += g[j] * y[j];
        for (std::size_t j = 0; j < width; ++j) gx[r * width + j] += y[j] * (g[j] - dot);
      }
    };
  }
  return BasicTensor<T>::from_node(std::move(node));
}

template <typename T>
BasicTensor<T> log_softmax(const BasicTensor<T>& x) {
  if (x.dim() < 1 || x.shape().back() == 0) throw DimensionError("log_softmax needs a non-empty last axis");
  require_finite_input(x, "log_softmax");
  const std::size_t width = x.shape().back();
  const std::size_t rows = x.numel() / width;
  std::vector<T> out(x.numel());
  const T* px = x.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = px + r * width;
    T* y = out.data() + r * width;
    const T peak = *std::max_element(in, in + width);
    T total = 0;
    for (std::size_t j = 0; j < width; ++j) total += std::exp(in[j] - peak);
    const T log_norm = peak + std::log(total);
    for (std::size_t j = 0; j < width; ++j) y[j] = in[j] - log_norm;
  }
  auto node = make_output<T>(x.shape(), std::move(out), {&x});
  if (node->requires_grad) {
    node->backward = [rows, width](detail::Node<T>& self) {
      auto& gx = self.parents[0]->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const T* y = self.data.data() + r * width;
        const T* g = self.grad.data() + r * width;
        T total = 0;
        for (std::size_t j = 0; j < width; ++j) total += g[j];
        for (std::size_t j = 0; j < width; ++j) gx[r * width + j] += g[j] - std::exp(y[j]) * total;
      }
    };
  }
  return BasicTensor<T>::from_node(std::move(node));
}

template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gain, const BasicTensor<T>& bias, T epsilon) {
  if (x.dim() < 1 || x.shape().back() == 0) throw DimensionError("layer_norm needs a non-empty last axis");
  const std::size_t width = x.shape().back();
  if (gain.numel() != width || bias.numel() != width) {
    throw DimensionError("layer_norm gain/bias must match last axis " + std::to_string(width));
  }
  const std::size_t rows = x.numel() / width;
  std::vector<T> out(x.numel());
  std::vector<T> normalized(x.numel());
  std::vector<T> inv_std(rows);
  const T* px = x.data().data();
  const T* pg = gain.data().data();
  const T* pb = bias.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = px + r * width;
    T mu = 0;
    for (std::size_t j = 0; j < width; ++j) mu += in[j];
    mu /= static_cast<T>(width);
    T var = 0;
    for (std::size_t j = 0; j < width; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<T>(width);
    const T inv = T(1) / std::sqrt(var + epsilon);
    inv_std[r] = inv;
    for (std::size_t j = 0; j < width; ++j) {
      const T xh = (in[j] - mu) * inv;
      normalized[r * width + j] = xh;
      out[r * width + j] = pg[j] * xh + pb[j];
    }
  }
  auto node = make_output<T>(x.shape(), std::move(out), {&x, &gain, &bias});
  if (node->requires_grad) {
    node->backward = [rows, width, normalized = std::move(normalized), inv_std = std::move(inv_std)](detail::Node<T>& self) {
      auto& nx = *self.parents[0];
      auto& ng = *self.parents[1];
      auto& nb = *self.parents[2];
      const T* g = self.grad.data();
      if (ng.requires_grad || nb.requires_grad) {
        auto* gg = ng.requires_grad ? ng.ensure_grad().data() : nullptr;
        auto* gb = nb.requires_grad ? nb.ensure_grad().data() : nullptr;
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < width; ++j) {
            const T gv = g[r * width + j];
            if (gg) gg[j] += gv * normalized[r * width + j];
            if (gb) gb[j] += gv;
          }
        }
      }
      if (nx.requires_grad) {
        auto& gx = nx.ensure_grad();
        const T* gain_v = ng.data.data();
        const T n = static_cast<T>(width);
        for (std::size_t r = 0; r < rows; ++r) {
          T mean_d = 0;
          T mean_dx = 0;
          for (std::size_t j = 0; j < width; ++j) {
            const T d = g[r * width + j] * gain_v[j];
            mean_d += d;
            mean_dx += d * normalized[r * width + j];
          }
          mean_d /= n;
          mean_dx /= n;
          for (std::size_t j = 0; j < width; ++j) {
            const T d = g[r * width + j] * gain_v[j];
            gx[r * width + j] += inv_std[r] * (d - mean_d - normalized[r * width + j] * mean_dx);
          }
        }
      }
    };
  }
  return BasicTensor<T>::from_node(std::move(node));
}

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("cannot reshape " + shape_string(x.shape()) + " to " + shape_string(shape));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  auto node = make_output<T>(std::move(shape), std::move(out), {&x});
  if (node->requires_grad) {
    node->backward = [](detail::Node<T>& self) {
      auto& gx = self.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
    };
  }
  return BasicTensor<T>::from_node(std::move(node));
}

template <typename T>
BasicTensor<T> permute(const BasicTensor<T>& x, const std::vector<std::size_t>& axes) {
  const std::size_t rank = x.dim();
  if (axes.size() != rank) throw DimensionError("permute axes must cover every dimension");
  std::vector<bool> used(rank, false);
  for (auto a : axes) {
    if (a >= rank || used[a]) throw DimensionError("permute axes must be a permutation");
    used[a] = true;
  }
  Shape out_shape(rank);
  const auto in_strides = contiguous_strides(x.shape());
  std::vector<std::size_t> gather(rank);
  for (std::size_t d = 0; d < rank; ++d) {
    out_shape[d] = x.shape()[axes[d]];
    gather[d] = in_strides[axes[d]];
  }
  // Source offset of each output element, computed once and reused by backward.
  std::vector<std::size_t> source(x.numel());
  const std::vector<std::size_t> zero(rank, 0);
  broadcast_loop(out_shape, gather, zero, [&](std::size_t o, std::size_t i, std::size_t) { source[o] = i; });
  std::vector<T> out(x.numel());
  const T* px = x.data().data();
  for (std::size_t o = 0; o < out.size(); ++o) out[o] = px[source[o]];
  auto node = make_output<T>(std::move(out_shape), std::move(out), {&x});
  if (node->requires_grad) {
    node->backward = [source = std::move(source)](detail::Node<T>& self) {
      auto& gx = self.parents[0]->ensure_grad();
      for (std::size_t o = 0; o < source.size(); ++o) gx[source[o]] += self.grad[o];
    };
  }
  return BasicTensor<T>::from_node(std::move(node));
}

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& x, std::size_t axis0, std::size_t axis1) {
  std::vector<std::size_t> axes(x.dim());
  std::iota(axes.begin(), axes.end(), std::size_t{0});
  if (axis0 >= x.dim() || axis1 >= x.dim()) throw DimensionError("transpose axis out of range");
  std::swap(axes[axis0], axes[axis1]);
  return permute(x, axes);
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  T total = 0;
  for (const T v : x.data()) total += v;
  auto node = make_output<T>(Shape{}, std::vector<T>{total}, {&x});
  if (node->requires_grad) {
    node->backward = [](detail::Node<T>& self) {
      auto& gx = self.parents[0]->ensure_grad();
      for (auto& g : gx) g += self.grad[0];
    };
  }
  return BasicTensor<T>::from_node(std::move(node));
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
  if (x.numel() == 0) throw DimensionError("mean of an empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
BasicTensor<T> sum_axis(const BasicTensor<T>& x, std::size_t axis, bool keepdim) {
  const auto s = split_at(x.shape(), axis);
  std::vector<T> out(s.outer * s.inner, T(0));
  const T* px = x.data().data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t l = 0; l < s.length; ++l) {
      const T* src = px + (o * s.length + l) * s.inner;
      T* dst = out.data() + o * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
    }
  }
  Shape out_shape = x.shape();
  if (keepdim) {
    out_shape[axis] = 1;
  } else {
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  }
  auto node = make_output<T>(std::move(out_shape), std::move(out), {&x});
  if (node->requires_grad) {
    node->backward = [s](detail::Node<T>& self) {
      auto& gx = self.parents[0]->ensure_grad();
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t l = 0; l < s.length; ++l) {
          T* dst = gx.data() + (o * s.length + l) * s.inner;
          const T* g = self.grad.data() + o * s.inner;
          for (std::size_t i = 0; i < s.inner; ++i) dst[i] += g[i];
        }
      }
    };
  }
  return BasicTensor<T>::from_node(std::move(node));
}

template <typename T>
BasicTensor<T> mean_axis(const BasicTensor<T>& x, std::size_t axis, bool keepdim) {
  const auto s = split_at(x.shape(), axis);
  if (s.length == 0) throw DimensionError("mean over an empty axis");
  return scale(sum_axis(x, axis, keepdim), T(1) / static_cast<T>(s.length));
}

template <typename T>
BasicTensor<T> select_rows(const BasicTensor<T>& x, std::span<const int> index) {
  if (x.dim() < 2) throw DimensionError("select_rows needs rank >= 2");
  const std::size_t batch = x.shape()[0];
  const std::size_t choices = x.shape()[1];
  if (index.size() != batch) throw DimensionError("select_rows needs one index per batch row");
  std::size_t inner = 1;
  for (std::size_t d = 2; d < x.dim(); ++d) inner *= x.shape()[d];
  std::vector<std::size_t> rows(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    if (index[b] < 0 || static_cast<std::size_t>(index[b]) >= choices) {
      throw ContractError("select_rows index " + std::to_string(index[b]) + " out of range");
    }
    rows[b] = b * choices + static_cast<std::size_t>(index[b]);
  }
  std::vector<T> out(batch * inner);
  const T* px = x.data().data();
  for (std::size_t b = 0; b < batch; ++b) std::copy_n(px + rows[b] * inner, inner, out.data() + b * inner);
  Shape out_shape(x.shape().begin() + 2, x.shape().end());
  out_shape.insert(out_shape.begin(), batch);
  auto node = make_output<T>(std::move(out_shape), std::move(out), {&x});
  if (node->requires_grad) {
    node->backward = [rows = std::move(rows), inner](detail::Node<T>& self) {
      auto& gx = self.parents[0]->ensure_grad();
      for (std::size_t b = 0; b < rows.size(); ++b) {
        for (std::size_t i = 0; i < inner; ++i) gx[rows[b] * inner + i] += self.grad[b * inner + i];
      }
    };
  }
  return BasicTensor<T>::from_node(std::move(node));
}

#define AQT_INSTANTIATE_OPS(T)                                                                                     \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                                       \
  template BasicTensor<T> sub(const BasicTensor<T>&, const BasicTensor<T>&);                                       \
  template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);                                       \
  template BasicTensor<T> scale(const BasicTensor<T>&, T);                                                         \
  template BasicTensor<T> add_scalar(const BasicTensor<T>&, T);                                                    \
  template BasicTensor<T> relu(const BasicTensor<T>&);                                                             \
  template BasicTensor<T> square(const BasicTensor<T>&);                                                           \
  template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);                                    \
  template BasicTensor<T> matmul_nt(const BasicTensor<T>&, const BasicTensor<T>&);                                 \
  template BasicTensor<T> linear(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&);             \
  template BasicTensor<T> linear(const BasicTensor<T>&, const BasicTensor<T>&);                                    \
  template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&, std::size_t);                       \
  template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&, std::size_t); \
  template BasicTensor<T> softmax(const BasicTensor<T>&);                                                          \
  template BasicTensor<T> log_softmax(const BasicTensor<T>&);                                                      \
  template BasicTensor<T> layer_norm(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&, T);      \
  template BasicTensor<T> reshape(const BasicTensor<T>&, Shape);                                                   \
  template BasicTensor<T> permute(const BasicTensor<T>&, const std::vector<std::size_t>&);                         \
  template BasicTensor<T> transpose(const BasicTensor<T>&, std::size_t, std::size_t);                              \
  template BasicTensor<T> sum(const BasicTensor<T>&);                                                              \
  template BasicTensor<T> mean(const BasicTensor<T>&);                                                             \
  template BasicTensor<T> sum_axis(const BasicTensor<T>&, std::size_t, bool);                                      \
  template BasicTensor<T> mean_axis(const BasicTensor<T>&, std::size_t, bool);                                     \
  template BasicTensor<T> select_rows(const BasicTensor<T>&, std::span<const int>);

AQT_INSTANTIATE_OPS(float)
AQT_INSTANTIATE_OPS(double)

#undef AQT_INSTANTIATE_OPS

}  // namespace aqt
