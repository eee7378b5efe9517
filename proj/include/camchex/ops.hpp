// Differentiable tensor operations.
//
// Every op checks its shape contract, computes the forward value and, when
// recording, installs a closure that adds the node's gradient into its
// parents. Layouts are row-major; images are [batch, channels, height, width].
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "camchex/tensor.hpp"

namespace camchex::ops {

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw InputError(what);
}

template <class T>
std::vector<T>& pgrad(Node<T>& self, std::size_t i) {
  return self.parents[i]->ensure_grad();
}

template <class T>
const std::vector<T>& pval(Node<T>& self, std::size_t i) {
  return self.parents[i]->value;
}

template <class T>
bool pneeds(Node<T>& self, std::size_t i) {
  return self.parents[i]->requires_grad;
}

}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(),
                  "add: shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return Tensor<T>::from_op(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (!detail::pneeds(self, p)) continue;
      auto& g = detail::pgrad(self, p);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(),
                  "mul: shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return Tensor<T>::from_op(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (!detail::pneeds(self, p)) continue;
      auto& g = detail::pgrad(self, p);
      const auto& other = detail::pval(self, 1 - p);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * other[i];
    }
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * s;
  return Tensor<T>::from_op(x.shape(), std::move(out), {x}, [s](Node<T>& self) {
    auto& g = detail::pgrad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
  });
}

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.data()) acc += v;
  return Tensor<T>::from_op({1}, {acc}, {x}, [](Node<T>& self) {
    auto& g = detail::pgrad(self, 0);
    for (auto& v : g) v += self.grad[0];
  });
}

/// Shares no storage with the input; only the shape changes.
template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  detail::require(numel(shape) == x.size(),
                  "reshape: " + shape_string(x.shape()) + " -> " + shape_string(shape));
  return Tensor<T>::from_op(std::move(shape), x.values(), {x}, [](Node<T>& self) {
    auto& g = detail::pgrad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

/// x[M,N] + b[N] broadcast over rows.
template <class T>
Tensor<T> add_bias_rows(const Tensor<T>& x, const Tensor<T>& b) {
  detail::require(x.rank() == 2 && b.rank() == 1 && b.dim(0) == x.dim(1),
                  "add_bias_rows: " + shape_string(x.shape()) + " + " + shape_string(b.shape()));
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x.data()[i * n + j] + b.data()[j];
  return Tensor<T>::from_op(x.shape(), std::move(out), {x, b}, [m, n](Node<T>& self) {
    if (detail::pneeds(self, 0)) {
      auto& g = detail::pgrad(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (detail::pneeds(self, 1)) {
      auto& g = detail::pgrad(self, 1);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
    }
  });
}

namespace detail {

// c[M,N] += a[M,K] * b[K,N]
template <class T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[M,N] += a[M,K] * b[N,K]^T
template <class T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      T acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[j * k + p];
      c[i * n + j] += acc;
    }
}

// c[K,N] += a[M,K]^T * b[M,N]
template <class T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      T* crow = c + p * n;
      const T* brow = b + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
}

}  // namespace detail

/// a[M,K] * b[K,N]
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
                  "matmul: " + shape_string(a.shape()) + " * " + shape_string(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n, T(0));
  detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return Tensor<T>::from_op({m, n}, std::move(out), {a, b}, [m, k, n](Node<T>& self) {
    if (detail::pneeds(self, 0))
      detail::gemm_nt(self.grad.data(), detail::pval(self, 1).data(), detail::pgrad(self, 0).data(), m, n, k);
    if (detail::pneeds(self, 1))
      detail::gemm_tn(detail::pval(self, 0).data(), self.grad.data(), detail::pgrad(self, 1).data(), m, k, n);
  });
}

/// a[M,K] * b[N,K]^T
template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1),
                  "matmul_nt: " + shape_string(a.shape()) + " * " + shape_string(b.shape()) + "^T");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  std::vector<T> out(m * n, T(0));
  detail::gemm_nt(a.data().data(), b.data().data(), out.data(), m, k, n);
  return Tensor<T>::from_op({m, n}, std::move(out), {a, b}, [m, k, n](Node<T>& self) {
    // dA = dC * B, dB = dC^T * A
    if (detail::pneeds(self, 0))
      detail::gemm_nn(self.grad.data(), detail::pval(self, 1).data(), detail::pgrad(self, 0).data(), m, n, k);
    if (detail::pneeds(self, 1))
      detail::gemm_tn(self.grad.data(), detail::pval(self, 0).data(), detail::pgrad(self, 1).data(), m, n, k);
  });
}

template <class T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  detail::require(x.rank() == 2, "softmax_rows: rank-2 input required");
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < m; ++i) {
    const T* in = x.data().data() + i * n;
    T* o = out.data() + i * n;
    T mx = in[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, in[j]);
    T z = 0;
    for (std::size_t j = 0; j < n; ++j) z += (o[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < n; ++j) o[j] /= z;
  }
  return Tensor<T>::from_op(x.shape(), std::move(out), {x}, [m, n](Node<T>& self) {
    auto& g = detail::pgrad(self, 0);
    for (std::size_t i = 0; i < m; ++i) {
      const T* y = self.value.data() + i * n;
      const T* gy = self.grad.data() + i * n;
      T dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += y[j] * gy[j];
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += y[j] * (gy[j] - dot);
    }
  });
}

/// Exact (erf) GELU.
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  std::vector<T> out(x.size());
  const T inv_sqrt2 = T(0.70710678118654752440);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = x.data()[i];
    out[i] = T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2));
  }
  return Tensor<T>::from_op(x.shape(), std::move(out), {x}, [inv_sqrt2](Node<T>& self) {
    auto& g = detail::pgrad(self, 0);
    const auto& in = detail::pval(self, 0);
    const T inv_sqrt_2pi = T(0.39894228040143267794);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T v = in[i];
      const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
      const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
      g[i] += self.grad[i] * (cdf + v * pdf);
    }
  });
}

/// Layer normalization over the last dimension of x[M,N].
template <class T>
Tensor<T> layer_norm_rows(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
  detail::require(x.rank() == 2 && gamma.size() == x.dim(1) && beta.size() == x.dim(1),
                  "layer_norm_rows: " + shape_string(x.shape()) + " with affine " + shape_string(gamma.shape()));
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<T> out(x.size());
  std::vector<T> xhat(x.size()), inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    const T* in = x.data().data() + i * n;
    T mean = 0;
    for (std::size_t j = 0; j < n; ++j) mean += in[j];
    mean /= T(n);
    T var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= T(n);
    inv_std[i] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (in[j] - mean) * inv_std[i];
      out[i * n + j] = xhat[i * n + j] * gamma.data()[j] + beta.data()[j];
    }
  }
  return Tensor<T>::from_op(
      x.shape(), std::move(out), {x, gamma, beta},
      [m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
        const auto& gam = detail::pval(self, 1);
        if (detail::pneeds(self, 1) || detail::pneeds(self, 2)) {
          auto& gg = detail::pgrad(self, 1);
          auto& gb = detail::pgrad(self, 2);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
              gg[j] += self.grad[i * n + j] * xhat[i * n + j];
              gb[j] += self.grad[i * n + j];
            }
        }
        if (!detail::pneeds(self, 0)) return;
        auto& gx = detail::pgrad(self, 0);
        for (std::size_t i = 0; i < m; ++i) {
          T mean_g = 0, mean_gx = 0;
          for (std::size_t j = 0; j < n; ++j) {
            const T gh = self.grad[i * n + j] * gam[j];
            mean_g += gh;
            mean_gx += gh * xhat[i * n + j];
          }
          mean_g /= T(n);
          mean_gx /= T(n);
          for (std::size_t j = 0; j < n; ++j) {
            const T gh = self.grad[i * n + j] * gam[j];
            gx[i * n + j] += inv_std[i] * (gh - mean_g - xhat[i * n + j] * mean_gx);
          }
        }
      });
}

/// Grouped 2-D convolution. x[B,C,H,W], w[O,C/groups,K,K], bias[O].
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, std::size_t stride,
                 std::size_t pad, std::size_t groups = 1) {
  detail::require(x.rank() == 4 && w.rank() == 4 && bias.rank() == 1, "conv2d: rank mismatch");
  const std::size_t nb = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t o = w.dim(0), cg = w.dim(1), k = w.dim(2);
  detail::require(groups >= 1 && c % groups == 0 && o % groups == 0 && cg == c / groups && w.dim(3) == k &&
                      bias.dim(0) == o && stride >= 1,
                  "conv2d: input " + shape_string(x.shape()) + " incompatible with kernel " +
                      shape_string(w.shape()));
  detail::require(h + 2 * pad >= k && wd + 2 * pad >= k, "conv2d: kernel larger than padded input");
  const std::size_t oh = (h + 2 * pad - k) / stride + 1, ow = (wd + 2 * pad - k) / stride + 1;
  const std::size_t og = o / groups;
  std::vector<T> out(nb * o * oh * ow);
  const T* xv = x.data().data();
  const T* wv = w.data().data();
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t oc = 0; oc < o; ++oc) {
      const std::size_t g = oc / og;
      T* op = out.data() + ((b * o + oc) * oh) * ow;
      for (std::size_t i = 0; i < oh * ow; ++i) op[i] = bias.data()[oc];
      for (std::size_t ic = 0; ic < cg; ++ic) {
        const T* xp = xv + (b * c + g * cg + ic) * h * wd;
        const T* wp = wv + (oc * cg + ic) * k * k;
        for (std::size_t ky = 0; ky < k; ++ky)
          for (std::size_t kx = 0; kx < k; ++kx) {
            const T wk = wp[ky * k + kx];
            for (std::size_t y = 0; y < oh; ++y) {
              const std::ptrdiff_t iy = std::ptrdiff_t(y * stride + ky) - std::ptrdiff_t(pad);
              if (iy < 0 || iy >= std::ptrdiff_t(h)) continue;
              for (std::size_t xx = 0; xx < ow; ++xx) {
                const std::ptrdiff_t ix = std::ptrdiff_t(xx * stride + kx) - std::ptrdiff_t(pad);
                if (ix < 0 || ix >= std::ptrdiff_t(wd)) continue;
                op[y * ow + xx] += wk * xp[iy * std::ptrdiff_t(wd) + ix];
              }
            }
          }
      }
    }
  return Tensor<T>::from_op(
      {nb, o, oh, ow}, std::move(out), {x, w, bias},
      [=](Node<T>& self) {
        const auto& xin = detail::pval(self, 0);
        const auto& win = detail::pval(self, 1);
        const bool need_x = detail::pneeds(self, 0), need_w = detail::pneeds(self, 1);
        std::vector<T>* gx = need_x ? &detail::pgrad(self, 0) : nullptr;
        std::vector<T>* gw = need_w ? &detail::pgrad(self, 1) : nullptr;
        if (detail::pneeds(self, 2)) {
          auto& gb = detail::pgrad(self, 2);
          for (std::size_t b = 0; b < nb; ++b)
            for (std::size_t oc = 0; oc < o; ++oc) {
              const T* gp = self.grad.data() + ((b * o + oc) * oh) * ow;
              for (std::size_t i = 0; i < oh * ow; ++i) gb[oc] += gp[i];
            }
        }
        if (!need_x && !need_w) return;
        for (std::size_t b = 0; b < nb; ++b)
          for (std::size_t oc = 0; oc < o; ++oc) {
            const std::size_t g = oc / og;
            const T* gp = self.grad.data() + ((b * o + oc) * oh) * ow;
            for (std::size_t ic = 0; ic < cg; ++ic) {
              const std::size_t xoff = (b * c + g * cg + ic) * h * wd;
              const std::size_t woff = (oc * cg + ic) * k * k;
              for (std::size_t ky = 0; ky < k; ++ky)
                for (std::size_t kx = 0; kx < k; ++kx) {
                  const T wk = win[woff + ky * k + kx];
                  T acc_w = 0;
                  for (std::size_t y = 0; y < oh; ++y) {
                    const std::ptrdiff_t iy = std::ptrdiff_t(y * stride + ky) - std::ptrdiff_t(pad);
                    if (iy < 0 || iy >= std::ptrdiff_t(h)) continue;
                    for (std::size_t xx = 0; xx < ow; ++xx) {
                      const std::ptrdiff_t ix = std::ptrdiff_t(xx * stride + kx) - std::ptrdiff_t(pad);
                      if (ix < 0 || ix >= std::ptrdiff_t(wd)) continue;
                      const std::size_t xi = xoff + std::size_t(iy) * wd + std::size_t(ix);
                      const T go = gp[y * ow + xx];
                      acc_w += go * xin[xi];
                      if (gx) (*gx)[xi] += go * wk;
                    }
                  }
                  if (gw) (*gw)[woff + ky * k + kx] += acc_w;
                }
            }
          }
      });
}

/// x[B,C,H,W] -> [B*H*W, C]; token (b,y,x) sits at row (b*H + y)*W + x.
template <class T>
Tensor<T> nchw_to_tokens(const Tensor<T>& x) {
  detail::require(x.rank() == 4, "nchw_to_tokens: rank-4 input required");
  const std::size_t nb = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<T> out(x.size());
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < hw; ++p) out[(b * hw + p) * c + ch] = x.data()[(b * c + ch) * hw + p];
  return Tensor<T>::from_op({nb * hw, c}, std::move(out), {x}, [nb, c, hw](Node<T>& self) {
    auto& g = detail::pgrad(self, 0);
    for (std::size_t b = 0; b < nb; ++b)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t p = 0; p < hw; ++p) g[(b * c + ch) * hw + p] += self.grad[(b * hw + p) * c + ch];
  });
}

/// Inverse of nchw_to_tokens.
template <class T>
Tensor<T> tokens_to_nchw(const Tensor<T>& t, std::size_t batch, std::size_t height, std::size_t width) {
  detail::require(t.rank() == 2 && t.dim(0) == batch * height * width,
                  "tokens_to_nchw: " + shape_string(t.shape()) + " cannot hold " + std::to_string(batch) + "x" +
                      std::to_string(height) + "x" + std::to_string(width));
  const std::size_t c = t.dim(1), hw = height * width;
  std::vector<T> out(t.size());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < hw; ++p) out[(b * c + ch) * hw + p] = t.data()[(b * hw + p) * c + ch];
  return Tensor<T>::from_op({batch, c, height, width}, std::move(out), {t}, [batch, c, hw](Node<T>& self) {
    auto& g = detail::pgrad(self, 0);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t p = 0; p < hw; ++p) g[(b * hw + p) * c + ch] += self.grad[(b * c + ch) * hw + p];
  });
}

/// Concatenates along the leading dimension; trailing dimensions must agree.
template <class T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  detail::require(!parts.empty(), "concat_rows: no inputs");
  Shape shape = parts.front().shape();
  detail::require(!shape.empty(), "concat_rows: scalar input");
  std::size_t rows = 0;
  std::vector<T> out;
  for (const auto& p : parts) {
    detail::require(p.rank() == shape.size() && std::equal(shape.begin() + 1, shape.end(), p.shape().begin() + 1),
                    "concat_rows: " + shape_string(p.shape()) + " incompatible with " + shape_string(shape));
    rows += p.dim(0);
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  shape[0] = rows;
  std::vector<std::size_t> sizes;
  for (const auto& p : parts) sizes.push_back(p.size());
  return Tensor<T>::from_op(std::move(shape), std::move(out), parts, [sizes](Node<T>& self) {
    std::size_t off = 0;
    for (std::size_t p = 0; p < sizes.size(); ++p) {
      if (detail::pneeds(self, p)) {
        auto& g = detail::pgrad(self, p);
        for (std::size_t i = 0; i < sizes[p]; ++i) g[i] += self.grad[off + i];
      }
      off += sizes[p];
    }
  });
}

/// Rows [start, start+count) of the leading dimension.
template <class T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t start, std::size_t count) {
  detail::require(x.rank() >= 1 && start + count <= x.dim(0), "slice_rows: range out of bounds");
  Shape shape = x.shape();
  const std::size_t row = x.size() / std::max<std::size_t>(x.dim(0), 1);
  shape[0] = count;
  std::vector<T> out(x.data().begin() + start * row, x.data().begin() + (start + count) * row);
  return Tensor<T>::from_op(std::move(shape), std::move(out), {x}, [start, row](Node<T>& self) {
    auto& g = detail::pgrad(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[start * row + i] += self.grad[i];
  });
}

/// Columns [start, start+count) of x[M,N].
template <class T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t start, std::size_t count) {
  detail::require(x.rank() == 2 && start + count <= x.dim(1), "slice_cols: range out of bounds");
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<T> out(m * count);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < count; ++j) out[i * count + j] = x.data()[i * n + start + j];
  return Tensor<T>::from_op({m, count}, std::move(out), {x}, [m, n, start, count](Node<T>& self) {
    auto& g = detail::pgrad(self, 0);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < count; ++j) g[i * n + start + j] += self.grad[i * count + j];
  });
}

/// Concatenates rank-2 tensors with equal row counts along columns.
template <class T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  detail::require(!parts.empty(), "concat_cols: no inputs");
  const std::size_t m = parts.front().dim(0);
  std::vector<std::size_t> widths;
  std::size_t n = 0;
  for (const auto& p : parts) {
    detail::require(p.rank() == 2 && p.dim(0) == m, "concat_cols: row count mismatch");
    widths.push_back(p.dim(1));
    n += p.dim(1);
  }
  std::vector<T> out(m * n);
  std::size_t off = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < widths[p]; ++j) out[i * n + off + j] = parts[p].data()[i * widths[p] + j];
    off += widths[p];
  }
  return Tensor<T>::from_op({m, n}, std::move(out), parts, [m, n, widths](Node<T>& self) {
    std::size_t off = 0;
    for (std::size_t p = 0; p < widths.size(); ++p) {
      if (detail::pneeds(self, p)) {
        auto& g = detail::pgrad(self, p);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < widths[p]; ++j) g[i * widths[p] + j] += self.grad[i * n + off + j];
      }
      off += widths[p];
    }
  });
}

/// Rows of table[V,D] selected by ids -> [ids.size(), D].
template <class T>
Tensor<T> gather_rows(const Tensor<T>& table, std::span<const std::size_t> ids) {
  detail::require(table.rank() == 2, "gather_rows: rank-2 table required");
  const std::size_t v = table.dim(0), d = table.dim(1);
  std::vector<T> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    detail::require(ids[i] < v, "gather_rows: id " + std::to_string(ids[i]) + " >= " + std::to_string(v));
    std::copy_n(table.data().begin() + ids[i] * d, d, out.begin() + i * d);
  }
  std::vector<std::size_t> idx(ids.begin(), ids.end());
  return Tensor<T>::from_op({ids.size(), d}, std::move(out), {table}, [idx, d](Node<T>& self) {
    auto& g = detail::pgrad(self, 0);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) g[idx[i] * d + j] += self.grad[i * d + j];
  });
}

/// Row sums of x[M,N] -> [M].
template <class T>
Tensor<T> sum_cols(const Tensor<T>& x) {
  detail::require(x.rank() == 2, "sum_cols: rank-2 input required");
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<T> out(m, T(0));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i] += x.data()[i * n + j];
  return Tensor<T>::from_op({m}, std::move(out), {x}, [m, n](Node<T>& self) {
    auto& g = detail::pgrad(self, 0);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[i];
  });
}

/// Inverted dropout with a fixed mask drawn from rng; identity when p == 0.
template <class T, class Rng>
Tensor<T> dropout(const Tensor<T>& x, double p, Rng& rng) {
  if (p <= 0.0) return x;
  detail::require(p < 1.0, "dropout: probability must be < 1");
  std::bernoulli_distribution keep(1.0 - p);
  std::vector<T> mask(x.size());
  const T s = T(1.0 / (1.0 - p));
  for (auto& m : mask) m = keep(rng) ? s : T(0);
  return mul(x, Tensor<T>(x.shape(), std::move(mask)));
}

}  // namespace camchex::ops
