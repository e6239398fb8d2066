#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "vlm/rng.hpp"
#include "vlm/tensor.hpp"

namespace vlm {

// Boolean attention mask over (query, key) pairs. True = attention allowed.
struct AttnMask {
  int q = 0;
  int k = 0;
  std::vector<uint8_t> allow;

  AttnMask() = default;
  AttnMask(int q_, int k_) : q(q_), k(k_), allow(static_cast<size_t>(q_) * static_cast<size_t>(k_), 0) {}

  uint8_t& at(int i, int j) { return allow[static_cast<size_t>(i) * static_cast<size_t>(k) + static_cast<size_t>(j)]; }
  uint8_t at(int i, int j) const { return allow[static_cast<size_t>(i) * static_cast<size_t>(k) + static_cast<size_t>(j)]; }

  static AttnMask full(int q, int k) {
    AttnMask m(q, k);
    std::fill(m.allow.begin(), m.allow.end(), 1);
    return m;
  }

  bool operator==(const AttnMask& o) const { return q == o.q && k == o.k && allow == o.allow; }
};

// Per-head additive bias lookup indices for a (q, k) logit matrix.
// idx[i*k+j] selects a column of the bias table; -1 means zero bias.
struct BiasIndex {
  int q = 0;
  int k = 0;
  std::vector<int> idx;
};

namespace detail {

// C[m,n] += A[m,k] * B[k,n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    T* crow = c + static_cast<size_t>(i) * n;
    const T* arow = a + static_cast<size_t>(i) * k;
    for (int kk = 0; kk < k; ++kk) {
      const T av = arow[kk];
      const T* brow = b + static_cast<size_t>(kk) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<size_t>(i) * k;
    T* crow = c + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const T* brow = b + static_cast<size_t>(j) * k;
      T acc{};
      for (int kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
      crow[j] += acc;
    }
  }
}

// C[m,n] += A[k,m]^T * B[k,n]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int kk = 0; kk < k; ++kk) {
    const T* arow = a + static_cast<size_t>(kk) * m;
    const T* brow = b + static_cast<size_t>(kk) * n;
    for (int i = 0; i < m; ++i) {
      const T av = arow[i];
      T* crow = c + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

// Reverse-mode autodiff tape. Values are recorded in construction order,
// which is a topological order by construction; backward() walks the nodes
// in reverse. One training step owns its tape exclusively.
template <typename T>
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  bool grad_enabled() const { return grad_enabled_; }

  int leaf(Tensor<T> value) {
    values_.push_back(std::move(value));
    nodes_.emplace_back();
    return static_cast<int>(values_.size()) - 1;
  }

  const Tensor<T>& val(int id) const { return values_[static_cast<size_t>(id)]; }

  // Gradient of a value; zeros if nothing has been accumulated.
  const Tensor<T>& grad(int id) {
    ensure_grad(id);
    return grads_[static_cast<size_t>(id)];
  }

  size_t size() const { return values_.size(); }

  // Reverse accumulation from a scalar loss. Call at most once per tape.
  void backward(int loss_id) {
    const Tensor<T>& loss = val(loss_id);
    if (loss.numel() != 1)
      throw std::runtime_error("backward: loss must be scalar, got " + shape_str(loss.shape()));
    if (backward_done_) throw std::runtime_error("backward: tape already differentiated");
    backward_done_ = true;
    grads_.resize(values_.size());
    ensure_grad(loss_id);
    grads_[static_cast<size_t>(loss_id)][0] = T{1};
    for (int id = loss_id; id >= 0; --id) {
      auto& node = nodes_[static_cast<size_t>(id)];
      if (!node.backward) continue;
      if (grads_[static_cast<size_t>(id)].empty()) continue;  // not reachable from loss
      node.backward();
    }
  }

  // ---- elementwise / structural ops ----

  int add(int a, int b) {
    const auto& av = val(a);
    const auto& bv = val(b);
    if (!av.same_shape(bv))
      throw std::runtime_error("add: shape mismatch " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
    Tensor<T> out(av.shape());
    for (size_t i = 0; i < out.numel(); ++i) out[i] = av[i] + bv[i];
    return record("add", std::move(out), {a, b}, [this, a, b](int o) {
      accumulate(a, grads_[static_cast<size_t>(o)]);
      accumulate(b, grads_[static_cast<size_t>(o)]);
    });
  }

  // x: [..., D] plus bias [D] broadcast over leading dims.
  int add_bias(int x, int b) {
    const auto& xv = val(x);
    const auto& bv = val(b);
    if (xv.rank() < 1 || bv.rank() != 1 || xv.dim(xv.rank() - 1) != bv.dim(0))
      throw std::runtime_error("add_bias: shape mismatch " + shape_str(xv.shape()) + " vs " + shape_str(bv.shape()));
    const size_t d = static_cast<size_t>(bv.dim(0));
    Tensor<T> out(xv.shape());
    for (size_t i = 0; i < out.numel(); ++i) out[i] = xv[i] + bv[i % d];
    return record("add_bias", std::move(out), {x, b}, [this, x, b, d](int o) {
      const auto& g = grads_[static_cast<size_t>(o)];
      accumulate(x, g);
      ensure_grad(b);
      auto& gb = grads_[static_cast<size_t>(b)];
      for (size_t i = 0; i < g.numel(); ++i) gb[i % d] += g[i];
    });
  }

  int mul(int a, int b) {
    const auto& av = val(a);
    const auto& bv = val(b);
    if (!av.same_shape(bv))
      throw std::runtime_error("mul: shape mismatch " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
    Tensor<T> out(av.shape());
    for (size_t i = 0; i < out.numel(); ++i) out[i] = av[i] * bv[i];
    return record("mul", std::move(out), {a, b}, [this, a, b](int o) {
      const auto& g = grads_[static_cast<size_t>(o)];
      const auto& av = val(a);
      const auto& bv = val(b);
      ensure_grad(a);
      ensure_grad(b);
      auto& ga = grads_[static_cast<size_t>(a)];
      auto& gb = grads_[static_cast<size_t>(b)];
      for (size_t i = 0; i < g.numel(); ++i) {
        ga[i] += g[i] * bv[i];
        gb[i] += g[i] * av[i];
      }
    });
  }

  int scale(int a, T c) {
    const auto& av = val(a);
    Tensor<T> out(av.shape());
    for (size_t i = 0; i < out.numel(); ++i) out[i] = av[i] * c;
    return record("scale", std::move(out), {a}, [this, a, c](int o) {
      const auto& g = grads_[static_cast<size_t>(o)];
      ensure_grad(a);
      auto& ga = grads_[static_cast<size_t>(a)];
      for (size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * c;
    });
  }

  // x scaled by a learnable scalar parameter s (shape [] or [1]).
  int scale_by(int x, int s) {
    const auto& xv = val(x);
    const auto& sv = val(s);
    if (sv.numel() != 1) throw std::runtime_error("scale_by: scale must be a scalar");
    const T c = sv[0];
    Tensor<T> out(xv.shape());
    for (size_t i = 0; i < out.numel(); ++i) out[i] = xv[i] * c;
    return record("scale_by", std::move(out), {x, s}, [this, x, s, c](int o) {
      const auto& g = grads_[static_cast<size_t>(o)];
      const auto& xv = val(x);
      ensure_grad(x);
      ensure_grad(s);
      auto& gx = grads_[static_cast<size_t>(x)];
      T acc{};
      for (size_t i = 0; i < g.numel(); ++i) {
        gx[i] += g[i] * c;
        acc += g[i] * xv[i];
      }
      grads_[static_cast<size_t>(s)][0] += acc;
    });
  }

  int sum(int a) {
    const auto& av = val(a);
    T acc{};
    for (size_t i = 0; i < av.numel(); ++i) acc += av[i];
    return record("sum", Tensor<T>::scalar(acc), {a}, [this, a](int o) {
      const T g = grads_[static_cast<size_t>(o)][0];
      ensure_grad(a);
      auto& ga = grads_[static_cast<size_t>(a)];
      for (size_t i = 0; i < ga.numel(); ++i) ga[i] += g;
    });
  }

  int reshape(int a, std::vector<int> shape) {
    const auto& av = val(a);
    if (numel_of(shape) != av.numel())
      throw std::runtime_error("reshape: cannot view " + shape_str(av.shape()) + " as " + shape_str(shape));
    Tensor<T> out(std::move(shape), av.vec());
    return record("reshape", std::move(out), {a}, [this, a](int o) {
      const auto& g = grads_[static_cast<size_t>(o)];
      ensure_grad(a);
      auto& ga = grads_[static_cast<size_t>(a)];
      for (size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
    });
  }

  // [..., m, n] -> [..., n, m]
  int transpose_last2(int a) {
    const auto& av = val(a);
    if (av.rank() < 2) throw std::runtime_error("transpose_last2: rank < 2");
    const int m = av.dim(av.rank() - 2);
    const int n = av.dim(av.rank() - 1);
    std::vector<int> oshape = av.shape();
    std::swap(oshape[oshape.size() - 2], oshape[oshape.size() - 1]);
    const size_t batch = av.numel() / (static_cast<size_t>(m) * static_cast<size_t>(n));
    Tensor<T> out(oshape);
    for (size_t b = 0; b < batch; ++b) {
      const T* src = av.data() + b * static_cast<size_t>(m) * static_cast<size_t>(n);
      T* dst = out.data() + b * static_cast<size_t>(m) * static_cast<size_t>(n);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) dst[static_cast<size_t>(j) * m + i] = src[static_cast<size_t>(i) * n + j];
    }
    return record("transpose_last2", std::move(out), {a}, [this, a, m, n, batch](int o) {
      const auto& g = grads_[static_cast<size_t>(o)];
      ensure_grad(a);
      auto& ga = grads_[static_cast<size_t>(a)];
      for (size_t b = 0; b < batch; ++b) {
        const T* src = g.data() + b * static_cast<size_t>(m) * static_cast<size_t>(n);
        T* dst = ga.data() + b * static_cast<size_t>(m) * static_cast<size_t>(n);
        for (int j = 0; j < n; ++j)
          for (int i = 0; i < m; ++i) dst[static_cast<size_t>(i) * n + j] += src[static_cast<size_t>(j) * m + i];
      }
    });
  }

  // [A, B, C] -> [B, A, C]
  int permute102(int a) {
    const auto& av = val(a);
    if (av.rank() != 3) throw std::runtime_error("permute102: expects rank 3");
    const int A = av.dim(0), B = av.dim(1), C = av.dim(2);
    Tensor<T> out({B, A, C});
    for (int i = 0; i < A; ++i)
      for (int j = 0; j < B; ++j) {
        const T* src = av.data() + (static_cast<size_t>(i) * B + j) * C;
        T* dst = out.data() + (static_cast<size_t>(j) * A + i) * C;
        for (int c = 0; c < C; ++c) dst[c] = src[c];
      }
    return record("permute102", std::move(out), {a}, [this, a, A, B, C](int o) {
      const auto& g = grads_[static_cast<size_t>(o)];
      ensure_grad(a);
      auto& ga = grads_[static_cast<size_t>(a)];
      for (int j = 0; j < B; ++j)
        for (int i = 0; i < A; ++i) {
          const T* src = g.data() + (static_cast<size_t>(j) * A + i) * C;
          T* dst = ga.data() + (static_cast<size_t>(i) * B + j) * C;
          for (int c = 0; c < C; ++c) dst[c] += src[c];
        }
    });
  }

  // Rank-2 tensors stacked along rows; all parts share the column count.
  int concat_rows(const std::vector<int>& parts) {
    if (parts.empty()) throw std::runtime_error("concat_rows: no parts");
    int cols = -1, rows = 0;
    for (int p : parts) {
      const auto& pv = val(p);
      if (pv.rank() != 2) throw std::runtime_error("concat_rows: expects rank 2, got " + shape_str(pv.shape()));
      if (cols < 0) cols = pv.dim(1);
      if (pv.dim(1) != cols) throw std::runtime_error("concat_rows: column mismatch");
      rows += pv.dim(0);
    }
    Tensor<T> out({rows, cols});
    size_t off = 0;
    for (int p : parts) {
      const auto& pv = val(p);
      std::copy(pv.data(), pv.data() + pv.numel(), out.data() + off);
      off += pv.numel();
    }
    return record("concat_rows", std::move(out), parts, [this, parts](int o) {
      const auto& g = grads_[static_cast<size_t>(o)];
      size_t off = 0;
      for (int p : parts) {
        ensure_grad(p);
        auto& gp = grads_[static_cast<size_t>(p)];
        for (size_t i = 0; i < gp.numel(); ++i) gp[i] += g[off + i];
        off += gp.numel();
      }
    });
  }

  int slice_rows(int a, int start, int len) {
    const auto& av = val(a);
    if (av.rank() != 2) throw std::runtime_error("slice_rows: expects rank 2");
    if (start < 0 || len < 0 || start + len > av.dim(0)) throw std::runtime_error("slice_rows: out of range");
    const int cols = av.dim(1);
    Tensor<T> out({len, cols});
    std::copy(av.data() + static_cast<size_t>(start) * cols,
              av.data() + static_cast<size_t>(start + len) * cols, out.data());
    return record("slice_rows", std::move(out), {a}, [this, a, start, cols](int o) {
      const auto& g = grads_[static_cast<size_t>(o)];
      ensure_grad(a);
      auto& ga = grads_[static_cast<size_t>(a)];
      T* dst = ga.data() + static_cast<size_t>(start) * cols;
      for (size_t i = 0; i < g.numel(); ++i) dst[i] += g[i];
    });
  }

  // Arithmetic mean over a contiguous row span of a rank-2 tensor -> [D].
  int mean_rows(int a, int start, int len) {
    const auto& av = val(a);
    if (av.rank() != 2) throw std::runtime_error("mean_rows: expects rank 2");
    if (len <= 0 || start < 0 || start + len > av.dim(0))
      throw std::runtime_error("mean_rows: empty or out-of-range span");
    const int cols = av.dim(1);
    Tensor<T> out({cols});
    for (int r = start; r < start + len; ++r)
      for (int c = 0; c < cols; ++c) out[static_cast<size_t>(c)] += av[static_cast<size_t>(r) * cols + c];
    const T inv = T{1} / static_cast<T>(len);
    for (int c = 0; c < cols; ++c) out[static_cast<size_t>(c)] *= inv;
    return record("mean_rows", std::move(out), {a}, [this, a, start, len, cols, inv](int o) {
      const auto& g = grads_[static_cast<size_t>(o)];
      ensure_grad(a);
      auto& ga = grads_[static_cast<size_t>(a)];
      for (int r = start; r < start + len; ++r)
        for (int c = 0; c < cols; ++c) ga[static_cast<size_t>(r) * cols + c] += g[static_cast<size_t>(c)] * inv;
    });
  }

  // ---- dense algebra ----

  // Supported: [m,k]x[k,n], [B,m,k]x[B,k,n], [B,m,k]x[k,n].
  int matmul(int a, int b) {
    const auto& av = val(a);
    const auto& bv = val(b);
    const int ar = av.rank(), br = bv.rank();
    if (ar < 2 || br < 2 || ar > 3 || br > 3 || (ar == 2 && br == 3))
      throw std::runtime_error("matmul: unsupported ranks " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
    const int m = av.dim(ar - 2), k = av.dim(ar - 1);
    const int kb = bv.dim(br - 2), n = bv.dim(br - 1);
    if (k != kb)
      throw std::runtime_error("matmul: inner dims mismatch " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
    const int batch = (ar == 3) ? av.dim(0) : 1;
    if (ar == 3 && br == 3 && bv.dim(0) != batch)
      throw std::runtime_error("matmul: batch dims mismatch " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
    std::vector<int> oshape = (ar == 3) ? std::vector<int>{batch, m, n} : std::vector<int>{m, n};
    Tensor<T> out(oshape);
    const size_t astride = static_cast<size_t>(m) * k;
    const size_t bstride = (br == 3) ? static_cast<size_t>(k) * n : 0;
    const size_t ostride = static_cast<size_t>(m) * n;
    for (int bi = 0; bi < batch; ++bi)
      detail::gemm_nn(av.data() + bi * astride, bv.data() + bi * bstride, out.data() + bi * ostride, m, k, n);
    return record("matmul", std::move(out), {a, b},
                  [this, a, b, m, k, n, batch, astride, bstride, ostride](int o) {
                    const auto& g = grads_[static_cast<size_t>(o)];
                    const auto& av = val(a);
                    const auto& bv = val(b);
                    ensure_grad(a);
                    ensure_grad(b);
                    auto& ga = grads_[static_cast<size_t>(a)];
                    auto& gb = grads_[static_cast<size_t>(b)];
                    for (int bi = 0; bi < batch; ++bi) {
                      // dA = dC * B^T ; dB = A^T * dC
                      detail::gemm_nt(g.data() + bi * ostride, bv.data() + bi * bstride, ga.data() + bi * astride,
                                      m, n, k);
                      detail::gemm_tn(av.data() + bi * astride, g.data() + bi * ostride, gb.data() + bi * bstride,
                                      k, m, n);
                    }
                  });
  }

  // ---- nonlinearities ----

  // tanh-approximation gelu: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))
  int gelu(int a) {
    const auto& av = val(a);
    Tensor<T> out(av.shape());
    for (size_t i = 0; i < out.numel(); ++i) out[i] = gelu_fwd(av[i]);
    return record("gelu", std::move(out), {a}, [this, a](int o) {
      const auto& g = grads_[static_cast<size_t>(o)];
      const auto& av = val(a);
      ensure_grad(a);
      auto& ga = grads_[static_cast<size_t>(a)];
      for (size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * gelu_bwd(av[i]);
    });
  }

  int layer_norm(int x, int gain, int bias, T eps) {
    const auto& xv = val(x);
    const auto& gv = val(gain);
    const auto& bv = val(bias);
    if (xv.rank() < 1) throw std::runtime_error("layer_norm: rank < 1");
    const int d = xv.dim(xv.rank() - 1);
    if (gv.rank() != 1 || bv.rank() != 1 || gv.dim(0) != d || bv.dim(0) != d)
      throw std::runtime_error("layer_norm: affine params must be [" + std::to_string(d) + "]");
    const size_t rows = xv.numel() / static_cast<size_t>(d);
    Tensor<T> out(xv.shape());
    for (size_t r = 0; r < rows; ++r) {
      const T* xr = xv.data() + r * static_cast<size_t>(d);
      T* orow = out.data() + r * static_cast<size_t>(d);
      T mean{}, var{};
      for (int i = 0; i < d; ++i) mean += xr[i];
      mean /= static_cast<T>(d);
      for (int i = 0; i < d; ++i) {
        const T c = xr[i] - mean;
        var += c * c;
      }
      var /= static_cast<T>(d);
      const T rstd = T{1} / std::sqrt(var + eps);
      for (int i = 0; i < d; ++i) orow[i] = (xr[i] - mean) * rstd * gv[static_cast<size_t>(i)] + bv[static_cast<size_t>(i)];
    }
    return record("layer_norm", std::move(out), {x, gain, bias}, [this, x, gain, bias, d, rows, eps](int o) {
      const auto& g = grads_[static_cast<size_t>(o)];
      const auto& xv = val(x);
      const auto& gv = val(gain);
      ensure_grad(x);
      ensure_grad(gain);
      ensure_grad(bias);
      auto& gx = grads_[static_cast<size_t>(x)];
      auto& gg = grads_[static_cast<size_t>(gain)];
      auto& gb = grads_[static_cast<size_t>(bias)];
      std::vector<T> xhat(static_cast<size_t>(d));
      for (size_t r = 0; r < rows; ++r) {
        const T* xr = xv.data() + r * static_cast<size_t>(d);
        const T* gr = g.data() + r * static_cast<size_t>(d);
        T* gxr = gx.data() + r * static_cast<size_t>(d);
        T mean{}, var{};
        for (int i = 0; i < d; ++i) mean += xr[i];
        mean /= static_cast<T>(d);
        for (int i = 0; i < d; ++i) {
          const T c = xr[i] - mean;
          var += c * c;
        }
        var /= static_cast<T>(d);
        const T rstd = T{1} / std::sqrt(var + eps);
        T sum_dy{}, sum_dy_xhat{};
        for (int i = 0; i < d; ++i) {
          xhat[static_cast<size_t>(i)] = (xr[i] - mean) * rstd;
          const T dy = gr[i] * gv[static_cast<size_t>(i)];
          sum_dy += dy;
          sum_dy_xhat += dy * xhat[static_cast<size_t>(i)];
          gg[static_cast<size_t>(i)] += gr[i] * xhat[static_cast<size_t>(i)];
          gb[static_cast<size_t>(i)] += gr[i];
        }
        const T inv_d = T{1} / static_cast<T>(d);
        for (int i = 0; i < d; ++i) {
          const T dy = gr[i] * gv[static_cast<size_t>(i)];
          gxr[i] += rstd * (dy - sum_dy * inv_d - xhat[static_cast<size_t>(i)] * sum_dy_xhat * inv_d);
        }
      }
    });
  }

  // Normalization over the whole [C,H,W] volume with per-channel affine
  // (group normalization with a single group).
  int group_norm(int x, int gain, int bias, T eps) {
    const auto& xv = val(x);
    const auto& gv = val(gain);
    const auto& bv = val(bias);
    if (xv.rank() != 3) throw std::runtime_error("group_norm: expects [C,H,W]");
    const int c = xv.dim(0);
    if (gv.rank() != 1 || bv.rank() != 1 || gv.dim(0) != c || bv.dim(0) != c)
      throw std::runtime_error("group_norm: affine params must be [" + std::to_string(c) + "]");
    const size_t n = xv.numel();
    const size_t hw = n / static_cast<size_t>(c);
    T mean{}, var{};
    for (size_t i = 0; i < n; ++i) mean += xv[i];
    mean /= static_cast<T>(n);
    for (size_t i = 0; i < n; ++i) {
      const T d = xv[i] - mean;
      var += d * d;
    }
    var /= static_cast<T>(n);
    const T rstd = T{1} / std::sqrt(var + eps);
    Tensor<T> out(xv.shape());
    for (size_t i = 0; i < n; ++i) {
      const size_t ch = i / hw;
      out[i] = (xv[i] - mean) * rstd * gv[ch] + bv[ch];
    }
    return record("group_norm", std::move(out), {x, gain, bias}, [this, x, gain, bias, n, hw, mean, rstd](int o) {
      const auto& g = grads_[static_cast<size_t>(o)];
      const auto& xv = val(x);
      const auto& gv = val(gain);
      ensure_grad(x);
      ensure_grad(gain);
      ensure_grad(bias);
      auto& gx = grads_[static_cast<size_t>(x)];
      auto& gg = grads_[static_cast<size_t>(gain)];
      auto& gb = grads_[static_cast<size_t>(bias)];
      T sum_dy{}, sum_dy_xhat{};
      for (size_t i = 0; i < n; ++i) {
        const size_t ch = i / hw;
        const T xhat = (xv[i] - mean) * rstd;
        const T dy = g[i] * gv[ch];
        sum_dy += dy;
        sum_dy_xhat += dy * xhat;
        gg[ch] += g[i] * xhat;
        gb[ch] += g[i];
      }
      const T inv_n = T{1} / static_cast<T>(n);
      for (size_t i = 0; i < n; ++i) {
        const size_t ch = i / hw;
        const T xhat = (xv[i] - mean) * rstd;
        const T dy = g[i] * gv[ch];
        gx[i] += rstd * (dy - sum_dy * inv_n - xhat * sum_dy_xhat * inv_n);
      }
    });
  }

  // ---- attention ----

  // logits [q,k] or [H,q,k]; mask [q,k] broadcast over heads.
  // Masked entries are exactly zero in the output and receive zero gradient.
  int masked_softmax(int logits, const AttnMask& mask) {
    const auto& lv = val(logits);
    const int r = lv.rank();
    if (r != 2 && r != 3) throw std::runtime_error("masked_softmax: expects rank 2 or 3");
    const int q = lv.dim(r - 2), k = lv.dim(r - 1);
    if (mask.q != q || mask.k != k)
      throw std::runtime_error("masked_softmax: mask " + std::to_string(mask.q) + "x" + std::to_string(mask.k) +
                               " vs logits " + shape_str(lv.shape()));
    for (int i = 0; i < q; ++i) {
      bool any = false;
      for (int j = 0; j < k; ++j)
        if (mask.at(i, j)) {
          any = true;
          break;
        }
      if (!any) throw std::runtime_error("masked_softmax: empty attention row " + std::to_string(i));
    }
    const int heads = (r == 3) ? lv.dim(0) : 1;
    Tensor<T> out(lv.shape());
    const size_t plane = static_cast<size_t>(q) * k;
    for (int h = 0; h < heads; ++h) {
      const T* lp = lv.data() + h * plane;
      T* op = out.data() + h * plane;
      for (int i = 0; i < q; ++i) {
        T mx = -std::numeric_limits<T>::infinity();
        for (int j = 0; j < k; ++j)
          if (mask.at(i, j)) mx = std::max(mx, lp[static_cast<size_t>(i) * k + j]);
        T denom{};
        for (int j = 0; j < k; ++j) {
          const size_t f = static_cast<size_t>(i) * k + j;
          if (mask.at(i, j)) {
            op[f] = std::exp(lp[f] - mx);
            denom += op[f];
          } else {
            op[f] = T{};
          }
        }
        const T inv = T{1} / denom;
        for (int j = 0; j < k; ++j) op[static_cast<size_t>(i) * k + j] *= inv;
      }
    }
    AttnMask mcopy = mask;
    return record("masked_softmax", std::move(out), {logits},
                  [this, logits, mcopy = std::move(mcopy), heads, q, k, plane](int o) {
                    const auto& g = grads_[static_cast<size_t>(o)];
                    const auto& y = val(o);
                    ensure_grad(logits);
                    auto& gl = grads_[static_cast<size_t>(logits)];
                    for (int h = 0; h < heads; ++h) {
                      const T* yp = y.data() + h * plane;
                      const T* gp = g.data() + h * plane;
                      T* glp = gl.data() + h * plane;
                      for (int i = 0; i < q; ++i) {
                        T dot{};
                        for (int j = 0; j < k; ++j) {
                          const size_t f = static_cast<size_t>(i) * k + j;
                          if (mcopy.at(i, j)) dot += gp[f] * yp[f];
                        }
                        for (int j = 0; j < k; ++j) {
                          const size_t f = static_cast<size_t>(i) * k + j;
                          if (mcopy.at(i, j)) glp[f] += yp[f] * (gp[f] - dot);
                        }
                      }
                    }
                  });
  }

  // table [H, B] gathered into a [H, q, k] additive bias; idx < 0 -> 0.
  int gather_bias(int table, const BiasIndex& bi) {
    const auto& tv = val(table);
    if (tv.rank() != 2) throw std::runtime_error("gather_bias: table must be [heads, buckets]");
    const int heads = tv.dim(0), buckets = tv.dim(1);
    const size_t plane = static_cast<size_t>(bi.q) * bi.k;
    if (bi.idx.size() != plane) throw std::runtime_error("gather_bias: index size mismatch");
    Tensor<T> out({heads, bi.q, bi.k});
    for (int h = 0; h < heads; ++h) {
      const T* row = tv.data() + static_cast<size_t>(h) * buckets;
      T* op = out.data() + h * plane;
      for (size_t f = 0; f < plane; ++f) {
        const int ix = bi.idx[f];
        if (ix >= buckets) throw std::runtime_error("gather_bias: index out of range");
        op[f] = (ix >= 0) ? row[ix] : T{};
      }
    }
    BiasIndex bcopy = bi;
    return record("gather_bias", std::move(out), {table},
                  [this, table, bcopy = std::move(bcopy), heads, buckets, plane](int o) {
                    const auto& g = grads_[static_cast<size_t>(o)];
                    ensure_grad(table);
                    auto& gt = grads_[static_cast<size_t>(table)];
                    for (int h = 0; h < heads; ++h) {
                      T* row = gt.data() + static_cast<size_t>(h) * buckets;
                      const T* gp = g.data() + h * plane;
                      for (size_t f = 0; f < plane; ++f)
                        if (bcopy.idx[f] >= 0) row[bcopy.idx[f]] += gp[f];
                    }
                  });
  }

  // ---- embeddings ----

  int embedding_rows(int table, std::vector<int> ids) {
    const auto& tv = val(table);
    if (tv.rank() != 2) throw std::runtime_error("embedding_rows: table must be [V, D]");
    const int v = tv.dim(0), d = tv.dim(1);
    for (int id : ids)
      if (id < 0 || id >= v)
        throw std::runtime_error("embedding_rows: id " + std::to_string(id) + " out of vocab " + std::to_string(v));
    Tensor<T> out({static_cast<int>(ids.size()), d});
    for (size_t i = 0; i < ids.size(); ++i)
      std::copy(tv.data() + static_cast<size_t>(ids[i]) * d, tv.data() + static_cast<size_t>(ids[i] + 1) * d,
                out.data() + i * static_cast<size_t>(d));
    return record("embedding_rows", std::move(out), {table}, [this, table, ids = std::move(ids), d](int o) {
      const auto& g = grads_[static_cast<size_t>(o)];
      ensure_grad(table);
      auto& gt = grads_[static_cast<size_t>(table)];
      for (size_t i = 0; i < ids.size(); ++i) {
        T* dst = gt.data() + static_cast<size_t>(ids[i]) * d;
        const T* src = g.data() + i * static_cast<size_t>(d);
        for (int c = 0; c < d; ++c) dst[c] += src[c];
      }
    });
  }

  // ---- convolution ----

  // x [Cin,H,W], w [Cout,Cin,kh,kw]; cross-correlation with symmetric padding.
  int conv2d(int x, int w, int stride, int pad) {
    const auto& xv = val(x);
    const auto& wv = val(w);
    if (xv.rank() != 3 || wv.rank() != 4) throw std::runtime_error("conv2d: expects x [C,H,W], w [O,C,kh,kw]");
    if (stride < 1 || pad < 0) throw std::runtime_error("conv2d: bad stride/pad");
    const int cin = xv.dim(0), h = xv.dim(1), wd = xv.dim(2);
    const int cout = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
    if (wv.dim(1) != cin)
      throw std::runtime_error("conv2d: channel mismatch " + shape_str(xv.shape()) + " vs " + shape_str(wv.shape()));
    if (h + 2 * pad < kh || wd + 2 * pad < kw)
      throw std::runtime_error("conv2d: kernel larger than padded input " + shape_str(xv.shape()) + " vs " +
                               shape_str(wv.shape()));
    const int oh = (h + 2 * pad - kh) / stride + 1;
    const int ow = (wd + 2 * pad - kw) / stride + 1;
    Tensor<T> out({cout, oh, ow});
    conv_fwd(xv, wv, out, cin, h, wd, cout, kh, kw, stride, pad, oh, ow);
    return record("conv2d", std::move(out), {x, w},
                  [this, x, w, cin, h, wd, cout, kh, kw, stride, pad, oh, ow](int o) {
                    const auto& g = grads_[static_cast<size_t>(o)];
                    const auto& xv = val(x);
                    const auto& wv = val(w);
                    ensure_grad(x);
                    ensure_grad(w);
                    conv_bwd(xv, wv, g, grads_[static_cast<size_t>(x)], grads_[static_cast<size_t>(w)], cin, h, wd,
                             cout, kh, kw, stride, pad, oh, ow);
                  });
  }

  int add_channel_bias(int x, int b) {
    const auto& xv = val(x);
    const auto& bv = val(b);
    if (xv.rank() != 3 || bv.rank() != 1 || bv.dim(0) != xv.dim(0))
      throw std::runtime_error("add_channel_bias: shape mismatch");
    const size_t hw = xv.numel() / static_cast<size_t>(xv.dim(0));
    Tensor<T> out(xv.shape());
    for (size_t i = 0; i < out.numel(); ++i) out[i] = xv[i] + bv[i / hw];
    return record("add_channel_bias", std::move(out), {x, b}, [this, x, b, hw](int o) {
      const auto& g = grads_[static_cast<size_t>(o)];
      ensure_grad(x);
      ensure_grad(b);
      auto& gx = grads_[static_cast<size_t>(x)];
      auto& gb = grads_[static_cast<size_t>(b)];
      for (size_t i = 0; i < g.numel(); ++i) {
        gx[i] += g[i];
        gb[i / hw] += g[i];
      }
    });
  }

  // Rearranges [C,H,W] into [T, P*P*C] patch rows (raster order, per patch
  // the layout is (channel, ky, kx) row-major).
  int patchify(int x, int patch) {
    const auto& xv = val(x);
    if (xv.rank() != 3) throw std::runtime_error("patchify: expects [C,H,W]");
    const int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
    if (patch <= 0 || h % patch != 0 || w % patch != 0)
      throw std::runtime_error("patchify: dims " + shape_str(xv.shape()) + " not divisible by patch " +
                               std::to_string(patch));
    const int gh = h / patch, gw = w / patch;
    Tensor<T> out({gh * gw, patch * patch * c});
    size_t f = 0;
    for (int gy = 0; gy < gh; ++gy)
      for (int gx = 0; gx < gw; ++gx)
        for (int ch = 0; ch < c; ++ch)
          for (int ky = 0; ky < patch; ++ky)
            for (int kx = 0; kx < patch; ++kx)
              out[f++] = xv[(static_cast<size_t>(ch) * h + gy * patch + ky) * w + gx * patch + kx];
    return record("patchify", std::move(out), {x}, [this, x, patch, c, h, w, gh, gw](int o) {
      const auto& g = grads_[static_cast<size_t>(o)];
      ensure_grad(x);
      auto& gx2 = grads_[static_cast<size_t>(x)];
      size_t f = 0;
      for (int gy = 0; gy < gh; ++gy)
        for (int gx = 0; gx < gw; ++gx)
          for (int ch = 0; ch < c; ++ch)
            for (int ky = 0; ky < patch; ++ky)
              for (int kx = 0; kx < patch; ++kx)
                gx2[(static_cast<size_t>(ch) * h + gy * patch + ky) * w + gx * patch + kx] += g[f++];
    });
  }

  // ---- losses ----

  // Mean negative log-likelihood over unmasked positions.
  int cross_entropy(int logits, const std::vector<int>& targets, const std::vector<uint8_t>& loss_mask) {
    const auto& lv = val(logits);
    if (lv.rank() != 2) throw std::runtime_error("cross_entropy: logits must be [T, V]");
    const int t = lv.dim(0), v = lv.dim(1);
    if (targets.size() != static_cast<size_t>(t) || loss_mask.size() != static_cast<size_t>(t))
      throw std::runtime_error("cross_entropy: targets/mask length mismatch");
    int n = 0;
    for (int i = 0; i < t; ++i) {
      if (!loss_mask[static_cast<size_t>(i)]) continue;
      ++n;
      if (targets[static_cast<size_t>(i)] < 0 || targets[static_cast<size_t>(i)] >= v)
        throw std::runtime_error("cross_entropy: target out of vocab");
    }
    if (n == 0) throw std::runtime_error("cross_entropy: empty loss");
    T acc{};
    for (int i = 0; i < t; ++i) {
      if (!loss_mask[static_cast<size_t>(i)]) continue;
      const T* row = lv.data() + static_cast<size_t>(i) * v;
      T mx = row[0];
      for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
      T denom{};
      for (int j = 0; j < v; ++j) denom += std::exp(row[j] - mx);
      acc += mx + std::log(denom) - row[targets[static_cast<size_t>(i)]];
    }
    acc /= static_cast<T>(n);
    return record("cross_entropy", Tensor<T>::scalar(acc), {logits},
                  [this, logits, targets, loss_mask, t, v, n](int o) {
                    const T go = grads_[static_cast<size_t>(o)][0];
                    const auto& lv = val(logits);
                    ensure_grad(logits);
                    auto& gl = grads_[static_cast<size_t>(logits)];
                    const T inv_n = T{1} / static_cast<T>(n);
                    for (int i = 0; i < t; ++i) {
                      if (!loss_mask[static_cast<size_t>(i)]) continue;
                      const T* row = lv.data() + static_cast<size_t>(i) * v;
                      T* grow = gl.data() + static_cast<size_t>(i) * v;
                      T mx = row[0];
                      for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
                      T denom{};
                      for (int j = 0; j < v; ++j) denom += std::exp(row[j] - mx);
                      const T invd = T{1} / denom;
                      for (int j = 0; j < v; ++j) grow[j] += go * inv_n * std::exp(row[j] - mx) * invd;
                      grow[targets[static_cast<size_t>(i)]] -= go * inv_n;
                    }
                  });
  }

  // ---- stochastic ----

  // Inverted dropout; identity when p == 0. Draws one uniform per element
  // in flat index order.
  int dropout(int x, double p, Rng& rng) {
    if (p <= 0.0) return x;
    if (p >= 1.0) throw std::runtime_error("dropout: p must be < 1");
    const auto& xv = val(x);
    const T keep = static_cast<T>(1.0 - p);
    const T inv_keep = T{1} / keep;
    std::vector<uint8_t> kept(xv.numel());
    Tensor<T> out(xv.shape());
    for (size_t i = 0; i < out.numel(); ++i) {
      kept[i] = rng.uniform() >= p;
      out[i] = kept[i] ? xv[i] * inv_keep : T{};
    }
    return record("dropout", std::move(out), {x}, [this, x, kept = std::move(kept), inv_keep](int o) {
      const auto& g = grads_[static_cast<size_t>(o)];
      ensure_grad(x);
      auto& gx = grads_[static_cast<size_t>(x)];
      for (size_t i = 0; i < g.numel(); ++i)
        if (kept[i]) gx[i] += g[i] * inv_keep;
    });
  }

 private:
  struct Node {
    std::function<void()> backward;
  };

  static T gelu_fwd(T x) {
    const T c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
    const T a = static_cast<T>(0.044715);
    return static_cast<T>(0.5) * x * (T{1} + std::tanh(c * (x + a * x * x * x)));
  }

  static T gelu_bwd(T x) {
    const T c = static_cast<T>(0.7978845608028654);
    const T a = static_cast<T>(0.044715);
    const T u = c * (x + a * x * x * x);
    const T th = std::tanh(u);
    const T sech2 = T{1} - th * th;
    return static_cast<T>(0.5) * (T{1} + th) + static_cast<T>(0.5) * x * sech2 * c * (T{1} + T{3} * a * x * x);
  }

  static void conv_fwd(const Tensor<T>& xv, const Tensor<T>& wv, Tensor<T>& out, int cin, int h, int w, int cout,
                       int kh, int kw, int stride, int pad, int oh, int ow) {
    for (int co = 0; co < cout; ++co)
      for (int ci = 0; ci < cin; ++ci)
        for (int ky = 0; ky < kh; ++ky)
          for (int kx = 0; kx < kw; ++kx) {
            const T wval = wv[((static_cast<size_t>(co) * cin + ci) * kh + ky) * kw + kx];
            if (wval == T{}) continue;
            for (int oy = 0; oy < oh; ++oy) {
              const int iy = oy * stride - pad + ky;
              if (iy < 0 || iy >= h) continue;
              const T* xrow = xv.data() + (static_cast<size_t>(ci) * h + iy) * w;
              T* orow = out.data() + (static_cast<size_t>(co) * oh + oy) * ow;
              for (int ox = 0; ox < ow; ++ox) {
                const int ix = ox * stride - pad + kx;
                if (ix < 0 || ix >= w) continue;
                orow[ox] += wval * xrow[ix];
              }
            }
          }
  }

  static void conv_bwd(const Tensor<T>& xv, const Tensor<T>& wv, const Tensor<T>& g, Tensor<T>& gx, Tensor<T>& gw,
                       int cin, int h, int w, int cout, int kh, int kw, int stride, int pad, int oh, int ow) {
    for (int co = 0; co < cout; ++co)
      for (int ci = 0; ci < cin; ++ci)
        for (int ky = 0; ky < kh; ++ky)
          for (int kx = 0; kx < kw; ++kx) {
            const size_t wf = ((static_cast<size_t>(co) * cin + ci) * kh + ky) * kw + kx;
            const T wval = wv[wf];
            T wacc{};
            for (int oy = 0; oy < oh; ++oy) {
              const int iy = oy * stride - pad + ky;
              if (iy < 0 || iy >= h) continue;
              const T* xrow = xv.data() + (static_cast<size_t>(ci) * h + iy) * w;
              T* gxrow = gx.data() + (static_cast<size_t>(ci) * h + iy) * w;
              const T* grow = g.data() + (static_cast<size_t>(co) * oh + oy) * ow;
              for (int ox = 0; ox < ow; ++ox) {
                const int ix = ox * stride - pad + kx;
                if (ix < 0 || ix >= w) continue;
                wacc += grow[ox] * xrow[ix];
                gxrow[ix] += grow[ox] * wval;
              }
            }
            gw[wf] += wacc;
          }
  }

  int record(const char* op, Tensor<T> out, std::vector<int> inputs, std::function<void()> bwd) {
#ifndef NDEBUG
    if (has_nonfinite(out)) throw std::runtime_error(std::string(op) + ": non-finite value in output");
#else
    (void)op;
#endif
    (void)inputs;
    values_.push_back(std::move(out));
    nodes_.emplace_back();
    if (grad_enabled_) nodes_.back().backward = std::move(bwd);
    return static_cast<int>(values_.size()) - 1;
  }

  // Wrapper so closures can bind the output id at record time.
  int record(const char* op, Tensor<T> out, std::vector<int> inputs, std::function<void(int)> bwd) {
    const int id = record(op, std::move(out), std::move(inputs), std::function<void()>{});
    if (grad_enabled_) nodes_[static_cast<size_t>(id)].backward = [bwd = std::move(bwd), id]() { bwd(id); };
    return id;
  }

  void ensure_grad(int id) {
    if (grads_.size() < values_.size()) grads_.resize(values_.size());
    auto& g = grads_[static_cast<size_t>(id)];
    if (g.empty() && val(id).numel() > 0) g = Tensor<T>(val(id).shape());
    if (g.numel() != val(id).numel()) g = Tensor<T>(val(id).shape());
  }

  bool grad_enabled_;
  bool backward_done_ = false;
  std::vector<Tensor<T>> values_;
  std::vector<Tensor<T>> grads_;
  std::vector<Node> nodes_;
};

}  // namespace vlm
