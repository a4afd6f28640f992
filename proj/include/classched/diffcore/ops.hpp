// Copyright (c) 2026 The classched Authors
// SPDX-License-Identifier: Apache-2.0
//
// Differentiable primitives. Images are channel-major (C,H,W); batches of
// vectors are row-major matrices (B,N). Every op validates extents and names
// itself in the diagnostic.

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "classched/diffcore/tensor.hpp"

namespace classched::diff {

namespace detail {

[[noreturn]] inline void shape_error(const char* op, const std::string& what) {
  throw std::invalid_argument(std::string(op) + ": " + what);
}

inline void expect_rank(const char* op, const Tensor& t, std::size_t rank, const char* arg) {
  if (t.rank() != rank) {
    shape_error(op, std::string(arg) + " must have rank " + std::to_string(rank) + ", got " +
                        shape_str(t.shape()));
  }
}

inline void expect_same(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    shape_error(op, "extents differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

/// Parent gradient buffer, or nullptr when that parent is not tracked.
inline double* parent_grad(Node& self, std::size_t i) {
  Node& p = *self.parents[i];
  return p.requires_grad ? p.grad.data() : nullptr;
}

inline std::size_t last_extent(const Tensor& t) { return t.shape().back(); }

/// 2-D "same"-padded convolution (stride 1) shared by the dense and depthwise kernels.
/// When `depthwise`, weight is (C,k,k) and each output channel reads only its own input.
inline Tensor conv_same(const char* op, const Tensor& x, const Tensor& w, const Tensor& b,
                        std::size_t k, bool depthwise) {
  expect_rank(op, x, 3, "input");
  const std::size_t cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  std::size_t cout = 0;
  if (depthwise) {
    if (w.shape() != Shape{cin, k, k}) {
      shape_error(op, "weight must be " + shape_str({cin, k, k}) + ", got " + shape_str(w.shape()));
    }
    cout = cin;
  } else {
    if (w.rank() != 4 || w.dim(1) != cin || w.dim(2) != k || w.dim(3) != k) {
      shape_error(op, "weight must be (out," + std::to_string(cin) + "," + std::to_string(k) + "," +
                          std::to_string(k) + "), got " + shape_str(w.shape()));
    }
    cout = w.dim(0);
  }
  if (b.shape() != Shape{cout}) {
    shape_error(op, "bias must be " + shape_str({cout}) + ", got " + shape_str(b.shape()));
  }
  const long pad = static_cast<long>(k / 2);
  const auto xv = x.values();
  const auto wv = w.values();
  const auto bv = b.values();
  std::vector<double> out(cout * h * wd, 0.0);

  // Visits every (out channel, in channel, output pixel, tap) contributing term.
  auto for_each_tap = [=](auto&& fn) {
    for (std::size_t o = 0; o < cout; ++o) {
      const std::size_t c_begin = depthwise ? o : 0;
      const std::size_t c_end = depthwise ? o + 1 : cin;
      for (std::size_t c = c_begin; c < c_end; ++c) {
        const std::size_t wbase = depthwise ? o * k * k : (o * cin + c) * k * k;
        for (std::size_t i = 0; i < h; ++i) {
          for (std::size_t j = 0; j < wd; ++j) {
            const std::size_t oidx = (o * h + i) * wd + j;
            for (std::size_t di = 0; di < k; ++di) {
              const long si = static_cast<long>(i + di) - pad;
              if (si < 0 || si >= static_cast<long>(h)) continue;
              for (std::size_t dj = 0; dj < k; ++dj) {
                const long sj = static_cast<long>(j + dj) - pad;
                if (sj < 0 || sj >= static_cast<long>(wd)) continue;
                const std::size_t xidx = (c * h + static_cast<std::size_t>(si)) * wd +
                                         static_cast<std::size_t>(sj);
                fn(oidx, xidx, wbase + di * k + dj);
              }
            }
          }
        }
      }
    }
  };

  for (std::size_t o = 0; o < cout; ++o) {
    for (std::size_t p = 0; p < h * wd; ++p) out[o * h * wd + p] = bv[o];
  }
  for_each_tap([&](std::size_t oi, std::size_t xi, std::size_t wi) { out[oi] += wv[wi] * xv[xi]; });

  return make_result(op, {cout, h, wd}, std::move(out), {x, w, b},
                     [for_each_tap, cout, hw = h * wd](Node& self) {
                       const auto& g = self.grad;
                       const auto& xval = self.parents[0]->value;
                       const auto& wval = self.parents[1]->value;
                       double* gx = parent_grad(self, 0);
                       double* gw = parent_grad(self, 1);
                       double* gb = parent_grad(self, 2);
                       if (gx || gw) {
                         for_each_tap([&](std::size_t oi, std::size_t xi, std::size_t wi) {
                           if (gx) gx[xi] += wval[wi] * g[oi];
                           if (gw) gw[wi] += xval[xi] * g[oi];
                         });
                       }
                       if (gb) {
                         for (std::size_t o = 0; o < cout; ++o) {
                           for (std::size_t p = 0; p < hw; ++p) gb[o] += g[o * hw + p];
                         }
                       }
                     });
}

inline void check_groups(const char* op, const Tensor& x, std::size_t groups) {
  expect_rank(op, x, 3, "input");
  if (groups == 0 || x.dim(0) % groups != 0) {
    shape_error(op, "groups G=" + std::to_string(groups) + " does not divide channel extent " +
                        std::to_string(x.dim(0)));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::expect_same("add", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::make_result("add", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (double* g = detail::parent_grad(self, k)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::expect_same("sub", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return detail::make_result("sub", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    if (double* g = detail::parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (double* g = detail::parent_grad(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::expect_same("mul", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::make_result("mul", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (double* g = detail::parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (double* g = detail::parent_grad(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

/// k * x for a constant k.
inline Tensor scale(const Tensor& x, double k) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = k * x[i];
  return detail::make_result("scale", x.shape(), std::move(out), {x}, [k](detail::Node& self) {
    if (double* g = detail::parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += k * self.grad[i];
    }
  });
}

/// x + k for a constant k.
inline Tensor shift(const Tensor& x, double k) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + k;
  return detail::make_result("shift", x.shape(), std::move(out), {x}, [](detail::Node& self) {
    if (double* g = detail::parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

inline Tensor relu(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
  return detail::make_result("relu", x.shape(), std::move(out), {x}, [](detail::Node& self) {
    if (double* g = detail::parent_grad(self, 0)) {
      const auto& xv = self.parents[0]->value;
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        if (xv[i] > 0.0) g[i] += self.grad[i];
      }
    }
  });
}

inline Tensor exp(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(x[i]);
  return detail::make_result("exp", x.shape(), out, {x}, [out](detail::Node& self) {
    if (double* g = detail::parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * out[i];
    }
  });
}

inline Tensor log(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!(x[i] > 0.0)) detail::shape_error("log", "non-positive input " + std::to_string(x[i]));
    out[i] = std::log(x[i]);
  }
  return detail::make_result("log", x.shape(), std::move(out), {x}, [](detail::Node& self) {
    if (double* g = detail::parent_grad(self, 0)) {
      const auto& xv = self.parents[0]->value;
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] / xv[i];
    }
  });
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    detail::shape_error("reshape", "cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(x.values().begin(), x.values().end());
  return detail::make_result("reshape", std::move(shape), std::move(out), {x}, [](detail::Node& self) {
    if (double* g = detail::parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions and losses (scalar outputs have shape (1))
// ---------------------------------------------------------------------------

inline Tensor reduce_sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  return detail::make_result("reduce_sum", {1}, {s}, {x}, [](detail::Node& self) {
    if (double* g = detail::parent_grad(self, 0)) {
      const std::size_t n = self.parents[0]->value.size();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
    }
  });
}

inline Tensor reduce_mean(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  const double n = static_cast<double>(x.numel());
  return detail::make_result("reduce_mean", {1}, {s / n}, {x}, [n](detail::Node& self) {
    if (double* g = detail::parent_grad(self, 0)) {
      const std::size_t m = self.parents[0]->value.size();
      for (std::size_t i = 0; i < m; ++i) g[i] += self.grad[0] / n;
    }
  });
}

/// Σ (a - b)^2 over all elements.
inline Tensor squared_error(const Tensor& a, const Tensor& b) {
  detail::expect_same("squared_error", a, b);
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return detail::make_result("squared_error", {1}, {s}, {a, b}, [](detail::Node& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    const double g0 = self.grad[0];
    double* ga = detail::parent_grad(self, 0);
    double* gb = detail::parent_grad(self, 1);
    for (std::size_t i = 0; i < av.size(); ++i) {
      const double d = 2.0 * (av[i] - bv[i]) * g0;
      if (ga) ga[i] += d;
      if (gb) gb[i] -= d;
    }
  });
}

/// Sum over the last axis, keeping it with extent 1.
inline Tensor sum_last(const Tensor& x) {
  const std::size_t n = detail::last_extent(x);
  const std::size_t rows = x.numel() / n;
  Shape shape = x.shape();
  shape.back() = 1;
  std::vector<double> out(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < n; ++j) out[r] += x[r * n + j];
  }
  return detail::make_result("sum_last", std::move(shape), std::move(out), {x},
                             [n, rows](detail::Node& self) {
                               if (double* g = detail::parent_grad(self, 0)) {
                                 for (std::size_t r = 0; r < rows; ++r) {
                                   for (std::size_t j = 0; j < n; ++j) g[r * n + j] += self.grad[r];
                                 }
                               }
                             });
}

// ---------------------------------------------------------------------------
// Dense layers
// ---------------------------------------------------------------------------

/// (m,k) x (k,n) -> (m,n).
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::expect_rank("matmul", a, 2, "lhs");
  detail::expect_rank("matmul", b, 2, "rhs");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    detail::shape_error("matmul", "inner extents differ: " + shape_str(a.shape()) + " x " +
                                      shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += aip * bv[p * n + j];
    }
  }
  return detail::make_result("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
    const auto& g = self.grad;
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (double* ga = detail::parent_grad(self, 0)) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * bv[p * n + j];
          ga[i * k + p] += s;
        }
      }
    }
    if (double* gb = detail::parent_grad(self, 1)) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = av[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * g[i * n + j];
        }
      }
    }
  });
}

/// x (B,in) · Wᵀ + b with W (out,in), b (out).
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  detail::expect_rank("linear", x, 2, "input");
  detail::expect_rank("linear", w, 2, "weight");
  const std::size_t batch = x.dim(0), in = x.dim(1), out_dim = w.dim(0);
  if (w.dim(1) != in) {
    detail::shape_error("linear", "weight " + shape_str(w.shape()) + " does not accept input " +
                                      shape_str(x.shape()));
  }
  if (b.shape() != Shape{out_dim}) {
    detail::shape_error("linear", "bias must be " + shape_str({out_dim}) + ", got " + shape_str(b.shape()));
  }
  const auto xv = x.values();
  const auto wv = w.values();
  const auto bv = b.values();
  std::vector<double> out(batch * out_dim);
  for (std::size_t r = 0; r < batch; ++r) {
    for (std::size_t o = 0; o < out_dim; ++o) {
      double s = bv[o];
      for (std::size_t i = 0; i < in; ++i) s += xv[r * in + i] * wv[o * in + i];
      out[r * out_dim + o] = s;
    }
  }
  return detail::make_result(
      "linear", {batch, out_dim}, std::move(out), {x, w, b}, [batch, in, out_dim](detail::Node& self) {
        const auto& g = self.grad;
        const auto& xv = self.parents[0]->value;
        const auto& wv = self.parents[1]->value;
        double* gx = detail::parent_grad(self, 0);
        double* gw = detail::parent_grad(self, 1);
        double* gb = detail::parent_grad(self, 2);
        for (std::size_t r = 0; r < batch; ++r) {
          for (std::size_t o = 0; o < out_dim; ++o) {
            const double go = g[r * out_dim + o];
            if (go == 0.0) continue;
            if (gb) gb[o] += go;
            for (std::size_t i = 0; i < in; ++i) {
              if (gx) gx[r * in + i] += go * wv[o * in + i];
              if (gw) gw[o * in + i] += go * xv[r * in + i];
            }
          }
        }
      });
}

/// Adds row vector v (shape (n) or (1,n)) to every row of x (B,n).
inline Tensor add_rows(const Tensor& x, const Tensor& v) {
  detail::expect_rank("add_rows", x, 2, "input");
  const std::size_t rows = x.dim(0), n = x.dim(1);
  if (v.numel() != n) {
    detail::shape_error("add_rows", "row vector " + shape_str(v.shape()) + " does not match " +
                                        shape_str(x.shape()));
  }
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = x[r * n + j] + v[j];
  }
  return detail::make_result("add_rows", x.shape(), std::move(out), {x, v}, [rows, n](detail::Node& self) {
    if (double* g = detail::parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (double* g = detail::parent_grad(self, 1)) {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[r * n + j];
      }
    }
  });
}

/// Columns [begin, end) of the last axis.
inline Tensor slice_last(const Tensor& x, std::size_t begin, std::size_t end) {
  const std::size_t n = detail::last_extent(x);
  if (begin >= end || end > n) {
    detail::shape_error("slice_last", "range [" + std::to_string(begin) + "," + std::to_string(end) +
                                          ") outside last extent " + std::to_string(n));
  }
  const std::size_t rows = x.numel() / n, w = end - begin;
  Shape shape = x.shape();
  shape.back() = w;
  std::vector<double> out(rows * w);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < w; ++j) out[r * w + j] = x[r * n + begin + j];
  }
  return detail::make_result("slice_last", std::move(shape), std::move(out), {x},
                             [rows, n, w, begin](detail::Node& self) {
                               if (double* g = detail::parent_grad(self, 0)) {
                                 for (std::size_t r = 0; r < rows; ++r) {
                                   for (std::size_t j = 0; j < w; ++j) g[r * n + begin + j] += self.grad[r * w + j];
                                 }
                               }
                             });
}

/// Row r of x (B, K*width) keeps only block blocks[r]: result (B, width).
inline Tensor gather_blocks(const Tensor& x, std::span<const std::size_t> blocks, std::size_t width) {
  detail::expect_rank("gather_blocks", x, 2, "input");
  const std::size_t rows = x.dim(0), n = x.dim(1);
  if (blocks.size() != rows || width == 0 || n % width != 0) {
    detail::shape_error("gather_blocks", "block layout does not fit " + shape_str(x.shape()));
  }
  std::vector<std::size_t> idx(blocks.begin(), blocks.end());
  for (std::size_t b : idx) {
    if ((b + 1) * width > n) detail::shape_error("gather_blocks", "block index out of range");
  }
  std::vector<double> out(rows * width);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < width; ++j) out[r * width + j] = x[r * n + idx[r] * width + j];
  }
  return detail::make_result("gather_blocks", {rows, width}, std::move(out), {x},
                             [idx, rows, n, width](detail::Node& self) {
                               if (double* g = detail::parent_grad(self, 0)) {
                                 for (std::size_t r = 0; r < rows; ++r) {
                                   for (std::size_t j = 0; j < width; ++j) {
                                     g[r * n + idx[r] * width + j] += self.grad[r * width + j];
                                   }
                                 }
                               }
                             });
}

// ---------------------------------------------------------------------------
// Softmax family (over the last axis)
// ---------------------------------------------------------------------------

inline Tensor log_softmax(const Tensor& x) {
  const std::size_t n = detail::last_extent(x);
  const std::size_t rows = x.numel() / n;
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, x[r * n + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += std::exp(x[r * n + j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = x[r * n + j] - lse;
  }
  return detail::make_result("log_softmax", x.shape(), out, {x}, [out, rows, n](detail::Node& self) {
    if (double* g = detail::parent_grad(self, 0)) {
      for (std::size_t r = 0; r < rows; ++r) {
        double gs = 0.0;
        for (std::size_t j = 0; j < n; ++j) gs += self.grad[r * n + j];
        for (std::size_t j = 0; j < n; ++j) {
          g[r * n + j] += self.grad[r * n + j] - std::exp(out[r * n + j]) * gs;
        }
      }
    }
  });
}

inline Tensor softmax(const Tensor& x) {
  const std::size_t n = detail::last_extent(x);
  const std::size_t rows = x.numel() / n;
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, x[r * n + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += (out[r * n + j] = std::exp(x[r * n + j] - mx));
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] /= s;
  }
  return detail::make_result("softmax", x.shape(), out, {x}, [out, rows, n](detail::Node& self) {
    if (double* g = detail::parent_grad(self, 0)) {
      for (std::size_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += self.grad[r * n + j] * out[r * n + j];
        for (std::size_t j = 0; j < n; ++j) {
          g[r * n + j] += out[r * n + j] * (self.grad[r * n + j] - dot);
        }
      }
    }
  });
}

/// Mean negative log-likelihood: logp (P,C) row-wise log-probabilities, labels in [0,C).
inline Tensor nll_mean(const Tensor& logp, std::span<const int> labels) {
  detail::expect_rank("nll_mean", logp, 2, "log-probabilities");
  const std::size_t rows = logp.dim(0), n = logp.dim(1);
  if (labels.size() != rows) {
    detail::shape_error("nll_mean", std::to_string(labels.size()) + " labels for " + std::to_string(rows) + " rows");
  }
  std::vector<std::size_t> idx(rows);
  double s = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= n) {
      detail::shape_error("nll_mean", "label " + std::to_string(labels[r]) + " outside [0," + std::to_string(n) + ")");
    }
    idx[r] = static_cast<std::size_t>(labels[r]);
    s -= logp[r * n + idx[r]];
  }
  const double count = static_cast<double>(rows);
  return detail::make_result("nll_mean", {1}, {s / count}, {logp}, [idx, n, count](detail::Node& self) {
    if (double* g = detail::parent_grad(self, 0)) {
      for (std::size_t r = 0; r < idx.size(); ++r) g[r * n + idx[r]] -= self.grad[0] / count;
    }
  });
}

/// Prototype scores −‖x_p − m_c‖² / tau for features (P,F) and prototypes (C,F) -> (P,C).
inline Tensor sq_dist_scores(const Tensor& features, const Tensor& protos, double tau) {
  detail::expect_rank("sq_dist_scores", features, 2, "features");
  detail::expect_rank("sq_dist_scores", protos, 2, "prototypes");
  const std::size_t p = features.dim(0), f = features.dim(1), c = protos.dim(0);
  if (protos.dim(1) != f) {
    detail::shape_error("sq_dist_scores", "feature dim " + std::to_string(f) + " vs prototype dim " +
                                              std::to_string(protos.dim(1)));
  }
  if (!(tau > 0.0)) detail::shape_error("sq_dist_scores", "temperature must be positive");
  std::vector<double> out(p * c);
  for (std::size_t i = 0; i < p; ++i) {
    for (std::size_t k = 0; k < c; ++k) {
      double d = 0.0;
      for (std::size_t j = 0; j < f; ++j) {
        const double diff = features[i * f + j] - protos[k * f + j];
        d += diff * diff;
      }
      out[i * c + k] = -d / tau;
    }
  }
  return detail::make_result("sq_dist_scores", {p, c}, std::move(out), {features, protos},
                             [p, f, c, tau](detail::Node& self) {
                               const auto& xv = self.parents[0]->value;
                               const auto& mv = self.parents[1]->value;
                               double* gx = detail::parent_grad(self, 0);
                               double* gm = detail::parent_grad(self, 1);
                               for (std::size_t i = 0; i < p; ++i) {
                                 for (std::size_t k = 0; k < c; ++k) {
                                   const double go = self.grad[i * c + k];
                                   if (go == 0.0) continue;
                                   for (std::size_t j = 0; j < f; ++j) {
                                     const double d = -2.0 * (xv[i * f + j] - mv[k * f + j]) / tau * go;
                                     if (gx) gx[i * f + j] += d;
                                     if (gm) gm[k * f + j] -= d;
                                   }
                                 }
                               }
                             });
}

/// Exact Plackett–Luce log-probability of `order` (a permutation) under `logits`.
inline Tensor plackett_luce_log_prob(const Tensor& logits, std::span<const int> order) {
  const std::size_t n = logits.numel();
  if (order.size() != n) {
    detail::shape_error("plackett_luce_log_prob", "order has " + std::to_string(order.size()) +
                                                      " entries for " + std::to_string(n) + " logits");
  }
  std::vector<std::size_t> ord(n);
  std::vector<bool> used(n, false);
  for (std::size_t i = 0; i < n; ++i) {
    if (order[i] < 0 || static_cast<std::size_t>(order[i]) >= n || used[order[i]]) {
      detail::shape_error("plackett_luce_log_prob", "order is not a permutation");
    }
    used[order[i]] = true;
    ord[i] = static_cast<std::size_t>(order[i]);
  }
  // Stage i softmax over the suffix ord[i..n).
  std::vector<std::vector<double>> stage_probs(n);
  double lp = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = i; j < n; ++j) mx = std::max(mx, logits[ord[j]]);
    double s = 0.0;
    for (std::size_t j = i; j < n; ++j) s += std::exp(logits[ord[j]] - mx);
    const double lse = mx + std::log(s);
    lp += logits[ord[i]] - lse;
    auto& probs = stage_probs[i];
    probs.resize(n - i);
    for (std::size_t j = i; j < n; ++j) probs[j - i] = std::exp(logits[ord[j]] - lse);
  }
  return detail::make_result("plackett_luce_log_prob", {1}, {lp}, {logits},
                             [ord, stage_probs](detail::Node& self) {
                               if (double* g = detail::parent_grad(self, 0)) {
                                 const double g0 = self.grad[0];
                                 const std::size_t n = ord.size();
                                 for (std::size_t i = 0; i < n; ++i) {
                                   g[ord[i]] += g0;
                                   for (std::size_t j = i; j < n; ++j) g[ord[j]] -= g0 * stage_probs[i][j - i];
                                 }
                               }
                             });
}

// ---------------------------------------------------------------------------
// Convolutions and channel ops on (C,H,W)
// ---------------------------------------------------------------------------

/// Pointwise convolution: weight (out,in), bias (out).
inline Tensor conv2d_1x1(const Tensor& x, const Tensor& w, const Tensor& b) {
  detail::expect_rank("conv2d_1x1", x, 3, "input");
  detail::expect_rank("conv2d_1x1", w, 2, "weight");
  const std::size_t cin = x.dim(0), hw = x.dim(1) * x.dim(2), cout = w.dim(0);
  if (w.dim(1) != cin) {
    detail::shape_error("conv2d_1x1", "weight " + shape_str(w.shape()) + " expects " + std::to_string(w.dim(1)) +
                                          " input channels, got " + std::to_string(cin));
  }
  if (b.shape() != Shape{cout}) {
    detail::shape_error("conv2d_1x1", "bias must be " + shape_str({cout}) + ", got " + shape_str(b.shape()));
  }
  std::vector<double> out(cout * hw);
  for (std::size_t o = 0; o < cout; ++o) {
    for (std::size_t p = 0; p < hw; ++p) {
      double s = b[o];
      for (std::size_t c = 0; c < cin; ++c) s += w[o * cin + c] * x[c * hw + p];
      out[o * hw + p] = s;
    }
  }
  return detail::make_result("conv2d_1x1", {cout, x.dim(1), x.dim(2)}, std::move(out), {x, w, b},
                             [cin, cout, hw](detail::Node& self) {
                               const auto& g = self.grad;
                               const auto& xv = self.parents[0]->value;
                               const auto& wv = self.parents[1]->value;
                               double* gx = detail::parent_grad(self, 0);
                               double* gw = detail::parent_grad(self, 1);
                               double* gb = detail::parent_grad(self, 2);
                               for (std::size_t o = 0; o < cout; ++o) {
                                 for (std::size_t p = 0; p < hw; ++p) {
                                   const double go = g[o * hw + p];
                                   if (gb) gb[o] += go;
                                   for (std::size_t c = 0; c < cin; ++c) {
                                     if (gx) gx[c * hw + p] += wv[o * cin + c] * go;
                                     if (gw) gw[o * cin + c] += xv[c * hw + p] * go;
                                   }
                                 }
                               }
                             });
}

/// Dense 3x3 convolution, zero "same" padding: weight (out,in,3,3).
inline Tensor conv2d_3x3(const Tensor& x, const Tensor& w, const Tensor& b) {
  return detail::conv_same("conv2d_3x3", x, w, b, 3, false);
}

/// Depthwise 5x5 convolution, zero "same" padding: weight (C,5,5).
inline Tensor depthwise_conv2d_5x5(const Tensor& x, const Tensor& w, const Tensor& b) {
  return detail::conv_same("depthwise_conv2d_5x5", x, w, b, 5, true);
}

/// Destination of input channel c under a G-group shuffle of C channels.
inline std::size_t shuffled_channel(std::size_t c, std::size_t channels, std::size_t groups) {
  return (c % groups) * (channels / groups) + c / groups;
}

/// Input channel c moves to (c mod G)·(C/G) + floor(c/G).
inline Tensor channel_shuffle(const Tensor& x, std::size_t groups) {
  detail::check_groups("channel_shuffle", x, groups);
  const std::size_t cn = x.dim(0), hw = x.dim(1) * x.dim(2);
  std::vector<std::size_t> dest(cn);
  for (std::size_t c = 0; c < cn; ++c) dest[c] = shuffled_channel(c, cn, groups);
  std::vector<double> out(x.numel());
  for (std::size_t c = 0; c < cn; ++c) {
    for (std::size_t p = 0; p < hw; ++p) out[dest[c] * hw + p] = x[c * hw + p];
  }
  return detail::make_result("channel_shuffle", x.shape(), std::move(out), {x}, [dest, hw](detail::Node& self) {
    if (double* g = detail::parent_grad(self, 0)) {
      for (std::size_t c = 0; c < dest.size(); ++c) {
        for (std::size_t p = 0; p < hw; ++p) g[c * hw + p] += self.grad[dest[c] * hw + p];
      }
    }
  });
}

/// Per group of C/G contiguous channels, the channel-wise max at each pixel -> (G,H,W).
/// Ties route the gradient to the lowest channel index.
inline Tensor channel_group_max(const Tensor& x, std::size_t groups) {
  detail::check_groups("channel_group_max", x, groups);
  const std::size_t per = x.dim(0) / groups, hw = x.dim(1) * x.dim(2);
  std::vector<double> out(groups * hw);
  std::vector<std::size_t> arg(groups * hw);
  for (std::size_t g = 0; g < groups; ++g) {
    for (std::size_t p = 0; p < hw; ++p) {
      std::size_t best = g * per;
      for (std::size_t c = g * per + 1; c < (g + 1) * per; ++c) {
        if (x[c * hw + p] > x[best * hw + p]) best = c;
      }
      arg[g * hw + p] = best * hw + p;
      out[g * hw + p] = x[best * hw + p];
    }
  }
  return detail::make_result("channel_group_max", {groups, x.dim(1), x.dim(2)}, std::move(out), {x},
                             [arg](detail::Node& self) {
                               if (double* g = detail::parent_grad(self, 0)) {
                                 for (std::size_t i = 0; i < arg.size(); ++i) g[arg[i]] += self.grad[i];
                               }
                             });
}

/// Per group of C/G contiguous channels, the channel-wise mean at each pixel -> (G,H,W).
inline Tensor channel_group_avg(const Tensor& x, std::size_t groups) {
  detail::check_groups("channel_group_avg", x, groups);
  const std::size_t per = x.dim(0) / groups, hw = x.dim(1) * x.dim(2);
  std::vector<double> out(groups * hw, 0.0);
  for (std::size_t g = 0; g < groups; ++g) {
    for (std::size_t p = 0; p < hw; ++p) {
      double s = 0.0;
      for (std::size_t c = g * per; c < (g + 1) * per; ++c) s += x[c * hw + p];
      out[g * hw + p] = s / static_cast<double>(per);
    }
  }
  return detail::make_result("channel_group_avg", {groups, x.dim(1), x.dim(2)}, std::move(out), {x},
                             [groups, per, hw](detail::Node& self) {
                               if (double* g = detail::parent_grad(self, 0)) {
                                 const double inv = 1.0 / static_cast<double>(per);
                                 for (std::size_t grp = 0; grp < groups; ++grp) {
                                   for (std::size_t c = grp * per; c < (grp + 1) * per; ++c) {
                                     for (std::size_t p = 0; p < hw; ++p) g[c * hw + p] += self.grad[grp * hw + p] * inv;
                                   }
                                 }
                               }
                             });
}

/// Stacks a then b along the channel axis.
inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
  detail::expect_rank("concat_channels", a, 3, "lhs");
  detail::expect_rank("concat_channels", b, 3, "rhs");
  if (a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2)) {
    detail::shape_error("concat_channels", "spatial extents differ: " + shape_str(a.shape()) + " vs " +
                                               shape_str(b.shape()));
  }
  std::vector<double> out(a.values().begin(), a.values().end());
  out.insert(out.end(), b.values().begin(), b.values().end());
  const std::size_t split = a.numel();
  return detail::make_result("concat_channels", {a.dim(0) + b.dim(0), a.dim(1), a.dim(2)}, std::move(out), {a, b},
                             [split](detail::Node& self) {
                               if (double* g = detail::parent_grad(self, 0)) {
                                 for (std::size_t i = 0; i < split; ++i) g[i] += self.grad[i];
                               }
                               if (double* g = detail::parent_grad(self, 1)) {
                                 for (std::size_t i = split; i < self.grad.size(); ++i) g[i - split] += self.grad[i];
                               }
                             });
}

}  // namespace classched::diff
