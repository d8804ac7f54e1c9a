#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "pixpro/autograd.hpp"

namespace pixpro {

namespace detail {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapRM = Eigen::Map<MatRM<T>>;
template <typename T>
using CMapRM = Eigen::Map<const MatRM<T>>;

inline void expect_rank(const Shape& s, std::size_t r, const char* op, const char* arg) {
  if (s.size() != r)
    throw Error(std::string(op) + ": " + arg + " must have rank " + std::to_string(r) + ", got " +
                shape_str(s));
}

template <typename T>
void accumulate(Node<T>& parent, const Tensor<T>& g) {
  if (!parent.requires_grad) return;
  auto& buf = parent.grad_buffer();
  for (std::size_t i = 0; i < g.numel(); ++i) buf[i] += g[i];
}

// Lays out a [C,kh*kw] x [Ho*Wo] patch matrix for one image.
template <typename T>
void im2col(const T* x, std::size_t C, std::size_t H, std::size_t W, std::size_t kh, std::size_t kw,
            std::size_t stride, std::size_t pad, std::size_t Ho, std::size_t Wo, T* col) {
  const std::size_t hw = Ho * Wo;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < kh; ++i)
      for (std::size_t j = 0; j < kw; ++j) {
        T* row = col + ((c * kh + i) * kw + j) * hw;
        for (std::size_t oh = 0; oh < Ho; ++oh) {
          const long ih = static_cast<long>(oh * stride + i) - static_cast<long>(pad);
          for (std::size_t ow = 0; ow < Wo; ++ow) {
            const long iw = static_cast<long>(ow * stride + j) - static_cast<long>(pad);
            row[oh * Wo + ow] = (ih >= 0 && iw >= 0 && ih < static_cast<long>(H) && iw < static_cast<long>(W))
                                    ? x[(c * H + ih) * W + iw]
                                    : T(0);
          }
        }
      }
}

template <typename T>
void col2im(const T* col, std::size_t C, std::size_t H, std::size_t W, std::size_t kh, std::size_t kw,
            std::size_t stride, std::size_t pad, std::size_t Ho, std::size_t Wo, T* x) {
  const std::size_t hw = Ho * Wo;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < kh; ++i)
      for (std::size_t j = 0; j < kw; ++j) {
        const T* row = col + ((c * kh + i) * kw + j) * hw;
        for (std::size_t oh = 0; oh < Ho; ++oh) {
          const long ih = static_cast<long>(oh * stride + i) - static_cast<long>(pad);
          if (ih < 0 || ih >= static_cast<long>(H)) continue;
          for (std::size_t ow = 0; ow < Wo; ++ow) {
            const long iw = static_cast<long>(ow * stride + j) - static_cast<long>(pad);
            if (iw < 0 || iw >= static_cast<long>(W)) continue;
            x[(c * H + ih) * W + iw] += row[oh * Wo + ow];
          }
        }
      }
}

}  // namespace detail

/// 2-D cross-correlation without bias. input [N,C,H,W], kernel [K,C,kh,kw].
template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& kernel, std::size_t stride, std::size_t pad) {
  const auto& xs = input.shape();
  const auto& ks = kernel.shape();
  if (xs.size() != 4 || ks.size() != 4 || xs[1] != ks[1] || stride == 0 ||
      ks[2] > xs[2] + 2 * pad || ks[3] > xs[3] + 2 * pad)
    throw Error("conv2d: incompatible input " + shape_str(xs) + " and kernel " + shape_str(ks) +
                " (stride " + std::to_string(stride) + ", pad " + std::to_string(pad) + ")");
  const std::size_t N = xs[0], C = xs[1], H = xs[2], W = xs[3];
  const std::size_t K = ks[0], kh = ks[2], kw = ks[3];
  const std::size_t Ho = (H + 2 * pad - kh) / stride + 1, Wo = (W + 2 * pad - kw) / stride + 1;
  const std::size_t ckk = C * kh * kw, hw = Ho * Wo;
  const bool pointwise = kh == 1 && kw == 1 && stride == 1 && pad == 0;

  auto cols = std::make_shared<std::vector<T>>(pointwise ? 0 : N * ckk * hw);
  Tensor<T> out({N, K, Ho, Wo});
  detail::CMapRM<T> Wm(kernel.value().data().data(), K, ckk);
  for (std::size_t n = 0; n < N; ++n) {
    const T* src = input.value().data().data() + n * C * H * W;
    const T* col = src;
    if (!pointwise) {
      T* c = cols->data() + n * ckk * hw;
      detail::im2col(src, C, H, W, kh, kw, stride, pad, Ho, Wo, c);
      col = c;
    }
    detail::MapRM<T> O(out.data().data() + n * K * hw, K, hw);
    O.noalias() = Wm * detail::CMapRM<T>(col, ckk, hw);
  }

  return detail::make_node<T>(
      std::move(out), "conv2d", {input, kernel},
      [=](Node<T>& self) {
        auto& xin = *self.parents[0];
        auto& ker = *self.parents[1];
        detail::CMapRM<T> Wk(ker.value.data().data(), K, ckk);
        std::vector<T> dcol(ckk * hw);
        for (std::size_t n = 0; n < N; ++n) {
          detail::CMapRM<T> dO(self.grad.data().data() + n * K * hw, K, hw);
          const T* col = pointwise ? xin.value.data().data() + n * C * H * W : cols->data() + n * ckk * hw;
          if (ker.requires_grad) {
            detail::MapRM<T> dW(ker.grad_buffer().data().data(), K, ckk);
            dW.noalias() += dO * detail::CMapRM<T>(col, ckk, hw).transpose();
          }
          if (xin.requires_grad) {
            T* dx = xin.grad_buffer().data().data() + n * C * H * W;
            if (pointwise) {
              detail::MapRM<T>(dx, C, hw).noalias() += Wk.transpose() * dO;
            } else {
              detail::MapRM<T>(dcol.data(), ckk, hw).noalias() = Wk.transpose() * dO;
              detail::col2im(dcol.data(), C, H, W, kh, kw, stride, pad, Ho, Wo, dx);
            }
          }
        }
      });
}

/// Adds a per-channel bias to [N,C,...] input.
template <typename T>
Var<T> add_channel_bias(const Var<T>& x, const Var<T>& bias) {
  const auto& s = x.shape();
  if (s.size() < 2 || bias.value().numel() != s[1])
    throw Error("add_channel_bias: input " + shape_str(s) + " vs bias " + shape_str(bias.shape()));
  const std::size_t N = s[0], C = s[1], inner = x.value().numel() / (N * C);
  Tensor<T> out = x.value();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      T* p = out.data().data() + (n * C + c) * inner;
      const T b = bias.value()[c];
      for (std::size_t i = 0; i < inner; ++i) p[i] += b;
    }
  return detail::make_node<T>(std::move(out), "add_channel_bias", {x, bias}, [=](Node<T>& self) {
    detail::accumulate(*self.parents[0], self.grad);
    auto& b = *self.parents[1];
    if (!b.requires_grad) return;
    auto& g = b.grad_buffer();
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c) {
        const T* p = self.grad.data().data() + (n * C + c) * inner;
        T acc = 0;
        for (std::size_t i = 0; i < inner; ++i) acc += p[i];
        g[c] += acc;
      }
  });
}

enum class Mode { train, eval };

/// Per-channel normalization parameters and running statistics.
template <typename T>
struct BatchNormState {
  Var<T> gamma;
  Var<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T epsilon = T(1e-5);
  T momentum = T(0.1);

  static BatchNormState make(std::size_t channels, bool trainable = true) {
    BatchNormState s;
    s.gamma = Var<T>::leaf(Tensor<T>({channels}, T(1)), trainable);
    s.beta = Var<T>::leaf(Tensor<T>({channels}, T(0)), trainable);
    s.running_mean = Tensor<T>({channels}, T(0));
    s.running_var = Tensor<T>({channels}, T(1));
    return s;
  }

  std::size_t channels() const { return running_mean.numel(); }
};

/// Batch normalization over [N,C,H,W] or [N,C]. Train mode uses batch statistics and
/// updates the running averages in `state`; eval mode uses the running averages only.
template <typename T>
Var<T> batch_norm(const Var<T>& input, BatchNormState<T>& state, Mode mode) {
  const auto& s = input.shape();
  if ((s.size() != 4 && s.size() != 2) || s[1] != state.channels())
    throw Error("batch_norm: input " + shape_str(s) + " does not match " +
                std::to_string(state.channels()) + " channels");
  const std::size_t N = s[0], C = s[1], inner = input.value().numel() / (N * C);
  const std::size_t m = N * inner;
  const T eps = state.epsilon;
  const auto& x = input.value();

  std::vector<T> mean(C), invstd(C);
  if (mode == Mode::train) {
    for (std::size_t c = 0; c < C; ++c) {
      T sum = 0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = x.data().data() + (n * C + c) * inner;
        for (std::size_t i = 0; i < inner; ++i) sum += p[i];
      }
      const T mu = sum / T(m);
      T sq = 0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = x.data().data() + (n * C + c) * inner;
        for (std::size_t i = 0; i < inner; ++i) sq += (p[i] - mu) * (p[i] - mu);
      }
      const T var = sq / T(m);
      mean[c] = mu;
      invstd[c] = T(1) / std::sqrt(var + eps);
      const T unbiased = m > 1 ? sq / T(m - 1) : var;
      state.running_mean[c] = (T(1) - state.momentum) * state.running_mean[c] + state.momentum * mu;
      state.running_var[c] = (T(1) - state.momentum) * state.running_var[c] + state.momentum * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      if (!(state.running_var[c] > T(0)))
        throw Error("batch_norm: nonpositive running variance in channel " + std::to_string(c));
      mean[c] = state.running_mean[c];
      invstd[c] = T(1) / std::sqrt(state.running_var[c] + eps);
    }
  }

  Tensor<T> xhat(s);
  Tensor<T> out(s);
  const auto& g = state.gamma.value();
  const auto& b = state.beta.value();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t off = (n * C + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) {
        const T h = (x[off + i] - mean[c]) * invstd[c];
        xhat[off + i] = h;
        out[off + i] = g[c] * h + b[c];
      }
    }

  auto xh = std::make_shared<Tensor<T>>(std::move(xhat));
  return detail::make_node<T>(
      std::move(out), "batch_norm", {input, state.gamma, state.beta},
      [=](Node<T>& self) {
        auto& xin = *self.parents[0];
        auto& gam = *self.parents[1];
        auto& bet = *self.parents[2];
        const auto& dy = self.grad;
        std::vector<T> sum_dy(C, 0), sum_dy_xh(C, 0);
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t c = 0; c < C; ++c) {
            const std::size_t off = (n * C + c) * inner;
            for (std::size_t i = 0; i < inner; ++i) {
              sum_dy[c] += dy[off + i];
              sum_dy_xh[c] += dy[off + i] * (*xh)[off + i];
            }
          }
        if (gam.requires_grad)
          for (std::size_t c = 0; c < C; ++c) gam.grad_buffer()[c] += sum_dy_xh[c];
        if (bet.requires_grad)
          for (std::size_t c = 0; c < C; ++c) bet.grad_buffer()[c] += sum_dy[c];
        if (!xin.requires_grad) return;
        auto& dx = xin.grad_buffer();
        const auto& gv = gam.value;
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t c = 0; c < C; ++c) {
            const std::size_t off = (n * C + c) * inner;
            const T k = gv[c] * invstd[c];
            for (std::size_t i = 0; i < inner; ++i) {
              if (mode == Mode::train)
                dx[off + i] += k * (dy[off + i] - sum_dy[c] / T(m) - (*xh)[off + i] * sum_dy_xh[c] / T(m));
              else
                dx[off + i] += k * dy[off + i];
            }
          }
      });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v = v > T(0) ? v : T(0);
  return detail::make_node<T>(std::move(out), "relu", {x}, [](Node<T>& self) {
    auto& p = *self.parents[0];
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.numel(); ++i)
      if (p.value[i] > T(0)) g[i] += self.grad[i];
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape())
    throw Error("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b.value()[i];
  return detail::make_node<T>(std::move(out), "add", {a, b}, [](Node<T>& self) {
    detail::accumulate(*self.parents[0], self.grad);
    detail::accumulate(*self.parents[1], self.grad);
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape())
    throw Error("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
  return detail::make_node<T>(std::move(out), "mul", {a, b}, [](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad)
      for (std::size_t i = 0; i < self.grad.numel(); ++i) pa.grad_buffer()[i] += self.grad[i] * pb.value[i];
    if (pb.requires_grad)
      for (std::size_t i = 0; i < self.grad.numel(); ++i) pb.grad_buffer()[i] += self.grad[i] * pa.value[i];
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T k) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v *= k;
  return detail::make_node<T>(std::move(out), "scale", {a}, [k](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += k * self.grad[i];
  });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  T acc = 0;
  for (auto v : a.value().data()) acc += v;
  return detail::make_node<T>(Tensor<T>::scalar(acc), "sum", {a}, [](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    const T d = self.grad[0];
    for (auto& v : g.data()) v += d;
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), T(1) / T(a.value().numel()));
}

/// Sum of scalar nodes.
template <typename T>
Var<T> sum_of(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw Error("sum_of: empty list");
  T acc = 0;
  for (const auto& x : xs) {
    if (x.value().numel() != 1) throw Error("sum_of: non-scalar operand " + shape_str(x.shape()));
    acc += x.value()[0];
  }
  return detail::make_node<T>(Tensor<T>::scalar(acc), "sum_of", xs, [](Node<T>& self) {
    for (auto& p : self.parents) detail::accumulate(*p, self.grad);
  });
}

template <typename T>
Var<T> mean_of(const std::vector<Var<T>>& xs) {
  return scale(sum_of(xs), T(1) / T(xs.size()));
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape s) {
  Tensor<T> out = a.value().reshaped(std::move(s));
  return detail::make_node<T>(std::move(out), "reshape", {a}, [](Node<T>& self) {
    detail::accumulate(*self.parents[0], self.grad);
  });
}

/// [N,C,H,W] -> [N,C] by spatial averaging.
template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  detail::expect_rank(x.shape(), 4, "global_avg_pool", "input");
  const std::size_t N = x.shape()[0], C = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
  Tensor<T> out({N, C});
  for (std::size_t i = 0; i < N * C; ++i) {
    T acc = 0;
    for (std::size_t k = 0; k < hw; ++k) acc += x.value()[i * hw + k];
    out[i] = acc / T(hw);
  }
  return detail::make_node<T>(std::move(out), "global_avg_pool", {x}, [=](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < N * C; ++i)
      for (std::size_t k = 0; k < hw; ++k) g[i * hw + k] += self.grad[i] / T(hw);
  });
}

/// Nearest-neighbour 2x spatial upsampling.
template <typename T>
Var<T> upsample2x(const Var<T>& x) {
  detail::expect_rank(x.shape(), 4, "upsample2x", "input");
  const std::size_t N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  Tensor<T> out({N, C, 2 * H, 2 * W});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t h = 0; h < 2 * H; ++h)
        for (std::size_t w = 0; w < 2 * W; ++w) out.at(n, c, h, w) = x.value().at(n, c, h / 2, w / 2);
  return detail::make_node<T>(std::move(out), "upsample2x", {x}, [=](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t h = 0; h < 2 * H; ++h)
          for (std::size_t w = 0; w < 2 * W; ++w) g.at(n, c, h / 2, w / 2) += self.grad.at(n, c, h, w);
  });
}

/// Cells of image `n` of a [N,C,H,W] map as a [H*W, C] matrix (row = cell, row-major over H,W).
template <typename T>
Var<T> image_cells(const Var<T>& x, std::size_t n) {
  detail::expect_rank(x.shape(), 4, "image_cells", "input");
  const std::size_t N = x.shape()[0], C = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
  if (n >= N) throw Error("image_cells: index " + std::to_string(n) + " out of " + shape_str(x.shape()));
  Tensor<T> out({hw, C});
  const T* src = x.value().data().data() + n * C * hw;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t p = 0; p < hw; ++p) out[p * C + c] = src[c * hw + p];
  return detail::make_node<T>(std::move(out), "image_cells", {x}, [=](Node<T>& self) {
    T* g = self.parents[0]->grad_buffer().data().data() + n * C * hw;
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < hw; ++p) g[c * hw + p] += self.grad[p * C + c];
  });
}

/// Inverse of image_cells over a whole batch: N matrices [H*W, C] -> [N,C,H,W].
template <typename T>
Var<T> cells_to_map(const std::vector<Var<T>>& cells, std::size_t H, std::size_t W) {
  if (cells.empty()) throw Error("cells_to_map: empty batch");
  const std::size_t N = cells.size(), hw = H * W, C = cells[0].shape().back();
  Tensor<T> out({N, C, H, W});
  for (std::size_t n = 0; n < N; ++n) {
    if (cells[n].shape() != Shape{hw, C})
      throw Error("cells_to_map: expected " + shape_str({hw, C}) + ", got " + shape_str(cells[n].shape()));
    for (std::size_t p = 0; p < hw; ++p)
      for (std::size_t c = 0; c < C; ++c) out[(n * C + c) * hw + p] = cells[n].value()[p * C + c];
  }
  return detail::make_node<T>(std::move(out), "cells_to_map", cells, [=](Node<T>& self) {
    for (std::size_t n = 0; n < N; ++n) {
      auto& p = *self.parents[n];
      if (!p.requires_grad) continue;
      auto& g = p.grad_buffer();
      for (std::size_t q = 0; q < hw; ++q)
        for (std::size_t c = 0; c < C; ++c) g[q * C + c] += self.grad[(n * C + c) * hw + q];
    }
  });
}

/// Dense product A[n,k] * B[k,m].
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (as.size() != 2 || bs.size() != 2 || as[1] != bs[0])
    throw Error("matmul: incompatible shapes " + shape_str(as) + " and " + shape_str(bs));
  const std::size_t n = as[0], k = as[1], m = bs[1];
  Tensor<T> out({n, m});
  detail::MapRM<T>(out.data().data(), n, m).noalias() =
      detail::CMapRM<T>(a.value().data().data(), n, k) * detail::CMapRM<T>(b.value().data().data(), k, m);
  return detail::make_node<T>(std::move(out), "matmul", {a, b}, [=](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    detail::CMapRM<T> dO(self.grad.data().data(), n, m);
    if (pa.requires_grad)
      detail::MapRM<T>(pa.grad_buffer().data().data(), n, k).noalias() +=
          dO * detail::CMapRM<T>(pb.value.data().data(), k, m).transpose();
    if (pb.requires_grad)
      detail::MapRM<T>(pb.grad_buffer().data().data(), k, m).noalias() +=
          detail::CMapRM<T>(pa.value.data().data(), n, k).transpose() * dO;
  });
}

inline constexpr double kCosineEps = 1e-12;

/// Pairwise cosine similarity of rows: out(i,j) = <X_i,Y_j> / (max(|X_i|,eps) max(|Y_j|,eps)).
/// The clamp is treated as a constant in the backward pass.
template <typename T>
Var<T> cosine_similarity_matrix(const Var<T>& X, const Var<T>& Y) {
  const auto& xs = X.shape();
  const auto& ys = Y.shape();
  if (xs.size() != 2 || ys.size() != 2 || xs[1] != ys[1] || xs[1] == 0)
    throw Error("cosine_similarity_matrix: incompatible shapes " + shape_str(xs) + " and " + shape_str(ys));
  const std::size_t n = xs[0], m = ys[0], d = xs[1];
  const T eps = T(kCosineEps);

  auto normalize = [d, eps](const Tensor<T>& src, std::size_t rows, std::vector<T>& norms, std::vector<bool>& clamped) {
    auto unit = std::make_shared<Tensor<T>>(Shape{rows, d});
    norms.resize(rows);
    clamped.resize(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      T sq = 0;
      for (std::size_t k = 0; k < d; ++k) sq += src[r * d + k] * src[r * d + k];
      T nr = std::sqrt(sq);
      clamped[r] = !(nr > eps);
      if (clamped[r]) nr = eps;
      norms[r] = nr;
      for (std::size_t k = 0; k < d; ++k) (*unit)[r * d + k] = src[r * d + k] / nr;
    }
    return unit;
  };
  std::vector<T> nx, ny;
  std::vector<bool> cx, cy;
  auto ux = normalize(X.value(), n, nx, cx);
  auto uy = normalize(Y.value(), m, ny, cy);

  Tensor<T> out({n, m});
  detail::MapRM<T> O(out.data().data(), n, m);
  O.noalias() = detail::CMapRM<T>(ux->data().data(), n, d) * detail::CMapRM<T>(uy->data().data(), m, d).transpose();
  for (auto& v : out.data()) v = std::clamp(v, T(-1), T(1));
  auto cosv = std::make_shared<Tensor<T>>(out);

  return detail::make_node<T>(
      std::move(out), "cosine_similarity_matrix", {X, Y},
      [=](Node<T>& self) {
        auto& px = *self.parents[0];
        auto& py = *self.parents[1];
        detail::CMapRM<T> dC(self.grad.data().data(), n, m);
        detail::CMapRM<T> Ux(ux->data().data(), n, d);
        detail::CMapRM<T> Uy(uy->data().data(), m, d);
        // dC∘C row/column sums give the radial component removed by the normalization.
        auto back = [&](Node<T>& p, const detail::MatRM<T>& dU, const detail::CMapRM<T>& U,
                        const std::vector<T>& norms, const std::vector<bool>& clamped, bool rows) {
          auto& g = p.grad_buffer();
          for (std::size_t r = 0; r < static_cast<std::size_t>(dU.rows()); ++r) {
            T radial = 0;
            if (!clamped[r]) {
              if (rows)
                for (std::size_t j = 0; j < m; ++j) radial += self.grad[r * m + j] * (*cosv)[r * m + j];
              else
                for (std::size_t i = 0; i < n; ++i) radial += self.grad[i * m + r] * (*cosv)[i * m + r];
            }
            for (std::size_t k = 0; k < d; ++k) g[r * d + k] += (dU(r, k) - radial * U(r, k)) / norms[r];
          }
        };
        if (px.requires_grad) {
          detail::MatRM<T> dUx = dC * Uy;
          back(px, dUx, Ux, nx, cx, true);
        }
        if (py.requires_grad) {
          detail::MatRM<T> dUy = dC.transpose() * Ux;
          back(py, dUy, Uy, ny, cy, false);
        }
      });
}

/// Elementwise max(c, 0)^gamma. Zero gradient wherever c <= 0.
template <typename T>
Var<T> clamped_power(const Var<T>& c, T gamma) {
  if (!(gamma > T(0))) throw Error("clamped_power: gamma must be positive");
  Tensor<T> out = c.value();
  for (auto& v : out.data()) v = v > T(0) ? std::pow(v, gamma) : T(0);
  return detail::make_node<T>(std::move(out), "clamped_power", {c}, [gamma](Node<T>& self) {
    auto& p = *self.parents[0];
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.numel(); ++i) {
      const T v = p.value[i];
      if (v > T(0)) g[i] += self.grad[i] * gamma * std::pow(v, gamma - T(1));
    }
  });
}

/// Binary mask with the same layout as a [rows, cols] matrix.
struct Mask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> bits;

  Mask() = default;
  Mask(std::size_t r, std::size_t c, std::uint8_t fill = 0) : rows(r), cols(c), bits(r * c, fill) {}

  std::uint8_t operator()(std::size_t r, std::size_t c) const { return bits[r * cols + c]; }
  std::uint8_t& operator()(std::size_t r, std::size_t c) { return bits[r * cols + c]; }

  std::size_t count() const {
    std::size_t k = 0;
    for (auto b : bits) k += b != 0;
    return k;
  }
  std::size_t row_count(std::size_t r) const {
    std::size_t k = 0;
    for (std::size_t c = 0; c < cols; ++c) k += bits[r * cols + c] != 0;
    return k;
  }
  Mask transposed() const {
    Mask t(cols, rows);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) t(c, r) = (*this)(r, c);
    return t;
  }
  static Mask identity(std::size_t n) {
    Mask m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1;
    return m;
  }
  friend bool operator==(const Mask&, const Mask&) = default;
};

/// Mean of the entries of M selected by mask. The mask must select at least one entry.
template <typename T>
Var<T> masked_mean(const Var<T>& M, const Mask& mask) {
  const auto& s = M.shape();
  if (s.size() != 2 || s[0] != mask.rows || s[1] != mask.cols)
    throw Error("masked_mean: matrix " + shape_str(s) + " vs mask " + shape_str({mask.rows, mask.cols}));
  const std::size_t cnt = mask.count();
  if (cnt == 0) throw Error("masked_mean: empty mask");
  T acc = 0;
  for (std::size_t i = 0; i < mask.bits.size(); ++i)
    if (mask.bits[i]) acc += M.value()[i];
  auto bits = std::make_shared<std::vector<std::uint8_t>>(mask.bits);
  return detail::make_node<T>(Tensor<T>::scalar(acc / T(cnt)), "masked_mean", {M}, [bits, cnt](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    const T d = self.grad[0] / T(cnt);
    for (std::size_t i = 0; i < bits->size(); ++i)
      if ((*bits)[i]) g[i] += d;
  });
}

/// Mean over rows with at least one positive of
///   -log( sum_{j in pos} exp(L_ij) / sum_j exp(L_ij) ).
/// Rows with no positive are skipped. At least one row must qualify.
template <typename T>
Var<T> positive_set_nll(const Var<T>& logits, const Mask& pos) {
  const auto& s = logits.shape();
  if (s.size() != 2 || s[0] != pos.rows || s[1] != pos.cols)
    throw Error("positive_set_nll: logits " + shape_str(s) + " vs mask " + shape_str({pos.rows, pos.cols}));
  const std::size_t n = s[0], m = s[1];
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < n; ++i)
    if (pos.row_count(i) > 0) rows.push_back(i);
  if (rows.empty()) throw Error("positive_set_nll: no row has a positive");

  const auto& L = logits.value();
  // Softmax over all columns and over the positive columns, per qualifying row.
  auto p_all = std::make_shared<std::vector<T>>(n * m, T(0));
  auto p_pos = std::make_shared<std::vector<T>>(n * m, T(0));
  T total = 0;
  for (auto i : rows) {
    T mx = L[i * m];
    for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, L[i * m + j]);
    T z_all = 0, z_pos = 0;
    for (std::size_t j = 0; j < m; ++j) {
      const T e = std::exp(L[i * m + j] - mx);
      (*p_all)[i * m + j] = e;
      z_all += e;
      if (pos(i, j)) {
        (*p_pos)[i * m + j] = e;
        z_pos += e;
      }
    }
    for (std::size_t j = 0; j < m; ++j) {
      (*p_all)[i * m + j] /= z_all;
      (*p_pos)[i * m + j] /= z_pos;
    }
    total += std::log(z_all) - std::log(z_pos);
  }
  const std::size_t q = rows.size();
  return detail::make_node<T>(Tensor<T>::scalar(total / T(q)), "positive_set_nll", {logits},
                              [=](Node<T>& self) {
                                auto& g = self.parents[0]->grad_buffer();
                                const T d = self.grad[0] / T(q);
                                for (auto i : rows)
                                  for (std::size_t j = 0; j < m; ++j)
                                    g[i * m + j] += d * ((*p_all)[i * m + j] - (*p_pos)[i * m + j]);
                              });
}

/// Detached copy: same value, no graph edges.
template <typename T>
Var<T> detach(const Var<T>& x) {
  return Var<T>::leaf(x.value(), false);
}

}  // namespace pixpro
