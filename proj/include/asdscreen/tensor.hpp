#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <limits>
#include <string>
#include <vector>

#include "asdscreen/datamodel.hpp"
#include "asdscreen/errors.hpp"

namespace asdscreen {

template <typename Scalar>
using RowMatX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Batch of images, (n, h, w, c), row-major channel-last.
template <typename Scalar>
class Tensor4 {
 public:
  Tensor4() = default;
  Tensor4(int n, int h, int w, int c)
      : n_(n), h_(h), w_(w), c_(c), data_(VecX<Scalar>::Zero(count(n, h, w, c))) {}
  Tensor4(int n, int h, int w, int c, VecX<Scalar> data)
      : n_(n), h_(h), w_(w), c_(c), data_(std::move(data)) {
    if (data_.size() != count(n, h, w, c)) {
      throw ValidationError("tensor data length does not match its dimensions");
    }
  }

  int n() const noexcept { return n_; }
  int h() const noexcept { return h_; }
  int w() const noexcept { return w_; }
  int c() const noexcept { return c_; }
  Eigen::Index size() const noexcept { return data_.size(); }
  Eigen::Index pixels() const noexcept { return static_cast<Eigen::Index>(h_) * w_; }

  VecX<Scalar>& data() noexcept { return data_; }
  const VecX<Scalar>& data() const noexcept { return data_; }

  Scalar& operator()(int i, int y, int x, int ch) { return data_[offset(i, y, x, ch)]; }
  Scalar operator()(int i, int y, int x, int ch) const { return data_[offset(i, y, x, ch)]; }

  /// Image i viewed as a (h*w) x c row-major matrix.
  Eigen::Map<RowMatX<Scalar>> image(int i) {
    return {data_.data() + static_cast<Eigen::Index>(i) * pixels() * c_, pixels(), c_};
  }
  Eigen::Map<const RowMatX<Scalar>> image(int i) const {
    return {data_.data() + static_cast<Eigen::Index>(i) * pixels() * c_, pixels(), c_};
  }

  bool same_shape(const Tensor4& o) const noexcept {
    return n_ == o.n_ && h_ == o.h_ && w_ == o.w_ && c_ == o.c_;
  }

 private:
  static Eigen::Index count(int n, int h, int w, int c) {
    if (n < 0 || h < 0 || w < 0 || c < 0) throw ValidationError("negative tensor dimension");
    return static_cast<Eigen::Index>(n) * h * w * c;
  }
  Eigen::Index offset(int i, int y, int x, int ch) const {
    return ((static_cast<Eigen::Index>(i) * h_ + y) * w_ + x) * c_ + ch;
  }

  int n_ = 0;
  int h_ = 0;
  int w_ = 0;
  int c_ = 0;
  VecX<Scalar> data_;
};

using Tensor4d = Tensor4<double>;

inline int conv_output_dim(int in, int kernel, int stride, int padding) {
  if (kernel <= 0 || stride <= 0 || padding < 0) {
    throw ValidationError("kernel and stride must be positive, padding non-negative");
  }
  const int span = in + 2 * padding - kernel;
  if (span < 0) return 0;
  return span / stride + 1;
}

/// Convolution geometry. Weights are (k*k*c_in) x c_out with rows ordered
/// (ky, kx, c_in), matching the im2col patch layout.
struct ConvGeometry {
  int kernel = 3;
  int stride = 1;
  int padding = 0;
};

/// Patch matrix of image i: one row per output pixel, (ky, kx, c) columns.
template <typename Scalar>
RowMatX<Scalar> im2col(const Tensor4<Scalar>& x, int i, const ConvGeometry& g, int out_h,
                       int out_w) {
  const int c = x.c();
  RowMatX<Scalar> cols(static_cast<Eigen::Index>(out_h) * out_w,
                       static_cast<Eigen::Index>(g.kernel) * g.kernel * c);
  for (int oy = 0; oy < out_h; ++oy) {
    for (int ox = 0; ox < out_w; ++ox) {
      Scalar* row = cols.row(static_cast<Eigen::Index>(oy) * out_w + ox).data();
      for (int ky = 0; ky < g.kernel; ++ky) {
        const int iy = oy * g.stride - g.padding + ky;
        for (int kx = 0; kx < g.kernel; ++kx) {
          const int ix = ox * g.stride - g.padding + kx;
          Scalar* dst = row + (static_cast<Eigen::Index>(ky) * g.kernel + kx) * c;
          if (iy < 0 || iy >= x.h() || ix < 0 || ix >= x.w()) {
            std::fill(dst, dst + c, Scalar(0));
          } else {
            const Scalar* src = &x.data()[((static_cast<Eigen::Index>(i) * x.h() + iy) * x.w() +
                                           ix) * c];
            std::copy(src, src + c, dst);
          }
        }
      }
    }
  }
  return cols;
}

/// Scatter-add a patch-gradient matrix back onto image i of dx.
template <typename Scalar>
void col2im_add(const RowMatX<Scalar>& dcols, Tensor4<Scalar>& dx, int i, const ConvGeometry& g,
                int out_h, int out_w) {
  const int c = dx.c();
  for (int oy = 0; oy < out_h; ++oy) {
    for (int ox = 0; ox < out_w; ++ox) {
      const Scalar* row = dcols.row(static_cast<Eigen::Index>(oy) * out_w + ox).data();
      for (int ky = 0; ky < g.kernel; ++ky) {
        const int iy = oy * g.stride - g.padding + ky;
        if (iy < 0 || iy >= dx.h()) continue;
        for (int kx = 0; kx < g.kernel; ++kx) {
          const int ix = ox * g.stride - g.padding + kx;
          if (ix < 0 || ix >= dx.w()) continue;
          const Scalar* src = row + (static_cast<Eigen::Index>(ky) * g.kernel + kx) * c;
          Scalar* dst = &dx.data()[((static_cast<Eigen::Index>(i) * dx.h() + iy) * dx.w() + ix) *
                                   c];
          for (int ch = 0; ch < c; ++ch) dst[ch] += src[ch];
        }
      }
    }
  }
}

/// Cross-correlation with zero padding. Each image is processed on its own so
/// results never depend on batch composition.
template <typename Scalar>
Tensor4<Scalar> conv2d_forward(const Tensor4<Scalar>& x, const MatX<Scalar>& weights,
                               const VecX<Scalar>& bias, const ConvGeometry& g) {
  const Eigen::Index patch = static_cast<Eigen::Index>(g.kernel) * g.kernel * x.c();
  if (weights.rows() != patch) {
    throw ValidationError("conv kernel expects " +
                          std::to_string(weights.rows() / (g.kernel * g.kernel)) +
                          " input channels, got " + std::to_string(x.c()));
  }
  if (bias.size() != weights.cols()) throw ValidationError("conv bias length mismatch");
  const int out_h = conv_output_dim(x.h(), g.kernel, g.stride, g.padding);
  const int out_w = conv_output_dim(x.w(), g.kernel, g.stride, g.padding);
  if (out_h < 1 || out_w < 1) throw ValidationError("conv output would be empty");
  Tensor4<Scalar> y(x.n(), out_h, out_w, static_cast<int>(weights.cols()));
  for (int i = 0; i < x.n(); ++i) {
    const RowMatX<Scalar> cols = im2col(x, i, g, out_h, out_w);
    auto out = y.image(i);
    out.noalias() = cols * weights;
    out.rowwise() += bias.transpose();
  }
  return y;
}

template <typename Scalar>
struct ConvGradients {
  Tensor4<Scalar> dx;
  MatX<Scalar> dweights;
  VecX<Scalar> dbias;
};

template <typename Scalar>
ConvGradients<Scalar> conv2d_backward(const Tensor4<Scalar>& x, const MatX<Scalar>& weights,
                                      const ConvGeometry& g, const Tensor4<Scalar>& dy) {
  const int out_h = dy.h();
  const int out_w = dy.w();
  ConvGradients<Scalar> grads{Tensor4<Scalar>(x.n(), x.h(), x.w(), x.c()),
                              MatX<Scalar>::Zero(weights.rows(), weights.cols()),
                              VecX<Scalar>::Zero(weights.cols())};
  for (int i = 0; i < x.n(); ++i) {
    const RowMatX<Scalar> cols = im2col(x, i, g, out_h, out_w);
    const auto d = dy.image(i);
    grads.dweights.noalias() += cols.transpose() * d;
    grads.dbias += d.colwise().sum().transpose();
    const RowMatX<Scalar> dcols = d * weights.transpose();
    col2im_add(dcols, grads.dx, i, g, out_h, out_w);
  }
  return grads;
}

template <typename Scalar>
Tensor4<Scalar> relu_forward(const Tensor4<Scalar>& x) {
  Tensor4<Scalar> y = x;
  y.data() = x.data().cwiseMax(Scalar(0));
  return y;
}

// Gradient mask uses the pre-activation: strictly positive inputs pass.
template <typename Scalar>
Tensor4<Scalar> relu_backward(const Tensor4<Scalar>& x, const Tensor4<Scalar>& dy) {
  Tensor4<Scalar> dx = dy;
  dx.data() = (x.data().array() > Scalar(0)).select(dy.data(), Scalar(0));
  return dx;
}

/// Max pooling without padding; argmax holds the flat input index per output.
template <typename Scalar>
Tensor4<Scalar> maxpool_forward(const Tensor4<Scalar>& x, int k, int stride,
                                std::vector<Eigen::Index>* argmax) {
  const int out_h = conv_output_dim(x.h(), k, stride, 0);
  const int out_w = conv_output_dim(x.w(), k, stride, 0);
  if (out_h < 1 || out_w < 1) throw ValidationError("max pool output would be empty");
  Tensor4<Scalar> y(x.n(), out_h, out_w, x.c());
  if (argmax) argmax->assign(static_cast<std::size_t>(y.size()), 0);
  Eigen::Index o = 0;
  for (int i = 0; i < x.n(); ++i) {
    for (int oy = 0; oy < out_h; ++oy) {
      for (int ox = 0; ox < out_w; ++ox) {
        for (int ch = 0; ch < x.c(); ++ch, ++o) {
          Scalar best = -std::numeric_limits<Scalar>::infinity();
          Eigen::Index best_idx = 0;
          for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
              const int iy = oy * stride + ky;
              const int ix = ox * stride + kx;
              const Eigen::Index idx =
                  ((static_cast<Eigen::Index>(i) * x.h() + iy) * x.w() + ix) * x.c() + ch;
              if (x.data()[idx] > best) {
                best = x.data()[idx];
                best_idx = idx;
              }
            }
          }
          y.data()[o] = best;
          if (argmax) (*argmax)[static_cast<std::size_t>(o)] = best_idx;
        }
      }
    }
  }
  return y;
}

template <typename Scalar>
Tensor4<Scalar> maxpool_backward(const Tensor4<Scalar>& x, const std::vector<Eigen::Index>& argmax,
                                 const Tensor4<Scalar>& dy) {
  Tensor4<Scalar> dx(x.n(), x.h(), x.w(), x.c());
  for (Eigen::Index o = 0; o < dy.size(); ++o) {
    dx.data()[argmax[static_cast<std::size_t>(o)]] += dy.data()[o];
  }
  return dx;
}

/// 2x2 stride-2 average pooling (transition down-sampling); odd edges are dropped.
template <typename Scalar>
Tensor4<Scalar> avgpool2_forward(const Tensor4<Scalar>& x) {
  const int out_h = x.h() / 2;
  const int out_w = x.w() / 2;
  if (out_h < 1 || out_w < 1) throw ValidationError("average pool output would be empty");
  Tensor4<Scalar> y(x.n(), out_h, out_w, x.c());
  for (int i = 0; i < x.n(); ++i) {
    for (int oy = 0; oy < out_h; ++oy) {
      for (int ox = 0; ox < out_w; ++ox) {
        for (int ch = 0; ch < x.c(); ++ch) {
          y(i, oy, ox, ch) = Scalar(0.25) * (x(i, 2 * oy, 2 * ox, ch) + x(i, 2 * oy, 2 * ox + 1, ch) +
                                             x(i, 2 * oy + 1, 2 * ox, ch) +
                                             x(i, 2 * oy + 1, 2 * ox + 1, ch));
        }
      }
    }
  }
  return y;
}

template <typename Scalar>
Tensor4<Scalar> avgpool2_backward(const Tensor4<Scalar>& x, const Tensor4<Scalar>& dy) {
  Tensor4<Scalar> dx(x.n(), x.h(), x.w(), x.c());
  for (int i = 0; i < dy.n(); ++i) {
    for (int oy = 0; oy < dy.h(); ++oy) {
      for (int ox = 0; ox < dy.w(); ++ox) {
        for (int ch = 0; ch < dy.c(); ++ch) {
          const Scalar g = Scalar(0.25) * dy(i, oy, ox, ch);
          dx(i, 2 * oy, 2 * ox, ch) += g;
          dx(i, 2 * oy, 2 * ox + 1, ch) += g;
          dx(i, 2 * oy + 1, 2 * ox, ch) += g;
          dx(i, 2 * oy + 1, 2 * ox + 1, ch) += g;
        }
      }
    }
  }
  return dx;
}

template <typename Scalar>
Tensor4<Scalar> global_avgpool_forward(const Tensor4<Scalar>& x) {
  Tensor4<Scalar> y(x.n(), 1, 1, x.c());
  for (int i = 0; i < x.n(); ++i) {
    y.image(i) = x.image(i).colwise().mean();
  }
  return y;
}

template <typename Scalar>
Tensor4<Scalar> global_avgpool_backward(const Tensor4<Scalar>& x, const Tensor4<Scalar>& dy) {
  Tensor4<Scalar> dx(x.n(), x.h(), x.w(), x.c());
  const Scalar scale = Scalar(1) / static_cast<Scalar>(x.pixels());
  for (int i = 0; i < x.n(); ++i) {
    dx.image(i).rowwise() = dy.image(i).row(0) * scale;
  }
  return dx;
}

/// Channel-wise concatenation [a | b]; spatial dims and batch must agree.
template <typename Scalar>
Tensor4<Scalar> concat_channels(const Tensor4<Scalar>& a, const Tensor4<Scalar>& b) {
  if (a.n() != b.n() || a.h() != b.h() || a.w() != b.w()) {
    throw ValidationError("channel concatenation needs matching batch and spatial dims");
  }
  Tensor4<Scalar> y(a.n(), a.h(), a.w(), a.c() + b.c());
  for (int i = 0; i < a.n(); ++i) {
    auto out = y.image(i);
    out.leftCols(a.c()) = a.image(i);
    out.rightCols(b.c()) = b.image(i);
  }
  return y;
}

/// Channels [begin, begin + count) of x.
template <typename Scalar>
Tensor4<Scalar> slice_channels(const Tensor4<Scalar>& x, int begin, int count) {
  Tensor4<Scalar> y(x.n(), x.h(), x.w(), count);
  for (int i = 0; i < x.n(); ++i) y.image(i) = x.image(i).middleCols(begin, count);
  return y;
}

/// dst channels [begin, begin + src.c()) += src.
template <typename Scalar>
void add_channels(Tensor4<Scalar>& dst, const Tensor4<Scalar>& src, int begin) {
  for (int i = 0; i < dst.n(); ++i) dst.image(i).middleCols(begin, src.c()) += src.image(i);
}

}  // namespace asdscreen
