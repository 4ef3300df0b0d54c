#include "nptm/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace nptm::ops {

namespace {

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                     shape_string(t.shape()));
  }
}

// Unfolded input: row (ic * kh + ki) * kw + kj holds, for every output pixel,
// the input value under that kernel tap (zero in the padding).
std::vector<double> im2col(std::span<const double> in, std::size_t c, std::size_t h, std::size_t w, std::size_t kh,
                           std::size_t kw, std::size_t oh, std::size_t ow, const Conv2dGeometry& g) {
  const std::size_t plane = oh * ow;
  std::vector<double> col(c * kh * kw * plane, 0.0);
  const long pad = static_cast<long>(g.padding), stride = static_cast<long>(g.stride);
  for (std::size_t ic = 0; ic < c; ++ic) {
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj) {
        double* dst = col.data() + ((ic * kh + ki) * kw + kj) * plane;
        for (std::size_t y = 0; y < oh; ++y) {
          const long iy = static_cast<long>(y) * stride - pad + static_cast<long>(ki);
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          const double* row = in.data() + (ic * h + static_cast<std::size_t>(iy)) * w;
          for (std::size_t x = 0; x < ow; ++x) {
            const long ix = static_cast<long>(x) * stride - pad + static_cast<long>(kj);
            if (ix >= 0 && ix < static_cast<long>(w)) dst[y * ow + x] = row[ix];
          }
        }
      }
    }
  }
  return col;
}

}  // namespace

std::size_t conv_out_extent(std::size_t in, std::size_t kernel, const Conv2dGeometry& g) {
  if (g.stride == 0) throw ShapeError("conv2d: stride must be positive");
  if (in + 2 * g.padding < kernel) throw ShapeError("conv2d: kernel larger than padded input");
  return (in + 2 * g.padding - kernel) / g.stride + 1;
}

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, const Conv2dGeometry& g) {
  require_rank(input, 3, "conv2d");
  require_rank(weight, 4, "conv2d");
  const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t o = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (weight.dim(1) != c) throw ShapeError("conv2d: channel mismatch");
  if (bias.size() != o) throw ShapeError("conv2d: bias length mismatch");
  const std::size_t oh = conv_out_extent(h, kh, g), ow = conv_out_extent(w, kw, g);
  const std::size_t plane = oh * ow, taps = c * kh * kw;

  const std::vector<double> col = im2col(input.data(), c, h, w, kh, kw, oh, ow, g);
  Tensor out(Shape{o, oh, ow});
  auto od = out.data();
  auto wd = weight.data();
  for (std::size_t oc = 0; oc < o; ++oc) {
    double* dst = od.data() + oc * plane;
    std::fill(dst, dst + plane, bias[oc]);
    for (std::size_t k = 0; k < taps; ++k) {
      const double kv = wd[oc * taps + k];
      const double* src = col.data() + k * plane;
      for (std::size_t p = 0; p < plane; ++p) dst[p] += kv * src[p];
    }
  }
  return out;
}

Tensor conv2d_grad_input(const Tensor& grad_out, const Tensor& weight, const Shape& input_shape,
                         const Conv2dGeometry& g) {
  const std::size_t c = input_shape[0], h = input_shape[1], w = input_shape[2];
  const std::size_t o = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  const std::size_t oh = grad_out.dim(1), ow = grad_out.dim(2);
  const std::size_t plane = oh * ow, taps = c * kh * kw;
  const long pad = static_cast<long>(g.padding), stride = static_cast<long>(g.stride);

  // Gradient of the unfolded input, then fold it back.
  std::vector<double> gcol(taps * plane, 0.0);
  auto go = grad_out.data();
  auto wd = weight.data();
  for (std::size_t oc = 0; oc < o; ++oc) {
    const double* src = go.data() + oc * plane;
    for (std::size_t k = 0; k < taps; ++k) {
      const double kv = wd[oc * taps + k];
      double* dst = gcol.data() + k * plane;
      for (std::size_t p = 0; p < plane; ++p) dst[p] += kv * src[p];
    }
  }

  Tensor gin(input_shape);
  auto gi = gin.data();
  for (std::size_t ic = 0; ic < c; ++ic) {
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj) {
        const double* src = gcol.data() + ((ic * kh + ki) * kw + kj) * plane;
        for (std::size_t y = 0; y < oh; ++y) {
          const long iy = static_cast<long>(y) * stride - pad + static_cast<long>(ki);
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          double* row = gi.data() + (ic * h + static_cast<std::size_t>(iy)) * w;
          for (std::size_t x = 0; x < ow; ++x) {
            const long ix = static_cast<long>(x) * stride - pad + static_cast<long>(kj);
            if (ix >= 0 && ix < static_cast<long>(w)) row[ix] += src[y * ow + x];
          }
        }
      }
    }
  }
  return gin;
}

Tensor conv2d_grad_weight(const Tensor& grad_out, const Tensor& input, const Shape& weight_shape,
                          const Conv2dGeometry& g) {
  const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t o = weight_shape[0], kh = weight_shape[2], kw = weight_shape[3];
  const std::size_t oh = grad_out.dim(1), ow = grad_out.dim(2);
  const std::size_t plane = oh * ow, taps = c * kh * kw;

  const std::vector<double> col = im2col(input.data(), c, h, w, kh, kw, oh, ow, g);
  Tensor gw(weight_shape);
  auto gwd = gw.data();
  auto go = grad_out.data();
  for (std::size_t oc = 0; oc < o; ++oc) {
    const double* gp = go.data() + oc * plane;
    for (std::size_t k = 0; k < taps; ++k) {
      const double* src = col.data() + k * plane;
      double acc = 0.0;
      for (std::size_t p = 0; p < plane; ++p) acc += gp[p] * src[p];
      gwd[oc * taps + k] = acc;
    }
  }
  return gw;
}

Tensor conv2d_grad_bias(const Tensor& grad_out) {
  const std::size_t o = grad_out.dim(0), plane = grad_out.dim(1) * grad_out.dim(2);
  Tensor gb(Shape{o});
  for (std::size_t oc = 0; oc < o; ++oc) {
    double s = 0.0;
    for (std::size_t i = 0; i < plane; ++i) s += grad_out[oc * plane + i];
    gb[oc] = s;
  }
  return gb;
}

Tensor max_pool2d(const Tensor& input, std::size_t k, std::vector<std::size_t>* argmax) {
  require_rank(input, 3, "max_pool2d");
  if (k == 0) throw ShapeError("max_pool2d: window must be positive");
  const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t oh = h / k, ow = w / k;
  if (oh == 0 || ow == 0) throw ShapeError("max_pool2d: window larger than input");
  Tensor out(Shape{c, oh, ow});
  if (argmax) argmax->assign(out.size(), 0);
  std::size_t n = 0;
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x, ++n) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t best_idx = 0;
        for (std::size_t i = 0; i < k; ++i) {
          for (std::size_t j = 0; j < k; ++j) {
            const std::size_t idx = (ch * h + y * k + i) * w + x * k + j;
            if (input[idx] > best) {
              best = input[idx];
              best_idx = idx;
            }
          }
        }
        out[n] = best;
        if (argmax) (*argmax)[n] = best_idx;
      }
    }
  }
  return out;
}

Tensor relu(const Tensor& x) {
  Tensor out = x;
  for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimension mismatch " + shape_string(a.shape()) + " x " +
                     shape_string(b.shape()));
  }
  Tensor out(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += av * b[p * n + j];
    }
  }
  return out;
}

Tensor affine(const Tensor& weight, const Tensor& x, const Tensor& bias) {
  require_rank(weight, 2, "affine");
  const std::size_t o = weight.dim(0), n = weight.dim(1);
  if (x.size() != n) throw ShapeError("affine: input length mismatch");
  if (bias.size() != o) throw ShapeError("affine: bias length mismatch");
  Tensor out(Shape{o});
  for (std::size_t i = 0; i < o; ++i) {
    double s = bias[i];
    const double* row = weight.data().data() + i * n;
    for (std::size_t j = 0; j < n; ++j) s += row[j] * x[j];
    out[i] = s;
  }
  return out;
}

Tensor log_softmax(const Tensor& logits) {
  require_rank(logits, 1, "log_softmax");
  const double mx = *std::max_element(logits.values().begin(), logits.values().end());
  double s = 0.0;
  for (double v : logits.data()) s += std::exp(v - mx);
  const double lse = mx + std::log(s);
  Tensor out = logits;
  for (auto& v : out.data()) v -= lse;
  return out;
}

Tensor channel_normalize(const Tensor& activation, double eps) {
  require_rank(activation, 3, "channel_normalize");
  const std::size_t c = activation.dim(0), plane = activation.dim(1) * activation.dim(2);
  Tensor out(activation.shape());
  for (std::size_t p = 0; p < plane; ++p) {
    double ss = 0.0;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double v = activation[ch * plane + p];
      ss += v * v;
    }
    const double norm = std::sqrt(ss);
    if (norm <= eps) continue;
    for (std::size_t ch = 0; ch < c; ++ch) out[ch * plane + p] = activation[ch * plane + p] / norm;
  }
  return out;
}

Tensor channel_normalize_grad(const Tensor& grad_out, const Tensor& input, const Tensor& output,
                              double eps) {
  const std::size_t c = input.dim(0), plane = input.dim(1) * input.dim(2);
  Tensor gin(input.shape());
  for (std::size_t p = 0; p < plane; ++p) {
    double ss = 0.0, proj = 0.0;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double v = input[ch * plane + p];
      ss += v * v;
      proj += output[ch * plane + p] * grad_out[ch * plane + p];
    }
    const double norm = std::sqrt(ss);
    if (norm <= eps) continue;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t i = ch * plane + p;
      gin[i] = (grad_out[i] - output[i] * proj) / norm;
    }
  }
  return gin;
}

}  // namespace nptm::ops
