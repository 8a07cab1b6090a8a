#include <Eigen/Core>

#include "gradmatch/autodiff.hpp"
#include "gradmatch/errors.hpp"

// conv2d, conv2d_input_grad and conv2d_weight_grad are the three partial
// derivatives of the trilinear form <g, conv2d(x, w)>, so the backward rule of
// each one is written with the other two.

namespace gradmatch::ad {

using detail::make_result;

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

struct ConvDims {
  std::size_t n, cin, h, w;
  std::size_t cout, kh, kw;
  std::size_t oh, ow;
  std::size_t stride, pad;

  std::size_t patch() const { return cin * kh * kw; }
  std::size_t out_pixels() const { return oh * ow; }
  Shape input_shape() const { return {n, cin, h, w}; }
  Shape kernel_shape() const { return {cout, cin, kh, kw}; }
  Shape output_shape() const { return {n, cout, oh, ow}; }
};

ConvDims conv_dims(const Shape& input, const Shape& kernel, Conv2dGeometry geo) {
  if (input.size() != 4) throw DimensionError("conv2d: input must be [N, C, H, W], got " + to_string(input));
  if (kernel.size() != 4) throw DimensionError("conv2d: kernel must be [out, in, kh, kw], got " + to_string(kernel));
  if (geo.stride < 1) throw ContractError("conv2d: stride must be >= 1");
  if (input[1] != kernel[1]) {
    throw DimensionError("conv2d: input channels " + to_string(input) + " do not match kernel " + to_string(kernel));
  }
  const std::size_t ph = input[2] + 2 * geo.padding, pw = input[3] + 2 * geo.padding;
  if (ph < kernel[2] || pw < kernel[3]) {
    throw DimensionError("conv2d: kernel " + to_string(kernel) + " larger than padded input " + to_string(input) +
                         " (padding " + std::to_string(geo.padding) + ")");
  }
  ConvDims d{};
  d.n = input[0];
  d.cin = input[1];
  d.h = input[2];
  d.w = input[3];
  d.cout = kernel[0];
  d.kh = kernel[2];
  d.kw = kernel[3];
  d.stride = geo.stride;
  d.pad = geo.padding;
  d.oh = (ph - d.kh) / d.stride + 1;
  d.ow = (pw - d.kw) / d.stride + 1;
  return d;
}

// Unfolds one image [cin, h, w] into columns [cin*kh*kw, oh*ow].
void im2col(const double* image, const ConvDims& d, double* col) {
  const std::size_t cols = d.out_pixels();
  for (std::size_t c = 0; c < d.cin; ++c)
    for (std::size_t ki = 0; ki < d.kh; ++ki)
      for (std::size_t kj = 0; kj < d.kw; ++kj) {
        double* dst = col + ((c * d.kh + ki) * d.kw + kj) * cols;
        const double* plane = image + c * d.h * d.w;
        for (std::size_t oi = 0; oi < d.oh; ++oi) {
          const long ii = static_cast<long>(oi * d.stride + ki) - static_cast<long>(d.pad);
          double* row = dst + oi * d.ow;
          if (ii < 0 || ii >= static_cast<long>(d.h)) {
            std::fill_n(row, d.ow, 0.0);
            continue;
          }
          const double* src = plane + static_cast<std::size_t>(ii) * d.w;
          for (std::size_t oj = 0; oj < d.ow; ++oj) {
            const long jj = static_cast<long>(oj * d.stride + kj) - static_cast<long>(d.pad);
            row[oj] = (jj < 0 || jj >= static_cast<long>(d.w)) ? 0.0 : src[jj];
          }
        }
      }
}

// Adjoint of im2col: accumulates columns back into an image.
void col2im(const double* col, const ConvDims& d, double* image) {
  const std::size_t cols = d.out_pixels();
  for (std::size_t c = 0; c < d.cin; ++c)
    for (std::size_t ki = 0; ki < d.kh; ++ki)
      for (std::size_t kj = 0; kj < d.kw; ++kj) {
        const double* src = col + ((c * d.kh + ki) * d.kw + kj) * cols;
        double* plane = image + c * d.h * d.w;
        for (std::size_t oi = 0; oi < d.oh; ++oi) {
          const long ii = static_cast<long>(oi * d.stride + ki) - static_cast<long>(d.pad);
          if (ii < 0 || ii >= static_cast<long>(d.h)) continue;
          double* dst = plane + static_cast<std::size_t>(ii) * d.w;
          const double* row = src + oi * d.ow;
          for (std::size_t oj = 0; oj < d.ow; ++oj) {
            const long jj = static_cast<long>(oj * d.stride + kj) - static_cast<long>(d.pad);
            if (jj >= 0 && jj < static_cast<long>(d.w)) dst[jj] += row[oj];
          }
        }
      }
}

Tensor conv_forward(const Tensor& x, const Tensor& w, const ConvDims& d) {
  Tensor y(d.output_shape());
  std::vector<double> col(d.patch() * d.out_pixels());
  ConstMatrixMap wm(w.raw(), d.cout, d.patch());
  for (std::size_t i = 0; i < d.n; ++i) {
    im2col(x.raw() + i * d.cin * d.h * d.w, d, col.data());
    MatrixMap(y.raw() + i * d.cout * d.out_pixels(), d.cout, d.out_pixels()).noalias() =
        wm * ConstMatrixMap(col.data(), d.patch(), d.out_pixels());
  }
  return y;
}

Tensor conv_input_grad(const Tensor& g, const Tensor& w, const ConvDims& d) {
  Tensor gx(d.input_shape(), 0.0);
  RowMatrix col(d.patch(), d.out_pixels());
  ConstMatrixMap wm(w.raw(), d.cout, d.patch());
  for (std::size_t i = 0; i < d.n; ++i) {
    col.noalias() = wm.transpose() * ConstMatrixMap(g.raw() + i * d.cout * d.out_pixels(), d.cout, d.out_pixels());
    col2im(col.data(), d, gx.raw() + i * d.cin * d.h * d.w);
  }
  return gx;
}

Tensor conv_weight_grad(const Tensor& x, const Tensor& g, const ConvDims& d) {
  Tensor gw(d.kernel_shape(), 0.0);
  std::vector<double> col(d.patch() * d.out_pixels());
  MatrixMap gwm(gw.raw(), d.cout, d.patch());
  for (std::size_t i = 0; i < d.n; ++i) {
    im2col(x.raw() + i * d.cin * d.h * d.w, d, col.data());
    gwm.noalias() += ConstMatrixMap(g.raw() + i * d.cout * d.out_pixels(), d.cout, d.out_pixels()) *
                     ConstMatrixMap(col.data(), d.patch(), d.out_pixels()).transpose();
  }
  return gw;
}

void require_output_shape(const char* op, const Var& g, const ConvDims& d) {
  if (g.shape() != d.output_shape()) {
    throw DimensionError(std::string(op) + ": gradient shape " + to_string(g.shape()) + " does not match conv output " +
                         to_string(d.output_shape()));
  }
}

}  // namespace

Var conv2d(const Var& input, const Var& kernel, Conv2dGeometry geo) {
  const ConvDims d = conv_dims(input.shape(), kernel.shape(), geo);
  return make_result("conv2d", conv_forward(input.value(), kernel.value(), d), {input, kernel},
                     [input, kernel, geo](const Var& g, const std::vector<bool>& need) {
                       Var gx = need[0] ? conv2d_input_grad(g, kernel, geo, input.shape()) : Var();
                       Var gw = need[1] ? conv2d_weight_grad(input, g, geo, kernel.shape()) : Var();
                       return std::vector<Var>{gx, gw};
                     });
}

Var conv2d_input_grad(const Var& grad_out, const Var& kernel, Conv2dGeometry geo, const Shape& input_shape) {
  const ConvDims d = conv_dims(input_shape, kernel.shape(), geo);
  require_output_shape("conv2d_input_grad", grad_out, d);
  return make_result("conv2d_input_grad", conv_input_grad(grad_out.value(), kernel.value(), d), {grad_out, kernel},
                     [grad_out, kernel, geo](const Var& u, const std::vector<bool>& need) {
                       Var gg = need[0] ? conv2d(u, kernel, geo) : Var();
                       Var gw = need[1] ? conv2d_weight_grad(u, grad_out, geo, kernel.shape()) : Var();
                       return std::vector<Var>{gg, gw};
                     });
}

Var conv2d_weight_grad(const Var& input, const Var& grad_out, Conv2dGeometry geo, const Shape& kernel_shape) {
  const ConvDims d = conv_dims(input.shape(), kernel_shape, geo);
  require_output_shape("conv2d_weight_grad", grad_out, d);
  return make_result("conv2d_weight_grad", conv_weight_grad(input.value(), grad_out.value(), d), {input, grad_out},
                     [input, grad_out, geo](const Var& u, const std::vector<bool>& need) {
                       Var gx = need[0] ? conv2d_input_grad(grad_out, u, geo, input.shape()) : Var();
                       Var gg = need[1] ? conv2d(input, u, geo) : Var();
                       return std::vector<Var>{gx, gg};
                     });
}

// ---- pooling ---------------------------------------------------------------

namespace {

Shape pooled_shape(const Shape& in, std::size_t window) {
  if (in.size() != 4) throw DimensionError("avg_pool2d: input must be [N, C, H, W], got " + to_string(in));
  if (window < 1) throw ContractError("avg_pool2d: window must be >= 1");
  if (in[2] < window || in[3] < window) {
    throw DimensionError("avg_pool2d: window " + std::to_string(window) + " larger than input " + to_string(in));
  }
  return {in[0], in[1], in[2] / window, in[3] / window};
}

}  // namespace

Var avg_pool2d(const Var& input, std::size_t window) {
  const Shape in = input.shape();
  const Shape out_shape = pooled_shape(in, window);
  Tensor out(out_shape, 0.0);
  const std::size_t planes = in[0] * in[1], h = in[2], w = in[3], oh = out_shape[2], ow = out_shape[3];
  const double inv = 1.0 / static_cast<double>(window * window);
  const double* x = input.value().raw();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        double s = 0.0;
        for (std::size_t a = 0; a < window; ++a)
          for (std::size_t b = 0; b < window; ++b) s += x[p * h * w + (i * window + a) * w + j * window + b];
        out[(p * oh + i) * ow + j] = s * inv;
      }
  return make_result("avg_pool2d", std::move(out), {input}, [in, window](const Var& g, const std::vector<bool>&) {
    return std::vector<Var>{avg_pool2d_grad(g, window, in)};
  });
}

Var avg_pool2d_grad(const Var& grad_out, std::size_t window, const Shape& input_shape) {
  const Shape out_shape = pooled_shape(input_shape, window);
  if (grad_out.shape() != out_shape) {
    throw DimensionError("avg_pool2d_grad: gradient " + to_string(grad_out.shape()) + " does not match pooled shape " +
                         to_string(out_shape));
  }
  Tensor gx(input_shape, 0.0);
  const std::size_t planes = input_shape[0] * input_shape[1], h = input_shape[2], w = input_shape[3];
  const std::size_t oh = out_shape[2], ow = out_shape[3];
  const double inv = 1.0 / static_cast<double>(window * window);
  const double* g = grad_out.value().raw();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        const double v = g[(p * oh + i) * ow + j] * inv;
        for (std::size_t a = 0; a < window; ++a)
          for (std::size_t b = 0; b < window; ++b) gx[p * h * w + (i * window + a) * w + j * window + b] = v;
      }
  return make_result("avg_pool2d_grad", std::move(gx), {grad_out}, [window](const Var& u, const std::vector<bool>&) {
    return std::vector<Var>{avg_pool2d(u, window)};
  });
}

}  // namespace gradmatch::ad
