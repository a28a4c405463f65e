#include "occlumesh/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>

#include "occlumesh/kernels.hpp"

namespace occlumesh::ops {

using tensor::shape_string;
using tensor::Tape;

namespace {

void check_same_shape(const Var& a, const Var& b, const char* op) {
  require(a.shape() == b.shape(), ErrorCode::kShape,
          std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
              shape_string(b.shape()));
}

// y = f(x) elementwise; dydx(x, y) gives the local derivative.
template <class Forward, class Derivative>
Var unary(Var a, Forward forward, Derivative dydx) {
  const Tensor& x = a.value();
  Tensor y(x.shape());
  const std::size_t n = x.size();
  for (std::size_t i = 0; i < n; ++i) y[i] = forward(x[i]);
  return a.tape().record(std::move(y), {a}, [a, dydx](Tape& tape, const Tensor& g) {
    const Tensor& x = a.value();
    Tensor& ga = tape.grad(a);
    // The output value is not kept; derivatives are written in terms of x.
    for (std::size_t i = 0; i < x.size(); ++i) ga[i] += g[i] * dydx(x[i]);
  });
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double stable_softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

}  // namespace

Var add(Var a, Var b) {
  check_same_shape(a, b, "add");
  Tensor y(a.shape());
  y.matrix() = a.value().matrix() + b.value().matrix();
  return a.tape().record(std::move(y), {a, b}, [a, b](Tape& tape, const Tensor& g) {
    if (a.requires_grad()) tape.grad(a).matrix() += g.matrix();
    if (b.requires_grad()) tape.grad(b).matrix() += g.matrix();
  });
}

Var sub(Var a, Var b) {
  check_same_shape(a, b, "sub");
  Tensor y(a.shape());
  y.matrix() = a.value().matrix() - b.value().matrix();
  return a.tape().record(std::move(y), {a, b}, [a, b](Tape& tape, const Tensor& g) {
    if (a.requires_grad()) tape.grad(a).matrix() += g.matrix();
    if (b.requires_grad()) tape.grad(b).matrix() -= g.matrix();
  });
}

Var mul(Var a, Var b) {
  check_same_shape(a, b, "mul");
  Tensor y(a.shape());
  y.matrix().array() = a.value().matrix().array() * b.value().matrix().array();
  return a.tape().record(std::move(y), {a, b}, [a, b](Tape& tape, const Tensor& g) {
    if (a.requires_grad())
      tape.grad(a).matrix().array() += g.matrix().array() * b.value().matrix().array();
    if (b.requires_grad())
      tape.grad(b).matrix().array() += g.matrix().array() * a.value().matrix().array();
  });
}

Var scale(Var a, double factor) {
  Tensor y(a.shape());
  y.matrix() = a.value().matrix() * factor;
  return a.tape().record(std::move(y), {a}, [a, factor](Tape& tape, const Tensor& g) {
    tape.grad(a).matrix() += g.matrix() * factor;
  });
}

Var add_scalar(Var a, double offset) {
  Tensor y(a.shape());
  y.matrix().array() = a.value().matrix().array() + offset;
  return a.tape().record(std::move(y), {a}, [a](Tape& tape, const Tensor& g) {
    tape.grad(a).matrix() += g.matrix();
  });
}

Var square(Var a) {
  return unary(a, [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}

Var abs(Var a) {
  return unary(
      a, [](double x) { return std::abs(x); },
      [](double x) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Var log(Var a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x) { return 1.0 / x; });
}

Var exp(Var a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double x) { return std::exp(x); });
}

Var sqrt(Var a) {
  return unary(
      a, [](double x) { return std::sqrt(x); },
      [](double x) { return x > 0 ? 0.5 / std::sqrt(x) : 0.0; });
}

Var sigmoid(Var a) {
  return unary(a, stable_sigmoid, [](double x) {
    const double s = stable_sigmoid(x);
    return s * (1.0 - s);
  });
}

Var relu(Var a) {
  return unary(
      a, [](double x) { return x > 0 ? x : 0.0; }, [](double x) { return x > 0 ? 1.0 : 0.0; });
}

Var clamp(Var a, double lo, double hi) {
  return unary(
      a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

Var softplus(Var a, double beta) {
  require(beta > 0, ErrorCode::kInvalidArgument, "softplus beta must be positive");
  return unary(
      a, [beta](double x) { return stable_softplus(beta * x) / beta; },
      [beta](double x) { return stable_sigmoid(beta * x); });
}

Var softplus_slope(Var a, double beta) {
  require(beta > 0, ErrorCode::kInvalidArgument, "softplus beta must be positive");
  return unary(
      a, [beta](double x) { return stable_sigmoid(beta * x); },
      [beta](double x) {
        const double s = stable_sigmoid(beta * x);
        return beta * s * (1.0 - s);
      });
}

Var relu_slope(Var a) {
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0 ? 1.0 : 0.0;
  return a.tape().constant(std::move(y));
}

Var add_row(Var x, Var b) {
  const Tensor& xv = x.value();
  require(static_cast<std::int64_t>(b.value().size()) == xv.cols(), ErrorCode::kShape,
          "add_row: bias length " + std::to_string(b.value().size()) + " vs " +
              std::to_string(xv.cols()) + " columns");
  Tensor y(xv.shape());
  y.matrix() = xv.matrix();
  Eigen::Map<const Eigen::RowVectorXd> bias(b.value().values().data(), xv.cols());
  y.matrix().rowwise() += bias;
  return x.tape().record(std::move(y), {x, b}, [x, b](Tape& tape, const Tensor& g) {
    if (x.requires_grad()) tape.grad(x).matrix() += g.matrix();
    if (b.requires_grad()) {
      Eigen::Map<Eigen::RowVectorXd> gb(tape.grad(b).values().data(), g.cols());
      gb += g.matrix().colwise().sum();
    }
  });
}

Var mul_scalar_var(Var x, Var s) {
  require(s.value().size() == 1, ErrorCode::kShape, "mul_scalar_var: scalar expected");
  const double sv = s.value()[0];
  Tensor y(x.shape());
  y.matrix() = x.value().matrix() * sv;
  return x.tape().record(std::move(y), {x, s}, [x, s](Tape& tape, const Tensor& g) {
    if (x.requires_grad()) tape.grad(x).matrix() += g.matrix() * s.value()[0];
    if (s.requires_grad())
      tape.grad(s)[0] += (g.matrix().array() * x.value().matrix().array()).sum();
  });
}

Var mul_tiled(Var t, Var s) {
  const Tensor& tv = t.value();
  const Tensor& sv = s.value();
  const std::int64_t n = sv.rows();
  require(tv.cols() == sv.cols() && n > 0 && tv.rows() % n == 0, ErrorCode::kShape,
          "mul_tiled: " + shape_string(tv.shape()) + " vs " + shape_string(sv.shape()));
  const std::int64_t blocks = tv.rows() / n;
  Tensor y(tv.shape());
  for (std::int64_t k = 0; k < blocks; ++k) {
    y.matrix().middleRows(k * n, n).array() =
        tv.matrix().middleRows(k * n, n).array() * sv.matrix().array();
  }
  return t.tape().record(std::move(y), {t, s}, [t, s, n, blocks](Tape& tape, const Tensor& g) {
    if (t.requires_grad()) {
      auto gt = tape.grad(t).matrix();
      for (std::int64_t k = 0; k < blocks; ++k)
        gt.middleRows(k * n, n).array() +=
            g.matrix().middleRows(k * n, n).array() * s.value().matrix().array();
    }
    if (s.requires_grad()) {
      auto gs = tape.grad(s).matrix();
      for (std::int64_t k = 0; k < blocks; ++k)
        gs.array() += g.matrix().middleRows(k * n, n).array() *
                      t.value().matrix().middleRows(k * n, n).array();
    }
  });
}

Var linear(Var x, Var w) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  require(wv.shape().size() == 2 && xv.cols() == wv.dim(1), ErrorCode::kShape,
          "linear: input " + shape_string(xv.shape()) + " vs weight " + shape_string(wv.shape()));
  Tensor y({xv.rows(), wv.dim(0)});
  y.matrix().noalias() = xv.matrix() * wv.matrix().transpose();
  return x.tape().record(std::move(y), {x, w}, [x, w](Tape& tape, const Tensor& g) {
    if (x.requires_grad()) tape.grad(x).matrix().noalias() += g.matrix() * w.value().matrix();
    if (w.requires_grad())
      tape.grad(w).matrix().noalias() += g.matrix().transpose() * x.value().matrix();
  });
}

Var linear(Var x, Var w, Var b) { return add_row(linear(x, w), b); }

Var slice_cols(Var x, std::int64_t begin, std::int64_t end) {
  const Tensor& xv = x.value();
  require(0 <= begin && begin <= end && end <= xv.cols(), ErrorCode::kShape,
          "slice_cols out of range");
  Tensor y({xv.rows(), end - begin});
  y.matrix() = xv.matrix().middleCols(begin, end - begin);
  return x.tape().record(std::move(y), {x}, [x, begin, end](Tape& tape, const Tensor& g) {
    tape.grad(x).matrix().middleCols(begin, end - begin) += g.matrix();
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  require(!parts.empty(), ErrorCode::kShape, "concat_cols of nothing");
  const std::int64_t rows = parts.front().value().rows();
  std::int64_t cols = 0;
  for (const auto& p : parts) {
    require(p.value().rows() == rows, ErrorCode::kShape, "concat_cols: row count mismatch");
    cols += p.value().cols();
  }
  Tensor y({rows, cols});
  std::int64_t offset = 0;
  for (const auto& p : parts) {
    y.matrix().middleCols(offset, p.value().cols()) = p.value().matrix();
    offset += p.value().cols();
  }
  return parts.front().tape().record(std::move(y), parts, [parts](Tape& tape, const Tensor& g) {
    std::int64_t offset = 0;
    for (const auto& p : parts) {
      const auto c = p.value().cols();
      if (p.requires_grad()) tape.grad(p).matrix() += g.matrix().middleCols(offset, c);
      offset += c;
    }
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  require(!parts.empty(), ErrorCode::kShape, "concat_rows of nothing");
  const std::int64_t cols = parts.front().value().cols();
  std::int64_t rows = 0;
  for (const auto& p : parts) {
    require(p.value().cols() == cols, ErrorCode::kShape, "concat_rows: column count mismatch");
    rows += p.value().rows();
  }
  Tensor y({rows, cols});
  std::int64_t offset = 0;
  for (const auto& p : parts) {
    y.matrix().middleRows(offset, p.value().rows()) = p.value().matrix();
    offset += p.value().rows();
  }
  return parts.front().tape().record(std::move(y), parts, [parts](Tape& tape, const Tensor& g) {
    std::int64_t offset = 0;
    for (const auto& p : parts) {
      const auto r = p.value().rows();
      if (p.requires_grad()) tape.grad(p).matrix() += g.matrix().middleRows(offset, r);
      offset += r;
    }
  });
}

Var slice_rows(Var x, std::int64_t begin, std::int64_t end) {
  const Tensor& xv = x.value();
  require(0 <= begin && begin <= end && end <= xv.rows(), ErrorCode::kShape,
          "slice_rows out of range");
  Tensor y({end - begin, xv.cols()});
  y.matrix() = xv.matrix().middleRows(begin, end - begin);
  return x.tape().record(std::move(y), {x}, [x, begin, end](Tape& tape, const Tensor& g) {
    tape.grad(x).matrix().middleRows(begin, end - begin) += g.matrix();
  });
}

Var reshape(Var x, Shape shape) {
  Tensor y = x.value().reshaped(std::move(shape));
  return x.tape().record(std::move(y), {x}, [x](Tape& tape, const Tensor& g) {
    auto& gx = tape.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

Var sum(Var x) {
  const Tensor& xv = x.value();
  double total = 0.0;
  for (double v : xv.values()) total += v;
  return x.tape().record(Tensor::scalar(total), {x}, [x](Tape& tape, const Tensor& g) {
    tape.grad(x).matrix().array() += g[0];
  });
}

Var mean(Var x) {
  const auto n = static_cast<double>(x.value().size());
  require(n > 0, ErrorCode::kEmptyInput, "mean of empty tensor");
  return scale(sum(x), 1.0 / n);
}

Var row_sum(Var x) {
  const Tensor& xv = x.value();
  Tensor y({xv.rows(), 1});
  y.matrix() = xv.matrix().rowwise().sum();
  return x.tape().record(std::move(y), {x}, [x](Tape& tape, const Tensor& g) {
    auto gx = tape.grad(x).matrix();
    gx.colwise() += g.matrix().col(0);
  });
}

Var row_dot(Var a, Var b) { return row_sum(mul(a, b)); }

Var row_norm(Var x) {
  const Tensor& xv = x.value();
  Tensor y({xv.rows(), 1});
  y.matrix() = xv.matrix().rowwise().norm();
  return x.tape().record(std::move(y), {x}, [x](Tape& tape, const Tensor& g) {
    const Tensor& xv = x.value();
    auto gx = tape.grad(x).matrix();
    for (std::int64_t r = 0; r < xv.rows(); ++r) {
      const double norm = xv.matrix().row(r).norm();
      if (norm > 0) gx.row(r) += (g[r] / norm) * xv.matrix().row(r);
    }
  });
}

Var neus_weights(Var sdf, Var sharpness) {
  const Tensor& s = sdf.value();
  require(sharpness.value().size() == 1, ErrorCode::kShape, "neus_weights: scalar sharpness");
  const double h = sharpness.value()[0];
  require(h > 0, ErrorCode::kInvalidArgument, "sharpness must be positive");
  const std::int64_t rays = s.rows();
  const std::int64_t n = s.cols();
  Tensor w(s.shape());
  kernels::neus_weights_parallel(s.values(), h, rays, n, w.values());

  return sdf.tape().record(std::move(w), {sdf, sharpness}, [sdf, sharpness](Tape& tape,
                                                                            const Tensor& g) {
    const Tensor& s = sdf.value();
    const double h = sharpness.value()[0];
    const std::int64_t rays = s.rows();
    const std::int64_t n = s.cols();
    Tensor ds(s.shape());
    double dh = 0.0;
    kernels::neus_weights_backward(s.values(), h, rays, n, g.values(), ds.values(), dh);
    if (sdf.requires_grad()) tape.grad(sdf).matrix() += ds.matrix();
    if (sharpness.requires_grad()) tape.grad(sharpness)[0] += dh;
  });
}

Var composite(Var weights, Var x) {
  const Tensor& w = weights.value();
  const Tensor& xv = x.value();
  const std::int64_t rays = w.rows();
  const std::int64_t n = w.cols();
  require(xv.rows() == rays * n, ErrorCode::kShape,
          "composite: " + shape_string(w.shape()) + " weights vs " + shape_string(xv.shape()));
  const std::int64_t k = xv.cols();
  Tensor y({rays, k});
  for (std::int64_t r = 0; r < rays; ++r) {
    y.matrix().row(r) = w.matrix().row(r) * xv.matrix().middleRows(r * n, n);
  }
  return weights.tape().record(std::move(y), {weights, x}, [weights, x](Tape& tape,
                                                                        const Tensor& g) {
    const Tensor& w = weights.value();
    const Tensor& xv = x.value();
    const std::int64_t rays = w.rows();
    const std::int64_t n = w.cols();
    if (weights.requires_grad()) {
      auto gw = tape.grad(weights).matrix();
      for (std::int64_t r = 0; r < rays; ++r)
        gw.row(r).noalias() += g.matrix().row(r) * xv.matrix().middleRows(r * n, n).transpose();
    }
    if (x.requires_grad()) {
      auto gx = tape.grad(x).matrix();
      for (std::int64_t r = 0; r < rays; ++r)
        gx.middleRows(r * n, n).noalias() += w.matrix().row(r).transpose() * g.matrix().row(r);
    }
  });
}

Var neighbor_mean(Var x, const std::vector<std::vector<int>>& neighbours) {
  const Tensor& xv = x.value();
  const auto rows = static_cast<std::int64_t>(neighbours.size());
  Tensor y({rows, xv.cols()});
  for (std::int64_t r = 0; r < rows; ++r) {
    const auto& nb = neighbours[r];
    require(!nb.empty(), ErrorCode::kEmptyInput, "neighbor_mean: empty neighbourhood");
    for (int j : nb) {
      require(j >= 0 && j < xv.rows(), ErrorCode::kShape, "neighbor_mean: index out of range");
      y.matrix().row(r) += xv.matrix().row(j);
    }
    y.matrix().row(r) /= static_cast<double>(nb.size());
  }
  return x.tape().record(std::move(y), {x}, [x, neighbours](Tape& tape, const Tensor& g) {
    auto gx = tape.grad(x).matrix();
    for (std::size_t r = 0; r < neighbours.size(); ++r) {
      const double inv = 1.0 / static_cast<double>(neighbours[r].size());
      for (int j : neighbours[r]) gx.row(j) += inv * g.matrix().row(static_cast<int>(r));
    }
  });
}

Var bilinear_gather(Var map, const std::vector<std::array<double, 2>>& coords) {
  const Tensor& m = map.value();
  require(m.shape().size() == 3, ErrorCode::kShape, "bilinear_gather expects [C, H, W]");
  const auto c = m.dim(0);
  const auto h = m.dim(1);
  const auto w = m.dim(2);
  const auto n = static_cast<std::int64_t>(coords.size());
  Tensor y({n, c});
  kernels::bilinear_gather_parallel(m.values(), c, h, w, coords, y.values());
  return map.tape().record(std::move(y), {map}, [map, coords](Tape& tape, const Tensor& g) {
    const Tensor& m = map.value();
    kernels::bilinear_scatter(g.values(), m.dim(0), m.dim(1), m.dim(2), coords,
                              tape.grad(map).values());
  });
}

Var positional_encode(Var v, int num_freq) {
  require(num_freq >= 0, ErrorCode::kInvalidArgument, "num_freq must be non-negative");
  const Tensor& x = v.value();
  require(x.cols() == 3, ErrorCode::kShape, "positional_encode expects [N, 3]");
  const std::int64_t n = x.rows();
  const std::int64_t width = 3 + 6 * num_freq;
  Tensor y({n, width});
  for (std::int64_t r = 0; r < n; ++r) {
    for (int d = 0; d < 3; ++d) y.at(r, d) = x.at(r, d);
    for (int k = 0; k < num_freq; ++k) {
      const double f = std::numbers::pi * std::ldexp(1.0, k);
      for (int d = 0; d < 3; ++d) {
        y.at(r, 3 + 6 * k + d) = std::sin(f * x.at(r, d));
        y.at(r, 3 + 6 * k + 3 + d) = std::cos(f * x.at(r, d));
      }
    }
  }
  return v.tape().record(std::move(y), {v}, [v, num_freq](Tape& tape, const Tensor& g) {
    const Tensor& x = v.value();
    Tensor& gx = tape.grad(v);
    for (std::int64_t r = 0; r < x.rows(); ++r) {
      for (int d = 0; d < 3; ++d) {
        double acc = g.at(r, d);
        for (int k = 0; k < num_freq; ++k) {
          const double f = std::numbers::pi * std::ldexp(1.0, k);
          acc += g.at(r, 3 + 6 * k + d) * f * std::cos(f * x.at(r, d));
          acc -= g.at(r, 3 + 6 * k + 3 + d) * f * std::sin(f * x.at(r, d));
        }
        gx.at(r, d) += acc;
      }
    }
  });
}

Var conv2d(Var x, Var w, Var b, int stride, int pad) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  require(xv.shape().size() == 3 && wv.shape().size() == 4, ErrorCode::kShape,
          "conv2d expects x[C,H,W], w[O,C,k,k]");
  const auto cin = xv.dim(0);
  const auto hin = xv.dim(1);
  const auto win = xv.dim(2);
  const auto cout = wv.dim(0);
  const auto k = wv.dim(2);
  require(wv.dim(1) == cin && wv.dim(3) == k, ErrorCode::kShape,
          "conv2d: weight " + shape_string(wv.shape()) + " vs input " + shape_string(xv.shape()));
  require(static_cast<std::int64_t>(b.value().size()) == cout, ErrorCode::kShape,
          "conv2d: bias size mismatch");
  require(stride >= 1 && pad >= 0, ErrorCode::kInvalidArgument, "conv2d: bad stride/pad");
  const auto hout = (hin + 2 * pad - k) / stride + 1;
  const auto wout = (win + 2 * pad - k) / stride + 1;
  require(hout > 0 && wout > 0, ErrorCode::kShape, "conv2d: empty output");

  kernels::ConvGeometry geo{cin, hin, win, k, stride, pad, hout, wout};
  auto cols = std::make_shared<tensor::RowMatrix>(cin * k * k, hout * wout);
  kernels::im2col_parallel(xv.values(), geo, *cols);

  Tensor y({cout, hout, wout});
  tensor::MatrixMap ym(y.values().data(), cout, hout * wout);
  tensor::ConstMatrixMap wm(wv.values().data(), cout, cin * k * k);
  ym.noalias() = wm * (*cols);
  Eigen::Map<const Eigen::VectorXd> bias(b.value().values().data(), cout);
  ym.colwise() += bias;

  return x.tape().record(std::move(y), {x, w, b}, [x, w, b, geo, cols](Tape& tape,
                                                                      const Tensor& g) {
    const auto cout = w.value().dim(0);
    const auto span = geo.hout * geo.wout;
    tensor::ConstMatrixMap gm(g.values().data(), cout, span);
    if (w.requires_grad()) {
      tensor::MatrixMap gw(tape.grad(w).values().data(), cout, geo.cin * geo.k * geo.k);
      gw.noalias() += gm * cols->transpose();
    }
    if (b.requires_grad()) {
      Eigen::Map<Eigen::VectorXd> gb(tape.grad(b).values().data(), cout);
      gb += gm.rowwise().sum();
    }
    if (x.requires_grad()) {
      tensor::ConstMatrixMap wm(w.value().values().data(), cout, geo.cin * geo.k * geo.k);
      tensor::RowMatrix dcols = wm.transpose() * gm;
      kernels::col2im(dcols, geo, tape.grad(x).values());
    }
  });
}

Var upsample_nearest2x(Var x) {
  const Tensor& xv = x.value();
  require(xv.shape().size() == 3, ErrorCode::kShape, "upsample expects [C, H, W]");
  const auto c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  Tensor y({c, 2 * h, 2 * w});
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t i = 0; i < 2 * h; ++i)
      for (std::int64_t j = 0; j < 2 * w; ++j)
        y[(ch * 2 * h + i) * 2 * w + j] = xv[(ch * h + i / 2) * w + j / 2];
  return x.tape().record(std::move(y), {x}, [x](Tape& tape, const Tensor& g) {
    const Tensor& xv = x.value();
    const auto c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
    Tensor& gx = tape.grad(x);
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t i = 0; i < 2 * h; ++i)
        for (std::int64_t j = 0; j < 2 * w; ++j)
          gx[(ch * h + i / 2) * w + j / 2] += g[(ch * 2 * h + i) * 2 * w + j];
  });
}

Var avg_pool2x(Var x) {
  const Tensor& xv = x.value();
  require(xv.shape().size() == 3 && xv.dim(1) % 2 == 0 && xv.dim(2) % 2 == 0, ErrorCode::kShape,
          "avg_pool2x expects [C, H, W] with even H, W");
  const auto c = xv.dim(0), h = xv.dim(1) / 2, w = xv.dim(2) / 2;
  Tensor y({c, h, w});
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t i = 0; i < h; ++i)
      for (std::int64_t j = 0; j < w; ++j) {
        const auto base = (ch * 2 * h + 2 * i) * 2 * w + 2 * j;
        y[(ch * h + i) * w + j] =
            0.25 * (xv[base] + xv[base + 1] + xv[base + 2 * w] + xv[base + 2 * w + 1]);
      }
  return x.tape().record(std::move(y), {x}, [x](Tape& tape, const Tensor& g) {
    const Tensor& xv = x.value();
    const auto c = xv.dim(0), h = xv.dim(1) / 2, w = xv.dim(2) / 2;
    Tensor& gx = tape.grad(x);
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t i = 0; i < h; ++i)
        for (std::int64_t j = 0; j < w; ++j) {
          const double v = 0.25 * g[(ch * h + i) * w + j];
          const auto base = (ch * 2 * h + 2 * i) * 2 * w + 2 * j;
          gx[base] += v;
          gx[base + 1] += v;
          gx[base + 2 * w] += v;
          gx[base + 2 * w + 1] += v;
        }
  });
}

Var global_avg_pool(Var x) {
  const Tensor& xv = x.value();
  require(xv.shape().size() == 3, ErrorCode::kShape, "global_avg_pool expects [C, H, W]");
  const auto c = xv.dim(0);
  const auto hw = xv.dim(1) * xv.dim(2);
  Tensor y({c});
  tensor::ConstMatrixMap xm(xv.values().data(), c, hw);
  Eigen::Map<Eigen::VectorXd>(y.values().data(), c) = xm.rowwise().mean();
  return x.tape().record(std::move(y), {x}, [x](Tape& tape, const Tensor& g) {
    const Tensor& xv = x.value();
    const auto c = xv.dim(0);
    const auto hw = xv.dim(1) * xv.dim(2);
    tensor::MatrixMap gx(tape.grad(x).values().data(), c, hw);
    Eigen::Map<const Eigen::VectorXd> gv(g.values().data(), c);
    gx.colwise() += gv / static_cast<double>(hw);
  });
}

Var add_channel_vector(Var x, Var gvec) {
  const Tensor& xv = x.value();
  require(xv.shape().size() == 3 && static_cast<std::int64_t>(gvec.value().size()) == xv.dim(0),
          ErrorCode::kShape, "add_channel_vector: channel mismatch");
  const auto c = xv.dim(0);
  const auto hw = xv.dim(1) * xv.dim(2);
  Tensor y(xv.shape());
  tensor::MatrixMap ym(y.values().data(), c, hw);
  ym = tensor::ConstMatrixMap(xv.values().data(), c, hw);
  ym.colwise() += Eigen::Map<const Eigen::VectorXd>(gvec.value().values().data(), c);
  return x.tape().record(std::move(y), {x, gvec}, [x, gvec](Tape& tape, const Tensor& g) {
    const auto c = x.value().dim(0);
    const auto hw = x.value().dim(1) * x.value().dim(2);
    tensor::ConstMatrixMap gm(g.values().data(), c, hw);
    if (x.requires_grad()) tensor::MatrixMap(tape.grad(x).values().data(), c, hw) += gm;
    if (gvec.requires_grad())
      Eigen::Map<Eigen::VectorXd>(tape.grad(gvec).values().data(), c) += gm.rowwise().sum();
  });
}

Var concat_channels(const std::vector<Var>& parts) {
  require(!parts.empty(), ErrorCode::kShape, "concat_channels of nothing");
  const auto& first = parts.front().value();
  require(first.shape().size() == 3, ErrorCode::kShape, "concat_channels expects [C, H, W]");
  const auto h = first.dim(1), w = first.dim(2);
  std::int64_t c = 0;
  for (const auto& p : parts) {
    require(p.value().shape().size() == 3 && p.value().dim(1) == h && p.value().dim(2) == w,
            ErrorCode::kShape, "concat_channels: spatial size mismatch");
    c += p.value().dim(0);
  }
  Tensor y({c, h, w});
  std::size_t offset = 0;
  for (const auto& p : parts) {
    std::copy(p.value().values().begin(), p.value().values().end(),
              y.values().begin() + static_cast<std::ptrdiff_t>(offset));
    offset += p.value().size();
  }
  return parts.front().tape().record(std::move(y), parts, [parts](Tape& tape, const Tensor& g) {
    std::size_t offset = 0;
    for (const auto& p : parts) {
      const auto n = p.value().size();
      if (p.requires_grad()) {
        auto& gp = tape.grad(p);
        for (std::size_t i = 0; i < n; ++i) gp[i] += g[offset + i];
      }
      offset += n;
    }
  });
}

}  // namespace occlumesh::ops
