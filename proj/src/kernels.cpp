#include "occlumesh/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <string_view>

#include <omp.h>

namespace occlumesh::kernels {

namespace {

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void neus_ray_forward(const double* s, double h, std::int64_t n, double* w) {
  double transmittance = 1.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double alpha = (i + 1 < n) ? neus_alpha(s[i], s[i + 1], h) : 0.0;
    w[i] = transmittance * alpha;
    transmittance *= 1.0 - alpha;
  }
}

struct ClampedTexel {
  std::int64_t x0, x1, y0, y1;
  double fx, fy;
};

ClampedTexel clamp_texel(double x, double y, std::int64_t width, std::int64_t height) {
  ClampedTexel t{};
  const double xc = std::clamp(x, 0.0, static_cast<double>(width - 1));
  const double yc = std::clamp(y, 0.0, static_cast<double>(height - 1));
  t.x0 = std::min<std::int64_t>(static_cast<std::int64_t>(std::floor(xc)),
                                std::max<std::int64_t>(width - 2, 0));
  t.y0 = std::min<std::int64_t>(static_cast<std::int64_t>(std::floor(yc)),
                                std::max<std::int64_t>(height - 2, 0));
  t.x1 = std::min(t.x0 + 1, width - 1);
  t.y1 = std::min(t.y0 + 1, height - 1);
  t.fx = xc - static_cast<double>(t.x0);
  t.fy = yc - static_cast<double>(t.y0);
  return t;
}

void gather_one(const double* map, std::int64_t channels, std::int64_t height,
                std::int64_t width, const std::array<double, 2>& uv, double* out) {
  const auto t = clamp_texel(uv[0], uv[1], width, height);
  const double w00 = (1 - t.fx) * (1 - t.fy);
  const double w01 = t.fx * (1 - t.fy);
  const double w10 = (1 - t.fx) * t.fy;
  const double w11 = t.fx * t.fy;
  const std::int64_t plane = height * width;
  for (std::int64_t c = 0; c < channels; ++c) {
    const double* m = map + c * plane;
    out[c] = w00 * m[t.y0 * width + t.x0] + w01 * m[t.y0 * width + t.x1] +
             w10 * m[t.y1 * width + t.x0] + w11 * m[t.y1 * width + t.x1];
  }
}

void im2col_row(std::span<const double> x, const ConvGeometry& g, std::int64_t row,
                tensor::RowMatrix& cols) {
  const std::int64_t c = row / (g.k * g.k);
  const std::int64_t ki = (row / g.k) % g.k;
  const std::int64_t kj = row % g.k;
  double* dst = cols.row(row).data();
  for (std::int64_t oy = 0; oy < g.hout; ++oy) {
    const std::int64_t iy = oy * g.stride - g.pad + ki;
    for (std::int64_t ox = 0; ox < g.wout; ++ox) {
      const std::int64_t ix = ox * g.stride - g.pad + kj;
      dst[oy * g.wout + ox] = (iy >= 0 && iy < g.hin && ix >= 0 && ix < g.win)
                                  ? x[(c * g.hin + iy) * g.win + ix]
                                  : 0.0;
    }
  }
}

struct PointGrid {
  Point3 origin{};
  double cell = 1.0;
  std::array<std::int64_t, 3> dims{1, 1, 1};
  std::vector<std::int64_t> start;  // CSR offsets per cell
  std::vector<std::int32_t> items;

  std::int64_t index(std::int64_t i, std::int64_t j, std::int64_t k) const {
    return (i * dims[1] + j) * dims[2] + k;
  }
  std::int64_t coord(double v, int axis) const {
    const auto c = static_cast<std::int64_t>(std::floor((v - origin[axis]) / cell));
    return std::clamp<std::int64_t>(c, 0, dims[axis] - 1);
  }
};

PointGrid build_grid(const std::vector<Point3>& pts) {
  PointGrid grid;
  Point3 lo{std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity(),
            std::numeric_limits<double>::infinity()};
  Point3 hi{-lo[0], -lo[1], -lo[2]};
  for (const auto& p : pts)
    for (int a = 0; a < 3; ++a) {
      lo[a] = std::min(lo[a], p[a]);
      hi[a] = std::max(hi[a], p[a]);
    }
  double extent = 0.0;
  for (int a = 0; a < 3; ++a) extent = std::max(extent, hi[a] - lo[a]);
  if (extent <= 0) extent = 1.0;
  // Roughly two points per cell on a surface-like set.
  const double target_cells = std::max(1.0, static_cast<double>(pts.size()) / 2.0);
  grid.cell = extent / std::max(1.0, std::sqrt(target_cells));
  for (int a = 0; a < 3; ++a) {
    grid.origin[a] = lo[a];
    grid.dims[a] = std::max<std::int64_t>(
        1, static_cast<std::int64_t>(std::floor((hi[a] - lo[a]) / grid.cell)) + 1);
  }
  const auto ncell = grid.dims[0] * grid.dims[1] * grid.dims[2];
  std::vector<std::int64_t> counts(static_cast<std::size_t>(ncell) + 1, 0);
  std::vector<std::int64_t> cell_of(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const auto c = grid.index(grid.coord(pts[i][0], 0), grid.coord(pts[i][1], 1),
                              grid.coord(pts[i][2], 2));
    cell_of[i] = c;
    ++counts[c + 1];
  }
  for (std::int64_t c = 0; c < ncell; ++c) counts[c + 1] += counts[c];
  grid.start = counts;
  grid.items.resize(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i)
    grid.items[counts[cell_of[i]]++] = static_cast<std::int32_t>(i);
  return grid;
}

double sq_dist(const Point3& a, const Point3& b) {
  const double dx = a[0] - b[0];
  const double dy = a[1] - b[1];
  const double dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

double grid_nearest(const PointGrid& grid, const std::vector<Point3>& refs, const Point3& q) {
  const std::array<std::int64_t, 3> c{grid.coord(q[0], 0), grid.coord(q[1], 1),
                                      grid.coord(q[2], 2)};
  double best = std::numeric_limits<double>::infinity();
  const std::int64_t max_ring =
      std::max({grid.dims[0], grid.dims[1], grid.dims[2]});
  for (std::int64_t ring = 0; ring <= max_ring; ++ring) {
    std::array<std::int64_t, 3> lo{}, hi{};
    for (int a = 0; a < 3; ++a) {
      lo[a] = std::max<std::int64_t>(c[a] - ring, 0);
      hi[a] = std::min<std::int64_t>(c[a] + ring, grid.dims[a] - 1);
    }
    for (std::int64_t i = lo[0]; i <= hi[0]; ++i)
      for (std::int64_t j = lo[1]; j <= hi[1]; ++j)
        for (std::int64_t k = lo[2]; k <= hi[2]; ++k) {
          const bool on_shell = std::abs(i - c[0]) == ring || std::abs(j - c[1]) == ring ||
                                std::abs(k - c[2]) == ring;
          if (!on_shell) continue;
          const auto cell = grid.index(i, j, k);
          for (auto it = grid.start[cell]; it < grid.start[cell + 1]; ++it)
            best = std::min(best, sq_dist(q, refs[grid.items[it]]));
        }
    // Distance from q to any cell outside the visited block.
    double gap = std::numeric_limits<double>::infinity();
    for (int a = 0; a < 3; ++a) {
      if (c[a] - ring > 0) {
        const double face = grid.origin[a] + static_cast<double>(c[a] - ring) * grid.cell;
        gap = std::min(gap, q[a] - face);
      }
      if (c[a] + ring < grid.dims[a] - 1) {
        const double face = grid.origin[a] + static_cast<double>(c[a] + ring + 1) * grid.cell;
        gap = std::min(gap, face - q[a]);
      }
    }
    if (!std::isfinite(gap)) break;
    gap = std::max(0.0, gap - 1e-9 * grid.cell);
    if (best <= gap * gap) break;
  }
  return best;
}

constexpr int kSsimRadius = 5;

std::array<double, 2 * kSsimRadius + 1> ssim_kernel() {
  std::array<double, 2 * kSsimRadius + 1> k{};
  for (int i = -kSsimRadius; i <= kSsimRadius; ++i)
    k[i + kSsimRadius] = std::exp(-(i * i) / (2.0 * 1.5 * 1.5));
  return k;
}

double ssim_at(std::span<const double> a, std::span<const double> b, int width, int height,
               int x, int y, const std::array<double, 2 * kSsimRadius + 1>& kern) {
  constexpr double c1 = 0.01 * 0.01;
  constexpr double c2 = 0.03 * 0.03;
  double wsum = 0, ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
  for (int dy = -kSsimRadius; dy <= kSsimRadius; ++dy) {
    const int yy = y + dy;
    if (yy < 0 || yy >= height) continue;
    for (int dx = -kSsimRadius; dx <= kSsimRadius; ++dx) {
      const int xx = x + dx;
      if (xx < 0 || xx >= width) continue;
      const double w = kern[dy + kSsimRadius] * kern[dx + kSsimRadius];
      const double va = a[yy * width + xx];
      const double vb = b[yy * width + xx];
      wsum += w;
      ma += w * va;
      mb += w * vb;
      saa += w * va * va;
      sbb += w * vb * vb;
      sab += w * va * vb;
    }
  }
  ma /= wsum;
  mb /= wsum;
  const double var_a = std::max(saa / wsum - ma * ma, 0.0);
  const double var_b = std::max(sbb / wsum - mb * mb, 0.0);
  const double cov = sab / wsum - ma * mb;
  return ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
}

}  // namespace

void configure_threads(int threads) {
  if (threads <= 0) threads = omp_get_num_procs();
  omp_set_num_threads(threads);
  Eigen::setNbThreads(threads);
}

int active_threads() { return omp_get_max_threads(); }

bool deterministic_mode_from_env() {
  const char* v = std::getenv("OCCLUMESH_DETERMINISTIC");
  return v != nullptr && std::string_view(v) == "1";
}

double neus_alpha(double s, double s_next, double h) {
  const double prev = sigmoid(h * s);
  const double next = sigmoid(h * s_next);
  const double alpha = (prev - next) / std::max(prev, kAlphaEpsilon);
  return std::clamp(alpha, 0.0, 1.0);
}

void neus_weights_serial(std::span<const double> sdf, double h, std::int64_t rays,
                         std::int64_t samples, std::span<double> weights) {
  for (std::int64_t r = 0; r < rays; ++r)
    neus_ray_forward(sdf.data() + r * samples, h, samples, weights.data() + r * samples);
}

void neus_weights_parallel(std::span<const double> sdf, double h, std::int64_t rays,
                           std::int64_t samples, std::span<double> weights) {
#pragma omp parallel for schedule(static)
  for (std::int64_t r = 0; r < rays; ++r)
    neus_ray_forward(sdf.data() + r * samples, h, samples, weights.data() + r * samples);
}

void neus_weights_backward(std::span<const double> sdf, double h, std::int64_t rays,
                           std::int64_t samples, std::span<const double> grad_w,
                           std::span<double> grad_sdf, double& grad_h) {
  std::vector<double> dh_per_ray(static_cast<std::size_t>(rays), 0.0);
#pragma omp parallel
  {
    std::vector<double> alpha(samples), trans(samples), suffix(samples);
#pragma omp for schedule(static)
    for (std::int64_t r = 0; r < rays; ++r) {
      const double* s = sdf.data() + r * samples;
      const double* g = grad_w.data() + r * samples;
      double* ds = grad_sdf.data() + r * samples;
      double t = 1.0;
      for (std::int64_t i = 0; i < samples; ++i) {
        alpha[i] = (i + 1 < samples) ? neus_alpha(s[i], s[i + 1], h) : 0.0;
        trans[i] = t;
        t *= 1.0 - alpha[i];
      }
      // suffix[j] = sum_{i>j} g_i alpha_i prod_{j<k<i} (1 - alpha_k)
      suffix[samples - 1] = 0.0;
      for (std::int64_t j = samples - 2; j >= 0; --j)
        suffix[j] = g[j + 1] * alpha[j + 1] + (1.0 - alpha[j + 1]) * suffix[j + 1];
      double dh = 0.0;
      for (std::int64_t i = 0; i + 1 < samples; ++i) {
        const double dalpha = trans[i] * (g[i] - suffix[i]);
        const double xa = h * s[i];
        const double xb = h * s[i + 1];
        const double pa = sigmoid(xa);
        const double pb = sigmoid(xb);
        if (!(pa - pb > 0)) continue;
        double da_dpa, da_dpb;
        if (pa >= kAlphaEpsilon) {
          da_dpa = pb / (pa * pa);
          da_dpb = -1.0 / pa;
        } else {
          da_dpa = 1.0 / kAlphaEpsilon;
          da_dpb = -1.0 / kAlphaEpsilon;
        }
        const double d_xa = dalpha * da_dpa * pa * (1.0 - pa);
        const double d_xb = dalpha * da_dpb * pb * (1.0 - pb);
        ds[i] += d_xa * h;
        ds[i + 1] += d_xb * h;
        dh += d_xa * s[i] + d_xb * s[i + 1];
      }
      dh_per_ray[r] = dh;
    }
  }
  for (double v : dh_per_ray) grad_h += v;
}

void bilinear_gather_serial(std::span<const double> map, std::int64_t channels,
                            std::int64_t height, std::int64_t width,
                            const std::vector<std::array<double, 2>>& coords,
                            std::span<double> out) {
  for (std::size_t n = 0; n < coords.size(); ++n)
    gather_one(map.data(), channels, height, width, coords[n], out.data() + n * channels);
}

void bilinear_gather_parallel(std::span<const double> map, std::int64_t channels,
                              std::int64_t height, std::int64_t width,
                              const std::vector<std::array<double, 2>>& coords,
                              std::span<double> out) {
  const auto count = static_cast<std::int64_t>(coords.size());
#pragma omp parallel for schedule(static)
  for (std::int64_t n = 0; n < count; ++n)
    gather_one(map.data(), channels, height, width, coords[n], out.data() + n * channels);
}

void bilinear_scatter(std::span<const double> grad_out, std::int64_t channels,
                      std::int64_t height, std::int64_t width,
                      const std::vector<std::array<double, 2>>& coords,
                      std::span<double> grad_map) {
  // Serial on purpose: scattered writes collide across samples.
  const std::int64_t plane = height * width;
  for (std::size_t n = 0; n < coords.size(); ++n) {
    const auto t = clamp_texel(coords[n][0], coords[n][1], width, height);
    const double w00 = (1 - t.fx) * (1 - t.fy);
    const double w01 = t.fx * (1 - t.fy);
    const double w10 = (1 - t.fx) * t.fy;
    const double w11 = t.fx * t.fy;
    const double* g = grad_out.data() + n * channels;
    for (std::int64_t c = 0; c < channels; ++c) {
      double* m = grad_map.data() + c * plane;
      m[t.y0 * width + t.x0] += w00 * g[c];
      m[t.y0 * width + t.x1] += w01 * g[c];
      m[t.y1 * width + t.x0] += w10 * g[c];
      m[t.y1 * width + t.x1] += w11 * g[c];
    }
  }
}

void im2col_serial(std::span<const double> x, const ConvGeometry& geo, tensor::RowMatrix& cols) {
  const auto rows = geo.cin * geo.k * geo.k;
  cols.resize(rows, geo.hout * geo.wout);
  for (std::int64_t row = 0; row < rows; ++row) im2col_row(x, geo, row, cols);
}

void im2col_parallel(std::span<const double> x, const ConvGeometry& geo,
                     tensor::RowMatrix& cols) {
  const auto rows = geo.cin * geo.k * geo.k;
  cols.resize(rows, geo.hout * geo.wout);
#pragma omp parallel for schedule(static)
  for (std::int64_t row = 0; row < rows; ++row) im2col_row(x, geo, row, cols);
}

void col2im(const tensor::RowMatrix& cols, const ConvGeometry& g, std::span<double> x_grad) {
  // Rows of one input channel only touch that channel, so channels run in parallel.
#pragma omp parallel for schedule(static)
  for (std::int64_t c = 0; c < g.cin; ++c) {
    for (std::int64_t ki = 0; ki < g.k; ++ki)
      for (std::int64_t kj = 0; kj < g.k; ++kj) {
        const double* src = cols.row((c * g.k + ki) * g.k + kj).data();
        for (std::int64_t oy = 0; oy < g.hout; ++oy) {
          const std::int64_t iy = oy * g.stride - g.pad + ki;
          if (iy < 0 || iy >= g.hin) continue;
          for (std::int64_t ox = 0; ox < g.wout; ++ox) {
            const std::int64_t ix = ox * g.stride - g.pad + kj;
            if (ix < 0 || ix >= g.win) continue;
            x_grad[(c * g.hin + iy) * g.win + ix] += src[oy * g.wout + ox];
          }
        }
      }
  }
}

std::vector<double> nearest_sq_dist_serial(const std::vector<Point3>& queries,
                                           const std::vector<Point3>& refs) {
  std::vector<double> out(queries.size(), std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < queries.size(); ++i)
    for (const auto& r : refs) out[i] = std::min(out[i], sq_dist(queries[i], r));
  return out;
}

std::vector<double> nearest_sq_dist_parallel(const std::vector<Point3>& queries,
                                             const std::vector<Point3>& refs) {
  std::vector<double> out(queries.size(), std::numeric_limits<double>::infinity());
  if (refs.empty()) return out;
  const PointGrid grid = build_grid(refs);
  const auto count = static_cast<std::int64_t>(queries.size());
#pragma omp parallel for schedule(dynamic, 256)
  for (std::int64_t i = 0; i < count; ++i) out[i] = grid_nearest(grid, refs, queries[i]);
  return out;
}

std::vector<double> ssim_map_serial(std::span<const double> a, std::span<const double> b,
                                    int width, int height) {
  const auto kern = ssim_kernel();
  std::vector<double> out(static_cast<std::size_t>(width) * height);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) out[y * width + x] = ssim_at(a, b, width, height, x, y, kern);
  return out;
}

std::vector<double> ssim_map_parallel(std::span<const double> a, std::span<const double> b,
                                      int width, int height) {
  const auto kern = ssim_kernel();
  std::vector<double> out(static_cast<std::size_t>(width) * height);
#pragma omp parallel for schedule(static)
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) out[y * width + x] = ssim_at(a, b, width, height, x, y, kern);
  return out;
}

}  // namespace occlumesh::kernels
