#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "occlumesh/tensor.hpp"

// Data-parallel inner loops. Every `_parallel` kernel has a `_serial`
// reference twin with the same arithmetic per output element, so the two
// agree bit-for-bit; tests compare them and bench/ times them.
namespace occlumesh::kernels {

using Point3 = std::array<double, 3>;

// Runtime threading policy. Deterministic mode pins one thread.
void configure_threads(int threads);
int active_threads();
bool deterministic_mode_from_env();

// --- volume rendering weights -------------------------------------------

inline constexpr double kAlphaEpsilon = 1e-12;

// alpha = max((Phi(h s) - Phi(h s_next)) / max(Phi(h s), eps), 0)
double neus_alpha(double s, double s_next, double h);

void neus_weights_serial(std::span<const double> sdf, double h, std::int64_t rays,
                         std::int64_t samples, std::span<double> weights);
void neus_weights_parallel(std::span<const double> sdf, double h, std::int64_t rays,
                           std::int64_t samples, std::span<double> weights);
void neus_weights_backward(std::span<const double> sdf, double h, std::int64_t rays,
                           std::int64_t samples, std::span<const double> grad_w,
                           std::span<double> grad_sdf, double& grad_h);

// --- feature fetch --------------------------------------------------------

void bilinear_gather_serial(std::span<const double> map, std::int64_t channels,
                            std::int64_t height, std::int64_t width,
                            const std::vector<std::array<double, 2>>& coords,
                            std::span<double> out);
void bilinear_gather_parallel(std::span<const double> map, std::int64_t channels,
                              std::int64_t height, std::int64_t width,
                              const std::vector<std::array<double, 2>>& coords,
                              std::span<double> out);
void bilinear_scatter(std::span<const double> grad_out, std::int64_t channels,
                      std::int64_t height, std::int64_t width,
                      const std::vector<std::array<double, 2>>& coords,
                      std::span<double> grad_map);

// --- convolution lowering -------------------------------------------------

struct ConvGeometry {
  std::int64_t cin, hin, win, k, stride, pad, hout, wout;
};

void im2col_serial(std::span<const double> x, const ConvGeometry& geo, tensor::RowMatrix& cols);
void im2col_parallel(std::span<const double> x, const ConvGeometry& geo, tensor::RowMatrix& cols);
void col2im(const tensor::RowMatrix& cols, const ConvGeometry& geo, std::span<double> x_grad);

// --- nearest neighbours ---------------------------------------------------

// Squared distance from every query to its nearest reference point.
std::vector<double> nearest_sq_dist_serial(const std::vector<Point3>& queries,
                                           const std::vector<Point3>& refs);
// Uniform-grid search; returns exactly the serial values.
std::vector<double> nearest_sq_dist_parallel(const std::vector<Point3>& queries,
                                             const std::vector<Point3>& refs);

// --- SSIM -----------------------------------------------------------------

// Per-pixel SSIM of single-channel images (row-major, values in [0,1]) with an
// 11x11 Gaussian window (sigma 1.5) truncated and renormalised at borders.
std::vector<double> ssim_map_serial(std::span<const double> a, std::span<const double> b,
                                    int width, int height);
std::vector<double> ssim_map_parallel(std::span<const double> a, std::span<const double> b,
                                      int width, int height);

}  // namespace occlumesh::kernels
