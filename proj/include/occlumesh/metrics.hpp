#pragma once

#include <functional>
#include <random>
#include <vector>

#include "json.hpp"
#include "occlumesh/image.hpp"
#include "occlumesh/kernels.hpp"
#include "occlumesh/mesh.hpp"

namespace occlumesh::metrics {

using kernels::Point3;

inline constexpr int kDefaultMcResolution = 128;
inline constexpr int kDefaultSurfacePoints = 30000;
inline constexpr double kPsnrCap = 100.0;

struct Bounds {
  Vector3d lo = Vector3d::Constant(-1);
  Vector3d hi = Vector3d::Constant(1);
};

// Evaluates the SDF at a batch of points.
using BatchSdf = std::function<std::vector<double>(const std::vector<Vector3d>&)>;

// Marching cubes at iso-level 0 over `resolution` grid points per axis.
// Vertices on shared edges are welded. No crossing gives an empty mesh.
Mesh extract_mesh(const BatchSdf& sdf, const Bounds& bounds, int resolution);
double grid_cell_size(const Bounds& bounds, int resolution);

// Area-weighted uniform samples.
std::vector<Point3> sample_surface(const Mesh& mesh, int n, std::mt19937_64& rng);

struct ChamferResult {
  double chamfer = 0;
  std::vector<double> fscores;  // one per threshold
  std::vector<double> precision;
  std::vector<double> recall;
};

// Summed mean squared nearest distances; F-score is the harmonic mean of
// precision (A within tau of B) and recall (B within tau of A).
ChamferResult chamfer_and_fscore(const std::vector<Point3>& a, const std::vector<Point3>& b,
                                 const std::vector<double>& thresholds);
// O(n^2) reference.
ChamferResult chamfer_and_fscore_brute(const std::vector<Point3>& a, const std::vector<Point3>& b,
                                       const std::vector<double>& thresholds);

// Masked PSNR over all channels, capped at kPsnrCap.
double psnr(const Image& a, const Image& b, const Mask& mask);
// Mean per-channel SSIM over pixels inside the mask.
double ssim(const Image& a, const Image& b, const Mask& mask);

struct MetricReport {
  double chamfer = 0;  // mm^2
  double f5 = 0;
  double f10 = 0;
  double psnr = 0;
  double ssim = 0;
  bool has_geometry = false;
  bool has_image = false;

  nlohmann::json to_json() const;
};

// Scales metres to millimetres and scores at 5 mm and 10 mm.
MetricReport geometry_report(const std::vector<Point3>& predicted_m,
                             const std::vector<Point3>& reference_m);

}  // namespace occlumesh::metrics
