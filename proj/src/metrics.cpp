#include "occlumesh/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

#include "mc_tables.hpp"

namespace occlumesh::metrics {

double grid_cell_size(const Bounds& bounds, int resolution) {
  return (bounds.hi - bounds.lo).maxCoeff() / (resolution - 1);
}

Mesh extract_mesh(const BatchSdf& sdf, const Bounds& bounds, int resolution) {
  require(resolution >= 8, ErrorCode::kInvalidArgument, "marching cubes resolution must be >= 8");
  require((bounds.hi - bounds.lo).minCoeff() > 0, ErrorCode::kInvalidArgument, "empty bounds");
  const int n = resolution;
  const Vector3d step = (bounds.hi - bounds.lo) / (n - 1);
  auto point = [&](int i, int j, int k) {
    return Vector3d(bounds.lo.x() + i * step.x(), bounds.lo.y() + j * step.y(),
                    bounds.lo.z() + k * step.z());
  };
  auto lin = [n](int i, int j, int k) {
    return (static_cast<std::int64_t>(k) * n + j) * n + i;
  };

  std::vector<double> values(static_cast<std::size_t>(n) * n * n);
  std::vector<Vector3d> plane(static_cast<std::size_t>(n) * n);
  for (int k = 0; k < n; ++k) {
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < n; ++i) plane[static_cast<std::size_t>(j) * n + i] = point(i, j, k);
    const auto v = sdf(plane);
    require(v.size() == plane.size(), ErrorCode::kShape, "SDF evaluator returned the wrong count");
    for (double x : v) require(std::isfinite(x), ErrorCode::kNonFinite, "SDF grid value is not finite");
    std::copy(v.begin(), v.end(), values.begin() + lin(0, 0, k));
  }

  Mesh mesh;
  std::unordered_map<std::int64_t, int> welded;
  auto edge_vertex = [&](int i, int j, int k, int edge) {
    const int* ca = detail::kCorner[detail::kEdgeCorners[edge][0]];
    const int* cb = detail::kCorner[detail::kEdgeCorners[edge][1]];
    const int ai = i + ca[0], aj = j + ca[1], ak = k + ca[2];
    const int bi = i + cb[0], bj = j + cb[1], bk = k + cb[2];
    const int axis = ai != bi ? 0 : (aj != bj ? 1 : 2);
    const std::int64_t key =
        lin(std::min(ai, bi), std::min(aj, bj), std::min(ak, bk)) * 3 + axis;
    const auto it = welded.find(key);
    if (it != welded.end()) return it->second;
    const double va = values[lin(ai, aj, ak)], vb = values[lin(bi, bj, bk)];
    const double t = va == vb ? 0.5 : va / (va - vb);
    mesh.vertices.push_back(point(ai, aj, ak) + t * (point(bi, bj, bk) - point(ai, aj, ak)));
    const int id = static_cast<int>(mesh.vertices.size()) - 1;
    welded.emplace(key, id);
    return id;
  };

  for (int k = 0; k + 1 < n; ++k)
    for (int j = 0; j + 1 < n; ++j)
      for (int i = 0; i + 1 < n; ++i) {
        int index = 0;
        for (int c = 0; c < 8; ++c) {
          const int* o = detail::kCorner[c];
          if (values[lin(i + o[0], j + o[1], k + o[2])] <= 0.0) index |= 1 << c;
        }
        if (index == 0 || index == 255) continue;
        const auto& tri = detail::kTriTable[index];
        for (int t = 0; tri[t] != -1; t += 3) {
          const int a = edge_vertex(i, j, k, tri[t]);
          const int b = edge_vertex(i, j, k, tri[t + 1]);
          const int c = edge_vertex(i, j, k, tri[t + 2]);
          if (a == b || b == c || a == c) continue;
          // The table winds clockwise seen from outside; store outward winding.
          mesh.faces.push_back({a, c, b});
        }
      }
  return mesh;
}

std::vector<Point3> sample_surface(const Mesh& mesh, int n, std::mt19937_64& rng) {
  require(n >= 1, ErrorCode::kInvalidArgument, "sample count must be positive");
  require(!mesh.faces.empty(), ErrorCode::kEmptyInput, "cannot sample an empty mesh");
  std::vector<double> cumulative(mesh.faces.size());
  double total = 0;
  for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
    const auto& t = mesh.faces[f];
    total += 0.5 * (mesh.vertices[t[1]] - mesh.vertices[t[0]])
                       .cross(mesh.vertices[t[2]] - mesh.vertices[t[0]])
                       .norm();
    cumulative[f] = total;
  }
  require(total > 0, ErrorCode::kInvalidArgument, "mesh has zero surface area");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<Point3> out;
  out.reserve(n);
  for (int s = 0; s < n; ++s) {
    const double pick = u(rng) * total;
    const auto f = std::min<std::size_t>(
        std::upper_bound(cumulative.begin(), cumulative.end(), pick) - cumulative.begin(),
        cumulative.size() - 1);
    const double r1 = std::sqrt(u(rng)), r2 = u(rng);
    const auto& t = mesh.faces[f];
    const Vector3d p = (1 - r1) * mesh.vertices[t[0]] + r1 * (1 - r2) * mesh.vertices[t[1]] +
                       r1 * r2 * mesh.vertices[t[2]];
    out.push_back({p.x(), p.y(), p.z()});
  }
  return out;
}

namespace {

ChamferResult score(const std::vector<double>& da, const std::vector<double>& db,
                    const std::vector<double>& thresholds) {
  ChamferResult r;
  double sa = 0, sb = 0;
  for (double d : da) sa += d;
  for (double d : db) sb += d;
  r.chamfer = sa / da.size() + sb / db.size();
  for (double tau : thresholds) {
    require(tau > 0, ErrorCode::kInvalidArgument, "F-score threshold must be positive");
    const double t2 = tau * tau;
    const double p = static_cast<double>(std::count_if(da.begin(), da.end(), [&](double d) { return d <= t2; })) /
                     da.size();
    const double q = static_cast<double>(std::count_if(db.begin(), db.end(), [&](double d) { return d <= t2; })) /
                     db.size();
    r.precision.push_back(p);
    r.recall.push_back(q);
    r.fscores.push_back(p + q > 0 ? 2 * p * q / (p + q) : 0.0);
  }
  return r;
}

void require_points(const std::vector<Point3>& a, const std::vector<Point3>& b) {
  require(!a.empty() && !b.empty(), ErrorCode::kEmptyInput, "point sets must be non-empty");
}

}  // namespace

ChamferResult chamfer_and_fscore(const std::vector<Point3>& a, const std::vector<Point3>& b,
                                 const std::vector<double>& thresholds) {
  require_points(a, b);
  return score(kernels::nearest_sq_dist_parallel(a, b), kernels::nearest_sq_dist_parallel(b, a),
               thresholds);
}

ChamferResult chamfer_and_fscore_brute(const std::vector<Point3>& a, const std::vector<Point3>& b,
                                       const std::vector<double>& thresholds) {
  require_points(a, b);
  return score(kernels::nearest_sq_dist_serial(a, b), kernels::nearest_sq_dist_serial(b, a),
               thresholds);
}

namespace {

int require_image_pair(const Image& a, const Image& b, const Mask& mask) {
  require(a.same_size(b) && a.channels() == b.channels() && a.same_size(mask) &&
              mask.channels() == 1,
          ErrorCode::kShape, "images and mask differ in size");
  int count = 0;
  for (double m : mask.data()) count += m > 0.5;
  require(count > 0, ErrorCode::kEmptyInput, "metric mask is empty");
  return count;
}

}  // namespace

double psnr(const Image& a, const Image& b, const Mask& mask) {
  const int count = require_image_pair(a, b, mask);
  double sum = 0;
  for (int y = 0; y < a.height(); ++y)
    for (int x = 0; x < a.width(); ++x) {
      if (mask.at(x, y) <= 0.5) continue;
      for (int c = 0; c < a.channels(); ++c) {
        const double d = a.at(x, y, c) - b.at(x, y, c);
        sum += d * d;
      }
    }
  const double mse = sum / (static_cast<double>(count) * a.channels());
  if (mse <= 0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

double ssim(const Image& a, const Image& b, const Mask& mask) {
  const int count = require_image_pair(a, b, mask);
  const int w = a.width(), h = a.height();
  std::vector<double> pa(static_cast<std::size_t>(w) * h), pb(pa.size());
  double total = 0;
  for (int c = 0; c < a.channels(); ++c) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        pa[static_cast<std::size_t>(y) * w + x] = a.at(x, y, c);
        pb[static_cast<std::size_t>(y) * w + x] = b.at(x, y, c);
      }
    const auto map = kernels::ssim_map_parallel(pa, pb, w, h);
    double s = 0;
    for (std::size_t i = 0; i < map.size(); ++i)
      if (mask.data()[i] > 0.5) s += map[i];
    total += s / count;
  }
  return total / a.channels();
}

nlohmann::json MetricReport::to_json() const {
  nlohmann::json j = {{"schema", 1}};
  if (has_geometry) {
    j["chamfer_mm2"] = chamfer;
    j["f5"] = f5;
    j["f10"] = f10;
  }
  if (has_image) {
    j["psnr"] = psnr;
    j["ssim"] = ssim;
  }
  return j;
}

MetricReport geometry_report(const std::vector<Point3>& predicted_m,
                             const std::vector<Point3>& reference_m) {
  auto to_mm = [](std::vector<Point3> p) {
    for (auto& q : p)
      for (double& v : q) v *= 1000.0;
    return p;
  };
  const auto r = chamfer_and_fscore(to_mm(predicted_m), to_mm(reference_m), {5.0, 10.0});
  MetricReport m;
  m.has_geometry = true;
  m.chamfer = r.chamfer;
  m.f5 = r.fscores[0];
  m.f10 = r.fscores[1];
  return m;
}

}  // namespace occlumesh::metrics
