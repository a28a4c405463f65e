#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>

#include <Eigen/QR>

#include "occlumesh/metrics.hpp"

using namespace occlumesh;
using namespace occlumesh::metrics;

namespace {

BatchSdf sphere_sdf(double radius) {
  return [radius](const std::vector<Vector3d>& pts) {
    std::vector<double> v(pts.size());
    for (std::size_t i = 0; i < pts.size(); ++i) v[i] = pts[i].norm() - radius;
    return v;
  };
}

std::vector<Point3> exact_sphere_points(int n, double radius, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<Point3> out;
  for (int i = 0; i < n; ++i) {
    Vector3d d(g(rng), g(rng), g(rng));
    d = radius * d.normalized();
    out.push_back({d.x(), d.y(), d.z()});
  }
  return out;
}

std::vector<Point3> random_points(int n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<Point3> p(n);
  for (auto& q : p) q = {u(rng), u(rng), u(rng)};
  return p;
}

}  // namespace

TEST_CASE("marching cubes on an analytic sphere") {
  const Bounds b{Vector3d::Constant(-1.2), Vector3d::Constant(1.2)};
  const Mesh mesh = extract_mesh(sphere_sdf(1.0), b, 128);
  mesh.validate();
  CHECK(!mesh.empty());
  CHECK(mesh.signed_volume() > 0);
  CHECK(mesh.signed_volume() == doctest::Approx(4.0 / 3.0 * std::numbers::pi).epsilon(0.01));
  std::mt19937_64 rng(1);
  const auto pred = sample_surface(mesh, 20000, rng);
  const auto ref = exact_sphere_points(20000, 1.0, rng);
  const double diag = std::sqrt(3.0) * grid_cell_size(b, 128);
  const auto r = chamfer_and_fscore(pred, ref, {diag});
  CHECK(r.chamfer < diag * diag);
  CHECK(r.fscores[0] > 0.99);
  // Every vertex lies within half a cell of the true surface.
  double worst = 0;
  for (const auto& v : mesh.vertices) worst = std::max(worst, std::abs(v.norm() - 1.0));
  CHECK(worst < 0.5 * grid_cell_size(b, 128));
}

TEST_CASE("marching cubes edge cases") {
  const Bounds b;
  auto positive = [](const std::vector<Vector3d>& p) { return std::vector<double>(p.size(), 1.0); };
  CHECK(extract_mesh(positive, b, 16).empty());
  CHECK_THROWS_AS(extract_mesh(positive, b, 4), Error);
  // Off-centre box: still outward winding.
  auto box = [](const std::vector<Vector3d>& p) {
    std::vector<double> v(p.size());
    for (std::size_t i = 0; i < p.size(); ++i)
      v[i] = ((p[i] - Vector3d(0.2, -0.1, 0.3)).cwiseAbs() - Vector3d(0.3, 0.2, 0.25)).maxCoeff();
    return v;
  };
  const Mesh m = extract_mesh(box, b, 40);
  CHECK(m.signed_volume() == doctest::Approx(0.6 * 0.4 * 0.5).epsilon(0.05));
}

TEST_CASE("surface sampling") {
  Mesh square;
  square.vertices = {{0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0}};
  square.faces = {{0, 1, 2}, {0, 2, 3}};
  std::mt19937_64 rng(2);
  const int n = 32000;
  const auto pts = sample_surface(square, n, rng);
  std::vector<int> counts(16, 0);
  for (const auto& p : pts) {
    CHECK(p[2] == 0.0);
    const int cx = std::min(3, static_cast<int>(p[0] * 4)), cy = std::min(3, static_cast<int>(p[1] * 4));
    ++counts[cy * 4 + cx];
  }
  double chi2 = 0;
  const double expected = n / 16.0;
  for (int c : counts) chi2 += (c - expected) * (c - expected) / expected;
  // Upper 1% point of chi-squared with 15 degrees of freedom.
  CHECK(chi2 < 30.578);

  Mesh tri;
  tri.vertices = {{0.1, 0.2, 0.3}, {1.0, -0.5, 0.2}, {0.3, 0.9, -0.4}};
  tri.faces = {{0, 1, 2}};
  for (const auto& p : sample_surface(tri, 2000, rng)) {
    // Barycentric coordinates by least squares on the triangle plane.
    const Vector3d q(p[0], p[1], p[2]);
    const Vector3d e1 = tri.vertices[1] - tri.vertices[0], e2 = tri.vertices[2] - tri.vertices[0];
    Eigen::Matrix<double, 3, 2> m;
    m << e1, e2;
    const Eigen::Vector2d uv = m.colPivHouseholderQr().solve(q - tri.vertices[0]);
    CHECK((m * uv - (q - tri.vertices[0])).norm() < 1e-12);
    CHECK(uv.x() >= -1e-12);
    CHECK(uv.y() >= -1e-12);
    CHECK(uv.x() + uv.y() <= 1 + 1e-12);
  }
  std::mt19937_64 r1(5), r2(5);
  CHECK(sample_surface(tri, 100, r1) == sample_surface(tri, 100, r2));

  Mesh flat;
  flat.vertices = {{0, 0, 0}, {1, 0, 0}, {2, 0, 0}};
  flat.faces = {{0, 1, 2}};
  CHECK_THROWS_AS(sample_surface(flat, 10, rng), Error);
  CHECK_THROWS_AS(sample_surface(Mesh{}, 10, rng), Error);
}

TEST_CASE("chamfer and F-score fixtures") {
  std::mt19937_64 rng(3);
  const auto a = random_points(500, rng);
  const auto same = chamfer_and_fscore(a, a, {0.001, 0.01});
  CHECK(same.chamfer == 0.0);
  for (double f : same.fscores) CHECK(f == 1.0);

  const auto two = chamfer_and_fscore({{0, 0, 0}}, {{1, 0, 0}}, {0.5, 2.0});
  CHECK(two.chamfer == 2.0);
  CHECK(two.fscores[0] == 0.0);
  CHECK(two.fscores[1] == 1.0);
  CHECK_THROWS_AS(chamfer_and_fscore({}, a, {0.1}), Error);
}

TEST_CASE("grid-accelerated scores equal brute force bit for bit") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 5; ++trial) {
    const auto a = random_points(1000, rng), b = random_points(1000, rng);
    const std::vector<double> taus = {0.02, 0.05, 0.1, 0.3};
    const auto fast = chamfer_and_fscore(a, b, taus);
    const auto slow = chamfer_and_fscore_brute(a, b, taus);
    CHECK(fast.chamfer == slow.chamfer);
    CHECK(fast.fscores == slow.fscores);
    const auto flipped = chamfer_and_fscore(b, a, taus);
    CHECK(flipped.chamfer == doctest::Approx(fast.chamfer).epsilon(1e-14));
    for (std::size_t i = 1; i < taus.size(); ++i) CHECK(fast.fscores[i] >= fast.fscores[i - 1]);
  }
}

TEST_CASE("PSNR fixtures") {
  Image a(8, 6, 3, 0.3);
  Mask full = make_mask(8, 6, 1.0);
  CHECK(psnr(a, a, full) == kPsnrCap);
  Image b(8, 6, 3, 0.0), c(8, 6, 3, 0.1);
  CHECK(psnr(b, c, full) == doctest::Approx(20.0).epsilon(1e-12));
  // Differences outside the mask are ignored.
  Mask part = make_mask(8, 6);
  part.at(2, 2) = 1.0;
  Image d = a;
  d.at(5, 5, 1) = 1.0;
  CHECK(psnr(a, d, part) == kPsnrCap);
  CHECK_THROWS_AS(psnr(a, a, make_mask(8, 6)), Error);
  CHECK_THROWS_AS(psnr(a, Image(4, 4, 3), full), Error);
}

TEST_CASE("SSIM fixtures") {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(0, 1);
  Image a(24, 20, 3);
  for (auto& v : a.data()) v = u(rng);
  const Mask full = make_mask(24, 20, 1.0);
  CHECK(ssim(a, a, full) == doctest::Approx(1.0).epsilon(1e-12));
  Image neg = a;
  for (auto& v : neg.data()) v = 1 - v;
  CHECK(ssim(a, neg, full) < 0.5);
  Image flat(24, 20, 3, 0.5);
  CHECK(ssim(flat, flat, full) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK_THROWS_AS(ssim(a, a, make_mask(24, 20)), Error);
}

TEST_CASE("OBJ round trip and metric report") {
  Mesh m = extract_mesh(sphere_sdf(0.5), Bounds{}, 16);
  for (const auto& v : m.vertices) m.colors.push_back(v.cwiseAbs());
  const auto path = std::filesystem::temp_directory_path() / "occlumesh_obj_roundtrip.obj";
  write_obj(path, m);
  const Mesh back = read_obj(path);
  std::filesystem::remove(path);
  CHECK(back.vertices.size() == m.vertices.size());
  CHECK(back.faces == m.faces);
  double worst = 0;
  for (std::size_t i = 0; i < m.vertices.size(); ++i)
    worst = std::max({worst, (back.vertices[i] - m.vertices[i]).norm(), (back.colors[i] - m.colors[i]).norm()});
  CHECK(worst < 1e-8);

  std::mt19937_64 rng(7);
  const auto pts = sample_surface(m, 3000, rng);
  const auto report = geometry_report(pts, pts);
  CHECK(report.chamfer == 0.0);
  CHECK(report.f5 == 1.0);
  CHECK(report.f10 == 1.0);
  const auto j = report.to_json();
  CHECK(j["schema"] == 1);
  CHECK(j.contains("chamfer_mm2"));
}
