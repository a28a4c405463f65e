#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <random>

#include "occlumesh/kernels.hpp"
#include "test_support.hpp"

using namespace occlumesh;
using kernels::Point3;

namespace {

std::vector<Point3> random_points(int n, std::mt19937_64& rng, double scale = 1.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  std::vector<Point3> pts(n);
  for (auto& p : pts) p = {u(rng), u(rng), u(rng)};
  return pts;
}

}  // namespace

TEST_CASE("sdf_to_alpha fixtures") {
  CHECK(kernels::neus_alpha(0.3, 0.3, 10) == 0.0);
  CHECK(kernels::neus_alpha(1, -1, 100) == doctest::Approx(1.0).epsilon(1e-12));
  const double phi1 = 1 / (1 + std::exp(-1.0));
  const double phim1 = 1 / (1 + std::exp(1.0));
  CHECK(kernels::neus_alpha(0.1, -0.1, 10) == doctest::Approx((phi1 - phim1) / phi1).epsilon(1e-12));
  CHECK(kernels::neus_alpha(0.1, -0.1, 10) == doctest::Approx(0.6322).epsilon(1e-4));
  // Increasing SDF gives no opacity.
  CHECK(kernels::neus_alpha(-0.2, 0.1, 10) == 0.0);
  // Deep inside: Phi underflows, alpha stays finite and in range.
  const double a = kernels::neus_alpha(-1e4, -1e4 - 1, 100);
  CHECK(a >= 0.0);
  CHECK(a <= 1.0);
}

TEST_CASE("neus weights serial and parallel agree and obey invariants") {
  std::mt19937_64 rng(7);
  const int rays = 200, samples = 33;
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<double> sdf(rays * samples);
  for (auto& s : sdf) s = u(rng);
  std::vector<double> ws(sdf.size()), wp(sdf.size());
  kernels::neus_weights_serial(sdf, 20.0, rays, samples, ws);
  kernels::neus_weights_parallel(sdf, 20.0, rays, samples, wp);
  CHECK(ws == wp);
  for (int r = 0; r < rays; ++r) {
    double total = 0;
    for (int i = 0; i < samples; ++i) {
      CHECK(ws[r * samples + i] >= 0.0);
      total += ws[r * samples + i];
    }
    CHECK(total <= 1.0 + 1e-6);
  }
}

TEST_CASE("bilinear gather serial and parallel agree") {
  std::mt19937_64 rng(8);
  const auto map = testing::random_tensor({4, 9, 11}, rng);
  std::vector<std::array<double, 2>> coords(500);
  std::uniform_real_distribution<double> u(-3, 14);
  for (auto& c : coords) c = {u(rng), u(rng)};
  std::vector<double> a(500 * 4), b(500 * 4);
  kernels::bilinear_gather_serial(map.values(), 4, 9, 11, coords, a);
  kernels::bilinear_gather_parallel(map.values(), 4, 9, 11, coords, b);
  CHECK(a == b);
}

TEST_CASE("im2col serial and parallel agree") {
  std::mt19937_64 rng(9);
  const auto x = testing::random_tensor({3, 10, 12}, rng);
  kernels::ConvGeometry geo{3, 10, 12, 3, 2, 1, 5, 6};
  tensor::RowMatrix a, b;
  kernels::im2col_serial(x.values(), geo, a);
  kernels::im2col_parallel(x.values(), geo, b);
  CHECK(a == b);
}

TEST_CASE("grid nearest neighbour equals brute force") {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 5; ++trial) {
    const auto refs = random_points(1000, rng, trial % 2 ? 0.05 : 1.0);
    const auto queries = random_points(1000, rng, 1.2);
    CHECK(kernels::nearest_sq_dist_serial(queries, refs) ==
          kernels::nearest_sq_dist_parallel(queries, refs));
  }
  // Degenerate reference sets: single point, duplicates, a flat sheet.
  std::vector<Point3> single{{0.1, 0.2, 0.3}};
  const auto q = random_points(50, rng);
  CHECK(kernels::nearest_sq_dist_serial(q, single) == kernels::nearest_sq_dist_parallel(q, single));
  std::vector<Point3> sheet;
  for (int i = 0; i < 40; ++i)
    for (int j = 0; j < 40; ++j) sheet.push_back({i / 40.0, j / 40.0, 0.0});
  sheet.push_back(sheet.front());
  CHECK(kernels::nearest_sq_dist_serial(q, sheet) == kernels::nearest_sq_dist_parallel(q, sheet));
}

TEST_CASE("ssim serial and parallel agree") {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<double> a(37 * 29), b(37 * 29);
  for (auto& v : a) v = u(rng);
  for (auto& v : b) v = u(rng);
  CHECK(kernels::ssim_map_serial(a, b, 37, 29) == kernels::ssim_map_parallel(a, b, 37, 29));
  const auto same = kernels::ssim_map_serial(a, a, 37, 29);
  for (double s : same) CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
}
