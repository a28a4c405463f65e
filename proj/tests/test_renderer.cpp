#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <random>

#include "occlumesh/conditioning.hpp"
#include "occlumesh/ops.hpp"
#include "occlumesh/renderer.hpp"
#include "test_support.hpp"

using namespace occlumesh;
using namespace occlumesh::render;
using occlumesh::testing::check_gradients;
using occlumesh::testing::ParamIndex;
using occlumesh::testing::random_entries;

using tensor::Tape;

namespace {

bool same_values(const Tensor& a, const Tensor& b) {
  return a.size() == b.size() && std::equal(a.values().begin(), a.values().end(), b.values().begin());
}

// A tiny scene: encoder + fields + one reference view, all in one ParamMap.
struct TinyScene {
  conditioning::EncoderSpec enc{8, 4, 6, 6};
  FieldSpecs specs;
  ParamMap params;
  Tensor image;
  geometry::FeatureMap semantic;
  geometry::Camera camera;
  hand::JointTransforms joints;
  std::vector<geometry::Ray> rays;

  TinyScene(std::uint64_t seed, int hand_k = 2) {
    std::mt19937_64 rng(seed);
    specs = desk_field_specs(enc.channels, hand_k, 8);
    specs.geometry.hidden_dim = 16;
    specs.color.hidden_dim = 16;
    conditioning::init_encoder(enc, rng, params);
    init_fields(specs, rng, params, 0.3);
    // Perturb the zero-initialised input columns so every input path is live.
    std::normal_distribution<double> g(0.0, 0.05);
    for (auto& v : params.at(nn::weight_name(kGeometryPrefix, 0)).values()) v += g(rng);
    image = Tensor({3, 16, 16});
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (auto& v : image.values()) v = u(rng);
    std::vector<std::uint8_t> labels(16 * 16);
    for (auto& l : labels) l = static_cast<std::uint8_t>(1 + rng() % 16);
    semantic = conditioning::semantic_map_from_labels(labels, 16, 16, make_mask(16, 16, 1.0));
    camera = geometry::look_at({0.1, 0.2, -1.2}, {0, 0, 0}, 20, 20, 8, 8, 16, 16);
    hand::HandPose pose;
    pose.angles.assign(16, 0.3);
    pose.root = hand::rigid(Eigen::Matrix3d::Identity(), Eigen::Vector3d(-0.1, 0.0, 0.0));
    joints = hand::forward_kinematics(hand::HandSkeleton::standard(), pose);
    for (int i = 0; i < 3; ++i)
      rays.push_back(geometry::pixel_to_ray(camera, 6.5 + 1.5 * i, 8.5 - i, 0.7, 1.7));
  }

  Conditioning conditioning(Tape& tape, const VarMap& vars) const {
    Conditioning c;
    c.color_map = conditioning::encode_reference(enc, vars, tape.constant(image));
    c.color_ratio = conditioning::kFeatureRatio;
    c.semantic_map = &semantic;
    c.reference_camera = camera;
    c.centre = Eigen::Vector3d(0.0, 0.05, 0.0);
    c.scale = 0.6;
    c.joints_normalized = conditioning::normalize_joints(joints, c.centre, c.scale);
    c.hand_k = (specs.cond_width - 3 - specs.color_channels) / 3;
    return c;
  }
};

geometry::Ray axis_ray(double z_near, double z_far) {
  geometry::Ray r;
  r.origin = Vector3d(0, 0, -3);
  r.direction = Vector3d(0, 0, 1);
  r.z_near = z_near;
  r.z_far = z_far;
  return r;
}

}  // namespace

TEST_CASE("sdf_to_alpha fixtures") {
  CHECK(sdf_to_alpha(0.3, 0.3, 10) == 0.0);
  CHECK(sdf_to_alpha(1.0, -1.0, 100) == doctest::Approx(1.0).epsilon(1e-12));
  const double phi = [](double x) { return 1 / (1 + std::exp(-x)); }(1.0);
  CHECK(sdf_to_alpha(0.1, -0.1, 10) == doctest::Approx((phi - (1 - phi)) / phi));
  CHECK(sdf_to_alpha(0.1, -0.1, 10) == doctest::Approx(0.6322).epsilon(1e-4));
  CHECK(sdf_to_alpha(-0.1, 0.1, 10) == 0.0);
  CHECK_THROWS_AS(sdf_to_alpha(0.1, 0.0, 0.0), Error);
}

TEST_CASE("empty space renders transparent and black") {
  AnalyticField f;
  f.sdf = [](const Vector3d&) { return 1.0; };
  f.gradient = [](const Vector3d&) { return Vector3d(1, 0, 0); };
  f.color = [](const Vector3d&, const Vector3d&) { return Vector3d(1, 1, 1); };
  const auto out = render_ray_analytic(f, axis_ray(1, 5), 40, 40, 200, nullptr);
  CHECK(out.opacity < 1e-9);
  for (double c : out.color) CHECK(c < 1e-9);
}

TEST_CASE("analytic sphere: depth through the centre") {
  const auto sphere = analytic_sphere(Vector3d::Zero(), 1.0);
  std::mt19937_64 rng(1);
  const double spacing = (5.0 - 1.0) / 40;
  for (int trial = 0; trial < 20; ++trial) {
    RaySamples samples;
    const auto out = render_ray_analytic(sphere, axis_ray(1, 5), 40, 40, 200, &rng, &samples);
    CHECK(std::abs(out.depth - 2.0) < 0.5 * spacing);
    CHECK(out.opacity > 0.99);
    CHECK(samples.depths.size() == 80);
    CHECK(std::is_sorted(samples.depths.begin(), samples.depths.end()));
    double total = 0;
    for (double w : samples.weights) {
      CHECK(w >= 0);
      total += w;
    }
    CHECK(total <= 1 + 1e-6);
    CHECK(out.normal.z() < -0.9);  // normal faces the camera
  }
}

TEST_CASE("analytic sphere: silhouette with a one pixel margin") {
  const auto sphere = analytic_sphere(Vector3d::Zero(), 0.5);
  const auto cam = geometry::look_at({0, 0, -2}, {0, 0, 0}, 40, 40, 16, 16, 32, 32);
  // Projected radius of the occluding contour: f * r / sqrt(d^2 - r^2).
  const double radius_px = 40 * 0.5 / std::sqrt(4.0 - 0.25);
  int inside = 0, outside = 0;
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) {
      const double u = x + 0.5, v = y + 0.5;
      const double r = std::hypot(u - 16, v - 16);
      if (std::abs(r - radius_px) < 1.0) continue;
      const auto ray = geometry::pixel_to_ray(cam, u, v, 1.0, 3.0);
      const double o = render_ray_analytic(sphere, ray, 64, 64, 200, nullptr).opacity;
      if (r < radius_px) {
        ++inside;
        CHECK(o > 0.9);
      } else {
        ++outside;
        CHECK(o < 0.1);
      }
    }
  CHECK(inside > 50);
  CHECK(outside > 50);
}

TEST_CASE("unbiased weights peak at the zero crossing of a linear SDF") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> where(1.5, 3.5);
  for (double h : {50.0, 200.0}) {
    for (int trial = 0; trial < 10; ++trial) {
      const double z_star = where(rng);
      AnalyticField f;
      f.sdf = [z_star](const Vector3d& p) { return z_star - (p.z() + 3.0); };
      f.gradient = [](const Vector3d&) { return Vector3d(0, 0, -1); };
      f.color = [](const Vector3d&, const Vector3d&) { return Vector3d(0.5, 0.5, 0.5); };
      RaySamples s;
      // Evenly spaced samples so every interval carries the same width.
      render_ray_analytic(f, axis_ray(1, 5), 512, 0, h, nullptr, &s);
      const auto best = std::max_element(s.weights.begin(), s.weights.end()) - s.weights.begin();
      CHECK(std::abs(s.depths[best] - z_star) < 4.0 / 512);
    }
  }
}

TEST_CASE("hierarchical upsampling") {
  const auto coarse = coarse_depths(1.0, 3.0, 40, nullptr);

  SUBCASE("all weight on one interval") {
    std::vector<double> w(40, 0.0);
    w[17] = 1.0;
    const auto merged = hierarchical_upsample(coarse, w, 40, 1.0, 3.0, nullptr);
    CHECK(merged.size() == 80);
    int in_interval = 0;
    for (double z : merged) in_interval += (z >= coarse[17] && z <= coarse[18]);
    CHECK(in_interval == 40 + 2);
  }
  SUBCASE("uniform weights give uniform samples (KS)") {
    std::vector<double> w(40, 0.025);
    std::mt19937_64 rng(3);
    const int n = 10000;
    auto merged = hierarchical_upsample(coarse, w, n, 1.0, 3.0, &rng);
    // Drop the coarse depths; what remains are the draws.
    std::vector<double> fine;
    std::size_t ci = 0;
    for (double z : merged) {
      if (ci < coarse.size() && z == coarse[ci]) {
        ++ci;
        continue;
      }
      fine.push_back(z);
    }
    CHECK(fine.size() == static_cast<std::size_t>(n));
    const double lo = coarse.front(), hi = coarse.back();
    double ks = 0;
    for (std::size_t i = 0; i < fine.size(); ++i) {
      const double cdf = (fine[i] - lo) / (hi - lo);
      ks = std::max({ks, std::abs(cdf - static_cast<double>(i) / n),
                     std::abs(cdf - static_cast<double>(i + 1) / n)});
    }
    CHECK(ks < 0.1);
  }
  SUBCASE("zero weights fall back to uniform and output stays sorted and bounded") {
    std::vector<double> w(40, 0.0);
    const auto merged = hierarchical_upsample(coarse, w, 40, 1.0, 3.0, nullptr);
    for (std::size_t i = 1; i < merged.size(); ++i) CHECK(merged[i] > merged[i - 1]);
    CHECK(merged.front() >= 1.0);
    CHECK(merged.back() <= 3.0);
  }
  SUBCASE("duplicated depths are separated") {
    std::vector<double> d = {1.0, 1.0, 2.0};
    const auto merged = hierarchical_upsample(d, {0.0, 1.0, 0.0}, 5, 1.0, 3.0, nullptr);
    for (std::size_t i = 1; i < merged.size(); ++i) CHECK(merged[i] > merged[i - 1]);
  }
}

TEST_CASE("geometry field gradient matches finite differences") {
  TinyScene scene(4);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  const int n = 12;
  Tensor pts({n, 3});
  for (auto& v : pts.values()) v = u(rng);
  Tensor f_con({n, scene.specs.cond_width});
  for (auto& v : f_con.values()) v = u(rng);
  Tape tape;
  auto vars = tensor::bind_parameters(tape, scene.params, false);
  const auto out = eval_geometric_field(scene.specs, vars, pts, tape.constant(f_con));
  CHECK(out.feature.value().cols() == scene.specs.feature_dim);
  const double step = 1e-6;
  double worst = 0;
  for (int r = 0; r < n; ++r)
    for (int d = 0; d < 3; ++d) {
      Tensor up = pts, down = pts;
      up.at(r, d) += step;
      down.at(r, d) -= step;
      const double fd = (eval_sdf_values(scene.specs, scene.params, up, f_con)[r] -
                         eval_sdf_values(scene.specs, scene.params, down, f_con)[r]) /
                        (2 * step);
      worst = std::max(worst, testing::relative_error(out.gradient.value().at(r, d), fd));
    }
  CHECK(worst < 1e-4);

  // Deterministic in (P, F_con).
  Tape again;
  auto vars2 = tensor::bind_parameters(again, scene.params, false);
  const auto out2 = eval_geometric_field(scene.specs, vars2, pts, again.constant(f_con));
  CHECK(same_values(out2.sdf.value(), out.sdf.value()));

  CHECK_THROWS_AS(eval_geometric_field(scene.specs, vars, pts,
                                       tape.constant(Tensor({n, scene.specs.cond_width - 1}))),
                  Error);
}

TEST_CASE("geometric initialisation is close to a sphere") {
  TinyScene scene(6);
  // Only raw xyz columns start non-zero; undo the test perturbation.
  std::mt19937_64 rng(6);
  ParamMap params;
  init_fields(scene.specs, rng, params, 0.3);
  Tensor pts({2, 3}, 0.0);
  pts.at(1, 0) = 0.6;
  const auto s = eval_sdf_values(scene.specs, params, pts, Tensor({2, scene.specs.cond_width}, 0.0));
  CHECK(s[0] < 0);
  CHECK(s[1] > 0);
  CHECK(std::exp(params.at(kSharpnessName).item()) == doctest::Approx(3.33));
}

TEST_CASE("paper profile emits one SDF value and 256 features") {
  const auto specs = paper_field_specs(256, 6);
  CHECK(specs.geometry.out_dim == 257);
  CHECK(specs.geometry.layer_count == 8);
  CHECK(specs.geometry.hidden_dim == 512);
  CHECK(specs.cond_width == 3 + 18 + 256);
  std::mt19937_64 rng(7);
  ParamMap params;
  init_fields(specs, rng, params);
  Tape tape;
  auto vars = tensor::bind_parameters(tape, params, false);
  const auto out = eval_geometric_field(specs, vars, Tensor({1, 3}, 0.1),
                                        tape.constant(Tensor({1, specs.cond_width}, 0.0)));
  CHECK(out.sdf.value().cols() + out.feature.value().cols() == 257);
}

TEST_CASE("colour field range and input wiring") {
  TinyScene scene(8);
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(-1, 1);
  const int n = 10;
  auto rand = [&](std::int64_t cols) {
    Tensor t({n, cols});
    for (auto& v : t.values()) v = 3 * u(rng);
    return t;
  };
  Tensor dirs = rand(3);
  for (int r = 0; r < n; ++r) {
    const double len = std::hypot(dirs.at(r, 0), dirs.at(r, 1), dirs.at(r, 2));
    for (int d = 0; d < 3; ++d) dirs.at(r, d) /= len;
  }
  const Tensor fc = rand(scene.specs.color_channels), nrm = rand(3), feat = rand(scene.specs.feature_dim);
  auto eval = [&](const ParamMap& p, const Tensor& feature) {
    Tape tape;
    auto vars = tensor::bind_parameters(tape, p, false);
    return eval_color_field(scene.specs, vars, tape.constant(fc), dirs, tape.constant(nrm),
                            tape.constant(feature))
        .value();
  };
  const Tensor rgb = eval(scene.params, feat);
  CHECK(rgb.cols() == 3);
  for (double v : rgb.values()) CHECK((v > 0 && v < 1));

  ParamMap zeroed = scene.params;
  const int last = scene.specs.color.layer_count - 1;
  for (auto& v : zeroed.at(nn::weight_name(kColorPrefix, last)).values()) v = 0;
  for (auto& v : zeroed.at(nn::bias_name(kColorPrefix, last)).values()) v = 0;
  const Tensor flat = eval(zeroed, feat);
  for (double v : flat.values()) CHECK(v == 0.5);

  // F_SDF occupies the trailing input columns of the first layer.
  Tensor scaled = feat;
  for (auto& v : scaled.values()) v *= 2.5;
  CHECK(!same_values(eval(scene.params, scaled), rgb));
  ParamMap cut = scene.params;
  Tensor& w0 = cut.at(nn::weight_name(kColorPrefix, 0));
  for (std::int64_t r = 0; r < w0.rows(); ++r)
    for (std::int64_t c = w0.cols() - scene.specs.feature_dim; c < w0.cols(); ++c) w0.at(r, c) = 0;
  CHECK(same_values(eval(cut, scaled), eval(cut, feat)));
}

TEST_CASE("batch render invariants") {
  TinyScene scene(10);
  Tape tape;
  auto vars = tensor::bind_parameters(tape, scene.params, false);
  const auto cond = scene.conditioning(tape, vars);
  std::mt19937_64 rng(11);
  RenderOptions opt;
  opt.n_coarse = 16;
  opt.n_fine = 16;
  const auto out = render_batch(scene.specs, vars, cond, scene.rays, opt, &rng);
  const Tensor& w = out.weights.value();
  CHECK(w.cols() == 32);
  for (std::int64_t r = 0; r < w.rows(); ++r) {
    double total = 0;
    for (std::int64_t i = 0; i < w.cols(); ++i) {
      CHECK(w.at(r, i) >= 0);
      total += w.at(r, i);
      if (i > 0) CHECK(out.depths.at(r, i) > out.depths.at(r, i - 1));
    }
    CHECK(total <= 1 + 1e-6);
    CHECK(out.opacity.value()[r] == doctest::Approx(total));
    for (int c = 0; c < 3; ++c) {
      CHECK(out.color.value().at(r, c) >= 0);
      CHECK(out.color.value().at(r, c) <= 1);
    }
  }
  CHECK(out.sample_gradient.value().rows() == static_cast<std::int64_t>(scene.rays.size()) * 32);
}

TEST_CASE("rendered colour gradient matches finite differences") {
  TinyScene scene(12);
  Tape probe;
  auto probe_vars = tensor::bind_parameters(probe, scene.params, false);
  std::mt19937_64 rng(13);
  RenderOptions opt;
  opt.n_coarse = 8;
  opt.n_fine = 8;
  const Tensor depths =
      render_batch(scene.specs, probe_vars, scene.conditioning(probe, probe_vars), scene.rays, opt, &rng)
          .depths;
  RenderOptions fixed;
  fixed.fixed_depths = &depths;
  Tensor mix({static_cast<std::int64_t>(scene.rays.size()), 3});
  std::uniform_real_distribution<double> u(-1, 1);
  for (auto& v : mix.values()) v = u(rng);
  auto fn = [&](Tape& tape, const VarMap& vars) {
    const auto out = render_batch(scene.specs, vars, scene.conditioning(tape, vars), scene.rays, fixed,
                                  nullptr);
    return ops::add(ops::sum(ops::mul(out.color, tape.constant(mix))),
                    ops::add(ops::sum(ops::mul(out.normal, tape.constant(mix))),
                             ops::sum(out.opacity)));
  };
  std::vector<ParamIndex> entries = random_entries(scene.params, 80, rng);
  entries.push_back({kSharpnessName, 0});
  const auto result = check_gradients(fn, scene.params, entries, 1e-6, 1e-5);
  INFO(result.worst);
  CHECK(result.max_rel_error < 1e-3);
}
