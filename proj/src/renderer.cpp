#include "occlumesh/renderer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "occlumesh/conditioning.hpp"
#include "occlumesh/kernels.hpp"
#include "occlumesh/ops.hpp"

namespace occlumesh::render {

FieldSpecs desk_field_specs(int color_channels, int hand_k, int feature_dim) {
  FieldSpecs s;
  s.feature_dim = feature_dim;
  s.color_channels = color_channels;
  s.cond_width = conditioning::conditioning_width(color_channels, hand_k);
  s.geometry.layer_count = 4;
  s.geometry.hidden_dim = 64;
  s.geometry.in_dim = nn::encoded_width(s.position_freq) + s.cond_width;
  s.geometry.out_dim = 1 + feature_dim;
  s.geometry.hidden_activation = nn::Activation::kSoftplus;
  s.geometry.output_activation = nn::Activation::kNone;
  s.geometry.softplus_beta = 100.0;
  s.geometry.skip_layers = {2};
  s.color.layer_count = 3;
  s.color.hidden_dim = 64;
  s.color.in_dim = color_channels + nn::encoded_width(s.direction_freq) + 3 + feature_dim;
  s.color.out_dim = 3;
  s.color.hidden_activation = nn::Activation::kRelu;
  s.color.output_activation = nn::Activation::kSigmoid;
  return s;
}

FieldSpecs paper_field_specs(int color_channels, int hand_k) {
  FieldSpecs s = desk_field_specs(color_channels, hand_k, 256);
  s.geometry.layer_count = 8;
  s.geometry.hidden_dim = 512;
  s.geometry.skip_layers = {4};
  s.color.layer_count = 4;
  s.color.hidden_dim = 512;
  return s;
}

void init_fields(const FieldSpecs& specs, std::mt19937_64& rng, ParamMap& params,
                 double sphere_radius) {
  const auto& g = specs.geometry;
  g.validate();
  std::normal_distribution<double> unit(0.0, 1.0);
  const int raw = 3;
  for (int l = 0; l < g.layer_count; ++l) {
    const int in = g.layer_in_dim(l);
    const int out = g.layer_out_dim(l);
    Tensor w({out, in}, 0.0);
    Tensor b({out}, 0.0);
    if (l == g.layer_count - 1) {
      const double mean = std::sqrt(std::numbers::pi) / std::sqrt(static_cast<double>(in));
      for (int c = 0; c < in; ++c) w.at(0, c) = mean + 1e-4 * unit(rng);
      b[0] = -sphere_radius;
      const double bound = 1.0 / std::sqrt(static_cast<double>(in));
      std::uniform_real_distribution<double> u(-bound, bound);
      for (int r = 1; r < out; ++r)
        for (int c = 0; c < in; ++c) w.at(r, c) = u(rng);
    } else {
      const double sd = std::sqrt(2.0) / std::sqrt(static_cast<double>(out));
      // Only the raw coordinates (and the hidden code) start active; encoded
      // and conditioning inputs begin at zero weight.
      const int input_begin = l == 0 ? 0 : g.hidden_dim;
      const bool takes_input = l == 0 || g.skip_layers.contains(l);
      for (int r = 0; r < out; ++r)
        for (int c = 0; c < in; ++c) {
          const bool input_col = takes_input && c >= input_begin;
          if (input_col && c - input_begin >= raw) continue;
          w.at(r, c) = sd * unit(rng);
        }
    }
    params[nn::weight_name(kGeometryPrefix, l)] = std::move(w);
    params[nn::bias_name(kGeometryPrefix, l)] = std::move(b);
  }
  nn::init_mlp(specs.color, kColorPrefix, rng, params);
  params[kSharpnessName] = Tensor::scalar(std::log(kInitialSharpness));
}

namespace {

Tensor encode_rows(const Tensor& v, int freq) {
  tensor::Tape scratch;
  return ops::positional_encode(scratch.constant(v), freq).value();
}

// [3N, 1] column of per-direction derivatives -> [N, 3].
Var regroup_gradient(Var tangent_col, std::int64_t n) {
  return ops::concat_cols({ops::slice_rows(tangent_col, 0, n), ops::slice_rows(tangent_col, n, 2 * n),
                           ops::slice_rows(tangent_col, 2 * n, 3 * n)});
}

}  // namespace

GeometryOutput eval_geometric_field(const FieldSpecs& specs, const VarMap& params,
                                    const Tensor& points, Var f_con) {
  require(points.cols() == 3, ErrorCode::kShape, "geometry field expects points [N, 3]");
  require(f_con.value().cols() == specs.cond_width && f_con.value().rows() == points.rows(),
          ErrorCode::kShape,
          "F_con layout mismatch: got width " + std::to_string(f_con.value().cols()) +
              ", expected " + std::to_string(specs.cond_width));
  auto& tape = f_con.tape();
  const std::int64_t n = points.rows();
  Var encoded = tape.constant(encode_rows(points, specs.position_freq));
  Var input = ops::concat_cols({encoded, f_con});
  Var jac = tape.constant(nn::positional_encode_jacobian(points, specs.position_freq));
  auto out = nn::eval_mlp_with_tangent(specs.geometry, params, kGeometryPrefix, input, jac);
  GeometryOutput g;
  g.sdf = ops::slice_cols(out.output, 0, 1);
  g.feature = ops::slice_cols(out.output, 1, 1 + specs.feature_dim);
  g.gradient = regroup_gradient(ops::slice_cols(out.tangent, 0, 1), n);
  return g;
}

std::vector<double> eval_sdf_values(const FieldSpecs& specs, const ParamMap& params,
                                    const Tensor& points, const Tensor& f_con) {
  require(f_con.cols() == specs.cond_width && f_con.rows() == points.rows(), ErrorCode::kShape,
          "F_con layout mismatch");
  tensor::Tape tape;
  VarMap vars;
  for (const auto& [name, t] : params)
    if (name.rfind(kGeometryPrefix, 0) == 0) vars.emplace(name, tape.constant(t));
  Var input = ops::concat_cols(
      {tape.constant(encode_rows(points, specs.position_freq)), tape.constant(f_con)});
  const Tensor& out = nn::eval_mlp(specs.geometry, vars, kGeometryPrefix, input).value();
  std::vector<double> sdf(static_cast<std::size_t>(points.rows()));
  for (std::int64_t r = 0; r < points.rows(); ++r) sdf[r] = out.at(r, 0);
  return sdf;
}

Var eval_color_field(const FieldSpecs& specs, const VarMap& params, Var f_c, const Tensor& dirs,
                     Var normals, Var feature) {
  auto& tape = f_c.tape();
  Var encoded = tape.constant(encode_rows(dirs, specs.direction_freq));
  Var input = ops::concat_cols({f_c, encoded, normals, feature});
  return nn::eval_mlp(specs.color, params, kColorPrefix, input);
}

Var sharpness(const VarMap& params) { return ops::exp(tensor::lookup(params, kSharpnessName)); }

double sdf_to_alpha(double s, double s_next, double h) {
  require(h > 0, ErrorCode::kInvalidArgument, "sharpness must be positive");
  return kernels::neus_alpha(s, s_next, h);
}

Tensor Conditioning::normalize(const Tensor& world_points) const {
  Tensor out(world_points.shape());
  for (std::int64_t r = 0; r < world_points.rows(); ++r)
    for (int d = 0; d < 3; ++d) out.at(r, d) = (world_points.at(r, d) - centre[d]) / scale;
  return out;
}

Var Conditioning::features(const Tensor& world_points) const {
  require(semantic_map != nullptr, ErrorCode::kInvalidArgument, "conditioning lacks a semantic map");
  return conditioning::fetch_batch(color_map, color_ratio, *semantic_map, reference_camera,
                                   world_points, normalize(world_points), joints_normalized,
                                   hand_k);
}

std::vector<double> coarse_depths(double z_near, double z_far, int n, std::mt19937_64* rng) {
  require(n >= 1 && z_far > z_near, ErrorCode::kInvalidArgument, "bad coarse sampling request");
  std::vector<double> z(n);
  const double step = (z_far - z_near) / n;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < n; ++i) z[i] = z_near + step * (i + (rng ? u(*rng) : 0.5));
  return z;
}

std::vector<double> hierarchical_upsample(const std::vector<double>& depths,
                                          const std::vector<double>& weights, int n_fine,
                                          double z_near, double z_far, std::mt19937_64* rng) {
  require(depths.size() == weights.size() && !depths.empty(), ErrorCode::kShape,
          "depths and weights differ in length");
  require(n_fine >= 0, ErrorCode::kInvalidArgument, "n_fine must be non-negative");
  std::vector<double> fine;
  fine.reserve(n_fine);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const std::size_t intervals = depths.size() - 1;
  double total = 0;
  for (double w : weights) total += std::max(w, 0.0);
  if (total <= 0 || intervals == 0) {
    // No usable distribution: uniform over the ray bounds.
    for (int j = 0; j < n_fine; ++j)
      fine.push_back(z_near + (z_far - z_near) * (rng ? u(*rng) : (j + 0.5) / n_fine));
  } else {
    std::vector<double> cdf(intervals + 1, 0.0);
    for (std::size_t i = 0; i < intervals; ++i)
      cdf[i + 1] = cdf[i] + std::max(weights[i], 0.0) + 1e-5;
    for (auto& c : cdf) c /= cdf.back();
    for (int j = 0; j < n_fine; ++j) {
      const double q = rng ? u(*rng) : (j + 0.5) / n_fine;
      const auto it = std::upper_bound(cdf.begin(), cdf.end(), q);
      const std::size_t i = std::min<std::size_t>(
          std::max<std::ptrdiff_t>(it - cdf.begin() - 1, 0), intervals - 1);
      const double span = cdf[i + 1] - cdf[i];
      const double t = span > 0 ? (q - cdf[i]) / span : 0.5;
      fine.push_back(depths[i] + t * (depths[i + 1] - depths[i]));
    }
  }
  std::vector<double> merged(depths);
  merged.insert(merged.end(), fine.begin(), fine.end());
  std::sort(merged.begin(), merged.end());
  for (std::size_t i = 1; i < merged.size(); ++i)
    if (merged[i] <= merged[i - 1]) merged[i] = std::nextafter(merged[i - 1], z_far);
  for (auto& z : merged) z = std::clamp(z, z_near, z_far);
  return merged;
}

BatchRender render_batch(const FieldSpecs& specs, const VarMap& params, const Conditioning& cond,
                         const std::vector<geometry::Ray>& rays, const RenderOptions& options,
                         std::mt19937_64* rng) {
  require(!rays.empty(), ErrorCode::kEmptyInput, "render_batch: no rays");
  require(options.n_coarse >= 2 && options.n_fine >= 0, ErrorCode::kInvalidArgument,
          "render_batch: need n_coarse >= 2");
  const auto num_rays = static_cast<std::int64_t>(rays.size());
  const int nc = options.n_coarse;
  const int n = options.fixed_depths ? static_cast<int>(options.fixed_depths->cols())
                                     : nc + options.n_fine;
  std::mt19937_64* jitter = options.stratified ? rng : nullptr;

  std::vector<std::vector<double>> coarse(num_rays);
  if (!options.fixed_depths)
    for (std::int64_t r = 0; r < num_rays; ++r)
      coarse[r] = coarse_depths(rays[r].z_near, rays[r].z_far, nc, jitter);

  BatchRender out;
  out.depths = Tensor({num_rays, n});
  if (options.fixed_depths) {
    require(options.fixed_depths->rows() == num_rays && n >= 2, ErrorCode::kShape,
            "fixed depths do not match the ray batch");
    out.depths = *options.fixed_depths;
  } else if (options.n_fine > 0) {
    Tensor pts({num_rays * nc, 3});
    for (std::int64_t r = 0; r < num_rays; ++r)
      for (int i = 0; i < nc; ++i) {
        const Vector3d p = rays[r].at(coarse[r][i]);
        for (int d = 0; d < 3; ++d) pts.at(r * nc + i, d) = p[d];
      }
    // Coarse pass is value-only and lives on a scratch tape.
    tensor::Tape scratch;
    Conditioning value_cond = cond;
    value_cond.color_map = scratch.constant(cond.color_map.value());
    const Tensor f_con = value_cond.features(pts).value();
    ParamMap geo;
    for (const auto& [name, v] : params)
      if (name.rfind(kGeometryPrefix, 0) == 0) geo.emplace(name, v.value());
    const auto sdf = eval_sdf_values(specs, geo, cond.normalize(pts), f_con);
    const double h = std::exp(tensor::lookup(params, kSharpnessName).value()[0]);
    std::vector<double> w(sdf.size());
    kernels::neus_weights_serial(sdf, h, num_rays, nc, w);
    for (std::int64_t r = 0; r < num_rays; ++r) {
      const std::vector<double> wr(w.begin() + r * nc, w.begin() + (r + 1) * nc);
      const auto merged = hierarchical_upsample(coarse[r], wr, options.n_fine, rays[r].z_near,
                                                rays[r].z_far, nullptr);
      std::copy(merged.begin(), merged.end(), out.depths.values().begin() + r * n);
    }
  } else {
    for (std::int64_t r = 0; r < num_rays; ++r)
      std::copy(coarse[r].begin(), coarse[r].end(), out.depths.values().begin() + r * n);
  }

  Tensor world({num_rays * n, 3});
  Tensor dirs({num_rays * n, 3});
  for (std::int64_t r = 0; r < num_rays; ++r)
    for (int i = 0; i < n; ++i) {
      const Vector3d p = rays[r].at(out.depths.at(r, i));
      for (int d = 0; d < 3; ++d) {
        world.at(r * n + i, d) = p[d];
        dirs.at(r * n + i, d) = rays[r].direction[d];
      }
    }
  out.sample_points = cond.normalize(world);
  Var f_con = cond.features(world);
  const auto geo = eval_geometric_field(specs, params, out.sample_points, f_con);
  out.weights = ops::neus_weights(ops::reshape(geo.sdf, {num_rays, n}), sharpness(params));
  const auto fc_begin = specs.cond_width - specs.color_channels;
  Var f_c = ops::slice_cols(f_con, fc_begin, specs.cond_width);
  Var rgb = eval_color_field(specs, params, f_c, dirs, geo.gradient, geo.feature);
  out.color = ops::composite(out.weights, rgb);
  out.opacity = ops::row_sum(out.weights);
  out.normal = ops::composite(out.weights, geo.gradient);
  out.sample_gradient = geo.gradient;

  out.surface = Tensor({num_rays, 3});
  out.expected_depth = Tensor({num_rays});
  const Tensor& w = out.weights.value();
  for (std::int64_t r = 0; r < num_rays; ++r) {
    double total = 0, depth = 0;
    Vector3d acc = Vector3d::Zero();
    for (int i = 0; i + 1 < n; ++i) {
      const double mid = 0.5 * (out.depths.at(r, i) + out.depths.at(r, i + 1));
      total += w.at(r, i);
      depth += w.at(r, i) * mid;
      acc += w.at(r, i) * rays[r].at(mid);
    }
    const double denom = std::max(total, 1e-12);
    out.expected_depth[r] = depth / denom;
    const Vector3d s = (acc / denom - cond.centre) / cond.scale;
    for (int d = 0; d < 3; ++d) out.surface.at(r, d) = s[d];
  }
  return out;
}

RenderOutput render_ray_analytic(const AnalyticField& field, const geometry::Ray& ray, int n_coarse,
                                 int n_fine, double h, std::mt19937_64* rng, RaySamples* samples) {
  require(n_coarse >= 2 && n_fine >= 0 && h > 0, ErrorCode::kInvalidArgument,
          "render_ray_analytic: bad sampling request");
  auto sdf_along = [&](const std::vector<double>& z) {
    std::vector<double> s(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) s[i] = field.sdf(ray.at(z[i]));
    return s;
  };
  std::vector<double> z = coarse_depths(ray.z_near, ray.z_far, n_coarse, rng);
  if (n_fine > 0) {
    const auto s = sdf_along(z);
    std::vector<double> w(z.size());
    kernels::neus_weights_serial(s, h, 1, static_cast<std::int64_t>(z.size()), w);
    z = hierarchical_upsample(z, w, n_fine, ray.z_near, ray.z_far, nullptr);
  }
  const auto s = sdf_along(z);
  std::vector<double> w(z.size());
  kernels::neus_weights_serial(s, h, 1, static_cast<std::int64_t>(z.size()), w);
  RenderOutput out;
  Vector3d rgb = Vector3d::Zero();
  Vector3d surface = Vector3d::Zero();
  double depth = 0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const Vector3d p = ray.at(z[i]);
    rgb += w[i] * field.color(p, ray.direction);
    out.normal += w[i] * field.gradient(p);
    out.opacity += w[i];
    if (i + 1 < z.size()) {
      const double mid = 0.5 * (z[i] + z[i + 1]);
      depth += w[i] * mid;
      surface += w[i] * ray.at(mid);
    }
  }
  const double denom = std::max(out.opacity, 1e-12);
  out.depth = depth / denom;
  out.surface = surface / denom;
  out.color = {rgb[0], rgb[1], rgb[2]};
  if (samples) *samples = {z, s, w};
  return out;
}

AnalyticField analytic_sphere(const Vector3d& centre, double radius, const Vector3d& rgb) {
  AnalyticField f;
  f.sdf = [=](const Vector3d& p) { return (p - centre).norm() - radius; };
  f.gradient = [=](const Vector3d& p) {
    const Vector3d d = p - centre;
    const double len = d.norm();
    return len > 0 ? Vector3d(d / len) : Vector3d(Vector3d::UnitZ());
  };
  f.color = [=](const Vector3d&, const Vector3d&) { return rgb; };
  return f;
}

}  // namespace occlumesh::render
