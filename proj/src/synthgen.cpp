#include "occlumesh/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>

#include "occlumesh/metrics.hpp"

namespace occlumesh::synth {

namespace {

std::vector<double> vec_json(const Vector3d& v) { return {v.x(), v.y(), v.z()}; }
Vector3d json_vec(const nlohmann::json& j) {
  require(j.is_array() && j.size() == 3, ErrorCode::kSchema, "expected a 3-vector");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

Vector3d random_unit(std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Vector3d v(g(rng), g(rng), g(rng));
  return v.normalized();
}

const Vector3d kLight = Vector3d(0.35, 0.8, -0.45).normalized();
const Vector3d kSkin(0.86, 0.66, 0.52);
constexpr double kAmbient = 0.45;

double shade(const Vector3d& normal) { return kAmbient + (1 - kAmbient) * std::max(0.0, normal.dot(kLight)); }

// Nearest positive hit of a ray with a capsule, or -1.
double ray_capsule(const Vector3d& ro, const Vector3d& rd, const hand::Capsule& cap) {
  const Vector3d ba = cap.b - cap.a, oa = ro - cap.a;
  const double baba = ba.dot(ba), bard = ba.dot(rd), baoa = ba.dot(oa), rdoa = rd.dot(oa),
               oaoa = oa.dot(oa);
  const double r2 = cap.radius * cap.radius;
  auto sphere = [&](const Vector3d& centre) {
    const Vector3d oc = ro - centre;
    const double b = rd.dot(oc), c = oc.dot(oc) - r2, h = b * b - c;
    return h > 0 ? -b - std::sqrt(h) : -1.0;
  };
  const double a = baba - bard * bard;
  if (baba > 0 && a > 1e-14) {
    const double b = baba * rdoa - baoa * bard;
    const double c = baba * oaoa - baoa * baoa - r2 * baba;
    const double h = b * b - a * c;
    if (h < 0) return -1.0;
    const double t = (-b - std::sqrt(h)) / a;
    const double y = baoa + t * bard;
    if (y > 0 && y < baba) return t;
    return sphere(y <= 0 ? cap.a : cap.b);
  }
  const double ta = sphere(cap.a), tb = sphere(cap.b);
  if (ta < 0) return tb;
  if (tb < 0) return ta;
  return std::min(ta, tb);
}

Vector3d capsule_normal(const Vector3d& p, const hand::Capsule& cap) {
  const Vector3d ba = cap.b - cap.a;
  const double len2 = ba.squaredNorm();
  const double t = len2 > 0 ? std::clamp((p - cap.a).dot(ba) / len2, 0.0, 1.0) : 0.0;
  const Vector3d n = p - (cap.a + t * ba);
  return n.norm() > 0 ? Vector3d(n.normalized()) : Vector3d(Vector3d::UnitY());
}

}  // namespace

// --- shapes -------------------------------------------------------------------

double Superquadric::inside_outside(const Vector3d& p) const {
  const Vector3d q = rotation.conjugate() * (p - centre);
  const double x = std::pow(std::abs(q.x() / scale.x()), 2.0 / e2);
  const double y = std::pow(std::abs(q.y() / scale.y()), 2.0 / e2);
  const double z = std::pow(std::abs(q.z() / scale.z()), 2.0 / e1);
  return std::pow(x + y, e2 / e1) + z;
}

double Superquadric::radial_distance(const Vector3d& p) const {
  const double len = (p - centre).norm();
  if (len < 1e-12) return -scale.minCoeff();
  const double f = inside_outside(p);
  return len * (1.0 - std::pow(f, -e1 / 2.0));
}

nlohmann::json Superquadric::to_json() const {
  return {{"centre", vec_json(centre)},
          {"scale", vec_json(scale)},
          {"e1", e1},
          {"e2", e2},
          {"rotation_wxyz", {rotation.w(), rotation.x(), rotation.y(), rotation.z()}},
          {"color", vec_json(color)},
          {"part_id", part_id}};
}

Superquadric Superquadric::from_json(const nlohmann::json& j) {
  Superquadric s;
  s.centre = json_vec(j.at("centre"));
  s.scale = json_vec(j.at("scale"));
  s.e1 = j.at("e1").get<double>();
  s.e2 = j.at("e2").get<double>();
  const auto& q = j.at("rotation_wxyz");
  s.rotation = Eigen::Quaterniond(q[0].get<double>(), q[1].get<double>(), q[2].get<double>(),
                                  q[3].get<double>());
  s.color = json_vec(j.at("color"));
  s.part_id = j.at("part_id").get<int>();
  return s;
}

double ObjectSpec::sdf(const Vector3d& p) const {
  double d = std::numeric_limits<double>::infinity();
  for (const auto& part : parts) d = std::min(d, part.radial_distance(p));
  return d;
}

int ObjectSpec::nearest_part(const Vector3d& p) const {
  int best = 0;
  double d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const double di = parts[i].radial_distance(p);
    if (di < d) {
      d = di;
      best = static_cast<int>(i);
    }
  }
  return best;
}

Vector3d ObjectSpec::albedo(const Vector3d& p) const {
  const auto& part = parts[nearest_part(p)];
  // Soft bands along the part's local z so views are not uniformly coloured.
  const Vector3d q = part.rotation.conjugate() * (p - part.centre);
  const double band = 0.82 + 0.18 * std::cos(q.z() / part.scale.z() * 2.5 * std::numbers::pi);
  return (part.color * band).cwiseMin(1.0);
}

double ObjectSpec::bounding_radius(const Vector3d& centre) const {
  double r = 0;
  for (const auto& part : parts) r = std::max(r, (part.centre - centre).norm() + part.scale.norm());
  return r;
}

nlohmann::json ObjectSpec::to_json() const {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& p : parts) arr.push_back(p.to_json());
  return {{"family", "superquadric_union"}, {"parts", arr}};
}

ObjectSpec ObjectSpec::from_json(const nlohmann::json& j) {
  ObjectSpec o;
  for (const auto& p : j.at("parts")) o.parts.push_back(Superquadric::from_json(p));
  require(!o.parts.empty(), ErrorCode::kSchema, "object has no parts");
  return o;
}

nlohmann::json SceneSpec::to_json() const {
  nlohmann::json cams = nlohmann::json::array();
  for (const auto& c : cameras) cams.push_back(c.to_json());
  return {{"seed", seed},
          {"attempt", attempt},
          {"object", object.to_json()},
          {"hand_pose", pose.to_json()},
          {"skeleton", hand::HandSkeleton::standard().to_json()},
          {"centre", vec_json(centre)},
          {"object_radius", object_radius},
          {"trajectory_radius", trajectory_radius},
          {"cameras", cams}};
}

SceneSpec SceneSpec::from_json(const nlohmann::json& j) {
  SceneSpec s;
  s.seed = j.at("seed").get<std::uint64_t>();
  s.attempt = j.at("attempt").get<int>();
  s.object = ObjectSpec::from_json(j.at("object"));
  s.pose = hand::HandPose::from_json(j.at("hand_pose"));
  s.centre = json_vec(j.at("centre"));
  s.object_radius = j.at("object_radius").get<double>();
  s.trajectory_radius = j.at("trajectory_radius").get<double>();
  for (const auto& c : j.at("cameras")) s.cameras.push_back(geometry::Camera::from_json(c));
  return s;
}

// --- generation -----------------------------------------------------------------

std::uint64_t split_seed(std::uint64_t base_seed, std::uint64_t index) {
  // splitmix64 of the combined stream position.
  std::uint64_t z = base_seed + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace {

ObjectSpec random_object(std::mt19937_64& rng) {
  ObjectSpec o;
  const int count = 2 + static_cast<int>(rng() % 3);
  Superquadric body;
  body.scale = Vector3d(uniform(rng, 0.03, 0.05), uniform(rng, 0.03, 0.055), uniform(rng, 0.03, 0.05));
  body.e1 = uniform(rng, 0.3, 1.2);
  body.e2 = uniform(rng, 0.3, 1.2);
  body.rotation = Eigen::Quaterniond(Eigen::AngleAxisd(uniform(rng, 0, 2 * std::numbers::pi), random_unit(rng)));
  body.color = Vector3d(uniform(rng, 0.15, 0.95), uniform(rng, 0.15, 0.95), uniform(rng, 0.15, 0.95));
  body.part_id = 1;
  o.parts.push_back(body);
  for (int i = 1; i < count; ++i) {
    Superquadric part;
    const Vector3d dir = random_unit(rng);
    // Attach near the body surface so the union stays connected.
    part.centre = body.centre + dir.cwiseProduct(body.scale) * uniform(rng, 0.7, 1.0);
    part.scale = Vector3d(uniform(rng, 0.012, 0.028), uniform(rng, 0.012, 0.028), uniform(rng, 0.012, 0.03));
    part.e1 = uniform(rng, 0.3, 1.2);
    part.e2 = uniform(rng, 0.3, 1.2);
    part.rotation = Eigen::Quaterniond(Eigen::AngleAxisd(uniform(rng, 0, 2 * std::numbers::pi), random_unit(rng)));
    part.color = Vector3d(uniform(rng, 0.15, 0.95), uniform(rng, 0.15, 0.95), uniform(rng, 0.15, 0.95));
    part.part_id = i + 1;
    o.parts.push_back(part);
  }
  return o;
}

// Minimum over sample points along every capsule of the object SDF minus radius.
double capsule_clearance(const ObjectSpec& object, const hand::Capsule& c) {
  double best = std::numeric_limits<double>::infinity();
  for (int s = 0; s <= 8; ++s) {
    const Vector3d p = c.a + (c.b - c.a) * (s / 8.0);
    best = std::min(best, object.sdf(p) - c.radius);
  }
  return best;
}

struct Grasp {
  hand::HandPose pose;
  int contacts = 0;
};

// Places the palm against the surface along `dir` and curls each finger until
// it touches. Finger f owns joints 1 + 3f .. 3 + 3f and capsules 4f .. 4f + 3,
// the first of which lies in the palm.
Grasp try_grasp(const ObjectSpec& object, const Vector3d& centre, double bound, const Vector3d& dir,
                std::mt19937_64& rng) {
  const auto skel = hand::HandSkeleton::standard();
  double t_surface = 0;
  for (double t = 0; t <= 2 * bound; t += bound / 400)
    if (object.sdf(centre + t * dir) <= 0) t_surface = t;
  const Vector3d contact = centre + t_surface * dir;

  Vector3d x = random_unit(rng);
  x = (x - x.dot(dir) * dir).normalized();
  const Vector3d y = dir;
  const Vector3d z = x.cross(y);
  Eigen::Matrix3d r;
  r << x, y, z;
  const Vector3d palm_local(0.075, 0.0, 0.005);
  const Vector3d palm_world = contact + dir * (skel.capsule_radius() + 0.001);

  Grasp g;
  g.pose.angles.assign(skel.joint_count(), 0.0);
  g.pose.root = hand::rigid(r, palm_world - r * palm_local);

  for (int f = 0; f < 5; ++f) {
    double best_clear = std::numeric_limits<double>::infinity();
    for (double theta = 0; theta <= 1.6; theta += 0.04) {
      for (int k = 0; k < 3; ++k) g.pose.angles[1 + 3 * f + k] = theta;
      const auto caps = hand::hand_capsules(skel, hand::forward_kinematics(skel, g.pose));
      double clear = std::numeric_limits<double>::infinity();
      for (int k = 0; k < 3; ++k) clear = std::min(clear, capsule_clearance(object, caps[4 * f + 1 + k]));
      best_clear = clear;
      if (clear <= 0.003) break;
    }
    if (best_clear <= 0.005 && best_clear >= -0.004) ++g.contacts;
  }
  return g;
}

}  // namespace

SceneSpec generate_scene(std::uint64_t seed, const SynthConfig& config, int attempt) {
  require(config.views >= 1 && config.width >= 8 && config.height >= 8, ErrorCode::kConfig,
          "synthetic config needs >= 1 view and >= 8 pixel images");
  require(config.min_radius > 0 && config.max_radius >= config.min_radius, ErrorCode::kConfig,
          "bad trajectory radius range");
  std::mt19937_64 rng(split_seed(seed, 1000003ULL * static_cast<std::uint64_t>(attempt)));
  SceneSpec s;
  s.seed = seed;
  s.attempt = attempt;
  s.object = random_object(rng);

  // Centre and radius from the ground-truth surface itself.
  const auto mesh = object_mesh(s.object, s.object.parts[0].centre,
                                s.object.bounding_radius(s.object.parts[0].centre), 48);
  require(!mesh.vertices.empty(), ErrorCode::kGraspFailure, "object has no surface");
  Vector3d lo = mesh.vertices[0], hi = mesh.vertices[0];
  for (const auto& v : mesh.vertices) {
    lo = lo.cwiseMin(v);
    hi = hi.cwiseMax(v);
  }
  s.centre = 0.5 * (lo + hi);
  for (const auto& v : mesh.vertices) s.object_radius = std::max(s.object_radius, (v - s.centre).norm());
  s.object_radius *= 1.02;  // coarse mesh margin

  s.trajectory_radius = uniform(rng, config.min_radius, config.max_radius);
  const double elevation = config.elevation_deg * std::numbers::pi / 180.0;
  const double phase = uniform(rng, 0, 2 * std::numbers::pi);
  const double f = 0.3 * config.width * s.trajectory_radius / s.object_radius;
  for (int v = 0; v < config.views; ++v) {
    const double theta = phase + 2 * std::numbers::pi * v / config.views;
    const Vector3d eye = s.centre + s.trajectory_radius * Vector3d(std::cos(elevation) * std::sin(theta),
                                                                   std::sin(elevation),
                                                                   std::cos(elevation) * std::cos(theta));
    s.cameras.push_back(geometry::look_at(eye, s.centre, f, f, 0.5 * config.width,
                                          0.5 * config.height, config.width, config.height));
  }

  const double bound = s.object.bounding_radius(s.centre);
  for (int tries = 0; tries < 16; ++tries) {
    Vector3d dir = random_unit(rng);
    dir.y() *= 0.5;  // mostly side grasps
    dir.normalize();
    const Grasp g = try_grasp(s.object, s.centre, bound, dir, rng);
    if (g.contacts >= 3) {
      s.pose = g.pose;
      return s;
    }
  }
  fail(ErrorCode::kGraspFailure,
       "grasp placement failed for seed " + std::to_string(seed) + " attempt " + std::to_string(attempt));
}

metrics::Mesh object_mesh(const ObjectSpec& object, const Vector3d& centre, double radius,
                          int resolution) {
  const metrics::Bounds b{centre - Vector3d::Constant(1.1 * radius),
                          centre + Vector3d::Constant(1.1 * radius)};
  auto field = [&](const std::vector<Vector3d>& pts) {
    std::vector<double> v(pts.size());
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(pts.size()); ++i) v[i] = object.sdf(pts[i]);
    return v;
  };
  auto mesh = metrics::extract_mesh(field, b, resolution);
  mesh.colors.reserve(mesh.vertices.size());
  for (const auto& v : mesh.vertices) mesh.colors.push_back(object.albedo(v));
  mesh.face_parts.reserve(mesh.faces.size());
  for (const auto& f : mesh.faces) {
    const Vector3d c = (mesh.vertices[f[0]] + mesh.vertices[f[1]] + mesh.vertices[f[2]]) / 3.0;
    mesh.face_parts.push_back(object.parts[object.nearest_part(c)].part_id);
  }
  return mesh;
}

// --- rasterisation --------------------------------------------------------------

RasterOutput rasterize(const metrics::Mesh& mesh, const std::vector<hand::Capsule>& capsules,
                       const geometry::Camera& cam, const Vector3d& background) {
  const int w = cam.width(), h = cam.height();
  const std::size_t n = static_cast<std::size_t>(w) * h;
  RasterOutput out;
  out.rgb = Image(w, h, 3);
  out.depth.assign(n, std::numeric_limits<double>::infinity());
  out.object_mask = make_mask(w, h);
  out.labels.assign(n, 0);
  std::vector<int> face_at(n, -1);

  const Eigen::Matrix4d w2c = cam.world_to_cam();
  const double near = 1e-3;
  for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
    Vector3d pc[3];
    double px[3], py[3];
    bool clipped = false;
    for (int k = 0; k < 3; ++k) {
      pc[k] = (w2c * mesh.vertices[mesh.faces[f][k]].homogeneous()).head<3>();
      if (pc[k].z() <= near) clipped = true;
      px[k] = cam.fx() * pc[k].x() / pc[k].z() + cam.cx();
      py[k] = cam.fy() * pc[k].y() / pc[k].z() + cam.cy();
    }
    if (clipped) continue;
    const double area = (px[1] - px[0]) * (py[2] - py[0]) - (px[2] - px[0]) * (py[1] - py[0]);
    if (std::abs(area) < 1e-12 || !std::isfinite(area)) {
      ++out.degenerate_triangles;
      continue;
    }
    const int x0 = std::max(0, static_cast<int>(std::floor(std::min({px[0], px[1], px[2]}) - 0.5)));
    const int x1 = std::min(w - 1, static_cast<int>(std::ceil(std::max({px[0], px[1], px[2]}) - 0.5)));
    const int y0 = std::max(0, static_cast<int>(std::floor(std::min({py[0], py[1], py[2]}) - 0.5)));
    const int y1 = std::min(h - 1, static_cast<int>(std::ceil(std::max({py[0], py[1], py[2]}) - 0.5)));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const double u = x + 0.5, v = y + 0.5;
        const double b0 = ((px[1] - u) * (py[2] - v) - (px[2] - u) * (py[1] - v)) / area;
        const double b1 = ((px[2] - u) * (py[0] - v) - (px[0] - u) * (py[2] - v)) / area;
        const double b2 = 1.0 - b0 - b1;
        if (b0 < 0 || b1 < 0 || b2 < 0) continue;
        // Perspective-correct depth: 1/z is affine in screen space.
        const double z = 1.0 / (b0 / pc[0].z() + b1 / pc[1].z() + b2 / pc[2].z());
        const std::size_t i = static_cast<std::size_t>(y) * w + x;
        if (z < out.depth[i]) {
          out.depth[i] = z;
          face_at[i] = static_cast<int>(f);
        }
      }
  }

  const Eigen::Matrix3d rot = cam.rotation();
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      const Vector3d d_cam((x + 0.5 - cam.cx()) / cam.fx(), (y + 0.5 - cam.cy()) / cam.fy(), 1.0);
      const Vector3d dir = (rot * d_cam).normalized();
      const double z_per_t = 1.0 / d_cam.norm();
      int hit_capsule = -1;
      double best = out.depth[i];
      for (std::size_t c = 0; c < capsules.size(); ++c) {
        const double t = ray_capsule(cam.center(), dir, capsules[c]);
        if (t > 0 && t * z_per_t < best) {
          best = t * z_per_t;
          hit_capsule = static_cast<int>(c);
        }
      }
      Vector3d color = background;
      if (hit_capsule >= 0) {
        out.depth[i] = best;
        const Vector3d p = cam.center() + dir * (best / z_per_t);
        color = kSkin * shade(capsule_normal(p, capsules[hit_capsule]));
        out.labels[i] = 255;
      } else if (face_at[i] >= 0) {
        const int f = face_at[i];
        const auto& t = mesh.faces[f];
        Vector3d albedo = Vector3d::Constant(0.6);
        if (!mesh.colors.empty())
          albedo = (mesh.colors[t[0]] + mesh.colors[t[1]] + mesh.colors[t[2]]) / 3.0;
        color = albedo * shade(mesh.face_normal(f));
        out.object_mask.at(x, y) = 1.0;
        out.labels[i] = static_cast<std::uint8_t>(mesh.face_parts.empty() ? 1 : mesh.face_parts[f]);
      }
      for (int c = 0; c < 3; ++c) out.rgb.at(x, y, c) = std::clamp(color[c], 0.0, 1.0);
    }
  return out;
}

SceneSample render_views(const SceneSpec& spec, const metrics::Mesh& mesh) {
  const auto skel = hand::HandSkeleton::standard();
  const auto capsules = hand::hand_capsules(skel, hand::forward_kinematics(skel, spec.pose));
  SceneSample sample;
  sample.spec = spec;
  sample.mesh = mesh;
  sample.views.resize(spec.cameras.size());
#pragma omp parallel for schedule(dynamic)
  for (std::int64_t v = 0; v < static_cast<std::int64_t>(spec.cameras.size()); ++v) {
    auto with_hand = rasterize(mesh, capsules, spec.cameras[v]);
    auto free = rasterize(mesh, {}, spec.cameras[v]);
    ViewSample& view = sample.views[v];
    view.rgb = std::move(with_hand.rgb);
    view.mask = std::move(with_hand.object_mask);
    view.parts = std::move(with_hand.labels);
    view.rgb_free = std::move(free.rgb);
    view.mask_full = std::move(free.object_mask);
  }
  return sample;
}

double covered_fraction(const ViewSample& view) {
  double full = 0, covered = 0;
  for (std::size_t i = 0; i < view.mask_full.data().size(); ++i) {
    full += view.mask_full.data()[i];
    covered += std::max(view.mask_full.data()[i] - view.mask.data()[i], 0.0);
  }
  return full > 0 ? covered / full : 0.0;
}

SceneSample generate_sample(std::uint64_t seed, const SynthConfig& config) {
  for (int attempt = 0; attempt < config.max_attempts; ++attempt) {
    SceneSpec spec;
    try {
      spec = generate_scene(seed, config, attempt);
    } catch (const Error& e) {
      if (e.code() == ErrorCode::kGraspFailure) continue;
      throw;
    }
    const auto mesh = object_mesh(spec.object, spec.centre, spec.object_radius, config.mesh_resolution);
    auto sample = render_views(spec, mesh);
    double best = 0;
    for (const auto& v : sample.views) best = std::max(best, covered_fraction(v));
    if (best >= config.min_cover) return sample;
  }
  fail(ErrorCode::kGraspFailure, "no grasp with enough hand occlusion for seed " + std::to_string(seed));
}

}  // namespace occlumesh::synth
