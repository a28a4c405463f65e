#include "occlumesh/conditioning.hpp"

#include <cmath>
#include <numbers>

#include <Eigen/Eigenvalues>

#include "occlumesh/ops.hpp"

namespace occlumesh::conditioning {

namespace {

void init_conv(const std::string& name, int out, int in, int k, std::mt19937_64& rng,
               ParamMap& params) {
  // He-uniform so the ReLU pyramid keeps its activation scale.
  const double bound = std::sqrt(6.0 / (in * k * k));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor w({out, in, k, k});
  for (auto& v : w.values()) v = dist(rng);
  params[name + ".w"] = std::move(w);
  params[name + ".b"] = Tensor({out}, 0.0);
}

}  // namespace

void init_encoder(const EncoderSpec& spec, std::mt19937_64& rng, ParamMap& params) {
  init_conv("enc.s1", spec.stage1, 3, 3, rng, params);
  init_conv("enc.s2", spec.stage2, spec.stage1, 3, rng, params);
  init_conv("enc.s3", spec.stage3, spec.stage2, 3, rng, params);
  init_conv("enc.fuse", spec.channels, spec.stage1 + spec.stage2 + spec.stage3, 1, rng, params);
  const double bound = 1.0 / std::sqrt(static_cast<double>(spec.stage3));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor g({spec.channels, spec.stage3});
  for (auto& v : g.values()) v = dist(rng);
  params["enc.global.w"] = std::move(g);
  params["enc.global.b"] = Tensor({spec.channels}, 0.0);
}

Tensor masked_image_tensor(const Image& rgb, const Mask& object_mask) {
  require(rgb.channels() >= 3 && rgb.same_size(object_mask), ErrorCode::kShape,
          "masked_image_tensor: RGB image and mask sizes differ");
  const int w = rgb.width(), h = rgb.height();
  Tensor t({3, h, w});
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        t[(static_cast<std::size_t>(c) * h + y) * w + x] = rgb.at(x, y, c) * object_mask.at(x, y);
  return t;
}

Var encode_reference(const EncoderSpec& spec, const VarMap& params, Var image_masked) {
  const auto& shape = image_masked.value().shape();
  require(shape.size() == 3 && shape[0] == 3, ErrorCode::kShape, "encoder expects [3, H, W]");
  require(shape[1] > 0 && shape[2] > 0, ErrorCode::kEmptyInput, "encoder input is empty");
  require(shape[1] % 8 == 0 && shape[2] % 8 == 0, ErrorCode::kShape,
          "encoder input size must be a multiple of 8");
  auto p = [&](const std::string& n) { return tensor::lookup(params, n); };
  Var s1 = ops::relu(ops::conv2d(image_masked, p("enc.s1.w"), p("enc.s1.b"), 2, 1));
  Var s2 = ops::relu(ops::conv2d(s1, p("enc.s2.w"), p("enc.s2.b"), 2, 1));
  Var s3 = ops::relu(ops::conv2d(s2, p("enc.s3.w"), p("enc.s3.b"), 2, 1));
  Var fused = ops::concat_channels({ops::avg_pool2x(s1), s2, ops::upsample_nearest2x(s3)});
  Var local = ops::conv2d(fused, p("enc.fuse.w"), p("enc.fuse.b"), 1, 0);
  Var global = ops::linear(ops::global_avg_pool(s3), p("enc.global.w"), p("enc.global.b"));
  require(local.value().dim(0) == spec.channels, ErrorCode::kShape,
          "encoder bottleneck width does not match spec channels");
  return ops::add_channel_vector(local, ops::reshape(global, {global.value().cols()}));
}

geometry::FeatureMap encode_reference(const EncoderSpec& spec, const ParamMap& params,
                                      const Tensor& image_masked) {
  tensor::Tape tape;
  auto vars = tensor::bind_parameters(tape, params, false);
  return {encode_reference(spec, vars, tape.constant(image_masked)).value(), kFeatureRatio};
}

PcaBasis fit_pca(const Eigen::MatrixXd& descriptors) {
  const auto n = descriptors.rows();
  const auto d = descriptors.cols();
  require(n >= 3 && d >= 3, ErrorCode::kRankDeficient, "PCA needs at least 3 samples of dim >= 3");
  PcaBasis basis;
  basis.mean = descriptors.colwise().mean().transpose();
  const Eigen::MatrixXd centred = descriptors.rowwise() - basis.mean.transpose();
  const Eigen::MatrixXd cov = centred.transpose() * centred / static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  require(solver.info() == Eigen::Success, ErrorCode::kRankDeficient, "PCA eigensolve failed");
  // Eigenvalues come back ascending.
  const auto& values = solver.eigenvalues();
  const double top = values(d - 1);
  require(top > 0 && values(d - 3) > 1e-10 * top, ErrorCode::kRankDeficient,
          "descriptor covariance has rank < 3");
  basis.components.resize(d, 3);
  for (int i = 0; i < 3; ++i) {
    basis.components.col(i) = solver.eigenvectors().col(d - 1 - i);
    basis.explained_variance(i) = values(d - 1 - i);
  }
  return basis;
}

Eigen::Vector3d pca_project(const PcaBasis& basis, const Eigen::VectorXd& descriptor) {
  require(descriptor.size() == basis.mean.size(), ErrorCode::kShape, "descriptor width mismatch");
  return basis.components.transpose() * (descriptor - basis.mean);
}

Eigen::Vector3d part_color(int part_id) {
  require(part_id >= 1 && part_id <= kMaxPartId, ErrorCode::kUnknownPartId,
          "unknown part id " + std::to_string(part_id));
  // Points on a Fibonacci sphere: distinct, fixed, unit length.
  const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
  const double y = 1.0 - 2.0 * (part_id - 0.5) / kMaxPartId;
  const double r = std::sqrt(1.0 - y * y);
  const double phi = golden * part_id;
  return Eigen::Vector3d(r * std::cos(phi), y, r * std::sin(phi)).normalized();
}

geometry::FeatureMap semantic_map_from_labels(const std::vector<std::uint8_t>& labels, int width,
                                              int height, const Mask& object_mask) {
  require(labels.size() == static_cast<std::size_t>(width) * height &&
              object_mask.width() == width && object_mask.height() == height,
          ErrorCode::kShape, "label map and mask sizes differ");
  Tensor t({3, height, width}, 0.0);
  const std::size_t plane = static_cast<std::size_t>(width) * height;
  for (std::size_t i = 0; i < plane; ++i) {
    const int id = labels[i];
    if (id == 0 || id == kHandLabel) continue;
    const Eigen::Vector3d c = part_color(id);
    const double m = object_mask.data()[i];
    if (m <= 0) continue;
    for (int k = 0; k < 3; ++k) t[k * plane + i] = c[k] * m;
  }
  return {std::move(t), 1.0};
}

geometry::FeatureMap semantic_map_from_descriptors(const PcaBasis& basis, const Tensor& descriptors,
                                                   const Mask& object_mask) {
  require(descriptors.shape().size() == 3, ErrorCode::kShape, "descriptors must be [D, H, W]");
  const auto d = descriptors.dim(0), h = descriptors.dim(1), w = descriptors.dim(2);
  require(object_mask.width() == w && object_mask.height() == h, ErrorCode::kShape,
          "descriptor and mask sizes differ");
  const std::size_t plane = static_cast<std::size_t>(w * h);
  Tensor t({3, h, w}, 0.0);
  Eigen::VectorXd v(d);
  for (std::size_t i = 0; i < plane; ++i) {
    const double m = object_mask.data()[i];
    if (m <= 0) continue;
    for (std::int64_t k = 0; k < d; ++k) v(k) = descriptors[k * plane + i];
    const Eigen::Vector3d f = pca_project(basis, v);
    for (int k = 0; k < 3; ++k) t[k * plane + i] = f[k] * m;
  }
  return {std::move(t), 1.0};
}

std::vector<double> PointFeatures::concatenated() const {
  std::vector<double> out(semantic);
  out.insert(out.end(), hand.begin(), hand.end());
  out.insert(out.end(), color.begin(), color.end());
  return out;
}

PointFeatures fetch_point_features(const geometry::FeatureMap& color_map,
                                   const geometry::FeatureMap& semantic_map,
                                   const geometry::Camera& cam, const Eigen::Vector3d& point,
                                   const hand::JointTransforms& joints, int k) {
  const auto proj = geometry::project_point(cam, point);
  PointFeatures f;
  f.semantic = geometry::bilinear_sample(semantic_map, proj.u, proj.v);
  f.hand = hand::hand_embedding(point, joints, k);
  f.color = geometry::bilinear_sample(color_map, proj.u, proj.v);
  return f;
}

Var fetch_batch(Var color_map, double color_ratio, const geometry::FeatureMap& semantic_map,
                const geometry::Camera& cam, const Tensor& points, const Tensor& embed_points,
                const hand::JointTransforms& embed_joints, int k) {
  require(points.cols() == 3 && embed_points.shape() == points.shape(), ErrorCode::kShape,
          "fetch_batch: points must be [N, 3] in both frames");
  const auto n = points.rows();
  std::vector<std::array<double, 2>> uv(n);
  for (std::int64_t r = 0; r < n; ++r) {
    const auto p = geometry::project_point(cam, {points.at(r, 0), points.at(r, 1), points.at(r, 2)});
    uv[r] = {p.u, p.v};
  }
  auto& tape = color_map.tape();
  tensor::Tape scratch;
  Var fs = tape.constant(
      geometry::sample_feature_map(scratch.constant(semantic_map.data), semantic_map.ratio, uv)
          .value());
  Var fh = tape.constant(hand::hand_embedding_batch(embed_points, embed_joints, k));
  Var fc = geometry::sample_feature_map(color_map, color_ratio, uv);
  return ops::concat_cols({fs, fh, fc});
}

hand::JointTransforms normalize_joints(const hand::JointTransforms& joints,
                                       const Eigen::Vector3d& centre, double scale) {
  require(scale > 0, ErrorCode::kInvalidArgument, "normalisation scale must be positive");
  hand::JointTransforms out = joints;
  for (auto& t : out) t.block<3, 1>(0, 3) = (t.block<3, 1>(0, 3) - centre) / scale;
  return out;
}

}  // namespace occlumesh::conditioning
