#pragma once

#include <array>
#include <filesystem>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace occlumesh::metrics {

using Eigen::Vector3d;

struct Mesh {
  std::vector<Vector3d> vertices;
  std::vector<std::array<int, 3>> faces;
  std::vector<Vector3d> colors;  // per vertex, empty or one per vertex
  std::vector<int> face_parts;   // per face, empty or one per face

  bool empty() const { return faces.empty(); }
  // Throws kShape on out-of-range indices, mismatched attribute counts or NaN.
  void validate() const;
  double area() const;
  // Divergence-theorem volume; positive for outward winding of a closed mesh.
  double signed_volume() const;
  Vector3d face_normal(std::size_t f) const;  // unit, zero for degenerate faces
};

// ASCII OBJ: "v x y z [r g b]" and 1-based "f a b c".
void write_obj(const std::filesystem::path& path, const Mesh& mesh);
Mesh read_obj(const std::filesystem::path& path);

}  // namespace occlumesh::metrics
