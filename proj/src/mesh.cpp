#include "occlumesh/mesh.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "occlumesh/error.hpp"

namespace occlumesh::metrics {

void Mesh::validate() const {
  const auto n = static_cast<int>(vertices.size());
  for (const auto& f : faces)
    for (int i : f) require(i >= 0 && i < n, ErrorCode::kShape, "mesh face index out of range");
  for (const auto& v : vertices) require(v.allFinite(), ErrorCode::kNonFinite, "mesh vertex is not finite");
  require(colors.empty() || colors.size() == vertices.size(), ErrorCode::kShape,
          "mesh colours must be per vertex");
  require(face_parts.empty() || face_parts.size() == faces.size(), ErrorCode::kShape,
          "mesh part ids must be per face");
}

Vector3d Mesh::face_normal(std::size_t f) const {
  const auto& t = faces[f];
  const Vector3d n = (vertices[t[1]] - vertices[t[0]]).cross(vertices[t[2]] - vertices[t[0]]);
  const double len = n.norm();
  return len > 0 ? Vector3d(n / len) : Vector3d(Vector3d::Zero());
}

double Mesh::area() const {
  double a = 0;
  for (const auto& t : faces)
    a += 0.5 * (vertices[t[1]] - vertices[t[0]]).cross(vertices[t[2]] - vertices[t[0]]).norm();
  return a;
}

double Mesh::signed_volume() const {
  double v = 0;
  for (const auto& t : faces) v += vertices[t[0]].dot(vertices[t[1]].cross(vertices[t[2]]));
  return v / 6.0;
}

void write_obj(const std::filesystem::path& path, const Mesh& mesh) {
  mesh.validate();
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorCode::kIo, "cannot write " + path.string());
  out.precision(9);
  for (std::size_t i = 0; i < mesh.vertices.size(); ++i) {
    const auto& v = mesh.vertices[i];
    out << "v " << v.x() << ' ' << v.y() << ' ' << v.z();
    if (!mesh.colors.empty()) {
      const auto& c = mesh.colors[i];
      out << ' ' << c.x() << ' ' << c.y() << ' ' << c.z();
    }
    out << '\n';
  }
  for (const auto& f : mesh.faces) out << "f " << f[0] + 1 << ' ' << f[1] + 1 << ' ' << f[2] + 1 << '\n';
  require(static_cast<bool>(out), ErrorCode::kIo, "failed writing " + path.string());
}

Mesh read_obj(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::kIo, "cannot read " + path.string());
  Mesh mesh;
  bool any_color = false;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ss(line);
    std::string tag;
    ss >> tag;
    if (tag == "v") {
      Vector3d v;
      ss >> v.x() >> v.y() >> v.z();
      require(!ss.fail(), ErrorCode::kIo, "malformed OBJ vertex: " + line);
      Vector3d c;
      if (ss >> c.x() >> c.y() >> c.z()) {
        any_color = true;
        mesh.colors.push_back(c);
      } else {
        mesh.colors.push_back(Vector3d::Constant(0.5));
      }
      mesh.vertices.push_back(v);
    } else if (tag == "f") {
      std::vector<int> idx;
      std::string tok;
      while (ss >> tok) idx.push_back(std::stoi(tok.substr(0, tok.find('/'))) - 1);
      require(idx.size() >= 3, ErrorCode::kIo, "malformed OBJ face: " + line);
      for (std::size_t k = 1; k + 1 < idx.size(); ++k) mesh.faces.push_back({idx[0], idx[k], idx[k + 1]});
    }
  }
  if (!any_color) mesh.colors.clear();
  mesh.validate();
  return mesh;
}

}  // namespace occlumesh::metrics
