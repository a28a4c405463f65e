#include "occlumesh/dataset.hpp"

#include <algorithm>
#include <cstdio>
#include <exception>
#include <fstream>

#include "occlumesh/error.hpp"

namespace occlumesh::data {

std::string scene_dir_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene_%05d", index);
  return buf;
}

std::string view_file_name(int view, const std::string& kind) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "v%02d_", view);
  return buf + kind + ".png";
}

bool is_occlusion_free_file(const fs::path& path) {
  const auto name = path.filename().string();
  auto ends_with = [&](const std::string& suffix) {
    return name.size() >= suffix.size() &&
           name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  return ends_with("_" + kRgbFree + ".png") || ends_with("_" + kMaskFull + ".png");
}

nlohmann::json synth_config_json(const synth::SynthConfig& c) {
  return {{"views", c.views},
          {"width", c.width},
          {"height", c.height},
          {"mesh_resolution", c.mesh_resolution},
          {"min_radius", c.min_radius},
          {"max_radius", c.max_radius},
          {"elevation_deg", c.elevation_deg},
          {"min_cover", c.min_cover},
          {"max_attempts", c.max_attempts}};
}

synth::SynthConfig synth_config_from_json(const nlohmann::json& j) {
  synth::SynthConfig c;
  c.views = j.at("views").get<int>();
  c.width = j.at("width").get<int>();
  c.height = j.at("height").get<int>();
  c.mesh_resolution = j.at("mesh_resolution").get<int>();
  c.min_radius = j.at("min_radius").get<double>();
  c.max_radius = j.at("max_radius").get<double>();
  c.elevation_deg = j.at("elevation_deg").get<double>();
  c.min_cover = j.at("min_cover").get<double>();
  c.max_attempts = j.at("max_attempts").get<int>();
  return c;
}

void write_scene(const fs::path& dir, const synth::SceneSample& sample,
                 const synth::SynthConfig& config) {
  nlohmann::json meta = {{"schema", kDatasetSchema},
                         {"config", synth_config_json(config)},
                         {"scene", sample.spec.to_json()}};
  {
    std::ofstream out(dir / kMetaFile);
    require(static_cast<bool>(out), ErrorCode::kIo, "cannot write " + (dir / kMetaFile).string());
    out << meta.dump(2) << '\n';
  }
  for (std::size_t v = 0; v < sample.views.size(); ++v) {
    const auto& view = sample.views[v];
    const int j = static_cast<int>(v);
    write_png(dir / view_file_name(j, kRgb), view.rgb);
    write_png(dir / view_file_name(j, kMask), view.mask);
    write_png(dir / view_file_name(j, kRgbFree), view.rgb_free);
    write_png(dir / view_file_name(j, kMaskFull), view.mask_full);
    write_label_png(dir / view_file_name(j, kParts), view.parts, view.rgb.width(),
                    view.rgb.height());
  }
  metrics::write_obj(dir / kMeshFile, sample.mesh);
}

std::vector<fs::path> write_dataset(const fs::path& root, int count, std::uint64_t seed,
                                    const synth::SynthConfig& config) {
  require(count >= 1, ErrorCode::kInvalidArgument, "scene count must be positive");
  fs::create_directories(root);
  std::vector<fs::path> dirs(count);
  std::vector<std::exception_ptr> errors(count);
#pragma omp parallel for schedule(dynamic, 1)
  for (int i = 0; i < count; ++i) {
    try {
      const auto sample = synth::generate_sample(synth::split_seed(seed, i), config);
      const auto dir = root / scene_dir_name(i);
#pragma omp critical(occlumesh_dataset_mkdir)
      fs::create_directories(dir);
      write_scene(dir, sample, config);
      dirs[i] = dir;
    } catch (...) {
      errors[i] = std::current_exception();
    }
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  return dirs;
}

std::vector<fs::path> list_scenes(const fs::path& root) {
  require(fs::is_directory(root), ErrorCode::kIo, "dataset directory not found: " + root.string());
  std::vector<fs::path> out;
  for (const auto& entry : fs::directory_iterator(root))
    if (entry.is_directory() && entry.path().filename().string().rfind("scene_", 0) == 0)
      out.push_back(entry.path());
  std::sort(out.begin(), out.end());
  require(!out.empty(), ErrorCode::kSchema, "no scene directories in " + root.string());
  return out;
}

void AccessLog::record(const fs::path& path) {
  std::lock_guard lock(mutex_);
  entries_.push_back(path.string());
}

std::vector<std::string> AccessLog::entries() const {
  std::lock_guard lock(mutex_);
  return entries_;
}

void AccessLog::clear() {
  std::lock_guard lock(mutex_);
  entries_.clear();
}

void AccessLog::write(const fs::path& path) const {
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorCode::kIo, "cannot write " + path.string());
  for (const auto& e : entries()) out << e << '\n';
}

SceneReader::SceneReader(fs::path dir, AccessPolicy policy, AccessLog* log)
    : dir_(std::move(dir)), policy_(policy), log_(log) {
  const auto path = open(kMetaFile);
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::kIo, "cannot read " + path.string());
  nlohmann::json meta;
  try {
    in >> meta;
    require(meta.at("schema").get<int>() == kDatasetSchema, ErrorCode::kSchema,
            "unsupported dataset schema in " + path.string());
    config_ = synth_config_from_json(meta.at("config"));
    spec_ = synth::SceneSpec::from_json(meta.at("scene"));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kSchema, "malformed " + path.string() + ": " + e.what());
  }
  require(!spec_.cameras.empty(), ErrorCode::kSchema, "scene has no cameras: " + dir_.string());
}

fs::path SceneReader::open(const std::string& name) const {
  const auto path = dir_ / name;
  require(policy_ == AccessPolicy::kAll || !is_occlusion_free_file(path), ErrorCode::kConfig,
          "occlusion-free data is not readable in this stage: " + path.string());
  if (log_) log_->record(path);
  return path;
}

void SceneReader::check_view(int view) const {
  require(view >= 0 && view < views(), ErrorCode::kInvalidArgument,
          "view index " + std::to_string(view) + " out of range");
}

Image SceneReader::rgb(int view) const {
  check_view(view);
  return read_png(open(view_file_name(view, kRgb)));
}

Mask SceneReader::mask(int view) const {
  check_view(view);
  return read_png(open(view_file_name(view, kMask)));
}

std::vector<std::uint8_t> SceneReader::parts(int view) const {
  check_view(view);
  int w = 0, h = 0;
  return read_label_png(open(view_file_name(view, kParts)), w, h);
}

Image SceneReader::rgb_free(int view) const {
  check_view(view);
  return read_png(open(view_file_name(view, kRgbFree)));
}

Mask SceneReader::mask_full(int view) const {
  check_view(view);
  return read_png(open(view_file_name(view, kMaskFull)));
}

metrics::Mesh SceneReader::ground_truth() const { return metrics::read_obj(open(kMeshFile)); }

}  // namespace occlumesh::data
