#pragma once

#include <cstdint>
#include <filesystem>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "occlumesh/image.hpp"
#include "occlumesh/mesh.hpp"
#include "occlumesh/synthgen.hpp"

namespace occlumesh::data {

namespace fs = std::filesystem;

inline constexpr int kDatasetSchema = 1;
inline const std::string kMetaFile = "meta.json";
inline const std::string kMeshFile = "object_gt.obj";

// File kinds stored per view.
inline const std::string kRgb = "rgb";
inline const std::string kMask = "mask";
inline const std::string kRgbFree = "rgb_free";
inline const std::string kMaskFull = "mask_full";
inline const std::string kParts = "parts";

std::string scene_dir_name(int index);            // scene_00042
std::string view_file_name(int view, const std::string& kind);  // v03_mask.png
bool is_occlusion_free_file(const fs::path& path);

nlohmann::json synth_config_json(const synth::SynthConfig& config);
synth::SynthConfig synth_config_from_json(const nlohmann::json& j);

void write_scene(const fs::path& dir, const synth::SceneSample& sample,
                 const synth::SynthConfig& config);

// Generates scenes 0..count-1 under `root` from split_seed(seed, i), in
// parallel over scenes. Returns the scene directories in index order.
std::vector<fs::path> write_dataset(const fs::path& root, int count, std::uint64_t seed,
                                    const synth::SynthConfig& config);

// Scene directories under `root`, sorted by name.
std::vector<fs::path> list_scenes(const fs::path& root);

// Thread-safe record of every dataset file a reader opened.
class AccessLog {
 public:
  void record(const fs::path& path);
  std::vector<std::string> entries() const;
  void clear();
  void write(const fs::path& path) const;

 private:
  mutable std::mutex mutex_;
  std::vector<std::string> entries_;
};

enum class AccessPolicy { kAll, kOccludedOnly };

// Lazy reader of one scene directory. Under kOccludedOnly any attempt to
// read an occlusion-free file throws kConfig before the file is opened.
class SceneReader {
 public:
  explicit SceneReader(fs::path dir, AccessPolicy policy = AccessPolicy::kAll,
                       AccessLog* log = nullptr);

  const fs::path& dir() const { return dir_; }
  const synth::SceneSpec& spec() const { return spec_; }
  const synth::SynthConfig& config() const { return config_; }
  int views() const { return static_cast<int>(spec_.cameras.size()); }

  Image rgb(int view) const;
  Mask mask(int view) const;
  std::vector<std::uint8_t> parts(int view) const;
  Image rgb_free(int view) const;
  Mask mask_full(int view) const;
  metrics::Mesh ground_truth() const;

 private:
  fs::path open(const std::string& name) const;
  void check_view(int view) const;

  fs::path dir_;
  AccessPolicy policy_;
  AccessLog* log_;
  synth::SceneSpec spec_;
  synth::SynthConfig config_;
};

}  // namespace occlumesh::data
