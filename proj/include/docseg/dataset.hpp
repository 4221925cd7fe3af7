#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "docseg/synthdoc.hpp"

namespace docseg {

inline constexpr const char* kDatasetVersion = "docseg-dataset/1";

struct Category {
  int id = 0;
  std::string name;
};

struct AnnotationRecord {
  int category_id = 0;
  BoxCXCYWH bbox;
  std::string mask_path;  // relative to the dataset directory
};

struct SampleRecord {
  std::int64_t sample_id = 0;
  std::string image_path;
  int height = 0;
  int width = 0;
  std::vector<AnnotationRecord> annotations;
};

/// Contents of manifest.json.
struct DatasetManifest {
  std::string version = kDatasetVersion;
  std::vector<Category> categories;
  std::vector<SampleRecord> samples;

  nlohmann::json to_json() const;
  /// Validates the schema; `source` names the file in error messages.
  static DatasetManifest from_json(const nlohmann::json& j, const std::string& source);
};

/// Writes manifest.json, images/<id>.png and masks/<id>_<k>.png under `dir`.
/// Rejects an empty sample list and duplicate sample ids.
DatasetManifest write_dataset(const std::vector<synthdoc::LayoutSample>& samples, const std::filesystem::path& dir,
                              const std::vector<std::string>& class_names);

/// Reads a dataset written by write_dataset. Annotations may carry an inline
/// RLE "segmentation" object instead of a mask file.
std::vector<synthdoc::LayoutSample> read_dataset(const std::filesystem::path& dir,
                                                 DatasetManifest* manifest = nullptr);

}  // namespace docseg
