#include "docseg/dataset.hpp"

#include <cstdio>
#include <fstream>
#include <set>

#include "docseg/errors.hpp"
#include "docseg/image_io.hpp"
#include "docseg/rle.hpp"

namespace docseg {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string padded_id(std::int64_t id) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%06lld", static_cast<long long>(id));
  return buf;
}

}  // namespace

json DatasetManifest::to_json() const {
  json cats = json::array();
  for (const auto& c : categories) cats.push_back({{"id", c.id}, {"name", c.name}});
  json samples_j = json::array();
  for (const auto& s : samples) {
    json anns = json::array();
    for (const auto& a : s.annotations)
      anns.push_back({{"category_id", a.category_id},
                      {"bbox", {a.bbox.cx, a.bbox.cy, a.bbox.w, a.bbox.h}},
                      {"mask", a.mask_path}});
    samples_j.push_back({{"sample_id", s.sample_id},
                         {"image", s.image_path},
                         {"height", s.height},
                         {"width", s.width},
                         {"annotations", anns}});
  }
  return {{"version", version}, {"categories", cats}, {"samples", samples_j}};
}

DatasetManifest DatasetManifest::from_json(const json& j, const std::string& source) {
  DatasetManifest m;
  try {
    m.version = j.at("version").get<std::string>();
    if (m.version != kDatasetVersion)
      throw IoError(source, "schema version mismatch: expected " + std::string(kDatasetVersion) + ", found " + m.version);
    for (const auto& c : j.at("categories")) m.categories.push_back({c.at("id").get<int>(), c.at("name").get<std::string>()});
    for (size_t i = 0; i < m.categories.size(); ++i)
      if (m.categories[i].id != static_cast<int>(i)) throw IoError(source, "category ids must be dense from 0");
    for (const auto& s : j.at("samples")) {
      SampleRecord rec;
      rec.sample_id = s.at("sample_id").get<std::int64_t>();
      rec.image_path = s.at("image").get<std::string>();
      rec.height = s.at("height").get<int>();
      rec.width = s.at("width").get<int>();
      for (const auto& a : s.at("annotations")) {
        AnnotationRecord ann;
        ann.category_id = a.at("category_id").get<int>();
        if (ann.category_id < 0 || ann.category_id >= static_cast<int>(m.categories.size()))
          throw IoError(source, "annotation references unknown category id " + std::to_string(ann.category_id));
        const auto bb = a.at("bbox").get<std::vector<double>>();
        if (bb.size() != 4) throw IoError(source, "bbox must have four entries");
        ann.bbox = {bb[0], bb[1], bb[2], bb[3]};
        if (a.contains("mask")) ann.mask_path = a.at("mask").get<std::string>();
        rec.annotations.push_back(std::move(ann));
      }
      m.samples.push_back(std::move(rec));
    }
  } catch (const json::exception& e) {
    throw IoError(source, std::string("malformed manifest: ") + e.what());
  }
  return m;
}

DatasetManifest write_dataset(const std::vector<synthdoc::LayoutSample>& samples, const fs::path& dir,
                              const std::vector<std::string>& class_names) {
  if (samples.empty()) throw InputError("write_dataset: refusing to write an empty dataset");
  std::error_code ec;
  fs::create_directories(dir / "images", ec);
  if (!ec) fs::create_directories(dir / "masks", ec);
  if (ec) throw IoError(dir.string(), "cannot create dataset directories: " + ec.message());

  DatasetManifest m;
  for (size_t c = 0; c < class_names.size(); ++c) m.categories.push_back({static_cast<int>(c), class_names[c]});
  std::set<std::int64_t> seen;
  for (const auto& s : samples) {
    if (!seen.insert(s.sample_id).second)
      throw InputError("write_dataset: duplicate sample id " + std::to_string(s.sample_id));
    SampleRecord rec;
    rec.sample_id = s.sample_id;
    rec.height = s.height();
    rec.width = s.width();
    rec.image_path = "images/" + padded_id(s.sample_id) + ".png";
    write_png(dir / rec.image_path, tensor_to_image(s.image));
    for (size_t k = 0; k < s.instances.size(); ++k) {
      const auto& inst = s.instances[k];
      if (inst.class_id < 0 || inst.class_id >= static_cast<int>(class_names.size()))
        throw InputError("write_dataset: instance class id without a category name");
      AnnotationRecord ann;
      ann.category_id = inst.class_id;
      ann.bbox = inst.box;
      ann.mask_path = "masks/" + padded_id(s.sample_id) + "_" + std::to_string(k) + ".png";
      write_png(dir / ann.mask_path, mask_to_image(inst.mask));
      rec.annotations.push_back(std::move(ann));
    }
    m.samples.push_back(std::move(rec));
  }
  const fs::path manifest_path = dir / "manifest.json";
  std::ofstream out(manifest_path);
  if (!out) throw IoError(manifest_path.string(), "cannot open for writing");
  out << m.to_json().dump(2) << "\n";
  if (!out) throw IoError(manifest_path.string(), "write failed");
  return m;
}

std::vector<synthdoc::LayoutSample> read_dataset(const fs::path& dir, DatasetManifest* manifest) {
  const fs::path manifest_path = dir / "manifest.json";
  std::ifstream in(manifest_path);
  if (!in) throw IoError(manifest_path.string(), "missing manifest");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw IoError(manifest_path.string(), std::string("invalid JSON: ") + e.what());
  }
  // Inline RLE masks are read straight from the raw JSON.
  DatasetManifest m = DatasetManifest::from_json(j, manifest_path.string());

  std::vector<synthdoc::LayoutSample> samples;
  for (size_t si = 0; si < m.samples.size(); ++si) {
    const auto& rec = m.samples[si];
    synthdoc::LayoutSample s;
    s.sample_id = rec.sample_id;
    const Image8 img = read_png(dir / rec.image_path);
    if (img.height != rec.height || img.width != rec.width)
      throw IoError((dir / rec.image_path).string(), "image size disagrees with manifest");
    s.image = image_to_tensor(img);
    if (s.image.size(0) == 1) s.image = s.image.expand({3, -1, -1}).contiguous();
    if (s.image.size(0) == 4) s.image = s.image.slice(0, 0, 3).contiguous();
    for (size_t k = 0; k < rec.annotations.size(); ++k) {
      const auto& ann = rec.annotations[k];
      synthdoc::Instance inst;
      inst.class_id = ann.category_id;
      inst.box = ann.bbox;
      const json& raw = j["samples"][si]["annotations"][k];
      if (!ann.mask_path.empty()) {
        const Image8 mimg = read_png(dir / ann.mask_path);
        if (mimg.height != rec.height || mimg.width != rec.width)
          throw IoError((dir / ann.mask_path).string(), "mask size disagrees with manifest");
        inst.mask = image_to_mask(mimg);
      } else if (raw.contains("segmentation")) {
        try {
          inst.mask = rle_decode(rle_from_json(raw["segmentation"]));
        } catch (const InputError& e) {
          throw IoError(manifest_path.string(), e.what());
        }
      } else {
        throw IoError(manifest_path.string(), "annotation has neither a mask file nor a segmentation");
      }
      s.instances.push_back(std::move(inst));
    }
    samples.push_back(std::move(s));
  }
  if (manifest) *manifest = std::move(m);
  return samples;
}

}  // namespace docseg
