#include "medvit/dataset.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "medvit/error.hpp"

namespace medvit {
namespace fs = std::filesystem;

namespace {

nlohmann::json record_json(const SampleRecord& r) {
  nlohmann::json j{{"subject_id", r.subject_id}, {"volume", r.volume_path}, {"split", r.split}};
  if (r.label_path) j["labels"] = *r.label_path;
  if (r.class_label) j["class"] = *r.class_label;
  if (r.target) j["target"] = *r.target;
  return j;
}

SampleRecord record_from(const nlohmann::json& j) {
  SampleRecord r;
  r.subject_id = j.at("subject_id").get<std::string>();
  r.volume_path = j.at("volume").get<std::string>();
  r.split = j.value("split", std::string("train"));
  if (j.contains("labels")) r.label_path = j.at("labels").get<std::string>();
  if (j.contains("class")) r.class_label = j.at("class").get<std::int64_t>();
  if (j.contains("target")) r.target = j.at("target").get<double>();
  return r;
}

Sample preprocess(Sample s, const Preprocess& prep) {
  if (prep.pool_factor > 1) {
    s.volume = average_pool_resize(s.volume, prep.pool_factor);
    if (s.labels) {
      // Nearest (top-left) sampling keeps labels integral.
      using torch::indexing::Slice;
      const auto [w, d, h] = s.volume.spatial_shape();
      const auto f = prep.pool_factor;
      s.labels = LabelVolume(s.labels->labels
                                 .index({Slice(0, w * f, f), Slice(0, d * f, f), Slice(0, h * f, f)})
                                 .contiguous());
    }
  }
  if (prep.crop) {
    s.volume = center_crop(s.volume, *prep.crop);
    if (s.labels) s.labels = center_crop(*s.labels, *prep.crop);
  }
  if (prep.normalize) s.volume = normalize_intensity(s.volume);
  return s;
}

std::string subject_name(std::int64_t index) {
  std::ostringstream os;
  os << "sub-" << std::setw(4) << std::setfill('0') << index;
  return os.str();
}

}  // namespace

std::vector<SampleRecord> read_manifest(const fs::path& dir) {
  const auto path = dir / kManifestName;
  std::ifstream in(path);
  if (!in) throw IoError("missing dataset manifest " + path.string());
  try {
    const auto j = nlohmann::json::parse(in);
    std::vector<SampleRecord> records;
    for (const auto& item : j.at("samples")) records.push_back(record_from(item));
    return records;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed manifest " + path.string() + ": " + e.what());
  }
}

void write_manifest(const fs::path& dir, const std::vector<SampleRecord>& records) {
  fs::create_directories(dir);
  nlohmann::json j;
  j["samples"] = nlohmann::json::array();
  for (const auto& r : records) j["samples"].push_back(record_json(r));
  std::ofstream out(dir / kManifestName);
  out << j.dump(2) << "\n";
  if (!out) throw IoError("cannot write manifest in " + dir.string());
}

std::vector<std::string> Dataset::subject_ids() const {
  std::vector<std::string> ids;
  ids.reserve(samples.size());
  for (const auto& s : samples) ids.push_back(s.record.subject_id);
  return ids;
}

std::size_t Dataset::index_of(const std::string& subject_id) const {
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].record.subject_id == subject_id) return i;
  }
  throw Error("unknown subject id " + subject_id);
}

Dataset load_dataset(const fs::path& dir, const Preprocess& prep) {
  Dataset ds;
  ds.root = dir;
  for (auto& r : read_manifest(dir)) {
    Sample s;
    s.volume = load_volume(dir / r.volume_path);
    if (r.label_path) s.labels = load_label_volume(dir / *r.label_path);
    if (s.labels && s.labels->spatial_shape() != s.volume.spatial_shape()) {
      throw ShapeError("label volume shape differs from image for " + r.subject_id);
    }
    s.record = std::move(r);
    ds.samples.push_back(preprocess(std::move(s), prep));
  }
  if (ds.samples.empty()) throw Error("dataset " + dir.string() + " is empty");
  return ds;
}

std::vector<SampleRecord> write_phantom_dataset(const fs::path& dir, const PhantomSpec& spec, std::int64_t count) {
  if (count < 1) throw ConfigError("phantom count must be >= 1");
  PhantomGenerator gen(spec);
  fs::create_directories(dir);
  std::vector<SampleRecord> records;
  const bool with_labels = spec.blob_count.hi > 0;
  for (std::int64_t i = 0; i < count; ++i) {
    auto p = gen.generate(static_cast<std::uint64_t>(i));
    SampleRecord r;
    r.subject_id = subject_name(i);
    r.volume_path = r.subject_id + ".raw";
    save_volume(p.volume, dir / r.volume_path);
    if (with_labels) {
      r.label_path = r.subject_id + "_label.raw";
      save_label_volume(p.labels, dir / *r.label_path);
    }
    r.class_label = p.class_label;
    r.target = p.age;
    records.push_back(std::move(r));
  }
  write_manifest(dir, records);
  return records;
}

Dataset make_phantom_dataset(const PhantomSpec& spec, std::int64_t count, const Preprocess& prep) {
  if (count < 1) throw ConfigError("phantom count must be >= 1");
  PhantomGenerator gen(spec);
  Dataset ds;
  const bool with_labels = spec.blob_count.hi > 0;
  for (std::int64_t i = 0; i < count; ++i) {
    auto p = gen.generate(static_cast<std::uint64_t>(i));
    Sample s;
    s.record.subject_id = subject_name(i);
    s.record.volume_path = s.record.subject_id + ".raw";
    s.record.class_label = p.class_label;
    s.record.target = p.age;
    s.volume = std::move(p.volume);
    if (with_labels) {
      s.record.label_path = s.record.subject_id + "_label.raw";
      s.labels = std::move(p.labels);
    }
    ds.samples.push_back(preprocess(std::move(s), prep));
  }
  return ds;
}

}  // namespace medvit
