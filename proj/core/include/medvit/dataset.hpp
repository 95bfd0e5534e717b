#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "medvit/phantom.hpp"
#include "medvit/volume.hpp"

namespace medvit {

// One subject entry of a dataset manifest. Paths are relative to the manifest directory.
struct SampleRecord {
  std::string subject_id;
  std::string volume_path;
  std::optional<std::string> label_path;
  std::optional<std::int64_t> class_label;
  std::optional<double> target;
  std::string split = "train";

  bool has_supervision() const { return label_path || class_label || target; }
};

// Manifest file name inside a dataset directory.
inline constexpr const char* kManifestName = "dataset.json";

std::vector<SampleRecord> read_manifest(const std::filesystem::path& dir);
void write_manifest(const std::filesystem::path& dir, const std::vector<SampleRecord>& records);

// Preprocessing applied when a dataset is loaded into memory.
struct Preprocess {
  bool normalize = true;
  std::int64_t pool_factor = 1;
  std::optional<std::array<std::int64_t, 3>> crop;
};

// Fully loaded subject.
struct Sample {
  SampleRecord record;
  Volume volume;
  std::optional<LabelVolume> labels;
};

struct Dataset {
  std::filesystem::path root;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  std::vector<std::string> subject_ids() const;
  // Index of a subject id; throws if absent.
  std::size_t index_of(const std::string& subject_id) const;
};

Dataset load_dataset(const std::filesystem::path& dir, const Preprocess& prep = {});

// Generates `count` phantoms (indices 0..count-1 of `spec`) into `dir` with a manifest.
// Label volumes are written only when the spec produces blobs.
std::vector<SampleRecord> write_phantom_dataset(const std::filesystem::path& dir, const PhantomSpec& spec,
                                                std::int64_t count);

// In-memory equivalent of write_phantom_dataset followed by load_dataset.
Dataset make_phantom_dataset(const PhantomSpec& spec, std::int64_t count, const Preprocess& prep = {});

}  // namespace medvit
