// Synthetic two-hand dataset, on-disk formats and checkpoints.
//
// Dataset directory layout:
//   manifest.json   schema version, labels, splits, normalization stats, generator spec
//   records.bin     concatenated little-endian records:
//                     "TSHM" | u16 version | u32 id | u16 label | u16 L | u32 M
//                     f32[L*166] frames | f32[M*3] object points | f32[18] camera
#ifndef TSHAMO_DATAKIT_HPP
#define TSHAMO_DATAKIT_HPP

#include "tshamo/diffcore.hpp"
#include "tshamo/motion.hpp"

#include "json.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace tshamo::datakit {

inline constexpr std::uint16_t kRecordVersion = 1;
inline constexpr int kManifestVersion = 1;
inline constexpr int kCameraFloats = 18;

struct SyntheticSpec {
  int num_classes = 6;
  int seqs_per_class = 100;
  int min_length = 20;
  int max_length = 48;
  double noise = 0.05;
  int object_points = 32;
  double val_fraction = 0.1;
  double test_fraction = 0.1;

  // Throws std::invalid_argument naming the offending field.
  void validate() const;
  friend bool operator==(const SyntheticSpec&, const SyntheticSpec&) = default;
};

nlohmann::json to_json(const SyntheticSpec& spec);
SyntheticSpec spec_from_json(const nlohmann::json& j);
// FNV-1a over the canonical JSON form, as 16 hex digits.
std::string spec_hash(const SyntheticSpec& spec);

struct SequenceRecord {
  std::uint32_t id = 0;
  motion::MotionSequence motion;  // label and length live here
  motion::ObjectPoints objects = motion::ObjectPoints(0, 3);
  motion::Camera camera;

  friend bool operator==(const SequenceRecord& a, const SequenceRecord& b);
};

struct Manifest {
  int schema_version = kManifestVersion;
  int num_classes = 0;
  std::vector<std::string> label_names;
  int max_frames = motion::kMaxFrames;
  int frame_width = motion::kFrameWidth;
  std::vector<std::uint32_t> train, val, test;
  motion::NormStats stats;
  std::uint64_t generator_seed = 0;
  SyntheticSpec spec;
  std::string spec_hash;

  friend bool operator==(const Manifest&, const Manifest&) = default;
};

struct Dataset {
  Manifest manifest;
  std::vector<SequenceRecord> records;  // records[i].id == i

  const SequenceRecord& record(std::uint32_t id) const;
  std::vector<const SequenceRecord*> split(const std::vector<std::uint32_t>& ids) const;
  friend bool operator==(const Dataset&, const Dataset&) = default;
};

// Deterministic in (spec, seed). Every stored value is exactly representable
// as a 32-bit float, so writing and reading back is lossless.
Dataset generate_synthetic_dataset(const SyntheticSpec& spec, std::uint64_t seed);

// Contacts recomputed from the stored MANO parameters and object points.
motion::ContactMap recompute_contact(const SequenceRecord& record, int frame, bool right,
                                     const motion::HandSkeleton& skeleton);

void write_records(const std::vector<SequenceRecord>& records, const std::string& path);
std::vector<SequenceRecord> read_records(const std::string& path);
std::string encode_record(const SequenceRecord& record);

nlohmann::json to_json(const Manifest& manifest);
Manifest manifest_from_json(const nlohmann::json& j);

void write_dataset(const Dataset& dataset, const std::string& dir);
Dataset read_dataset(const std::string& dir);

// Named float64 tensors plus free-form metadata.
struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, diffcore::Tensor> tensors;
};

void save_checkpoint(const Checkpoint& checkpoint, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Copies tensors named prefix + key into params. Every expected key must be
// present with the same shape; the error names the first mismatch.
void restore_parameters(const Checkpoint& checkpoint, const std::string& prefix, diffcore::ParameterSet& params);
void store_parameters(Checkpoint& checkpoint, const std::string& prefix, const diffcore::ParameterSet& params);
bool has_prefix(const Checkpoint& checkpoint, const std::string& prefix);

}  // namespace tshamo::datakit

#endif
