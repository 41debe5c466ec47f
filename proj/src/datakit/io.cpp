#include "tshamo/datakit.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace tshamo::datakit {

namespace {

// Little-endian writer and reader, independent of host byte order.
class ByteWriter {
 public:
  void u8(std::uint8_t v) { out_.push_back(static_cast<char>(v)); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f32(double v) { u32(std::bit_cast<std::uint32_t>(static_cast<float>(v))); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void bytes(const std::string& s) { out_ += s; }
  std::string& str() { return out_; }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::string out_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::string& data) : data_(data) {}
  bool done() const { return pos_ == data_.size(); }
  std::size_t remaining() const { return data_.size() - pos_; }
  std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  double f32() { return static_cast<double>(std::bit_cast<float>(u32())); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void need(std::size_t n) const {
    if (remaining() < n) throw std::runtime_error("truncated");
  }

 private:
  std::uint64_t get(int n) {
    need(n);
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += n;
    return v;
  }
  const std::string& data_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path);
}

constexpr char kRecordMagic[4] = {'T', 'S', 'H', 'M'};
constexpr char kCheckpointMagic[4] = {'T', 'S', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;

void write_camera(ByteWriter& w, const motion::Camera& c) {
  for (double v : {c.fx, c.fy, c.cx, c.cy, c.width, c.height}) w.f32(v);
  for (int r = 0; r < 3; ++r)
    for (int k = 0; k < 3; ++k) w.f32(c.rotation(r, k));
  for (int k = 0; k < 3; ++k) w.f32(c.translation[k]);
}

motion::Camera read_camera(ByteReader& r) {
  motion::Camera c;
  for (double* v : {&c.fx, &c.fy, &c.cx, &c.cy, &c.width, &c.height}) *v = r.f32();
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 3; ++k) c.rotation(i, k) = r.f32();
  for (int k = 0; k < 3; ++k) c.translation[k] = r.f32();
  return c;
}

}  // namespace

std::string encode_record(const SequenceRecord& rec) {
  const auto& m = rec.motion;
  if (m.length < 1 || m.length > motion::kMaxFrames) throw std::invalid_argument("record: bad length");
  if (m.label < 0 || m.label > 0xffff) throw std::invalid_argument("record: label out of u16 range");
  ByteWriter w;
  w.bytes(std::string(kRecordMagic, 4));
  w.u16(kRecordVersion);
  w.u32(rec.id);
  w.u16(static_cast<std::uint16_t>(m.label));
  w.u16(static_cast<std::uint16_t>(m.length));
  w.u32(static_cast<std::uint32_t>(rec.objects.rows()));
  for (int i = 0; i < m.length; ++i)
    for (int d = 0; d < motion::kFrameWidth; ++d) w.f32(m.frames(i, d));
  for (Eigen::Index i = 0; i < rec.objects.rows(); ++i)
    for (int c = 0; c < 3; ++c) w.f32(rec.objects(i, c));
  write_camera(w, rec.camera);
  return std::move(w.str());
}

void write_records(const std::vector<SequenceRecord>& records, const std::string& path) {
  std::string bytes;
  for (const auto& r : records) bytes += encode_record(r);
  write_file(path, bytes);
}

std::vector<SequenceRecord> read_records(const std::string& path) {
  const std::string data = read_file(path);
  ByteReader r(data);
  std::vector<SequenceRecord> out;
  while (!r.done()) {
    const std::string after = out.empty() ? "at the start of the file" : "after sequence " + std::to_string(out.back().id);
    if (r.remaining() < 18) throw std::runtime_error("records: truncated header " + after + " in " + path);
    if (r.bytes(4) != std::string(kRecordMagic, 4)) {
      throw std::runtime_error("records: bad magic " + after + " in " + path + " (expected TSHM)");
    }
    const auto version = r.u16();
    if (version != kRecordVersion) {
      throw std::runtime_error("records: unsupported record version " + std::to_string(version) + " " + after);
    }
    SequenceRecord rec;
    rec.id = r.u32();
    rec.motion.label = r.u16();
    rec.motion.length = r.u16();
    const auto points = r.u32();
    if (rec.motion.length < 1 || rec.motion.length > motion::kMaxFrames) {
      throw std::runtime_error("records: sequence " + std::to_string(rec.id) + " has invalid length " +
                               std::to_string(rec.motion.length));
    }
    const std::size_t payload = 4ULL * (static_cast<std::size_t>(rec.motion.length) * motion::kFrameWidth +
                                        3ULL * points + kCameraFloats);
    if (r.remaining() < payload) {
      throw std::runtime_error("records: sequence " + std::to_string(rec.id) + " is truncated in " + path);
    }
    for (int i = 0; i < rec.motion.length; ++i)
      for (int d = 0; d < motion::kFrameWidth; ++d) rec.motion.frames(i, d) = r.f32();
    rec.objects.resize(points, 3);
    for (std::uint32_t i = 0; i < points; ++i)
      for (int c = 0; c < 3; ++c) rec.objects(i, c) = r.f32();
    rec.camera = read_camera(r);
    out.push_back(std::move(rec));
  }
  return out;
}

nlohmann::json to_json(const Manifest& m) {
  auto vec = [](const motion::FrameVector& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  return {{"schema_version", m.schema_version},
          {"num_classes", m.num_classes},
          {"label_names", m.label_names},
          {"max_frames", m.max_frames},
          {"frame_width", m.frame_width},
          {"splits", {{"train", m.train}, {"val", m.val}, {"test", m.test}}},
          {"stats", {{"mean", vec(m.stats.mean)}, {"std", vec(m.stats.std)}}},
          {"generator_seed", m.generator_seed},
          {"spec", to_json(m.spec)},
          {"spec_hash", m.spec_hash}};
}

Manifest manifest_from_json(const nlohmann::json& j) {
  Manifest m;
  m.schema_version = j.at("schema_version").get<int>();
  if (m.schema_version != kManifestVersion) {
    throw std::runtime_error("manifest: unsupported schema version " + std::to_string(m.schema_version));
  }
  m.num_classes = j.at("num_classes").get<int>();
  m.label_names = j.at("label_names").get<std::vector<std::string>>();
  m.max_frames = j.at("max_frames").get<int>();
  m.frame_width = j.at("frame_width").get<int>();
  if (m.max_frames != motion::kMaxFrames || m.frame_width != motion::kFrameWidth) {
    throw std::runtime_error("manifest: frame geometry does not match this build (64 x 166)");
  }
  const auto& splits = j.at("splits");
  m.train = splits.at("train").get<std::vector<std::uint32_t>>();
  m.val = splits.at("val").get<std::vector<std::uint32_t>>();
  m.test = splits.at("test").get<std::vector<std::uint32_t>>();
  const auto mean = j.at("stats").at("mean").get<std::vector<double>>();
  const auto sd = j.at("stats").at("std").get<std::vector<double>>();
  if (mean.size() != motion::kFrameWidth || sd.size() != motion::kFrameWidth) {
    throw std::runtime_error("manifest: stats need 166 values");
  }
  for (int d = 0; d < motion::kFrameWidth; ++d) {
    m.stats.mean[d] = mean[d];
    m.stats.std[d] = sd[d];
  }
  m.generator_seed = j.at("generator_seed").get<std::uint64_t>();
  m.spec = spec_from_json(j.at("spec"));
  m.spec_hash = j.at("spec_hash").get<std::string>();
  return m;
}

void write_dataset(const Dataset& ds, const std::string& dir) {
  std::filesystem::create_directories(dir);
  write_file(dir + "/manifest.json", to_json(ds.manifest).dump(1) + "\n");
  write_records(ds.records, dir + "/records.bin");
}

Dataset read_dataset(const std::string& dir) {
  if (!std::filesystem::exists(dir + "/manifest.json")) {
    throw std::runtime_error("dataset: no manifest.json in " + dir);
  }
  Dataset ds;
  ds.manifest = manifest_from_json(nlohmann::json::parse(read_file(dir + "/manifest.json")));
  ds.records = read_records(dir + "/records.bin");
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    if (ds.records[i].id != i) throw std::runtime_error("dataset: records are not stored in id order");
    if (ds.records[i].motion.label >= ds.manifest.num_classes) {
      throw std::runtime_error("dataset: sequence " + std::to_string(i) + " has an unknown label");
    }
  }
  for (const auto* split : {&ds.manifest.train, &ds.manifest.val, &ds.manifest.test}) {
    for (auto id : *split) {
      if (id >= ds.records.size()) throw std::runtime_error("dataset: split names missing sequence " + std::to_string(id));
    }
  }
  return ds;
}

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  ByteWriter w;
  w.bytes(std::string(kCheckpointMagic, 4));
  w.u32(kCheckpointVersion);
  const std::string meta = ck.meta.dump();
  w.u64(meta.size());
  w.bytes(meta);
  w.u32(static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& [name, t] : ck.tensors) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.u64(static_cast<std::uint64_t>(d));
    for (Eigen::Index i = 0; i < t.size(); ++i) w.f64(t[i]);
  }
  const std::string tmp = path + ".tmp";
  write_file(tmp, w.str());
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
  const std::string data = read_file(path);
  ByteReader r(data);
  Checkpoint ck;
  try {
    if (r.bytes(4) != std::string(kCheckpointMagic, 4)) throw std::runtime_error("checkpoint: bad magic in " + path);
    const auto version = r.u32();
    if (version != kCheckpointVersion) {
      throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    }
    ck.meta = nlohmann::json::parse(r.bytes(r.u64()));
    const auto count = r.u32();
    for (std::uint32_t k = 0; k < count; ++k) {
      std::string name = r.bytes(r.u32());
      const auto rank = r.u32();
      diffcore::Shape shape;
      for (std::uint32_t a = 0; a < rank; ++a) shape.push_back(static_cast<diffcore::Index>(r.u64()));
      diffcore::Tensor t(shape);
      r.need(8 * static_cast<std::size_t>(t.size()));
      for (Eigen::Index i = 0; i < t.size(); ++i) t[i] = r.f64();
      ck.tensors.emplace(std::move(name), std::move(t));
    }
  } catch (const std::runtime_error& e) {
    if (std::string(e.what()) == "truncated") throw std::runtime_error("checkpoint: truncated file " + path);
    throw;
  }
  return ck;
}

void store_parameters(Checkpoint& ck, const std::string& prefix, const diffcore::ParameterSet& params) {
  for (const auto& [name, t] : params) ck.tensors[prefix + name] = t;
}

void restore_parameters(const Checkpoint& ck, const std::string& prefix, diffcore::ParameterSet& params) {
  for (auto& [name, t] : params) {
    const auto it = ck.tensors.find(prefix + name);
    if (it == ck.tensors.end()) throw std::runtime_error("checkpoint: missing parameter '" + prefix + name + "'");
    if (it->second.shape() != t.shape()) {
      throw std::runtime_error("checkpoint: parameter '" + prefix + name + "' has shape " +
                               diffcore::to_string(it->second.shape()) + ", model expects " +
                               diffcore::to_string(t.shape()));
    }
    t = it->second;
  }
  for (auto it = ck.tensors.lower_bound(prefix); it != ck.tensors.end() && it->first.starts_with(prefix); ++it) {
    if (!params.contains(it->first.substr(prefix.size()))) {
      throw std::runtime_error("checkpoint: unexpected parameter '" + it->first + "'");
    }
  }
}

bool has_prefix(const Checkpoint& ck, const std::string& prefix) {
  const auto it = ck.tensors.lower_bound(prefix);
  return it != ck.tensors.end() && it->first.starts_with(prefix);
}

}  // namespace tshamo::datakit
