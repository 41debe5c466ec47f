#include "tshamo/datakit.hpp"
#include "tshamo/random.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

namespace tshamo::datakit {

using motion::kFrameWidth;
using motion::kJoints;
using motion::kPoseWidth;
using motion::kShapeWidth;

void SyntheticSpec::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("synthetic spec: " + what); };
  if (num_classes < 2) fail("num_classes must be at least 2");
  if (num_classes > 65535) fail("num_classes exceeds the u16 label range");
  if (seqs_per_class < 1) fail("seqs_per_class must be positive");
  if (min_length < 1 || max_length < min_length || max_length > motion::kMaxFrames) {
    fail("length range must satisfy 1 <= min_length <= max_length <= 64");
  }
  if (!(noise >= 0.0) || !std::isfinite(noise)) fail("noise must be finite and non-negative");
  if (object_points < 1) fail("object_points must be positive");
  if (!(val_fraction >= 0.0) || !(test_fraction >= 0.0) || val_fraction + test_fraction >= 1.0) {
    fail("val_fraction and test_fraction must be non-negative and sum below 1");
  }
}

nlohmann::json to_json(const SyntheticSpec& s) {
  return {{"num_classes", s.num_classes},   {"seqs_per_class", s.seqs_per_class},
          {"min_length", s.min_length},     {"max_length", s.max_length},
          {"noise", s.noise},               {"object_points", s.object_points},
          {"val_fraction", s.val_fraction}, {"test_fraction", s.test_fraction}};
}

SyntheticSpec spec_from_json(const nlohmann::json& j) {
  SyntheticSpec s;
  s.num_classes = j.value("num_classes", s.num_classes);
  s.seqs_per_class = j.value("seqs_per_class", s.seqs_per_class);
  s.min_length = j.value("min_length", s.min_length);
  s.max_length = j.value("max_length", s.max_length);
  s.noise = j.value("noise", s.noise);
  s.object_points = j.value("object_points", s.object_points);
  s.val_fraction = j.value("val_fraction", s.val_fraction);
  s.test_fraction = j.value("test_fraction", s.test_fraction);
  return s;
}

std::string spec_hash(const SyntheticSpec& spec) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : to_json(spec).dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

namespace {

double quantize(double x) { return static_cast<double>(static_cast<float>(x)); }

template <typename Derived>
void quantize_all(Eigen::MatrixBase<Derived>& m) {
  m = m.unaryExpr([](double x) { return quantize(x); });
}

const char* const kLabelNames[] = {"grasp", "lift", "pour", "pass", "wave", "inspect"};

// Class-level motion family for one hand.
struct HandFamily {
  bool present = false;
  Eigen::Vector3d base, amp, phase;
  Eigen::Matrix<double, kPoseWidth, 1> pose_base, pose_amp, pose_phase;
};

struct ClassFamily {
  double omega = 0.0, pose_omega = 0.0;
  HandFamily hands[2];  // left, right
  int grasp_frame = 0;
  Eigen::Vector3d object_offset;
  motion::ObjectPoints object_shape;
};

ClassFamily make_family(int label, int object_points, Rng rng) {
  ClassFamily f;
  f.omega = 2.0 * std::numbers::pi / rng.uniform(14.0, 40.0);
  f.pose_omega = 2.0 * std::numbers::pi / rng.uniform(10.0, 30.0);
  for (int h = 0; h < 2; ++h) {
    HandFamily& hand = f.hands[h];
    hand.present = h == 1 || label % 3 != 1;
    const double side = h == 0 ? -1.0 : 1.0;
    for (int c = 0; c < 3; ++c) {
      hand.base[c] = (c == 0 ? 0.12 * side : 0.0) + 0.03 * rng.normal();
      hand.amp[c] = 0.02 + 0.05 * rng.uniform();
      hand.phase[c] = 2.0 * std::numbers::pi * rng.uniform();
    }
    for (int k = 0; k < kPoseWidth; ++k) {
      hand.pose_base[k] = 0.3 * rng.normal();
      hand.pose_amp[k] = 0.4 * rng.normal();
      hand.pose_phase[k] = 2.0 * std::numbers::pi * rng.uniform();
    }
  }
  f.grasp_frame = 8 + static_cast<int>(rng.below(11));
  for (int c = 0; c < 3; ++c) f.object_offset[c] = 0.02 * rng.normal();
  f.object_shape.resize(object_points, 3);
  for (int i = 0; i < object_points; ++i) {
    Eigen::Vector3d d(rng.normal(), rng.normal(), rng.normal());
    f.object_shape.row(i) = 0.03 * d.normalized().transpose();
  }
  return f;
}

motion::Camera default_camera() {
  motion::Camera cam;
  cam.translation = Eigen::Vector3d(0.0, 0.0, 0.6);
  quantize_all(cam.translation);
  return cam;
}

SequenceRecord make_sequence(std::uint32_t id, int label, const ClassFamily& fam, const SyntheticSpec& spec,
                             const motion::HandSkeleton& skel, Rng rng) {
  const double s = spec.noise;
  SequenceRecord rec;
  rec.id = id;
  rec.motion.label = label;
  rec.motion.length = spec.min_length + static_cast<int>(rng.below(spec.max_length - spec.min_length + 1));
  rec.camera = default_camera();

  // Per-sequence perturbation of the class family.
  struct Perturbed {
    Eigen::Vector3d base, amp, phase;
    Eigen::Matrix<double, kPoseWidth, 1> pose_base, pose_amp;
    Eigen::Matrix<double, kShapeWidth, 1> shape;
  } per[2];
  for (int h = 0; h < 2; ++h) {
    const HandFamily& hf = fam.hands[h];
    Perturbed& p = per[h];
    for (int c = 0; c < 3; ++c) {
      p.base[c] = hf.base[c] + 0.05 * s * rng.normal();
      p.amp[c] = hf.amp[c] * (1.0 + s * rng.normal());
      p.phase[c] = hf.phase[c] + s * rng.normal();
    }
    for (int k = 0; k < kPoseWidth; ++k) {
      p.pose_base[k] = hf.pose_base[k] + 0.3 * s * rng.normal();
      p.pose_amp[k] = hf.pose_amp[k] * (1.0 + s * rng.normal());
    }
    for (int k = 0; k < kShapeWidth; ++k) p.shape[k] = s * rng.normal();
  }

  std::vector<motion::HandFrame> frames(rec.motion.length);
  for (int i = 0; i < rec.motion.length; ++i) {
    for (int h = 0; h < 2; ++h) {
      const HandFamily& hf = fam.hands[h];
      motion::Hand& hand = h == 0 ? frames[i].left : frames[i].right;
      hand.present = hf.present;
      const Perturbed& p = per[h];
      for (int c = 0; c < 3; ++c) {
        hand.mano.translation[c] =
            quantize(p.base[c] + p.amp[c] * std::sin(fam.omega * i + p.phase[c]) + 0.02 * s * rng.normal());
      }
      for (int k = 0; k < kPoseWidth; ++k) {
        hand.mano.pose[k] = quantize(p.pose_base[k] + p.pose_amp[k] * std::sin(fam.pose_omega * i + hf.pose_phase[k]) +
                                     0.05 * s * rng.normal());
      }
      for (int k = 0; k < kShapeWidth; ++k) hand.mano.shape[k] = quantize(p.shape[k]);
    }
  }

  // The object sits next to the right hand's middle fingertip at the class's grasp frame.
  const int g = std::min(fam.grasp_frame, rec.motion.length - 1);
  const motion::Joints grasp = motion::forward_kinematics(frames[g].right.mano, skel);
  const Eigen::RowVector3d centre = grasp.row(12) + fam.object_offset.transpose();
  rec.objects.resize(spec.object_points, 3);
  for (int k = 0; k < spec.object_points; ++k) {
    for (int c = 0; c < 3; ++c) {
      rec.objects(k, c) = quantize(centre[c] + fam.object_shape(k, c) + 0.01 * s * rng.normal());
    }
  }

  for (int i = 0; i < rec.motion.length; ++i) {
    for (motion::Hand* hand : {&frames[i].left, &frames[i].right}) {
      if (!hand->present) continue;
      hand->contact = motion::contact_map(motion::forward_kinematics(hand->mano, skel), rec.objects);
      quantize_all(hand->contact);
    }
    rec.motion.set_frame(i, frames[i]);
  }
  return rec;
}

}  // namespace

bool operator==(const SequenceRecord& a, const SequenceRecord& b) {
  return a.id == b.id && a.motion == b.motion && a.objects.rows() == b.objects.rows() &&
         (a.objects.rows() == 0 || a.objects == b.objects) && a.camera == b.camera;
}

const SequenceRecord& Dataset::record(std::uint32_t id) const {
  if (id >= records.size() || records[id].id != id) {
    throw std::out_of_range("dataset: no sequence with id " + std::to_string(id));
  }
  return records[id];
}

std::vector<const SequenceRecord*> Dataset::split(const std::vector<std::uint32_t>& ids) const {
  std::vector<const SequenceRecord*> out;
  out.reserve(ids.size());
  for (auto id : ids) out.push_back(&record(id));
  return out;
}

Dataset generate_synthetic_dataset(const SyntheticSpec& spec, std::uint64_t seed) {
  spec.validate();
  const Rng root(seed);
  const motion::HandSkeleton skel = motion::default_skeleton();
  Dataset ds;
  Manifest& m = ds.manifest;
  m.num_classes = spec.num_classes;
  for (int c = 0; c < spec.num_classes; ++c) {
    m.label_names.push_back(c < 6 ? kLabelNames[c] : "action_" + std::to_string(c));
  }
  m.generator_seed = seed;
  m.spec = spec;
  m.spec_hash = spec_hash(spec);

  const int n_test = static_cast<int>(std::lround(spec.test_fraction * spec.seqs_per_class));
  const int n_val = static_cast<int>(std::lround(spec.val_fraction * spec.seqs_per_class));
  for (int c = 0; c < spec.num_classes; ++c) {
    const ClassFamily fam = make_family(c, spec.object_points, root.fork(1, c));
    std::vector<std::uint32_t> ids;
    for (int k = 0; k < spec.seqs_per_class; ++k) {
      const auto id = static_cast<std::uint32_t>(ds.records.size());
      ds.records.push_back(make_sequence(id, c, fam, spec, skel, root.fork(2, id)));
      ids.push_back(id);
    }
    Rng shuffle = root.fork(3, c);
    for (std::size_t i = ids.size(); i > 1; --i) std::swap(ids[i - 1], ids[shuffle.below(i)]);
    for (int k = 0; k < spec.seqs_per_class; ++k) {
      auto& dst = k < n_test ? m.test : k < n_test + n_val ? m.val : m.train;
      dst.push_back(ids[k]);
    }
  }
  for (auto* v : {&m.train, &m.val, &m.test}) std::sort(v->begin(), v->end());
  if (m.train.empty()) throw std::invalid_argument("synthetic spec: training split is empty");

  std::vector<motion::MotionSequence> train;
  for (auto id : m.train) train.push_back(ds.records[id].motion);
  m.stats = motion::compute_stats(train);
  return ds;
}

motion::ContactMap recompute_contact(const SequenceRecord& record, int frame, bool right,
                                     const motion::HandSkeleton& skeleton) {
  const motion::HandFrame f = record.motion.frame(frame);
  const motion::Hand& hand = right ? f.right : f.left;
  if (!hand.present) return motion::ContactMap::Zero();
  return motion::contact_map(motion::forward_kinematics(hand.mano, skeleton), record.objects);
}

}  // namespace tshamo::datakit
