#include "tshamo/motion.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace tshamo::motion {

Eigen::Matrix<double, kManoWidth, 1> ManoParams::flatten() const {
  Eigen::Matrix<double, kManoWidth, 1> v;
  v << translation, pose, shape;
  return v;
}

ManoParams ManoParams::unflatten(const Eigen::Ref<const Eigen::VectorXd>& values) {
  if (values.size() != kManoWidth) throw std::invalid_argument("mano: expected 61 values");
  ManoParams p;
  p.translation = values.segment<3>(0);
  p.pose = values.segment<kPoseWidth>(3);
  p.shape = values.segment<kShapeWidth>(3 + kPoseWidth);
  return p;
}

namespace {

void write_hand(FrameVector& v, int offset, const Hand& hand) {
  if (!hand.present) {
    v.segment<kHandWidth>(offset).setZero();
    return;
  }
  v[offset + kFlagSlot] = 1.0;
  v.segment<kManoWidth>(offset + kManoSlot) = hand.mano.flatten();
  v.segment<kContactWidth>(offset + kContactSlot) = hand.contact;
}

Hand read_hand(const Eigen::Ref<const Eigen::VectorXd>& v, int offset) {
  Hand h;
  h.present = v[offset + kFlagSlot] >= 0.5;
  if (!h.present) return h;
  h.mano = ManoParams::unflatten(v.segment(offset + kManoSlot, kManoWidth));
  h.contact = v.segment(offset + kContactSlot, kContactWidth).cwiseMax(0.0).cwiseMin(1.0);
  return h;
}

}  // namespace

FrameVector flatten(const HandFrame& frame) {
  FrameVector v = FrameVector::Zero();
  write_hand(v, kLeftOffset, frame.left);
  write_hand(v, kRightOffset, frame.right);
  return v;
}

HandFrame unflatten(const Eigen::Ref<const Eigen::VectorXd>& values) {
  if (values.size() != kFrameWidth) {
    throw std::invalid_argument("unflatten: expected 166 values, got " + std::to_string(values.size()));
  }
  return HandFrame{read_hand(values, kLeftOffset), read_hand(values, kRightOffset)};
}

HandFrame MotionSequence::frame(int i) const {
  if (i < 0 || i >= length) throw std::out_of_range("sequence: frame index out of range");
  return unflatten(frames.row(i).transpose());
}

void MotionSequence::set_frame(int i, const HandFrame& frame) {
  if (i < 0 || i >= length) throw std::out_of_range("sequence: frame index out of range");
  frames.row(i) = flatten(frame).transpose();
}

void MotionSequence::validate() const {
  if (frames.cols() != kFrameWidth) throw std::invalid_argument("sequence: frame width must be 166");
  if (length < 1 || length > frames.rows()) {
    throw std::invalid_argument("sequence: length " + std::to_string(length) + " outside [1, " +
                                std::to_string(frames.rows()) + "]");
  }
  if (!frames.bottomRows(frames.rows() - length).isZero(0.0)) {
    throw std::invalid_argument("sequence: padding frames must be zero");
  }
}

int HandSkeleton::pose_slot(int joint) {
  if (joint == 0) return 0;
  const int k = (joint - 1) % 4;
  const int finger = (joint - 1) / 4;
  return k == 3 ? -1 : 1 + 3 * finger + k;
}

Joints HandSkeleton::shaped_offsets(const Eigen::Matrix<double, kShapeWidth, 1>& shape) const {
  const Eigen::Matrix<double, 3 * kJoints, 1> delta = shape_basis * shape;
  return template_offsets + Eigen::Map<const Joints>(delta.data());
}

void HandSkeleton::validate() const {
  if (parent[0] != -1) throw std::invalid_argument("skeleton: joint 0 must be the root");
  for (int j = 1; j < kJoints; ++j) {
    if (parent[j] < 0 || parent[j] >= j) throw std::invalid_argument("skeleton: parents must precede children");
  }
  for (int f = 0; f < kFingers; ++f) {
    const int base = 1 + 4 * f;
    if (parent[base] != 0 || parent[base + 1] != base || parent[base + 2] != base + 1 || parent[base + 3] != base + 2) {
      throw std::invalid_argument("skeleton: finger " + std::to_string(f) + " is not a four-joint chain");
    }
  }
}

HandSkeleton default_skeleton() {
  HandSkeleton s;
  s.parent[0] = -1;
  // Knuckle position relative to the wrist and three segment lengths per
  // finger (thumb, index, middle, ring, pinky), in meters.
  const double base[kFingers][3] = {
      {0.025, -0.030, 0.010}, {0.090, -0.022, 0.0}, {0.095, 0.0, 0.0}, {0.088, 0.019, 0.0}, {0.078, 0.036, 0.0}};
  const double seg[kFingers][3] = {
      {0.032, 0.028, 0.024}, {0.038, 0.024, 0.019}, {0.042, 0.027, 0.020}, {0.038, 0.025, 0.019},
      {0.030, 0.019, 0.017}};
  for (int f = 0; f < kFingers; ++f) {
    const int j = 1 + 4 * f;
    s.parent[j] = 0;
    s.template_offsets.row(j) << base[f][0], base[f][1], base[f][2];
    Eigen::Vector3d dir = f == 0 ? Eigen::Vector3d(0.8, -0.6, 0.0) : Eigen::Vector3d(1.0, 0.0, 0.0);
    for (int k = 0; k < 3; ++k) {
      s.parent[j + k + 1] = j + k;
      s.template_offsets.row(j + k + 1) = seg[f][k] * dir.transpose();
    }
  }
  // Shape directions: overall scale, finger length, palm width, then seven
  // smaller per-joint perturbations. The root row stays zero.
  for (int j = 1; j < kJoints; ++j) {
    const bool knuckle = (j - 1) % 4 == 0;
    for (int c = 0; c < 3; ++c) {
      const int r = 3 * j + c;
      s.shape_basis(r, 0) = 0.05 * s.template_offsets(j, c);
      s.shape_basis(r, 1) = knuckle ? 0.0 : 0.04 * s.template_offsets(j, c);
      s.shape_basis(r, 2) = (knuckle && c == 1) ? 0.05 * s.template_offsets(j, c) : 0.0;
      for (int b = 3; b < kShapeWidth; ++b) s.shape_basis(r, b) = 0.0015 * std::sin(1.7 * r + 2.3 * b);
    }
  }
  return s;
}

HandSkeleton load_skeleton(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("skeleton: cannot open " + path);
  const auto j = nlohmann::json::parse(in);
  HandSkeleton s;
  s.version = j.at("version").get<int>();
  if (s.version != 1) throw std::runtime_error("skeleton: unsupported version " + std::to_string(s.version));
  const auto parents = j.at("parent").get<std::vector<int>>();
  const auto offsets = j.at("template_offsets").get<std::vector<std::vector<double>>>();
  const auto basis = j.at("shape_basis").get<std::vector<std::vector<double>>>();
  if (parents.size() != kJoints || offsets.size() != kJoints || basis.size() != 3 * kJoints) {
    throw std::runtime_error("skeleton: wrong table sizes in " + path);
  }
  for (int i = 0; i < kJoints; ++i) {
    s.parent[i] = parents[i];
    if (offsets[i].size() != 3) throw std::runtime_error("skeleton: offsets rows need 3 values");
    for (int c = 0; c < 3; ++c) s.template_offsets(i, c) = offsets[i][c];
  }
  for (int r = 0; r < 3 * kJoints; ++r) {
    if (basis[r].size() != kShapeWidth) throw std::runtime_error("skeleton: shape basis rows need 10 values");
    for (int c = 0; c < kShapeWidth; ++c) s.shape_basis(r, c) = basis[r][c];
  }
  s.validate();
  return s;
}

void save_skeleton(const HandSkeleton& s, const std::string& path) {
  nlohmann::json j;
  j["version"] = s.version;
  j["parent"] = std::vector<int>(s.parent.begin(), s.parent.end());
  auto& offsets = j["template_offsets"] = nlohmann::json::array();
  for (int i = 0; i < kJoints; ++i) offsets.push_back({s.template_offsets(i, 0), s.template_offsets(i, 1), s.template_offsets(i, 2)});
  auto& basis = j["shape_basis"] = nlohmann::json::array();
  for (int r = 0; r < 3 * kJoints; ++r) {
    std::vector<double> row(kShapeWidth);
    for (int c = 0; c < kShapeWidth; ++c) row[c] = s.shape_basis(r, c);
    basis.push_back(row);
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("skeleton: cannot write " + path);
  out << j.dump(1) << '\n';
}

Eigen::Matrix3d rodrigues(const Eigen::Vector3d& axis_angle) {
  const double angle = axis_angle.norm();
  if (angle < 1e-14) return Eigen::Matrix3d::Identity();
  return Eigen::AngleAxisd(angle, axis_angle / angle).toRotationMatrix();
}

Joints forward_kinematics(const ManoParams& params, const HandSkeleton& skeleton) {
  if (!params.translation.allFinite() || !params.pose.allFinite() || !params.shape.allFinite()) {
    throw std::invalid_argument("forward_kinematics: non-finite parameters");
  }
  const Joints offsets = skeleton.shaped_offsets(params.shape);
  std::array<Eigen::Matrix3d, kJoints> world;
  Joints joints;
  world[0] = rodrigues(params.pose.segment<3>(0));
  joints.row(0) = params.translation.transpose() + offsets.row(0);
  for (int j = 1; j < kJoints; ++j) {
    const int p = skeleton.parent[j];
    const int slot = HandSkeleton::pose_slot(j);
    world[j] = slot < 0 ? world[p] : Eigen::Matrix3d(world[p] * rodrigues(params.pose.segment<3>(3 * slot)));
    joints.row(j) = joints.row(p) + (world[p] * offsets.row(j).transpose()).transpose();
  }
  return joints;
}

ContactMap contact_map(const Joints& joints, const Eigen::Ref<const ObjectPoints>& object_points) {
  if (object_points.rows() == 0) throw std::invalid_argument("contact_map: object has no points");
  ContactMap c;
  for (int j = 0; j < kJoints; ++j) {
    const double d = (object_points.rowwise() - joints.row(j)).rowwise().norm().minCoeff();
    c[j] = std::clamp(1.0 - d / kContactRange, 0.0, 1.0);
  }
  return c;
}

Joints2d project_2d(const Joints& joints, const Camera& camera) {
  Joints2d uv;
  for (int j = 0; j < kJoints; ++j) {
    const Eigen::Vector3d p = camera.rotation * joints.row(j).transpose() + camera.translation;
    if (!(p.z() > 0.0)) throw std::domain_error("project_2d: joint " + std::to_string(j) + " is behind the camera");
    uv(j, 0) = camera.fx * p.x() / p.z() + camera.cx;
    uv(j, 1) = camera.fy * p.y() / p.z() + camera.cy;
  }
  return uv;
}

MaskGrid rasterize_mask(const Joints2d& joints, double width, double height) {
  if (!(width > 0.0) || !(height > 0.0)) throw std::invalid_argument("rasterize_mask: bounds must be positive");
  MaskGrid grid = MaskGrid::Zero();
  for (int j = 0; j < kJoints; ++j) {
    const double u = joints(j, 0), v = joints(j, 1);
    if (!(u >= 0.0 && u < width && v >= 0.0 && v < height)) continue;
    const int gx = std::min(kMaskGrid - 1, static_cast<int>(u / width * kMaskGrid));
    const int gy = std::min(kMaskGrid - 1, static_cast<int>(v / height * kMaskGrid));
    grid[gy * kMaskGrid + gx] = 1.0;
  }
  return grid;
}

bool is_scaled_dim(int dim) {
  const int slot = dim % kHandWidth;
  return slot >= kManoSlot && slot < kContactSlot;
}

NormStats compute_stats(const std::vector<MotionSequence>& train) {
  NormStats stats;
  Eigen::Index count = 0;
  FrameVector sum = FrameVector::Zero(), sq = FrameVector::Zero();
  for (const auto& s : train) {
    for (int i = 0; i < s.length; ++i) {
      const FrameVector f = s.frames.row(i).transpose();
      sum += f;
      sq += f.cwiseAbs2();
      ++count;
    }
  }
  if (count == 0) throw std::invalid_argument("compute_stats: no frames");
  const FrameVector mean = sum / static_cast<double>(count);
  const FrameVector var = (sq / static_cast<double>(count) - mean.cwiseAbs2()).cwiseMax(0.0);
  for (int d = 0; d < kFrameWidth; ++d) {
    const double sd = std::sqrt(var[d]);
    if (is_scaled_dim(d) && sd > 1e-8) {
      stats.mean[d] = mean[d];
      stats.std[d] = sd;
    }
  }
  return stats;
}

MotionSequence normalize(const MotionSequence& seq, const NormStats& stats) {
  MotionSequence out = seq;
  auto rows = out.frames.topRows(seq.length);
  normalize_rows(rows, stats);
  return out;
}

MotionSequence denormalize(const MotionSequence& seq, const NormStats& stats) {
  MotionSequence out = seq;
  auto rows = out.frames.topRows(seq.length);
  denormalize_rows(rows, stats);
  return out;
}

MotionSequence decode(const Eigen::Ref<const RowMatrix>& normalized, int length, int label, const NormStats& stats) {
  if (normalized.cols() != kFrameWidth || length < 1 || length > normalized.rows()) {
    throw std::invalid_argument("decode: bad output shape or length");
  }
  MotionSequence out;
  out.frames = RowMatrix::Zero(normalized.rows(), kFrameWidth);
  out.label = label;
  out.length = length;
  RowMatrix rows = normalized.topRows(length);
  denormalize_rows(rows, stats);
  for (int i = 0; i < length; ++i) out.frames.row(i) = flatten(unflatten(rows.row(i).transpose())).transpose();
  return out;
}

}  // namespace tshamo::motion
