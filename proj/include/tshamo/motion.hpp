// Two-hand motion representation.
//
// Frame layout (166 values):
//   [0]        left presence flag
//   [1, 62)    left MANO params: translation(3) pose(48) shape(10)
//   [62, 83)   left joint contact map (21)
//   [83]       right presence flag
//   [84, 145)  right MANO params
//   [145, 166) right joint contact map
#ifndef TSHAMO_MOTION_HPP
#define TSHAMO_MOTION_HPP

#include <Eigen/Dense>

#include <array>
#include <string>
#include <vector>

namespace tshamo::motion {

inline constexpr int kJoints = 21;
inline constexpr int kPoseJoints = 16;
inline constexpr int kPoseWidth = 3 * kPoseJoints;
inline constexpr int kShapeWidth = 10;
inline constexpr int kManoWidth = 3 + kPoseWidth + kShapeWidth;  // 61
inline constexpr int kContactWidth = kJoints;
inline constexpr int kHandWidth = 1 + kManoWidth + kContactWidth;  // 83
inline constexpr int kFrameWidth = 2 * kHandWidth;                 // 166
inline constexpr int kMaxFrames = 64;
inline constexpr int kFingers = 5;
inline constexpr double kContactRange = 0.10;  // meters

// Offsets of each hand block inside a frame vector.
inline constexpr int kLeftOffset = 0;
inline constexpr int kRightOffset = kHandWidth;
inline constexpr int kFlagSlot = 0;
inline constexpr int kManoSlot = 1;
inline constexpr int kContactSlot = 1 + kManoWidth;

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using FrameVector = Eigen::Matrix<double, kFrameWidth, 1>;
using Joints = Eigen::Matrix<double, kJoints, 3, Eigen::RowMajor>;
using Joints2d = Eigen::Matrix<double, kJoints, 2, Eigen::RowMajor>;
using ContactMap = Eigen::Matrix<double, kContactWidth, 1>;
using ObjectPoints = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;

struct ManoParams {
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
  Eigen::Matrix<double, kPoseWidth, 1> pose = Eigen::Matrix<double, kPoseWidth, 1>::Zero();
  Eigen::Matrix<double, kShapeWidth, 1> shape = Eigen::Matrix<double, kShapeWidth, 1>::Zero();

  Eigen::Matrix<double, kManoWidth, 1> flatten() const;
  static ManoParams unflatten(const Eigen::Ref<const Eigen::VectorXd>& values);
  friend bool operator==(const ManoParams&, const ManoParams&) = default;
};

struct Hand {
  bool present = false;
  ManoParams mano;
  ContactMap contact = ContactMap::Zero();
  friend bool operator==(const Hand&, const Hand&) = default;
};

struct HandFrame {
  Hand left;
  Hand right;
  friend bool operator==(const HandFrame&, const HandFrame&) = default;
};

// Absent hands flatten to zeros regardless of their stored values.
FrameVector flatten(const HandFrame& frame);
// Presence flags are thresholded at 0.5; contact values are clamped to [0, 1].
HandFrame unflatten(const Eigen::Ref<const Eigen::VectorXd>& values);

struct MotionSequence {
  RowMatrix frames = RowMatrix::Zero(kMaxFrames, kFrameWidth);  // rows >= length are zero
  int label = 0;
  int length = 1;

  HandFrame frame(int i) const;
  void set_frame(int i, const HandFrame& frame);
  // Throws std::invalid_argument when the padding or length invariants fail.
  void validate() const;
  friend bool operator==(const MotionSequence&, const MotionSequence&) = default;
};

struct HandSkeleton {
  std::array<int, kJoints> parent{};
  Joints template_offsets = Joints::Zero();  // rest offset of each joint from its parent
  Eigen::Matrix<double, 3 * kJoints, kShapeWidth> shape_basis =
      Eigen::Matrix<double, 3 * kJoints, kShapeWidth>::Zero();
  int version = 1;

  // Pose triple driving joint j, or -1 for fingertips.
  static int pose_slot(int joint);
  Joints shaped_offsets(const Eigen::Matrix<double, kShapeWidth, 1>& shape) const;
  void validate() const;
  friend bool operator==(const HandSkeleton&, const HandSkeleton&) = default;
};

// Wrist at the origin, five four-joint chains (thumb..pinky) along +x.
HandSkeleton default_skeleton();
HandSkeleton load_skeleton(const std::string& path);
void save_skeleton(const HandSkeleton& skeleton, const std::string& path);

Eigen::Matrix3d rodrigues(const Eigen::Vector3d& axis_angle);
Joints forward_kinematics(const ManoParams& params, const HandSkeleton& skeleton);

// c_j = clamp(1 - d_j / 0.10, 0, 1) with d_j the distance to the nearest point.
ContactMap contact_map(const Joints& joints, const Eigen::Ref<const ObjectPoints>& object_points);

struct Camera {
  double fx = 500.0, fy = 500.0, cx = 320.0, cy = 240.0;
  double width = 640.0, height = 480.0;
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
  friend bool operator==(const Camera&, const Camera&) = default;
};

// Pinhole projection after the world-to-camera transform.
Joints2d project_2d(const Joints& joints, const Camera& camera);

inline constexpr int kMaskGrid = 16;
using MaskGrid = Eigen::Matrix<double, kMaskGrid * kMaskGrid, 1>;
// Cell (row v, column u) is set when a joint lands inside it.
MaskGrid rasterize_mask(const Joints2d& joints, double width, double height);

// Dimensions rescaled by normalization (MANO values only).
bool is_scaled_dim(int dim);

struct NormStats {
  FrameVector mean = FrameVector::Zero();
  FrameVector std = FrameVector::Ones();
  friend bool operator==(const NormStats&, const NormStats&) = default;
};

NormStats compute_stats(const std::vector<MotionSequence>& train);

template <typename Derived>
void normalize_rows(Eigen::MatrixBase<Derived>& rows, const NormStats& stats) {
  for (Eigen::Index r = 0; r < rows.rows(); ++r) {
    rows.row(r) = ((rows.row(r).transpose() - stats.mean).cwiseQuotient(stats.std)).transpose();
  }
}

template <typename Derived>
void denormalize_rows(Eigen::MatrixBase<Derived>& rows, const NormStats& stats) {
  for (Eigen::Index r = 0; r < rows.rows(); ++r) {
    rows.row(r) = (rows.row(r).transpose().cwiseProduct(stats.std) + stats.mean).transpose();
  }
}

MotionSequence normalize(const MotionSequence& seq, const NormStats& stats);
MotionSequence denormalize(const MotionSequence& seq, const NormStats& stats);

// Turns a normalized model output into a valid sequence: denormalizes the
// first `length` rows, thresholds presence flags, clamps contacts and zeroes
// absent hands.
MotionSequence decode(const Eigen::Ref<const RowMatrix>& normalized, int length, int label, const NormStats& stats);

}  // namespace tshamo::motion

#endif
