#include "doctest.h"
#include "tshamo/motion.hpp"
#include "tshamo/random.hpp"

#include <cmath>
#include <numbers>

using namespace tshamo::motion;
using tshamo::Rng;

namespace {

ManoParams random_params(Rng& rng, double pose_scale = 0.6) {
  ManoParams p;
  for (int i = 0; i < 3; ++i) p.translation[i] = 0.2 * rng.normal();
  for (int i = 0; i < kPoseWidth; ++i) p.pose[i] = pose_scale * rng.normal();
  for (int i = 0; i < kShapeWidth; ++i) p.shape[i] = rng.normal();
  return p;
}

HandFrame random_frame(Rng& rng) {
  HandFrame f;
  f.left.present = rng.uniform() < 0.7;
  f.right.present = rng.uniform() < 0.7;
  for (Hand* h : {&f.left, &f.right}) {
    if (!h->present) continue;
    h->mano = random_params(rng);
    for (int j = 0; j < kJoints; ++j) h->contact[j] = rng.uniform();
  }
  return f;
}

}  // namespace

TEST_CASE("frame width follows from the MANO and contact dimensions") {
  CHECK(kFrameWidth == 2 * (1 + (3 + 48 + 10) + 21));
  CHECK(kFrameWidth == 166);
}

TEST_CASE("all-zero frame flattens to zeros") { CHECK(flatten(HandFrame{}).isZero(0.0)); }

TEST_CASE("flatten uses the fixed field order") {
  HandFrame f;
  f.right.present = true;
  f.right.mano.translation << 1, 2, 3;
  f.right.contact[20] = 0.25;
  const FrameVector v = flatten(f);
  CHECK(v[0] == 0.0);
  CHECK(v[83] == 1.0);
  CHECK(v[84] == 1.0);
  CHECK(v[86] == 3.0);
  CHECK(v[165] == 0.25);
}

TEST_CASE("unflatten rejects the wrong width") {
  CHECK_THROWS_AS(unflatten(Eigen::VectorXd::Zero(165)), std::invalid_argument);
}

TEST_CASE("random frames round-trip bit-exactly") {
  Rng rng(101);
  for (int i = 0; i < 200; ++i) {
    const HandFrame f = random_frame(rng);
    const HandFrame back = unflatten(flatten(f));
    // Absent hands carry no payload after the round trip.
    HandFrame expected = f;
    if (!expected.left.present) expected.left = Hand{};
    if (!expected.right.present) expected.right = Hand{};
    CHECK(back == expected);
    CHECK(flatten(back) == flatten(f));
  }
}

TEST_CASE("zero pose and shape reproduce the cumulative template") {
  const auto skel = default_skeleton();
  const Joints j = forward_kinematics(ManoParams{}, skel);
  for (int k = 0; k < kJoints; ++k) {
    Eigen::RowVector3d expect = Eigen::RowVector3d::Zero();
    for (int a = k; a >= 0; a = skel.parent[a]) expect += skel.template_offsets.row(a);
    CHECK((j.row(k) - expect).norm() < 1e-15);
  }
}

TEST_CASE("pure translation shifts every joint") {
  Rng rng(7);
  const auto skel = default_skeleton();
  ManoParams p = random_params(rng);
  const Joints base = forward_kinematics(p, skel);
  const Eigen::Vector3d shift(0.3, -1.2, 0.05);
  p.translation += shift;
  const Joints moved = forward_kinematics(p, skel);
  CHECK(((moved.rowwise() - shift.transpose()) - base).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("global rotation of a unit offset about z") {
  HandSkeleton skel = default_skeleton();
  skel.template_offsets.setZero();
  skel.shape_basis.setZero();
  skel.template_offsets.row(1) << 1, 0, 0;
  ManoParams p;
  p.pose.segment<3>(0) << 0, 0, std::numbers::pi / 2;
  const Joints j = forward_kinematics(p, skel);
  CHECK((j.row(1) - Eigen::RowVector3d(0, 1, 0)).norm() < 1e-9);
}

TEST_CASE("kinematic chains are rigid under any pose") {
  Rng rng(13);
  const auto skel = default_skeleton();
  for (int trial = 0; trial < 50; ++trial) {
    ManoParams a = random_params(rng, 1.5);
    ManoParams b = random_params(rng, 1.5);
    b.shape = a.shape;
    const Joints ja = forward_kinematics(a, skel), jb = forward_kinematics(b, skel);
    for (int k = 1; k < kJoints; ++k) {
      const int p = skel.parent[k];
      CHECK(std::abs((ja.row(k) - ja.row(p)).norm() - (jb.row(k) - jb.row(p)).norm()) < 1e-9);
    }
  }
}

TEST_CASE("global rotation commutes with forward kinematics") {
  Rng rng(19);
  const auto skel = default_skeleton();
  for (int trial = 0; trial < 50; ++trial) {
    ManoParams p = random_params(rng);
    p.translation.setZero();
    const Eigen::Vector3d axis_angle(rng.normal(), rng.normal(), rng.normal());
    const Eigen::Matrix3d g = rodrigues(axis_angle);
    ManoParams rotated = p;
    const Eigen::AngleAxisd aa(g * rodrigues(p.pose.segment<3>(0)));
    rotated.pose.segment<3>(0) = aa.angle() * aa.axis();
    const Joints lhs = forward_kinematics(rotated, skel);
    const Joints rhs = (g * forward_kinematics(p, skel).transpose()).transpose();
    CHECK((lhs - rhs).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("contact values from distances") {
  Joints joints = Joints::Zero();
  for (int j = 0; j < kJoints; ++j) joints(j, 0) = 1.0 + j;  // far apart
  ObjectPoints obj(3, 3);
  obj << 1.0, 0.0, 0.0,   // coincides with joint 0
      2.0, 0.05, 0.0,     // 0.05 from joint 1
      3.0, 0.0, 0.25;     // 0.25 from joint 2
  const ContactMap c = contact_map(joints, obj);
  CHECK(c[0] == 1.0);
  CHECK(c[1] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(c[2] == 0.0);
  CHECK(c[10] == 0.0);
  CHECK_THROWS_AS(contact_map(joints, ObjectPoints(0, 3)), std::invalid_argument);
}

TEST_CASE("moving a joint away never increases its contact") {
  Rng rng(31);
  ObjectPoints obj(20, 3);
  for (int i = 0; i < 20; ++i) obj.row(i) << 0.05 * rng.normal(), 0.05 * rng.normal(), 0.05 * rng.normal();
  for (int trial = 0; trial < 200; ++trial) {
    Joints j = Joints::Zero();
    const Eigen::RowVector3d dir = Eigen::RowVector3d(rng.normal(), rng.normal(), rng.normal()).normalized();
    const double r = rng.uniform(0.0, 0.3);
    j.row(0) = r * dir;
    const double before = contact_map(j, obj)[0];
    // Push outward by enough to stay farther from every point.
    const double nearest = (obj.rowwise() - j.row(0)).rowwise().norm().minCoeff();
    j.row(0) += (nearest + 0.2) * dir;
    const double d_after = (obj.rowwise() - j.row(0)).rowwise().norm().minCoeff();
    if (d_after > nearest) CHECK(contact_map(j, obj)[0] <= before);
  }
}

TEST_CASE("pinhole projection") {
  Camera cam;
  Joints j = Joints::Zero();
  for (int k = 0; k < kJoints; ++k) j(k, 2) = 1.0;
  CHECK(project_2d(j, cam).row(0) == Eigen::RowVector2d(cam.cx, cam.cy));
  j.row(0) << 0.1, 0.0, 1.0;
  CHECK(project_2d(j, cam)(0, 0) == doctest::Approx(370.0));
  j.row(1) << 0.1, -0.05, 1.0;
  const Eigen::RowVector2d near = project_2d(j, cam).row(1);
  j(1, 2) *= 2.0;
  const Eigen::RowVector2d far = project_2d(j, cam).row(1);
  const Eigen::RowVector2d centre(cam.cx, cam.cy);
  CHECK(((far - centre) - 0.5 * (near - centre)).norm() < 1e-12);
  j(3, 2) = -0.5;
  CHECK_THROWS_AS(project_2d(j, cam), std::domain_error);
}

TEST_CASE("mask rasterization") {
  Joints2d out_of_bounds = Joints2d::Constant(-5.0);
  CHECK(rasterize_mask(out_of_bounds, 640, 480).isZero());

  Joints2d one = Joints2d::Constant(-1.0);
  one.row(4) << 320.0, 240.0;
  const MaskGrid g = rasterize_mask(one, 640, 480);
  CHECK(g.sum() == 1.0);
  CHECK(g[8 * 16 + 8] == 1.0);

  Rng rng(41);
  Joints2d pts;
  for (int k = 0; k < kJoints; ++k) pts.row(k) << rng.uniform(-50, 690), rng.uniform(-50, 530);
  const MaskGrid fast = rasterize_mask(pts, 640, 480);
  // Brute force: test every cell box against every point.
  for (int gy = 0; gy < 16; ++gy) {
    for (int gx = 0; gx < 16; ++gx) {
      const double u0 = 40.0 * gx, v0 = 30.0 * gy;
      bool hit = false;
      for (int k = 0; k < kJoints; ++k) {
        hit = hit || (pts(k, 0) >= u0 && pts(k, 0) < u0 + 40.0 && pts(k, 1) >= v0 && pts(k, 1) < v0 + 30.0);
      }
      CHECK(fast[gy * 16 + gx] == (hit ? 1.0 : 0.0));
    }
  }
  CHECK_THROWS_AS(rasterize_mask(pts, 0.0, 480), std::invalid_argument);
}

TEST_CASE("normalization arithmetic and round trip") {
  NormStats identity;
  MotionSequence seq;
  seq.length = 3;
  Rng rng(53);
  for (int i = 0; i < 3; ++i) seq.set_frame(i, random_frame(rng));
  CHECK(normalize(seq, identity).frames == seq.frames);

  NormStats stats;
  stats.mean[5] = 3.0;
  stats.std[5] = 2.0;
  MotionSequence one;
  one.frames(0, 5) = 5.0;
  CHECK(normalize(one, stats).frames(0, 5) == 1.0);

  std::vector<MotionSequence> train;
  for (int s = 0; s < 20; ++s) {
    MotionSequence m;
    m.length = 1 + static_cast<int>(rng.below(kMaxFrames));
    for (int i = 0; i < m.length; ++i) m.set_frame(i, random_frame(rng));
    train.push_back(m);
  }
  const NormStats fitted = compute_stats(train);
  for (const auto& m : train) {
    const MotionSequence back = denormalize(normalize(m, fitted), fitted);
    CHECK((back.frames - m.frames).cwiseAbs().maxCoeff() <= 1e-10);
    CHECK(normalize(m, fitted).frames.bottomRows(kMaxFrames - m.length).isZero(0.0));
  }
  CHECK(fitted.mean[0] == 0.0);
  CHECK(fitted.std[70] == 1.0);  // contact dims pass through
  CHECK_FALSE(is_scaled_dim(83));
  CHECK(is_scaled_dim(84));

  // Normalized training set is centred with unit spread on scaled dims.
  FrameVector sum = FrameVector::Zero(), sq = FrameVector::Zero();
  double n = 0;
  for (const auto& m : train) {
    const MotionSequence z = normalize(m, fitted);
    for (int i = 0; i < m.length; ++i) {
      sum += z.frames.row(i).transpose();
      sq += z.frames.row(i).transpose().cwiseAbs2();
      ++n;
    }
  }
  for (int d = 0; d < kFrameWidth; ++d) {
    if (!is_scaled_dim(d) || fitted.std[d] == 1.0) continue;
    CHECK(std::abs(sum[d] / n) < 1e-9);
    CHECK(std::abs(sq[d] / n - 1.0) < 1e-9);
  }
}

TEST_CASE("zero spread dimensions pass through unscaled") {
  std::vector<MotionSequence> train(2);
  for (auto& m : train) {
    m.length = 2;
    m.frames(0, 10) = 4.0;
    m.frames(1, 10) = 4.0;
  }
  const NormStats s = compute_stats(train);
  CHECK(s.mean[10] == 0.0);
  CHECK(s.std[10] == 1.0);
}

TEST_CASE("decode thresholds flags, clamps contact and zeroes absent hands") {
  RowMatrix out = RowMatrix::Zero(kMaxFrames, kFrameWidth);
  out(0, 0) = 0.4;    // left absent
  out(0, 5) = 9.0;    // left payload must vanish
  out(0, 83) = 0.7;   // right present
  out(0, 150) = 1.6;  // clamped contact
  out(0, 151) = -0.3;
  const MotionSequence s = decode(out, 1, 2, NormStats{});
  CHECK(s.frames(0, 0) == 0.0);
  CHECK(s.frames(0, 5) == 0.0);
  CHECK(s.frames(0, 83) == 1.0);
  CHECK(s.frames(0, 150) == 1.0);
  CHECK(s.frames(0, 151) == 0.0);
  CHECK(s.label == 2);
  s.validate();
}

TEST_CASE("sequence invariants are enforced") {
  MotionSequence s;
  s.length = 0;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s.length = 2;
  s.frames(5, 3) = 1.0;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
}

TEST_CASE("skeleton data file matches the built-in template") {
  const auto file = load_skeleton(TSHAMO_SOURCE_DIR "/data/hand_skeleton_v1.json");
  const auto builtin = default_skeleton();
  CHECK(file.parent == builtin.parent);
  CHECK(file.version == builtin.version);
  CHECK(file.template_offsets == builtin.template_offsets);
  // The built-in basis uses std::sin, which may differ in the last ulp between builds.
  CHECK((file.shape_basis - builtin.shape_basis).cwiseAbs().maxCoeff() <= 1e-15);
  file.validate();
  int chains = 0;
  for (int j = 1; j < kJoints; ++j) chains += file.parent[j] == 0;
  CHECK(chains == 5);
}
