#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "motionrag/kinematics.hpp"
#include "support.hpp"

namespace motionrag {
namespace {

using testing::random_clip;
using testing::random_quat;

// Recursive world positions from composed quaternions.
std::vector<Vec3> fk_oracle(const Skeleton& s, const Vec3& root, const std::vector<Quat>& rot) {
  std::vector<Quat> global(s.joint_count());
  std::vector<Vec3> pos(s.joint_count());
  for (std::size_t j = 0; j < s.joint_count(); ++j) {
    if (s.parent[j] == kNoParent) {
      global[j] = rot[j];
      pos[j] = root;
    } else {
      const auto p = static_cast<std::size_t>(s.parent[j]);
      global[j] = global[p] * rot[j];
      pos[j] = pos[p] + global[p] * s.offset[j];
    }
  }
  return pos;
}

Skeleton chain2() {
  Skeleton s;
  s.joint_names = {"a", "b"};
  s.parent = {kNoParent, 0};
  s.offset = {Vec3::Zero(), Vec3(1, 0, 0)};
  return s;
}

TEST(Skeleton, DefaultBipedIsValid) {
  const Skeleton s = Skeleton::default_biped();
  EXPECT_NO_THROW(s.validate());
  EXPECT_EQ(s.joint_count(), 8u);
  EXPECT_EQ(s.foot_joints.size(), 2u);
}

TEST(Skeleton, RejectsBrokenTrees) {
  Skeleton s = Skeleton::default_biped();
  s.parent[3] = 5;
  EXPECT_MOTIONRAG_ERROR(s.validate(), ErrorCode::invariant, "");
  s = Skeleton::default_biped();
  s.offset[2] = Vec3::Zero();
  EXPECT_MOTIONRAG_ERROR(s.validate(), ErrorCode::invariant, "zero offset");
  s = Skeleton::default_biped();
  s.foot_joints.push_back(42);
  EXPECT_MOTIONRAG_ERROR(s.validate(), ErrorCode::invariant, "foot joint");
}

TEST(ForwardKinematics, IdentityPoseSumsOffsets) {
  const Skeleton s = Skeleton::default_biped();
  MotionClip c = MotionClip::zeros("id", 30.0, 2, s.joint_count());
  const PoseSequence p = forward_kinematics(s, c);
  for (std::size_t j = 0; j < s.joint_count(); ++j) {
    Vec3 expected = Vec3::Zero();
    for (int k = static_cast<int>(j); k != kNoParent; k = s.parent[static_cast<std::size_t>(k)]) {
      expected += s.offset[static_cast<std::size_t>(k)];
    }
    EXPECT_LT((p.at(0, j) - expected).norm(), 1e-12);
  }
}

TEST(ForwardKinematics, HalfTurnAboutZMirrorsChild) {
  const Skeleton s = chain2();
  MotionClip c = MotionClip::zeros("id", 30.0, 2, 2);
  c.rotation(0, 0) = Quat(Eigen::AngleAxisd(std::numbers::pi, Vec3::UnitZ()));
  const PoseSequence p = forward_kinematics(s, c);
  EXPECT_NEAR((p.at(0, 1) - Vec3(-1, 0, 0)).norm(), 0.0, 1e-12);
}

TEST(ForwardKinematics, MatchesQuaternionOracleAndKeepsBoneLengths) {
  const Skeleton s = Skeleton::default_biped();
  Rng rng(7);
  const MotionClip c = random_clip(rng, 20, s.joint_count());
  const PoseSequence p = forward_kinematics(s, c);
  for (std::size_t f = 0; f < c.frames(); ++f) {
    std::vector<Quat> rot(c.rot.begin() + static_cast<std::ptrdiff_t>(f * c.joints),
                          c.rot.begin() + static_cast<std::ptrdiff_t>((f + 1) * c.joints));
    const auto oracle = fk_oracle(s, c.root_pos[f], rot);
    for (std::size_t j = 0; j < s.joint_count(); ++j) {
      EXPECT_LT((p.at(f, j) - oracle[j]).norm(), 1e-12);
      if (j > 0) {
        const double bone = (p.at(f, j) - p.at(f, static_cast<std::size_t>(s.parent[j]))).norm();
        EXPECT_NEAR(bone, s.offset[j].norm(), 1e-6);
      }
    }
    EXPECT_EQ(p.at(f, 0), c.root_pos[f]);
  }
}

TEST(ForwardKinematics, TranslationEquivariant) {
  const Skeleton s = Skeleton::default_biped();
  Rng rng(8);
  MotionClip c = random_clip(rng, 5, s.joint_count());
  const PoseSequence a = forward_kinematics(s, c);
  const Vec3 delta(0.5, -2.0, 3.25);
  for (Vec3& r : c.root_pos) r += delta;
  const PoseSequence b = forward_kinematics(s, c);
  for (std::size_t i = 0; i < a.joint_pos.size(); ++i) {
    EXPECT_LT((b.joint_pos[i] - a.joint_pos[i] - delta).norm(), 1e-12);
  }
}

TEST(ForwardKinematics, RootRelativeSubtractsRoot) {
  const Skeleton s = Skeleton::default_biped();
  Rng rng(9);
  const MotionClip c = random_clip(rng, 4, s.joint_count());
  const PoseSequence w = forward_kinematics(s, c, PositionSpace::world);
  const PoseSequence r = forward_kinematics(s, c, PositionSpace::root_relative);
  for (std::size_t f = 0; f < 4; ++f) {
    for (std::size_t j = 0; j < s.joint_count(); ++j) {
      EXPECT_LT((r.at(f, j) - (w.at(f, j) - c.root_pos[f])).norm(), 1e-12);
    }
  }
}

TEST(ForwardKinematics, JointCountMismatchIsStructuralError) {
  const Skeleton s = Skeleton::default_biped();
  const MotionClip c = MotionClip::zeros("short", 30.0, 3, 5);
  EXPECT_MOTIONRAG_ERROR(forward_kinematics(s, c), ErrorCode::invariant, "");
}

TEST(ForwardKinematics, VjpMatchesFiniteDifferences) {
  const Skeleton s = Skeleton::default_biped();
  Rng rng(11);
  const std::size_t n = s.joint_count();
  std::vector<Eigen::Vector4d> raw(n);
  for (auto& q : raw) q = Eigen::Vector4d(rng.normal(), rng.normal(), rng.normal(), rng.normal());
  const Vec3 root(rng.normal(), rng.normal(), rng.normal());
  std::vector<Vec3> w(n);
  for (auto& v : w) v = Vec3(rng.normal(), rng.normal(), rng.normal());
  const auto loss = [&](const Vec3& r, const std::vector<Eigen::Vector4d>& q) {
    std::vector<Vec3> out(n);
    forward_kinematics_raw(s, r, q, out);
    double l = 0.0;
    for (std::size_t j = 0; j < n; ++j) l += w[j].dot(out[j]);
    return l;
  };
  const FkFrameGradient g = forward_kinematics_vjp(s, root, raw, w);
  const double h = 1e-6;
  for (int k = 0; k < 3; ++k) {
    Vec3 rp = root, rm = root;
    rp[k] += h;
    rm[k] -= h;
    EXPECT_LT(testing::rel_error((loss(rp, raw) - loss(rm, raw)) / (2 * h), g.root[k]), 1e-6);
  }
  for (std::size_t j = 0; j < n; ++j) {
    for (int k = 0; k < 4; ++k) {
      auto qp = raw, qm = raw;
      qp[j][k] += h;
      qm[j][k] -= h;
      const double fd = (loss(root, qp) - loss(root, qm)) / (2 * h);
      EXPECT_LT(testing::rel_error(fd, g.rotation[j][k], 1e-6), 1e-5) << "joint " << j << " comp " << k;
    }
  }
}

TEST(ForwardKinematics, RawRotationsAreNormalized) {
  const Skeleton s = Skeleton::default_biped();
  Rng rng(12);
  std::vector<Eigen::Vector4d> raw(s.joint_count());
  std::vector<Quat> unit(s.joint_count());
  for (std::size_t j = 0; j < raw.size(); ++j) {
    unit[j] = random_quat(rng);
    raw[j] = 3.5 * Eigen::Vector4d(unit[j].w(), unit[j].x(), unit[j].y(), unit[j].z());
  }
  std::vector<Vec3> a(raw.size()), b(raw.size());
  forward_kinematics_raw(s, Vec3::Zero(), raw, a);
  forward_kinematics_frame(s, Vec3::Zero(), unit, b);
  for (std::size_t j = 0; j < raw.size(); ++j) EXPECT_LT((a[j] - b[j]).norm(), 1e-12);
  raw[2].setZero();
  EXPECT_MOTIONRAG_ERROR(forward_kinematics_raw(s, Vec3::Zero(), raw, a), ErrorCode::numeric, "zero norm");
}

TEST(Velocities, ConstantAndLinearMotion) {
  PoseSequence p;
  p.frames = 4;
  p.joints = 2;
  p.joint_pos.assign(8, Vec3(1, 2, 3));
  for (const Vec3& v : velocities(p, 30.0).joint_pos) EXPECT_EQ(v, Vec3::Zero());
  for (std::size_t f = 0; f < 4; ++f) {
    for (std::size_t j = 0; j < 2; ++j) p.at(f, j) = Vec3(static_cast<double>(f) / 30.0, 0, 0);
  }
  const PoseSequence v = velocities(p, 30.0);
  EXPECT_EQ(v.frames, 3u);
  for (const Vec3& x : v.joint_pos) EXPECT_NEAR((x - Vec3(1, 0, 0)).norm(), 0.0, 1e-12);
}

TEST(Velocities, MatchesDifferenceOracle) {
  Rng rng(13);
  PoseSequence p;
  p.frames = 10;
  p.joints = 3;
  for (std::size_t i = 0; i < 30; ++i) p.joint_pos.emplace_back(rng.normal(), rng.normal(), rng.normal());
  const PoseSequence v = velocities(p, 24.0);
  for (std::size_t f = 0; f + 1 < p.frames; ++f) {
    for (std::size_t j = 0; j < 3; ++j) {
      const Vec3 expected = (p.joint_pos[(f + 1) * 3 + j] - p.joint_pos[f * 3 + j]) * 24.0;
      EXPECT_LT((v.at(f, j) - expected).norm(), 1e-12);
    }
  }
}

TEST(Velocities, SingleFrameIsAnError) {
  PoseSequence p;
  p.frames = 1;
  p.joints = 1;
  p.joint_pos = {Vec3::Zero()};
  EXPECT_MOTIONRAG_ERROR(velocities(p, 30.0), ErrorCode::invariant, "2 frames");
}

TEST(Quaternions, NormalizationIdempotentAndConjugateIsIdentity) {
  Rng rng(14);
  for (int i = 0; i < 100; ++i) {
    const Quat q = random_quat(rng);
    const Quat n1 = q.normalized();
    EXPECT_LT((n1.coeffs() - n1.normalized().coeffs()).norm(), 1e-15);
    const Quat id = q * q.conjugate();
    EXPECT_NEAR(id.w(), 1.0, 1e-9);
    EXPECT_LT(id.vec().norm(), 1e-9);
  }
}

TEST(Quaternions, AxisAngleRoundTripAndCanonicalSign) {
  Rng rng(15);
  for (int i = 0; i < 50; ++i) {
    const Vec3 aa = Vec3(rng.normal(), rng.normal(), rng.normal()).normalized() * rng.uniform(0.0, 3.0);
    const Quat q = quat_from_axis_angle(aa);
    EXPECT_LT((axis_angle_from_quat(q) - aa).norm(), 1e-9);
    const Quat c = canonical(Quat(-q.w(), -q.x(), -q.y(), -q.z()));
    EXPECT_GE(c.w(), 0.0);
    EXPECT_LT(c.angularDistance(q), 1e-9);
  }
  EXPECT_LT(axis_angle_from_quat(Quat::Identity()).norm(), 1e-15);
}

TEST(Quaternions, SlerpEndpointsAndShortestArc) {
  Rng rng(16);
  const Quat a = random_quat(rng);
  const Quat b = random_quat(rng);
  EXPECT_LT(slerp(a, b, 0.0).angularDistance(a), 1e-9);
  EXPECT_LT(slerp(a, b, 1.0).angularDistance(b), 1e-9);
  const Quat mid = slerp(a, b, 0.5);
  EXPECT_NEAR(mid.angularDistance(a), mid.angularDistance(b), 1e-9);
  EXPECT_NEAR(mid.angularDistance(a), 0.5 * a.angularDistance(b), 1e-9);
  const Quat nb(-b.w(), -b.x(), -b.y(), -b.z());
  EXPECT_LT(slerp(a, nb, 0.5).angularDistance(mid), 1e-9);
}

TEST(MotionClip, ValidateAndSlice) {
  Rng rng(17);
  MotionClip c = random_clip(rng, 10, 3, 30.0, "c");
  EXPECT_NO_THROW(c.validate());
  const MotionClip s = c.slice(4, 3, "s");
  EXPECT_EQ(s.frames(), 3u);
  EXPECT_EQ(s.root_pos[0], c.root_pos[4]);
  EXPECT_EQ(s.rotation(2, 1).coeffs(), c.rotation(6, 1).coeffs());
  EXPECT_MOTIONRAG_ERROR(c.slice(8, 3, "x"), ErrorCode::invariant, "slice");
  c.rotation(1, 1) = Quat(2, 0, 0, 0);
  EXPECT_MOTIONRAG_ERROR(c.validate(), ErrorCode::invariant, "unit-norm");
  const MotionClip one = MotionClip::zeros("one", 30.0, 1, 3);
  EXPECT_MOTIONRAG_ERROR(one.validate(), ErrorCode::invariant, "frame count < 2");
}

}  // namespace
}  // namespace motionrag
