#include "motionrag/kinematics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <set>

#include "motionrag/error.hpp"

namespace motionrag {

namespace {

using Mat3 = Eigen::Matrix3d;

Mat3 rotation_matrix(const Eigen::Vector4d& q) {
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  Mat3 r;
  r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
      2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
      2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return r;
}

// Partial derivatives of rotation_matrix with respect to (w, x, y, z).
std::array<Mat3, 4> rotation_matrix_partials(const Eigen::Vector4d& q) {
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  std::array<Mat3, 4> d;
  d[0] << 0, -2 * z, 2 * y, 2 * z, 0, -2 * x, -2 * y, 2 * x, 0;
  d[1] << 0, 2 * y, 2 * z, 2 * y, -4 * x, -2 * w, 2 * z, 2 * w, -4 * x;
  d[2] << -4 * y, 2 * x, 2 * w, 2 * x, 0, 2 * z, -2 * w, 2 * z, -4 * y;
  d[3] << -4 * z, -2 * w, 2 * x, 2 * w, -4 * z, 2 * y, 2 * x, 2 * y, 0;
  return d;
}

Eigen::Vector4d normalized_or_fail(const Eigen::Vector4d& raw) {
  const double n = raw.norm();
  if (!(n > 1e-12)) fail(ErrorCode::numeric, "quaternion with zero norm in FK input");
  return raw / n;
}

}  // namespace

void Skeleton::validate() const {
  const std::size_t n = joint_names.size();
  if (n == 0) fail(ErrorCode::invariant, "skeleton has no joints");
  if (parent.size() != n || offset.size() != n) {
    fail(ErrorCode::invariant, "skeleton field lengths disagree");
  }
  if (parent[0] != kNoParent) fail(ErrorCode::invariant, "joint 0 must be the root");
  std::set<std::string> names;
  for (std::size_t j = 0; j < n; ++j) {
    if (!names.insert(joint_names[j]).second) {
      fail(ErrorCode::invariant, "duplicate joint name '" + joint_names[j] + "'");
    }
    if (!offset[j].allFinite()) {
      fail(ErrorCode::invariant, "non-finite offset for joint '" + joint_names[j] + "'");
    }
    if (j == 0) continue;
    if (parent[j] < 0 || parent[j] >= static_cast<int>(j)) {
      fail(ErrorCode::invariant,
           "joint '" + joint_names[j] + "' must have a parent listed before it");
    }
    if (offset[j].norm() <= 0.0) {
      fail(ErrorCode::invariant, "joint '" + joint_names[j] + "' has a zero offset");
    }
  }
  std::set<int> feet;
  for (int f : foot_joints) {
    if (f < 0 || f >= static_cast<int>(n)) {
      fail(ErrorCode::invariant, "foot joint index out of range");
    }
    if (!feet.insert(f).second) fail(ErrorCode::invariant, "duplicate foot joint");
  }
}

int Skeleton::find_joint(const std::string& name) const {
  const auto it = std::find(joint_names.begin(), joint_names.end(), name);
  return it == joint_names.end() ? kNoParent
                                 : static_cast<int>(it - joint_names.begin());
}

Skeleton Skeleton::default_biped() {
  Skeleton s;
  s.joint_names = {"root", "spine", "neck", "head", "l_knee", "l_foot", "r_knee", "r_foot"};
  s.parent = {kNoParent, 0, 1, 2, 0, 4, 0, 6};
  s.offset = {Vec3(0, 0, 0),     Vec3(0, 0.25, 0),   Vec3(0, 0.25, 0),
              Vec3(0, 0.15, 0),  Vec3(0.1, -0.45, 0), Vec3(0, -0.45, 0),
              Vec3(-0.1, -0.45, 0), Vec3(0, -0.45, 0)};
  s.foot_joints = {5, 7};
  return s;
}

bool operator==(const Skeleton& a, const Skeleton& b) {
  return a.joint_names == b.joint_names && a.parent == b.parent && a.offset == b.offset &&
         a.foot_joints == b.foot_joints;
}

void MotionClip::validate() const {
  if (!(fps > 0.0) || !std::isfinite(fps)) {
    fail(ErrorCode::invariant, "clip '" + id + "': fps must be positive");
  }
  if (frames() < 2) fail(ErrorCode::invariant, "clip '" + id + "': frame count < 2");
  if (joints == 0 || rot.size() != frames() * joints) {
    fail(ErrorCode::invariant, "clip '" + id + "': rotation array has wrong size");
  }
  for (const Vec3& p : root_pos) {
    if (!p.allFinite()) fail(ErrorCode::invariant, "clip '" + id + "': non-finite root");
  }
  for (const Quat& q : rot) {
    if (!(std::abs(q.norm() - 1.0) <= 1e-6)) {
      fail(ErrorCode::invariant, "clip '" + id + "': quaternion is not unit-norm");
    }
  }
}

MotionClip MotionClip::slice(std::size_t start, std::size_t count, std::string new_id) const {
  if (start + count > frames()) {
    fail(ErrorCode::invariant, "clip '" + id + "': slice exceeds frame count");
  }
  MotionClip out;
  out.id = std::move(new_id);
  out.fps = fps;
  out.joints = joints;
  out.root_pos.assign(root_pos.begin() + static_cast<std::ptrdiff_t>(start),
                      root_pos.begin() + static_cast<std::ptrdiff_t>(start + count));
  out.rot.assign(rot.begin() + static_cast<std::ptrdiff_t>(start * joints),
                 rot.begin() + static_cast<std::ptrdiff_t>((start + count) * joints));
  return out;
}

MotionClip MotionClip::zeros(std::string id, double fps, std::size_t frames,
                             std::size_t joints) {
  MotionClip c;
  c.id = std::move(id);
  c.fps = fps;
  c.joints = joints;
  c.root_pos.assign(frames, Vec3::Zero());
  c.rot.assign(frames * joints, Quat::Identity());
  return c;
}

bool operator==(const MotionClip& a, const MotionClip& b) {
  if (a.id != b.id || a.fps != b.fps || a.joints != b.joints || a.origin != b.origin ||
      a.root_pos != b.root_pos || a.rot.size() != b.rot.size()) {
    return false;
  }
  for (std::size_t i = 0; i < a.rot.size(); ++i) {
    if (a.rot[i].coeffs() != b.rot[i].coeffs()) return false;
  }
  return true;
}

void forward_kinematics_frame(const Skeleton& skeleton, const Vec3& root,
                              std::span<const Quat> rotations, std::span<Vec3> out) {
  const std::size_t n = skeleton.joint_count();
  std::vector<Mat3> global(n);
  global[0] = rotations[0].toRotationMatrix();
  out[0] = root;
  for (std::size_t j = 1; j < n; ++j) {
    const auto p = static_cast<std::size_t>(skeleton.parent[j]);
    out[j] = out[p] + global[p] * skeleton.offset[j];
    global[j] = global[p] * rotations[j].toRotationMatrix();
  }
}

PoseSequence forward_kinematics(const Skeleton& skeleton, const MotionClip& clip,
                                PositionSpace space) {
  const std::size_t n = skeleton.joint_count();
  if (clip.joints != n) {
    fail(ErrorCode::invariant, "clip '" + clip.id + "' has " + std::to_string(clip.joints) +
                                   " joints; skeleton has " + std::to_string(n));
  }
  PoseSequence seq;
  seq.frames = clip.frames();
  seq.joints = n;
  seq.joint_pos.resize(seq.frames * n);
  for (std::size_t f = 0; f < seq.frames; ++f) {
    const Vec3 root = space == PositionSpace::world ? clip.root_pos[f] : Vec3::Zero();
    forward_kinematics_frame(skeleton, root,
                             std::span<const Quat>(clip.rot.data() + f * n, n),
                             std::span<Vec3>(seq.joint_pos.data() + f * n, n));
  }
  return seq;
}

PoseSequence velocities(const PoseSequence& seq, double fps) {
  if (seq.frames < 2) fail(ErrorCode::invariant, "velocities need at least 2 frames");
  PoseSequence v;
  v.frames = seq.frames - 1;
  v.joints = seq.joints;
  v.joint_pos.resize(v.frames * v.joints);
  for (std::size_t f = 0; f < v.frames; ++f) {
    for (std::size_t j = 0; j < v.joints; ++j) {
      v.at(f, j) = (seq.at(f + 1, j) - seq.at(f, j)) * fps;
    }
  }
  return v;
}

void forward_kinematics_raw(const Skeleton& skeleton, const Vec3& root,
                            std::span<const Eigen::Vector4d> raw_rotations,
                            std::span<Vec3> out) {
  const std::size_t n = skeleton.joint_count();
  std::vector<Mat3> global(n);
  global[0] = rotation_matrix(normalized_or_fail(raw_rotations[0]));
  out[0] = root;
  for (std::size_t j = 1; j < n; ++j) {
    const auto p = static_cast<std::size_t>(skeleton.parent[j]);
    out[j] = out[p] + global[p] * skeleton.offset[j];
    global[j] = global[p] * rotation_matrix(normalized_or_fail(raw_rotations[j]));
  }
}

FkFrameGradient forward_kinematics_vjp(const Skeleton& skeleton, const Vec3& root,
                                       std::span<const Eigen::Vector4d> raw_rotations,
                                       std::span<const Vec3> grad_positions) {
  const std::size_t n = skeleton.joint_count();
  std::vector<Eigen::Vector4d> unit(n);
  std::vector<Mat3> local(n), global(n);
  for (std::size_t j = 0; j < n; ++j) {
    unit[j] = normalized_or_fail(raw_rotations[j]);
    local[j] = rotation_matrix(unit[j]);
  }
  global[0] = local[0];
  for (std::size_t j = 1; j < n; ++j) {
    global[j] = global[static_cast<std::size_t>(skeleton.parent[j])] * local[j];
  }
  (void)root;  // positions enter linearly; only the rotations need the forward pass

  std::vector<Vec3> g_pos(grad_positions.begin(), grad_positions.end());
  std::vector<Mat3> g_global(n, Mat3::Zero());
  std::vector<Mat3> g_local(n, Mat3::Zero());
  // Children come after parents, so a reverse sweep sees every child first.
  for (std::size_t j = n; j-- > 1;) {
    const auto p = static_cast<std::size_t>(skeleton.parent[j]);
    // global[j] = global[p] * local[j]
    g_global[p] += g_global[j] * local[j].transpose();
    g_local[j] = global[p].transpose() * g_global[j];
    // pos[j] = pos[p] + global[p] * offset[j]
    g_pos[p] += g_pos[j];
    g_global[p] += g_pos[j] * skeleton.offset[j].transpose();
  }
  g_local[0] = g_global[0];

  FkFrameGradient out;
  out.root = g_pos[0];
  out.rotation.resize(n);
  for (std::size_t j = 0; j < n; ++j) {
    const auto partials = rotation_matrix_partials(unit[j]);
    Eigen::Vector4d g_unit;
    for (int k = 0; k < 4; ++k) g_unit[k] = (g_local[j].cwiseProduct(partials[k])).sum();
    const double norm = raw_rotations[j].norm();
    // d(q / |q|) / dq = (I - u u^T) / |q|
    out.rotation[j] = (g_unit - unit[j] * unit[j].dot(g_unit)) / norm;
  }
  return out;
}

Quat quat_from_axis_angle(const Vec3& axis_angle) {
  const double angle = axis_angle.norm();
  if (angle < 1e-12) return Quat::Identity();
  return Quat(Eigen::AngleAxisd(angle, axis_angle / angle));
}

Vec3 axis_angle_from_quat(const Quat& q) {
  const Quat c = canonical(q);
  const Eigen::AngleAxisd aa(c);
  return aa.axis() * aa.angle();
}

Quat canonical(const Quat& q) {
  Quat n = q.normalized();
  if (n.w() < 0.0) n.coeffs() = -n.coeffs();
  return n;
}

Quat slerp(const Quat& a, const Quat& b, double t) {
  return a.slerp(t, b).normalized();
}

}  // namespace motionrag
