#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace motionrag {

using Vec3 = Eigen::Vector3d;
using Quat = Eigen::Quaterniond;

inline constexpr int kNoParent = -1;

// Kinematic tree. Joints are stored parents-first: parent[j] < j for every
// non-root joint and joint 0 is the only root.
struct Skeleton {
  std::vector<std::string> joint_names;
  std::vector<int> parent;
  std::vector<Vec3> offset;  // bone offset in the parent frame, meters
  std::vector<int> foot_joints;

  std::size_t joint_count() const { return joint_names.size(); }

  // Throws Error(invariant) describing the first violated invariant.
  void validate() const;

  int find_joint(const std::string& name) const;

  // 8 joints: root, spine, neck, head, and two knee->foot legs. Y is up and
  // the feet rest at y = 0 when the root sits at 0.9 m with straight legs.
  static Skeleton default_biped();
};

bool operator==(const Skeleton& a, const Skeleton& b);

// Where a window was cut from; set by corpus windowing.
struct ClipOrigin {
  std::string source_id;
  std::size_t start_frame = 0;
  std::size_t segment = 0;

  friend bool operator==(const ClipOrigin&, const ClipOrigin&) = default;
};

struct MotionClip {
  std::string id;
  double fps = 30.0;
  std::vector<Vec3> root_pos;  // frames
  std::vector<Quat> rot;       // frames * joints, frame-major
  std::size_t joints = 0;
  std::optional<ClipOrigin> origin;

  std::size_t frames() const { return root_pos.size(); }

  const Quat& rotation(std::size_t frame, std::size_t joint) const {
    return rot[frame * joints + joint];
  }
  Quat& rotation(std::size_t frame, std::size_t joint) {
    return rot[frame * joints + joint];
  }

  // frames >= 2, fps > 0, unit quaternions within 1e-6.
  void validate() const;

  // Contiguous frames [start, start + count) as a new clip.
  MotionClip slice(std::size_t start, std::size_t count, std::string new_id) const;

  // Allocates an identity-rotation clip of the given shape.
  static MotionClip zeros(std::string id, double fps, std::size_t frames,
                          std::size_t joints);
};

bool operator==(const MotionClip& a, const MotionClip& b);

struct PoseSequence {
  std::size_t frames = 0;
  std::size_t joints = 0;
  std::vector<Vec3> joint_pos;  // frames * joints, frame-major, meters

  const Vec3& at(std::size_t frame, std::size_t joint) const {
    return joint_pos[frame * joints + joint];
  }
  Vec3& at(std::size_t frame, std::size_t joint) {
    return joint_pos[frame * joints + joint];
  }
};

enum class PositionSpace { world, root_relative };

PoseSequence forward_kinematics(const Skeleton& skeleton, const MotionClip& clip,
                                PositionSpace space = PositionSpace::world);

// Writes one frame of world joint positions into `out` (size = joints).
void forward_kinematics_frame(const Skeleton& skeleton, const Vec3& root,
                              std::span<const Quat> rotations, std::span<Vec3> out);

// Forward differences scaled by fps: frames - 1 rows of joints velocities.
PoseSequence velocities(const PoseSequence& seq, double fps);

// Gradient of a scalar loss through FK for one frame. Rotations are given as
// raw (w, x, y, z) 4-vectors that FK normalizes first, so the returned
// quaternion gradient already includes the normalization Jacobian.
struct FkFrameGradient {
  Vec3 root = Vec3::Zero();
  std::vector<Eigen::Vector4d> rotation;
};

void forward_kinematics_raw(const Skeleton& skeleton, const Vec3& root,
                            std::span<const Eigen::Vector4d> raw_rotations,
                            std::span<Vec3> out);

FkFrameGradient forward_kinematics_vjp(const Skeleton& skeleton, const Vec3& root,
                                       std::span<const Eigen::Vector4d> raw_rotations,
                                       std::span<const Vec3> grad_positions);

Quat quat_from_axis_angle(const Vec3& axis_angle);
Vec3 axis_angle_from_quat(const Quat& q);

// Unit quaternion with non-negative w.
Quat canonical(const Quat& q);

// Shortest-arc spherical interpolation.
Quat slerp(const Quat& a, const Quat& b, double t);

}  // namespace motionrag
