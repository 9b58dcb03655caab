#pragma once

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <string>

#include <unistd.h>

#include "motionrag/error.hpp"
#include "motionrag/kinematics.hpp"
#include "motionrag/rng.hpp"

namespace motionrag::testing {

inline Quat random_quat(Rng& rng) {
  Quat q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
  q.normalize();
  return q;
}

inline MotionClip random_clip(Rng& rng, std::size_t frames, std::size_t joints, double fps = 30.0,
                              std::string id = "random") {
  MotionClip c = MotionClip::zeros(std::move(id), fps, frames, joints);
  for (std::size_t f = 0; f < frames; ++f) {
    c.root_pos[f] = Vec3(rng.normal(), 0.9 + 0.1 * rng.normal(), rng.normal());
    for (std::size_t j = 0; j < joints; ++j) c.rotation(f, j) = random_quat(rng);
  }
  return c;
}

// Relative error with an absolute floor, for finite-difference comparisons.
inline double rel_error(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max(floor, std::max(std::abs(a), std::abs(b)));
}

// Unique scratch directory under the system temp path, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("motionrag_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace motionrag::testing

// Asserts that `stmt` throws motionrag::Error with `code` and a message containing `needle`.
#define EXPECT_MOTIONRAG_ERROR(stmt, expected_code, needle)                         \
  do {                                                                               \
    try {                                                                            \
      stmt;                                                                          \
      ADD_FAILURE() << "expected an error containing \"" << (needle) << "\"";        \
    } catch (const ::motionrag::Error& e) {                                          \
      EXPECT_EQ(e.code(), (expected_code));                                         \
      EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();  \
    }                                                                                \
  } while (0)
