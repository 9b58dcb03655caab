#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "motionrag/kinematics.hpp"

namespace motionrag {

struct MetricsConfig {
  double sigma = 0.1;  // seconds
  // Average over dance beats (nearest music beat) instead of over music beats.
  bool transpose_bas = false;

  void validate() const;
};

// Strict local minima of the mean joint speed, in seconds. Speed sample i
// covers frames i -> i + 1 and is stamped at i / fps.
std::vector<double> motion_beats(const PoseSequence& seq, double fps);

// Mean over music beats of exp(-d^2 / (2 sigma^2)), d the distance to the
// nearest dance beat; 0 when there are no dance beats.
double beat_alignment_score(std::span<const double> music_beats, std::span<const double> dance_beats,
                            double sigma);
double beat_alignment_score(std::span<const double> music_beats, std::span<const double> dance_beats,
                            const MetricsConfig& cfg);

// Mean Euclidean distance over all unordered row pairs.
double diversity(const Eigen::MatrixXd& features);

struct FeatureSummary {
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;  // unbiased
  std::size_t count = 0;

  static FeatureSummary of(const Eigen::MatrixXd& features);
  void validate() const;
};

// |mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).
double frechet_distance(const FeatureSummary& a, const FeatureSummary& b);

// Symmetric PSD square root; eigenvalues down to -tol are treated as 0.
Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m, double tol = 1e-8);

// Per joint: mean and variance of speed, then mean and variance of
// acceleration magnitude.
Eigen::VectorXd kinematic_features(const PoseSequence& seq, double fps);

// Histograms of a fixed set of inter-joint distances plus mean and standard
// deviation of the bend angle at every joint with both a parent and a child.
Eigen::VectorXd geometric_features(const PoseSequence& seq, const Skeleton& skeleton);

inline constexpr std::size_t kDistanceBins = 8;
inline constexpr double kDistanceRange = 2.0;  // meters

// Largest per-joint displacement between consecutive frames.
std::vector<double> frame_jumps(const PoseSequence& seq);

struct JumpStats {
  double mean = 0.0;
  double p95 = 0.0;
  double max = 0.0;
  std::size_t over_3x_p95 = 0;  // jumps above three times the 95th percentile
};

JumpStats jump_stats(std::span<const double> jumps);

// Nearest-rank percentile, q in [0, 1].
double percentile(std::vector<double> values, double q);

}  // namespace motionrag
