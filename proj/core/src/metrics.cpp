#include "motionrag/metrics.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <limits>

#include "motionrag/error.hpp"

namespace motionrag {

namespace {

Eigen::Index idx(std::size_t v) { return static_cast<Eigen::Index>(v); }

void require_frames(const PoseSequence& seq, const char* what) {
  if (seq.frames < 3) fail(ErrorCode::usage, std::string(what) + " needs at least 3 frames");
}

// Mean and population variance.
std::pair<double, double> moments(std::span<const double> v) {
  if (v.empty()) return {0.0, 0.0};
  double mean = 0.0;
  for (const double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (const double x : v) var += (x - mean) * (x - mean);
  return {mean, var / static_cast<double>(v.size())};
}

}  // namespace

void MetricsConfig::validate() const {
  if (!(sigma > 0.0) || !std::isfinite(sigma)) fail(ErrorCode::usage, "sigma must be positive");
}

std::vector<double> motion_beats(const PoseSequence& seq, double fps) {
  require_frames(seq, "motion_beats");
  const PoseSequence vel = velocities(seq, fps);
  std::vector<double> speed(vel.frames, 0.0);
  for (std::size_t f = 0; f < vel.frames; ++f) {
    for (std::size_t j = 0; j < vel.joints; ++j) speed[f] += vel.at(f, j).norm();
    speed[f] /= static_cast<double>(vel.joints);
  }
  std::vector<double> beats;
  for (std::size_t f = 1; f + 1 < speed.size(); ++f) {
    if (speed[f] < speed[f - 1] && speed[f] < speed[f + 1]) beats.push_back(static_cast<double>(f) / fps);
  }
  return beats;
}

double beat_alignment_score(std::span<const double> music_beats, std::span<const double> dance_beats,
                            double sigma) {
  if (music_beats.empty()) fail(ErrorCode::usage, "beat alignment needs at least one music beat");
  if (!(sigma > 0.0)) fail(ErrorCode::usage, "sigma must be positive");
  if (dance_beats.empty()) return 0.0;
  const auto sorted = std::is_sorted(dance_beats.begin(), dance_beats.end());
  std::vector<double> d(dance_beats.begin(), dance_beats.end());
  if (!sorted) std::sort(d.begin(), d.end());
  double sum = 0.0;
  for (const double t : music_beats) {
    const auto it = std::lower_bound(d.begin(), d.end(), t);
    double best = std::numeric_limits<double>::infinity();
    if (it != d.end()) best = std::min(best, std::abs(*it - t));
    if (it != d.begin()) best = std::min(best, std::abs(*std::prev(it) - t));
    sum += std::exp(-best * best / (2.0 * sigma * sigma));
  }
  return sum / static_cast<double>(music_beats.size());
}

double beat_alignment_score(std::span<const double> music_beats, std::span<const double> dance_beats,
                            const MetricsConfig& cfg) {
  cfg.validate();
  if (!cfg.transpose_bas) return beat_alignment_score(music_beats, dance_beats, cfg.sigma);
  if (music_beats.empty()) fail(ErrorCode::usage, "beat alignment needs at least one music beat");
  if (dance_beats.empty()) return 0.0;
  return beat_alignment_score(dance_beats, music_beats, cfg.sigma);
}

double diversity(const Eigen::MatrixXd& features) {
  const Eigen::Index n = features.rows();
  if (n < 2) fail(ErrorCode::usage, "diversity needs at least 2 feature rows");
  double sum = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) sum += (features.row(i) - features.row(j)).norm();
  }
  return sum / (0.5 * static_cast<double>(n) * static_cast<double>(n - 1));
}

FeatureSummary FeatureSummary::of(const Eigen::MatrixXd& features) {
  if (features.rows() < 2) fail(ErrorCode::usage, "feature summary needs at least 2 samples");
  FeatureSummary s;
  s.count = static_cast<std::size_t>(features.rows());
  s.mean = features.colwise().mean().transpose();
  const Eigen::MatrixXd centered = features.rowwise() - s.mean.transpose();
  s.covariance = centered.transpose() * centered / static_cast<double>(features.rows() - 1);
  return s;
}

void FeatureSummary::validate() const {
  if (count < 2) fail(ErrorCode::invariant, "feature summary sample count < 2");
  if (covariance.rows() != mean.size() || covariance.cols() != mean.size()) {
    fail(ErrorCode::invariant, "feature summary covariance does not match its mean");
  }
  const double scale = std::max(1.0, covariance.cwiseAbs().maxCoeff());
  if (!(covariance - covariance.transpose()).isZero(1e-12 * scale)) {
    fail(ErrorCode::invariant, "feature covariance is not symmetric");
  }
}

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m, double tol) {
  const Eigen::MatrixXd sym = 0.5 * (m + m.transpose());
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
  if (es.info() != Eigen::Success) fail(ErrorCode::numeric, "eigendecomposition failed");
  Eigen::VectorXd ev = es.eigenvalues();
  const double scale = std::max(1.0, ev.cwiseAbs().maxCoeff());
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (ev[i] < -tol * scale) fail(ErrorCode::numeric, "covariance is indefinite beyond tolerance");
    ev[i] = std::sqrt(std::max(ev[i], 0.0));
  }
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

double frechet_distance(const FeatureSummary& a, const FeatureSummary& b) {
  a.validate();
  b.validate();
  if (a.mean.size() != b.mean.size()) fail(ErrorCode::usage, "feature dimensions differ");
  const Eigen::MatrixXd ra = psd_sqrt(a.covariance);
  const Eigen::MatrixXd inner = ra * b.covariance * ra;
  const double cross = psd_sqrt(inner).trace();
  const double d = (a.mean - b.mean).squaredNorm() + a.covariance.trace() + b.covariance.trace() - 2.0 * cross;
  return std::max(d, 0.0);
}

Eigen::VectorXd kinematic_features(const PoseSequence& seq, double fps) {
  require_frames(seq, "kinematic_features");
  const PoseSequence vel = velocities(seq, fps);
  const PoseSequence acc = velocities(vel, fps);
  Eigen::VectorXd out(idx(4 * seq.joints));
  std::vector<double> speed(vel.frames), accel(acc.frames);
  for (std::size_t j = 0; j < seq.joints; ++j) {
    for (std::size_t f = 0; f < vel.frames; ++f) speed[f] = vel.at(f, j).norm();
    for (std::size_t f = 0; f < acc.frames; ++f) accel[f] = acc.at(f, j).norm();
    const auto [sm, sv] = moments(speed);
    const auto [am, av] = moments(accel);
    out.segment<4>(idx(4 * j)) << sm, sv, am, av;
  }
  return out;
}

Eigen::VectorXd geometric_features(const PoseSequence& seq, const Skeleton& skeleton) {
  require_frames(seq, "geometric_features");
  const std::size_t n = skeleton.joint_count();
  if (seq.joints != n) fail(ErrorCode::invariant, "pose sequence does not match the skeleton");
  std::vector<std::size_t> children(n, 0);
  for (std::size_t j = 1; j < n; ++j) ++children[static_cast<std::size_t>(skeleton.parent[j])];

  std::vector<std::size_t> leaves;
  for (std::size_t j = 1; j < n; ++j) {
    if (children[j] == 0) leaves.push_back(j);
  }
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t a = 0; a < leaves.size(); ++a) {
    pairs.emplace_back(0, leaves[a]);
    for (std::size_t b = a + 1; b < leaves.size(); ++b) pairs.emplace_back(leaves[a], leaves[b]);
  }
  std::vector<std::pair<std::size_t, std::size_t>> bends;  // (joint, first child)
  for (std::size_t j = 1; j < n; ++j) {
    if (children[j] == 0) continue;
    for (std::size_t c = j + 1; c < n; ++c) {
      if (static_cast<std::size_t>(skeleton.parent[c]) == j) {
        bends.emplace_back(j, c);
        break;
      }
    }
  }

  Eigen::VectorXd out = Eigen::VectorXd::Zero(idx(pairs.size() * kDistanceBins + 2 * bends.size()));
  const double width = kDistanceRange / static_cast<double>(kDistanceBins);
  const double share = 1.0 / static_cast<double>(seq.frames);
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    for (std::size_t f = 0; f < seq.frames; ++f) {
      const double d = (seq.at(f, pairs[p].first) - seq.at(f, pairs[p].second)).norm();
      const auto bin = std::min<std::size_t>(static_cast<std::size_t>(d / width), kDistanceBins - 1);
      out[idx(p * kDistanceBins + bin)] += share;
    }
  }
  std::vector<double> angles(seq.frames);
  for (std::size_t b = 0; b < bends.size(); ++b) {
    const auto [j, c] = bends[b];
    const auto parent = static_cast<std::size_t>(skeleton.parent[j]);
    for (std::size_t f = 0; f < seq.frames; ++f) {
      const Vec3 u = seq.at(f, parent) - seq.at(f, j);
      const Vec3 v = seq.at(f, c) - seq.at(f, j);
      const double denom = u.norm() * v.norm();
      angles[f] = denom > 0.0 ? std::acos(std::clamp(u.dot(v) / denom, -1.0, 1.0)) : 0.0;
    }
    const auto [mean, var] = moments(angles);
    out[idx(pairs.size() * kDistanceBins + 2 * b)] = mean;
    out[idx(pairs.size() * kDistanceBins + 2 * b + 1)] = std::sqrt(var);
  }
  return out;
}

std::vector<double> frame_jumps(const PoseSequence& seq) {
  std::vector<double> out;
  if (seq.frames < 2) return out;
  out.reserve(seq.frames - 1);
  for (std::size_t f = 0; f + 1 < seq.frames; ++f) {
    double m = 0.0;
    for (std::size_t j = 0; j < seq.joints; ++j) m = std::max(m, (seq.at(f + 1, j) - seq.at(f, j)).norm());
    out.push_back(m);
  }
  return out;
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) fail(ErrorCode::usage, "percentile of an empty set");
  if (!(q >= 0.0 && q <= 1.0)) fail(ErrorCode::usage, "percentile rank must lie in [0, 1]");
  const auto n = values.size();
  auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(n)));
  rank = std::clamp<std::size_t>(rank, 1, n);
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(rank - 1), values.end());
  return values[rank - 1];
}

JumpStats jump_stats(std::span<const double> jumps) {
  JumpStats s;
  if (jumps.empty()) return s;
  for (const double j : jumps) {
    s.mean += j;
    s.max = std::max(s.max, j);
  }
  s.mean /= static_cast<double>(jumps.size());
  s.p95 = percentile(std::vector<double>(jumps.begin(), jumps.end()), 0.95);
  for (const double j : jumps) s.over_3x_p95 += j > 3.0 * s.p95 ? 1 : 0;
  return s;
}

}  // namespace motionrag
