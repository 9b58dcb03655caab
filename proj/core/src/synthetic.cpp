#include <cmath>
#include <cstdio>
#include <numbers>
#include <span>

#include "motionrag/corpus.hpp"
#include "motionrag/error.hpp"
#include "motionrag/rng.hpp"

namespace motionrag {

namespace {

constexpr double kPi = std::numbers::pi;
// 89/3 frames at 30 fps. With 60-frame windows and a 30-frame stride, a
// natural continuation advances the gait phase by a third of a frame and a
// seamless cross-clip transition moves it back by the same amount, so the
// graph can close short cycles.
constexpr double kGaitPeriod = 89.0 / 90.0;
constexpr std::uint64_t kFeatureMapSeed = 0x5EEDF00DULL;
constexpr double kLevels[] = {0.6, 1.0, 1.4};
constexpr std::size_t kPhaseChoices = 3;  // thirds of a frame
constexpr double kPhaseBase = 9.0;       // frames; seams land where continuations pass

// Amplitude envelope with knots every half second, cosine-interpolated.
// Whole-second knots come from a few shared levels so windows of different
// clips can meet seamlessly; half-second knots are continuous.
class Envelope {
 public:
  Envelope(Rng& rng, std::span<const double> whole_knots, double lo, double hi) {
    for (std::size_t i = 0; i < whole_knots.size(); ++i) {
      values_.push_back(whole_knots[i]);
      values_.push_back(rng.uniform(lo, hi));
    }
  }

  double operator()(double t) const {
    const double k = std::floor(2.0 * t);
    const auto i = static_cast<std::size_t>(k);
    const double u = 2.0 * t - k;
    const double w = 0.5 - 0.5 * std::cos(kPi * u);
    const double a = values_[std::min(i, values_.size() - 1)];
    const double b = values_[std::min(i + 1, values_.size() - 1)];
    return a + (b - a) * w;
  }

 private:
  std::vector<double> values_;
};

struct Style {
  double leg = 0.7;
  double twist = 0.25;
  double bend = 0.15;
  double nod = 0.2;
};

constexpr Style kStyles[] = {
    {0.8, 0.30, 0.10, 0.15},
    {0.5, 0.15, 0.25, 0.30},
    {0.65, 0.40, 0.18, 0.10},
};

Quat about(const Vec3& axis, double angle) { return Quat(Eigen::AngleAxisd(angle, axis)); }

MotionClip synth_clip(const std::string& id, Rng& rng, const SynthCorpusOptions& opts,
                      std::vector<double>& beats) {
  const auto frames = static_cast<std::size_t>(std::llround(opts.clip_seconds * opts.fps));
  const std::size_t knots = static_cast<std::size_t>(std::ceil(opts.clip_seconds)) + 2;
  const Style& style = opts.unimodal ? kStyles[0] : kStyles[rng.below(std::size(kStyles))];
  const double phase_frames = kPhaseBase + static_cast<double>(rng.below(kPhaseChoices)) / 3.0;
  const double phase = 2.0 * kPi * phase_frames / (kGaitPeriod * opts.fps);
  std::vector<double> levels(knots);
  for (double& v : levels) v = opts.unimodal ? 1.0 : kLevels[rng.below(std::size(kLevels))];
  const double lo = opts.unimodal ? 0.9 : 0.4;
  const double hi = opts.unimodal ? 1.1 : 1.6;
  const Envelope legs(rng, levels, lo, hi);
  const Envelope torso(rng, levels, lo, hi);
  const Envelope head(rng, levels, lo, hi);
  const double omega = 2.0 * kPi / kGaitPeriod;

  MotionClip clip = MotionClip::zeros(id, opts.fps, frames, 8);
  const Vec3 x = Vec3::UnitX(), y = Vec3::UnitY(), z = Vec3::UnitZ();
  for (std::size_t f = 0; f < frames; ++f) {
    const double t = static_cast<double>(f) / opts.fps;
    const double th = omega * t + phase;
    const double a = legs(t), b = torso(t), c = head(t);
    const double swing = std::sin(th);
    clip.root_pos[f] = Vec3(0.05 * b * swing, 0.9 - 0.03 * a * (1.0 - std::cos(2.0 * th)), 0.0);
    clip.rotation(f, 0) = about(y, style.twist * b * swing) * about(z, 0.05 * b * std::sin(2.0 * th));
    clip.rotation(f, 1) = about(x, style.bend * b * std::sin(th + 0.5));
    clip.rotation(f, 2) = about(x, 0.1 * c * std::sin(2.0 * th));
    clip.rotation(f, 3) = about(x, style.nod * c * std::sin(2.0 * th + 0.3));
    const double lift_l = std::max(0.0, swing);
    const double lift_r = std::max(0.0, -swing);
    clip.rotation(f, 4) = about(x, style.leg * a * lift_l * lift_l);
    clip.rotation(f, 5) = about(x, 0.2 * a * swing);
    clip.rotation(f, 6) = about(x, style.leg * a * lift_r * lift_r);
    clip.rotation(f, 7) = about(x, -0.2 * a * swing);
  }

  // Leg-swing extrema: sin(th) = +-1.
  const double last = static_cast<double>(frames - 1) / opts.fps;
  double t0 = (0.5 * kPi - phase) / omega;
  const double half = kGaitPeriod / 2.0;
  t0 -= std::floor(t0 / half) * half;
  beats.clear();
  for (double t = t0; t <= last; t += half) beats.push_back(t);
  return clip;
}

}  // namespace

Eigen::VectorXd window_statistics(const Skeleton& skeleton, const MotionClip& window) {
  const std::size_t n = skeleton.joint_count();
  const std::size_t frames = window.frames();
  const PoseSequence pose = forward_kinematics(skeleton, window);
  const PoseSequence vel = velocities(pose, window.fps);
  Eigen::VectorXd s = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(2 * n + 2));
  for (std::size_t j = 0; j < n; ++j) {
    double sq = 0.0;
    for (std::size_t f = 0; f < frames; ++f) {
      const double angle = axis_angle_from_quat(window.rotation(f, j)).norm();
      sq += angle * angle;
    }
    s[static_cast<Eigen::Index>(j)] = std::sqrt(sq / static_cast<double>(frames));
    double speed = 0.0;
    for (std::size_t f = 0; f < vel.frames; ++f) speed += vel.at(f, j).norm();
    s[static_cast<Eigen::Index>(n + j)] = speed / static_cast<double>(vel.frames);
  }
  double mean_h = 0.0;
  for (std::size_t f = 0; f < frames; ++f) mean_h += window.root_pos[f].y();
  mean_h /= static_cast<double>(frames);
  double var_h = 0.0;
  for (std::size_t f = 0; f < frames; ++f) {
    var_h += (window.root_pos[f].y() - mean_h) * (window.root_pos[f].y() - mean_h);
  }
  s[static_cast<Eigen::Index>(2 * n)] = mean_h;
  s[static_cast<Eigen::Index>(2 * n + 1)] = std::sqrt(var_h / static_cast<double>(frames));
  return s;
}

Corpus synthesize_test_corpus(std::uint64_t seed, std::size_t n_clips,
                              const SynthCorpusOptions& opts) {
  if (n_clips < 1) fail(ErrorCode::usage, "synthetic corpus needs at least one clip");
  Corpus corpus;
  corpus.skeleton = Skeleton::default_biped();
  corpus.fps = opts.fps;
  corpus.music_dim = opts.music_dim;
  corpus.motion_dim = opts.motion_dim;

  Rng rng(seed);
  for (std::size_t i = 0; i < n_clips; ++i) {
    char id[32];
    std::snprintf(id, sizeof(id), "clip%03zu", i);
    std::vector<double> beats;
    corpus.clips.push_back(synth_clip(id, rng, opts, beats));
    corpus.beats[id] = std::move(beats);
  }

  // Per-window statistics, z-scored over the corpus.
  std::vector<Eigen::VectorXd> stats;
  std::vector<std::pair<std::string, std::size_t>> owner;
  for (const MotionClip& c : corpus.clips) {
    const auto windows = window_clip(c, corpus.windowing);
    for (const MotionClip& w : windows) {
      stats.push_back(window_statistics(corpus.skeleton, w));
      owner.emplace_back(c.id, w.origin->segment);
    }
  }
  const Eigen::Index dim = stats.empty() ? 0 : stats.front().size();
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(dim);
  Eigen::VectorXd sd = Eigen::VectorXd::Zero(dim);
  for (const auto& s : stats) mean += s;
  if (!stats.empty()) mean /= static_cast<double>(stats.size());
  for (const auto& s : stats) sd += (s - mean).cwiseAbs2();
  if (stats.size() > 1) sd /= static_cast<double>(stats.size() - 1);
  sd = sd.cwiseSqrt();
  for (Eigen::Index k = 0; k < dim; ++k) {
    if (!(sd[k] > 1e-9)) sd[k] = 1.0;
  }

  Rng map_rng(kFeatureMapSeed);
  const auto random_map = [&](std::size_t rows) {
    Eigen::MatrixXd m(static_cast<Eigen::Index>(rows), dim);
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index k = 0; k < dim; ++k) m(r, k) = map_rng.normal() / std::sqrt(double(dim));
    }
    return m;
  };
  const Eigen::MatrixXd music_map = random_map(opts.music_dim);
  const Eigen::MatrixXd motion_map = random_map(opts.motion_dim);

  for (const MotionClip& c : corpus.clips) {
    const std::size_t segs = segment_count(c.frames(), corpus.windowing, corpus.fps);
    corpus.music_feats[c.id] = FeatureMatrix(segs, opts.music_dim);
    corpus.motion_feats[c.id] = FeatureMatrix(segs, opts.motion_dim);
  }
  for (std::size_t i = 0; i < stats.size(); ++i) {
    const Eigen::VectorXd zs = (stats[i] - mean).cwiseQuotient(sd);
    Eigen::VectorXd music = music_map * zs;
    Eigen::VectorXd motion = motion_map * zs;
    for (Eigen::Index k = 0; k < music.size(); ++k) music[k] += opts.feature_noise * rng.normal();
    for (Eigen::Index k = 0; k < motion.size(); ++k) motion[k] += opts.feature_noise * rng.normal();
    const auto& [id, seg] = owner[i];
    corpus.music_feats[id].row(static_cast<Eigen::Index>(seg)) = music.cast<float>().transpose();
    corpus.motion_feats[id].row(static_cast<Eigen::Index>(seg)) = motion.cast<float>().transpose();
  }
  corpus.validate();
  return corpus;
}

}  // namespace motionrag
