#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "motionrag/binary_io.hpp"
#include "motionrag/kinematics.hpp"

namespace motionrag {

struct WindowingConfig {
  double window_seconds = 2.0;
  double stride_seconds = 1.0;

  std::size_t window_frames(double fps) const;
  std::size_t stride_frames(double fps) const;
  // stride <= window and window * fps >= 2 frames.
  void validate(double fps) const;
};

// Number of windows a clip of `frames` frames yields; 0 when shorter than one window.
std::size_t segment_count(std::size_t frames, const WindowingConfig& cfg, double fps);

// A window's id is "<source id>@<start frame>".
std::string window_id(const std::string& source_id, std::size_t start_frame);

struct Corpus {
  Skeleton skeleton;
  double fps = 30.0;
  WindowingConfig windowing;
  std::vector<MotionClip> clips;
  std::map<std::string, std::vector<double>> beats;  // seconds, per clip id
  std::map<std::string, FeatureMatrix> music_feats;  // segments x music_dim
  std::map<std::string, FeatureMatrix> motion_feats; // segments x motion_dim
  std::size_t music_dim = 0;
  std::size_t motion_dim = 0;

  // Throws Error(invariant) naming the offending record.
  void validate() const;

  const MotionClip& clip(const std::string& id) const;
  std::size_t total_segments() const;
};

Corpus load_corpus(const std::filesystem::path& dir);

// Writes manifest.json plus one motion/beats/feature file per clip.
void save_corpus(const Corpus& corpus, const std::filesystem::path& dir);

// Cuts every clip into fixed-length windows; each window carries its origin.
std::vector<MotionClip> window_clips(const Corpus& corpus, const WindowingConfig& cfg);
std::vector<MotionClip> window_clip(const MotionClip& clip, const WindowingConfig& cfg);

struct SynthCorpusOptions {
  double clip_seconds = 5.0;
  double fps = 30.0;
  std::size_t music_dim = 32;
  std::size_t motion_dim = 24;
  double feature_noise = 0.05;
  // One style at the middle amplitude with +-10% drift.
  bool unimodal = false;
};

// Procedural in-place dance corpus: periodic gaits whose amplitudes drift
// per second, features as fixed linear maps of per-window motion statistics
// plus seeded noise, and beats at the leg-swing extrema.
Corpus synthesize_test_corpus(std::uint64_t seed, std::size_t n_clips,
                              const SynthCorpusOptions& opts = {});

// Per-window summary statistics that the synthetic features are built from.
Eigen::VectorXd window_statistics(const Skeleton& skeleton, const MotionClip& window);

// Stable digest of every numeric and identifying field.
std::uint64_t corpus_digest(const Corpus& corpus);

}  // namespace motionrag
