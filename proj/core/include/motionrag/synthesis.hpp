#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "motionrag/contrastive.hpp"
#include "motionrag/corpus.hpp"
#include "motionrag/graph.hpp"
#include "motionrag/kinematics.hpp"

namespace motionrag {

enum class SearchStrategy { greedy, beam };

// How music segments map onto walked nodes.
enum class SegmentBinding {
  per_node,  // node k follows segment k mod S
  by_time,   // node starting at output frame f follows segment (f / segment_stride_frames) mod S
};

struct SynthesisConfig {
  std::size_t blend_frames = 8;  // W
  SearchStrategy strategy = SearchStrategy::greedy;
  std::size_t beam_width = 4;
  std::size_t beam_depth = 4;  // lookahead steps per committed node
  SegmentBinding binding = SegmentBinding::per_node;
  std::size_t segment_stride_frames = 30;
  std::uint64_t seed = 0;  // reserved; greedy and beam search are deterministic

  void validate(std::size_t min_window_frames) const;
};

// Everything generation needs per graph node: its motion window and the
// unit motion embedding of that window.
struct NodeLibrary {
  Skeleton skeleton;
  double fps = 30.0;
  std::vector<MotionClip> motions;
  Eigen::MatrixXd embeddings;  // nodes x latent, unit rows

  std::size_t min_frames() const;
};

NodeLibrary make_library(const MotionGraph& g, const Corpus& corpus, const ContrastiveModel& model);

// Out-neighbor of `current` with the highest score against `music_emb`; ties
// go to the smallest node id.
std::size_t select_next(const MotionGraph& g, std::size_t current, const Eigen::VectorXd& music_emb,
                        const Eigen::MatrixXd& node_embeddings);

// Node with the highest score over the whole graph; ties to the smallest id.
std::size_t select_start(const Eigen::VectorXd& music_emb, const Eigen::MatrixXd& node_embeddings);

// Smoothstep weight 3u^2 - 2u^3.
double blend_weight(double u);

// Per-joint slerp from pose a to pose b by blend_weight(u).
std::vector<Quat> blend_pose(std::span<const Quat> a, std::span<const Quat> b, double u);

// Returns b aligned and blended onto the end of a: b's root path is shifted so
// its first frame sits at a's last root plus a's final root displacement, and
// the first W frames slerp from a's last pose toward b with weights
// blend_weight((i + 1) / (W + 1)). W = 0 is plain concatenation.
MotionClip blend_transition(const MotionClip& a, const MotionClip& b, std::size_t blend_frames);

// Largest per-joint world displacement between two poses.
double pose_jump(const Skeleton& skeleton, const Vec3& root_a, std::span<const Quat> rot_a,
                 const Vec3& root_b, std::span<const Quat> rot_b);

// Receives output frames in order. Implementations may write them straight
// to disk, so the generator never holds more than one window.
class FrameSink {
 public:
  virtual ~FrameSink() = default;
  virtual void begin(std::size_t total_frames, std::size_t joints, double fps) = 0;
  virtual void frame(const Vec3& root, std::span<const Quat> rotations) = 0;
  virtual void end() = 0;
};

class ClipSink : public FrameSink {
 public:
  explicit ClipSink(std::string id) : id_(std::move(id)) {}
  void begin(std::size_t total_frames, std::size_t joints, double fps) override;
  void frame(const Vec3& root, std::span<const Quat> rotations) override;
  void end() override {}
  MotionClip& clip() { return clip_; }

 private:
  std::string id_;
  MotionClip clip_;
};

// Streams the motion file format to `<path>.tmp` and renames on end().
class MotionFileSink : public FrameSink {
 public:
  explicit MotionFileSink(std::filesystem::path path);
  ~MotionFileSink() override;
  void begin(std::size_t total_frames, std::size_t joints, double fps) override;
  void frame(const Vec3& root, std::span<const Quat> rotations) override;
  void end() override;

 private:
  std::filesystem::path path_;
  std::filesystem::path tmp_;
  std::ofstream out_;
  bool finished_ = false;
};

struct TransitionRecord {
  std::size_t from = 0;
  std::size_t to = 0;
  std::size_t segment = 0;    // music segment that chose `to`
  double score = 0.0;         // similarity of `to` against that segment
  double jump_unblended = 0;  // seam jump with W = 0
  double jump_blended = 0;    // seam jump actually emitted
  double zone_max_step = 0;   // largest inter-frame jump from a's last frame through the blend
};

struct SeamSummary {
  std::size_t transitions = 0;
  double mean_unblended = 0.0;
  double mean_blended = 0.0;
  double max_unblended = 0.0;
  double max_blended = 0.0;
  double max_zone_step = 0.0;
};

struct GenerationTrace {
  std::size_t start_node = 0;
  double start_score = 0.0;
  std::vector<std::size_t> nodes;  // visit order; empty when not recorded
  std::vector<TransitionRecord> transitions;  // empty when not recorded
  SeamSummary seams;
  std::size_t frames = 0;
  std::size_t node_visits = 0;
};

struct GenerateOptions {
  bool record_trace = true;
  // Called once per transition even when the trace is not recorded.
  std::function<void(const TransitionRecord&)> on_transition;
};

// Walks the pruned graph under music guidance and streams exactly
// `length_frames` frames into `sink`.
GenerationTrace generate(const MotionGraph& g, const NodeLibrary& library,
                         const Eigen::MatrixXd& music_emb, std::size_t length_frames,
                         const SynthesisConfig& cfg, FrameSink& sink,
                         const GenerateOptions& options = {});

// Convenience form that collects the output clip.
struct Generation {
  GenerationTrace trace;
  MotionClip motion;
};
Generation generate_clip(const MotionGraph& g, const NodeLibrary& library,
                         const Eigen::MatrixXd& music_emb, std::size_t length_frames,
                         const SynthesisConfig& cfg);

std::string trace_json(const GenerationTrace& trace, const MotionGraph& g);

}  // namespace motionrag
