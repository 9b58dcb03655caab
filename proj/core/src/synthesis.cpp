#include "motionrag/synthesis.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "motionrag/binary_io.hpp"
#include "motionrag/error.hpp"

namespace motionrag {

namespace {

Eigen::Index idx(std::size_t v) { return static_cast<Eigen::Index>(v); }

double score_of(const Eigen::MatrixXd& node_embeddings, std::size_t node, const Eigen::VectorXd& music) {
  return node_embeddings.row(idx(node)).dot(music);
}

template <typename T>
void put_raw(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

struct BeamPath {
  std::vector<std::size_t> nodes;
  double score = 0.0;
  std::size_t frame = 0;
};

// Output state the generator carries between nodes: the last two emitted
// frames. Nothing else of the output is retained.
struct Tail {
  Vec3 prev_root = Vec3::Zero();
  Vec3 last_root = Vec3::Zero();
  std::vector<Quat> last_rot;
  std::size_t emitted = 0;

  void push(const Vec3& root, std::span<const Quat> rot) {
    prev_root = emitted == 0 ? root : last_root;
    last_root = root;
    last_rot.assign(rot.begin(), rot.end());
    ++emitted;
  }
};

class Walker {
 public:
  Walker(const MotionGraph& g, const NodeLibrary& lib, const Eigen::MatrixXd& music,
         const SynthesisConfig& cfg)
      : g_(g), lib_(lib), music_(music), cfg_(cfg) {}

  std::size_t segment_for(std::size_t step, std::size_t start_frame) const {
    const auto s = static_cast<std::size_t>(music_.rows());
    if (cfg_.binding == SegmentBinding::per_node) return step % s;
    return (start_frame / cfg_.segment_stride_frames) % s;
  }

  Eigen::VectorXd music_row(std::size_t segment) const { return music_.row(idx(segment)).transpose(); }

  std::size_t next(std::size_t current, std::size_t step, std::size_t frame) const {
    if (cfg_.strategy == SearchStrategy::greedy) {
      return select_next(g_, current, music_row(segment_for(step, frame)), lib_.embeddings);
    }
    return beam_next(current, step, frame);
  }

 private:
  // Lookahead of beam_depth nodes; commits only the first node of the best path.
  std::size_t beam_next(std::size_t current, std::size_t step, std::size_t frame) const {
    std::vector<BeamPath> beams{{{}, 0.0, frame}};
    const auto better = [](const BeamPath& a, const BeamPath& b) {
      if (a.score != b.score) return a.score > b.score;
      return a.nodes < b.nodes;
    };
    for (std::size_t d = 0; d < cfg_.beam_depth; ++d) {
      std::vector<BeamPath> expanded;
      for (const BeamPath& p : beams) {
        const std::size_t from = p.nodes.empty() ? current : p.nodes.back();
        const Eigen::VectorXd music = music_row(segment_for(step + d, p.frame));
        for (const std::uint32_t n : g_.adjacency[from]) {
          BeamPath q = p;
          q.nodes.push_back(n);
          q.score += score_of(lib_.embeddings, n, music);
          q.frame += lib_.motions[n].frames();
          expanded.push_back(std::move(q));
        }
      }
      if (expanded.empty()) fail(ErrorCode::invariant, "node without out-edges in a pruned graph");
      const std::size_t keep = std::min(cfg_.beam_width, expanded.size());
      std::partial_sort(expanded.begin(), expanded.begin() + static_cast<std::ptrdiff_t>(keep),
                        expanded.end(), better);
      expanded.resize(keep);
      beams = std::move(expanded);
    }
    return beams.front().nodes.front();
  }

  const MotionGraph& g_;
  const NodeLibrary& lib_;
  const Eigen::MatrixXd& music_;
  const SynthesisConfig& cfg_;
};

void accumulate(SeamSummary& s, const TransitionRecord& t) {
  ++s.transitions;
  const double n = static_cast<double>(s.transitions);
  s.mean_unblended += (t.jump_unblended - s.mean_unblended) / n;
  s.mean_blended += (t.jump_blended - s.mean_blended) / n;
  s.max_unblended = std::max(s.max_unblended, t.jump_unblended);
  s.max_blended = std::max(s.max_blended, t.jump_blended);
  s.max_zone_step = std::max(s.max_zone_step, t.zone_max_step);
}

}  // namespace

void SynthesisConfig::validate(std::size_t min_window_frames) const {
  if (blend_frames >= min_window_frames) {
    fail(ErrorCode::usage, "blend frames (" + std::to_string(blend_frames) +
                               ") must be below the window frame count (" +
                               std::to_string(min_window_frames) + ")");
  }
  if (strategy == SearchStrategy::beam && (beam_width < 1 || beam_depth < 1)) {
    fail(ErrorCode::usage, "beam width and depth must be >= 1");
  }
  if (binding == SegmentBinding::by_time && segment_stride_frames < 1) {
    fail(ErrorCode::usage, "segment stride must be >= 1 frame");
  }
}

std::size_t NodeLibrary::min_frames() const {
  std::size_t m = motions.empty() ? 0 : motions.front().frames();
  for (const MotionClip& c : motions) m = std::min(m, c.frames());
  return m;
}

NodeLibrary make_library(const MotionGraph& g, const Corpus& corpus, const ContrastiveModel& model) {
  NodeLibrary lib;
  lib.skeleton = corpus.skeleton;
  lib.fps = corpus.fps;
  lib.motions.reserve(g.node_count());
  Eigen::MatrixXd feats(idx(g.node_count()), idx(corpus.motion_dim));
  for (std::size_t i = 0; i < g.node_count(); ++i) {
    const GraphNode& n = g.nodes[i];
    const MotionClip& src = corpus.clip(n.source_id);
    if (n.start_frame + n.frame_count > src.frames()) {
      fail(ErrorCode::data, "node '" + n.window_id + "' runs past the end of clip '" + n.source_id + "'");
    }
    lib.motions.push_back(src.slice(n.start_frame, n.frame_count, n.window_id));
    const FeatureMatrix& m = corpus.motion_feats.at(n.source_id);
    if (idx(n.segment) >= m.rows()) {
      fail(ErrorCode::data, "node '" + n.window_id + "' has no motion feature row");
    }
    feats.row(idx(i)) = m.row(idx(n.segment)).cast<double>();
  }
  lib.embeddings = embed(model, feats, Side::motion);
  return lib;
}

std::size_t select_next(const MotionGraph& g, std::size_t current, const Eigen::VectorXd& music_emb,
                        const Eigen::MatrixXd& node_embeddings) {
  const auto& out = g.adjacency.at(current);
  if (out.empty()) fail(ErrorCode::invariant, "node " + std::to_string(current) + " has no out-edges");
  std::size_t best = out.front();
  double best_score = score_of(node_embeddings, best, music_emb);
  for (std::size_t i = 1; i < out.size(); ++i) {
    const double s = score_of(node_embeddings, out[i], music_emb);
    if (s > best_score) {  // adjacency is sorted, so ties keep the smaller id
      best = out[i];
      best_score = s;
    }
  }
  return best;
}

std::size_t select_start(const Eigen::VectorXd& music_emb, const Eigen::MatrixXd& node_embeddings) {
  if (node_embeddings.rows() == 0) fail(ErrorCode::invariant, "empty node library");
  std::size_t best = 0;
  double best_score = score_of(node_embeddings, 0, music_emb);
  for (std::size_t i = 1; i < static_cast<std::size_t>(node_embeddings.rows()); ++i) {
    const double s = score_of(node_embeddings, i, music_emb);
    if (s > best_score) {
      best = i;
      best_score = s;
    }
  }
  return best;
}

double blend_weight(double u) { return u * u * (3.0 - 2.0 * u); }

std::vector<Quat> blend_pose(std::span<const Quat> a, std::span<const Quat> b, double u) {
  if (a.size() != b.size()) fail(ErrorCode::invariant, "blend_pose: joint count mismatch");
  const double w = blend_weight(u);
  std::vector<Quat> out(a.size());
  for (std::size_t j = 0; j < a.size(); ++j) out[j] = slerp(a[j], b[j], w);
  return out;
}

MotionClip blend_transition(const MotionClip& a, const MotionClip& b, std::size_t blend_frames) {
  if (a.joints != b.joints) fail(ErrorCode::invariant, "blend_transition: joint count mismatch");
  if (a.fps != b.fps) fail(ErrorCode::invariant, "blend_transition: fps mismatch");
  if (a.frames() < 2) fail(ErrorCode::invariant, "blend_transition: a needs at least 2 frames");
  if (blend_frames > a.frames() || blend_frames > b.frames()) {
    fail(ErrorCode::usage, "blend frames exceed a clip length");
  }
  const std::size_t joints = a.joints;
  const std::size_t la = a.frames() - 1;
  const Vec3 target = a.root_pos[la] + (a.root_pos[la] - a.root_pos[la - 1]);
  const Vec3 offset = target - b.root_pos[0];
  const std::span<const Quat> last(a.rot.data() + la * joints, joints);

  MotionClip out = b;
  out.origin.reset();
  for (std::size_t f = 0; f < b.frames(); ++f) {
    out.root_pos[f] = b.root_pos[f] + offset;
    if (f < blend_frames) {
      const double u = static_cast<double>(f + 1) / static_cast<double>(blend_frames + 1);
      const auto pose = blend_pose(last, std::span<const Quat>(b.rot.data() + f * joints, joints), u);
      std::copy(pose.begin(), pose.end(), out.rot.begin() + static_cast<std::ptrdiff_t>(f * joints));
    }
  }
  return out;
}

double pose_jump(const Skeleton& skeleton, const Vec3& root_a, std::span<const Quat> rot_a,
                 const Vec3& root_b, std::span<const Quat> rot_b) {
  const std::size_t n = skeleton.joint_count();
  std::vector<Vec3> pa(n), pb(n);
  forward_kinematics_frame(skeleton, root_a, rot_a, pa);
  forward_kinematics_frame(skeleton, root_b, rot_b, pb);
  double m = 0.0;
  for (std::size_t j = 0; j < n; ++j) m = std::max(m, (pa[j] - pb[j]).norm());
  return m;
}

void ClipSink::begin(std::size_t total_frames, std::size_t joints, double fps) {
  clip_ = MotionClip{};
  clip_.id = id_;
  clip_.fps = fps;
  clip_.joints = joints;
  clip_.root_pos.reserve(total_frames);
  clip_.rot.reserve(total_frames * joints);
}

void ClipSink::frame(const Vec3& root, std::span<const Quat> rotations) {
  clip_.root_pos.push_back(root);
  clip_.rot.insert(clip_.rot.end(), rotations.begin(), rotations.end());
}

MotionFileSink::MotionFileSink(std::filesystem::path path)
    : path_(std::move(path)), tmp_(path_.string() + ".tmp") {}

MotionFileSink::~MotionFileSink() {
  if (!finished_ && out_.is_open()) {
    out_.close();
    std::error_code ec;
    std::filesystem::remove(tmp_, ec);
  }
}

void MotionFileSink::begin(std::size_t total_frames, std::size_t joints, double fps) {
  out_.open(tmp_, std::ios::binary | std::ios::trunc);
  if (!out_) fail(ErrorCode::data, "cannot open " + tmp_.string() + " for writing");
  out_.write("MRAGMOTN", 8);
  put_raw<std::uint32_t>(out_, 1);
  put_raw<std::uint32_t>(out_, static_cast<std::uint32_t>(total_frames));
  put_raw<std::uint32_t>(out_, static_cast<std::uint32_t>(joints));
  put_raw<double>(out_, fps);
}

void MotionFileSink::frame(const Vec3& root, std::span<const Quat> rotations) {
  for (int k = 0; k < 3; ++k) put_raw<double>(out_, root[k]);
  for (const Quat& q : rotations) {
    put_raw<double>(out_, q.w());
    put_raw<double>(out_, q.x());
    put_raw<double>(out_, q.y());
    put_raw<double>(out_, q.z());
  }
}

void MotionFileSink::end() {
  out_.close();
  if (!out_) fail(ErrorCode::data, "failed writing " + tmp_.string());
  std::filesystem::rename(tmp_, path_);
  finished_ = true;
}

GenerationTrace generate(const MotionGraph& g, const NodeLibrary& library,
                         const Eigen::MatrixXd& music_emb, std::size_t length_frames,
                         const SynthesisConfig& cfg, FrameSink& sink, const GenerateOptions& options) {
  if (length_frames == 0) fail(ErrorCode::usage, "length_frames must be >= 1");
  if (!g.pruned) fail(ErrorCode::invariant, "generation needs a pruned graph");
  if (g.node_count() == 0) fail(ErrorCode::invariant, "graph has no nodes");
  if (library.motions.size() != g.node_count() ||
      static_cast<std::size_t>(library.embeddings.rows()) != g.node_count()) {
    fail(ErrorCode::invariant, "node library does not match the graph");
  }
  if (music_emb.rows() < 1) fail(ErrorCode::usage, "need at least one music segment");
  if (music_emb.cols() != library.embeddings.cols()) {
    fail(ErrorCode::invariant, "music and motion embeddings differ in dimension");
  }
  cfg.validate(library.min_frames());

  const Skeleton& skel = library.skeleton;
  const std::size_t joints = skel.joint_count();
  const std::size_t w = cfg.blend_frames;
  const Walker walker(g, library, music_emb, cfg);

  GenerationTrace trace;
  Tail tail;
  sink.begin(length_frames, joints, library.fps);

  const auto emit = [&](const Vec3& root, std::span<const Quat> rot) {
    sink.frame(root, rot);
    tail.push(root, rot);
  };

  std::size_t current = select_start(walker.music_row(walker.segment_for(0, 0)), library.embeddings);
  trace.start_node = current;
  trace.start_score = score_of(library.embeddings, current, walker.music_row(walker.segment_for(0, 0)));
  trace.node_visits = 1;
  if (options.record_trace) trace.nodes.push_back(current);
  {
    const MotionClip& m = library.motions[current];
    for (std::size_t f = 0; f < m.frames() && tail.emitted < length_frames; ++f) {
      emit(m.root_pos[f], std::span<const Quat>(m.rot.data() + f * joints, joints));
    }
  }

  std::vector<Quat> pose(joints);
  for (std::size_t step = 1; tail.emitted < length_frames; ++step) {
    const std::size_t segment = walker.segment_for(step, tail.emitted);
    const std::size_t next = walker.next(current, step, tail.emitted);
    const MotionClip& b = library.motions[next];
    const Vec3 offset = tail.last_root + (tail.last_root - tail.prev_root) - b.root_pos[0];

    TransitionRecord rec;
    rec.from = current;
    rec.to = next;
    rec.segment = segment;
    rec.score = score_of(library.embeddings, next, walker.music_row(segment));

    const auto frame_pose = [&](std::size_t f) {
      for (std::size_t j = 0; j < joints; ++j) {
        const Quat& q = b.rotation(f, j);
        if (f < w) {
          const double u = static_cast<double>(f + 1) / static_cast<double>(w + 1);
          pose[j] = slerp(tail.last_rot[j], q, blend_weight(u));
        } else {
          pose[j] = q;
        }
      }
    };

    // Seam diagnostics over the full blend zone, independent of truncation.
    rec.jump_unblended = pose_jump(skel, tail.last_root, tail.last_rot, b.root_pos[0] + offset,
                                   std::span<const Quat>(b.rot.data(), joints));
    Vec3 prev_root = tail.last_root;
    std::vector<Quat> prev_pose = tail.last_rot;
    for (std::size_t f = 0; f <= w && f < b.frames(); ++f) {
      frame_pose(f);
      const Vec3 root = b.root_pos[f] + offset;
      const double jump = pose_jump(skel, prev_root, prev_pose, root, pose);
      if (f == 0) rec.jump_blended = jump;
      rec.zone_max_step = std::max(rec.zone_max_step, jump);
      prev_root = root;
      prev_pose = pose;
    }

    for (std::size_t f = 0; f < b.frames() && tail.emitted < length_frames; ++f) {
      frame_pose(f);
      emit(b.root_pos[f] + offset, pose);
    }

    accumulate(trace.seams, rec);
    if (options.on_transition) options.on_transition(rec);
    if (options.record_trace) {
      trace.nodes.push_back(next);
      trace.transitions.push_back(rec);
    }
    ++trace.node_visits;
    current = next;
  }
  sink.end();
  trace.frames = tail.emitted;
  return trace;
}

Generation generate_clip(const MotionGraph& g, const NodeLibrary& library,
                         const Eigen::MatrixXd& music_emb, std::size_t length_frames,
                         const SynthesisConfig& cfg) {
  ClipSink sink("motion_mg");
  Generation out;
  out.trace = generate(g, library, music_emb, length_frames, cfg, sink);
  out.motion = std::move(sink.clip());
  return out;
}

std::string trace_json(const GenerationTrace& trace, const MotionGraph& g) {
  using nlohmann::json;
  json j;
  j["frames"] = trace.frames;
  j["node_visits"] = trace.node_visits;
  j["start_node"] = trace.start_node;
  j["start_score"] = trace.start_score;
  json nodes = json::array();
  for (const std::size_t n : trace.nodes) nodes.push_back({{"index", n}, {"window", g.nodes.at(n).window_id}});
  j["nodes"] = std::move(nodes);
  json transitions = json::array();
  for (const TransitionRecord& t : trace.transitions) {
    transitions.push_back({{"from", t.from},
                           {"to", t.to},
                           {"segment", t.segment},
                           {"score", t.score},
                           {"jump_unblended", t.jump_unblended},
                           {"jump_blended", t.jump_blended},
                           {"zone_max_step", t.zone_max_step}});
  }
  j["transitions"] = std::move(transitions);
  j["seams"] = {{"transitions", trace.seams.transitions},
                {"mean_unblended", trace.seams.mean_unblended},
                {"mean_blended", trace.seams.mean_blended},
                {"max_unblended", trace.seams.max_unblended},
                {"max_blended", trace.seams.max_blended},
                {"max_zone_step", trace.seams.max_zone_step}};
  return j.dump(2) + "\n";
}

}  // namespace motionrag
