#include "motionrag/conditioning.hpp"

#include <algorithm>
#include <cmath>

#include "motionrag/error.hpp"
#include "motionrag/rng.hpp"
#include "motionrag/synthesis.hpp"

namespace motionrag {

namespace {

Eigen::Index idx(std::size_t v) { return static_cast<Eigen::Index>(v); }

ConditionSet make_conditions(const RetrievalIndex& index, const ContrastiveModel& model,
                             const Eigen::RowVectorXd& music_row, Eigen::MatrixXd self,
                             Eigen::VectorXd beat, std::size_t top_k, std::size_t exclude) {
  ConditionSet c;
  c.music = music_row;
  c.beat = std::move(beat);
  c.contrastive_emb = embed(model, c.music, Side::music).row(0).transpose();
  c.topk.push_back(std::move(self));
  for (const std::size_t i : retrieve(index, c.contrastive_emb, top_k - 1, exclude)) {
    c.topk.push_back(index.normalized[i]);
  }
  return c;
}

}  // namespace

Eigen::VectorXd beat_vector(std::span<const double> beats_seconds, double start_seconds,
                            std::size_t frames, double fps) {
  Eigen::VectorXd v = Eigen::VectorXd::Zero(idx(frames));
  for (const double b : beats_seconds) {
    const double f = std::round((b - start_seconds) * fps);
    if (f >= 0.0 && f < static_cast<double>(frames)) v[static_cast<Eigen::Index>(f)] = 1.0;
  }
  return v;
}

Eigen::MatrixXd centered_window(const MotionClip& clip) {
  Eigen::MatrixXd raw = encode_window(clip);
  const double x = raw(0, 0);
  const double z = raw(0, 2);
  raw.col(0).array() -= x;
  raw.col(2).array() -= z;
  return raw;
}

RetrievalIndex make_retrieval_index(const Corpus& corpus, const ContrastiveModel& model,
                                    const Normalizer& norm) {
  RetrievalIndex index;
  index.windows = window_clips(corpus, corpus.windowing);
  index.stride_frames = corpus.windowing.stride_frames(corpus.fps);
  const PairTable pairs = corpus_pairs(corpus);
  if (static_cast<std::size_t>(pairs.motion.rows()) != index.windows.size()) {
    fail(ErrorCode::invariant, "feature rows do not match the corpus windows");
  }
  if (index.windows.empty()) fail(ErrorCode::data, "corpus has no windows");
  index.normalized.reserve(index.windows.size());
  for (const MotionClip& w : index.windows) index.normalized.push_back(norm.apply(centered_window(w)));
  index.motion_emb = embed(model, pairs.motion, Side::motion);
  index.music_feats = pairs.music;
  return index;
}

std::vector<std::size_t> retrieve(const RetrievalIndex& index, const Eigen::VectorXd& music_emb,
                                  std::size_t k, std::size_t exclude) {
  if (k == 0) return {};
  Eigen::VectorXd scores = index.motion_emb * music_emb;
  const bool excluding = exclude < index.size();
  if (k + (excluding ? 1 : 0) > index.size()) {
    fail(ErrorCode::usage, "top-k exceeds the retrieval pool (" + std::to_string(index.size()) + " windows)");
  }
  std::vector<std::size_t> out;
  for (const ScoredIndex& s : rank_scores(scores, k + (excluding ? 1 : 0))) {
    if (s.index != exclude && out.size() < k) out.push_back(s.index);
  }
  return out;
}

DiffusionDataset build_training_set(const Corpus& corpus, const ContrastiveModel& model,
                                    std::size_t frames, std::size_t top_k, const ContactConfig& contact) {
  if (top_k < 1) fail(ErrorCode::usage, "top-k must be >= 1");
  const std::size_t window = corpus.windowing.window_frames(corpus.fps);
  if (window != frames) {
    fail(ErrorCode::usage, "diffusion window of " + std::to_string(frames) + " frames differs from the corpus window of " +
                               std::to_string(window));
  }
  DiffusionDataset ds;
  std::vector<Eigen::MatrixXd> raws;
  for (const MotionClip& w : window_clips(corpus, corpus.windowing)) raws.push_back(centered_window(w));
  if (raws.empty()) fail(ErrorCode::data, "corpus has no windows");
  ds.normalizer = Normalizer::fit(raws);
  ds.index = make_retrieval_index(corpus, model, ds.normalizer);
  ds.examples.reserve(ds.index.size());
  for (std::size_t i = 0; i < ds.index.size(); ++i) {
    const MotionClip& w = ds.index.windows[i];
    const ClipOrigin& o = w.origin.value();
    const Eigen::VectorXd beat =
        beat_vector(corpus.beats.at(o.source_id), static_cast<double>(o.start_frame) / corpus.fps, frames, corpus.fps);
    ConditionSet c = make_conditions(ds.index, model, ds.index.music_feats.row(idx(i)), ds.index.normalized[i], beat,
                                     top_k, i);
    ds.examples.push_back(
        make_example(ds.index.normalized[i], std::move(c), ds.normalizer, corpus.skeleton, corpus.fps, contact));
  }
  return ds;
}

MotionClip refine(const DiffusionModel& model, const ContrastiveModel& contrastive, const RetrievalIndex& index,
                  const MotionClip& motion_mg, const Eigen::MatrixXd& music_feats,
                  std::span<const double> beats_seconds, const RefineConfig& cfg) {
  const std::size_t frames = model.config.frames;
  const std::size_t total = motion_mg.frames();
  if (motion_mg.joints != model.skeleton.joint_count()) {
    fail(ErrorCode::invariant, "motion joint count differs from the diffusion skeleton");
  }
  if (total < frames) {
    fail(ErrorCode::usage, "motion has " + std::to_string(total) + " frames; refinement needs at least " +
                               std::to_string(frames));
  }
  if (music_feats.rows() == 0) fail(ErrorCode::usage, "music features are empty");
  if (index.stride_frames == 0) fail(ErrorCode::invariant, "retrieval index has no segment stride");
  if (cfg.blend_frames >= frames) fail(ErrorCode::usage, "blend frames must be below the window length");

  const double fps = motion_mg.fps;
  const std::size_t segments = static_cast<std::size_t>(music_feats.rows());
  const std::size_t windows = (total + frames - 1) / frames;
  const double rest_height = model.normalizer.mean[1];

  MotionClip out;
  for (std::size_t w = 0; w < windows; ++w) {
    const std::size_t start = std::min(w * frames, total - frames);
    const std::size_t keep_from = w * frames - start;
    const MotionClip src = motion_mg.slice(start, frames, motion_mg.id);

    Eigen::MatrixXd raw = centered_window(src);
    const double lift = rest_height - raw.col(1).mean();
    raw.col(1).array() += lift;
    const std::size_t segment = (start / index.stride_frames) % segments;
    const ConditionSet c =
        make_conditions(index, contrastive, music_feats.row(idx(segment)), model.normalizer.apply(raw),
                        beat_vector(beats_seconds, static_cast<double>(start) / fps, frames, fps),
                        model.config.top_k, kNoExclusion);
    Eigen::MatrixXd refined = model.normalizer.invert(sample(model, c, derive_seed(cfg.seed, w)));
    refined.col(1).array() -= lift;
    MotionClip piece = decode_window(refined, motion_mg.joints, fps, motion_mg.id);
    if (keep_from > 0) piece = piece.slice(keep_from, frames - keep_from, motion_mg.id);

    if (w == 0) {
      Vec3 shift = src.root_pos[0] - piece.root_pos[0];
      shift.y() = 0.0;
      for (Vec3& p : piece.root_pos) p += shift;
      out = std::move(piece);
      continue;
    }
    const MotionClip joined = blend_transition(out, piece, std::min(cfg.blend_frames, piece.frames()));
    out.root_pos.insert(out.root_pos.end(), joined.root_pos.begin(), joined.root_pos.end());
    out.rot.insert(out.rot.end(), joined.rot.begin(), joined.rot.end());
  }
  out.id = motion_mg.id;
  out.origin.reset();
  return out;
}

}  // namespace motionrag
