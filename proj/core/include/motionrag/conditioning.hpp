#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "motionrag/contrastive.hpp"
#include "motionrag/corpus.hpp"
#include "motionrag/diffusion.hpp"

namespace motionrag {

// 1 at round((b - start) * fps) for every beat b landing inside [0, frames).
Eigen::VectorXd beat_vector(std::span<const double> beats_seconds, double start_seconds,
                            std::size_t frames, double fps);

// Raw window with the first frame's root moved onto the vertical axis.
Eigen::MatrixXd centered_window(const MotionClip& clip);

// Every corpus window with its normalized representation and the unit motion
// embedding of its feature row; the candidate pool for top-k conditioning.
struct RetrievalIndex {
  std::vector<MotionClip> windows;
  std::vector<Eigen::MatrixXd> normalized;
  Eigen::MatrixXd motion_emb;  // windows x latent
  Eigen::MatrixXd music_feats; // windows x music_dim, aligned with `windows`
  std::size_t stride_frames = 0;  // music segment stride

  std::size_t size() const { return windows.size(); }
};

RetrievalIndex make_retrieval_index(const Corpus& corpus, const ContrastiveModel& model,
                                    const Normalizer& norm);

// Indices of the k best candidates for a music embedding, skipping `exclude`.
std::vector<std::size_t> retrieve(const RetrievalIndex& index, const Eigen::VectorXd& music_emb,
                                  std::size_t k, std::size_t exclude);

inline constexpr std::size_t kNoExclusion = static_cast<std::size_t>(-1);

struct DiffusionDataset {
  Normalizer normalizer;
  RetrievalIndex index;
  std::vector<TrainingExample> examples;
};

// One example per corpus window. Its candidates are the window itself followed
// by the k - 1 best other windows for its music segment.
DiffusionDataset build_training_set(const Corpus& corpus, const ContrastiveModel& model,
                                    std::size_t frames, std::size_t top_k,
                                    const ContactConfig& contact = {});

struct RefineConfig {
  std::size_t blend_frames = 8;
  std::uint64_t seed = 0;
};

// Refines a stage-1 motion window by window. Window w starts at frame w * F
// (the last one is right-aligned to the clip end), follows music segment
// (start / stride) mod S and is conditioned on itself plus k - 1 retrieved
// corpus windows. Refined windows are re-attached with blend_transition.
MotionClip refine(const DiffusionModel& model, const ContrastiveModel& contrastive,
                  const RetrievalIndex& index, const MotionClip& motion_mg,
                  const Eigen::MatrixXd& music_feats, std::span<const double> beats_seconds,
                  const RefineConfig& cfg);

}  // namespace motionrag
