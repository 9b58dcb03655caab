#pragma once

#include <cstdint>

#include "motionrag/contrastive.hpp"
#include "motionrag/corpus.hpp"
#include "motionrag/graph.hpp"
#include "motionrag/synthesis.hpp"

namespace motionrag::testing {

// Stage-1 artifacts for a synthetic corpus.
struct Stage1 {
  Corpus corpus;
  MotionGraph graph;
  MotionGraph pruned;
  ContrastiveModel model;
  NodeLibrary library;

  // Music embeddings of one clip's segments.
  Eigen::MatrixXd music_for(std::size_t clip) const {
    const FeatureMatrix& f = corpus.music_feats.at(corpus.clips.at(clip).id);
    return embed(model, f.cast<double>(), Side::music);
  }
};

inline Stage1 make_stage1(std::uint64_t seed, std::size_t clips, std::size_t epochs,
                          const SynthCorpusOptions& opts = {}) {
  Stage1 s;
  s.corpus = synthesize_test_corpus(seed, clips, opts);
  const auto windows = window_clips(s.corpus, s.corpus.windowing);
  s.graph = build_graph(windows, s.corpus.skeleton, GraphBuildConfig{});
  s.pruned = prune(s.graph);
  TrainConfig cfg;
  cfg.seed = seed;
  cfg.epochs = epochs;
  s.model = train(s.corpus, cfg).model;
  s.library = make_library(s.pruned, s.corpus, s.model);
  return s;
}

}  // namespace motionrag::testing
