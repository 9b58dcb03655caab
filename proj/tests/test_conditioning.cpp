#include <gtest/gtest.h>

#include "motionrag/conditioning.hpp"
#include "pipeline.hpp"
#include "support.hpp"

namespace motionrag {
namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

class Conditioning : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    stage = new testing::Stage1(testing::make_stage1(1, 6, 30));
    data = new DiffusionDataset(build_training_set(stage->corpus, stage->model, 60, 3));
  }
  static void TearDownTestSuite() {
    delete data;
    delete stage;
  }
  static DiffusionModel small_model() {
    DiffusionConfig cfg;
    cfg.hidden = 8;
    cfg.mlp_hidden = 8;
    cfg.steps = 6;
    return DiffusionModel::create(cfg, stage->corpus.skeleton, stage->corpus.music_dim,
                                  stage->model.music_head.shape().latent, data->normalizer, 7);
  }
  static testing::Stage1* stage;
  static DiffusionDataset* data;
};
testing::Stage1* Conditioning::stage = nullptr;
DiffusionDataset* Conditioning::data = nullptr;

TEST(BeatVector, MarksRoundedFramesInsideTheWindow) {
  const std::vector<double> beats{0.9, 1.04, 1.51, 3.0, 4.2};
  const VectorXd v = beat_vector(beats, 1.0, 60, 30.0);
  ASSERT_EQ(v.size(), 60);
  EXPECT_EQ(v.sum(), 2.0);
  EXPECT_EQ(v[1], 1.0);
  EXPECT_EQ(v[15], 1.0);
  EXPECT_EQ(v[59], 0.0);
  EXPECT_EQ(beat_vector(std::vector<double>{2.96}, 1.0, 60, 30.0)[59], 1.0);
}

TEST(CenteredWindow, MovesFirstRootOntoVerticalAxis) {
  Rng rng(70);
  const MotionClip c = testing::random_clip(rng, 5, 3, 30.0, "c");
  const MatrixXd raw = centered_window(c);
  EXPECT_EQ(raw(0, 0), 0.0);
  EXPECT_EQ(raw(0, 2), 0.0);
  for (Eigen::Index f = 0; f < 5; ++f) {
    EXPECT_NEAR(raw(f, 0), c.root_pos[static_cast<std::size_t>(f)].x() - c.root_pos[0].x(), 1e-15);
    EXPECT_EQ(raw(f, 1), c.root_pos[static_cast<std::size_t>(f)].y());
  }
}

TEST_F(Conditioning, RetrieveMatchesRankingAndHonorsExclusion) {
  const RetrievalIndex& index = data->index;
  ASSERT_EQ(index.size(), 24u);
  const VectorXd q = index.motion_emb.row(5).transpose();
  const VectorXd scores = index.motion_emb * q;
  const auto all = rank_scores(scores, 4);
  const auto got = retrieve(index, q, 4, kNoExclusion);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(got[i], all[i].index);
  const auto excl = retrieve(index, q, 3, all[0].index);
  EXPECT_EQ(excl, (std::vector<std::size_t>{all[1].index, all[2].index, all[3].index}));
  EXPECT_TRUE(retrieve(index, q, 0, kNoExclusion).empty());
  EXPECT_MOTIONRAG_ERROR(retrieve(index, q, 24, 0), ErrorCode::usage, "retrieval pool");
}

TEST_F(Conditioning, TrainingSetHasOneExamplePerWindowLedBySelf) {
  ASSERT_EQ(data->examples.size(), data->index.size());
  MatrixXd stacked(0, 35);
  for (std::size_t i = 0; i < data->examples.size(); ++i) {
    const TrainingExample& ex = data->examples[i];
    ASSERT_EQ(ex.conditions.topk.size(), 3u);
    EXPECT_EQ(ex.conditions.topk[0], ex.x0);
    EXPECT_EQ(ex.x0, data->index.normalized[i]);
    for (std::size_t k = 1; k < 3; ++k) EXPECT_NE(ex.conditions.topk[k], ex.x0);
    EXPECT_NO_THROW(ex.conditions.validate(60, 35, stage->corpus.music_dim, stage->model.music_head.shape().latent));
    EXPECT_NEAR(ex.conditions.contrastive_emb.norm(), 1.0, 1e-12);
    stacked.conservativeResize(stacked.rows() + 60, 35);
    stacked.bottomRows(60) = ex.x0;
  }
  for (Eigen::Index c = 0; c < 35; ++c) EXPECT_NEAR(stacked.col(c).mean(), 0.0, 1e-9);
}

TEST_F(Conditioning, TrainingSetRejectsMismatchedWindow) {
  EXPECT_MOTIONRAG_ERROR(build_training_set(stage->corpus, stage->model, 59, 3), ErrorCode::usage,
                         "differs from the corpus window");
  EXPECT_MOTIONRAG_ERROR(build_training_set(stage->corpus, stage->model, 60, 0), ErrorCode::usage, "top-k");
}

TEST_F(Conditioning, RefineKeepsLengthAndStartAndIsDeterministic) {
  const DiffusionModel model = small_model();
  const Generation g = generate_clip(stage->pruned, stage->library, stage->music_for(0), 150, SynthesisConfig{});
  const auto& clip0 = stage->corpus.clips[0].id;
  const MatrixXd music = stage->corpus.music_feats.at(clip0).cast<double>();
  const auto& beats = stage->corpus.beats.at(clip0);
  const MotionClip a = refine(model, stage->model, data->index, g.motion, music, beats, RefineConfig{});
  EXPECT_EQ(a.frames(), 150u);
  EXPECT_NO_THROW(a.validate());
  EXPECT_NEAR(a.root_pos[0].x(), g.motion.root_pos[0].x(), 1e-12);
  EXPECT_NEAR(a.root_pos[0].z(), g.motion.root_pos[0].z(), 1e-12);
  const MotionClip b = refine(model, stage->model, data->index, g.motion, music, beats, RefineConfig{});
  EXPECT_TRUE(a == b);
  RefineConfig other;
  other.seed = 9;
  EXPECT_FALSE(a == refine(model, stage->model, data->index, g.motion, music, beats, other));
  const MotionClip exact = refine(model, stage->model, data->index, g.motion.slice(0, 60, "x"), music, beats, {});
  EXPECT_EQ(exact.frames(), 60u);
}

TEST_F(Conditioning, RefineRejectsShortInputAndWideBlend) {
  const DiffusionModel model = small_model();
  const MotionClip short_clip = stage->corpus.clips[0].slice(0, 30, "s");
  const MatrixXd music = stage->corpus.music_feats.at(stage->corpus.clips[0].id).cast<double>();
  EXPECT_MOTIONRAG_ERROR(refine(model, stage->model, data->index, short_clip, music, {}, {}), ErrorCode::usage,
                         "needs at least 60");
  RefineConfig cfg;
  cfg.blend_frames = 60;
  EXPECT_MOTIONRAG_ERROR(refine(model, stage->model, data->index, stage->corpus.clips[0], music, {}, cfg),
                         ErrorCode::usage, "blend frames");
}

}  // namespace
}  // namespace motionrag
