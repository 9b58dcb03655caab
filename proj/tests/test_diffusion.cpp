#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "motionrag/corpus.hpp"
#include "motionrag/diffusion.hpp"
#include "oracles.hpp"
#include "support.hpp"

namespace motionrag {
namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using testing::rel_error;
using testing::TempDir;

MatrixXd random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

ConditionSet random_conditions(Rng& rng, std::size_t frames, std::size_t channels, std::size_t music_dim,
                               std::size_t latent, std::size_t k) {
  ConditionSet c;
  c.music = random_matrix(rng, 2, static_cast<Eigen::Index>(music_dim));
  c.beat = VectorXd::Zero(static_cast<Eigen::Index>(frames));
  c.beat[static_cast<Eigen::Index>(rng.below(frames))] = 1.0;
  for (std::size_t i = 0; i < k; ++i) {
    c.topk.push_back(random_matrix(rng, static_cast<Eigen::Index>(frames), static_cast<Eigen::Index>(channels)));
  }
  c.contrastive_emb = random_matrix(rng, static_cast<Eigen::Index>(latent), 1).col(0);
  return c;
}

// Short windows cut from a synthetic corpus, with their normalizer.
struct ToyData {
  Skeleton skeleton;
  std::vector<MatrixXd> raw;
  Normalizer norm;
};

ToyData toy_data(std::size_t frames, std::size_t count) {
  const Corpus c = synthesize_test_corpus(0, 4);
  const auto windows = window_clips(c, c.windowing);
  ToyData d;
  d.skeleton = c.skeleton;
  for (std::size_t i = 0; i < count; ++i) {
    d.raw.push_back(encode_window(windows[i % windows.size()].slice(3 * i % 40, frames, "w")));
  }
  d.norm = Normalizer::fit(d.raw);
  return d;
}

DiffusionModel toy_model(const ToyData& d, std::size_t frames, std::size_t steps, std::uint64_t seed) {
  DiffusionConfig cfg;
  cfg.frames = frames;
  cfg.hidden = 8;
  cfg.mlp_hidden = 8;
  cfg.blocks = 2;
  cfg.steps = steps;
  return DiffusionModel::create(cfg, d.skeleton, 5, 4, d.norm, seed);
}

TEST(Schedule, TwoStepBetasGiveKnownAlphaBar) {
  const DiffusionSchedule s = schedule_from_betas({0.1, 0.2});
  EXPECT_EQ(s.kind, ScheduleKind::custom);
  EXPECT_NEAR(s.alpha_bar[0], 0.9, 1e-15);
  EXPECT_NEAR(s.alpha_bar[1], 0.72, 1e-15);
  EXPECT_NEAR(s.alpha[1], 0.8, 1e-15);
}

TEST(Schedule, LinearEndpointsAndMonotonicity) {
  const DiffusionSchedule s = make_schedule(ScheduleKind::linear, 1000);
  EXPECT_NEAR(s.beta.front(), 1e-4, 1e-15);
  EXPECT_NEAR(s.beta.back(), 0.02, 1e-15);
  double prod = 1.0;
  for (std::size_t t = 0; t < s.steps(); ++t) {
    prod *= 1.0 - s.beta[t];
    EXPECT_NEAR(s.alpha_bar[t], prod, 1e-12);
    if (t > 0) {
      EXPECT_GT(s.beta[t], s.beta[t - 1]);
    }
  }
}

TEST(Schedule, CosineEndsNearPureNoise) {
  const DiffusionSchedule s = make_schedule(ScheduleKind::cosine, 50);
  EXPECT_LT(s.alpha_bar[49], 0.05);
  EXPECT_GT(s.alpha_bar[0], 0.99);
  for (std::size_t t = 0; t < s.steps(); ++t) {
    EXPECT_GT(s.beta[t], 0.0);
    EXPECT_LE(s.beta[t], 0.999);
    if (t > 0) {
      EXPECT_LT(s.alpha_bar[t], s.alpha_bar[t - 1]);
    }
  }
}

TEST(Schedule, RejectsBadInputs) {
  EXPECT_MOTIONRAG_ERROR(make_schedule(ScheduleKind::cosine, 0), ErrorCode::usage, "T >= 1");
  EXPECT_MOTIONRAG_ERROR(make_schedule(ScheduleKind::custom, 10), ErrorCode::usage, "explicit betas");
  EXPECT_MOTIONRAG_ERROR(schedule_from_betas({0.1, 1.0}), ErrorCode::invariant, "beta outside");
}

TEST(ForwardProcess, QSampleHasClosedFormMeanAndVariance) {
  const DiffusionSchedule s = make_schedule(ScheduleKind::cosine, 20);
  Rng rng(40);
  const std::size_t n = 200000;
  const MatrixXd x0 = MatrixXd::Constant(1, 1, 1.5);
  for (std::size_t t : {0u, 7u, 19u}) {
    double sum = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double x = q_sample(x0, t, MatrixXd::Constant(1, 1, rng.normal()), s)(0, 0);
      sum += x;
      sq += x * x;
    }
    const double mean = sum / n;
    const double var = sq / n - mean * mean;
    EXPECT_NEAR(mean, std::sqrt(s.alpha_bar[t]) * 1.5, 0.01);
    EXPECT_NEAR(var, 1.0 - s.alpha_bar[t], 0.01);
  }
}

TEST(ForwardProcess, ChainedStepsMatchOneShotMarginal) {
  const DiffusionSchedule s = make_schedule(ScheduleKind::linear, 12);
  Rng rng(41);
  const std::size_t n = 100000, t = 11;
  double sum = 0.0, sq = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    MatrixXd x = MatrixXd::Constant(1, 1, -0.7);
    for (std::size_t k = 0; k <= t; ++k) x = q_step(x, k, MatrixXd::Constant(1, 1, rng.normal()), s);
    sum += x(0, 0);
    sq += x(0, 0) * x(0, 0);
  }
  const double mean = sum / n;
  EXPECT_NEAR(mean, std::sqrt(s.alpha_bar[t]) * -0.7, 0.01);
  EXPECT_NEAR(sq / n - mean * mean, 1.0 - s.alpha_bar[t], 0.01);
}

TEST(ForwardProcess, PosteriorPreservesTheMarginal) {
  for (auto kind : {ScheduleKind::linear, ScheduleKind::cosine}) {
    const DiffusionSchedule s = make_schedule(kind, 30);
    for (std::size_t t = 1; t < s.steps(); ++t) {
      const Posterior p = posterior(s, t);
      EXPECT_NEAR(p.coef_x0 + p.coef_xt * std::sqrt(s.alpha_bar[t]), std::sqrt(s.alpha_bar[t - 1]), 1e-12);
      EXPECT_NEAR(p.coef_xt * p.coef_xt * (1.0 - s.alpha_bar[t]) + p.variance, 1.0 - s.alpha_bar[t - 1], 1e-12);
    }
    EXPECT_MOTIONRAG_ERROR(posterior(s, 0), ErrorCode::usage, "1 <= t < T");
  }
}

TEST(Representation, EncodeDecodeRoundTrip) {
  Rng rng(42);
  const MotionClip c = testing::random_clip(rng, 7, 8, 30.0, "c");
  const MatrixXd raw = encode_window(c);
  ASSERT_EQ(raw.cols(), 35);
  for (Eigen::Index f = 0; f < raw.rows(); ++f) {
    for (Eigen::Index j = 0; j < 8; ++j) EXPECT_GE(raw(f, 3 + 4 * j), 0.0);
  }
  const MotionClip back = decode_window(raw, 8, 30.0, "c");
  for (std::size_t f = 0; f < 7; ++f) {
    EXPECT_LT((back.root_pos[f] - c.root_pos[f]).norm(), 1e-15);
    for (std::size_t j = 0; j < 8; ++j) {
      EXPECT_NEAR(std::abs(back.rotation(f, j).dot(c.rotation(f, j))), 1.0, 1e-12);
    }
  }
  MatrixXd zero = raw;
  zero.row(0).segment<4>(3).setZero();
  EXPECT_TRUE(decode_window(zero, 8, 30.0, "z").rotation(0, 0).isApprox(Quat::Identity()));
}

TEST(Representation, NormalizerStandardizesAndInverts) {
  Rng rng(43);
  std::vector<MatrixXd> windows;
  for (int i = 0; i < 5; ++i) {
    MatrixXd w = random_matrix(rng, 10, 4, 3.0);
    w.col(2).setConstant(7.0);
    windows.push_back(w);
  }
  const Normalizer n = Normalizer::fit(windows);
  EXPECT_DOUBLE_EQ(n.stddev[2], 1.0);
  EXPECT_DOUBLE_EQ(n.mean[2], 7.0);
  MatrixXd all(50, 4);
  for (int i = 0; i < 5; ++i) all.middleRows(10 * i, 10) = n.apply(windows[static_cast<std::size_t>(i)]);
  for (Eigen::Index c : {0, 1, 3}) {
    EXPECT_NEAR(all.col(c).mean(), 0.0, 1e-12);
    EXPECT_NEAR((all.col(c).array() - all.col(c).mean()).square().mean(), 1.0, 1e-9);
  }
  EXPECT_LT((n.invert(n.apply(windows[0])) - windows[0]).norm(), 1e-12);
}

TEST(Contacts, StandingFeetAreInContactAndMovingFeetAreNot) {
  const Skeleton s = Skeleton::default_biped();
  MotionClip c = MotionClip::zeros("c", 30.0, 6, s.joint_count());
  for (auto& r : c.root_pos) r = Vec3(0, 0.9, 0);
  const auto fps = 30.0;
  EXPECT_EQ(detect_contacts(forward_kinematics(s, c), s, fps, 0.05, 0.5),
            MatrixXd::Ones(5, static_cast<Eigen::Index>(s.foot_joints.size())));
  for (auto& r : c.root_pos) r.y() = 1.0;
  EXPECT_EQ(detect_contacts(forward_kinematics(s, c), s, fps, 0.05, 0.5).sum(), 0.0);
  for (std::size_t f = 0; f < 6; ++f) c.root_pos[f] = Vec3(0.1 * static_cast<double>(f), 0.9, 0);
  EXPECT_EQ(detect_contacts(forward_kinematics(s, c), s, fps, 0.05, 0.5).sum(), 0.0);
}

TEST(Conditions, ValidationNamesTheOffendingCondition) {
  Rng rng(44);
  const ConditionSet good = random_conditions(rng, 6, 35, 5, 4, 2);
  EXPECT_NO_THROW(good.validate(6, 35, 5, 4));
  ConditionSet c = good;
  c.music.resize(0, 5);
  EXPECT_MOTIONRAG_ERROR(c.validate(6, 35, 5, 4), ErrorCode::invariant, "condition 'music' missing");
  c = good;
  c.beat.resize(0);
  EXPECT_MOTIONRAG_ERROR(c.validate(6, 35, 5, 4), ErrorCode::invariant, "condition 'beat' missing");
  c = good;
  c.topk.clear();
  EXPECT_MOTIONRAG_ERROR(c.validate(6, 35, 5, 4), ErrorCode::invariant, "condition 'topk' missing");
  c = good;
  c.contrastive_emb.resize(0);
  EXPECT_MOTIONRAG_ERROR(c.validate(6, 35, 5, 4), ErrorCode::invariant, "condition 'contrastive_emb' missing");
  EXPECT_MOTIONRAG_ERROR(good.validate(7, 35, 5, 4), ErrorCode::invariant, "condition 'beat'");
}

class Fusion : public ::testing::Test {
 protected:
  void SetUp() override {
    net = FusionNet(FusionConfig{5, 4, 35, 16});
    Rng rng(45);
    net.init(params, rng);
  }
  FusionNet net;
  nn::Vector params;
};

TEST_F(Fusion, OutputIsFourTokensForAnyK) {
  Rng rng(46);
  for (std::size_t k : {1u, 3u, 7u}) {
    const MatrixXd out = net.forward(params, random_conditions(rng, 6, 35, 5, 4, k));
    EXPECT_EQ(out.rows(), 4);
    EXPECT_EQ(out.cols(), 16);
    EXPECT_TRUE(out.allFinite());
  }
}

TEST_F(Fusion, ZeroConditionsGiveZeroOutput) {
  ConditionSet c;
  c.music = MatrixXd::Zero(3, 5);
  c.beat = VectorXd::Zero(6);
  c.topk = {MatrixXd::Zero(6, 35), MatrixXd::Zero(6, 35)};
  c.contrastive_emb = VectorXd::Zero(4);
  EXPECT_LT(net.forward(params, c).norm(), 1e-15);
}

TEST_F(Fusion, MaskCutsInformationFlow) {
  Rng rng(47);
  const ConditionSet a = random_conditions(rng, 6, 35, 5, 4, 2);
  ConditionSet b = a;
  b.topk[0] = random_matrix(rng, 6, 35);
  PairMask mask = full_pair_mask();
  for (std::size_t i = 0; i < kConditionCount; ++i) mask[i][kTopK] = false;
  const MatrixXd ma = net.forward(params, a, mask), mb = net.forward(params, b, mask);
  for (std::size_t i = 0; i < kConditionCount; ++i) {
    const double d = (ma.row(static_cast<Eigen::Index>(i)) - mb.row(static_cast<Eigen::Index>(i))).norm();
    if (i == kTopK) {
      EXPECT_GT(d, 1e-6);
    } else {
      EXPECT_EQ(d, 0.0);
    }
  }
  const MatrixXd fa = net.forward(params, a), fb = net.forward(params, b);
  for (std::size_t i = 0; i < kConditionCount; ++i) {
    EXPECT_GT((fa.row(static_cast<Eigen::Index>(i)) - fb.row(static_cast<Eigen::Index>(i))).norm(), 1e-6);
  }
  PairMask none{};
  EXPECT_EQ(net.forward(params, a, none).norm(), 0.0);
}

TEST_F(Fusion, BackwardMatchesFiniteDifferences) {
  Rng rng(48);
  for (Eigen::Index i = 0; i < params.size(); ++i) params[i] += 0.05 * rng.normal();
  const ConditionSet c = random_conditions(rng, 6, 35, 5, 4, 2);
  const MatrixXd weight = random_matrix(rng, 4, 16);
  FusionNet::Cache cache;
  net.forward(params, c, full_pair_mask(), cache);
  nn::Vector grad = nn::Vector::Zero(params.size());
  net.backward(params, cache, weight, grad);
  const double h = 1e-6;
  double worst = 0.0;
  for (Eigen::Index i = 0; i < params.size(); i += 7) {
    nn::Vector p = params, m = params;
    p[i] += h;
    m[i] -= h;
    const double fd = (net.forward(p, c).cwiseProduct(weight).sum() - net.forward(m, c).cwiseProduct(weight).sum()) / (2 * h);
    if (std::abs(fd) + std::abs(grad[i]) > 1e-7) worst = std::max(worst, rel_error(fd, grad[i], 1e-6));
  }
  EXPECT_LT(worst, 1e-4);
}

class Losses : public ::testing::Test {
 protected:
  void SetUp() override {
    data = toy_data(8, 4);
    Rng rng(49);
    ex = make_example(data.norm.apply(data.raw[0]), random_conditions(rng, 8, 35, 5, 4, 1), data.norm,
                      data.skeleton, 30.0, ContactConfig{0.2, 5.0});
  }
  ToyData data;
  TrainingExample ex;
};

TEST_F(Losses, ExampleCarriesFkPositionsAndContacts) {
  const MotionClip clip = decode_window(data.raw[0], data.skeleton.joint_count(), 30.0, "x");
  const auto pos = oracle::positions(data.skeleton, clip, true);
  ASSERT_EQ(ex.positions.size(), 8 * data.skeleton.joint_count());
  for (std::size_t f = 0; f < 8; ++f) {
    for (std::size_t j = 0; j < data.skeleton.joint_count(); ++j) {
      EXPECT_LT((ex.positions[f * data.skeleton.joint_count() + j] - pos[f][j]).norm(), 1e-9);
    }
  }
  EXPECT_EQ(ex.contacts.rows(), 7);
  EXPECT_GT(ex.contacts.sum(), 0.0);
}

TEST_F(Losses, PerfectPredictionHasZeroLoss) {
  const LossComponents l = prediction_loss(ex, ex.x0, data.norm, data.skeleton, LossWeights{}, nullptr);
  EXPECT_EQ(l.simple, 0.0);
  EXPECT_EQ(l.vel, 0.0);
  EXPECT_LT(l.pos, 1e-20);
  EXPECT_LT(l.contact, 1e-20);
  EXPECT_LT(l.total, 1e-20);
}

TEST_F(Losses, ConstantOffsetHasZeroVelocityLoss) {
  Rng rng(50);
  const Eigen::RowVectorXd offset = random_matrix(rng, 1, 35);
  const MatrixXd pred = ex.x0.rowwise() + offset;
  const LossComponents l = prediction_loss(ex, pred, data.norm, data.skeleton, LossWeights{}, nullptr);
  EXPECT_NEAR(l.vel, 0.0, 1e-20);
  EXPECT_NEAR(l.simple, offset.squaredNorm(), 1e-9);
  EXPECT_GT(l.pos, 0.0);
}

TEST_F(Losses, TotalIsWeightedSum) {
  Rng rng(51);
  const MatrixXd pred = ex.x0 + random_matrix(rng, 8, 35, 0.1);
  const LossWeights w{0.5, 2.0, 3.0};
  const LossComponents l = prediction_loss(ex, pred, data.norm, data.skeleton, w, nullptr);
  EXPECT_NEAR(l.total, l.simple + 0.5 * l.pos + 2.0 * l.vel + 3.0 * l.contact, 1e-12);
  EXPECT_GT(l.contact, 0.0);
}

TEST_F(Losses, GradientMatchesFiniteDifferences) {
  Rng rng(52);
  const MatrixXd pred = ex.x0 + random_matrix(rng, 8, 35, 0.1);
  const LossWeights w{0.7, 1.3, 2.0};
  MatrixXd grad;
  prediction_loss(ex, pred, data.norm, data.skeleton, w, &grad);
  const double h = 1e-6;
  double worst = 0.0;
  for (Eigen::Index i = 0; i < pred.size(); ++i) {
    MatrixXd p = pred, m = pred;
    p.data()[i] += h;
    m.data()[i] -= h;
    const double fd = (prediction_loss(ex, p, data.norm, data.skeleton, w, nullptr).total -
                       prediction_loss(ex, m, data.norm, data.skeleton, w, nullptr).total) /
                      (2 * h);
    if (std::abs(fd) + std::abs(grad.data()[i]) > 1e-7) worst = std::max(worst, rel_error(fd, grad.data()[i], 1e-6));
  }
  EXPECT_LT(worst, 1e-4);
}

TEST_F(Losses, NonFiniteComponentIsNamed) {
  MatrixXd pred = ex.x0;
  pred(2, 1) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_MOTIONRAG_ERROR(prediction_loss(ex, pred, data.norm, data.skeleton, LossWeights{}, nullptr),
                         ErrorCode::numeric, "L_simple");
  EXPECT_MOTIONRAG_ERROR((LossWeights{-1.0, 1.0, 1.0}.validate()), ErrorCode::usage, "loss weights");
}

TEST(TrainingLoss, ParameterGradientsMatchFiniteDifferences) {
  const ToyData d = toy_data(2, 3);
  DiffusionModel model = toy_model(d, 2, 10, 1);
  Rng rng(3);
  for (Eigen::Index i = 0; i < model.fusion_params.size(); ++i) model.fusion_params[i] += 0.1 * rng.normal();
  for (Eigen::Index i = 0; i < model.denoiser_params.size(); ++i) model.denoiser_params[i] += 0.1 * rng.normal();
  std::vector<TrainingExample> ex;
  for (std::size_t i = 0; i < 2; ++i) {
    ex.push_back(make_example(d.norm.apply(d.raw[i]), random_conditions(rng, 2, 35, 5, 4, 2), d.norm, d.skeleton,
                              30.0, ContactConfig{0.2, 5.0}));
  }
  const std::vector<const TrainingExample*> batch{&ex[0], &ex[1]};
  std::vector<NoiseDraw> noise(2);
  for (std::size_t i = 0; i < 2; ++i) noise[i] = {3 + 4 * i, random_matrix(rng, 2, 35)};
  const LossWeights w;
  const LossGradient g = training_loss(model, batch, noise, w, true);
  double worst = 0.0;
  for (int which = 0; which < 2; ++which) {
    nn::Vector& p = which == 0 ? model.fusion_params : model.denoiser_params;
    const nn::Vector& analytic = which == 0 ? g.fusion : g.denoiser;
    for (Eigen::Index i = 0; i < p.size(); ++i) {
      const double h = 1e-5, o = p[i];
      p[i] = o + h;
      const double lp = training_loss(model, batch, noise, w, false).loss.total;
      p[i] = o - h;
      const double lm = training_loss(model, batch, noise, w, false).loss.total;
      p[i] = o;
      const double fd = (lp - lm) / (2 * h);
      if (std::abs(fd) + std::abs(analytic[i]) > 1e-7) worst = std::max(worst, rel_error(fd, analytic[i], 1e-6));
    }
  }
  EXPECT_LT(worst, 1e-4);
}

TEST(Sampling, FixedPredictorIsReturnedExactly) {
  const DiffusionSchedule s = make_schedule(ScheduleKind::cosine, 25);
  Rng rng(53);
  const MatrixXd target = random_matrix(rng, 4, 3);
  std::vector<std::size_t> seen;
  const MatrixXd out = sample_with([&](const MatrixXd&, std::size_t) { return target; }, s, 4, 3, 9,
                                   [&](std::size_t t, const MatrixXd& x_t, const MatrixXd& x0_hat) {
                                     seen.push_back(t);
                                     EXPECT_TRUE(x_t.allFinite());
                                     EXPECT_EQ(x0_hat, target);
                                   });
  EXPECT_EQ(out, target);
  ASSERT_EQ(seen.size(), 25u);
  for (std::size_t i = 0; i < seen.size(); ++i) EXPECT_EQ(seen[i], 24 - i);
}

TEST(Sampling, IteratesConvergeTowardAFixedPrediction) {
  const DiffusionSchedule s = make_schedule(ScheduleKind::linear, 40);
  const MatrixXd target = MatrixXd::Constant(3, 2, 0.5);
  double first = 0.0, last = 0.0;
  sample_with([&](const MatrixXd&, std::size_t) { return target; }, s, 3, 2, 11,
              [&](std::size_t t, const MatrixXd& x_t, const MatrixXd&) {
                if (t == 39) first = (x_t - target).norm();
                if (t == 1) last = (x_t - target).norm();
              });
  EXPECT_LT(last, 0.25 * first);
}

TEST(Sampling, SeedDeterminesTheSample) {
  const ToyData d = toy_data(6, 3);
  const DiffusionModel model = toy_model(d, 6, 8, 2);
  Rng rng(54);
  const ConditionSet c = random_conditions(rng, 6, 35, 5, 4, 2);
  const MatrixXd a = sample(model, c, 5), b = sample(model, c, 5), other = sample(model, c, 6);
  EXPECT_EQ(a, b);
  EXPECT_GT((a - other).norm(), 1e-6);
  EXPECT_TRUE(a.allFinite());
  EXPECT_MOTIONRAG_ERROR(sample(model, random_conditions(rng, 5, 35, 5, 4, 2), 1), ErrorCode::invariant,
                         "condition 'beat'");
}

TEST(Training, ShortRunDescendsAndIsReproducible) {
  const ToyData d = toy_data(6, 6);
  Rng rng(55);
  std::vector<TrainingExample> ex;
  for (const MatrixXd& raw : d.raw) {
    ex.push_back(make_example(d.norm.apply(raw), random_conditions(rng, 6, 35, 5, 4, 2), d.norm, d.skeleton, 30.0,
                              ContactConfig{}));
  }
  DiffusionTrainConfig cfg;
  cfg.epochs = 40;
  cfg.batch_size = 3;
  cfg.learning_rate = 3e-3;
  DiffusionModel a = toy_model(d, 6, 10, 3);
  const DiffusionTrainResult r = train_diffusion(a, ex, cfg);
  ASSERT_EQ(r.epoch_losses.size(), 40u);
  EXPECT_EQ(r.optimizer_steps, 80u);
  double early = 0.0, late = 0.0;
  for (std::size_t e = 0; e < 5; ++e) {
    early += r.epoch_losses[e].total;
    late += r.epoch_losses[35 + e].total;
  }
  EXPECT_LT(late, early);
  DiffusionModel b = toy_model(d, 6, 10, 3);
  train_diffusion(b, ex, cfg);
  EXPECT_EQ(a.fusion_params, b.fusion_params);
  EXPECT_EQ(a.denoiser_params, b.denoiser_params);
  DiffusionModel c = toy_model(d, 6, 10, 3);
  cfg.ema = false;
  train_diffusion(c, ex, cfg);
  EXPECT_NE(a.denoiser_params, c.denoiser_params);
}

TEST(Training, RejectsBadConfig) {
  DiffusionTrainConfig cfg;
  cfg.ema_decay = 1.0;
  EXPECT_MOTIONRAG_ERROR(cfg.validate(), ErrorCode::usage, "EMA decay");
  cfg = {};
  cfg.batch_size = 0;
  EXPECT_MOTIONRAG_ERROR(cfg.validate(), ErrorCode::usage, "batch size");
}

TEST(Checkpoint, RoundTripPreservesPredictions) {
  TempDir dir("diff");
  const ToyData d = toy_data(6, 3);
  const DiffusionModel m = toy_model(d, 6, 8, 4);
  save_diffusion(dir / "d.bin", m);
  const DiffusionModel back = load_diffusion(dir / "d.bin");
  EXPECT_EQ(encode_diffusion(back), encode_diffusion(m));
  Rng rng(56);
  const ConditionSet c = random_conditions(rng, 6, 35, 5, 4, 2);
  EXPECT_EQ(sample(back, c, 3), sample(m, c, 3));
  auto bytes = encode_diffusion(m);
  bytes[3] = 'x';
  EXPECT_MOTIONRAG_ERROR(decode_diffusion(bytes, "mem"), ErrorCode::data, "bad magic");
  bytes = encode_diffusion(m);
  bytes.resize(bytes.size() / 2);
  EXPECT_MOTIONRAG_ERROR(decode_diffusion(bytes, "mem"), ErrorCode::data, "mem");
}

}  // namespace
}  // namespace motionrag
