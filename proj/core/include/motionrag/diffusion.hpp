#pragma once

#include <Eigen/Core>

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "motionrag/kinematics.hpp"
#include "motionrag/nn.hpp"
#include "motionrag/rng.hpp"

namespace motionrag {

// ---- noise schedule -------------------------------------------------------

enum class ScheduleKind { linear, cosine, custom };

struct DiffusionSchedule {
  ScheduleKind kind = ScheduleKind::cosine;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;

  std::size_t steps() const { return beta.size(); }
  void validate() const;
};

// linear: betas evenly spaced from 0.1/T to 20/T (the usual 1e-4..0.02 range
// rescaled to T steps). cosine: alpha_bar from a squared cosine with offset
// 0.008, betas clipped at 0.999.
DiffusionSchedule make_schedule(ScheduleKind kind, std::size_t steps);
DiffusionSchedule schedule_from_betas(std::vector<double> betas);

// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps, for step index t in [0, T).
Eigen::MatrixXd q_sample(const Eigen::MatrixXd& x0, std::size_t t, const Eigen::MatrixXd& eps,
                         const DiffusionSchedule& sched);
Eigen::MatrixXd q_sample_at(const Eigen::MatrixXd& x0, double alpha_bar, const Eigen::MatrixXd& eps);
// One forward transition: sqrt(1 - beta_t) x_prev + sqrt(beta_t) eps.
Eigen::MatrixXd q_step(const Eigen::MatrixXd& x_prev, std::size_t t, const Eigen::MatrixXd& eps,
                       const DiffusionSchedule& sched);

// ---- motion representation ------------------------------------------------

// Per frame: root position (3) then one (w, x, y, z) quaternion per joint
// with w >= 0.
std::size_t motion_channels(std::size_t joints);
Eigen::MatrixXd encode_window(const MotionClip& clip);
MotionClip decode_window(const Eigen::MatrixXd& raw, std::size_t joints, double fps, std::string id);

// Per-channel standardization; channels with std below 1e-6 keep unit scale.
struct Normalizer {
  Eigen::VectorXd mean;
  Eigen::VectorXd stddev;

  static Normalizer fit(std::span<const Eigen::MatrixXd> windows);
  Eigen::MatrixXd apply(const Eigen::MatrixXd& raw) const;
  Eigen::MatrixXd invert(const Eigen::MatrixXd& normalized) const;
};

// ---- contacts -------------------------------------------------------------

struct ContactConfig {
  double height = 0.05;  // meters
  double speed = 0.5;    // m/s
};

// (frames - 1) x feet, 1 where the foot is below `height` and slower than
// `speed` (forward-difference velocity).
Eigen::MatrixXd detect_contacts(const PoseSequence& seq, const Skeleton& skeleton, double fps,
                                double height, double speed);

// ---- conditions and fusion ------------------------------------------------

struct ConditionSet {
  Eigen::MatrixXd music;                  // tokens x music_dim
  Eigen::VectorXd beat;                   // frames, 1 at beat frames
  std::vector<Eigen::MatrixXd> topk;      // k normalized windows, frames x channels
  Eigen::VectorXd contrastive_emb;        // latent

  void validate(std::size_t frames, std::size_t channels, std::size_t music_dim,
                std::size_t latent_dim) const;
};

enum Condition : std::size_t { kMusic = 0, kBeat = 1, kTopK = 2, kEmbedding = 3, kConditionCount = 4 };

// mask[i][j]: whether condition i may attend to condition j. The diagonal is ignored.
using PairMask = std::array<std::array<bool, kConditionCount>, kConditionCount>;
PairMask full_pair_mask();

struct FusionConfig {
  std::size_t music_dim = 0;
  std::size_t latent_dim = 0;
  std::size_t channels = 0;
  std::size_t dim = 64;
};

// Each condition is tokenized and projected to (q, k, v); condition i's
// queries attend over the keys and values of every other condition, and the
// result is mean-pooled to one token. The output is always 4 x dim.
class FusionNet {
 public:
  FusionNet() = default;
  explicit FusionNet(const FusionConfig& cfg);

  const FusionConfig& config() const { return cfg_; }
  std::size_t parameter_count() const { return layout_.size(); }
  void init(nn::Vector& params, Rng& rng) const;

  struct Cache {
    std::array<nn::Matrix, kConditionCount> tokens, q, k, v;
    std::array<nn::Matrix, kConditionCount> keys, values;  // gathered from the other conditions
    std::array<std::vector<std::size_t>, kConditionCount> sources;
    std::array<nn::AttendCache, kConditionCount> attn;
  };

  std::array<nn::Matrix, kConditionCount> tokenize(const ConditionSet& c) const;
  nn::Matrix forward(const nn::Vector& params, const ConditionSet& c, const PairMask& mask,
                     Cache& cache) const;
  nn::Matrix forward(const nn::Vector& params, const ConditionSet& c,
                     const PairMask& mask = full_pair_mask()) const;
  void backward(const nn::Vector& params, const Cache& cache, const nn::Matrix& d_fused,
                nn::Vector& grad) const;

 private:
  FusionConfig cfg_;
  nn::ParamLayout layout_;
  std::array<nn::Linear, kConditionCount> q_, k_, v_;
};

// ---- denoiser -------------------------------------------------------------

struct DenoiserConfig {
  std::size_t frames = 60;
  std::size_t channels = 0;
  std::size_t hidden = 64;
  std::size_t blocks = 1;
  std::size_t mlp_hidden = 128;
};

// Residual network predicting x0: input projection plus frame and timestep
// codes, then blocks of self-attention, cross-attention over the fused
// condition tokens and a tanh MLP, then an output projection.
class Denoiser {
 public:
  Denoiser() = default;
  explicit Denoiser(const DenoiserConfig& cfg);

  const DenoiserConfig& config() const { return cfg_; }
  std::size_t parameter_count() const { return layout_.size(); }
  void init(nn::Vector& params, Rng& rng) const;

  struct BlockCache {
    nn::Attention::Cache self, cross;
    nn::Mlp::Cache mlp;
  };
  struct Cache {
    nn::Matrix x;
    Eigen::RowVectorXd time_code, time_emb;
    std::vector<BlockCache> blocks;
    nn::Matrix last;
  };

  nn::Matrix forward(const nn::Vector& params, const nn::Matrix& x_t, std::size_t t,
                     const nn::Matrix& fused, Cache& cache) const;
  nn::Matrix forward(const nn::Vector& params, const nn::Matrix& x_t, std::size_t t,
                     const nn::Matrix& fused) const;
  // Accumulates parameter gradients; returns dL/d(fused).
  nn::Matrix backward(const nn::Vector& params, const Cache& cache, const nn::Matrix& d_out,
                      nn::Vector& grad) const;

 private:
  DenoiserConfig cfg_;
  nn::ParamLayout layout_;
  nn::Linear in_, time_, out_;
  std::vector<nn::Attention> self_, cross_;
  std::vector<nn::Mlp> mlp_;
  nn::Matrix frame_code_;
};

// ---- model ----------------------------------------------------------------

struct DiffusionConfig {
  std::size_t frames = 60;
  std::size_t hidden = 64;
  std::size_t blocks = 1;
  std::size_t mlp_hidden = 128;
  std::size_t steps = 50;  // T
  ScheduleKind schedule = ScheduleKind::cosine;
  std::size_t top_k = 3;
};

struct DiffusionModel {
  DiffusionConfig config;
  Skeleton skeleton;
  std::size_t music_dim = 0;
  std::size_t latent_dim = 0;
  DiffusionSchedule schedule;
  Normalizer normalizer;
  FusionNet fusion;
  Denoiser denoiser;
  nn::Vector fusion_params;
  nn::Vector denoiser_params;

  static DiffusionModel create(const DiffusionConfig& cfg, const Skeleton& skeleton,
                               std::size_t music_dim, std::size_t latent_dim,
                               Normalizer normalizer, std::uint64_t seed);

  std::size_t channels() const { return motion_channels(skeleton.joint_count()); }
  // G(x_t, t, C) on normalized windows.
  Eigen::MatrixXd predict(const Eigen::MatrixXd& x_t, std::size_t t, const ConditionSet& c) const;
};

// ---- losses ---------------------------------------------------------------

struct LossWeights {
  double pos = 1.0;
  double vel = 1.0;
  double contact = 1.0;

  void validate() const;
};

struct LossComponents {
  double simple = 0.0;
  double pos = 0.0;
  double vel = 0.0;
  double contact = 0.0;
  double total = 0.0;
};

struct TrainingExample {
  Eigen::MatrixXd x0;        // normalized window
  ConditionSet conditions;
  Eigen::MatrixXd contacts;  // (frames - 1) x feet
  std::vector<Vec3> positions;  // FK of x0, frames x joints
};

// Completes contacts and positions from x0.
TrainingExample make_example(Eigen::MatrixXd x0, ConditionSet conditions, const Normalizer& norm,
                             const Skeleton& skeleton, double fps, const ContactConfig& contact);

// Loss terms between a prediction and its example, and optionally
// dL_total/d(prediction). Positions come from FK of the de-normalized windows.
LossComponents prediction_loss(const TrainingExample& ex, const Eigen::MatrixXd& prediction,
                               const Normalizer& norm, const Skeleton& skeleton,
                               const LossWeights& w, Eigen::MatrixXd* d_prediction);

struct NoiseDraw {
  std::size_t t = 0;
  Eigen::MatrixXd eps;
};

struct LossGradient {
  LossComponents loss;
  nn::Vector fusion;
  nn::Vector denoiser;
};

// Batch mean of the loss at the given noise draws, with parameter gradients.
LossGradient training_loss(const DiffusionModel& model, std::span<const TrainingExample* const> batch,
                           std::span<const NoiseDraw> noise, const LossWeights& w, bool with_gradient);

// ---- training and sampling ------------------------------------------------

struct DiffusionTrainConfig {
  std::size_t epochs = 200;
  std::size_t batch_size = 8;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  bool ema = true;
  double ema_decay = 0.999;
  LossWeights weights;

  void validate() const;
};

struct DiffusionTrainResult {
  std::vector<LossComponents> epoch_losses;  // mean over each epoch's batches
  std::size_t optimizer_steps = 0;
};

// Trains `model` in place; with EMA on, the model ends up holding the averaged weights.
DiffusionTrainResult train_diffusion(DiffusionModel& model, std::span<const TrainingExample> data,
                                     const DiffusionTrainConfig& cfg);

using SampleObserver =
    std::function<void(std::size_t t, const Eigen::MatrixXd& x_t, const Eigen::MatrixXd& x0_hat)>;

// Ancestral sampling with x0 prediction; returns the normalized window.
Eigen::MatrixXd sample(const DiffusionModel& model, const ConditionSet& c, std::uint64_t seed,
                       const SampleObserver& observer = {});

// Same loop around an arbitrary predictor.
using Predictor = std::function<Eigen::MatrixXd(const Eigen::MatrixXd& x_t, std::size_t t)>;
Eigen::MatrixXd sample_with(const Predictor& predict, const DiffusionSchedule& sched,
                            std::size_t frames, std::size_t channels, std::uint64_t seed,
                            const SampleObserver& observer = {});

// Posterior q(x_{t-1} | x_t, x0) coefficients for step index t >= 1.
struct Posterior {
  double coef_x0 = 0.0;
  double coef_xt = 0.0;
  double variance = 0.0;
};
Posterior posterior(const DiffusionSchedule& sched, std::size_t t);

// ---- checkpoint -----------------------------------------------------------

// "MRAGDIFF", u32 version, config, schedule betas, skeleton, normalizer,
// fusion params, denoiser params.
std::vector<char> encode_diffusion(const DiffusionModel& model);
DiffusionModel decode_diffusion(std::vector<char> bytes, const std::string& source);
void save_diffusion(const std::filesystem::path& path, const DiffusionModel& model);
DiffusionModel load_diffusion(const std::filesystem::path& path);

}  // namespace motionrag
