#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "motionrag/corpus.hpp"
#include "motionrag/rng.hpp"

namespace motionrag {

struct HeadShape {
  std::size_t input = 0;
  std::size_t hidden = 0;
  std::size_t latent = 0;

  std::size_t parameter_count() const { return hidden * input + hidden + latent * hidden + latent; }
  friend bool operator==(const HeadShape&, const HeadShape&) = default;
};

// input -> standardize -> affine -> tanh -> affine. The standardization
// (shift, scale) is fixed at training start; only the affine maps learn.
class ProjectionHead {
 public:
  struct Cache {
    Eigen::MatrixXd input;   // standardized
    Eigen::MatrixXd hidden;  // post-tanh
  };

  ProjectionHead() = default;
  ProjectionHead(HeadShape shape, Eigen::VectorXd params);

  static ProjectionHead random(const HeadShape& shape, Rng& rng);
  // Square head with identity weight matrices and zero biases.
  static ProjectionHead identity(std::size_t dim);

  const HeadShape& shape() const { return shape_; }
  const Eigen::VectorXd& parameters() const { return params_; }
  Eigen::VectorXd& parameters() { return params_; }

  const Eigen::VectorXd& input_shift() const { return shift_; }
  const Eigen::VectorXd& input_scale() const { return scale_; }
  void set_standardization(Eigen::VectorXd shift, Eigen::VectorXd scale);

  Eigen::MatrixXd forward(const Eigen::MatrixXd& x) const;
  Eigen::MatrixXd forward(const Eigen::MatrixXd& x, Cache& cache) const;
  // Parameter gradient for dL/d(output).
  Eigen::VectorXd backward(const Cache& cache, const Eigen::MatrixXd& grad_out) const;

  friend bool operator==(const ProjectionHead& a, const ProjectionHead& b);

 private:
  HeadShape shape_;
  Eigen::VectorXd params_;
  Eigen::VectorXd shift_;
  Eigen::VectorXd scale_;
};

struct ContrastiveModel {
  ProjectionHead music_head;
  ProjectionHead motion_head;
  double log_tau = 0.0;

  static constexpr double kMinTau = 1e-3;
  static constexpr double kMaxTau = 10.0;

  double tau() const;
  void clamp_tau();
  void validate() const;

  friend bool operator==(const ContrastiveModel& a, const ContrastiveModel& b) {
    return a.log_tau == b.log_tau && a.music_head == b.music_head && a.motion_head == b.motion_head;
  }
};

enum class Side { music, motion };

// Rows of L2-normalized latent embeddings.
Eigen::MatrixXd embed(const ContrastiveModel& model, const Eigen::MatrixXd& feats, Side side);

// S[i][j] = <music_emb[i], motion_emb[j]>; requires equal shapes.
Eigen::MatrixXd similarity_matrix(const Eigen::MatrixXd& music_emb,
                                  const Eigen::MatrixXd& motion_emb);

// Mean over rows of -log softmax(S_i / tau)_i; with `symmetric`, the average
// of the row-wise (music->motion) and column-wise (motion->music) terms.
double info_nce_loss(const Eigen::MatrixXd& s, double tau, bool symmetric);

struct InfoNceGradient {
  double loss = 0.0;
  Eigen::MatrixXd d_similarity;
  double d_log_tau = 0.0;
};

InfoNceGradient info_nce_gradient(const Eigen::MatrixXd& s, double tau, bool symmetric);

struct ModelGradient {
  double loss = 0.0;
  Eigen::VectorXd music;
  Eigen::VectorXd motion;
  double log_tau = 0.0;
};

// Loss over one batch of aligned pairs plus its gradient for every parameter.
ModelGradient model_gradient(const ContrastiveModel& model, const Eigen::MatrixXd& music,
                             const Eigen::MatrixXd& motion, bool symmetric);

enum class OptimizerKind { sgd, adamw };

struct TrainConfig {
  std::size_t epochs = 300;
  std::size_t batch_size = 32;
  double learning_rate = 0.05;
  std::uint64_t seed = 0;
  bool symmetric_loss = true;
  std::size_t hidden = 64;
  std::size_t latent = 32;
  OptimizerKind optimizer = OptimizerKind::sgd;
  double weight_decay = 1e-2;  // AdamW only

  void validate() const;
};

ContrastiveModel init_model(std::size_t music_dim, std::size_t motion_dim, const TrainConfig& cfg);

struct TrainResult {
  ContrastiveModel model;
  std::vector<double> loss_history;  // full-data loss before training, then after each epoch
};

TrainResult train_pairs(const Eigen::MatrixXd& music, const Eigen::MatrixXd& motion,
                        const TrainConfig& cfg);
TrainResult train(const Corpus& corpus, const TrainConfig& cfg);

// Every (music, motion) segment pair of the corpus, clip order then segment order.
struct PairTable {
  Eigen::MatrixXd music;
  Eigen::MatrixXd motion;
};
PairTable corpus_pairs(const Corpus& corpus);

struct ScoredIndex {
  std::size_t index = 0;
  double score = 0.0;
};

// Candidates ranked by cosine similarity in the shared space, descending;
// ties go to the smaller index.
std::vector<ScoredIndex> top_k(const ContrastiveModel& model, const Eigen::VectorXd& music_feat,
                               const Eigen::MatrixXd& candidate_motion_feats, std::size_t k);

std::vector<ScoredIndex> rank_scores(const Eigen::VectorXd& scores, std::size_t k);

// Fraction of rows whose own pair ranks first among all motion rows.
double top1_accuracy(const ContrastiveModel& model, const Eigen::MatrixXd& music,
                     const Eigen::MatrixXd& motion);

// "MRAGCTRS", u32 version, per head {u64 input, hidden, latent, f64 shift[],
// f64 scale[], f64 params[]}, f64 log_tau.
std::vector<char> encode_model(const ContrastiveModel& model);
ContrastiveModel decode_model(std::vector<char> bytes, const std::string& source);
void save_model(const std::filesystem::path& path, const ContrastiveModel& model);
ContrastiveModel load_model(const std::filesystem::path& path);

}  // namespace motionrag
