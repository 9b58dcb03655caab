#include "motionrag/contrastive.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "motionrag/binary_io.hpp"
#include "motionrag/error.hpp"

namespace motionrag {

namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using RowMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using RowMapMut = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

constexpr std::string_view kModelMagic = "MRAGCTRS";
constexpr std::uint32_t kModelVersion = 1;
constexpr double kInitialTau = 0.07;

struct Layout {
  std::size_t w1, b1, w2, b2;
};

Layout layout(const HeadShape& s) {
  Layout l;
  l.w1 = 0;
  l.b1 = l.w1 + s.hidden * s.input;
  l.w2 = l.b1 + s.hidden;
  l.b2 = l.w2 + s.latent * s.hidden;
  return l;
}

Eigen::Index idx(std::size_t v) { return static_cast<Eigen::Index>(v); }

// Row-wise log-softmax evaluated at the diagonal, plus the softmax itself.
double row_term(const MatrixXd& z, MatrixXd& softmax) {
  const Eigen::Index n = z.rows();
  softmax.resize(n, n);
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double m = z.row(i).maxCoeff();
    const Eigen::RowVectorXd e = (z.row(i).array() - m).exp();
    const double sum = e.sum();
    total += -(z(i, i) - m) + std::log(sum);
    softmax.row(i) = e / sum;
  }
  return total / static_cast<double>(n);
}

const ProjectionHead& head_for(const ContrastiveModel& model, Side side) {
  return side == Side::music ? model.music_head : model.motion_head;
}

MatrixXd normalize_rows(const MatrixXd& z, VectorXd* norms) {
  MatrixXd out(z.rows(), z.cols());
  if (norms) norms->resize(z.rows());
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const double n = z.row(i).norm();
    if (!(n >= 1e-12)) fail(ErrorCode::numeric, "degenerate norm: embedding row " + std::to_string(i));
    out.row(i) = z.row(i) / n;
    if (norms) (*norms)[i] = n;
  }
  return out;
}

// Backprop through row normalization e = z / |z|.
MatrixXd normalize_rows_backward(const MatrixXd& e, const VectorXd& norms, const MatrixXd& de) {
  MatrixXd dz(e.rows(), e.cols());
  for (Eigen::Index i = 0; i < e.rows(); ++i) {
    dz.row(i) = (de.row(i) - e.row(i) * e.row(i).dot(de.row(i))) / norms[i];
  }
  return dz;
}

void put_vector(ByteWriter& w, const VectorXd& v) {
  for (Eigen::Index i = 0; i < v.size(); ++i) w.put<double>(v[i]);
}

VectorXd get_vector(ByteReader& r, std::size_t n) {
  VectorXd v(idx(n));
  for (std::size_t i = 0; i < n; ++i) v[idx(i)] = r.get<double>();
  return v;
}

}  // namespace

ProjectionHead::ProjectionHead(HeadShape shape, VectorXd params)
    : shape_(shape),
      params_(std::move(params)),
      shift_(VectorXd::Zero(idx(shape.input))),
      scale_(VectorXd::Ones(idx(shape.input))) {
  if (static_cast<std::size_t>(params_.size()) != shape_.parameter_count()) {
    fail(ErrorCode::invariant, "projection head parameter count mismatch");
  }
}

ProjectionHead ProjectionHead::random(const HeadShape& shape, Rng& rng) {
  VectorXd p = VectorXd::Zero(idx(shape.parameter_count()));
  const Layout l = layout(shape);
  const double s1 = 1.0 / std::sqrt(static_cast<double>(shape.input));
  const double s2 = 1.0 / std::sqrt(static_cast<double>(shape.hidden));
  for (std::size_t i = 0; i < shape.hidden * shape.input; ++i) p[idx(l.w1 + i)] = s1 * rng.normal();
  for (std::size_t i = 0; i < shape.latent * shape.hidden; ++i) p[idx(l.w2 + i)] = s2 * rng.normal();
  return ProjectionHead(shape, std::move(p));
}

ProjectionHead ProjectionHead::identity(std::size_t dim) {
  const HeadShape shape{dim, dim, dim};
  VectorXd p = VectorXd::Zero(idx(shape.parameter_count()));
  const Layout l = layout(shape);
  for (std::size_t i = 0; i < dim; ++i) {
    p[idx(l.w1 + i * dim + i)] = 1.0;
    p[idx(l.w2 + i * dim + i)] = 1.0;
  }
  return ProjectionHead(shape, std::move(p));
}

void ProjectionHead::set_standardization(VectorXd shift, VectorXd scale) {
  if (static_cast<std::size_t>(shift.size()) != shape_.input ||
      static_cast<std::size_t>(scale.size()) != shape_.input) {
    fail(ErrorCode::invariant, "standardization size mismatch");
  }
  shift_ = std::move(shift);
  scale_ = std::move(scale);
}

MatrixXd ProjectionHead::forward(const MatrixXd& x) const {
  Cache cache;
  return forward(x, cache);
}

MatrixXd ProjectionHead::forward(const MatrixXd& x, Cache& cache) const {
  if (static_cast<std::size_t>(x.cols()) != shape_.input) {
    fail(ErrorCode::invariant, "feature dim " + std::to_string(x.cols()) +
                                   " does not match head input " + std::to_string(shape_.input));
  }
  const Layout l = layout(shape_);
  const RowMap w1(params_.data() + l.w1, idx(shape_.hidden), idx(shape_.input));
  const RowMap w2(params_.data() + l.w2, idx(shape_.latent), idx(shape_.hidden));
  const auto b1 = params_.segment(idx(l.b1), idx(shape_.hidden));
  const auto b2 = params_.segment(idx(l.b2), idx(shape_.latent));
  cache.input = (x.rowwise() - shift_.transpose()).array().rowwise() / scale_.transpose().array();
  cache.hidden = ((cache.input * w1.transpose()).rowwise() + b1.transpose()).array().tanh();
  return (cache.hidden * w2.transpose()).rowwise() + b2.transpose();
}

VectorXd ProjectionHead::backward(const Cache& cache, const MatrixXd& grad_out) const {
  const Layout l = layout(shape_);
  const RowMap w2(params_.data() + l.w2, idx(shape_.latent), idx(shape_.hidden));
  VectorXd g = VectorXd::Zero(params_.size());
  RowMapMut(g.data() + l.w2, idx(shape_.latent), idx(shape_.hidden)) = grad_out.transpose() * cache.hidden;
  g.segment(idx(l.b2), idx(shape_.latent)) = grad_out.colwise().sum().transpose();
  const MatrixXd d_hidden = grad_out * w2;
  const MatrixXd d_pre = d_hidden.array() * (1.0 - cache.hidden.array().square());
  RowMapMut(g.data() + l.w1, idx(shape_.hidden), idx(shape_.input)) = d_pre.transpose() * cache.input;
  g.segment(idx(l.b1), idx(shape_.hidden)) = d_pre.colwise().sum().transpose();
  return g;
}

bool operator==(const ProjectionHead& a, const ProjectionHead& b) {
  const auto same = [](const VectorXd& x, const VectorXd& y) {
    return x.size() == y.size() && (x.array() == y.array()).all();
  };
  return a.shape_ == b.shape_ && same(a.params_, b.params_) && same(a.shift_, b.shift_) &&
         same(a.scale_, b.scale_);
}

double ContrastiveModel::tau() const { return std::exp(log_tau); }

void ContrastiveModel::clamp_tau() {
  log_tau = std::clamp(log_tau, std::log(kMinTau), std::log(kMaxTau));
}

void ContrastiveModel::validate() const {
  if (music_head.shape().latent != motion_head.shape().latent) {
    fail(ErrorCode::invariant, "music and motion heads disagree on latent dimension");
  }
  if (!music_head.parameters().allFinite() || !motion_head.parameters().allFinite() ||
      !std::isfinite(log_tau)) {
    fail(ErrorCode::numeric, "contrastive model has non-finite parameters");
  }
}

MatrixXd embed(const ContrastiveModel& model, const MatrixXd& feats, Side side) {
  return normalize_rows(head_for(model, side).forward(feats), nullptr);
}

MatrixXd similarity_matrix(const MatrixXd& music_emb, const MatrixXd& motion_emb) {
  if (music_emb.rows() != motion_emb.rows() || music_emb.cols() != motion_emb.cols()) {
    fail(ErrorCode::invariant, "similarity_matrix: shape mismatch");
  }
  return music_emb * motion_emb.transpose();
}

InfoNceGradient info_nce_gradient(const MatrixXd& s, double tau, bool symmetric) {
  if (s.rows() != s.cols() || s.rows() == 0) fail(ErrorCode::invariant, "InfoNCE needs a square similarity matrix");
  if (!(tau > 0.0)) fail(ErrorCode::invariant, "temperature must be positive");
  const double n = static_cast<double>(s.rows());
  const MatrixXd z = s / tau;
  const MatrixXd eye = MatrixXd::Identity(s.rows(), s.cols());

  InfoNceGradient out;
  MatrixXd p_row;
  const double row = row_term(z, p_row);
  MatrixXd dz = (p_row - eye) / n;
  if (symmetric) {
    MatrixXd p_col_t;
    const double col = row_term(z.transpose(), p_col_t);
    out.loss = 0.5 * (row + col);
    dz = 0.5 * (dz + (p_col_t - eye).transpose() / n);
  } else {
    out.loss = row;
  }
  out.d_similarity = dz / tau;
  out.d_log_tau = -(dz.array() * z.array()).sum();
  return out;
}

double info_nce_loss(const MatrixXd& s, double tau, bool symmetric) {
  if (s.rows() != s.cols() || s.rows() == 0) fail(ErrorCode::invariant, "InfoNCE needs a square similarity matrix");
  if (!(tau > 0.0)) fail(ErrorCode::invariant, "temperature must be positive");
  MatrixXd scratch;
  const MatrixXd z = s / tau;
  const double row = row_term(z, scratch);
  if (!symmetric) return row;
  return 0.5 * (row + row_term(z.transpose(), scratch));
}

ModelGradient model_gradient(const ContrastiveModel& model, const MatrixXd& music,
                             const MatrixXd& motion, bool symmetric) {
  ProjectionHead::Cache mc, dc;
  VectorXd m_norm, d_norm;
  const MatrixXd em = normalize_rows(model.music_head.forward(music, mc), &m_norm);
  const MatrixXd ed = normalize_rows(model.motion_head.forward(motion, dc), &d_norm);
  const MatrixXd s = similarity_matrix(em, ed);
  const InfoNceGradient g = info_nce_gradient(s, model.tau(), symmetric);

  ModelGradient out;
  out.loss = g.loss;
  out.log_tau = g.d_log_tau;
  const MatrixXd d_em = g.d_similarity * ed;
  const MatrixXd d_ed = g.d_similarity.transpose() * em;
  out.music = model.music_head.backward(mc, normalize_rows_backward(em, m_norm, d_em));
  out.motion = model.motion_head.backward(dc, normalize_rows_backward(ed, d_norm, d_ed));
  return out;
}

void TrainConfig::validate() const {
  if (batch_size < 2) fail(ErrorCode::usage, "batch size must be at least 2");
  if (!(learning_rate > 0.0)) fail(ErrorCode::usage, "learning rate must be positive");
  if (hidden == 0 || latent == 0) fail(ErrorCode::usage, "head dimensions must be positive");
  if (weight_decay < 0.0) fail(ErrorCode::usage, "weight decay must be non-negative");
}

ContrastiveModel init_model(std::size_t music_dim, std::size_t motion_dim, const TrainConfig& cfg) {
  Rng rng(derive_seed(cfg.seed, 0xC0));
  ContrastiveModel model;
  model.music_head = ProjectionHead::random({music_dim, cfg.hidden, cfg.latent}, rng);
  model.motion_head = ProjectionHead::random({motion_dim, cfg.hidden, cfg.latent}, rng);
  model.log_tau = std::log(kInitialTau);
  return model;
}

namespace {

void standardize_from(ProjectionHead& head, const MatrixXd& x) {
  const VectorXd mean = x.colwise().mean().transpose();
  VectorXd sd(x.cols());
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    const double var = (x.col(c).array() - mean[c]).square().sum() / static_cast<double>(x.rows());
    sd[c] = var > 1e-12 ? std::sqrt(var) : 1.0;
  }
  head.set_standardization(mean, sd);
}

MatrixXd gather_rows(const MatrixXd& m, std::span<const std::size_t> rows) {
  MatrixXd out(idx(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(idx(i)) = m.row(idx(rows[i]));
  return out;
}

class Optimizer {
 public:
  Optimizer(const TrainConfig& cfg, Eigen::Index n) : cfg_(cfg), m_(VectorXd::Zero(n)), v_(VectorXd::Zero(n)) {}

  void step(VectorXd& params, const VectorXd& grad, bool decay) {
    if (cfg_.optimizer == OptimizerKind::sgd) {
      params -= cfg_.learning_rate * grad;
      return;
    }
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    ++t_;
    m_ = b1 * m_ + (1 - b1) * grad;
    v_ = b2 * v_ + (1 - b2) * grad.cwiseAbs2();
    const double c1 = 1 - std::pow(b1, t_), c2 = 1 - std::pow(b2, t_);
    if (decay) params *= 1.0 - cfg_.learning_rate * cfg_.weight_decay;
    params.array() -= cfg_.learning_rate * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps);
  }

 private:
  const TrainConfig& cfg_;
  VectorXd m_, v_;
  int t_ = 0;
};

}  // namespace

TrainResult train_pairs(const MatrixXd& music, const MatrixXd& motion, const TrainConfig& cfg) {
  cfg.validate();
  if (music.rows() != motion.rows()) fail(ErrorCode::invariant, "music/motion pair counts differ");
  if (music.rows() < 2) fail(ErrorCode::invariant, "InfoNCE needs at least 2 pairs");

  TrainResult result;
  ContrastiveModel& model = result.model;
  model = init_model(static_cast<std::size_t>(music.cols()), static_cast<std::size_t>(motion.cols()), cfg);
  standardize_from(model.music_head, music);
  standardize_from(model.motion_head, motion);

  const auto full_loss = [&] {
    return info_nce_loss(similarity_matrix(embed(model, music, Side::music), embed(model, motion, Side::motion)),
                         model.tau(), cfg.symmetric_loss);
  };
  result.loss_history.push_back(full_loss());

  Rng rng(derive_seed(cfg.seed, 0xC1));
  std::vector<std::size_t> order(static_cast<std::size_t>(music.rows()));
  std::iota(order.begin(), order.end(), std::size_t{0});
  Optimizer opt_music(cfg, model.music_head.parameters().size());
  Optimizer opt_motion(cfg, model.motion_head.parameters().size());
  Optimizer opt_tau(cfg, 1);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      if (end - start < 2) continue;
      const std::span<const std::size_t> rows(order.data() + start, end - start);
      const ModelGradient g =
          model_gradient(model, gather_rows(music, rows), gather_rows(motion, rows), cfg.symmetric_loss);
      if (!std::isfinite(g.loss)) fail(ErrorCode::numeric, "contrastive loss became non-finite");
      opt_music.step(model.music_head.parameters(), g.music, true);
      opt_motion.step(model.motion_head.parameters(), g.motion, true);
      VectorXd tau(1);
      tau[0] = model.log_tau;
      opt_tau.step(tau, VectorXd::Constant(1, g.log_tau), false);
      model.log_tau = tau[0];
      model.clamp_tau();
    }
    result.loss_history.push_back(full_loss());
  }
  model.validate();
  return result;
}

PairTable corpus_pairs(const Corpus& corpus) {
  PairTable t;
  const auto n = idx(corpus.total_segments());
  t.music.resize(n, idx(corpus.music_dim));
  t.motion.resize(n, idx(corpus.motion_dim));
  Eigen::Index row = 0;
  for (const MotionClip& c : corpus.clips) {
    const FeatureMatrix& m = corpus.music_feats.at(c.id);
    const FeatureMatrix& d = corpus.motion_feats.at(c.id);
    for (Eigen::Index r = 0; r < m.rows(); ++r, ++row) {
      t.music.row(row) = m.row(r).cast<double>();
      t.motion.row(row) = d.row(r).cast<double>();
    }
  }
  return t;
}

TrainResult train(const Corpus& corpus, const TrainConfig& cfg) {
  const PairTable pairs = corpus_pairs(corpus);
  return train_pairs(pairs.music, pairs.motion, cfg);
}

std::vector<ScoredIndex> rank_scores(const VectorXd& scores, std::size_t k) {
  const auto n = static_cast<std::size_t>(scores.size());
  if (k == 0 || k > n) fail(ErrorCode::usage, "k must lie in [1, candidate count]");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (scores[idx(a)] != scores[idx(b)]) return scores[idx(a)] > scores[idx(b)];
                      return a < b;
                    });
  std::vector<ScoredIndex> out(k);
  for (std::size_t i = 0; i < k; ++i) out[i] = {order[i], scores[idx(order[i])]};
  return out;
}

std::vector<ScoredIndex> top_k(const ContrastiveModel& model, const VectorXd& music_feat,
                               const MatrixXd& candidate_motion_feats, std::size_t k) {
  const MatrixXd query = embed(model, music_feat.transpose(), Side::music);
  const MatrixXd cands = embed(model, candidate_motion_feats, Side::motion);
  const VectorXd scores = cands * query.row(0).transpose();
  return rank_scores(scores, k);
}

double top1_accuracy(const ContrastiveModel& model, const MatrixXd& music, const MatrixXd& motion) {
  const MatrixXd s = similarity_matrix(embed(model, music, Side::music), embed(model, motion, Side::motion));
  std::size_t hits = 0;
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    if (rank_scores(s.row(i).transpose(), 1)[0].index == static_cast<std::size_t>(i)) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(s.rows());
}

std::vector<char> encode_model(const ContrastiveModel& model) {
  ByteWriter w;
  w.put_bytes(kModelMagic);
  w.put<std::uint32_t>(kModelVersion);
  for (const ProjectionHead* h : {&model.music_head, &model.motion_head}) {
    w.put<std::uint64_t>(h->shape().input);
    w.put<std::uint64_t>(h->shape().hidden);
    w.put<std::uint64_t>(h->shape().latent);
    put_vector(w, h->input_shift());
    put_vector(w, h->input_scale());
    put_vector(w, h->parameters());
  }
  w.put<double>(model.log_tau);
  return w.bytes();
}

ContrastiveModel decode_model(std::vector<char> bytes, const std::string& source) {
  ByteReader r(std::move(bytes), source);
  r.expect_magic(kModelMagic);
  if (r.get<std::uint32_t>() != kModelVersion) fail(ErrorCode::data, source + ": unsupported model version");
  ContrastiveModel model;
  for (ProjectionHead* h : {&model.music_head, &model.motion_head}) {
    HeadShape s;
    s.input = r.get<std::uint64_t>();
    s.hidden = r.get<std::uint64_t>();
    s.latent = r.get<std::uint64_t>();
    if (s.input == 0 || s.hidden == 0 || s.latent == 0 || s.parameter_count() > (1u << 28)) {
      fail(ErrorCode::data, source + ": implausible head shape");
    }
    VectorXd shift = get_vector(r, s.input);
    VectorXd scale = get_vector(r, s.input);
    *h = ProjectionHead(s, get_vector(r, s.parameter_count()));
    h->set_standardization(std::move(shift), std::move(scale));
  }
  model.log_tau = r.get<double>();
  r.expect_end();
  model.validate();
  return model;
}

void save_model(const std::filesystem::path& path, const ContrastiveModel& model) {
  write_file_atomic(path, encode_model(model));
}

ContrastiveModel load_model(const std::filesystem::path& path) {
  return decode_model(read_file(path), path.string());
}

}  // namespace motionrag
