#include "motionrag/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "motionrag/binary_io.hpp"
#include "motionrag/error.hpp"

namespace motionrag {

namespace {

using nn::Matrix;
using nn::Vector;

constexpr std::string_view kDiffusionMagic = "MRAGDIFF";
constexpr std::uint32_t kDiffusionVersion = 1;
constexpr double kCosineOffset = 0.008;
constexpr double kMaxBeta = 0.999;

Eigen::Index idx(std::size_t v) { return static_cast<Eigen::Index>(v); }

Matrix row_matrix(const Eigen::RowVectorXd& r) { return Matrix(r); }

std::vector<Eigen::Vector4d> frame_quats(const Eigen::MatrixXd& raw, Eigen::Index f, std::size_t joints) {
  std::vector<Eigen::Vector4d> q(joints);
  for (std::size_t j = 0; j < joints; ++j) q[j] = raw.row(f).segment<4>(idx(3 + 4 * j)).transpose();
  return q;
}

void check_finite(double v, const char* name) {
  if (!std::isfinite(v)) fail(ErrorCode::numeric, std::string("training loss component ") + name + " is not finite");
}

void put_vector(ByteWriter& w, const Vector& v) {
  w.put<std::uint64_t>(static_cast<std::uint64_t>(v.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) w.put<double>(v[i]);
}

Vector get_vector(ByteReader& r, std::size_t expected) {
  const auto n = r.get<std::uint64_t>();
  if (n != expected) fail(ErrorCode::data, r.source() + ": parameter block has the wrong size");
  Vector v(idx(n));
  for (std::size_t i = 0; i < n; ++i) v[idx(i)] = r.get<double>();
  return v;
}

}  // namespace

// ---- schedule -------------------------------------------------------------

void DiffusionSchedule::validate() const {
  if (beta.empty()) fail(ErrorCode::usage, "schedule needs T >= 1");
  if (alpha.size() != beta.size() || alpha_bar.size() != beta.size()) {
    fail(ErrorCode::invariant, "schedule tables differ in length");
  }
  for (std::size_t t = 0; t < beta.size(); ++t) {
    if (!(beta[t] > 0.0 && beta[t] < 1.0)) fail(ErrorCode::invariant, "beta outside (0, 1)");
    if (t > 0 && !(alpha_bar[t] < alpha_bar[t - 1])) {
      fail(ErrorCode::invariant, "alpha_bar not strictly decreasing");
    }
  }
}

DiffusionSchedule schedule_from_betas(std::vector<double> betas) {
  DiffusionSchedule s;
  s.kind = ScheduleKind::custom;
  s.beta = std::move(betas);
  double prod = 1.0;
  for (const double b : s.beta) {
    s.alpha.push_back(1.0 - b);
    prod *= 1.0 - b;
    s.alpha_bar.push_back(prod);
  }
  s.validate();
  return s;
}

DiffusionSchedule make_schedule(ScheduleKind kind, std::size_t steps) {
  if (steps == 0) fail(ErrorCode::usage, "schedule needs T >= 1");
  const double t_total = static_cast<double>(steps);
  std::vector<double> betas(steps);
  if (kind == ScheduleKind::linear) {
    const double lo = 0.1 / t_total;
    const double hi = std::min(20.0 / t_total, kMaxBeta);
    for (std::size_t t = 0; t < steps; ++t) {
      betas[t] = steps == 1 ? lo : lo + (hi - lo) * static_cast<double>(t) / (t_total - 1.0);
    }
  } else if (kind == ScheduleKind::cosine) {
    const auto f = [](double u) {
      const double c = std::cos((u + kCosineOffset) / (1.0 + kCosineOffset) * std::numbers::pi / 2.0);
      return c * c;
    };
    double prev = 1.0;
    for (std::size_t t = 0; t < steps; ++t) {
      const double ab = f(static_cast<double>(t + 1) / t_total) / f(0.0);
      betas[t] = std::min(1.0 - ab / prev, kMaxBeta);
      prev = ab;
    }
  } else {
    fail(ErrorCode::usage, "custom schedules are built from explicit betas");
  }
  DiffusionSchedule s = schedule_from_betas(std::move(betas));
  s.kind = kind;
  return s;
}

Eigen::MatrixXd q_sample_at(const Eigen::MatrixXd& x0, double alpha_bar, const Eigen::MatrixXd& eps) {
  if (x0.rows() != eps.rows() || x0.cols() != eps.cols()) fail(ErrorCode::invariant, "q_sample: shape mismatch");
  return std::sqrt(alpha_bar) * x0 + std::sqrt(1.0 - alpha_bar) * eps;
}

Eigen::MatrixXd q_sample(const Eigen::MatrixXd& x0, std::size_t t, const Eigen::MatrixXd& eps,
                         const DiffusionSchedule& sched) {
  if (t >= sched.steps()) fail(ErrorCode::usage, "q_sample: t out of range");
  return q_sample_at(x0, sched.alpha_bar[t], eps);
}

Eigen::MatrixXd q_step(const Eigen::MatrixXd& x_prev, std::size_t t, const Eigen::MatrixXd& eps,
                       const DiffusionSchedule& sched) {
  if (t >= sched.steps()) fail(ErrorCode::usage, "q_step: t out of range");
  return std::sqrt(1.0 - sched.beta[t]) * x_prev + std::sqrt(sched.beta[t]) * eps;
}

Posterior posterior(const DiffusionSchedule& sched, std::size_t t) {
  if (t == 0 || t >= sched.steps()) fail(ErrorCode::usage, "posterior needs 1 <= t < T");
  const double ab = sched.alpha_bar[t];
  const double ab_prev = sched.alpha_bar[t - 1];
  Posterior p;
  p.coef_x0 = std::sqrt(ab_prev) * sched.beta[t] / (1.0 - ab);
  p.coef_xt = std::sqrt(sched.alpha[t]) * (1.0 - ab_prev) / (1.0 - ab);
  p.variance = sched.beta[t] * (1.0 - ab_prev) / (1.0 - ab);
  return p;
}

// ---- representation -------------------------------------------------------

std::size_t motion_channels(std::size_t joints) { return 3 + 4 * joints; }

Eigen::MatrixXd encode_window(const MotionClip& clip) {
  Eigen::MatrixXd raw(idx(clip.frames()), idx(motion_channels(clip.joints)));
  for (std::size_t f = 0; f < clip.frames(); ++f) {
    raw.row(idx(f)).head<3>() = clip.root_pos[f].transpose();
    for (std::size_t j = 0; j < clip.joints; ++j) {
      const Quat q = canonical(clip.rotation(f, j));
      raw.row(idx(f)).segment<4>(idx(3 + 4 * j)) << q.w(), q.x(), q.y(), q.z();
    }
  }
  return raw;
}

MotionClip decode_window(const Eigen::MatrixXd& raw, std::size_t joints, double fps, std::string id) {
  if (static_cast<std::size_t>(raw.cols()) != motion_channels(joints)) {
    fail(ErrorCode::invariant, "window has " + std::to_string(raw.cols()) + " channels, expected " +
                                   std::to_string(motion_channels(joints)));
  }
  MotionClip clip = MotionClip::zeros(std::move(id), fps, static_cast<std::size_t>(raw.rows()), joints);
  for (std::size_t f = 0; f < clip.frames(); ++f) {
    clip.root_pos[f] = raw.row(idx(f)).head<3>().transpose();
    for (std::size_t j = 0; j < joints; ++j) {
      const Eigen::Vector4d v = raw.row(idx(f)).segment<4>(idx(3 + 4 * j)).transpose();
      const double n = v.norm();
      clip.rotation(f, j) = n < 1e-12 ? Quat::Identity() : canonical(Quat(v[0], v[1], v[2], v[3]));
    }
  }
  return clip;
}

Normalizer Normalizer::fit(std::span<const Eigen::MatrixXd> windows) {
  if (windows.empty()) fail(ErrorCode::invariant, "normalizer needs at least one window");
  const Eigen::Index c = windows.front().cols();
  Normalizer n;
  n.mean = Eigen::VectorXd::Zero(c);
  n.stddev = Eigen::VectorXd::Zero(c);
  double count = 0.0;
  for (const auto& w : windows) {
    if (w.cols() != c) fail(ErrorCode::invariant, "windows differ in channel count");
    n.mean += w.colwise().sum().transpose();
    count += static_cast<double>(w.rows());
  }
  n.mean /= count;
  for (const auto& w : windows) {
    n.stddev += (w.rowwise() - n.mean.transpose()).colwise().squaredNorm().transpose();
  }
  n.stddev = (n.stddev / count).cwiseSqrt();
  for (Eigen::Index i = 0; i < c; ++i) {
    if (!(n.stddev[i] >= 1e-6)) n.stddev[i] = 1.0;
  }
  return n;
}

Eigen::MatrixXd Normalizer::apply(const Eigen::MatrixXd& raw) const {
  return (raw.rowwise() - mean.transpose()).array().rowwise() / stddev.transpose().array();
}

Eigen::MatrixXd Normalizer::invert(const Eigen::MatrixXd& normalized) const {
  return (normalized.array().rowwise() * stddev.transpose().array()).matrix().rowwise() + mean.transpose();
}

// ---- contacts -------------------------------------------------------------

Eigen::MatrixXd detect_contacts(const PoseSequence& seq, const Skeleton& skeleton, double fps,
                                double height, double speed) {
  if (skeleton.foot_joints.empty()) fail(ErrorCode::invariant, "skeleton has no foot joints");
  const PoseSequence vel = velocities(seq, fps);
  Eigen::MatrixXd mask = Eigen::MatrixXd::Zero(idx(vel.frames), idx(skeleton.foot_joints.size()));
  for (std::size_t f = 0; f < vel.frames; ++f) {
    for (std::size_t k = 0; k < skeleton.foot_joints.size(); ++k) {
      const auto j = static_cast<std::size_t>(skeleton.foot_joints[k]);
      if (seq.at(f, j).y() < height && vel.at(f, j).norm() < speed) mask(idx(f), idx(k)) = 1.0;
    }
  }
  return mask;
}

// ---- conditions and fusion ------------------------------------------------

void ConditionSet::validate(std::size_t frames, std::size_t channels, std::size_t music_dim,
                            std::size_t latent_dim) const {
  if (music.rows() == 0) fail(ErrorCode::invariant, "condition 'music' missing");
  if (static_cast<std::size_t>(music.cols()) != music_dim) {
    fail(ErrorCode::invariant, "condition 'music' has dimension " + std::to_string(music.cols()) +
                                   ", expected " + std::to_string(music_dim));
  }
  if (beat.size() == 0) fail(ErrorCode::invariant, "condition 'beat' missing");
  if (static_cast<std::size_t>(beat.size()) != frames) {
    fail(ErrorCode::invariant, "condition 'beat' is not aligned to the window frames");
  }
  if (topk.empty()) fail(ErrorCode::invariant, "condition 'topk' missing (k >= 1)");
  for (const auto& m : topk) {
    if (static_cast<std::size_t>(m.rows()) != frames || static_cast<std::size_t>(m.cols()) != channels) {
      fail(ErrorCode::invariant, "condition 'topk' candidate has the wrong shape");
    }
  }
  if (contrastive_emb.size() == 0) fail(ErrorCode::invariant, "condition 'contrastive_emb' missing");
  if (static_cast<std::size_t>(contrastive_emb.size()) != latent_dim) {
    fail(ErrorCode::invariant, "condition 'contrastive_emb' has the wrong dimension");
  }
}

PairMask full_pair_mask() {
  PairMask m{};
  for (std::size_t i = 0; i < kConditionCount; ++i) {
    for (std::size_t j = 0; j < kConditionCount; ++j) m[i][j] = i != j;
  }
  return m;
}

FusionNet::FusionNet(const FusionConfig& cfg) : cfg_(cfg) {
  const std::array<std::size_t, kConditionCount> in{cfg.music_dim, cfg.dim, 2 * cfg.channels,
                                                    cfg.latent_dim};
  for (std::size_t i = 0; i < kConditionCount; ++i) {
    q_[i] = nn::Linear::create(layout_, in[i], cfg.dim);
    k_[i] = nn::Linear::create(layout_, in[i], cfg.dim);
    v_[i] = nn::Linear::create(layout_, in[i], cfg.dim);
  }
}

void FusionNet::init(Vector& params, Rng& rng) const {
  params = Vector::Zero(idx(parameter_count()));
  for (std::size_t i = 0; i < kConditionCount; ++i) {
    q_[i].init(params, rng);
    k_[i].init(params, rng);
    v_[i].init(params, rng);
  }
}

std::array<Matrix, kConditionCount> FusionNet::tokenize(const ConditionSet& c) const {
  std::array<Matrix, kConditionCount> t;
  if (c.music.rows() == 0 || c.beat.size() == 0 || c.topk.empty() || c.contrastive_emb.size() == 0) {
    fail(ErrorCode::invariant, "fusion needs all four conditions");
  }
  t[kMusic] = c.music;
  t[kBeat] = Matrix::Zero(c.beat.size(), idx(cfg_.dim));
  for (Eigen::Index f = 0; f < c.beat.size(); ++f) {
    if (c.beat[f] != 0.0) t[kBeat].row(f) = c.beat[f] * nn::sinusoid(static_cast<double>(f), cfg_.dim);
  }
  t[kTopK] = Matrix(idx(c.topk.size()), idx(2 * cfg_.channels));
  for (std::size_t i = 0; i < c.topk.size(); ++i) {
    const Matrix& m = c.topk[i];
    const Eigen::RowVectorXd mean = m.colwise().mean();
    const Eigen::RowVectorXd sd =
        ((m.rowwise() - mean).colwise().squaredNorm() / static_cast<double>(m.rows())).cwiseSqrt();
    t[kTopK].row(idx(i)) << mean, sd;
  }
  t[kEmbedding] = c.contrastive_emb.transpose();
  return t;
}

Matrix FusionNet::forward(const Vector& params, const ConditionSet& c, const PairMask& mask,
                          Cache& cache) const {
  cache.tokens = tokenize(c);
  for (std::size_t i = 0; i < kConditionCount; ++i) {
    cache.q[i] = q_[i].forward(params, cache.tokens[i]);
    cache.k[i] = k_[i].forward(params, cache.tokens[i]);
    cache.v[i] = v_[i].forward(params, cache.tokens[i]);
  }
  Matrix fused = Matrix::Zero(kConditionCount, idx(cfg_.dim));
  for (std::size_t i = 0; i < kConditionCount; ++i) {
    auto& sources = cache.sources[i];
    sources.clear();
    Eigen::Index rows = 0;
    for (std::size_t j = 0; j < kConditionCount; ++j) {
      if (j != i && mask[i][j]) {
        sources.push_back(j);
        rows += cache.k[j].rows();
      }
    }
    if (sources.empty()) continue;
    cache.keys[i].resize(rows, idx(cfg_.dim));
    cache.values[i].resize(rows, idx(cfg_.dim));
    Eigen::Index at = 0;
    for (const std::size_t j : sources) {
      cache.keys[i].middleRows(at, cache.k[j].rows()) = cache.k[j];
      cache.values[i].middleRows(at, cache.v[j].rows()) = cache.v[j];
      at += cache.k[j].rows();
    }
    const Matrix o = nn::attend(cache.q[i], cache.keys[i], cache.values[i], &cache.attn[i]);
    fused.row(idx(i)) = o.colwise().mean();
  }
  return fused;
}

Matrix FusionNet::forward(const Vector& params, const ConditionSet& c, const PairMask& mask) const {
  Cache cache;
  return forward(params, c, mask, cache);
}

void FusionNet::backward(const Vector& params, const Cache& cache, const Matrix& d_fused,
                         Vector& grad) const {
  (void)params;
  std::array<Matrix, kConditionCount> dq, dk, dv;
  for (std::size_t i = 0; i < kConditionCount; ++i) {
    dq[i] = Matrix::Zero(cache.q[i].rows(), cache.q[i].cols());
    dk[i] = Matrix::Zero(cache.k[i].rows(), cache.k[i].cols());
    dv[i] = Matrix::Zero(cache.v[i].rows(), cache.v[i].cols());
  }
  for (std::size_t i = 0; i < kConditionCount; ++i) {
    if (cache.sources[i].empty()) continue;
    const Eigen::Index n = cache.q[i].rows();
    const Matrix d_out = d_fused.row(idx(i)).replicate(n, 1) / static_cast<double>(n);
    Matrix dqi, dkeys, dvalues;
    nn::attend_backward(cache.q[i], cache.keys[i], cache.values[i], cache.attn[i], d_out, dqi, dkeys,
                        dvalues);
    dq[i] += dqi;
    Eigen::Index at = 0;
    for (const std::size_t j : cache.sources[i]) {
      const Eigen::Index r = cache.k[j].rows();
      dk[j] += dkeys.middleRows(at, r);
      dv[j] += dvalues.middleRows(at, r);
      at += r;
    }
  }
  for (std::size_t i = 0; i < kConditionCount; ++i) {
    q_[i].backward_params(cache.tokens[i], dq[i], grad);
    k_[i].backward_params(cache.tokens[i], dk[i], grad);
    v_[i].backward_params(cache.tokens[i], dv[i], grad);
  }
}

// ---- denoiser -------------------------------------------------------------

Denoiser::Denoiser(const DenoiserConfig& cfg) : cfg_(cfg) {
  if (cfg.frames < 1 || cfg.channels < 1 || cfg.hidden < 2 || cfg.blocks < 1 || cfg.mlp_hidden < 1) {
    fail(ErrorCode::usage, "denoiser dimensions must be positive");
  }
  in_ = nn::Linear::create(layout_, cfg.channels, cfg.hidden);
  time_ = nn::Linear::create(layout_, cfg.hidden, cfg.hidden);
  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    self_.push_back(nn::Attention::create(layout_, cfg.hidden, cfg.hidden, cfg.hidden));
    cross_.push_back(nn::Attention::create(layout_, cfg.hidden, cfg.hidden, cfg.hidden));
    mlp_.push_back(nn::Mlp::create(layout_, cfg.hidden, cfg.mlp_hidden, cfg.hidden));
  }
  out_ = nn::Linear::create(layout_, cfg.hidden, cfg.channels);
  frame_code_.resize(idx(cfg.frames), idx(cfg.hidden));
  for (std::size_t f = 0; f < cfg.frames; ++f) {
    frame_code_.row(idx(f)) = nn::sinusoid(static_cast<double>(f), cfg.hidden);
  }
}

void Denoiser::init(Vector& params, Rng& rng) const {
  params = Vector::Zero(idx(parameter_count()));
  in_.init(params, rng);
  time_.init(params, rng);
  for (std::size_t b = 0; b < cfg_.blocks; ++b) {
    self_[b].init(params, rng, 0.5);
    cross_[b].init(params, rng, 0.5);
    mlp_[b].init(params, rng, 0.5);
  }
  out_.init(params, rng, 0.1);
}

Matrix Denoiser::forward(const Vector& params, const Matrix& x_t, std::size_t t, const Matrix& fused,
                         Cache& c) const {
  if (static_cast<std::size_t>(x_t.rows()) != cfg_.frames ||
      static_cast<std::size_t>(x_t.cols()) != cfg_.channels) {
    fail(ErrorCode::invariant, "denoiser input must be " + std::to_string(cfg_.frames) + " x " +
                                   std::to_string(cfg_.channels));
  }
  c.x = x_t;
  c.time_code = nn::sinusoid(static_cast<double>(t), cfg_.hidden);
  c.time_emb = time_.forward(params, row_matrix(c.time_code)).array().tanh();
  Matrix h = in_.forward(params, x_t) + frame_code_;
  h.rowwise() += c.time_emb;
  c.blocks.resize(cfg_.blocks);
  for (std::size_t b = 0; b < cfg_.blocks; ++b) {
    BlockCache& bc = c.blocks[b];
    h += self_[b].forward(params, h, h, bc.self);
    h += cross_[b].forward(params, h, fused, bc.cross);
    h += mlp_[b].forward(params, h, bc.mlp);
  }
  c.last = h;
  return out_.forward(params, h);
}

Matrix Denoiser::forward(const Vector& params, const Matrix& x_t, std::size_t t, const Matrix& fused) const {
  Cache c;
  return forward(params, x_t, t, fused, c);
}

Matrix Denoiser::backward(const Vector& params, const Cache& c, const Matrix& d_out, Vector& grad) const {
  Matrix dh = out_.backward(params, c.last, d_out, grad);
  Matrix d_fused = Matrix::Zero(c.blocks.front().cross.y.rows(), c.blocks.front().cross.y.cols());
  for (std::size_t b = cfg_.blocks; b-- > 0;) {
    const BlockCache& bc = c.blocks[b];
    dh += mlp_[b].backward(params, bc.mlp, dh, grad);
    Matrix dx, dy;
    cross_[b].backward(params, bc.cross, dh, grad, dx, dy);
    dh += dx;
    d_fused += dy;
    self_[b].backward(params, bc.self, dh, grad, dx, dy);
    dh += dx + dy;
  }
  in_.backward_params(c.x, dh, grad);
  const Eigen::RowVectorXd d_emb = dh.colwise().sum();
  const Eigen::RowVectorXd d_pre = d_emb.array() * (1.0 - c.time_emb.array().square());
  time_.backward_params(row_matrix(c.time_code), row_matrix(d_pre), grad);
  return d_fused;
}

// ---- model ----------------------------------------------------------------

DiffusionModel DiffusionModel::create(const DiffusionConfig& cfg, const Skeleton& skeleton,
                                      std::size_t music_dim, std::size_t latent_dim,
                                      Normalizer normalizer, std::uint64_t seed) {
  skeleton.validate();
  if (cfg.top_k < 1) fail(ErrorCode::usage, "top-k must be >= 1");
  DiffusionModel m;
  m.config = cfg;
  m.skeleton = skeleton;
  m.music_dim = music_dim;
  m.latent_dim = latent_dim;
  m.schedule = make_schedule(cfg.schedule, cfg.steps);
  const std::size_t channels = motion_channels(skeleton.joint_count());
  if (static_cast<std::size_t>(normalizer.mean.size()) != channels ||
      static_cast<std::size_t>(normalizer.stddev.size()) != channels) {
    fail(ErrorCode::invariant, "normalizer does not match the skeleton's channel count");
  }
  m.normalizer = std::move(normalizer);
  m.fusion = FusionNet(FusionConfig{music_dim, latent_dim, channels, cfg.hidden});
  m.denoiser = Denoiser(DenoiserConfig{cfg.frames, channels, cfg.hidden, cfg.blocks, cfg.mlp_hidden});
  Rng rng(derive_seed(seed, 0xD0));
  m.fusion.init(m.fusion_params, rng);
  m.denoiser.init(m.denoiser_params, rng);
  return m;
}

Eigen::MatrixXd DiffusionModel::predict(const Eigen::MatrixXd& x_t, std::size_t t, const ConditionSet& c) const {
  c.validate(config.frames, channels(), music_dim, latent_dim);
  return denoiser.forward(denoiser_params, x_t, t, fusion.forward(fusion_params, c));
}

// ---- losses ---------------------------------------------------------------

void LossWeights::validate() const {
  for (const double v : {pos, vel, contact}) {
    if (!std::isfinite(v) || v < 0.0) fail(ErrorCode::usage, "loss weights must be finite and >= 0");
  }
}

TrainingExample make_example(Eigen::MatrixXd x0, ConditionSet conditions, const Normalizer& norm,
                             const Skeleton& skeleton, double fps, const ContactConfig& contact) {
  TrainingExample ex;
  const std::size_t joints = skeleton.joint_count();
  const Eigen::MatrixXd raw = norm.invert(x0);
  PoseSequence pose;
  pose.frames = static_cast<std::size_t>(raw.rows());
  pose.joints = joints;
  pose.joint_pos.resize(pose.frames * joints);
  for (Eigen::Index f = 0; f < raw.rows(); ++f) {
    const auto q = frame_quats(raw, f, joints);
    forward_kinematics_raw(skeleton, raw.row(f).head<3>().transpose(), q,
                           std::span<Vec3>(pose.joint_pos.data() + static_cast<std::size_t>(f) * joints, joints));
  }
  ex.contacts = pose.frames >= 2 ? detect_contacts(pose, skeleton, fps, contact.height, contact.speed)
                                 : Eigen::MatrixXd(0, idx(skeleton.foot_joints.size()));
  ex.positions = std::move(pose.joint_pos);
  ex.x0 = std::move(x0);
  ex.conditions = std::move(conditions);
  return ex;
}

LossComponents prediction_loss(const TrainingExample& ex, const Eigen::MatrixXd& prediction,
                               const Normalizer& norm, const Skeleton& skeleton, const LossWeights& w,
                               Eigen::MatrixXd* d_prediction) {
  const Eigen::Index frames = ex.x0.rows();
  const std::size_t joints = skeleton.joint_count();
  if (prediction.rows() != frames || prediction.cols() != ex.x0.cols()) {
    fail(ErrorCode::invariant, "prediction shape differs from the target window");
  }
  const double nf = static_cast<double>(frames);
  const double nv = static_cast<double>(frames - 1);
  LossComponents l;

  const Eigen::MatrixXd diff = prediction - ex.x0;
  l.simple = diff.squaredNorm() / nf;
  Eigen::MatrixXd d_vel;
  if (frames >= 2) {
    const Eigen::MatrixXd r = diff.bottomRows(frames - 1) - diff.topRows(frames - 1);
    l.vel = r.squaredNorm() / nv;
    if (d_prediction) {
      d_vel = Eigen::MatrixXd::Zero(frames, diff.cols());
      d_vel.bottomRows(frames - 1) += 2.0 * r / nv;
      d_vel.topRows(frames - 1) -= 2.0 * r / nv;
    }
  }

  const Eigen::MatrixXd raw = norm.invert(prediction);
  Eigen::MatrixXd d_raw;
  if (d_prediction) d_raw = Eigen::MatrixXd::Zero(frames, raw.cols());
  std::vector<Vec3> pos(joints), grad(joints);
  for (Eigen::Index f = 0; f < frames; ++f) {
    const auto q = frame_quats(raw, f, joints);
    const Vec3 root = raw.row(f).head<3>().transpose();
    forward_kinematics_raw(skeleton, root, q, pos);
    const Vec3* truth = ex.positions.data() + static_cast<std::size_t>(f) * joints;
    bool any = false;
    for (std::size_t j = 0; j < joints; ++j) {
      const Vec3 e = pos[j] - truth[j];
      l.pos += e.squaredNorm() / nf;
      grad[j] = w.pos * 2.0 * e / nf;
      any = any || w.pos != 0.0;
    }
    if (f < frames - 1) {
      for (std::size_t k = 0; k < skeleton.foot_joints.size(); ++k) {
        const double m = ex.contacts(f, idx(k));
        if (m == 0.0) continue;
        const auto j = static_cast<std::size_t>(skeleton.foot_joints[k]);
        const Vec3 e = m * (pos[j] - truth[j]);
        l.contact += e.squaredNorm() / nv;
        grad[j] += w.contact * 2.0 * m * e / nv;
        any = any || w.contact != 0.0;
      }
    }
    if (d_prediction && any) {
      const FkFrameGradient g = forward_kinematics_vjp(skeleton, root, q, grad);
      d_raw.row(f).head<3>() += g.root.transpose();
      for (std::size_t j = 0; j < joints; ++j) d_raw.row(f).segment<4>(idx(3 + 4 * j)) += g.rotation[j].transpose();
    }
  }
  l.total = l.simple + w.pos * l.pos + w.vel * l.vel + w.contact * l.contact;
  check_finite(l.simple, "L_simple");
  check_finite(l.pos, "L_pos");
  check_finite(l.vel, "L_vel");
  check_finite(l.contact, "L_contact");

  if (d_prediction) {
    *d_prediction = 2.0 * diff / nf + (d_raw.array().rowwise() * norm.stddev.transpose().array()).matrix();
    if (frames >= 2) *d_prediction += w.vel * d_vel;
  }
  return l;
}

LossGradient training_loss(const DiffusionModel& model, std::span<const TrainingExample* const> batch,
                           std::span<const NoiseDraw> noise, const LossWeights& w, bool with_gradient) {
  if (batch.empty()) fail(ErrorCode::invariant, "training batch is empty");
  if (noise.size() != batch.size()) fail(ErrorCode::invariant, "one noise draw per batch item is required");
  w.validate();
  LossGradient out;
  if (with_gradient) {
    out.fusion = Vector::Zero(model.fusion_params.size());
    out.denoiser = Vector::Zero(model.denoiser_params.size());
  }
  const double scale = 1.0 / static_cast<double>(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const TrainingExample& ex = *batch[i];
    ex.conditions.validate(model.config.frames, model.channels(), model.music_dim, model.latent_dim);
    FusionNet::Cache fc;
    Denoiser::Cache dc;
    const Matrix fused = model.fusion.forward(model.fusion_params, ex.conditions, full_pair_mask(), fc);
    const Matrix x_t = q_sample(ex.x0, noise[i].t, noise[i].eps, model.schedule);
    const Matrix pred = model.denoiser.forward(model.denoiser_params, x_t, noise[i].t, fused, dc);
    Matrix d_pred;
    const LossComponents l = prediction_loss(ex, pred, model.normalizer, model.skeleton, w,
                                             with_gradient ? &d_pred : nullptr);
    out.loss.simple += scale * l.simple;
    out.loss.pos += scale * l.pos;
    out.loss.vel += scale * l.vel;
    out.loss.contact += scale * l.contact;
    out.loss.total += scale * l.total;
    if (with_gradient) {
      d_pred *= scale;
      const Matrix d_fused = model.denoiser.backward(model.denoiser_params, dc, d_pred, out.denoiser);
      model.fusion.backward(model.fusion_params, fc, d_fused, out.fusion);
    }
  }
  return out;
}

// ---- training and sampling ------------------------------------------------

void DiffusionTrainConfig::validate() const {
  if (batch_size < 1) fail(ErrorCode::usage, "batch size must be >= 1");
  if (!(learning_rate > 0.0)) fail(ErrorCode::usage, "learning rate must be positive");
  if (!(ema_decay >= 0.0 && ema_decay < 1.0)) fail(ErrorCode::usage, "EMA decay must lie in [0, 1)");
  weights.validate();
}

DiffusionTrainResult train_diffusion(DiffusionModel& model, std::span<const TrainingExample> data,
                                     const DiffusionTrainConfig& cfg) {
  cfg.validate();
  if (data.empty()) fail(ErrorCode::invariant, "diffusion training set is empty");
  const std::size_t frames = model.config.frames;
  const std::size_t channels = model.channels();

  Rng rng(derive_seed(cfg.seed, 0xD1));
  nn::Adam opt_fusion(static_cast<std::size_t>(model.fusion_params.size()), cfg.learning_rate);
  nn::Adam opt_denoiser(static_cast<std::size_t>(model.denoiser_params.size()), cfg.learning_rate);
  Vector ema_fusion = model.fusion_params;
  Vector ema_denoiser = model.denoiser_params;

  DiffusionTrainResult result;
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(std::span<std::size_t>(order));
    LossComponents sum;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<const TrainingExample*> batch;
      std::vector<NoiseDraw> noise;
      for (std::size_t i = start; i < end; ++i) {
        batch.push_back(&data[order[i]]);
        NoiseDraw d;
        d.t = rng.below(model.schedule.steps());
        d.eps.resize(idx(frames), idx(channels));
        for (Eigen::Index k = 0; k < d.eps.size(); ++k) d.eps.data()[k] = rng.normal();
        noise.push_back(std::move(d));
      }
      const LossGradient g = training_loss(model, batch, noise, cfg.weights, true);
      opt_fusion.step(model.fusion_params, g.fusion);
      opt_denoiser.step(model.denoiser_params, g.denoiser);
      ++result.optimizer_steps;
      if (cfg.ema) {
        const double step = static_cast<double>(result.optimizer_steps);
        const double decay = std::min(cfg.ema_decay, (1.0 + step) / (10.0 + step));
        ema_fusion = decay * ema_fusion + (1.0 - decay) * model.fusion_params;
        ema_denoiser = decay * ema_denoiser + (1.0 - decay) * model.denoiser_params;
      }
      sum.simple += g.loss.simple;
      sum.pos += g.loss.pos;
      sum.vel += g.loss.vel;
      sum.contact += g.loss.contact;
      sum.total += g.loss.total;
      ++batches;
    }
    const double n = static_cast<double>(batches);
    result.epoch_losses.push_back({sum.simple / n, sum.pos / n, sum.vel / n, sum.contact / n, sum.total / n});
  }
  if (cfg.ema && result.optimizer_steps > 0) {
    model.fusion_params = std::move(ema_fusion);
    model.denoiser_params = std::move(ema_denoiser);
  }
  return result;
}

Eigen::MatrixXd sample_with(const Predictor& predict, const DiffusionSchedule& sched, std::size_t frames,
                            std::size_t channels, std::uint64_t seed, const SampleObserver& observer) {
  sched.validate();
  Rng rng(seed);
  Eigen::MatrixXd x(idx(frames), idx(channels));
  for (Eigen::Index k = 0; k < x.size(); ++k) x.data()[k] = rng.normal();
  for (std::size_t t = sched.steps(); t-- > 0;) {
    Eigen::MatrixXd x0_hat = predict(x, t);
    if (observer) observer(t, x, x0_hat);
    if (t == 0) return x0_hat;
    const Posterior p = posterior(sched, t);
    const double sd = std::sqrt(p.variance);
    Eigen::MatrixXd next = p.coef_x0 * x0_hat + p.coef_xt * x;
    for (Eigen::Index k = 0; k < next.size(); ++k) next.data()[k] += sd * rng.normal();
    x = std::move(next);
  }
  return x;  // unreachable: the loop returns at t = 0
}

Eigen::MatrixXd sample(const DiffusionModel& model, const ConditionSet& c, std::uint64_t seed,
                       const SampleObserver& observer) {
  c.validate(model.config.frames, model.channels(), model.music_dim, model.latent_dim);
  const Matrix fused = model.fusion.forward(model.fusion_params, c);
  const Predictor predict = [&](const Eigen::MatrixXd& x_t, std::size_t t) {
    return model.denoiser.forward(model.denoiser_params, x_t, t, fused);
  };
  return sample_with(predict, model.schedule, model.config.frames, model.channels(), seed, observer);
}

// ---- checkpoint -----------------------------------------------------------

std::vector<char> encode_diffusion(const DiffusionModel& m) {
  ByteWriter w;
  w.put_bytes(kDiffusionMagic);
  w.put<std::uint32_t>(kDiffusionVersion);
  const DiffusionConfig& c = m.config;
  for (const std::size_t v : {c.frames, c.hidden, c.blocks, c.mlp_hidden, c.steps, c.top_k, m.music_dim, m.latent_dim}) {
    w.put<std::uint64_t>(v);
  }
  w.put<std::uint8_t>(static_cast<std::uint8_t>(m.schedule.kind));
  for (const double b : m.schedule.beta) w.put<double>(b);

  const Skeleton& s = m.skeleton;
  w.put<std::uint32_t>(static_cast<std::uint32_t>(s.joint_count()));
  for (std::size_t j = 0; j < s.joint_count(); ++j) {
    w.put_string(s.joint_names[j]);
    w.put<std::int32_t>(s.parent[j]);
    for (int k = 0; k < 3; ++k) w.put<double>(s.offset[j][k]);
  }
  w.put<std::uint32_t>(static_cast<std::uint32_t>(s.foot_joints.size()));
  for (const int f : s.foot_joints) w.put<std::int32_t>(f);

  put_vector(w, m.normalizer.mean);
  put_vector(w, m.normalizer.stddev);
  put_vector(w, m.fusion_params);
  put_vector(w, m.denoiser_params);
  return w.bytes();
}

DiffusionModel decode_diffusion(std::vector<char> bytes, const std::string& source) {
  ByteReader r(std::move(bytes), source);
  r.expect_magic(kDiffusionMagic);
  if (r.get<std::uint32_t>() != kDiffusionVersion) fail(ErrorCode::data, source + ": unsupported diffusion version");
  DiffusionConfig c;
  std::array<std::size_t, 8> v{};
  for (auto& x : v) {
    x = r.get<std::uint64_t>();
    if (x > (1u << 24)) fail(ErrorCode::data, source + ": implausible model dimension");
  }
  c.frames = v[0];
  c.hidden = v[1];
  c.blocks = v[2];
  c.mlp_hidden = v[3];
  c.steps = v[4];
  c.top_k = v[5];
  const auto kind = r.get<std::uint8_t>();
  if (kind > static_cast<std::uint8_t>(ScheduleKind::custom)) fail(ErrorCode::data, source + ": unknown schedule kind");
  std::vector<double> betas(c.steps);
  for (double& b : betas) b = r.get<double>();

  Skeleton s;
  const auto joints = r.get<std::uint32_t>();
  if (joints == 0 || joints > 4096) fail(ErrorCode::data, source + ": implausible joint count");
  for (std::uint32_t j = 0; j < joints; ++j) {
    s.joint_names.push_back(r.get_string());
    s.parent.push_back(r.get<std::int32_t>());
    Vec3 o;
    for (int k = 0; k < 3; ++k) o[k] = r.get<double>();
    s.offset.push_back(o);
  }
  const auto feet = r.get<std::uint32_t>();
  if (feet > joints) fail(ErrorCode::data, source + ": implausible foot count");
  for (std::uint32_t k = 0; k < feet; ++k) s.foot_joints.push_back(r.get<std::int32_t>());
  try {
    s.validate();
  } catch (const Error& e) {
    fail(ErrorCode::data, source + ": " + e.what());
  }

  const std::size_t channels = motion_channels(s.joint_count());
  Normalizer norm;
  norm.mean = get_vector(r, channels);
  norm.stddev = get_vector(r, channels);
  c.schedule = static_cast<ScheduleKind>(kind);
  DiffusionModel m;
  m.config = c;
  m.skeleton = std::move(s);
  m.music_dim = v[6];
  m.latent_dim = v[7];
  m.schedule = schedule_from_betas(std::move(betas));
  m.schedule.kind = c.schedule;
  m.normalizer = std::move(norm);
  m.fusion = FusionNet(FusionConfig{m.music_dim, m.latent_dim, channels, c.hidden});
  m.denoiser = Denoiser(DenoiserConfig{c.frames, channels, c.hidden, c.blocks, c.mlp_hidden});
  m.fusion_params = get_vector(r, m.fusion.parameter_count());
  m.denoiser_params = get_vector(r, m.denoiser.parameter_count());
  r.expect_end();
  if (!m.fusion_params.allFinite() || !m.denoiser_params.allFinite()) {
    fail(ErrorCode::numeric, source + ": non-finite parameters");
  }
  return m;
}

void save_diffusion(const std::filesystem::path& path, const DiffusionModel& model) {
  write_file_atomic(path, encode_diffusion(model));
}

DiffusionModel load_diffusion(const std::filesystem::path& path) {
  return decode_diffusion(read_file(path), path.string());
}

}  // namespace motionrag
