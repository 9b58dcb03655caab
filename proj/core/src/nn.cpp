#include "motionrag/nn.hpp"

#include <cmath>

#include "motionrag/error.hpp"

namespace motionrag::nn {

namespace {

Eigen::Index idx(std::size_t v) { return static_cast<Eigen::Index>(v); }

}  // namespace

Slot ParamLayout::add(std::size_t rows, std::size_t cols) {
  Slot s{size_, rows, cols};
  size_ += rows * cols;
  return s;
}

Eigen::Map<const RowMatrix> view(const Vector& flat, const Slot& s) {
  return {flat.data() + s.offset, idx(s.rows), idx(s.cols)};
}

Eigen::Map<RowMatrix> view(Vector& flat, const Slot& s) {
  return {flat.data() + s.offset, idx(s.rows), idx(s.cols)};
}

Linear Linear::create(ParamLayout& layout, std::size_t in, std::size_t out) {
  Linear l;
  l.in = in;
  l.out = out;
  l.weight = layout.add(in, out);
  l.bias = layout.add(1, out);
  return l;
}

void Linear::init(Vector& params, Rng& rng, double gain) const {
  const double sd = gain / std::sqrt(static_cast<double>(in));
  auto w = view(params, weight);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = sd * rng.normal();
  view(params, bias).setZero();
}

Matrix Linear::forward(const Vector& params, const Matrix& x) const {
  if (static_cast<std::size_t>(x.cols()) != in) {
    fail(ErrorCode::invariant, "linear layer expects " + std::to_string(in) + " inputs, got " +
                                   std::to_string(x.cols()));
  }
  return (x * view(params, weight)).rowwise() + view(params, bias).row(0);
}

void Linear::backward_params(const Matrix& x, const Matrix& dy, Vector& grad) const {
  view(grad, weight).noalias() += x.transpose() * dy;
  view(grad, bias).row(0) += dy.colwise().sum();
}

Matrix Linear::backward(const Vector& params, const Matrix& x, const Matrix& dy, Vector& grad) const {
  backward_params(x, dy, grad);
  return dy * view(params, weight).transpose();
}

Matrix attend(const Matrix& q, const Matrix& k, const Matrix& v, AttendCache* cache) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  Matrix s = (q * k.transpose()) * scale;
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    const double m = s.row(r).maxCoeff();
    s.row(r) = (s.row(r).array() - m).exp();
    s.row(r) /= s.row(r).sum();
  }
  Matrix out = s * v;
  if (cache) cache->probs = std::move(s);
  return out;
}

void attend_backward(const Matrix& q, const Matrix& k, const Matrix& v, const AttendCache& cache,
                     const Matrix& d_out, Matrix& dq, Matrix& dk, Matrix& dv) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  const Matrix& p = cache.probs;
  dv = p.transpose() * d_out;
  const Matrix dp = d_out * v.transpose();
  const Eigen::VectorXd row_dot = (dp.array() * p.array()).rowwise().sum();
  const Matrix ds = (p.array() * (dp.colwise() - row_dot).array()).matrix() * scale;
  dq = ds * k;
  dk = ds.transpose() * q;
}

Attention Attention::create(ParamLayout& layout, std::size_t query_dim, std::size_t kv_dim,
                            std::size_t dim) {
  Attention a;
  a.q = Linear::create(layout, query_dim, dim);
  a.k = Linear::create(layout, kv_dim, dim);
  a.v = Linear::create(layout, kv_dim, dim);
  a.o = Linear::create(layout, dim, query_dim);
  return a;
}

void Attention::init(Vector& params, Rng& rng, double out_gain) const {
  q.init(params, rng);
  k.init(params, rng);
  v.init(params, rng);
  o.init(params, rng, out_gain);
}

Matrix Attention::forward(const Vector& params, const Matrix& x, const Matrix& y, Cache& c) const {
  c.x = x;
  c.y = y;
  c.qm = q.forward(params, x);
  c.km = k.forward(params, y);
  c.vm = v.forward(params, y);
  c.attended = attend(c.qm, c.km, c.vm, &c.attn);
  return o.forward(params, c.attended);
}

void Attention::backward(const Vector& params, const Cache& c, const Matrix& d_out, Vector& grad,
                         Matrix& dx, Matrix& dy) const {
  const Matrix d_att = o.backward(params, c.attended, d_out, grad);
  Matrix dq, dk, dv;
  attend_backward(c.qm, c.km, c.vm, c.attn, d_att, dq, dk, dv);
  dx = q.backward(params, c.x, dq, grad);
  dy = k.backward(params, c.y, dk, grad) + v.backward(params, c.y, dv, grad);
}

Mlp Mlp::create(ParamLayout& layout, std::size_t dim, std::size_t hidden, std::size_t out) {
  return {Linear::create(layout, dim, hidden), Linear::create(layout, hidden, out)};
}

void Mlp::init(Vector& params, Rng& rng, double out_gain) const {
  first.init(params, rng);
  second.init(params, rng, out_gain);
}

Matrix Mlp::forward(const Vector& params, const Matrix& x, Cache& c) const {
  c.x = x;
  c.hidden = first.forward(params, x).array().tanh();
  return second.forward(params, c.hidden);
}

Matrix Mlp::backward(const Vector& params, const Cache& c, const Matrix& d_out, Vector& grad) const {
  const Matrix dh = second.backward(params, c.hidden, d_out, grad);
  const Matrix dpre = dh.array() * (1.0 - c.hidden.array().square());
  return first.backward(params, c.x, dpre, grad);
}

Eigen::RowVectorXd sinusoid(double position, std::size_t dim) {
  Eigen::RowVectorXd out(idx(dim));
  for (std::size_t i = 0; i < dim; ++i) {
    const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(dim));
    out[idx(i)] = (i % 2 == 0) ? std::sin(position * freq) : std::cos(position * freq);
  }
  return out;
}

Adam::Adam(std::size_t n, double lr, double beta1, double beta2, double eps)
    : m_(Vector::Zero(idx(n))), v_(Vector::Zero(idx(n))), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

void Adam::step(Vector& params, const Vector& grad) {
  ++t_;
  m_ = b1_ * m_ + (1.0 - b1_) * grad;
  v_ = b2_ * v_ + (1.0 - b2_) * grad.cwiseAbs2();
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  params.array() -= lr_ * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps_);
}

}  // namespace motionrag::nn
