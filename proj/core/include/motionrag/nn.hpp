#pragma once

#include <Eigen/Core>

#include <cstddef>

#include "motionrag/rng.hpp"

namespace motionrag::nn {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// A rows x cols block inside a flat parameter vector, stored row-major.
struct Slot {
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::size_t size() const { return rows * cols; }
};

class ParamLayout {
 public:
  Slot add(std::size_t rows, std::size_t cols);
  std::size_t size() const { return size_; }

 private:
  std::size_t size_ = 0;
};

Eigen::Map<const RowMatrix> view(const Vector& flat, const Slot& s);
Eigen::Map<RowMatrix> view(Vector& flat, const Slot& s);

// y = x W + b, with W in x out and b a 1 x out row.
struct Linear {
  Slot weight;
  Slot bias;
  std::size_t in = 0;
  std::size_t out = 0;

  static Linear create(ParamLayout& layout, std::size_t in, std::size_t out);
  // Gaussian weights with standard deviation gain / sqrt(in); zero bias.
  void init(Vector& params, Rng& rng, double gain = 1.0) const;

  Matrix forward(const Vector& params, const Matrix& x) const;
  // Accumulates parameter gradients into `grad` and returns dL/dx.
  Matrix backward(const Vector& params, const Matrix& x, const Matrix& dy, Vector& grad) const;
  // Same, when dL/dx is not needed.
  void backward_params(const Matrix& x, const Matrix& dy, Vector& grad) const;
};

// softmax(Q K^T / sqrt(d)) V over rows of Q.
struct AttendCache {
  Matrix probs;
};
Matrix attend(const Matrix& q, const Matrix& k, const Matrix& v, AttendCache* cache);
void attend_backward(const Matrix& q, const Matrix& k, const Matrix& v, const AttendCache& cache,
                     const Matrix& d_out, Matrix& dq, Matrix& dk, Matrix& dv);

// Single-head attention with output projection: queries from x, keys and
// values from y.
struct Attention {
  Linear q, k, v, o;

  static Attention create(ParamLayout& layout, std::size_t query_dim, std::size_t kv_dim,
                          std::size_t dim);
  void init(Vector& params, Rng& rng, double out_gain) const;

  struct Cache {
    Matrix x, y, qm, km, vm, attended;
    AttendCache attn;
  };
  Matrix forward(const Vector& params, const Matrix& x, const Matrix& y, Cache& cache) const;
  void backward(const Vector& params, const Cache& cache, const Matrix& d_out, Vector& grad,
                Matrix& dx, Matrix& dy) const;
};

// Two-layer tanh perceptron.
struct Mlp {
  Linear first, second;

  static Mlp create(ParamLayout& layout, std::size_t dim, std::size_t hidden, std::size_t out);
  void init(Vector& params, Rng& rng, double out_gain) const;

  struct Cache {
    Matrix x, hidden;
  };
  Matrix forward(const Vector& params, const Matrix& x, Cache& cache) const;
  Matrix backward(const Vector& params, const Cache& cache, const Matrix& d_out, Vector& grad) const;
};

// Sinusoidal code of a scalar position: [sin(p w_0), cos(p w_0), ...].
Eigen::RowVectorXd sinusoid(double position, std::size_t dim);

class Adam {
 public:
  Adam() = default;
  Adam(std::size_t n, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void step(Vector& params, const Vector& grad);
  std::size_t steps() const { return t_; }

 private:
  Vector m_, v_;
  double lr_ = 1e-3, b1_ = 0.9, b2_ = 0.999, eps_ = 1e-8;
  std::size_t t_ = 0;
};

}  // namespace motionrag::nn
