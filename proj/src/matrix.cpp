#include "pmlab/matrix.hpp"

#include <cmath>
#include <stdexcept>

namespace pmlab {

Matrix::Matrix(std::size_t rows, std::size_t cols)
    : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

void Matrix::fill(double v) {
  for (auto& x : data_) x = v;
}

bool Matrix::all_finite() const {
  for (double x : data_) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

namespace {

// Four independent accumulators keep the FP adds pipelined; the summation
// order is fixed, so results stay deterministic.
inline double dot_raw(const double* __restrict pa, const double* __restrict pb, std::size_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += pa[i] * pb[i];
    s1 += pa[i + 1] * pb[i + 1];
    s2 += pa[i + 2] * pb[i + 2];
    s3 += pa[i + 3] * pb[i + 3];
  }
  for (; i < n; ++i) s0 += pa[i] * pb[i];
  return (s0 + s1) + (s2 + s3);
}

}  // namespace

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("dot: length mismatch");
  return dot_raw(a.data(), b.data(), a.size());
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: dimension mismatch");
  Matrix c(a.rows(), b.cols());
  const std::size_t bc = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* __restrict ci = c.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const double* __restrict bk = b.row(k);
      for (std::size_t j = 0; j < bc; ++j) ci[j] += aik * bk[j];
    }
  }
  return c;
}

Matrix matmul_abt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) throw std::invalid_argument("matmul_abt: dimension mismatch");
  Matrix c(a.rows(), b.rows());
  const std::size_t n = a.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* ai = a.row(i);
    double* __restrict ci = c.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      ci[j] = dot_raw(ai, b.row(j), n);
    }
  }
  return c;
}

Matrix matmul_atb(const Matrix& a, const Matrix& b) {
  Matrix c(a.cols(), b.cols());
  matmul_atb_acc(a, b, c);
  return c;
}

void matmul_atb_acc(const Matrix& a, const Matrix& b, Matrix& c) {
  if (a.rows() != b.rows()) throw std::invalid_argument("matmul_atb_acc: dimension mismatch");
  if (c.rows() != a.cols() || c.cols() != b.cols()) {
    throw std::invalid_argument("matmul_atb_acc: output shape mismatch");
  }
  const std::size_t bc = b.cols();
  for (std::size_t k = 0; k < a.rows(); ++k) {
    const double* __restrict ak = a.row(k);
    const double* __restrict bk = b.row(k);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = ak[i];
      if (aki == 0.0) continue;
      double* __restrict ci = c.row(i);
      for (std::size_t j = 0; j < bc; ++j) ci[j] += aki * bk[j];
    }
  }
}

Vector matvec(const Matrix& m, const Vector& x) {
  if (m.cols() != x.size()) throw std::invalid_argument("matvec: dimension mismatch");
  Vector y(m.rows(), 0.0);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    y[r] = dot_raw(m.row(r), x.data(), m.cols());
  }
  return y;
}

Vector matvec_transposed(const Matrix& m, const Vector& x) {
  if (m.rows() != x.size()) throw std::invalid_argument("matvec_transposed: dimension mismatch");
  Vector y(m.cols(), 0.0);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const double* mr = m.row(r);
    const double xr = x[r];
    for (std::size_t c = 0; c < m.cols(); ++c) y[c] += mr[c] * xr;
  }
  return y;
}

void add_outer(Matrix& m, const Vector& a, const Vector& b) {
  add_outer_scaled(m, a, b, 1.0);
}

void add_outer_scaled(Matrix& m, const Vector& a, const Vector& b, double scale) {
  if (m.rows() != a.size() || m.cols() != b.size()) {
    throw std::invalid_argument("add_outer: dimension mismatch");
  }
  for (std::size_t r = 0; r < m.rows(); ++r) {
    double* mr = m.row(r);
    const double ar = a[r] * scale;
    for (std::size_t c = 0; c < m.cols(); ++c) mr[c] += ar * b[c];
  }
}

void axpy(Vector& y, double alpha, const Vector& x) {
  if (y.size() != x.size()) throw std::invalid_argument("axpy: length mismatch");
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += alpha * x[i];
}

bool all_finite(const Vector& v) {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

}  // namespace pmlab
