#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace pmlab {

using Vector = std::vector<double>;

// Dense row-major matrix of 64-bit floats. Dimensions are explicit and
// mismatches are hard errors; there is no broadcasting.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  double* row(std::size_t r) { return data_.data() + r * cols_; }
  const double* row(std::size_t r) const { return data_.data() + r * cols_; }
  std::span<const double> row_span(std::size_t r) const { return {row(r), cols_}; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  void fill(double v);
  bool all_finite() const;

  bool operator==(const Matrix& other) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

double dot(std::span<const double> a, std::span<const double> b);

Matrix matmul(const Matrix& a, const Matrix& b);      // a (m x k) * b (k x n)
Matrix matmul_abt(const Matrix& a, const Matrix& b);  // a (m x k) * b^T, b (n x k)
Matrix matmul_atb(const Matrix& a, const Matrix& b);  // a^T * b, a (k x m), b (k x n)
void matmul_atb_acc(const Matrix& a, const Matrix& b, Matrix& c);  // c += a^T b

// y = M x, with M (r x c) and x of length c.
Vector matvec(const Matrix& m, const Vector& x);
// y = M^T x, with M (r x c) and x of length r.
Vector matvec_transposed(const Matrix& m, const Vector& x);
// m += a b^T (a of length rows, b of length cols).
void add_outer(Matrix& m, const Vector& a, const Vector& b);
// m += scale * (a b^T)
void add_outer_scaled(Matrix& m, const Vector& a, const Vector& b, double scale);

void axpy(Vector& y, double alpha, const Vector& x);  // y += alpha * x

bool all_finite(const Vector& v);

}  // namespace pmlab
