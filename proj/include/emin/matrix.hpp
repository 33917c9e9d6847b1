#pragma once

#include <cassert>
#include <cmath>
#include <cstddef>
#include <vector>

namespace emin {

// Dense row-major matrix of doubles. Sized for desk-scale models; all the
// heavy lifting happens in the three matmul variants below.
struct Mat {
  int rows = 0;
  int cols = 0;
  std::vector<double> a;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), a(static_cast<std::size_t>(r) * c, 0.0) {}

  double& operator()(int r, int c) { return a[static_cast<std::size_t>(r) * cols + c]; }
  double operator()(int r, int c) const { return a[static_cast<std::size_t>(r) * cols + c]; }
  double* row(int r) { return a.data() + static_cast<std::size_t>(r) * cols; }
  const double* row(int r) const { return a.data() + static_cast<std::size_t>(r) * cols; }
  void zero() { std::fill(a.begin(), a.end(), 0.0); }
};

// Non-owning views over flat parameter storage. Shaped like Mat so the
// templated kernels below work on both.
struct MatView {
  double* p = nullptr;
  int rows = 0;
  int cols = 0;
  double& operator()(int r, int c) const { return p[static_cast<std::size_t>(r) * cols + c]; }
  double* row(int r) const { return p + static_cast<std::size_t>(r) * cols; }
};

struct VecView {
  double* p = nullptr;
  int n = 0;
  double& operator[](int i) const { return p[i]; }
};

// C = A * B, A: (r x k), B: (k x c).
template <class MA, class MB>
Mat matmul(const MA& A, const MB& B) {
  assert(A.cols == B.rows);
  Mat C(A.rows, B.cols);
  for (int i = 0; i < A.rows; ++i) {
    double* crow = C.row(i);
    for (int k = 0; k < A.cols; ++k) {
      const double aik = A(i, k);
      if (aik == 0.0) continue;
      const double* brow = B.row(k);
      for (int j = 0; j < B.cols; ++j) crow[j] += aik * brow[j];
    }
  }
  return C;
}

// C = A * B^T, A: (r x k), B: (c x k).
template <class MA, class MB>
Mat matmul_nt(const MA& A, const MB& B) {
  assert(A.cols == B.cols);
  Mat C(A.rows, B.rows);
  for (int i = 0; i < A.rows; ++i) {
    const double* arow = A.row(i);
    for (int j = 0; j < B.rows; ++j) {
      const double* brow = B.row(j);
      double s = 0.0;
      for (int k = 0; k < A.cols; ++k) s += arow[k] * brow[k];
      C(i, j) = s;
    }
  }
  return C;
}

// C += A^T * B into a view or Mat, A: (k x r), B: (k x c). Used for weight
// gradients, hence the accumulate-in-place form.
template <class MC, class MA, class MB>
void add_matmul_tn(MC& C, const MA& A, const MB& B) {
  assert(A.rows == B.rows && C.rows == A.cols && C.cols == B.cols);
  for (int k = 0; k < A.rows; ++k) {
    const double* arow = A.row(k);
    const double* brow = B.row(k);
    for (int i = 0; i < A.cols; ++i) {
      const double aki = arow[i];
      if (aki == 0.0) continue;
      double* crow = C.row(i);
      for (int j = 0; j < B.cols; ++j) crow[j] += aki * brow[j];
    }
  }
}

template <class MB>
void add_inplace(Mat& A, const MB& B) {
  assert(A.rows == B.rows && A.cols == B.cols);
  for (int i = 0; i < A.rows; ++i) {
    double* arow = A.row(i);
    const double* brow = B.row(i);
    for (int j = 0; j < A.cols; ++j) arow[j] += brow[j];
  }
}

template <class MB>
void add_scaled_inplace(Mat& A, const MB& B, double s) {
  assert(A.rows == B.rows && A.cols == B.cols);
  for (int i = 0; i < A.rows; ++i) {
    double* arow = A.row(i);
    const double* brow = B.row(i);
    for (int j = 0; j < A.cols; ++j) arow[j] += s * brow[j];
  }
}

// y = x * W + b, W: (in x out).
template <class MW>
Mat linear(const Mat& x, const MW& W, const VecView& b) {
  Mat y = matmul(x, W);
  for (int i = 0; i < y.rows; ++i) {
    double* yrow = y.row(i);
    for (int j = 0; j < y.cols; ++j) yrow[j] += b[j];
  }
  return y;
}

// Backward of linear: accumulates dW, db and returns dx.
template <class MW>
Mat linear_backward(const Mat& x, const MW& W, const Mat& dy, MatView dW, VecView db) {
  add_matmul_tn(dW, x, dy);
  for (int i = 0; i < dy.rows; ++i) {
    const double* drow = dy.row(i);
    for (int j = 0; j < dy.cols; ++j) db[j] += drow[j];
  }
  return matmul_nt(dy, W);
}

inline void softmax_row_inplace(double* row, int n) {
  double mx = row[0];
  for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
  double sum = 0.0;
  for (int j = 0; j < n; ++j) {
    row[j] = std::exp(row[j] - mx);
    sum += row[j];
  }
  const double inv = 1.0 / sum;
  for (int j = 0; j < n; ++j) row[j] *= inv;
}

}  // namespace emin
