#pragma once

#include <algorithm>
#include <cassert>
#include <concepts>
#include <cstddef>
#include <span>
#include <vector>

namespace mlongt5 {

/// Row-major dense matrix with value semantics.
template <std::floating_point T>
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T(0)) : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    assert(data_.size() == rows_ * cols_);
  }

  static Matrix from_rows(std::initializer_list<std::initializer_list<T>> rows) {
    Matrix m(rows.size(), rows.size() ? rows.begin()->size() : 0);
    std::size_t r = 0;
    for (const auto& row : rows) {
      std::copy(row.begin(), row.end(), m.row(r++).begin());
    }
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  T operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> flat() { return data_; }
  std::span<const T> flat() const { return data_; }

  Matrix& operator+=(const Matrix& o) {
    assert(o.rows_ == rows_ && o.cols_ == cols_);
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

/// Non-owning row-major view, used for parameter tensors that live inside a
/// flat store.
template <class T>
struct MatrixRef {
  T* data = nullptr;
  std::size_t rows = 0;
  std::size_t cols = 0;

  T& operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<T> row(std::size_t r) const { return {data + r * cols, cols}; }
};

template <class T>
MatrixRef<const T> ref(const Matrix<T>& m) {
  return {m.data(), m.rows(), m.cols()};
}

// out = a * b    (n x k) * (k x m)
template <class T>
Matrix<T> matmul(MatrixRef<const T> a, MatrixRef<const T> b) {
  assert(a.cols == b.rows);
  Matrix<T> out(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    T* o = out.data() + i * b.cols;
    for (std::size_t k = 0; k < a.cols; ++k) {
      const T av = a(i, k);
      if (av == T(0)) continue;
      const T* br = b.data + k * b.cols;
      for (std::size_t j = 0; j < b.cols; ++j) o[j] += av * br[j];
    }
  }
  return out;
}

// out += a^T * b    (n x k)^T * (n x m) -> k x m
template <class T>
void add_matmul_tn(MatrixRef<T> out, MatrixRef<const T> a, MatrixRef<const T> b) {
  assert(a.rows == b.rows && out.rows == a.cols && out.cols == b.cols);
  for (std::size_t r = 0; r < a.rows; ++r) {
    const T* ar = a.data + r * a.cols;
    const T* br = b.data + r * b.cols;
    for (std::size_t i = 0; i < a.cols; ++i) {
      const T av = ar[i];
      if (av == T(0)) continue;
      T* o = out.data + i * out.cols;
      for (std::size_t j = 0; j < b.cols; ++j) o[j] += av * br[j];
    }
  }
}

// out = a * b^T    (n x m) * (k x m)^T -> n x k
template <class T>
Matrix<T> matmul_nt(MatrixRef<const T> a, MatrixRef<const T> b) {
  assert(a.cols == b.cols);
  Matrix<T> out(a.rows, b.rows);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const T* ar = a.data + i * a.cols;
    for (std::size_t j = 0; j < b.rows; ++j) {
      const T* br = b.data + j * b.cols;
      T acc = T(0);
      for (std::size_t k = 0; k < a.cols; ++k) acc += ar[k] * br[k];
      out(i, j) = acc;
    }
  }
  return out;
}

template <class T>
Matrix<T> matmul(const Matrix<T>& a, MatrixRef<const T> b) {
  return matmul(ref(a), b);
}

}  // namespace mlongt5
