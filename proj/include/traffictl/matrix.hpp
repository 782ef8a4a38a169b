#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <string>
#include <vector>

#include "traffictl/errors.hpp"

namespace traffictl {

/// Dense real matrix, row-major, float64 throughout.
class Matrix {
public:
    Matrix() = default;
    Matrix(int rows, int cols, double fill = 0.0)
        : rows_(rows), cols_(cols), values_(static_cast<size_t>(rows) * cols, fill) {
        if (rows < 0 || cols < 0) throw ShapeError("Matrix: negative dimensions");
    }
    Matrix(std::initializer_list<std::initializer_list<double>> rows) {
        rows_ = static_cast<int>(rows.size());
        cols_ = rows_ > 0 ? static_cast<int>(rows.begin()->size()) : 0;
        values_.reserve(static_cast<size_t>(rows_) * cols_);
        for (const auto& r : rows) {
            if (static_cast<int>(r.size()) != cols_)
                throw ShapeError("Matrix: ragged initializer rows");
            values_.insert(values_.end(), r.begin(), r.end());
        }
    }

    static Matrix identity(int n) {
        Matrix m(n, n);
        for (int i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    size_t size() const { return values_.size(); }
    bool empty() const { return values_.empty(); }

    double& operator()(int i, int j) { return values_[static_cast<size_t>(i) * cols_ + j]; }
    double operator()(int i, int j) const { return values_[static_cast<size_t>(i) * cols_ + j]; }

    double* data() { return values_.data(); }
    const double* data() const { return values_.data(); }
    std::vector<double>& values() { return values_; }
    const std::vector<double>& values() const { return values_; }

    bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

    std::string shape_str() const {
        return std::to_string(rows_) + "x" + std::to_string(cols_);
    }

    bool all_finite() const {
        for (double v : values_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    bool operator==(const Matrix& o) const {
        return rows_ == o.rows_ && cols_ == o.cols_ && values_ == o.values_;
    }

private:
    int rows_ = 0;
    int cols_ = 0;
    std::vector<double> values_;
};

inline void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " +
                         b.shape_str());
}

/// C = A * B. Throws ShapeError naming both shapes on inner-dimension mismatch.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows())
        throw ShapeError("matmul: shape mismatch " + a.shape_str() + " * " + b.shape_str());
    Matrix c(a.rows(), b.cols());
    const int n = a.rows(), k = a.cols(), m = b.cols();
    const double* pa = a.data();
    const double* pb = b.data();
    double* pc = c.data();
    // i-k-j order keeps the inner loop contiguous in both B and C.
    for (int i = 0; i < n; ++i) {
        const double* arow = pa + static_cast<size_t>(i) * k;
        double* crow = pc + static_cast<size_t>(i) * m;
        for (int kk = 0; kk < k; ++kk) {
            const double av = arow[kk];
            if (av == 0.0) continue;
            const double* brow = pb + static_cast<size_t>(kk) * m;
            for (int j = 0; j < m; ++j) crow[j] += av * brow[j];
        }
    }
    return c;
}

inline Matrix transpose(const Matrix& a) {
    Matrix t(a.cols(), a.rows());
    for (int i = 0; i < a.rows(); ++i)
        for (int j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
    return t;
}

inline Matrix add(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "add");
    Matrix c = a;
    for (size_t i = 0; i < c.size(); ++i) c.values()[i] += b.values()[i];
    return c;
}

inline Matrix sub(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "sub");
    Matrix c = a;
    for (size_t i = 0; i < c.size(); ++i) c.values()[i] -= b.values()[i];
    return c;
}

inline Matrix hadamard(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "hadamard");
    Matrix c = a;
    for (size_t i = 0; i < c.size(); ++i) c.values()[i] *= b.values()[i];
    return c;
}

inline Matrix scale(const Matrix& a, double s) {
    Matrix c = a;
    for (double& v : c.values()) v *= s;
    return c;
}

template <typename F>
inline Matrix map(const Matrix& a, F f) {
    Matrix c = a;
    for (double& v : c.values()) v = f(v);
    return c;
}

/// Numerically stable logistic; never overflows, output strictly in (0,1).
inline double sigmoid_scalar(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline Matrix sigmoid(const Matrix& a) {
    return map(a, [](double v) { return sigmoid_scalar(v); });
}

inline Matrix tanh_m(const Matrix& a) {
    return map(a, [](double v) { return std::tanh(v); });
}

inline Matrix relu(const Matrix& a) {
    return map(a, [](double v) { return v > 0.0 ? v : 0.0; });
}

/// Per-row softmax with max subtraction; each output row sums to 1.
inline Matrix softmax_rows(const Matrix& a) {
    Matrix c(a.rows(), a.cols());
    for (int i = 0; i < a.rows(); ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < a.cols(); ++j) mx = std::max(mx, a(i, j));
        double sum = 0.0;
        for (int j = 0; j < a.cols(); ++j) {
            const double e = std::exp(a(i, j) - mx);
            c(i, j) = e;
            sum += e;
        }
        for (int j = 0; j < a.cols(); ++j) c(i, j) /= sum;
    }
    return c;
}

inline double sum(const Matrix& a) {
    double s = 0.0;
    for (double v : a.values()) s += v;
    return s;
}

inline double mean(const Matrix& a) {
    if (a.empty()) throw ContractError("mean: empty matrix");
    return sum(a) / static_cast<double>(a.size());
}

inline Matrix row_sums(const Matrix& a) {
    Matrix c(a.rows(), 1);
    for (int i = 0; i < a.rows(); ++i) {
        double s = 0.0;
        for (int j = 0; j < a.cols(); ++j) s += a(i, j);
        c(i, 0) = s;
    }
    return c;
}

inline Matrix col_sums(const Matrix& a) {
    Matrix c(1, a.cols());
    for (int i = 0; i < a.rows(); ++i)
        for (int j = 0; j < a.cols(); ++j) c(0, j) += a(i, j);
    return c;
}

inline Matrix concat_cols(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows())
        throw ShapeError("concat_cols: row mismatch " + a.shape_str() + " | " + b.shape_str());
    Matrix c(a.rows(), a.cols() + b.cols());
    for (int i = 0; i < a.rows(); ++i) {
        for (int j = 0; j < a.cols(); ++j) c(i, j) = a(i, j);
        for (int j = 0; j < b.cols(); ++j) c(i, a.cols() + j) = b(i, j);
    }
    return c;
}

inline Matrix slice_cols(const Matrix& a, int begin, int end) {
    if (begin < 0 || end > a.cols() || begin > end)
        throw ContractError("slice_cols: range [" + std::to_string(begin) + "," +
                            std::to_string(end) + ") out of " + a.shape_str());
    Matrix c(a.rows(), end - begin);
    for (int i = 0; i < a.rows(); ++i)
        for (int j = begin; j < end; ++j) c(i, j - begin) = a(i, j);
    return c;
}

inline Matrix slice_rows(const Matrix& a, int begin, int end) {
    if (begin < 0 || end > a.rows() || begin > end)
        throw ContractError("slice_rows: range [" + std::to_string(begin) + "," +
                            std::to_string(end) + ") out of " + a.shape_str());
    Matrix c(end - begin, a.cols());
    for (int i = begin; i < end; ++i)
        for (int j = 0; j < a.cols(); ++j) c(i - begin, j) = a(i, j);
    return c;
}

inline void check_finite(const Matrix& a, const char* where) {
    if (!a.all_finite()) throw TrainingError(std::string(where) + ": non-finite values");
}

}  // namespace traffictl
