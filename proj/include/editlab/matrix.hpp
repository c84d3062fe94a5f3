#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace editlab {

// Dense row-major matrix. Model weights and activations use Mat<float>;
// every solver path runs in Mat<double>.
template <class T>
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<T> data;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, T{}) {}

    T& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    const T& at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }

    T* row(int r) { return data.data() + static_cast<size_t>(r) * cols; }
    const T* row(int r) const { return data.data() + static_cast<size_t>(r) * cols; }

    size_t size() const { return data.size(); }
    bool empty() const { return data.empty(); }

    static Mat zeros(int r, int c) { return Mat(r, c); }
    static Mat identity(int n) {
        Mat m(n, n);
        for (int i = 0; i < n; ++i) m.at(i, i) = T{1};
        return m;
    }

    bool operator==(const Mat& o) const {
        return rows == o.rows && cols == o.cols && data == o.data;
    }
};

using MatF = Mat<float>;
using MatD = Mat<double>;

MatD to_double(const MatF& a);
MatF to_float(const MatD& a);

// Throws std::invalid_argument if any entry is NaN or Inf.
void require_finite(const MatD& a, const std::string& name);
bool all_finite(const MatD& a);

MatD matmul(const MatD& a, const MatD& b);
MatD transpose(const MatD& a);
MatD add(const MatD& a, const MatD& b);
MatD sub(const MatD& a, const MatD& b);
MatD scale(const MatD& a, double s);
double frobenius_norm(const MatD& a);
double max_abs(const MatD& a);

struct ColumnStats {
    std::vector<double> col_mean;  // per-column mean
    double entry_std = 0.0;        // population std over every entry
};
ColumnStats column_stats(const MatD& a);

struct SpdSolveResult {
    MatD x;
    bool regularized = false;  // true when the ridge fallback was needed
    double ridge = 0.0;
};

// Solves A X = B for symmetric positive (semi)definite A via Cholesky.
// If A is singular to working precision, retries once with
// A + ridge I where ridge = 1e-6 * trace(A) / dim(A), and reports it.
SpdSolveResult solve_spd(const MatD& a, const MatD& b);

// Moore-Penrose pseudoinverse via eigendecomposition of the Gram matrix.
// Singular values below 1e-10 times the largest are treated as zero.
MatD pseudoinverse(const MatD& k);

struct SymEigen {
    std::vector<double> values;  // descending
    MatD vectors;                // column j is the eigenvector for values[j]
};

// Cyclic Jacobi eigendecomposition for symmetric matrices.
SymEigen sym_eigen(const MatD& a);

}  // namespace editlab
