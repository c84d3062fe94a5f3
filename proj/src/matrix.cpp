#include "editlab/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace editlab {

namespace {

void check_dims(bool ok, const std::string& what) {
    if (!ok) throw std::invalid_argument("dimension mismatch: " + what);
}

}  // namespace

MatD to_double(const MatF& a) {
    MatD out(a.rows, a.cols);
    for (size_t i = 0; i < a.data.size(); ++i) out.data[i] = a.data[i];
    return out;
}

MatF to_float(const MatD& a) {
    MatF out(a.rows, a.cols);
    for (size_t i = 0; i < a.data.size(); ++i) out.data[i] = static_cast<float>(a.data[i]);
    return out;
}

bool all_finite(const MatD& a) {
    for (double v : a.data)
        if (!std::isfinite(v)) return false;
    return true;
}

void require_finite(const MatD& a, const std::string& name) {
    if (!all_finite(a)) throw std::invalid_argument(name + " contains non-finite entries");
}

MatD matmul(const MatD& a, const MatD& b) {
    check_dims(a.cols == b.rows, "matmul " + std::to_string(a.rows) + "x" + std::to_string(a.cols) +
                                     " * " + std::to_string(b.rows) + "x" + std::to_string(b.cols));
    MatD c(a.rows, b.cols);
    for (int i = 0; i < a.rows; ++i) {
        const double* arow = a.row(i);
        double* crow = c.row(i);
        for (int k = 0; k < a.cols; ++k) {
            const double av = arow[k];
            const double* brow = b.row(k);
            for (int j = 0; j < b.cols; ++j) crow[j] += av * brow[j];
        }
    }
    return c;
}

MatD transpose(const MatD& a) {
    MatD t(a.cols, a.rows);
    for (int i = 0; i < a.rows; ++i)
        for (int j = 0; j < a.cols; ++j) t.at(j, i) = a.at(i, j);
    return t;
}

MatD add(const MatD& a, const MatD& b) {
    check_dims(a.rows == b.rows && a.cols == b.cols, "add");
    MatD c(a.rows, a.cols);
    for (size_t i = 0; i < a.data.size(); ++i) c.data[i] = a.data[i] + b.data[i];
    return c;
}

MatD sub(const MatD& a, const MatD& b) {
    check_dims(a.rows == b.rows && a.cols == b.cols, "sub");
    MatD c(a.rows, a.cols);
    for (size_t i = 0; i < a.data.size(); ++i) c.data[i] = a.data[i] - b.data[i];
    return c;
}

MatD scale(const MatD& a, double s) {
    MatD c(a.rows, a.cols);
    for (size_t i = 0; i < a.data.size(); ++i) c.data[i] = a.data[i] * s;
    return c;
}

double frobenius_norm(const MatD& a) {
    double s = 0.0;
    for (double v : a.data) s += v * v;
    return std::sqrt(s);
}

double max_abs(const MatD& a) {
    double m = 0.0;
    for (double v : a.data) m = std::max(m, std::fabs(v));
    return m;
}

ColumnStats column_stats(const MatD& a) {
    check_dims(a.rows > 0 && a.cols > 0, "column_stats of empty matrix");
    ColumnStats st;
    st.col_mean.assign(a.cols, 0.0);
    double sum = 0.0, sumsq = 0.0;
    for (int i = 0; i < a.rows; ++i) {
        const double* r = a.row(i);
        for (int j = 0; j < a.cols; ++j) {
            st.col_mean[j] += r[j];
            sum += r[j];
            sumsq += r[j] * r[j];
        }
    }
    for (double& m : st.col_mean) m /= a.rows;
    const double n = static_cast<double>(a.rows) * a.cols;
    const double mean = sum / n;
    const double var = std::max(0.0, sumsq / n - mean * mean);
    st.entry_std = std::sqrt(var);
    return st;
}

namespace {

// In-place lower Cholesky. Returns false when a pivot falls below working
// precision relative to the original diagonal.
bool cholesky_factor(MatD& a) {
    const int n = a.rows;
    double max_diag = 0.0;
    for (int i = 0; i < n; ++i) max_diag = std::max(max_diag, std::fabs(a.at(i, i)));
    const double pivot_floor = std::max(n, 1) * std::numeric_limits<double>::epsilon() * max_diag;
    for (int j = 0; j < n; ++j) {
        double d = a.at(j, j);
        for (int k = 0; k < j; ++k) d -= a.at(j, k) * a.at(j, k);
        if (!(d > pivot_floor) || !std::isfinite(d)) return false;
        const double ljj = std::sqrt(d);
        a.at(j, j) = ljj;
        for (int i = j + 1; i < n; ++i) {
            double s = a.at(i, j);
            for (int k = 0; k < j; ++k) s -= a.at(i, k) * a.at(j, k);
            a.at(i, j) = s / ljj;
        }
    }
    return true;
}

// Solves L L^T X = B given the lower factor.
MatD cholesky_solve(const MatD& l, const MatD& b) {
    const int n = l.rows;
    MatD x = b;
    for (int c = 0; c < b.cols; ++c) {
        // forward: L y = b
        for (int i = 0; i < n; ++i) {
            double s = x.at(i, c);
            for (int k = 0; k < i; ++k) s -= l.at(i, k) * x.at(k, c);
            x.at(i, c) = s / l.at(i, i);
        }
        // backward: L^T x = y
        for (int i = n - 1; i >= 0; --i) {
            double s = x.at(i, c);
            for (int k = i + 1; k < n; ++k) s -= l.at(k, i) * x.at(k, c);
            x.at(i, c) = s / l.at(i, i);
        }
    }
    return x;
}

}  // namespace

SpdSolveResult solve_spd(const MatD& a, const MatD& b) {
    check_dims(a.rows == a.cols, "solve_spd: A must be square");
    check_dims(a.rows == b.rows, "solve_spd: row count of B");
    require_finite(a, "solve_spd A");
    require_finite(b, "solve_spd B");

    const double sym_tol = 1e-9 * std::max(1.0, max_abs(a));
    for (int i = 0; i < a.rows; ++i)
        for (int j = i + 1; j < a.cols; ++j)
            if (std::fabs(a.at(i, j) - a.at(j, i)) > sym_tol)
                throw std::invalid_argument("solve_spd: input is not symmetric");

    SpdSolveResult res;
    MatD l = a;
    if (cholesky_factor(l)) {
        res.x = cholesky_solve(l, b);
        return res;
    }

    double trace = 0.0;
    for (int i = 0; i < a.rows; ++i) trace += a.at(i, i);
    const double ridge = 1e-6 * trace / a.rows;
    if (!(ridge > 0.0)) throw std::runtime_error("solve_spd: matrix is irreparably singular");

    l = a;
    for (int i = 0; i < a.rows; ++i) l.at(i, i) += ridge;
    if (!cholesky_factor(l)) throw std::runtime_error("solve_spd: matrix is irreparably singular");
    res.x = cholesky_solve(l, b);
    res.regularized = true;
    res.ridge = ridge;
    return res;
}

SymEigen sym_eigen(const MatD& input) {
    check_dims(input.rows == input.cols, "sym_eigen: square matrix required");
    const int n = input.rows;
    MatD a = input;
    MatD v = MatD::identity(n);

    const double norm = std::max(frobenius_norm(a), 1e-300);
    const double tol = 1e-14 * norm;
    const int max_sweeps = 100;

    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        double off = 0.0;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) off += a.at(p, q) * a.at(p, q);
        if (std::sqrt(off) <= tol) break;

        for (int p = 0; p < n; ++p) {
            for (int q = p + 1; q < n; ++q) {
                const double apq = a.at(p, q);
                if (std::fabs(apq) <= tol / (n * n + 1.0)) continue;
                const double theta = (a.at(q, q) - a.at(p, p)) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (int k = 0; k < n; ++k) {
                    const double akp = a.at(k, p), akq = a.at(k, q);
                    a.at(k, p) = c * akp - s * akq;
                    a.at(k, q) = s * akp + c * akq;
                }
                for (int k = 0; k < n; ++k) {
                    const double apk = a.at(p, k), aqk = a.at(q, k);
                    a.at(p, k) = c * apk - s * aqk;
                    a.at(q, k) = s * apk + c * aqk;
                }
                for (int k = 0; k < n; ++k) {
                    const double vkp = v.at(k, p), vkq = v.at(k, q);
                    v.at(k, p) = c * vkp - s * vkq;
                    v.at(k, q) = s * vkp + c * vkq;
                }
            }
        }
    }

    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::vector<double> diag(n);
    for (int i = 0; i < n; ++i) diag[i] = a.at(i, i);
    std::stable_sort(order.begin(), order.end(), [&](int x, int y) { return diag[x] > diag[y]; });

    SymEigen e;
    e.values.resize(n);
    e.vectors = MatD(n, n);
    for (int j = 0; j < n; ++j) {
        e.values[j] = diag[order[j]];
        for (int i = 0; i < n; ++i) e.vectors.at(i, j) = v.at(i, order[j]);
    }
    return e;
}

MatD pseudoinverse(const MatD& k) {
    check_dims(k.rows > 0 && k.cols > 0, "pseudoinverse of empty matrix");
    require_finite(k, "pseudoinverse input");

    const bool wide = k.rows <= k.cols;
    // Gram matrix on the smaller side.
    const MatD kt = transpose(k);
    const MatD gram = wide ? matmul(k, kt) : matmul(kt, k);
    SymEigen e = sym_eigen(gram);

    const double lmax = e.values.empty() ? 0.0 : std::max(e.values[0], 0.0);
    const double sv_cutoff = 1e-10 * std::sqrt(lmax);
    const int n = gram.rows;

    // gram^+ = Q diag(1/lambda) Q^T over retained eigenvalues.
    MatD gram_pinv(n, n);
    for (int j = 0; j < n; ++j) {
        const double lambda = e.values[j];
        if (lambda <= 0.0 || std::sqrt(lambda) <= sv_cutoff) continue;
        const double inv = 1.0 / lambda;
        for (int r = 0; r < n; ++r) {
            const double qr = e.vectors.at(r, j) * inv;
            for (int c = 0; c < n; ++c) gram_pinv.at(r, c) += qr * e.vectors.at(c, j);
        }
    }
    // wide: K^+ = K^T (K K^T)^+, tall: K^+ = (K^T K)^+ K^T.
    return wide ? matmul(kt, gram_pinv) : matmul(gram_pinv, kt);
}

}  // namespace editlab
