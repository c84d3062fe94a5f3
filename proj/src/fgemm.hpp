#pragma once

#include "editlab/matrix.hpp"

// Float GEMM kernels for the trainer. All loops are written in saxpy form
// (independent adds over the inner index) so the compiler can vectorize
// them without reassociation flags.

namespace editlab::detail {

// c (m x n) = a (m x k) * b (k x n)
inline void matmul_nn(const MatF& a, const MatF& b, MatF& c) {
    c.rows = a.rows;
    c.cols = b.cols;
    c.data.assign(static_cast<size_t>(c.rows) * c.cols, 0.0f);
    for (int i = 0; i < a.rows; ++i) {
        const float* ar = a.row(i);
        float* cr = c.row(i);
        for (int k = 0; k < a.cols; ++k) {
            const float av = ar[k];
            const float* br = b.row(k);
            for (int j = 0; j < b.cols; ++j) cr[j] += av * br[j];
        }
    }
}

// c (k x n) += a^T (a is m x k) * b (m x n)
inline void matmul_tn_acc(const MatF& a, const MatF& b, MatF& c) {
    for (int r = 0; r < a.rows; ++r) {
        const float* ar = a.row(r);
        const float* br = b.row(r);
        for (int i = 0; i < a.cols; ++i) {
            const float av = ar[i];
            float* cr = c.row(i);
            for (int j = 0; j < b.cols; ++j) cr[j] += av * br[j];
        }
    }
}

inline MatF transposed(const MatF& a) {
    MatF t(a.cols, a.rows);
    for (int i = 0; i < a.rows; ++i)
        for (int j = 0; j < a.cols; ++j) t.at(j, i) = a.at(i, j);
    return t;
}

}  // namespace editlab::detail
