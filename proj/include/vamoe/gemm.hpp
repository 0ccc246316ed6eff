#pragma once

#include "vamoe/common.hpp"

namespace vamoe::detail {

// Accumulating micro-kernels for the three matmul data flows the tape
// needs. All operands row-major, C accumulated in place. The loop orders
// keep the innermost axis contiguous so the compiler vectorizes them.

// C[m,n] += A[m,k] * B[k,n]
template <typename T>
void gemm_nn_acc(const T* A, const T* B, T* C, i64 m, i64 k, i64 n) {
  for (i64 i = 0; i < m; ++i) {
    const T* a = A + i * k;
    T* c = C + i * n;
    for (i64 p = 0; p < k; ++p) {
      const T av = a[p];
      if (av == T(0)) continue;
      const T* b = B + p * n;
      for (i64 j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

// C[m,k] += A[m,n] * B[k,n]^T  (rows of A dotted with rows of B)
template <typename T>
void gemm_nt_acc(const T* A, const T* B, T* C, i64 m, i64 n, i64 k) {
  for (i64 i = 0; i < m; ++i) {
    const T* a = A + i * n;
    T* c = C + i * k;
    for (i64 p = 0; p < k; ++p) {
      const T* b = B + p * n;
      T acc = T(0);
      for (i64 j = 0; j < n; ++j) acc += a[j] * b[j];
      c[p] += acc;
    }
  }
}

// C[k,n] += A[m,k]^T * B[m,n]
template <typename T>
void gemm_tn_acc(const T* A, const T* B, T* C, i64 m, i64 k, i64 n) {
  for (i64 i = 0; i < m; ++i) {
    const T* a = A + i * k;
    const T* b = B + i * n;
    for (i64 p = 0; p < k; ++p) {
      const T av = a[p];
      if (av == T(0)) continue;
      T* c = C + p * n;
      for (i64 j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

}  // namespace vamoe::detail
