# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for the per-tick hot path.

Mirrors numpy_backend exactly: same signatures, same [B, T, C] layout,
same left-padded causal convolution semantics. GEMM work goes through
BLAS; the elementwise/reduction glue runs in fused C loops instead of
chained numpy temporaries.
"""

import numpy as np

cimport numpy as cnp
from cython cimport floating
from libc.math cimport exp, log1p, sqrt
from scipy.linalg.cython_blas cimport dgemm, sgemm

cnp.import_array()

NAME = "compiled"


cdef inline void _gemm_rowmajor(
    bint trans_a, bint trans_b, int m, int n, int k,
    floating alpha, floating* a, int lda, floating* b, int ldb,
    floating beta, floating* c, int ldc,
) noexcept nogil:
    # Row-major C[m,n] = alpha*op(A)op(B) + beta*C via the column-major
    # identity C^T = op(B)^T op(A)^T.
    cdef char ta = b'T' if trans_a else b'N'
    cdef char tb = b'T' if trans_b else b'N'
    if floating is float:
        sgemm(&tb, &ta, &n, &m, &k, <float*>&alpha, <float*>b, &ldb,
              <float*>a, &lda, <float*>&beta, <float*>c, &ldc)
    else:
        dgemm(&tb, &ta, &n, &m, &k, <double*>&alpha, <double*>b, &ldb,
              <double*>a, &lda, <double*>&beta, <double*>c, &ldc)


def conv1d_causal_fwd(floating[:, :, ::1] x, floating[:, :, ::1] w,
                      floating[::1] b, int dilation):
    # Samples are stacked into one zero-padded [B*(T+maxS), C] matrix so
    # each tap is a single large GEMM; the per-sample left padding keeps
    # shifts from crossing sample boundaries.
    cdef int B = x.shape[0], T = x.shape[1], Ci = x.shape[2]
    cdef int K = w.shape[0], Co = w.shape[2]
    cdef int maxS = (K - 1) * dilation
    cdef int Tp = T + maxS
    cdef long R = <long>B * Tp
    dtype = np.float32 if floating is float else np.float64
    cdef cnp.ndarray y_arr = np.empty((B, T, Co), dtype=dtype)
    cdef cnp.ndarray xp_arr = np.empty((B, Tp, Ci), dtype=dtype)
    cdef cnp.ndarray yp_arr = np.empty((B, Tp, Co), dtype=dtype)
    cdef floating[:, :, ::1] y = y_arr
    cdef floating[:, :, ::1] xp = xp_arr
    cdef floating[:, :, ::1] yp = yp_arr
    cdef floating* xp0
    cdef floating* yp0
    cdef int bi, t, c, j, s
    cdef long rows
    with nogil:
        for bi in range(B):
            for t in range(maxS):
                for c in range(Ci):
                    xp[bi, t, c] = 0.0
            for t in range(T):
                for c in range(Ci):
                    xp[bi, maxS + t, c] = x[bi, t, c]
        xp0 = &xp[0, 0, 0]
        yp0 = &yp[0, 0, 0]
        for j in range(K):
            s = j * dilation
            rows = R - s
            # yp[s:] (+)= xp[:R-s] @ w[j]; first tap overwrites (beta=0)
            _gemm_rowmajor(False, False, <int>rows, Co, Ci, <floating>1.0,
                           xp0, Ci, &w[j, 0, 0], Co,
                           <floating>1.0 if j > 0 else <floating>0.0,
                           yp0 + <long>s * Co, Co)
        for bi in range(B):
            for t in range(T):
                for c in range(Co):
                    y[bi, t, c] = yp[bi, maxS + t, c] + b[c]
    return y_arr


def conv1d_causal_bwd(floating[:, :, ::1] x, floating[:, :, ::1] w,
                      floating[:, :, ::1] dy, int dilation,
                      bint need_dx=True):
    # Same padded-stack strategy as the forward pass: dy is copied into
    # a zero-padded stack so every cross-boundary term multiplies a zero
    # row, making one GEMM per tap valid for the whole batch.
    cdef int B = x.shape[0], T = x.shape[1], Ci = x.shape[2]
    cdef int K = w.shape[0], Co = w.shape[2]
    cdef int maxS = (K - 1) * dilation
    cdef int Tp = T + maxS
    cdef long R = <long>B * Tp
    dtype = np.float32 if floating is float else np.float64
    cdef cnp.ndarray dx_arr = (np.empty((B, T, Ci), dtype=dtype) if need_dx
                               else np.empty((0, 0, 0), dtype=dtype))
    cdef cnp.ndarray dw_arr = np.empty((K, Ci, Co), dtype=dtype)
    cdef cnp.ndarray db_arr = np.zeros(Co, dtype=dtype)
    cdef cnp.ndarray xp_arr = np.empty((B, Tp, Ci), dtype=dtype)
    cdef cnp.ndarray dyp_arr = np.empty((B, Tp, Co), dtype=dtype)
    cdef cnp.ndarray dxp_arr = (np.empty((B, Tp, Ci), dtype=dtype) if need_dx
                                else np.empty((0, 0, 0), dtype=dtype))
    cdef floating[:, :, ::1] dx = dx_arr
    cdef floating[:, :, ::1] dw = dw_arr
    cdef floating[::1] db = db_arr
    cdef floating[:, :, ::1] xp = xp_arr
    cdef floating[:, :, ::1] dyp = dyp_arr
    cdef floating[:, :, ::1] dxp = dxp_arr
    cdef floating* xp0
    cdef floating* dyp0
    cdef int bi, t, c, j, s
    cdef long rows
    with nogil:
        for bi in range(B):
            for t in range(maxS):
                for c in range(Ci):
                    xp[bi, t, c] = 0.0
                for c in range(Co):
                    dyp[bi, t, c] = 0.0
            for t in range(T):
                for c in range(Ci):
                    xp[bi, maxS + t, c] = x[bi, t, c]
                for c in range(Co):
                    dyp[bi, maxS + t, c] = dy[bi, t, c]
                    db[c] += dy[bi, t, c]
        xp0 = &xp[0, 0, 0]
        dyp0 = &dyp[0, 0, 0]
        for j in range(K):
            s = j * dilation
            rows = R - s
            # dw[j] = xp[:R-s].T @ dyp[s:]
            _gemm_rowmajor(True, False, Ci, Co, <int>rows, <floating>1.0,
                           xp0, Ci, dyp0 + <long>s * Co, Co,
                           <floating>0.0, &dw[j, 0, 0], Co)
            if need_dx:
                # dxp[:R-s] (+)= dyp[s:] @ w[j].T
                _gemm_rowmajor(False, True, <int>rows, Ci, Co, <floating>1.0,
                               dyp0 + <long>s * Co, Co, &w[j, 0, 0], Co,
                               <floating>1.0 if j > 0 else <floating>0.0,
                               &dxp[0, 0, 0], Ci)
        if need_dx:
            for bi in range(B):
                for t in range(T):
                    for c in range(Ci):
                        dx[bi, t, c] = dxp[bi, maxS + t, c]
    return (dx_arr if need_dx else None), dw_arr, db_arr


def relu_fwd(cnp.ndarray x):
    cdef cnp.ndarray out = np.empty_like(x)
    _relu_fwd_flat(x.ravel(), out.ravel())
    return out


def _relu_fwd_flat(floating[::1] x, floating[::1] out):
    cdef Py_ssize_t i
    with nogil:
        for i in range(x.shape[0]):
            out[i] = x[i] if x[i] > 0.0 else 0.0


def relu_bwd(cnp.ndarray dy, cnp.ndarray y):
    cdef cnp.ndarray out = np.empty_like(dy)
    _relu_bwd_flat(dy.ravel(), y.ravel(), out.ravel())
    return out


def _relu_bwd_flat(floating[::1] dy, floating[::1] y, floating[::1] out):
    cdef Py_ssize_t i
    with nogil:
        for i in range(dy.shape[0]):
            out[i] = dy[i] if y[i] > 0.0 else 0.0


def maxpool_fwd(floating[:, :, ::1] x, int stride):
    cdef int B = x.shape[0], T = x.shape[1], C = x.shape[2]
    cdef int t2 = T // stride
    dtype = np.float32 if floating is float else np.float64
    cdef cnp.ndarray y_arr = np.empty((B, t2, C), dtype=dtype)
    cdef cnp.ndarray idx_arr = np.empty((B, t2, C), dtype=np.int64)
    cdef floating[:, :, ::1] y = y_arr
    cdef cnp.int64_t[:, :, ::1] idx = idx_arr
    cdef int bi, t, c, s, base
    cdef floating best
    cdef cnp.int64_t besti
    with nogil:
        for bi in range(B):
            for t in range(t2):
                base = t * stride
                for c in range(C):
                    best = x[bi, base, c]
                    besti = 0
                    for s in range(1, stride):
                        if x[bi, base + s, c] > best:
                            best = x[bi, base + s, c]
                            besti = s
                    y[bi, t, c] = best
                    idx[bi, t, c] = besti
    return y_arr, idx_arr


def maxpool_bwd(floating[:, :, ::1] dy, cnp.int64_t[:, :, ::1] idx,
                int T, int stride):
    cdef int B = dy.shape[0], t2 = dy.shape[1], C = dy.shape[2]
    dtype = np.float32 if floating is float else np.float64
    cdef cnp.ndarray dx_arr = np.zeros((B, T, C), dtype=dtype)
    cdef floating[:, :, ::1] dx = dx_arr
    cdef int bi, t, c
    with nogil:
        for bi in range(B):
            for t in range(t2):
                for c in range(C):
                    dx[bi, t * stride + idx[bi, t, c], c] = dy[bi, t, c]
    return dx_arr


def layernorm_fwd(floating[:, :, ::1] x, floating[::1] gain,
                  floating[::1] bias, double eps):
    cdef int B = x.shape[0], T = x.shape[1], C = x.shape[2]
    dtype = np.float32 if floating is float else np.float64
    cdef cnp.ndarray y_arr = np.empty((B, T, C), dtype=dtype)
    cdef cnp.ndarray xhat_arr = np.empty((B, T, C), dtype=dtype)
    cdef cnp.ndarray rstd_arr = np.empty((B, T, 1), dtype=dtype)
    cdef floating[:, :, ::1] y = y_arr
    cdef floating[:, :, ::1] xhat = xhat_arr
    cdef floating[:, :, ::1] rstd = rstd_arr
    cdef int bi, t, c
    cdef floating mean, var, rs, centered
    with nogil:
        for bi in range(B):
            for t in range(T):
                mean = 0.0
                for c in range(C):
                    mean += x[bi, t, c]
                mean /= C
                var = 0.0
                for c in range(C):
                    centered = x[bi, t, c] - mean
                    var += centered * centered
                var /= C
                rs = <floating>(1.0 / sqrt(var + eps))
                rstd[bi, t, 0] = rs
                for c in range(C):
                    xhat[bi, t, c] = (x[bi, t, c] - mean) * rs
                    y[bi, t, c] = xhat[bi, t, c] * gain[c] + bias[c]
    return y_arr, xhat_arr, rstd_arr


def layernorm_bwd(floating[:, :, ::1] dy, floating[:, :, ::1] xhat,
                  floating[::1] gain, floating[:, :, ::1] rstd):
    cdef int B = dy.shape[0], T = dy.shape[1], C = dy.shape[2]
    dtype = np.float32 if floating is float else np.float64
    cdef cnp.ndarray dx_arr = np.empty((B, T, C), dtype=dtype)
    cdef cnp.ndarray dg_arr = np.zeros(C, dtype=dtype)
    cdef cnp.ndarray db_arr = np.zeros(C, dtype=dtype)
    cdef floating[:, :, ::1] dx = dx_arr
    cdef floating[::1] dg = dg_arr
    cdef floating[::1] db = db_arr
    cdef int bi, t, c
    cdef floating s1, s2, dyg
    with nogil:
        for bi in range(B):
            for t in range(T):
                s1 = 0.0
                s2 = 0.0
                for c in range(C):
                    dyg = dy[bi, t, c] * gain[c]
                    s1 += dyg
                    s2 += dyg * xhat[bi, t, c]
                s1 /= C
                s2 /= C
                for c in range(C):
                    dyg = dy[bi, t, c] * gain[c]
                    dx[bi, t, c] = (dyg - s1 - xhat[bi, t, c] * s2) * rstd[bi, t, 0]
                    dg[c] += dy[bi, t, c] * xhat[bi, t, c]
                    db[c] += dy[bi, t, c]
    return dx_arr, dg_arr, db_arr


def softmax_fwd(cnp.ndarray x):
    cdef cnp.ndarray out = np.empty_like(x)
    cdef Py_ssize_t m = x.shape[x.ndim - 1]
    _softmax_fwd_rows(
        np.ascontiguousarray(x).reshape(-1, m), out.reshape(-1, m))
    return out


def _softmax_fwd_rows(floating[:, ::1] x, floating[:, ::1] out):
    cdef Py_ssize_t N = x.shape[0], M = x.shape[1], i, j
    cdef floating mx, total
    with nogil:
        for i in range(N):
            mx = x[i, 0]
            for j in range(1, M):
                if x[i, j] > mx:
                    mx = x[i, j]
            total = 0.0
            for j in range(M):
                out[i, j] = <floating>exp(x[i, j] - mx)
                total += out[i, j]
            for j in range(M):
                out[i, j] /= total
    return None


def softmax_bwd(cnp.ndarray dy, cnp.ndarray y):
    cdef cnp.ndarray out = np.empty_like(dy)
    cdef Py_ssize_t m = dy.shape[dy.ndim - 1]
    _softmax_bwd_rows(
        np.ascontiguousarray(dy).reshape(-1, m),
        np.ascontiguousarray(y).reshape(-1, m),
        out.reshape(-1, m))
    return out


def _softmax_bwd_rows(floating[:, ::1] dy, floating[:, ::1] y,
                      floating[:, ::1] out):
    cdef Py_ssize_t N = dy.shape[0], M = dy.shape[1], i, j
    cdef floating inner
    with nogil:
        for i in range(N):
            inner = 0.0
            for j in range(M):
                inner += dy[i, j] * y[i, j]
            for j in range(M):
                out[i, j] = (dy[i, j] - inner) * y[i, j]
    return None


def adam_step(cnp.ndarray p, cnp.ndarray g, cnp.ndarray m, cnp.ndarray v,
              double lr, double beta1, double beta2, double eps, long t):
    _adam_flat(p.ravel(), g.ravel(), m.ravel(), v.ravel(),
               lr, beta1, beta2, eps, t)
    return None


def _adam_flat(floating[::1] p, floating[::1] g, floating[::1] m,
               floating[::1] v, double lr, double beta1, double beta2,
               double eps, long t):
    cdef Py_ssize_t i
    cdef double bc1 = 1.0 - beta1 ** t
    cdef double bc2 = 1.0 - beta2 ** t
    cdef floating mhat, vhat
    with nogil:
        for i in range(p.shape[0]):
            m[i] = <floating>(beta1 * m[i] + (1.0 - beta1) * g[i])
            v[i] = <floating>(beta2 * v[i] + (1.0 - beta2) * g[i] * g[i])
            mhat = <floating>(m[i] / bc1)
            vhat = <floating>(v[i] / bc2)
            p[i] -= <floating>(lr * mhat / (sqrt(vhat) + eps))
    return None
