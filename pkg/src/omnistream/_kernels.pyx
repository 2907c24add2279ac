# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled attention kernels.

Causality is structural here: a query block for frame f only ever sees the
key/value rows of frames <= f, so no additive mask is materialized.  The
pure-numpy fallback in ``_kernels_py`` implements the same contract with an
explicit mask; ``attention`` picks one of the two at import time.
"""

import numpy as np

cimport numpy as cnp
from scipy.linalg.cython_blas cimport dgemm, sgemm
from libc.math cimport exp, expf

ctypedef fused real:
    float
    double


cdef void _gemm_q_kt(real* q, real* k, real* s, int m, int nk, int dh,
                     real scale) noexcept nogil:
    # Row-major S(m, nk) = scale * Q(m, dh) @ K(nk, dh)^T via column-major BLAS.
    cdef real beta = 0.0
    cdef char ta = b'T'
    cdef char tb = b'N'
    if real is float:
        sgemm(&ta, &tb, &nk, &m, &dh, &scale, k, &dh, q, &dh, &beta, s, &nk)
    else:
        dgemm(&ta, &tb, &nk, &m, &dh, &scale, k, &dh, q, &dh, &beta, s, &nk)


cdef void _gemm_p_v(real* p, real* v, real* o, int m, int nk, int dh) noexcept nogil:
    # Row-major O(m, dh) = P(m, nk) @ V(nk, dh) via column-major BLAS.
    cdef real alpha = 1.0
    cdef real beta = 0.0
    cdef char tn = b'N'
    if real is float:
        sgemm(&tn, &tn, &dh, &m, &nk, &alpha, v, &dh, p, &nk, &beta, o, &dh)
    else:
        dgemm(&tn, &tn, &dh, &m, &nk, &alpha, v, &dh, p, &nk, &beta, o, &dh)


cdef void _softmax_rows(real* s, int m, int nk) noexcept nogil:
    cdef int i, j
    cdef real mx, acc
    for i in range(m):
        mx = s[i * nk]
        for j in range(1, nk):
            if s[i * nk + j] > mx:
                mx = s[i * nk + j]
        acc = 0.0
        for j in range(nk):
            if real is float:
                s[i * nk + j] = expf(s[i * nk + j] - mx)
            else:
                s[i * nk + j] = exp(s[i * nk + j] - mx)
            acc += s[i * nk + j]
        for j in range(nk):
            s[i * nk + j] /= acc


def full_causal(real[:, :, ::1] q, real[:, :, ::1] k, real[:, :, ::1] v,
                int per_frame, double scale):
    """Frame-causal attention over rotated q/k and raw v, shape (heads, N, d_head)."""
    cdef int heads = q.shape[0]
    cdef int n = q.shape[1]
    cdef int dh = q.shape[2]
    cdef int frames = n // per_frame
    if frames * per_frame != n:
        raise ValueError("token count is not a multiple of per_frame")

    out_arr = np.empty((heads, n, dh), dtype=np.asarray(q).dtype)
    cdef real[:, :, ::1] out = out_arr
    scratch_arr = np.empty((per_frame, n), dtype=np.asarray(q).dtype)
    cdef real[:, ::1] scratch = scratch_arr

    cdef int h, f, nk, row0
    cdef real sc = <real>scale
    with nogil:
        for h in range(heads):
            for f in range(frames):
                row0 = f * per_frame
                nk = row0 + per_frame
                _gemm_q_kt(&q[h, row0, 0], &k[h, 0, 0], &scratch[0, 0],
                           per_frame, nk, dh, sc)
                _softmax_rows(&scratch[0, 0], per_frame, nk)
                _gemm_p_v(&scratch[0, 0], &v[h, 0, 0], &out[h, row0, 0],
                          per_frame, nk, dh)
    return out_arr


def cached_step(real[:, :, ::1] q, real[:, :, ::1] k_cache, real[:, :, ::1] v_cache,
                int n_ctx, double scale):
    """One-frame attention: q (heads, pf, d_head) over the first n_ctx cached rows."""
    cdef int heads = q.shape[0]
    cdef int pf = q.shape[1]
    cdef int dh = q.shape[2]
    if n_ctx <= 0 or n_ctx > k_cache.shape[1]:
        raise ValueError("n_ctx outside cache bounds")

    out_arr = np.empty((heads, pf, dh), dtype=np.asarray(q).dtype)
    cdef real[:, :, ::1] out = out_arr
    scratch_arr = np.empty((pf, n_ctx), dtype=np.asarray(q).dtype)
    cdef real[:, ::1] scratch = scratch_arr

    cdef int h
    cdef real sc = <real>scale
    with nogil:
        for h in range(heads):
            _gemm_q_kt(&q[h, 0, 0], &k_cache[h, 0, 0], &scratch[0, 0],
                       pf, n_ctx, dh, sc)
            _softmax_rows(&scratch[0, 0], pf, n_ctx)
            _gemm_p_v(&scratch[0, 0], &v_cache[h, 0, 0], &out[h, 0, 0],
                      pf, n_ctx, dh)
    return out_arr
