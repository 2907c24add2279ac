"""Pure-numpy attention kernels, API-compatible with the compiled ``_kernels``.

This is the import-time fallback and the baseline that the compiled kernels
are benchmarked against.  It materializes the additive causal mask explicitly
instead of exploiting the block structure.
"""

import numpy as np


def full_causal(q, k, v, per_frame, scale):
    """Frame-causal attention over rotated q/k and raw v, shape (heads, N, d_head)."""
    heads, n, _ = q.shape
    if n % per_frame != 0:
        raise ValueError("token count is not a multiple of per_frame")
    frame = np.arange(n) // per_frame
    future = frame[:, None] < frame[None, :]

    out = np.empty_like(q)
    for h in range(heads):
        scores = (q[h] @ k[h].T) * scale
        scores[future] = -np.inf
        scores -= scores.max(axis=1, keepdims=True)
        np.exp(scores, out=scores)
        scores /= scores.sum(axis=1, keepdims=True)
        out[h] = scores @ v[h]
    return out


def cached_step(q, k_cache, v_cache, n_ctx, scale):
    """One-frame attention: q (heads, pf, d_head) over the first n_ctx cached rows."""
    if n_ctx <= 0 or n_ctx > k_cache.shape[1]:
        raise ValueError("n_ctx outside cache bounds")
    out = np.empty_like(q)
    for h in range(q.shape[0]):
        scores = (q[h] @ k_cache[h, :n_ctx].T) * scale
        scores -= scores.max(axis=1, keepdims=True)
        np.exp(scores, out=scores)
        scores /= scores.sum(axis=1, keepdims=True)
        out[h] = scores @ v_cache[h, :n_ctx]
    return out
