"""Causal spatiotemporal attention in two interchangeable execution modes.

``full_causal_attention`` runs masked attention over a whole token sequence;
``cached_attention_step`` processes one frame against a persistent per-layer
KV cache.  The two are contractually equivalent frame by frame (within 1e-5
in float32, 1e-10 in float64).

The inner kernels come from the compiled ``_kernels`` extension when it is
importable, else from the pure-numpy ``_kernels_py`` fallback.  Set
OMNISTREAM_BACKEND=python|cython to force a choice.

Keys are stored post-rotation in the cache: a token's rotation depends only
on its own position, so cached rows never need re-rotation.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .numerics import ShapeError
from .rope3d import RopeConfig, plan_axes, rotate_pairs, tables_for_positions
from .tokenizer import SlotKind, Special, TokenLayout

try:
    from . import _kernels as _compiled
except ImportError:  # pragma: no cover - build-environment dependent
    _compiled = None

from . import _kernels_py as _fallback

_BACKENDS = {}
if _compiled is not None:
    _BACKENDS["cython"] = _compiled
_BACKENDS["python"] = _fallback

_active = None


def available_backends():
    return tuple(_BACKENDS)


def set_backend(name):
    global _active
    if name in (None, "auto"):
        _active = None
        return active_backend()
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}; available: {available_backends()}")
    _active = name
    return name


def active_backend():
    if _active is not None:
        return _active
    env = os.environ.get("OMNISTREAM_BACKEND", "auto")
    if env in _BACKENDS:
        return env
    return "cython" if "cython" in _BACKENDS else "python"


def _kernel():
    return _BACKENDS[active_backend()]


class CapacityError(RuntimeError):
    """The KV cache is full; eviction is never silent."""


class CacheStateError(RuntimeError):
    """Cache contents are inconsistent with the requested step."""


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int
    n_heads: int
    rope: RopeConfig

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ShapeError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        if self.d_head != self.rope.d_head:
            raise ShapeError(
                f"d_head {self.d_head} does not match rope d_head {self.rope.d_head}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


class KVCache:
    """Append-only per-layer key/value store, one frame at a time.

    Keys are stored post-RoPE; values raw.  Rows for a completed frame are
    never mutated.  Exceeding capacity raises ``CapacityError``.
    """

    def __init__(self, config: AttentionConfig, per_frame: int, capacity_frames: int,
                 dtype=np.float32):
        if capacity_frames < 1:
            raise ValueError("capacity must be at least one frame")
        self.config = config
        self.per_frame = per_frame
        self.capacity_frames = capacity_frames
        cap = capacity_frames * per_frame
        self.k = np.zeros((config.n_heads, cap, config.d_head), dtype=dtype)
        self.v = np.zeros_like(self.k)
        self.frames = 0

    @property
    def tokens(self) -> int:
        return self.frames * self.per_frame

    @property
    def capacity_tokens(self) -> int:
        return self.capacity_frames * self.per_frame

    def append_frame(self, k_rot, v):
        if k_rot.shape != (self.config.n_heads, self.per_frame, self.config.d_head):
            raise ShapeError(f"cache append shape {k_rot.shape} mismatches layout")
        if self.frames >= self.capacity_frames:
            raise CapacityError(
                f"cache full at {self.capacity_frames} frames; eviction is not supported")
        lo = self.tokens
        self.k[:, lo:lo + self.per_frame] = k_rot
        self.v[:, lo:lo + self.per_frame] = v
        self.frames += 1

    def reset(self):
        self.frames = 0


def build_mask(layout: TokenLayout):
    """Eq.-style additive causal mask: 0 iff frame(query) >= frame(key), else -inf."""
    frame = np.arange(layout.n_total) // layout.per_frame
    mask = np.zeros((layout.n_total, layout.n_total))
    mask[frame[:, None] < frame[None, :]] = -np.inf
    return mask


def _split_heads(x, config: AttentionConfig):
    n = x.shape[0]
    return np.ascontiguousarray(
        x.reshape(n, config.n_heads, config.d_head).transpose(1, 0, 2))


def _merge_heads(x):
    heads, n, dh = x.shape
    return x.transpose(1, 0, 2).reshape(n, heads * dh)


def _check_qkv(q, k, v, config):
    if q.shape != k.shape or q.shape != v.shape:
        raise ShapeError(f"q/k/v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    if q.ndim != 2 or q.shape[1] != config.d_model:
        raise ShapeError(f"expected (tokens, {config.d_model}), got {q.shape}")


def full_causal_attention(q, k, v, config: AttentionConfig, layout: TokenLayout,
                          positions=None):
    """Masked multi-head attention over a complete T-frame token sequence."""
    _check_qkv(q, k, v, config)
    if q.shape[0] != layout.n_total:
        raise ShapeError(f"{q.shape[0]} tokens for layout with {layout.n_total}")
    if positions is None:
        positions = layout.positions()
    plan = plan_axes(config.rope)
    cos, sin = tables_for_positions(positions, plan)

    dtype = np.asarray(q).dtype
    qh = _split_heads(np.asarray(q), config)
    kh = _split_heads(np.asarray(k), config)
    vh = _split_heads(np.asarray(v), config)
    qr = np.ascontiguousarray(rotate_pairs(qh, cos[None], sin[None]), dtype=dtype)
    kr = np.ascontiguousarray(rotate_pairs(kh, cos[None], sin[None]), dtype=dtype)

    scale = 1.0 / np.sqrt(config.d_head)
    out = _kernel().full_causal(qr, kr, vh, layout.per_frame, scale)
    return _merge_heads(out)


def cached_attention_step(q, k, v, cache: KVCache, config: AttentionConfig,
                          layout: TokenLayout, positions=None):
    """One frame of attention over the cache; appends this frame's k/v rows.

    ``q``, ``k``, ``v`` are the projections of frame t's tokens, where t is
    the cache's frame counter.  Causality is structural: the query only ever
    sees rows of frames <= t, so no mask is needed.
    """
    _check_qkv(q, k, v, config)
    if q.shape[0] != layout.per_frame:
        raise ShapeError(f"expected one frame of {layout.per_frame} tokens, got {q.shape[0]}")
    if cache.per_frame != layout.per_frame or cache.config.d_model != config.d_model:
        raise CacheStateError("cache layout/config mismatch")

    t = cache.frames
    if positions is None:
        positions = _frame_positions(layout, t)
    plan = plan_axes(config.rope)
    cos, sin = tables_for_positions(positions, plan)

    dtype = cache.k.dtype
    qh = _split_heads(np.asarray(q, dtype=dtype), config)
    kh = _split_heads(np.asarray(k, dtype=dtype), config)
    vh = _split_heads(np.asarray(v, dtype=dtype), config)
    qr = np.ascontiguousarray(rotate_pairs(qh, cos[None], sin[None]), dtype=dtype)
    kr = np.ascontiguousarray(rotate_pairs(kh, cos[None], sin[None]), dtype=dtype)

    cache.append_frame(kr, vh)
    scale = 1.0 / np.sqrt(config.d_head)
    out = _kernel().cached_step(qr, cache.k, cache.v, cache.tokens, scale)
    return _merge_heads(out)


def _frame_positions(layout: TokenLayout, t: int):
    """Positions for frame t's slots, valid beyond the layout's nominal T."""
    out = []
    for s, kind in enumerate(layout.slot_kinds()):
        if kind is SlotKind.PATCH:
            idx = s - layout.n_special
            out.append((t, idx // layout.w, idx % layout.w))
        else:
            out.append(Special(t))
    return out


def attention_flops(mode, layout: TokenLayout, config: AttentionConfig, t: int):
    """Closed-form multiply-accumulate count for producing frame t's attention output.

    Cache mode projects only frame t and attends over (t+1) frames of keys;
    recompute mode re-runs the whole-prefix bidirectional forward.
    """
    pf = layout.per_frame
    d = config.d_model
    n_ctx = (t + 1) * pf
    if mode == "cache":
        proj = 4 * pf * d * d            # q, k, v, o for the new frame only
        scores = pf * n_ctx * d          # heads * pf * n_ctx * d_head
        return proj + 2 * scores         # QK^T and PV
    if mode == "recompute":
        proj = 4 * n_ctx * d * d
        scores = n_ctx * n_ctx * d       # full bidirectional prefix
        return proj + 2 * scores
    raise ValueError(f"unknown mode {mode!r}")
