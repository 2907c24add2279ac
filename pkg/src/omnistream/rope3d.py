"""3D rotary positional embeddings.

Per-head dimensions are grouped into rotary pairs.  Pairs whose index is
congruent to 3 mod 4 encode time; the remaining pairs alternate between the
y and x axes starting with y, which yields an exact 2:3:3 (t:y:x) split of
the head dimensions whenever d_head is divisible by 16 (one quarter of the
pairs encode time, and the remaining three quarters must split evenly
between y and x).  Special tokens carry no coordinate and are rotated by
zero angle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ShapeError
from .tokenizer import Special, positions_arrays

T_AXIS, Y_AXIS, X_AXIS = 0, 1, 2


class RopeConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RopeConfig:
    d_head: int
    base: float = 10000.0
    jitter_enabled: bool = False
    jitter_scale: float = 0.0

    def __post_init__(self):
        if self.d_head <= 0 or self.d_head % 16 != 0:
            raise RopeConfigError(
                f"d_head must be a positive multiple of 16 for the 2:3:3 split, got {self.d_head}")
        if self.base <= 1.0:
            raise RopeConfigError(f"frequency base must exceed 1, got {self.base}")
        if not 0.0 <= self.jitter_scale < 1.0:
            raise RopeConfigError(f"jitter scale must lie in [0, 1), got {self.jitter_scale}")


@dataclass(frozen=True)
class AxisPlan:
    pair_axis: np.ndarray  # (d_head/2,), entries in {T_AXIS, Y_AXIS, X_AXIS}
    freqs: np.ndarray      # (d_head/2,), rotation frequency of each pair

    @property
    def n_pairs(self) -> int:
        return len(self.pair_axis)

    def axis_counts(self):
        return tuple(int(np.sum(self.pair_axis == a)) for a in (T_AXIS, Y_AXIS, X_AXIS))


def plan_axes(config: RopeConfig) -> AxisPlan:
    """Allocate rotary pairs to (t, y, x) and assign per-axis frequencies."""
    n_pairs = config.d_head // 2
    pair_axis = np.empty(n_pairs, dtype=np.int64)
    spatial_toggle = 0  # alternates Y, X over non-time pairs, Y first
    for i in range(n_pairs):
        if i % 4 == 3:
            pair_axis[i] = T_AXIS
        else:
            pair_axis[i] = Y_AXIS if spatial_toggle == 0 else X_AXIS
            spatial_toggle ^= 1

    freqs = np.empty(n_pairs, dtype=np.float64)
    for axis in (T_AXIS, Y_AXIS, X_AXIS):
        idx = np.flatnonzero(pair_axis == axis)
        d_axis = 2 * len(idx)
        ranks = np.arange(len(idx), dtype=np.float64)
        freqs[idx] = config.base ** (-2.0 * ranks / d_axis)
    return AxisPlan(pair_axis=pair_axis, freqs=freqs)


def rotation_tables(coords, special, plan: AxisPlan):
    """Per-token cos/sin tables of shape (n_tokens, n_pairs).

    ``coords`` is (n, 3) float (t, y, x); rows flagged in ``special`` rotate
    by zero angle.
    """
    coords = np.asarray(coords, dtype=np.float64)
    angle = coords[:, plan.pair_axis] * plan.freqs[None, :]
    angle[np.asarray(special, dtype=bool)] = 0.0
    return np.cos(angle), np.sin(angle)


def tables_for_positions(positions, plan: AxisPlan):
    coords, special = positions_arrays(positions)
    return rotation_tables(coords, special, plan)


def rotate_pairs(x, cos, sin):
    """Rotate each (x[2i], x[2i+1]) pair by the tabulated angles."""
    x = np.asarray(x)
    if x.shape[-1] != 2 * cos.shape[-1]:
        raise ShapeError(f"width {x.shape[-1]} does not match {cos.shape[-1]} rotary pairs")
    even = x[..., 0::2]
    odd = x[..., 1::2]
    out = np.empty_like(x)
    c = cos.astype(x.dtype, copy=False)
    s = sin.astype(x.dtype, copy=False)
    out[..., 0::2] = even * c - odd * s
    out[..., 1::2] = even * s + odd * c
    return out


def rotate_pairs_inverse(x, cos, sin):
    """Inverse rotation; used by backward passes."""
    return rotate_pairs(x, cos, -np.asarray(sin))


def apply_rope(q_or_k, positions, plan: AxisPlan):
    """Rotate token vectors (tokens, d_head) by their (t, y, x) coordinates."""
    x = np.asarray(q_or_k)
    if len(positions) != x.shape[0]:
        raise ShapeError(f"{len(positions)} positions for {x.shape[0]} tokens")
    if x.shape[-1] != 2 * plan.n_pairs:
        raise ShapeError(f"d_head {x.shape[-1]} does not match plan ({2 * plan.n_pairs})")
    cos, sin = tables_for_positions(positions, plan)
    return rotate_pairs(x, cos, sin)


def jitter_positions(positions, scale, rng_seed):
    """Train-time scaling of the spatial (y, x) coordinate frame.

    One factor is drawn uniformly from [1-scale, 1+scale] per call; time and
    special tokens are untouched.  Deterministic for a fixed seed.
    """
    if not 0.0 <= scale < 1.0:
        raise RopeConfigError(f"jitter scale must lie in [0, 1), got {scale}")
    rng = np.random.default_rng(rng_seed)
    factor = rng.uniform(1.0 - scale, 1.0 + scale)
    out = []
    for p in positions:
        if isinstance(p, Special):
            out.append(p)
        else:
            t, y, x = p
            out.append((t, y * factor, x * factor))
    return out
