"""The complete training objective.

Self-supervised terms (student-teacher cross-entropy over prototype scores
with Sinkhorn-Knopp centering of the teacher, KoLeo spreading, Gram
anchoring), geometric terms (confidence-weighted depth with a spatial
gradient penalty, L1 ray/point/camera regression), and a caption
cross-entropy over an abstract next-token-distribution provider.

Every loss returns its analytic input gradients alongside the value; the
tests check all of them against central finite differences.  Per-pixel
losses are mean-reduced over valid pixels so the fixed loss weights stay
resolution-independent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import ShapeError


class DegenerateFeaturesError(ValueError):
    """Duplicate points (KoLeo) or zero-norm rows (Gram) make the loss undefined."""


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term, value):
        super().__init__(f"loss term {term!r} is non-finite: {value}")
        self.term = term


class UnnormalizedDistributionError(ValueError):
    """The caption decoder returned rows that do not sum to one."""


@dataclass(frozen=True)
class LossWeights:
    lam_ssl: float = 0.1
    lam_geo: float = 1.0
    lam_cap: float = 1.0
    koleo_coeff: float = 0.1
    alpha: float = 0.2  # confidence regularizer in the depth loss

    def __post_init__(self):
        for name in ("lam_ssl", "lam_geo", "lam_cap", "koleo_coeff", "alpha"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


SSL_TERMS = ("dino", "ibot", "koleo", "gram")
GEO_TERMS = ("depth", "ray", "points", "camera")
ALL_TERMS = SSL_TERMS + GEO_TERMS + ("caption",)


@dataclass
class LossReport:
    terms: dict
    weights: LossWeights
    ssl: float = 0.0
    geo: float = 0.0
    total: float = 0.0


# --- prototype-distribution machinery ----------------------------------------

def softmax_rows(x):
    z = x - x.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


def sinkhorn_center(scores, n_iter=3):
    """Exponentiate, then alternately normalize columns and rows.

    Output rows sum to 1; column sums converge to batch/K, preventing
    prototype collapse in the teacher distribution.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise NonFiniteLossError("sinkhorn scores", float(np.sum(scores)))
    p = np.exp(scores - scores.max())
    for _ in range(int(n_iter)):
        p = p / p.sum(axis=0, keepdims=True)
        p = p / p.sum(axis=1, keepdims=True)
    return p


def dino_loss(student_cls, teacher_cls, w_student, w_teacher,
              student_temp=0.1, teacher_temp=0.07, n_sinkhorn=3):
    """Cross-entropy between pooled-CLS prototype distributions.

    ``student_cls``/``teacher_cls`` are (B, T, d) CLS-token sequences; they
    are temporal-mean-pooled, projected to K prototypes, and compared with
    the teacher side Sinkhorn-centered.  Returns (loss, d_student_cls,
    d_w_student); the teacher is a stop-gradient target.
    """
    student_cls = np.asarray(student_cls, dtype=np.float64)
    teacher_cls = np.asarray(teacher_cls, dtype=np.float64)
    if student_cls.ndim != 3 or teacher_cls.ndim != 3:
        raise ShapeError("CLS sequences must be (B, T, d)")
    if w_student.shape != w_teacher.shape:
        raise ShapeError(
            f"prototype count mismatch: {w_student.shape} vs {w_teacher.shape}")
    b, t, _ = student_cls.shape

    pooled_s = student_cls.mean(axis=1)                   # (B, d)
    pooled_t = teacher_cls.mean(axis=1)
    logits_s = pooled_s @ w_student / student_temp        # (B, K)
    p_s = softmax_rows(logits_s)
    p_t = sinkhorn_center(pooled_t @ w_teacher / teacher_temp, n_sinkhorn)

    log_p_s = logits_s - logits_s.max(axis=-1, keepdims=True)
    log_p_s = log_p_s - np.log(np.exp(log_p_s).sum(axis=-1, keepdims=True))
    loss = float(-(p_t * log_p_s).sum(axis=1).mean())

    dlogits = (p_s - p_t) / (b * student_temp)
    dpooled = dlogits @ w_student.T
    d_student_cls = np.repeat(dpooled[:, None, :], t, axis=1) / t
    d_w_student = pooled_s.T @ dlogits
    return loss, d_student_cls, d_w_student


def ibot_loss(student_scores, teacher_scores, mask_indices,
              student_temp=0.1, teacher_temp=0.07, n_sinkhorn=3):
    """Mean student-teacher cross-entropy over masked patch positions only.

    Scores are (N, K) prototype logits; the teacher rows at the masked
    indices are Sinkhorn-centered.  An empty mask yields loss 0 by
    convention.  Returns (loss, d_student_scores).
    """
    student_scores = np.asarray(student_scores, dtype=np.float64)
    teacher_scores = np.asarray(teacher_scores, dtype=np.float64)
    if student_scores.shape != teacher_scores.shape:
        raise ShapeError("student/teacher score shapes differ")
    idx = np.asarray(mask_indices, dtype=np.int64).reshape(-1)
    if idx.size == 0:
        return 0.0, np.zeros_like(student_scores)
    if idx.min() < 0 or idx.max() >= student_scores.shape[0]:
        raise IndexError("mask index outside the patch-token range")

    logits_s = student_scores[idx] / student_temp
    p_s = softmax_rows(logits_s)
    p_t = sinkhorn_center(teacher_scores[idx] / teacher_temp, n_sinkhorn)

    log_p_s = logits_s - logits_s.max(axis=-1, keepdims=True)
    log_p_s = log_p_s - np.log(np.exp(log_p_s).sum(axis=-1, keepdims=True))
    n_mask = idx.size
    loss = float(-(p_t * log_p_s).sum() / n_mask)

    d_student = np.zeros_like(student_scores)
    np.add.at(d_student, idx, (p_s - p_t) / (n_mask * student_temp))
    return loss, d_student


def koleo_loss(x):
    """Negative mean log nearest-neighbor distance; spreads a feature batch.

    Brute-force O(n^2) nearest neighbors.  Returns (loss, dx).
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n < 2:
        raise ShapeError(f"KoLeo needs at least 2 points, got {n}")
    diff = x[:, None, :] - x[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=-1))
    np.fill_diagonal(dist, np.inf)
    nn = dist.argmin(axis=1)
    rho = dist[np.arange(n), nn]
    if np.any(rho == 0.0):
        raise DegenerateFeaturesError("duplicate points: nearest-neighbor distance is zero")
    loss = float(-np.log(rho).mean())

    dx = np.zeros_like(x)
    for i in range(n):
        j = nn[i]
        g = (x[i] - x[j]) / (n * rho[i] ** 2)
        dx[i] -= g
        dx[j] += g
    return loss, dx


def gram_loss(x_student, x_gram_teacher):
    """Squared Frobenius distance between pairwise dot-product matrices.

    Rows are L2-normalized internally; the teacher side is a fixed anchor.
    Returns (loss, d_x_student).
    """
    xs = np.asarray(x_student, dtype=np.float64)
    xg = np.asarray(x_gram_teacher, dtype=np.float64)
    if xs.shape != xg.shape:
        raise ShapeError(f"feature shapes differ: {xs.shape} vs {xg.shape}")
    ns = np.linalg.norm(xs, axis=-1, keepdims=True)
    ng = np.linalg.norm(xg, axis=-1, keepdims=True)
    if np.any(ns == 0.0) or np.any(ng == 0.0):
        raise DegenerateFeaturesError("zero-norm feature row in gram loss")
    xs_hat = xs / ns
    xg_hat = xg / ng
    diff = xs_hat @ xs_hat.T - xg_hat @ xg_hat.T
    loss = float((diff * diff).sum())

    dxs_hat = 4.0 * diff @ xs_hat
    dxs = (dxs_hat - (dxs_hat * xs_hat).sum(axis=-1, keepdims=True) * xs_hat) / ns
    return loss, dxs


# --- geometric losses ---------------------------------------------------------

def _prep_valid(valid, shape):
    if valid is None:
        valid = np.ones(shape[:-1] + (1,))
    valid = np.asarray(valid, dtype=np.float64)
    n_valid = float(valid.sum())
    if n_valid == 0:
        raise ValueError("no valid pixels")
    return valid, n_valid


def spatial_forward_diff(x):
    """Forward differences along y and x, zeros at the far edge; (..., H, W, 2c)."""
    gy = np.zeros_like(x)
    gx = np.zeros_like(x)
    gy[..., :-1, :, :] = x[..., 1:, :, :] - x[..., :-1, :, :]
    gx[..., :, :-1, :] = x[..., :, 1:, :] - x[..., :, :-1, :]
    return np.concatenate([gy, gx], axis=-1)


def _spatial_forward_diff_transpose(g):
    """Adjoint of ``spatial_forward_diff`` for (..., H, W, 2) gradients."""
    gy = g[..., 0:1]
    gx = g[..., 1:2]
    out = np.zeros_like(gy)
    out[..., 1:, :, :] += gy[..., :-1, :, :]
    out[..., :-1, :, :] -= gy[..., :-1, :, :]
    out[..., :, 1:, :] += gx[..., :, :-1, :]
    out[..., :, :-1, :] -= gx[..., :, :-1, :]
    return out


def depth_loss(depth_pred, depth_target, confidence, alpha=0.2, valid=None):
    """Confidence-weighted L1 depth + L1 spatial-gradient terms - alpha*log c.

    All terms are masked by validity and mean-reduced over the valid pixel
    count.  Returns (loss, d_depth_pred, d_confidence).
    """
    d_hat = np.asarray(depth_pred, dtype=np.float64)
    d = np.asarray(depth_target, dtype=np.float64)
    c = np.asarray(confidence, dtype=np.float64)
    if d_hat.shape != d.shape or d_hat.shape != c.shape:
        raise ShapeError("depth/target/confidence shapes differ")
    if np.any(c <= 0):
        raise ValueError("confidence must be strictly positive")
    valid, n_valid = _prep_valid(valid, d_hat.shape)

    resid = d_hat - d
    grad_resid = spatial_forward_diff(d_hat) - spatial_forward_diff(d)
    term1 = np.abs(c * resid)
    term2 = np.abs(c * grad_resid)
    term3 = -alpha * np.log(c)
    loss = float(((term1 + term3) * valid).sum() + (term2 * valid).sum()) / n_valid

    sign1 = np.sign(resid) * c * valid
    sign2 = np.sign(grad_resid) * c * valid
    dd_hat = (sign1 + _spatial_forward_diff_transpose(sign2)) / n_valid
    dc = (np.abs(resid) * np.sign(c)
          + np.abs(grad_resid).sum(axis=-1, keepdims=True)
          - alpha / c) * valid / n_valid
    return loss, dd_hat, dc


def _mean_abs(pred, target, valid, per_entry):
    resid = pred - target
    w = valid * np.ones_like(resid)
    denom = float(w.sum()) if per_entry else float(valid.sum()) * resid.shape[-1]
    loss = float((np.abs(resid) * w).sum() / denom)
    grad = np.sign(resid) * w / denom
    return loss, grad


def ray_point_camera_loss(rays_pred, rays_target, points_pred, points_target,
                          pose_pred, pose_target, valid=None):
    """Mean absolute error for ray maps, point maps, and camera poses.

    Returns ((l_ray, l_points, l_camera), grads) where grads holds
    d_rays, d_points, d_pose.
    """
    rays_pred = np.asarray(rays_pred, dtype=np.float64)
    points_pred = np.asarray(points_pred, dtype=np.float64)
    pose_pred = np.asarray(pose_pred, dtype=np.float64)
    if rays_pred.shape != np.shape(rays_target):
        raise ShapeError("ray map shapes differ")
    if points_pred.shape != np.shape(points_target):
        raise ShapeError("point map shapes differ")
    if pose_pred.shape != np.shape(pose_target):
        raise ShapeError("pose shapes differ")
    valid, _ = _prep_valid(valid, rays_pred.shape)

    l_ray, d_rays = _mean_abs(rays_pred, np.asarray(rays_target, dtype=np.float64),
                              valid, per_entry=False)
    l_points, d_points = _mean_abs(points_pred, np.asarray(points_target, dtype=np.float64),
                                   valid, per_entry=False)
    resid = pose_pred - np.asarray(pose_target, dtype=np.float64)
    l_camera = float(np.abs(resid).mean())
    d_pose = np.sign(resid) / resid.size
    grads = {"rays": d_rays, "points": d_points, "pose": d_pose}
    return (l_ray, l_points, l_camera), grads


# --- caption loss --------------------------------------------------------------

def caption_loss(z_visual, instruction, targets, decoder):
    """Token-mean negative log-likelihood under teacher forcing.

    ``decoder`` is any provider with ``forward(z_visual, instruction,
    targets) -> (probs, cache)`` yielding one normalized distribution per
    target position, and ``backward(cache, dprobs) -> d_z_visual``.
    Gradients flow through the provider into the visual tokens.
    """
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.size == 0:
        raise ValueError("caption targets must be non-empty")
    probs, cache = decoder.forward(z_visual, instruction, targets)
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape[0] != targets.size:
        raise ShapeError(f"{probs.shape[0]} distributions for {targets.size} targets")
    row_sums = probs.sum(axis=-1)
    if np.any(np.abs(row_sums - 1.0) > 1e-5):
        raise UnnormalizedDistributionError(
            f"decoder rows sum to {row_sums.min():.6f}..{row_sums.max():.6f}")

    n = targets.size
    picked = probs[np.arange(n), targets]
    loss = float(-np.log(picked).mean())

    dprobs = np.zeros_like(probs)
    dprobs[np.arange(n), targets] = -1.0 / (n * picked)
    d_z = decoder.backward(cache, dprobs)
    return loss, d_z


# --- combination ----------------------------------------------------------------

def total_loss(parts, weights: LossWeights = LossWeights()):
    """Weighted combination: lam_ssl * L_ssl + lam_geo * L_geo + lam_cap * L_cap.

    L_ssl = dino + ibot + koleo_coeff * koleo + gram;
    L_geo = depth + ray + points + camera.
    ``parts`` maps term names to scalars; missing terms count as 0.  The
    aggregates may also be given directly as "ssl" / "geo", overriding their
    composition from subterms.
    """
    vals = {}
    for name in ALL_TERMS + ("ssl", "geo"):
        if name not in parts and name in ("ssl", "geo"):
            continue
        v = float(parts.get(name, 0.0))
        if not np.isfinite(v):
            raise NonFiniteLossError(name, v)
        vals[name] = v
    ssl = vals.pop("ssl", None)
    if ssl is None:
        ssl = (vals["dino"] + vals["ibot"]
               + weights.koleo_coeff * vals["koleo"] + vals["gram"])
    geo = vals.pop("geo", None)
    if geo is None:
        geo = vals["depth"] + vals["ray"] + vals["points"] + vals["camera"]
    total = weights.lam_ssl * ssl + weights.lam_geo * geo + weights.lam_cap * vals["caption"]
    return total, LossReport(terms=vals, weights=weights, ssl=ssl, geo=geo, total=total)


def ema_update(teacher_params, student_params, momentum):
    """theta_t <- m * theta_t + (1 - m) * theta_s, in place on the teacher tree."""
    if not 0.0 <= momentum <= 1.0:
        raise ValueError(f"momentum must lie in [0, 1], got {momentum}")
    if set(teacher_params) != set(student_params):
        missing = set(teacher_params) ^ set(student_params)
        raise KeyError(f"parameter trees differ on {sorted(missing)}")
    for name, theta_t in teacher_params.items():
        theta_s = student_params[name]
        if theta_t.shape != theta_s.shape:
            raise ShapeError(f"{name}: {theta_t.shape} vs {theta_s.shape}")
        theta_t *= momentum
        theta_t += (1.0 - momentum) * theta_s
    return teacher_params
