"""Feed-forward geometric heads.

The depth/ray decoder is a per-patch 2-layer MLP over concatenated
selected-layer features, with nearest-neighbor upsampling to pixel
resolution.  Depth and confidence go through a clamped exp so they are
strictly positive; ray directions are L2-normalized.  The camera head is a
2-layer MLP on the CAM token producing (quaternion, translation, fov) with
the quaternion unit-normalized and sign-canonicalized (first non-zero
component non-negative) and fov kept positive via softplus.  The principal
point is fixed at the image center.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ShapeError, gelu
from .tokenizer import TokenLayout
from .training import gelu_bwd, gelu_fwd, linear_bwd, linear_fwd

RAW_CLAMP = 30.0  # exp saturation guard
_EPS_NORM = 1e-12


class MissingLayerError(KeyError):
    pass


class CameraDisabledError(RuntimeError):
    pass


@dataclass
class GeometricPrediction:
    depth: np.ndarray        # (T, H, W, 1), > 0
    rays: np.ndarray         # (T, H, W, 6) = (origin, unit direction)
    confidence: np.ndarray   # (T, H, W, 1), > 0
    points: np.ndarray       # (T, H, W, 3)
    pose: np.ndarray         # (T, 9) = (quaternion, translation, fov)

    def validate(self, tol=1e-5):
        if np.any(self.depth <= 0):
            raise ValueError("depth must be strictly positive")
        if np.any(self.confidence <= 0):
            raise ValueError("confidence must be strictly positive")
        dn = np.linalg.norm(self.rays[..., 3:6], axis=-1)
        if np.any(np.abs(dn - 1.0) > tol):
            raise ValueError("ray directions must be unit-norm")
        qn = np.linalg.norm(self.pose[:, :4], axis=-1)
        if np.any(np.abs(qn - 1.0) > tol):
            raise ValueError("pose quaternions must be unit-norm")


@dataclass
class GeometricTargets:
    depth: np.ndarray
    rays: np.ndarray
    points: np.ndarray
    pose: np.ndarray
    valid: np.ndarray  # (T, H, W, 1) in {0, 1}


def init_depth_ray_params(n_layers_selected, d_model, hidden=128, seed=0,
                          dtype=np.float64):
    rng = np.random.default_rng(seed)
    d_in = n_layers_selected * d_model
    return {
        "depth_head.w1": (rng.standard_normal((d_in, hidden)) * 0.02).astype(dtype),
        "depth_head.b1": np.zeros(hidden, dtype=dtype),
        "depth_head.w2": (rng.standard_normal((hidden, 8)) * 0.02).astype(dtype),
        "depth_head.b2": np.zeros(8, dtype=dtype),
    }


def init_camera_params(d_model, hidden=64, seed=0, dtype=np.float64):
    rng = np.random.default_rng(seed)
    params = {
        "camera_head.w1": (rng.standard_normal((d_model, hidden)) * 0.02).astype(dtype),
        "camera_head.b1": np.zeros(hidden, dtype=dtype),
        "camera_head.w2": (rng.standard_normal((hidden, 9)) * 0.02).astype(dtype),
        "camera_head.b2": np.zeros(9, dtype=dtype),
    }
    # bias the raw quaternion away from the all-zero vector
    params["camera_head.b2"][0] = 1.0
    return params


def canonicalize_quaternion(q, tol=1e-12):
    """Unit-normalize rows and flip sign so the first non-zero component is >= 0."""
    q = np.asarray(q, dtype=np.float64)
    out = q / np.maximum(np.linalg.norm(q, axis=-1, keepdims=True), _EPS_NORM)
    flat = out.reshape(-1, 4)
    for row in flat:
        for comp in row:
            if abs(comp) > tol:
                if comp < 0:
                    row *= -1.0
                break
    return flat.reshape(q.shape)


def _concat_features(patch_features, layers):
    feats = []
    for layer in layers:
        if layer not in patch_features:
            raise MissingLayerError(f"layer {layer} missing from backbone captures")
        feats.append(patch_features[layer])
    return np.concatenate(feats, axis=-1)


def _upsample_nearest(x, p):
    """(T, h, w, c) -> (T, h*p, w*p, c)."""
    return np.repeat(np.repeat(x, p, axis=1), p, axis=2)


def _decode_raw(raw):
    """(..., 8) raw -> (depth, ray6, confidence) with positivity/unit constraints."""
    clamped = np.clip(raw, -RAW_CLAMP, RAW_CLAMP)
    depth = np.exp(clamped[..., 0:1])
    conf = np.exp(clamped[..., 7:8])
    origin = raw[..., 1:4]
    direction = raw[..., 4:7]
    norm = np.maximum(np.linalg.norm(direction, axis=-1, keepdims=True), _EPS_NORM)
    rays = np.concatenate([origin, direction / norm], axis=-1)
    return depth, rays, conf


def depth_ray_head(patch_features, params, layout: TokenLayout, layers):
    """Per-patch MLP decoder: (depth, rays, confidence) at pixel resolution."""
    feats = _concat_features(patch_features, layers)
    h = gelu(feats @ params["depth_head.w1"] + params["depth_head.b1"])
    raw = h @ params["depth_head.w2"] + params["depth_head.b2"]
    raw_up = _upsample_nearest(raw, layout.patch)
    return _decode_raw(raw_up)


def depth_ray_head_fwd(patch_features, params, layout: TokenLayout, layers):
    """Training path with cache; outputs identical to ``depth_ray_head``."""
    feats = _concat_features(patch_features, layers)
    m1, c1 = linear_fwd(feats, params["depth_head.w1"], params["depth_head.b1"])
    g1, cg = gelu_fwd(m1)
    raw, c2 = linear_fwd(g1, params["depth_head.w2"], params["depth_head.b2"])
    raw_up = _upsample_nearest(raw, layout.patch)
    depth, rays, conf = _decode_raw(raw_up)
    cache = (c1, cg, c2, raw_up, depth, conf, rays, layout, layers,
             [patch_features[la].shape for la in layers])
    return (depth, rays, conf), cache


def depth_ray_head_bwd(cache, ddepth, drays, dconf):
    """Returns per-layer feature grads (dict layer -> (T,h,w,d)) and param grads."""
    c1, cg, c2, raw_up, depth, conf, rays, layout, layers, shapes = cache
    p = layout.patch

    draw_up = np.zeros_like(raw_up)
    inside = np.abs(raw_up) < RAW_CLAMP
    draw_up[..., 0:1] = ddepth * depth * inside[..., 0:1]
    draw_up[..., 7:8] = dconf * conf * inside[..., 7:8]
    draw_up[..., 1:4] = drays[..., 0:3]
    # unit-normalization backward for the direction slice
    direction_raw = raw_up[..., 4:7]
    norm = np.maximum(np.linalg.norm(direction_raw, axis=-1, keepdims=True), _EPS_NORM)
    dhat = rays[..., 3:6]
    g = drays[..., 3:6]
    draw_up[..., 4:7] = (g - (g * dhat).sum(axis=-1, keepdims=True) * dhat) / norm

    # nearest-neighbor upsample backward = sum over each p x p cell
    t, hp, wp, c = draw_up.shape
    draw = draw_up.reshape(t, hp // p, p, wp // p, p, c).sum(axis=(2, 4))

    dg1, dw2, db2 = linear_bwd(c2, draw)
    dm1 = gelu_bwd(cg, dg1)
    dfeats, dw1, db1 = linear_bwd(c1, dm1)
    grads = {"depth_head.w1": dw1, "depth_head.b1": db1,
             "depth_head.w2": dw2, "depth_head.b2": db2}

    per_layer = {}
    offset = 0
    for layer, shape in zip(layers, shapes):
        d = shape[-1]
        per_layer[layer] = dfeats[..., offset:offset + d]
        offset += d
    return per_layer, grads


def _softplus(x):
    return np.logaddexp(0.0, x)


def camera_head(z_cam, params, cam_enabled=True):
    """(T, d) CAM tokens -> (T, 9) poses (unit quaternion, translation, fov > 0)."""
    out, _ = camera_head_fwd(z_cam, params, cam_enabled)
    return out


def camera_head_fwd(z_cam, params, cam_enabled=True):
    if not cam_enabled:
        raise CameraDisabledError("camera head requires the CAM token")
    z_cam = np.asarray(z_cam)
    if z_cam.ndim != 2:
        raise ShapeError(f"expected (T, d) CAM tokens, got {z_cam.shape}")
    m1, c1 = linear_fwd(z_cam, params["camera_head.w1"], params["camera_head.b1"])
    g1, cg = gelu_fwd(m1)
    raw, c2 = linear_fwd(g1, params["camera_head.w2"], params["camera_head.b2"])

    q_raw = raw[:, :4]
    norm = np.maximum(np.linalg.norm(q_raw, axis=-1, keepdims=True), _EPS_NORM)
    q_unit = q_raw / norm
    sign = np.ones((raw.shape[0], 1))
    for i, row in enumerate(q_unit):
        for comp in row:
            if abs(comp) > 1e-12:
                sign[i, 0] = 1.0 if comp >= 0 else -1.0
                break
    q = q_unit * sign
    f_raw = raw[:, 7:9]
    f = _softplus(f_raw)
    pose = np.concatenate([q, raw[:, 4:7], f], axis=-1)
    cache = (c1, cg, c2, q_unit, norm, sign, f_raw)
    return pose, cache


def camera_head_bwd(cache, dpose):
    c1, cg, c2, q_unit, norm, sign, f_raw = cache
    draw = np.zeros((dpose.shape[0], 9))
    dq = dpose[:, :4] * sign
    draw[:, :4] = (dq - (dq * q_unit).sum(axis=-1, keepdims=True) * q_unit) / norm
    draw[:, 4:7] = dpose[:, 4:7]
    from scipy.special import expit
    draw[:, 7:9] = dpose[:, 7:9] * expit(f_raw)  # softplus'

    dg1, dw2, db2 = linear_bwd(c2, draw)
    dm1 = gelu_bwd(cg, dg1)
    dz, dw1, db1 = linear_bwd(c1, dm1)
    grads = {"camera_head.w1": dw1, "camera_head.b1": db1,
             "camera_head.w2": dw2, "camera_head.b2": db2}
    return dz, grads


def compose_points(depth, rays):
    """Per-pixel P = origin + depth * direction."""
    depth = np.asarray(depth)
    rays = np.asarray(rays)
    if depth.shape[:-1] != rays.shape[:-1] or depth.shape[-1] != 1 or rays.shape[-1] != 6:
        raise ShapeError(f"incompatible depth {depth.shape} / rays {rays.shape}")
    return rays[..., 0:3] + depth * rays[..., 3:6]


def compose_points_bwd(depth, rays, dpoints):
    ddepth = (dpoints * rays[..., 3:6]).sum(axis=-1, keepdims=True)
    drays = np.concatenate([dpoints, dpoints * depth], axis=-1)
    return ddepth, drays


def normalize_targets(targets: GeometricTargets) -> GeometricTargets:
    """Scale depth, points, and translation by the mean valid depth of the clip.

    Makes the regression targets scale-free; ray directions are unchanged.
    """
    valid = targets.valid.astype(bool)
    if not valid.any():
        return targets
    scale = float(targets.depth[valid].mean())
    if scale <= 0:
        raise ValueError(f"mean valid target depth must be positive, got {scale}")
    pose = targets.pose.copy()
    pose[:, 4:7] = pose[:, 4:7] / scale
    rays = targets.rays.copy()
    rays[..., 0:3] = rays[..., 0:3] / scale
    return GeometricTargets(
        depth=targets.depth / scale,
        rays=rays,
        points=targets.points / scale,
        pose=pose,
        valid=targets.valid,
    )
