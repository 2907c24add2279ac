"""Named property suites behind the ``verify`` CLI subcommand.

Each suite runs randomized checks and returns one result per property with
the maximum observed deviation.  The causality suite accepts an
``inject_leak`` flag that swaps in a deliberately non-causal attention
forward; it must then fail, which the tests use as a negative control.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backbone as bb
from .attention import _kernel, _merge_heads, _split_heads
from .engine import (EngineConfig, ToyCaptionDecoder, forward_offline,
                     init_caption_params, init_engine_params, session_new,
                     synth_scene)
from .heads import camera_head, init_camera_params
from .losses import (LossWeights, caption_loss, depth_loss, dino_loss,
                     gram_loss, ibot_loss, koleo_loss, ray_point_camera_loss,
                     sinkhorn_center, total_loss)
from .numerics import finite_difference_gradient
from .rope3d import (RopeConfig, T_AXIS, X_AXIS, Y_AXIS, plan_axes,
                     rotate_pairs, rotation_tables)
from .rope3d import tables_for_positions
from .tokenizer import TokenLayout


@dataclass
class PropertyResult:
    name: str
    passed: bool
    deviation: float
    detail: str = ""


def _random_config(rng, max_layers=3):
    d_head = int(rng.choice([16, 16, 32]))
    heads = int(rng.integers(1, 5)) if d_head == 16 else int(rng.integers(1, 3))
    layers = int(rng.integers(1, max_layers + 1))
    selected = sorted({layers, int(rng.integers(1, layers + 1))})
    return EngineConfig(
        n_layers=layers, d_model=d_head * heads, n_heads=heads,
        patch=int(rng.choice([2, 4])), selected_layers=tuple(selected),
        cam_enabled=bool(rng.integers(0, 2)), capacity=64)


def _push_all(params, config, frames):
    t, h, w, _ = frames.shape
    session = session_new(params, config, capacity_frames=t, height=h, width=w)
    return [session.push(frames[i]) for i in range(t)]


def _stream_vs_offline_dev(params, config, frames):
    outs = _push_all(params, config, frames)
    full, _ = forward_offline(frames, params, config)
    dev = 0.0
    for t, out in enumerate(outs):
        dev = max(dev, float(np.abs(out.z_cls[0] - full.z_cls[t]).max()))
        if out.z_cam is not None:
            dev = max(dev, float(np.abs(out.z_cam[0] - full.z_cam[t]).max()))
        for layer, feats in out.patch_features.items():
            dev = max(dev, float(np.abs(feats[0] - full.patch_features[layer][t]).max()))
    return dev


def suite_equivalence(seed=0, trials=20):
    rng = np.random.default_rng(seed)
    results = []
    worst32 = 0.0
    worst64 = 0.0
    for trial in range(trials):
        config = _random_config(rng)
        t = int(rng.integers(1, 6))
        grid = int(rng.integers(2, 4))
        size = grid * config.patch
        frames = rng.random((t, size, size, 3))
        dtype = np.float64 if trial % 4 == 0 else np.float32
        params = init_engine_params(config, seed=seed + trial, dtype=dtype)
        dev = _stream_vs_offline_dev(params, config, frames)
        if dtype == np.float32:
            worst32 = max(worst32, dev)
        else:
            worst64 = max(worst64, dev)
    results.append(PropertyResult(
        "stream equals offline (float32)", worst32 < 1e-5, worst32))
    results.append(PropertyResult(
        "stream equals offline (float64)", worst64 < 1e-10, worst64))
    return results


def _leaky_full_attention(q, k, v, config, layout, positions=None):
    """Non-causal stand-in: every token sees the whole sequence."""
    if positions is None:
        positions = layout.positions()
    plan = plan_axes(config.rope)
    cos, sin = tables_for_positions(positions, plan)
    qh = _split_heads(np.asarray(q), config)
    kh = _split_heads(np.asarray(k), config)
    vh = _split_heads(np.asarray(v), config)
    qr = np.ascontiguousarray(rotate_pairs(qh, cos[None], sin[None]))
    kr = np.ascontiguousarray(rotate_pairs(kh, cos[None], sin[None]))
    scale = 1.0 / np.sqrt(config.d_head)
    out = _kernel().full_causal(qr, kr, vh, layout.n_total, scale)
    return _merge_heads(out)


def suite_causality(seed=0, trials=20, inject_leak=False):
    rng = np.random.default_rng(seed)
    original = bb.full_causal_attention
    if inject_leak:
        bb.full_causal_attention = _leaky_full_attention
    worst = 0.0
    try:
        for trial in range(trials):
            config = _random_config(rng)
            t = int(rng.integers(2, 6))
            size = 2 * config.patch
            params = init_engine_params(config, seed=seed + trial)
            frames = rng.random((t, size, size, 3)).astype(np.float32)
            cut = int(rng.integers(0, t - 1))
            altered = frames.copy()
            altered[cut + 1:] = rng.random(altered[cut + 1:].shape)
            a, _ = forward_offline(frames, params, config)
            b, _ = forward_offline(altered, params, config)
            dev = float(np.abs(a.z_cls[: cut + 1] - b.z_cls[: cut + 1]).max())
            for layer in a.patch_features:
                dev = max(dev, float(np.abs(
                    a.patch_features[layer][: cut + 1]
                    - b.patch_features[layer][: cut + 1]).max()))
            worst = max(worst, dev)
    finally:
        bb.full_causal_attention = original
    return [PropertyResult(
        "future frames never alter past outputs (bit-identical)",
        worst == 0.0, worst)]


def suite_rope(seed=0, trials=100):
    rng = np.random.default_rng(seed)
    results = []

    worst_alloc = 0
    for d_head in (16, 32, 64):
        plan = plan_axes(RopeConfig(d_head=d_head))
        counts = plan.axis_counts()
        pairs = d_head // 2
        expected = {T_AXIS: pairs // 4, Y_AXIS: 3 * pairs // 8, X_AXIS: 3 * pairs // 8}
        worst_alloc = max(worst_alloc, sum(
            abs(counts[a] - expected[a]) for a in expected))
    results.append(PropertyResult(
        "axis allocation is exactly 2:3:3 (t:y:x)", worst_alloc == 0,
        float(worst_alloc)))

    worst_shift = 0.0
    worst_norm = 0.0
    for _ in range(trials):
        d_head = int(rng.choice([16, 32, 64]))
        plan = plan_axes(RopeConfig(d_head=d_head))
        p1 = rng.integers(0, 8, size=3)
        p2 = rng.integers(0, 8, size=3)
        delta = rng.integers(-4, 5, size=3)
        q = rng.standard_normal(d_head)
        k = rng.standard_normal(d_head)

        def logit(a, b):
            coords = np.stack([a, b]).astype(np.float64)
            cos, sin = rotation_tables(coords, np.zeros(2, dtype=bool), plan)
            qr = rotate_pairs(q[None], cos[0:1], sin[0:1])[0]
            kr = rotate_pairs(k[None], cos[1:2], sin[1:2])[0]
            return float(qr @ kr), float(np.linalg.norm(qr))

        base, norm = logit(p1, p2)
        shifted, _ = logit(p1 + delta, p2 + delta)
        worst_shift = max(worst_shift, abs(base - shifted))
        worst_norm = max(worst_norm, abs(norm - float(np.linalg.norm(q))))
    results.append(PropertyResult(
        "logits invariant under joint integer position shifts",
        worst_shift < 1e-5, worst_shift))
    results.append(PropertyResult(
        "rotation preserves vector norms", worst_norm < 1e-6, worst_norm))
    return results


def _rel_err(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    numeric = np.asarray(numeric, dtype=np.float64).reshape(-1)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float((np.abs(analytic - numeric) / denom).max())


def suite_gradients(seed=0, trials=3):
    rng = np.random.default_rng(seed)
    results = []
    tol = 1e-3

    def check(name, analytic, f, x):
        numeric = finite_difference_gradient(f, x)
        err = _rel_err(analytic, numeric)
        results.append(PropertyResult(f"{name} gradient vs finite differences",
                                      err < tol, err))

    b, t, d, k = 2, 2, 6, 4
    s_cls = rng.standard_normal((b, t, d))
    t_cls = rng.standard_normal((b, t, d))
    w_s = rng.standard_normal((d, k))
    w_t = rng.standard_normal((d, k))
    _, d_cls, d_ws = dino_loss(s_cls, t_cls, w_s, w_t)
    check("dino (student CLS)", d_cls,
          lambda x: dino_loss(x.reshape(b, t, d), t_cls, w_s, w_t)[0],
          s_cls.copy())
    check("dino (student prototypes)", d_ws,
          lambda x: dino_loss(s_cls, t_cls, x.reshape(d, k), w_t)[0],
          w_s.copy())

    n = 8
    scores_s = rng.standard_normal((n, k))
    scores_t = rng.standard_normal((n, k))
    idx = np.array([1, 4, 6])
    _, d_scores = ibot_loss(scores_s, scores_t, idx)
    check("ibot (student scores)", d_scores,
          lambda x: ibot_loss(x.reshape(n, k), scores_t, idx)[0],
          scores_s.copy())

    pts = rng.standard_normal((6, 4))
    _, d_pts = koleo_loss(pts)
    check("koleo", d_pts, lambda x: koleo_loss(x.reshape(6, 4))[0], pts.copy())

    xs = rng.standard_normal((5, 4))
    xg = rng.standard_normal((5, 4))
    _, d_xs = gram_loss(xs, xg)
    check("gram", d_xs, lambda x: gram_loss(x.reshape(5, 4), xg)[0], xs.copy())

    shape = (1, 4, 4, 1)
    d_hat = rng.uniform(0.5, 2.0, shape)
    d_tgt = rng.uniform(0.5, 2.0, shape)
    conf = rng.uniform(0.5, 2.0, shape)
    _, dd, dc = depth_loss(d_hat, d_tgt, conf)
    check("depth (prediction)", dd,
          lambda x: depth_loss(x.reshape(shape), d_tgt, conf)[0], d_hat.copy())
    check("depth (confidence)", dc,
          lambda x: depth_loss(d_hat, d_tgt, x.reshape(shape))[0], conf.copy())

    rp = rng.standard_normal((1, 2, 2, 6))
    rt = rng.standard_normal((1, 2, 2, 6))
    pp = rng.standard_normal((1, 2, 2, 3))
    pt = rng.standard_normal((1, 2, 2, 3))
    gp = rng.standard_normal((1, 9))
    gt = rng.standard_normal((1, 9))
    _, grads = ray_point_camera_loss(rp, rt, pp, pt, gp, gt)
    check("ray", grads["rays"],
          lambda x: ray_point_camera_loss(x.reshape(rp.shape), rt, pp, pt,
                                          gp, gt)[0][0], rp.copy())
    check("points", grads["points"],
          lambda x: ray_point_camera_loss(rp, rt, x.reshape(pp.shape), pt,
                                          gp, gt)[0][1], pp.copy())
    check("camera", grads["pose"],
          lambda x: ray_point_camera_loss(rp, rt, pp, pt, x.reshape(gp.shape),
                                          gt)[0][2], gp.copy())

    dm = 6
    cap_params = init_caption_params(dm, seed=seed)
    z = rng.standard_normal((5, dm))
    instruction = np.array([0, 1, 2])
    targets = np.array([1, 3, 0])
    _, d_z = caption_loss(z, instruction, targets, ToyCaptionDecoder(cap_params))
    check("caption (visual tokens)", d_z,
          lambda x: caption_loss(x.reshape(5, dm), instruction, targets,
                                 ToyCaptionDecoder(cap_params))[0], z.copy())
    return results


def suite_geometry(seed=0, trials=5):
    results = []
    worst = 0.0
    for s in range(trials):
        scene = synth_scene(seed + s, 8, 16, 16)
        composed = (scene.targets.rays[..., 0:3]
                    + scene.targets.depth * scene.targets.rays[..., 3:6])
        worst = max(worst, float(np.abs(composed - scene.targets.points).max()))
    results.append(PropertyResult(
        "point maps compose exactly from depth and rays", worst < 1e-6, worst))

    static = synth_scene(seed, 4, 8, 8, motion_scale=0.0)
    dev = float(np.abs(static.targets.rays - static.targets.rays[0]).max())
    results.append(PropertyResult(
        "static camera yields identical rays across frames", dev == 0.0, dev))

    rng = np.random.default_rng(seed)
    params = init_camera_params(16, seed=seed)
    worst_q = 0.0
    min_f = np.inf
    for _ in range(20):
        pose = camera_head(rng.standard_normal((3, 16)), params)
        worst_q = max(worst_q, float(np.abs(
            np.linalg.norm(pose[:, :4], axis=-1) - 1.0).max()))
        min_f = min(min_f, float(pose[:, 7:9].min()))
    results.append(PropertyResult(
        "camera quaternions unit-norm", worst_q < 1e-5, worst_q))
    results.append(PropertyResult(
        "camera fov strictly positive", min_f > 0.0, min_f))
    return results


def suite_losses(seed=0, trials=20):
    rng = np.random.default_rng(seed)
    results = []

    worst = 0.0
    for _ in range(trials):
        x = rng.standard_normal((8, 5))
        loss, _ = koleo_loss(x)
        rho = [min(np.sqrt(((x[i] - x[j]) ** 2).sum()) for j in range(8) if j != i)
               for i in range(8)]
        oracle = float(-np.log(np.array(rho)).mean())
        worst = max(worst, abs(loss - oracle))
    results.append(PropertyResult(
        "koleo matches brute-force nearest-neighbor oracle", worst == 0.0, worst))

    xs = np.eye(2, 3)
    xg = np.array([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    val, _ = gram_loss(xs, xg)
    results.append(PropertyResult(
        "gram 2x2 hand case equals 2", abs(val - 2.0) < 1e-12, abs(val - 2.0)))
    zero, _ = gram_loss(xs, xs)
    results.append(PropertyResult(
        "gram of identical inputs is 0", zero == 0.0, zero))

    worst_row = 0.0
    worst_col = 0.0
    for _ in range(trials):
        scores = rng.random((4, 3))
        p = sinkhorn_center(scores, n_iter=10)
        worst_row = max(worst_row, float(np.abs(p.sum(axis=1) - 1.0).max()))
        worst_col = max(worst_col, float(np.abs(p.sum(axis=0) - 4 / 3).max()))
    results.append(PropertyResult(
        "sinkhorn rows sum to 1", worst_row < 1e-9, worst_row))
    results.append(PropertyResult(
        "sinkhorn columns sum to batch/K", worst_col < 1e-6, worst_col))

    parts = {"dino": 1.0, "ibot": 1.0, "koleo": 1.0, "gram": 1.0,
             "geo": 1.0, "caption": 1.0}
    total, _ = total_loss(parts, LossWeights())
    results.append(PropertyResult(
        "worked total-loss example equals 2.31", abs(total - 2.31) < 1e-12,
        abs(total - 2.31)))
    return results


SUITES = {
    "equivalence": suite_equivalence,
    "causality": suite_causality,
    "rope": suite_rope,
    "gradients": suite_gradients,
    "geometry": suite_geometry,
    "losses": suite_losses,
}


def run_suite(name, seed=0, trials=None, **kwargs):
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}")
    fn = SUITES[name]
    if trials is None:
        return fn(seed=seed, **kwargs)
    return fn(seed=seed, trials=trials, **kwargs)
