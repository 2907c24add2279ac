"""Pre-norm transformer stack over the token sequence.

Per block: x += attn(norm(x)); x += mlp(norm(x)) with GELU.  Dense patch
features are captured after every selected layer; CLS and CAM tokens after
the last layer.  No final normalization layer, so a zero-layer stack is the
identity map (useful for tests).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import truncnorm

from . import attention as attn_mod
from .attention import AttentionConfig, KVCache, cached_attention_step, full_causal_attention
from .numerics import ShapeError, gelu, layer_norm
from .tokenizer import TokenLayout, TokenSequence


class ParameterError(ValueError):
    pass


class CacheSyncError(RuntimeError):
    """Per-layer caches disagree on the current frame counter."""


@dataclass(frozen=True)
class BackboneConfig:
    n_layers: int
    attention: AttentionConfig
    selected_layers: tuple
    patch_size: int = 16
    mlp_ratio: int = 4
    cam_enabled: bool = True

    def __post_init__(self):
        object.__setattr__(self, "selected_layers", tuple(sorted(set(self.selected_layers))))
        if not self.selected_layers:
            raise ValueError("selected_layers must be non-empty")
        lo = 0 if self.n_layers == 0 else 1
        for layer in self.selected_layers:
            if not lo <= layer <= self.n_layers:
                raise ValueError(
                    f"selected layer {layer} outside [{lo}, {self.n_layers}]")

    @property
    def d_model(self) -> int:
        return self.attention.d_model

    @property
    def d_mlp(self) -> int:
        return self.mlp_ratio * self.d_model


@dataclass
class BackboneOutput:
    patch_features: dict           # layer -> (T, h, w, d)
    z_cls: np.ndarray              # (T, d)
    z_cam: np.ndarray | None = None  # (T, d) when the CAM token is enabled
    layout: TokenLayout | None = None


def _trunc_normal(rng, shape, std=0.02):
    return truncnorm.rvs(-2.0, 2.0, scale=std, size=int(np.prod(shape)),
                         random_state=rng).reshape(shape)


def block_param_names(i):
    p = f"blocks.{i}."
    return [p + n for n in (
        "norm1.g", "norm1.b",
        "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv",
        "attn.wo", "attn.bo",
        "norm2.g", "norm2.b",
        "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2",
    )]


def param_names(config: BackboneConfig):
    names = ["patch_proj.w", "patch_proj.b", "special_embeds"]
    for i in range(config.n_layers):
        names.extend(block_param_names(i))
    return names


def init_params(config: BackboneConfig, seed=0, dtype=np.float32):
    """Truncated-normal (std 0.02) projections, zero biases, unit norm gains."""
    rng = np.random.default_rng(seed)
    d = config.d_model
    p = config.patch_size
    n_special = 6 if config.cam_enabled else 5
    params = {
        "patch_proj.w": _trunc_normal(rng, (3 * p * p, d)),
        "patch_proj.b": np.zeros(d),
        "special_embeds": _trunc_normal(rng, (n_special, d)),
    }
    for i in range(config.n_layers):
        pre = f"blocks.{i}."
        params[pre + "norm1.g"] = np.ones(d)
        params[pre + "norm1.b"] = np.zeros(d)
        for w, shape in (("wq", (d, d)), ("wk", (d, d)), ("wv", (d, d)), ("wo", (d, d))):
            params[pre + "attn." + w] = _trunc_normal(rng, shape)
            params[pre + "attn.b" + w[1]] = np.zeros(d)
        params[pre + "norm2.g"] = np.ones(d)
        params[pre + "norm2.b"] = np.zeros(d)
        params[pre + "mlp.w1"] = _trunc_normal(rng, (d, config.d_mlp))
        params[pre + "mlp.b1"] = np.zeros(config.d_mlp)
        params[pre + "mlp.w2"] = _trunc_normal(rng, (config.d_mlp, d))
        params[pre + "mlp.b2"] = np.zeros(d)
    return {k: np.ascontiguousarray(v, dtype=dtype) for k, v in params.items()}


def _block_params(params, i, config):
    out = {}
    for name in block_param_names(i):
        if name not in params:
            raise ParameterError(f"missing parameter {name} for layer {i}")
        out[name.split(".", 2)[2]] = params[name]
    d = config.d_model
    if out["attn.wq"].shape != (d, d):
        raise ParameterError(f"layer {i}: attn.wq shape {out['attn.wq'].shape} != ({d}, {d})")
    return out


def _mlp(x, bp):
    h = gelu(x @ bp["mlp.w1"] + bp["mlp.b1"])
    return h @ bp["mlp.w2"] + bp["mlp.b2"]


def _capture_patches(x_flat, layout: TokenLayout, frames=None):
    frames = layout.frames if frames is None else frames
    d = x_flat.shape[1]
    per = x_flat.reshape(frames, layout.per_frame, d)
    patches = per[:, layout.patch_slots(), :]
    return np.ascontiguousarray(patches.reshape(frames, layout.h, layout.w, d))


def forward_full(tokens: TokenSequence, params, config: BackboneConfig) -> BackboneOutput:
    """Offline forward over all frames with masked causal attention."""
    layout = tokens.layout
    x = np.asarray(tokens.flat)
    if x.shape[1] != config.d_model:
        raise ShapeError(f"token width {x.shape[1]} != d_model {config.d_model}")
    positions = layout.positions()

    captures = {}
    if 0 in config.selected_layers:
        captures[0] = _capture_patches(x, layout)
    for i in range(config.n_layers):
        bp = _block_params(params, i, config)
        h = layer_norm(x, bp["norm1.g"], bp["norm1.b"])
        q = h @ bp["attn.wq"] + bp["attn.bq"]
        k = h @ bp["attn.wk"] + bp["attn.bk"]
        v = h @ bp["attn.wv"] + bp["attn.bv"]
        a = full_causal_attention(q, k, v, config.attention, layout, positions)
        x = x + (a @ bp["attn.wo"] + bp["attn.bo"])
        x = x + _mlp(layer_norm(x, bp["norm2.g"], bp["norm2.b"]), bp)
        if (i + 1) in config.selected_layers:
            captures[i + 1] = _capture_patches(x, layout)

    per = x.reshape(layout.frames, layout.per_frame, config.d_model)
    z_cls = np.ascontiguousarray(per[:, layout.cls_slot(), :])
    z_cam = np.ascontiguousarray(per[:, layout.cam_slot(), :]) if layout.cam_enabled else None
    return BackboneOutput(patch_features=captures, z_cls=z_cls, z_cam=z_cam, layout=layout)


def make_caches(config: BackboneConfig, layout: TokenLayout, capacity_frames,
                dtype=np.float32):
    return [KVCache(config.attention, layout.per_frame, capacity_frames, dtype=dtype)
            for _ in range(config.n_layers)]


def forward_streaming_step(frame_tokens, caches, params, config: BackboneConfig,
                           layout: TokenLayout):
    """Push one frame through all layers via the per-layer KV caches.

    Returns the same captures as ``forward_full`` restricted to this frame:
    patch features per selected layer (1, h, w, d), z_cls and z_cam rows.
    """
    if len(caches) != config.n_layers:
        raise CacheSyncError(f"{len(caches)} caches for {config.n_layers} layers")
    counters = {c.frames for c in caches}
    if len(counters) > 1:
        raise CacheSyncError(f"desynchronized caches: frame counters {sorted(counters)}")
    t = caches[0].frames if caches else 0

    x = np.asarray(frame_tokens)
    if x.shape != (layout.per_frame, config.d_model):
        raise ShapeError(
            f"expected ({layout.per_frame}, {config.d_model}) frame tokens, got {x.shape}")
    positions = attn_mod._frame_positions(layout, t)

    captures = {}
    if 0 in config.selected_layers:
        captures[0] = _capture_patches(x, layout, frames=1)
    appended = 0
    try:
        for i in range(config.n_layers):
            bp = _block_params(params, i, config)
            h = layer_norm(x, bp["norm1.g"], bp["norm1.b"])
            q = h @ bp["attn.wq"] + bp["attn.bq"]
            k = h @ bp["attn.wk"] + bp["attn.bk"]
            v = h @ bp["attn.wv"] + bp["attn.bv"]
            a = cached_attention_step(q, k, v, caches[i], config.attention, layout, positions)
            appended += 1
            x = x + (a @ bp["attn.wo"] + bp["attn.bo"])
            x = x + _mlp(layer_norm(x, bp["norm2.g"], bp["norm2.b"]), bp)
            if (i + 1) in config.selected_layers:
                captures[i + 1] = _capture_patches(x, layout, frames=1)
    except attn_mod.CapacityError:
        # roll back partial appends so the caches stay mutually consistent
        for cache in caches[:appended]:
            cache.frames -= 1
        raise

    z_cls = x[layout.cls_slot()].copy()
    z_cam = x[layout.cam_slot()].copy() if layout.cam_enabled else None
    return BackboneOutput(
        patch_features=captures,
        z_cls=z_cls.reshape(1, -1),
        z_cam=None if z_cam is None else z_cam.reshape(1, -1),
        layout=layout,
    )
