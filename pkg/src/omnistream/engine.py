"""Streaming session API, persistence, and the synthetic training harness.

``StreamSession`` wraps the per-layer KV caches behind a push-one-frame
interface and runs the geometric heads on every push.  Checkpoints are a
small self-describing binary tensor container; configs are flat JSON.
``synth_scene`` ray-casts a plane-plus-spheres world with exact ground truth
(the point map is composed from depth and rays, so composition holds to
machine precision).  ``toy_train`` interleaves the self-supervised,
geometric, and caption objectives into one gradient-descent update per step.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.spatial.transform import Rotation

from . import backbone as bb
from .attention import AttentionConfig, CapacityError
from .backbone import BackboneConfig, BackboneOutput
from .heads import (GeometricPrediction, GeometricTargets, camera_head_fwd,
                    camera_head_bwd, canonicalize_quaternion, compose_points,
                    compose_points_bwd, depth_ray_head_fwd, depth_ray_head_bwd,
                    init_camera_params, init_depth_ray_params, normalize_targets)
from .losses import (LossWeights, NonFiniteLossError, caption_loss, depth_loss,
                     dino_loss, ema_update, gram_loss, ibot_loss, koleo_loss,
                     ray_point_camera_loss, softmax_rows, total_loss)
from .numerics import ShapeError
from .rope3d import RopeConfig
from .tokenizer import TokenLayout, extract_patches
from .training import (backbone_bwd, backbone_fwd, capture_patches, embed_bwd,
                       embed_fwd, patch_slice_grad, slot_grad)

CHECKPOINT_MAGIC = b"OMST"
CHECKPOINT_VERSION = 1
_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
_TAG_FOR_KIND = {np.dtype(np.float32): 0, np.dtype(np.float64): 1,
                 np.dtype(np.uint8): 2}
_CONFIG_TENSOR = "__config__"


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedFileError(CheckpointError):
    pass


class DuplicateTensorError(CheckpointError):
    pass


class UnknownDtypeError(CheckpointError):
    pass


class MissingParameterError(CheckpointError):
    pass


# --- configuration ------------------------------------------------------------

CONFIG_KEYS = ("n_layers", "d_model", "n_heads", "patch", "selected_layers",
               "cam_enabled", "rope_base", "capacity", "loss_weights")


@dataclass(frozen=True)
class EngineConfig:
    n_layers: int
    d_model: int
    n_heads: int
    patch: int
    selected_layers: tuple
    cam_enabled: bool = True
    rope_base: float = 10000.0
    capacity: int = 64
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        object.__setattr__(self, "selected_layers", tuple(self.selected_layers))
        if self.capacity < 1:
            raise ValueError("capacity must be at least one frame")

    def backbone(self) -> BackboneConfig:
        rope = RopeConfig(d_head=self.d_model // self.n_heads, base=self.rope_base)
        attn = AttentionConfig(d_model=self.d_model, n_heads=self.n_heads, rope=rope)
        return BackboneConfig(n_layers=self.n_layers, attention=attn,
                              selected_layers=self.selected_layers,
                              patch_size=self.patch, cam_enabled=self.cam_enabled)

    def layout(self, frames, height, width) -> TokenLayout:
        if height % self.patch or width % self.patch:
            raise ShapeError(f"frame {height}x{width} not divisible by patch {self.patch}")
        return TokenLayout(frames=frames, h=height // self.patch,
                           w=width // self.patch, patch=self.patch,
                           cam_enabled=self.cam_enabled)


def config_to_dict(config: EngineConfig) -> dict:
    d = {k: getattr(config, k) for k in CONFIG_KEYS}
    d["selected_layers"] = list(config.selected_layers)
    d["loss_weights"] = asdict(config.loss_weights)
    return d


def config_from_dict(data: dict) -> EngineConfig:
    missing = [k for k in CONFIG_KEYS if k not in data]
    if missing:
        raise KeyError(f"config missing keys: {missing}")
    kwargs = {k: data[k] for k in CONFIG_KEYS}
    kwargs["selected_layers"] = tuple(kwargs["selected_layers"])
    kwargs["loss_weights"] = LossWeights(**kwargs["loss_weights"])
    return EngineConfig(**kwargs)


def config_save(path, config: EngineConfig):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(config_to_dict(config), f, indent=2, sort_keys=True)
        f.write("\n")


def config_load(path) -> EngineConfig:
    with open(path, "r", encoding="utf-8") as f:
        return config_from_dict(json.load(f))


def required_param_names(config: EngineConfig):
    names = bb.param_names(config.backbone())
    names += ["depth_head.w1", "depth_head.b1", "depth_head.w2", "depth_head.b2"]
    if config.cam_enabled:
        names += ["camera_head.w1", "camera_head.b1",
                  "camera_head.w2", "camera_head.b2"]
    return names


def init_engine_params(config: EngineConfig, seed=0, dtype=np.float32) -> dict:
    params = bb.init_params(config.backbone(), seed=seed, dtype=dtype)
    params.update(init_depth_ray_params(len(config.selected_layers),
                                        config.d_model, seed=seed + 1, dtype=dtype))
    if config.cam_enabled:
        params.update(init_camera_params(config.d_model, seed=seed + 2, dtype=dtype))
    return params


# --- checkpoints ----------------------------------------------------------------

def _write_tensor(buf, name, arr):
    name_bytes = name.encode("utf-8")
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _TAG_FOR_KIND:
        raise UnknownDtypeError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
    tag = _TAG_FOR_KIND[arr.dtype]
    buf.write(struct.pack("<H", len(name_bytes)))
    buf.write(name_bytes)
    buf.write(struct.pack("<B", arr.ndim))
    for dim in arr.shape:
        buf.write(struct.pack("<Q", dim))
    buf.write(struct.pack("<B", tag))
    buf.write(arr.astype(_DTYPE_TAGS[tag], copy=False).tobytes())


def checkpoint_save(path, params: dict, config: EngineConfig):
    buf = io.BytesIO()
    names = sorted(params)
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<I", len(names) + 1))
    echo = json.dumps(config_to_dict(config), sort_keys=True).encode("utf-8")
    _write_tensor(buf, _CONFIG_TENSOR, np.frombuffer(echo, dtype=np.uint8))
    for name in names:
        _write_tensor(buf, name, params[name])
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def _read_exact(f, n, what):
    data = f.read(n)
    if len(data) != n:
        raise TruncatedFileError(f"truncated checkpoint while reading {what}")
    return data


def checkpoint_load(path, expected_config: EngineConfig | None = None):
    """Load (params, config) from a checkpoint file.

    With ``expected_config``, every parameter the config requires must be
    present; the first missing one is named in the error.
    """
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise BadMagicError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        version, = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise VersionMismatchError(
                f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
        count, = struct.unpack("<I", _read_exact(f, 4, "tensor count"))
        tensors = {}
        for _ in range(count):
            name_len, = struct.unpack("<H", _read_exact(f, 2, "name length"))
            name = _read_exact(f, name_len, "name").decode("utf-8")
            if name in tensors:
                raise DuplicateTensorError(f"duplicate tensor name {name!r}")
            rank, = struct.unpack("<B", _read_exact(f, 1, f"{name} rank"))
            dims = [struct.unpack("<Q", _read_exact(f, 8, f"{name} dim"))[0]
                    for _ in range(rank)]
            tag, = struct.unpack("<B", _read_exact(f, 1, f"{name} dtype"))
            if tag not in _DTYPE_TAGS:
                raise UnknownDtypeError(f"tensor {name!r} has unknown dtype tag {tag}")
            dtype = _DTYPE_TAGS[tag]
            n_bytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            payload = _read_exact(f, n_bytes, f"{name} payload")
            tensors[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
        if f.read(1):
            raise CheckpointError("trailing bytes after final tensor")

    if _CONFIG_TENSOR not in tensors:
        raise MissingParameterError(f"checkpoint lacks the {_CONFIG_TENSOR} echo")
    config = config_from_dict(json.loads(tensors.pop(_CONFIG_TENSOR).tobytes()))
    if expected_config is not None:
        for name in required_param_names(expected_config):
            if name not in tensors:
                raise MissingParameterError(f"checkpoint missing parameter {name!r}")
    return tensors, config


# --- streaming session -----------------------------------------------------------

@dataclass
class SessionOutput:
    patch_features: dict            # layer -> (1, h, w, d)
    z_cls: np.ndarray               # (1, d)
    z_cam: np.ndarray | None
    prediction: GeometricPrediction


class StreamSession:
    """Single-owner incremental inference over a growing frame stream."""

    def __init__(self, params, config: EngineConfig, capacity_frames,
                 height, width):
        if capacity_frames < 1:
            raise ValueError("capacity must be at least one frame")
        for name in required_param_names(config):
            if name not in params:
                raise MissingParameterError(f"parameter {name!r} missing")
        self.params = params
        self.config = config
        self.height = height
        self.width = width
        self.layout = config.layout(1, height, width)
        self.bcfg = config.backbone()
        dtype = params["patch_proj.w"].dtype
        self.caches = bb.make_caches(self.bcfg, self.layout, capacity_frames,
                                     dtype=dtype)
        self.capacity_frames = capacity_frames
        self.z_cls_history = []
        self.z_cam_history = []

    @property
    def frames(self) -> int:
        return self.caches[0].frames if self.caches else len(self.z_cls_history)

    def push(self, frame) -> SessionOutput:
        return session_push(self, frame)


def session_new(params, config: EngineConfig, capacity_frames,
                height=None, width=None) -> StreamSession:
    height = height if height is not None else 2 * config.patch
    width = width if width is not None else height
    return StreamSession(params, config, capacity_frames, height, width)


def embed_frames(frames, params, layout: TokenLayout):
    """Tokenize frames at the parameters' dtype; (T, H, W, 3) -> flat (N, d)."""
    w = params["patch_proj.w"]
    patches = extract_patches(np.asarray(frames, dtype=w.dtype), layout.patch)
    proj = patches @ w + params["patch_proj.b"]
    t, _, d = proj.shape
    x = np.empty((t, layout.per_frame, d), dtype=w.dtype)
    x[:, : layout.n_special] = params["special_embeds"][None]
    x[:, layout.n_special:] = proj
    return x.reshape(t * layout.per_frame, d)


def run_heads(out: BackboneOutput, params, config: EngineConfig) -> GeometricPrediction:
    (depth, rays, conf), _ = depth_ray_head_fwd(
        out.patch_features, params, out.layout, config.selected_layers)
    points = compose_points(depth, rays)
    if config.cam_enabled:
        pose, _ = camera_head_fwd(out.z_cam, params)
    else:
        pose = np.zeros((depth.shape[0], 9))
        pose[:, 0] = 1.0
    return GeometricPrediction(depth=depth, rays=rays, confidence=conf,
                               points=points, pose=pose)


def session_push(session: StreamSession, frame) -> SessionOutput:
    frame = np.asarray(frame)
    if frame.shape != (session.height, session.width, 3):
        raise ShapeError(
            f"expected ({session.height}, {session.width}, 3) frame, got {frame.shape}")
    flat = embed_frames(frame[None], session.params, session.layout)
    out = bb.forward_streaming_step(flat, session.caches, session.params,
                                    session.bcfg, session.layout)
    pred = run_heads(out, session.params, session.config)
    session.z_cls_history.append(out.z_cls[0])
    if out.z_cam is not None:
        session.z_cam_history.append(out.z_cam[0])
    return SessionOutput(patch_features=out.patch_features, z_cls=out.z_cls,
                         z_cam=out.z_cam, prediction=pred)


def forward_offline(frames, params, config: EngineConfig):
    """Whole-clip oracle path: full masked attention plus heads."""
    frames = np.asarray(frames)
    t, height, width, _ = frames.shape
    layout = config.layout(t, height, width)
    flat = embed_frames(frames, params, layout)
    tokens = _FlatTokens(flat, layout)
    out = bb.forward_full(tokens, params, config.backbone())
    return out, run_heads(out, params, config)


class _FlatTokens:
    """Minimal TokenSequence stand-in over an already-flat embedding."""

    def __init__(self, flat, layout):
        self.flat = flat
        self.layout = layout


@dataclass(frozen=True)
class CacheStats:
    frames: int
    tokens: int
    resident_value_count: int
    byte_estimate: int


def cache_stats(session: StreamSession) -> CacheStats:
    tokens = session.frames * session.layout.per_frame
    n_layers = session.config.n_layers
    count = tokens * 2 * n_layers * session.config.d_model
    itemsize = session.caches[0].k.dtype.itemsize if session.caches else 4
    return CacheStats(frames=session.frames, tokens=tokens,
                      resident_value_count=count,
                      byte_estimate=count * itemsize)


# --- synthetic scenes ------------------------------------------------------------

@dataclass
class SyntheticScene:
    frames: np.ndarray             # (T, H, W, 3) in [0, 1]
    targets: GeometricTargets
    fov: float


def _look_at(center, target, up=(0.0, 0.0, 1.0)):
    fwd = np.asarray(target, dtype=np.float64) - center
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    # camera axes as world-frame columns: +x right, +y down, +z forward
    return np.stack([right, down, fwd], axis=1)


def synth_scene(seed, t_frames, height, width, motion_scale=1.0,
                fov=np.pi / 3) -> SyntheticScene:
    """Ray-cast a checkered ground plane plus colored spheres.

    The camera orbits the scene on a smooth path (``motion_scale=0`` holds it
    still).  Ground truth is exact: depth is the ray-hit parameter and the
    point map is literally origin + depth * direction.
    """
    if t_frames < 1:
        raise ValueError("need at least one frame")
    rng = np.random.default_rng(seed)
    n_spheres = 3
    sph_c = np.column_stack([rng.uniform(-1.2, 1.2, n_spheres),
                             rng.uniform(-1.2, 1.2, n_spheres),
                             rng.uniform(0.25, 0.6, n_spheres)])
    sph_r = rng.uniform(0.2, 0.45, n_spheres)
    sph_col = rng.uniform(0.3, 1.0, (n_spheres, 3))
    check_a = rng.uniform(0.1, 0.5, 3)
    check_b = rng.uniform(0.5, 0.9, 3)

    half = np.tan(fov / 2.0)
    ys, xs = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    px = (xs + 0.5 - width / 2.0) / (width / 2.0) * half
    py = (ys + 0.5 - height / 2.0) / (height / 2.0) * half
    d_cam = np.stack([px, py, np.ones_like(px)], axis=-1)
    d_cam /= np.linalg.norm(d_cam, axis=-1, keepdims=True)

    frames = np.zeros((t_frames, height, width, 3))
    depth = np.zeros((t_frames, height, width, 1))
    rays = np.zeros((t_frames, height, width, 6))
    valid = np.zeros((t_frames, height, width, 1))
    pose = np.zeros((t_frames, 9))

    for t in range(t_frames):
        phase = 0.35 * t
        center = np.array([2.2 + motion_scale * 0.5 * np.sin(phase),
                           motion_scale * 1.2 * np.sin(phase * 0.7),
                           1.6 + motion_scale * 0.3 * np.cos(phase)])
        rot = _look_at(center, (0.0, 0.0, 0.3))
        d_world = d_cam @ rot.T

        best = np.full((height, width), np.inf)
        color = np.zeros((height, width, 3))
        # ground plane z = 0
        dz = d_world[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            t_plane = np.where(dz < -1e-9, -center[2] / dz, np.inf)
        t_safe = np.where(np.isfinite(t_plane), t_plane, 0.0)
        hit_xy = center[None, None, :2] + t_safe[..., None] * d_world[..., :2]
        checker = (np.floor(hit_xy[..., 0]) + np.floor(hit_xy[..., 1])) % 2
        plane_col = np.where(checker[..., None] > 0.5, check_b, check_a)
        better = t_plane < best
        best = np.where(better, t_plane, best)
        color = np.where(better[..., None], plane_col, color)
        # spheres
        for c, r, col in zip(sph_c, sph_r, sph_col):
            oc = center - c
            b_half = (d_world * oc).sum(axis=-1)
            disc = b_half * b_half - (oc @ oc - r * r)
            root = np.sqrt(np.maximum(disc, 0.0))
            t_hit = np.where(disc > 0.0, -b_half - root, np.inf)
            t_hit = np.where(t_hit > 1e-6, t_hit, np.inf)
            better = t_hit < best
            best = np.where(better, t_hit, best)
            shade = 0.6 + 0.4 * np.clip(-d_world[..., 2], 0.0, 1.0)
            color = np.where(better[..., None], col * shade[..., None], color)

        hit = np.isfinite(best)
        d_t = np.where(hit, best, 1.0)[..., None]
        frames[t] = np.clip(np.where(hit[..., None], color, 0.0), 0.0, 1.0)
        depth[t] = d_t
        valid[t] = hit[..., None].astype(np.float64)
        rays[t, ..., 0:3] = center
        rays[t, ..., 3:6] = d_world
        q = canonicalize_quaternion(
            Rotation.from_matrix(rot).as_quat(scalar_first=True))
        pose[t] = np.concatenate([q, center, [fov, fov]])

    points = compose_points(depth, rays)
    targets = GeometricTargets(depth=depth, rays=rays, points=points,
                               pose=pose, valid=valid)
    return SyntheticScene(frames=frames, targets=targets, fov=fov)


# --- toy caption task --------------------------------------------------------------

CAPTION_VOCAB = 8
N_QUADRANTS = 4


def init_caption_params(d_model, seed=0):
    rng = np.random.default_rng(seed)
    return {
        "cap.inst": 1.0 + rng.standard_normal((N_QUADRANTS, d_model)) * 0.02,
        "cap.w": rng.standard_normal((d_model, CAPTION_VOCAB)) * 0.02,
        "cap.b": np.zeros(CAPTION_VOCAB),
    }


def caption_targets_for(frame):
    """One token per quadrant: 2 * dominant channel + bright bit."""
    h, w = frame.shape[0] // 2, frame.shape[1] // 2
    quads = [frame[:h, :w], frame[:h, w:], frame[h:, :w], frame[h:, w:]]
    tokens = []
    for quad in quads:
        mean = quad.reshape(-1, 3).mean(axis=0)
        tokens.append(2 * int(mean.argmax()) + int(mean.mean() > 0.5))
    return np.array(tokens, dtype=np.int64)


class ToyCaptionDecoder:
    """Minimal next-token-distribution provider over pooled visual features.

    Each instruction token selects a learned query added to the pooled
    features; logits are a linear readout.  ``backward`` returns the visual
    gradient and stashes parameter gradients on ``self.grads``.
    """

    def __init__(self, params):
        self.params = params
        self.grads = None

    def forward(self, z_visual, instruction, targets):
        z_visual = np.asarray(z_visual, dtype=np.float64)
        instruction = np.asarray(instruction, dtype=np.int64)
        pooled = z_visual.mean(axis=0)
        # RMS-normalize so logit scale is independent of feature magnitude
        norm = max(float(np.linalg.norm(pooled)), 1e-12)
        p_hat = np.sqrt(pooled.size) * pooled / norm
        gate = self.params["cap.inst"][instruction]
        x = p_hat[None, :] * gate
        logits = x @ self.params["cap.w"] + self.params["cap.b"]
        probs = softmax_rows(logits)
        return probs, (z_visual.shape[0], x, probs, instruction, p_hat, norm,
                       gate)

    def backward(self, cache, dprobs):
        n_visual, x, probs, instruction, p_hat, norm, gate = cache
        dlogits = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
        w = self.params["cap.w"]
        dx = dlogits @ w.T
        grads = {"cap.w": x.T @ dlogits, "cap.b": dlogits.sum(axis=0),
                 "cap.inst": np.zeros_like(self.params["cap.inst"])}
        np.add.at(grads["cap.inst"], instruction, dx * p_hat[None, :])
        self.grads = grads
        dp_hat = (dx * gate).sum(axis=0)
        u = p_hat / np.sqrt(p_hat.size)
        dpooled = np.sqrt(p_hat.size) * (dp_hat - (dp_hat @ u) * u) / norm
        return np.broadcast_to(dpooled / n_visual,
                               (n_visual, dpooled.size)).copy()


# --- toy multi-task training ---------------------------------------------------------

def toy_config() -> EngineConfig:
    return EngineConfig(n_layers=2, d_model=32, n_heads=2, patch=8,
                        selected_layers=(1, 2), cam_enabled=True,
                        rope_base=10000.0, capacity=8)


N_PROTOTYPES = 16
TOY_FRAMES = 2
TOY_SIZE = 32


def _init_toy_params(config: EngineConfig, seed):
    params = init_engine_params(config, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 10)
    d = config.d_model
    params["mask_token"] = rng.standard_normal(d) * 0.02
    params["dino.proto"] = rng.standard_normal((d, N_PROTOTYPES)) * 0.1
    params["ibot.proto"] = rng.standard_normal((d, N_PROTOTYPES)) * 0.1
    params.update(init_caption_params(d, seed=seed + 11))
    return params


def _clip_captures(acts, layout, n_layers):
    """Final-layer CLS rows, CAM rows, and patch features from flat activations."""
    final = acts[n_layers]
    d = final.shape[-1]
    per = final.reshape(layout.frames, layout.per_frame, d)
    z_cls = per[:, layout.cls_slot(), :]
    z_cam = per[:, layout.cam_slot(), :] if layout.cam_enabled else None
    patches = capture_patches(final, layout)
    return z_cls, z_cam, patches


def _accumulate(total, grads, scale):
    for name, g in grads.items():
        if scale == 0.0:
            continue
        if name in total:
            total[name] = total[name] + scale * g
        else:
            total[name] = scale * g


def _ssl_step(params, teacher, gram_anchor, scenes, rng, config, layout, weights):
    """Two-clip self-distillation pass; returns term values and student grads."""
    n_layers = config.n_layers
    d = config.d_model
    grads = {}
    student_cls = []
    teacher_cls = []
    clip_data = []

    for clip in range(2):
        scene = scenes[(clip + rng.integers(len(scenes))) % len(scenes)]
        noise_s = rng.normal(0.0, 0.02, scene.frames.shape)
        noise_t = rng.normal(0.0, 0.02, scene.frames.shape)
        mask = rng.random((layout.frames, layout.h * layout.w)) < 0.3

        x_s, embed_cache = embed_fwd(scene.frames + noise_s, params, layout,
                                     masked_patches=mask)
        acts_s, caches_s = backbone_fwd(x_s, params, config.backbone(), layout)
        x_t = embed_fwd(scene.frames + noise_t, teacher, layout)[0]
        acts_t, _ = backbone_fwd(x_t, teacher, config.backbone(), layout)

        cls_s, _, patches_s = _clip_captures(acts_s, layout, n_layers)
        cls_t, _, patches_t = _clip_captures(acts_t, layout, n_layers)
        student_cls.append(cls_s)
        teacher_cls.append(cls_t)
        clip_data.append((scene, mask, embed_cache, acts_s, caches_s,
                          patches_s, patches_t))

    student_cls = np.stack(student_cls)
    teacher_cls = np.stack(teacher_cls)
    l_dino, d_cls, d_wproto = dino_loss(student_cls, teacher_cls,
                                        params["dino.proto"], teacher["dino.proto"])
    grads["dino.proto"] = d_wproto

    pooled = student_cls.mean(axis=1)
    l_koleo, d_pooled = koleo_loss(pooled)
    d_cls_koleo = np.repeat(d_pooled[:, None, :], layout.frames, axis=1)
    d_cls_koleo *= weights.koleo_coeff / layout.frames

    l_ibot_total = 0.0
    l_gram_total = 0.0
    n_clips = len(clip_data)
    for clip, (scene, mask, embed_cache, acts, caches, patches_s,
               patches_t) in enumerate(clip_data):
        feats = patches_s.reshape(-1, d)
        feats_t = patches_t.reshape(-1, d)
        scores_s = feats @ params["ibot.proto"]
        scores_t = feats_t @ teacher["ibot.proto"]
        idx = np.flatnonzero(mask.reshape(-1))
        l_ibot, d_scores = ibot_loss(scores_s, scores_t, idx)
        l_ibot_total += l_ibot / n_clips
        d_feats = (d_scores @ params["ibot.proto"].T) / n_clips
        _accumulate(grads, {"ibot.proto": feats.T @ d_scores / n_clips}, 1.0)

        # gram anchoring over visible patches only; mask tokens carry no
        # structure worth matching against the frozen anchor
        vis = np.flatnonzero(~mask.reshape(-1))
        anchor = gram_anchor[id(scene)]
        l_gram, d_feats_gram = gram_loss(feats[vis], anchor[vis])
        l_gram_total += l_gram / n_clips
        d_feats[vis] += d_feats_gram / n_clips

        d_patch = d_feats.reshape(layout.frames, layout.h, layout.w, d)
        dact = patch_slice_grad(d_patch, layout, d)
        dact += slot_grad(d_cls[clip] + d_cls_koleo[clip], layout,
                          layout.cls_slot(), d)
        dx, param_grads = backbone_bwd(caches, {n_layers: dact}, config.backbone())
        _accumulate(grads, param_grads, 1.0)
        _accumulate(grads, embed_bwd(embed_cache, dx), 1.0)

    terms = {"dino": l_dino, "ibot": l_ibot_total,
             "koleo": l_koleo, "gram": l_gram_total}
    return terms, grads


def _geo_step(params, scene, config, layout, weights):
    n_layers = config.n_layers
    d = config.d_model
    x, embed_cache = embed_fwd(scene.frames, params, layout)
    acts, caches = backbone_fwd(x, params, config.backbone(), layout)
    patch_features = {la: capture_patches(acts[la], layout)
                      for la in config.selected_layers}
    _, z_cam, _ = _clip_captures(acts, layout, n_layers)

    (depth, rays, conf), head_cache = depth_ray_head_fwd(
        patch_features, params, layout, config.selected_layers)
    points = compose_points(depth, rays)
    pose, cam_cache = camera_head_fwd(z_cam, params)

    targets = normalize_targets(scene.targets)
    l_depth, dd1, dc = depth_loss(depth, targets.depth, conf,
                                  alpha=weights.alpha, valid=targets.valid)
    (l_ray, l_points, l_camera), g = ray_point_camera_loss(
        rays, targets.rays, points, targets.points, pose, targets.pose,
        valid=targets.valid)
    dd2, dr2 = compose_points_bwd(depth, rays, g["points"])
    ddepth = dd1 + dd2
    drays = g["rays"] + dr2

    per_layer, grads = depth_ray_head_bwd(head_cache, ddepth, drays, dc)
    dz_cam, cam_grads = camera_head_bwd(cam_cache, g["pose"])
    _accumulate(grads, cam_grads, 1.0)

    dacts = {}
    for la in config.selected_layers:
        dacts[la] = patch_slice_grad(per_layer[la], layout, d)
    cam_flat = slot_grad(dz_cam, layout, layout.cam_slot(), d)
    dacts[n_layers] = dacts.get(n_layers, np.zeros_like(cam_flat)) + cam_flat
    dx, bb_grads = backbone_bwd(caches, dacts, config.backbone())
    _accumulate(grads, bb_grads, 1.0)
    _accumulate(grads, embed_bwd(embed_cache, dx), 1.0)

    terms = {"depth": l_depth, "ray": l_ray, "points": l_points,
             "camera": l_camera}
    return terms, grads


def _cap_step(params, scene, config, layout):
    n_layers = config.n_layers
    d = config.d_model
    x, embed_cache = embed_fwd(scene.frames, params, layout)
    acts, caches = backbone_fwd(x, params, config.backbone(), layout)
    _, _, patches = _clip_captures(acts, layout, n_layers)
    z_visual = patches.reshape(-1, d)

    instruction = np.arange(N_QUADRANTS)
    targets = caption_targets_for(scene.frames[-1])
    decoder = ToyCaptionDecoder(params)
    l_cap, d_z = caption_loss(z_visual, instruction, targets, decoder)
    grads = dict(decoder.grads)

    d_patch = d_z.reshape(layout.frames, layout.h, layout.w, d)
    dact = patch_slice_grad(d_patch, layout, d)
    dx, bb_grads = backbone_bwd(caches, {n_layers: dact}, config.backbone())
    _accumulate(grads, bb_grads, 1.0)
    _accumulate(grads, embed_bwd(embed_cache, dx), 1.0)
    return {"caption": l_cap}, grads


def toy_train(steps, seed=0, config: EngineConfig | None = None,
              weights: LossWeights | None = None, lr=0.08,
              ema_momentum=0.996):
    """Interleaved multi-task toy training; returns the per-term loss history.

    Each step runs the self-supervised, geometric, and caption objectives on
    synthetic data, accumulates one weighted gradient, and applies a single
    plain gradient-descent update followed by an EMA teacher update.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    config = config if config is not None else toy_config()
    weights = weights if weights is not None else config.loss_weights
    layout = config.layout(TOY_FRAMES, TOY_SIZE, TOY_SIZE)

    params = _init_toy_params(config, seed)
    teacher = {k: v.copy() for k, v in params.items()
               if not k.startswith("cap.")}
    scenes = [synth_scene(seed * 100 + i, TOY_FRAMES, TOY_SIZE, TOY_SIZE)
              for i in range(3)]

    # frozen step-0 teacher features anchor the gram term for the whole run
    gram_anchor = {}
    for scene in scenes:
        x = embed_fwd(scene.frames, teacher, layout)[0]
        acts, _ = backbone_fwd(x, teacher, config.backbone(), layout)
        _, _, patches = _clip_captures(acts, layout, config.n_layers)
        gram_anchor[id(scene)] = patches.reshape(-1, config.d_model)

    rng = np.random.default_rng(seed)
    history = {name: [] for name in
               ("step", "total", "dino", "ibot", "koleo", "gram",
                "depth", "ray", "points", "camera", "caption")}

    for step in range(1, steps + 1):
        scene = scenes[(step - 1) % len(scenes)]
        grads = {}
        parts = {}

        ssl_terms, ssl_grads = _ssl_step(params, teacher, gram_anchor, scenes,
                                         rng, config, layout, weights)
        parts.update(ssl_terms)
        _accumulate(grads, ssl_grads, weights.lam_ssl)

        geo_terms, geo_grads = _geo_step(params, scene, config, layout, weights)
        parts.update(geo_terms)
        _accumulate(grads, geo_grads, weights.lam_geo)

        cap_terms, cap_grads = _cap_step(params, scene, config, layout)
        parts.update(cap_terms)
        _accumulate(grads, cap_grads, weights.lam_cap)

        try:
            total, report = total_loss(parts, weights)
        except NonFiniteLossError as exc:
            raise NonFiniteLossError(f"{exc.term} at step {step}",
                                     parts.get(exc.term, float("nan"))) from exc

        for name, g in grads.items():
            params[name] -= lr * g
        ema_update(teacher,
                   {k: params[k] for k in teacher}, ema_momentum)

        history["step"].append(step)
        history["total"].append(total)
        for name, value in report.terms.items():
            history[name].append(value)
    return history
