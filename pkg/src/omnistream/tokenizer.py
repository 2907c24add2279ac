"""Frame-stream tokenization and the global-index <-> (frame, slot) layout.

Each frame contributes ``n_special`` learned special tokens followed by its
``h * w`` patch tokens, flattened row-major over (row, col).  ``tau`` maps a
global token index to its frame and is the single arbiter of causality for
the whole engine.

Special-token order is fixed as [CLS, R1..R4, CAM?]; one embedding set is
shared across frames.  Pixel values are expected in [0, 1] with no mean/std
normalization.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .numerics import ShapeError

N_REGISTERS = 4


class SlotKind(enum.Enum):
    CLS = "cls"
    REGISTER = "register"
    CAM = "cam"
    PATCH = "patch"


@dataclass(frozen=True)
class Special:
    """Position marker for tokens that carry no spatial coordinate."""

    t: int


@dataclass(frozen=True)
class TokenLayout:
    frames: int
    h: int
    w: int
    patch: int
    cam_enabled: bool = True

    def __post_init__(self):
        if self.frames < 1 or self.h < 1 or self.w < 1 or self.patch < 1:
            raise ValueError("layout extents must be positive")

    @property
    def n_special(self) -> int:
        return 1 + N_REGISTERS + (1 if self.cam_enabled else 0)

    @property
    def per_frame(self) -> int:
        return self.n_special + self.h * self.w

    @property
    def n_total(self) -> int:
        return self.frames * self.per_frame

    def tau(self, u: int) -> int:
        if not 0 <= u < self.n_total:
            raise IndexError(f"token index {u} outside [0, {self.n_total})")
        return u // self.per_frame

    def slot_kinds(self):
        """Per-slot kinds for one frame, length per_frame."""
        kinds = [SlotKind.CLS] + [SlotKind.REGISTER] * N_REGISTERS
        if self.cam_enabled:
            kinds.append(SlotKind.CAM)
        kinds.extend([SlotKind.PATCH] * (self.h * self.w))
        return kinds

    def position_of(self, u: int):
        """(t, y, x) for patch tokens, Special(t) otherwise."""
        t = self.tau(u)
        slot = u % self.per_frame
        if slot < self.n_special:
            return Special(t)
        idx = slot - self.n_special
        return (t, idx // self.w, idx % self.w)

    def positions(self):
        return [self.position_of(u) for u in range(self.n_total)]

    def cls_slot(self) -> int:
        return 0

    def cam_slot(self) -> int:
        if not self.cam_enabled:
            raise ValueError("camera token disabled in this layout")
        return 1 + N_REGISTERS

    def patch_slots(self) -> slice:
        return slice(self.n_special, self.per_frame)


def positions_arrays(positions):
    """Vectorize a position list into float coords (n, 3) and a special mask."""
    n = len(positions)
    coords = np.zeros((n, 3), dtype=np.float64)
    special = np.zeros(n, dtype=bool)
    for i, p in enumerate(positions):
        if isinstance(p, Special):
            special[i] = True
        else:
            coords[i] = p
    return coords, special


def tau(u: int, layout: TokenLayout) -> int:
    return layout.tau(u)


def position_of(u: int, layout: TokenLayout):
    return layout.position_of(u)


@dataclass
class FrameStream:
    """T frames of H x W x 3 pixels in [0, 1]."""

    frames: np.ndarray

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise ShapeError(f"expected (T, H, W, 3), got {self.frames.shape}")

    @property
    def shape(self):
        return self.frames.shape


@dataclass
class TokenSequence:
    embeddings: np.ndarray  # (T, per_frame, d)
    layout: TokenLayout
    slot_kinds: list = field(default_factory=list)

    @property
    def flat(self):
        t, pf, d = self.embeddings.shape
        return self.embeddings.reshape(t * pf, d)


def extract_patches(frames: np.ndarray, p: int) -> np.ndarray:
    """(T, H, W, 3) -> (T, h*w, 3*p*p), row-major patches, channel-fastest pixels."""
    t, height, width, _ = frames.shape
    if height % p or width % p:
        raise ShapeError(f"frame {height}x{width} not divisible by patch size {p}")
    h, w = height // p, width // p
    x = frames.reshape(t, h, p, w, p, 3)
    x = x.transpose(0, 1, 3, 2, 4, 5)  # (T, h, w, p, p, 3)
    return x.reshape(t, h * w, p * p * 3)


def patchify(stream, p, projection, special_embeds, bias=None, cam_enabled=None):
    """Tokenize a frame stream: learned special tokens then projected patches."""
    frames = stream.frames if isinstance(stream, FrameStream) else np.asarray(stream)
    if frames.ndim != 4 or frames.shape[-1] != 3:
        raise ShapeError(f"expected (T, H, W, 3), got {frames.shape}")
    projection = np.asarray(projection)
    special_embeds = np.asarray(special_embeds)
    if projection.ndim != 2 or projection.shape[0] != 3 * p * p:
        raise ShapeError(
            f"projection must be ({3 * p * p}, d), got {projection.shape}")
    d = projection.shape[1]
    if special_embeds.ndim != 2 or special_embeds.shape[1] != d:
        raise ShapeError(f"special embeddings must be (N_s, {d})")

    if cam_enabled is None:
        cam_enabled = special_embeds.shape[0] == 1 + N_REGISTERS + 1
    t, height, width, _ = frames.shape
    layout = TokenLayout(t, height // p, width // p, p, cam_enabled=cam_enabled)
    if special_embeds.shape[0] != layout.n_special:
        raise ShapeError(
            f"expected {layout.n_special} special embeddings, got {special_embeds.shape[0]}")

    patches = extract_patches(frames, p).astype(projection.dtype)
    proj = patches @ projection
    if bias is not None:
        proj = proj + np.asarray(bias)

    emb = np.empty((t, layout.per_frame, d), dtype=projection.dtype)
    emb[:, : layout.n_special] = special_embeds[None, :, :]
    emb[:, layout.n_special:] = proj
    return TokenSequence(embeddings=emb, layout=layout, slot_kinds=layout.slot_kinds())


def load_ppm(path):
    """Load a binary 8-bit PPM (P6) as (H, W, 3) floats, bit-exact value/255."""
    with open(path, "rb") as fh:
        data = fh.read()

    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1  # single whitespace after maxval

    if fields[0] != b"P6":
        raise ValueError(f"not a P6 PPM file: magic {fields[0]!r}")
    width, height, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError(f"only 8-bit PPM supported, maxval {maxval}")
    raw = np.frombuffer(data, dtype=np.uint8, count=width * height * 3, offset=pos)
    return raw.reshape(height, width, 3).astype(np.float64) / 255.0
