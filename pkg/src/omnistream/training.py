"""Hand-written forward/backward passes for toy training.

There is no autodiff graph: every layer exposes a forward that returns a
cache and a matching backward.  The training forward mirrors the inference
path in ``backbone`` (pre-norm blocks, rotary causal attention) and is tested
against it; backward passes are validated with central finite differences.

Everything here runs in float64: finite differences in float32 are too noisy
for the 1e-3 gradient tolerance.
"""

from __future__ import annotations

import numpy as np

from .backbone import BackboneConfig, _block_params
from .numerics import ShapeError
from .rope3d import plan_axes, rotate_pairs, rotate_pairs_inverse, tables_for_positions
from .tokenizer import TokenLayout, extract_patches

SQRT2 = np.sqrt(2.0)
INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


# --- primitive layers -------------------------------------------------------

def linear_fwd(x, w, b):
    return x @ w + b, (x, w)


def linear_bwd(cache, dout):
    x, w = cache
    dx = dout @ w.T
    dw = x.reshape(-1, x.shape[-1]).T @ dout.reshape(-1, dout.shape[-1])
    db = dout.reshape(-1, dout.shape[-1]).sum(axis=0)
    return dx, dw, db


def layernorm_fwd(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    return xhat * g + b, (xhat, inv, g)


def layernorm_bwd(cache, dout):
    xhat, inv, g = cache
    dg = (dout * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    db = dout.reshape(-1, dout.shape[-1]).sum(axis=0)
    dxhat = dout * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dg, db


def gelu_fwd(x):
    from scipy.special import erf
    phi_cdf = 0.5 * (1.0 + erf(x / SQRT2))
    return x * phi_cdf, (x, phi_cdf)


def gelu_bwd(cache, dout):
    x, phi_cdf = cache
    pdf = INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return dout * (phi_cdf + x * pdf)


def softmax_masked_fwd(scores, future_mask):
    z = scores.copy()
    z[..., future_mask] = -np.inf
    z -= z.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


# --- attention / transformer block ------------------------------------------

def attention_fwd(x, bp, config, cos, sin, future_mask):
    """Causal rotary attention, training path with full cache."""
    heads, dh = config.n_heads, config.d_head
    n = x.shape[0]
    q, cq = linear_fwd(x, bp["attn.wq"], bp["attn.bq"])
    k, ck = linear_fwd(x, bp["attn.wk"], bp["attn.bk"])
    v, cv = linear_fwd(x, bp["attn.wv"], bp["attn.bv"])

    def split(a):
        return a.reshape(n, heads, dh).transpose(1, 0, 2)

    qh, kh, vh = split(q), split(k), split(v)
    qr = rotate_pairs(qh, cos[None], sin[None])
    kr = rotate_pairs(kh, cos[None], sin[None])
    scale = 1.0 / np.sqrt(dh)
    scores = (qr @ kr.transpose(0, 2, 1)) * scale
    probs = softmax_masked_fwd(scores, future_mask)
    ctx = probs @ vh
    merged = ctx.transpose(1, 0, 2).reshape(n, heads * dh)
    out, co = linear_fwd(merged, bp["attn.wo"], bp["attn.bo"])
    cache = (cq, ck, cv, co, qr, kr, vh, probs, cos, sin, scale, config)
    return out, cache


def attention_bwd(cache, dout):
    cq, ck, cv, co, qr, kr, vh, probs, cos, sin, scale, config = cache
    heads, dh = config.n_heads, config.d_head
    n = dout.shape[0]

    dmerged, dwo, dbo = linear_bwd(co, dout)
    dctx = dmerged.reshape(n, heads, dh).transpose(1, 0, 2)

    dprobs = dctx @ vh.transpose(0, 2, 1)
    dvh = probs.transpose(0, 2, 1) @ dctx
    dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
    dqr = (dscores @ kr) * scale
    dkr = (dscores.transpose(0, 2, 1) @ qr) * scale

    dqh = rotate_pairs_inverse(dqr, cos[None], sin[None])
    dkh = rotate_pairs_inverse(dkr, cos[None], sin[None])

    def merge(a):
        return a.transpose(1, 0, 2).reshape(n, heads * dh)

    dq, dwq, dbq = linear_bwd(cq, merge(dqh))
    dk, dwk, dbk = linear_bwd(ck, merge(dkh))
    dv, dwv, dbv = linear_bwd(cv, merge(dvh))
    dx = dq + dk + dv
    grads = {"attn.wq": dwq, "attn.bq": dbq, "attn.wk": dwk, "attn.bk": dbk,
             "attn.wv": dwv, "attn.bv": dbv, "attn.wo": dwo, "attn.bo": dbo}
    return dx, grads


def block_fwd(x, bp, config, cos, sin, future_mask):
    h1, c_n1 = layernorm_fwd(x, bp["norm1.g"], bp["norm1.b"])
    a, c_attn = attention_fwd(h1, bp, config, cos, sin, future_mask)
    x1 = x + a
    h2, c_n2 = layernorm_fwd(x1, bp["norm2.g"], bp["norm2.b"])
    m1, c_l1 = linear_fwd(h2, bp["mlp.w1"], bp["mlp.b1"])
    g1, c_g = gelu_fwd(m1)
    m2, c_l2 = linear_fwd(g1, bp["mlp.w2"], bp["mlp.b2"])
    out = x1 + m2
    return out, (c_n1, c_attn, c_n2, c_l1, c_g, c_l2)


def block_bwd(cache, dout):
    c_n1, c_attn, c_n2, c_l1, c_g, c_l2 = cache
    grads = {}
    dg1, dw2, db2 = linear_bwd(c_l2, dout)
    grads["mlp.w2"], grads["mlp.b2"] = dw2, db2
    dm1 = gelu_bwd(c_g, dg1)
    dh2, dw1, db1 = linear_bwd(c_l1, dm1)
    grads["mlp.w1"], grads["mlp.b1"] = dw1, db1
    dx1, dn2g, dn2b = layernorm_bwd(c_n2, dh2)
    grads["norm2.g"], grads["norm2.b"] = dn2g, dn2b
    dx1 = dx1 + dout

    dh1, attn_grads = attention_bwd(c_attn, dx1)
    grads.update(attn_grads)
    dx, dn1g, dn1b = layernorm_bwd(c_n1, dh1)
    grads["norm1.g"], grads["norm1.b"] = dn1g, dn1b
    dx = dx + dx1
    return dx, grads


# --- embedding (tokenizer forward/backward with iBOT masking) ---------------

def embed_fwd(frames, params, layout: TokenLayout, masked_patches=None):
    """Tokenize frames for training; optionally replace patch slots by the mask token.

    ``masked_patches`` is a boolean (T, h*w) array; masked slots take
    params["mask_token"] instead of their projected embedding.
    """
    patches = extract_patches(np.asarray(frames, dtype=np.float64), layout.patch)
    w, b = params["patch_proj.w"], params["patch_proj.b"]
    proj = patches @ w + b
    t, n_patch, d = proj.shape
    if masked_patches is not None:
        proj = proj.copy()
        proj[masked_patches] = params["mask_token"]
    x = np.empty((t, layout.per_frame, d), dtype=np.float64)
    x[:, : layout.n_special] = params["special_embeds"][None]
    x[:, layout.n_special:] = proj
    cache = (patches, masked_patches, layout, t)
    return x.reshape(t * layout.per_frame, d), cache


def embed_bwd(cache, dflat):
    patches, masked_patches, layout, t = cache
    d = dflat.shape[-1]
    dx = dflat.reshape(t, layout.per_frame, d)
    grads = {
        "special_embeds": dx[:, : layout.n_special].sum(axis=0),
    }
    dproj = dx[:, layout.n_special:].copy()
    if masked_patches is not None:
        grads["mask_token"] = dproj[masked_patches].sum(axis=0)
        dproj[masked_patches] = 0.0
    flat_patches = patches.reshape(-1, patches.shape[-1])
    flat_dproj = dproj.reshape(-1, d)
    grads["patch_proj.w"] = flat_patches.T @ flat_dproj
    grads["patch_proj.b"] = flat_dproj.sum(axis=0)
    return grads


# --- full backbone ----------------------------------------------------------

def _future_mask(layout: TokenLayout):
    frame = np.arange(layout.n_total) // layout.per_frame
    return frame[:, None] < frame[None, :]


def backbone_fwd(x, params, config: BackboneConfig, layout: TokenLayout,
                 positions=None):
    """Training forward over flat tokens (N, d).

    Returns activations at every capture point: ``acts[layer]`` is the flat
    post-block activation ((N, d); layer 0 is the input), plus the final
    activation and the caches for backward.
    """
    if x.shape != (layout.n_total, config.d_model):
        raise ShapeError(f"expected ({layout.n_total}, {config.d_model}), got {x.shape}")
    plan = plan_axes(config.attention.rope)
    if positions is None:
        positions = layout.positions()
    cos, sin = tables_for_positions(positions, plan)
    future = _future_mask(layout)

    acts = {0: x}
    caches = []
    for i in range(config.n_layers):
        bp = _block_params(params, i, config)
        x, cache = block_fwd(x, bp, config.attention, cos, sin, future)
        caches.append(cache)
        acts[i + 1] = x
    return acts, caches


def backbone_bwd(caches, dacts, config: BackboneConfig):
    """Backward from per-capture gradients.

    ``dacts`` maps capture layer -> gradient w.r.t. that flat activation
    (gradients flowing from heads/losses attached there).  Returns the
    gradient w.r.t. the input tokens and per-parameter gradients.
    """
    n_layers = config.n_layers
    template = dacts[max(dacts)]
    g = np.zeros_like(template)
    grads = {}
    for i in range(n_layers, 0, -1):
        if i in dacts:
            g = g + dacts[i]
        dx, block_grads = block_bwd(caches[i - 1], g)
        for name, val in block_grads.items():
            grads[f"blocks.{i - 1}.{name}"] = val
        g = dx
    if 0 in dacts:
        g = g + dacts[0]
    return g, grads


def patch_slice_grad(dpatch, layout: TokenLayout, d):
    """Scatter a (T, h, w, d) patch-feature gradient into a flat (N, d) one."""
    t = dpatch.shape[0]
    out = np.zeros((t, layout.per_frame, d), dtype=np.float64)
    out[:, layout.patch_slots(), :] = dpatch.reshape(t, layout.h * layout.w, d)
    return out.reshape(t * layout.per_frame, d)


def capture_patches(act_flat, layout: TokenLayout):
    d = act_flat.shape[-1]
    per = act_flat.reshape(layout.frames, layout.per_frame, d)
    return per[:, layout.patch_slots(), :].reshape(layout.frames, layout.h, layout.w, d)


def slot_grad(rows, layout: TokenLayout, slot, d):
    """Scatter per-frame (T, d) gradients for one special slot into flat form."""
    t = rows.shape[0]
    out = np.zeros((t, layout.per_frame, d), dtype=np.float64)
    out[:, slot, :] = rows
    return out.reshape(t * layout.per_frame, d)
