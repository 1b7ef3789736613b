"""Neural building blocks: RMSNorm, SwiGLU, rotary embeddings, and the three
causal attention forms (full, sliding-window, cross over a shared cache).

Attention ops take *projected* q/k/v (widths n_heads*head_dim and
n_kv_heads*head_dim) and apply scaling, masking, softmax, value mixing, and
the output projection. Grouped KV heads are served by broadcasting each KV
head across its n_heads/n_kv_heads query heads. All projections are pure
matrix products, no biases.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .tensor import Tensor, ShapeError

__all__ = [
    "AttnParams",
    "RopeConfig",
    "rms_norm",
    "swiglu",
    "rope_apply",
    "attention_full_causal",
    "attention_swa",
    "attention_cross",
    "masked_attention",
    "band_mask",
    "NEG_INF",
]

# Finite mask value: large enough that exp underflows to exactly 0 after the
# softmax max-shift, small enough to never overflow float32 score arithmetic.
NEG_INF = np.float32(-1e9)


@dataclass
class AttnParams:
    """Projection weights plus the head layout they imply.

    w_k/w_v are None for cross-decoder layers that read the shared global
    cache instead of projecting their own.
    """

    n_heads: int
    n_kv_heads: int
    head_dim: int
    w_q: Tensor
    w_o: Tensor
    w_k: Tensor | None = None
    w_v: Tensor | None = None

    def __post_init__(self):
        if self.n_heads % self.n_kv_heads != 0:
            raise ShapeError(
                f"n_heads ({self.n_heads}) must be a multiple of n_kv_heads ({self.n_kv_heads})"
            )
        if self.w_q.shape[-1] != self.n_heads * self.head_dim:
            raise ShapeError(
                f"w_q output width {self.w_q.shape[-1]} != n_heads*head_dim "
                f"({self.n_heads}*{self.head_dim})"
            )

    @property
    def q_width(self) -> int:
        return self.n_heads * self.head_dim

    @property
    def kv_width(self) -> int:
        return self.n_kv_heads * self.head_dim


@dataclass
class RopeConfig:
    head_dim: int
    base: float = 10000.0

    def __post_init__(self):
        if self.head_dim % 2 != 0:
            raise ShapeError(f"rotary head_dim must be even, got {self.head_dim}")
        if self.base <= 1.0:
            raise ShapeError(f"rotary base must exceed 1, got {self.base}")


def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    """x / sqrt(mean(x^2) + eps) * weight, per trailing row."""
    if weight.shape != (x.shape[-1],):
        raise ShapeError(f"norm weight shape {weight.shape} != ({x.shape[-1]},)")
    d = x.shape[-1]
    xd, wd = x.data, weight.data
    inv = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + np.float32(eps))
    out = xd * inv * wd

    def bwd(g):
        gw = (g * xd * inv).reshape(-1, d).sum(axis=0)
        gxw = g * wd
        dot = (gxw * xd).sum(axis=-1, keepdims=True)
        gx = inv * gxw - (inv**3 / d) * xd * dot
        return gx.astype(np.float32), gw.astype(np.float32)

    return T.apply_op((x, weight), out.astype(np.float32), bwd, "rms_norm")


def swiglu(x: Tensor, w_g: Tensor, w_1: Tensor, w_2: Tensor) -> Tensor:
    """(swish(x @ w_g) * (x @ w_1)) @ w_2"""
    gate = T.silu(T.matmul(x, w_g))
    return T.matmul(T.mul(gate, T.matmul(x, w_1)), w_2)


@lru_cache(maxsize=256)
def _rope_tables(positions: tuple, head_dim: int, base: float):
    pos = np.asarray(positions, dtype=np.float32)[:, None]
    freqs = np.float32(base) ** (
        -np.arange(0, head_dim, 2, dtype=np.float32) / np.float32(head_dim)
    )
    angles = pos * freqs[None, :]
    return np.cos(angles, dtype=np.float32), np.sin(angles, dtype=np.float32)


def rope_apply(x: Tensor, positions, cfg: RopeConfig) -> Tensor:
    """Rotate dimension pairs (2i, 2i+1) by angle pos * base^(-2i/head_dim).

    The trailing axis may be any multiple of cfg.head_dim (several heads at
    once); positions index the second-to-last axis. Norm preserving.
    """
    width = x.shape[-1]
    if width % cfg.head_dim != 0:
        raise ShapeError(f"width {width} is not a multiple of head_dim {cfg.head_dim}")
    n = x.shape[-2]
    positions = tuple(int(p) for p in positions)
    if len(positions) != n:
        raise ShapeError(f"got {len(positions)} positions for {n} rows")
    cos, sin = _rope_tables(positions, cfg.head_dim, cfg.base)
    heads = width // cfg.head_dim
    half = cfg.head_dim // 2

    def rotate(arr, c, s):
        v = arr.reshape(arr.shape[:-1] + (heads, half, 2))
        even, odd = v[..., 0], v[..., 1]
        out = np.empty_like(v)
        out[..., 0] = even * c - odd * s
        out[..., 1] = even * s + odd * c
        return np.ascontiguousarray(out.reshape(arr.shape))

    # cos/sin index rows: broadcast over heads, align the position axis.
    c = cos[:, None, :]
    s = sin[:, None, :]
    out = rotate(x.data, c, s)

    def bwd(g):
        return (rotate(g, c, -s),)  # transpose of a rotation = rotation by -angle

    return T.apply_op((x,), out, bwd, "rope")


# ---------------------------------------------------------------------------
# Masks
# ---------------------------------------------------------------------------


@lru_cache(maxsize=512)
def _causal_band_mask(n_q: int, n_kv: int, offset: int, window: int | None):
    """Additive mask: row i may see cache cols j with
    i+offset-window < j <= i+offset (window=None means no lower bound)."""
    cols = np.arange(n_kv)[None, :]
    rows = np.arange(n_q)[:, None] + offset
    blocked = cols > rows
    if window is not None:
        blocked |= cols <= rows - window
    mask = np.where(blocked, NEG_INF, np.float32(0.0)).astype(np.float32)
    mask.setflags(write=False)
    return mask


def band_mask(n_q: int, n_kv: int, offset: int = 0, window: int | None = None) -> np.ndarray:
    """Public handle on the cached additive masks (0 allowed, NEG_INF blocked)."""
    return _causal_band_mask(n_q, n_kv, offset, window)


def _mask_span_pairs(mask: np.ndarray) -> int:
    return int((mask == 0.0).sum())


# ---------------------------------------------------------------------------
# Attention core
# ---------------------------------------------------------------------------


def _masked_attention(
    q: Tensor, k: Tensor, v: Tensor, params: AttnParams, mask: np.ndarray, mac_kind: str
) -> Tensor:
    if q.shape[-1] != params.q_width:
        raise ShapeError(f"q width {q.shape[-1]} != n_heads*head_dim ({params.q_width})")
    if k.shape[-1] != params.kv_width or v.shape[-1] != params.kv_width:
        raise ShapeError(
            f"k/v width {k.shape[-1]}/{v.shape[-1]} != n_kv_heads*head_dim ({params.kv_width})"
        )
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"k rows {k.shape[-2]} != v rows {v.shape[-2]}")
    lead = q.shape[:-2]
    r = len(lead)
    n_q, n_kv = q.shape[-2], k.shape[-2]
    hkv, grp, hd = params.n_kv_heads, params.n_heads // params.n_kv_heads, params.head_dim

    # [.., n, H*hd] -> [.., Hkv, g, n, hd]; KV heads broadcast across g.
    qh = T.transpose(
        T.reshape(q, lead + (n_q, hkv, grp, hd)),
        tuple(range(r)) + (r + 1, r + 2, r, r + 3),
    )
    kh = T.reshape(
        T.transpose(T.reshape(k, lead + (n_kv, hkv, hd)), tuple(range(r)) + (r + 1, r, r + 2)),
        lead + (hkv, 1, n_kv, hd),
    )
    vh = T.reshape(
        T.transpose(T.reshape(v, lead + (n_kv, hkv, hd)), tuple(range(r)) + (r + 1, r, r + 2)),
        lead + (hkv, 1, n_kv, hd),
    )

    counter = T.active_mac_counter()
    if counter is not None:
        batch = int(np.prod(lead, dtype=np.int64)) if lead else 1
        counter.add_attention(mac_kind, 2 * params.kv_width * _mask_span_pairs(mask) * batch)

    with T.suppress_linear_macs():
        scores = T.matmul(qh, T.transpose(kh, tuple(range(r)) + (r, r + 1, r + 3, r + 2)))
        scores = T.mul(scores, np.float32(1.0 / np.sqrt(hd)))
        weights = T.softmax_rows(T.add(scores, Tensor(mask)))
        mixed = T.matmul(weights, vh)  # [.., Hkv, g, n_q, hd]

    merged = T.reshape(
        T.transpose(mixed, tuple(range(r)) + (r + 2, r, r + 1, r + 3)),
        lead + (n_q, params.q_width),
    )
    return T.matmul(merged, params.w_o)


def masked_attention(
    q: Tensor, k: Tensor, v: Tensor, params: AttnParams, mask: np.ndarray, mac_kind: str = "cross"
) -> Tensor:
    """Attention under an explicit additive mask; the decode path builds its
    own masks over cache buffers instead of the canned causal/banded ones."""
    return _masked_attention(q, k, v, params, mask, mac_kind)


def attention_full_causal(q: Tensor, k: Tensor, v: Tensor, params: AttnParams) -> Tensor:
    """Strict causal multi-head attention: position i attends j <= i."""
    if q.shape[-2] != k.shape[-2]:
        raise ShapeError(f"q rows {q.shape[-2]} != k rows {k.shape[-2]}")
    mask = _causal_band_mask(q.shape[-2], k.shape[-2], 0, None)
    return _masked_attention(q, k, v, params, mask, "cross")


def attention_swa(q: Tensor, k: Tensor, v: Tensor, window: int, params: AttnParams) -> Tensor:
    """Causal attention restricted to the last `window` tokens, self included."""
    if window < 1:
        raise ShapeError(f"window must be >= 1, got {window}")
    if q.shape[-2] != k.shape[-2]:
        raise ShapeError(f"q rows {q.shape[-2]} != k rows {k.shape[-2]}")
    mask = _causal_band_mask(q.shape[-2], k.shape[-2], 0, window)
    return _masked_attention(q, k, v, params, mask, "self")


def attention_cross(
    q: Tensor, k_hat: Tensor, v_hat: Tensor, causal_offset: int, params: AttnParams
) -> Tensor:
    """Cross-attention over a shared cache; query i sees cache rows <= i+offset.

    No positional transform is applied to q or the cache (NoPE); order
    information arrives only through the representations themselves.
    """
    if causal_offset < 0:
        raise ShapeError(f"causal_offset {causal_offset} gives query 0 an empty span")
    mask = _causal_band_mask(q.shape[-2], k_hat.shape[-2], causal_offset, None)
    return _masked_attention(q, k_hat, v_hat, params, mask, "cross")
