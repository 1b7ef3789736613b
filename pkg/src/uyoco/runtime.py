"""Inference runtime: linear prefill filling every cache in one pass, then
one-token decode steps against those caches.

Cache layout per family:
  transformer            one full K/V buffer per layer
  universal_transformer  one full buffer per (layer, iteration)
  rins                   per layer for the static segment, per (layer,
                         iteration) for the recursive segment
  yoco / uyoco           one global K/V buffer shared by the whole upper
                         stack plus a W-row window buffer per self-decoder
                         (layer, iteration); the global buffer never depends
                         on the loop count

Keys are stored post-rotation, so decode only rotates the incoming token at
its own absolute position. A decoded token runs all loop iterations before
the next token enters; the (layer, iteration) buffer therefore always holds
earlier tokens' states from that same (layer, iteration).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import (
    ConfigError,
    ModelConfig,
    ModelParams,
    _full_attention_layer,
    cross_decoder_forward,
    layer_pass_schedule,
    model_forward,
    project_global_kv,
    usd_forward,
)
from .primitives import band_mask, masked_attention, rms_norm, rope_apply, swiglu
from .tensor import Tensor

__all__ = [
    "KvState",
    "CacheStats",
    "cache_layout",
    "prefill",
    "decode_step",
    "cache_stats",
    "cache_report",
    "generate_greedy",
    "generate_greedy_reference",
]


class _Buf:
    """Growable K/V row store; `window` bounds it to the most recent rows."""

    __slots__ = ("width", "window", "_k", "_v", "rows", "seen")

    def __init__(self, width: int, window: int | None):
        self.width = width
        self.window = window
        cap = window if window is not None else 16
        self._k = np.empty((cap, width), dtype=np.float32)
        self._v = np.empty((cap, width), dtype=np.float32)
        self.rows = 0
        self.seen = 0  # total rows ever absorbed

    @property
    def start_pos(self) -> int:
        """Absolute position of the oldest retained row."""
        return self.seen - self.rows

    def _reserve(self, extra: int) -> None:
        need = self.rows + extra
        cap = self._k.shape[0]
        if need <= cap:
            return
        while cap < need:
            cap *= 2
        for name in ("_k", "_v"):
            old = getattr(self, name)
            grown = np.empty((cap, self.width), dtype=np.float32)
            grown[: self.rows] = old[: self.rows]
            setattr(self, name, grown)

    def append(self, k_rows: np.ndarray, v_rows: np.ndarray) -> None:
        k_rows = k_rows.reshape(-1, self.width)
        v_rows = v_rows.reshape(-1, self.width)
        m = k_rows.shape[0]
        self.seen += m
        if self.window is not None and m >= self.window:
            self._k[: self.window] = k_rows[m - self.window :]
            self._v[: self.window] = v_rows[m - self.window :]
            self.rows = self.window
            return
        if self.window is not None and self.rows + m > self.window:
            shift = self.rows + m - self.window
            self._k[: self.rows - shift] = self._k[shift : self.rows]
            self._v[: self.rows - shift] = self._v[shift : self.rows]
            self.rows -= shift
        self._reserve(m)
        self._k[self.rows : self.rows + m] = k_rows
        self._v[self.rows : self.rows + m] = v_rows
        self.rows += m

    def view(self) -> tuple[np.ndarray, np.ndarray]:
        return self._k[: self.rows], self._v[: self.rows]


def cache_layout(cfg: ModelConfig) -> list[tuple[tuple, int | None]]:
    """Ordered (buffer key, window) pairs; key = (block, layer, iteration).

    Cross layers reading the shared global cache contribute no per-layer
    buffer; every other layer pass owns one.
    """
    layout = []
    for block, l, t in layer_pass_schedule(cfg):
        if block == "cross" and cfg.has_global_cache:
            continue
        if block == "cross" and not cfg.has_global_cache and cfg.loop_position == "cross_decoder_shared_kv":
            continue
        window = cfg.window if block == "self" else None
        layout.append(((block, l, t), window))
    return layout


class KvState:
    """All per-sequence inference state for one decoding stream."""

    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        self.produced_len = 0
        kvw = cfg.kv_width
        self.global_buf = _Buf(kvw, None) if cfg.has_global_cache else None
        self.local = {key: _Buf(kvw, window) for key, window in cache_layout(cfg)}


@dataclass
class CacheStats:
    """Live element counts: K and V both counted, per buffer row, width each."""

    global_elems: int
    local_elems: int

    def total_bytes(self, bytes_per_elem: int = 2) -> int:
        return (self.global_elems + self.local_elems) * bytes_per_elem


def cache_stats(state: KvState) -> CacheStats:
    g = 2 * state.global_buf.rows * state.global_buf.width if state.global_buf else 0
    l = sum(2 * buf.rows * buf.width for buf in state.local.values())
    return CacheStats(global_elems=g, local_elems=l)


def cache_report(state: KvState, bytes_per_elem: int = 2) -> str:
    """Structured-text dump of per-buffer lengths and byte totals."""
    stats = cache_stats(state)
    lines = [
        "cache-report",
        f"family = {state.cfg.family}",
        f"produced_len = {state.produced_len}",
    ]
    if state.global_buf is not None:
        lines.append(f"buffer global rows = {state.global_buf.rows} width = {state.global_buf.width}")
    for (block, l, t), buf in state.local.items():
        lines.append(f"buffer {block}.{l}.it{t} rows = {buf.rows} width = {buf.width}")
    lines += [
        f"global_elems = {stats.global_elems}",
        f"local_elems = {stats.local_elems}",
        f"bytes_per_elem = {bytes_per_elem}",
        f"total_bytes = {stats.total_bytes(bytes_per_elem)}",
    ]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Prefill
# ---------------------------------------------------------------------------


def prefill(
    tokens, params: ModelParams, cfg: ModelConfig, need_all_logits: bool = False
) -> tuple[KvState, Tensor]:
    """Absorb a prompt in one parallel pass, filling every cache.

    For the decoder-decoder families the upper stack is evaluated only at the
    final position unless `need_all_logits` (the generation default computes
    O(n) work in the lower stack and O(n) cross work at one position).
    Returns logits for all positions ([n, vocab]) or the last one ([vocab]).
    """
    ids = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if ids.size == 0:
        raise ConfigError("tokens: prefill needs a nonempty prompt")
    if ids.min() < 0 or ids.max() >= cfg.vocab:
        raise ConfigError(f"tokens: token outside vocab [0, {cfg.vocab})")
    n = int(ids.size)
    state = KvState(cfg)

    def sink(key, k, v):
        kvw = cfg.kv_width
        if key == ("global",):
            state.global_buf.append(k.reshape(-1, kvw), v.reshape(-1, kvw))
        else:
            state.local[key].append(k.reshape(-1, kvw), v.reshape(-1, kvw))

    rope_cfg = cfg.rope_config()
    positions = range(n)
    x = T.embedding(params.embedding, ids[None, :])

    if not cfg.is_yoco_family:
        for block, l, t in layer_pass_schedule(cfg):
            x = _full_attention_layer(
                x,
                params.blocks[l],
                positions,
                rope_cfg,
                kv_sink=lambda k, v, key=(block, l, t): sink(key, k, v),
            )
        h = x
    else:
        self_loops = cfg.loops if cfg.loop_position == "self_decoder" else 1
        h = usd_forward(
            x, params.self_blocks, self_loops, positions, cfg.window, rope_cfg, kv_sink=sink
        )
        if cfg.loop_position == "cross_decoder_self_attn":
            for t in range(cfg.loops):
                for l, lp in enumerate(params.cross_blocks):
                    h = _full_attention_layer(
                        h, lp, positions, None,
                        kv_sink=lambda k, v, key=("cross", l, t): sink(key, k, v),
                    )
        else:
            k_hat, v_hat = project_global_kv(h, params.global_kv)
            sink(("global",), k_hat.data, v_hat.data)
            if not need_all_logits:
                h = Tensor(h.data[:, -1:, :])
            cross_loops = cfg.loops if cfg.loop_position == "cross_decoder_shared_kv" else 1
            for _ in range(cross_loops):
                h = cross_decoder_forward(h, k_hat, v_hat, params.cross_blocks)

    if not need_all_logits and h.shape[-2] != 1:
        h = Tensor(h.data[:, -1:, :])
    logits = T.matmul(rms_norm(h, params.final_norm), params.head)
    state.produced_len = n
    if need_all_logits:
        return state, T.reshape(logits, (n, cfg.vocab))
    return state, T.reshape(logits, (cfg.vocab,))


# ---------------------------------------------------------------------------
# Decode
# ---------------------------------------------------------------------------


def _decode_attn_pass(x, lp, buf, pos, rope_cfg, mac_kind):
    """One layer pass for a single token: push its K/V, attend the buffer."""
    h = rms_norm(x, lp.norm_attn)
    q = T.matmul(h, lp.attn.w_q)
    k = T.matmul(h, lp.attn.w_k)
    v = T.matmul(h, lp.attn.w_v)
    if rope_cfg is not None:
        q = rope_apply(q, [pos], rope_cfg)
        k = rope_apply(k, [pos], rope_cfg)
    buf.append(k.data, v.data)
    kc, vc = buf.view()
    span = kc.shape[0]
    attended = masked_attention(
        q, Tensor(kc[None]), Tensor(vc[None]), lp.attn, band_mask(1, span, span - 1), mac_kind
    )
    y = T.add(x, attended)
    return T.add(y, swiglu(rms_norm(y, lp.norm_ffn), lp.w_g, lp.w_1, lp.w_2))


def _decode_cross_pass(x, lp, k_cache, v_cache):
    h = rms_norm(x, lp.norm_attn)
    q = T.matmul(h, lp.attn.w_q)
    span = k_cache.shape[0]
    attended = masked_attention(
        q, Tensor(k_cache[None]), Tensor(v_cache[None]), lp.attn,
        band_mask(1, span, span - 1), "cross",
    )
    y = T.add(x, attended)
    return T.add(y, swiglu(rms_norm(y, lp.norm_ffn), lp.w_g, lp.w_1, lp.w_2))


def decode_step(state: KvState, token: int, params: ModelParams, cfg: ModelConfig) -> Tensor:
    """Extend the stream by one token and return its next-token logits [vocab].

    The token runs every loop iteration of its stack before control returns,
    appending to each (layer, iteration) buffer it passes through; for the
    decoder-decoder families its single global K/V row is appended once.
    """
    if cfg.to_dict() != state.cfg.to_dict():
        raise ConfigError("cfg: state was produced under a different configuration")
    if not (0 <= token < cfg.vocab):
        raise ConfigError(f"tokens: token {token} outside vocab [0, {cfg.vocab})")
    if state.produced_len == 0:
        raise ConfigError("state: decode_step requires a prefilled state")

    pos = state.produced_len
    rope_cfg = cfg.rope_config()
    x = T.embedding(params.embedding, np.array([[token]], dtype=np.int64))

    if not cfg.is_yoco_family:
        for block, l, t in layer_pass_schedule(cfg):
            x = _decode_attn_pass(x, params.blocks[l], state.local[(block, l, t)], pos, rope_cfg, "cross")
    else:
        self_loops = cfg.loops if cfg.loop_position == "self_decoder" else 1
        half = cfg.n_layers // 2
        for t in range(self_loops):
            for l in range(half):
                x = _decode_attn_pass(
                    x, params.self_blocks[l], state.local[("self", l, t)], pos, rope_cfg, "self"
                )
        if cfg.loop_position == "cross_decoder_self_attn":
            for t in range(cfg.loops):
                for l, lp in enumerate(params.cross_blocks):
                    x = _decode_attn_pass(x, lp, state.local[("cross", l, t)], pos, None, "cross")
        else:
            normed = rms_norm(x, params.global_kv.norm)
            state.global_buf.append(
                T.matmul(normed, params.global_kv.w_k).data,
                T.matmul(normed, params.global_kv.w_v).data,
            )
            kc, vc = state.global_buf.view()
            cross_loops = cfg.loops if cfg.loop_position == "cross_decoder_shared_kv" else 1
            for _ in range(cross_loops):
                for lp in params.cross_blocks:
                    x = _decode_cross_pass(x, lp, kc, vc)

    logits = T.matmul(rms_norm(x, params.final_norm), params.head)
    state.produced_len = pos + 1
    return T.reshape(logits, (cfg.vocab,))


def generate_greedy(
    prompt, params: ModelParams, cfg: ModelConfig, max_new_tokens: int
) -> list[int]:
    """Greedy continuation driven by prefill + incremental decode."""
    state, logits = prefill(prompt, params, cfg, need_all_logits=False)
    out = []
    for _ in range(max_new_tokens):
        nxt = int(np.argmax(logits.data))
        out.append(nxt)
        logits = decode_step(state, nxt, params, cfg)
    return out


def generate_greedy_reference(
    prompt, params: ModelParams, cfg: ModelConfig, max_new_tokens: int
) -> list[int]:
    """Same continuation computed by repeated full forwards (the slow oracle)."""
    seq = list(prompt)
    out = []
    for _ in range(max_new_tokens):
        logits = model_forward(seq, cfg, params)
        nxt = int(np.argmax(logits.data[-1]))
        out.append(nxt)
        seq.append(nxt)
    return out
