"""Model families behind one config: plain decoder, decoder-decoder with a
shared global KV cache, and the recursive variants of both.

The decoder-decoder split puts L/2 sliding-window layers (the self-decoder)
under L/2 cross-attention layers that all read one K/V pair projected from
the self-decoder output. The recursive family reruns the self-decoder stack
`loops` times with shared weights before that projection, so the global cache
is produced once whatever the loop count. Loop-position ablations move the
recursion into the upper block instead, either reusing the shared cache or
swapping cross-attention for per-layer self-attention.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field, fields
from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .primitives import (
    AttnParams,
    RopeConfig,
    attention_cross,
    attention_full_causal,
    attention_swa,
    rms_norm,
    rope_apply,
    swiglu,
)
from .tensor import Tensor

__all__ = [
    "FAMILIES",
    "LOOP_POSITIONS",
    "ConfigError",
    "ModelConfig",
    "LayerParams",
    "GlobalKvParams",
    "ModelParams",
    "build_model",
    "param_count",
    "layer_pass_schedule",
    "self_decoder_layer",
    "usd_forward",
    "project_global_kv",
    "cross_decoder_forward",
    "model_forward",
    "save_checkpoint",
    "load_checkpoint",
]

FAMILIES = ("transformer", "yoco", "uyoco", "universal_transformer", "rins")
LOOP_POSITIONS = ("self_decoder", "cross_decoder_shared_kv", "cross_decoder_self_attn")

_RECURSIVE_FAMILIES = ("uyoco", "universal_transformer", "rins")


class ConfigError(ValueError):
    """A ModelConfig invariant is violated; the message names the field."""


@dataclass
class ModelConfig:
    family: str = "uyoco"
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    n_kv_heads: int = 2
    window: int = 8
    loops: int = 3
    vocab: int = 256
    ffn_hidden: int | None = None
    loop_position: str = "self_decoder"
    rins_recursive_layers: int | None = None
    rope_base: float = 10000.0
    seed: int = 0

    def __post_init__(self):
        if self.ffn_hidden is None:
            self.ffn_hidden = 3 * self.d_model
        if self.rins_recursive_layers is None:
            self.rins_recursive_layers = self.n_layers // 2
        self.validate()

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise ConfigError(f"family: unknown family {self.family!r}, expected one of {FAMILIES}")
        if self.n_layers < 2 or self.n_layers % 2 != 0:
            raise ConfigError(f"n_layers: must be even and >= 2, got {self.n_layers}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"n_heads: d_model ({self.d_model}) not divisible by n_heads ({self.n_heads})"
            )
        if self.n_heads % self.n_kv_heads != 0:
            raise ConfigError(
                f"n_kv_heads: n_heads ({self.n_heads}) not divisible by n_kv_heads ({self.n_kv_heads})"
            )
        if self.window < 1:
            raise ConfigError(f"window: must be >= 1, got {self.window}")
        if self.loops < 1:
            raise ConfigError(f"loops: must be >= 1, got {self.loops}")
        if self.family in ("transformer", "yoco") and self.loops != 1:
            raise ConfigError(f"loops: family {self.family!r} requires loops == 1, got {self.loops}")
        if self.vocab < 2:
            raise ConfigError(f"vocab: must be >= 2, got {self.vocab}")
        if self.loop_position not in LOOP_POSITIONS:
            raise ConfigError(
                f"loop_position: unknown {self.loop_position!r}, expected one of {LOOP_POSITIONS}"
            )
        if self.loop_position != "self_decoder" and self.family != "uyoco":
            raise ConfigError(
                f"loop_position: {self.loop_position!r} only applies to family 'uyoco'"
            )
        if self.family == "rins":
            r = self.rins_recursive_layers
            if not (1 <= r <= self.n_layers - 1):
                raise ConfigError(
                    f"rins_recursive_layers: must be in [1, {self.n_layers - 1}], got {r}"
                )

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def kv_width(self) -> int:
        return self.n_kv_heads * self.head_dim

    @property
    def is_yoco_family(self) -> bool:
        return self.family in ("yoco", "uyoco")

    @property
    def has_global_cache(self) -> bool:
        return self.is_yoco_family and self.loop_position != "cross_decoder_self_attn"

    @property
    def layer_passes(self) -> int:
        """Total layer passes of one forward, loop iterations counted."""
        return len(layer_pass_schedule(self))

    def rope_config(self) -> RopeConfig:
        return RopeConfig(head_dim=self.head_dim, base=self.rope_base)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def layer_pass_schedule(cfg: ModelConfig) -> list[tuple[str, int, int]]:
    """Ordered (block, layer, iteration) labels of one full forward pass.

    Blocks: "blk" for uniform stacks, "self"/"cross" for the decoder-decoder
    split. A whole stack completes before its next loop iteration begins.
    """
    L, R, loops = cfg.n_layers, cfg.rins_recursive_layers, cfg.loops
    half = L // 2
    if cfg.family == "transformer":
        return [("blk", l, 0) for l in range(L)]
    if cfg.family == "universal_transformer":
        return [("blk", l, t) for t in range(loops) for l in range(L)]
    if cfg.family == "rins":
        base = [("blk", l, 0) for l in range(L - R)]
        rec = [("blk", l, t) for t in range(loops) for l in range(L - R, L)]
        return base + rec
    # yoco / uyoco
    self_loops = loops if cfg.loop_position == "self_decoder" else 1
    cross_loops = 1 if cfg.loop_position == "self_decoder" else loops
    schedule = [("self", l, t) for t in range(self_loops) for l in range(half)]
    schedule += [("cross", l, t) for t in range(cross_loops) for l in range(half)]
    return schedule


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass
class LayerParams:
    attn: AttnParams
    norm_attn: Tensor
    norm_ffn: Tensor
    w_g: Tensor
    w_1: Tensor
    w_2: Tensor


@dataclass
class GlobalKvParams:
    norm: Tensor
    w_k: Tensor
    w_v: Tensor


@dataclass
class ModelParams:
    embedding: Tensor
    blocks: list = field(default_factory=list)
    self_blocks: list = field(default_factory=list)
    cross_blocks: list = field(default_factory=list)
    global_kv: GlobalKvParams | None = None
    final_norm: Tensor = None
    head: Tensor = None

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        yield "embedding", self.embedding
        for prefix, layers in (
            ("blk", self.blocks),
            ("self", self.self_blocks),
            ("cross", self.cross_blocks),
        ):
            for i, lp in enumerate(layers):
                base = f"{prefix}.{i}"
                yield f"{base}.norm_attn", lp.norm_attn
                yield f"{base}.w_q", lp.attn.w_q
                if lp.attn.w_k is not None:
                    yield f"{base}.w_k", lp.attn.w_k
                    yield f"{base}.w_v", lp.attn.w_v
                yield f"{base}.w_o", lp.attn.w_o
                yield f"{base}.norm_ffn", lp.norm_ffn
                yield f"{base}.w_g", lp.w_g
                yield f"{base}.w_1", lp.w_1
                yield f"{base}.w_2", lp.w_2
        if self.global_kv is not None:
            yield "global.norm", self.global_kv.norm
            yield "global.w_k", self.global_kv.w_k
            yield "global.w_v", self.global_kv.w_v
        yield "final_norm", self.final_norm
        yield "head", self.head

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def n_elements(self) -> int:
        return sum(t.size for t in self.tensors())


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out.astype(np.float32)


def build_model(cfg: ModelConfig) -> ModelParams:
    """Deterministically initialize all parameters for `cfg` from its seed.

    Projections use truncated normal std 0.02; the residual-feeding outputs
    (w_o, w_2) are additionally shrunk by 1/sqrt(2 * layer passes), counting
    loop iterations, so deep recursion starts near the identity map.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    d, kvw, h = cfg.d_model, cfg.kv_width, cfg.ffn_hidden
    std = 0.02
    res_std = std / np.sqrt(2.0 * cfg.layer_passes)

    def proj(rows, cols, scale=std, grad=True):
        return Tensor(_trunc_normal(rng, (rows, cols), scale), requires_grad=grad)

    def make_layer(kind: str) -> LayerParams:
        with_kv = kind in ("full", "upper")
        attn = AttnParams(
            n_heads=cfg.n_heads,
            n_kv_heads=cfg.n_kv_heads,
            head_dim=cfg.head_dim,
            w_q=proj(d, d),
            w_o=proj(d, d, res_std),
            w_k=proj(d, kvw) if with_kv else None,
            w_v=proj(d, kvw) if with_kv else None,
        )
        return LayerParams(
            attn=attn,
            norm_attn=T.ones((d,), requires_grad=True),
            norm_ffn=T.ones((d,), requires_grad=True),
            w_g=proj(d, h),
            w_1=proj(d, h),
            w_2=proj(h, d, res_std),
        )

    params = ModelParams(embedding=proj(cfg.vocab, d))
    if cfg.is_yoco_family:
        half = cfg.n_layers // 2
        params.self_blocks = [make_layer("full") for _ in range(half)]
        cross_kind = "upper" if cfg.loop_position == "cross_decoder_self_attn" else "cross"
        params.cross_blocks = [make_layer(cross_kind) for _ in range(half)]
        if cfg.has_global_cache:
            params.global_kv = GlobalKvParams(
                norm=T.ones((d,), requires_grad=True),
                w_k=proj(d, kvw),
                w_v=proj(d, kvw),
            )
    else:
        params.blocks = [make_layer("full") for _ in range(cfg.n_layers)]
    params.final_norm = T.ones((d,), requires_grad=True)
    params.head = proj(d, cfg.vocab)
    return params


def param_count(cfg: ModelConfig) -> int:
    """Closed-form element count; matches build_model enumeration exactly and
    never depends on `loops` (weight sharing across iterations)."""
    cfg.validate()
    d, kvw, h, L, V = cfg.d_model, cfg.kv_width, cfg.ffn_hidden, cfg.n_layers, cfg.vocab
    full_layer = 2 * d * d + 2 * d * kvw + 3 * d * h + 2 * d  # q,o + k,v + ffn + norms
    cross_layer = 2 * d * d + 3 * d * h + 2 * d  # q,o + ffn + norms, kv shared
    common = V * d + d * V + d  # embedding + head + final norm
    if cfg.is_yoco_family:
        half = L // 2
        upper = full_layer if cfg.loop_position == "cross_decoder_self_attn" else cross_layer
        globals_ = (2 * d * kvw + d) if cfg.has_global_cache else 0
        return half * full_layer + half * upper + globals_ + common
    return L * full_layer + common


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------


def _ffn_block(y: Tensor, lp: LayerParams) -> Tensor:
    return T.add(y, swiglu(rms_norm(y, lp.norm_ffn), lp.w_g, lp.w_1, lp.w_2))


def self_decoder_layer(
    x: Tensor,
    lp: LayerParams,
    positions,
    window: int,
    rope_cfg: RopeConfig,
    kv_sink: Callable | None = None,
) -> Tensor:
    """Pre-norm residual block: windowed causal self-attention then SwiGLU."""
    h = rms_norm(x, lp.norm_attn)
    q = rope_apply(T.matmul(h, lp.attn.w_q), positions, rope_cfg)
    k = rope_apply(T.matmul(h, lp.attn.w_k), positions, rope_cfg)
    v = T.matmul(h, lp.attn.w_v)
    if kv_sink is not None:
        kv_sink(k.data, v.data)
    y = T.add(x, attention_swa(q, k, v, window, lp.attn))
    return _ffn_block(y, lp)


def _full_attention_layer(
    x: Tensor,
    lp: LayerParams,
    positions,
    rope_cfg: RopeConfig | None,
    kv_sink: Callable | None = None,
) -> Tensor:
    """Uniform decoder layer: full causal attention (RoPE unless rope_cfg is
    None, which is the upper-loop ablation's NoPE stack) then SwiGLU."""
    h = rms_norm(x, lp.norm_attn)
    q = T.matmul(h, lp.attn.w_q)
    k = T.matmul(h, lp.attn.w_k)
    v = T.matmul(h, lp.attn.w_v)
    if rope_cfg is not None:
        q = rope_apply(q, positions, rope_cfg)
        k = rope_apply(k, positions, rope_cfg)
    if kv_sink is not None:
        kv_sink(k.data, v.data)
    y = T.add(x, attention_full_causal(q, k, v, lp.attn))
    return _ffn_block(y, lp)


def _cross_layer(x: Tensor, lp: LayerParams, k_hat: Tensor, v_hat: Tensor) -> Tensor:
    h = rms_norm(x, lp.norm_attn)
    q = T.matmul(h, lp.attn.w_q)
    offset = k_hat.shape[-2] - x.shape[-2]
    y = T.add(x, attention_cross(q, k_hat, v_hat, offset, lp.attn))
    return _ffn_block(y, lp)


def usd_forward(
    x: Tensor,
    self_blocks: list,
    loops: int,
    positions,
    window: int,
    rope_cfg: RopeConfig,
    capture: Callable | None = None,
    kv_sink: Callable | None = None,
) -> Tensor:
    """Apply the self-decoder stack `loops` times with shared parameters.

    Positions (and hence rotary angles) are identical in every iteration.
    """
    if loops < 1:
        raise ConfigError(f"loops: must be >= 1, got {loops}")
    for t in range(loops):
        for l, lp in enumerate(self_blocks):
            sink = (lambda k, v, key=("self", l, t): kv_sink(key, k, v)) if kv_sink else None
            x = self_decoder_layer(x, lp, positions, window, rope_cfg, kv_sink=sink)
            if capture is not None:
                capture(("self", l, t), x)
    return x


def project_global_kv(h: Tensor, gkv: GlobalKvParams) -> tuple[Tensor, Tensor]:
    """One K/V pair for the whole upper stack, computed once per token."""
    normed = rms_norm(h, gkv.norm)
    return T.matmul(normed, gkv.w_k), T.matmul(normed, gkv.w_v)


def cross_decoder_forward(
    x: Tensor,
    k_hat: Tensor,
    v_hat: Tensor,
    cross_blocks: list,
    capture: Callable | None = None,
    iteration: int = 0,
) -> Tensor:
    """Upper stack: per-layer queries over the one shared cache, NoPE.

    The cache may be longer than x (decode); query i then sees cache rows up
    to i + (cache_len - n).
    """
    if k_hat.shape[-2] < x.shape[-2]:
        raise ConfigError(
            f"global cache ({k_hat.shape[-2]} rows) shorter than queries ({x.shape[-2]})"
        )
    for l, lp in enumerate(cross_blocks):
        x = _cross_layer(x, lp, k_hat, v_hat)
        if capture is not None:
            capture(("cross", l, iteration), x)
    return x


def _backbone(
    x: Tensor,
    cfg: ModelConfig,
    params: ModelParams,
    positions,
    capture: Callable | None,
    kv_sink: Callable | None,
) -> Tensor:
    rope_cfg = cfg.rope_config()
    if not cfg.is_yoco_family:
        for block, l, t in layer_pass_schedule(cfg):
            lp = params.blocks[l]
            sink = (lambda k, v, key=(block, l, t): kv_sink(key, k, v)) if kv_sink else None
            x = _full_attention_layer(x, lp, positions, rope_cfg, kv_sink=sink)
            if capture is not None:
                capture((block, l, t), x)
        return x

    self_loops = cfg.loops if cfg.loop_position == "self_decoder" else 1
    x = usd_forward(
        x, params.self_blocks, self_loops, positions, cfg.window, rope_cfg, capture, kv_sink
    )
    if cfg.loop_position == "cross_decoder_self_attn":
        for t in range(cfg.loops):
            for l, lp in enumerate(params.cross_blocks):
                sink = (lambda k, v, key=("cross", l, t): kv_sink(key, k, v)) if kv_sink else None
                x = _full_attention_layer(x, lp, positions, None, kv_sink=sink)
                if capture is not None:
                    capture(("cross", l, t), x)
        return x

    k_hat, v_hat = project_global_kv(x, params.global_kv)
    if kv_sink is not None:
        kv_sink(("global",), k_hat.data, v_hat.data)
    cross_loops = cfg.loops if cfg.loop_position == "cross_decoder_shared_kv" else 1
    for t in range(cross_loops):
        x = cross_decoder_forward(x, k_hat, v_hat, params.cross_blocks, capture, iteration=t)
    return x


def model_forward(
    tokens,
    cfg: ModelConfig,
    params: ModelParams,
    capture: Callable | None = None,
    kv_sink: Callable | None = None,
) -> Tensor:
    """Embed -> family backbone -> final norm -> vocabulary head.

    Accepts one sequence (list/1-D array, returns [n, vocab]) or a batch
    ([B, n] array, returns [B, n, vocab]).
    """
    ids = np.asarray(tokens, dtype=np.int64)
    single = ids.ndim == 1
    if single:
        ids = ids[None, :]
    if ids.size == 0:
        raise ConfigError("tokens: empty input")
    if ids.min() < 0 or ids.max() >= cfg.vocab:
        bad = int(ids.max() if ids.max() >= cfg.vocab else ids.min())
        raise ConfigError(f"tokens: token {bad} outside vocab [0, {cfg.vocab})")
    n = ids.shape[1]
    x = T.embedding(params.embedding, ids)
    h = _backbone(x, cfg, params, range(n), capture, kv_sink)
    logits = T.matmul(rms_norm(h, params.final_norm), params.head)
    if single:
        logits = T.reshape(logits, (n, cfg.vocab))
    return logits


# ---------------------------------------------------------------------------
# Checkpoints: text manifest + concatenated flat tensor binaries
# ---------------------------------------------------------------------------

_CKPT_FORMAT = "uyoco-checkpoint-v1"


def save_checkpoint(path: str, cfg: ModelConfig, params: ModelParams) -> None:
    names = [name for name, _ in params.named_tensors()]
    lines = [f"format = {_CKPT_FORMAT}"]
    lines += [f"config.{k} = {v}" for k, v in cfg.to_dict().items()]
    lines += [f"tensor = {name}" for name in names]
    manifest = ("\n".join(lines) + "\n").encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for _, t in params.named_tensors():
            T.write_tensor(fh, t)


def _parse_config_value(name: str, raw: str):
    if raw == "None":
        return None
    if name in ("family", "loop_position"):
        return raw
    if name == "rope_base":
        return float(raw)
    return int(raw)


def load_checkpoint(path: str) -> tuple[ModelConfig, ModelParams]:
    with open(path, "rb") as fh:
        (mlen,) = struct.unpack("<Q", fh.read(8))
        manifest = fh.read(mlen).decode("utf-8")
        cfg_kv, tensor_names = {}, []
        for line in manifest.splitlines():
            key, _, value = line.partition(" = ")
            if key == "format":
                if value != _CKPT_FORMAT:
                    raise ValueError(f"unknown checkpoint format {value!r}")
            elif key.startswith("config."):
                name = key[len("config.") :]
                cfg_kv[name] = _parse_config_value(name, value)
            elif key == "tensor":
                tensor_names.append(value)
        cfg = ModelConfig(**cfg_kv)
        params = build_model(cfg)
        by_name = dict(params.named_tensors())
        if tensor_names != [n for n, _ in params.named_tensors()]:
            raise ValueError("checkpoint tensor index does not match the config's structure")
        for name in tensor_names:
            arr = T.read_tensor(fh)
            if arr.shape != by_name[name].shape:
                raise ValueError(
                    f"checkpoint tensor {name}: shape {arr.shape} != expected {by_name[name].shape}"
                )
            by_name[name].data = np.ascontiguousarray(arr, dtype=np.float32)
    return cfg, params
