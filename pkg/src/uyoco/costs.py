"""Analytic serving costs: exact KV-cache bytes and MAC counts per family.

Conventions, shared with the live instrumentation in `tensor.MacCounter`:

* MACs count multiplies in matmuls. Norms, softmax exponentials, rotary
  rotations, and other elementwise work are excluded.
* Attention score+value MACs are counted on a KV-width basis: each attended
  (query position, cache row) pair costs kv_width multiplies for K and again
  for V. Projections, FFNs, the global-cache projection, and the vocabulary
  head are counted at their true m*n*k.
* Prefill assumes the generation path: the decoder-decoder families evaluate
  the upper stack at one position only, and every family evaluates the
  vocabulary head at one position.
* Cache bytes use a configurable bytes-per-element (default 2, the serving
  precision) regardless of compute precision; reported MB are MiB.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .model import FAMILIES, ConfigError, ModelConfig

__all__ = [
    "ArchDescriptor",
    "MacSplit",
    "CostReport",
    "kv_cache_bytes",
    "kv_cache_mb",
    "prefill_macs",
    "decode_step_macs",
    "cost_report",
    "reproduce_paper_kv_table",
    "KvTableDiff",
    "PAPER_TABLE_SEQ_LENS",
    "PAPER_TABLE_EXPECTED_MB",
    "paper_table_descriptors",
    "cost_csv",
]


@dataclass
class ArchDescriptor:
    """Everything the closed forms need to price one architecture."""

    family: str
    n_layers: int
    kv_width: int
    d_model: int
    window: int
    loops: int = 1
    rins_recursive_layers: int | None = None
    bytes_per_elem: int = 2
    ffn_hidden: int | None = None
    vocab: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"family: unknown family {self.family!r}")
        if self.family in ("transformer", "yoco") and self.loops != 1:
            raise ConfigError(f"loops: family {self.family!r} requires loops == 1")
        if self.rins_recursive_layers is None:
            self.rins_recursive_layers = self.n_layers // 2
        if self.ffn_hidden is None:
            self.ffn_hidden = 3 * self.d_model

    @classmethod
    def from_model_config(cls, cfg: ModelConfig, bytes_per_elem: int = 2) -> "ArchDescriptor":
        return cls(
            family=cfg.family,
            n_layers=cfg.n_layers,
            kv_width=cfg.kv_width,
            d_model=cfg.d_model,
            window=cfg.window,
            loops=cfg.loops,
            rins_recursive_layers=cfg.rins_recursive_layers,
            bytes_per_elem=bytes_per_elem,
            ffn_hidden=cfg.ffn_hidden,
            vocab=cfg.vocab,
        )

    @property
    def layer_passes(self) -> int:
        l, r, t = self.n_layers, self.rins_recursive_layers, self.loops
        if self.family == "transformer":
            return l
        if self.family == "universal_transformer":
            return l * t
        if self.family == "rins":
            return (l - r) + r * t
        return (l // 2) * t + l // 2


@dataclass
class MacSplit:
    """MAC totals per component for one (architecture, N) point."""

    self_attn: int = 0
    cross_or_attn: int = 0
    linear: int = 0

    @property
    def total(self) -> int:
        return self.self_attn + self.cross_or_attn + self.linear


@dataclass
class CostReport:
    family: str
    n: int
    kv_bytes: int
    prefill: MacSplit = field(default_factory=MacSplit)
    decode: MacSplit = field(default_factory=MacSplit)


def kv_cache_bytes(a: ArchDescriptor, n: int) -> int:
    """Exact live cache size after absorbing n tokens (K and V both counted)."""
    if n < 1:
        raise ConfigError(f"n: must be >= 1, got {n}")
    kvw, b, l, t, w = a.kv_width, a.bytes_per_elem, a.n_layers, a.loops, a.window
    if a.family == "transformer":
        return 2 * l * n * kvw * b
    if a.family == "universal_transformer":
        return 2 * l * t * n * kvw * b
    if a.family == "rins":
        r = a.rins_recursive_layers
        return 2 * ((l - r) + r * t) * n * kvw * b
    # yoco / uyoco: one global buffer + per-(layer, iteration) window buffers
    return 2 * n * kvw * b + 2 * (l // 2) * t * min(w, n) * kvw * b


def kv_cache_mb(a: ArchDescriptor, n: int) -> float:
    return kv_cache_bytes(a, n) / 2**20


def _swa_span_sum(n: int, w: int) -> int:
    """Sum over positions i=1..n of min(w, i)."""
    if n <= w:
        return n * (n + 1) // 2
    return w * (w + 1) // 2 + (n - w) * w


def _full_layer_linear(a: ArchDescriptor) -> int:
    d, kvw, h = a.d_model, a.kv_width, a.ffn_hidden
    return 2 * d * d + 2 * d * kvw + 3 * d * h  # q,o + k,v + gated ffn


def _cross_layer_linear(a: ArchDescriptor) -> int:
    d, h = a.d_model, a.ffn_hidden
    return 2 * d * d + 3 * d * h  # q,o + gated ffn (kv comes from the shared cache)


def prefill_macs(a: ArchDescriptor, n: int) -> MacSplit:
    """Exact MACs to absorb an n-token prompt on the generation path."""
    if n < 1:
        raise ConfigError(f"n: must be >= 1, got {n}")
    kvw, l, t, w = a.kv_width, a.n_layers, a.loops, a.window
    head = a.d_model * a.vocab
    causal_pairs = n * (n + 1) // 2
    if a.family in ("transformer", "universal_transformer", "rins"):
        passes = a.layer_passes
        return MacSplit(
            self_attn=0,
            cross_or_attn=2 * kvw * causal_pairs * passes,
            linear=passes * _full_layer_linear(a) * n + head,
        )
    half = l // 2
    return MacSplit(
        self_attn=2 * kvw * _swa_span_sum(n, w) * half * t,
        cross_or_attn=2 * kvw * n * half,  # one query position over the n-row cache
        linear=(
            half * t * _full_layer_linear(a) * n
            + 2 * a.d_model * kvw * n  # global K/V projection, every position
            + half * _cross_layer_linear(a)  # upper stack at one position
            + head
        ),
    )


def decode_step_macs(a: ArchDescriptor, n: int) -> MacSplit:
    """Exact MACs for one decoded token; n is the context length including it."""
    if n < 1:
        raise ConfigError(f"n: must be >= 1, got {n}")
    kvw, l, t, w = a.kv_width, a.n_layers, a.loops, a.window
    head = a.d_model * a.vocab
    if a.family in ("transformer", "universal_transformer", "rins"):
        passes = a.layer_passes
        return MacSplit(
            self_attn=0,
            cross_or_attn=2 * kvw * n * passes,
            linear=passes * _full_layer_linear(a) + head,
        )
    half = l // 2
    return MacSplit(
        self_attn=2 * kvw * min(w, n) * half * t,
        cross_or_attn=2 * kvw * n * half,
        linear=(
            half * t * _full_layer_linear(a)
            + 2 * a.d_model * kvw
            + half * _cross_layer_linear(a)
            + head
        ),
    )


def cost_report(a: ArchDescriptor, n: int) -> CostReport:
    return CostReport(
        family=a.family,
        n=n,
        kv_bytes=kv_cache_bytes(a, n),
        prefill=prefill_macs(a, n),
        decode=decode_step_macs(a, n),
    )


# ---------------------------------------------------------------------------
# Published occupancy table
# ---------------------------------------------------------------------------

PAPER_TABLE_SEQ_LENS = (8192, 16384, 32768, 65536, 131072, 262144)

# Cache occupancy in MiB for the 20-layer serving configuration
# (kv_width 512, window 512, 2 bytes/element), rows in table order.
PAPER_TABLE_EXPECTED_MB = {
    "transformer": (320, 640, 1280, 2560, 5120, 10240),
    "rins": (640, 1280, 2560, 5120, 10240, 20480),
    "yoco": (26, 42, 74, 138, 266, 522),
    "uyoco": (46, 62, 94, 158, 286, 542),
}


def paper_table_descriptors() -> dict[str, ArchDescriptor]:
    base = dict(n_layers=20, kv_width=512, d_model=2560, window=512, bytes_per_elem=2)
    return {
        "transformer": ArchDescriptor(family="transformer", loops=1, **base),
        "rins": ArchDescriptor(family="rins", loops=3, rins_recursive_layers=10, **base),
        "yoco": ArchDescriptor(family="yoco", loops=1, **base),
        "uyoco": ArchDescriptor(family="uyoco", loops=3, **base),
    }


@dataclass
class KvTableCell:
    family: str
    n: int
    computed_mb: float
    expected_mb: int

    @property
    def ok(self) -> bool:
        return self.computed_mb == self.expected_mb


@dataclass
class KvTableDiff:
    cells: list[KvTableCell]

    @property
    def all_match(self) -> bool:
        return all(c.ok for c in self.cells)

    def render(self) -> str:
        header = f"{'family':<14}" + "".join(f"{n // 1024:>7}K" for n in PAPER_TABLE_SEQ_LENS)
        lines = [header]
        for family in PAPER_TABLE_EXPECTED_MB:
            row = [f"{family:<14}"]
            for cell in (c for c in self.cells if c.family == family):
                mark = "" if cell.ok else f"!={cell.expected_mb}"
                row.append(f"{cell.computed_mb:>7.0f}{mark}")
            lines.append("".join(row))
        lines.append("all cells match" if self.all_match else "MISMATCH against expected table")
        return "\n".join(lines) + "\n"


def reproduce_paper_kv_table() -> KvTableDiff:
    """Evaluate the closed forms at the published serving points cell by cell."""
    descriptors = paper_table_descriptors()
    cells = []
    for family, expected_row in PAPER_TABLE_EXPECTED_MB.items():
        for n, expected in zip(PAPER_TABLE_SEQ_LENS, expected_row):
            cells.append(
                KvTableCell(
                    family=family,
                    n=n,
                    computed_mb=kv_cache_mb(descriptors[family], n),
                    expected_mb=expected,
                )
            )
    return KvTableDiff(cells)


# ---------------------------------------------------------------------------
# CSV emission
# ---------------------------------------------------------------------------

CSV_HEADER = (
    "family,n,kv_mb,prefill_macs,decode_macs,"
    "prefill_self_attn,prefill_cross_or_attn,prefill_linear,"
    "decode_self_attn,decode_cross_or_attn,decode_linear"
)


def cost_csv(archs: list[ArchDescriptor], seq_lens: list[int]) -> str:
    lines = [CSV_HEADER]
    for a in archs:
        for n in seq_lens:
            r = cost_report(a, n)
            lines.append(
                f"{a.family},{n},{kv_cache_mb(a, n):g},{r.prefill.total},{r.decode.total},"
                f"{r.prefill.self_attn},{r.prefill.cross_or_attn},{r.prefill.linear},"
                f"{r.decode.self_attn},{r.decode.cross_or_attn},{r.decode.linear}"
            )
    return "\n".join(lines) + "\n"
