"""Representation profiler: angular distance between consecutive layer passes.

Distances are arccos(cosine similarity)/pi in [0, 1], computed per token on
the post-FFN residual stream and then averaged over tokens and batch (that
averaging order is also stamped into the CSV metadata line).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelConfig, ModelParams, model_forward

__all__ = ["angular_distance", "ProfileEntry", "layer_profile", "profile_csv"]


def angular_distance(a, b) -> float:
    """arccos of the cosine similarity, normalized by pi.

    0 for parallel, 0.5 for orthogonal, 1 for antiparallel; scale-invariant.
    """
    av = np.asarray(getattr(a, "data", a), dtype=np.float64).reshape(-1)
    bv = np.asarray(getattr(b, "data", b), dtype=np.float64).reshape(-1)
    na, nb = np.linalg.norm(av), np.linalg.norm(bv)
    if na == 0.0 or nb == 0.0:
        raise ValueError("angular_distance is undefined for zero vectors")
    cos = np.clip(av @ bv / (na * nb), -1.0, 1.0)
    return float(np.arccos(cos) / np.pi)


@dataclass
class ProfileEntry:
    """Distance between pass i and pass i+1, labeled by the later pass."""

    index: int
    block: str
    layer: int
    iteration: int
    mean_distance: float


def _rowwise_angular(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a64 = a.reshape(-1, a.shape[-1]).astype(np.float64)
    b64 = b.reshape(-1, b.shape[-1]).astype(np.float64)
    na = np.linalg.norm(a64, axis=-1)
    nb = np.linalg.norm(b64, axis=-1)
    if (na == 0).any() or (nb == 0).any():
        raise ValueError("angular profile hit a zero hidden vector")
    cos = np.clip((a64 * b64).sum(-1) / (na * nb), -1.0, 1.0)
    return np.arccos(cos) / np.pi


def layer_profile(cfg: ModelConfig, params: ModelParams, tokens) -> list[ProfileEntry]:
    """Token-mean angular distance between every pair of consecutive layer
    passes, loop boundaries and the lower/upper block interface included.

    Entry count is layer_passes - 1, a pure function of the architecture.
    """
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.size == 0:
        raise ValueError("tokens: profile needs a nonempty batch")
    states: list[tuple[tuple, np.ndarray]] = []
    model_forward(ids, cfg, params, capture=lambda label, x: states.append((label, x.data.copy())))
    entries = []
    for i in range(len(states) - 1):
        (_, prev), (label, cur) = states[i], states[i + 1]
        block, layer, iteration = label
        entries.append(
            ProfileEntry(
                index=i,
                block=block,
                layer=layer,
                iteration=iteration,
                mean_distance=float(_rowwise_angular(prev, cur).mean()),
            )
        )
    return entries


def profile_csv(entries: list[ProfileEntry]) -> str:
    lines = [
        "# mean_distance = angular distance averaged over tokens, then batch",
        "index,block,layer,iteration,mean_distance",
    ]
    lines += [
        f"{e.index},{e.block},{e.layer},{e.iteration},{e.mean_distance:.6f}" for e in entries
    ]
    return "\n".join(lines) + "\n"
