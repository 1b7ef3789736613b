"""Brute-force float64 references used to cross-check the fast paths.

Deliberately written the slow way: explicit per-head, per-query loops over
dense score matrices, no broadcasting tricks, no shared code with the
production attention. Both the test suite and the `check` CLI verbs compare
against these.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "reference_attention",
    "causal_span",
    "swa_span",
    "cross_span",
    "reference_swiglu",
    "reference_rms_norm",
]


def causal_span(i: int) -> tuple[int, int]:
    return 0, i + 1


def swa_span(window: int):
    def span(i: int) -> tuple[int, int]:
        return max(0, i - window + 1), i + 1

    return span


def cross_span(offset: int):
    def span(i: int) -> tuple[int, int]:
        return 0, i + offset + 1

    return span


def reference_attention(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    w_o: np.ndarray,
    n_heads: int,
    n_kv_heads: int,
    head_dim: int,
    span,
) -> np.ndarray:
    """Dense masked attention, one (head, query) pair at a time, in float64.

    `span(i)` returns the half-open [lo, hi) range of attended cache rows for
    query row i. KV head h serves query heads h*g .. h*g+g-1.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    n_q = q.shape[0]
    group = n_heads // n_kv_heads
    merged = np.zeros((n_q, n_heads * head_dim))
    for h in range(n_heads):
        kv = h // group
        qh = q[:, h * head_dim : (h + 1) * head_dim]
        kh = k[:, kv * head_dim : (kv + 1) * head_dim]
        vh = v[:, kv * head_dim : (kv + 1) * head_dim]
        for i in range(n_q):
            lo, hi = span(i)
            scores = np.array([qh[i] @ kh[j] / np.sqrt(head_dim) for j in range(lo, hi)])
            scores -= scores.max()
            weights = np.exp(scores)
            weights /= weights.sum()
            assert (weights >= 0).all() and abs(weights.sum() - 1.0) < 1e-9
            out = np.zeros(head_dim)
            for j, wgt in zip(range(lo, hi), weights):
                out += wgt * vh[j]
            merged[i, h * head_dim : (h + 1) * head_dim] = out
    return merged @ np.asarray(w_o, dtype=np.float64)


def reference_swiglu(x, w_g, w_1, w_2) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    pre = x @ np.asarray(w_g, dtype=np.float64)
    gate = pre / (1.0 + np.exp(-pre))
    return (gate * (x @ np.asarray(w_1, dtype=np.float64))) @ np.asarray(w_2, dtype=np.float64)


def reference_rms_norm(x, weight, eps: float = 1e-6) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    rms = np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)
    return x / rms * np.asarray(weight, dtype=np.float64)
