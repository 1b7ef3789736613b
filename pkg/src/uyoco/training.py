"""Toy-scale optimizer and task suite: byte-level LM on a bundled corpus,
sequence copy, and key-value retrieval (the desk-scale needle test).

Training uses constant-LR AdamW (betas 0.9/0.95, decoupled weight decay 0.1
on matrices only, no warmup) with global-norm gradient clipping; identical
(config, task, seed) runs produce bitwise-identical loss traces.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace
from importlib import resources

import numpy as np

from . import tensor as T
from .model import ModelConfig, ModelParams, build_model, model_forward
from .tensor import Tape, Tensor, backward, cross_entropy

__all__ = [
    "TaskSpec",
    "TrainRun",
    "DivergenceError",
    "AdamState",
    "adamw_step",
    "clip_global_norm",
    "make_batch",
    "train",
    "overfit_single_batch",
    "loop_scaling_experiment",
    "LoopScalingReport",
    "load_corpus",
    "CORPUS_SHA256",
    "trainrun_text",
    "losses_csv",
]

TASK_KINDS = ("char_lm", "copy", "needle_kv")

# Identity of the vendored byte-level corpus; refuse silently different data.
CORPUS_SHA256 = "0c456b1008f5c8e0552947e9aaa3f372f93ed423ec3dd2cd2f2a72357f96d75a"

_corpus_cache: np.ndarray | None = None


def load_corpus() -> np.ndarray:
    """Bundled corpus as a uint8 token stream, checksum-verified."""
    global _corpus_cache
    if _corpus_cache is None:
        raw = resources.files("uyoco").joinpath("data/corpus.txt").read_bytes()
        digest = hashlib.sha256(raw).hexdigest()
        if digest != CORPUS_SHA256:
            raise ValueError(f"corpus checksum mismatch: {digest} != {CORPUS_SHA256}")
        _corpus_cache = np.frombuffer(raw, dtype=np.uint8)
    return _corpus_cache


class DivergenceError(RuntimeError):
    """Loss became non-finite; message carries the step index."""

    def __init__(self, step: int, value: float):
        super().__init__(f"loss diverged to {value} at step {step}")
        self.step = step


@dataclass
class TaskSpec:
    kind: str = "char_lm"
    seq_len: int = 48
    vocab: int = 256
    copy_gap: int = 0
    n_pairs: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"kind: unknown task {self.kind!r}, expected one of {TASK_KINDS}")
        if self.kind == "char_lm" and self.vocab != 256:
            raise ValueError("vocab: char_lm is byte-level and needs vocab == 256")
        if self.seq_len < 4:
            raise ValueError(f"seq_len: must be >= 4, got {self.seq_len}")


def _copy_layout(task: TaskSpec) -> int:
    span = (task.seq_len - 1 - task.copy_gap) // 2
    if span < 1:
        raise ValueError(
            f"seq_len: {task.seq_len} too short for copy with gap {task.copy_gap}"
        )
    return span


def make_batch(
    task: TaskSpec, batch_size: int, rng: np.random.Generator | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (tokens, targets, loss_mask), each [batch, seq_len].

    Targets are next-token everywhere; the mask selects the scored span:
    all positions for char_lm, the reproduced span for copy, and exactly the
    final position (the queried value) for needle_kv.
    """
    if rng is None:
        rng = np.random.default_rng(task.seed)
    n, v = task.seq_len, task.vocab
    stream = np.empty((batch_size, n + 1), dtype=np.int64)
    mask = np.zeros((batch_size, n), dtype=np.float32)

    if task.kind == "char_lm":
        corpus = load_corpus()
        starts = rng.integers(0, corpus.size - (n + 1), size=batch_size)
        for b, s in enumerate(starts):
            stream[b] = corpus[s : s + n + 1]
        mask[:] = 1.0
    elif task.kind == "copy":
        span = _copy_layout(task)
        delim = v - 1
        body = rng.integers(0, v - 2, size=(batch_size, n + 1))
        stream[:] = body
        src = rng.integers(0, v - 2, size=(batch_size, span))
        stream[:, :span] = src
        stream[:, span + task.copy_gap] = delim
        stream[:, span + task.copy_gap + 1 : span + task.copy_gap + 1 + span] = src
        mask[:, span + task.copy_gap : span + task.copy_gap + span] = 1.0
    else:  # needle_kv
        query = v - 2
        key_lo, key_hi = 3 * v // 4, v - 2
        fill_hi = v // 2
        body_len = n - 2
        if 2 * task.n_pairs > body_len:
            raise ValueError(f"seq_len: {n} too short for {task.n_pairs} key-value pairs")
        if task.n_pairs > key_hi - key_lo:
            raise ValueError(f"n_pairs: {task.n_pairs} exceeds distinct key range")
        for b in range(batch_size):
            body = rng.integers(0, fill_hi, size=body_len)
            keys = rng.choice(np.arange(key_lo, key_hi), size=task.n_pairs, replace=False)
            values = rng.integers(0, fill_hi, size=task.n_pairs)
            starts: list[int] = []
            for cand in rng.permutation(body_len - 1):
                if all(abs(cand - s) >= 2 for s in starts):
                    starts.append(int(cand))
                    if len(starts) == task.n_pairs:
                        break
            for (start, key, value) in zip(starts, keys, values):
                body[start] = key
                body[start + 1] = value
            q = int(rng.integers(0, task.n_pairs))
            stream[b, :body_len] = body
            stream[b, body_len] = query
            stream[b, body_len + 1] = keys[q]
            stream[b, n] = values[q]
        mask[:, n - 1] = 1.0

    return stream[:, :n], stream[:, 1:], mask


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    step: int
    m: list
    v: list

    @classmethod
    def init(cls, params: list[Tensor]) -> "AdamState":
        return cls(
            step=0,
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
        )


def adamw_step(
    params: list[Tensor],
    grads: list[np.ndarray],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.95),
    weight_decay: float = 0.1,
    eps: float = 1e-8,
    decay_flags: list[bool] | None = None,
) -> AdamState:
    """In-place decoupled-weight-decay Adam update with bias correction."""
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape:
            raise T.ShapeError(f"grad shape {g.shape} != param shape {p.shape}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        update = (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + eps)
        if weight_decay and (decay_flags is None or decay_flags[i]):
            update = update + weight_decay * p.data
        p.data = (p.data - np.float32(lr) * update).astype(np.float32)
    return state


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> float:
    total = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads)))
    if max_norm > 0 and total > max_norm:
        scale = np.float32(max_norm / (total + 1e-12))
        for g in grads:
            g *= scale
    return total


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainRun:
    config: dict
    seed: int
    losses: list[float]
    steps: int
    eval_loss: float
    eval_accuracy: float
    params: ModelParams | None = field(default=None, repr=False)


def _masked_accuracy(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray) -> float:
    pred = logits.argmax(axis=-1)
    hits = (pred == targets) & (mask > 0)
    return float(hits.sum() / max(mask.sum(), 1))


def _loss_and_grads(cfg, params, tokens, targets, mask):
    tensors = params.tensors()
    with Tape() as tape:
        logits = model_forward(tokens, cfg, params)
        loss = cross_entropy(logits, targets, mask)
    backward(loss, tape)
    grads = []
    for p in tensors:
        grads.append(p.grad if p.grad is not None else np.zeros_like(p.data))
        p.grad = None
    return float(loss), grads, tensors


def train(
    cfg: ModelConfig,
    task: TaskSpec,
    steps: int,
    lr: float = 3e-3,
    batch_size: int = 8,
    weight_decay: float = 0.1,
    clip: float = 1.0,
    betas: tuple[float, float] = (0.9, 0.95),
    eval_batches: int = 4,
    params: ModelParams | None = None,
) -> TrainRun:
    """Constant-LR AdamW loop; returns the loss trace and final eval metrics.

    Divergence (non-finite loss) raises DivergenceError with the step index.
    """
    if steps < 1:
        raise ValueError(f"steps: must be >= 1, got {steps}")
    params = params if params is not None else build_model(cfg)
    state = AdamState.init(params.tensors())
    decay_flags = [p.ndim >= 2 for p in params.tensors()]
    rng = np.random.default_rng(task.seed)
    losses = []
    for step in range(steps):
        tokens, targets, mask = make_batch(task, batch_size, rng)
        loss, grads, tensors = _loss_and_grads(cfg, params, tokens, targets, mask)
        if not np.isfinite(loss):
            raise DivergenceError(step, loss)
        clip_global_norm(grads, clip)
        adamw_step(tensors, grads, state, lr, betas, weight_decay, decay_flags=decay_flags)
        losses.append(loss)

    eval_rng = np.random.default_rng(task.seed + 10_000)
    eval_losses, eval_accs = [], []
    for _ in range(eval_batches):
        tokens, targets, mask = make_batch(task, batch_size, eval_rng)
        logits = model_forward(tokens, cfg, params)
        eval_losses.append(float(cross_entropy(logits, targets, mask)))
        eval_accs.append(_masked_accuracy(logits.data, targets, mask))

    run_config = {f"model.{k}": v for k, v in cfg.to_dict().items()}
    run_config.update({f"task.{f.name}": getattr(task, f.name) for f in fields(task)})
    run_config.update(
        {"lr": lr, "batch_size": batch_size, "weight_decay": weight_decay, "clip": clip}
    )
    return TrainRun(
        config=run_config,
        seed=cfg.seed,
        losses=losses,
        steps=steps,
        eval_loss=float(np.mean(eval_losses)),
        eval_accuracy=float(np.mean(eval_accs)),
        params=params,
    )


def overfit_single_batch(
    cfg: ModelConfig,
    task: TaskSpec,
    steps: int,
    lr: float = 3e-3,
    batch_size: int = 4,
) -> list[float]:
    """Memorize one fixed batch; the loss trace is the broken-gradient canary."""
    params = build_model(cfg)
    state = AdamState.init(params.tensors())
    decay_flags = [p.ndim >= 2 for p in params.tensors()]
    tokens, targets, mask = make_batch(task, batch_size)
    losses = []
    for step in range(steps):
        loss, grads, tensors = _loss_and_grads(cfg, params, tokens, targets, mask)
        if not np.isfinite(loss):
            raise DivergenceError(step, loss)
        clip_global_norm(grads, 1.0)
        adamw_step(tensors, grads, state, lr, decay_flags=decay_flags)
        losses.append(loss)
    return losses


# ---------------------------------------------------------------------------
# Loop scaling experiment
# ---------------------------------------------------------------------------


@dataclass
class LoopScalingRow:
    loops: int
    seed: int
    final_loss: float
    eval_loss: float


@dataclass
class LoopScalingReport:
    rows: list[LoopScalingRow]
    loop_values: list[int]
    seeds: list[int]

    def mean_eval_loss(self, loops: int) -> float:
        return float(np.mean([r.eval_loss for r in self.rows if r.loops == loops]))

    @property
    def trend_holds(self) -> bool:
        """Mean eval loss at the largest loop count <= at the smallest."""
        lo, hi = min(self.loop_values), max(self.loop_values)
        return self.mean_eval_loss(hi) <= self.mean_eval_loss(lo)

    @property
    def status(self) -> str:
        return "ok" if self.trend_holds else "warn"

    def to_csv(self) -> str:
        lines = ["loops,seed,final_loss,eval_loss"]
        lines += [
            f"{r.loops},{r.seed},{r.final_loss:.6f},{r.eval_loss:.6f}" for r in self.rows
        ]
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        lines = ["loop scaling (mean eval loss per loop count)"]
        for t in self.loop_values:
            lines.append(f"loops = {t}  mean_eval_loss = {self.mean_eval_loss(t):.4f}")
        if self.status == "warn":
            lines.append("WARN trend violated: higher loop count did not reach lower mean loss")
        else:
            lines.append("trend holds: loss non-increasing from fewest to most loops")
        return "\n".join(lines) + "\n"


def loop_scaling_experiment(
    base_cfg: ModelConfig,
    loop_values: list[int],
    task: TaskSpec,
    steps: int,
    seeds: list[int],
    **train_kwargs,
) -> LoopScalingReport:
    """Train one model per (loop count, seed); loop count 1 is the
    non-recursive reduction of the same family."""
    if any(t < 1 for t in loop_values):
        raise ValueError(f"loop_values: all must be >= 1, got {loop_values}")
    rows = []
    for t in loop_values:
        for seed in seeds:
            cfg = replace(base_cfg, loops=t, seed=seed)
            run = train(cfg, replace(task, seed=seed), steps, **train_kwargs)
            tail = max(1, len(run.losses) // 10)
            rows.append(
                LoopScalingRow(
                    loops=t,
                    seed=seed,
                    final_loss=float(np.mean(run.losses[-tail:])),
                    eval_loss=run.eval_loss,
                )
            )
    return LoopScalingReport(rows=rows, loop_values=list(loop_values), seeds=list(seeds))


# ---------------------------------------------------------------------------
# Run serialization
# ---------------------------------------------------------------------------


def trainrun_text(run: TrainRun) -> str:
    lines = [f"{k} = {v}" for k, v in run.config.items()]
    lines += [
        f"seed = {run.seed}",
        f"steps = {run.steps}",
        f"eval_loss = {run.eval_loss:.6f}",
        f"eval_accuracy = {run.eval_accuracy:.6f}",
        "losses = " + ",".join(f"{x:.6f}" for x in run.losses),
    ]
    return "\n".join(lines) + "\n"


def losses_csv(run: TrainRun) -> str:
    lines = ["step,loss"]
    lines += [f"{i},{x:.6f}" for i, x in enumerate(run.losses)]
    return "\n".join(lines) + "\n"
