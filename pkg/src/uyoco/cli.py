"""Command-line entry point: builds, training runs, decoding, verification
checks, cost tables, and layer profiles.

Configuration is resolved in three layers: built-in defaults, then a flat
`key = value` config file (`--config`, `#` comments allowed), then explicit
flags; flags mirror file keys one-to-one. Exit codes: 0 success, 1 usage or
validation failure (including a failed check), 2 internal error. Soft trend
warnings are printed but never change the exit code.
"""

from __future__ import annotations

import argparse
import sys
import traceback
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .analysis import layer_profile, profile_csv
from .costs import (
    ArchDescriptor,
    cost_csv,
    kv_cache_bytes,
    reproduce_paper_kv_table,
)
from .model import (
    FAMILIES,
    LOOP_POSITIONS,
    ConfigError,
    ModelConfig,
    build_model,
    load_checkpoint,
    model_forward,
    param_count,
    save_checkpoint,
)
from .oracles import reference_attention, swa_span
from .primitives import AttnParams, attention_swa
from .runtime import (
    cache_report,
    cache_stats,
    decode_step,
    generate_greedy,
    generate_greedy_reference,
    prefill,
)
from .training import (
    TASK_KINDS,
    TaskSpec,
    loop_scaling_experiment,
    losses_csv,
    train,
    trainrun_text,
)

__all__ = ["CliError", "RunConfig", "parse_args", "run", "main"]


class CliError(Exception):
    """Usage or validation problem; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


@dataclass
class RunConfig:
    command: str
    options: dict
    model_cfg: ModelConfig | None = None
    task: TaskSpec | None = None


# ---------------------------------------------------------------------------
# Config file + flag resolution
# ---------------------------------------------------------------------------


def load_config_file(path: str) -> dict:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CliError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        values[key.strip()] = _parse_scalar(value.strip())
    return values


def _parse_scalar(raw: str):
    if raw.lower() in ("none", ""):
        return None
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            pass
    return raw


_MODEL_FIELDS = [f.name for f in fields(ModelConfig)]


def _add_model_flags(parser: argparse.ArgumentParser) -> None:
    g = parser.add_argument_group("model")
    g.add_argument("--family", choices=FAMILIES)
    g.add_argument("--n-layers", type=int, dest="n_layers")
    g.add_argument("--d-model", type=int, dest="d_model")
    g.add_argument("--n-heads", type=int, dest="n_heads")
    g.add_argument("--n-kv-heads", type=int, dest="n_kv_heads")
    g.add_argument("--window", type=int)
    g.add_argument("--loops", type=int)
    g.add_argument("--vocab", type=int)
    g.add_argument("--ffn-hidden", type=int, dest="ffn_hidden")
    g.add_argument("--loop-position", choices=LOOP_POSITIONS, dest="loop_position")
    g.add_argument("--rins-recursive-layers", type=int, dest="rins_recursive_layers")
    g.add_argument("--rope-base", type=float, dest="rope_base")
    g.add_argument("--seed", type=int)


def _add_task_flags(parser: argparse.ArgumentParser) -> None:
    g = parser.add_argument_group("task")
    g.add_argument("--task", choices=TASK_KINDS)
    g.add_argument("--seq-len", type=int, dest="seq_len")
    g.add_argument("--copy-gap", type=int, dest="copy_gap")
    g.add_argument("--n-pairs", type=int, dest="n_pairs")


def _resolve(ns, file_cfg: dict, key: str, default=None):
    flag = getattr(ns, key, None)
    if flag is not None:
        return flag
    if key in file_cfg:
        return file_cfg[key]
    return default


def _resolve_model_config(ns, file_cfg: dict) -> ModelConfig:
    kwargs = {}
    for name in _MODEL_FIELDS:
        value = _resolve(ns, file_cfg, name)
        if value is not None:
            kwargs[name] = value
    return ModelConfig(**kwargs)


def _resolve_task(ns, file_cfg: dict, cfg: ModelConfig) -> TaskSpec:
    kind = _resolve(ns, file_cfg, "task", "char_lm")
    kwargs = dict(kind=kind, seed=cfg.seed)
    kwargs["vocab"] = 256 if kind == "char_lm" else cfg.vocab
    for name, default in (("seq_len", None), ("copy_gap", None), ("n_pairs", None)):
        value = _resolve(ns, file_cfg, name, default)
        if value is not None:
            kwargs[name] = value
    return TaskSpec(**kwargs)


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _build_parser() -> _Parser:
    parser = _Parser(prog="uyoco", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-check", help="build a model and verify parameter accounting")
    _add_model_flags(p)
    p.add_argument("--config")

    p = sub.add_parser("train", help="train one configuration on a synthetic task")
    _add_model_flags(p)
    _add_task_flags(p)
    p.add_argument("--config")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--out")

    p = sub.add_parser("loop-scale", help="train across loop counts and seeds")
    _add_model_flags(p)
    _add_task_flags(p)
    p.add_argument("--config")
    p.add_argument("--loops-list", dest="loops_list")
    p.add_argument("--seeds", help="comma-separated seed list")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--out")

    p = sub.add_parser("decode", help="greedy continuation from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", required=True, help="comma-separated token ids")
    p.add_argument("--max-new", type=int, dest="max_new", default=16)
    p.add_argument("--verify", action="store_true", help="cross-check against full forwards")
    p.add_argument("--out")

    p = sub.add_parser("check", help="run one verification suite")
    p.add_argument("what", choices=["grad", "decode-equivalence", "swa-oracle", "cache-accounting"])
    p.add_argument("--config")
    _add_model_flags(p)

    p = sub.add_parser("cost", help="analytic cache/compute costs")
    p.add_argument("--paper-table", action="store_true", dest="paper_table")
    _add_model_flags(p)
    p.add_argument("--config")
    p.add_argument("--n-list", dest="n_list", help="comma-separated sequence lengths")
    p.add_argument("--bytes-per-elem", type=int, dest="bytes_per_elem", default=2)
    p.add_argument("--out")

    p = sub.add_parser("analyze", help="layer-distance profile of a model")
    p.add_argument("--profile", action="store_true", help="emit the angular-distance profile")
    p.add_argument("--checkpoint")
    _add_model_flags(p)
    p.add_argument("--config")
    p.add_argument("--seq-len", type=int, dest="seq_len", default=32)
    p.add_argument("--batch-size", type=int, dest="batch_size", default=2)
    p.add_argument("--out")

    return parser


_NEEDS_MODEL = ("build-check", "train", "loop-scale", "cost", "analyze", "check")
_NEEDS_TASK = ("train", "loop-scale")


def parse_args(argv) -> RunConfig:
    ns = _build_parser().parse_args(argv)
    file_cfg = load_config_file(ns.config) if getattr(ns, "config", None) else {}
    rc = RunConfig(command=ns.command, options=vars(ns))
    try:
        if ns.command in _NEEDS_MODEL and not (
            ns.command == "analyze" and getattr(ns, "checkpoint", None)
        ):
            rc.model_cfg = _resolve_model_config(ns, file_cfg)
        if ns.command in _NEEDS_TASK:
            rc.task = _resolve_task(ns, file_cfg, rc.model_cfg)
        for key in ("steps", "lr", "batch_size", "loops_list", "seeds"):
            if key in rc.options and rc.options[key] is None and key in file_cfg:
                rc.options[key] = file_cfg[key]
    except (ConfigError, ValueError) as exc:
        raise CliError(str(exc)) from exc
    return rc


def _int_list(raw, what: str) -> list[int]:
    try:
        return [int(x) for x in str(raw).split(",") if x != ""]
    except ValueError:
        raise CliError(f"{what}: expected comma-separated integers, got {raw!r}") from None


def _outdir(rc: RunConfig) -> Path | None:
    out = rc.options.get("out")
    if out is None:
        return None
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _cmd_build_check(rc: RunConfig) -> int:
    cfg = rc.model_cfg
    params = build_model(cfg)
    closed = param_count(cfg)
    enumerated = params.n_elements()
    print(f"family = {cfg.family}  layers = {cfg.n_layers}  d_model = {cfg.d_model}")
    print(f"param_count closed form = {closed}")
    print(f"param_count enumerated  = {enumerated}")
    ok = closed == enumerated
    if cfg.family in ("uyoco", "universal_transformer", "rins"):
        counts = {t: param_count(replace(cfg, loops=t)) for t in (1, 2, 3, 5)}
        invariant = len(set(counts.values())) == 1
        print(f"loop-count invariance = {'yes' if invariant else 'NO: ' + str(counts)}")
        ok = ok and invariant
    print("build-check:", "PASS" if ok else "FAIL")
    return 0 if ok else 1


def _cmd_train(rc: RunConfig) -> int:
    steps = int(rc.options.get("steps") or 200)
    lr = float(rc.options.get("lr") or 3e-3)
    batch = int(rc.options.get("batch_size") or 8)
    run = train(rc.model_cfg, rc.task, steps=steps, lr=lr, batch_size=batch)
    print(f"task = {rc.task.kind}  steps = {run.steps}  final_loss = {run.losses[-1]:.4f}")
    print(f"eval_loss = {run.eval_loss:.4f}  eval_accuracy = {run.eval_accuracy:.4f}")
    out = _outdir(rc)
    if out is not None:
        (out / "run.txt").write_text(trainrun_text(run))
        (out / "losses.csv").write_text(losses_csv(run))
        save_checkpoint(str(out / "checkpoint.bin"), rc.model_cfg, run.params)
        print(f"wrote {out}/run.txt, losses.csv, checkpoint.bin")
    return 0


def _cmd_loop_scale(rc: RunConfig) -> int:
    loops_list = _int_list(rc.options.get("loops_list") or "1,3", "--loops-list")
    seeds = _int_list(rc.options.get("seeds") or "0,1,2", "--seeds")
    steps = int(rc.options.get("steps") or 300)
    lr = float(rc.options.get("lr") or 3e-3)
    batch = int(rc.options.get("batch_size") or 8)
    if rc.model_cfg.family in ("transformer", "yoco"):
        raise CliError(f"--family: {rc.model_cfg.family} cannot loop; pick a recursive family")
    report = loop_scaling_experiment(
        rc.model_cfg, loops_list, rc.task, steps, seeds, lr=lr, batch_size=batch
    )
    print(report.summary(), end="")
    out = _outdir(rc)
    if out is not None:
        (out / "loop_scale.csv").write_text(report.to_csv())
        (out / "summary.txt").write_text(report.summary())
        print(f"wrote {out}/loop_scale.csv, summary.txt")
    return 0


def _cmd_decode(rc: RunConfig) -> int:
    cfg, params = load_checkpoint(rc.options["checkpoint"])
    prompt = _int_list(rc.options["prompt"], "--prompt")
    max_new = int(rc.options["max_new"])
    generated = generate_greedy(prompt, params, cfg, max_new)
    print("prompt    =", ",".join(map(str, prompt)))
    print("generated =", ",".join(map(str, generated)))
    if rc.options.get("verify"):
        reference = generate_greedy_reference(prompt, params, cfg, max_new)
        match = reference == generated
        print("verify against full forwards:", "PASS" if match else f"FAIL {reference}")
        if not match:
            return 1
    out = _outdir(rc)
    if out is not None:
        (out / "decode.txt").write_text(
            "prompt = " + ",".join(map(str, prompt)) + "\n"
            "generated = " + ",".join(map(str, generated)) + "\n"
        )
        print(f"wrote {out}/decode.txt")
    return 0


def _desk_family_grid() -> list[ModelConfig]:
    grid = []
    for family, loops_list in (
        ("transformer", [1]),
        ("yoco", [1]),
        ("uyoco", [1, 2, 3, 5]),
        ("universal_transformer", [2, 3]),
        ("rins", [2, 3]),
    ):
        for loops in loops_list:
            grid.append(ModelConfig(family=family, loops=loops, vocab=64, seed=7))
    return grid


def _check_grad() -> tuple[bool, str]:
    cfg = ModelConfig(
        family="uyoco", n_layers=2, d_model=8, n_heads=2, n_kv_heads=1,
        window=4, loops=3, vocab=17, seed=1,
    )
    params = build_model(cfg)
    rng = np.random.default_rng(0)
    for _, t in params.named_tensors():
        if t.ndim >= 2:
            t.data = (rng.standard_normal(t.shape) * 0.3).astype(np.float32)
    tokens = np.array([3, 1, 4, 1, 5, 9])
    targets = np.array([1, 4, 1, 5, 9, 2])

    def f(_):
        return T.cross_entropy(model_forward(tokens, cfg, params), targets)

    end_to_end = T.grad_check_fd(f, params.tensors(), eps=3e-3, max_coords_per_tensor=4)

    a = T.Tensor(rng.uniform(-1, 1, (3, 4)).astype(np.float32), requires_grad=True)
    b = T.Tensor(rng.uniform(-1, 1, (4, 5)).astype(np.float32), requires_grad=True)
    primitive = T.grad_check_fd(
        lambda ps: T.tsum(T.silu(T.softmax_rows(T.matmul(ps[0], ps[1])))), [a, b]
    )
    ok = end_to_end <= 1e-2 and primitive <= 1e-3
    return ok, f"end_to_end_rel_err = {end_to_end:.2e} (<=1e-2), primitive = {primitive:.2e} (<=1e-3)"


def _check_decode_equivalence() -> tuple[bool, str]:
    rng = np.random.default_rng(2)
    worst = 0.0
    for cfg in _desk_family_grid():
        params = build_model(cfg)
        prompt = list(rng.integers(0, cfg.vocab, 20))
        state, logits = prefill(prompt, params, cfg)
        seq = list(prompt)
        for _ in range(12):
            nxt = int(np.argmax(logits.data))
            seq.append(nxt)
            logits = decode_step(state, nxt, params, cfg)
            reference = model_forward(seq, cfg, params).data[-1]
            worst = max(worst, float(np.abs(reference - logits.data).max()))
        if generate_greedy(prompt, params, cfg, 8) != generate_greedy_reference(prompt, params, cfg, 8):
            return False, f"greedy mismatch for {cfg.family} loops={cfg.loops}"
    return worst <= 1e-4, f"max_logit_drift = {worst:.2e} (<=1e-4) over {len(_desk_family_grid())} configs"


def _check_swa_oracle() -> tuple[bool, str]:
    rng = np.random.default_rng(3)
    worst = 0.0
    for n, window, heads, kv_heads, head_dim in ((8, 3, 2, 1, 4), (12, 5, 4, 2, 8)):
        params = AttnParams(
            n_heads=heads, n_kv_heads=kv_heads, head_dim=head_dim,
            w_q=T.Tensor(np.eye(heads * head_dim, dtype=np.float32)),
            w_o=T.Tensor(rng.standard_normal((heads * head_dim, heads * head_dim)).astype(np.float32)),
        )
        q = rng.standard_normal((n, heads * head_dim)).astype(np.float32)
        k = rng.standard_normal((n, kv_heads * head_dim)).astype(np.float32)
        v = rng.standard_normal((n, kv_heads * head_dim)).astype(np.float32)
        got = attention_swa(T.Tensor(q), T.Tensor(k), T.Tensor(v), window, params).data
        want = reference_attention(
            q, k, v, params.w_o.data, heads, kv_heads, head_dim, swa_span(window)
        )
        worst = max(worst, float(np.abs(got - want).max()))
    return worst <= 1e-6, f"max_abs_err vs dense oracle = {worst:.2e} (<=1e-6)"


def _check_cache_accounting() -> tuple[bool, str]:
    rng = np.random.default_rng(4)
    checked = 0
    for cfg in _desk_family_grid():
        desc = ArchDescriptor.from_model_config(cfg)
        params = build_model(cfg)
        prompt = list(rng.integers(0, cfg.vocab, 3))
        state, _ = prefill(prompt, params, cfg)
        for _ in range(61):
            decode_step(state, int(rng.integers(0, cfg.vocab)), params, cfg)
            want = kv_cache_bytes(desc, state.produced_len)
            got = cache_stats(state).total_bytes(desc.bytes_per_elem)
            if got != want:
                return False, (
                    f"{cfg.family} loops={cfg.loops} n={state.produced_len}: live {got} != formula {want}"
                )
            checked += 1
    return True, f"formula == live bytes at {checked} (config, length) points"


_CHECKS = {
    "grad": _check_grad,
    "decode-equivalence": _check_decode_equivalence,
    "swa-oracle": _check_swa_oracle,
    "cache-accounting": _check_cache_accounting,
}


def _cmd_check(rc: RunConfig) -> int:
    what = rc.options["what"]
    ok, detail = _CHECKS[what]()
    print(f"check {what}: {'PASS' if ok else 'FAIL'} ({detail})")
    return 0 if ok else 1


def _cmd_cost(rc: RunConfig) -> int:
    if rc.options.get("paper_table"):
        diff = reproduce_paper_kv_table()
        print(diff.render(), end="")
        return 0 if diff.all_match else 1
    seq_lens = _int_list(rc.options.get("n_list") or "1024,4096,16384,65536", "--n-list")
    desc = ArchDescriptor.from_model_config(
        rc.model_cfg, bytes_per_elem=int(rc.options.get("bytes_per_elem") or 2)
    )
    csv = cost_csv([desc], seq_lens)
    out = _outdir(rc)
    if out is not None:
        (out / "costs.csv").write_text(csv)
        print(f"wrote {out}/costs.csv")
    else:
        print(csv, end="")
    return 0


def _cmd_analyze(rc: RunConfig) -> int:
    if rc.options.get("checkpoint"):
        cfg, params = load_checkpoint(rc.options["checkpoint"])
    else:
        cfg = rc.model_cfg
        params = build_model(cfg)
    rng = np.random.default_rng(cfg.seed)
    tokens = rng.integers(0, cfg.vocab, size=(rc.options["batch_size"], rc.options["seq_len"]))
    entries = layer_profile(cfg, params, tokens)
    csv = profile_csv(entries)
    boundary = [e for e in entries if e.block == "cross" and e.layer == 0 and e.iteration == 0]
    within = [e for e in entries if not (e.block == "cross" and e.layer == 0 and e.iteration == 0)]
    print(f"profile entries = {len(entries)} (layer passes - 1)")
    if boundary and within:
        mean_within = float(np.mean([e.mean_distance for e in within]))
        ratio = boundary[0].mean_distance / max(mean_within, 1e-12)
        print(
            f"block-interface distance = {boundary[0].mean_distance:.4f}, "
            f"within-block mean = {mean_within:.4f}, ratio = {ratio:.2f} (informational)"
        )
    out = _outdir(rc)
    if out is not None:
        (out / "profile.csv").write_text(csv)
        print(f"wrote {out}/profile.csv")
    else:
        print(csv, end="")
    return 0


_DISPATCH = {
    "build-check": _cmd_build_check,
    "train": _cmd_train,
    "loop-scale": _cmd_loop_scale,
    "decode": _cmd_decode,
    "check": _cmd_check,
    "cost": _cmd_cost,
    "analyze": _cmd_analyze,
}


def run(rc: RunConfig) -> int:
    return _DISPATCH[rc.command](rc)


def main(argv=None) -> int:
    try:
        rc = parse_args(sys.argv[1:] if argv is None else argv)
        return run(rc)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
