"""Command-line entry points.

Commands: train, check, decay, bench, spectrum.  Every run writes a manifest
(command, config hash, seed, git describe, per-phase timings) atomically at
the end.  Numeric CSV output uses 17 significant digits so artifacts
round-trip exactly.  Exit codes: 0 success, 1 check/assertion failure,
2 usage error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from .errors import MfnError, NumericalError
from .graphs import load_tu_dataset, split_folds
from .linalg.ldl import ldl_factor, selected_inverse
from .linalg.pattern import dense_pattern, grid_pattern, order, path_pattern
from .matfunc import PoleSet, decay_profile
from .model import LayerConfig, forward, init_params, load_checkpoint, save_checkpoint
from .operators import OperatorStack, laplacian_operator, normalize
from .linalg.dense import eigh
from .train import TrainConfig, evaluate, train
from . import checks as checks_mod
from . import experiments

FLOAT_FMT = "%.17g"


def fmt(v) -> str:
    return FLOAT_FMT % float(v)


def write_csv(path, header: list[str], rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(fmt(v) if isinstance(v, (int, float, np.floating)) else str(v)
                              for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def _git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0:
            return out.stdout.strip()
    except Exception:
        pass
    return "unknown"


def write_manifest(out_dir: Path, command: str, config: dict, seed: int,
                   timings: dict) -> None:
    canon = json.dumps(config, sort_keys=True)
    manifest = {
        "command": command,
        "config_hash": hashlib.sha256(canon.encode()).hexdigest(),
        "config": config,
        "seed": seed,
        "git_describe": _git_describe(),
        "timings_s": timings,
    }
    path = out_dir / "manifest.json"
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(manifest, sort_keys=True, indent=1))
    os.replace(tmp, path)


def _load_config_file(path) -> dict:
    if not path:
        return {}
    return json.loads(Path(path).read_text())


def _threads_from(args) -> int:
    if getattr(args, "threads", None):
        return args.threads
    env = os.environ.get("MFN_THREADS")
    return int(env) if env else 1


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    t_start = time.time()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg_file = _load_config_file(args.config)
    seed = args.seed if args.seed is not None else cfg_file.get("seed", 0)
    timings: dict[str, float] = {}

    if args.task == "kchain":
        kc = cfg_file.get("kchain", {})
        mc_kwargs = cfg_file.get("model")
        config = LayerConfig(**mc_kwargs) if mc_kwargs else experiments.kchain_config()
        t0 = time.time()
        result = experiments.kchain_experiment(
            k=kc.get("k", 8), seed=seed, epochs=kc.get("epochs", 500),
            lr=kc.get("lr", 0.02), config=config)
        timings["train"] = time.time() - t0
        write_csv(out_dir / "metrics.csv", ["epoch", "split", "metric", "value"],
                  result["history"])
        save_checkpoint(out_dir / "checkpoint", result["params"], config,
                        extra={"seed": seed, "task": "kchain"})
        print(f"kchain train accuracy {result['train_accuracy']:.3f} "
              f"test accuracy {result['test_accuracy']:.3f} "
              f"epochs {result['epochs_run']}")
        write_manifest(out_dir, "train", {"task": "kchain", **kc}, seed, timings)
        return 0

    if args.task == "tu":
        if not args.data:
            print("error: --data is required for the tu task", file=sys.stderr)
            return 2
        t0 = time.time()
        ds = load_tu_dataset(args.data)
        timings["load"] = time.time() - t0
        mc_kwargs = cfg_file.get("model")
        config = (LayerConfig(**mc_kwargs) if mc_kwargs
                  else experiments.tu_model_config(ds))
        tr = cfg_file.get("train", {})
        plan = split_folds(ds, tr.get("folds", 10), seed)
        train_idx, test_idx = plan.split(tr.get("fold", 0))
        tconf = TrainConfig(model=config, epochs=tr.get("epochs", 80),
                            batch_size=tr.get("batch_size", 32),
                            lr=tr.get("lr", 1e-3), seed=seed, loss="cross_entropy")
        t0 = time.time()
        params, history = train(ds, tconf, train_idx=train_idx)
        timings["train"] = time.time() - t0
        metrics = evaluate(params, config, ds, test_idx, loss_kind="cross_entropy")
        history.append((tconf.epochs - 1, "test", "accuracy", metrics["accuracy"]))
        write_csv(out_dir / "metrics.csv", ["epoch", "split", "metric", "value"], history)
        save_checkpoint(out_dir / "checkpoint", params, config,
                        extra={"seed": seed, "task": "tu", "data": str(args.data)})
        print(f"tu fold-0 test accuracy {metrics['accuracy']:.4f}")
        write_manifest(out_dir, "train", {"task": "tu", **tr}, seed, timings)
        return 0

    print(f"error: unknown task {args.task!r}", file=sys.stderr)
    return 2


# ---------------------------------------------------------------------------
# check
# ---------------------------------------------------------------------------


def cmd_check(args) -> int:
    suite = checks_mod.SUITES.get(args.suite)
    if suite is None:
        print(f"error: unknown suite {args.suite!r}", file=sys.stderr)
        return 2
    kwargs = {}
    if args.suite == "backends" and args.corrupt_pole:
        kwargs["corrupt_pole"] = True
    try:
        result = suite(seed=args.seed, **kwargs)
    except MfnError as exc:
        print(f"suite {args.suite} failed with {type(exc).__name__}: {exc}")
        return 1
    for key, val in result.details.items():
        print(f"{args.suite}.{key} = {val}")
    print(f"{args.suite}: max residual (relative to tolerance) = {result.residual:.3e}")
    if not result.passed:
        if result.failure is not None and args.out:
            Path(args.out).parent.mkdir(parents=True, exist_ok=True)
            result.failure.dump(args.out)
            print(f"failing case written to {args.out}")
        print(f"{args.suite}: FAIL")
        return 1
    print(f"{args.suite}: PASS")
    return 0


# ---------------------------------------------------------------------------
# decay
# ---------------------------------------------------------------------------


def chain_adjacency_stack(n: int) -> OperatorStack:
    pattern = path_pattern(n, 1)
    diag = np.zeros((1, n, 1, 1))
    off = np.ones((1, n - 1, 1, 1))
    return OperatorStack(pattern=pattern, diag=diag, off=off)


def cmd_decay(args) -> int:
    out_dir = Path(args.out).parent if args.out else None
    gammas = [float(g) for g in args.gamma.split(",") if g]
    stack = chain_adjacency_stack(args.n)
    rows = []
    t0 = time.time()
    for gamma in gammas:
        poles = PoleSet.raw(np.array([complex(args.re, gamma)]), np.array([1.0 + 0j]))
        profile = decay_profile(stack, poles, source=args.source)
        for d, mag in profile:
            rows.append((fmt(gamma), d, mag))
    header = ["gamma", "distance", "magnitude"]
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        write_csv(args.out, header, rows)
        write_manifest(Path(args.out).parent, "decay",
                       {"gamma": gammas, "n": args.n, "re": args.re}, 0,
                       {"decay": time.time() - t0})
    else:
        print(",".join(header))
        for row in rows:
            print(",".join(str(x) if not isinstance(x, float) else fmt(x) for x in row))
    return 0


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------


def bench_once(kind: str, n: int, backend: str, z: complex = 2.5 + 0.5j):
    """One factorization benchmark point; returns (op_count, stored, seconds)."""
    if kind == "chain":
        pattern = path_pattern(n, 1)
    elif kind == "grid":
        side = int(round(np.sqrt(n)))
        pattern = grid_pattern(side, side, 1)
        n = side * side
    else:
        raise ValueError(f"unknown pattern {kind!r}")
    if backend == "dense":
        pattern = dense_pattern(n, 1)
    from .linalg.pattern import BlockSparseMat

    diag = np.zeros((n, 1, 1))
    off = np.ones((pattern.num_edges, 1, 1))
    H = BlockSparseMat(pattern=pattern, diag=diag, off=off)
    method = "natural" if backend == "dense" else "nested_dissection"
    t0 = time.time()
    fac = ldl_factor(H, z, order(pattern, method))
    selected_inverse(fac)
    dt = time.time() - t0
    return fac.op_count + fac.op_count_selinv, fac.stored_blocks, dt


def cmd_bench(args) -> int:
    sizes = [int(s) for s in args.sizes.split(",") if s]
    rows = []
    timings: dict[str, float] = {}
    for n in sizes:
        ops, stored, dt = bench_once(args.pattern, n, args.backend)
        rows.append((args.pattern, n, args.backend, ops, stored))
        timings[f"n{n}"] = dt
    # wall-clock stays out of the CSV so reruns are byte-identical
    header = ["pattern", "n", "backend", "op_count", "stored_blocks"]
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        write_csv(args.out, header, rows)
        write_manifest(Path(args.out).parent, "bench",
                       {"pattern": args.pattern, "sizes": sizes,
                        "backend": args.backend}, 0, timings)
    else:
        print(",".join(header))
        for row in rows:
            print(",".join(str(x) for x in row))
    return 0


# ---------------------------------------------------------------------------
# spectrum
# ---------------------------------------------------------------------------


def cmd_spectrum(args) -> int:
    ds = load_tu_dataset(args.data)
    rows = []
    t0 = time.time()
    for gid, g in enumerate(ds.graphs):
        stack = laplacian_operator(g)
        if g.n * stack.pattern.M < 2:
            continue
        normed, _ = normalize(stack, mode="batch")
        for c in range(stack.channels):
            lam_pre, _ = eigh(stack.dense(c))
            lam_post, _ = eigh(normed.dense(c))
            for i, (a, b) in enumerate(zip(lam_pre, lam_post)):
                rows.append((gid, c, i, a, b))
    header = ["graph", "channel", "index", "eigenvalue_pre", "eigenvalue_post"]
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        write_csv(args.out, header, rows)
        write_manifest(Path(args.out).parent, "spectrum", {"data": str(args.data)}, 0,
                       {"spectrum": time.time() - t0})
    else:
        print(",".join(header))
        for row in rows:
            print(",".join(fmt(x) if isinstance(x, float) else str(x) for x in row))
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mfn", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write artifacts")
    p.add_argument("--task", choices=["tu", "kchain"], required=True)
    p.add_argument("--data", help="TU dataset directory")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("check", help="run a property suite")
    p.add_argument("--suite", choices=sorted(checks_mod.SUITES), required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt-pole", action="store_true",
                   help="inject a real pole on the spectrum (designed failure)")
    p.add_argument("--out", help="path for serializing a failing case")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("decay", help="resolvent decay profiles on a chain")
    p.add_argument("--gamma", default="0.5,1.0,2.0", help="comma list of Im z")
    p.add_argument("--re", type=float, default=2.5, help="Re z of the pole family")
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--source", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_decay)

    p = sub.add_parser("bench", help="factorization scaling benchmark")
    p.add_argument("--pattern", choices=["chain", "grid"], default="chain")
    p.add_argument("--sizes", default="64,256,1024,4096")
    p.add_argument("--backend", choices=["selected", "dense"], default="selected")
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("spectrum", help="operator eigenvalues before/after normalization")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--out")
    p.set_defaults(func=cmd_spectrum)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 3
    except MfnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
