"""Command line entry point: ``run``, ``verify-theorem1`` and ``list-problems``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .acq_optimizer import OptimizerConfig
from .harness import RunConfig, run_experiment
from .problems import SYNTHETIC_NAMES, make_synthetic
from .theorem1_verifier import ratio_report

# config-file keys mirror the long flags of ``run``
_CONFIG_KEYS = {"problem", "acq", "budget", "reps", "seed", "out", "optimizer-preset", "timing", "workers"}


def read_config_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for n, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("_", "-")
        if key not in _CONFIG_KEYS:
            raise ValueError(f"{path}:{n}: unknown key {key!r}")
        out[key] = value
    return out


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="budgeted-bo", description="Budgeted Bayesian optimization experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run replications of a BO experiment and write CSV output")
    run.add_argument("--config", help="flat key = value file; flags given explicitly take precedence")
    run.add_argument("--problem", help=f"one of {', '.join(SYNTHETIC_NAMES)} or a table file")
    run.add_argument("--acq", help="ei | ei_puc | ei_puc_cc | sobol | bmsei:N[:m1xm2..] | bmsei_path:N")
    run.add_argument("--budget", type=float)
    run.add_argument("--reps", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--out")
    run.add_argument("--optimizer-preset", choices=("desk", "paper"))
    run.add_argument("--timing", action="store_const", const=True, default=None,
                     help="record wall-clock seconds in the trace (breaks byte-for-byte reruns)")
    run.add_argument("--workers", type=int)

    ver = sub.add_parser("verify-theorem1", help="print Monte-Carlo policy-value ratios as CSV")
    ver.add_argument("--epsilons", type=_floats, default=[0.2, 0.1, 0.05, 0.01])
    ver.add_argument("--delta", type=float, default=0.1)
    ver.add_argument("--trajectories", type=int, default=100_000)
    ver.add_argument("--seed", type=int, default=0)

    sub.add_parser("list-problems", help="list the built-in synthetic problems")
    return p


def _run_config(args) -> RunConfig:
    merged = read_config_file(args.config) if args.config else {}
    flags = {"problem": args.problem, "acq": args.acq, "budget": args.budget, "reps": args.reps,
             "seed": args.seed, "out": args.out, "optimizer-preset": args.optimizer_preset,
             "timing": args.timing, "workers": args.workers}
    merged.update({k: v for k, v in flags.items() if v is not None})
    for key in ("problem", "budget"):
        if key not in merged:
            raise ValueError(f"--{key} is required (on the command line or in --config)")
    timing = merged.get("timing", False)
    if isinstance(timing, str):
        timing = timing.lower() in ("1", "true", "yes", "on")
    return RunConfig(
        problem=str(merged["problem"]),
        acquisition=str(merged.get("acq", "ei")),
        budget=float(merged["budget"]),
        replications=int(merged.get("reps", 20)),
        seed=int(merged.get("seed", 0)),
        optimizer=OptimizerConfig.preset(str(merged.get("optimizer-preset", "desk"))),
        out=Path(merged.get("out", "results")),
        timing=bool(timing),
        workers=int(merged.get("workers", 1)),
    )


def _cmd_run(args) -> int:
    config = _run_config(args)
    result = run_experiment(config)
    done = len(result.traces)
    print(f"{done}/{config.replications} replications written to {config.out}")
    for rep, msg in sorted(result.failures.items()):
        print(f"replication {rep} failed: {msg}", file=sys.stderr)
    return 0 if done else 1


def _cmd_verify(args) -> int:
    rng = np.random.default_rng(args.seed)
    rows = ratio_report([(e, args.delta) for e in args.epsilons], args.trajectories, rng)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["epsilon", "delta", "variant", "policy", "mean", "std_error", "ratio"])
    for r in rows:
        w.writerow([format(r.epsilon, ".17g"), format(r.delta, ".17g"), r.variant, r.policy,
                    format(r.mean, ".17g"), format(r.std_error, ".17g"), format(r.ratio, ".17g")])
    return 0


def _cmd_list(args) -> int:
    for name in SYNTHETIC_NAMES:
        spec = make_synthetic(name)
        print(f"{name}\tdim={spec.dim}\tbounds=[{spec.lower[0]:g}, {spec.upper[0]:g}]\tmax={spec.known_max:.6g}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    handler = {"run": _cmd_run, "verify-theorem1": _cmd_verify, "list-problems": _cmd_list}[args.command]
    try:
        return handler(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
