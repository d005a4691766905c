"""The budgeted BO loop, replication management and CSV output.

Seeds: replication ``r`` of a run with root seed ``s`` owns
``SeedSequence(s, spawn_key=(r,))``, whose five children drive, in order, the
initial design, the cost-function draw, the tree base samples, the fantasy
budget rollouts and the acquisition optimizer. Streams never depend on the
acquisition, so different methods share designs and cost functions.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .acq_optimizer import (
    OptimizerConfig, WarmStartCache, maximize_scalar_acq, maximize_tree, sobol_points, tree_warm_cache,
)
from .acquisition import BudgetState, ClosedFormAcquisition
from .gp_core import GpFitError, PriorConfig
from .multistep_tree import BaseSampleSheet, FantasyBudget, TreeLayout, fantasy_budget
from .problems import SYNTHETIC_NAMES, ProblemSpec, load_tabular, make_synthetic, sample_cost_params
from .surrogate import Dataset, Observation, refit

log = logging.getLogger(__name__)

REGRET_FLOOR = 1e-8
GRID_POINTS = 100
Z_95 = 1.959963984540054

TRACE_COLUMNS = ("rep", "eval_index", "excluded_flag", "cumulative_cost", "y", "z", "best_value",
                 "log_regret", "wallclock_seconds")
AGGREGATE_COLUMNS = ("budget", "mean_log_regret", "ci_low", "ci_high", "n_reps")


class ReplicationError(RuntimeError):
    pass


# --- configuration ----------------------------------------------------------------


@dataclass(frozen=True)
class AcqChoice:
    """Parsed acquisition name: ``ei``, ``ei_puc``, ``ei_puc_cc``, ``sobol``,
    ``bmsei:N[:m1xm2...]`` or ``bmsei_path:N``."""

    kind: str
    layout: TreeLayout | None = None

    @classmethod
    def parse(cls, text: str) -> AcqChoice:
        parts = text.strip().split(":")
        name = parts[0]
        if name in ("ei", "ei_puc", "ei_puc_cc", "sobol") and len(parts) == 1:
            return cls(name)
        if name in ("bmsei", "bmsei_path") and len(parts) in (2, 3):
            try:
                n = int(parts[1])
                if name == "bmsei_path":
                    if len(parts) != 2:
                        raise ValueError
                    layout = TreeLayout.default(n, path=True)
                elif len(parts) == 3:
                    branching = tuple(int(m) for m in parts[2].split("x")) if parts[2] else ()
                    layout = TreeLayout(n, branching)
                else:
                    layout = TreeLayout.default(n)
            except ValueError:
                raise ValueError(f"bad acquisition spec {text!r}") from None
            return cls("bmsei", layout)
        raise ValueError(f"unknown acquisition {text!r}")

    def label(self) -> str:
        return self.layout.label() if self.layout is not None else self.kind


@dataclass(frozen=True)
class RunConfig:
    problem: str | ProblemSpec
    acquisition: str = "ei"
    budget: float = 30.0
    replications: int = 20
    seed: int = 0
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig.desk)
    out: Path | None = None
    timing: bool = False
    resample_cost: bool = True
    prior: PriorConfig | None = None
    workers: int = 1

    def __post_init__(self):
        if not (self.budget > 0 and math.isfinite(self.budget)):
            raise ValueError("budget must be positive and finite")
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        AcqChoice.parse(self.acquisition)
        resolve_problem(self.problem)
        if isinstance(self.optimizer, str):
            object.__setattr__(self, "optimizer", OptimizerConfig.preset(self.optimizer))
        if self.out is not None:
            object.__setattr__(self, "out", Path(self.out))


def resolve_problem(problem: str | ProblemSpec) -> ProblemSpec:
    if isinstance(problem, ProblemSpec):
        return problem
    if problem in SYNTHETIC_NAMES:
        return make_synthetic(problem)
    path = Path(problem)
    if path.is_file():
        return load_tabular(path)
    raise ValueError(f"unknown problem {problem!r}: not a synthetic name or a table file")


def replication_streams(seed: int, rep: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed, spawn_key=(rep,)).spawn(5)
    names = ("design", "cost", "sheet", "scheduler", "optimizer")
    return {n: np.random.default_rng(c) for n, c in zip(names, children)}


# --- traces -------------------------------------------------------------------------


@dataclass
class RegretTrace:
    rep: int
    known_max: float | None
    x: list[np.ndarray] = field(default_factory=list)
    y: list[float] = field(default_factory=list)
    z: list[float] = field(default_factory=list)
    cumulative_cost: list[float] = field(default_factory=list)
    best_value: list[float] = field(default_factory=list)
    log_regret: list[float] = field(default_factory=list)
    excluded: list[bool] = field(default_factory=list)
    wallclock: list[float] = field(default_factory=list)
    decision_train_sizes: list[int] = field(default_factory=list)  # training points behind each decision
    n_initial: int = 0

    def __len__(self) -> int:
        return len(self.y)

    def record(self, x, y: float, z: float, budget: float, elapsed: float) -> bool:
        """Append an evaluation; returns False once the budget is overrun."""
        total = math.fsum(self.z) + z
        over = total > budget
        prev = self.best_value[-1] if self.best_value else -math.inf
        best = prev if over else max(prev, y)
        self.x.append(np.asarray(x, dtype=float))
        self.y.append(float(y))
        self.z.append(float(z))
        self.cumulative_cost.append(total)
        self.best_value.append(best if math.isfinite(best) else math.nan)
        self.log_regret.append(log_regret(self.known_max, self.best_value[-1]))
        self.excluded.append(over)
        self.wallclock.append(elapsed)
        return not over

    def performance(self) -> float:
        """Best objective value among evaluations that fit in the budget."""
        vals = [y for y, e in zip(self.y, self.excluded) if not e]
        return max(vals) if vals else math.nan

    def final_log_regret(self) -> float:
        return log_regret(self.known_max, self.performance())

    def included_cost(self) -> float:
        costs = [c for c, e in zip(self.cumulative_cost, self.excluded) if not e]
        return costs[-1] if costs else 0.0


def log_regret(known_max: float | None, best: float) -> float:
    if known_max is None or not math.isfinite(best):
        return math.nan
    return math.log10(max(known_max - best, REGRET_FLOOR))


# --- the loop -----------------------------------------------------------------------


def _observe(problem: ProblemSpec, u: np.ndarray, rng: np.random.Generator) -> tuple[float, float]:
    x = problem.from_unit(u)
    y = float(problem.objective(x))
    if problem.noise_std > 0:
        y += problem.noise_std * float(rng.standard_normal())
    z = float(problem.cost(x))
    if not (z > 0 and math.isfinite(z)):
        raise ReplicationError(f"cost oracle returned {z!r}")
    return y, z


def replication_problem(config: RunConfig, rep: int, streams=None) -> ProblemSpec:
    problem = resolve_problem(config.problem)
    streams = streams or replication_streams(config.seed, rep)
    if config.resample_cost and problem.cost_ranges is not None:
        problem = problem.with_cost_params(sample_cost_params(problem.name, streams["cost"]))
    return problem


class _TreePolicy:
    """B-MS-EI decisions with fantasy-budget scheduling and warm starts."""

    def __init__(self, layout: TreeLayout, config: RunConfig, streams):
        self.layout = layout
        self.config = config
        self.streams = streams
        self.fb: FantasyBudget | None = None
        self.fb_spent_at = 0.0
        self.warm: WarmStartCache | None = None

    def budget_for(self, pair, budget: BudgetState) -> BudgetState:
        if self.layout.lookahead_steps == 1:
            return budget
        since = budget.spent - (self.fb_spent_at if self.fb else 0.0)
        if self.fb is None or since >= self.fb.amount:
            self.fb = fantasy_budget(pair, budget, self.layout.lookahead_steps, self.streams["scheduler"])
            self.fb_spent_at = budget.spent
            since = 0.0
        return BudgetState(self.fb.amount, since)

    def decide(self, pair, budget: BudgetState, last_y: float | None) -> np.ndarray:
        tree_budget = self.budget_for(pair, budget)
        sheet = BaseSampleSheet.draw(self.layout, self.streams["sheet"])
        vars_, _ = maximize_tree(self.layout, pair, sheet, tree_budget, self.config.optimizer,
                                 self.streams["optimizer"], warm=self.warm, observed_y=last_y)
        if self.layout.lookahead_steps > 1:
            self.warm = tree_warm_cache(vars_, pair, sheet, tree_budget)
        return np.array(vars_.root)


def run_replication(config: RunConfig, replication_index: int) -> RegretTrace:
    streams = replication_streams(config.seed, replication_index)
    problem = replication_problem(config, replication_index, streams)
    choice = AcqChoice.parse(config.acquisition)
    d = problem.dim
    B = float(config.budget)
    trace = RegretTrace(replication_index, problem.known_max)
    noise_rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(replication_index, 1)))
    clock = time.perf_counter if config.timing else (lambda: 0.0)
    t0 = clock()

    n_init = 2 * (d + 1)
    design = sobol_points(n_init if choice.kind != "sobol" else max(n_init, 4096), d, streams["design"])
    trace.n_initial = n_init
    ds = Dataset()
    for u in design[:n_init]:
        y, z = _observe(problem, u, noise_rng)
        ds = ds.append(Observation(u, y, z))
        if not trace.record(u, y, z, B, clock() - t0):
            return trace

    tree = _TreePolicy(choice.layout, config, streams) if choice.kind == "bmsei" else None
    k = n_init
    while True:
        spent = ds.total_cost()
        state = BudgetState(B, spent)
        if choice.kind == "sobol":
            if k >= len(design):
                design = np.vstack([design, sobol_points(len(design), d, streams["design"])])
            u = design[k]
        else:
            try:
                pair = refit(ds, config.prior)
            except GpFitError as exc:
                raise ReplicationError(f"replication {replication_index}: surrogate fit failed after "
                                       f"{len(ds)} evaluations ({exc})") from exc
            trace.decision_train_sizes.append(pair.objective_model.n_train)
            if tree is not None:
                u = tree.decide(pair, state, ds.observations[-1].y)
            else:
                acq = ClosedFormAcquisition(choice.kind, pair, budget=state)
                u, _ = maximize_scalar_acq(acq, d, config.optimizer, streams["optimizer"])
        u = np.clip(np.asarray(u, dtype=float), 0.0, 1.0)
        y, z = _observe(problem, u, noise_rng)
        ds = ds.append(Observation(u, y, z))
        k += 1
        if not trace.record(u, y, z, B, clock() - t0):
            return trace


def design_only_trace(config: RunConfig, replication_index: int) -> RegretTrace:
    """The initial Sobol design of a replication, evaluated with nothing after it."""
    streams = replication_streams(config.seed, replication_index)
    problem = replication_problem(config, replication_index, streams)
    n_init = 2 * (problem.dim + 1)
    trace = RegretTrace(replication_index, problem.known_max, n_initial=n_init)
    noise_rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(replication_index, 1)))
    for u in sobol_points(n_init, problem.dim, streams["design"]):
        y, z = _observe(problem, u, noise_rng)
        if not trace.record(u, y, z, config.budget, 0.0):
            break
    return trace


# --- aggregation ------------------------------------------------------------------


def budget_grid(budget: float, n: int = GRID_POINTS) -> np.ndarray:
    return np.linspace(0.2 * budget, budget, n)


def step_values(trace: RegretTrace, grid, field_name: str = "log_regret") -> np.ndarray:
    """Value of ``field_name`` after the last included evaluation with cost <= b, per grid point."""
    costs = np.array([c for c, e in zip(trace.cumulative_cost, trace.excluded) if not e])
    vals = np.array([v for v, e in zip(getattr(trace, field_name), trace.excluded) if not e])
    idx = np.searchsorted(costs, np.asarray(grid, dtype=float), side="right") - 1
    out = np.full(len(idx), np.nan)
    ok = idx >= 0
    out[ok] = vals[idx[ok]]
    return out


def mean_ci(values) -> tuple[float, float, int]:
    """Mean and 95% normal-approximation half-width over the finite entries."""
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    n = len(v)
    if n == 0:
        return math.nan, math.nan, 0
    if n == 1:
        return float(v[0]), 0.0, 1
    return float(np.mean(v)), float(Z_95 * np.std(v, ddof=1) / math.sqrt(n)), n


def aggregate(traces: list[RegretTrace], budget: float, field_name: str = "log_regret",
              grid=None) -> list[tuple[float, float, float, float, int]]:
    grid = budget_grid(budget) if grid is None else np.asarray(grid, dtype=float)
    table = np.array([step_values(t, grid, field_name) for t in traces]).reshape(len(traces), len(grid))
    rows = []
    for j, b in enumerate(grid):
        m, hw, n = mean_ci(table[:, j])
        rows.append((float(b), m, m - hw, m + hw, n))
    return rows


# --- CSV ----------------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def write_traces(path, traces: list[RegretTrace], timing: bool = False) -> None:
    with open(path, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for t in traces:
            for i in range(len(t)):
                w.writerow([_fmt(t.rep), _fmt(i), _fmt(t.excluded[i]), _fmt(t.cumulative_cost[i]),
                            _fmt(t.y[i]), _fmt(t.z[i]), _fmt(t.best_value[i]), _fmt(t.log_regret[i]),
                            _fmt(t.wallclock[i]) if timing else ""])


def write_aggregate(path, rows) -> None:
    with open(path, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AGGREGATE_COLUMNS)
        for b, m, lo, hi, n in rows:
            w.writerow([_fmt(b), _fmt(m), _fmt(lo), _fmt(hi), _fmt(n)])


@dataclass
class ExperimentResult:
    config: RunConfig
    traces: list[RegretTrace]
    failures: dict[int, str]
    aggregate: list[tuple[float, float, float, float, int]]


def _safe_replication(args) -> tuple[int, RegretTrace | None, str | None]:
    config, rep = args
    try:
        return rep, run_replication(config, rep), None
    except (ReplicationError, np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
        log.error("replication %d failed: %s", rep, exc)
        return rep, None, str(exc)


def run_experiment(config: RunConfig) -> ExperimentResult:
    """Run every replication, then write ``traces.csv`` and ``aggregate.csv`` under ``config.out``."""
    jobs = [(config, r) for r in range(config.replications)]
    if config.workers > 1:
        with ProcessPoolExecutor(config.workers) as pool:
            results = list(pool.map(_safe_replication, jobs))
    else:
        results = [_safe_replication(j) for j in jobs]
    results.sort(key=lambda r: r[0])
    traces = [t for _, t, _ in results if t is not None]
    failures = {r: msg for r, _, msg in results if msg is not None}
    rows = aggregate(traces, config.budget) if traces else []
    if config.out is not None:
        config.out.mkdir(parents=True, exist_ok=True)
        write_traces(config.out / "traces.csv", traces, config.timing)
        write_aggregate(config.out / "aggregate.csv", rows)
        if failures:
            (config.out / "failures.txt").write_text(
                "".join(f"{r}\t{m}\n" for r, m in sorted(failures.items())), encoding="utf-8")
    return ExperimentResult(config, traces, failures, rows)
