"""Seeded multi-start box-constrained maximization of acquisition functions.

All local searches of one call run as a single L-BFGS-B problem over the
stacked start points; the summed objective separates across starts, so each
start still follows its own ascent direction.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.stats import qmc

from .multistep_tree import BaseSampleSheet, TreeLayout, TreeObjective, TreeVariables

log = logging.getLogger(__name__)

_FD_STEP = 1e-6


@dataclass(frozen=True)
class OptimizerConfig:
    raw_candidates_per_dim: int = 64
    starts_per_dim: int = 4
    max_local_iters: int = 100
    convergence_tol: float = 1e-10
    min_start_distance: float = 0.01
    max_starts: int | None = None

    def __post_init__(self):
        if min(self.raw_candidates_per_dim, self.starts_per_dim, self.max_local_iters) < 1:
            raise ValueError("optimizer counts must be positive")
        if self.starts_per_dim > self.raw_candidates_per_dim:
            raise ValueError("cannot select more starts than raw candidates")
        if not self.convergence_tol > 0:
            raise ValueError("convergence_tol must be positive")

    @classmethod
    def desk(cls) -> OptimizerConfig:
        return cls(max_starts=16)

    @classmethod
    def paper(cls) -> OptimizerConfig:
        return cls(raw_candidates_per_dim=200, starts_per_dim=10, max_local_iters=200)

    @classmethod
    def rollout(cls) -> OptimizerConfig:
        """Cheap setting for the base-policy rollout: 4 starts in total."""
        return cls(raw_candidates_per_dim=32, starts_per_dim=4, max_local_iters=50, max_starts=4)

    @classmethod
    def preset(cls, name: str) -> OptimizerConfig:
        try:
            return {"desk": cls.desk, "paper": cls.paper}[name]()
        except KeyError:
            raise ValueError(f"unknown optimizer preset {name!r}") from None

    def n_raw(self, dim: int) -> int:
        return self.raw_candidates_per_dim * dim

    def n_starts(self, dim: int) -> int:
        n = self.starts_per_dim * dim
        return n if self.max_starts is None else min(n, self.max_starts)


@dataclass(frozen=True)
class WarmStartCache:
    vars: TreeVariables
    root_fantasy_y: np.ndarray  # fantasy objective values on the root's branches


def sobol_points(n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    seed = int(rng.integers(2**63 - 1))
    m = max(int(np.ceil(np.log2(max(n, 1)))), 0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return qmc.Sobol(dim, scramble=True, seed=seed).random_base2(m)[:n]


def _fd_value_and_grad(fn, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Central differences (one-sided at the box faces), all perturbations in one batch."""
    b, dim = x.shape
    eye = np.eye(dim) * _FD_STEP
    up = np.clip(x[:, None, :] + eye, 0.0, 1.0)
    dn = np.clip(x[:, None, :] - eye, 0.0, 1.0)
    vals = fn(np.concatenate([x, up.reshape(-1, dim), dn.reshape(-1, dim)]))
    v = vals[:b]
    fu = vals[b : b + b * dim].reshape(b, dim)
    fd = vals[b + b * dim :].reshape(b, dim)
    width = np.diagonal(up, axis1=1, axis2=2) - np.diagonal(dn, axis1=1, axis2=2)
    return v, (fu - fd) / np.where(width > 0, width, 1.0)


def _select_starts(cands: np.ndarray, values: np.ndarray, k: int, min_dist: float) -> np.ndarray:
    order = np.argsort(-values, kind="stable")
    chosen: list[int] = []
    for i in order:
        if len(chosen) == k:
            break
        if all(np.linalg.norm(cands[i] - cands[j]) >= min_dist for j in chosen):
            chosen.append(int(i))
    for i in order:
        if len(chosen) == k:
            break
        if int(i) not in chosen:
            chosen.append(int(i))
    return cands[chosen]


def _multistart(acq, n_vars: int, raw: np.ndarray, n_starts: int, config: OptimizerConfig,
                forced: np.ndarray | None = None) -> tuple[np.ndarray, float]:
    grad_fn = getattr(acq, "value_and_grad", None)
    if grad_fn is None:
        grad_fn = lambda z: _fd_value_and_grad(acq, z)  # noqa: E731

    raw_vals = np.asarray(acq(raw), dtype=float)
    pool, pool_vals = raw, raw_vals
    starts = _select_starts(raw, raw_vals, n_starts, config.min_start_distance)
    if forced is not None and len(forced):
        forced = np.clip(np.atleast_2d(forced), 0.0, 1.0)
        forced_vals = np.asarray(acq(forced), dtype=float)
        pool = np.vstack([forced, raw])
        pool_vals = np.concatenate([forced_vals, raw_vals])
        starts = np.vstack([forced, starts])[: max(n_starts, len(forced))]

    b = starts.shape[0]

    def objective(z):
        v, g = grad_fn(z.reshape(b, n_vars))
        if not (np.all(np.isfinite(v)) and np.all(np.isfinite(g))):
            return np.inf, np.zeros_like(z)
        return -float(np.sum(v)), -np.asarray(g, dtype=float).reshape(-1)

    finals = starts
    try:
        res = minimize(
            objective, starts.reshape(-1), jac=True, method="L-BFGS-B",
            bounds=[(0.0, 1.0)] * (b * n_vars),
            options={"maxiter": config.max_local_iters, "ftol": config.convergence_tol,
                     "gtol": config.convergence_tol},
        )
        if np.all(np.isfinite(res.x)):
            finals = np.clip(res.x.reshape(b, n_vars), 0.0, 1.0)
    except (ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
        log.warning("local search failed (%s); keeping best raw candidate", exc)

    final_vals = np.asarray(acq(finals), dtype=float)
    all_x = np.vstack([finals, pool])
    all_v = np.concatenate([final_vals, pool_vals])
    all_v = np.where(np.isfinite(all_v), all_v, -np.inf)
    best = int(np.argmax(all_v))
    return all_x[best].copy(), float(all_v[best])


def maximize_scalar_acq(acq, dim: int, config: OptimizerConfig, rng: np.random.Generator,
                        extra_starts: np.ndarray | None = None) -> tuple[np.ndarray, float]:
    """Maximize a batched acquisition ``acq((n, dim)) -> (n,)`` over the unit box."""
    raw = sobol_points(config.n_raw(dim), dim, rng)
    return _multistart(acq, dim, raw, config.n_starts(dim), config, extra_starts)


def warm_start_assignment(cache: WarmStartCache, observed_y: float, layout: TreeLayout,
                          rng: np.random.Generator) -> np.ndarray:
    """Seed a new tree from the previous solution's branch closest to what was observed.

    The subtree below the chosen root branch is mapped level by level onto the
    new tree (tiled when the new level is wider); levels the old subtree does
    not reach are filled with Sobol points.
    """
    old = cache.vars
    old_layout = old.layout
    d = old.points.shape[1]
    out = np.empty((layout.n_nodes, d))
    if len(cache.root_fantasy_y) == 0:
        out[:] = sobol_points(layout.n_nodes, d, rng)
        out[0] = old.root
        return out
    j = int(np.argmin(np.abs(np.asarray(cache.root_fantasy_y) - observed_y)))
    fill = sobol_points(layout.n_nodes, d, rng)
    for level in range(layout.lookahead_steps):
        sl = layout.level_slice(level)
        old_level = level + 1
        if old_level >= old_layout.lookahead_steps:
            out[sl] = fill[sl]
            continue
        per = old_layout.level_sizes[old_level] // old_layout.level_sizes[1]
        sub = old.level(old_level)[j * per : (j + 1) * per]
        idx = np.arange(layout.level_sizes[level]) % len(sub)
        out[sl] = sub[idx]
    return out


def maximize_tree(layout: TreeLayout, pair, sheet: BaseSampleSheet, budget, config: OptimizerConfig,
                  rng: np.random.Generator, warm: WarmStartCache | None = None, observed_y: float | None = None,
                  initial_vars: list[TreeVariables] | None = None) -> tuple[TreeVariables, float]:
    """Jointly optimize every node point of the one-shot tree.

    Candidate and start counts scale with the number of tree variables, the
    dimension of the space actually searched.
    """
    objective = TreeObjective(layout, pair, sheet, budget)
    dim = objective.dim
    n_vars = objective.n_vars
    n_raw = config.n_raw(n_vars)
    forced = [v.flat() for v in (initial_vars or [])]
    raw = sobol_points(n_raw, n_vars, rng)
    if warm is not None and observed_y is not None and warm.vars.points.shape[1] == dim:
        w = warm_start_assignment(warm, observed_y, layout, rng).reshape(-1)
        forced.insert(0, w)
        n_pert = n_raw // 4
        noise = rng.normal(scale=0.05, size=(n_pert, n_vars))
        raw[:n_pert] = np.clip(w[None, :] + noise, 0.0, 1.0)
    x, value = _multistart(objective, n_vars, raw, config.n_starts(n_vars), config,
                           np.array(forced) if forced else None)
    return TreeVariables(layout, x.reshape(layout.n_nodes, dim)), value


def tree_warm_cache(vars: TreeVariables, pair, sheet: BaseSampleSheet, budget) -> WarmStartCache:
    det = TreeObjective(vars.layout, pair, sheet, budget).details(vars.flat()[None])
    return WarmStartCache(vars, det.root_fantasy_y[0])
