"""Benchmark problems: synthetic objectives, the cosine cost family,
the discrete counterexample instances and a tabular-grid loader.

Everything is exposed in the maximization convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.interpolate import RegularGridInterpolator


@dataclass(frozen=True)
class CostFamilyParams:
    alpha: float
    beta: float
    gamma: float
    anchor: np.ndarray

    def __post_init__(self):
        a = np.array(self.anchor, dtype=float).reshape(-1)
        a.flags.writeable = False
        object.__setattr__(self, "anchor", a)


def eval_cost(params: CostFamilyParams, x) -> float:
    """exp[(alpha/d) * sum_i cos(beta * (x_i - anchor_i + gamma))]."""
    x = np.asarray(x, dtype=float).reshape(-1)
    d = x.shape[0]
    return float(np.exp(params.alpha / d * np.sum(np.cos(params.beta * (x - params.anchor + params.gamma)))))


def _unit_cost(x) -> float:
    return 1.0


@dataclass(frozen=True)
class ProblemSpec:
    name: str
    dim: int
    lower: np.ndarray
    upper: np.ndarray
    objective: Callable[[np.ndarray], float]
    cost: Callable[[np.ndarray], float] = _unit_cost
    known_max: float | None = None
    known_argmax: np.ndarray | None = None
    noise_std: float = 0.0
    cost_ranges: dict | None = field(default=None, repr=False)

    def __post_init__(self):
        lo = np.array(self.lower, dtype=float).reshape(-1)
        hi = np.array(self.upper, dtype=float).reshape(-1)
        if lo.shape != (self.dim,) or hi.shape != (self.dim,):
            raise ValueError("bounds must have one entry per dimension")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi)) and np.all(lo < hi)):
            raise ValueError("bounds must be finite with lower < upper")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    def to_unit(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.lower) / (self.upper - self.lower)

    def from_unit(self, u) -> np.ndarray:
        return self.lower + np.asarray(u, dtype=float) * (self.upper - self.lower)

    def with_cost_params(self, params: CostFamilyParams) -> ProblemSpec:
        return replace(self, cost=lambda x, _p=params: eval_cost(_p, x))


# --- synthetic objectives -------------------------------------------------------


def dropwave(x) -> float:
    r2 = float(np.sum(np.square(x)))
    return (1.0 + math.cos(12.0 * math.sqrt(r2))) / (0.5 * r2 + 2.0)


def alpine1(x) -> float:
    x = np.asarray(x, dtype=float)
    return -float(np.sum(np.abs(x * np.sin(x) + 0.1 * x)))


def ackley(x) -> float:
    x = np.asarray(x, dtype=float)
    d = x.shape[0]
    return float(20.0 * np.exp(-0.2 * np.sqrt(np.sum(x**2) / d)) + np.exp(np.sum(np.cos(2 * np.pi * x)) / d)
                 - 20.0 - np.e)


SHEKEL_C = np.array([[4, 1, 8, 6, 3], [4, 1, 8, 6, 7], [4, 1, 8, 6, 3], [4, 1, 8, 6, 7]], dtype=float)
SHEKEL_B = np.array([1, 2, 2, 4, 4], dtype=float) / 10.0
# maximizer found by gradient search started at (4, 4, 4, 4)
SHEKEL5_ARGMAX = np.array([4.000037152819676, 4.00013327659156, 4.000037152819677, 4.00013327659156])


def shekel5(x) -> float:
    x = np.asarray(x, dtype=float)
    return float(np.sum(1.0 / (np.sum((x[:, None] - SHEKEL_C) ** 2, axis=0) + SHEKEL_B)))


_TWO_PI = 2.0 * math.pi
_SYNTHETIC = {
    "dropwave": dict(dim=2, lo=-5.12, hi=5.12, f=dropwave, argmax=np.zeros(2),
                     ranges=dict(alpha=(0.75, 1.5), beta=(_TWO_PI / 5.12, 3 * _TWO_PI / 5.12), gamma=(0.0, _TWO_PI))),
    "alpine1": dict(dim=3, lo=-10.0, hi=10.0, f=alpine1, argmax=np.zeros(3),
                    ranges=dict(alpha=(0.75, 1.5), beta=(_TWO_PI, 6 * math.pi), gamma=(0.0, _TWO_PI))),
    "ackley": dict(dim=3, lo=-1.0, hi=1.0, f=ackley, argmax=np.zeros(3),
                   ranges=dict(alpha=(0.75, 1.5), beta=(_TWO_PI, 6 * math.pi), gamma=(0.0, _TWO_PI))),
    "shekel5": dict(dim=4, lo=0.0, hi=10.0, f=shekel5, argmax=SHEKEL5_ARGMAX,
                    ranges=dict(alpha=(0.75, 1.5), beta=(_TWO_PI / 4, 3 * math.pi / 4), gamma=(0.0, _TWO_PI))),
}
SYNTHETIC_NAMES = tuple(_SYNTHETIC)


def make_synthetic(name: str) -> ProblemSpec:
    try:
        cfg = _SYNTHETIC[name]
    except KeyError:
        raise ValueError(f"unknown synthetic problem {name!r}; choose from {SYNTHETIC_NAMES}") from None
    d = cfg["dim"]
    argmax = cfg["argmax"].copy()
    return ProblemSpec(
        name=name, dim=d, lower=np.full(d, cfg["lo"]), upper=np.full(d, cfg["hi"]),
        objective=cfg["f"], known_max=cfg["f"](argmax), known_argmax=argmax,
        cost_ranges=cfg["ranges"],
    )


def sample_cost_params(name: str, rng: np.random.Generator) -> CostFamilyParams:
    spec = make_synthetic(name)
    r = spec.cost_ranges
    alpha = rng.uniform(*r["alpha"])
    beta = rng.uniform(*r["beta"])
    gamma = rng.uniform(*r["gamma"])
    return CostFamilyParams(alpha, beta, gamma, spec.known_argmax)


# --- discrete counterexample instances ----------------------------------------------


@dataclass(frozen=True)
class DiscreteInstance:
    """Independent normal priors over points 0..K+1 with known costs.

    Point 0 is already measured with value 0; points 1..K are the low-cost
    points and K+1 the single high-cost point.
    """

    K: int
    epsilon: float
    delta: float
    variant: str
    prior_mean: np.ndarray
    prior_var: np.ndarray
    cost: np.ndarray
    budget: float
    initial_value: float = 0.0

    @property
    def n_points(self) -> int:
        return self.K + 2

    @property
    def high_index(self) -> int:
        return self.K + 1


def make_theorem1_instance(epsilon: float, delta: float, variant: str) -> DiscreteInstance:
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must lie in (0, 1)")
    if not delta > 0:
        raise ValueError("delta must be positive")
    if variant not in ("for_eipuc", "for_ei"):
        raise ValueError("variant must be 'for_eipuc' or 'for_ei'")
    K = math.ceil((1.0 + delta) / epsilon - 1e-9)
    low_var = epsilon**2 if variant == "for_eipuc" else (1.0 - epsilon) ** 2
    var = np.concatenate([[0.0], np.full(K, low_var), [1.0]])
    cost = np.concatenate([[0.0], np.full(K, epsilon), [1.0 + delta]])
    for a in (var, cost):
        a.flags.writeable = False
    mean = np.zeros(K + 2)
    mean.flags.writeable = False
    return DiscreteInstance(K, epsilon, delta, variant, mean, var, cost, 1.0 + delta)


# --- tabular problems ------------------------------------------------------------


class TabularFormatError(ValueError):
    pass


def load_tabular(path) -> ProblemSpec:
    """Read a gridded objective/cost table; queries interpolate multilinearly.

    Format: header ``dims k sizes n_1 .. n_k bounds l_1 u_1 .. l_k u_k`` then one
    ``y z`` line per grid vertex, row-major (last dimension varies fastest).
    """
    path = Path(path)
    lines = [ln.strip() for ln in path.read_text(encoding="ascii").splitlines()]
    lines = [ln for ln in lines if ln]
    if not lines:
        raise TabularFormatError("empty table")
    head = lines[0].split()
    try:
        if head[0] != "dims":
            raise TabularFormatError("header must start with 'dims'")
        k = int(head[1])
        if k < 1 or head[2] != "sizes":
            raise TabularFormatError("malformed header")
        sizes = [int(v) for v in head[3 : 3 + k]]
        if head[3 + k] != "bounds":
            raise TabularFormatError("malformed header")
        bvals = [float(v) for v in head[4 + k : 4 + 3 * k]]
        if len(head) != 4 + 3 * k or len(bvals) != 2 * k or len(sizes) != k:
            raise TabularFormatError("malformed header")
    except (IndexError, ValueError) as exc:
        if isinstance(exc, TabularFormatError):
            raise
        raise TabularFormatError(f"malformed header: {lines[0]!r}") from exc
    if any(s < 2 for s in sizes):
        raise TabularFormatError("every grid axis needs at least 2 vertices")
    lo = np.array(bvals[0::2])
    hi = np.array(bvals[1::2])
    rows = lines[1:]
    if len(rows) != int(np.prod(sizes)):
        raise TabularFormatError(f"expected {int(np.prod(sizes))} vertex rows, found {len(rows)}")
    try:
        data = np.array([[float(t) for t in r.split()] for r in rows])
    except ValueError as exc:
        raise TabularFormatError("non-numeric vertex row") from exc
    if data.ndim != 2 or data.shape[1] != 2:
        raise TabularFormatError("each vertex row must hold exactly 'y z'")
    if np.any(data[:, 1] <= 0):
        raise TabularFormatError("costs must be positive")
    axes = tuple(np.linspace(l, h, n) for l, h, n in zip(lo, hi, sizes))
    y_grid = data[:, 0].reshape(sizes)
    z_grid = data[:, 1].reshape(sizes)
    fy = RegularGridInterpolator(axes, y_grid, method="linear")
    fz = RegularGridInterpolator(axes, z_grid, method="linear")
    # multilinear interpolants peak at a grid vertex
    best = int(np.argmax(data[:, 0]))
    argmax = np.array([ax[i] for ax, i in zip(axes, np.unravel_index(best, sizes))])
    return ProblemSpec(
        name=path.stem, dim=k, lower=lo, upper=hi,
        objective=lambda x: float(fy(np.clip(np.asarray(x, float), lo, hi)[None])[0]),
        cost=lambda x: float(fz(np.clip(np.asarray(x, float), lo, hi)[None])[0]),
        known_max=float(data[best, 0]), known_argmax=argmax,
    )


def write_tabular(path, lower, upper, y_grid, z_grid) -> None:
    """Inverse of :func:`load_tabular`, with 17 significant digits."""
    y_grid = np.asarray(y_grid, dtype=float)
    z_grid = np.asarray(z_grid, dtype=float)
    sizes = y_grid.shape
    head = ["dims", str(len(sizes)), "sizes", *map(str, sizes), "bounds"]
    for l, h in zip(lower, upper):
        head += [f"{l:.17g}", f"{h:.17g}"]
    body = [f"{y:.17g} {z:.17g}" for y, z in zip(y_grid.reshape(-1), z_grid.reshape(-1))]
    Path(path).write_text("\n".join([" ".join(head), *body]) + "\n", encoding="ascii")
