"""Observation bookkeeping and the objective / log-cost GP pair."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import gp_core
from .gp_core import GpModel, PriorConfig


@dataclass(frozen=True)
class Observation:
    x: tuple[float, ...]
    y: float
    z: float

    def __post_init__(self):
        object.__setattr__(self, "x", tuple(float(v) for v in np.ravel(self.x)))
        if not self.z > 0:
            raise ValueError("evaluation cost must be positive")


@dataclass(frozen=True)
class Dataset:
    """Ordered observations; inputs are stored in unit-box coordinates."""

    observations: tuple[Observation, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.observations)

    def append(self, obs: Observation) -> Dataset:
        return Dataset(self.observations + (obs,))

    @classmethod
    def from_arrays(cls, x, y, z) -> Dataset:
        return cls(tuple(Observation(xi, float(yi), float(zi)) for xi, yi, zi in zip(np.atleast_2d(x), y, z)))

    def utility(self) -> float:
        if not self.observations:
            raise ValueError("utility of an empty dataset is undefined")
        return max(o.y for o in self.observations)

    def total_cost(self) -> float:
        return math.fsum(o.z for o in self.observations)

    @property
    def inputs(self) -> np.ndarray:
        return np.array([o.x for o in self.observations], dtype=float)

    @property
    def objective_values(self) -> np.ndarray:
        return np.array([o.y for o in self.observations], dtype=float)

    @property
    def costs(self) -> np.ndarray:
        return np.array([o.z for o in self.observations], dtype=float)


@dataclass(frozen=True)
class SurrogatePair:
    objective_model: GpModel
    logcost_model: GpModel
    dataset: Dataset


def refit(dataset: Dataset, prior_config: PriorConfig | None = None) -> SurrogatePair:
    """MAP-fit independent GPs to the objective (standardized) and to ln(cost)."""
    if len(dataset) < 2:
        raise ValueError("refit needs at least 2 observations")
    x = dataset.inputs
    obj = gp_core.fit_map(x, dataset.objective_values, prior_config, standardize=True)
    cost = gp_core.fit_map(x, np.log(dataset.costs), prior_config, standardize=False)
    return SurrogatePair(obj, cost, dataset)


def fantasize(pair: SurrogatePair, x, eps_y: float, eps_lnz: float) -> tuple[SurrogatePair, float, float]:
    """Draw (y, z) at x by reparameterization and condition both models on it."""
    x = np.asarray(x, dtype=float).reshape(-1)
    y = gp_core.sample_reparam(gp_core.posterior(pair.objective_model, x), eps_y)
    lnz = gp_core.sample_reparam(gp_core.posterior(pair.logcost_model, x), eps_lnz)
    z = math.exp(lnz)
    new = SurrogatePair(
        gp_core.condition(pair.objective_model, x, y),
        gp_core.condition(pair.logcost_model, x, lnz),
        pair.dataset.append(Observation(x, y, z)),
    )
    return new, y, z
