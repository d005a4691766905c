"""Closed-form one-step acquisitions: EI, EI-PUC, EI-PUC-CC and budgeted Q1.

The formulas are written once against torch tensors so the same code backs
scalar evaluation, batched evaluation and gradients with respect to x.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from ._torch_gp import DTYPE, TorchGp
from .gp_core import PosteriorSummary

DEGENERATE_STD = 1e-12
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class BudgetState:
    initial_budget: float
    spent: float = 0.0

    def __post_init__(self):
        if not self.initial_budget > 0:
            raise ValueError("initial_budget must be positive")

    def remaining(self) -> float:
        return self.initial_budget - self.spent


@dataclass(frozen=True)
class AcqEval:
    value: float
    gradient: np.ndarray | None = None


# --- tensor formulas ---------------------------------------------------------


def ei_tensor(mean, std, incumbent):
    """Expected improvement of a normal(mean, std) over ``incumbent``."""
    delta = mean - incumbent
    ok = std > DEGENERATE_STD
    s = torch.where(ok, std, torch.ones_like(std))
    z = delta / s
    # ndtr is erfc-based, so the lower tail stays accurate beyond |z| > 6
    val = delta * torch.special.ndtr(z) + s * _INV_SQRT_2PI * torch.exp(-0.5 * z * z)
    val = torch.clamp_min(val, 0.0)
    return torch.where(ok, val, torch.clamp_min(delta, 0.0))


def budget_prob_tensor(mean_lnc, std_lnc, remaining):
    """P(cost <= remaining) for lognormal cost; 0 when nothing remains."""
    pos = remaining > 0
    log_rem = torch.log(torch.where(pos, remaining, torch.ones_like(remaining)))
    ok = std_lnc > DEGENERATE_STD
    s = torch.where(ok, std_lnc, torch.ones_like(std_lnc))
    soft = torch.special.ndtr((log_rem - mean_lnc) / s)
    hard = (mean_lnc <= log_rem).to(soft.dtype)
    prob = torch.where(ok, soft, hard)
    return torch.where(pos, prob, torch.zeros_like(prob))


def cost_cooling_tensor(mean_lnc, std_lnc, nu: float):
    """E[c^-nu] for ln c ~ normal(mean_lnc, std_lnc)."""
    return torch.exp(-nu * mean_lnc + 0.5 * nu**2 * std_lnc**2)


# --- scalar API ----------------------------------------------------------------


def _t(v) -> torch.Tensor:
    return torch.as_tensor(float(v), dtype=DTYPE)


def ei(obj_posterior: PosteriorSummary, incumbent: float) -> AcqEval:
    v = ei_tensor(_t(obj_posterior.mean), _t(obj_posterior.stddev), _t(incumbent))
    return AcqEval(float(v))


def q1(
    obj_posterior: PosteriorSummary,
    logcost_posterior: PosteriorSummary,
    incumbent: float,
    budget: BudgetState,
) -> AcqEval:
    if budget.spent >= budget.initial_budget:
        return AcqEval(0.0)
    e = ei_tensor(_t(obj_posterior.mean), _t(obj_posterior.stddev), _t(incumbent))
    p = budget_prob_tensor(_t(logcost_posterior.mean), _t(logcost_posterior.stddev), _t(budget.remaining()))
    return AcqEval(float(e * p))


def ei_puc_cc(
    obj_posterior: PosteriorSummary,
    logcost_posterior: PosteriorSummary,
    incumbent: float,
    nu: float,
) -> AcqEval:
    if nu < 0:
        raise ValueError("nu must be nonnegative")
    e = ei_tensor(_t(obj_posterior.mean), _t(obj_posterior.stddev), _t(incumbent))
    if nu == 0:
        return AcqEval(float(e))
    f = cost_cooling_tensor(_t(logcost_posterior.mean), _t(logcost_posterior.stddev), nu)
    return AcqEval(float(e * f))


def ei_puc(obj_posterior: PosteriorSummary, logcost_posterior: PosteriorSummary, incumbent: float) -> AcqEval:
    return ei_puc_cc(obj_posterior, logcost_posterior, incumbent, 1.0)


def nu_schedule(budget: BudgetState) -> float:
    return float(min(max(budget.remaining(), 0.0) / budget.initial_budget, 1.0))


# --- batched acquisition over a surrogate pair -----------------------------------

KINDS = ("ei", "ei_puc", "ei_puc_cc", "q1")


class ClosedFormAcquisition:
    """Batched closed-form acquisition on the unit box.

    Call with an (n, d) array to get values; ``value_and_grad`` also returns
    the gradient with respect to every row.
    """

    def __init__(self, kind: str, pair, budget: BudgetState | None = None, nu: float | None = None,
                 incumbent: float | None = None):
        if kind not in KINDS:
            raise ValueError(f"unknown acquisition {kind!r}")
        if kind in ("q1", "ei_puc_cc") and budget is None and nu is None:
            raise ValueError(f"{kind} needs a budget state")
        self.kind = kind
        self.obj = TorchGp.from_model(pair.objective_model)
        self.cost = TorchGp.from_model(pair.logcost_model)
        inc = pair.dataset.utility() if incumbent is None else incumbent
        self.incumbent_std = (inc - self.obj.y_offset) / self.obj.y_scale
        self.budget = budget
        if kind == "ei_puc":
            nu = 1.0
        elif kind == "ei_puc_cc" and nu is None:
            nu = nu_schedule(budget)
        self.nu = nu
        self.dim = pair.objective_model.dim

    def _forward(self, x: torch.Tensor) -> torch.Tensor:
        m, s = self.obj.posterior(x)
        val = self.obj.y_scale * ei_tensor(m, s, torch.as_tensor(self.incumbent_std, dtype=DTYPE))
        if self.kind == "ei" or (self.kind == "ei_puc_cc" and self.nu == 0):
            return val
        mc, sc = self.cost.posterior(x)
        mc = self.cost.y_offset + self.cost.y_scale * mc
        sc = self.cost.y_scale * sc
        if self.kind == "q1":
            if self.budget.spent >= self.budget.initial_budget:
                return torch.zeros_like(val)
            rem = torch.full_like(val, self.budget.remaining())
            return val * budget_prob_tensor(mc, sc, rem)
        return val * cost_cooling_tensor(mc, sc, self.nu)

    def __call__(self, x) -> np.ndarray:
        with torch.no_grad():
            return self._forward(torch.as_tensor(np.array(np.atleast_2d(x), dtype=float))).numpy()

    def value_and_grad(self, x) -> tuple[np.ndarray, np.ndarray]:
        xt = torch.as_tensor(np.array(np.atleast_2d(x), dtype=float)).clone().requires_grad_(True)
        val = self._forward(xt)
        (g,) = torch.autograd.grad(val.sum(), xt)
        return val.detach().numpy(), g.numpy()

    def evaluate(self, x) -> AcqEval:
        v, g = self.value_and_grad(np.asarray(x, dtype=float).reshape(1, -1))
        return AcqEval(float(v[0]), g[0])
