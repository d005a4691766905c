"""Budgeted multi-step expected improvement on a one-shot scenario tree.

Nodes are stored level by level: level 0 holds the root, level i holds
``m_1 * ... * m_i`` nodes, and the children of node ``a`` at level i are
``a * m_{i+1} + j`` for ``j < m_{i+1}``. Every non-root node carries the pair of
standard-normal draws that produced the fantasy observation at its parent.

Each root-to-leaf path is processed as one small joint Gaussian problem:
the base posterior covariance over the path points is factored once, and the
rows of that factor give every node's fantasy-conditioned posterior at once.
Row ``k`` of the factor only depends on the first ``k + 1`` points, so nodes
shared by several leaves get identical values from each of them.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import torch

from ._torch_gp import DTYPE, TorchGp
from .acquisition import BudgetState, budget_prob_tensor, ei_tensor
from .surrogate import SurrogatePair

MAX_LOG_COST = 50.0


@dataclass(frozen=True)
class TreeLayout:
    lookahead_steps: int
    branching: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "branching", tuple(int(m) for m in self.branching))
        if self.lookahead_steps < 1:
            raise ValueError("lookahead_steps must be >= 1")
        if len(self.branching) != self.lookahead_steps - 1:
            raise ValueError("branching must have lookahead_steps - 1 entries")
        if any(m < 1 for m in self.branching):
            raise ValueError("branching factors must be positive")

    @classmethod
    def default(cls, n_steps: int, path: bool = False) -> TreeLayout:
        if path:
            return cls(n_steps, (1,) * (n_steps - 1))
        pattern = {1: (), 2: (4,), 3: (4, 2), 4: (4, 2, 1), 5: (4, 2, 2, 1)}
        if n_steps in pattern:
            return cls(n_steps, pattern[n_steps])
        return cls(n_steps, (4, 2) + (1,) * (n_steps - 3))

    @property
    def is_path(self) -> bool:
        return all(m == 1 for m in self.branching)

    @cached_property
    def level_sizes(self) -> tuple[int, ...]:
        sizes = [1]
        for m in self.branching:
            sizes.append(sizes[-1] * m)
        return tuple(sizes)

    @cached_property
    def level_offsets(self) -> tuple[int, ...]:
        return tuple(int(v) for v in np.concatenate([[0], np.cumsum(self.level_sizes)[:-1]]))

    @property
    def n_nodes(self) -> int:
        return sum(self.level_sizes)

    def level_slice(self, level: int) -> slice:
        start = self.level_offsets[level]
        return slice(start, start + self.level_sizes[level])

    @cached_property
    def _paths(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-leaf ancestor index at each level and the matching global node ids."""
        n_leaves = self.level_sizes[-1]
        leaf = np.arange(n_leaves)
        anc = np.stack([leaf // (n_leaves // s) for s in self.level_sizes], axis=1)
        ids = anc + np.array(self.level_offsets)[None, :]
        return anc, ids

    def label(self) -> str:
        n = self.lookahead_steps
        return f"{n}-B-MS-EI_p" if self.is_path and n > 1 else f"{n}-B-MS-EI"


@dataclass(frozen=True)
class TreeVariables:
    layout: TreeLayout
    points: np.ndarray  # (n_nodes, d), unit box

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[0] != self.layout.n_nodes:
            raise ValueError(f"expected {self.layout.n_nodes} node points, got shape {pts.shape}")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    @property
    def root(self) -> np.ndarray:
        return self.points[0]

    def level(self, i: int) -> np.ndarray:
        return self.points[self.layout.level_slice(i)]

    def flat(self) -> np.ndarray:
        return self.points.reshape(-1)


@dataclass(frozen=True)
class BaseSampleSheet:
    """Fixed (eps_y, eps_lnz) draws for every non-root node, level by level."""

    layout: TreeLayout
    eps: tuple[np.ndarray, ...]  # eps[i - 1] has shape (level_sizes[i], 2)

    @classmethod
    def draw(cls, layout: TreeLayout, rng: np.random.Generator) -> BaseSampleSheet:
        eps = tuple(rng.standard_normal((s, 2)) for s in layout.level_sizes[1:])
        return cls(layout, eps)

    @classmethod
    def constant(cls, layout: TreeLayout, eps_y: float = 0.0, eps_lnz: float = 0.0) -> BaseSampleSheet:
        return cls(layout, tuple(np.tile([eps_y, eps_lnz], (s, 1)).astype(float) for s in layout.level_sizes[1:]))

    def __post_init__(self):
        eps = tuple(np.array(e, dtype=float) for e in self.eps)
        for e, s in zip(eps, self.layout.level_sizes[1:]):
            if e.shape != (s, 2):
                raise ValueError("sheet does not match layout")
            e.flags.writeable = False
        if len(eps) != len(self.layout.level_sizes) - 1:
            raise ValueError("sheet does not match layout")
        object.__setattr__(self, "eps", eps)


class BudgetSource(enum.Enum):
    ROLLOUT_CAPPED = "rollout_capped"
    TRUE_REMAINING = "true_remaining"


@dataclass(frozen=True)
class FantasyBudget:
    amount: float
    source: BudgetSource

    def as_budget_state(self) -> BudgetState:
        return BudgetState(self.amount, 0.0)


@dataclass(frozen=True)
class TreeEvaluation:
    value: np.ndarray  # (b,)
    n_evaluated: np.ndarray  # (b,) count of budget-feasible nodes
    node_values: np.ndarray  # (b, n_nodes); exactly 0 on pruned nodes
    feasible: np.ndarray  # (b, n_nodes) bool
    root_fantasy_y: np.ndarray  # (b, m_1) fantasy objective values at the root


class TreeObjective:
    """Batched, differentiable one-shot tree value for one (layout, pair, sheet, budget)."""

    def __init__(self, layout: TreeLayout, pair: SurrogatePair, sheet: BaseSampleSheet, budget):
        if sheet.layout != layout:
            raise ValueError("sheet was drawn for a different layout")
        if isinstance(budget, FantasyBudget):
            budget = budget.as_budget_state()
        self.layout = layout
        self.budget = budget
        self.obj = TorchGp.from_model(pair.objective_model)
        self.cost = TorchGp.from_model(pair.logcost_model)
        self.dim = pair.objective_model.dim
        self.incumbent_std = (pair.dataset.utility() - self.obj.y_offset) / self.obj.y_scale

        anc, ids = layout._paths
        self._ids = torch.as_tensor(ids)
        n = layout.lookahead_steps
        n_leaves = layout.level_sizes[-1]
        # eps[k] drives the fantasy drawn at path position k (k < n - 1)
        eps = np.zeros((n_leaves, n, 2))
        for k in range(n - 1):
            eps[:, k] = sheet.eps[k][anc[:, k + 1]]
        self._eps = torch.as_tensor(eps, dtype=DTYPE)
        # representative leaf of each node, level by level
        self._reps = [torch.as_tensor(np.arange(s) * (n_leaves // s)) for s in layout.level_sizes]

    @property
    def n_vars(self) -> int:
        return self.layout.n_nodes * self.dim

    @staticmethod
    def _path_posterior(gp: TorchGp, p: torch.Tensor, eps: torch.Tensor):
        """Sequential fantasy posterior along each path.

        Returns per-position mean, stddev and fantasy value (all in the model's
        standardized units), where position k is conditioned on the fantasies
        drawn at positions < k.
        """
        mean0, cov0 = gp.joint(p)
        n = p.shape[-2]
        eye = torch.eye(n, dtype=DTYPE)
        chol, info = torch.linalg.cholesky_ex(cov0 + gp.noise * eye)
        jitter = gp.noise
        while bool((info > 0).any()):
            jitter *= 10.0
            chol, info = torch.linalg.cholesky_ex(cov0 + jitter * eye)
        strict = torch.tril(chol, diagonal=-1)
        diag = torch.diagonal(chol, dim1=-2, dim2=-1)
        var = torch.diagonal(cov0, dim1=-2, dim2=-1) - (strict**2).sum(-1)
        std = torch.sqrt(torch.clamp_min(var, 1e-30))
        w = std * eps / diag
        mean = mean0 + (strict @ w.unsqueeze(-1))[..., 0]
        return mean, std, mean + std * eps

    def _forward(self, x: torch.Tensor):
        """x: (b, n_nodes, d) -> per-leaf-path quantities."""
        n = self.layout.lookahead_steps
        p = x[:, self._ids]  # (b, leaves, n, d)
        m_y, s_y, v_y = self._path_posterior(self.obj, p, self._eps[..., 0])
        m_c, s_c, v_c = self._path_posterior(self.cost, p, self._eps[..., 1])
        m_c = self.cost.y_offset + self.cost.y_scale * m_c
        s_c = self.cost.y_scale * s_c
        v_c = self.cost.y_offset + self.cost.y_scale * v_c

        b, leaves = p.shape[:2]
        inc0 = torch.full((b, leaves, 1), self.incumbent_std, dtype=DTYPE)
        if n > 1:
            running = torch.cummax(v_y[..., : n - 1], dim=-1).values
            incumbent = torch.maximum(torch.cat([inc0, running], -1), inc0)
            z = torch.exp(torch.clamp(v_c[..., : n - 1], max=MAX_LOG_COST))
            spent = torch.cat([torch.zeros((b, leaves, 1), dtype=DTYPE), torch.cumsum(z, -1)], -1)
        else:
            incumbent = inc0
            spent = torch.zeros((b, leaves, 1), dtype=DTYPE)
        remaining = self.budget.remaining() - spent
        # the hard budget gate is a constant for differentiation purposes
        feasible = (remaining > 0).detach()
        q = self.obj.y_scale * ei_tensor(m_y, s_y, incumbent) * budget_prob_tensor(m_c, s_c, remaining)
        q = torch.where(feasible, q, torch.zeros_like(q))
        return q, feasible, v_y

    def _reduce(self, q: torch.Tensor) -> torch.Tensor:
        total = 0.0
        for level, reps in enumerate(self._reps):
            total = total + q[:, reps, level].mean(-1)
        return total

    def _as_tensor(self, x) -> torch.Tensor:
        x = np.array(x, dtype=float)
        return torch.as_tensor(x.reshape(x.shape[0] if x.ndim > 1 else 1, self.layout.n_nodes, self.dim),
                               dtype=DTYPE)

    def __call__(self, x) -> np.ndarray:
        with torch.no_grad():
            q, _, _ = self._forward(self._as_tensor(x))
            return self._reduce(q).numpy()

    def value_and_grad(self, x) -> tuple[np.ndarray, np.ndarray]:
        xt = self._as_tensor(x).requires_grad_(True)
        q, _, _ = self._forward(xt)
        val = self._reduce(q)
        (g,) = torch.autograd.grad(val.sum(), xt)
        return val.detach().numpy(), g.reshape(g.shape[0], -1).numpy()

    def details(self, x) -> TreeEvaluation:
        with torch.no_grad():
            q, feasible, v_y = self._forward(self._as_tensor(x))
            value = self._reduce(q).numpy()
            b = q.shape[0]
            node_values = np.zeros((b, self.layout.n_nodes))
            node_feasible = np.zeros((b, self.layout.n_nodes), dtype=bool)
            for level, reps in enumerate(self._reps):
                sl = self.layout.level_slice(level)
                node_values[:, sl] = q[:, reps, level].numpy()
                node_feasible[:, sl] = feasible[:, reps, level].numpy()
            if self.layout.lookahead_steps > 1:
                root_y = v_y[:, self._reps[1], 0].numpy() * self.obj.y_scale + self.obj.y_offset
            else:
                root_y = np.zeros((b, 0))
        return TreeEvaluation(value, node_feasible.sum(1), node_values, node_feasible, root_y)


def evaluate_tree(vars: TreeVariables, layout: TreeLayout, pair: SurrogatePair,
                  sheet: BaseSampleSheet, budget) -> float:
    """One-shot Monte-Carlo value of the scenario tree at fixed node points."""
    if vars.layout != layout:
        raise ValueError("variables do not match layout")
    return float(TreeObjective(layout, pair, sheet, budget)(vars.flat()[None])[0])


def bmsei_value_and_grad(vars: TreeVariables, layout: TreeLayout, pair: SurrogatePair,
                         sheet: BaseSampleSheet, budget) -> tuple[float, np.ndarray]:
    """Tree value and its gradient with respect to every node point, shape (n_nodes, d)."""
    if vars.layout != layout:
        raise ValueError("variables do not match layout")
    v, g = TreeObjective(layout, pair, sheet, budget).value_and_grad(vars.flat()[None])
    return float(v[0]), g[0].reshape(layout.n_nodes, -1)


def fantasy_budget(pair: SurrogatePair, budget: BudgetState, n_steps: int, rng: np.random.Generator,
                   config=None) -> FantasyBudget:
    """Budget for the tree, set by rolling out EI-PUC-CC for ``n_steps`` fantasy steps."""
    from .acq_optimizer import OptimizerConfig, maximize_scalar_acq
    from .acquisition import ClosedFormAcquisition, nu_schedule
    from .surrogate import fantasize

    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    remaining = budget.remaining()
    if not remaining > 0:
        raise ValueError("no budget remains")
    config = config or OptimizerConfig.rollout()
    dim = pair.objective_model.dim
    cum = 0.0
    current = pair
    for _ in range(n_steps):
        nu = nu_schedule(BudgetState(budget.initial_budget, budget.spent + cum))
        acq = ClosedFormAcquisition("ei_puc_cc", current, nu=nu)
        x, _ = maximize_scalar_acq(acq, dim, config, rng)
        eps_y, eps_lnz = rng.standard_normal(2)
        current, _, z = fantasize(current, x, eps_y, eps_lnz)
        cum += z
    if cum <= remaining and math.isfinite(cum):
        return FantasyBudget(cum, BudgetSource.ROLLOUT_CAPPED)
    return FantasyBudget(remaining, BudgetSource.TRUE_REMAINING)
