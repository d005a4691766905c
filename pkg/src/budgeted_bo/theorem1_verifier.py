"""Monte-Carlo policy values on the discrete counterexample instances.

Beliefs are exact: priors are independent normals, evaluations are noise
free, so a measured point is known and drops out. The simulator draws the
whole function once per trajectory and then replays a policy against it.

Within a group of points sharing (mean, variance, cost) every policy here
takes the lowest unmeasured index, so the unmeasured members of a group are
always a suffix of it and a per-group counter tracks the next candidate.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .problems import DiscreteInstance, make_theorem1_instance

_BUDGET_RTOL = 1e-12
_CHUNK = 20_000


class DiscretePolicy(enum.Enum):
    EI = "ei"
    EI_PUC = "ei_puc"
    HIGH_ONCE = "high_once"
    LOW_ONLY = "low_only"


@dataclass(frozen=True)
class PolicyValueEstimate:
    mean: float
    std_error: float
    n_trajectories: int


@dataclass(frozen=True)
class TrajectoryBatch:
    gain: np.ndarray  # u(D_final) - u(D_0)
    n_evals: np.ndarray
    first_index: np.ndarray  # -1 when nothing was measured
    measured_high: np.ndarray
    final_cost: np.ndarray
    utility_monotone: np.ndarray


def expected_improvement(mean, std, incumbent):
    z = (mean - incumbent) / std
    return (mean - incumbent) * ndtr(z) + std * np.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)


def _groups(inst: DiscreteInstance):
    """Groups of unmeasured-at-start points with identical (mean, var, cost), by first index."""
    keys: dict[tuple[float, float, float], list[int]] = {}
    for i in range(1, inst.n_points):
        keys.setdefault((inst.prior_mean[i], inst.prior_var[i], inst.cost[i]), []).append(i)
    return sorted(keys.items(), key=lambda kv: kv[1][0])


def _run_chunk(inst: DiscreteInstance, policy: DiscretePolicy, f: np.ndarray) -> TrajectoryBatch:
    t = f.shape[0]
    groups = _groups(inst)
    members = [np.array(m) for _, m in groups]
    g_mean = np.array([k[0] for k, _ in groups])
    g_std = np.sqrt(np.array([k[1] for k, _ in groups]))
    g_cost = np.array([k[2] for k, _ in groups])
    g_size = np.array([len(m) for m in members])
    padded = np.zeros((len(members), g_size.max()), dtype=int)
    for gi, m in enumerate(members):
        padded[gi, : len(m)] = m
    low_group = [gi for gi, m in enumerate(members) if inst.high_index not in m]
    high_group = [gi for gi, m in enumerate(members) if inst.high_index in m]

    count = np.zeros((t, len(groups)), dtype=int)
    spent = np.zeros(t)
    incumbent = np.full(t, inst.initial_value)
    active = np.ones(t, dtype=bool)
    n_evals = np.zeros(t, dtype=int)
    first = np.full(t, -1)
    high = np.zeros(t, dtype=bool)
    monotone = np.ones(t, dtype=bool)
    limit = inst.budget * (1 + _BUDGET_RTOL)
    rows = np.arange(t)

    while active.any():
        afford = (count < g_size) & (spent[:, None] + g_cost[None, :] <= limit) & active[:, None]
        if policy in (DiscretePolicy.EI, DiscretePolicy.EI_PUC):
            score = expected_improvement(g_mean[None, :], g_std[None, :], incumbent[:, None])
            if policy is DiscretePolicy.EI_PUC:
                score = score / g_cost[None, :]
            score = np.where(afford, score, -np.inf)
        else:
            allowed = np.zeros(len(groups), dtype=bool)
            allowed[low_group if policy is DiscretePolicy.LOW_ONLY else high_group] = True
            if policy is DiscretePolicy.HIGH_ONCE:
                afford &= (n_evals == 0)[:, None]
            score = np.where(afford & allowed[None, :], 0.0, -np.inf)
        can = np.isfinite(score).any(1)
        active &= can
        if not active.any():
            break
        g = np.argmax(score, axis=1)  # first maximum = lowest first-member index
        idx = rows[active]
        gsel = g[active]
        member = padded[gsel, count[idx, gsel]]
        value = f[idx, member]
        new_inc = np.maximum(incumbent[idx], value)
        monotone[idx] &= new_inc >= incumbent[idx]
        incumbent[idx] = new_inc
        spent[idx] += g_cost[gsel]
        count[idx, gsel] += 1
        first[idx] = np.where(n_evals[idx] == 0, member, first[idx])
        high[idx] |= member == inst.high_index
        n_evals[idx] += 1
    return TrajectoryBatch(incumbent - inst.initial_value, n_evals, first, high, spent, monotone)


def simulate_trajectories(instance: DiscreteInstance, policy: DiscretePolicy | str, n_trajectories: int,
                          rng: np.random.Generator) -> TrajectoryBatch:
    policy = DiscretePolicy(policy)
    if n_trajectories < 1:
        raise ValueError("n_trajectories must be >= 1")
    n_chunks = -(-n_trajectories // _CHUNK)
    streams = rng.spawn(n_chunks)
    parts = []
    for c in range(n_chunks):
        size = min(_CHUNK, n_trajectories - c * _CHUNK)
        z = streams[c].standard_normal((size, instance.n_points))
        f = instance.prior_mean + np.sqrt(instance.prior_var) * z
        f[:, 0] = instance.initial_value
        parts.append(_run_chunk(instance, policy, f))
    fields = TrajectoryBatch.__dataclass_fields__
    return TrajectoryBatch(*(np.concatenate([getattr(p, k) for p in parts]) for k in fields))


def simulate(instance: DiscreteInstance, policy: DiscretePolicy | str, n_trajectories: int,
             rng: np.random.Generator) -> PolicyValueEstimate:
    """Monte-Carlo estimate of the expected utility gain of ``policy``."""
    gain = simulate_trajectories(instance, policy, n_trajectories, rng).gain
    se = float(np.std(gain, ddof=1) / math.sqrt(len(gain))) if len(gain) > 1 else 0.0
    return PolicyValueEstimate(float(np.mean(gain)), se, len(gain))


def eipuc_value_bound(epsilon: float, delta: float) -> float:
    """Upper bound eps * sqrt(2 ln(N + 1)) on the EI-PUC value, N = floor((1+delta)/eps)."""
    n = math.floor((1 + delta) / epsilon + 1e-9)
    return epsilon * math.sqrt(2 * math.log(n + 1))


def low_only_value_bound(epsilon: float, delta: float) -> float:
    """Lower bound (1-eps) * sqrt(a ln N), a = 1/(pi ln 2), on the low-only value."""
    n = math.floor((1 + delta) / epsilon + 1e-9)
    return (1 - epsilon) * math.sqrt(math.log(n) / (math.pi * math.log(2)))


@dataclass(frozen=True)
class RatioRow:
    epsilon: float
    delta: float
    variant: str
    policy: str
    mean: float
    std_error: float
    ratio: float
    ratio_std_error: float


REFERENCE = {"for_eipuc": (DiscretePolicy.HIGH_ONCE, DiscretePolicy.EI_PUC),
             "for_ei": (DiscretePolicy.LOW_ONLY, DiscretePolicy.EI)}


def ratio_report(instance_pairs, n_trajectories: int, rng: np.random.Generator,
                 variants=("for_eipuc", "for_ei")) -> list[RatioRow]:
    """Reference-to-myopic value ratios for each (epsilon, delta) and variant.

    The ``ratio`` column is V_reference / V_policy, so reference rows read 1.
    """
    rows: list[RatioRow] = []
    for eps, delta in instance_pairs:
        for variant in variants:
            inst = make_theorem1_instance(eps, delta, variant)
            ref_pol, pol = REFERENCE[variant]
            ref = simulate(inst, ref_pol, n_trajectories, rng)
            est = simulate(inst, pol, n_trajectories, rng)
            ratio = ref.mean / est.mean if est.mean > 0 else math.inf
            rse = ratio * math.hypot(ref.std_error / ref.mean, est.std_error / est.mean) if est.mean > 0 else math.inf
            rows.append(RatioRow(eps, delta, variant, ref_pol.value, ref.mean, ref.std_error, 1.0, 0.0))
            rows.append(RatioRow(eps, delta, variant, pol.value, est.mean, est.std_error, ratio, rse))
    return rows


def ratios_increasing(rows: list[RatioRow], variant: str, policy: str) -> bool:
    """Ratios ordered by decreasing epsilon rise, allowing 2 combined SEs of slack per step."""
    sel = sorted((r for r in rows if r.variant == variant and r.policy == policy), key=lambda r: -r.epsilon)
    return all(b.ratio > a.ratio - 2 * math.hypot(a.ratio_std_error, b.ratio_std_error)
               for a, b in zip(sel, sel[1:]))
