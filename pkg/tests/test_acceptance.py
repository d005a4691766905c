"""Acceptance criteria 1-10, one verdict line each (see the terminal summary)."""

import math
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from budgeted_bo.acquisition import BudgetState, ClosedFormAcquisition, ei_puc_cc, q1
from budgeted_bo.gp_core import PosteriorSummary as PS
from budgeted_bo.gp_core import posterior
from budgeted_bo.harness import RunConfig, design_only_trace, mean_ci, run_experiment
from budgeted_bo.multistep_tree import BaseSampleSheet, TreeLayout, TreeObjective, TreeVariables, evaluate_tree
from budgeted_bo.problems import make_theorem1_instance
from budgeted_bo.surrogate import Dataset, refit
from budgeted_bo.theorem1_verifier import ratio_report, ratios_increasing, simulate_trajectories
from tree_oracle import two_stage_value

MC_SAMPLES = 1_000_000
N_TRAJ = 100_000
E_Z_PLUS = 1 / math.sqrt(2 * math.pi)  # 0.39894
EIPUC_BOUND = 0.0307
C8_METHODS = ("ei", "ei_puc", "ei_puc_cc", "bmsei_path:2")


def _random_posteriors(rng):
    # incumbent within 2 sd of the mean so that 1e6 samples resolve the improvement event
    obj = PS(rng.normal(0, 1), rng.uniform(0.05, 2.0))
    lnc = PS(rng.normal(0, 0.7), rng.uniform(0.05, 1.0))
    return obj, lnc, obj.mean + obj.stddev * rng.uniform(-2, 2)


def _pair(seed, n=6, d=2):
    rng = np.random.default_rng(seed)
    x = rng.random((n, d))
    return refit(Dataset.from_arrays(x, np.sin(5 * x[:, 0]) + 0.5 * x[:, -1], np.exp(0.4 * np.cos(4 * x[:, -1]))))


def test_c1_q1_matches_monte_carlo(report):
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(50):
        obj, lnc, inc = _random_posteriors(rng)
        remaining = math.exp(lnc.mean + lnc.stddev * rng.uniform(-2, 2))
        b = BudgetState(remaining * rng.uniform(1, 4))
        b = BudgetState(b.initial_budget, b.initial_budget - remaining)
        y = rng.normal(obj.mean, obj.stddev, MC_SAMPLES)
        z = np.exp(rng.normal(lnc.mean, lnc.stddev, MC_SAMPLES))
        s = np.maximum(y - inc, 0) * (b.spent + z <= b.initial_budget)
        se = s.std(ddof=1) / math.sqrt(MC_SAMPLES)
        worst = max(worst, abs(q1(obj, lnc, inc, b).value - s.mean()) / max(se, 1e-300))
    assert report(1, worst <= 3, f"max |q1 - MC| / SE = {worst:.2f} over 50 configs (<= 3)")


def test_c2_ei_puc_cc_matches_monte_carlo(report):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(50):
        obj, lnc, inc = _random_posteriors(rng)
        y = rng.normal(obj.mean, obj.stddev, MC_SAMPLES)
        lz = rng.normal(lnc.mean, lnc.stddev, MC_SAMPLES)
        for nu in (0.0, 0.5, 1.0):
            s = np.maximum(y - inc, 0) * np.exp(-nu * lz)
            se = s.std(ddof=1) / math.sqrt(MC_SAMPLES)
            worst = max(worst, abs(ei_puc_cc(obj, lnc, inc, nu).value - s.mean()) / max(se, 1e-300))
    assert report(2, worst <= 3, f"max |ei_puc_cc - MC| / SE = {worst:.2f} over 150 cases (<= 3)")


def test_c3_one_step_tree_equals_q1(report):
    pair = _pair(0)
    lay = TreeLayout(1)
    rng = np.random.default_rng(3)
    sheet = BaseSampleSheet.draw(lay, rng)
    worst = 0.0
    for _ in range(100):
        x = rng.random(2)
        b = BudgetState(5.0, rng.uniform(0, 5.5))
        tv = evaluate_tree(TreeVariables(lay, x[None]), lay, pair, sheet, b)
        ref = q1(posterior(pair.objective_model, x), posterior(pair.logcost_model, x), pair.dataset.utility(), b)
        worst = max(worst, abs(tv - ref.value))
    assert report(3, worst <= 1e-12, f"max |tree(N=1) - q1| = {worst:.2e} on 100 states (<= 1e-12)")


def test_c4_two_step_tree_matches_oracle(report):
    lay = TreeLayout(2, (4,))
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(400 + seed)
        x = np.sort(rng.random(3))[:, None]
        pair = refit(Dataset.from_arrays(x, rng.normal(size=3), np.exp(rng.normal(0, 0.4, 3))))
        sheet = BaseSampleSheet.draw(lay, rng)
        pts = rng.random((5, 1))
        remaining = rng.uniform(0.5, 4.0)
        val = evaluate_tree(TreeVariables(lay, pts), lay, pair, sheet, BudgetState(remaining))
        worst = max(worst, abs(val - two_stage_value(pair, pts[0], pts[1:], sheet.eps[0], remaining)))
    assert report(4, worst <= 1e-8, f"max |tree(N=2,m=4) - oracle| = {worst:.2e} on 10 states (<= 1e-8)")


def _fd(fn, x, h=1e-4):
    """Five-point central differences of a batched function."""
    eye = np.eye(len(x))
    return (-fn(x + 2 * h * eye) + 8 * fn(x + h * eye) - 8 * fn(x - h * eye) + fn(x - 2 * h * eye)) / (12 * h)


def _rel_err(g, fd):
    return float(np.max(np.abs(g - fd)) / max(np.abs(fd).max(), 1e-12))


def test_c5_gradients_match_central_differences(report):
    tree_worst = cf_worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(500 + seed)
        pair = _pair(seed % 5)
        lay = TreeLayout(2, (2,)) if seed < 10 else TreeLayout(3, (2, 2))
        b = BudgetState(rng.uniform(3.0, 8.0), rng.uniform(0, 1))
        obj = TreeObjective(lay, pair, BaseSampleSheet.draw(lay, rng), b)
        x = rng.uniform(0.05, 0.95, obj.n_vars)
        _, g = obj.value_and_grad(x[None])
        tree_worst = max(tree_worst, _rel_err(g[0], _fd(obj, x)))

        kind = ("ei", "ei_puc", "ei_puc_cc", "q1")[seed % 4]
        acq = ClosedFormAcquisition(kind, pair, budget=BudgetState(10.0, rng.uniform(0, 9)))
        x = rng.uniform(0.05, 0.95, 2)
        cf_worst = max(cf_worst, _rel_err(acq.evaluate(x).gradient, _fd(acq, x)))
    ok = tree_worst <= 1e-3 and cf_worst <= 1e-3
    assert report(5, ok, f"max rel grad error: tree {tree_worst:.1e}, closed form {cf_worst:.1e} (<= 1e-3)")


EPSILONS = (0.2, 0.1, 0.05, 0.01)


@pytest.fixture(scope="module")
def theorem_rows():
    return ratio_report([(e, 0.1) for e in EPSILONS], N_TRAJ, np.random.default_rng(6))


def test_c6_eipuc_variant(report, theorem_rows):
    r = {(row.epsilon, row.variant, row.policy): row for row in theorem_rows}
    pol, ref = r[(0.01, "for_eipuc", "ei_puc")], r[(0.01, "for_eipuc", "high_once")]
    checks = [
        pol.mean <= EIPUC_BOUND + 3 * pol.std_error,
        abs(ref.mean - E_Z_PLUS) <= 3 * ref.std_error,
        pol.ratio > 10,
        ratios_increasing(theorem_rows, "for_eipuc", "ei_puc"),
    ]
    seq = ", ".join(f"{r[(e, 'for_eipuc', 'ei_puc')].ratio:.2f}" for e in EPSILONS)
    assert report(6, all(checks), f"V_eipuc={pol.mean:.5f}+-{pol.std_error:.1e}, V_high={ref.mean:.5f}"
                                  f"+-{ref.std_error:.1e}, ratio={pol.ratio:.1f}, ratios by eps [{seq}]")


def test_c7_ei_variant(report, theorem_rows):
    inst = make_theorem1_instance(0.01, 0.1, "for_ei")
    batch = simulate_trajectories(inst, "ei", N_TRAJ, np.random.default_rng(7))
    first_high = float(np.mean(batch.first_index == inst.high_index))
    stops = float(np.mean(batch.n_evals == 1))
    ratio = {(row.epsilon, row.variant, row.policy): row for row in theorem_rows}[(0.01, "for_ei", "ei")].ratio
    ok = first_high == 1.0 and stops == 1.0 and ratio > 2
    assert report(7, ok, f"high-first {first_high:.0%}, single evaluation {stops:.0%}, ratio={ratio:.2f} (> 2)")


def _c8_run(root: Path) -> dict[str, list]:
    traces = {}
    for acq in C8_METHODS:
        cfg = RunConfig("dropwave", acq, budget=30.0, replications=20, seed=0, optimizer="desk",
                        out=root / acq.replace(":", "_"))
        res = run_experiment(cfg)
        assert not res.failures, res.failures
        traces[acq] = res.traces
    return traces


@pytest.fixture(scope="module")
def c8_first(tmp_path_factory):
    root = tmp_path_factory.mktemp("c8a")
    return root, _c8_run(root)


@pytest.mark.slow
def test_c8_end_to_end_ranking(report, c8_first):
    _, traces = c8_first
    base = [design_only_trace(RunConfig("dropwave", "ei", budget=30.0, replications=20, seed=0), r)
            for r in range(20)]
    bm, bh, _ = mean_ci([t.performance() for t in base])
    parts, ok_a = [f"design-only {bm:.3f}+-{bh:.3f}"], True
    for acq, ts in traces.items():
        m, h, _ = mean_ci([t.performance() for t in ts])
        ok_a &= m - bm >= 2 * math.hypot(h, bh)
        parts.append(f"{acq} {m:.3f}+-{h:.3f}")
    pm, ph, _ = mean_ci([t.final_log_regret() for t in traces["bmsei_path:2"]])
    em, eh, _ = mean_ci([t.final_log_regret() for t in traces["ei"]])
    ok_b = pm <= em + max(ph, eh)
    detail = (f"(a) {'ok' if ok_a else 'no'}: " + ", ".join(parts)
              + f"; (b) {'ok' if ok_b else 'no'}: log-regret path {pm:.3f}+-{ph:.3f} vs ei {em:.3f}+-{eh:.3f}")
    assert report(8, ok_a and ok_b, detail)


@pytest.mark.slow
def test_c9_determinism(report, c8_first, tmp_path):
    first, _ = c8_first
    _c8_run(tmp_path)
    same = [(first / d / "traces.csv").read_bytes() == (tmp_path / d / "traces.csv").read_bytes()
            for d in (a.replace(":", "_") for a in C8_METHODS)]
    assert report(9, all(same), f"{sum(same)}/{len(same)} trace CSVs bytewise identical")


def test_c10_gp_core_suites(report):
    here = Path(__file__).parent
    selection = "interpolation or reversion or condition or permutation or dense_solve"
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
                           str(here / "test_gp_core.py"), "-k", selection],
                          capture_output=True, text=True, cwd=here.parent)
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    assert report(10, proc.returncode == 0, f"gp_core invariant suites: {summary}")
