import math

import numpy as np
import pytest

from budgeted_bo.acquisition import BudgetState, ClosedFormAcquisition, q1
from budgeted_bo.gp_core import GpModel, KernelParams, posterior
from budgeted_bo.multistep_tree import (
    BaseSampleSheet, BudgetSource, FantasyBudget, TreeLayout, TreeObjective, TreeVariables,
    bmsei_value_and_grad, evaluate_tree, fantasy_budget,
)
from budgeted_bo.surrogate import Dataset, SurrogatePair, refit
from tree_oracle import two_stage_value


def _pair(seed=0, n=6, d=2):
    rng = np.random.default_rng(seed)
    x = rng.random((n, d))
    y = np.sin(5 * x[:, 0]) + 0.5 * x[:, -1]
    z = np.exp(0.4 * np.cos(4 * x[:, -1]))
    return refit(Dataset.from_arrays(x, y, z))


def test_layout_defaults_and_sizes():
    assert TreeLayout.default(1).branching == ()
    assert TreeLayout.default(2).branching == (4,)
    assert TreeLayout.default(4).branching == (4, 2, 1)
    assert TreeLayout.default(5).branching == (4, 2, 2, 1)
    lay = TreeLayout(4, (4, 2, 1))
    assert lay.level_sizes == (1, 4, 8, 8)
    assert lay.n_nodes == 21
    path = TreeLayout.default(3, path=True)
    assert path.is_path and path.n_nodes == 3
    assert path.label() == "3-B-MS-EI_p"
    with pytest.raises(ValueError):
        TreeLayout(3, (4,))
    with pytest.raises(ValueError):
        TreeLayout(2, (0,))


def test_sheet_and_variables_validation():
    lay = TreeLayout(3, (2, 2))
    with pytest.raises(ValueError):
        BaseSampleSheet(lay, (np.zeros((2, 2)),))
    with pytest.raises(ValueError):
        TreeVariables(lay, np.zeros((6, 2)))
    v = TreeVariables(lay, np.arange(14.0).reshape(7, 2) / 14)
    assert v.level(2).shape == (4, 2)
    assert np.array_equal(v.root, [0.0, 1 / 14])


def test_bellman_base_case():
    pair = _pair()
    lay = TreeLayout(1)
    sheet = BaseSampleSheet.draw(lay, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    for _ in range(100):
        x = rng.random(2)
        b = BudgetState(5.0, rng.uniform(0, 5.5))
        tv = evaluate_tree(TreeVariables(lay, x[None]), lay, pair, sheet, b)
        ref = q1(posterior(pair.objective_model, x), posterior(pair.logcost_model, x),
                 pair.dataset.utility(), b).value
        assert abs(tv - ref) <= 1e-12


def test_n1_gradient_matches_q1_gradient():
    pair = _pair()
    lay = TreeLayout(1)
    b = BudgetState(5.0, 2.0)
    x = np.array([0.3, 0.8])
    _, g = bmsei_value_and_grad(TreeVariables(lay, x[None]), lay, pair, BaseSampleSheet.constant(lay), b)
    ref = ClosedFormAcquisition("q1", pair, budget=b).evaluate(x).gradient
    assert np.allclose(g[0], ref, rtol=1e-12, atol=1e-15)


def _one_d_pair(seed):
    rng = np.random.default_rng(seed)
    x = np.sort(rng.random(3))[:, None]
    y = rng.normal(size=3)
    z = np.exp(rng.normal(0, 0.4, 3))
    return refit(Dataset.from_arrays(x, y, z))


@pytest.mark.parametrize("seed", range(10))
def test_two_stage_tree_matches_dense_oracle(seed):
    pair = _one_d_pair(seed)
    rng = np.random.default_rng(100 + seed)
    lay = TreeLayout(2, (4,))
    sheet = BaseSampleSheet.draw(lay, rng)
    pts = rng.random((5, 1))
    remaining = rng.uniform(0.5, 4.0)
    val = evaluate_tree(TreeVariables(lay, pts), lay, pair, sheet, BudgetState(remaining))
    ref = two_stage_value(pair, pts[0], pts[1:], sheet.eps[0], remaining)
    assert abs(val - ref) <= 1e-8


def test_small_budget_prunes_every_subtree():
    pair = _pair()
    lay = TreeLayout(3, (3, 2))
    rng = np.random.default_rng(2)
    sheet = BaseSampleSheet.draw(lay, rng)
    pts = rng.random((lay.n_nodes, 2))
    b = BudgetState(1e-6)
    obj = TreeObjective(lay, pair, sheet, b)
    det = obj.details(pts.reshape(1, -1))
    root_q1 = evaluate_tree(TreeVariables(TreeLayout(1), pts[:1]), TreeLayout(1), pair,
                            BaseSampleSheet.constant(TreeLayout(1)), b)
    assert det.value[0] == pytest.approx(root_q1, rel=1e-12, abs=0)
    assert det.n_evaluated[0] == 1
    assert np.all(det.node_values[0, 1:] == 0.0)
    spent = evaluate_tree(TreeVariables(lay, pts), lay, pair, sheet, BudgetState(1.0, 1.0))
    assert spent == 0.0


def test_pruned_nodes_contribute_exactly_zero():
    pair = _pair()
    lay = TreeLayout(4, (3, 2, 2))
    rng = np.random.default_rng(3)
    sheet = BaseSampleSheet.draw(lay, rng)
    obj = TreeObjective(lay, pair, sheet, BudgetState(2.5))
    x = rng.random((20, lay.n_nodes * 2))
    det = obj.details(x)
    assert np.all(det.node_values[~det.feasible] == 0.0)
    assert np.array_equal(det.n_evaluated, det.feasible.sum(1))
    assert 0 < det.feasible.mean() < 1
    # a pruned node's descendants are pruned too
    for level in range(2, lay.lookahead_steps):
        sl = lay.level_slice(level)
        parent = lay.level_offsets[level - 1] + np.arange(lay.level_sizes[level]) // lay.branching[level - 1]
        assert np.all(~det.feasible[:, parent] <= ~det.feasible[:, sl])
    recon = sum(det.node_values[:, lay.level_slice(i)].mean(1) for i in range(lay.lookahead_steps))
    assert np.allclose(recon, det.value, rtol=1e-14, atol=0)


def test_evaluation_is_deterministic():
    pair = _pair()
    lay = TreeLayout.default(3)
    rng = np.random.default_rng(4)
    sheet = BaseSampleSheet.draw(lay, rng)
    v = TreeVariables(lay, rng.random((lay.n_nodes, 2)))
    a = evaluate_tree(v, lay, pair, sheet, BudgetState(3.0))
    b = evaluate_tree(v, lay, pair, sheet, BudgetState(3.0))
    assert a == b


@pytest.mark.parametrize("seed", range(20))
def test_tree_gradient_matches_central_differences(seed):
    rng = np.random.default_rng(200 + seed)
    pair = _pair(seed=seed % 5)
    lay = TreeLayout(2, (2,)) if seed < 10 else TreeLayout(3, (2, 2))
    sheet = BaseSampleSheet.draw(lay, rng)
    b = BudgetState(rng.uniform(3.0, 8.0), rng.uniform(0, 1))
    obj = TreeObjective(lay, pair, sheet, b)
    x = rng.uniform(0.05, 0.95, obj.n_vars)
    _, g = obj.value_and_grad(x[None])
    h = 1e-5
    eye = np.eye(obj.n_vars)
    fd = (obj(x + h * eye) - obj(x - h * eye)) / (2 * h)
    scale = max(np.abs(fd).max(), 1e-12)
    assert np.max(np.abs(g[0] - fd)) <= 1e-3 * scale


def test_zero_variance_objective_gives_flat_tree():
    pair = _pair()
    om = pair.objective_model
    flat = GpModel.build(om.train_inputs, om.train_targets, KernelParams(om.params.lengthscales, 1e-30),
                         om.standardize(pair.dataset.utility()) - 1.0, om.y_offset, om.y_scale)
    p = SurrogatePair(flat, pair.logcost_model, pair.dataset)
    lay = TreeLayout(2, (2,))
    rng = np.random.default_rng(5)
    obj = TreeObjective(lay, p, BaseSampleSheet.draw(lay, rng), BudgetState(5.0))
    v, g = obj.value_and_grad(rng.random((3, obj.n_vars)))
    assert np.all(v == 0.0)
    assert np.all(g == 0.0)


def test_fantasy_budget_clamped_to_remaining():
    pair = _pair()
    fb = fantasy_budget(pair, BudgetState(10.0, 9.99), 3, np.random.default_rng(6))
    assert fb.source is BudgetSource.TRUE_REMAINING
    assert fb.amount == pytest.approx(0.01)
    assert fb.as_budget_state().remaining() == fb.amount


def test_fantasy_budget_unit_costs():
    pair = _pair()
    lm = pair.logcost_model
    zero = GpModel.build(lm.train_inputs, np.zeros(lm.n_train), KernelParams(lm.params.lengthscales, 1e-30), 0.0)
    p = SurrogatePair(pair.objective_model, zero, pair.dataset)
    fb = fantasy_budget(p, BudgetState(10.0), 4, np.random.default_rng(7))
    assert fb.amount == pytest.approx(4.0, rel=1e-9)
    assert fb.source is BudgetSource.ROLLOUT_CAPPED
    assert fantasy_budget(p, BudgetState(10.0, 7.0), 4, np.random.default_rng(7)).amount == pytest.approx(3.0)


def test_fantasy_budget_sweep_within_remaining():
    pair = _pair()
    b = BudgetState(6.0, 3.5)
    for s in range(50):
        fb = fantasy_budget(pair, b, 2, np.random.default_rng(s))
        assert 0 < fb.amount <= b.remaining()


def test_fantasy_budget_preconditions():
    pair = _pair()
    with pytest.raises(ValueError):
        fantasy_budget(pair, BudgetState(1.0, 1.0), 2, np.random.default_rng(0))
    with pytest.raises(ValueError):
        fantasy_budget(pair, BudgetState(1.0), 0, np.random.default_rng(0))


def test_fantasy_budget_state_for_tree():
    fb = FantasyBudget(2.0, BudgetSource.ROLLOUT_CAPPED)
    pair = _pair()
    lay = TreeLayout(2, (2,))
    sheet = BaseSampleSheet.draw(lay, np.random.default_rng(8))
    v = TreeVariables(lay, np.full((3, 2), 0.4))
    assert evaluate_tree(v, lay, pair, sheet, fb) == evaluate_tree(v, lay, pair, sheet, BudgetState(2.0))
    assert math.isfinite(evaluate_tree(v, lay, pair, sheet, fb))
