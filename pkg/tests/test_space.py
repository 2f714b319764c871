import numpy as np
import pytest

from a2forge import model as M
from a2forge.ops import Budget, MomentumState, NoiseCell, OpKind
from a2forge.space import (
    N_STEPS,
    STEP_MULTIPLIERS,
    AttackPlan,
    CellChoice,
    cell_apply,
    enumerate_op_sequences,
    enumerate_plans,
    one_hot,
    plan_from_ids,
    preset_pgd,
    preset_rfgsm,
    rollout,
    step_index,
    stepsize_mixture,
)

import reference

ETA = 2 / 255


def test_stepsize_examples():
    # 0.2 * (1 + 0.1 + 0.01 + 0.001 + 0.0001) = 0.22222
    assert stepsize_mixture(np.full(5, 0.2), 1.0) == pytest.approx(0.22222, abs=1e-12)
    assert stepsize_mixture(one_hot(4, 5), ETA) == ETA
    assert stepsize_mixture(one_hot(0, 5), ETA) == pytest.approx(1e-4 * ETA, rel=1e-15)


def test_choice_validation():
    with pytest.raises(ValueError):
        CellChoice(np.full(7, 0.2), one_hot(0, 5))
    with pytest.raises(ValueError):
        CellChoice(one_hot(0, 7), np.ones(4) / 4)
    with pytest.raises(ValueError):
        AttackPlan([CellChoice.hard(OpKind.FGSM)], Budget(steps=2))


def test_cell_examples():
    b = Budget(8 / 255, ETA, 1)
    g = np.array([[0.3, -0.2]])
    m = MomentumState.zeros_like(g)
    d, _ = cell_apply(CellChoice.hard(OpKind.FGSM), g, m, b, NoiseCell(0, 0))
    assert np.array_equal(d, [[ETA, -ETA]])
    for s in range(N_STEPS):
        d, _ = cell_apply(CellChoice.hard(OpKind.IDENTITY, s), g, m, b, NoiseCell(0, 0))
        assert np.array_equal(d, np.zeros_like(g))
    w = np.zeros(7)
    w[[0, 6]] = 0.5
    d, _ = cell_apply(CellChoice(w, one_hot(4, 5)), g, m, b, NoiseCell(0, 0))
    assert np.allclose(d, 0.5 * ETA * np.sign(g), atol=1e-18)


def test_relaxed_cell_is_mixture_of_unified_ops():
    rng = np.random.default_rng(0)
    b = Budget(8 / 255, ETA, 1)
    g = rng.normal(size=(3, 6))
    m = MomentumState(rng.normal(size=(3, 6)))
    w, s = rng.dirichlet(np.ones(7), size=3), rng.dirichlet(np.ones(5), size=3)
    d, _ = cell_apply(CellChoice(w, s), g, m, b, NoiseCell(1, 0))
    expect = np.zeros_like(g)
    for kind in OpKind:
        d_k, _ = cell_apply(CellChoice.hard(kind), g, m, b, NoiseCell(1, 0))
        expect += w[:, [int(kind)]] * d_k / ETA
    expect *= (s @ (STEP_MULTIPLIERS * ETA))[:, None]
    assert np.allclose(d, expect, atol=1e-15)


def test_single_fgsm_cell_is_classic_step(toy_model, blob_data):
    x, y = blob_data[2].inputs[:20], blob_data[2].labels[:20]
    plan = preset_pgd(1, 0.02, 0.06)
    x_adv, trace = rollout(plan, toy_model, x, y)
    g = M.input_gradient(toy_model, x, y)
    assert np.array_equal(x_adv, np.clip(np.clip(x + 0.02 * np.sign(g), x - 0.06, x + 0.06), 0, 1))
    assert trace.ops.shape == (1, 20) and np.all(trace.ops == 0)


def test_identity_plan_fixed_point(toy_model, blob_data):
    x, y = blob_data[2].inputs, blob_data[2].labels
    plan = plan_from_ids([6, 6, 6], [4, 4, 4], Budget(0.06, 0.02, 3))
    x_adv, trace = rollout(plan, toy_model, x, y)
    assert np.array_equal(x_adv, x)
    assert np.array_equal(trace.losses[0], trace.losses[-1])


def test_pgd_ascends_on_trained_model(toy_model, blob_data):
    x, y = blob_data[2].inputs, blob_data[2].labels
    _, trace = rollout(preset_pgd(10, 0.02, 0.06), toy_model, x, y)
    assert np.all(trace.losses[-1] >= trace.losses[0] - 1e-12)


@pytest.mark.parametrize("K", [1, 10])
@pytest.mark.parametrize("kind", ["ce", "cw"])
def test_preset_pgd_matches_reference(toy_model, blob_data, K, kind):
    x, y = blob_data[2].inputs, blob_data[2].labels
    ours, _ = rollout(preset_pgd(K, 0.02, 0.06), toy_model, x, y, kind, np.random.default_rng(5), random_start=True)
    ref = reference.pgd(toy_model.weights, toy_model.biases, x, y, 0.06, 0.02, K, np.random.default_rng(5), True, kind)
    assert np.max(np.abs(ours - ref)) <= 1e-12


def test_rollout_deterministic(toy_model, blob_data):
    x, y = blob_data[2].inputs, blob_data[2].labels
    plan = plan_from_ids([4, 5, 2], [4, 3, 4], Budget(0.06, 0.02, 3))
    a, ta = rollout(plan, toy_model, x, y, rng=np.random.default_rng(2))
    b, tb = rollout(plan, toy_model, x, y, rng=np.random.default_rng(2))
    assert np.array_equal(a, b) and ta.noise_seed == tb.noise_seed


def test_presets():
    p = preset_pgd(10, ETA)
    assert len(p.cells) == 10 and p.op_ids == [0] * 10
    assert all(np.array_equal(c.step_weights, one_hot(4, 5)) for c in p.cells)
    assert preset_pgd(1).op_ids == [0]
    assert preset_rfgsm(2).op_ids == [4, 0]
    assert preset_rfgsm(5).op_ids == [4, 0, 6, 6, 6]
    with pytest.raises(ValueError):
        preset_rfgsm(1)
    with pytest.raises(ValueError):
        preset_pgd(3, step=3 / 255, eta=2 / 255)
    assert step_index(ETA * 0.1, ETA) == 3


def test_rfgsm_tail_cells_do_nothing(toy_model, blob_data):
    x, y = blob_data[2].inputs, blob_data[2].labels
    _, trace = rollout(preset_rfgsm(5, 0.02, 0.06), toy_model, x, y, rng=np.random.default_rng(0), keep_inputs=True)
    for k in range(2, 5):
        assert np.array_equal(trace.inputs[k + 1], trace.inputs[2])


def test_space_size():
    assert len(set(enumerate_op_sequences(2))) == 49
    plans = list(enumerate_plans(Budget(steps=1)))
    assert len(plans) == 35
    assert len({(tuple(p.op_ids), int(np.argmax(p.cells[0].step_weights))) for p in plans}) == 35


def test_rollout_respects_budget_fuzz(toy_model, blob_data):
    rng = np.random.default_rng(0)
    x, y = blob_data[2].inputs, blob_data[2].labels
    b = Budget(0.06, 0.05, 4)
    for _ in range(20):
        cells = [CellChoice(rng.dirichlet(np.ones(7), size=len(x)), rng.dirichlet(np.ones(5), size=len(x))) for _ in range(4)]
        x_adv, _ = rollout(AttackPlan(cells, b), toy_model, x, y, rng=rng, random_start=bool(rng.integers(2)))
        assert np.abs(x_adv - x).max() <= b.eps + 1e-12
        assert x_adv.min() >= 0 and x_adv.max() <= 1
