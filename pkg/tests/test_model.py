import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from a2forge import autodiff as ad
from a2forge import model as M


def test_zero_weights_zero_logits():
    p = M.DefenseParams([np.zeros((3, 4)), np.zeros((4, 2))], [np.zeros(4), np.zeros(2)])
    assert np.array_equal(M.classify(p, np.random.default_rng(0).uniform(size=(5, 3))), np.zeros((5, 2)))


def test_single_layer_picks_weight_row():
    W = np.arange(6.0).reshape(3, 2)
    p = M.DefenseParams([W], [np.zeros(2)])
    assert np.array_equal(M.classify(p, np.eye(3)[[0]]), W[[0]])


def test_seeded_init_reproducible():
    x = np.random.default_rng(1).uniform(size=(4, 784))
    a = M.classify(M.init_mlp(rng=np.random.default_rng(7)), x)
    b = M.classify(M.init_mlp(rng=np.random.default_rng(7)), x)
    assert np.array_equal(a, b)
    assert M.init_mlp().sizes == [784, 256, 128, 10]


def test_layer_chain_validated():
    with pytest.raises(ValueError):
        M.DefenseParams([np.zeros((3, 4)), np.zeros((5, 2))], [np.zeros(4), np.zeros(2)])
    with pytest.raises(ValueError):
        M.DefenseParams([np.zeros((3, 4))], [np.zeros(3)])


def test_input_width_checked():
    with pytest.raises(ad.ShapeError):
        M.classify(M.init_mlp((3, 2)), np.zeros((1, 4)))


def test_cross_entropy_examples():
    assert M.cross_entropy(np.array([[0.0, 0.0]]), [0]) == pytest.approx(np.log(2), abs=1e-12)
    assert M.cross_entropy(np.array([[10.0, -10.0]]), [0]) == pytest.approx(np.log1p(np.exp(-20.0)), rel=1e-9)
    assert M.cross_entropy(np.array([[10.0, -10.0]]), [0]) == pytest.approx(2.06e-9, rel=1e-2)
    one = M.cross_entropy(np.array([[1.0, 2.0, 0.5]]), [2])
    two = M.cross_entropy(np.array([[1.0, 2.0, 0.5]] * 2), [2, 2])
    assert one == pytest.approx(two, abs=1e-15)
    with pytest.raises(ValueError):
        M.cross_entropy(np.zeros((1, 2)), [2])


def test_cw_examples():
    assert M.cw_margin_loss(np.array([[2.0, 5.0, 1.0]]), [1]) == -3.0
    assert M.cw_margin_loss(np.array([[2.0, 5.0, 1.0]]), [0]) == 3.0
    assert M.cw_margin_loss(np.full((1, 4), 1.7), [2]) == 0.0
    with pytest.raises(ValueError):
        M.cw_margin_loss(np.zeros((1, 3)), [-1])


finite = st.floats(-50, 50, allow_nan=False, width=64)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 5), elements=finite), st.floats(-100, 100), st.lists(st.integers(0, 4), min_size=3, max_size=3))
def test_loss_properties(z, c, y):
    assert M.cross_entropy(z, y) >= 0
    assert M.cw_margin_loss(z + c, y) == pytest.approx(M.cw_margin_loss(z, y), abs=1e-9)
    assert M.cross_entropy(np.full((3, 5), c), y) == pytest.approx(np.log(5), abs=1e-12)


def test_linear_cw_gradient_constant(linear_model):
    w = linear_model.weights[0]
    rng = np.random.default_rng(0)
    for _ in range(3):
        x = rng.uniform(size=(1, 5))
        g = M.input_gradient(linear_model, x, [0], "cw")
        assert np.allclose(g[0], w[:, 1] - w[:, 0], atol=1e-14)


def test_input_gradient_matches_finite_differences():
    p = M.init_mlp((6, 8, 3), np.random.default_rng(2))
    rng = np.random.default_rng(3)
    x, y = rng.uniform(size=(4, 6)), np.array([0, 1, 2, 1])
    for kind in M.LOSS_KINDS:
        g = M.input_gradient(p, x, y, kind)
        h, cd = 1e-5, np.zeros_like(x)
        for idx in np.ndindex(*x.shape):
            up, dn = x.copy(), x.copy()
            up[idx] += h
            dn[idx] -= h
            cd[idx] = (M.per_example_loss(p, up, y, kind).mean() - M.per_example_loss(p, dn, y, kind).mean()) / (2 * h)
        assert np.max(np.abs(g - cd) / np.maximum(1, np.abs(cd))) < 1e-4


def test_duplicated_rows_duplicate_gradient():
    p = M.init_mlp((6, 8, 3), np.random.default_rng(2))
    x = np.random.default_rng(4).uniform(size=(1, 6))
    per, g = M.loss_and_input_gradient(p, np.vstack([x, x]), [1, 1])
    assert per[0] == per[1]
    assert np.array_equal(g[0], g[1])


def test_param_gradient_matches_finite_differences():
    p = M.init_mlp((4, 5, 3), np.random.default_rng(5))
    x, y = np.random.default_rng(6).uniform(size=(3, 4)), np.array([0, 2, 1])
    _, grads = M.loss_and_param_gradient(p, x, y)
    arrays_ = p.arrays()
    for i, a in enumerate(arrays_):
        for idx in list(np.ndindex(*a.shape))[:6]:
            up = [b.copy() for b in arrays_]
            dn = [b.copy() for b in arrays_]
            up[i][idx] += 1e-5
            dn[i][idx] -= 1e-5
            cd = (M.cross_entropy(M.classify(M.DefenseParams.from_arrays(up), x), y)
                  - M.cross_entropy(M.classify(M.DefenseParams.from_arrays(dn), x), y)) / 2e-5
            assert abs(grads[i][idx] - cd) / max(1, abs(cd)) < 1e-4


def test_sgd_examples():
    st_ = M.sgd(lr=0.1, momentum=0.0, weight_decay=0.0)
    (p,) = M.optimizer_step([np.zeros(1)], [np.ones(1)], st_)
    assert p[0] == pytest.approx(-0.1)
    st_ = M.sgd(lr=0.1, momentum=0.9, weight_decay=0.0)
    (p,) = M.optimizer_step([np.zeros(1)], [np.ones(1)], st_)
    (p,) = M.optimizer_step([p], [np.ones(1)], st_)
    assert p[0] == pytest.approx(-0.29, abs=1e-15)


@pytest.mark.parametrize("make", [lambda: M.sgd(weight_decay=0.0), lambda: M.adamw(weight_decay=0.0)])
def test_zero_gradient_fixed_point(make):
    p = [np.random.default_rng(0).normal(size=(3, 2))]
    out = M.optimizer_step(p, [np.zeros((3, 2))], make())
    assert np.array_equal(out[0], p[0])


def test_adamw_first_step_and_decoupled_decay():
    st_ = M.adamw(lr=1e-3, weight_decay=1e-2)
    (p,) = M.optimizer_step([np.array([2.0])], [np.array([0.5])], st_)
    # bias-corrected first step moves lr * sign(g); decay adds lr * wd * p
    assert p[0] == pytest.approx(2.0 - 1e-3 * (0.5 / (0.5 + 1e-8) + 1e-2 * 2.0), abs=1e-15)
    assert [b.shape for b in st_.first] == [(1,)] and st_.step == 1


def test_non_finite_gradient_refused_state_untouched():
    st_ = M.adamw()
    p = [np.ones(2)]
    M.optimizer_step(p, [np.ones(2)], st_)
    snapshot = (st_.step, st_.first[0].copy(), st_.second[0].copy())
    with pytest.raises(M.NonFiniteGradientError):
        M.optimizer_step(p, [np.array([1.0, np.nan])], st_)
    assert st_.step == snapshot[0]
    assert np.array_equal(st_.first[0], snapshot[1]) and np.array_equal(st_.second[0], snapshot[2])


def test_optimizer_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        M.optimizer_step([np.ones(2)], [np.ones(3)], M.sgd())
