import numpy as np
import pytest

from a2forge import model as M
from a2forge import policy as P
from a2forge.ops import Budget, OpKind
from a2forge.space import N_STEPS, preset_pgd, preset_rfgsm, rollout
from a2forge.training import (
    AttackerSpec,
    AttackerTrainConfig,
    DivergenceError,
    TrainConfig,
    brute_force_oracle,
    evaluate_robust,
    load_data,
    lr_at,
    op_histogram,
    train,
    train_at_a2,
    train_at_pgd,
    train_attacker,
)

from conftest import blob_config


def _linear_binary():
    rng = np.random.default_rng(1)
    w = rng.normal(size=(8, 2))
    x = rng.uniform(0.3, 0.7, size=(25, 8))
    y = rng.integers(0, 2, size=25)
    return M.DefenseParams([w], [np.zeros(2)]), x, y


def test_oracle_prefers_fgsm_at_max_step_on_linear_model():
    params, x, y = _linear_binary()
    b = Budget(0.1, 0.1, 1)
    res = brute_force_oracle(params, x, y, b)
    assert res.n_plans == 35
    assert np.all(res.best_ops[:, 0] == OpKind.FGSM)
    assert np.all(res.best_steps[:, 0] == N_STEPS - 1)
    x_fgsm, _ = rollout(preset_pgd(1, 0.1, 0.1), params, x, y)
    assert np.allclose(res.best_loss, M.per_example_loss(params, x_fgsm, y), atol=0)


def test_identity_only_oracle_is_clean_loss():
    params, x, y = _linear_binary()
    res = brute_force_oracle(params, x, y, Budget(0.1, 0.1, 1), ops=[OpKind.IDENTITY])
    assert np.array_equal(res.best_loss, M.per_example_loss(params, x, y))
    assert res.n_plans == 5


def test_oracle_dominates_pgd_at_k2(toy_model, blob_data):
    x, y = blob_data[2].inputs[:40], blob_data[2].labels[:40]
    b = Budget(0.06, 0.02, 2)
    res = brute_force_oracle(toy_model, x, y, b, noise_seed=3)
    assert res.n_plans == 35**2
    x_p, _ = rollout(preset_pgd(2, 0.02, 0.06), toy_model, x, y)
    assert np.all(res.best_loss >= M.per_example_loss(toy_model, x_p, y))
    assert 1 - res.fooled.mean() <= M.accuracy(toy_model, x_p, y)


def test_oracle_refuses_large_k(toy_model, blob_data):
    with pytest.raises(ValueError):
        brute_force_oracle(toy_model, blob_data[2].inputs[:2], blob_data[2].labels[:2], Budget(steps=4))


def test_oracle_covers_a2_plans_with_grid_steps(toy_model, blob_data):
    # an attacker whose step weights are exactly one-hot stays inside the enumerated set
    x, y = blob_data[2].inputs[:30], blob_data[2].labels[:30]
    b = Budget(0.06, 0.02, 2)
    a = P.init_attacker(2, x.shape[1], 4, np.random.default_rng(0))
    a = P.AttackerParams(a.query, a.op_keys, [np.zeros_like(s) for s in a.step_keys])
    a.step_keys[0][:, -1] = 0.0
    res = brute_force_oracle(toy_model, x, y, b, noise_seed=21)
    x_a, _ = P.generate(a, toy_model, x, y, b, rng=np.random.default_rng(0), noise_seed=21)
    # uniform step weights are off-grid, so compare against the clean loss only
    assert np.all(res.best_loss >= M.per_example_loss(toy_model, x, y))
    assert np.all(np.isfinite(M.per_example_loss(toy_model, x_a, y)))


def test_op_histograms_of_presets(toy_model, blob_data):
    x, y = blob_data[2].inputs, blob_data[2].labels
    _, t = rollout(preset_pgd(4, 0.02, 0.06), toy_model, x, y)
    h = op_histogram([t, t])
    assert h.shape == (4, 7) and np.all(h[:, 0] == 1)
    _, t = rollout(preset_rfgsm(4, 0.02, 0.06), toy_model, x, y, rng=np.random.default_rng(0))
    h = op_histogram([t])
    assert h[0, OpKind.GAUSSIAN] == 1 and h[1, OpKind.FGSM] == 1 and np.all(h[2:, OpKind.IDENTITY] == 1)
    assert np.allclose(h.sum(1), 1)
    with pytest.raises(ValueError):
        op_histogram([])


def test_evaluate_robust_contracts(toy_model, blob_data):
    test = blob_data[2]
    assert evaluate_robust(toy_model, AttackerSpec("none"), test) == M.accuracy(toy_model, test.inputs, test.labels)
    pgd1 = evaluate_robust(toy_model, AttackerSpec("pgd", 1, 0.06, 0.02), test)
    pgd20 = evaluate_robust(toy_model, AttackerSpec("pgd", 20, 0.06, 0.02), test)
    assert pgd20 <= pgd1
    rfgsm = evaluate_robust(toy_model, AttackerSpec("rfgsm", 2, 0.06, 0.02), test)
    assert 0 <= rfgsm <= 1
    oracle = evaluate_robust(toy_model, AttackerSpec("oracle", 1, 0.06, 0.02), test.take(30))
    assert oracle <= evaluate_robust(toy_model, AttackerSpec("pgd", 1, 0.06, 0.02, random_start=False), test.take(30))
    with pytest.raises(ValueError):
        AttackerSpec("a2")


def test_random_model_near_chance(blob_data):
    test = blob_data[2]
    p = M.init_mlp((4, 16, 16, 4), np.random.default_rng(11))
    p = M.DefenseParams([w * 1e-3 for w in p.weights], p.biases)
    clean = evaluate_robust(p, AttackerSpec("none"), test)
    assert abs(clean - 0.25) <= 0.1
    # margins are tiny, so any attack can only push accuracy further down
    for spec in (AttackerSpec("fgsm", 1, 0.06), AttackerSpec("pgd", 5, 0.06, 0.02)):
        assert evaluate_robust(p, spec, test) <= clean


def test_random_mnist_model_any_attack_near_chance():
    _, _, test = load_data(TrainConfig())
    p = M.init_mlp((784, 256, 128, 10), np.random.default_rng(0))
    accs = [evaluate_robust(p, AttackerSpec(k, s, 8 / 255, 2 / 255), test) for k, s in (("none", 1), ("fgsm", 1), ("pgd", 20))]
    assert all(abs(a - 0.1) <= 0.05 for a in accs), accs


def test_lr_schedule():
    cfg = TrainConfig(epochs=20, lr=0.1)
    assert [lr_at(cfg, e) for e in (0, 9, 10, 14, 15, 19)] == pytest.approx([0.1, 0.1, 0.01, 0.01, 0.001, 0.001])
    assert lr_at(TrainConfig(epochs=20, lr_schedule=False), 19) == 0.1


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(attacker="fgsm")
    with pytest.raises(ValueError):
        TrainConfig(eps=0)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"epoch": 3})
    d = TrainConfig(hidden=(5,)).to_dict()
    assert TrainConfig.from_dict(d) == TrainConfig(hidden=(5,))


def test_zero_epochs_leaves_parameters(blob_data):
    cfg = blob_config(epochs=0, attacker="a2")
    r = train(cfg, blob_data)
    init = M.init_mlp((4, 16, 16, 4), np.random.default_rng([cfg.seed, 0]))
    assert all(np.array_equal(a, b) for a, b in zip(r.last.arrays(), init.arrays()))
    a0 = P.init_attacker(cfg.steps, 4, cfg.embed_dim, np.random.default_rng([cfg.seed, 3]), cfg.alpha_init_scale)
    assert all(np.array_equal(a, b) for a, b in zip(r.alpha.arrays(), a0.arrays()))
    assert r.report.curves == []


def test_k0_is_natural_training(blob_data):
    nat = train(blob_config(attacker="none"), blob_data)
    k0 = train(blob_config(attacker="pgd", steps=0), blob_data)
    assert all(np.array_equal(a, b) for a, b in zip(nat.last.arrays(), k0.last.arrays()))


def test_training_deterministic_and_best_snapshot(blob_data):
    cfg = blob_config(attacker="a2", epochs=3)
    r1, r2 = train_at_a2(cfg, blob_data), train_at_a2(cfg, blob_data)
    assert r1.report.to_dict() == r2.report.to_dict()
    assert all(np.array_equal(a, b) for a, b in zip(r1.alpha.arrays(), r2.alpha.arrays()))
    val = [row["robust_pgd"] for row in r1.report.curves]
    assert val[r1.report.best_epoch - 1] == max(val) >= val[-1]
    assert len(r1.report.histograms) == 3 and np.array(r1.report.histograms).shape == (3, cfg.steps, 7)
    assert {"best_clean", "best_fgsm", "best_pgd5", "last_clean", "last_fgsm", "last_pgd5"} <= set(r1.report.robust)


def test_resume_matches_uninterrupted_run(blob_data):
    cfg = blob_config(attacker="a2", epochs=4)
    full = train(cfg, blob_data)
    snaps = []
    try:
        def stop(res):
            snaps.append(res)
            if res.epoch == 2:
                raise KeyboardInterrupt
        train(cfg, blob_data, on_epoch=stop)
    except KeyboardInterrupt:
        pass
    resumed = train(cfg, blob_data, resume=snaps[-1])
    assert resumed.report.curves == full.report.curves
    assert all(np.array_equal(a, b) for a, b in zip(resumed.last.arrays(), full.last.arrays()))


def test_adversarial_training_trades_clean_accuracy(blob_data):
    nat = train(blob_config(attacker="none", epochs=6, eps=0.25, eta=0.1), blob_data)
    adv = train_at_pgd(blob_config(epochs=6, eps=0.25, eta=0.1), blob_data)
    strong = AttackerSpec("pgd", 10, 0.25, 0.0625)
    assert evaluate_robust(adv.best, strong, blob_data[2]) > evaluate_robust(nat.best, strong, blob_data[2]) + 0.1
    assert adv.report.robust["last_clean"] <= nat.report.robust["last_clean"]


def test_divergence_aborts_with_state(blob_data):
    with pytest.raises(DivergenceError) as info:
        train(blob_config(attacker="pgd", lr=1e12, momentum=0.0, lr_schedule=False), blob_data)
    assert "theta" in info.value.state and "epoch" in info.value.state


def test_attacker_training_improves_objective(toy_model, blob_data):
    cfg = AttackerTrainConfig(epochs=20, batch_size=60, steps=3, eps=0.06, eta=0.02, embed_dim=4, seed=0)
    _, curve = train_attacker(toy_model, blob_data[0], blob_data[2], cfg)
    assert len(curve) == 20 and {"epoch", "mean_loss", "robust_acc"} <= set(curve[0])
    assert np.mean([r["mean_loss"] for r in curve[-5:]]) > curve[0]["mean_loss"]
