import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deqreg import autodiff as ad
from deqreg.attacks import AttackSpec, pgd_attack
from deqreg.data import gen_dataset
from deqreg.deq import SolverConfig, init_model, solve, spectral_norm, spectral_rescale
from deqreg.errors import ContractError, TrainingAborted
from deqreg.training import (
    HISTORY_FIELDS, OptimizerState, TrainConfig, adam_update, cosine_lr, framework_loss_graph,
    inner_max, pgd_at_step, random_intermediate_loss, sample_state_index, train_loop, trades_step,
    with_overrides,
)

CFG = SolverConfig(N=8)


def batch(seed=0, n=16, l=3, C=3):
    rng = np.random.default_rng(seed)
    model = init_model(l, 6, C, rng)
    X = rng.uniform(-1, 1, size=(n, l))
    y = rng.integers(0, C, size=n)
    return model, X, y


def loss_value(model, X, X_adv, y, cfg, solver_cfg=CFG, state_index=None):
    g, out = framework_loss_graph(model, X, X_adv, y, cfg, solver_cfg, state_index)
    return float(out.value)


# -- configuration ---------------------------------------------------------

@pytest.mark.parametrize("kwargs", [dict(lr0=0.0), dict(framework="sgd"), dict(framework="trades", trades_weight=-1),
                                    dict(K_p=0), dict(batch_size=0), dict(epochs=-1)])
def test_train_config_rejects_invalid(kwargs):
    with pytest.raises(ContractError):
        TrainConfig(**kwargs)


def test_step_functions_check_framework():
    model, X, y = batch()
    opt = OptimizerState.zeros_like(model.params())
    with pytest.raises(ContractError):
        pgd_at_step(model, X, y, TrainConfig(framework="trades"), opt, CFG, 1e-3)
    with pytest.raises(ContractError):
        trades_step(model, X, y, TrainConfig(), opt, CFG, 1e-3)


# -- learning rate and Adam ------------------------------------------------

@pytest.mark.parametrize("step, expected", [(0, 1e-3), (100, 0.0), (50, 5e-4), (150, 0.0)])
def test_cosine_lr_examples(step, expected):
    assert cosine_lr(step, 100, 1e-3) == pytest.approx(expected, abs=1e-18)


@given(st.integers(1, 1000), st.data())
def test_cosine_lr_is_monotone_and_bounded(total, data):
    s = data.draw(st.integers(0, total - 1))
    a, b = cosine_lr(s, total, 1.0), cosine_lr(s + 1, total, 1.0)
    assert 0.0 <= b <= a <= 1.0


def test_adam_first_step_has_size_lr():
    params = {"w": np.array([0.5])}
    new, opt = adam_update(params, {"w": np.array([0.1])}, OptimizerState.zeros_like(params), 1e-3)
    # m_hat = g and v_hat = g^2 on the first step
    assert new["w"][0] - 0.5 == pytest.approx(-1e-3 * 0.1 / (0.1 + 1e-8), rel=1e-12)
    assert opt.step == 1


def test_adam_zero_gradient_moves_nothing():
    rng = np.random.default_rng(0)
    params = {"a": rng.standard_normal((3, 2)), "b": rng.standard_normal(4)}
    opt = OptimizerState(m={k: 0.1 * np.ones_like(p) for k, p in params.items()},
                         v={k: 0.2 * np.ones_like(p) for k, p in params.items()}, step=0)
    zero = {k: np.zeros_like(p) for k, p in params.items()}
    new, opt2 = adam_update(params, zero, OptimizerState.zeros_like(params), 1e-2)
    for k in params:
        np.testing.assert_array_equal(new[k], params[k])
    _, opt3 = adam_update(params, zero, opt, 1e-2)
    np.testing.assert_allclose(opt3.m["a"], 0.9 * 0.1)
    np.testing.assert_allclose(opt3.v["a"], 0.999 * 0.2)


def test_adam_is_deterministic_over_100_steps():
    def run():
        rng = np.random.default_rng(5)
        params = {"w": rng.standard_normal((4, 4))}
        opt = OptimizerState.zeros_like(params)
        for _ in range(100):
            params, opt = adam_update(params, {"w": np.sin(params["w"]) + rng.standard_normal((4, 4))}, opt, 1e-2)
        return params["w"]
    assert run().tobytes() == run().tobytes()


def test_adam_rejects_non_finite_and_mismatched_gradients():
    params = {"w": np.zeros(2)}
    opt = OptimizerState.zeros_like(params)
    with pytest.raises(TrainingAborted, match="'w'"):
        adam_update(params, {"w": np.array([np.nan, 0.0])}, opt, 1e-3)
    with pytest.raises(ContractError):
        adam_update(params, {"w": np.zeros(3)}, opt, 1e-3)


# -- losses ----------------------------------------------------------------

def test_zero_budget_pgd_at_is_clean_cross_entropy():
    model, X, y = batch(1)
    cfg = TrainConfig(eps=0.0)
    naive = SolverConfig(N=8, method="naive")
    X_adv = inner_max(model, X, y, cfg, naive, seed=0, domain=(-3.0, 3.0))
    np.testing.assert_array_equal(X_adv, X)
    # with plain iteration the phantom endpoint is the solver's final state
    clean = np.mean([ad.eval_cross_entropy(lg, t) for lg, t in zip(solve(model, X, naive).logits[-1], y)])
    assert loss_value(model, X, X_adv, y, cfg, solver_cfg=naive) == pytest.approx(clean, rel=1e-12)


def test_zero_budget_trades_has_no_kl_term():
    model, X, y = batch(2)
    cfg = TrainConfig(framework="trades", eps=0.0)
    X_adv = inner_max(model, X, y, cfg, CFG, seed=0, domain=(-3.0, 3.0))
    clean = loss_value(model, X, X, y, TrainConfig(framework="trades", trades_weight=0.0))
    assert loss_value(model, X, X_adv, y, cfg) == pytest.approx(clean, abs=1e-15)


def test_zero_trades_weight_matches_clean_training_update():
    model, X, y = batch(3)
    opt = OptimizerState.zeros_like(model.params())
    t_cfg = TrainConfig(framework="trades", trades_weight=0.0, eps=0.1, alpha=0.03)
    c_cfg = TrainConfig(framework="pgd_at", eps=0.0)
    m1, _, l1 = trades_step(model, X, y, t_cfg, opt, CFG, 1e-2, seed=4)
    m2, _, l2 = pgd_at_step(model, X, y, c_cfg, opt, CFG, 1e-2, seed=4)
    assert l1 == l2
    for a, b in zip(m1.params().values(), m2.params().values()):
        np.testing.assert_array_equal(a, b)


def test_vanishing_learning_rate_keeps_parameters():
    model, X, y = batch(4, n=1)
    opt = OptimizerState.zeros_like(model.params())
    new, _, _ = pgd_at_step(model, X, y, TrainConfig(eps=0.1, alpha=0.03), opt, CFG, 1e-15)
    for a, b in zip(new.params().values(), model.params().values()):
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


@pytest.mark.parametrize("framework", ["pgd_at", "trades"])
def test_total_loss_gradient_matches_finite_differences(framework):
    # K_p = N anchors the phantom path at the zero state, so the graph is exact
    model, X, y = batch(5, n=6)
    cfg = TrainConfig(framework=framework, K_p=8, eps=0.2, alpha=0.05)
    X_adv = inner_max(model, X, y, cfg, CFG, seed=1, domain=(-3.0, 3.0))
    g, out = framework_loss_graph(model, X, X_adv, y, cfg, CFG)
    grads = ad.reverse_grad(g, out).grads
    for name, idx in (("W", (0, 1)), ("U", (2, 0))):
        def f(v):
            P = getattr(model, name).copy()
            P[idx] = v[0]
            return loss_value(model.with_params(**{name: P}), X, X_adv, y, cfg)
        fd = ad.finite_diff_grad(f, np.array([getattr(model, name)[idx]]))
        assert ad.relative_error(grads[name][idx], fd[0]) <= 1e-4


def test_attacked_loss_exceeds_clean_loss(toy):
    X, y = toy.dataset.split("train")
    cfg = toy.train_cfg
    wins = []
    for k, start in enumerate(range(0, len(y), 32)):
        Xb, yb = X[start:start + 32], y[start:start + 32]
        X_adv = inner_max(toy.model, Xb, yb, cfg, CFG, seed=k, domain=toy.domain)
        wins.append(loss_value(toy.model, Xb, X_adv, yb, cfg) >= loss_value(toy.model, Xb, Xb, yb, cfg))
    assert np.mean(wins) >= 0.95


# -- random intermediate states --------------------------------------------

def test_state_index_sampling_is_uniform():
    rng = np.random.default_rng(0)
    counts = np.bincount([sample_state_index(rng, 8) for _ in range(10_000)], minlength=9)
    assert counts[0] == 0
    assert np.all(np.abs(counts[1:] - 1250) <= 150)


def test_state_index_sequence_is_reproducible():
    a = [sample_state_index(np.random.default_rng(7), 8) for _ in range(1)]
    r1, r2 = np.random.default_rng(7), np.random.default_rng(7)
    assert [sample_state_index(r1, 8) for _ in range(50)] == [sample_state_index(r2, 8) for _ in range(50)]
    assert 1 <= a[0] <= 8


def test_single_state_random_loss_is_final_loss():
    model, X, y = batch(6)
    cfg1 = SolverConfig(N=1)
    cfg = TrainConfig(K_p=1)
    _, out, i = random_intermediate_loss(model, X, X, y, cfg, cfg1, np.random.default_rng(0))
    assert i == 1
    assert float(out.value) == loss_value(model, X, X, y, cfg, solver_cfg=cfg1)


def test_random_state_loss_is_unbiased():
    model, X, y = batch(7, n=8)
    cfg = TrainConfig(framework="trades", eps=0.1)
    per_i = np.array([loss_value(model, X, X, y, cfg, state_index=i) for i in range(1, 9)])
    rng = np.random.default_rng(1)
    draws = np.array([float(random_intermediate_loss(model, X, X, y, cfg, CFG, rng)[1].value)
                      for _ in range(1000)])
    se = draws.std(ddof=1) / math.sqrt(len(draws))
    assert abs(draws.mean() - per_i.mean()) <= 3 * se


def test_random_state_training_needs_rng():
    model, X, y = batch(8)
    opt = OptimizerState.zeros_like(model.params())
    with pytest.raises(ContractError):
        pgd_at_step(model, X, y, TrainConfig(random_intermediate=True, eps=0.0), opt, CFG, 1e-3)


# -- training loop ---------------------------------------------------------

def test_zero_epochs_returns_initial_model():
    ds = gen_dataset("gaussian_blobs", 60, 0.1, seed=0)
    res = train_loop(ds, TrainConfig(epochs=0))
    assert res.history == [] and res.model is res.final_model


def test_separable_blobs_train_to_full_accuracy():
    ds = gen_dataset("gaussian_blobs", 400, 0.1, C=2, seed=0)
    cfg = TrainConfig(epochs=50, batch_size=64, lr0=1e-2, eps=0.0, hidden_dim=8)
    res = train_loop(ds, cfg)
    X, y = ds.split("test")
    assert np.mean(solve(res.model, X, CFG).predictions() == y) >= 0.99


def test_adversarial_training_beats_untrained_model(toy):
    for seed in range(3):
        t = toy if seed == 0 else type(toy)(seed=seed)
        spec = AttackSpec("readymade_pgd", eps=t.eps, alpha=t.eps / 4, seed=seed)
        untrained = train_loop(t.dataset, with_overrides(t.train_cfg, epochs=0)).model
        before = pgd_attack(untrained, t.X, t.y, spec, CFG, domain=t.domain).accuracy
        after = pgd_attack(t.model, t.X, t.y, spec, CFG, domain=t.domain).accuracy
        assert after > before


def test_history_schema_and_file(tmp_path, toy):
    ds = toy.dataset
    path = tmp_path / "history.csv"
    res = train_loop(ds, with_overrides(toy.train_cfg, epochs=2), history_path=path)
    assert [r["epoch"] for r in res.history] == [1, 2]
    for rec in res.history:
        assert set(HISTORY_FIELDS) <= set(rec)
        assert all(math.isfinite(rec[k]) for k in HISTORY_FIELDS)
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(HISTORY_FIELDS) and len(lines) == 3
    assert res.best_robust_acc == max(r["robust_acc"] for r in res.history)


def test_training_is_bitwise_deterministic(toy):
    cfg = with_overrides(toy.train_cfg, epochs=2)
    a = train_loop(toy.dataset, cfg).final_model
    b = train_loop(toy.dataset, cfg).final_model
    for p, q in zip(a.params().values(), b.params().values()):
        assert p.tobytes() == q.tobytes()


def test_updates_keep_parameters_finite_and_contractive(toy):
    cfg = with_overrides(toy.train_cfg, epochs=2, framework="trades", random_intermediate=True)
    res = train_loop(toy.dataset, cfg)
    for m in (res.model, res.final_model):
        assert all(np.all(np.isfinite(p)) for p in m.params().values())
        assert spectral_norm(m.W) <= cfg.gamma * (1 + 1e-12)


@settings(max_examples=30)
@given(st.integers(0, 2 ** 16), st.floats(0.1, 1.0))
def test_spectral_rescale_never_increases_norm(seed, gamma):
    rng = np.random.default_rng(seed)
    m = init_model(2, 5, 2, rng, gamma=gamma).with_params(W=rng.standard_normal((5, 5)))
    assert spectral_norm(spectral_rescale(m).W) <= spectral_norm(m.W) * (1 + 1e-12)


def test_non_finite_loss_aborts_with_location(toy, monkeypatch, tmp_path):
    real = ad.reverse_grad

    def poisoned(g, out):
        res = real(g, out)
        return ad.GradResult(value=np.array(np.nan), grads=res.grads)

    monkeypatch.setattr(ad, "reverse_grad", poisoned)
    path = tmp_path / "history.csv"
    with pytest.raises(TrainingAborted) as info:
        train_loop(toy.dataset, with_overrides(toy.train_cfg, epochs=1, eps=0.0), history_path=path)
    assert info.value.epoch == 1 and info.value.batch == 0
    assert path.read_text().splitlines() == [",".join(HISTORY_FIELDS)]
