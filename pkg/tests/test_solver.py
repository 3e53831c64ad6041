import json

import numpy as np
import pytest

import eigenpro4.solver as solver_mod
from eigenpro4.cost import flops_per_batch
from eigenpro4.errors import InputError, NumericError
from eigenpro4.kernels import KernelSpec, kernel_matrix
from eigenpro4.model import AuxiliaryState, KernelModel, predict, predict_auxiliary
from eigenpro4.preconditioner import attach_centers, build_preconditioner, preconditioner_from_subsample
from eigenpro4.projection import EP2Config
from eigenpro4.solver import (Projector, TrainConfig, batch_order, ep4_step, finalize_period,
                              rng_for, train)

from conftest import blobs_problem


@pytest.mark.parametrize("kwargs", [
    {"epochs": 0}, {"batch_size": 0}, {"period": 0}, {"learning_rate": -1.0},
    {"projection": "cg"}, {"merge": "half"}, {"precision": "f16"},
])
def test_train_config_rejects(kwargs):
    with pytest.raises(InputError):
        TrainConfig(**kwargs)


def test_train_config_ep2_from_dict():
    cfg = TrainConfig(ep2={"epochs": 3})
    assert cfg.ep2 == EP2Config(epochs=3) and cfg.dtype == np.float64
    assert json.dumps(cfg.to_dict())


def test_rng_streams_independent():
    a = rng_for(0, "batches").random(3)
    assert np.array_equal(a, rng_for(0, "batches").random(3))
    assert not np.array_equal(a, rng_for(0, "nystrom").random(3))


@pytest.mark.parametrize("n, m", [(10, 3), (12, 4), (5, 8)])
def test_batch_order_covers_each_epoch(n, m):
    batches = list(batch_order(n, m, 3, seed=1))
    for epoch in range(3):
        idx = np.concatenate([b for e, b in batches if e == epoch])
        assert sorted(idx) == list(range(n))
    sizes = [len(b) for e, b in batches if e == 0]
    assert all(s == m for s in sizes[:-1]) and sizes[-1] == n - m * (len(sizes) - 1)


def _setup(seed=0, n=80, p=12, s=16, q=3, c=2):
    gen = np.random.default_rng(seed)
    spec = KernelSpec("laplace", 2.0)
    X = gen.standard_normal((n, 4))
    Y = gen.standard_normal((n, c))
    Z = gen.standard_normal((p, 4))
    P = build_preconditioner(X, spec, s, q, seed=seed)
    model = KernelModel(spec, Z, 0.1 * gen.standard_normal((p, c)))
    return spec, X, Y, Z, P, attach_centers(P, Z, spec), model


def test_ep4_step_zero_gradient():
    spec, X, Y, Z, P, PA, model = _setup()
    state = AuxiliaryState.empty(model.p, P.size_s, 2)
    X_m = X[:6]
    y_m = predict_auxiliary(model, state, P, X_m)
    g = ep4_step(model, state, PA, X_m, y_m, 0.7)
    assert not g.any()
    assert state.batches_seen == 1 and len(state.Z_tmp) == 1
    assert not state.alpha_tmp[0].any() and not state.alpha_s.any() and not state.h.any()


def test_ep4_step_one_point_hand_arithmetic():
    spec = KernelSpec("laplace", 1.0)
    X_s = np.array([[0.0], [2.0]])
    P = preconditioner_from_subsample(X_s, spec, 1)
    z, x, y, eta = np.array([[0.5]]), np.array([[1.0]]), np.array([[3.0]]), 0.4
    model = KernelModel(spec, z, np.zeros((1, 1)))
    PA = attach_centers(P, z, spec)
    state = AuxiliaryState.empty(1, 2, 1)
    ep4_step(model, state, PA, x, y, eta)
    k_sx = np.exp(-np.abs(X_s - 1.0))  # (2, 1)
    h1 = P.F.T @ k_sx @ (-y)
    assert state.alpha_tmp[0][0, 0] == pytest.approx(eta * 3.0)
    np.testing.assert_allclose(state.alpha_s, eta * P.F @ h1, rtol=1e-14)
    expected_h = -eta * np.exp(-0.5) * (-3.0) + eta * (np.exp(-np.abs(0.5 - X_s.T)) @ P.F @ h1)
    assert state.h[0, 0] == pytest.approx(expected_h[0, 0], rel=1e-13)


def test_period_matches_literal_update_from_scratch():
    spec, X, Y, Z, P, PA, model = _setup(seed=3, n=200, p=15)
    eta = 0.6
    probe = np.random.default_rng(9).standard_normal((25, 4))
    state = AuxiliaryState.empty(model.p, P.size_s, 2)
    blocks = []  # (X_i, g_i) recomputed independently

    def f_scratch(A):
        out = kernel_matrix(spec, A, Z) @ model.alpha
        for X_i, g_i in blocks:
            out -= eta * kernel_matrix(spec, A, X_i) @ g_i
            out += eta * kernel_matrix(spec, A, P.X_s) @ (P.F @ (P.F.T @ (kernel_matrix(spec, P.X_s, X_i) @ g_i)))
        return out

    for t in range(8):
        idx = np.arange(25 * t, 25 * t + 25)
        g_ref = f_scratch(X[idx]) - Y[idx]
        g = ep4_step(model, state, PA, X[idx], Y[idx], eta)
        assert np.linalg.norm(g - g_ref) <= 1e-10 * np.linalg.norm(g_ref)
        blocks.append((X[idx], g_ref))
        ref = f_scratch(probe)
        got = predict_auxiliary(model, state, P, probe)
        assert np.linalg.norm(got - ref) <= 1e-9 * np.linalg.norm(ref)
        # h carries the auxiliary change at the centers
        h_ref = f_scratch(Z) - kernel_matrix(spec, Z, Z) @ model.alpha
        np.testing.assert_allclose(state.h, h_ref, rtol=1e-9, atol=1e-12)


def test_nonfinite_gradient_raises():
    spec, X, Y, Z, P, PA, model = _setup()
    state = AuxiliaryState.empty(model.p, P.size_s, 2)
    y = Y[:4].copy()
    y[1, 0] = np.inf
    with pytest.raises(NumericError, match="batch 0"):
        ep4_step(model, state, PA, X[:4], y, 0.5)


def _cfg(**kw):
    base = dict(batch_size=10, nystrom_size=16, level=3, epochs=1, projection="exact")
    base.update(kw)
    return TrainConfig(**base)


def test_finalize_zero_h_leaves_model():
    spec, X, Y, Z, P, PA, model = _setup()
    before = model.alpha.copy()
    state = AuxiliaryState.empty(model.p, P.size_s, 2)
    state.batches_seen = 1
    finalize_period(model, state, Projector(Z, spec, _cfg()), 0.5)
    assert np.array_equal(model.alpha, before) and state.is_reset()


def test_finalize_empty_period_rejected():
    spec, X, Y, Z, P, PA, model = _setup()
    state = AuxiliaryState.empty(model.p, P.size_s, 2)
    with pytest.raises(InputError):
        finalize_period(model, state, Projector(Z, spec, _cfg()), 0.5)


@pytest.mark.parametrize("merge", ["derived", "literal"])
def test_finalize_merge_modes(merge):
    spec, X, Y, Z, P, PA, model = _setup(seed=2)
    state = AuxiliaryState.empty(model.p, P.size_s, 2)
    for t in range(3):
        ep4_step(model, state, PA, X[10 * t:10 * t + 10], Y[10 * t:10 * t + 10], 0.5)
    aux_at_Z = predict_auxiliary(model, state, P, Z)
    alpha0 = model.alpha.copy()
    h = state.h.copy()
    theta = finalize_period(model, state, Projector(Z, spec, _cfg(jitter=0.0)), 0.5, merge, 8.0)
    assert state.is_reset()
    np.testing.assert_allclose(kernel_matrix(spec, Z, Z) @ theta, h, rtol=1e-8, atol=1e-12)
    if merge == "derived":
        # evaluation preservation at the centers
        np.testing.assert_allclose(predict(model, Z), aux_at_Z, rtol=1e-8, atol=1e-10)
    else:
        np.testing.assert_allclose(model.alpha, alpha0 - 8.0 * 0.5 * theta, rtol=1e-12)


def test_projector_inexact_counts_flops():
    spec, X, Y, Z, P, PA, model = _setup()
    proj = Projector(Z, spec, _cfg(projection="inexact", ep2=EP2Config(epochs=2)))
    theta, flops = proj(np.ones((Z.shape[0], 2)))
    assert flops == proj.inner.last_flops > 0 and proj.T_ep2 == 2.0
    assert proj(np.zeros((Z.shape[0], 2)))[1] == 0
    exact = Projector(Z, spec, _cfg())
    assert exact.T_ep2 == pytest.approx((12 ** 3 // 3 + 2 * 144) / 144)


def _strip_time(rep):
    doc = rep.to_json()
    doc.pop("epoch_seconds")
    for rec in doc["trace"]:
        rec.pop("time")
    return doc


def test_deterministic_replay():
    ds, Z = blobs_problem()
    cfg = TrainConfig(batch_size=32, epochs=3, seed=5)
    a = train(ds.X, ds.Y(), Z, cfg, KernelSpec())
    b = train(ds.X, ds.Y(), Z, cfg, KernelSpec())
    assert _strip_time(a) == _strip_time(b)
    assert np.array_equal(a.model.alpha, b.model.alpha)
    c = train(ds.X, ds.Y(), Z, TrainConfig(batch_size=32, epochs=3, seed=6), KernelSpec())
    assert not np.array_equal(a.model.alpha, c.model.alpha)


def test_report_structure():
    ds, Z = blobs_problem()
    rep = train(ds.X, ds.Y(), Z, TrainConfig(batch_size=32, epochs=2, period=3, trace_every=2),
                KernelSpec())
    doc = json.loads(json.dumps(rep.to_json()))
    assert doc["schema_version"] == 1 and doc["period"] == 3
    assert len(rep.epoch_seconds) == 2
    times = [r["time"] for r in rep.trace]
    assert times == sorted(times)
    kinds = {r["kind"] for r in rep.trace}
    assert kinds == {"sample", "pre", "post"}
    # ten batches per epoch, period 3: projections after batches 3, 6, 9 and at the epoch end
    assert len(rep.cost.projections) == 8
    assert len(rep.projection_drops()) == 8 and len(rep.batch_flops) == 20


def test_reset_after_every_projection(monkeypatch):
    seen = []
    original = solver_mod.finalize_period

    def spy(model, state, *args, **kwargs):
        out = original(model, state, *args, **kwargs)
        seen.append(state.is_reset() and state.tmp_rows == 0)
        return out

    monkeypatch.setattr(solver_mod, "finalize_period", spy)
    ds, Z = blobs_problem()
    rep = train(ds.X, ds.Y(), Z, TrainConfig(batch_size=32, epochs=2), KernelSpec())
    assert seen and all(seen) and len(seen) == len(rep.cost.projections)


def test_cost_counter_matches_formula_with_short_batches():
    ds, Z = blobs_problem(n=250, p=30)
    cfg = TrainConfig(batch_size=40, nystrom_size=20, level=4, period=4, epochs=2)
    rep = train(ds.X, ds.Y(), Z, cfg, KernelSpec())
    assert any(b["m"] < 40 for b in rep.cost.batches)
    for b in rep.cost.batches:
        assert b["flops"] == flops_per_batch(b["m"], 30, 20, 4, b["offset"], tmp_batch_size=40)


def test_interpolation_task_reaches_low_mse():
    gen = np.random.default_rng(0)
    X = gen.standard_normal((200, 5))
    Y = np.sin(X[:, :1]) + 0.5 * X[:, 1:2]
    rep = train(X, Y, X, TrainConfig(batch_size=25, epochs=30, projection="exact"),
                KernelSpec("laplace", 2.0))
    mse = float(np.mean((predict(rep.model, X) - Y) ** 2))
    assert mse <= 1e-3


def test_divergence_halves_auto_lr():
    ds, Z = blobs_problem()
    rep = train(ds.X, ds.Y(), Z, TrainConfig(batch_size=32, epochs=2, lr_scale=40.0), KernelSpec())
    assert rep.lr_halvings >= 1
    assert np.all(np.isfinite(rep.model.alpha))


def test_divergence_with_fixed_lr_raises():
    ds, Z = blobs_problem()
    with pytest.raises(NumericError):
        train(ds.X, ds.Y(), Z, TrainConfig(batch_size=32, epochs=3, learning_rate=40.0),
              KernelSpec())


def test_single_precision_run():
    ds, Z = blobs_problem()
    rep = train(ds.X, ds.Y(), Z, TrainConfig(batch_size=32, epochs=2, precision="f32"),
                KernelSpec())
    assert rep.model.alpha.dtype == np.float32
    assert rep.trace[-1]["accuracy"] > 0.9


def test_train_rejects_shapes():
    ds, Z = blobs_problem()
    with pytest.raises(InputError):
        train(ds.X, ds.Y()[:-1], Z, TrainConfig(), KernelSpec())
    with pytest.raises(InputError):
        train(ds.X, ds.Y(), Z[:, :2], TrainConfig(), KernelSpec())
