import math

import numpy as np
import pytest

from spcot import data as D
from spcot import engine as E
from spcot import losses as L
from spcot import tensor as T
from spcot.model import forward, init
from spcot.schedules import pace_ceiling


@pytest.fixture(scope="module")
def ds():
    return D.generate(1, n=40, hw=16, labeled_ratio=0.1, n_test=6)


def small(**kw):
    base = dict(epochs=2, iters_per_epoch=3, n_labeled=2, n_unlabeled=3, warmup_epochs=1)
    base.update(kw)
    return E.TrainConfig(**base)


def test_zero_epochs_untouched(ds):
    ens, records = E.train(small(epochs=0), ds)
    fresh = init(0, 2, 2)
    assert records == []
    for a, b in zip(ens.students, fresh.students):
        assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)


def test_baseline_columns_zero(ds):
    _, records = E.train(small(enable_spc=False, enable_consistency=False), ds)
    assert len(records) == 2
    assert all(r["spc"] == 0.0 and r["reg"] == 0.0 for r in records)
    assert all(r["sup"] > 0 for r in records)


def test_records_finite_and_schedules(ds):
    _, records = E.train(small(epochs=3), ds)
    for r in records:
        assert all(math.isfinite(r[c]) for c in ("gamma", "alpha", "lr", "sup", "spc", "reg", "entropy", "dsc"))
    assert [r["epoch"] for r in records] == [0, 1, 2]
    assert records[0]["gamma"] == 0.2 and records[0]["alpha"] == 0.0


def test_deterministic(ds):
    _, a = E.train(small(), ds)
    _, b = E.train(small(), ds)
    assert a == b


def test_parallel_matches_serial(ds):
    _, a = E.train(small(K=3), ds)
    _, b = E.train(small(K=3, parallel_views=True), ds)
    assert a == b


def test_spc_needs_two_views(ds):
    with pytest.raises(ValueError):
        E.train(small(K=1), ds)
    _, rec = E.train(small(K=1, enable_spc=False), ds)
    assert len(rec) == 2


def test_nan_aborts(ds, monkeypatch):
    real = L.supervised_ce

    def poisoned(p, y):
        out = real(p, y)
        return out * T.Tensor(np.nan)

    monkeypatch.setattr(E.L, "supervised_ce", poisoned)
    with pytest.raises(E.TrainingAborted) as info:
        E.train(small(), ds)
    assert info.value.iteration == 0


def test_teachers_follow_ema_only(ds):
    cfg = small(epochs=1, iters_per_epoch=1, beta=0.5)
    ens0 = init(0, 2, 2)
    ens, _ = E.train(cfg, ds)
    for k in range(2):
        for name, p in ens.teachers[k].params.items():
            assert p.grad is None
            expected = 0.5 * ens0.teachers[k].params[name].data + 0.5 * ens.students[k].params[name].data
            np.testing.assert_allclose(p.data, expected, rtol=0, atol=1e-15)


def test_view_order_independent(ds):
    # phase-1 outputs do not depend on which view is stepped first
    cfg = small()
    (xs, ys), xu = D.sample_batch(ds, D.BatchSampler(ds, 0), 2, 3)

    def run(order):
        ens = init(0, 2, 2)
        views = [E._View(k, ens.students[k], ens.teachers[k], np.random.default_rng([0, 2, k])) for k in range(2)]
        for k in order:
            views[k].phase1(cfg, xs, ys, xu)
        _, grads, _ = E._spc_step(views, cfg, 0.5, 0.0)
        for k in order:
            views[k].phase2(cfg, grads[k], 1e-3)
        return [s.params["conv1.weight"].data.copy() for s in ens.students]

    for a, b in zip(run([0, 1]), run([1, 0])):
        np.testing.assert_array_equal(a, b)


def test_surrogate_gradient_matches_joint_loss(ds):
    # per-view surrogate gradients equal the gradient of the joint total loss
    cfg = small(augment=False)
    (xs, ys), xu = D.sample_batch(ds, D.BatchSampler(ds, 0), 2, 3)
    gamma, alpha = 0.7, 0.3

    ens = init(5, 2, 2)
    views = [E._View(k, ens.students[k], ens.teachers[k], np.random.default_rng([0, 2, k])) for k in range(2)]
    for v in views:
        v.phase1(cfg, xs, ys, xu)
    _, grads, _ = E._spc_step(views, cfg, gamma, alpha)
    for v in views:
        with v.tape:
            loss = v.sup * 0.5 + (cfg.lambda2 * 0.5) * v.reg + cfg.lambda1 * T.sum_(T.Tensor(grads[v.k]) * v.p_u)
        v.tape.backward(loss)
    surrogate = [{n: p.grad.copy() for n, p in s.params.items()} for s in ens.students]

    ens2 = init(5, 2, 2)
    joint = T.Tape()
    sups, regs, pus = [], [], []
    rngs = [np.random.default_rng([0, 2, k]) for k in range(2)]
    with joint:
        for k, s in enumerate(ens2.students):
            ru = rngs[k].integers(4, size=len(xu))
            probs = forward(s, np.concatenate([xs, E._rotate_each(xu, ru)]))
            p_s, s_u = T.rows(probs, 0, 2), T.rows(probs, 2, 5)
            with T.no_tape():
                t_pred = forward(ens2.teachers[k], xu).data
            regs.append(L.consistency_loss(t_pred, s_u, lambda a, ru=ru: E._rotate_each(a, ru)))
            pus.append(T.rot90_each(s_u, [-r for r in ru]))
            sups.append(L.supervised_ce(p_s, ys))
        spc = L.spc_loss(pus, gamma, alpha)[0]
        total = L.total_loss((sups[0] + sups[1]) * 0.5, spc, (regs[0] + regs[1]) * 0.5, cfg.lambda1, cfg.lambda2)
    for s in ens2.students:
        s.zero_grad()
    joint.backward(total)
    for k in range(2):
        for n, p in ens2.students[k].params.items():
            np.testing.assert_allclose(surrogate[k][n], p.grad, rtol=1e-10, atol=1e-14)


def test_adam_first_step():
    p = {"w": T.Tensor(np.zeros(3))}
    E.optimizer_step(p, {"w": np.full(3, 0.37)}, E.AdamState(), 1e-3)
    np.testing.assert_allclose(np.abs(p["w"].data), 1e-3, rtol=1e-6)


def test_adam_zero_grad_noop():
    p = {"w": T.Tensor(np.arange(3.0))}
    E.optimizer_step(p, {"w": np.zeros(3)}, E.AdamState(), 1e-2)
    np.testing.assert_array_equal(p["w"].data, np.arange(3.0))


def test_adam_deterministic():
    rng = np.random.default_rng(0)
    grads = [rng.normal(size=4) for _ in range(5)]
    outs = []
    for _ in range(2):
        p, st = {"w": T.Tensor(np.ones(4))}, E.AdamState()
        for g in grads:
            E.optimizer_step(p, {"w": g}, st, 1e-2)
        outs.append(p["w"].data)
    np.testing.assert_array_equal(*outs)


def test_evaluate_perfect_and_background(ds, monkeypatch):
    ens = init(0, 2, 2)
    onehot = ds.masks(ds.test)
    monkeypatch.setattr(E, "forward", lambda net, images: T.Tensor(onehot))
    assert E.evaluate(ens, ds) == (1.0, 0.0)
    bg = np.zeros_like(onehot)
    bg[:, 0] = 1.0
    monkeypatch.setattr(E, "forward", lambda net, images: T.Tensor(bg))
    d, h = E.evaluate(ens, ds)
    assert d == 0.0 and math.isnan(h)


def test_evaluate_single_view_equals_model(ds):
    ens = init(0, 2, 1)
    from spcot.metrics import dsc
    with T.no_tape():
        seg = forward(ens.teachers[0], ds.images[ds.test]).data.argmax(axis=1)
    expected = np.mean([dsc(s, g) for s, g in zip(seg, ds.labels[ds.test])])
    assert E.evaluate(ens, ds)[0] == pytest.approx(expected, abs=1e-15)


def test_weights_off_floor_at_ceiling(ds):
    cfg = small()
    ens = init(0, 2, 2)
    views = [E._View(k, ens.students[k], ens.teachers[k], np.random.default_rng([0, 2, k])) for k in range(2)]
    (xs, ys), xu = D.sample_batch(ds, D.BatchSampler(ds, 0), 2, 3)
    for v in views:
        v.phase1(cfg, xs, ys, xu)
    _, _, wmap = E._spc_step(views, cfg, pace_ceiling(2, 0.01), 0.0)
    assert np.all(wmap.w > 0.01)


def test_checkpoint_round_trip(tmp_path, ds):
    ens, _ = E.train(small(epochs=1), ds, checkpoint_dir=tmp_path)
    back = E.load_checkpoint(tmp_path / "checkpoint.spct")
    assert back.k == 2
    for a, b in zip(ens.teachers + ens.students, back.teachers + back.students):
        for k in a.params:
            np.testing.assert_array_equal(a.params[k].data, b.params[k].data)
    assert E.evaluate(ens, ds) == E.evaluate(back, ds)


def test_record_csv_round_trip_precision(tmp_path, ds):
    _, records = E.train(small(epochs=1), ds)
    path = tmp_path / "record.csv"
    E.write_record(records, path)
    import csv
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    assert rows[0].keys() == set(E.RECORD_COLUMNS)
    for c in E.RECORD_COLUMNS:
        assert float(rows[0][c]) == records[0][c]


def test_large_alpha_sharpens_predictions(ds):
    # alpha rewards low per-view entropy; at 0.5 the effect shows within a few epochs
    ent = {}
    for a in (0.0, 0.5):
        _, records = E.train(small(epochs=8, iters_per_epoch=10, alpha_max=a, alpha_ramp_epochs=1), ds)
        ent[a] = records[-1]["entropy"]
    assert ent[0.5] < ent[0.0] - 0.05
