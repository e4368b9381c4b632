import numpy as np
import pytest

from spcot import verify as V


def test_objective_at_zero_kl():
    assert V.sp_objective(1.0, 0.0, 3.0) == -1.5


def test_linear_rule_is_binary():
    np.testing.assert_array_equal(V.linear_sp_weight([0.1, 0.5, 0.9], 0.5), [1.0, 1.0, 0.0])


def test_floorless_boundary():
    from spcot.losses import self_paced_weight
    assert self_paced_weight(1.3, 1.3, 0.0) == 0.0


def test_theorem2_degenerate_cases():
    from spcot.losses import generalized_jsd_alpha
    p = np.array([[0.3, 0.7], [0.3, 0.7]])
    assert V.weighted_kl_sum(p, np.array([1.0, 1.0]), p[0]) == 0.0
    assert generalized_jsd_alpha(list(p), [0.5, 0.5]).item() == pytest.approx(0.0, abs=1e-15)
    # w = (1, eps): y* is close to p1 and the sum is close to eps * KL(p2 || p1)
    q = np.array([[0.8, 0.2], [0.3, 0.7]])
    eps = 1e-6
    w = np.array([1.0, eps])
    y = (w[:, None] * q).sum(0) / w.sum()
    kl21 = float(np.sum(q[1] * np.log(q[1] / q[0])))
    assert V.weighted_kl_sum(q, w, y) == pytest.approx(eps * kl21, rel=1e-4)


def test_pseudo_label_probe_equality_and_far_probe():
    p = np.array([[0.6, 0.4], [0.2, 0.8]])
    w = np.array([0.7, 0.4])
    y = (w[:, None] * p).sum(0) / w.sum()
    best = V.weighted_kl_sum(p, w, y)
    assert V.weighted_kl_sum(p, w, y.copy()) == best
    assert V.weighted_kl_sum(p, w, np.array([1 - 1e-9, 1e-9])) > best


@pytest.mark.parametrize("check", [V.check_theorem1, V.check_theorem2, V.check_bound_and_alpha])
def test_checks_pass_and_deterministic(check):
    a, b = check(3, 50), check(3, 50)
    assert a.passed and a == b


def test_pseudo_label_check():
    r = V.check_pseudo_label_optimality(1, 20, 200)
    assert r.passed and r.cases == 20
    with pytest.raises(ValueError):
        V.check_pseudo_label_optimality(1, 5, 50)


def test_cases_precondition():
    with pytest.raises(ValueError):
        V.check_theorem1(0, 0)
    with pytest.raises(ValueError):
        V.run_all(0, 0)


def test_gradient_check_and_injected_failure():
    ok = V.check_gradients(0)
    assert ok.passed and ok.max_error < 1e-4
    bad = V.check_gradients(0, flip_sign=True)
    assert not bad.passed


def test_gradient_components():
    errs = V.gradient_errors(1)
    assert errs["quadratic"] < 1e-10
    assert errs["spc_detached_weights"] == 0.0
    assert all(v < 1e-4 for v in errs.values())


def test_report_csv(tmp_path):
    results = [V.CheckResult("a", 3, 1e-12, 1e-9, True), V.CheckResult("b", 1, 0.5, 1e-4, False)]
    path = tmp_path / "verify.csv"
    V.write_report(results, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "name,cases,max_error,tolerance,passed"
    assert lines[2] == "b,1,0.5,0.0001,false"
