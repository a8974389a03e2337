import numpy as np
import pytest

from trapmpc.gp import (GPHyper, LocalGP, N_IN, N_OUT,
                        input_stats_from_dataset)
from trapmpc.worlds import collect_random_dataset, make_task


def zero_nominal(x, u):
    return np.zeros(N_OUT)


def make_gp(points, targets, window=50):
    gp = LocalGP(window_size=window)
    for x, y in zip(points, targets):
        gp.add(x[:4], x[4:], y, zero_nominal)
    return gp


def rbf(a, b, ell, sf2):
    d = (np.asarray(a) - np.asarray(b)) / ell
    return sf2 * np.exp(-0.5 * np.sum(d ** 2))


# ---------------------------------------------------------------------------
# closed-form posterior oracles


def test_one_point_posterior_matches_closed_form():
    x0 = np.array([0.3, -0.2, 0.0, 0.0, 0.01, -0.02])
    y0 = np.array([0.5, -1.0, 0.25, 0.0])
    gp = make_gp([x0], [y0])
    q = np.array([0.1, 0.1, 0.0, 0.0, 0.0, 0.0])
    mean, var = gp.predict(q[:4][None, :], q[4:][None, :])
    ell, sf2, sn2 = 1.0, 1.0, 0.01  # default hypers
    k_qx = rbf(q, x0, ell, sf2)
    k_xx = rbf(x0, x0, ell, sf2)
    for head in range(N_OUT):
        m_ref = k_qx * y0[head] / (k_xx + sn2)
        v_ref = sf2 + sn2 - k_qx ** 2 / (k_xx + sn2)
        assert mean[0, head] == pytest.approx(m_ref, abs=1e-10)
        assert var[0, head] == pytest.approx(v_ref, abs=1e-10)


def test_two_point_posterior_matches_dense_solve():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((2, 6)) * 0.5
    Y = rng.standard_normal((2, N_OUT)) * 0.2
    gp = make_gp(list(X), list(Y))
    q = rng.standard_normal(6) * 0.5
    mean, var = gp.predict(q[:4][None, :], q[4:][None, :])
    sn2 = 0.01
    K = np.array([[rbf(a, b, 1.0, 1.0) for b in X] for a in X]) + sn2 * np.eye(2)
    ks = np.array([rbf(q, b, 1.0, 1.0) for b in X])
    for head in range(N_OUT):
        m_ref = ks @ np.linalg.solve(K, Y[:, head])
        v_ref = 1.0 + sn2 - ks @ np.linalg.solve(K, ks)
        assert mean[0, head] == pytest.approx(m_ref, abs=1e-10)
        assert var[0, head] == pytest.approx(v_ref, abs=1e-10)


def test_empty_window_predicts_prior():
    gp = LocalGP()
    mean, var = gp.predict(np.zeros((3, 4)), np.zeros((3, 2)))
    assert np.all(mean == 0.0)
    assert np.allclose(var, 1.0 + 0.01)


def test_targets_are_residuals_against_nominal():
    calls = []

    def nominal(x, u):
        calls.append((np.array(x), np.array(u)))
        return np.array([0.1, 0.2, 0.0, 0.0])

    gp = LocalGP()
    gp.add(np.zeros(4), np.zeros(2), np.array([1.0, 1.0, 0.0, 0.0]), nominal)
    assert np.allclose(gp.Yw[0], [0.9, 0.8, 0.0, 0.0])
    assert len(calls) == 1


# ---------------------------------------------------------------------------
# marginal-likelihood gradients vs central finite differences


def _fd_lml_grads(gp, head, h=1e-6):
    num = {}
    for name, arr, idx in (
            [("ell", gp.hyper.log_ell, (head, i)) for i in range(N_IN)]
            + [("sf2", gp.hyper.log_sf2, (head,)), ("sn2", gp.hyper.log_sn2, (head,))]):
        vals = []
        for sgn in (1.0, -1.0):
            arr[idx] += sgn * h
            vals.append(sgn * gp.log_marginal_likelihood(head))
            arr[idx] -= sgn * h
        num[(name, idx)] = sum(vals) / (2 * h)
    return num


def test_lml_gradients_match_fd_100_instances():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 7))
        X = rng.standard_normal((n, 6))
        Y = rng.standard_normal((n, N_OUT)) * 0.3
        gp = make_gp(list(X), list(Y))
        gp.hyper.log_ell += rng.uniform(-0.5, 0.5, size=gp.hyper.log_ell.shape)
        gp.hyper.log_sf2 += rng.uniform(-0.5, 0.5, size=N_OUT)
        gp.hyper.log_sn2 = np.log(np.exp(gp.hyper.log_sn2) + rng.uniform(0, 0.05, size=N_OUT))
        head = int(rng.integers(N_OUT))
        _, g_ell, g_sf2, g_sn2 = gp.nlml_and_grads(head)
        num = _fd_lml_grads(gp, head)
        ana = np.concatenate([g_ell, [g_sf2, g_sn2]])
        ref = np.array([num[("ell", (head, i))] for i in range(N_IN)]
                       + [num[("sf2", (head,))], num[("sn2", (head,))]])
        rel = np.linalg.norm(ana - ref) / max(np.linalg.norm(ref), 1e-8)
        worst = max(worst, rel)
    assert worst < 1e-4


def test_nlml_value_matches_log_marginal_likelihood():
    rng = np.random.default_rng(2)
    X = rng.standard_normal((5, 6))
    Y = rng.standard_normal((5, N_OUT)) * 0.2
    gp = make_gp(list(X), list(Y))
    for head in range(N_OUT):
        lml, *_ = gp.nlml_and_grads(head)
        assert lml == pytest.approx(gp.log_marginal_likelihood(head), abs=1e-10)


def test_fit_does_not_decrease_marginal_likelihood():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((8, 6))
    # smooth function of the inputs so there is structure to fit
    Y = np.stack([np.sin(X[:, 0]), np.cos(X[:, 1]), 0.1 * X[:, 2], 0.0 * X[:, 0]],
                 axis=1)
    gp = make_gp(list(X), list(Y))
    before = [gp.log_marginal_likelihood(h) for h in range(N_OUT)]
    gp.fit(iterations=10)
    after = [gp.log_marginal_likelihood(h) for h in range(N_OUT)]
    assert sum(after) >= sum(before) - 1e-6


# ---------------------------------------------------------------------------
# window management


def test_window_eviction_keeps_most_recent():
    gp = LocalGP(window_size=5)
    for i in range(8):
        x = np.full(4, float(i))
        gp.add(x, np.zeros(2), np.zeros(4), zero_nominal)
    assert len(gp) == 5
    # oldest remaining input corresponds to i=3
    assert gp.Xw[0][0] == pytest.approx(3.0)
    assert gp.Xw[-1][0] == pytest.approx(7.0)


def test_reset_clears_window_and_hypers():
    gp = LocalGP(window_size=5)
    gp.add(np.ones(4), np.zeros(2), np.ones(4), zero_nominal)
    gp.hyper.log_sf2 += 1.0
    gp.reset()
    assert len(gp) == 0
    assert np.all(gp.hyper.log_sf2 == GPHyper.default().log_sf2)


def test_fit_empty_window_raises():
    with pytest.raises(ValueError):
        LocalGP().fit()


def test_standardization_applied_on_add_and_query():
    mean = np.arange(6, dtype=float)
    scale = np.full(6, 2.0)
    gp = LocalGP(input_mean=mean, input_scale=scale)
    x = mean[:4] + 2.0
    u = mean[4:] + 2.0
    gp.add(x, u, np.zeros(4), zero_nominal)
    assert np.allclose(gp.Xw[0], 1.0)
    # querying the training point returns the training-point posterior
    m1, _ = gp.predict(x[None, :], u[None, :])
    gp2 = LocalGP()
    gp2.add(np.ones(4), np.ones(2), np.zeros(4), zero_nominal)
    m2, _ = gp2.predict(np.ones((1, 4)), np.ones((1, 2)))
    assert np.allclose(m1, m2, atol=1e-12)


def test_input_stats_constant_dims_get_unit_scale():
    ds = collect_random_dataset(make_task("freespace"), 5, 10, seed=0)
    mean, scale = input_stats_from_dataset(ds)
    assert mean.shape == (6,) and scale.shape == (6,)
    # reaction dims are identically zero in nominal data
    assert np.all(mean[2:4] == 0.0)
    assert np.all(scale[2:4] == 1.0)
    assert np.all(scale[:2] > 0.1)


def test_hyper_clamp_floors_noise():
    h = GPHyper.default()
    h.log_sn2[:] = -100.0
    h.clamp()
    assert np.all(h.log_sn2 >= np.log(1e-6) - 1e-12)
