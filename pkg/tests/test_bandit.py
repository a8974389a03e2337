import numpy as np
import pytest

from trapmpc.bandit import (ArmSet, arm_snapshot, arms_init, bandit_select,
                            bandit_update)


def independent_arms(k=3, q=0.01, r_obs=0.1):
    """Arms with orthogonal mixtures: correlation collapses to the identity."""
    return ArmSet(weights=np.eye(k), mean=np.zeros(k), cov=np.eye(k),
                  corr=np.eye(k), q=q, r_obs=r_obs)


# ---------------------------------------------------------------------------
# initialization


def test_arms_init_rows_on_simplex():
    arms = arms_init(K=100, n_hypotheses=2, seed=0)
    assert arms.weights.shape == (100, 2)
    assert np.all(arms.weights >= 0.0)
    assert np.allclose(arms.weights.sum(axis=1), 1.0, atol=1e-12)


def test_arms_init_correlation_structure():
    arms = arms_init(K=50, n_hypotheses=3, seed=1)
    C = arms.corr
    assert np.allclose(np.diag(C), 1.0, atol=1e-12)
    assert np.allclose(C, C.T, atol=0)
    assert np.all(C >= 0.0) and np.all(C <= 1.0 + 1e-12)


def test_arms_init_requires_two_arms():
    with pytest.raises(ValueError):
        arms_init(K=1)


def test_arms_init_seed_deterministic():
    a = arms_init(K=20, seed=7)
    b = arms_init(K=20, seed=7)
    assert np.array_equal(a.weights, b.weights)


# ---------------------------------------------------------------------------
# update vs scalar Kalman oracle (identity correlation)


def test_update_matches_scalar_kalman_oracle():
    q, r = 0.02, 0.1
    arms = independent_arms(k=3, q=q, r_obs=r)
    mean0 = arms.mean.copy()
    s0 = np.diag(arms.cov).copy()
    reward = 0.7
    bandit_update(arms, 1, reward)
    # scalar Kalman filter on arm 1; other arms touched only by process noise
    k_gain = s0[1] / (s0[1] + r)
    m_ref = mean0[1] + k_gain * (reward - mean0[1])
    s_ref = s0[1] - k_gain * s0[1] + q
    assert arms.mean[1] == pytest.approx(m_ref, abs=1e-10)
    assert arms.cov[1, 1] == pytest.approx(s_ref, abs=1e-10)
    for i in (0, 2):
        assert arms.mean[i] == pytest.approx(mean0[i], abs=1e-10)
        assert arms.cov[i, i] == pytest.approx(s0[i] + q, abs=1e-10)
    # off-diagonals stay zero for independent arms
    assert abs(arms.cov[0, 1]) < 1e-10 and abs(arms.cov[1, 2]) < 1e-10


def test_repeated_updates_match_scalar_kalman_recursion():
    q, r = 0.01, 0.2
    arms = independent_arms(k=2, q=q, r_obs=r)
    m_ref, s_ref = 0.0, 1.0
    rng = np.random.default_rng(0)
    for _ in range(50):
        reward = float(rng.uniform(0, 1))
        bandit_update(arms, 0, reward)
        k_gain = s_ref / (s_ref + r)
        m_ref = m_ref + k_gain * (reward - m_ref)
        s_ref = s_ref - k_gain * s_ref + q
        assert arms.mean[0] == pytest.approx(m_ref, abs=1e-10)
        assert arms.cov[0, 0] == pytest.approx(s_ref, abs=1e-10)


def test_correlated_arms_share_information():
    W = np.array([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0]])
    Wn = W / np.linalg.norm(W, axis=1, keepdims=True)
    corr = np.maximum(Wn @ Wn.T, 0.0)
    arms = ArmSet(weights=W, mean=np.zeros(3), cov=np.eye(3), corr=corr,
                  q=0.0, r_obs=0.1)
    bandit_update(arms, 0, 1.0)
    # the nearly parallel arm moves almost as much; the orthogonal arm barely
    assert arms.mean[1] > 0.8 * arms.mean[0]
    assert abs(arms.mean[2]) < 0.2 * arms.mean[0]


def test_update_rejects_bad_rewards():
    arms = independent_arms()
    with pytest.raises(ValueError):
        bandit_update(arms, 0, -0.5)
    with pytest.raises(ValueError):
        bandit_update(arms, 0, float("nan"))


def test_covariance_stays_symmetric_psd():
    arms = arms_init(K=30, seed=3)
    rng = np.random.default_rng(4)
    for _ in range(200):
        bandit_update(arms, int(rng.integers(30)), float(rng.uniform(0, 2)))
    assert np.allclose(arms.cov, arms.cov.T, atol=1e-12)
    assert np.linalg.eigvalsh(arms.cov).min() > -1e-9


# ---------------------------------------------------------------------------
# Thompson sampling behavior


def _pull_loop(arm_values, n_pulls, seed, q=0.01, r_obs=0.1, switch_at=None,
               switched_values=None):
    arms = independent_arms(k=len(arm_values), q=q, r_obs=r_obs)
    rng = np.random.default_rng(seed)
    pulls = []
    vals = np.array(arm_values, dtype=float)
    for t in range(n_pulls):
        if switch_at is not None and t == switch_at:
            vals = np.array(switched_values, dtype=float)
        i = bandit_select(arms, rng)
        reward = float(np.clip(vals[i] + 0.05 * rng.standard_normal(), 0.0, None))
        bandit_update(arms, i, reward)
        pulls.append(i)
    return np.array(pulls)


def test_stationary_best_arm_dominates():
    pulls = _pull_loop([0.2, 0.5, 0.9], n_pulls=300, seed=0)
    frac = np.mean(pulls[150:] == 2)
    assert frac > 0.6


def test_nonstationary_switch_is_tracked():
    pulls = _pull_loop([0.9, 0.2, 0.2], n_pulls=500, seed=1,
                       switch_at=250, switched_values=[0.2, 0.2, 0.9])
    assert np.mean(pulls[:250] == 0) > 0.5
    assert np.mean(pulls[420:] == 2) > 0.5


def test_select_returns_valid_index():
    arms = arms_init(K=10, seed=5)
    rng = np.random.default_rng(6)
    for _ in range(20):
        assert 0 <= bandit_select(arms, rng) < 10


def test_arm_snapshot_fields():
    arms = arms_init(K=5, seed=0)
    snap = arm_snapshot(arms)
    assert len(snap["mean"]) == 5 and len(snap["cov_diag"]) == 5
