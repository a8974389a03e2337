"""Non-stationary correlated multi-armed bandit over recovery cost mixtures.

Each arm is a convex combination of recovery-cost hypotheses. Arm values are
tracked by a Kalman-style Gaussian update whose observation row is the arm
correlation column (clipped cosine similarity of the mixture weights), so
correlated arms share reward information. Process noise injected each pull
keeps the posterior tracking non-stationary rewards.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ArmSet:
    weights: np.ndarray   # (K, n_hypotheses), rows on the simplex
    mean: np.ndarray      # (K,)
    cov: np.ndarray       # (K, K)
    corr: np.ndarray      # (K, K), C_ij = max(0, cossim(w_i, w_j))
    q: float = 0.01       # process noise scale
    r_obs: float = 0.1    # observation noise scale


def _simplex_sample(rng, k, dim):
    """Uniform samples on the (dim-1)-simplex by sorted uniforms."""
    u = np.sort(rng.uniform(0.0, 1.0, size=(k, dim - 1)), axis=1)
    lo = np.concatenate([np.zeros((k, 1)), u], axis=1)
    hi = np.concatenate([u, np.ones((k, 1))], axis=1)
    return hi - lo


def _clipped_cossim(W):
    norms = np.linalg.norm(W, axis=1, keepdims=True)
    Wn = W / norms
    return np.maximum(Wn @ Wn.T, 0.0)


def arms_init(K=100, n_hypotheses=2, seed=0, q=0.01, r_obs=0.1) -> ArmSet:
    if K < 2:
        raise ValueError("need at least 2 arms")
    rng = np.random.default_rng(seed)
    W = _simplex_sample(rng, K, n_hypotheses)
    return ArmSet(weights=W, mean=np.zeros(K), cov=np.eye(K),
                  corr=_clipped_cossim(W), q=q, r_obs=r_obs)


def bandit_select(arms: ArmSet, rng: np.random.Generator) -> int:
    """Thompson sampling: draw from the value posterior, return the argmax."""
    cov = 0.5 * (arms.cov + arms.cov.T)
    # eigenvalue floor keeps the draw well defined after many updates
    vals, vecs = np.linalg.eigh(cov)
    vals = np.maximum(vals, 0.0)
    theta = arms.mean + vecs @ (np.sqrt(vals) * rng.standard_normal(len(vals)))
    return int(np.argmax(theta))


def bandit_update(arms: ArmSet, pulled: int, reward: float) -> ArmSet:
    """Scalar Kalman update through the pulled arm's correlation column,
    then process noise for non-stationarity. Mutates and returns arms."""
    if not np.isfinite(reward) or reward < 0:
        raise ValueError("reward must be finite and non-negative")
    c = arms.corr[:, pulled]
    S = arms.cov
    Sc = S @ c
    denom = float(c @ Sc) + arms.r_obs
    g = Sc / denom
    innovation = reward - arms.mean[pulled]
    arms.mean = arms.mean + g * innovation
    S = S - np.outer(g, Sc)
    S = 0.5 * (S + S.T)
    S = S + arms.q * arms.corr
    # PSD projection guard
    vals, vecs = np.linalg.eigh(S)
    if vals.min() < -1e-9:
        vals = np.maximum(vals, 0.0)
        S = vecs @ np.diag(vals) @ vecs.T
        S = 0.5 * (S + S.T)
    arms.cov = S
    return arms


def arm_snapshot(arms: ArmSet) -> dict:
    return {
        "mean": arms.mean.tolist(),
        "cov_diag": np.diag(arms.cov).tolist(),
    }
