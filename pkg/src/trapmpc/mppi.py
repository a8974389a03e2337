"""Sampling-based low-level MPC: multi-rollout path-integral control.

Perturbed control sequences are rolled out through the model (several times
when the model is stochastic), costs are averaged across rollouts, and the
plan is updated by a softmax-weighted mix of the perturbations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class MppiParams:
    n_samples: int = 500
    horizon: int = 10
    n_rollouts: int = 10
    temperature: float = 0.01
    u_nominal: np.ndarray = field(default_factory=lambda: np.zeros(2))
    noise_mu: np.ndarray = field(default_factory=lambda: np.zeros(2))
    noise_sigma: np.ndarray = field(default_factory=lambda: np.diag([0.2, 0.2]))
    terminal_multiplier: float = 50.0
    u_min: float = -1.0
    u_max: float = 1.0

    def __post_init__(self):
        self.u_nominal = np.asarray(self.u_nominal, dtype=float)
        self.noise_mu = np.asarray(self.noise_mu, dtype=float)
        self.noise_sigma = np.atleast_2d(np.asarray(self.noise_sigma, dtype=float))
        if self.n_samples < 1 or self.horizon < 1 or self.n_rollouts < 1:
            raise ValueError("n_samples, horizon, n_rollouts must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass
class ControlPlan:
    U: np.ndarray                      # (horizon, n_u)
    sample_costs: np.ndarray = None    # diagnostics, (n_samples,)

    @classmethod
    def initial(cls, params: MppiParams) -> "ControlPlan":
        return cls(U=np.tile(params.u_nominal, (params.horizon, 1)).astype(float))

    def min_cost(self):
        return float(np.min(self.sample_costs)) if self.sample_costs is not None else np.nan

    def effective_samples(self, weights=None):
        return None


def _is_stochastic(model) -> bool:
    return bool(getattr(model, "stochastic", False))


def mppi_plan(model, running_cost, terminal_state_cost, x0, plan: ControlPlan,
              params: MppiParams, rng: np.random.Generator) -> ControlPlan:
    """One planning iteration; returns the updated control plan.

    model(states, controls) maps an (N, n_x) state batch and (N, n_u)
    control batch to next states. running_cost(states, controls) >= 0 is the
    stage cost at the post-step state; terminal_state_cost(states) is the
    state-only cost receiving the extra terminal weighting.
    """
    N, H = params.n_samples, params.horizon
    n_u = params.u_nominal.shape[0]
    U_prev = np.clip(plan.U, params.u_min, params.u_max)
    sigma = params.noise_sigma
    if np.allclose(sigma, 0.0):
        eps = np.tile(params.noise_mu, (N, H, 1))
    else:
        L = np.linalg.cholesky(sigma)
        eps = params.noise_mu + rng.standard_normal((N, H, n_u)) @ L.T
    cand = np.clip(U_prev[None, :, :] + eps, params.u_min, params.u_max)

    M = params.n_rollouts if _is_stochastic(model) else 1
    S = np.zeros(N)
    for _ in range(M):
        x = np.tile(np.asarray(x0, dtype=float), (N, 1))
        total = np.zeros(N)
        for t in range(H):
            u = cand[:, t, :]
            x = model(x, u)
            total += running_cost(x, u)
        total += (params.terminal_multiplier - 1.0) * terminal_state_cost(x)
        S += total
    S /= M

    finite = np.isfinite(S)
    if not finite.any():
        raise FloatingPointError("all MPPI sample costs are non-finite")
    S = np.where(finite, S, np.inf)
    w = np.exp(-(S - S[finite].min()) / params.temperature)
    w[~finite] = 0.0
    w /= w.sum()
    U = np.clip(U_prev + np.einsum("n,nhu->hu", w, eps), params.u_min, params.u_max)
    return ControlPlan(U=U, sample_costs=S)


def plan_shift(plan: ControlPlan, u_nominal) -> ControlPlan:
    """Receding-horizon shift: drop the executed row, append the nominal control."""
    U = np.vstack([plan.U[1:], np.asarray(u_nominal, dtype=float)[None, :]])
    return ControlPlan(U=U, sample_costs=plan.sample_costs)
