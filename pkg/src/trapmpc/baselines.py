"""Comparison controllers sharing the planner / local-model substrate.

Keys: "nonadaptive" (MPPI on the nominal model), "adaptive-mpcpp" (mode
pinned to non-nominal, GP-mixed model, no recovery), "tampc-e0" (no error
dynamics), "tampc-randrec" (uniform random recovery actions), "apf-vo"
(sampled potential field with virtual obstacles).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .controller import (NominalModel, TampcController, TampcParams,
                         entering_trap)
from .mppi import ControlPlan, MppiParams, mppi_plan, plan_shift
from .worlds import Action, PlanarState, WorldSpec, goal_state_cost_batch, control_cost_batch


class NonAdaptiveController:
    """Plain sampling MPC on the nominal model with the goal cost."""

    def __init__(self, world: WorldSpec, model: NominalModel,
                 mppi_params: MppiParams = None, seed: int = 0):
        self.world = world
        self.model = model
        self.params = mppi_params or MppiParams()
        self.rng = np.random.default_rng(seed)
        self.plan = ControlPlan.initial(self.params)
        self.log: list = []
        self.t = 0

    def act(self, obs: PlanarState) -> Action:
        bound = self.world.action_bound

        def f(states, u_norm):
            return states + self.model.predict(states, u_norm * bound)

        def running(states, u_norm):
            return (goal_state_cost_batch(self.world, states[:, :2])
                    + control_cost_batch(u_norm * bound))

        def terminal(states):
            return goal_state_cost_batch(self.world, states[:, :2])

        self.plan = mppi_plan(f, running, terminal, obs.vec(), self.plan,
                              self.params, self.rng)
        u = self.plan.U[0] * bound
        self.log.append({"t": self.t, "x": obs.vec().tolist(), "u": u.tolist(),
                         "mode": "NOMINAL", "mpc_min_cost": self.plan.min_cost()})
        self.plan = plan_shift(self.plan, self.params.u_nominal)
        self.t += 1
        return Action(u.copy())


@dataclass
class ApfVoParams:
    ball_radius: float = 0.05
    ball_gain: float = 1.0
    n_action_samples: int = 5000
    dist_floor: float = 1e-3
    n_d: int = 5
    upsilon: float = 0.6


class ApfVoController:
    """Potential-field descent with virtual obstacles at detected minima.

    The gradient step is approximated by sampling single-step actions,
    pushing each through the nominal model, and picking the action whose
    predicted next state minimizes the potential.
    """

    def __init__(self, world: WorldSpec, model: NominalModel,
                 params: ApfVoParams = None, seed: int = 0):
        self.world = world
        self.model = model
        self.params = params or ApfVoParams()
        self.rng = np.random.default_rng(seed)
        self.balls: list = []          # (center, radius, gain)
        self.v_bar = world.action_bound * np.sqrt(2)
        self.window: list = []         # positions since last ball added
        self._prev_pos = None
        self.log: list = []
        self.t = 0

    def _potential(self, pos):
        c = goal_state_cost_batch(self.world, pos)
        for center, radius, gain in self.balls:
            d = np.maximum(np.linalg.norm(pos - center, axis=1) - radius,
                           self.params.dist_floor)
            c = c + gain / d ** 2
        return c

    def act(self, obs: PlanarState) -> Action:
        p = self.params
        if self._prev_pos is not None:
            self.v_bar = max(self.v_bar, float(np.linalg.norm(obs.pos - self._prev_pos)))
        self.window.append(obs.pos.copy())
        if (len(self.window) > p.n_d
                and entering_trap(self.window, self.v_bar, p.n_d, p.upsilon)):
            self.balls.append((obs.pos.copy(), p.ball_radius, p.ball_gain))
            self.window = [obs.pos.copy()]

        bound = self.world.action_bound
        U = self.rng.uniform(-bound, bound, size=(p.n_action_samples, 2))
        X = np.tile(obs.vec(), (p.n_action_samples, 1))
        nxt = obs.vec() + self.model.predict(X, U)
        scores = self._potential(nxt[:, :2])
        u = U[int(np.argmin(scores))]
        self.log.append({"t": self.t, "x": obs.vec().tolist(), "u": u.tolist(),
                         "mode": "APF", "n_balls": len(self.balls)})
        self._prev_pos = obs.pos.copy()
        self.t += 1
        return Action(u.copy())


CONTROLLER_KEYS = ("tampc", "tampc-e0", "tampc-randrec", "nonadaptive",
                   "adaptive-mpcpp", "apf-vo")


def make_controller(key: str, world: WorldSpec, model: NominalModel, seed: int = 0,
                    tampc_params: TampcParams = None, mppi_params: MppiParams = None,
                    apf_params: ApfVoParams = None):
    if key == "tampc":
        return TampcController(world, model, tampc_params, mppi_params, seed=seed)
    if key == "tampc-e0":
        return TampcController(world, model, tampc_params, mppi_params, seed=seed,
                               use_gp=False)
    if key == "tampc-randrec":
        return TampcController(world, model, tampc_params, mppi_params, seed=seed,
                               random_recovery=True)
    if key == "adaptive-mpcpp":
        return TampcController(world, model, tampc_params, mppi_params, seed=seed,
                               pinned_nonnominal=True)
    if key == "nonadaptive":
        return NonAdaptiveController(world, model, mppi_params, seed=seed)
    if key == "apf-vo":
        return ApfVoController(world, model, apf_params, seed=seed)
    raise KeyError(f"unknown controller key: {key}")
