"""Trap-aware high-level controller.

Runs a mode machine over NOMINAL / NONNOMINAL / RECOVERY:

* NOMINAL: plan on the learned nominal model toward the goal, annealing the
  trap-avoidance cost and tracking the fastest observed nominal speed.
* NONNOMINAL: prediction error exceeded tolerance; mix a locally fitted GP
  residual into the model and keep exploiting until progress stalls.
* RECOVERY: a trap was detected; abandon the goal cost and minimize a
  bandit-selected mixture of return-to-nominal and return-to-fast-motion
  costs until movement converges away from the trap.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import bandit as mab
from .gp import LocalGP
from .mppi import ControlPlan, MppiParams, mppi_plan, plan_shift
from .worlds import (Action, PlanarState, WorldSpec, control_cost_batch,
                     goal_state_cost_batch)


class Mode(enum.Enum):
    NOMINAL = "NOMINAL"
    NONNOMINAL = "NONNOMINAL"
    RECOVERY = "RECOVERY"


@dataclass
class TampcParams:
    gamma: float = 0.9            # trap-cost annealing rate
    omega: float = 2000.0         # recovery cost weight (selectivity)
    eps_nominal: float = 12.3     # nominal error tolerance (often recalibrated)
    upsilon: float = 0.6          # trap tolerance
    n_d: int = 5                  # min dynamics window
    n_n: int = 3                  # nominal window (hysteresis)
    n_mab: int = 3                # steps per bandit arm pull
    n_arms: int = 100
    n_recov_max: int = 20
    n_local: int = 50
    converged_scale: float = 0.05  # converged threshold = scale * upsilon
    moved_scale: float = 1.0       # away threshold multiplier
    n_fastest: int = 5
    n_nom_buffer: int = 5
    trap_dist_floor: float = 1e-3
    lambda_floor: float = 1e-9
    recovery_horizon: int = 5
    bandit_q: float = 0.01
    bandit_r: float = 0.1

    def __post_init__(self):
        if not (0 < self.gamma < 1):
            raise ValueError("gamma must be in (0,1)")
        if not (0 < self.upsilon <= 1):
            raise ValueError("upsilon must be in (0,1]")


# ---------------------------------------------------------------------------
# Pure decision functions


def nominal_score(dx, prediction, E) -> float:
    """||(dx - prediction) / E||_2 with componentwise division."""
    E = np.asarray(E, dtype=float)
    return float(np.linalg.norm((np.asarray(dx) - np.asarray(prediction)) / E))


def is_nominal(dx, prediction, E, eps) -> bool:
    return nominal_score(dx, prediction, E) <= eps


def entering_trap(positions, v_bar, n_d, upsilon) -> bool:
    """True iff average progress from some window start is below the
    tolerated fraction of the nominal speed.

    positions: sequence x_{t0}..x_t of 2-vectors since entering non-nominal
    dynamics (or since the last recovery ended).
    """
    t = len(positions) - 1
    x_t = np.asarray(positions[-1], dtype=float)
    for a in range(0, t - n_d + 1):
        d = np.linalg.norm(x_t - np.asarray(positions[a], dtype=float))
        if d / (t - a) < upsilon * v_bar:
            return True
    return False


def recovered(positions, v_bar, params: TampcParams) -> bool:
    """positions: x_0..x_t since recovery start."""
    t = len(positions) - 1
    if t < params.n_d:
        return False
    if t > params.n_recov_max:
        return True
    x_t = np.asarray(positions[-1], dtype=float)
    conv = (np.linalg.norm(x_t - np.asarray(positions[t - params.n_d]))
            / params.n_d < params.converged_scale * params.upsilon * v_bar)
    away = np.linalg.norm(x_t - np.asarray(positions[0])) > params.moved_scale * v_bar
    return bool(conv and away)


def expand_trap_set(history) -> int:
    """Index of the transition with the lowest actual/expected movement ratio.

    history: list of (x_a, u_a, x_next, x_hat_next) with 2-vector positions.
    Ties go to the earliest; if every expected movement is zero the most
    recent transition is chosen.
    """
    best_i, best_r = None, np.inf
    for i, (xa, _, xn, xh) in enumerate(history):
        expected = np.linalg.norm(np.asarray(xh) - np.asarray(xa))
        if expected <= 0:
            continue
        actual = np.linalg.norm(np.asarray(xn) - np.asarray(xa))
        r = actual / expected
        if r < best_r:
            best_i, best_r = i, r
    if best_i is None:
        if not history:
            raise ValueError("empty trap-expansion history")
        return len(history) - 1
    return best_i


def _cossim_clipped(u, u_ref):
    """max(0, cossim) of a batch of controls against one reference."""
    u = np.atleast_2d(u)
    nr = np.linalg.norm(u_ref)
    if nr == 0:
        return np.zeros(len(u))
    nu = np.linalg.norm(u, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        sim = (u @ u_ref) / (nu * nr)
    sim[nu == 0] = 0.0
    return np.maximum(sim, 0.0)


def trap_cost(traps, pos, u, dist_floor=1e-3):
    """Sum over trap pairs of control similarity / squared distance.

    pos is (N, 2) or (2,), u is the matching control batch. Distances are
    floored so revisiting a trap exactly stays finite.
    """
    pos = np.atleast_2d(np.asarray(pos, dtype=float))
    u = np.atleast_2d(np.asarray(u, dtype=float))
    total = np.zeros(len(pos))
    for tp, tu in traps:
        sim = _cossim_clipped(u, np.asarray(tu, dtype=float))
        d2 = np.maximum(np.sum((pos - np.asarray(tp)) ** 2, axis=1), dist_floor ** 2)
        total += sim / d2
    return total if total.shape[0] > 1 else float(total[0])


def recovery_cost(pos, state_set):
    """Squared distance to the nearest member of the state set."""
    if len(state_set) == 0:
        raise ValueError("recovery cost needs a nonempty state set")
    pos = np.atleast_2d(np.asarray(pos, dtype=float))
    S = np.asarray(state_set, dtype=float).reshape(-1, 2)
    d2 = np.min(np.sum((pos[:, None, :] - S[None, :, :]) ** 2, axis=2), axis=1)
    return d2 if d2.shape[0] > 1 else float(d2[0])


# ---------------------------------------------------------------------------
# Nominal model bundle


@dataclass
class NominalModel:
    """Learned nominal predictor plus the statistics the controller needs."""
    predict: callable                 # (X, U) batch -> DX batch
    error_per_dim: np.ndarray         # E, componentwise > 0
    eps_nominal: float                # calibrated Eq-style threshold
    gp_input_mean: np.ndarray = None
    gp_input_scale: np.ndarray = None

    def predict_one(self, x_vec, u):
        return self.predict(np.asarray(x_vec, float)[None, :],
                            np.asarray(u, float)[None, :])[0]


class TampcController:
    """One trial's controller; call act(observation) each control step."""

    def __init__(self, world: WorldSpec, model: NominalModel,
                 params: TampcParams = None, mppi_params: MppiParams = None,
                 seed: int = 0, use_gp: bool = True,
                 pinned_nonnominal: bool = False, random_recovery: bool = False):
        self.world = world
        self.model = model
        self.params = params or TampcParams()
        self.mppi_exploit = mppi_params or MppiParams()
        p = self.mppi_exploit
        self.mppi_recovery = MppiParams(
            n_samples=p.n_samples, horizon=self.params.recovery_horizon,
            n_rollouts=p.n_rollouts, temperature=p.temperature,
            u_nominal=p.u_nominal, noise_mu=p.noise_mu, noise_sigma=p.noise_sigma,
            terminal_multiplier=1.0, u_min=p.u_min, u_max=p.u_max)
        self.use_gp = use_gp
        self.pinned_nonnominal = pinned_nonnominal
        self.random_recovery = random_recovery
        self.rng = np.random.default_rng(seed)

        self.mode = Mode.NONNOMINAL if pinned_nonnominal else Mode.NOMINAL
        self.t = 0
        self.lambda_ = 1.0
        self.v_bar = world.action_bound * np.sqrt(2)  # cold start: max action step
        self.traps: list = []
        self.gp = LocalGP(window_size=self.params.n_local,
                          input_mean=model.gp_input_mean,
                          input_scale=model.gp_input_scale)
        self.arms = mab.arms_init(self.params.n_arms, seed=int(self.rng.integers(2 ** 31)),
                                  q=self.params.bandit_q, r_obs=self.params.bandit_r)
        self.nu = np.zeros(2)
        self.current_arm = None
        self.steps_since_pull = 0
        self.x_nom: list = []          # recent nominal positions (subsampled)
        self._nom_count = 0
        self.fastest: list = []        # (movement, position) since entering non-nominal
        self.recovery_positions: list = []
        self.window_positions: list = []  # positions since t0 (trap detection window)
        self.window_history: list = []    # (x, u, x_next, x_hat_next) since t0
        self.all_positions: list = []     # every observed position
        self.nominal_flags: list = []
        self._viol_streak = 0
        self.plan = ControlPlan.initial(self.mppi_exploit)
        self._prev = None              # (obs, u_phys, u_norm, x_hat_next)
        self.log: list = []

    # -- model closures ------------------------------------------------------

    def _bound(self):
        return self.world.action_bound

    def _model_batch(self, mixed: bool):
        """MPC model over normalized controls; state batches are 4-vectors."""
        bound = self._bound()

        def f(states, u_norm):
            u_phys = u_norm * bound
            dx = self.model.predict(states, u_phys)
            if mixed and self.use_gp and len(self.gp):
                dx = dx + self.gp.predict_mean(states, u_phys)
            return states + dx

        return f

    def _model_mean_one(self, x_vec, u_phys, mixed: bool):
        dx = self.model.predict_one(x_vec, u_phys)
        if mixed and self.use_gp and len(self.gp):
            dx = dx + self.gp.predict_mean(x_vec[None, :], np.asarray(u_phys)[None, :])[0]
        return x_vec + dx

    # -- cost closures -------------------------------------------------------

    def _exploit_costs(self):
        bound = self._bound()
        traps = self.traps
        lam = self.lambda_
        floor = self.params.trap_dist_floor
        world = self.world

        def running(states, u_norm):
            u_phys = u_norm * bound
            pos = states[:, :2]
            c = goal_state_cost_batch(world, pos) + control_cost_batch(u_phys)
            if traps and lam > 0:
                c = c + lam * np.atleast_1d(trap_cost(traps, pos, u_phys, floor))
            return c

        def terminal(states):
            return goal_state_cost_batch(world, states[:, :2])

        return running, terminal

    def _recovery_targets(self, members, anchor):
        """Drop members the controller is already at; returning to a state
        closer than the moved-away radius is a no-op recovery."""
        r = self.params.moved_scale * self.v_bar
        return [m for m in members if np.linalg.norm(np.asarray(m) - anchor) > r]

    def _recovery_costs(self):
        omega = self.params.omega
        nu = self.nu
        anchor = (self.recovery_positions[0] if self.recovery_positions
                  else self.world.start.pos)
        nom_set = (self._recovery_targets(self.x_nom, anchor)
                   or [self.world.start.pos])
        fast_set = (self._recovery_targets([p for _, p in self.fastest], anchor)
                    or nom_set)

        def running(states, u_norm):
            pos = states[:, :2]
            c = np.zeros(len(pos))
            if nu[0] > 0:
                c = c + nu[0] * np.atleast_1d(recovery_cost(pos, nom_set))
            if nu[1] > 0:
                c = c + nu[1] * np.atleast_1d(recovery_cost(pos, fast_set))
            return omega * c

        def terminal(states):
            return running(states, np.zeros((len(states), 2)))

        return running, terminal

    # -- mode machine ---------------------------------------------------------

    def _mark_window_start(self):
        self.window_positions = []
        self.window_history = []
        self.fastest = []

    def _process_transition(self, obs: PlanarState):
        prev_obs, u_phys, _, x_hat = self._prev
        self.all_positions.append(obs.pos.copy())
        x_prev = prev_obs.vec()
        x_now = obs.vec()
        dx = x_now - x_prev
        pred = self.model.predict_one(x_prev, u_phys)
        score = nominal_score(dx, pred, self.model.error_per_dim)
        nominal_now = score <= self.model.eps_nominal
        self.nominal_flags.append(nominal_now)
        n = (len(self.nominal_flags) >= self.params.n_n
             and all(self.nominal_flags[-self.params.n_n:]))
        if nominal_now:
            # buffer states whose dynamics matched the nominal model in any
            # mode — these are the places worth returning to.  Subsample so
            # the buffer spans the recent path instead of five nearly
            # identical positions; the counter resets on entering non-nominal
            # dynamics so the first free state after a stall is kept.
            self._nom_count += 1
            if self._nom_count % self.params.n_d == 1:
                self.x_nom.append(obs.pos.copy())
                if len(self.x_nom) > self.params.n_nom_buffer:
                    self.x_nom.pop(0)
        rec = {"t": self.t, "x": x_prev.tolist(), "u": u_phys.tolist(),
               "dx": dx.tolist(), "score": score, "mode": self.mode.value,
               "lambda": self.lambda_, "v_bar": self.v_bar,
               "n_traps": len(self.traps), "arm": self.current_arm,
               "nu": self.nu.tolist(), "reward": None,
               "mpc_min_cost": self.plan.min_cost()}

        if self.mode is Mode.NOMINAL:
            if nominal_now:
                self._viol_streak = 0
                self.lambda_ *= self.params.gamma
                if len(self.all_positions) > self.params.n_d:
                    back = self.all_positions[-1 - self.params.n_d]
                    speed = np.linalg.norm(obs.pos - np.asarray(back)) / self.params.n_d
                    self.v_bar = max(self.v_bar, speed)
            else:
                self._viol_streak += 1
                if self._viol_streak >= self.params.n_n:
                    self.mode = Mode.NONNOMINAL
                    self._viol_streak = 0
                    self._nom_count = 0
                    self._mark_window_start()
                    self.window_positions.append(prev_obs.pos.copy())
                    self.window_positions.append(obs.pos.copy())
                    self.window_history.append((prev_obs.pos.copy(), u_phys.copy(),
                                                obs.pos.copy(), x_hat[:2].copy()))
                    if self.use_gp:
                        self.gp.reset()
                        self.gp.add(x_prev, u_phys, dx, self.model.predict_one)
        else:
            if self.use_gp:
                self.gp.add(x_prev, u_phys, dx, self.model.predict_one)
                self.gp.fit(iterations=15)
            movement = np.linalg.norm(obs.pos - prev_obs.pos)
            self.fastest.append((movement, prev_obs.pos.copy()))
            self.fastest.sort(key=lambda mp: -mp[0])
            del self.fastest[self.params.n_fastest:]
            self.window_positions.append(obs.pos.copy())
            self.window_history.append((prev_obs.pos.copy(), u_phys.copy(),
                                        obs.pos.copy(), x_hat[:2].copy()))

            if not self.pinned_nonnominal:
                if self.mode is Mode.NONNOMINAL:
                    if (len(self.window_positions) > self.params.n_d
                            and entering_trap(self.window_positions, self.v_bar,
                                              self.params.n_d, self.params.upsilon)):
                        self.mode = Mode.RECOVERY
                        b = expand_trap_set(self.window_history)
                        xb, ub, _, _ = self.window_history[b]
                        self.traps.append((xb, ub))
                        self.recovery_positions = [obs.pos.copy()]
                        self.current_arm = mab.bandit_select(self.arms, self.rng)
                        self.nu = self.arms.weights[self.current_arm].copy()
                        self.steps_since_pull = 0
                        rec["arm"] = self.current_arm
                        rec["nu"] = self.nu.tolist()
                elif self.mode is Mode.RECOVERY:
                    self.recovery_positions.append(obs.pos.copy())
                    self.steps_since_pull += 1
                    # exit on a nominal streak (dynamics are familiar again)
                    # or once movement has converged away from the trap
                    done = (n or recovered(self.recovery_positions, self.v_bar,
                                           self.params)
                            if not self.random_recovery else n)
                    if done:
                        self.mode = Mode.NONNOMINAL
                        # calibrate the spread so the trap penalty matches the
                        # goal cost at this state for trap-directed controls;
                        # the last executed control typically points away from
                        # every trap, which would zero the denominator
                        ct = 0.0
                        for tp, _ in self.traps:
                            d2 = max(float(np.sum((obs.pos - np.asarray(tp)) ** 2)),
                                     self.params.trap_dist_floor ** 2)
                            ct += 1.0 / d2
                        cg = goal_state_cost_batch(self.world, obs.pos[None, :])[0]
                        # balance against the dominant (terminal-weighted) goal
                        # term, not just the per-step one, otherwise the trap
                        # penalty cannot compete with imagined terminal progress
                        cg *= self.mppi_exploit.terminal_multiplier
                        self.lambda_ = float(cg / max(ct, self.params.lambda_floor))
                        self._mark_window_start()
                        self.window_positions.append(obs.pos.copy())
                    elif (not self.random_recovery
                          and self.steps_since_pull >= self.params.n_mab):
                        back = self.recovery_positions[-(self.params.n_mab + 1)]
                        reward = (np.linalg.norm(obs.pos - np.asarray(back))
                                  / (self.params.n_mab * self.v_bar))
                        mab.bandit_update(self.arms, self.current_arm, reward)
                        self.current_arm = mab.bandit_select(self.arms, self.rng)
                        self.nu = self.arms.weights[self.current_arm].copy()
                        self.steps_since_pull = 0
                        rec["reward"] = float(reward)
                        rec["arm"] = self.current_arm
                        rec["nu"] = self.nu.tolist()
                if n and self.mode is not Mode.RECOVERY:
                    self.mode = Mode.NOMINAL
        rec["mode_after"] = self.mode.value
        self.log.append(rec)
        self.t += 1

    # -- main entry ------------------------------------------------------------

    def finalize(self, obs: PlanarState):
        """Record the outcome of the last executed action (end of trial)."""
        if self._prev is not None:
            self._process_transition(obs)
            self._prev = None

    def act(self, obs: PlanarState) -> Action:
        if self._prev is not None:
            self._process_transition(obs)
        else:
            self.all_positions.append(obs.pos.copy())

        bound = self._bound()
        if self.mode is Mode.RECOVERY and self.random_recovery:
            u_norm = self.rng.uniform(-1.0, 1.0, size=2)
            u_phys = u_norm * bound
            x_hat = self._model_mean_one(obs.vec(), u_phys, mixed=True)
            self._prev = (obs, u_phys, u_norm, x_hat)
            return Action(u_phys)

        mixed = self.mode is not Mode.NOMINAL
        model = self._model_batch(mixed)
        if self.mode is Mode.RECOVERY:
            params = self.mppi_recovery
            running, terminal = self._recovery_costs()
        else:
            params = self.mppi_exploit
            running, terminal = self._exploit_costs()
        if self.plan.U.shape[0] != params.horizon:
            self.plan = ControlPlan.initial(params)
        self.plan = mppi_plan(model, running, terminal, obs.vec(), self.plan,
                              params, self.rng)
        u_norm = self.plan.U[0].copy()
        u_phys = u_norm * bound
        self.plan = plan_shift(self.plan, params.u_nominal)
        x_hat = self._model_mean_one(obs.vec(), u_phys, mixed=mixed)
        self._prev = (obs, u_phys, u_norm, x_hat)
        return Action(u_phys)
