"""Deterministic planar world with axis-aligned walls and sliding contact.

The agent is a point constrained to a plane. State is (position, sensed
reaction force); control is a bounded displacement. Walls are axis-aligned
rectangles resolved by segment-vs-rectangle interval clipping with a single
slide pass, so every transition is exactly reproducible.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

# default per-component displacement limit, meters
ACTION_BOUND = 0.03

_PEN_TOL = 1e-9
_TOUCH_TOL = 1e-12


@dataclass
class PlanarState:
    pos: np.ndarray
    reaction: np.ndarray

    @classmethod
    def at(cls, x, y, rx=0.0, ry=0.0) -> "PlanarState":
        return cls(np.array([x, y], dtype=float), np.array([rx, ry], dtype=float))

    def vec(self) -> np.ndarray:
        """Full 4-D state vector (x, y, r_x, r_y)."""
        return np.concatenate([self.pos, self.reaction])

    @classmethod
    def from_vec(cls, v) -> "PlanarState":
        v = np.asarray(v, dtype=float)
        return cls(v[:2].copy(), v[2:4].copy())


@dataclass
class Action:
    delta: np.ndarray

    @classmethod
    def of(cls, dx, dy) -> "Action":
        return cls(np.array([dx, dy], dtype=float))


@dataclass
class Wall:
    center: np.ndarray
    half_extents: np.ndarray

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        self.half_extents = np.asarray(self.half_extents, dtype=float)
        if not np.all(self.half_extents > 0):
            raise ValueError("wall half extents must be strictly positive")

    @property
    def lo(self) -> np.ndarray:
        return self.center - self.half_extents

    @property
    def hi(self) -> np.ndarray:
        return self.center + self.half_extents

    def contains_interior(self, p, tol=0.0) -> bool:
        return bool(np.all(p > self.lo + tol) and np.all(p < self.hi - tol))


@dataclass
class WorldSpec:
    walls: list
    goal: np.ndarray
    start: PlanarState
    bounds_lo: np.ndarray
    bounds_hi: np.ndarray
    slide_friction: float = 0.9
    reaction_gain: float = 100.0
    action_bound: float = ACTION_BOUND

    def __post_init__(self):
        self.goal = np.asarray(self.goal, dtype=float)
        self.bounds_lo = np.asarray(self.bounds_lo, dtype=float)
        self.bounds_hi = np.asarray(self.bounds_hi, dtype=float)
        for p, name in [(self.start.pos, "start"), (self.goal, "goal")]:
            if np.any(p < self.bounds_lo) or np.any(p > self.bounds_hi):
                raise ValueError(f"{name} outside world bounds")
            for w in self.walls:
                if w.contains_interior(p):
                    raise ValueError(f"{name} inside a wall")

    def signature(self) -> tuple:
        """Hashable fingerprint used for distance-field caching."""
        parts = [tuple(np.round(self.bounds_lo, 12)), tuple(np.round(self.bounds_hi, 12)),
                 tuple(np.round(self.goal, 12))]
        for w in self.walls:
            parts.append(tuple(np.round(np.concatenate([w.center, w.half_extents]), 12)))
        return tuple(parts)

    def to_dict(self) -> dict:
        return {
            "walls": [{"center": w.center.tolist(), "half_extents": w.half_extents.tolist()}
                      for w in self.walls],
            "goal": self.goal.tolist(),
            "start": self.start.vec().tolist(),
            "bounds": {"lo": self.bounds_lo.tolist(), "hi": self.bounds_hi.tolist()},
            "slide_friction": self.slide_friction,
            "reaction_gain": self.reaction_gain,
            "action_bound": self.action_bound,
        }

    @classmethod
    def from_dict(cls, d) -> "WorldSpec":
        return cls(
            walls=[Wall(np.array(w["center"]), np.array(w["half_extents"])) for w in d["walls"]],
            goal=np.array(d["goal"]),
            start=PlanarState.from_vec(d["start"]),
            bounds_lo=np.array(d["bounds"]["lo"]),
            bounds_hi=np.array(d["bounds"]["hi"]),
            slide_friction=d.get("slide_friction", 0.5),
            reaction_gain=d.get("reaction_gain", 100.0),
            action_bound=d.get("action_bound", ACTION_BOUND),
        )


@dataclass
class Transition:
    state: PlanarState
    action: Action
    next_state: PlanarState
    dx: np.ndarray
    contact: bool = False
    clamped: bool = False


@dataclass
class Dataset:
    trajectories: list = field(default_factory=list)

    def all_transitions(self):
        out = []
        for traj in self.trajectories:
            out.extend(traj)
        return out

    def __len__(self):
        return sum(len(t) for t in self.trajectories)

    def arrays(self):
        """Stacked (X, U, DX, traj_id) arrays over every transition."""
        xs, us, dxs, tids = [], [], [], []
        for i, traj in enumerate(self.trajectories):
            for tr in traj:
                xs.append(tr.state.vec())
                us.append(tr.action.delta)
                dxs.append(tr.dx)
                tids.append(i)
        return (np.array(xs), np.array(us), np.array(dxs), np.array(tids, dtype=int))


def _segment_hit(p, d, wall):
    """First entry of segment p -> p+d into wall, by slab clipping.

    Returns (t, axis) or None. A point resting exactly on a face does not
    count as inside for a zero-motion axis, so sliding along a face is free.
    """
    lo, hi = wall.lo, wall.hi
    t_enter, t_exit, axis = -np.inf, np.inf, -1
    for i in range(2):
        if d[i] == 0.0:
            if not (lo[i] + _TOUCH_TOL < p[i] < hi[i] - _TOUCH_TOL):
                return None
        else:
            t1 = (lo[i] - p[i]) / d[i]
            t2 = (hi[i] - p[i]) / d[i]
            tmin, tmax = (t1, t2) if t1 < t2 else (t2, t1)
            if tmin > t_enter:
                t_enter, axis = tmin, i
            t_exit = min(t_exit, tmax)
    if t_enter >= t_exit or t_enter > 1.0 or t_exit <= 0.0:
        return None
    if t_enter < -_TOUCH_TOL:
        # started inside: should not happen with no-penetration stepping
        return (0.0, axis)
    return (max(t_enter, 0.0), axis)


def _first_hit(p, d, walls):
    best = None
    for w in walls:
        h = _segment_hit(p, d, w)
        if h is not None and (best is None or h[0] < best[0]):
            best = h
    return best


def _touching_tangential(p, d, walls):
    """True if p rests on some wall face and d moves along it (not away)."""
    for w in walls:
        lo, hi = w.lo, w.hi
        for i in range(2):
            j = 1 - i
            if not (lo[j] - _TOUCH_TOL < p[j] < hi[j] + _TOUCH_TOL):
                continue
            on_lo = abs(p[i] - lo[i]) <= _TOUCH_TOL
            on_hi = abs(p[i] - hi[i]) <= _TOUCH_TOL
            if (on_lo or on_hi) and d[i] == 0.0 and d[j] != 0.0:
                return True
    return False


def step(world: WorldSpec, state: PlanarState, action: Action) -> Transition:
    """Advance one control step with contact clipping and a single slide pass.

    Freespace motion passes through unchanged. On wall contact the motion is
    clipped at first contact, the blocked normal component is removed, and
    the tangential remainder (scaled by slide_friction) is applied if it
    causes no new penetration. Reaction = -reaction_gain * blocked normal
    displacement, in world frame.
    """
    d = np.clip(action.delta, -world.action_bound, world.action_bound)
    clamped = bool(np.any(d != action.delta))
    p = state.pos.copy()
    blocked = np.zeros(2)
    walls = world.walls

    if _touching_tangential(p, d, walls):
        d = d * world.slide_friction

    hit = _first_hit(p, d, walls)
    if hit is None:
        p = p + d
    else:
        t, axis = hit
        p = p + t * d
        remaining = (1.0 - t) * d
        blocked[axis] += remaining[axis]
        slide = remaining.copy()
        slide[axis] = 0.0
        slide *= world.slide_friction
        if np.any(slide != 0.0):
            hit2 = _first_hit(p, slide, walls)
            if hit2 is None:
                p = p + slide
            else:
                t2, axis2 = hit2
                p = p + t2 * slide
                blocked[axis2] += (1.0 - t2) * slide[axis2]

    lo_clip = np.clip(p, world.bounds_lo, world.bounds_hi)
    if np.any(lo_clip != p):
        clamped = True
        p = lo_clip

    reaction = -world.reaction_gain * blocked + 0.0  # normalize -0.0
    contact = bool(np.any(blocked != 0.0))
    nxt = PlanarState(p, reaction)
    dx = nxt.vec() - state.vec()
    return Transition(state=state, action=Action(d.copy()), next_state=nxt,
                      dx=dx, contact=contact, clamped=clamped)


def collect_random_dataset(world: WorldSpec, n_traj: int, n_steps: int, seed: int) -> Dataset:
    """Random-start, random-action trajectories in the obstacle-free regime."""
    if world.walls:
        raise ValueError("dataset collection expects an obstacle-free world")
    rng = np.random.default_rng(seed)
    ds = Dataset()
    for _ in range(n_traj):
        start = rng.uniform(-1.0, 1.0, size=2)
        s = PlanarState(start, np.zeros(2))
        traj = []
        for _ in range(n_steps):
            u = Action(rng.uniform(-world.action_bound, world.action_bound, size=2))
            tr = step(world, s, u)
            traj.append(tr)
            s = tr.next_state
        ds.trajectories.append(traj)
    return ds


def state_distance(a: PlanarState, b: PlanarState) -> float:
    """2-norm over position only; sensed reaction is ignored."""
    return float(np.linalg.norm(a.pos - b.pos))


def control_similarity(u1, u2) -> float:
    """max(0, cosine similarity); zero if either control is the zero vector."""
    a = np.asarray(u1, dtype=float).ravel()
    b = np.asarray(u2, dtype=float).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return max(0.0, float(np.dot(a, b) / (na * nb)))


# Goal cost weights (position block of Q and R); reaction rows are zero.
GOAL_Q = np.array([1.0, 1.0])
GOAL_R = np.array([1.0, 1.0])


def goal_cost(world: WorldSpec, x: PlanarState, u: Action) -> float:
    e = x.pos - world.goal
    return float(np.dot(e * GOAL_Q, e) + np.dot(u.delta * GOAL_R, u.delta))


def goal_state_cost_batch(world: WorldSpec, pos: np.ndarray) -> np.ndarray:
    """Vectorized position part of the goal cost; pos is (..., 2)."""
    e = pos - world.goal
    return np.einsum("...i,i,...i->...", e, GOAL_Q, e)


def control_cost_batch(u: np.ndarray) -> np.ndarray:
    return np.einsum("...i,i,...i->...", u, GOAL_R, u)


class GoalDistanceField:
    """Wall-aware distance-to-goal on an 8-connected grid (Dijkstra)."""

    def __init__(self, world: WorldSpec, resolution: float = 0.01):
        if resolution <= 0:
            raise ValueError("resolution must be positive")
        self.world = world
        self.res = resolution
        # anchor the grid at the goal and work in goal-relative coordinates
        # (with a snap tolerance) so translating the whole world — bounds,
        # walls and goal together — leaves the field bit-identical; absolute
        # anchoring lets float rounding flip occupancy at wall edges
        eps = 1e-9
        g = world.goal
        n_lo = np.ceil((g - world.bounds_lo) / resolution - eps).astype(int)
        n_hi = np.ceil((world.bounds_hi - g) / resolution - eps).astype(int)
        self._goal_cell = (int(n_lo[0]), int(n_lo[1]))
        self.shape = (int(n_lo[0] + n_hi[0]) + 1, int(n_lo[1] + n_hi[1]) + 1)
        xs = resolution * (np.arange(self.shape[0]) - n_lo[0])
        ys = resolution * (np.arange(self.shape[1]) - n_lo[1])
        occ = np.zeros(self.shape, dtype=bool)
        for w in world.walls:
            occ |= ((xs[:, None] > w.lo[0] - g[0] + eps)
                    & (xs[:, None] < w.hi[0] - g[0] - eps)
                    & (ys[None, :] > w.lo[1] - g[1] + eps)
                    & (ys[None, :] < w.hi[1] - g[1] - eps))
        self.occ = occ
        self.dist = self._dijkstra(self._goal_cell)

    def _cell(self, p):
        rel = (np.asarray(p, dtype=float) - self.world.goal) / self.res
        idx = np.round(rel).astype(int) + np.asarray(self._goal_cell)
        return (int(np.clip(idx[0], 0, self.shape[0] - 1)),
                int(np.clip(idx[1], 0, self.shape[1] - 1)))

    def _dijkstra(self, src):
        nx, ny = self.shape
        dist = np.full(self.shape, np.inf)
        if self.occ[src]:
            return dist
        moves = [(1, 0, 1.0), (-1, 0, 1.0), (0, 1, 1.0), (0, -1, 1.0),
                 (1, 1, np.sqrt(2)), (1, -1, np.sqrt(2)),
                 (-1, 1, np.sqrt(2)), (-1, -1, np.sqrt(2))]
        dist[src] = 0.0
        pq = [(0.0, src)]
        while pq:
            d0, (i, j) = heapq.heappop(pq)
            if d0 > dist[i, j]:
                continue
            for di, dj, c in moves:
                ni, nj = i + di, j + dj
                if 0 <= ni < nx and 0 <= nj < ny and not self.occ[ni, nj]:
                    nd = d0 + c
                    if nd < dist[ni, nj]:
                        dist[ni, nj] = nd
                        heapq.heappush(pq, (nd, (ni, nj)))
        return dist * self.res

    def query(self, pos) -> float:
        i, j = self._cell(pos)
        if not self.occ[i, j]:
            return float(self.dist[i, j])
        # snap to the nearest free cell in a small neighborhood
        best = np.inf
        for r in range(1, 4):
            for di in range(-r, r + 1):
                for dj in range(-r, r + 1):
                    ni, nj = i + di, j + dj
                    if (0 <= ni < self.shape[0] and 0 <= nj < self.shape[1]
                            and not self.occ[ni, nj]):
                        best = min(best, self.dist[ni, nj])
            if np.isfinite(best):
                break
        return float(best)


_FIELD_CACHE: dict = {}


def goal_distance_field(world: WorldSpec, resolution: float = 0.01) -> GoalDistanceField:
    key = (world.signature(), resolution)
    if key not in _FIELD_CACHE:
        _FIELD_CACHE[key] = GoalDistanceField(world, resolution)
    return _FIELD_CACHE[key]


def dijkstra_goal_distance(world: WorldSpec, x: PlanarState, resolution: float = 0.01) -> float:
    """Shortest 8-connected grid path length from x to the goal; inf if enclosed."""
    return goal_distance_field(world, resolution).query(x.pos)


# ---------------------------------------------------------------------------
# Task library


def _world(walls, start, goal, lo=(-1.5, -1.5), hi=(1.5, 1.5)) -> WorldSpec:
    return WorldSpec(walls=walls, goal=np.array(goal),
                     start=PlanarState.at(*start),
                     bounds_lo=np.array(lo), bounds_hi=np.array(hi))


def _translate(world: WorldSpec, offset) -> WorldSpec:
    off = np.asarray(offset, dtype=float)
    return WorldSpec(
        walls=[Wall(w.center + off, w.half_extents.copy()) for w in world.walls],
        goal=world.goal + off,
        start=PlanarState(world.start.pos + off, world.start.reaction.copy()),
        bounds_lo=world.bounds_lo + off,
        bounds_hi=world.bounds_hi + off,
        slide_friction=world.slide_friction,
        reaction_gain=world.reaction_gain,
        action_bound=world.action_bound,
    )


def make_task(key: str) -> WorldSpec:
    """Build a benchmark world by name."""
    if key == "freespace":
        return _world([], start=(-0.5, -0.5), goal=(0.5, 0.5))
    if key == "peg-i":
        # single bar between start and goal
        walls = [Wall([0.0, 0.0], [0.25, 0.03])]
        return _world(walls, start=(0.0, -0.45), goal=(0.0, 0.35))
    if key == "peg-t":
        # T-slot profile: crossbar with a center stem plus side lips, forming
        # two downward-opening pockets between the start and the goal. Greedy
        # sliding cannot escape the pocket corners; the way out is back
        # through the mouth and around a lip.
        # uprights overlap the crossbar so the inside corners are sealed;
        # lips are shallow so the escape is a short detour, not a deep climb
        walls = [
            Wall([0.0, 0.12], [0.18, 0.03]),     # crossbar
            Wall([0.0, -0.05], [0.03, 0.17]),    # stem
            Wall([-0.15, 0.065], [0.03, 0.055]),  # left lip
            Wall([0.15, 0.065], [0.03, 0.055]),   # right lip
        ]
        return _world(walls, start=(0.08, -0.55), goal=(0.0, 0.35))
    if key == "peg-t-translated":
        return _translate(make_task("peg-t"), (10.0, 10.0))
    if key == "peg-u":
        # single downward-opening pocket straddling the line to the goal
        # arms overlap the roof so the inside corners are sealed; kept shallow
        walls = [
            Wall([0.0, 0.12], [0.18, 0.03]),      # roof
            Wall([-0.15, 0.065], [0.03, 0.055]),  # left arm
            Wall([0.15, 0.065], [0.03, 0.055]),   # right arm
        ]
        return _world(walls, start=(-0.05, -0.55), goal=(0.0, 0.35))
    raise KeyError(f"unknown task key: {key}")


TASK_KEYS = ("freespace", "peg-u", "peg-i", "peg-t", "peg-t-translated")
