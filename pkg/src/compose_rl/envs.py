"""Deterministic point-mass environments with goal-reaching rewards.

Observations are flat vectors laid out as ``[s_hat, g]``: the primitive-visible
state first, task information last, so dropping the goal is a suffix cut.
Walls are axis-aligned boxes; the agent is a point and may slide along wall
faces but never enters a wall's interior.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DT = 0.25

NAV_COEF = {"goal": 0.3, "velocity": 0.0, "alive": 0.05, "control": 0.01, "contact": 0.001}
NAV_SCALE = 5.0
MAZE_COEF = {"goal": 1.0, "control": 0.05, "contact": 0.5e-4}
PUSHER_COEF = {"goal": 1.0, "object": 0.1, "control": 0.1}
HURDLE_COEF = {"goal": 0.1, "hurdle_count": 1.0, "reach": 1000.0, "vertical": 0.3, "velocity": 1.0, "collision": 2.0}


# ------------------------------------------------------------------- rewards

def reward_nav(pos, goal, action, contact: bool, speed: float = 0.0, coef=None, scale: float = NAV_SCALE) -> float:
    """Scaled navigation reward: distance and control penalties plus alive bonus."""
    c = NAV_COEF if coef is None else coef
    d2 = float(np.sum((np.asarray(pos) - np.asarray(goal)) ** 2))
    u2 = float(np.sum(np.asarray(action) ** 2))
    return scale * (-c["goal"] * d2 + c["velocity"] * speed + c["alive"] * 1.0
                    - c["control"] * u2 - c["contact"] * float(contact))


def reward_maze(pos, goal, action, contact: bool, coef=None) -> float:
    """Unscaled maze reward; the squared goal distance is a penalty."""
    c = MAZE_COEF if coef is None else coef
    d2 = float(np.sum((np.asarray(pos) - np.asarray(goal)) ** 2))
    u2 = float(np.sum(np.asarray(action) ** 2))
    return -c["goal"] * d2 - c["control"] * u2 - c["contact"] * float(contact)


def reward_pusher(obj, goal, arm, action, coef=None) -> float:
    c = PUSHER_COEF if coef is None else coef
    obj, goal, arm = (np.asarray(v, dtype=np.float64) for v in (obj, goal, arm))
    return (-c["goal"] * float(np.sum((obj - goal) ** 2)) - c["object"] * float(np.sum((arm - obj) ** 2))
            - c["control"] * float(np.sum(np.asarray(action) ** 2)))


def reward_hurdle(pos, goal, hurdles_ahead: int, reached: bool, vz: float, vx: float, collided: bool,
                  coef=None) -> float:
    c = HURDLE_COEF if coef is None else coef
    d2 = float(np.sum((np.asarray(pos) - np.asarray(goal)) ** 2))
    return (-c["goal"] * d2 - c["hurdle_count"] * hurdles_ahead + c["reach"] * float(reached)
            + c["vertical"] * abs(vz) + c["velocity"] * vx - c["collision"] * float(collided))


# --------------------------------------------------------------------- walls

@dataclass(frozen=True)
class Box:
    xlo: float
    ylo: float
    xhi: float
    yhi: float

    def contains(self, p) -> bool:
        """Strict interior test; faces do not count."""
        return self.xlo < p[0] < self.xhi and self.ylo < p[1] < self.yhi

    def shifted(self, dx: float, dy: float) -> "Box":
        return Box(self.xlo + dx, self.ylo + dy, self.xhi + dx, self.yhi + dy)


def _sweep_axis(pos: np.ndarray, delta: float, axis: int, boxes) -> tuple[float, bool]:
    """Move ``pos`` by ``delta`` along ``axis``, stopping flush at the first box face."""
    other = 1 - axis
    new = pos[axis] + delta
    hit = False
    for b in boxes:
        lo_o, hi_o = (b.ylo, b.yhi) if axis == 0 else (b.xlo, b.xhi)
        if not lo_o <= pos[other] <= hi_o:
            continue
        lo, hi = (b.xlo, b.xhi) if axis == 0 else (b.ylo, b.yhi)
        if delta > 0 and pos[axis] <= lo < new:
            new, hit = lo, True
        elif delta < 0 and new < hi <= pos[axis]:
            new, hit = hi, True
    return new, hit


def move_point(pos, delta, boxes) -> tuple[np.ndarray, bool]:
    """Axis-separated motion with wall clamping; returns ``(new_pos, contact)``."""
    p = np.array(pos, dtype=np.float64)
    contact = False
    for axis in (0, 1):
        if delta[axis] != 0.0:
            p[axis], hit = _sweep_axis(p, float(delta[axis]), axis, boxes)
            contact |= hit
    return p, contact


def _frame(xlo, ylo, xhi, yhi, t=4.0) -> list[Box]:
    return [Box(xlo - t, ylo - t, xhi + t, ylo), Box(xlo - t, yhi, xhi + t, yhi + t),
            Box(xlo - t, ylo, xlo, yhi), Box(xhi, ylo, xhi + t, yhi)]


# -------------------------------------------------------------------- specs

@dataclass
class EnvSpec:
    name: str
    family: str
    s_hat_width: int
    goal_width: int
    action_dim: int = 2
    action_low: tuple = (-1.0, -1.0)
    action_high: tuple = (1.0, 1.0)
    horizon: int = 500
    goal_radius: float = 0.25
    reward_coef: dict = field(default_factory=dict)
    reward_scale: float = 1.0
    goal_dims: tuple = (0, 1)
    subgoal_low: tuple = (-2.5, -2.5)
    subgoal_high: tuple = (2.5, 2.5)

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if any(v < 0 for v in self.reward_coef.values()):
            raise ValueError("reward coefficients must be non-negative")

    @property
    def obs_dim(self) -> int:
        return self.s_hat_width + self.goal_width


class StepAfterDone(RuntimeError):
    pass


class PointEnv:
    """Shared point-mass plumbing; subclasses define layout, reset and reward."""

    spec: EnvSpec
    walls: list[Box] = []

    def __init__(self):
        self.done = True
        self.t = 0
        self.eval_mode = False

    # subclasses ------------------------------------------------------------
    def _reset(self, rng, eval_mode):
        raise NotImplementedError

    def _obs(self) -> np.ndarray:
        raise NotImplementedError

    def distance(self) -> float:
        raise NotImplementedError

    def _advance(self, action) -> tuple[float, dict]:
        raise NotImplementedError

    # public ------------------------------------------------------------------
    def reset(self, rng: np.random.Generator, eval_mode: bool = False) -> np.ndarray:
        self.t = 0
        self.done = False
        self.eval_mode = eval_mode
        self._reset(rng, eval_mode)
        self.initial_distance = self.distance()
        return self._obs()

    def step(self, action):
        if self.done:
            raise StepAfterDone("step() called on a finished episode; call reset() first")
        u = np.asarray(action, dtype=np.float64)
        if u.shape != (self.spec.action_dim,):
            raise ValueError(f"action shape {u.shape} != ({self.spec.action_dim},)")
        reward, info = self._advance(u)
        self.t += 1
        captured = info.get("captured", False)
        self.done = captured or self.t >= self.spec.horizon
        info["distance"] = self.distance()
        info["initial_distance"] = self.initial_distance
        info["success"] = bool(captured or info["distance"] <= self.spec.goal_radius)
        return self._obs(), reward, self.done, info

    def clip(self, action) -> np.ndarray:
        return np.clip(action, self.spec.action_low, self.spec.action_high)

    def split(self, s) -> tuple[np.ndarray, np.ndarray]:
        s = np.asarray(s)
        return s[..., :self.spec.s_hat_width], s[..., self.spec.s_hat_width:]

    def in_wall(self, p) -> bool:
        return any(b.contains(p) for b in self.walls)


class _GoalNav(PointEnv):
    """Point agent reaching a 2-D goal; ``s_hat = (x, y)``, ``g = goal``."""

    reward_kind = "nav"

    def __init__(self):
        super().__init__()
        self.pos = np.zeros(2)
        self.goal = np.zeros(2)

    def _obs(self):
        return np.concatenate([self.pos, self.goal])

    def distance(self):
        return float(np.linalg.norm(self.pos - self.goal))

    def _advance(self, u):
        prev = self.pos
        self.pos, contact = move_point(prev, self.clip(u) * DT, self.walls)
        speed = float(np.linalg.norm(self.pos - prev)) / DT
        if self.reward_kind == "nav":
            r = reward_nav(self.pos, self.goal, u, contact, speed, self.spec.reward_coef, self.spec.reward_scale)
        else:
            r = reward_maze(self.pos, self.goal, u, contact, self.spec.reward_coef)
        return r, {"contact": contact, "captured": self.distance() <= self.spec.goal_radius}


class PointRandomGoal(_GoalNav):
    """Walled 16x16 arena; goal uniform in the disc of radius 5 around the start."""

    MIN_GOAL_DISTANCE = 1.0
    walls = _frame(-8.0, -8.0, 8.0, 8.0)

    spec = EnvSpec("point_random_goal", "nav", s_hat_width=2, goal_width=2, horizon=500, goal_radius=0.25,
                   reward_coef=NAV_COEF, reward_scale=NAV_SCALE)

    def _reset(self, rng, eval_mode):
        self.pos = np.zeros(2)
        while True:
            r = 5.0 * np.sqrt(rng.random())
            phi = 2.0 * np.pi * rng.random()
            if r >= self.MIN_GOAL_DISTANCE:
                break
        self.goal = np.array([r * np.cos(phi), r * np.sin(phi)])


class PointCrossMaze(_GoalNav):
    """Plus-shaped corridors (left, right and top arms) with a target at each end."""

    TARGETS = np.array([[-12.0, 0.0], [12.0, 0.0], [0.0, 12.0]])
    walls = ([Box(-16, -6, 16, -2), Box(-16, 2, -2, 18), Box(2, 2, 16, 18), Box(-2, 14, 2, 18),
              Box(-20, -6, -16, 18), Box(16, -6, 20, 18)])
    spec = EnvSpec("point_cross_maze", "nav", s_hat_width=2, goal_width=2, horizon=500, goal_radius=1.0,
                   reward_coef=NAV_COEF, reward_scale=NAV_SCALE)

    def _reset(self, rng, eval_mode):
        self.pos = np.zeros(2)
        self.goal = self.TARGETS[rng.integers(len(self.TARGETS))].copy()


class PointUMaze(_GoalNav):
    """U-shaped maze over [-4, 20]^2 with the block [-4, 12] x [4, 12] removed."""

    reward_kind = "maze"
    EVAL_GOAL = np.array([0.0, 19.0])
    walls = _frame(-4.0, -4.0, 20.0, 20.0) + [Box(-4.0, 4.0, 12.0, 12.0)]
    spec = EnvSpec("point_umaze", "nav", s_hat_width=2, goal_width=2, horizon=500, goal_radius=5.0,
                   reward_coef=MAZE_COEF)

    def _reset(self, rng, eval_mode):
        self.pos = np.zeros(2)
        self.goal = self.EVAL_GOAL.copy() if eval_mode else rng.uniform(-4.0, 20.0, size=2)


class PointPush(PointEnv):
    """Maze with a movable 8x8 block at (0, 8) sealing the route to (0, 19).

    ``s_hat = (x, y, block_x, block_y)``, ``g = goal``.
    """

    EVAL_GOAL = np.array([0.0, 19.0])
    BLOCK_START = np.array([0.0, 8.0])
    BLOCK_HALF = 4.0
    walls = _frame(-12.0, -4.0, 12.0, 20.0) + [Box(4.0, -4.0, 12.0, 4.0), Box(-12.0, 12.0, -4.0, 20.0),
                                                 Box(4.0, 12.0, 12.0, 20.0)]
    spec = EnvSpec("point_push", "nav", s_hat_width=4, goal_width=2, horizon=500, goal_radius=5.0,
                   reward_coef=MAZE_COEF)

    def __init__(self):
        super().__init__()
        self.pos = np.zeros(2)
        self.block = self.BLOCK_START.copy()
        self.goal = self.EVAL_GOAL.copy()

    def _block_box(self, center=None) -> Box:
        c = self.block if center is None else center
        h = self.BLOCK_HALF
        return Box(c[0] - h, c[1] - h, c[0] + h, c[1] + h)

    def _reset(self, rng, eval_mode):
        self.pos = np.zeros(2)
        self.block = self.BLOCK_START.copy()
        self.goal = self.EVAL_GOAL.copy() if eval_mode else rng.uniform([-12.0, -4.0], [12.0, 20.0])

    def _obs(self):
        return np.concatenate([self.pos, self.block, self.goal])

    def distance(self):
        return float(np.linalg.norm(self.pos - self.goal))

    def in_wall(self, p) -> bool:
        return super().in_wall(p) or self._block_box().contains(p)

    def _advance(self, u):
        delta = self.clip(u) * DT
        contact = False
        for axis in (0, 1):
            if delta[axis] == 0.0:
                continue
            step = np.zeros(2)
            step[axis] = delta[axis]
            target, _ = move_point(self.pos, step, self.walls)
            block = self._block_box()
            new_axis, hit_block = _sweep_axis(self.pos, target[axis] - self.pos[axis], axis, [block])
            if hit_block:
                # push the block by the intended displacement if the block itself is free to move
                shift = target[axis] - new_axis
                moved = self.block.copy()
                moved[axis] += shift
                moved_box = self._block_box(moved)
                if shift != 0.0 and not any(_overlap(moved_box, w) for w in self.walls):
                    self.block = moved
                    # flush against the moved face, immune to rounding
                    half = self.BLOCK_HALF if shift < 0 else -self.BLOCK_HALF
                    new_axis = moved[axis] + half
                contact = True
            elif target[axis] != self.pos[axis] + delta[axis]:
                contact = True
            self.pos = self.pos.copy()
            self.pos[axis] = new_axis
        r = reward_maze(self.pos, self.goal, u, contact, self.spec.reward_coef)
        return r, {"contact": contact, "captured": self.distance() <= self.spec.goal_radius}


def _overlap(a: Box, b: Box) -> bool:
    return a.xlo < b.xhi and b.xlo < a.xhi and a.ylo < b.yhi and b.ylo < a.yhi


class PointPusher(PointEnv):
    """Arm point pushing an object point to a goal; the goal is part of ``s_hat``."""

    CONTACT_RADIUS = 0.5
    spec = EnvSpec("point_pusher", "pusher", s_hat_width=6, goal_width=0, horizon=200, goal_radius=0.25,
                   reward_coef=PUSHER_COEF, goal_dims=(2, 3))

    def __init__(self):
        super().__init__()
        self.arm = np.zeros(2)
        self.obj = np.zeros(2)
        self.goal = np.zeros(2)

    def _reset(self, rng, eval_mode):
        self.obj = np.zeros(2)
        self.arm = np.array([0.3, 0.3])
        self.goal = rng.uniform(-3.0, -1.0, size=2)

    def _obs(self):
        return np.concatenate([self.arm, self.obj, self.goal])

    def distance(self):
        return float(np.linalg.norm(self.obj - self.goal))

    def _advance(self, u):
        delta = self.clip(u) * DT
        prev = self.arm
        self.arm = prev + delta
        toward = float(np.dot(delta, self.obj - prev)) > 0.0
        if toward and np.linalg.norm(self.arm - self.obj) < self.CONTACT_RADIUS:
            self.obj = self.obj + delta
        r = reward_pusher(self.obj, self.goal, self.arm, u, self.spec.reward_coef)
        return r, {"contact": False, "captured": self.distance() <= self.spec.goal_radius}


class PointHurdle(PointEnv):
    """1-D runner with a jump channel and three hurdles before the goal.

    ``s_hat = (x, z, vz)``; ``g = (next hurdle x, distance to it)``.  Actions
    are ``(run velocity, jump impulse)``; a jump starts only from the ground.
    """

    HURDLES = (4.0, 8.0, 12.0)
    HURDLE_HEIGHT = 0.5
    GOAL_X = 16.0
    GRAVITY = 2.0
    JUMP_SPEED = 2.0
    spec = EnvSpec("point_hurdle", "hurdle", s_hat_width=3, goal_width=2, horizon=200, goal_radius=0.5,
                   reward_coef=HURDLE_COEF, goal_dims=(0,))

    def __init__(self):
        super().__init__()
        self.x = self.z = self.vz = 0.0

    def _reset(self, rng, eval_mode):
        self.x, self.z, self.vz = 0.0, 0.0, 0.0

    def _next_hurdle(self) -> float:
        ahead = [h for h in self.HURDLES if h > self.x]
        return ahead[0] if ahead else self.GOAL_X

    def hurdles_ahead(self) -> int:
        return sum(1 for h in self.HURDLES if h > self.x)

    def _obs(self):
        nxt = self._next_hurdle()
        return np.array([self.x, self.z, self.vz, nxt, nxt - self.x])

    def distance(self):
        return abs(self.GOAL_X - self.x)

    def _advance(self, u):
        a = self.clip(u)
        vx = a[0]
        if self.z == 0.0 and a[1] > 0.0:
            self.vz = self.JUMP_SPEED * a[1]
        new_x = self.x + vx * DT
        new_z = max(0.0, self.z + self.vz * DT)
        collided = False
        for h in self.HURDLES:
            if self.x < h <= new_x and max(self.z, new_z) < self.HURDLE_HEIGHT:
                new_x, collided = h - 1e-9, True
                break
        vz_now = self.vz
        self.x = new_x
        self.z = new_z
        self.vz = 0.0 if new_z == 0.0 else self.vz - self.GRAVITY * DT
        reached = self.distance() <= self.spec.goal_radius
        r = reward_hurdle((self.x, self.z), (self.GOAL_X, 0.0), self.hurdles_ahead(), reached, vz_now, vx,
                          collided, self.spec.reward_coef)
        return r, {"contact": collided, "captured": reached}


ENV_REGISTRY = {cls.spec.name: cls for cls in
                (PointRandomGoal, PointCrossMaze, PointUMaze, PointPush, PointPusher, PointHurdle)}


def make_env(name: str) -> PointEnv:
    if name not in ENV_REGISTRY:
        raise KeyError(f"unknown environment {name!r}; registered: {', '.join(sorted(ENV_REGISTRY))}")
    return ENV_REGISTRY[name]()
