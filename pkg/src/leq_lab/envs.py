"""Toy ground-truth environments with exact termination rules.

Two families:

- point_maze: a point agent in a 2-D maze of axis-aligned wall segments.
  State is the (x, y) position, actions are velocity commands in [-1, 1]^2
  scaled by a fixed step size. Reward is -1 per step and 0 on the step that
  enters the goal disc (radius 0.5), which also terminates the episode.
  Three built-in layouts ("u", "s-corridor", "large-spiral") form a
  difficulty ladder of increasing path length.

- dense_chain: a 1-D double integrator. State is (position, velocity),
  the scalar action accelerates the point, reward is the (already clipped)
  velocity, and crossing either position bound terminates the episode.

Collision handling moves one axis at a time and clips motion just short of
any crossed wall, so agents slide along walls rather than sticking to them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .rng import stream

__all__ = [
    "EnvSpec",
    "EnvError",
    "MAZE_LAYOUTS",
    "ENV_NAMES",
    "make_env_spec",
    "env_step",
    "reset_state",
    "termination_fn",
    "terminated",
    "terminated_batch",
    "expert_action",
    "is_success",
]

_WALL_MARGIN = 1e-3
MAZE_STEP = 0.3
_WAYPOINT_RADIUS = 0.35
_STEER_GAIN = 3.0


class EnvError(ValueError):
    """Invalid environment name, state or parameters."""


# Each layout: bounds (lo, hi) per axis, wall segments ((x0, y0), (x1, y1))
# (axis-aligned), start position, goal position, expert waypoints.
MAZE_LAYOUTS: dict[str, dict] = {
    "u": {
        "bounds": ((0.0, 0.0), (4.0, 4.0)),
        "walls": (
            ((0.0, 0.0), (4.0, 0.0)),
            ((0.0, 4.0), (4.0, 4.0)),
            ((0.0, 0.0), (0.0, 4.0)),
            ((4.0, 0.0), (4.0, 4.0)),
            ((0.0, 2.0), (2.6, 2.0)),
        ),
        "start": (0.5, 0.5),
        "goal": (0.5, 3.5),
        "waypoints": ((3.2, 0.6), (3.4, 3.3), (0.5, 3.5)),
    },
    "s-corridor": {
        "bounds": ((0.0, 0.0), (4.0, 6.0)),
        "walls": (
            ((0.0, 0.0), (4.0, 0.0)),
            ((0.0, 6.0), (4.0, 6.0)),
            ((0.0, 0.0), (0.0, 6.0)),
            ((4.0, 0.0), (4.0, 6.0)),
            ((0.0, 2.0), (2.6, 2.0)),
            ((1.4, 4.0), (4.0, 4.0)),
        ),
        "start": (0.5, 0.5),
        "goal": (0.5, 5.5),
        "waypoints": ((3.2, 0.6), (3.2, 3.2), (0.7, 3.2), (0.7, 5.5), (0.5, 5.5)),
    },
    "large-spiral": {
        "bounds": ((0.0, 0.0), (10.0, 10.0)),
        "walls": (
            ((0.0, 0.0), (10.0, 0.0)),
            ((0.0, 10.0), (10.0, 10.0)),
            ((0.0, 0.0), (0.0, 10.0)),
            ((10.0, 0.0), (10.0, 10.0)),
            # Outer ring, gap on the south side at x in (2, 3.4).
            ((2.0, 2.0), (2.0, 8.0)),
            ((2.0, 8.0), (8.0, 8.0)),
            ((8.0, 2.0), (8.0, 8.0)),
            ((3.4, 2.0), (8.0, 2.0)),
            # Inner ring, gap on the north side at x in (4, 5.2).
            ((4.0, 4.0), (4.0, 6.0)),
            ((4.0, 4.0), (6.0, 4.0)),
            ((6.0, 4.0), (6.0, 6.0)),
            ((5.2, 6.0), (6.0, 6.0)),
        ),
        "start": (1.0, 1.0),
        "goal": (5.0, 5.0),
        "waypoints": (
            (2.7, 1.0),
            (2.7, 3.0),
            (3.0, 7.0),
            (4.6, 7.0),
            (4.6, 5.2),
            (5.0, 5.0),
        ),
    },
}

ENV_NAMES = (
    "point_maze_u",
    "point_maze_s_corridor",
    "point_maze_large_spiral",
    "dense_chain",
)


@dataclass(frozen=True)
class EnvSpec:
    env_id: str  # "point_maze" or "dense_chain"
    name: str
    horizon: int
    obs_dim: int
    act_dim: int
    # point_maze fields
    layout: str | None = None
    walls: tuple = ()
    bounds: tuple | None = None
    start: tuple | None = None
    goal: tuple | None = None
    goal_radius: float = 0.5
    step_size: float = MAZE_STEP
    waypoints: tuple = ()
    # dense_chain fields
    chain_length: float = 5.0

    def __post_init__(self) -> None:
        if self.horizon < 1:
            raise EnvError("horizon cap must be >= 1")
        if self.env_id == "point_maze" and self.goal_radius <= 0.0:
            raise EnvError("goal radius must be positive")


def make_env_spec(name: str) -> EnvSpec:
    if name == "dense_chain":
        return EnvSpec(env_id="dense_chain", name=name, horizon=100, obs_dim=2, act_dim=1)
    if name.startswith("point_maze_"):
        layout = name[len("point_maze_") :].replace("_", "-")
        if layout in MAZE_LAYOUTS:
            cfg = MAZE_LAYOUTS[layout]
            return EnvSpec(
                env_id="point_maze",
                name=name,
                horizon=200,
                obs_dim=2,
                act_dim=2,
                layout=layout,
                walls=cfg["walls"],
                bounds=cfg["bounds"],
                start=cfg["start"],
                goal=cfg["goal"],
                waypoints=cfg["waypoints"],
            )
    raise EnvError(f"unknown environment {name!r}; expected one of {ENV_NAMES}")


def _move_axis(pos: np.ndarray, axis: int, delta: float, walls) -> float:
    """New coordinate along `axis` after clipping against crossed walls."""
    start = pos[axis]
    target = start + delta
    if delta == 0.0:
        return start
    other = 1 - axis
    for (a, b) in walls:
        if a[axis] != b[axis]:
            continue  # wall runs along the motion axis; cannot be crossed sideways
        w = a[axis]
        lo_o, hi_o = min(a[other], b[other]), max(a[other], b[other])
        if not (lo_o - _WALL_MARGIN <= pos[other] <= hi_o + _WALL_MARGIN):
            continue
        if delta > 0.0 and start <= w + _WALL_MARGIN <= target + _WALL_MARGIN:
            target = min(target, w - _WALL_MARGIN)
        elif delta < 0.0 and target - _WALL_MARGIN <= w - _WALL_MARGIN <= start:
            target = max(target, w + _WALL_MARGIN)
    return target


def _maze_step(spec: EnvSpec, state: np.ndarray, action: np.ndarray):
    pos = state.copy()
    delta = spec.step_size * action
    pos[0] = _move_axis(pos, 0, float(delta[0]), spec.walls)
    pos[1] = _move_axis(pos, 1, float(delta[1]), spec.walls)
    (lo_x, lo_y), (hi_x, hi_y) = spec.bounds
    pos[0] = min(max(pos[0], lo_x + _WALL_MARGIN), hi_x - _WALL_MARGIN)
    pos[1] = min(max(pos[1], lo_y + _WALL_MARGIN), hi_y - _WALL_MARGIN)
    done = _maze_done(spec, pos)
    reward = 0.0 if done else -1.0
    return pos, reward, done


def _chain_step(spec: EnvSpec, state: np.ndarray, action: np.ndarray):
    v = float(np.clip(state[1] + 0.1 * action[0], -1.0, 1.0))
    x = float(state[0] + 0.1 * v)
    next_state = np.array([x, v], dtype=np.float64)
    done = abs(x) > spec.chain_length
    return next_state, v, done


def env_step(spec: EnvSpec, state, action):
    """One ground-truth transition: (next_state, reward, terminal)."""
    state = np.asarray(state, dtype=np.float64)
    if not np.all(np.isfinite(state)):
        raise EnvError(f"non-finite state {state!r}")
    action = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
    if state.shape != (spec.obs_dim,) or action.shape != (spec.act_dim,):
        raise EnvError("state/action dimension mismatch")
    if spec.env_id == "point_maze":
        return _maze_step(spec, state, action)
    return _chain_step(spec, state, action)


def reset_state(spec: EnvSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.env_id == "point_maze":
        jitter = rng.uniform(-0.25, 0.25, size=2)
        return np.asarray(spec.start, dtype=np.float64) + jitter
    return np.array([rng.uniform(-0.1, 0.1), 0.0], dtype=np.float64)


def _maze_done(spec: EnvSpec, pos: np.ndarray) -> bool:
    gx, gy = spec.goal
    return (pos[0] - gx) ** 2 + (pos[1] - gy) ** 2 <= spec.goal_radius**2


def terminated(spec: EnvSpec, state) -> bool:
    state = np.asarray(state, dtype=np.float64)
    if spec.env_id == "point_maze":
        return _maze_done(spec, state)
    return abs(float(state[0])) > spec.chain_length


def terminated_batch(spec: EnvSpec, states: np.ndarray) -> np.ndarray:
    """Vectorized termination test over rows of `states`."""
    states = np.asarray(states, dtype=np.float64)
    if spec.env_id == "point_maze":
        gx, gy = spec.goal
        d2 = (states[:, 0] - gx) ** 2 + (states[:, 1] - gy) ** 2
        return d2 <= spec.goal_radius**2
    return np.abs(states[:, 0]) > spec.chain_length


def termination_fn(spec: EnvSpec):
    """The exact termination rule as a shape-polymorphic closure.

    (S,) input -> bool; (B, S) input -> bool array of shape (B,).
    """

    def fn(state):
        state = np.asarray(state, dtype=np.float64)
        if state.ndim == 2:
            return terminated_batch(spec, state)
        return terminated(spec, state)

    return fn


def expert_action(spec: EnvSpec, state: np.ndarray, waypoint_idx: int):
    """Scripted controller action and updated waypoint index."""
    if spec.env_id == "dense_chain":
        return np.array([1.0]), 0
    pos = np.asarray(state, dtype=np.float64)
    waypoints = spec.waypoints
    while waypoint_idx < len(waypoints) - 1:
        wp = np.asarray(waypoints[waypoint_idx])
        if float(np.hypot(*(wp - pos))) <= _WAYPOINT_RADIUS:
            waypoint_idx += 1
        else:
            break
    wp = np.asarray(waypoints[waypoint_idx])
    action = np.clip(_STEER_GAIN * (wp - pos), -1.0, 1.0)
    return action, waypoint_idx


def is_success(spec: EnvSpec, final_state, reached_terminal: bool) -> bool:
    """Task success: goal-disc entry for mazes, forward-bound exit for chains."""
    if not reached_terminal:
        return False
    if spec.env_id == "point_maze":
        return True
    return float(np.asarray(final_state)[0]) > spec.chain_length
