"""Offline experience containers, scripted collectors and persistence.

Trajectories store contiguous arrays (states has one extra row so
next-states need no duplication); transitions are derived views. A
trajectory either ends at a terminal state (`ends_terminal`) or at the
horizon cap, in which case bootstrapping past its last state is allowed.

File format ("LEQD"): magic, u32 version, u32-length-prefixed JSON
metadata, per-trajectory blocks (u32 step count, u8 terminal flag, then
little-endian float64 states/actions/rewards), and a trailing CRC32 over
everything before it.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .envs import EnvSpec, env_step, expert_action, is_success, reset_state
from .rng import stream

__all__ = [
    "Transition",
    "Trajectory",
    "OfflineDataset",
    "DatasetError",
    "DatasetFormatError",
    "COLLECTORS",
    "NORMALIZATION_MODES",
    "collect_dataset",
    "normalize_rewards",
    "save_dataset",
    "load_dataset",
]

_MAGIC = b"LEQD"
_VERSION = 1
COLLECTORS = ("random", "medium", "expert", "mixed")
NORMALIZATION_MODES = ("none", "minmax_return", "sparse_shift")
_MEDIUM_NOISE = 0.5


class DatasetError(ValueError):
    """Invalid dataset contents or arguments."""


class DatasetFormatError(DatasetError):
    """Corrupt, truncated or incompatible dataset file."""


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    terminal: bool


@dataclass(frozen=True)
class Trajectory:
    states: np.ndarray  # (n + 1, obs_dim)
    actions: np.ndarray  # (n, act_dim)
    rewards: np.ndarray  # (n,)
    ends_terminal: bool

    def __post_init__(self) -> None:
        n = self.actions.shape[0]
        if n < 1:
            raise DatasetError("trajectory needs at least one transition")
        if self.states.shape[0] != n + 1 or self.rewards.shape != (n,):
            raise DatasetError("trajectory array lengths disagree")
        if not (
            np.all(np.isfinite(self.states))
            and np.all(np.isfinite(self.actions))
            and np.all(np.isfinite(self.rewards))
        ):
            raise DatasetError("trajectory contains non-finite values")
        if np.any(np.abs(self.actions) > 1.0 + 1e-9):
            raise DatasetError("actions must lie in [-1, 1]")
        for arr in (self.states, self.actions, self.rewards):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return self.actions.shape[0]

    @property
    def ret(self) -> float:
        return float(self.rewards.sum())

    def transitions(self):
        n = len(self)
        for i in range(n):
            yield Transition(
                state=self.states[i],
                action=self.actions[i],
                reward=float(self.rewards[i]),
                next_state=self.states[i + 1],
                terminal=self.ends_terminal and i == n - 1,
            )


@dataclass(frozen=True)
class OfflineDataset:
    trajectories: tuple[Trajectory, ...]
    obs_dim: int
    act_dim: int
    reward_normalization: str = "none"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.reward_normalization not in NORMALIZATION_MODES:
            raise DatasetError(f"unknown normalization {self.reward_normalization!r}")
        for traj in self.trajectories:
            if traj.states.shape[1] != self.obs_dim or traj.actions.shape[1] != self.act_dim:
                raise DatasetError("trajectory dims disagree with dataset dims")

    @property
    def n_transitions(self) -> int:
        return sum(len(t) for t in self.trajectories)

    def returns(self) -> np.ndarray:
        return np.array([t.ret for t in self.trajectories], dtype=np.float64)

    def flat_arrays(self):
        """(states, actions, rewards, next_states, terminals) stacked over all transitions."""
        if not self.trajectories:
            return (
                np.zeros((0, self.obs_dim)),
                np.zeros((0, self.act_dim)),
                np.zeros(0),
                np.zeros((0, self.obs_dim)),
                np.zeros(0, dtype=bool),
            )
        states = np.concatenate([t.states[:-1] for t in self.trajectories], axis=0)
        actions = np.concatenate([t.actions for t in self.trajectories], axis=0)
        rewards = np.concatenate([t.rewards for t in self.trajectories], axis=0)
        next_states = np.concatenate([t.states[1:] for t in self.trajectories], axis=0)
        terminals = np.concatenate(
            [
                np.arange(len(t)) == (len(t) - 1) if t.ends_terminal else np.zeros(len(t), bool)
                for t in self.trajectories
            ]
        )
        return states, actions, rewards, next_states, terminals


def _collector_action(collector, spec, state, wp_idx, traj_rng, noisy):
    if collector == "random":
        return traj_rng.uniform(-1.0, 1.0, size=spec.act_dim), wp_idx
    action, wp_idx = expert_action(spec, state, wp_idx)
    if noisy:
        action = np.clip(action + traj_rng.normal(0.0, _MEDIUM_NOISE, spec.act_dim), -1.0, 1.0)
    return action, wp_idx


def collect_dataset(
    spec: EnvSpec, collector: str, n_trajectories: int, seed: int, horizon: int | None = None
) -> OfflineDataset:
    """Roll scripted controllers in the true environment.

    random: uniform actions; expert: scripted waypoint/bang-bang controller;
    medium: expert plus clipped Gaussian noise (sigma 0.5); mixed: even
    trajectory indices collected by medium, odd by random.
    """
    if collector not in COLLECTORS:
        raise DatasetError(f"unknown collector {collector!r}; expected one of {COLLECTORS}")
    if n_trajectories < 1:
        raise DatasetError("n_trajectories must be >= 1")
    horizon = spec.horizon if horizon is None else int(horizon)
    trajectories = []
    for i in range(n_trajectories):
        traj_rng = stream(seed, f"collect.{spec.name}.{collector}", i)
        mode = collector if collector != "mixed" else ("medium" if i % 2 == 0 else "random")
        state = reset_state(spec, traj_rng)
        states, actions, rewards = [state], [], []
        wp_idx = 0
        ends_terminal = False
        for _ in range(horizon):
            action, wp_idx = _collector_action(
                mode, spec, state, wp_idx, traj_rng, noisy=(mode == "medium")
            )
            state, reward, done = env_step(spec, state, action)
            states.append(state)
            actions.append(np.asarray(action, dtype=np.float64))
            rewards.append(reward)
            if done:
                ends_terminal = True
                break
        trajectories.append(
            Trajectory(
                states=np.asarray(states, dtype=np.float64),
                actions=np.asarray(actions, dtype=np.float64),
                rewards=np.asarray(rewards, dtype=np.float64),
                ends_terminal=ends_terminal,
            )
        )
    n_success = sum(
        is_success(spec, t.states[-1], t.ends_terminal) for t in trajectories
    )
    return OfflineDataset(
        trajectories=tuple(trajectories),
        obs_dim=spec.obs_dim,
        act_dim=spec.act_dim,
        metadata={
            "env": spec.name,
            "collector": collector,
            "seed": int(seed),
            "n_trajectories": n_trajectories,
            "success_rate": n_success / n_trajectories,
        },
    )


def normalize_rewards(dataset: OfflineDataset, mode: str) -> OfflineDataset:
    """Reward normalization: none, minmax_return (divide by the spread of
    trajectory returns) or sparse_shift (subtract 1; intended for {0, 1}
    sparse rewards, yielding {-1, 0})."""
    if mode not in NORMALIZATION_MODES:
        raise DatasetError(f"unknown normalization mode {mode!r}")
    if mode == "none":
        return dataset
    if dataset.reward_normalization != "none":
        raise DatasetError(
            f"dataset already normalized with {dataset.reward_normalization!r}"
        )
    if mode == "minmax_return":
        returns = dataset.returns()
        spread = float(returns.max() - returns.min())
        if len(dataset.trajectories) < 2 or spread <= 0.0:
            raise DatasetError("minmax_return needs >= 2 trajectories with distinct returns")
        transform = lambda r: r / spread
    else:  # sparse_shift
        transform = lambda r: r - 1.0
    new_trajs = tuple(
        Trajectory(
            states=t.states.copy(),
            actions=t.actions.copy(),
            rewards=transform(t.rewards.copy()),
            ends_terminal=t.ends_terminal,
        )
        for t in dataset.trajectories
    )
    return replace(
        dataset,
        trajectories=new_trajs,
        reward_normalization=mode,
        metadata={**dataset.metadata, "reward_normalization": mode},
    )


def save_dataset(dataset: OfflineDataset, path) -> None:
    meta = {
        "obs_dim": dataset.obs_dim,
        "act_dim": dataset.act_dim,
        "reward_normalization": dataset.reward_normalization,
        "n_trajectories": len(dataset.trajectories),
        "metadata": dataset.metadata,
    }
    meta_blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [_MAGIC, struct.pack("<I", _VERSION), struct.pack("<I", len(meta_blob)), meta_blob]
    for traj in dataset.trajectories:
        parts.append(struct.pack("<IB", len(traj), int(traj.ends_terminal)))
        for arr in (traj.states, traj.actions, traj.rewards):
            parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    body = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


def load_dataset(path) -> OfflineDataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != _MAGIC:
        raise DatasetFormatError(f"{path}: not a dataset file (bad magic)")
    body, footer = blob[:-4], blob[-4:]
    if struct.unpack("<I", footer)[0] != (zlib.crc32(body) & 0xFFFFFFFF):
        raise DatasetFormatError(f"{path}: checksum failure")
    offset = 4
    (version,) = struct.unpack_from("<I", body, offset)
    offset += 4
    if version != _VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version}")
    (meta_len,) = struct.unpack_from("<I", body, offset)
    offset += 4
    meta = json.loads(body[offset : offset + meta_len].decode("utf-8"))
    offset += meta_len
    obs_dim, act_dim = int(meta["obs_dim"]), int(meta["act_dim"])
    trajectories = []
    try:
        for _ in range(int(meta["n_trajectories"])):
            n, terminal = struct.unpack_from("<IB", body, offset)
            offset += 5
            sizes = ((n + 1) * obs_dim, n * act_dim, n)
            arrays = []
            for size, shape in zip(
                sizes, ((n + 1, obs_dim), (n, act_dim), (n,))
            ):
                arr = np.frombuffer(body, dtype="<f8", count=size, offset=offset)
                arrays.append(arr.astype(np.float64).reshape(shape))
                offset += size * 8
            trajectories.append(
                Trajectory(
                    states=arrays[0],
                    actions=arrays[1],
                    rewards=arrays[2],
                    ends_terminal=bool(terminal),
                )
            )
    except (struct.error, ValueError) as exc:
        raise DatasetFormatError(f"{path}: truncated file") from exc
    if offset != len(body):
        raise DatasetFormatError(f"{path}: trailing bytes after trajectories")
    return OfflineDataset(
        trajectories=tuple(trajectories),
        obs_dim=obs_dim,
        act_dim=act_dim,
        reward_normalization=meta["reward_normalization"],
        metadata=meta["metadata"],
    )
