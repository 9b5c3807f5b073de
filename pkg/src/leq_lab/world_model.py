"""Ensemble of Gaussian dynamics models for differentiable imagination.

Each member is an MLP mapping (state, action) to the mean and log-std of a
diagonal Gaussian over (state delta, reward). Members train independently
on a per-trajectory train/validation split; the five members with the best
validation NLL become the elites used for rollouts.

Rollouts sample one elite per step (uniformly) and draw reparameterized
noise, recording both so a rollout can be replayed bit-identically and
differentiated: with the (member, eps) tape frozen, sampled outputs are a
deterministic smooth function of states and actions, and `step_backward`
pushes cotangents on (next_state, reward) back to (state, action).
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import nn
from .rng import stream

__all__ = [
    "WorldModelError",
    "WorldModelConfig",
    "DynamicsNet",
    "EnsembleWorldModel",
    "ImaginedRollouts",
    "nll_loss",
    "train_ensemble",
    "sample_step",
    "step_with_tape",
    "step_backward",
    "imagine_rollout",
    "replay_rollout",
    "save_ensemble",
    "load_ensemble",
]

LOG_STD_MIN = -10.0
LOG_STD_MAX = 2.0
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


class WorldModelError(RuntimeError):
    pass


@dataclass(frozen=True)
class WorldModelConfig:
    n_members: int = 7
    n_elites: int = 5
    hidden_dims: tuple[int, ...] = (64, 64)
    activation: str = "elu"
    train_steps: int = 4000
    batch_size: int = 128
    lr: float = 1e-3
    val_fraction: float = 0.1
    val_interval: int = 100
    max_val_rows: int = 4096

    def __post_init__(self):
        if not 0 < self.n_elites <= self.n_members:
            raise ValueError("need 0 < n_elites <= n_members")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")

    def to_dict(self) -> dict:
        return {
            "n_members": self.n_members,
            "n_elites": self.n_elites,
            "hidden_dims": list(self.hidden_dims),
            "activation": self.activation,
            "train_steps": self.train_steps,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "val_fraction": self.val_fraction,
            "val_interval": self.val_interval,
            "max_val_rows": self.max_val_rows,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WorldModelConfig":
        d = dict(d)
        d["hidden_dims"] = tuple(d["hidden_dims"])
        return cls(**d)


def member_spec(obs_dim: int, act_dim: int, config: WorldModelConfig) -> nn.MlpSpec:
    return nn.MlpSpec(
        input_dim=obs_dim + act_dim,
        hidden_dims=config.hidden_dims,
        output_dim=2 * (obs_dim + 1),
        use_layernorm=False,
        use_symlog_input=False,
        activation=config.activation,
    )


@dataclass(frozen=True)
class DynamicsNet:
    spec: nn.MlpSpec
    params: np.ndarray
    log_std_min: float = LOG_STD_MIN
    log_std_max: float = LOG_STD_MAX


def _split_heads(out: np.ndarray, head_dim: int):
    """(mean, clamped log-std, clamp-interior mask) from raw net output."""
    mu = out[..., :head_dim]
    raw = out[..., head_dim:]
    log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
    interior = (raw > LOG_STD_MIN) & (raw < LOG_STD_MAX)
    return mu, log_std, interior


def _nll_from_heads(mu, log_std, targets):
    inv_var = np.exp(-2.0 * log_std)
    res = targets - mu
    per_row = 0.5 * res * res * inv_var + log_std + _HALF_LOG_2PI
    return float(per_row.sum(axis=-1).mean())


def nll_loss(net: DynamicsNet, states, actions, next_states, rewards) -> float:
    """Mean diagonal-Gaussian NLL of (next - state, reward) targets."""
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    next_states = np.atleast_2d(np.asarray(next_states, dtype=np.float64))
    rewards = np.asarray(rewards, dtype=np.float64).reshape(-1, 1)
    targets = np.concatenate([next_states - states, rewards], axis=1)
    out = nn.forward(net.spec, net.params, np.concatenate([states, actions], axis=1))
    mu, log_std, _ = _split_heads(out, targets.shape[1])
    loss = _nll_from_heads(mu, log_std, targets)
    if not np.isfinite(loss):
        raise WorldModelError("dynamics NLL diverged (non-finite loss)")
    return loss


def nll_grad(net: DynamicsNet, states, actions, next_states, rewards):
    """(loss, flat parameter gradient) for the mean NLL."""
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    next_states = np.atleast_2d(np.asarray(next_states, dtype=np.float64))
    rewards = np.asarray(rewards, dtype=np.float64).reshape(-1, 1)
    targets = np.concatenate([next_states - states, rewards], axis=1)
    x = np.concatenate([states, actions], axis=1)
    return _nll_grad_on(net.spec, net.params, x, targets, targets.shape[1])


def _nll_grad_on(spec, params, x, t, head_dim):
    out, cache = nn.forward_cached(spec, params, x)
    mu, log_std, interior = _split_heads(out, head_dim)
    inv_var = np.exp(-2.0 * log_std)
    res = t - mu
    loss = _nll_from_heads(mu, log_std, t)
    batch = x.shape[0]
    g_mu = -res * inv_var / batch
    g_log_std = (1.0 - res * res * inv_var) / batch * interior
    grad, _ = nn.backward_cached(spec, params, cache, np.concatenate([g_mu, g_log_std], axis=1))
    return loss, grad


def _split_rows(dataset, rng, val_fraction: float):
    """Per-trajectory 90/10 row split; falls back to row split for one traj."""
    lengths = [traj.rewards.shape[0] for traj in dataset.trajectories]
    n_traj = len(lengths)
    offsets = np.concatenate([[0], np.cumsum(lengths)])
    if n_traj >= 2:
        order = rng.permutation(n_traj)
        n_val = max(1, int(round(val_fraction * n_traj)))
        if n_val >= n_traj:
            n_val = n_traj - 1
        val_traj = set(order[:n_val].tolist())
        val_rows = np.concatenate(
            [np.arange(offsets[i], offsets[i + 1]) for i in sorted(val_traj)]
        )
        train_rows = np.concatenate(
            [np.arange(offsets[i], offsets[i + 1]) for i in range(n_traj) if i not in val_traj]
        )
    else:
        rows = rng.permutation(int(offsets[-1]))
        n_val = max(1, int(round(val_fraction * rows.size)))
        val_rows, train_rows = rows[:n_val], rows[n_val:]
    return np.sort(train_rows), np.sort(val_rows)


@dataclass(frozen=True)
class EnsembleWorldModel:
    obs_dim: int
    act_dim: int
    spec: nn.MlpSpec
    member_params: np.ndarray  # (M, P)
    val_nll: np.ndarray  # (M,)
    elite_idx: tuple[int, ...]  # sorted by validation NLL, best first
    config: WorldModelConfig = field(default_factory=WorldModelConfig)

    def __post_init__(self):
        if len(self.elite_idx) != self.config.n_elites:
            raise WorldModelError(
                f"expected {self.config.n_elites} elites, got {len(self.elite_idx)}"
            )
        self.member_params.flags.writeable = False

    def member(self, idx: int) -> DynamicsNet:
        return DynamicsNet(spec=self.spec, params=self.member_params[idx])

    @cached_property
    def _layer_stacks(self):
        """Per-layer (W (M,in,out), b (M,out)) stacks for gathered rollouts."""
        layout = nn.param_layout(self.spec)
        names = [name for name, _, _ in layout]
        stacks = []
        for i in range(len(self.spec.hidden_dims) + 1):
            w_name = f"w{i}" if f"w{i}" in names else "w_out"
            b_name = f"b{i}" if f"b{i}" in names else "b_out"
            w_meta = next(m for m in layout if m[0] == w_name)
            b_meta = next(m for m in layout if m[0] == b_name)
            w = self.member_params[:, w_meta[1] : w_meta[1] + int(np.prod(w_meta[2]))]
            b = self.member_params[:, b_meta[1] : b_meta[1] + int(np.prod(b_meta[2]))]
            stacks.append((w.reshape((-1,) + w_meta[2]), b.reshape((-1,) + b_meta[2])))
        return stacks


def train_ensemble(dataset, config: WorldModelConfig, seed: int) -> EnsembleWorldModel:
    """Train all members on a shared split; pick elites by validation NLL."""
    states, actions, rewards, next_states, _ = dataset.flat_arrays()
    if states.shape[0] < 20:
        raise WorldModelError(f"need at least 20 transitions, got {states.shape[0]}")
    spec = member_spec(dataset.obs_dim, dataset.act_dim, config)
    inputs = np.concatenate([states, actions], axis=1)
    targets = np.concatenate([next_states - states, rewards[:, None]], axis=1)

    train_rows, val_rows = _split_rows(dataset, stream(seed, "wm.split"), config.val_fraction)
    val_rows = val_rows[: config.max_val_rows]
    x_tr, t_tr = inputs[train_rows], targets[train_rows]
    x_val, t_val = inputs[val_rows], targets[val_rows]
    head_dim = dataset.obs_dim + 1

    def val_score(params):
        out = nn.forward(spec, params, x_val)
        mu, log_std, _ = _split_heads(out, head_dim)
        return _nll_from_heads(mu, log_std, t_val)

    n_p = nn.n_params(spec)
    member_params = np.zeros((config.n_members, n_p))
    val_nll = np.full(config.n_members, np.inf)
    for m in range(config.n_members):
        rng = stream(seed, "wm.member", m)
        params = nn.init_params(spec, rng)
        adam = nn.init_adam(n_p, config.lr)
        best = (np.inf, params.copy())
        diverged = False
        for step in range(config.train_steps):
            idx = rng.integers(0, x_tr.shape[0], size=config.batch_size)
            loss, grad = _nll_grad_on(spec, params, x_tr[idx], t_tr[idx], head_dim)
            if not np.isfinite(loss):
                diverged = True
                break
            adam, params = nn.adam_step(adam, params, grad)
            if (step + 1) % config.val_interval == 0 or step + 1 == config.train_steps:
                score = val_score(params)
                if np.isfinite(score) and score < best[0]:
                    best = (score, params.copy())
        if not diverged and np.isfinite(best[0]):
            member_params[m] = best[1]
            val_nll[m] = best[0]
    order = np.argsort(val_nll, kind="stable")
    elites = [int(i) for i in order[: config.n_elites]]
    if not np.isfinite(val_nll[elites]).all():
        n_ok = int(np.isfinite(val_nll).sum())
        raise WorldModelError(
            f"only {n_ok} members trained to a finite validation NLL; need {config.n_elites}"
        )
    return EnsembleWorldModel(
        obs_dim=dataset.obs_dim,
        act_dim=dataset.act_dim,
        spec=spec,
        member_params=member_params,
        val_nll=val_nll,
        elite_idx=tuple(elites),
        config=config,
    )


@dataclass
class StepCache:
    """Everything needed to push cotangents back through one sampled step."""

    x: np.ndarray  # (B, S+A) concatenated inputs
    pre: list  # per hidden layer: pre-activation (B, width)
    member: np.ndarray  # (B,) absolute member indices
    sigma: np.ndarray  # (B, S+1)
    eps: np.ndarray  # (B, S+1)
    interior: np.ndarray  # (B, S+1) log-std clamp interior mask
    groups: list  # per distinct member: (member id, row index array)


def _elu(z: np.ndarray) -> np.ndarray:
    # expm1 sees only the clamped-to-zero half, skipping its slow large-x path
    return np.expm1(np.minimum(z, 0.0)) + np.maximum(z, 0.0)


def _member_groups(member: np.ndarray) -> list:
    """Rows grouped by member id so each group runs as one dense matmul."""
    order = np.argsort(member, kind="stable")
    ids = member[order]
    cuts = np.flatnonzero(ids[1:] != ids[:-1]) + 1
    return [
        (int(member[chunk[0]]), chunk)
        for chunk in np.split(order, cuts)
    ]


def _gathered_forward(ensemble: EnsembleWorldModel, member: np.ndarray, x: np.ndarray):
    """Forward each row through its own member; returns (out, pre, groups)."""
    stacks = ensemble._layer_stacks
    groups = _member_groups(member)
    B = x.shape[0]
    pre = [np.empty((B, w.shape[2])) for w, _ in stacks[:-1]]
    out = np.empty((B, stacks[-1][0].shape[2]))
    for m, rows in groups:
        a = x[rows]
        for i, (w, b) in enumerate(stacks[:-1]):
            z = a @ w[m] + b[m]
            pre[i][rows] = z
            a = _elu(z)
        w, b = stacks[-1]
        out[rows] = a @ w[m] + b[m]
    return out, pre, groups


def step_with_tape(ensemble: EnsembleWorldModel, states, actions, member, eps):
    """Deterministic sampled step given a frozen (member, eps) tape.

    Returns (next_states, rewards, cache); next = state + predicted delta.
    """
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    member = np.asarray(member, dtype=np.intp).reshape(-1)
    eps = np.atleast_2d(np.asarray(eps, dtype=np.float64))
    x = np.concatenate([states, actions], axis=1)
    out, pre, groups = _gathered_forward(ensemble, member, x)
    head_dim = ensemble.obs_dim + 1
    mu, log_std, interior = _split_heads(out, head_dim)
    sigma = np.exp(log_std)
    sample = mu + sigma * eps
    next_states = states + sample[:, : ensemble.obs_dim]
    rewards = sample[:, ensemble.obs_dim]
    cache = StepCache(
        x=x, pre=pre, member=member, sigma=sigma, eps=eps, interior=interior, groups=groups
    )
    return next_states, rewards, cache


def step_backward(ensemble: EnsembleWorldModel, cache: StepCache, g_next, g_reward):
    """Cotangents on (next_state, reward) -> cotangents on (state, action).

    The skip connection next = state + delta is included: the returned state
    gradient already contains the identity term from g_next.
    """
    g_next = np.atleast_2d(np.asarray(g_next, dtype=np.float64))
    g_reward = np.asarray(g_reward, dtype=np.float64).reshape(-1)
    g_sample = np.concatenate([g_next, g_reward[:, None]], axis=1)
    g_mu = g_sample
    g_log_std = g_sample * cache.eps * cache.sigma * cache.interior
    g_out = np.concatenate([g_mu, g_log_std], axis=1)
    stacks = ensemble._layer_stacks
    g_in = np.empty_like(cache.x)
    for m, rows in cache.groups:
        g = g_out[rows] @ stacks[-1][0][m].T
        for layer in range(len(cache.pre) - 1, -1, -1):
            z = cache.pre[layer][rows]
            g = (g * np.where(z > 0.0, 1.0, _elu(z) + 1.0)) @ stacks[layer][0][m].T
        g_in[rows] = g
    g_state = g_in[:, : ensemble.obs_dim] + g_next
    g_action = g_in[:, ensemble.obs_dim :]
    return g_state, g_action


def sample_step(ensemble: EnsembleWorldModel, state, action, rng, differentiable: bool = False):
    """One stochastic step: uniform elite choice + reparameterized noise.

    Accepts a single (S,) state or a (B, S) batch; returns matching shapes.
    With differentiable=True a fourth element (eps, cache) is appended so the
    step can be replayed and back-propagated.
    """
    state = np.asarray(state, dtype=np.float64)
    single = state.ndim == 1
    states = np.atleast_2d(state)
    actions = np.atleast_2d(np.asarray(action, dtype=np.float64))
    batch = states.shape[0]
    elite_arr = np.asarray(ensemble.elite_idx, dtype=np.intp)
    member = elite_arr[rng.integers(0, elite_arr.size, size=batch)]
    eps = rng.standard_normal((batch, ensemble.obs_dim + 1))
    next_states, rewards, cache = step_with_tape(ensemble, states, actions, member, eps)
    if single:
        result = (next_states[0], float(rewards[0]), int(member[0]))
    else:
        result = (next_states, rewards, member)
    if differentiable:
        return result + ((eps if not single else eps[0], cache),)
    return result


@dataclass
class ImaginedRollouts:
    """Padded batch of imagined trajectories with replay tapes.

    Row b has t_eff[b] valid transitions; states/rewards past that are
    frozen/zeroed padding. `terminal[b]` marks rollouts that ended in a
    terminal state (their final state is states[b, t_eff[b]]); `nonfinite`
    flags rows truncated because the model produced a non-finite state.
    """

    states: np.ndarray  # (B, H+1, S)
    actions: np.ndarray  # (B, H, A)
    rewards: np.ndarray  # (B, H)
    member_ids: np.ndarray  # (B, H) absolute member indices
    eps: np.ndarray  # (B, H, S+1)
    t_eff: np.ndarray  # (B,) valid transition counts
    terminal: np.ndarray  # (B,) bool
    nonfinite: np.ndarray  # (B,) bool
    caches: list | None = None  # per-step StepCache when differentiable

    @property
    def horizon(self) -> int:
        return self.rewards.shape[1]


def _run_rollout(
    ensemble: EnsembleWorldModel,
    policy,
    start_states: np.ndarray,
    member_ids: np.ndarray,
    eps: np.ndarray,
    termination,
    action_noise: np.ndarray | None,
    differentiable: bool,
) -> ImaginedRollouts:
    batch, horizon = member_ids.shape
    obs_dim, act_dim = ensemble.obs_dim, ensemble.act_dim
    states = np.zeros((batch, horizon + 1, obs_dim))
    actions = np.zeros((batch, horizon, act_dim))
    rewards = np.zeros((batch, horizon))
    states[:, 0] = start_states
    alive = ~np.asarray(termination(start_states), dtype=bool)
    t_eff = np.zeros(batch, dtype=np.intp)
    terminal = ~alive  # start states already inside a terminal set
    nonfinite = np.zeros(batch, dtype=bool)
    caches = [] if differentiable else None
    s = start_states.copy()
    for k in range(horizon):
        a = np.clip(np.atleast_2d(np.asarray(policy(s), dtype=np.float64)), -1.0, 1.0)
        if action_noise is not None:
            a = np.clip(a + action_noise[:, k], -1.0, 1.0)
        nxt, r, cache = step_with_tape(ensemble, s, a, member_ids[:, k], eps[:, k])
        if differentiable:
            caches.append(cache)
        finite = np.isfinite(nxt).all(axis=1) & np.isfinite(r)
        bad = alive & ~finite
        nonfinite |= bad
        step_ok = alive & finite
        actions[:, k] = np.where(step_ok[:, None], a, 0.0)
        rewards[:, k] = np.where(step_ok, r, 0.0)
        s = np.where(step_ok[:, None], nxt, s)
        states[:, k + 1] = s
        t_eff[step_ok] = k + 1
        done_now = step_ok & np.asarray(termination(s), dtype=bool)
        terminal |= done_now
        alive = step_ok & ~done_now
    return ImaginedRollouts(
        states=states,
        actions=actions,
        rewards=rewards,
        member_ids=member_ids,
        eps=eps,
        t_eff=t_eff,
        terminal=terminal,
        nonfinite=nonfinite,
        caches=caches,
    )


def imagine_rollout(
    ensemble: EnsembleWorldModel,
    policy,
    start_states,
    horizon: int,
    termination,
    action_noise_sigma: float,
    rng,
    differentiable: bool = False,
) -> ImaginedRollouts:
    """Roll the policy through per-step sampled elites for `horizon` steps."""
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    start_states = np.atleast_2d(np.asarray(start_states, dtype=np.float64))
    batch = start_states.shape[0]
    elite_arr = np.asarray(ensemble.elite_idx, dtype=np.intp)
    member_ids = elite_arr[rng.integers(0, elite_arr.size, size=(batch, horizon))]
    eps = rng.standard_normal((batch, horizon, ensemble.obs_dim + 1))
    noise = None
    if action_noise_sigma > 0.0:
        noise = action_noise_sigma * rng.standard_normal((batch, horizon, ensemble.act_dim))
    return _run_rollout(
        ensemble, policy, start_states, member_ids, eps, termination, noise, differentiable
    )


def replay_rollout(
    ensemble: EnsembleWorldModel,
    policy,
    start_states,
    member_ids,
    eps,
    termination,
    action_noise=None,
    differentiable: bool = False,
) -> ImaginedRollouts:
    """Re-run a rollout under frozen (member, eps) tapes.

    With the same policy this reproduces the original bit-for-bit; with a
    perturbed policy it realizes the common-random-numbers path used by
    finite-difference gradient checks.
    """
    start_states = np.atleast_2d(np.asarray(start_states, dtype=np.float64))
    member_ids = np.asarray(member_ids, dtype=np.intp)
    eps = np.asarray(eps, dtype=np.float64)
    return _run_rollout(
        ensemble, policy, start_states, member_ids, eps, termination, action_noise, differentiable
    )


_ENSEMBLE_MAGIC = b"LEQE"


def save_ensemble(path, ensemble: EnsembleWorldModel) -> None:
    header = {
        "format": "leq-lab-ensemble",
        "version": 1,
        "obs_dim": ensemble.obs_dim,
        "act_dim": ensemble.act_dim,
        "spec": ensemble.spec.to_dict(),
        "config": ensemble.config.to_dict(),
        "val_nll": [float(v) for v in ensemble.val_nll],
        "elite_idx": list(ensemble.elite_idx),
        "n_members": int(ensemble.member_params.shape[0]),
        "n_params": int(ensemble.member_params.shape[1]),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    body = ensemble.member_params.astype("<f8").tobytes()
    payload = _ENSEMBLE_MAGIC + struct.pack("<I", len(blob)) + blob + body
    payload += struct.pack("<I", zlib.crc32(payload))
    with open(path, "wb") as fh:
        fh.write(payload)


def load_ensemble(path) -> EnsembleWorldModel:
    with open(path, "rb") as fh:
        payload = fh.read()
    if len(payload) < 8 or payload[:4] != _ENSEMBLE_MAGIC:
        raise WorldModelError("not an ensemble checkpoint")
    body, (crc,) = payload[:-4], struct.unpack("<I", payload[-4:])
    if zlib.crc32(body) != crc:
        raise WorldModelError("ensemble checkpoint failed checksum")
    (hlen,) = struct.unpack("<I", body[4:8])
    header = json.loads(body[8 : 8 + hlen].decode("utf-8"))
    if header.get("version") != 1:
        raise WorldModelError(f"unsupported ensemble version {header.get('version')}")
    raw = np.frombuffer(body[8 + hlen :], dtype="<f8")
    params = raw.reshape(header["n_members"], header["n_params"]).copy()
    return EnsembleWorldModel(
        obs_dim=header["obs_dim"],
        act_dim=header["act_dim"],
        spec=nn.MlpSpec.from_dict(header["spec"]),
        member_params=params,
        val_nll=np.asarray(header["val_nll"], dtype=np.float64),
        elite_idx=tuple(header["elite_idx"]),
        config=WorldModelConfig.from_dict(header["config"]),
    )
