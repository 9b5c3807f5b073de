"""Conservative model-based actor-critic on imagined lambda-returns.

The critic minimizes an asymmetric (expectile) squared error against
lambda-return targets computed on imagined rollouts, blended with a
one-step real-data Bellman loss and an EMA anchor:

    L(phi) = beta * L_model + (1 - beta) * L_env + omega * L_ema.

With tau < 0.5, targets above the current estimate are down-weighted, so
the critic tracks a lower expectile of the imagined return distribution
and stays pessimistic about transitions the world model invents.

The actor ascends the same expectile objective through its differentiable
surrogate: lambda-returns are recomputed as explicit functions of rollout
rewards, states and actions (with the per-step (member, eps) tapes and the
expectile weights frozen), and the gradient flows through the reparameter-
ized model steps and the deterministic policy, DDPG-style. At tau = 0.5
both updates reduce to standard lambda-return actor-critic up to a factor
of one half.

Ablation switches select plain or LCB-penalized targets, one-step or
H-step critic targets, and value-gradient or advantage-weighted policy
updates, so baseline variants share every other code path.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, replace

import numpy as np

from . import envs, nn, returns, world_model
from .expectile import ExpectileParam, expectile_weight
from .rng import stream

__all__ = [
    "AgentError",
    "DivergenceError",
    "AgentConfig",
    "MlpPolicy",
    "MlpCritic",
    "ModelStateBuffer",
    "AgentState",
    "build_agent",
    "critic_loss_model",
    "critic_loss_env",
    "critic_loss_ema",
    "critic_loss_total",
    "policy_loss_surrogate",
    "mobile_lcb_target",
    "awr_policy_loss",
    "pretrain_bc",
    "pretrain_fqe",
    "expand_dataset",
    "train_step",
    "evaluate_policy",
    "save_agent",
    "load_agent",
]

CONSERVATISM_MODES = ("lower_expectile", "mobile_lcb", "none")
CRITIC_TARGET_MODES = ("lambda", "one_step", "h_step")
POLICY_UPDATE_MODES = ("lambda_expectile", "q_value", "awr")


class AgentError(RuntimeError):
    pass


class DivergenceError(AgentError):
    """A loss or gradient went non-finite; carries a diagnostic snapshot."""

    def __init__(self, message: str, snapshot: dict | None = None):
        super().__init__(message)
        self.snapshot = snapshot or {}


@dataclass(frozen=True)
class AgentConfig:
    tau: float = 0.1
    lam: float = 0.95
    gamma: float = 0.997
    horizon: int = 10
    rollout_r: int = 5
    beta: float = 0.25
    omega_ema: float = 1.0
    sigma_exp: float = 1.0
    lr_actor: float = 3e-5
    lr_critic: float = 1e-4
    batch_env: int = 256
    batch_model: int = 256
    t_expand: int = 5000
    n_expand: int = 50000
    n_iter: int = 50000
    ema_decay: float = 0.995
    hidden_actor: tuple[int, ...] = (256, 256)
    hidden_critic: tuple[int, ...] = (256, 256)
    bc_steps: int = 2000
    fqe_steps: int = 20000
    lr_pretrain: float = 1e-3
    conservatism: str = "lower_expectile"
    lcb_c: float = 1.0
    critic_target: str = "lambda"
    policy_update: str = "lambda_expectile"
    awr_alpha: float = 1.0
    use_expansion: bool = True
    pretrain: bool = True

    def __post_init__(self):
        ExpectileParam(self.tau)  # bounds check
        if not 0.0 <= self.lam < 1.0:
            raise ValueError(f"lambda must lie in [0, 1), got {self.lam}")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.horizon < 1 or self.rollout_r < 1:
            raise ValueError("horizon and rollout_r must be positive")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")
        if self.omega_ema < 0.0 or self.sigma_exp < 0.0:
            raise ValueError("omega_ema and sigma_exp must be nonnegative")
        if min(self.lr_actor, self.lr_critic, self.lr_pretrain) <= 0.0:
            raise ValueError("learning rates must be positive")
        if min(self.batch_env, self.batch_model, self.t_expand, self.n_expand, self.n_iter) <= 0:
            raise ValueError("batch sizes and schedule counters must be positive")
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError(f"ema_decay must lie in (0, 1), got {self.ema_decay}")
        if self.conservatism not in CONSERVATISM_MODES:
            raise ValueError(f"conservatism must be one of {CONSERVATISM_MODES}")
        if self.critic_target not in CRITIC_TARGET_MODES:
            raise ValueError(f"critic_target must be one of {CRITIC_TARGET_MODES}")
        if self.policy_update not in POLICY_UPDATE_MODES:
            raise ValueError(f"policy_update must be one of {POLICY_UPDATE_MODES}")

    def to_dict(self) -> dict:
        d = {}
        for name in self.__dataclass_fields__:
            value = getattr(self, name)
            d[name] = list(value) if isinstance(value, tuple) else value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AgentConfig":
        d = dict(d)
        for name in ("hidden_actor", "hidden_critic"):
            if name in d:
                d[name] = tuple(d[name])
        return cls(**d)

    def desk_scale(self) -> "AgentConfig":
        """Laptop-budget preset: smaller nets, batches, expansion cadence."""
        return replace(
            self,
            hidden_actor=(64, 64),
            hidden_critic=(64, 64),
            batch_env=128,
            batch_model=64,
            n_iter=50000,
            n_expand=5000,
            t_expand=1000,
        )


@dataclass
class MlpPolicy:
    """Deterministic tanh-squashed policy; callable on (S,) or (B, S)."""

    spec: nn.MlpSpec
    params: np.ndarray

    def __call__(self, states):
        return np.tanh(nn.forward(self.spec, self.params, states))


@dataclass
class MlpCritic:
    """Scalar Q network over concatenated (state, action)."""

    spec: nn.MlpSpec
    params: np.ndarray

    def __call__(self, states, actions):
        states = np.asarray(states, dtype=np.float64)
        single = states.ndim == 1
        x = np.concatenate([np.atleast_2d(states), np.atleast_2d(actions)], axis=1)
        q = nn.forward(self.spec, self.params, x)[:, 0]
        return float(q[0]) if single else q


def policy_spec_for(obs_dim: int, act_dim: int, hidden: tuple[int, ...]) -> nn.MlpSpec:
    return nn.MlpSpec(
        input_dim=obs_dim,
        hidden_dims=hidden,
        output_dim=act_dim,
        use_layernorm=False,
        use_symlog_input=False,
        activation="elu",
    )


def critic_spec_for(obs_dim: int, act_dim: int, hidden: tuple[int, ...]) -> nn.MlpSpec:
    return nn.MlpSpec(
        input_dim=obs_dim + act_dim,
        hidden_dims=hidden,
        output_dim=1,
        use_layernorm=True,
        use_symlog_input=True,
        activation="elu",
    )


@dataclass
class ModelStateBuffer:
    """Ring buffer of imagination start states."""

    data: np.ndarray  # (capacity, S)
    size: int = 0
    cursor: int = 0

    @classmethod
    def create(cls, capacity: int, obs_dim: int) -> "ModelStateBuffer":
        return cls(data=np.zeros((capacity, obs_dim)))

    @property
    def capacity(self) -> int:
        return self.data.shape[0]

    def insert(self, states: np.ndarray) -> None:
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        for row in states:  # wraps at most once per row; capacity >> batch
            self.data[self.cursor] = row
            self.cursor = (self.cursor + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)

    def sample(self, n: int, rng) -> np.ndarray:
        if self.size == 0:
            raise AgentError("cannot sample from an empty state buffer")
        return self.data[rng.integers(0, self.size, size=n)]


@dataclass
class AgentState:
    config: AgentConfig
    env_spec: envs.EnvSpec
    policy_spec: nn.MlpSpec
    critic_spec: nn.MlpSpec
    policy_params: np.ndarray
    critic_params: np.ndarray
    critic_ema: nn.EmaTracker
    adam_actor: nn.AdamState
    adam_critic: nn.AdamState
    buffer: ModelStateBuffer
    step: int = 0

    @property
    def policy(self) -> MlpPolicy:
        return MlpPolicy(self.policy_spec, self.policy_params)

    @property
    def critic(self) -> MlpCritic:
        return MlpCritic(self.critic_spec, self.critic_params)

    @property
    def critic_shadow(self) -> MlpCritic:
        return MlpCritic(self.critic_spec, self.critic_ema.shadow)


def build_agent(config: AgentConfig, env_spec: envs.EnvSpec, seed: int) -> AgentState:
    p_spec = policy_spec_for(env_spec.obs_dim, env_spec.act_dim, config.hidden_actor)
    c_spec = critic_spec_for(env_spec.obs_dim, env_spec.act_dim, config.hidden_critic)
    p_params = nn.init_params(p_spec, stream(seed, "init.policy"))
    c_params = nn.init_params(c_spec, stream(seed, "init.critic"))
    return AgentState(
        config=config,
        env_spec=env_spec,
        policy_spec=p_spec,
        critic_spec=c_spec,
        policy_params=p_params,
        critic_params=c_params,
        critic_ema=nn.init_ema(c_params, config.ema_decay),
        adam_actor=nn.init_adam(p_params.size, config.lr_actor),
        adam_critic=nn.init_adam(c_params.size, config.lr_critic),
        buffer=ModelStateBuffer.create(10 * config.n_expand, env_spec.obs_dim),
    )


# ---------------------------------------------------------------------------
# forward helpers


def _critic_forward(spec, params, states, actions):
    x = np.concatenate([np.atleast_2d(states), np.atleast_2d(actions)], axis=1)
    q, cache = nn.forward_cached(spec, params, x)
    return q[:, 0], cache


def _policy_forward(spec, params, states):
    pre, cache = nn.forward_cached(spec, params, np.atleast_2d(states))
    return np.tanh(pre), cache, pre


@dataclass
class _PolicyEval:
    """Stacked policy forward over every rollout state, k-major.

    Row k * B + b corresponds to rollouts.states[b, k]; keeping the cache
    lets later backward passes reuse the forward instead of recomputing it.
    """

    flat_states: np.ndarray  # (K*B, S)
    acts: np.ndarray  # (K*B, A)
    cache: tuple


@dataclass
class _CriticEval:
    """Stacked critic forward over (state, pi(state)) rows of a rollout."""

    q: np.ndarray  # (K*B,)
    cache: tuple
    boot_q: np.ndarray  # (B, H+1), terminal apex zeroed
    boot_actions: np.ndarray  # (B, H+1, A)


def _policy_eval(plan, rollouts) -> _PolicyEval:
    B, Hp1, S = rollouts.states.shape
    flat = rollouts.states.transpose(1, 0, 2).reshape(Hp1 * B, S)
    pre, cache = nn.forward_cached(plan.policy_spec, plan.policy_params, flat)
    return _PolicyEval(flat, np.tanh(pre), cache)


def _critic_eval(plan, rollouts, pol: _PolicyEval, critic_params=None) -> _CriticEval:
    B, Hp1, S = rollouts.states.shape
    params = plan.critic_params if critic_params is None else critic_params
    q, cache = nn.forward_cached(
        plan.critic_spec, params, np.concatenate([pol.flat_states, pol.acts], axis=1)
    )
    q = q[:, 0]
    boot_q = np.ascontiguousarray(q.reshape(Hp1, B).T)
    rows = np.arange(B)
    apex = rollouts.t_eff
    boot_q[rows, apex] = np.where(rollouts.terminal, 0.0, boot_q[rows, apex])
    boot_actions = pol.acts.reshape(Hp1, B, -1).transpose(1, 0, 2)
    return _CriticEval(q, cache, boot_q, boot_actions)


def _slice_cache(cache, lo: int, hi: int):
    """Row-slice a forward cache so backward_cached can run on a sub-batch."""
    raw_in, x0, layers, last, squeeze = cache
    sub = [
        (
            a[lo:hi],
            z[lo:hi],
            None if norm is None else norm[lo:hi],
            None if inv_std is None else inv_std[lo:hi],
            out[lo:hi],
        )
        for a, z, norm, inv_std, out in layers
    ]
    return raw_in[lo:hi], x0[lo:hi], sub, last[lo:hi], squeeze


def _rollout_bootstraps(plan, rollouts, critic_params):
    """Critic values q[b, k] = Q(s_k, pi(s_k)) over all rollout states.

    Returns (q (B, H+1), actions (B, H+1, A)); the terminal apex is zeroed
    where the rollout ended in a terminal state.
    """
    pol = _policy_eval(plan, rollouts)
    ce = _critic_eval(plan, rollouts, pol, critic_params)
    return ce.boot_q, ce.boot_actions


@dataclass
class _Plan:
    """Parameter bundle threaded through loss computations."""

    policy_spec: nn.MlpSpec
    policy_params: np.ndarray
    critic_spec: nn.MlpSpec
    critic_params: np.ndarray


def _plan_of(state: AgentState) -> _Plan:
    return _Plan(state.policy_spec, state.policy_params, state.critic_spec, state.critic_params)


def _model_targets(plan, config: AgentConfig, ensemble, rollouts, boot_q=None):
    """Per-(rollout, t) critic regression targets and the valid mask.

    critic_target picks the target family: normalized lambda-mixture,
    one-step, or the single full-horizon n-step return. conservatism
    "mobile_lcb" instead builds one-step ensemble targets penalized by c
    times the population std of the bootstrapped values.
    """
    if boot_q is None:
        boot_q, _ = _rollout_bootstraps(plan, rollouts, plan.critic_params)
    if config.conservatism == "mobile_lcb":
        return _mobile_targets(plan, config, ensemble, rollouts, boot_q)
    lam = {"lambda": config.lam, "one_step": 0.0}.get(config.critic_target)
    if lam is not None:
        qlam, valid = returns.lambda_return_batch(
            rollouts.rewards, boot_q, rollouts.t_eff, lam, config.gamma
        )
        return qlam, valid
    # h_step: single n-step return over the whole remaining rollout
    B, H = rollouts.rewards.shape
    targets = np.zeros((B, H))
    valid = np.arange(H)[None, :] < rollouts.t_eff[:, None]
    for t in range(H):
        rows = rollouts.t_eff > t
        if not rows.any():
            continue
        m = rollouts.t_eff - t
        acc = np.zeros(B)
        for i in range(1, H - t + 1):
            acc = acc + config.gamma ** (i - 1) * rollouts.rewards[:, t + i - 1] * (
                (t + i) <= rollouts.t_eff
            )
        apex_q = boot_q[np.arange(B), rollouts.t_eff]
        targets[:, t] = np.where(rows, acc + config.gamma**m * apex_q, 0.0)
    return targets, valid


def _mobile_targets(plan, config: AgentConfig, ensemble, rollouts, boot_q):
    """One-step targets r + gamma*Q(s', pi(s')) averaged over all elites,
    penalized by c times their population std (LCB-style baseline)."""
    B, H = rollouts.rewards.shape
    valid = np.arange(H)[None, :] < rollouts.t_eff[:, None]
    flat_idx = np.argwhere(valid)
    if flat_idx.size == 0:
        return np.zeros((B, H)), valid
    s = rollouts.states[flat_idx[:, 0], flat_idx[:, 1]]
    a = rollouts.actions[flat_idx[:, 0], flat_idx[:, 1]]
    preds_q = []
    preds_r = []
    x = np.concatenate([s, a], axis=1)
    for m in ensemble.elite_idx:
        out = nn.forward(ensemble.spec, ensemble.member_params[m], x)
        mu = out[:, : ensemble.obs_dim + 1]
        nxt = s + mu[:, : ensemble.obs_dim]
        r = mu[:, ensemble.obs_dim]
        acts = np.tanh(nn.forward(plan.policy_spec, plan.policy_params, nxt))
        q = nn.forward(plan.critic_spec, plan.critic_params, np.concatenate([nxt, acts], axis=1))[
            :, 0
        ]
        preds_r.append(r + config.gamma * q)
        preds_q.append(q)
    preds_r = np.stack(preds_r)  # (E, N)
    preds_q = np.stack(preds_q)
    lcb = preds_r.mean(axis=0) - config.lcb_c * preds_q.std(axis=0)
    targets = np.zeros((B, H))
    targets[flat_idx[:, 0], flat_idx[:, 1]] = lcb
    return targets, valid


def mobile_lcb_target(rewards, next_q, gamma: float, c: float) -> float:
    """LCB one-step target from per-member (reward, bootstrap) samples.

    rewards, next_q: aligned 1-D arrays, one entry per ensemble member.
    """
    rewards = np.asarray(rewards, dtype=np.float64).reshape(-1)
    next_q = np.asarray(next_q, dtype=np.float64).reshape(-1)
    if rewards.size < 2 or next_q.size != rewards.size:
        raise AgentError("need at least 2 aligned ensemble samples")
    values = rewards + gamma * next_q
    return float(values.mean() - c * next_q.std())


# ---------------------------------------------------------------------------
# critic losses


def critic_loss_model(
    plan, config: AgentConfig, ensemble, rollouts, with_grad: bool = False, pol=None
):
    """Asymmetric squared error of Q(s_t, pi(s_t)) against rollout targets."""
    if pol is None:
        pol = _policy_eval(plan, rollouts)
    ce = _critic_eval(plan, rollouts, pol)
    targets, valid = _model_targets(plan, config, ensemble, rollouts, boot_q=ce.boot_q)
    n_valid = int(valid.sum())
    if n_valid == 0:
        zero = np.zeros_like(plan.critic_params) if with_grad else None
        return (0.0, zero) if with_grad else 0.0
    tau = 0.5 if config.conservatism != "lower_expectile" else config.tau
    B = valid.shape[0]
    flat_idx = np.argwhere(valid)
    rows = flat_idx[:, 1] * B + flat_idx[:, 0]  # k-major row of (b, t)
    diff = ce.q[rows] - targets[flat_idx[:, 0], flat_idx[:, 1]]
    w = expectile_weight(diff, tau)
    loss = float((w * diff * diff).mean())
    if not with_grad:
        return loss
    cot = np.zeros((ce.q.size, 1))
    cot[rows, 0] = 2.0 * w * diff / n_valid
    grad, _ = nn.backward_cached(plan.critic_spec, plan.critic_params, ce.cache, cot)
    return loss, grad


def critic_loss_env(plan, config: AgentConfig, batch: dict, with_grad: bool = False):
    """One-step Bellman regression on real transitions, target frozen."""
    next_acts = np.tanh(nn.forward(plan.policy_spec, plan.policy_params, batch["next_states"]))
    next_q = nn.forward(
        plan.critic_spec,
        plan.critic_params,
        np.concatenate([batch["next_states"], next_acts], axis=1),
    )[:, 0]
    target = batch["rewards"] + config.gamma * (1.0 - batch["terminals"]) * next_q
    q, cache = _critic_forward(plan.critic_spec, plan.critic_params, batch["states"], batch["actions"])
    diff = q - target
    loss = float(0.5 * (diff * diff).mean())
    if not with_grad:
        return loss
    cot = (diff / diff.size)[:, None]
    grad, _ = nn.backward_cached(plan.critic_spec, plan.critic_params, cache, cot)
    return loss, grad


def critic_loss_ema(plan, shadow_params, batch: dict, with_grad: bool = False):
    """Squared drift of the critic from its EMA shadow on real (s, a)."""
    q_shadow = nn.forward(
        plan.critic_spec,
        shadow_params,
        np.concatenate([batch["states"], batch["actions"]], axis=1),
    )[:, 0]
    q, cache = _critic_forward(plan.critic_spec, plan.critic_params, batch["states"], batch["actions"])
    diff = q - q_shadow
    loss = float((diff * diff).mean())
    if not with_grad:
        return loss
    cot = (2.0 * diff / diff.size)[:, None]
    grad, _ = nn.backward_cached(plan.critic_spec, plan.critic_params, cache, cot)
    return loss, grad


def critic_loss_total(
    plan, config: AgentConfig, ensemble, rollouts, env_batch, shadow_params, pol=None
):
    """beta * L_model + (1 - beta) * L_env + omega * L_ema, with gradient.

    The env and EMA terms share one critic forward over the real (s, a)
    batch; their cotangents are pre-mixed so a single backward covers both.
    """
    l_model, g_model = critic_loss_model(plan, config, ensemble, rollouts, with_grad=True, pol=pol)
    next_acts = np.tanh(nn.forward(plan.policy_spec, plan.policy_params, env_batch["next_states"]))
    next_q = nn.forward(
        plan.critic_spec,
        plan.critic_params,
        np.concatenate([env_batch["next_states"], next_acts], axis=1),
    )[:, 0]
    target = env_batch["rewards"] + config.gamma * (1.0 - env_batch["terminals"]) * next_q
    q_shadow = nn.forward(
        plan.critic_spec,
        shadow_params,
        np.concatenate([env_batch["states"], env_batch["actions"]], axis=1),
    )[:, 0]
    q, cache = _critic_forward(
        plan.critic_spec, plan.critic_params, env_batch["states"], env_batch["actions"]
    )
    d_env = q - target
    d_ema = q - q_shadow
    l_env = float(0.5 * (d_env * d_env).mean())
    l_ema = float((d_ema * d_ema).mean())
    cot = (((1.0 - config.beta) * d_env + 2.0 * config.omega_ema * d_ema) / q.size)[:, None]
    g_env_ema, _ = nn.backward_cached(plan.critic_spec, plan.critic_params, cache, cot)
    total = config.beta * l_model + (1.0 - config.beta) * l_env + config.omega_ema * l_ema
    grad = config.beta * g_model + g_env_ema
    parts = {"loss_model": l_model, "loss_env": l_env, "loss_ema": l_ema, "loss_critic": total}
    return total, grad, parts


# ---------------------------------------------------------------------------
# policy losses


def _policy_pathwise(
    plan, config: AgentConfig, ensemble, rollouts, weights, pol=None, ce=None, qlam=None
):
    """Loss -mean(w_t * Qlam_t) and its pathwise gradient w.r.t. policy params.

    `weights` (B, H) are constants. The lambda-return is differentiated as
    an explicit function of rollout rewards and bootstraps; cotangents then
    flow backward through critic inputs, frozen model steps (skip included)
    and the tanh policy at every visited state.

    The critic cotangents c_q are known up front, so all critic input
    gradients and their squash-through-policy parts run as two stacked
    backward passes; only cotangents surfacing from model steps still walk
    the horizon sequentially.
    """
    B, H = rollouts.rewards.shape
    if rollouts.caches is None:
        raise AgentError("policy update needs rollouts recorded with differentiable=True")
    valid = np.arange(H)[None, :] < rollouts.t_eff[:, None]
    n_valid = int(valid.sum())
    if n_valid == 0:
        return 0.0, np.zeros_like(plan.policy_params), {"qlam_mean": 0.0}
    if pol is None:
        pol = _policy_eval(plan, rollouts)
    if ce is None:
        ce = _critic_eval(plan, rollouts, pol)
    if qlam is None:
        qlam, _ = returns.lambda_return_batch(
            rollouts.rewards, ce.boot_q, rollouts.t_eff, config.lam, config.gamma
        )
    loss = -float((weights * qlam).sum() / n_valid)

    rows = np.arange(B)
    bootstrap_ok = np.zeros((B, H + 1))
    k_idx = np.arange(H + 1)[None, :]
    bootstrap_ok[k_idx <= rollouts.t_eff[:, None]] = 1.0
    bootstrap_ok[rows, rollouts.t_eff] = np.where(rollouts.terminal, 0.0, 1.0)
    c_r, c_q = returns.policy_grad_coefficients(
        -weights / n_valid, rollouts.t_eff, bootstrap_ok, config.lam, config.gamma
    )

    S = ensemble.obs_dim
    squash_grad = 1.0 - pol.acts * pol.acts

    # all critic input gradients at once: cotangent c_q[b, k] on row k*B + b
    _, g_in = nn.backward_cached(
        plan.critic_spec, plan.critic_params, ce.cache, c_q.T.reshape(-1, 1)
    )
    g_s_crit = g_in[:, :S].reshape(H + 1, B, S)
    # ... and their action components through tanh(policy), also at once
    theta_grad, g_s_flat = nn.backward_cached(
        plan.policy_spec, plan.policy_params, pol.cache, g_in[:, S:] * squash_grad
    )
    g_s_polc = g_s_flat.reshape(H + 1, B, S)

    def policy_backprop(k, g_action):
        # push model-step action cotangents through tanh(mlp(s_k))
        nonlocal theta_grad
        if not np.any(g_action):
            return np.zeros((B, S))
        lo, hi = k * B, (k + 1) * B
        g_pre = g_action * squash_grad[lo:hi]
        g_params, g_states = nn.backward_cached(
            plan.policy_spec, plan.policy_params, _slice_cache(pol.cache, lo, hi), g_pre
        )
        theta_grad += g_params
        return g_states

    g_s_next = g_s_crit[H] + g_s_polc[H]
    for k in range(H - 1, -1, -1):
        alive = (rollouts.t_eff > k)[:, None]
        g_next = g_s_next * alive
        g_reward = c_r[:, k]
        g_s_model, g_a_model = world_model.step_backward(
            ensemble, rollouts.caches[k], g_next, g_reward
        )
        g_s_model = np.where(alive, g_s_model, 0.0)
        g_a_model = np.where(alive, g_a_model, 0.0)
        g_s_pol = policy_backprop(k, g_a_model)
        g_s_next = g_s_model + g_s_crit[k] + g_s_polc[k] + g_s_pol + g_s_next * (~alive)
    info = {"qlam_mean": float(qlam[valid].mean())}
    return loss, theta_grad, info


def policy_loss_surrogate(plan, config: AgentConfig, ensemble, rollouts, pol=None):
    """Expectile-weighted lambda-return ascent with frozen weights.

    w_t = |tau - 1(Q(s_t, a_t) > Qlam_t)| uses the rollout actions a_t; the
    indicator and weight are constants for the gradient.
    """
    B, H = rollouts.rewards.shape
    valid = np.arange(H)[None, :] < rollouts.t_eff[:, None]
    if pol is None:
        pol = _policy_eval(plan, rollouts)
    ce = _critic_eval(plan, rollouts, pol)
    qlam, _ = returns.lambda_return_batch(
        rollouts.rewards, ce.boot_q, rollouts.t_eff, config.lam, config.gamma
    )
    flat_idx = np.argwhere(valid)
    q_taken = np.zeros((B, H))
    if flat_idx.size:
        s = rollouts.states[flat_idx[:, 0], flat_idx[:, 1]]
        a = rollouts.actions[flat_idx[:, 0], flat_idx[:, 1]]
        q_taken[flat_idx[:, 0], flat_idx[:, 1]] = MlpCritic(plan.critic_spec, plan.critic_params)(
            s, a
        )
    weights = np.where(valid, expectile_weight(q_taken - qlam, config.tau), 0.0)
    loss, grad, info = _policy_pathwise(
        plan, config, ensemble, rollouts, weights, pol=pol, ce=ce, qlam=qlam
    )
    if not (np.isfinite(loss) and np.isfinite(grad).all()):
        raise DivergenceError("policy gradient diverged", {"loss": loss})
    info["weight_mean"] = float(weights[valid].mean()) if flat_idx.size else 0.0
    info["weights"] = weights
    return loss, grad, info


def _policy_q_value(plan, states):
    """DDPG-style loss -mean Q(s, pi(s)) on a batch of states."""
    acts, p_cache, pre = _policy_forward(plan.policy_spec, plan.policy_params, states)
    q, c_cache = _critic_forward(plan.critic_spec, plan.critic_params, states, acts)
    loss = -float(q.mean())
    cot = np.full((q.size, 1), -1.0 / q.size)
    _, g_in = nn.backward_cached(plan.critic_spec, plan.critic_params, c_cache, cot)
    g_action = g_in[:, states.shape[1] :]
    g_pre = g_action * (1.0 - acts * acts)
    grad, _ = nn.backward_cached(plan.policy_spec, plan.policy_params, p_cache, g_pre)
    return loss, grad, {}


def awr_policy_loss(plan, config: AgentConfig, rollouts, with_grad: bool = True):
    """Advantage-weighted regression toward rollout actions.

    Weights min(exp(A_t / alpha), 20) are constants; the loss pulls
    pi(s_t) toward the recorded (noisy) rollout actions.
    """
    B, H = rollouts.rewards.shape
    valid = np.arange(H)[None, :] < rollouts.t_eff[:, None]
    flat_idx = np.argwhere(valid)
    if flat_idx.size == 0:
        return (0.0, np.zeros_like(plan.policy_params), {}) if with_grad else 0.0
    boot_q, _ = _rollout_bootstraps(plan, rollouts, plan.critic_params)
    qlam, _ = returns.lambda_return_batch(
        rollouts.rewards, boot_q, rollouts.t_eff, config.lam, config.gamma
    )
    s = rollouts.states[flat_idx[:, 0], flat_idx[:, 1]]
    a_taken = rollouts.actions[flat_idx[:, 0], flat_idx[:, 1]]
    q_pol = boot_q[flat_idx[:, 0], flat_idx[:, 1]]
    adv = qlam[flat_idx[:, 0], flat_idx[:, 1]] - q_pol
    w = np.minimum(np.exp(adv / config.awr_alpha), 20.0)
    acts, cache, pre = _policy_forward(plan.policy_spec, plan.policy_params, s)
    res = acts - a_taken
    loss = float((w * (res * res).sum(axis=1)).mean())
    if not with_grad:
        return loss
    g_act = 2.0 * w[:, None] * res / w.size
    g_pre = g_act * (1.0 - acts * acts)
    grad, _ = nn.backward_cached(plan.policy_spec, plan.policy_params, cache, g_pre)
    return loss, grad, {"awr_weight_mean": float(w.mean())}


# ---------------------------------------------------------------------------
# pretraining


def pretrain_bc(dataset, spec: nn.MlpSpec, params: np.ndarray, steps: int, seed: int, lr: float, batch: int = 256):
    """Behavioral cloning: minimize ||tanh(mlp(s)) - a||^2 over the dataset."""
    states, actions, _, _, _ = dataset.flat_arrays()
    rng = stream(seed, "pretrain.bc")
    adam = nn.init_adam(params.size, lr)
    mse = float("nan")
    for _ in range(steps):
        idx = rng.integers(0, states.shape[0], size=min(batch, states.shape[0]))
        acts, cache, pre = _policy_forward(spec, params, states[idx])
        res = acts - actions[idx]
        mse = float((res * res).sum(axis=1).mean())
        g_act = 2.0 * res / res.shape[0]
        g_pre = g_act * (1.0 - acts * acts)
        grad, _ = nn.backward_cached(spec, params, cache, g_pre)
        adam, params = nn.adam_step(adam, params, grad)
    return params, mse


def pretrain_fqe(dataset, policy, spec: nn.MlpSpec, params: np.ndarray, steps: int, gamma: float, seed: int, lr: float, batch: int = 256, target_every: int = 250):
    """Fitted Q evaluation of a frozen policy on the offline dataset.

    Bootstraps come from a parameter snapshot refreshed every target_every
    steps, so each stretch of updates regresses onto fixed targets
    (approximate value iteration). Bootstrapping from the live parameters
    instead is unstable here: at gamma near 1 the moving targets chase the
    regression downhill and the values drift far past the true ones.
    """
    states, actions, rewards, next_states, terminals = dataset.flat_arrays()
    terminals = terminals.astype(np.float64)
    rng = stream(seed, "pretrain.fqe")
    adam = nn.init_adam(params.size, lr)
    target = params.copy()
    loss = float("nan")
    for step_i in range(steps):
        idx = rng.integers(0, states.shape[0], size=min(batch, states.shape[0]))
        next_a = np.atleast_2d(policy(next_states[idx]))
        next_q = nn.forward(spec, target, np.concatenate([next_states[idx], next_a], axis=1))[:, 0]
        y = rewards[idx] + gamma * (1.0 - terminals[idx]) * next_q
        q, cache = _critic_forward(spec, params, states[idx], actions[idx])
        diff = q - y
        loss = float((diff * diff).mean())
        if not np.isfinite(loss):
            raise DivergenceError("FQE loss diverged", {"step": step_i})
        cot = (2.0 * diff / diff.size)[:, None]
        grad, _ = nn.backward_cached(spec, params, cache, cot)
        adam, params = nn.adam_step(adam, params, grad)
        if (step_i + 1) % target_every == 0:
            target = params.copy()
    return params, loss


# ---------------------------------------------------------------------------
# dataset expansion and the training step


def expand_dataset(
    buffer: ModelStateBuffer,
    ensemble,
    policy,
    config: AgentConfig,
    env_states: np.ndarray,
    termination,
    rng,
) -> int:
    """Add up to n_expand pre-step states from noisy imagined rollouts.

    Start states come from the real dataset; rollouts run rollout_r steps
    under pi + N(0, sigma_exp^2) noise, and every state the rollout stood
    in *before* stepping is inserted (so rollout_r=1 re-inserts only the
    dataset states themselves).
    """
    inserted = 0
    stalls = 0
    while inserted < config.n_expand:
        want = config.n_expand - inserted
        n_roll = max(1, min(512, -(-want // config.rollout_r)))
        starts = env_states[rng.integers(0, env_states.shape[0], size=n_roll)]
        ro = world_model.imagine_rollout(
            ensemble, policy, starts, config.rollout_r, termination, config.sigma_exp, rng
        )
        before = inserted
        for b in range(n_roll):
            n_valid = int(ro.t_eff[b])
            if n_valid == 0:
                continue
            take = min(n_valid, config.n_expand - inserted)
            buffer.insert(ro.states[b, :take])
            inserted += take
            if inserted >= config.n_expand:
                break
        if inserted == before:
            stalls += 1
            if stalls >= 100:
                raise AgentError("expansion stalled: every sampled start state is terminal")
        else:
            stalls = 0
    return inserted


def train_step(state: AgentState, ensemble, env_batch: dict, start_states: np.ndarray, rng) -> dict:
    """One critic step, one EMA update, one actor step; returns metrics."""
    config = state.config
    plan = _plan_of(state)
    term_fn = envs.termination_fn(state.env_spec)
    needs_rollout = config.beta > 0.0 or config.policy_update in ("lambda_expectile", "awr")
    rollouts = None
    if needs_rollout:
        noise = config.sigma_exp if config.policy_update == "awr" else 0.0
        rollouts = world_model.imagine_rollout(
            ensemble,
            state.policy,
            start_states,
            config.horizon,
            term_fn,
            noise,
            rng,
            differentiable=config.policy_update == "lambda_expectile",
        )

    # policy params stay fixed until the actor Adam step, so one stacked
    # policy forward over the rollout states can serve both loss phases
    wants_pol = config.beta > 0.0 or config.policy_update == "lambda_expectile"
    pol = _policy_eval(plan, rollouts) if needs_rollout and wants_pol else None
    if config.beta > 0.0:
        total, c_grad, parts = critic_loss_total(
            plan, config, ensemble, rollouts, env_batch, state.critic_ema.shadow, pol=pol
        )
    else:
        l_env, g_env = critic_loss_env(plan, config, env_batch, with_grad=True)
        l_ema, g_ema = critic_loss_ema(plan, state.critic_ema.shadow, env_batch, with_grad=True)
        total = l_env + config.omega_ema * l_ema
        c_grad = g_env + config.omega_ema * g_ema
        parts = {"loss_model": 0.0, "loss_env": l_env, "loss_ema": l_ema, "loss_critic": total}
    if not (np.isfinite(total) and np.isfinite(c_grad).all()):
        raise DivergenceError("critic loss diverged", {"step": state.step, **parts})
    state.adam_critic, state.critic_params = nn.adam_step(
        state.adam_critic, state.critic_params, c_grad
    )
    state.critic_ema = nn.ema_update(state.critic_ema, state.critic_params)

    plan = _plan_of(state)  # critic updated; actor sees the new values
    if config.policy_update == "lambda_expectile":
        p_loss, p_grad, p_info = policy_loss_surrogate(plan, config, ensemble, rollouts, pol=pol)
    elif config.policy_update == "awr":
        p_loss, p_grad, p_info = awr_policy_loss(plan, config, rollouts)
    else:
        p_loss, p_grad, p_info = _policy_q_value(plan, env_batch["states"])
    if not (np.isfinite(p_loss) and np.isfinite(p_grad).all()):
        raise DivergenceError("policy loss diverged", {"step": state.step, "loss": p_loss})
    state.adam_actor, state.policy_params = nn.adam_step(
        state.adam_actor, state.policy_params, p_grad
    )
    state.step += 1

    q_env = state.critic(env_batch["states"], env_batch["actions"])
    scalars = {k: v for k, v in p_info.items() if isinstance(v, (int, float))}
    metrics = {
        "step": state.step,
        "loss_policy": p_loss,
        "mean_q": float(np.mean(q_env)),
        **parts,
        **scalars,
    }
    return metrics


def evaluate_policy(policy, env_spec: envs.EnvSpec, n_episodes: int, seed: int) -> dict:
    """Deterministic rollouts in the true environment."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    total_return = 0.0
    successes = 0
    lengths = 0
    for ep in range(n_episodes):
        rng = stream(seed, "eval.episode", ep)
        s = envs.reset_state(env_spec, rng)
        if hasattr(policy, "reset"):
            policy.reset()
        ep_ret, done = 0.0, False
        for t in range(env_spec.horizon):
            a = np.asarray(policy(s), dtype=np.float64).reshape(-1)
            s, r, done = envs.env_step(env_spec, s, a)
            ep_ret += r
            lengths += 1
            if done:
                break
        total_return += ep_ret
        successes += int(envs.is_success(env_spec, s, done))
    return {
        "mean_return": total_return / n_episodes,
        "success_rate": successes / n_episodes,
        "mean_length": lengths / n_episodes,
    }


# ---------------------------------------------------------------------------
# checkpointing

_AGENT_MAGIC = b"LEQA"


def save_agent(path, state: AgentState, seed: int | None = None, extra: dict | None = None) -> None:
    arrays = [
        ("policy_params", state.policy_params),
        ("critic_params", state.critic_params),
        ("ema_shadow", state.critic_ema.shadow),
        ("adam_actor_m", state.adam_actor.m),
        ("adam_actor_v", state.adam_actor.v),
        ("adam_critic_m", state.adam_critic.m),
        ("adam_critic_v", state.adam_critic.v),
        ("buffer_data", state.buffer.data.reshape(-1)),
    ]
    layout = []
    offset = 0
    for name, arr in arrays:
        layout.append([name, offset, int(arr.size)])
        offset += int(arr.size)
    header = {
        "format": "leq-lab-agent",
        "version": 1,
        "config": state.config.to_dict(),
        "env": state.env_spec.name,
        "policy_spec": state.policy_spec.to_dict(),
        "critic_spec": state.critic_spec.to_dict(),
        "step": state.step,
        "adam_actor_t": state.adam_actor.step,
        "adam_critic_t": state.adam_critic.step,
        "buffer_size": state.buffer.size,
        "buffer_cursor": state.buffer.cursor,
        "buffer_capacity": state.buffer.capacity,
        "layout": layout,
        "seed": seed,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    body = np.concatenate([arr.reshape(-1) for _, arr in arrays]).astype("<f8").tobytes()
    payload = _AGENT_MAGIC + struct.pack("<I", len(blob)) + blob + body
    payload += struct.pack("<I", zlib.crc32(payload))
    with open(path, "wb") as fh:
        fh.write(payload)


def load_agent(path) -> AgentState:
    with open(path, "rb") as fh:
        payload = fh.read()
    if len(payload) < 8 or payload[:4] != _AGENT_MAGIC:
        raise AgentError("not an agent checkpoint")
    body, (crc,) = payload[:-4], struct.unpack("<I", payload[-4:])
    if zlib.crc32(body) != crc:
        raise AgentError("agent checkpoint failed checksum")
    (hlen,) = struct.unpack("<I", body[4:8])
    header = json.loads(body[8 : 8 + hlen].decode("utf-8"))
    flat = np.frombuffer(body[8 + hlen :], dtype="<f8")
    views = {name: flat[off : off + size].copy() for name, off, size in header["layout"]}
    config = AgentConfig.from_dict(header["config"])
    env_spec = envs.make_env_spec(header["env"])
    ema = nn.EmaTracker(shadow=views["ema_shadow"], decay=config.ema_decay)
    adam_a = nn.AdamState(
        m=views["adam_actor_m"],
        v=views["adam_actor_v"],
        step=header["adam_actor_t"],
        lr=config.lr_actor,
    )
    adam_c = nn.AdamState(
        m=views["adam_critic_m"],
        v=views["adam_critic_v"],
        step=header["adam_critic_t"],
        lr=config.lr_critic,
    )
    buffer = ModelStateBuffer(
        data=views["buffer_data"].reshape(header["buffer_capacity"], env_spec.obs_dim),
        size=header["buffer_size"],
        cursor=header["buffer_cursor"],
    )
    return AgentState(
        config=config,
        env_spec=env_spec,
        policy_spec=nn.MlpSpec.from_dict(header["policy_spec"]),
        critic_spec=nn.MlpSpec.from_dict(header["critic_spec"]),
        policy_params=views["policy_params"],
        critic_params=views["critic_params"],
        critic_ema=ema,
        adam_actor=adam_a,
        adam_critic=adam_c,
        buffer=buffer,
        step=header["step"],
    )
