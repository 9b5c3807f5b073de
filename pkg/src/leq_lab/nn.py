"""Minimal differentiable MLP stack with hand-written reverse mode.

Architecture per hidden layer: linear -> (optional layer norm) -> activation,
then a final linear readout. Inputs can optionally be squashed with symlog,
sign(x) * ln(1 + |x|), before the first layer. Parameters live in one flat
float64 vector; the layout maps named tensors to slices so checkpoints and
optimizer state stay trivially serializable.

backward() returns gradients with respect to BOTH parameters and inputs;
input gradients are what lets imagination rollouts backpropagate through
critics, world-model members and the policy.

Everything is float64 and allocation-explicit: identical params and inputs
give bit-identical outputs.
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "MlpSpec",
    "ParamBundle",
    "AdamState",
    "EmaTracker",
    "symlog",
    "symlog_grad",
    "param_layout",
    "n_params",
    "init_params",
    "param_views",
    "forward",
    "forward_cached",
    "backward",
    "backward_cached",
    "init_adam",
    "adam_step",
    "init_ema",
    "ema_update",
    "save_checkpoint",
    "load_checkpoint",
]

_ACTIVATIONS = ("relu", "tanh", "elu")
_LN_EPS = 1e-8


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    use_layernorm: bool = False
    use_symlog_input: bool = False
    activation: str = "relu"

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))
        if self.input_dim < 1 or self.output_dim < 1 or any(d < 1 for d in self.hidden_dims):
            raise ValueError("all dimensions must be >= 1")
        if len(self.hidden_dims) < 1:
            raise ValueError("need at least one hidden layer")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {_ACTIVATIONS}")

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "output_dim": self.output_dim,
            "use_layernorm": self.use_layernorm,
            "use_symlog_input": self.use_symlog_input,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(
            input_dim=int(d["input_dim"]),
            hidden_dims=tuple(d["hidden_dims"]),
            output_dim=int(d["output_dim"]),
            use_layernorm=bool(d["use_layernorm"]),
            use_symlog_input=bool(d["use_symlog_input"]),
            activation=str(d["activation"]),
        )


@dataclass
class ParamBundle:
    """Flat parameter vector plus the (name, start, shape) slice layout."""

    flat: np.ndarray
    layout: tuple[tuple[str, int, tuple[int, ...]], ...]

    def view(self, name: str) -> np.ndarray:
        for entry_name, start, shape in self.layout:
            if entry_name == name:
                size = int(np.prod(shape))
                return self.flat[start : start + size].reshape(shape)
        raise KeyError(name)


def symlog(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.log1p(np.abs(x))


def symlog_grad(x):
    return 1.0 / (1.0 + np.abs(np.asarray(x, dtype=np.float64)))


@functools.lru_cache(maxsize=64)
def param_layout(spec: MlpSpec) -> tuple[tuple[str, int, tuple[int, ...]], ...]:
    entries = []
    offset = 0

    def add(name: str, shape: tuple[int, ...]) -> None:
        nonlocal offset
        entries.append((name, offset, shape))
        offset += math.prod(shape)

    fan_in = spec.input_dim
    for i, width in enumerate(spec.hidden_dims):
        add(f"w{i}", (fan_in, width))
        add(f"b{i}", (width,))
        if spec.use_layernorm:
            add(f"ln_scale{i}", (width,))
            add(f"ln_shift{i}", (width,))
        fan_in = width
    add("w_out", (fan_in, spec.output_dim))
    add("b_out", (spec.output_dim,))
    return tuple(entries)


def n_params(spec: MlpSpec) -> int:
    layout = param_layout(spec)
    name, start, shape = layout[-1]
    return start + math.prod(shape)


def param_views(spec: MlpSpec, flat: np.ndarray) -> dict[str, np.ndarray]:
    views = {}
    for name, start, shape in param_layout(spec):
        views[name] = flat[start : start + math.prod(shape)].reshape(shape)
    return views


def init_params(spec: MlpSpec, rng: np.random.Generator) -> np.ndarray:
    """Scaled-normal weight init; biases zero, layer-norm affine identity."""
    flat = np.zeros(n_params(spec), dtype=np.float64)
    views = param_views(spec, flat)
    gain = math.sqrt(2.0) if spec.activation in ("relu", "elu") else 1.0
    n_hidden = len(spec.hidden_dims)
    for i in range(n_hidden):
        w = views[f"w{i}"]
        w[...] = rng.normal(0.0, gain / math.sqrt(w.shape[0]), size=w.shape)
        if spec.use_layernorm:
            views[f"ln_scale{i}"][...] = 1.0
    w = views["w_out"]
    w[...] = rng.normal(0.0, 1.0 / math.sqrt(w.shape[0]), size=w.shape)
    return flat


def _activate(h: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(h, 0.0)
    if kind == "tanh":
        return np.tanh(h)
    # elu; expm1 sees only the clamped-to-zero half, skipping its slow path
    return np.expm1(np.minimum(h, 0.0)) + np.maximum(h, 0.0)


def _activate_grad(h: np.ndarray, a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (h > 0.0).astype(np.float64)
    if kind == "tanh":
        return 1.0 - a * a
    return np.where(h > 0.0, 1.0, a + 1.0)


def forward_cached(spec: MlpSpec, params: np.ndarray, x: np.ndarray):
    """Forward pass returning (output, cache); accepts (d,) or (B, d)."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.shape[1] != spec.input_dim:
        raise ValueError(f"expected input dim {spec.input_dim}, got {x.shape[1]}")
    views = param_views(spec, params)
    raw_in = x
    if spec.use_symlog_input:
        x = symlog(x)
    layers = []
    a = x
    for i in range(len(spec.hidden_dims)):
        h = a @ views[f"w{i}"] + views[f"b{i}"]
        if spec.use_layernorm:
            mean = h.mean(axis=1, keepdims=True)
            centered = h - mean
            inv_std = 1.0 / np.sqrt(np.mean(centered * centered, axis=1, keepdims=True) + _LN_EPS)
            norm = centered * inv_std
            z = norm * views[f"ln_scale{i}"] + views[f"ln_shift{i}"]
        else:
            norm = inv_std = None
            z = h
        out = _activate(z, spec.activation)
        layers.append((a, z, norm, inv_std, out))
        a = out
    y = a @ views["w_out"] + views["b_out"]
    cache = (raw_in, x, layers, a, squeeze)
    return (y[0] if squeeze else y), cache


def forward(spec: MlpSpec, params: np.ndarray, x: np.ndarray) -> np.ndarray:
    y, _ = forward_cached(spec, params, x)
    return y


def backward_cached(
    spec: MlpSpec, params: np.ndarray, cache, output_cotangent: np.ndarray
):
    """Reverse-mode sweep over a cached forward.

    Returns (param_grad, input_grad): gradients of <output, cotangent>
    with respect to the flat parameter vector and the raw input.
    """
    raw_in, x0, layers, last, squeeze = cache
    gy = np.asarray(output_cotangent, dtype=np.float64)
    if squeeze:
        gy = gy[None, :]
    views = param_views(spec, params)
    grad_flat = np.zeros_like(params)
    grads = param_views(spec, grad_flat)

    grads["w_out"][...] = last.T @ gy
    grads["b_out"][...] = gy.sum(axis=0)
    ga = gy @ views["w_out"].T

    for i in reversed(range(len(spec.hidden_dims))):
        a_in, z, norm, inv_std, out = layers[i]
        gz = ga * _activate_grad(z, out, spec.activation)
        if spec.use_layernorm:
            scale = views[f"ln_scale{i}"]
            grads[f"ln_scale{i}"][...] = (gz * norm).sum(axis=0)
            grads[f"ln_shift{i}"][...] = gz.sum(axis=0)
            gn = gz * scale
            # d/dh of (h - mean) * inv_std with row statistics.
            gh = inv_std * (
                gn
                - gn.mean(axis=1, keepdims=True)
                - norm * (gn * norm).mean(axis=1, keepdims=True)
            )
        else:
            gh = gz
        grads[f"w{i}"][...] = a_in.T @ gh
        grads[f"b{i}"][...] = gh.sum(axis=0)
        ga = gh @ views[f"w{i}"].T

    if spec.use_symlog_input:
        ga = ga * symlog_grad(raw_in)
    if squeeze:
        ga = ga[0]
    return grad_flat, ga


def backward(
    spec: MlpSpec, params: np.ndarray, x: np.ndarray, output_cotangent: np.ndarray
):
    """Convenience wrapper: forward for caches, then backward_cached."""
    _, cache = forward_cached(spec, params, x)
    return backward_cached(spec, params, cache, output_cotangent)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(n: int, lr: float) -> AdamState:
    return AdamState(
        m=np.zeros(n, dtype=np.float64), v=np.zeros(n, dtype=np.float64), step=0, lr=float(lr)
    )


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray):
    """Bias-corrected Adam; mutates state and params in place and returns them."""
    if grad.shape != params.shape or state.m.shape != params.shape:
        raise ValueError("parameter/gradient/moment shapes disagree")
    state.step += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grad
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    params -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state, params


@dataclass
class EmaTracker:
    shadow: np.ndarray
    decay: float

    def __post_init__(self) -> None:
        if not (0.0 < self.decay < 1.0):
            raise ValueError(f"decay must lie in (0, 1), got {self.decay}")


def init_ema(params: np.ndarray, decay: float) -> EmaTracker:
    return EmaTracker(shadow=params.copy(), decay=float(decay))


def ema_update(tracker: EmaTracker, params: np.ndarray) -> EmaTracker:
    """shadow <- decay * shadow + (1 - decay) * params, in place."""
    if tracker.shadow.shape != params.shape:
        raise ValueError("shadow/parameter shapes disagree")
    tracker.shadow *= tracker.decay
    tracker.shadow += (1.0 - tracker.decay) * params
    return tracker


def save_checkpoint(path, spec: MlpSpec, params: np.ndarray, seed=None, meta=None) -> None:
    """JSON header line + little-endian float64 parameter block."""
    header = {
        "format": "leq-lab-params",
        "version": 1,
        "spec": spec.to_dict(),
        "layout": [[name, start, list(shape)] for name, start, shape in param_layout(spec)],
        "n_params": int(params.size),
        "seed": seed,
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8") + b"\n"
    blob += np.ascontiguousarray(params, dtype="<f8").tobytes()
    Path(path).write_bytes(blob)


def load_checkpoint(path):
    """Returns (spec, params, header)."""
    blob = Path(path).read_bytes()
    nl = blob.index(b"\n")
    header = json.loads(blob[:nl].decode("utf-8"))
    if header.get("format") != "leq-lab-params" or header.get("version") != 1:
        raise ValueError(f"unrecognized checkpoint header in {path}")
    params = np.frombuffer(blob[nl + 1 :], dtype="<f8").astype(np.float64)
    if params.size != header["n_params"]:
        raise ValueError(f"checkpoint {path} truncated: {params.size} != {header['n_params']}")
    return MlpSpec.from_dict(header["spec"]), params, header
