"""Tanh-squashed Gaussian policy with hand-derived gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from msglab.nnets import mlp
from msglab.nnets.mlp import MlpSpec
from msglab.nnets.params import Params

_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)
# Keeps atanh finite for dataset actions sitting on the action bound.
_ATANH_CLIP = 1.0 - 1e-6


@dataclass(frozen=True)
class PolicySpec:
    """MLP emitting a mean and log-std per action dim; actions are ``action_scale * tanh(u)``."""

    state_dim: int
    action_dim: int
    hidden_dims: tuple[int, ...] = (64, 64)
    activation: str = "relu"
    action_scale: float = 1.0
    log_std_min: float = -5.0
    log_std_max: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(self.hidden_dims))
        if not self.log_std_min < self.log_std_max:
            raise ValueError("log_std_min must be < log_std_max")
        if self.action_scale <= 0:
            raise ValueError("action_scale must be positive")

    def net_spec(self) -> MlpSpec:
        return MlpSpec(self.state_dim, self.hidden_dims, 2 * self.action_dim, self.activation, 1.0, 0.0)


def init_policy(spec: PolicySpec, seed: int) -> Params:
    return mlp.init_params(spec.net_spec(), seed)


def _heads(params: Params, spec: PolicySpec, states: np.ndarray):
    out, cache = mlp.forward_cache(params, spec.net_spec(), states)
    da = spec.action_dim
    mean = out[:, :da]
    raw = out[:, da:]
    log_std = np.clip(raw, spec.log_std_min, spec.log_std_max)
    inside = (raw > spec.log_std_min) & (raw < spec.log_std_max)
    return mean, log_std, inside, cache


def _heads_backward(params, spec, cache, inside, d_mean, d_log_std) -> Params:
    dout = np.concatenate([d_mean, d_log_std * inside], axis=1)
    grads, _ = mlp.backward(params, spec.net_spec(), cache, dout)
    return grads


def mode(params: Params, spec: PolicySpec, states: np.ndarray) -> np.ndarray:
    """Deterministic action ``action_scale * tanh(mean)``."""
    mean, _, _, _ = _heads(params, spec, states)
    return spec.action_scale * np.tanh(mean)


def sample(params: Params, spec: PolicySpec, states: np.ndarray, noise: np.ndarray) -> np.ndarray:
    """Reparameterized sample ``action_scale * tanh(mean + std * noise)``."""
    mean, log_std, _, _ = _heads(params, spec, states)
    return spec.action_scale * np.tanh(mean + np.exp(log_std) * noise)


def sample_with_grad(params: Params, spec: PolicySpec, states: np.ndarray, noise: np.ndarray):
    """Sample actions and return a closure mapping ``dL/da`` to ``dL/dparams``."""
    mean, log_std, inside, cache = _heads(params, spec, states)
    std = np.exp(log_std)
    t = np.tanh(mean + std * noise)
    actions = spec.action_scale * t

    def pullback(d_actions: np.ndarray) -> Params:
        du = d_actions * spec.action_scale * (1.0 - t * t)
        return _heads_backward(params, spec, cache, inside, du, du * std * noise)

    return actions, pullback


def log_likelihood(params: Params, spec: PolicySpec, states: np.ndarray, actions: np.ndarray) -> tuple[float, Params]:
    """Mean log-density of ``actions`` under the squashed Gaussian, and its gradient.

    Includes the change-of-variables term ``-log(action_scale * (1 - tanh(u)^2))``.
    """
    mean, log_std, inside, cache = _heads(params, spec, states)
    y = np.clip(np.asarray(actions, dtype=np.float64) / spec.action_scale, -_ATANH_CLIP, _ATANH_CLIP)
    u = np.arctanh(y)
    std = np.exp(log_std)
    z = (u - mean) / std
    logp = -0.5 * z * z - log_std - _HALF_LOG_2PI - np.log(spec.action_scale * (1.0 - y * y))
    n = states.shape[0]
    value = float(logp.sum() / n)
    d_mean = (z / std) / n
    d_log_std = (z * z - 1.0) / n
    return value, _heads_backward(params, spec, cache, inside, d_mean, d_log_std)


def grad_check_log_likelihood(spec: PolicySpec, seed: int = 0, n_probes: int = 100, batch: int = 5) -> float:
    """Finite-difference check of :func:`log_likelihood` gradients."""
    from msglab.nnets.gradcheck import check_gradients

    rng = np.random.default_rng(seed)
    params = init_policy(spec, seed)
    states = rng.standard_normal((batch, spec.state_dim))
    actions = spec.action_scale * rng.uniform(-0.95, 0.95, size=(batch, spec.action_dim))
    _, grads = log_likelihood(params, spec, states, actions)
    return check_gradients(lambda p: log_likelihood(p, spec, states, actions)[0], grads, params, n_probes, seed)
