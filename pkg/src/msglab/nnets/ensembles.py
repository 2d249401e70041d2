"""Q-ensembles: deep ensembles and the efficient approximations.

All kinds share one interface: :func:`ensemble_forward` maps a batch
``(B, in)`` to member outputs ``(B, N)``, and :func:`ensemble_backward` turns
an upstream gradient ``(B, N)`` into parameter gradients and an input
gradient ``(B, in)``.

* ``deep``: N independent networks (stacked parameters).
* ``double_q``: N members, each the min of two independent networks.
* ``multi_head``: a shared trunk whose last layer emits N outputs.
* ``mimo``: one network fed N tiled copies of the input, emitting N outputs.
* ``batch_ensemble``: shared weights with per-member rank-1 modulation,
  ``act(((x * r_i) W) * s_i + b_i)`` per layer.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

from msglab.errors import DimensionMismatch
from msglab.nnets import mlp
from msglab.nnets.mlp import ACTIVATIONS, MlpSpec
from msglab.nnets.params import Params


class EnsembleKind(str, enum.Enum):
    DEEP = "deep"
    DOUBLE_Q = "double_q"
    MULTI_HEAD = "multi_head"
    MIMO = "mimo"
    BATCH_ENSEMBLE = "batch_ensemble"


@dataclass(frozen=True)
class EnsembleArch:
    kind: EnsembleKind
    n_members: int
    base: MlpSpec

    def __post_init__(self):
        object.__setattr__(self, "kind", EnsembleKind(self.kind))
        if self.n_members < 1:
            raise ValueError("n_members must be >= 1")
        if self.base.output_dim != 1:
            raise ValueError("ensemble base networks must have a scalar output")

    @property
    def input_dim(self) -> int:
        return self.base.input_dim

    def net_spec(self) -> MlpSpec:
        """The single network that realises multi-head and MIMO ensembles."""
        n = self.n_members
        if self.kind is EnsembleKind.MULTI_HEAD:
            return replace(self.base, output_dim=n)
        if self.kind is EnsembleKind.MIMO:
            return replace(self.base, input_dim=n * self.base.input_dim, output_dim=n)
        return self.base

    def expected_n_params(self) -> int:
        """Analytic parameter count for this architecture."""
        base, n = self.base, self.n_members
        dims = base.layer_dims
        bias = 1 if base.use_bias else 0
        if self.kind is EnsembleKind.DEEP:
            return n * base.n_params()
        if self.kind is EnsembleKind.DOUBLE_Q:
            return 2 * n * base.n_params()
        if self.kind is EnsembleKind.MULTI_HEAD:
            fan_in = dims[-1][0]
            return base.n_params() - (fan_in + bias) + n * (fan_in + bias)
        if self.kind is EnsembleKind.MIMO:
            return self.net_spec().n_params()
        # shared W plus per-member r, s and b in every layer
        return sum(i * o for i, o in dims) + n * sum(i + 2 * o for i, o in dims)


def init_ensemble(arch: EnsembleArch, seed: int) -> Params:
    kind, n = arch.kind, arch.n_members
    if kind is EnsembleKind.DEEP:
        return mlp.init_params(arch.base, seed, n_members=n)
    if kind is EnsembleKind.DOUBLE_Q:
        # rows [0, N) are the first subnetworks, [N, 2N) the second ones
        return mlp.init_params(arch.base, seed, n_members=2 * n)
    if kind in (EnsembleKind.MULTI_HEAD, EnsembleKind.MIMO):
        return mlp.init_params(arch.net_spec(), seed)
    return _init_batch_ensemble(arch, seed)


def _init_batch_ensemble(arch: EnsembleArch, seed: int) -> Params:
    base, n = arch.base, arch.n_members
    rng = mlp.member_rng(seed, 0)
    params: Params = {}
    for l, (fan_in, fan_out) in enumerate(base.layer_dims):
        params[f"w{l}"] = mlp.truncated_normal(rng, (fan_in, fan_out), base.weight_scale / np.sqrt(fan_in))
        # random-sign rank-1 factors keep each member's effective weights at the base scale
        params[f"r{l}"] = rng.choice([-1.0, 1.0], size=(n, fan_in))
        params[f"s{l}"] = rng.choice([-1.0, 1.0], size=(n, fan_out))
        params[f"b{l}"] = mlp.truncated_normal(rng, (n, fan_out), base.bias_scale / np.sqrt(fan_in))
    return params


def _check(arch: EnsembleArch, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != arch.input_dim:
        raise DimensionMismatch(f"expected input of width {arch.input_dim}, got shape {x.shape}")
    return x


def ensemble_forward_cache(arch: EnsembleArch, params: Params, x: np.ndarray):
    x = _check(arch, x)
    kind, n = arch.kind, arch.n_members
    if kind is EnsembleKind.DEEP:
        return _members_forward(params, arch.base, x)
    if kind is EnsembleKind.DOUBLE_Q:
        q, cache = _members_forward(params, arch.base, x)
        first_wins = q[:, :n] <= q[:, n:]
        return np.where(first_wins, q[:, :n], q[:, n:]), (cache, first_wins)
    if kind is EnsembleKind.MULTI_HEAD:
        return mlp.forward_cache(params, arch.net_spec(), x)
    if kind is EnsembleKind.MIMO:
        return mlp.forward_cache(params, arch.net_spec(), np.tile(x, (1, n)))
    return _be_forward(arch, params, x)


def ensemble_forward(arch: EnsembleArch, params: Params, x: np.ndarray) -> np.ndarray:
    """Member outputs, shape ``(B, N)``."""
    return ensemble_forward_cache(arch, params, x)[0]


def ensemble_backward(arch: EnsembleArch, params: Params, cache, dout: np.ndarray) -> tuple[Params, np.ndarray]:
    """Gradients of ``sum(dout * ensemble_forward(x))``; returns ``(grads, dx)``."""
    kind, n = arch.kind, arch.n_members
    dout = np.asarray(dout, dtype=np.float64)
    if kind is EnsembleKind.DEEP:
        return _members_backward(params, arch.base, cache, dout)
    if kind is EnsembleKind.DOUBLE_Q:
        inner, first_wins = cache
        routed = np.concatenate([np.where(first_wins, dout, 0.0), np.where(first_wins, 0.0, dout)], axis=1)
        return _members_backward(params, arch.base, inner, routed)
    if kind is EnsembleKind.MULTI_HEAD:
        return mlp.backward(params, arch.net_spec(), cache, dout)
    if kind is EnsembleKind.MIMO:
        grads, dx = mlp.backward(params, arch.net_spec(), cache, dout)
        return grads, dx.reshape(dx.shape[0], n, arch.input_dim).sum(axis=1)
    return _be_backward(arch, params, cache, dout)


# Deep members are processed one at a time: per-member activations stay
# cache-sized, which is about twice as fast as one stacked batched matmul.
def _members_forward(params: Params, spec: MlpSpec, x: np.ndarray):
    n = next(iter(params.values())).shape[0]
    outs, caches = [], []
    for i in range(n):
        out, cache = mlp.forward_cache({k: v[i] for k, v in params.items()}, spec, x)
        outs.append(out[:, 0])
        caches.append(cache)
    return np.stack(outs, axis=1), caches


def _members_backward(params: Params, spec: MlpSpec, caches, dout: np.ndarray):
    member_grads = []
    dx = None
    for i, cache in enumerate(caches):
        g, d = mlp.backward({k: v[i] for k, v in params.items()}, spec, cache, dout[:, i : i + 1])
        member_grads.append(g)
        dx = d if dx is None else dx + d
    return {k: np.stack([g[k] for g in member_grads]) for k in params}, dx


def _be_forward(arch: EnsembleArch, params: Params, x: np.ndarray):
    base = arch.base
    act, _ = ACTIVATIONS[base.activation]
    h = np.broadcast_to(x, (arch.n_members, *x.shape))
    last = base.n_layers - 1
    cache = []
    for l in range(base.n_layers):
        r, s, b = params[f"r{l}"], params[f"s{l}"], params[f"b{l}"]
        hr = h * r[:, None, :]
        u = np.matmul(hr, params[f"w{l}"])
        z = u * s[:, None, :] + b[:, None, :]
        if l < last:
            pre = z if base.activation != "tanh" else None
            out = act(z)
            cache.append((h, hr, u, pre, out))
            h = out
        else:
            cache.append((h, hr, u, None, None))
            h = z
    return h[..., 0].T, cache


def _be_backward(arch: EnsembleArch, params: Params, cache, dout: np.ndarray):
    base = arch.base
    _, dact = ACTIVATIONS[base.activation]
    grads: Params = {}
    g = dout.T[..., None].copy()
    for l in reversed(range(base.n_layers)):
        h, hr, u, pre, out = cache[l]
        if out is not None:
            g = dact(pre, out, g)
        s, w = params[f"s{l}"], params[f"w{l}"]
        grads[f"b{l}"] = g.sum(axis=1)
        grads[f"s{l}"] = np.einsum("nbo,nbo->no", g, u)
        du = g * s[:, None, :]
        grads[f"w{l}"] = np.einsum("nbi,nbo->io", hr, du)
        dhr = np.matmul(du, w.T)
        grads[f"r{l}"] = np.einsum("nbi,nbi->ni", dhr, h)
        g = dhr * params[f"r{l}"][:, None, :]
    ordered = {k: grads[k] for k in params}
    return ordered, g.sum(axis=0)

