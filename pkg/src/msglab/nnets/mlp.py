"""Fully-connected networks with hand-written reverse-mode gradients.

Every function accepts either a single parameter set (``w{l}`` of shape
``(in, out)``) or a stack of ``M`` sets (``(M, in, out)``). Inputs are
``(B, in)``, shared by all members, or ``(M, B, in)``. Outputs are
``(B, out)`` or ``(M, B, out)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from msglab.errors import DimensionMismatch
from msglab.nnets.params import Params

# Std of a standard normal truncated to [-2, 2]; dividing by it restores unit variance.
TRUNCATED_NORMAL_STD = 0.87962566103423978
_TWO_OVER_SQRT_PI = 2.0 / np.sqrt(np.pi)


@dataclass(frozen=True)
class MlpSpec:
    """Architecture plus fan-in truncated-normal init scales.

    Weights of a layer with fan-in ``n`` get std ``weight_scale / sqrt(n)``;
    biases get ``bias_scale / sqrt(n)``.
    """

    input_dim: int
    hidden_dims: tuple[int, ...] = ()
    output_dim: int = 1
    activation: str = "tanh"
    weight_scale: float = 1.0
    bias_scale: float = 0.05
    use_bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or self.output_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValueError("all layer widths must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; expected one of {sorted(ACTIVATIONS)}")
        if self.weight_scale < 0 or self.bias_scale < 0:
            raise ValueError("init scales must be non-negative")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        return list(zip(dims[:-1], dims[1:]))

    @property
    def n_layers(self) -> int:
        return len(self.hidden_dims) + 1

    def n_params(self) -> int:
        return sum(i * o + (o if self.use_bias else 0) for i, o in self.layer_dims)


def _act_tanh(z):
    return np.tanh(z, out=z)


def _dact_tanh(z, h, g):
    t = np.multiply(h, h)
    np.subtract(1.0, t, out=t)
    g *= t
    return g


def _act_relu(z):
    return np.maximum(z, 0.0)


def _dact_relu(z, h, g):
    g *= z > 0
    return g


def _act_erf(z):
    return erf(z)


def _dact_erf(z, h, g):
    g *= _TWO_OVER_SQRT_PI * np.exp(-z * z)
    return g


# name -> (activation, grad). tanh overwrites z in place and its grad uses only h.
ACTIVATIONS = {
    "tanh": (_act_tanh, _dact_tanh),
    "relu": (_act_relu, _dact_relu),
    "erf": (_act_erf, _dact_erf),
}


def truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal draws truncated at two standard deviations, rescaled to have std ``std``."""
    v = rng.standard_normal(shape)
    bad = np.abs(v) > 2.0
    while bad.any():
        v[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(v) > 2.0
    return v * (std / TRUNCATED_NORMAL_STD)


def member_rng(seed: int, member: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(member,))))


def init_layers(spec: MlpSpec, rng: np.random.Generator) -> Params:
    params: Params = {}
    for l, (fan_in, fan_out) in enumerate(spec.layer_dims):
        params[f"w{l}"] = truncated_normal(rng, (fan_in, fan_out), spec.weight_scale / np.sqrt(fan_in))
        if spec.use_bias:
            params[f"b{l}"] = truncated_normal(rng, (fan_out,), spec.bias_scale / np.sqrt(fan_in))
    return params


def init_params(spec: MlpSpec, seed: int, n_members: int | None = None) -> Params:
    """Sample parameters; with ``n_members`` the members are stacked.

    Member ``i`` always uses stream ``SeedSequence(seed, spawn_key=(i,))`` so a
    stacked init equals initializing the members one at a time.
    """
    if n_members is None:
        return init_layers(spec, member_rng(seed, 0))
    members = [init_layers(spec, member_rng(seed, i)) for i in range(n_members)]
    return {k: np.stack([m[k] for m in members]) for k in members[0]}


def _check_input(params: Params, spec: MlpSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[-1] != spec.input_dim:
        raise DimensionMismatch(f"input width {x.shape[-1]} != input_dim {spec.input_dim}")
    return x


def _bias(b: np.ndarray, stacked: bool) -> np.ndarray:
    return b[:, None, :] if stacked else b


def _ordered_matmul(h: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Matmul with a fixed per-element summation order, independent of batch size."""
    if w.ndim == 2:
        return np.einsum("...i,io->...o", h, w, optimize=False)
    return np.einsum("bi,mio->mbo" if h.ndim == 2 else "mbi,mio->mbo", h, w, optimize=False)


def forward_cache(params: Params, spec: MlpSpec, x: np.ndarray, exact: bool = False):
    """Forward pass that also returns what :func:`backward` needs.

    ``exact=True`` avoids BLAS so a batch gives bit-identical rows to
    row-by-row evaluation (several times slower; training uses BLAS).
    """
    matmul = _ordered_matmul if exact else np.matmul
    x = _check_input(params, spec, x)
    act, _ = ACTIVATIONS[spec.activation]
    stacked = params["w0"].ndim == 3
    h = x
    cache = []
    last = spec.n_layers - 1
    for l in range(spec.n_layers):
        z = matmul(h, params[f"w{l}"])
        if spec.use_bias:
            z += _bias(params[f"b{l}"], stacked)
        if l < last:
            # tanh is applied in place, so z is only kept for other activations.
            pre = z if spec.activation != "tanh" else None
            out = act(z)
            cache.append((h, pre, out))
            h = out
        else:
            cache.append((h, None, None))
            h = z
    return h, cache


def forward(params: Params, spec: MlpSpec, x: np.ndarray) -> np.ndarray:
    """Network output, ``(B, output_dim)`` (or ``(M, B, output_dim)`` when stacked).

    Rows are bit-identical whether evaluated in one batch or one at a time.
    """
    return forward_cache(params, spec, x, exact=True)[0]


def backward(params: Params, spec: MlpSpec, cache, dout: np.ndarray) -> tuple[Params, np.ndarray]:
    """Gradients of ``sum(dout * output)`` w.r.t. parameters and input.

    ``dout`` has the output's shape. The input gradient has the same leading
    axes as ``dout`` (per member when stacked).
    """
    _, dact = ACTIVATIONS[spec.activation]
    grads: Params = {}
    g = np.asarray(dout, dtype=np.float64)
    for l in reversed(range(spec.n_layers)):
        h_in, pre, out = cache[l]
        if out is not None:
            g = dact(pre, out, g)
        grads[f"w{l}"] = np.matmul(np.swapaxes(h_in, -1, -2), g)
        if spec.use_bias:
            grads[f"b{l}"] = g.sum(axis=-2)
        g = np.matmul(g, np.swapaxes(params[f"w{l}"], -1, -2))
    ordered = {}
    for l in range(spec.n_layers):
        ordered[f"w{l}"] = grads[f"w{l}"]
        if spec.use_bias:
            ordered[f"b{l}"] = grads[f"b{l}"]
    return ordered, g


def backward_mse(params: Params, spec: MlpSpec, x: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, Params]:
    """Mean squared error of the first output column and its gradients.

    With stacked params, ``targets`` may be ``(M, B)`` and the loss is
    per member, shape ``(M,)``; each member's gradient is that of its own loss.
    """
    out, cache = forward_cache(params, spec, x)
    pred = out[..., 0]
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape[-1] != pred.shape[-1]:
        raise DimensionMismatch(f"{targets.shape[-1]} targets for {pred.shape[-1]} rows")
    err = pred - targets
    n = err.shape[-1]
    loss = np.mean(err * err, axis=-1)
    dout = np.zeros_like(out)
    dout[..., 0] = (2.0 / n) * err
    grads, _ = backward(params, spec, cache, dout)
    return loss, grads
