"""Central finite-difference checks of the hand-written gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from msglab.nnets import mlp
from msglab.nnets.ensembles import EnsembleArch, ensemble_backward, ensemble_forward_cache, init_ensemble
from msglab.nnets.mlp import MlpSpec
from msglab.nnets.params import Params

FD_STEP = 1e-5


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(
    loss_fn: Callable[[Params], float],
    grads: Params,
    params: Params,
    n_probes: int,
    seed: int = 0,
    h: float = FD_STEP,
    keys: list[str] | None = None,
) -> float:
    """Max relative error between ``grads`` and central differences of ``loss_fn``.

    Probes ``n_probes`` coordinates, cycling over the parameter arrays so every
    array (e.g. BatchEnsemble modulation vectors) gets probed.
    """
    if n_probes < 1:
        raise ValueError("n_probes must be >= 1")
    rng = np.random.default_rng(seed)
    keys = list(keys or params)
    worst = 0.0
    for p in range(n_probes):
        k = keys[p % len(keys)]
        idx = tuple(int(rng.integers(d)) for d in params[k].shape)
        probe = {kk: v.copy() for kk, v in params.items()}
        orig = probe[k][idx]
        probe[k][idx] = orig + h
        up = loss_fn(probe)
        probe[k][idx] = orig - h
        down = loss_fn(probe)
        numeric = (up - down) / (2.0 * h)
        worst = max(worst, relative_error(float(grads[k][idx]), numeric))
    return worst


def grad_check(model: MlpSpec | EnsembleArch, seed: int = 0, n_probes: int = 100, batch: int = 5) -> float:
    """Check gradients of a random linear functional of the model's outputs.

    Also covers the input gradient of ensembles (used by the policy update).
    """
    rng = np.random.default_rng(seed)
    if isinstance(model, MlpSpec):
        params = mlp.init_params(model, seed)
        x = rng.standard_normal((batch, model.input_dim))
        dout = rng.standard_normal((batch, model.output_dim))

        def loss(p):
            return float(np.sum(dout * mlp.forward(p, model, x)))

        out, cache = mlp.forward_cache(params, model, x)
        grads, dx = mlp.backward(params, model, cache, dout)
        worst = check_gradients(loss, grads, params, n_probes, seed)
        input_loss = lambda p: float(np.sum(dout * mlp.forward(params, model, p["x"])))
        return max(worst, check_gradients(input_loss, {"x": dx}, {"x": x}, max(1, n_probes // 10), seed + 1))

    params = init_ensemble(model, seed)
    x = rng.standard_normal((batch, model.input_dim))
    dout = rng.standard_normal((batch, model.n_members))

    def loss(p):
        return float(np.sum(dout * ensemble_forward_cache(model, p, x)[0]))

    out, cache = ensemble_forward_cache(model, params, x)
    grads, dx = ensemble_backward(model, params, cache, dout)
    worst = check_gradients(loss, grads, params, n_probes, seed)
    input_loss = lambda p: float(np.sum(dout * ensemble_forward_cache(model, params, p["x"])[0]))
    return max(worst, check_gradients(input_loss, {"x": dx}, {"x": x}, max(1, n_probes // 10), seed + 1))
