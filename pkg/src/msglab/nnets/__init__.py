"""Numpy neural-network substrate with hand-derived gradients."""

from msglab.nnets.adam import AdamState, adam_init, adam_update
from msglab.nnets.ensembles import (
    EnsembleArch,
    EnsembleKind,
    ensemble_backward,
    ensemble_forward,
    ensemble_forward_cache,
    init_ensemble,
)
from msglab.nnets.gradcheck import check_gradients, grad_check
from msglab.nnets.mlp import MlpSpec, backward, backward_mse, forward, forward_cache, init_params
from msglab.nnets.params import Params, load_params, save_params

__all__ = [
    "AdamState",
    "EnsembleArch",
    "EnsembleKind",
    "MlpSpec",
    "Params",
    "adam_init",
    "adam_update",
    "backward",
    "backward_mse",
    "check_gradients",
    "ensemble_backward",
    "ensemble_forward",
    "ensemble_forward_cache",
    "forward",
    "forward_cache",
    "grad_check",
    "init_ensemble",
    "init_params",
    "load_params",
    "save_params",
]
