"""Ensemble fitted Q-evaluation of a fixed policy under different target rules.

Each outer iteration freezes TD targets computed from the current ensemble,
then runs ``inner_steps`` full-batch Adam steps regressing every member onto
its target column. No target networks are used.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np

from msglab.dataset import OfflineDataset
from msglab.errors import DimensionMismatch, Diverged, EmptyRegion
from msglab.nnets import adam_init, adam_update
from msglab.nnets.ensembles import (
    EnsembleArch,
    EnsembleKind,
    ensemble_backward,
    ensemble_forward,
    ensemble_forward_cache,
    init_ensemble,
)
from msglab.nnets.mlp import MlpSpec
from msglab.nnets.params import Params

log = logging.getLogger(__name__)


class RuleKind(str, enum.Enum):
    INDEPENDENT = "independent"
    INDEPENDENT_DOUBLE_Q = "independent_double_q"
    SHARED_MEAN = "shared_mean"
    SHARED_LCB = "shared_lcb"
    SHARED_MIN = "shared_min"


@dataclass(frozen=True)
class TargetRule:
    kind: RuleKind
    k: float = 2.0  # std multiplier, SHARED_LCB only

    def __post_init__(self):
        object.__setattr__(self, "kind", RuleKind(self.kind))
        if self.kind is RuleKind.SHARED_LCB and not self.k > 0:
            raise ValueError("SharedLCB std multiplier must be positive")

    @property
    def shared(self) -> bool:
        return self.kind in (RuleKind.SHARED_MEAN, RuleKind.SHARED_LCB, RuleKind.SHARED_MIN)


ALL_RULES = [TargetRule(k) for k in RuleKind]


def compute_targets(rule: TargetRule, q_next: np.ndarray, rewards: np.ndarray, gamma: float) -> np.ndarray:
    """Per-member TD targets, shape ``(|D|, N)``.

    ``q_next`` holds member predictions at ``(s', pi(s'))``, shape ``(|D|, N)``.
    For the double-Q rule it may instead be ``(|D|, N, 2)`` (both subnetworks),
    which is min-pooled here. Shared rules use the population std.
    """
    q = np.asarray(q_next, dtype=np.float64)
    r = np.asarray(rewards, dtype=np.float64)
    if rule.kind is RuleKind.INDEPENDENT_DOUBLE_Q and q.ndim == 3:
        if q.shape[2] != 2:
            raise DimensionMismatch("double-Q outputs need two subnetworks per member")
        q = q.min(axis=2)
    if q.ndim != 2 or q.shape[0] != r.shape[0]:
        raise DimensionMismatch(f"q_next shape {q.shape} incompatible with {r.shape[0]} rewards")
    kind = rule.kind
    if kind in (RuleKind.INDEPENDENT, RuleKind.INDEPENDENT_DOUBLE_Q):
        return r[:, None] + gamma * q
    if kind is RuleKind.SHARED_MEAN:
        agg = q.mean(axis=1)
    elif kind is RuleKind.SHARED_LCB:
        agg = q.mean(axis=1) - rule.k * q.std(axis=1)
    else:
        agg = q.min(axis=1)
    shared = r + gamma * agg
    return np.repeat(shared[:, None], q.shape[1], axis=1)


@dataclass(frozen=True)
class FqeConfig:
    gamma: float = 0.99
    n_members: int = 64
    outer_iters: int = 1000
    inner_steps: int = 2000
    lr: float = 1e-4
    rule: TargetRule = TargetRule(RuleKind.INDEPENDENT)
    seed: int = 0
    hidden_dims: tuple[int, ...] = (512,)
    activation: str = "tanh"
    weight_scale: float = 10.0
    bias_scale: float = 0.05
    use_bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(self.hidden_dims))
        if isinstance(self.rule, (str, RuleKind)):
            object.__setattr__(self, "rule", TargetRule(self.rule))
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")
        for name in ("n_members", "outer_iters", "inner_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")

    def arch(self, input_dim: int) -> EnsembleArch:
        base = MlpSpec(
            input_dim,
            self.hidden_dims,
            1,
            self.activation,
            self.weight_scale,
            self.bias_scale,
            self.use_bias,
        )
        kind = EnsembleKind.DOUBLE_Q if self.rule.kind is RuleKind.INDEPENDENT_DOUBLE_Q else EnsembleKind.DEEP
        return EnsembleArch(kind, self.n_members, base)


@dataclass(frozen=True, eq=False)
class UncertaintyCurve:
    states: np.ndarray
    mean_q: np.ndarray
    std_q: np.ndarray
    per_member_q: np.ndarray | None = None

    @classmethod
    def from_members(cls, states: np.ndarray, q: np.ndarray) -> "UncertaintyCurve":
        q = np.asarray(q, dtype=np.float64)
        return cls(np.asarray(states, dtype=np.float64), q.mean(axis=1), q.std(axis=1), q)


@dataclass(frozen=True, eq=False)
class FqeResult:
    arch: EnsembleArch
    params: Params
    curve: UncertaintyCurve
    loss_history: list[float] = field(default_factory=list)


def fit_targets(arch, params, opt, X, targets, steps):
    """Run ``steps`` full-batch Adam steps on the per-member MSE.

    ``targets`` is ``(|D|, N)``. Returns ``(params, opt, last per-member loss)``.
    """
    n_rows = X.shape[0]
    loss = None
    for _ in range(steps):
        q, cache = ensemble_forward_cache(arch, params, X)
        err = q - targets
        loss = np.einsum("bn,bn->n", err, err) / n_rows
        if not np.all(np.isfinite(loss)):
            raise Diverged(f"non-finite FQE loss {loss}")
        grads, _ = ensemble_backward(arch, params, cache, (2.0 / n_rows) * err)
        opt, params = adam_update(opt, params, grads)
    return params, opt, loss


def run_fqe(
    dataset: OfflineDataset,
    cfg: FqeConfig,
    grid: np.ndarray,
    progress: bool = False,
) -> FqeResult:
    """Train an ensemble by FQE and evaluate its mean / std on ``grid`` rows.

    ``grid`` rows are full ``(state, action)`` inputs; the curve's ``states``
    column is the first input column.
    """
    arch = cfg.arch(dataset.X.shape[1])
    params = init_ensemble(arch, cfg.seed)
    opt = adam_init(params, lr=cfg.lr)
    X, Xp, R = dataset.X, dataset.Xp, dataset.R
    history = []
    for it in range(cfg.outer_iters):
        q_next = ensemble_forward(arch, params, Xp)
        targets = compute_targets(cfg.rule, q_next, R, cfg.gamma)
        params, opt, loss = fit_targets(arch, params, opt, X, targets, cfg.inner_steps)
        history.append(float(loss.mean()))
        if progress and (it % 10 == 0 or it == cfg.outer_iters - 1):
            log.info("%s iter %d/%d mean loss %.4g", cfg.rule.kind.value, it + 1, cfg.outer_iters, history[-1])
    grid = np.atleast_2d(np.asarray(grid, dtype=np.float64))
    curve = UncertaintyCurve.from_members(grid[:, 0], ensemble_forward(arch, params, grid))
    return FqeResult(arch, params, curve, history)


@dataclass(frozen=True)
class RegionSummary:
    lo: float
    hi: float
    mean_std: float
    max_std: float
    n_points: int


def summarize_curve(
    curve: UncertaintyCurve, regions: list[tuple[float, float]], atol: float = 1e-9
) -> list[RegionSummary]:
    """Mean and max ensemble std over grid states inside each closed interval.

    ``atol`` absorbs rounding in grid coordinates such as ``-1 + 133 * 0.01``.
    """
    out = []
    for lo, hi in regions:
        mask = (curve.states >= lo - atol) & (curve.states <= hi + atol)
        if not mask.any():
            raise EmptyRegion(f"no grid points in [{lo}, {hi}]")
        sel = curve.std_q[mask]
        out.append(RegionSummary(float(lo), float(hi), float(sel.mean()), float(sel.max()), int(mask.sum())))
    return out


CHAIN_REGIONS = [(-1.0, -0.33), (-0.33, 0.33), (0.33, 1.0)]
