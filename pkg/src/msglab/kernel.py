"""Closed-form LCB estimates for ensembles of linear / NTK-regime Q-functions.

With a linear model ``Q(x) = x . theta`` and ``theta ~ N(0, I)`` the tangent
kernel is the linear kernel ``A B^T``. Writing ``C = K(X', X) K(X, X)^{-1}`` and
``B_t = sum_{k=0}^t (gamma C)^k`` (the backup term), after ``t + 1`` rounds of
policy evaluation the LCB on the next-state rows ``X'`` is

    independent targets:  B_t C R - sqrt(E[(B_t (Q0(X') - C Q0(X)))^2])
    shared LCB targets:   B_t C R - B_t sqrt(E[(Q0(X') - C Q0(X))^2])

up to a remainder that shrinks like ``(gamma ||C||)^(t+1)``. The closed forms
here drop that remainder; :func:`iterate_linearized_fqe` runs the exact
recursions (remainder included) and serves as the cross-check.
"""

from __future__ import annotations

import enum
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from msglab.dataset import GaussianMdpConfig, OfflineDataset, generate_gaussian_dataset
from msglab.errors import DimensionMismatch, DivergentHorizon, NoConvergence, SingularGram

# Pessimism entries above this count as an optimistic bonus; smaller values are
# treated as floating-point noise around zero.
OPTIMISM_THRESHOLD = 1e-9


class Method(str, enum.Enum):
    INDEPENDENT = "independent"
    SHARED = "shared"


@dataclass(frozen=True, eq=False)
class KernelSystem:
    gram_xx: np.ndarray
    gram_px: np.ndarray
    ridge: float
    C: np.ndarray

    def residual(self) -> float:
        """Frobenius norm of ``C (K_xx + ridge I) - K_px``."""
        n = self.gram_xx.shape[0]
        return float(np.linalg.norm(self.C @ (self.gram_xx + self.ridge * np.eye(n)) - self.gram_px))


@dataclass(frozen=True, eq=False)
class LcbReport:
    method: Method
    horizon_t: int
    mean_term: np.ndarray
    pessimism_term: np.ndarray
    q_lcb: np.ndarray
    optimistic_rows: np.ndarray
    spectral_gamma_c: float

    def rows(self):
        """Yield ``(row_index, mean, pessimism, q_lcb, optimistic)`` tuples."""
        flags = np.zeros(len(self.q_lcb), dtype=bool)
        flags[self.optimistic_rows] = True
        for i in range(len(self.q_lcb)):
            yield i, float(self.mean_term[i]), float(self.pessimism_term[i]), float(self.q_lcb[i]), bool(flags[i])


@dataclass(frozen=True, eq=False)
class OracleResult:
    """Exact mean / std / LCB of the iterated linearized Q on ``X'``."""

    mean: np.ndarray
    std: np.ndarray
    lcb: np.ndarray


@dataclass(frozen=True)
class SeedRecord:
    seed: int
    n_rows: int
    gamma_c_norm: float
    retained: bool
    max_pessimism: float
    optimistic: bool
    note: str = ""


@dataclass(frozen=True)
class SweepOutcome:
    n_seeds: int
    n_retained: int
    n_optimistic: int
    per_seed: list[SeedRecord] = field(default_factory=list)

    @property
    def optimistic_fraction(self) -> float:
        return self.n_optimistic / self.n_seeds


def linear_gram(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Linear tangent kernel ``A B^T``."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    if A.shape[1] != B.shape[1]:
        raise DimensionMismatch(f"column counts differ: {A.shape[1]} vs {B.shape[1]}")
    return A @ B.T


def build_kernel_system(dataset: OfflineDataset, ridge: float = 0.0) -> KernelSystem:
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    gram_xx = linear_gram(dataset.X, dataset.X)
    gram_px = linear_gram(dataset.Xp, dataset.X)
    n = gram_xx.shape[0]
    reg = gram_xx + ridge * np.eye(n)
    eig = np.linalg.eigvalsh(reg)
    if eig[0] <= n * np.finfo(np.float64).eps * max(eig[-1], 1.0):
        raise SingularGram(f"regularized Gram matrix is singular (min eigenvalue {eig[0]:.3e}, ridge {ridge})")
    try:
        factor = scipy.linalg.cho_factor(reg, lower=True)
    except np.linalg.LinAlgError as exc:
        raise SingularGram(str(exc)) from exc
    # reg is symmetric, so C reg = K_px  <=>  reg C^T = K_px^T.
    C = scipy.linalg.cho_solve(factor, gram_px.T).T
    return KernelSystem(gram_xx=gram_xx, gram_px=gram_px, ridge=float(ridge), C=np.ascontiguousarray(C))


def geometric_backup(C: np.ndarray, gamma: float, t: int) -> np.ndarray:
    """``sum_{k=0}^t gamma^k C^k`` by Horner accumulation."""
    if t < 0:
        raise ValueError("t must be >= 0")
    n = C.shape[0]
    eye = np.eye(n)
    out = eye.copy()
    gc = gamma * C
    for _ in range(t):
        out = eye + gc @ out
    return out


def apply_backup(C: np.ndarray, gamma: float, t: int, v: np.ndarray) -> np.ndarray:
    """``geometric_backup(C, gamma, t) @ v`` without forming the matrix."""
    out = np.array(v, dtype=np.float64, copy=True)
    gc = gamma * C
    for _ in range(t):
        out = v + gc @ out
    return out


def spectral_norm(C: np.ndarray, tol: float = 1e-13, max_iter: int = 100_000) -> float:
    """Largest singular value of ``C`` by power iteration on ``C^T C``."""
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise DimensionMismatch("C must be square")
    gram = C.T @ C
    # Fixed start vector keeps the result deterministic.
    v = np.random.default_rng(0).standard_normal(C.shape[1])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = gram @ v
        new_lam = float(v @ w)
        norm_w = np.linalg.norm(w)
        if norm_w == 0.0:
            return 0.0
        v = w / norm_w
        if abs(new_lam - lam) <= tol * abs(new_lam):
            return float(np.sqrt(new_lam))
        lam = new_lam
    raise NoConvergence(f"power iteration did not converge in {max_iter} iterations")


def _row_norms(M: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("ij,ij->i", M, M))


def init_sqdev(dataset: OfflineDataset, C: np.ndarray) -> np.ndarray:
    """``sqrt(E[(Q0(X') - C Q0(X))^2])`` for ``theta ~ N(0, I)``.

    For the linear model ``Q0(X') - C Q0(X) = (X' - C X) theta`` and
    ``E[(v . theta)^2] = ||v||^2``, so this is exact.
    """
    if C.shape != (len(dataset), len(dataset)):
        raise DimensionMismatch(f"C has shape {C.shape}, dataset has {len(dataset)} rows")
    return _row_norms(dataset.Xp - C @ dataset.X)


def _gated_norm(C: np.ndarray, gamma: float) -> float:
    gc = gamma * spectral_norm(C)
    if gc >= 1.0:
        raise DivergentHorizon(f"gamma * ||C|| = {gc:.6g} >= 1")
    return gc


def lcb_closed_form(
    system: KernelSystem, dataset: OfflineDataset, gamma: float, t: int, method: Method | str
) -> LcbReport:
    method = Method(method)
    gc = _gated_norm(system.C, gamma)
    C = system.C
    backup = geometric_backup(C, gamma, t)
    mean_term = backup @ (C @ dataset.R)
    deviation = dataset.Xp - C @ dataset.X
    if method is Method.INDEPENDENT:
        pessimism = -_row_norms(backup @ deviation)
    else:
        pessimism = -(backup @ _row_norms(deviation))
    return LcbReport(
        method=method,
        horizon_t=t,
        mean_term=mean_term,
        pessimism_term=pessimism,
        q_lcb=mean_term + pessimism,
        optimistic_rows=np.flatnonzero(pessimism > OPTIMISM_THRESHOLD),
        spectral_gamma_c=gc,
    )


def iterate_linearized_fqe(
    system: KernelSystem, dataset: OfflineDataset, gamma: float, t: int, method: Method | str
) -> OracleResult:
    """Run ``t + 1`` rounds of linearized policy evaluation exactly.

    Independent targets: every member follows
    ``Q_{k+1}(X') = Q0(X') + C (R + gamma Q_k(X') - Q0(X))``; since each
    ``Q_k(X')`` is affine in ``theta`` we carry its mean vector and its
    ``|D| x d`` coefficient matrix, whose row norms give the exact std.

    Shared LCB targets: the target ``y_k`` is deterministic, so
    ``E[Q_{k+1}(X')] = C y_k`` and the std is the constant ``init_sqdev``;
    ``y_0 = R + gamma LCB(Q0(X'))`` and ``y_k = R + gamma (C y_{k-1} - A)``.
    """
    method = Method(method)
    _gated_norm(system.C, gamma)
    C, R, X, Xp = system.C, dataset.R, dataset.X, dataset.Xp
    if method is Method.INDEPENDENT:
        mean = np.zeros(len(dataset))
        coef = Xp.copy()
        deviation = Xp - C @ X
        CR = C @ R
        for _ in range(t + 1):
            mean = CR + gamma * (C @ mean)
            coef = deviation + gamma * (C @ coef)
        std = _row_norms(coef)
    else:
        A = init_sqdev(dataset, C)
        y = R + gamma * (0.0 - _row_norms(Xp))
        for _ in range(t):
            y = R + gamma * (C @ y - A)
        mean = C @ y
        std = A
    return OracleResult(mean=mean, std=std, lcb=mean - std)


def remainder_bound(system: KernelSystem, dataset: OfflineDataset, gamma: float, t: int) -> float:
    """Upper bound on ``|closed form - exact recursion|`` per entry.

    Both branches differ by a term ``(gamma C)^(t+1)`` applied to ``Q0(X')``
    statistics, bounded by ``(gamma ||C||)^(t+1) ||X'||_F``.
    """
    gc = gamma * spectral_norm(system.C)
    return float(gc ** (t + 1) * np.linalg.norm(dataset.Xp))


def linearized_member_values(
    C: np.ndarray, R: np.ndarray, q0_x: np.ndarray, q0_xp: np.ndarray, gamma: float, n_iter: int
) -> np.ndarray:
    """Deterministic single-member recursion for independent targets.

    Returns ``Q_{n_iter}(X')`` given one member's initial predictions.
    """
    q = np.array(q0_xp, dtype=np.float64, copy=True)
    base = q0_xp + C @ (R - q0_x)
    for _ in range(n_iter):
        q = base + gamma * (C @ q)
    return q


def _sweep_one(cfg: GaussianMdpConfig, gamma: float, t: int, ridge: float) -> SeedRecord:
    dataset = generate_gaussian_dataset(cfg)
    nan = float("nan")
    try:
        system = build_kernel_system(dataset, ridge)
        gc = gamma * spectral_norm(system.C)
    except (SingularGram, NoConvergence) as exc:
        return SeedRecord(cfg.seed, len(dataset), nan, False, nan, False, type(exc).__name__)
    if gc >= 1.0:
        return SeedRecord(cfg.seed, len(dataset), gc, False, nan, False, "divergent")
    pessimism = -apply_backup(system.C, gamma, t, init_sqdev(dataset, system.C))
    worst = float(pessimism.max())
    return SeedRecord(cfg.seed, len(dataset), gc, True, worst, worst > OPTIMISM_THRESHOLD)


def _sweep_star(args):
    return _sweep_one(*args)


def run_validation_sweep(
    cfg: GaussianMdpConfig,
    gamma: float = 0.5,
    t: int = 1000,
    n_seeds: int = 1000,
    ridge: float = 0.0,
    seeds: list[int] | None = None,
    workers: int = 1,
) -> SweepOutcome:
    """Count Gaussian-MDP instances whose shared-target pessimism term turns positive.

    Seeds default to ``cfg.seed, cfg.seed + 1, ...``. Runs with
    ``gamma ||C|| >= 1`` (or a singular Gram matrix) are recorded but not
    retained.
    """
    if seeds is None:
        if n_seeds < 1:
            raise ValueError("n_seeds must be >= 1")
        seeds = [cfg.seed + i for i in range(n_seeds)]
    jobs = [(GaussianMdpConfig(cfg.d_s, cfg.d_a, cfg.n_episodes, cfg.episode_len, s), gamma, t, ridge) for s in seeds]
    if workers is None or workers <= 0:
        workers = os.cpu_count() or 1
    if workers == 1 or len(jobs) == 1:
        records = [_sweep_star(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_sweep_star, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    n_retained = sum(r.retained for r in records)
    n_optimistic = sum(r.optimistic for r in records)
    return SweepOutcome(len(records), n_retained, n_optimistic, records)
