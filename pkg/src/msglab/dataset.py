"""Toy environments and offline dataset generation.

Two generators are provided:

* a Gaussian MDP whose states, actions, next states and rewards are all
  i.i.d. standard normal, used to exhibit optimistic LCB estimates with
  linear models;
* the Continuous Chain MDP on ``[-1, 1]`` with dynamics ``s' = clip(s + a)``
  and an indicator reward on ``[0.75, 1]``.

Each episode draws from its own random stream,
``SeedSequence(seed, spawn_key=(episode,))``, so episodes can be generated in
any order (or in parallel) and still produce the same dataset.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterator

import numpy as np

from msglab.errors import DimensionMismatch, EmptyDataset


def config_hash(cfg: Any) -> str:
    """Short, stable hash of a dataclass config."""
    payload = json.dumps(asdict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def episode_rng(seed: int, episode: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(episode,))))


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    a_next: np.ndarray


@dataclass(frozen=True, eq=False)
class OfflineDataset:
    """Row-aligned data matrices.

    ``X`` holds ``(s, a)`` rows, ``R`` the rewards and ``Xp`` the
    ``(s', pi(s'))`` rows. Columns are states first, then actions. Arrays are
    made read-only on construction.
    """

    X: np.ndarray
    R: np.ndarray
    Xp: np.ndarray
    state_dim: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        X = np.array(self.X, dtype=np.float64, order="C")
        R = np.array(self.R, dtype=np.float64).reshape(-1)
        Xp = np.array(self.Xp, dtype=np.float64, order="C")
        if X.ndim != 2 or Xp.ndim != 2:
            raise DimensionMismatch("X and Xp must be matrices")
        if not (X.shape[0] == R.shape[0] == Xp.shape[0]):
            raise DimensionMismatch(
                f"row counts differ: X={X.shape[0]}, R={R.shape[0]}, Xp={Xp.shape[0]}"
            )
        if X.shape[1] != Xp.shape[1]:
            raise DimensionMismatch(f"column counts differ: X={X.shape[1]}, Xp={Xp.shape[1]}")
        if X.shape[0] < 1:
            raise EmptyDataset("dataset has no rows")
        if not 1 <= self.state_dim < X.shape[1]:
            raise DimensionMismatch(f"state_dim={self.state_dim} incompatible with {X.shape[1]} columns")
        for arr in (X, R, Xp):
            arr.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "Xp", Xp)

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def action_dim(self) -> int:
        return self.X.shape[1] - self.state_dim

    @property
    def states(self) -> np.ndarray:
        return self.X[:, : self.state_dim]

    @property
    def actions(self) -> np.ndarray:
        return self.X[:, self.state_dim :]

    @property
    def next_states(self) -> np.ndarray:
        return self.Xp[:, : self.state_dim]

    def transitions(self) -> Iterator[Transition]:
        ds = self.state_dim
        for x, r, xp in zip(self.X, self.R, self.Xp):
            yield Transition(x[:ds], x[ds:], float(r), xp[:ds], xp[ds:])

    def save(self, directory: str | Path) -> list[Path]:
        """Write ``x.csv``, ``r.csv``, ``xp.csv`` and ``meta.json``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        ds, da = self.state_dim, self.action_dim
        header = [f"s{i}" for i in range(ds)] + [f"a{i}" for i in range(da)]
        paths = [directory / "x.csv", directory / "r.csv", directory / "xp.csv"]
        _write_matrix(paths[0], header, self.X)
        _write_matrix(paths[1], ["r"], self.R[:, None])
        _write_matrix(paths[2], header, self.Xp)
        meta_path = directory / "meta.json"
        meta = {"state_dim": ds, "action_dim": da, "rows": len(self), **self.meta}
        meta_path.write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
        return paths + [meta_path]

    @classmethod
    def load(cls, directory: str | Path) -> "OfflineDataset":
        directory = Path(directory)
        meta = json.loads((directory / "meta.json").read_text())
        state_dim = meta.pop("state_dim")
        meta.pop("action_dim", None)
        meta.pop("rows", None)
        X = _read_matrix(directory / "x.csv")
        R = _read_matrix(directory / "r.csv")[:, 0]
        Xp = _read_matrix(directory / "xp.csv")
        return cls(X, R, Xp, state_dim=state_dim, meta=meta)


def _write_matrix(path: Path, header: list[str], mat: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in mat:
            w.writerow([repr(float(v)) for v in row])


def _read_matrix(path: Path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return np.array([[float(v) for v in row] for row in rows[1:]], dtype=np.float64)


# --- Gaussian MDP ---------------------------------------------------------


@dataclass(frozen=True)
class GaussianMdpConfig:
    d_s: int = 30
    d_a: int = 30
    n_episodes: int = 5
    episode_len: int = 5
    seed: int = 0

    def __post_init__(self):
        for name in ("d_s", "d_a", "n_episodes", "episode_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")


def generate_gaussian_dataset(cfg: GaussianMdpConfig) -> OfflineDataset:
    """Random Gaussian MDP data where the evaluated policy replays the behavior action.

    Per episode: ``s ~ N(0, I)``; per step: ``a ~ N(0, I)``, ``s' ~ N(0, I)``,
    ``r ~ N(0, 1)`` drawn in that order; the row ``(s, a)`` goes to ``X`` and
    ``(s', a)`` to ``Xp``.
    """
    n = cfg.n_episodes * cfg.episode_len
    X = np.empty((n, cfg.d_s + cfg.d_a))
    Xp = np.empty_like(X)
    R = np.empty(n)
    row = 0
    for ep in range(cfg.n_episodes):
        rng = episode_rng(cfg.seed, ep)
        s = rng.standard_normal(cfg.d_s)
        for _ in range(cfg.episode_len):
            a = rng.standard_normal(cfg.d_a)
            s_next = rng.standard_normal(cfg.d_s)
            r = rng.standard_normal()
            X[row, : cfg.d_s] = s
            X[row, cfg.d_s :] = a
            R[row] = r
            Xp[row, : cfg.d_s] = s_next
            Xp[row, cfg.d_s :] = a
            s = s_next
            row += 1
    meta = {"generator": "gaussian_mdp", "seed": cfg.seed, "config_hash": config_hash(cfg), "config": asdict(cfg)}
    return OfflineDataset(X, R, Xp, state_dim=cfg.d_s, meta=meta)


# --- Continuous Chain MDP -------------------------------------------------


@dataclass(frozen=True)
class ChainConfig:
    """Continuous Chain MDP and its data-collection protocol.

    Setting ``gap_lo == gap_hi`` disables the missing-data gap.
    """

    reward_lo: float = 0.75
    reward_hi: float = 1.0
    state_lo: float = -1.0
    state_hi: float = 1.0
    action_range: float = 0.3
    n_episodes: int = 40
    episode_len: int = 30
    gap_lo: float = -0.33
    gap_hi: float = 0.33
    eval_action: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not self.state_lo < self.state_hi:
            raise ValueError("state_lo must be < state_hi")
        if not self.state_lo <= self.gap_lo <= self.gap_hi <= self.state_hi:
            raise ValueError("gap must lie inside the state interval")
        if not self.state_lo <= self.reward_lo <= self.reward_hi <= self.state_hi:
            raise ValueError("reward interval must lie inside the state interval")
        if self.action_range <= 0:
            raise ValueError("action_range must be positive")
        if self.n_episodes < 1 or self.episode_len < 1:
            raise ValueError("n_episodes and episode_len must be >= 1")

    @property
    def has_gap(self) -> bool:
        return self.gap_lo < self.gap_hi

    def in_gap(self, s: float) -> bool:
        return self.has_gap and self.gap_lo <= s <= self.gap_hi


def chain_step(s: float, a: float, cfg: ChainConfig) -> tuple[float, float]:
    s_next = min(max(s + a, cfg.state_lo), cfg.state_hi)
    r = 1.0 if cfg.reward_lo <= s_next <= cfg.reward_hi else 0.0
    return s_next, r


def collect_chain_dataset(cfg: ChainConfig) -> OfflineDataset:
    """Uniform-random behavior data with transitions touching the gap removed.

    Each episode starts from ``Uniform(state_lo, state_hi)`` and takes
    ``Uniform(-action_range, action_range)`` actions. The evaluation policy is
    the constant ``eval_action``.
    """
    X, R, Xp = [], [], []
    for ep in range(cfg.n_episodes):
        rng = episode_rng(cfg.seed, ep)
        s = float(rng.uniform(cfg.state_lo, cfg.state_hi))
        for _ in range(cfg.episode_len):
            a = float(rng.uniform(-cfg.action_range, cfg.action_range))
            s_next, r = chain_step(s, a, cfg)
            if not (cfg.in_gap(s) or cfg.in_gap(s_next)):
                X.append((s, a))
                R.append(r)
                Xp.append((s_next, cfg.eval_action))
            s = s_next
    if not X:
        raise EmptyDataset("gap filtering removed every transition")
    meta = {"generator": "continuous_chain", "seed": cfg.seed, "config_hash": config_hash(cfg), "config": asdict(cfg)}
    return OfflineDataset(np.array(X), np.array(R), np.array(Xp), state_dim=1, meta=meta)


def uncertainty_grid(cfg: ChainConfig, n_points: int = 201) -> np.ndarray:
    """Evenly spaced ``(state, eval_action)`` rows covering the state interval."""
    if n_points < 2:
        raise ValueError("n_points must be >= 2")
    states = np.linspace(cfg.state_lo, cfg.state_hi, n_points)
    return np.column_stack([states, np.full(n_points, cfg.eval_action)])
