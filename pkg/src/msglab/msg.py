"""MSG: actor-critic offline RL ascending the LCB of an independently trained Q-ensemble.

Critic: every member regresses onto ``r + gamma * Qbar_i(s', a')`` computed
from its *own* EMA target network, plus ``alpha`` times the support
regularizer ``mean Q_i(s, a_pi) - mean Q_i(s, a_data)``.

Actor: gradient ascent on ``mean_i Q_i(s, a) + beta * std_i Q_i(s, a)`` with
``beta <= 0``, through a reparameterized action sample.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from msglab import policy as pol
from msglab.dataset import ChainConfig, OfflineDataset, chain_step
from msglab.errors import Diverged
from msglab.nnets import adam_init, adam_update
from msglab.nnets.adam import AdamState
from msglab.nnets.ensembles import (
    EnsembleArch,
    EnsembleKind,
    ensemble_backward,
    ensemble_forward,
    ensemble_forward_cache,
    init_ensemble,
)
from msglab.nnets.mlp import MlpSpec
from msglab.nnets.params import Params, copy_params, tree_map
from msglab.policy import PolicySpec

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MsgHyperparams:
    beta: float = -4.0
    alpha: float = 0.0
    gamma: float = 0.99
    tau: float = 0.995
    n_members: int = 4
    batch_size: int = 256
    bc_steps: int = 1000
    train_steps: int = 5000
    lr_q: float = 3e-4
    lr_pi: float = 3e-4
    seed: int = 0
    ensemble_kind: str = "deep"
    q_hidden: tuple[int, ...] = (64, 64)
    pi_hidden: tuple[int, ...] = (64, 64)
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "q_hidden", tuple(self.q_hidden))
        object.__setattr__(self, "pi_hidden", tuple(self.pi_hidden))
        EnsembleKind(self.ensemble_kind)
        if self.beta > 0:
            raise ValueError("beta must be <= 0 (Q_LCB = mean + beta * std)")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")
        if not 0 < self.tau <= 1:
            raise ValueError("tau must lie in (0, 1]")
        if self.n_members < 1 or self.batch_size < 1:
            raise ValueError("n_members and batch_size must be >= 1")
        if self.bc_steps < 0 or self.train_steps < 0:
            raise ValueError("step counts must be >= 0")

    def q_arch(self, input_dim: int) -> EnsembleArch:
        base = MlpSpec(input_dim, self.q_hidden, 1, self.activation, 1.0, 0.0)
        return EnsembleArch(EnsembleKind(self.ensemble_kind), self.n_members, base)


@dataclass(eq=False)
class CriticState:
    arch: EnsembleArch
    params: Params
    target: Params
    opt: AdamState


@dataclass(eq=False)
class ActorState:
    spec: PolicySpec
    params: Params
    opt: AdamState


@dataclass
class TrainLog:
    step: list[int] = field(default_factory=list)
    phase: list[str] = field(default_factory=list)
    td_loss: list[list[float]] = field(default_factory=list)
    regularizer: list[float] = field(default_factory=list)
    q_lcb_mean: list[float] = field(default_factory=list)
    policy_loss: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.step)

    def append(self, step, phase, td_loss, regularizer, q_lcb_mean, policy_loss):
        self.step.append(step)
        self.phase.append(phase)
        self.td_loss.append([float(v) for v in td_loss])
        self.regularizer.append(float(regularizer))
        self.q_lcb_mean.append(float(q_lcb_mean))
        self.policy_loss.append(float(policy_loss))

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        n = len(self.td_loss[0]) if self.td_loss else 0
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "phase", *[f"td_loss_{i}" for i in range(n)], "regularizer", "q_lcb_mean", "policy_loss"])
            for i in range(len(self)):
                w.writerow(
                    [
                        self.step[i],
                        self.phase[i],
                        *[repr(v) for v in self.td_loss[i]],
                        repr(self.regularizer[i]),
                        repr(self.q_lcb_mean[i]),
                        repr(self.policy_loss[i]),
                    ]
                )
        return path


@dataclass(frozen=True, eq=False)
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray


def sample_batch(dataset: OfflineDataset, size: int, rng: np.random.Generator) -> Batch:
    """Uniform minibatch with replacement."""
    idx = rng.integers(0, len(dataset), size=size)
    return Batch(dataset.states[idx], dataset.actions[idx], dataset.R[idx], dataset.next_states[idx])


def lcb_values(q: np.ndarray, beta: float) -> np.ndarray:
    """``mean_i q + beta * std_i q`` over members (population std), per row."""
    return q.mean(axis=1) + beta * q.std(axis=1)


def _lcb_grad(q: np.ndarray, beta: float) -> np.ndarray:
    """d lcb_values / d q, shape ``(B, N)``."""
    n = q.shape[1]
    centered = q - q.mean(axis=1, keepdims=True)
    std = q.std(axis=1, keepdims=True)
    safe = np.where(std > 0, std, 1.0)
    return 1.0 / n + beta * np.where(std > 0, centered / (n * safe), 0.0)


def ema(target: Params, online: Params, tau: float) -> Params:
    return tree_map(lambda tb, th: tau * tb + (1.0 - tau) * th, target, online)


def policy_evaluation_step(
    batch: Batch, critic: CriticState, actor: ActorState, hp: MsgHyperparams, rng: np.random.Generator
) -> tuple[CriticState, np.ndarray, float]:
    """One Adam step on every member's TD loss (+ alpha * regularizer), then EMA.

    Returns ``(critic, per-member TD loss, mean regularizer)``. One action
    sample per next state is shared by all members; each member still reads
    only its own target network.
    """
    arch, params = critic.arch, critic.params
    m = batch.states.shape[0]
    da = actor.spec.action_dim
    noise = rng.standard_normal((m, da))
    a_next = pol.sample(actor.params, actor.spec, batch.next_states, noise)
    q_next = ensemble_forward(arch, critic.target, np.hstack([batch.next_states, a_next]))
    y = batch.rewards[:, None] + hp.gamma * q_next

    q, cache = ensemble_forward_cache(arch, params, np.hstack([batch.states, batch.actions]))
    err = q - y
    td = np.einsum("bn,bn->n", err, err) / m
    dout = (2.0 / m) * err

    reg = np.zeros(arch.n_members)
    a_pi = pol.sample(actor.params, actor.spec, batch.states, rng.standard_normal((m, da)))
    if hp.alpha != 0.0:
        q_pi, cache_pi = ensemble_forward_cache(arch, params, np.hstack([batch.states, a_pi]))
        reg = q_pi.mean(axis=0) - q.mean(axis=0)
        dout = dout - hp.alpha / m
        grads_pi, _ = ensemble_backward(arch, params, cache_pi, np.full_like(q_pi, hp.alpha / m))
    grads, _ = ensemble_backward(arch, params, cache, dout)
    if hp.alpha != 0.0:
        grads = tree_map(np.add, grads, grads_pi)
    if not (np.all(np.isfinite(td)) and np.all(np.isfinite(reg))):
        raise Diverged(f"non-finite critic loss: td={td}, reg={reg}")
    opt, params = adam_update(critic.opt, params, grads)
    target = ema(critic.target, params, hp.tau)
    return CriticState(arch, params, target, opt), td, float(reg.mean())


def lcb_objective(
    actor_params: Params, spec: PolicySpec, arch: EnsembleArch, q_params: Params, states, noise, beta: float
) -> tuple[float, Params]:
    """Mean Q_LCB at reparameterized policy actions, and its policy gradient."""
    actions, pullback = pol.sample_with_grad(actor_params, spec, states, noise)
    q, cache = ensemble_forward_cache(arch, q_params, np.hstack([states, actions]))
    m = states.shape[0]
    value = float(lcb_values(q, beta).mean())
    _, dx = ensemble_backward(arch, q_params, cache, _lcb_grad(q, beta) / m)
    return value, pullback(dx[:, spec.state_dim :])


def msg_policy_optimization_step(
    states: np.ndarray, critic: CriticState, actor: ActorState, hp: MsgHyperparams, rng: np.random.Generator
) -> tuple[ActorState, float]:
    """One Adam step ascending the batch-mean Q_LCB; returns ``(actor, objective)``."""
    noise = rng.standard_normal((states.shape[0], actor.spec.action_dim))
    value, grads = lcb_objective(actor.params, actor.spec, critic.arch, critic.params, states, noise, hp.beta)
    if not np.isfinite(value):
        raise Diverged(f"non-finite policy objective {value}")
    opt, params = adam_update(actor.opt, actor.params, tree_map(np.negative, grads))
    return ActorState(actor.spec, params, opt), value


def bc_step(batch: Batch, actor: ActorState) -> tuple[ActorState, float]:
    """One Adam step maximizing the log-likelihood of dataset actions."""
    ll, grads = pol.log_likelihood(actor.params, actor.spec, batch.states, batch.actions)
    opt, params = adam_update(actor.opt, actor.params, tree_map(np.negative, grads))
    return ActorState(actor.spec, params, opt), ll


def _streams(seed: int):
    ss = np.random.SeedSequence(seed)
    q_seq, pi_seq, batch_seq, noise_seq = ss.spawn(4)
    return (
        int(q_seq.generate_state(1)[0]),
        int(pi_seq.generate_state(1)[0]),
        np.random.default_rng(batch_seq),
        np.random.default_rng(noise_seq),
    )


def init_msg(dataset: OfflineDataset, hp: MsgHyperparams, action_scale: float = 1.0):
    q_seed, pi_seed, batch_rng, noise_rng = _streams(hp.seed)
    arch = hp.q_arch(dataset.X.shape[1])
    q_params = init_ensemble(arch, q_seed)
    critic = CriticState(arch, q_params, copy_params(q_params), adam_init(q_params, lr=hp.lr_q))
    spec = PolicySpec(dataset.state_dim, dataset.action_dim, hp.pi_hidden, hp.activation, action_scale)
    pi_params = pol.init_policy(spec, pi_seed)
    actor = ActorState(spec, pi_params, adam_init(pi_params, lr=hp.lr_pi))
    return critic, actor, batch_rng, noise_rng


def bc_pretrain(
    dataset: OfflineDataset,
    actor: ActorState,
    steps: int,
    batch_size: int = 256,
    seed: int = 0,
    critic: CriticState | None = None,
    hp: MsgHyperparams | None = None,
) -> tuple[ActorState, list[float]]:
    """Behavioral cloning; interleaves critic updates when ``critic`` and ``hp`` are given."""
    rng = np.random.default_rng(seed)
    history = []
    for _ in range(steps):
        batch = sample_batch(dataset, batch_size, rng)
        if critic is not None:
            critic, _, _ = policy_evaluation_step(batch, critic, actor, hp, rng)
        actor, ll = bc_step(batch, actor)
        history.append(ll)
    return actor, history


@dataclass(eq=False)
class MsgResult:
    critic: CriticState
    actor: ActorState
    log: TrainLog


def train_msg(
    dataset: OfflineDataset,
    hp: MsgHyperparams,
    action_scale: float = 1.0,
    progress: bool = False,
    tlog: TrainLog | None = None,
) -> MsgResult:
    """BC warm-up (critic trained alongside), then MSG actor-critic updates.

    Pass ``tlog`` to keep the rows logged so far if training diverges.
    """
    critic, actor, batch_rng, noise_rng = init_msg(dataset, hp, action_scale)
    tlog = TrainLog() if tlog is None else tlog
    total = hp.bc_steps + hp.train_steps
    for step in range(total):
        batch = sample_batch(dataset, hp.batch_size, batch_rng)
        critic, td, reg = policy_evaluation_step(batch, critic, actor, hp, noise_rng)
        if step < hp.bc_steps:
            actor, ll = bc_step(batch, actor)
            a = pol.sample(actor.params, actor.spec, batch.states, noise_rng.standard_normal(batch.actions.shape))
            q = ensemble_forward(critic.arch, critic.params, np.hstack([batch.states, a]))
            tlog.append(step, "bc", td, reg, lcb_values(q, hp.beta).mean(), -ll)
        else:
            actor, value = msg_policy_optimization_step(batch.states, critic, actor, hp, noise_rng)
            tlog.append(step, "msg", td, reg, value, -value)
        if progress and (step % 1000 == 0 or step == total - 1):
            log.info("step %d/%d td=%.4g q_lcb=%.4g", step + 1, total, float(np.mean(td)), tlog.q_lcb_mean[-1])
    return MsgResult(critic, actor, tlog)


def evaluate_policy(
    act, cfg: ChainConfig, n_episodes: int = 100, horizon: int = 30, seed: int = 0
) -> tuple[float, float]:
    """Roll a deterministic policy in the chain MDP from uniform starts.

    ``act`` maps a ``(n, 1)`` state array to ``(n, 1)`` actions. Returns
    ``(mean undiscounted return, fraction of episodes that earned a reward)``.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0xE7A1,)))
    s = rng.uniform(cfg.state_lo, cfg.state_hi, size=n_episodes)
    returns = np.zeros(n_episodes)
    for _ in range(horizon):
        a = np.asarray(act(s[:, None]), dtype=np.float64).reshape(n_episodes)
        step = [chain_step(float(si), float(ai), cfg) for si, ai in zip(s, a)]
        s = np.array([p[0] for p in step])
        returns += np.array([p[1] for p in step])
    return float(returns.mean()), float((returns > 0).mean())


def policy_mode_fn(actor: ActorState):
    return lambda states: pol.mode(actor.params, actor.spec, states)
