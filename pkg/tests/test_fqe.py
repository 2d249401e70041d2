import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from msglab.dataset import ChainConfig, OfflineDataset, collect_chain_dataset, uncertainty_grid
from msglab.errors import DimensionMismatch, Diverged, EmptyRegion
from msglab.fqe import (
    ALL_RULES,
    CHAIN_REGIONS,
    FqeConfig,
    RuleKind,
    TargetRule,
    UncertaintyCurve,
    compute_targets,
    fit_targets,
    run_fqe,
    summarize_curve,
)
from msglab.kernel import linearized_member_values
from msglab.nnets import adam_init, ensemble_forward, init_ensemble
from msglab.nnets.params import member, stack

R2 = np.array([0.0])


def rule(kind, k=2.0):
    return TargetRule(RuleKind(kind), k)


def test_equal_members_all_rules_agree():
    q = np.full((3, 4), 1.5)
    r = np.array([0.0, 1.0, -2.0])
    for tr in ALL_RULES:
        assert np.allclose(compute_targets(tr, q, r, 0.9), (r + 0.9 * 1.5)[:, None], rtol=0, atol=1e-15)


def test_hand_evaluated_targets():
    q = np.array([[0.0, 2.0]])
    assert np.array_equal(compute_targets(rule("shared_min"), q, R2, 1.0), [[0.0, 0.0]])
    assert np.array_equal(compute_targets(rule("independent"), q, R2, 1.0), [[0.0, 2.0]])
    assert np.array_equal(compute_targets(rule("shared_mean"), q, R2, 1.0), [[1.0, 1.0]])
    # population std of (1, 3) is 1
    assert np.array_equal(compute_targets(rule("shared_lcb", 2.0), np.array([[1.0, 3.0]]), R2, 1.0), [[0.0, 0.0]])


def test_double_q_targets_min_pool():
    q = np.array([[[1.0, 3.0], [5.0, 2.0]]])
    assert np.array_equal(compute_targets(rule("independent_double_q"), q, R2, 1.0), [[1.0, 2.0]])
    with pytest.raises(DimensionMismatch):
        compute_targets(rule("independent_double_q"), np.zeros((1, 2, 3)), R2, 1.0)


def test_target_shape_errors():
    with pytest.raises(DimensionMismatch):
        compute_targets(rule("independent"), np.zeros((3, 2)), np.zeros(2), 0.9)
    with pytest.raises(ValueError):
        TargetRule(RuleKind.SHARED_LCB, k=0.0)


member_outputs = arrays(np.float64, (5, 4), elements=st.floats(-50, 50))
rewards = arrays(np.float64, (5,), elements=st.floats(-5, 5))


@settings(max_examples=60, deadline=None)
@given(member_outputs, rewards, st.floats(0.0, 0.99))
def test_target_ordering(q, r, gamma):
    lcb = compute_targets(rule("shared_lcb"), q, r, gamma)[:, 0]
    mean = compute_targets(rule("shared_mean"), q, r, gamma)[:, 0]
    mn = compute_targets(rule("shared_min"), q, r, gamma)[:, 0]
    ind = compute_targets(rule("independent"), q, r, gamma)
    tol = 1e-9 * (1 + np.abs(q).max())
    assert np.all(lcb <= mean + tol)
    assert np.all(mean <= ind.max(axis=1) + tol)
    assert np.all(mn <= mean + tol)


@settings(max_examples=40, deadline=None)
@given(member_outputs, rewards, st.integers(0, 3), st.floats(-10, 10).filter(lambda d: abs(d) > 1e-3))
def test_target_locality(q, r, j, delta):
    moved = q.copy()
    moved[:, j] += delta
    for tr in ALL_RULES:
        before = compute_targets(tr, q, r, 0.9)
        after = compute_targets(tr, moved, r, 0.9)
        others = [i for i in range(4) if i != j]
        if tr.shared:
            # one common column, broadcast to every member
            assert np.all(after == after[:, :1])
        else:
            assert np.array_equal(after[:, others], before[:, others])


def test_locality_through_parameters():
    ds = collect_chain_dataset(ChainConfig(n_episodes=4, episode_len=10))
    for tr in ALL_RULES:
        cfg = FqeConfig(n_members=3, outer_iters=1, inner_steps=1, hidden_dims=(8,), rule=tr)
        arch = cfg.arch(2)
        p = init_ensemble(arch, 0)
        moved = {k: v.copy() for k, v in p.items()}
        moved["w0"][1] += 0.5  # member 1 (and, for double-Q, its first subnetwork)
        t0 = compute_targets(tr, ensemble_forward(arch, p, ds.Xp), ds.R, 0.99)
        t1 = compute_targets(tr, ensemble_forward(arch, moved, ds.Xp), ds.R, 0.99)
        if tr.shared:
            assert not np.array_equal(t0[:, 0], t1[:, 0])
        else:
            assert np.array_equal(t0[:, [0, 2]], t1[:, [0, 2]])
            assert not np.array_equal(t0[:, 1], t1[:, 1])


@pytest.mark.parametrize("tr", ALL_RULES, ids=lambda t: t.kind.value)
def test_symmetry_preserved(tr):
    ds = collect_chain_dataset(ChainConfig(n_episodes=4, episode_len=10))
    cfg = FqeConfig(n_members=3, hidden_dims=(8,), lr=1e-3, rule=tr)
    arch = cfg.arch(2)
    one = member(init_ensemble(arch, 0), 0)
    per_net = 2 if tr.kind is RuleKind.INDEPENDENT_DOUBLE_Q else 1
    if per_net == 2:
        # both subnetworks identical across members, first and second kept distinct
        full = init_ensemble(arch, 0)
        p = stack([member(full, 0)] * 3 + [member(full, 3)] * 3)
    else:
        p = stack([one] * 3)
    opt = adam_init(p, lr=1e-3)
    for _ in range(3):
        targets = compute_targets(tr, ensemble_forward(arch, p, ds.Xp), ds.R, 0.99)
        p, opt, _ = fit_targets(arch, p, opt, ds.X, targets, 20)
    q = ensemble_forward(arch, p, ds.X)
    assert np.array_equal(q[:, 0], q[:, 1]) and np.array_equal(q[:, 0], q[:, 2])


def test_single_member_rules_coincide():
    ds = collect_chain_dataset(ChainConfig(n_episodes=3, episode_len=10))
    grid = uncertainty_grid(ChainConfig(), 11)
    runs = []
    for kind in ("independent", "shared_mean", "shared_lcb", "shared_min"):
        cfg = FqeConfig(n_members=1, outer_iters=3, inner_steps=5, hidden_dims=(8,), rule=rule(kind))
        runs.append(run_fqe(ds, cfg, grid))
    for res in runs[1:]:
        assert np.array_equal(res.curve.mean_q, runs[0].curve.mean_q)
        assert np.array_equal(res.curve.std_q, np.zeros(11))


def test_linear_member_matches_kernel_recursion():
    # one transition whose only nonzero input coordinate is the state, so Adam's
    # per-coordinate scaling cannot tilt the solution away from the min-norm update
    c, gamma, r, n_iter = 0.5, 0.9, 1.0, 15
    x = np.array([[0.8, 0.0]])
    ds = OfflineDataset(x, [r], c * x, state_dim=1)
    cfg = FqeConfig(
        gamma=gamma, n_members=3, outer_iters=n_iter, inner_steps=3000, lr=1e-3,
        hidden_dims=(), weight_scale=1.0, use_bias=False, seed=4,
    )
    res = run_fqe(ds, cfg, ds.Xp)
    arch = cfg.arch(2)
    p0 = init_ensemble(arch, cfg.seed)
    q0_x = ensemble_forward(arch, p0, ds.X)
    q0_xp = ensemble_forward(arch, p0, ds.Xp)
    C = np.array([[c]])
    for i in range(3):
        expected = linearized_member_values(C, ds.R, q0_x[:, i], q0_xp[:, i], gamma, n_iter)
        assert res.curve.per_member_q[0, i] == pytest.approx(expected[0], abs=1e-3)


def test_run_fqe_deterministic_and_shapes():
    ds = collect_chain_dataset(ChainConfig(n_episodes=4, episode_len=10))
    grid = uncertainty_grid(ChainConfig(), 21)
    cfg = FqeConfig(n_members=4, outer_iters=2, inner_steps=4, hidden_dims=(16,))
    a = run_fqe(ds, cfg, grid)
    b = run_fqe(ds, cfg, grid)
    assert np.array_equal(a.curve.per_member_q, b.curve.per_member_q)
    assert a.curve.per_member_q.shape == (21, 4)
    assert np.array_equal(a.curve.states, grid[:, 0])
    assert np.array_equal(a.curve.std_q, a.curve.per_member_q.std(axis=1))
    assert np.all(a.curve.std_q >= 0)
    assert len(a.loss_history) == 2


def test_double_q_run():
    ds = collect_chain_dataset(ChainConfig(n_episodes=3, episode_len=10))
    cfg = FqeConfig(n_members=2, outer_iters=2, inner_steps=3, hidden_dims=(8,), rule=rule("independent_double_q"))
    res = run_fqe(ds, cfg, uncertainty_grid(ChainConfig(), 5))
    assert res.arch.kind.value == "double_q"
    assert res.curve.per_member_q.shape == (5, 2)


def test_diverged():
    ds = collect_chain_dataset(ChainConfig(n_episodes=3, episode_len=10))
    cfg = FqeConfig(n_members=2, outer_iters=3, inner_steps=3, hidden_dims=(), lr=1e300)
    with pytest.raises(Diverged):
        run_fqe(ds, cfg, uncertainty_grid(ChainConfig(), 5))


def test_config_validation():
    for kwargs in (dict(gamma=1.0), dict(n_members=0), dict(inner_steps=0), dict(lr=0.0)):
        with pytest.raises(ValueError):
            FqeConfig(**kwargs)
    assert FqeConfig(rule="shared_min").rule.kind is RuleKind.SHARED_MIN


def curve_with_std(std, n=201):
    s = np.linspace(-1, 1, n)
    return UncertaintyCurve(s, np.zeros(n), std(s))


def test_summarize_constant():
    out = summarize_curve(curve_with_std(lambda s: np.full_like(s, 0.7)), CHAIN_REGIONS)
    assert len(out) == 3
    for row in out:
        assert row.mean_std == pytest.approx(0.7) and row.max_std == pytest.approx(0.7)


def test_summarize_abs_state():
    out = summarize_curve(curve_with_std(np.abs), CHAIN_REGIONS)
    assert out[2].mean_std == pytest.approx(0.665, abs=1e-9)
    assert out[2].n_points == 68


def test_summarize_empty_region():
    with pytest.raises(EmptyRegion):
        summarize_curve(curve_with_std(np.abs, 5), [(0.1, 0.2)])
