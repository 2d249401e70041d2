import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msglab.dataset import (
    ChainConfig,
    GaussianMdpConfig,
    OfflineDataset,
    chain_step,
    collect_chain_dataset,
    generate_gaussian_dataset,
    uncertainty_grid,
)
from msglab.errors import DimensionMismatch, EmptyDataset

CHAIN = ChainConfig()


@pytest.mark.parametrize(
    "s, a, s_next, r",
    [(0.70, 0.10, 0.80, 1.0), (0.95, 0.30, 1.00, 1.0), (-0.50, 0.10, -0.40, 0.0)],
)
def test_chain_step_examples(s, a, s_next, r):
    got_s, got_r = chain_step(s, a, CHAIN)
    assert got_s == pytest.approx(s_next, abs=1e-12)
    assert got_r == r


def test_chain_step_clamps_low():
    assert chain_step(-0.9, -0.3, CHAIN) == (-1.0, 0.0)


@given(st.floats(-1, 1), st.floats(-0.3, 0.3))
def test_chain_step_stays_in_bounds(s, a):
    s_next, r = chain_step(s, a, CHAIN)
    assert -1.0 <= s_next <= 1.0
    assert r == (1.0 if 0.75 <= s_next <= 1.0 else 0.0)


def test_chain_dataset_default_size_and_gap():
    ds = collect_chain_dataset(CHAIN)
    assert 1 <= len(ds) <= 40 * 30
    s, s_next = ds.X[:, 0], ds.Xp[:, 0]
    for v in (s, s_next):
        assert not np.any((v >= -0.33) & (v <= 0.33))
    assert np.all(ds.Xp[:, 1] == 0.1)
    assert ds.state_dim == ds.action_dim == 1


def test_chain_dataset_no_gap_keeps_everything():
    ds = collect_chain_dataset(ChainConfig(gap_lo=1.0, gap_hi=1.0))
    assert len(ds) == 1200


def test_chain_dataset_deterministic():
    a = collect_chain_dataset(ChainConfig(seed=7))
    b = collect_chain_dataset(ChainConfig(seed=7))
    assert a.X.tobytes() == b.X.tobytes()
    assert a.R.tobytes() == b.R.tobytes()
    assert a.Xp.tobytes() == b.Xp.tobytes()


def test_chain_rewards_match_next_state():
    ds = collect_chain_dataset(CHAIN)
    expected = ((ds.Xp[:, 0] >= 0.75) & (ds.Xp[:, 0] <= 1.0)).astype(float)
    assert np.array_equal(ds.R, expected)


def test_chain_empty_dataset_raises():
    cfg = ChainConfig(gap_lo=-1.0, gap_hi=1.0, n_episodes=2, episode_len=3)
    with pytest.raises(EmptyDataset):
        collect_chain_dataset(cfg)


@pytest.mark.parametrize(
    "kwargs",
    [dict(state_lo=1.0, state_hi=-1.0), dict(gap_lo=0.5, gap_hi=0.2), dict(reward_hi=1.5), dict(action_range=0.0)],
)
def test_chain_config_validation(kwargs):
    with pytest.raises(ValueError):
        ChainConfig(**kwargs)


def test_gaussian_dataset_shapes():
    ds = generate_gaussian_dataset(GaussianMdpConfig(30, 30, 5, 5, seed=0))
    assert ds.X.shape == (25, 60)
    assert ds.R.shape == (25,)
    assert ds.Xp.shape == (25, 60)


def test_gaussian_single_step_replays_action():
    ds = generate_gaussian_dataset(GaussianMdpConfig(3, 2, 1, 1, seed=4))
    assert len(ds) == 1
    assert np.array_equal(ds.Xp[:, 3:], ds.X[:, 3:])


def test_gaussian_seeds_differ():
    a = generate_gaussian_dataset(GaussianMdpConfig(seed=1))
    b = generate_gaussian_dataset(GaussianMdpConfig(seed=2))
    assert not np.array_equal(a.R, b.R)


@settings(max_examples=30, deadline=None)
@given(
    st.integers(1, 6),
    st.integers(1, 6),
    st.integers(1, 4),
    st.integers(1, 5),
    st.integers(0, 2**32),
)
def test_gaussian_structure(d_s, d_a, n_ep, ep_len, seed):
    cfg = GaussianMdpConfig(d_s, d_a, n_ep, ep_len, seed)
    ds = generate_gaussian_dataset(cfg)
    assert len(ds) == n_ep * ep_len
    # the evaluation policy replays the behavior action
    assert np.array_equal(ds.Xp[:, d_s:], ds.X[:, d_s:])
    # states chain within an episode
    for ep in range(n_ep):
        for k in range(ep_len - 1):
            row = ep * ep_len + k
            assert np.array_equal(ds.Xp[row, :d_s], ds.X[row + 1, :d_s])
    again = generate_gaussian_dataset(cfg)
    assert again.X.tobytes() == ds.X.tobytes()


def test_gaussian_episodes_are_independent_streams():
    # episode e's draws do not depend on how many episodes are generated
    short = generate_gaussian_dataset(GaussianMdpConfig(2, 2, 2, 3, seed=9))
    long = generate_gaussian_dataset(GaussianMdpConfig(2, 2, 4, 3, seed=9))
    assert np.array_equal(short.X, long.X[:6])


def test_gaussian_config_validation():
    with pytest.raises(ValueError):
        GaussianMdpConfig(d_s=0)
    with pytest.raises(ValueError):
        GaussianMdpConfig(seed=-1)


@pytest.mark.parametrize(
    "n, expected",
    [(3, [[-1, 0.1], [0, 0.1], [1, 0.1]]), (2, [[-1, 0.1], [1, 0.1]])],
)
def test_uncertainty_grid_examples(n, expected):
    assert np.allclose(uncertainty_grid(CHAIN, n), expected, atol=0, rtol=0)


def test_uncertainty_grid_spacing():
    g = uncertainty_grid(CHAIN, 201)
    assert np.allclose(np.diff(g[:, 0]), 0.01, atol=1e-12)
    with pytest.raises(ValueError):
        uncertainty_grid(CHAIN, 1)


def test_dataset_validation():
    with pytest.raises(DimensionMismatch):
        OfflineDataset(np.zeros((3, 2)), np.zeros(2), np.zeros((3, 2)), state_dim=1)
    with pytest.raises(DimensionMismatch):
        OfflineDataset(np.zeros((3, 2)), np.zeros(3), np.zeros((3, 3)), state_dim=1)
    with pytest.raises(EmptyDataset):
        OfflineDataset(np.zeros((0, 2)), np.zeros(0), np.zeros((0, 2)), state_dim=1)


def test_dataset_is_read_only():
    ds = collect_chain_dataset(CHAIN)
    with pytest.raises(ValueError):
        ds.X[0, 0] = 5.0


def test_transitions_view():
    ds = generate_gaussian_dataset(GaussianMdpConfig(2, 3, 1, 2, seed=0))
    t = list(ds.transitions())
    assert len(t) == 2
    assert t[0].s.shape == (2,) and t[0].a.shape == (3,)
    assert np.array_equal(t[0].s_next, t[1].s)
    assert np.array_equal(t[0].a_next, t[0].a)


def test_save_load_roundtrip(tmp_path):
    ds = collect_chain_dataset(CHAIN)
    paths = ds.save(tmp_path / "d")
    assert [p.name for p in paths] == ["x.csv", "r.csv", "xp.csv", "meta.json"]
    back = OfflineDataset.load(tmp_path / "d")
    assert back.X.tobytes() == ds.X.tobytes()
    assert back.R.tobytes() == ds.R.tobytes()
    assert back.Xp.tobytes() == ds.Xp.tobytes()
    assert back.meta["generator"] == "continuous_chain"
    header = (tmp_path / "d" / "x.csv").read_text().splitlines()[0]
    assert header == "s0,a0"
    assert b"\r\n" not in (tmp_path / "d" / "x.csv").read_bytes()
