from pathlib import Path

import pytest

# Small configs that exercise every subcommand end to end in a few seconds.
TINY_CONFIGS = {
    "validate-theorem": "kind: validate-theorem\nsweep: {n_seeds: 12, horizon: 100}\n",
    "oracle-check": "kind: oracle-check\noracle: {n_instances: 6, horizon: 20}\n",
    "toy-chain": (
        "kind: toy-chain\n"
        "chain: {n_episodes: 6, episode_len: 10}\n"
        "fqe: {n_members: 2, outer_iters: 2, inner_steps: 3, hidden_dims: [8]}\n"
        "toy: {grid_points: 21, min_ratio: 0.0}\n"
    ),
    "msg-train": (
        "kind: msg-train\n"
        "chain: {n_episodes: 6, episode_len: 10}\n"
        "msg: {n_members: 2, batch_size: 16, bc_steps: 3, train_steps: 3, q_hidden: [8], pi_hidden: [8]}\n"
        "run: {eval_episodes: 5, eval_horizon: 10, min_success: 0.0}\n"
    ),
    "grad-check": "kind: grad-check\ngradcheck: {n_probes: 12}\n",
}


@pytest.fixture
def tiny_config(tmp_path):
    def make(kind: str, extra: str = "") -> Path:
        path = tmp_path / f"{kind}.yaml"
        path.write_text(TINY_CONFIGS[kind] + extra)
        return path

    return make


def csv_bytes(root: Path) -> dict[str, bytes]:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*.csv"))}


# One line per acceptance criterion, printed after the test session.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
