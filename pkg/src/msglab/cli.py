"""Command-line experiment runner.

Every subcommand writes CSVs plus ``config.yaml`` and ``manifest.json`` to the
output directory. Exit codes: 0 success, 1 threshold failure, 2 config error,
3 internal error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from msglab import config as cfgmod
from msglab.artifacts import (
    MANIFEST_NAME,
    REGION_HEADER,
    RunManifest,
    region_rows,
    text_hash,
    write_csv,
    write_curve,
    write_sweep_csv,
    write_sweep_summary,
)
from msglab.config import ExperimentConfig, Kind
from msglab.dataset import GaussianMdpConfig, collect_chain_dataset, generate_gaussian_dataset, uncertainty_grid
from msglab.errors import ConfigError, Diverged, MsgLabError, SingularGram
from msglab.fqe import CHAIN_REGIONS, RuleKind, TargetRule, run_fqe, summarize_curve
from msglab.kernel import (
    Method,
    build_kernel_system,
    iterate_linearized_fqe,
    lcb_closed_form,
    remainder_bound,
    run_validation_sweep,
    spectral_norm,
)
from msglab.msg import TrainLog, evaluate_policy, policy_mode_fn, train_msg
from msglab.nnets.ensembles import EnsembleArch, EnsembleKind
from msglab.nnets.gradcheck import grad_check
from msglab.nnets.mlp import MlpSpec
from msglab.nnets.params import save_params
from msglab.policy import PolicySpec, grad_check_log_likelihood

EXIT_OK, EXIT_THRESHOLD, EXIT_CONFIG, EXIT_INTERNAL = 0, 1, 2, 3
OUT_ENV = "MSGLAB_OUT"

log = logging.getLogger("msglab")


def _say(msg: str) -> None:
    print(msg, flush=True)


# ------------------------------------------------------------------ subcommands


def run_validate_theorem(cfg: ExperimentConfig, out: Path) -> tuple[int, list[Path]]:
    sw = cfg.sweep
    files = []
    for seed in cfg.seeds:
        gcfg = replace(cfg.gaussian, seed=seed)
        outcome = run_validation_sweep(gcfg, sw.gamma, sw.horizon, sw.n_seeds, sw.ridge, workers=cfg.workers)
        sub = out / f"seed_{seed}"
        files += [write_sweep_csv(outcome, sub / "sweep.csv"), write_sweep_summary(outcome, sub / "summary.csv")]
        _say(
            f"seed {seed}: n_seeds={outcome.n_seeds} n_retained={outcome.n_retained} "
            f"n_optimistic={outcome.n_optimistic} fraction={outcome.optimistic_fraction:.3f}"
        )
    # an empty optimistic set is a valid result, so the sweep never fails a threshold
    return EXIT_OK, files


def oracle_instance(seed: int, index: int, max_rows: int, max_dim: int):
    """Random small Gaussian-MDP instance with at most ``max_rows`` transitions."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))
    d_s = int(rng.integers(2, max_dim // 2 + 1))
    d_a = int(rng.integers(2, max_dim // 2 + 1))
    # at most half as many rows as features keeps most instances inside the gamma ||C|| < 1 gate
    limit = max(1, min(max_rows, (d_s + d_a) // 2))
    episode_len = int(rng.integers(1, min(5, limit) + 1))
    n_episodes = int(rng.integers(1, limit // episode_len + 1))
    return generate_gaussian_dataset(GaussianMdpConfig(d_s, d_a, n_episodes, episode_len, int(rng.integers(2**31))))


ORACLE_HEADER = [
    "instance",
    "n_rows",
    "dim",
    "t",
    "gamma_C_norm",
    "method",
    "max_dev_mean",
    "max_dev_std",
    "max_dev_lcb",
    "allowed",
    "status",
]


def oracle_rows(seed: int, index: int, oc) -> list[tuple]:
    dataset = oracle_instance(seed, index, oc.max_rows, oc.max_dim)
    t = 0 if index % 5 == 0 else oc.horizon
    dim = dataset.X.shape[1]
    try:
        system = build_kernel_system(dataset)
        gc = oc.gamma * spectral_norm(system.C)
    except SingularGram:
        return [(index, len(dataset), dim, t, float("nan"), "-", "", "", "", "", "unretained")]
    if gc >= 1.0:
        return [(index, len(dataset), dim, t, gc, "-", "", "", "", "", "unretained")]
    allowed = oc.tolerance + remainder_bound(system, dataset, oc.gamma, t)
    rows, reports = [], {}
    for method in Method:
        rep = lcb_closed_form(system, dataset, oc.gamma, t, method)
        ref = iterate_linearized_fqe(system, dataset, oc.gamma, t, method)
        reports[method] = rep
        dev_mean = float(np.max(np.abs(rep.mean_term - ref.mean)))
        dev_std = float(np.max(np.abs(-rep.pessimism_term - ref.std)))
        dev_lcb = float(np.max(np.abs(rep.q_lcb - ref.lcb)))
        # shared targets are deterministic, so the recursion folds the backed-up
        # penalty into its mean; only the LCB itself is comparable there
        worst = max(dev_mean, dev_std, dev_lcb) if method is Method.INDEPENDENT else dev_lcb
        ok = worst <= allowed
        rows.append((index, len(dataset), dim, t, gc, method.value, dev_mean, dev_std, dev_lcb, allowed, "pass" if ok else "fail"))
    if t == 0:
        a, b = reports[Method.INDEPENDENT], reports[Method.SHARED]
        same = np.array_equal(a.q_lcb, b.q_lcb) and np.array_equal(a.pessimism_term, b.pessimism_term)
        rows.append((index, len(dataset), dim, t, gc, "t0_coincide", 0.0, 0.0, 0.0, 0.0, "pass" if same else "fail"))
    return rows


def run_oracle_check(cfg: ExperimentConfig, out: Path) -> tuple[int, list[Path]]:
    oc = cfg.oracle
    files, failed = [], False
    for seed in cfg.seeds:
        rows = []
        for i in range(oc.n_instances):
            rows += oracle_rows(seed, i, oc)
        files.append(write_csv(out / f"seed_{seed}" / "oracle.csv", ORACLE_HEADER, rows))
        n_fail = sum(r[-1] == "fail" for r in rows)
        n_skip = sum(r[-1] == "unretained" for r in rows)
        checked = [r for r in rows if r[-1] in ("pass", "fail") and r[5] != "t0_coincide"]
        worst = max((r[8] / r[9] for r in checked), default=0.0)
        _say(
            f"seed {seed}: {oc.n_instances} instances, {n_skip} unretained, {n_fail} failures, "
            f"worst lcb deviation / allowance {worst:.3e}"
        )
        failed |= n_fail > 0
    return (EXIT_THRESHOLD if failed else EXIT_OK), files


def run_hash(*configs) -> str:
    """Short hash of the dataclass configs that determine one run's output."""
    return text_hash(repr([asdict(c) for c in configs]))


def run_toy_chain(cfg: ExperimentConfig, out: Path) -> tuple[int, list[Path]]:
    tc = cfg.toy
    files, failed = [], False
    for seed in cfg.seeds:
        chain = replace(cfg.chain, seed=seed)
        dataset = collect_chain_dataset(chain)
        grid = uncertainty_grid(chain, tc.grid_points)
        sub = out / f"seed_{seed}"
        summary = []
        for name in tc.rules:
            rule = TargetRule(RuleKind(name), tc.lcb_k)
            fcfg = replace(cfg.fqe, rule=rule, seed=seed)
            try:
                result = run_fqe(dataset, fcfg, grid)
            except Diverged as exc:
                _say(f"seed {seed} rule {name}: diverged ({exc})")
                summary.append((name, "", "", "", "", 0, "diverged"))
                continue
            files.append(write_curve(result.curve, sub / f"curve_{name}_seed{seed}_{run_hash(chain, fcfg)}.csv"))
            regions = summarize_curve(result.curve, CHAIN_REGIONS)
            summary += region_rows(name, regions)
            ratio = regions[0].mean_std / regions[-1].mean_std
            line = f"seed {seed} rule {name}: region std " + " ".join(f"{r.mean_std:.4g}" for r in regions)
            if rule.kind is RuleKind.INDEPENDENT:
                ok = ratio >= tc.min_ratio
                failed |= not ok
                line += f" left/right ratio {ratio:.3f} ({'PASS' if ok else 'FAIL'} >= {tc.min_ratio})"
            _say(line)
        tag = run_hash(chain, replace(cfg.fqe, seed=seed), tc)
        files.append(write_csv(sub / f"region_summary_seed{seed}_{tag}.csv", REGION_HEADER, summary))
    return (EXIT_THRESHOLD if failed else EXIT_OK), files


def run_msg_train(cfg: ExperimentConfig, out: Path) -> tuple[int, list[Path]]:
    rc = cfg.run
    files, failed = [], False
    for seed in cfg.seeds:
        chain = replace(cfg.chain, seed=seed)
        hp = replace(cfg.msg, seed=seed)
        sub = out / f"seed_{seed}"
        sub.mkdir(parents=True, exist_ok=True)
        dataset = collect_chain_dataset(chain)
        tlog = TrainLog()
        try:
            result = train_msg(dataset, hp, action_scale=chain.action_range, tlog=tlog)
        except Diverged:
            # keep what was logged before the failure
            files.append(tlog.write_csv(sub / "train_log.csv"))
            raise
        files.append(tlog.write_csv(sub / "train_log.csv"))
        files += save_params(sub / "actor", result.actor.params, {"kind": "policy", "seed": seed})
        files += save_params(sub / "critic", result.critic.params, {"kind": hp.ensemble_kind, "seed": seed})
        files += save_params(sub / "critic_target", result.critic.target, {"kind": hp.ensemble_kind, "seed": seed})
        mean_return, success = evaluate_policy(
            policy_mode_fn(result.actor), chain, rc.eval_episodes, rc.eval_horizon, rc.eval_seed
        )
        ok = success >= rc.min_success
        failed |= not ok
        files.append(
            write_csv(
                sub / "evaluation.csv",
                ["episodes", "horizon", "mean_return", "success_rate", "min_success", "status"],
                [(rc.eval_episodes, rc.eval_horizon, mean_return, success, rc.min_success, "pass" if ok else "fail")],
            )
        )
        _say(f"seed {seed}: success rate {success:.3f} mean return {mean_return:.3f} ({'PASS' if ok else 'FAIL'})")
    return (EXIT_THRESHOLD if failed else EXIT_OK), files


def grad_check_models(seed_width: int = 16) -> dict[str, object]:
    tanh = MlpSpec(3, (seed_width, seed_width), 1, "tanh")
    models: dict[str, object] = {
        "mlp_tanh": MlpSpec(3, (seed_width, seed_width), 2, "tanh"),
        "mlp_relu": MlpSpec(3, (seed_width, seed_width), 2, "relu"),
        "mlp_erf": MlpSpec(3, (seed_width, seed_width), 2, "erf"),
    }
    for kind in EnsembleKind:
        models[kind.value] = EnsembleArch(kind, 4, tanh)
    models["policy_loglik"] = PolicySpec(3, 2, (seed_width, seed_width), "tanh", 1.0)
    return models


def run_grad_check(cfg: ExperimentConfig, out: Path) -> tuple[int, list[Path]]:
    gc = cfg.gradcheck
    files, failed = [], False
    for seed in cfg.seeds:
        rows = []
        for name, model in grad_check_models().items():
            if isinstance(model, PolicySpec):
                err = grad_check_log_likelihood(model, seed, gc.n_probes, gc.batch)
            else:
                err = grad_check(model, seed, gc.n_probes, gc.batch)
            ok = err < gc.tolerance
            failed |= not ok
            rows.append((name, gc.n_probes, err, "pass" if ok else "fail"))
            _say(f"seed {seed} {name}: max relative error {err:.3e} ({'PASS' if ok else 'FAIL'})")
        files.append(write_csv(out / f"seed_{seed}" / "grad_check.csv", ["architecture", "n_probes", "max_rel_error", "status"], rows))
    return (EXIT_THRESHOLD if failed else EXIT_OK), files


RUNNERS = {
    Kind.VALIDATE_THEOREM: run_validate_theorem,
    Kind.ORACLE_CHECK: run_oracle_check,
    Kind.TOY_CHAIN: run_toy_chain,
    Kind.MSG_TRAIN: run_msg_train,
    Kind.GRAD_CHECK: run_grad_check,
}


# ------------------------------------------------------------------ arguments


def read_seed_file(path: str | Path) -> tuple[int, ...]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read seeds file {path}: {exc}") from exc
    seeds = []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        for tok in line.replace(",", " ").split():
            try:
                seeds.append(int(tok))
            except ValueError:
                raise ConfigError(f"{path} line {n}: not an integer seed: {tok!r}") from None
    if not seeds:
        raise ConfigError(f"{path}: no seeds listed")
    return tuple(seeds)


def resolve_config(kind: Kind, args) -> ExperimentConfig:
    cfg = cfgmod.load(args.config) if args.config else cfgmod.default_config(kind)
    if cfg.kind is not kind:
        raise ConfigError(f"{args.config}: config kind {cfg.kind.value!r} does not match subcommand {kind.value!r}")
    if getattr(args, "quick", False):
        cfg = cfgmod.quick_config(cfg)
    if getattr(args, "seeds", None):
        cfg = replace(cfg, seeds=read_seed_file(args.seeds))
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    if getattr(args, "workers", None) is not None:
        cfg = replace(cfg, workers=args.workers)
    if getattr(args, "out", None):
        cfg = replace(cfg, out_dir=args.out)
    return cfg


def output_dir(cfg: ExperimentConfig) -> Path:
    if cfg.out_dir:
        return Path(cfg.out_dir)
    return Path(os.environ.get(OUT_ENV, "runs")) / cfg.kind.value


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="YAML config file (defaults used when omitted)")
    p.add_argument("--out", metavar="DIR", help=f"output directory (default ${OUT_ENV}/<subcommand> or runs/<subcommand>)")
    p.add_argument("--seed", type=int, help="run a single seed")
    p.add_argument("--seeds", metavar="FILE", help="file of integer seeds, one run per seed")
    p.add_argument("--workers", type=int, help="worker processes; 0 means all available cores")
    p.add_argument("--quick", action="store_true", help="CI-scale overrides")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msglab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        Kind.VALIDATE_THEOREM: "count Gaussian-MDP instances whose shared-target LCB turns optimistic",
        Kind.ORACLE_CHECK: "compare closed-form LCB terms with the iterated recursions",
        Kind.TOY_CHAIN: "FQE uncertainty curves on the chain MDP for each target rule",
        Kind.MSG_TRAIN: "train and evaluate MSG on the chain MDP",
        Kind.GRAD_CHECK: "finite-difference check of every architecture's gradients",
    }
    for kind, text in helps.items():
        _add_run_flags(sub.add_parser(kind.value, help=text))
    pc = sub.add_parser("print-config", help="print the default (or effective) config for a subcommand")
    pc.add_argument("kind", choices=[k.value for k in Kind])
    _add_run_flags(pc)
    return parser


def run(kind: Kind, cfg: ExperimentConfig) -> int:
    out = output_dir(cfg)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc}") from exc
    text = cfgmod.dumps(cfg)
    cfg_path = out / "config.yaml"
    cfg_path.write_text(text, newline="\n")
    manifest = RunManifest(command=kind.value, config_hash=text_hash(text))
    start = time.perf_counter()
    code, files = EXIT_INTERNAL, None
    try:
        code, files = RUNNERS[kind](cfg, out)
    finally:
        if files is None:
            # failed run: record whatever was written so partial logs are traceable
            files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != MANIFEST_NAME)
        manifest.duration_s = time.perf_counter() - start
        manifest.exit_code = code
        manifest.add(out, dict.fromkeys([cfg_path, *files]))
        manifest.write(out)
    return code


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        if args.command == "print-config":
            cfg = resolve_config(Kind(args.kind), args)
            sys.stdout.write(cfgmod.dumps(cfg))
            return EXIT_OK
        kind = Kind(args.command)
        cfg = resolve_config(kind, args)
        return run(kind, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MsgLabError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
