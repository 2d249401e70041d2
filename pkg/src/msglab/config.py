"""Experiment configuration: nested YAML files mapped onto dataclasses.

A config file names one experiment ``kind`` and carries the sections that kind
reads. Unknown keys and ill-typed values raise :class:`ConfigError` with the
line of the offending field.
"""

from __future__ import annotations

import enum
import typing
from dataclasses import dataclass, fields, is_dataclass, replace
from pathlib import Path
from typing import Any

import yaml

from msglab.dataset import ChainConfig, GaussianMdpConfig
from msglab.errors import ConfigError
from msglab.fqe import FqeConfig, RuleKind, TargetRule
from msglab.msg import MsgHyperparams


class Kind(str, enum.Enum):
    VALIDATE_THEOREM = "validate-theorem"
    ORACLE_CHECK = "oracle-check"
    TOY_CHAIN = "toy-chain"
    MSG_TRAIN = "msg-train"
    GRAD_CHECK = "grad-check"


@dataclass(frozen=True)
class SweepSettings:
    gamma: float = 0.5
    horizon: int = 1000
    n_seeds: int = 1000
    ridge: float = 0.0
    min_fraction: float = 0.10
    max_fraction: float = 0.35


@dataclass(frozen=True)
class OracleSettings:
    n_instances: int = 120
    max_rows: int = 20
    max_dim: int = 30
    horizon: int = 50
    gamma: float = 0.5
    tolerance: float = 1e-6


@dataclass(frozen=True)
class ToyChainSettings:
    rules: tuple[str, ...] = tuple(k.value for k in RuleKind)
    lcb_k: float = 2.0
    grid_points: int = 201
    min_ratio: float = 1.5


@dataclass(frozen=True)
class MsgRunSettings:
    eval_episodes: int = 100
    eval_horizon: int = 30
    eval_seed: int = 0
    min_success: float = 0.8


@dataclass(frozen=True)
class GradCheckSettings:
    n_probes: int = 100
    batch: int = 5
    tolerance: float = 1e-4


# Sections each kind reads, in file order.
SECTIONS: dict[Kind, tuple[str, ...]] = {
    Kind.VALIDATE_THEOREM: ("gaussian", "sweep"),
    Kind.ORACLE_CHECK: ("oracle",),
    Kind.TOY_CHAIN: ("chain", "fqe", "toy"),
    Kind.MSG_TRAIN: ("chain", "msg", "run"),
    Kind.GRAD_CHECK: ("gradcheck",),
}


@dataclass(frozen=True)
class ExperimentConfig:
    kind: Kind
    out_dir: str = ""  # empty: $MSGLAB_OUT/<kind>, else runs/<kind>
    seeds: tuple[int, ...] = (0,)
    workers: int = 0  # 0: all available cores
    gaussian: GaussianMdpConfig = GaussianMdpConfig()
    sweep: SweepSettings = SweepSettings()
    oracle: OracleSettings = OracleSettings()
    chain: ChainConfig = ChainConfig()
    fqe: FqeConfig = FqeConfig()
    toy: ToyChainSettings = ToyChainSettings()
    msg: MsgHyperparams = MsgHyperparams()
    run: MsgRunSettings = MsgRunSettings()
    gradcheck: GradCheckSettings = GradCheckSettings()

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.seeds:
            raise ConfigError("seeds must not be empty")


def default_config(kind: Kind | str) -> ExperimentConfig:
    return ExperimentConfig(kind=Kind(kind))


def quick_config(cfg: ExperimentConfig) -> ExperimentConfig:
    """CI-scale overrides: fewer seeds, members and steps."""
    kind = cfg.kind
    if kind is Kind.VALIDATE_THEOREM:
        return replace(cfg, sweep=replace(cfg.sweep, n_seeds=100))
    if kind is Kind.ORACLE_CHECK:
        return replace(cfg, oracle=replace(cfg.oracle, n_instances=20))
    if kind is Kind.TOY_CHAIN:
        return replace(cfg, fqe=replace(cfg.fqe, n_members=8, outer_iters=50, inner_steps=200))
    if kind is Kind.MSG_TRAIN:
        return replace(cfg, msg=replace(cfg.msg, bc_steps=200, train_steps=800))
    return cfg


# ---------------------------------------------------------------- serialization


def _plain(value: Any) -> Any:
    if is_dataclass(value):
        return {f.name: _plain(getattr(value, f.name)) for f in fields(value)}
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, (tuple, list)):
        return [_plain(v) for v in value]
    return value


def to_dict(cfg: ExperimentConfig) -> dict:
    out = {"kind": cfg.kind.value, "out_dir": cfg.out_dir, "seeds": list(cfg.seeds), "workers": cfg.workers}
    for section in SECTIONS[cfg.kind]:
        out[section] = _plain(getattr(cfg, section))
    return out


def dumps(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False, default_flow_style=None)


def save(cfg: ExperimentConfig, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(dumps(cfg), newline="\n")
    return path


# ---------------------------------------------------------------------- parsing


def _key_lines(node, prefix: str = "") -> dict[str, int]:
    """Map dotted key paths to 1-based source lines."""
    lines = {}
    if isinstance(node, yaml.MappingNode):
        for key, val in node.value:
            path = f"{prefix}{key.value}"
            lines[path] = key.start_mark.line + 1
            lines.update(_key_lines(val, path + "."))
    return lines


def _coerce(value: Any, hint: Any, where: str) -> Any:
    origin = typing.get_origin(hint)
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeError(f"{where}: expected an integer, got {value!r}")
        return value
    if hint is bool:
        if not isinstance(value, bool):
            raise TypeError(f"{where}: expected true/false, got {value!r}")
        return value
    if hint is str:
        if not isinstance(value, str):
            raise TypeError(f"{where}: expected a string, got {value!r}")
        return value
    if origin is tuple:
        if not isinstance(value, list):
            raise TypeError(f"{where}: expected a list, got {value!r}")
        (item,) = {a for a in typing.get_args(hint) if a is not Ellipsis}
        return tuple(_coerce(v, item, f"{where}[{i}]") for i, v in enumerate(value))
    if isinstance(hint, type) and issubclass(hint, enum.Enum):
        try:
            return hint(value)
        except ValueError:
            raise ValueError(f"{where}: expected one of {[m.value for m in hint]}, got {value!r}") from None
    if isinstance(hint, type) and is_dataclass(hint):
        return _build(hint, value, where)
    return value


def _build(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise TypeError(f"{where}: expected a mapping, got {data!r}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise KeyError(f"{where}.{unknown[0]}" if where else unknown[0])
    kwargs = {k: _coerce(v, hints[k], f"{where}.{k}" if where else k) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        if not where:
            raise
        raise ValueError(f"{where}: {exc}") from None


def _field_of(message: str) -> str | None:
    head = message.split(":", 1)[0].strip("'\" ")
    if not head or " " in head:
        return None
    return head.split("[", 1)[0]


def loads(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = f" line {mark.line + 1}" if mark is not None else ""
        raise ConfigError(f"{source}{line}: invalid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    lines = _key_lines(node)
    if "kind" not in data:
        raise ConfigError(f"{source}: missing 'kind' (one of {[k.value for k in Kind]})")
    try:
        kind = Kind(data["kind"])
    except ValueError:
        raise ConfigError(f"{source} line {lines.get('kind')}: field kind: unknown kind {data['kind']!r}") from None
    allowed = {"kind", "out_dir", "seeds", "workers", *SECTIONS[kind]}
    for key in data:
        if key not in allowed:
            raise ConfigError(f"{source} line {lines.get(str(key))}: field {key}: not used by kind {kind.value}")
    try:
        return _build(ExperimentConfig, data, "")
    except KeyError as exc:
        name = str(exc.args[0])
        raise ConfigError(f"{source} line {lines.get(name, '?')}: field {name}: unknown key") from None
    except (TypeError, ValueError) as exc:
        name = _field_of(str(exc))
        line = lines.get(name, "?") if name else "?"
        # validation messages usually start with the offending field's name
        rest = str(exc).split(":", 1)[-1].split()
        if name and rest and f"{name}.{rest[0]}" in lines:
            line = lines[f"{name}.{rest[0]}"]
        raise ConfigError(f"{source} line {line}: {exc}") from None


def load(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return loads(text, str(path))


def fqe_rule(cfg: ExperimentConfig, name: str) -> TargetRule:
    return TargetRule(RuleKind(name), cfg.toy.lcb_k)


__all__ = [
    "ExperimentConfig",
    "GradCheckSettings",
    "Kind",
    "MsgRunSettings",
    "OracleSettings",
    "SECTIONS",
    "SweepSettings",
    "ToyChainSettings",
    "default_config",
    "dumps",
    "load",
    "loads",
    "quick_config",
    "save",
    "to_dict",
]
