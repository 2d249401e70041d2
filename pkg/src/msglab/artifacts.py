"""CSV emitters and the run manifest.

CSVs are comma separated with a header row, LF line endings and floats
written with ``repr`` so they read back bit-exactly.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from msglab import __version__
from msglab.fqe import RegionSummary, UncertaintyCurve
from msglab.kernel import LcbReport, SweepOutcome

MANIFEST_NAME = "manifest.json"


def fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])
    return path


def read_csv(path: str | Path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def write_sweep_csv(outcome: SweepOutcome, path: str | Path) -> Path:
    header = ["seed", "n_rows", "gamma_C_norm", "retained", "max_pessimism_entry", "optimistic", "note"]
    rows = [
        (r.seed, r.n_rows, r.gamma_c_norm, r.retained, r.max_pessimism, r.optimistic, r.note) for r in outcome.per_seed
    ]
    return write_csv(path, header, rows)


def write_sweep_summary(outcome: SweepOutcome, path: str | Path) -> Path:
    header = ["n_seeds", "n_retained", "n_optimistic", "optimistic_fraction"]
    return write_csv(path, header, [(outcome.n_seeds, outcome.n_retained, outcome.n_optimistic, outcome.optimistic_fraction)])


def write_lcb_report(report: LcbReport, path: str | Path) -> Path:
    header = ["row", "mean_term", "pessimism_term", "q_lcb", "optimistic"]
    return write_csv(path, header, report.rows())


def write_curve(curve: UncertaintyCurve, path: str | Path) -> Path:
    members = curve.per_member_q
    n = 0 if members is None else members.shape[1]
    header = ["state", "mean_q", "std_q", *[f"member_{i}" for i in range(n)]]
    rows = []
    for j in range(len(curve.states)):
        extra = [] if members is None else list(members[j])
        rows.append([curve.states[j], curve.mean_q[j], curve.std_q[j], *extra])
    return write_csv(path, header, rows)


def region_rows(rule: str, summaries: list[RegionSummary], status: str = "ok"):
    return [(rule, s.lo, s.hi, s.mean_std, s.max_std, s.n_points, status) for s in summaries]


REGION_HEADER = ["rule", "lo", "hi", "mean_std", "max_std", "n_points", "status"]


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config_hash: str
    version: str = __version__
    files: dict[str, str] = field(default_factory=dict)
    duration_s: float = 0.0
    exit_code: int = 0

    def add(self, root: str | Path, paths: Iterable[str | Path]) -> None:
        root = Path(root)
        for p in paths:
            p = Path(p)
            self.files[p.relative_to(root).as_posix()] = sha256_file(p)

    def write(self, root: str | Path) -> Path:
        path = Path(root) / MANIFEST_NAME
        data = asdict(self)
        data["files"] = dict(sorted(self.files.items()))
        path.write_text(json.dumps(data, indent=2) + "\n")
        return path

    @classmethod
    def read(cls, root: str | Path) -> "RunManifest":
        return cls(**json.loads((Path(root) / MANIFEST_NAME).read_text()))

    def mismatches(self, root: str | Path) -> list[str]:
        """Listed files that are missing or whose checksum differs."""
        root = Path(root)
        bad = []
        for name, digest in self.files.items():
            p = root / name
            if not p.is_file() or sha256_file(p) != digest:
                bad.append(name)
        return bad


def text_hash(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()[:16]
