"""Time-indexed training/integration records and their CSV form.

Columns: step, time, loss, accuracy, lambda_1..lambda_K, pp_orth_err,
subspace_angle_max, cum_macs. Absent values (and NaN) are written as empty
fields. Floats are written with repr() so identical runs give identical bytes.
"""

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

from lowdim_feedback.errors import ComparisonError

BASE_COLUMNS = ["step", "time", "loss", "accuracy"]
TAIL_COLUMNS = ["pp_orth_err", "subspace_angle_max", "cum_macs"]


@dataclass
class TrajectoryRow:
    step: int
    time: float
    loss: float | None = None
    accuracy: float | None = None
    overlaps: list[float | None] = field(default_factory=list)
    pp_orth_err: float | None = None
    subspace_angle_max: float | None = None
    cum_macs: int | None = None


@dataclass
class Trajectory:
    n_modes: int = 0
    rows: list[TrajectoryRow] = field(default_factory=list)

    def append(self, row: TrajectoryRow) -> None:
        if len(row.overlaps) != self.n_modes:
            raise ValueError(f"row has {len(row.overlaps)} overlaps, trajectory expects {self.n_modes}")
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def final(self) -> TrajectoryRow:
        if not self.rows:
            raise ValueError("empty trajectory")
        return self.rows[-1]

    @property
    def steps(self) -> list[int]:
        return [r.step for r in self.rows]

    def column(self, name: str) -> list:
        """Values of one CSV column, e.g. "loss" or "lambda_3"."""
        if name.startswith("lambda_"):
            i = int(name.split("_", 1)[1]) - 1
            return [r.overlaps[i] for r in self.rows]
        return [getattr(r, name) for r in self.rows]

    def header(self) -> list[str]:
        return BASE_COLUMNS + [f"lambda_{i + 1}" for i in range(self.n_modes)] + TAIL_COLUMNS


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, int):
        return str(value)
    value = float(value)
    if math.isnan(value):
        return ""
    return repr(value)


def _parse_float(text: str) -> float | None:
    return None if text == "" else float(text)


def _parse_int(text: str) -> int | None:
    return None if text == "" else int(text)


def write_csv(traj: Trajectory, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(traj.header())
        for r in traj.rows:
            writer.writerow(
                [str(r.step), _fmt(r.time), _fmt(r.loss), _fmt(r.accuracy)]
                + [_fmt(x) for x in r.overlaps]
                + [_fmt(r.pp_orth_err), _fmt(r.subspace_angle_max), _fmt(r.cum_macs)]
            )
    return path


def read_csv(path: str | Path) -> Trajectory:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader)
        lambdas = [h for h in header if h.startswith("lambda_")]
        traj = Trajectory(n_modes=len(lambdas))
        for values in reader:
            rec = dict(zip(header, values))
            traj.append(TrajectoryRow(
                step=int(rec["step"]),
                time=float(rec["time"]),
                loss=_parse_float(rec["loss"]),
                accuracy=_parse_float(rec["accuracy"]),
                overlaps=[_parse_float(rec[h]) for h in lambdas],
                pp_orth_err=_parse_float(rec["pp_orth_err"]),
                subspace_angle_max=_parse_float(rec["subspace_angle_max"]),
                cum_macs=_parse_int(rec["cum_macs"]),
            ))
    return traj


def compare_overlaps(sim: Trajectory, theory: Trajectory) -> dict:
    """Max |Lambda_i^sim - Lambda_i^theory| over the steps both trajectories recorded."""
    if sim.n_modes != theory.n_modes:
        raise ComparisonError(f"mode counts differ: {sim.n_modes} vs {theory.n_modes}")
    by_step = {r.step: r for r in theory.rows}
    shared = [(r, by_step[r.step]) for r in sim.rows if r.step in by_step]
    if not shared:
        raise ComparisonError("trajectories share no recorded steps")

    per_mode: list[float | None] = [None] * sim.n_modes
    for a, b in shared:
        for i, (x, y) in enumerate(zip(a.overlaps, b.overlaps)):
            if x is None or y is None:
                continue
            dev = abs(x - y)
            if per_mode[i] is None or dev > per_mode[i]:
                per_mode[i] = dev
    known = [d for d in per_mode if d is not None]
    return {
        "max_deviation": max(known) if known else None,
        "per_mode": per_mode,
        "n_points": len(shared),
    }
