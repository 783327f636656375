"""Diagnostics: MAC cost model, subspace alignment, FLOPs-to-accuracy.

Costs are multiply-accumulates (MACs) of matrix products only; elementwise
activation work is not counted. The formulas here mirror what the engine
charges to its MacLedger, so both can be compared exactly.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from lowdim_feedback.errors import InvalidInputError, InvalidRankError
from lowdim_feedback.feedback import FeedbackPathway, PathwayKind
from lowdim_feedback.linalg import DTYPE, Matrix, orthonormal_rows
from lowdim_feedback.trajectory import Trajectory

logger = logging.getLogger(__name__)

ORTHONORMAL_TOL = 1e-8


# === FLOP MODEL ===

def backward_flops(n_in: int, n_out: int, kind: PathwayKind | str, r: int | None = None) -> int:
    """Per-example MACs to carry an error from n_out units back to n_in units."""
    kind = PathwayKind(kind)
    if n_in < 1 or n_out < 1:
        raise InvalidInputError(f"dims must be >= 1, got n_in={n_in}, n_out={n_out}")
    if not kind.factored:
        return n_in * n_out
    if r is None or not 1 <= r <= min(n_in, n_out):
        raise InvalidRankError(f"rank must be in [1, {min(n_in, n_out)}], got {r}")
    return r * (n_in + n_out)


def break_even_rank(n_in: int, n_out: int) -> float:
    """Rank at which r (n_in + n_out) equals n_in n_out."""
    return n_in * n_out / (n_in + n_out)


def feedback_update_flops(
    kind: PathwayKind | str,
    n_in: int,
    n_src: int,
    r: int,
    batch: int,
    update_q: bool = False,
    update_p: bool = True,
) -> int:
    """MACs of one feedback-factor update (not per example)."""
    kind = PathwayKind(kind)
    if kind == PathwayKind.NORMATIVE:
        per_factor = n_in * r * n_src
        return per_factor * (3 if update_p else 2)
    if kind == PathwayKind.LOCAL:
        macs = n_src * batch * n_src + r * n_src * n_src + 2 * r * r * n_src
        if update_q:
            macs += r * n_src * batch + n_in * batch * r
        return macs
    return 0


@dataclass
class LayerFlops:
    layer: int
    forward_macs: float = 0.0
    backward_error_macs: float = 0.0
    weight_update_macs: float = 0.0
    feedback_update_macs: float = 0.0

    @property
    def total_macs(self) -> float:
        return (self.forward_macs + self.backward_error_macs
                + self.weight_update_macs + self.feedback_update_macs)


@dataclass
class FlopReport:
    """Per-example MACs of one training step, split by phase and by weight layer."""

    layers: list[LayerFlops] = field(default_factory=list)
    batch: int = 1
    update_interval: int = 1

    @property
    def forward_macs(self) -> float:
        return sum(x.forward_macs for x in self.layers)

    @property
    def backward_error_macs(self) -> float:
        return sum(x.backward_error_macs for x in self.layers)

    @property
    def weight_update_macs(self) -> float:
        return sum(x.weight_update_macs for x in self.layers)

    @property
    def feedback_update_macs(self) -> float:
        return sum(x.feedback_update_macs for x in self.layers)

    @property
    def total_macs(self) -> float:
        return sum(x.total_macs for x in self.layers)

    def to_dict(self) -> dict:
        return {
            "unit": "MAC per example",
            "batch": self.batch,
            "update_interval": self.update_interval,
            "forward_macs": self.forward_macs,
            "backward_error_macs": self.backward_error_macs,
            "weight_update_macs": self.weight_update_macs,
            "feedback_update_macs": self.feedback_update_macs,
            "total_macs": self.total_macs,
            "layers": [asdict(x) | {"total_macs": x.total_macs} for x in self.layers],
        }

    def write_json(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")
        return path


def flop_report(
    widths: list[int],
    pathways: dict[int, FeedbackPathway],
    batch: int = 1,
    update_interval: int = 1,
) -> FlopReport:
    """Cost model of one step of the engine for a net with these widths and pathways.

    Layer entries are indexed by the weight W_l (h_l -> a_{l+1}). The backward
    and feedback cost of pathway l is booked under W_{l-1}, the weight its
    teaching signal trains. W_l is trained only if delta_{l+1} exists.
    """
    depth = len(widths) - 1
    entries = [LayerFlops(layer=l) for l in range(depth)]

    has_delta = {depth: True}
    for l in range(depth - 1, 0, -1):
        pw = pathways.get(l)
        has_delta[l] = pw is not None and has_delta.get(pw.source_layer, False)

    for l in range(depth):
        entries[l].forward_macs = widths[l + 1] * widths[l]
        if has_delta[l + 1]:
            entries[l].weight_update_macs = widths[l + 1] * widths[l]

    for l, pw in pathways.items():
        entry = entries[l - 1]
        if has_delta[l]:
            entry.backward_error_macs = backward_flops(pw.n_in, pw.n_src, pw.kind, pw.rank)
        elif pw.kind != PathwayKind.NORMATIVE:
            continue
        per_update = feedback_update_flops(
            pw.kind, pw.n_in, pw.n_src, pw.rank, batch, pw.update_q, pw.update_p,
        )
        entry.feedback_update_macs = per_update / (batch * update_interval)

    return FlopReport(layers=entries, batch=batch, update_interval=update_interval)


# === SUBSPACE ALIGNMENT ===

@dataclass(frozen=True)
class SubspaceAlignment:
    principal_angles: Matrix  # radians, nondecreasing
    flagged: bool = False  # p was rank deficient; missing angles padded with pi/2

    @property
    def max_angle(self) -> float:
        if self.principal_angles.numel() == 0:
            return 0.0
        return float(self.principal_angles.max())


def _principal_angles(qa: Matrix, qb: Matrix) -> Matrix:
    """Angles between the column spans of two orthonormal bases.

    Small angles come from sines, large ones from cosines; arccos alone loses
    all precision near zero.
    """
    k = min(qa.shape[1], qb.shape[1])
    if k == 0:
        return torch.zeros(0, dtype=DTYPE)
    cos = torch.linalg.svdvals(qa.T @ qb)[:k].clamp(0.0, 1.0)
    if qa.shape[1] >= qb.shape[1]:
        residual = qb - qa @ (qa.T @ qb)
    else:
        residual = qa - qb @ (qb.T @ qa)
    sin = torch.linalg.svdvals(residual).flip(0)[:k].clamp(0.0, 1.0)
    return torch.where(cos * cos >= 0.5, torch.arcsin(sin), torch.arccos(cos))


def subspace_alignment(p: Matrix, reference_basis: Matrix) -> SubspaceAlignment:
    """Principal angles between rowspace(p) and colspace(reference_basis)."""
    r = p.shape[0]
    gram = reference_basis.T @ reference_basis
    if not torch.allclose(gram, torch.eye(gram.shape[0], dtype=DTYPE), atol=ORTHONORMAL_TOL):
        raise InvalidInputError("reference basis must have orthonormal columns")

    basis, rank = orthonormal_rows(p)
    count = min(r, reference_basis.shape[1])
    angles = _principal_angles(basis, reference_basis)
    flagged = rank < r
    if angles.numel() < count:
        pad = torch.full((count - angles.numel(),), math.pi / 2, dtype=DTYPE)
        angles = torch.cat([angles, pad])
    if flagged:
        logger.warning(f"Feedback factor has rank {rank} < {r}; missing angles set to pi/2")
    return SubspaceAlignment(principal_angles=torch.sort(angles).values, flagged=flagged)


# === FLOPS TO ACCURACY ===

def flops_to_accuracy(
    traj: Trajectory,
    target_fraction: float = 0.9,
    reference_accuracy: float | None = None,
) -> int | None:
    """Cumulative MACs at the first record reaching target_fraction of the reference.

    The reference defaults to the run's own final accuracy. None means the
    target was never reached.
    """
    if not 0 < target_fraction <= 1:
        raise ValueError(f"target_fraction must be in (0, 1], got {target_fraction}")
    if len(traj) == 0:
        raise InvalidInputError("empty trajectory")
    scored = [r for r in traj.rows if r.accuracy is not None and r.cum_macs is not None]
    if not scored:
        raise InvalidInputError("trajectory records no accuracy with cumulative MACs")

    reference = scored[-1].accuracy if reference_accuracy is None else reference_accuracy
    target = target_fraction * reference
    for row in scored:
        if row.accuracy >= target:
            return row.cum_macs
    return None
