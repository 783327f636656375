"""Backward pathways and their plasticity rules.

A pathway delivers the teaching signal to hidden layer l from a downstream
source layer l' > l:

    delta_l = (B_eff @ delta_src) * f'(a_l)

with B_eff one of
    transpose      W_l^T, read from the forward weight at call time (BP)
    fixed-random   fixed B (FA); rank r < full stores B = Q0 P0
    normative      Q P, trained on 1/2 ||QP - W^T||_F^2
    local          Q P, P trained by the error-driven Oja rule, Q optionally Hebbian

Factored kinds never materialize Q P on the propagation path: the product is
formed as Q @ (P @ delta), r * (n_l + n_src) MACs per sample.
"""

import logging
from dataclasses import dataclass
from enum import Enum

import torch

from lowdim_feedback.errors import DimensionError, InvalidRankError, MisuseError
from lowdim_feedback.ledger import BACKWARD_ERROR, FEEDBACK_UPDATE, MacLedger, charge, matmul_macs
from lowdim_feedback.linalg import DTYPE, Matrix, Rng, check_shape, kaiming_uniform

logger = logging.getLogger(__name__)


class PathwayKind(str, Enum):
    TRANSPOSE = "transpose"
    FIXED_RANDOM = "fixed-random"
    NORMATIVE = "normative"
    LOCAL = "local"

    @property
    def factored(self) -> bool:
        return self in (PathwayKind.NORMATIVE, PathwayKind.LOCAL)


@dataclass
class FeedbackPathway:
    kind: PathwayKind
    layer: int
    source_layer: int
    n_in: int  # width of the receiving layer l
    n_src: int  # width of the source layer l'
    rank: int
    q: Matrix | None = None  # n_in x r
    p: Matrix | None = None  # r x n_src
    b: Matrix | None = None  # n_in x n_src
    update_q: bool = False
    update_p: bool = True
    use_targets: bool = False

    def __post_init__(self):
        self.kind = PathwayKind(self.kind)
        if self.source_layer <= self.layer:
            raise DimensionError(
                f"pathway source_layer {self.source_layer} must exceed owning layer {self.layer}"
            )
        if self.kind == PathwayKind.TRANSPOSE:
            if self.source_layer != self.layer + 1:
                raise DimensionError(
                    f"transpose feedback needs source_layer = layer + 1 "
                    f"(layer {self.layer}, source {self.source_layer})"
                )
            if any(x is not None for x in (self.q, self.p, self.b)):
                raise MisuseError("transpose pathway carries no parameters")
        elif self.kind == PathwayKind.FIXED_RANDOM:
            check_shape(self.b, self.n_in, self.n_src, "fixed feedback B")
        else:
            check_shape(self.q, self.n_in, self.rank, "feedback factor Q")
            check_shape(self.p, self.rank, self.n_src, "feedback factor P")
        if self.use_targets and self.kind != PathwayKind.LOCAL:
            raise MisuseError("use_targets applies to local pathways only")

    @property
    def is_broadcast(self) -> bool:
        return self.source_layer > self.layer + 1


@dataclass(frozen=True)
class FeedbackHyper:
    eta_fb: float = 1e-3
    weight_decay: float = 0.0  # lambda of the feedback rules
    update_interval: int = 1
    raw_oja: bool = False

    def __post_init__(self):
        if self.eta_fb <= 0:
            raise ValueError(f"eta_fb must be > 0, got {self.eta_fb}")
        if self.weight_decay < 0:
            raise ValueError(f"feedback weight_decay must be >= 0, got {self.weight_decay}")
        if self.update_interval < 1:
            raise ValueError(f"update_interval must be >= 1, got {self.update_interval}")


def make_pathway(
    kind: PathwayKind | str,
    layer: int,
    source_layer: int,
    n_in: int,
    n_src: int,
    rng: Rng,
    rank: int | None = None,
    update_q: bool = False,
    update_p: bool = True,
    use_targets: bool = False,
) -> FeedbackPathway:
    """Build a pathway with Kaiming-uniform parameters. rank=None means full rank."""
    kind = PathwayKind(kind)
    full = min(n_in, n_src)
    if rank is None:
        rank = full
    if kind != PathwayKind.TRANSPOSE and not 1 <= rank <= full:
        raise InvalidRankError(f"rank must be in [1, {full}] for layer {layer}, got {rank}")

    q = p = b = None
    if kind == PathwayKind.TRANSPOSE:
        rank = full
    elif kind == PathwayKind.FIXED_RANDOM:
        if rank == full:
            b = kaiming_uniform(rng, n_in, n_src)
        else:
            b = kaiming_uniform(rng, n_in, rank) @ kaiming_uniform(rng, rank, n_src)
    else:
        q = kaiming_uniform(rng, n_in, rank)
        p = kaiming_uniform(rng, rank, n_src)

    return FeedbackPathway(
        kind=kind, layer=layer, source_layer=source_layer, n_in=n_in, n_src=n_src,
        rank=rank, q=q, p=p, b=b,
        update_q=update_q, update_p=update_p, use_targets=use_targets,
    )


# === PROPAGATION ===

def propagate_error(
    pw: FeedbackPathway,
    delta_src: Matrix,
    preact_deriv: Matrix,
    forward_w: Matrix | None = None,
    ledger: MacLedger | None = None,
) -> Matrix:
    """delta_l = (B_eff @ delta_src) * f'(a_l)."""
    batch = delta_src.shape[1]
    check_shape(delta_src, pw.n_src, None, "source delta")
    check_shape(preact_deriv, pw.n_in, batch, "activation derivative")

    if pw.kind == PathwayKind.TRANSPOSE:
        if forward_w is None:
            raise MisuseError("transpose pathway needs the forward weight")
        check_shape(forward_w, pw.n_src, pw.n_in, "forward weight")
        carried = forward_w.T @ delta_src
        charge(ledger, BACKWARD_ERROR, matmul_macs(pw.n_in, pw.n_src, batch))
    else:
        if forward_w is not None:
            raise MisuseError(f"{pw.kind.value} pathway must not read the forward weight")
        if pw.kind == PathwayKind.FIXED_RANDOM:
            carried = pw.b @ delta_src
            charge(ledger, BACKWARD_ERROR, matmul_macs(pw.n_in, pw.n_src, batch))
        else:
            compressed = pw.p @ delta_src
            carried = pw.q @ compressed
            charge(ledger, BACKWARD_ERROR, matmul_macs(pw.rank, pw.n_src, batch))
            charge(ledger, BACKWARD_ERROR, matmul_macs(pw.n_in, pw.rank, batch))

    return carried * preact_deriv


def effective_matrix(pw: FeedbackPathway, forward_w: Matrix | None = None) -> Matrix:
    """Materialized B_eff. Diagnostics only."""
    if pw.kind == PathwayKind.TRANSPOSE:
        if forward_w is None:
            raise MisuseError("transpose pathway needs the forward weight")
        return forward_w.T.clone()
    if pw.kind == PathwayKind.FIXED_RANDOM:
        return pw.b
    return pw.q @ pw.p


# === NORMATIVE RULE ===

def normative_loss(pw: FeedbackPathway, forward_w: Matrix) -> float:
    """1/2 ||QP - W^T||_F^2."""
    return 0.5 * float(((pw.q @ pw.p - forward_w.T) ** 2).sum())


def update_normative(pw: FeedbackPathway, forward_w: Matrix, hyper: FeedbackHyper,
                     ledger: MacLedger | None = None) -> None:
    """One gradient step on 1/2 ||QP - W^T||_F^2; Q and P both read the same residual."""
    if pw.kind != PathwayKind.NORMATIVE:
        raise MisuseError(f"update_normative called on a {pw.kind.value} pathway")
    check_shape(forward_w, pw.n_src, pw.n_in, "forward weight")

    n_in, n_src, r = pw.n_in, pw.n_src, pw.rank
    residual = forward_w.T - pw.q @ pw.p
    charge(ledger, FEEDBACK_UPDATE, matmul_macs(n_in, r, n_src))

    dp = pw.q.T @ residual if pw.update_p else None
    dq = residual @ pw.p.T
    if pw.update_p:
        charge(ledger, FEEDBACK_UPDATE, matmul_macs(r, n_in, n_src))
    charge(ledger, FEEDBACK_UPDATE, matmul_macs(n_in, n_src, r))

    if dp is not None:
        pw.p = pw.p + hyper.eta_fb * dp
    pw.q = pw.q + hyper.eta_fb * dq


# === LOCAL RULES ===

def driving_covariance(pw: FeedbackPathway, delta_src: Matrix, targets: Matrix | None,
                       hyper: FeedbackHyper, ledger: MacLedger | None = None) -> Matrix:
    """Covariance C that steers P.

    Default: centered driving signal, C = D D^T (targets at the output when
    use_targets, else the source delta). raw_oja: the uncentered per-sample
    covariance, batch * delta delta^T (deltas carry 1/batch) or y y^T / batch.
    """
    batch = delta_src.shape[1]
    if pw.use_targets:
        if targets is None:
            raise MisuseError("use_targets pathway needs the batch targets")
        signal = targets
    else:
        signal = delta_src
    check_shape(signal, pw.n_src, batch, "driving signal")

    if hyper.raw_oja:
        scale = 1.0 / batch if pw.use_targets else float(batch)
        cov = scale * (signal @ signal.T)
    else:
        centered = signal - signal.mean(dim=1, keepdim=True)
        cov = centered @ centered.T
    charge(ledger, FEEDBACK_UPDATE, matmul_macs(pw.n_src, batch, pw.n_src))
    return cov


def oja_step(p: Matrix, cov: Matrix, ledger: MacLedger | None = None) -> Matrix:
    """P C (I - P^T P), computed as M - (M P^T) P with M = P C."""
    r, n = p.shape
    pc = p @ cov
    charge(ledger, FEEDBACK_UPDATE, matmul_macs(r, n, n))
    correction = (pc @ p.T) @ p
    charge(ledger, FEEDBACK_UPDATE, matmul_macs(r, n, r) + matmul_macs(r, r, n))
    return pc - correction


def update_local(
    pw: FeedbackPathway,
    delta_src: Matrix,
    h_pre: Matrix,
    targets: Matrix | None,
    hyper: FeedbackHyper,
    ledger: MacLedger | None = None,
) -> bool:
    """Oja update of P (and Hebbian update of Q when update_q) from local signals.

    Returns False when the driving signal is all zero and the step is skipped.
    """
    if pw.kind != PathwayKind.LOCAL:
        raise MisuseError(f"update_local called on a {pw.kind.value} pathway")
    batch = delta_src.shape[1]
    check_shape(h_pre, pw.n_in, batch, "presynaptic activity")

    cov = driving_covariance(pw, delta_src, targets, hyper, ledger)
    if hyper.raw_oja:
        gamma = 1.0
    else:
        gamma = float(torch.diagonal(cov).max())
        if gamma <= 0.0:
            logger.warning(
                f"Layer {pw.layer}: all-zero driving signal from layer {pw.source_layer}, Oja update skipped"
            )
            return False

    lam = hyper.weight_decay
    dp = oja_step(pw.p, cov / gamma, ledger)

    if pw.update_q:
        # Hebbian: presynaptic h times the compressed teaching signal -P delta (batch mean via delta)
        compressed = pw.p @ delta_src
        dq = -(h_pre @ compressed.T)
        charge(ledger, FEEDBACK_UPDATE, matmul_macs(pw.rank, pw.n_src, batch))
        charge(ledger, FEEDBACK_UPDATE, matmul_macs(pw.n_in, batch, pw.rank))
        pw.q = pw.q + hyper.eta_fb * dq - lam * pw.q

    pw.p = pw.p + hyper.eta_fb * dp - lam * pw.p
    return True


def pp_orthogonality_error(pw: FeedbackPathway) -> float:
    """||P P^T - I_r||_F."""
    gram = pw.p @ pw.p.T
    return float(torch.linalg.matrix_norm(gram - torch.eye(pw.rank, dtype=DTYPE)))
