"""Continuous-time learning dynamics of the two-layer linear network.

Everything is written in the singular basis of Sigma_io = U S V^T (full,
square U and V), with whitened inputs:

    W1 = W1b V^T    W2 = U W2b    P = Pb U^T    B = Bb U^T

Forward weights (time constant tau):
    tau dW1b/dt = F (S - W2b W1b)        F = W2b^T | Bb | Q Pb
    tau dW2b/dt = (S - W2b W1b) W1b^T

Feedback factors (time constant tau_b):
    normative  dPb = Q^T R, dQ = R Pb^T     with R = W2b^T - Q Pb
    local-oja  dPb = Pb C (I - Pb^T Pb) - lam Pb,  C = S S^T (targets) or E E^T (error)
               dQ  = W1b E^T Pb^T - lam Q      (only with update_q), E = S - W2b W1b

Integrated with classical fixed-step RK4.

Run: uv run python -m lowdim_feedback.theory --regime normative --rank 8
"""

import argparse
import logging
import math
from dataclasses import dataclass, replace
from enum import Enum

import torch
from tqdm import tqdm

from lowdim_feedback.errors import DimensionError, DivergenceError, InvalidInputError, MisuseError
from lowdim_feedback.linalg import DTYPE, Matrix, SvdTriple, complete_basis
from lowdim_feedback.log import setup_logging
from lowdim_feedback.metrics import subspace_alignment
from lowdim_feedback.trajectory import Trajectory, TrajectoryRow

logger = logging.getLogger(__name__)

# === CONFIG ===

BLOWUP_NORM = 1e8
STATIONARY_TOL = 1e-8
MODE_FLOOR = 1e-10


class Regime(str, Enum):
    BACKPROP = "backprop"
    FIXED_FEEDBACK = "fixed-feedback"
    NORMATIVE = "normative"
    LOCAL_OJA = "local-oja"


class OjaDrive(str, Enum):
    TARGETS = "targets"
    ERROR = "error"


@dataclass
class RotatedState:
    w1b: Matrix  # k x n
    w2b: Matrix  # m x k
    s: Matrix  # m x n rectangular diagonal
    pb: Matrix | None = None  # r x m
    q: Matrix | None = None  # k x r
    bb: Matrix | None = None  # k x m, fixed

    def __post_init__(self):
        k, n = self.w1b.shape
        m = self.w2b.shape[0]
        if self.w2b.shape[1] != k or tuple(self.s.shape) != (m, n):
            raise DimensionError(
                f"rotated state does not chain: W1b {tuple(self.w1b.shape)}, "
                f"W2b {tuple(self.w2b.shape)}, S {tuple(self.s.shape)}"
            )
        if self.pb is not None and (self.pb.shape[1] != m or self.q is None
                                    or tuple(self.q.shape) != (k, self.pb.shape[0])):
            raise DimensionError("Pb must be r x m with a matching k x r Q")
        if self.bb is not None and tuple(self.bb.shape) != (k, m):
            raise DimensionError(f"Bb must be {k} x {m}, got {tuple(self.bb.shape)}")

    def moving(self) -> dict[str, Matrix]:
        """Fields that evolve in time (S and Bb are constant)."""
        out = {"w1b": self.w1b, "w2b": self.w2b}
        if self.pb is not None:
            out["pb"] = self.pb
            out["q"] = self.q
        return out

    def norm(self) -> float:
        return math.sqrt(sum(float((m ** 2).sum()) for m in self.moving().values()))

    def axpy(self, h: float, d: "RotatedState") -> "RotatedState":
        """self + h * d over the moving fields."""
        dm = d.moving()
        return replace(self, **{name: m + h * dm[name] for name, m in self.moving().items()})

    def product(self) -> Matrix:
        return self.w2b @ self.w1b


@dataclass(frozen=True)
class OdeConfig:
    dt: float
    t_end: float
    regime: Regime = Regime.FIXED_FEEDBACK
    tau: float = 1.0
    tau_b: float = 1.0
    weight_decay: float = 0.0  # lambda of the Oja/Hebbian factor dynamics
    oja_drive: OjaDrive = OjaDrive.TARGETS
    update_q: bool = False
    update_p: bool = True
    record_every: int = 1
    progress: bool = False

    def __post_init__(self):
        object.__setattr__(self, "regime", Regime(self.regime))
        object.__setattr__(self, "oja_drive", OjaDrive(self.oja_drive))
        if self.dt <= 0:
            raise ValueError(f"dt must be > 0, got {self.dt}")
        if self.t_end < 0:
            raise ValueError(f"t_end must be >= 0, got {self.t_end}")
        if self.tau <= 0 or self.tau_b <= 0:
            raise ValueError(f"tau and tau_b must be > 0, got {self.tau}, {self.tau_b}")
        if self.record_every < 1:
            raise ValueError(f"record_every must be >= 1, got {self.record_every}")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt))


# === DYNAMICS ===

def _feedback_matrix(state: RotatedState, regime: Regime) -> Matrix:
    if regime == Regime.BACKPROP:
        return state.w2b.T
    if regime == Regime.FIXED_FEEDBACK:
        if state.bb is None:
            raise MisuseError("fixed-feedback regime needs Bb")
        return state.bb
    if state.pb is None:
        raise MisuseError(f"{regime.value} regime needs Q and Pb")
    return state.q @ state.pb


def derivative(state: RotatedState, cfg: OdeConfig) -> RotatedState:
    """Time derivative of the moving fields (S, Bb copied unchanged)."""
    err = state.s - state.product()
    fb = _feedback_matrix(state, cfg.regime)
    dw1 = fb @ err / cfg.tau
    dw2 = err @ state.w1b.T / cfg.tau

    dp = dq = None
    if state.pb is not None:
        pb, q, lam = state.pb, state.q, cfg.weight_decay
        if cfg.regime == Regime.NORMATIVE:
            resid = state.w2b.T - q @ pb
            dp = q.T @ resid if cfg.update_p else torch.zeros_like(pb)
            dq = resid @ pb.T
        elif cfg.regime == Regime.LOCAL_OJA:
            cov = state.s @ state.s.T if cfg.oja_drive == OjaDrive.TARGETS else err @ err.T
            pc = pb @ cov
            dp = pc - (pc @ pb.T) @ pb - lam * pb
            dq = (state.w1b @ err.T @ pb.T - lam * q) if cfg.update_q else torch.zeros_like(q)
        else:
            dp, dq = torch.zeros_like(pb), torch.zeros_like(q)
        dp, dq = dp / cfg.tau_b, dq / cfg.tau_b

    return RotatedState(w1b=dw1, w2b=dw2, s=state.s, pb=dp, q=dq, bb=state.bb)


def _rk4_step(state: RotatedState, cfg: OdeConfig, h: float) -> RotatedState:
    k1 = derivative(state, cfg)
    k2 = derivative(state.axpy(h / 2, k1), cfg)
    k3 = derivative(state.axpy(h / 2, k2), cfg)
    k4 = derivative(state.axpy(h, k3), cfg)
    out = state
    for weight, k in ((1.0, k1), (2.0, k2), (2.0, k3), (1.0, k4)):
        out = out.axpy(h * weight / 6.0, k)
    return out


def integrate(state: RotatedState, cfg: OdeConfig) -> list[tuple[float, RotatedState]]:
    """RK4 from t=0 to t_end; samples at t=0, every record_every steps, and t_end."""
    _feedback_matrix(state, cfg.regime)
    samples = [(0.0, state)]
    total = cfg.n_steps
    for i in tqdm(range(total), desc="Integrating", disable=not cfg.progress):
        state = _rk4_step(state, cfg, cfg.dt)
        t = (i + 1) * cfg.dt
        size = state.norm()
        if not math.isfinite(size) or size > BLOWUP_NORM:
            raise DivergenceError(f"rotated state norm {size:.3g} at t={t:.6g}", time=t)
        if (i + 1) % cfg.record_every == 0 or i + 1 == total:
            samples.append((t, state))
    return samples


def step_size_error(state: RotatedState, cfg: OdeConfig) -> float:
    """Max abs difference of the terminal states at dt and dt/2."""
    coarse = integrate(state, replace(cfg, record_every=max(cfg.n_steps, 1), progress=False))[-1][1]
    fine_cfg = replace(cfg, dt=cfg.dt / 2, record_every=max(2 * cfg.n_steps, 1), progress=False)
    fine = integrate(state, fine_cfg)[-1][1]
    fm = fine.moving()
    return max(float((m - fm[name]).abs().max()) for name, m in coarse.moving().items())


def is_stationary(state: RotatedState, cfg: OdeConfig, tol: float = STATIONARY_TOL) -> bool:
    return derivative(state, cfg).norm() < tol


def fixed_point_residual(bb_or_qp: Matrix, s: Matrix, w2w1: Matrix) -> float:
    """||Bb (S - W2b W1b)||_F. Zero exactly where the W1b flow stops."""
    return float(torch.linalg.matrix_norm(bb_or_qp @ (s - w2w1)))


# === OVERLAPS ===

def _divide_modes(values: Matrix, s: Matrix) -> Matrix:
    skipped = s < MODE_FLOOR
    if skipped.any():
        logger.warning(f"Skipped {int(skipped.sum())} modes with singular value below {MODE_FLOOR}")
    safe = torch.where(skipped, torch.ones_like(s), s)
    return torch.where(skipped, torch.full_like(s, float("nan")), values / safe)


def overlaps_of_map(product: Matrix, svd_io: SvdTriple, n_modes: int | None = None) -> Matrix:
    """Lambda_i = u_i^T M v_i / s_i; NaN for modes with s_i below the floor."""
    q = svd_io.s.numel()
    n_modes = q if n_modes is None else n_modes
    if n_modes > q:
        raise InvalidInputError(f"asked for {n_modes} modes, Sigma_io has {q}")
    u, v, s = svd_io.u[:, :n_modes], svd_io.v[:, :n_modes], svd_io.s[:n_modes]
    raw = ((u.T @ product) * v.T).sum(dim=1)
    return _divide_modes(raw, s)


def mode_overlaps(w1: Matrix, w2: Matrix, svd_io: SvdTriple, n_modes: int | None = None) -> Matrix:
    return overlaps_of_map(w2 @ w1, svd_io, n_modes)


def rotated_overlaps(state: RotatedState, n_modes: int | None = None) -> Matrix:
    """Same quantity in the rotated frame: diag(W2b W1b)_i / S_ii."""
    s = torch.diagonal(state.s)
    n_modes = s.numel() if n_modes is None else n_modes
    s = s[:n_modes]
    diag = torch.diagonal(state.product())[:n_modes]
    return _divide_modes(diag, s)


# === ROTATIONS ===

def _full_bases(svd_io: SvdTriple) -> tuple[Matrix, Matrix]:
    return complete_basis(svd_io.u), complete_basis(svd_io.v)


def rotate_in(w1: Matrix, w2: Matrix, p: Matrix | None, svd_io: SvdTriple,
              q: Matrix | None = None, b: Matrix | None = None) -> RotatedState:
    u_full, v_full = _full_bases(svd_io)
    return RotatedState(
        w1b=w1 @ v_full,
        w2b=u_full.T @ w2,
        s=svd_io.rectangular_s(),
        pb=None if p is None else p @ u_full,
        q=None if q is None else q.clone(),
        bb=None if b is None else b @ u_full,
    )


def rotate_out(state: RotatedState, svd_io: SvdTriple) -> tuple[Matrix, Matrix, Matrix | None]:
    u_full, v_full = _full_bases(svd_io)
    p = None if state.pb is None else state.pb @ u_full.T
    return state.w1b @ v_full.T, u_full @ state.w2b, p


def state_from_network(net, svd_io: SvdTriple) -> RotatedState:
    """Rotated state of a two-layer network and its hidden-layer pathway."""
    if net.depth != 2:
        raise DimensionError(f"rotated dynamics need a two-layer network, got {net.depth} layers")
    pw = net.pathways.get(1)
    p = q = b = None
    if pw is not None and pw.kind.factored:
        p, q = pw.p, pw.q
    elif pw is not None and pw.b is not None:
        b = pw.b
    return rotate_in(net.layers[0].w, net.layers[1].w, p, svd_io, q=q, b=b)


# === TRAJECTORIES ===

def theory_trajectory(
    samples: list[tuple[float, RotatedState]],
    cfg: OdeConfig,
    n_modes: int,
    loss_offset: float = 0.0,
) -> Trajectory:
    """Integration samples as a Trajectory, step = t / dt and time = t / tau.

    With whitened inputs the training loss is 1/2 ||S - W2b W1b||_F^2 plus the
    constant loss_offset = 1/2 (tr Sigma_oo - ||S||_F^2).
    """
    traj = Trajectory(n_modes=n_modes)
    for t, state in samples:
        lam = rotated_overlaps(state, n_modes).tolist()
        row = TrajectoryRow(
            step=int(round(t / cfg.dt)),
            time=t / cfg.tau,
            loss=0.5 * float(((state.s - state.product()) ** 2).sum()) + loss_offset,
            overlaps=[None if math.isnan(x) else x for x in lam],
        )
        if state.pb is not None:
            r, m = state.pb.shape
            if cfg.regime == Regime.LOCAL_OJA:
                gram = state.pb @ state.pb.T
                row.pp_orth_err = float(torch.linalg.matrix_norm(gram - torch.eye(r, dtype=DTYPE)))
            row.subspace_angle_max = _top_mode_angle(state.pb, min(r, m))
        traj.append(row)
    return traj


def _top_mode_angle(pb: Matrix, r: int) -> float:
    top = torch.eye(pb.shape[1], dtype=DTYPE)[:, :r]
    return subspace_alignment(pb, top).max_angle


def main():
    parser = argparse.ArgumentParser(description="Integrate the rotated two-layer dynamics on a diagonal S")
    parser.add_argument("--regime", choices=[r.value for r in Regime], default=Regime.NORMATIVE.value)
    parser.add_argument("--singular-values", type=float, nargs="+", default=[3.0, 2.0, 1.0, 0.5],
                        help="Diagonal of S (default: 3 2 1 0.5)")
    parser.add_argument("--hidden", type=int, default=8, help="Hidden width k (default: 8)")
    parser.add_argument("--rank", type=int, default=2, help="Feedback rank r (default: 2)")
    parser.add_argument("--dt", type=float, default=0.01, help="Step (default: 0.01)")
    parser.add_argument("--t-end", type=float, default=50.0, help="Horizon (default: 50)")
    parser.add_argument("--init-std", type=float, default=1e-3, help="Init std (default: 1e-3)")
    parser.add_argument("--seed", type=int, default=0, help="Seed (default: 0)")
    args = parser.parse_args()

    setup_logging(script_name="theory")

    from lowdim_feedback.linalg import Rng, sample_gaussian

    m = n = len(args.singular_values)
    rng = Rng(args.seed)
    s = torch.diag(torch.tensor(args.singular_values, dtype=DTYPE))
    state = RotatedState(
        w1b=sample_gaussian(rng.spawn("w1"), args.hidden, n, args.init_std),
        w2b=sample_gaussian(rng.spawn("w2"), m, args.hidden, args.init_std),
        s=s,
        pb=sample_gaussian(rng.spawn("p"), args.rank, m, 0.5),
        q=sample_gaussian(rng.spawn("q"), args.hidden, args.rank, 0.5),
        bb=sample_gaussian(rng.spawn("b"), args.hidden, m, 0.5),
    )
    cfg = OdeConfig(dt=args.dt, t_end=args.t_end, regime=args.regime, record_every=100, progress=True)
    t, final = integrate(state, cfg)[-1]

    logger.info(f"t={t:.3f} overlaps={[round(x, 4) for x in rotated_overlaps(final).tolist()]}")
    fb = _feedback_matrix(final, cfg.regime)
    logger.info(f"fixed-point residual={fixed_point_residual(fb, final.s, final.product()):.3e}")
    logger.info(f"stationary={is_stationary(final, cfg)}")


if __name__ == "__main__":
    main()
