"""Dense matrix primitives.

All matrices are float64 torch tensors. Randomness flows through Rng so every
downstream result is a pure function of (seed, arguments).
"""

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import torch

from lowdim_feedback.errors import DimensionError, InvalidInputError

DTYPE = torch.float64
ORTHO_TOL = 1e-10

Matrix = torch.Tensor


# === RNG ===

class Rng:
    """Seeded random source backed by a CPU torch.Generator (Mersenne Twister).

    Normal deviates use torch's CPU normal sampler, a Box–Muller transform of
    the uniform stream, so identical seeds give identical matrices everywhere.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.generator = torch.Generator(device="cpu")
        self.generator.manual_seed(self.seed & 0xFFFF_FFFF_FFFF_FFFF)

    def spawn(self, label: str | int) -> "Rng":
        """Independent child stream keyed by label."""
        digest = hashlib.blake2b(f"{self.seed}:{label}".encode(), digest_size=8).digest()
        return Rng(int.from_bytes(digest, "little") >> 1)

    def get_state(self) -> list[int]:
        return self.generator.get_state().tolist()

    def set_state(self, state: list[int]) -> None:
        self.generator.set_state(torch.tensor(state, dtype=torch.uint8))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed})"


def sample_gaussian(rng: Rng, rows: int, cols: int, sigma: float = 1.0) -> Matrix:
    """I.i.d. N(0, sigma^2) entries."""
    if sigma < 0:
        raise InvalidInputError(f"sigma must be >= 0, got {sigma}")
    z = torch.randn(rows, cols, generator=rng.generator, dtype=DTYPE)
    return z * sigma


def sample_uniform(rng: Rng, rows: int, cols: int, bound: float) -> Matrix:
    """I.i.d. U(-bound, bound) entries."""
    u = torch.rand(rows, cols, generator=rng.generator, dtype=DTYPE)
    return (2.0 * u - 1.0) * bound


def kaiming_uniform(rng: Rng, rows: int, cols: int) -> Matrix:
    """Same distribution as torch.nn.init.kaiming_uniform_(w, a=sqrt(5)) on a rows x cols weight."""
    gain = torch.nn.init.calculate_gain("leaky_relu", math.sqrt(5))
    bound = gain * math.sqrt(3.0 / cols)
    return sample_uniform(rng, rows, cols, bound)


# === CHECKS ===

def check_finite(m: Matrix, what: str = "matrix") -> Matrix:
    if not torch.isfinite(m).all():
        raise InvalidInputError(f"{what} has non-finite entries")
    return m


def check_shape(m: Matrix, rows: int | None, cols: int | None, what: str = "matrix") -> Matrix:
    if m.dim() != 2:
        raise DimensionError(f"{what} must be 2-D, got shape {tuple(m.shape)}")
    if (rows is not None and m.shape[0] != rows) or (cols is not None and m.shape[1] != cols):
        raise DimensionError(f"{what} has shape {tuple(m.shape)}, expected ({rows}, {cols})")
    return m


# === SVD ===

@dataclass(frozen=True)
class SvdTriple:
    u: Matrix  # m x q, orthonormal columns
    s: Matrix  # q, nonincreasing
    v: Matrix  # n x q, orthonormal columns

    def reconstruct(self) -> Matrix:
        return self.u @ torch.diag(self.s) @ self.v.T

    def numerical_rank(self, rel_tol: float = 1e-8) -> int:
        if self.s.numel() == 0 or self.s[0] == 0:
            return 0
        return int((self.s > rel_tol * self.s[0]).sum())

    def rectangular_s(self) -> Matrix:
        """S as the m x n rectangular diagonal matrix."""
        m, n = self.u.shape[0], self.v.shape[0]
        out = torch.zeros(m, n, dtype=DTYPE)
        q = self.s.numel()
        out[:q, :q] = torch.diag(self.s)
        return out


def svd(m: Matrix) -> SvdTriple:
    """Thin SVD with the largest-magnitude entry of each left vector made nonnegative."""
    m = check_finite(torch.as_tensor(m, dtype=DTYPE), "svd input")
    u, s, vh = torch.linalg.svd(m, full_matrices=False)
    v = vh.T.clone()
    u = u.clone()

    idx = torch.argmax(u.abs(), dim=0)
    signs = torch.sign(u[idx, torch.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    u *= signs
    v *= signs
    return SvdTriple(u=u, s=s, v=v)


def complete_basis(u: Matrix) -> Matrix:
    """Square orthogonal matrix whose leading columns are u."""
    rows, q = u.shape
    if q == rows:
        return u.clone()
    stacked = torch.cat([u, torch.eye(rows, dtype=DTYPE)], dim=1)
    basis, _ = torch.linalg.qr(stacked, mode="reduced")
    basis = basis.clone()
    # leading block equals u up to sign and roundoff; pin it exactly
    basis[:, :q] = u
    return basis


def orthonormal_rows(p: Matrix, rel_tol: float = ORTHO_TOL) -> tuple[Matrix, int]:
    """Orthonormal basis (as columns) of the row space of p, and its rank."""
    triple = torch.linalg.svd(p, full_matrices=False)
    s = triple.S
    if s.numel() == 0 or s[0] == 0:
        return torch.zeros(p.shape[1], 0, dtype=DTYPE), 0
    rank = int((s > rel_tol * s[0]).sum())
    return triple.Vh[:rank].T, rank


# === TEXT DUMPS ===

def dump_matrix(m: Matrix, path: str | Path) -> None:
    """Write "rows cols" then one row per line in full-precision scientific notation."""
    m = check_shape(m, None, None)
    rows, cols = m.shape
    lines = [f"{rows} {cols}"]
    for row in m.tolist():
        lines.append(" ".join(f"{x:.17e}" for x in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_matrix(path: str | Path) -> Matrix:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    rows, cols = (int(x) for x in lines[0].split())
    values = [[float(x) for x in line.split()] for line in lines[1:1 + rows]]
    if rows == 0 or cols == 0:
        return torch.zeros(rows, cols, dtype=DTYPE)
    m = torch.tensor(values, dtype=DTYPE)
    return check_shape(m, rows, cols, str(path))
