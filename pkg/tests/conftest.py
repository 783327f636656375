import pytest
import torch

from lowdim_feedback.linalg import DTYPE, Rng, sample_gaussian
from lowdim_feedback.tasks import make_linear_task


@pytest.fixture
def rng():
    return Rng(0)


@pytest.fixture
def small_linear_task():
    """n=8 -> m=4, rank 2, exactly whitened inputs."""
    return make_linear_task(n=8, m=4, d=2, p=400, noise_std=0.5, seed=3, whiten=True)


def _random_orthonormal(rng: Rng, rows: int, cols: int) -> torch.Tensor:
    q, _ = torch.linalg.qr(sample_gaussian(rng, rows, cols))
    return q


def _spread_spectrum(rng: Rng, rows: int, cols: int, top: float = 4.0, bottom: float = 0.5):
    k = min(rows, cols)
    u = _random_orthonormal(rng.spawn("u"), rows, k)
    v = _random_orthonormal(rng.spawn("v"), cols, k)
    s = torch.linspace(top, bottom, k, dtype=DTYPE)
    return u @ torch.diag(s) @ v.T, s


@pytest.fixture
def spread_spectrum():
    """Factory: rows x cols matrix with singular values linspace(top, bottom), plus those values."""
    return _spread_spectrum
