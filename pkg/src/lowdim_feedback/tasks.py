"""Synthetic datasets.

LinearTask: y = A x + noise with A = sum_j u_j v_j^T of rank d, x ~ N(0, I).
ClassTask: Gaussian blobs around d class means, a desk-scale stand-in for
class-subsampled image benchmarks where d sets the task dimensionality.

Run: uv run python -m lowdim_feedback.tasks linear --out data/task_rank8
     uv run python -m lowdim_feedback.tasks class --d 10 --out data/blobs
"""

import argparse
import json
import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import torch

from lowdim_feedback.errors import InvalidInputError, InvalidRankError
from lowdim_feedback.log import setup_logging
from lowdim_feedback.linalg import (
    DTYPE, Matrix, Rng, dump_matrix, load_matrix, sample_gaussian, svd,
)

logger = logging.getLogger(__name__)

# === CONFIG ===

DEFAULT_SAMPLES_PER_INPUT_DIM = 100  # p = 100 * n unless given
MEAN_SEPARATION_FACTOR = 2.0  # min pairwise mean distance > factor * spread
MAX_MEAN_DRAWS = 100


# === TYPES ===

@dataclass(frozen=True)
class LinearTask:
    n: int
    m: int
    d: int
    p: int
    a: Matrix  # m x n, rank d
    inputs: Matrix  # n x p
    targets: Matrix  # m x p
    noise_std: float
    seed: int
    whitened: bool = False

    @property
    def output_dim(self) -> int:
        return self.m


@dataclass(frozen=True)
class ClassTask:
    n: int
    d: int
    p: int
    inputs: Matrix  # n x p
    labels: torch.Tensor  # p, int64 class indices
    class_means: Matrix  # n x d
    spread: float
    seed: int
    test_inputs: Matrix | None = None
    test_labels: torch.Tensor | None = None
    antipodal: bool = False  # each class is the pair of blobs at +mean and -mean

    @property
    def output_dim(self) -> int:
        return self.d

    @cached_property
    def targets(self) -> Matrix:
        return one_hot(self.labels, self.d)

    @cached_property
    def test_targets(self) -> Matrix | None:
        if self.test_labels is None:
            return None
        return one_hot(self.test_labels, self.d)


def one_hot(labels: torch.Tensor, d: int) -> Matrix:
    """d x p one-hot targets."""
    out = torch.zeros(d, labels.numel(), dtype=DTYPE)
    out[labels, torch.arange(labels.numel())] = 1.0
    return out


# === LINEAR TASK ===

def whiten_inputs(x: Matrix) -> Matrix:
    """Exact empirical whitening: returns x' with x' x'^T / p = I."""
    n, p = x.shape
    if p < n:
        raise InvalidInputError(f"whitening needs p >= n (p={p}, n={n})")
    cov = x @ x.T / p
    evals, evecs = torch.linalg.eigh(cov)
    if evals.min() <= 0:
        raise InvalidInputError("input covariance is singular, cannot whiten")
    inv_sqrt = evecs @ torch.diag(evals.rsqrt()) @ evecs.T
    return inv_sqrt @ x


def make_linear_task(
    n: int,
    m: int,
    d: int,
    p: int | None = None,
    noise_std: float = 1.0,
    seed: int = 0,
    whiten: bool = False,
) -> LinearTask:
    """Rank-d regression task y = A x + xi."""
    if d < 0 or d > min(n, m):
        raise InvalidRankError(f"task rank d={d} must lie in [0, min(n, m)={min(n, m)}]")
    if p is None:
        p = DEFAULT_SAMPLES_PER_INPUT_DIM * n
    if p < 1:
        raise InvalidInputError(f"sample count p must be >= 1, got {p}")
    if noise_std < 0:
        raise InvalidInputError(f"noise_std must be >= 0, got {noise_std}")

    rng = Rng(seed)
    structure = rng.spawn("structure")
    u = sample_gaussian(structure, m, d)
    v = sample_gaussian(structure, n, d)
    a = u @ v.T  # sum_j u_j v_j^T

    inputs = sample_gaussian(rng.spawn("inputs"), n, p)
    if whiten:
        inputs = whiten_inputs(inputs)
    noise = sample_gaussian(rng.spawn("noise"), m, p, noise_std)
    targets = a @ inputs + noise

    logger.debug(f"Linear task n={n} m={m} d={d} p={p} noise={noise_std} seed={seed} whiten={whiten}")
    return LinearTask(
        n=n, m=m, d=d, p=p, a=a, inputs=inputs, targets=targets,
        noise_std=float(noise_std), seed=seed, whitened=whiten,
    )


def input_output_covariance(task: LinearTask) -> Matrix:
    """Sigma_io = (1/p) sum_mu y x^T, an m x n matrix."""
    return task.targets @ task.inputs.T / task.p


def input_covariance(task: LinearTask) -> Matrix:
    return task.inputs @ task.inputs.T / task.p


def output_covariance(task: LinearTask) -> Matrix:
    return task.targets @ task.targets.T / task.p


def task_svd(task: LinearTask):
    """SVD of Sigma_io, the basis every mode overlap is measured in."""
    return svd(input_output_covariance(task))


# === CLASS TASK ===

def _min_pairwise_distance(means: Matrix) -> float:
    dists = torch.cdist(means.T, means.T)
    dists.fill_diagonal_(float("inf"))
    return float(dists.min())


def make_class_task(
    n: int,
    d: int,
    per_class: int,
    spread: float,
    seed: int = 0,
    test_per_class: int = 0,
    antipodal: bool = False,
) -> ClassTask:
    """Balanced Gaussian blobs: per_class samples around each of d random means.

    With antipodal, every sample of class c sits around +mean_c or -mean_c
    with equal probability. The class-conditional input means then vanish and
    no linear readout of the raw input beats chance by much, so accuracy
    depends on what the hidden layers learn.
    """
    if d < 2:
        raise InvalidInputError(f"class count d must be >= 2, got {d}")
    if per_class < 1:
        raise InvalidInputError(f"per_class must be >= 1, got {per_class}")
    if spread < 0:
        raise InvalidInputError(f"spread must be >= 0, got {spread}")

    rng = Rng(seed)
    mean_rng = rng.spawn("means")
    for _ in range(MAX_MEAN_DRAWS):
        means = sample_gaussian(mean_rng, n, d)
        centers = torch.cat([means, -means], dim=1) if antipodal else means
        if _min_pairwise_distance(centers) > MEAN_SEPARATION_FACTOR * spread:
            break
    else:
        raise InvalidInputError(
            f"could not draw {d} class means in {n} dims separated by more than "
            f"{MEAN_SEPARATION_FACTOR} x spread={spread}"
        )

    def draw(stream: Rng, count: int) -> tuple[Matrix, torch.Tensor]:
        labels = torch.arange(d).repeat_interleave(count)
        order = torch.randperm(labels.numel(), generator=stream.generator)
        labels = labels[order]
        centers = means[:, labels]
        if antipodal:
            signs = 2.0 * torch.randint(0, 2, (labels.numel(),), generator=stream.generator).to(DTYPE) - 1.0
            centers = centers * signs
        x = centers + sample_gaussian(stream, n, labels.numel(), spread)
        return x, labels

    inputs, labels = draw(rng.spawn("train"), per_class)
    test_inputs = test_labels = None
    if test_per_class > 0:
        test_inputs, test_labels = draw(rng.spawn("test"), test_per_class)

    logger.debug(f"Class task n={n} d={d} per_class={per_class} spread={spread} "
                 f"antipodal={antipodal} seed={seed}")
    return ClassTask(
        n=n, d=d, p=labels.numel(), inputs=inputs, labels=labels,
        class_means=means, spread=float(spread), seed=seed,
        test_inputs=test_inputs, test_labels=test_labels, antipodal=antipodal,
    )


def least_squares_accuracy(task: ClassTask) -> float:
    """Train accuracy of the closed-form least-squares linear classifier."""
    x = torch.cat([task.inputs, torch.ones(1, task.p, dtype=DTYPE)])
    w = torch.linalg.lstsq(x.T, task.targets.T).solution.T
    pred = (w @ x).argmax(dim=0)
    return float((pred == task.labels).double().mean())


# === SERIALIZATION ===

def save_task(task: LinearTask | ClassTask, directory: str | Path) -> None:
    """task.json with dims/seed/noise plus one matrix dump per array."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if isinstance(task, LinearTask):
        meta = {
            "type": "linear", "n": task.n, "m": task.m, "d": task.d, "p": task.p,
            "noise_std": task.noise_std, "seed": task.seed, "whitened": task.whitened,
        }
        arrays = {"a": task.a, "inputs": task.inputs, "targets": task.targets}
    else:
        meta = {
            "type": "class", "n": task.n, "d": task.d, "p": task.p,
            "spread": task.spread, "seed": task.seed, "antipodal": task.antipodal,
        }
        arrays = {
            "inputs": task.inputs, "class_means": task.class_means,
            "labels": task.labels.to(DTYPE).unsqueeze(0),
        }
        if task.test_inputs is not None:
            arrays["test_inputs"] = task.test_inputs
            arrays["test_labels"] = task.test_labels.to(DTYPE).unsqueeze(0)
    meta["arrays"] = sorted(arrays)
    (directory / "task.json").write_text(json.dumps(meta, indent=2), encoding="utf-8")
    for name, m in arrays.items():
        dump_matrix(m, directory / f"{name}.txt")


def load_task(directory: str | Path) -> LinearTask | ClassTask:
    directory = Path(directory)
    meta = json.loads((directory / "task.json").read_text(encoding="utf-8"))
    arrays = {name: load_matrix(directory / f"{name}.txt") for name in meta["arrays"]}
    if meta["type"] == "linear":
        return LinearTask(
            n=meta["n"], m=meta["m"], d=meta["d"], p=meta["p"], a=arrays["a"],
            inputs=arrays["inputs"], targets=arrays["targets"],
            noise_std=meta["noise_std"], seed=meta["seed"], whitened=meta["whitened"],
        )
    test_labels = arrays.get("test_labels")
    return ClassTask(
        n=meta["n"], d=meta["d"], p=meta["p"], inputs=arrays["inputs"],
        labels=arrays["labels"][0].to(torch.int64), class_means=arrays["class_means"],
        spread=meta["spread"], seed=meta["seed"],
        test_inputs=arrays.get("test_inputs"),
        test_labels=None if test_labels is None else test_labels[0].to(torch.int64),
        antipodal=meta.get("antipodal", False),
    )


def main():
    parser = argparse.ArgumentParser(description="Generate and save a synthetic task")
    parser.add_argument("type", choices=["linear", "class"], help="Task family")
    parser.add_argument("--out", required=True, help="Output directory")
    parser.add_argument("--n", type=int, default=128, help="Input dimension (default: 128)")
    parser.add_argument("--m", type=int, default=64, help="Output dimension, linear only (default: 64)")
    parser.add_argument("--d", type=int, default=8, help="Task rank / class count (default: 8)")
    parser.add_argument("--p", type=int, default=None, help="Samples, linear only (default: 100 * n)")
    parser.add_argument("--noise-std", type=float, default=1.0, help="Label noise std (default: 1.0)")
    parser.add_argument("--whiten", action="store_true", help="Exactly whiten the inputs")
    parser.add_argument("--per-class", type=int, default=200, help="Samples per class (default: 200)")
    parser.add_argument("--spread", type=float, default=0.5, help="Within-class std (default: 0.5)")
    parser.add_argument("--antipodal", action="store_true", help="Place each class at +mean and -mean")
    parser.add_argument("--seed", type=int, default=0, help="Seed (default: 0)")
    args = parser.parse_args()

    setup_logging(script_name="tasks")

    if args.type == "linear":
        task = make_linear_task(args.n, args.m, args.d, args.p, args.noise_std, args.seed, args.whiten)
        s = task_svd(task).s
        logger.info(f"Top singular values of Sigma_io: {[round(float(x), 3) for x in s[:args.d + 2]]}")
    else:
        task = make_class_task(args.n, args.d, args.per_class, args.spread, args.seed, antipodal=args.antipodal)
        logger.info(f"Least-squares train accuracy: {least_squares_accuracy(task):.3f}")

    save_task(task, args.out)
    logger.info(f"Saved to {args.out}")


if __name__ == "__main__":
    main()
