import sys

import pytest
import torch

from lowdim_feedback.errors import InvalidInputError, InvalidRankError
from lowdim_feedback.linalg import DTYPE, svd
from lowdim_feedback.tasks import (
    LinearTask, input_covariance, input_output_covariance, least_squares_accuracy, load_task, main,
    make_class_task, make_linear_task, one_hot, save_task, task_svd,
)


def test_linear_task_has_rank_d():
    task = make_linear_task(n=128, m=64, d=8, p=4096, noise_std=1.0, seed=0)
    assert task.a.shape == (64, 128)
    assert svd(task.a).numerical_rank() == 8
    assert task.inputs.shape == (128, 4096)
    assert task.targets.shape == (64, 4096)


def test_linear_task_default_sample_count():
    task = make_linear_task(n=5, m=3, d=1, seed=0)
    assert task.p == 500


def test_rank_zero_task_is_pure_noise():
    task = make_linear_task(n=6, m=4, d=0, p=50, noise_std=1.0, seed=1)
    assert torch.equal(task.a, torch.zeros(4, 6, dtype=DTYPE))
    assert svd(task.a).numerical_rank() == 0
    assert abs(float(task.targets.std()) - 1.0) < 0.25


def test_rank_above_min_dim_rejected():
    with pytest.raises(InvalidRankError):
        make_linear_task(n=4, m=3, d=4, p=10)


@pytest.mark.parametrize("kwargs", [{"p": 0}, {"noise_std": -1.0}])
def test_bad_linear_task_arguments(kwargs):
    args = {"n": 4, "m": 3, "d": 1, "p": 10} | kwargs
    with pytest.raises(InvalidInputError):
        make_linear_task(**args)


def test_whitened_task_recovers_a_exactly():
    task = make_linear_task(n=16, m=8, d=3, p=1600, noise_std=0.0, seed=2, whiten=True)
    assert torch.allclose(input_covariance(task), torch.eye(16, dtype=DTYPE), atol=1e-10)
    assert torch.allclose(input_output_covariance(task), task.a, atol=1e-9)


def test_noise_free_covariance_approaches_a():
    task = make_linear_task(n=8, m=4, d=2, p=12800, noise_std=0.0, seed=4)
    sigma_io = input_output_covariance(task)
    rel = torch.linalg.matrix_norm(sigma_io - task.a) / torch.linalg.matrix_norm(task.a)
    assert rel <= 0.05


def test_noise_floor_below_signal():
    task = make_linear_task(n=16, m=8, d=2, p=10000, noise_std=1.0, seed=5)
    s = task_svd(task).s
    assert torch.all(s[2:] < 0.05 * s[0])


def test_single_sample_covariance():
    e1 = torch.tensor([[1.0], [0.0]], dtype=DTYPE)
    e2 = torch.tensor([[0.0], [1.0]], dtype=DTYPE)
    task = LinearTask(n=2, m=2, d=1, p=1, a=e2 @ e1.T, inputs=e1, targets=e2, noise_std=0.0, seed=0)
    assert torch.equal(input_output_covariance(task), e2 @ e1.T)


def test_linear_task_deterministic():
    a = make_linear_task(n=6, m=5, d=2, p=40, seed=9)
    b = make_linear_task(n=6, m=5, d=2, p=40, seed=9)
    c = make_linear_task(n=6, m=5, d=2, p=40, seed=10)
    assert torch.equal(a.targets, b.targets)
    assert not torch.equal(a.targets, c.targets)


def test_noise_free_targets_are_exact():
    task = make_linear_task(n=6, m=5, d=2, p=40, noise_std=0.0, seed=9)
    assert torch.equal(task.targets, task.a @ task.inputs)


def test_whitening_needs_enough_samples():
    with pytest.raises(InvalidInputError):
        make_linear_task(n=10, m=3, d=1, p=5, whiten=True)


def test_one_hot():
    labels = torch.tensor([2, 0, 1])
    expected = torch.tensor([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]], dtype=DTYPE)
    assert torch.equal(one_hot(labels, 3), expected)


def test_class_task_is_balanced():
    task = make_class_task(n=10, d=5, per_class=30, spread=0.5, seed=0, test_per_class=4)
    assert task.p == 150
    assert torch.equal(torch.bincount(task.labels, minlength=5), torch.full((5,), 30))
    assert torch.equal(torch.bincount(task.test_labels, minlength=5), torch.full((5,), 4))
    assert task.targets.shape == (5, 150)


def test_class_targets_are_built_once():
    task = make_class_task(n=10, d=3, per_class=5, spread=0.5, seed=0, test_per_class=2)
    assert task.targets is task.targets
    assert task.test_targets is task.test_targets
    assert torch.equal(task.targets, one_hot(task.labels, 3))


def test_class_means_are_separated():
    task = make_class_task(n=8, d=6, per_class=2, spread=0.4, seed=3)
    dists = torch.cdist(task.class_means.T, task.class_means.T)
    dists.fill_diagonal_(float("inf"))
    assert float(dists.min()) > 2 * 0.4


def test_zero_spread_is_perfectly_separable():
    task = make_class_task(n=4, d=2, per_class=10, spread=0.0, seed=0)
    assert least_squares_accuracy(task) == 1.0


def test_well_separated_classes():
    task = make_class_task(n=64, d=10, per_class=500, spread=0.3, seed=1)
    assert least_squares_accuracy(task) > 0.95


def test_antipodal_classes_defeat_a_linear_readout():
    plain = make_class_task(n=64, d=8, per_class=200, spread=0.5, seed=0)
    mirrored = make_class_task(n=64, d=8, per_class=200, spread=0.5, seed=0, antipodal=True)
    assert least_squares_accuracy(plain) > 0.95
    assert least_squares_accuracy(mirrored) < 0.4
    assert torch.equal(torch.bincount(mirrored.labels, minlength=8), torch.full((8,), 200))

    means = mirrored.class_means
    centers = torch.cat([means, -means], dim=1)
    center_labels = torch.arange(8).repeat(2)
    nearest = torch.cdist(mirrored.inputs.T, centers.T).argmin(dim=1)
    assert torch.equal(center_labels[nearest], mirrored.labels)
    for c in range(8):
        class_mean = mirrored.inputs[:, mirrored.labels == c].mean(dim=1)
        assert float(class_mean.norm()) < 0.4 * float(means[:, c].norm())


def test_many_classes_one_hot_width():
    task = make_class_task(n=64, d=50, per_class=2, spread=0.1, seed=0)
    assert task.targets.shape == (50, 100)


def test_class_count_must_be_two_or_more():
    with pytest.raises(InvalidInputError):
        make_class_task(n=4, d=1, per_class=3, spread=0.1)


def test_linear_task_save_load(tmp_path):
    task = make_linear_task(n=6, m=3, d=2, p=30, seed=1)
    save_task(task, tmp_path)
    loaded = load_task(tmp_path)
    assert isinstance(loaded, LinearTask)
    assert torch.equal(loaded.a, task.a)
    assert torch.equal(loaded.inputs, task.inputs)
    assert torch.equal(loaded.targets, task.targets)
    assert (loaded.n, loaded.m, loaded.d, loaded.p, loaded.seed) == (6, 3, 2, 30, 1)


def test_class_task_save_load(tmp_path):
    task = make_class_task(n=5, d=3, per_class=4, spread=0.2, seed=2, test_per_class=2)
    save_task(task, tmp_path)
    loaded = load_task(tmp_path)
    assert torch.equal(loaded.inputs, task.inputs)
    assert torch.equal(loaded.labels, task.labels)
    assert torch.equal(loaded.test_labels, task.test_labels)
    assert torch.equal(loaded.class_means, task.class_means)
    assert not loaded.antipodal

    mirrored = make_class_task(n=5, d=3, per_class=4, spread=0.2, seed=2, antipodal=True)
    save_task(mirrored, tmp_path / "mirrored")
    assert load_task(tmp_path / "mirrored").antipodal


def test_cli_logs_through_package_setup(tmp_path, monkeypatch):
    calls = []
    monkeypatch.setattr("lowdim_feedback.tasks.setup_logging", lambda script_name: calls.append(script_name))
    monkeypatch.setattr(sys, "argv", ["tasks", "class", "--n", "4", "--d", "2", "--per-class", "3",
                                      "--out", str(tmp_path / "blobs")])
    main()
    assert calls == ["tasks"]
    assert load_task(tmp_path / "blobs").p == 6
