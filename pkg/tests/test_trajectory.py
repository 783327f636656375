import pytest

from lowdim_feedback.errors import ComparisonError
from lowdim_feedback.trajectory import Trajectory, TrajectoryRow, compare_overlaps, read_csv, write_csv


def _traj(overlaps_by_step, **row_kwargs):
    n_modes = len(next(iter(overlaps_by_step.values())))
    traj = Trajectory(n_modes=n_modes)
    for step, overlaps in overlaps_by_step.items():
        traj.append(TrajectoryRow(step=step, time=step * 0.1, overlaps=list(overlaps), **row_kwargs))
    return traj


def test_header():
    assert Trajectory(n_modes=2).header() == [
        "step", "time", "loss", "accuracy", "lambda_1", "lambda_2",
        "pp_orth_err", "subspace_angle_max", "cum_macs",
    ]


def test_csv_round_trip(tmp_path):
    traj = Trajectory(n_modes=2)
    traj.append(TrajectoryRow(step=0, time=0.0, loss=1.5, overlaps=[0.0, None], cum_macs=0))
    traj.append(TrajectoryRow(step=10, time=0.01, loss=0.25, overlaps=[0.5, float("nan")],
                              pp_orth_err=1e-3, cum_macs=1234))
    path = write_csv(traj, tmp_path / "t.csv")
    lines = path.read_text().splitlines()
    assert lines[1] == "0,0.0,1.5,,0.0,,,,0"
    assert lines[2] == "10,0.01,0.25,,0.5,,0.001,,1234"

    back = read_csv(path)
    assert back.n_modes == 2
    assert back.steps == [0, 10]
    assert back.column("lambda_1") == [0.0, 0.5]
    assert back.column("lambda_2") == [None, None]
    assert back.final.cum_macs == 1234


def test_csv_bytes_are_reproducible(tmp_path):
    traj = _traj({0: [0.1234567890123], 5: [1.0 / 3.0]}, loss=2.0 / 3.0)
    a = write_csv(traj, tmp_path / "a.csv").read_bytes()
    b = write_csv(traj, tmp_path / "b.csv").read_bytes()
    assert a == b


def test_row_must_match_mode_count():
    with pytest.raises(ValueError):
        Trajectory(n_modes=2).append(TrajectoryRow(step=0, time=0.0, overlaps=[1.0]))


def test_compare_overlaps_on_shared_steps():
    sim = _traj({0: [0.0, 0.0], 10: [0.5, 0.1], 20: [0.9, 0.3]})
    theory = _traj({0: [0.0, 0.0], 20: [0.95, 0.2], 30: [1.0, 0.5]})
    report = compare_overlaps(sim, theory)
    assert report["n_points"] == 2
    assert report["per_mode"] == [pytest.approx(0.05), pytest.approx(0.1)]
    assert report["max_deviation"] == pytest.approx(0.1)


def test_compare_skips_missing_values():
    report = compare_overlaps(_traj({0: [None]}), _traj({0: [1.0]}))
    assert report["max_deviation"] is None


def test_compare_needs_matching_modes():
    with pytest.raises(ComparisonError):
        compare_overlaps(_traj({0: [0.0]}), _traj({0: [0.0, 0.0]}))
    with pytest.raises(ComparisonError):
        compare_overlaps(_traj({0: [0.0]}), _traj({5: [0.0]}))
