"""One seeded run of each experiment kind.

run_single() is the unit of work the runner fans out over seeds (optionally
in worker processes); it writes its own files and returns a RunResult.
"""

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import torch

from lowdim_feedback.feedback import FeedbackHyper
from lowdim_feedback.linalg import Rng
from lowdim_feedback.metrics import break_even_rank, flop_report, flops_to_accuracy
from lowdim_feedback.network import Network, PathwaySpec, TrainConfig, build_network, train
from lowdim_feedback.runner.schema import REGIME_FOR_KIND, ExperimentConfig
from lowdim_feedback.tasks import (
    ClassTask, LinearTask, make_class_task, make_linear_task, output_covariance, task_svd,
)
from lowdim_feedback.theory import (
    OdeConfig, OjaDrive, fixed_point_residual, integrate, state_from_network, step_size_error,
    theory_trajectory,
)
from lowdim_feedback.trajectory import Trajectory, compare_overlaps, write_csv

logger = logging.getLogger(__name__)

SMALL_INIT_STD = 1e-2
STEP_CHECK_TOL = 1e-4


@dataclass
class RunResult:
    seed: int
    files: list[str] = field(default_factory=list)
    terminal: dict[str, float] = field(default_factory=dict)
    comparison_failed: bool = False


# === BUILDERS ===

def build_task(config: ExperimentConfig, seed: int) -> LinearTask | ClassTask:
    t = config.task
    task_seed = seed if t["seed"] is None else t["seed"]
    if t["type"] == "linear":
        return make_linear_task(t["n"], t["m"], t["d"], t["p"], t["noise_std"], task_seed, t["whiten"])
    return make_class_task(t["n"], t["d"], t["per_class"], t["spread"], task_seed, t["test_per_class"],
                           antipodal=t["antipodal"])


def pathway_specs(config: ExperimentConfig, rank: int | None = None,
                  kind: str | None = None) -> list[PathwaySpec]:
    """Specs from the config; rank and kind override every non-transpose entry."""
    widths = config.network["widths"]
    specs = []
    for p in config.pathways:
        spec_kind, spec_rank, use_targets = p["kind"], p["rank"], p["use_targets"]
        if kind is not None:
            spec_kind, spec_rank, use_targets = kind, None, False
        elif rank is not None and spec_kind != "transpose":
            spec_rank = min(rank, widths[p["layer"]], widths[p["source"]])
        specs.append(PathwaySpec(
            layer=p["layer"], kind=spec_kind, rank=spec_rank,
            source=p["source"] if spec_kind != "transpose" else p["layer"] + 1,
            update_q=p["update_q"], update_p=p["update_p"], use_targets=use_targets,
        ))
    return specs


def build_net(config: ExperimentConfig, seed: int, specs: list[PathwaySpec]) -> Network:
    n = config.network
    return build_network(
        n["widths"], Rng(seed).spawn("network"), activations=n["activations"], pathways=specs,
        loss=n["loss"], bias=n["bias"], init=n["init"], init_std=n["init_std"],
    )


def train_config(config: ExperimentConfig, seed: int, **feedback_overrides) -> TrainConfig:
    t, f = config.train, config.feedback | feedback_overrides
    return TrainConfig(
        eta=t["eta"], weight_decay=t["weight_decay"], batch=t["batch"] or None,
        steps=t["steps"], epochs=t["epochs"], seed=seed,
        feedback=FeedbackHyper(f["eta_fb"], f["weight_decay"], f["update_interval"], f["raw_oja"]),
        record_every=t["record_every"], n_modes=t["n_modes"],
    )


def terminal_metrics(traj: Trajectory, prefix: str = "") -> dict[str, float]:
    final = traj.final
    out = {}
    for name in ("loss", "accuracy", "pp_orth_err", "subspace_angle_max", "cum_macs"):
        value = getattr(final, name)
        if value is not None:
            out[prefix + name] = float(value)
    for i, x in enumerate(final.overlaps):
        if x is not None:
            out[f"{prefix}lambda_{i + 1}"] = x
    return out


def resolve_rank(token: str | int, d: int) -> int | None:
    """Sweep rank token -> integer rank; None stands for full rank."""
    if isinstance(token, int):
        return token
    return {
        "quarter": max(1, d // 4), "half": max(1, d // 2), "d": d, "2d": 2 * d, "4d": 4 * d, "full": None,
    }[token]


# === KINDS ===

def _run_training(config: ExperimentConfig, seed: int, out_dir: Path) -> RunResult:
    task = build_task(config, seed)
    net = build_net(config, seed, pathway_specs(config))
    traj = train(net, task, train_config(config, seed))
    path = write_csv(traj, out_dir / f"trajectory_seed{seed}.csv")
    return RunResult(seed=seed, files=[str(path)], terminal=terminal_metrics(traj))


def _run_linear_theory(config: ExperimentConfig, seed: int, out_dir: Path) -> RunResult:
    task = build_task(config, seed)
    net = build_net(config, seed, pathway_specs(config))
    svd_io = task_svd(task)
    pw = net.pathways[1]
    th, train_cfg = config.theory, config.train

    # one training step of size eta is an Euler step of length dt = eta * tau
    dt = train_cfg["eta"] * th["tau"]
    eta_fb = dt / th["tau_b"]
    n_modes = train_cfg["n_modes"] or task.d
    ode = OdeConfig(
        dt=dt,
        t_end=train_cfg["steps"] * dt,
        regime=REGIME_FOR_KIND[pw.kind.value],
        tau=th["tau"],
        tau_b=th["tau_b"],
        weight_decay=config.feedback["weight_decay"] / eta_fb,
        oja_drive=OjaDrive.TARGETS if pw.use_targets else OjaDrive.ERROR,
        update_q=pw.update_q,
        update_p=pw.update_p,
        record_every=train_cfg["record_every"],
    )
    logger.info(f"Seed {seed}: theory regime={ode.regime.value} dt={dt:g} eta_fb={eta_fb:g} "
                f"init={config.network['init']} std={config.network['init_std']:g}")
    if config.network["init"] == "gaussian" and config.network["init_std"] <= SMALL_INIT_STD:
        logger.info(f"Seed {seed}: assuming small initial weights (std {config.network['init_std']:g}); "
                    f"theory and simulation start from the same draw")
    else:
        logger.warning(f"Seed {seed}: initial weights are not small; staged mode learning may not appear")

    start = state_from_network(net, svd_io)
    samples = integrate(start, ode)
    s = svd_io.rectangular_s()
    offset = 0.5 * (float(torch.trace(output_covariance(task))) - float((s ** 2).sum()))
    theory = theory_trajectory(samples, ode, n_modes, loss_offset=offset)
    files = [str(write_csv(theory, out_dir / f"theory_seed{seed}.csv"))]
    terminal = terminal_metrics(theory, prefix="theory_")

    final = samples[-1][1]
    feedback = final.w2b.T if final.bb is None and final.pb is None else (
        final.bb if final.bb is not None else final.q @ final.pb)
    terminal["theory_fixed_point_residual"] = fixed_point_residual(feedback, final.s, final.product())
    if th["check_step"]:
        drift = step_size_error(start, ode)
        terminal["theory_step_size_error"] = drift
        if drift > STEP_CHECK_TOL:
            logger.warning(f"Seed {seed}: halving dt moves the final state by {drift:.3g} "
                           f"(> {STEP_CHECK_TOL:g}); reduce train.eta")

    result = RunResult(seed=seed, files=files, terminal=terminal)
    if not th["compare"]:
        return result

    overrides = {"eta_fb": eta_fb, "raw_oja": True, "update_interval": 1}
    cfg = replace(train_config(config, seed, **overrides), n_modes=n_modes)
    sim = train(net, task, cfg)
    result.files.append(str(write_csv(sim, out_dir / f"simulation_seed{seed}.csv")))
    result.terminal |= terminal_metrics(sim, prefix="sim_")

    report = compare_overlaps(sim, theory) | {"tolerance": th["tolerance"], "seed": seed}
    report["passed"] = report["max_deviation"] is not None and report["max_deviation"] <= th["tolerance"]
    path = out_dir / f"comparison_seed{seed}.json"
    path.write_text(json.dumps(report, indent=2), encoding="utf-8")
    result.files.append(str(path))
    if report["max_deviation"] is not None:
        result.terminal["max_overlap_deviation"] = report["max_deviation"]
    result.comparison_failed = not report["passed"]
    if result.comparison_failed:
        logger.warning(f"Seed {seed}: simulation deviates from theory by {report['max_deviation']} "
                       f"(tolerance {th['tolerance']})")
    return result


def _run_rank_sweep(config: ExperimentConfig, seed: int, out_dir: Path) -> RunResult:
    task = build_task(config, seed)
    sweep = config.sweep
    result = RunResult(seed=seed)

    baseline_acc = None
    if sweep["baseline"]:
        net = build_net(config, seed, pathway_specs(config, kind="transpose"))
        traj = train(net, task, train_config(config, seed))
        result.files.append(str(write_csv(traj, out_dir / f"baseline_seed{seed}.csv")))
        result.terminal |= terminal_metrics(traj, prefix="baseline.")
        baseline_acc = traj.final.accuracy

    seen = set()
    for token in sweep["ranks"]:
        rank = resolve_rank(token, task.d)
        label = "full" if rank is None else str(rank)
        if label in seen:
            continue
        seen.add(label)

        net = build_net(config, seed, pathway_specs(config, rank=rank))
        traj = train(net, task, train_config(config, seed))
        result.files.append(str(write_csv(traj, out_dir / f"rank{label}_seed{seed}.csv")))
        prefix = f"rank_{label}."
        result.terminal |= terminal_metrics(traj, prefix=prefix)
        if traj.final.accuracy is not None:
            reference = baseline_acc if sweep["reference"] == "baseline" else None
            reached = flops_to_accuracy(traj, sweep["target_fraction"], reference)
            if reached is not None:
                result.terminal[prefix + "flops_to_accuracy"] = float(reached)
            if baseline_acc is not None:
                result.terminal[prefix + "accuracy_deficit"] = baseline_acc - traj.final.accuracy
    return result


def _run_flops_report(config: ExperimentConfig, seed: int, out_dir: Path) -> RunResult:
    net = build_net(config, seed, pathway_specs(config))
    batch = config.train["batch"]
    if batch == 0:
        task = config.task
        if task["type"] == "linear":
            batch = task["p"] or 100 * task["n"]
        else:
            batch = task["d"] * task["per_class"]
    report = flop_report(net.widths, net.pathways, batch, config.feedback["update_interval"])
    payload = report.to_dict()
    payload["pathways"] = [
        {
            "layer": pw.layer, "source_layer": pw.source_layer, "kind": pw.kind.value,
            "rank": pw.rank, "n_in": pw.n_in, "n_src": pw.n_src,
            "break_even_rank": break_even_rank(pw.n_in, pw.n_src),
        }
        for pw in net.pathways.values()
    ]
    path = out_dir / "flops.json"
    path.write_text(json.dumps(payload, indent=2), encoding="utf-8")
    terminal = {
        "forward_macs": report.forward_macs,
        "backward_error_macs": report.backward_error_macs,
        "weight_update_macs": report.weight_update_macs,
        "feedback_update_macs": report.feedback_update_macs,
        "total_macs": report.total_macs,
    }
    return RunResult(seed=seed, files=[str(path)], terminal=terminal)


RUNNERS = {
    "linear-sim": _run_training,
    "mlp-train": _run_training,
    "linear-theory": _run_linear_theory,
    "rank-sweep": _run_rank_sweep,
    "flops-report": _run_flops_report,
}


def run_single(config: ExperimentConfig, seed: int, out_dir: str | Path) -> RunResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    logger.info(f"Starting {config.kind} seed={seed}")
    return RUNNERS[config.kind](config, seed, out_dir)
