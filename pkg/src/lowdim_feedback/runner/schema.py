"""Experiment files: strict TOML schema, defaults, validation, hashing.

Layout of an experiment file:

    kind = "linear-sim"          # linear-sim | linear-theory | mlp-train | rank-sweep | flops-report
    seed = 0
    repeats = 1
    output_dir = "full_fa"       # optional, under the output root

    [task]      type = "linear" (n, m, d, p, noise_std, whiten, seed)
                type = "class"  (n, d, per_class, spread, test_per_class, seed)
    [network]   widths, activations, loss, bias, init, init_std
    [[pathway]] layer ("all" or index), kind, rank, source, update_q, update_p, use_targets
    [train]     eta, weight_decay, batch, steps, epochs, record_every, n_modes
    [feedback]  eta_fb, weight_decay, update_interval, raw_oja
    [theory]    linear-theory only
    [sweep]     rank-sweep only

Every violation is collected before anything runs.
"""

import copy
import hashlib
import json
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field
from pathlib import Path

from lowdim_feedback.config import EXPERIMENT_KINDS, get_section_defaults
from lowdim_feedback.errors import ConfigError

TOP_KEYS = {"kind", "seed", "repeats", "output_dir", "task", "network", "pathway",
            "train", "feedback", "theory", "sweep"}
TASK_TYPES = {"linear": "linear-task", "class": "class-task"}
PATHWAY_KINDS = ["transpose", "fixed-random", "normative", "local"]
ACTIVATIONS = ["linear", "relu", "tanh"]
LOSSES = ["squared", "cross-entropy"]
INITS = ["kaiming", "gaussian"]
RANK_TOKENS = ["quarter", "half", "d", "2d", "4d", "full"]
SWEEP_REFERENCES = ["baseline", "own"]
REGIMES = ["backprop", "fixed-feedback", "normative", "local-oja"]
REGIME_FOR_KIND = {
    "transpose": "backprop", "fixed-random": "fixed-feedback",
    "normative": "normative", "local": "local-oja",
}


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    seed: int
    repeats: int
    output_dir: str | None
    task: dict
    network: dict
    pathways: list[dict]  # one resolved entry per hidden layer that has feedback
    train: dict
    feedback: dict
    theory: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)
    source: str | None = None

    @property
    def depth(self) -> int:
        return len(self.network["widths"]) - 1

    def resolved(self) -> dict:
        """Everything that ran, defaults included. Echoed into the manifest."""
        out = {
            "kind": self.kind, "seed": self.seed, "repeats": self.repeats,
            "output_dir": self.output_dir, "task": self.task, "network": self.network,
            "pathway": self.pathways, "train": self.train, "feedback": self.feedback,
        }
        if self.theory:
            out["theory"] = self.theory
        if self.sweep:
            out["sweep"] = self.sweep
        return copy.deepcopy(out)

    @property
    def config_hash(self) -> str:
        """sha256 of the resolved config; output_dir is not part of it."""
        semantic = self.resolved()
        semantic.pop("output_dir")
        blob = json.dumps(semantic, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


# === FIELD CHECKS ===

class _Checker:
    def __init__(self):
        self.errors: list[str] = []

    def fail(self, msg: str) -> None:
        self.errors.append(msg)

    def merge(self, where: str, given, defaults: dict) -> dict:
        if given is None:
            return defaults
        if not isinstance(given, dict):
            self.fail(f"[{where}] must be a table")
            return defaults
        for key in given:
            if key not in defaults:
                self.fail(f"[{where}] unknown key '{key}'")
        return defaults | {k: v for k, v in given.items() if k in defaults}

    def integer(self, where: str, key: str, value, low: int | None = None,
                optional: bool = False, message: str | None = None) -> bool:
        if value is None and optional:
            return True
        if not isinstance(value, int) or isinstance(value, bool):
            self.fail(f"[{where}] {key} must be an integer, got {value!r}")
            return False
        if low is not None and value < low:
            self.fail(message or f"[{where}] {key} must be >= {low}, got {value}")
            return False
        return True

    def number(self, where: str, key: str, value, low: float | None = None,
               strict: bool = False, optional: bool = False) -> bool:
        if value is None and optional:
            return True
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            self.fail(f"[{where}] {key} must be a number, got {value!r}")
            return False
        if low is not None and (value <= low if strict else value < low):
            self.fail(f"[{where}] {key} must be {'>' if strict else '>='} {low}, got {value}")
            return False
        return True

    def flag(self, where: str, key: str, value) -> bool:
        if not isinstance(value, bool):
            self.fail(f"[{where}] {key} must be true or false, got {value!r}")
            return False
        return True

    def choice(self, where: str, key: str, value, options: list[str]) -> bool:
        if value not in options:
            self.fail(f"[{where}] {key} must be one of {options}, got {value!r}")
            return False
        return True


# === SECTIONS ===

def _default_task_type(kind: str) -> str:
    return "linear" if kind in ("linear-sim", "linear-theory") else "class"


def _check_task(ck: _Checker, kind: str, given) -> dict:
    given = given if isinstance(given, dict) else {}
    task_type = given.get("type", _default_task_type(kind))
    if not ck.choice("task", "type", task_type, list(TASK_TYPES)):
        task_type = _default_task_type(kind)
    task = ck.merge("task", given, get_section_defaults(TASK_TYPES[task_type]))

    ck.integer("task", "n", task["n"], 1)
    ck.integer("task", "d", task["d"], 0 if task_type == "linear" else 2)
    ck.integer("task", "seed", task["seed"], optional=True)
    if task_type == "linear":
        ck.integer("task", "m", task["m"], 1)
        ck.integer("task", "p", task["p"], 1, optional=True)
        ck.number("task", "noise_std", task["noise_std"], 0.0)
        ck.flag("task", "whiten", task["whiten"])
        if all(isinstance(task[k], int) for k in ("n", "m", "d")) and task["d"] > min(task["n"], task["m"]):
            ck.fail(f"[task] d={task['d']} exceeds min(n, m)={min(task['n'], task['m'])}")
    else:
        ck.integer("task", "per_class", task["per_class"], 1)
        ck.number("task", "spread", task["spread"], 0.0)
        ck.integer("task", "test_per_class", task["test_per_class"], 0)
        ck.flag("task", "antipodal", task["antipodal"])
    if kind in ("linear-sim", "linear-theory") and task_type != "linear":
        ck.fail(f"{kind} needs a linear task, got type '{task_type}'")
    if kind == "mlp-train" and task_type != "class":
        ck.fail(f"mlp-train needs a class task, got type '{task_type}'")
    return task


def _task_dims(task: dict) -> tuple[int | None, int | None]:
    out = task.get("m") if task["type"] == "linear" else task.get("d")
    n = task.get("n")
    return (n if isinstance(n, int) else None), (out if isinstance(out, int) else None)


def _check_network(ck: _Checker, given, task: dict | None) -> dict:
    net = ck.merge("network", given, get_section_defaults("network"))
    widths = net["widths"]
    if not isinstance(widths, list) or len(widths) < 2 or not all(
            isinstance(w, int) and not isinstance(w, bool) and w >= 1 for w in widths):
        ck.fail(f"[network] widths must be a list of at least two positive integers, got {widths!r}")
        net["widths"] = None
        return net
    depth = len(widths) - 1
    if net["activations"] is None:
        net["activations"] = ["linear"] * depth
    elif not isinstance(net["activations"], list) or len(net["activations"]) != depth:
        ck.fail(f"[network] activations must list {depth} entries, got {net['activations']!r}")
    else:
        for act in net["activations"]:
            ck.choice("network", "activations", act, ACTIVATIONS)
    ck.choice("network", "loss", net["loss"], LOSSES)
    ck.flag("network", "bias", net["bias"])
    ck.choice("network", "init", net["init"], INITS)
    ck.number("network", "init_std", net["init_std"], 0.0)
    if net["loss"] == "cross-entropy" and isinstance(net["activations"], list) \
            and net["activations"][-1:] != ["linear"]:
        ck.fail("[network] cross-entropy needs a linear output activation")

    if task is not None:
        n, out = _task_dims(task)
        if n is not None and widths[0] != n:
            ck.fail(f"[network] widths[0]={widths[0]} does not match task input dim n={n}")
        if out is not None and widths[-1] != out:
            ck.fail(f"[network] widths[-1]={widths[-1]} does not match task output dim {out}")
    return net


def _check_pathways(ck: _Checker, given, widths: list[int] | None, rank_swept: bool) -> list[dict]:
    if given is None:
        given = [{}]
    if isinstance(given, dict):
        given = [given]
    if not isinstance(given, list):
        ck.fail("[[pathway]] must be an array of tables")
        return []
    if widths is None:
        return []
    depth = len(widths) - 1
    hidden = list(range(1, depth))

    by_layer: dict[int, dict] = {}
    for i, entry in enumerate(given):
        where = f"pathway #{i + 1}"
        spec = ck.merge(where, entry, get_section_defaults("pathway"))
        layer = spec["layer"]
        if layer == "all":
            layers = hidden
        elif ck.integer(where, "layer", layer) and layer in hidden:
            layers = [layer]
        else:
            if isinstance(layer, int) and not isinstance(layer, bool):
                ck.fail(f"[{where}] layer {layer} is not a hidden layer of a {depth}-layer network {hidden}")
            continue
        if not ck.choice(where, "kind", spec["kind"], PATHWAY_KINDS):
            continue
        for flag in ("update_q", "update_p", "use_targets"):
            ck.flag(where, flag, spec[flag])
        rank_ok = ck.integer(where, "rank", spec["rank"], 1, optional=True,
                             message=f"[{where}] rank must be >= 1, got {spec['rank']}")
        ck.integer(where, "source", spec["source"], optional=True)

        for l in layers:
            source = l + 1 if spec["source"] is None else spec["source"]
            if not isinstance(source, int):
                continue
            if source <= l:
                ck.fail(f"[{where}] source_layer {source} must exceed owning layer {l}")
                continue
            if source > depth:
                ck.fail(f"[{where}] source_layer {source} is past the output layer {depth}")
                continue
            kind = spec["kind"]
            full = min(widths[l], widths[source])
            if kind == "transpose" and source != l + 1:
                ck.fail(f"[{where}] transpose feedback at layer {l} needs source {l + 1}, got {source}")
            if kind == "normative" and source != l + 1:
                ck.fail(f"[{where}] normative feedback at layer {l} needs source {l + 1}, got {source}")
            if spec["use_targets"] is True and (kind != "local" or source != depth):
                ck.fail(f"[{where}] use_targets needs a local pathway sourced at the output layer {depth}")
            if rank_ok and spec["rank"] is not None and kind != "transpose" and spec["rank"] > full:
                ck.fail(f"[{where}] rank {spec['rank']} exceeds min(n_{l}, n_{source})={full}")
            if rank_swept and spec["rank"] is not None:
                ck.fail(f"[{where}] rank is swept by [sweep] ranks; leave it unset")
            by_layer[l] = {**spec, "layer": l, "source": source}
    return [by_layer[l] for l in sorted(by_layer)]


def _check_train(ck: _Checker, given, task: dict | None) -> dict:
    train = ck.merge("train", given, get_section_defaults("train"))
    ck.number("train", "eta", train["eta"], 0.0)
    ck.number("train", "weight_decay", train["weight_decay"], 0.0)
    ck.integer("train", "batch", train["batch"], 0)
    ck.integer("train", "steps", train["steps"], 0)
    ck.integer("train", "epochs", train["epochs"], 1, optional=True)
    ck.integer("train", "record_every", train["record_every"], 1)
    if ck.integer("train", "n_modes", train["n_modes"], 1, optional=True) and train["n_modes"] is not None \
            and task is not None and task["type"] == "linear":
        n, m = task.get("n"), task.get("m")
        if isinstance(n, int) and isinstance(m, int) and train["n_modes"] > min(n, m):
            ck.fail(f"[train] n_modes={train['n_modes']} exceeds min(n, m)={min(n, m)}")
    return train


def _check_feedback(ck: _Checker, given) -> dict:
    fb = ck.merge("feedback", given, get_section_defaults("feedback"))
    ck.number("feedback", "eta_fb", fb["eta_fb"], 0.0, strict=True)
    ck.number("feedback", "weight_decay", fb["weight_decay"], 0.0)
    ck.integer("feedback", "update_interval", fb["update_interval"], 1)
    ck.flag("feedback", "raw_oja", fb["raw_oja"])
    return fb


def _check_theory(ck: _Checker, given, task: dict, net: dict, pathways: list[dict], train: dict) -> dict:
    theory = ck.merge("theory", given, get_section_defaults("theory"))
    if theory["regime"] is not None:
        ck.choice("theory", "regime", theory["regime"], REGIMES)
    ck.number("theory", "tau", theory["tau"], 0.0, strict=True)
    ck.number("theory", "tau_b", theory["tau_b"], 0.0, strict=True)
    ck.flag("theory", "compare", theory["compare"])
    ck.number("theory", "tolerance", theory["tolerance"], 0.0, strict=True)
    ck.flag("theory", "check_step", theory["check_step"])

    widths = net.get("widths")
    if widths is not None and len(widths) != 3:
        ck.fail(f"linear-theory needs a two-layer network (three widths), got {widths}")
    if isinstance(net.get("activations"), list) and any(a != "linear" for a in net["activations"]):
        ck.fail("linear-theory needs linear activations")
    if net.get("loss") != "squared" or net.get("bias"):
        ck.fail("linear-theory needs squared loss and no bias")
    if widths is not None and len(widths) == 3 and not pathways:
        ck.fail("linear-theory needs a pathway at hidden layer 1")
    if pathways and theory["regime"] in REGIMES:
        expected = REGIME_FOR_KIND[pathways[0]["kind"]]
        if theory["regime"] != expected:
            ck.fail(f"[theory] regime '{theory['regime']}' does not match pathway kind "
                    f"'{pathways[0]['kind']}' (expected '{expected}')")
    if isinstance(train.get("eta"), (int, float)) and train["eta"] <= 0:
        ck.fail("linear-theory needs train.eta > 0 (it sets the integration step)")
    if train.get("weight_decay") not in (0, 0.0):
        ck.fail("linear-theory needs train.weight_decay = 0")
    if task.get("whiten") is not True:
        ck.fail("linear-theory needs task.whiten = true")
    if train.get("batch") != 0:
        ck.fail("linear-theory needs full-batch training (train.batch = 0)")
    if train.get("epochs") is not None:
        ck.fail("linear-theory counts train.steps; leave train.epochs unset")
    return theory


def _check_sweep(ck: _Checker, given) -> dict:
    sweep = ck.merge("sweep", given, get_section_defaults("sweep"))
    ranks = sweep["ranks"]
    if not isinstance(ranks, list) or not ranks:
        ck.fail(f"[sweep] ranks must be a non-empty list, got {ranks!r}")
    else:
        for r in ranks:
            if isinstance(r, str):
                ck.choice("sweep", "ranks", r, RANK_TOKENS)
            else:
                ck.integer("sweep", "ranks", r, 1, message=f"[sweep] rank must be >= 1, got {r}")
    ck.number("sweep", "target_fraction", sweep["target_fraction"], 0.0, strict=True)
    if isinstance(sweep["target_fraction"], (int, float)) and sweep["target_fraction"] > 1:
        ck.fail(f"[sweep] target_fraction must be <= 1, got {sweep['target_fraction']}")
    ck.flag("sweep", "baseline", sweep["baseline"])
    ck.choice("sweep", "reference", sweep["reference"], SWEEP_REFERENCES)
    if sweep["reference"] == "baseline" and sweep["baseline"] is False:
        ck.fail("[sweep] reference = \"baseline\" needs baseline = true")
    return sweep


# === ENTRY POINTS ===

def validate_config(raw: dict, source: str | None = None) -> ExperimentConfig:
    """Validated config from an already-parsed table; raises ConfigError listing every problem."""
    ck = _Checker()
    for key in raw:
        if key not in TOP_KEYS:
            ck.fail(f"unknown top-level key '{key}'")

    kind = raw.get("kind")
    if kind is None:
        ck.fail("missing required key 'kind'")
        kind = "linear-sim"
    elif not ck.choice("top", "kind", kind, EXPERIMENT_KINDS):
        kind = "linear-sim"

    top = get_section_defaults("top") | {k: raw[k] for k in ("seed", "repeats", "output_dir") if k in raw}
    ck.integer("top", "seed", top["seed"], 0)
    ck.integer("top", "repeats", top["repeats"], 1)
    if top["output_dir"] is not None and not isinstance(top["output_dir"], str):
        ck.fail(f"output_dir must be a string, got {top['output_dir']!r}")

    task = _check_task(ck, kind, raw.get("task"))
    net = _check_network(ck, raw.get("network"), task)
    pathways = _check_pathways(ck, raw.get("pathway"), net.get("widths"), rank_swept=kind == "rank-sweep")
    train = _check_train(ck, raw.get("train"), task)
    feedback = _check_feedback(ck, raw.get("feedback"))

    theory = {}
    if kind == "linear-theory":
        theory = _check_theory(ck, raw.get("theory"), task, net, pathways, train)
    elif "theory" in raw:
        ck.fail(f"[theory] only applies to linear-theory, not {kind}")

    sweep = {}
    if kind == "rank-sweep":
        sweep = _check_sweep(ck, raw.get("sweep"))
        if pathways and all(p["kind"] == "transpose" for p in pathways):
            ck.fail("rank-sweep needs at least one non-transpose pathway")
    elif "sweep" in raw:
        ck.fail(f"[sweep] only applies to rank-sweep, not {kind}")

    if ck.errors:
        raise ConfigError(ck.errors)
    return ExperimentConfig(
        kind=kind, seed=top["seed"], repeats=top["repeats"], output_dir=top["output_dir"],
        task=task, network=net, pathways=pathways, train=train, feedback=feedback,
        theory=theory, sweep=sweep, source=source,
    )


def parse_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError([f"config file not found: {path}"])
    try:
        with open(path, "rb") as f:
            raw = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError([f"{path}: {e}"]) from e
    return validate_config(raw, source=str(path))
