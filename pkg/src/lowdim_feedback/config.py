"""Shared configuration for all modules.

Section defaults for experiment files live here; the runner fills every
missing key from these tables and echoes the result into the manifest.
"""

import os

from dotenv import load_dotenv

load_dotenv()

OUTPUT_ROOT = os.environ.get("LDFA_OUTPUT_ROOT", "runs")

EXPERIMENT_KINDS = ["linear-sim", "linear-theory", "mlp-train", "rank-sweep", "flops-report"]

# === SECTION DEFAULTS ===

SECTIONS = {
    "top": {
        "seed": 0,
        "repeats": 1,
        "output_dir": None,  # relative to OUTPUT_ROOT; defaults to the config file stem
    },
    "linear-task": {
        "type": "linear",
        "n": 128,
        "m": 64,
        "d": 8,
        "p": None,  # None -> 100 * n
        "noise_std": 1.0,
        "whiten": True,
        "seed": None,  # None -> derived from the run seed
    },
    "class-task": {
        "type": "class",
        "n": 64,
        "d": 8,
        "per_class": 200,
        "spread": 0.5,
        "test_per_class": 0,
        "antipodal": False,  # each class at +mean and -mean
        "seed": None,
    },
    "network": {
        "widths": [128, 64, 64],
        "activations": None,  # None -> all linear
        "loss": "squared",
        "bias": False,
        "init": "gaussian",
        "init_std": 1e-3,
    },
    "pathway": {
        "layer": "all",
        "kind": "transpose",
        "rank": None,  # None -> full rank for the edge
        "source": None,  # None -> layer + 1
        "update_q": False,
        "update_p": True,
        "use_targets": False,
    },
    "train": {
        "eta": 1e-3,
        "weight_decay": 0.0,
        "batch": 0,  # 0 -> full batch
        "steps": 2000,
        "epochs": None,
        "record_every": 10,
        "n_modes": None,  # None -> task rank d
    },
    "feedback": {
        "eta_fb": 1e-3,
        "weight_decay": 0.0,
        "update_interval": 1,
        "raw_oja": False,
    },
    "theory": {
        # drive, Q/P flags and feedback decay follow the hidden pathway
        "regime": None,  # None -> derived from the pathway kind
        "tau": 1.0,
        "tau_b": 1.0,  # sets feedback.eta_fb = train.eta * tau / tau_b
        "compare": True,
        "tolerance": 0.05,
        "check_step": True,  # rerun the integration at dt/2 and report the difference
    },
    "sweep": {
        "ranks": ["quarter", "half", "d", "2d", "4d", "full"],
        "target_fraction": 0.9,
        "reference": "baseline",  # accuracy flops_to_accuracy aims at: "baseline" or "own" final
        "baseline": True,  # also train transpose pathways as the accuracy reference
    },
}


def get_section_defaults(section: str) -> dict:
    """Copy of the default table for one config section."""
    if section not in SECTIONS:
        raise ValueError(f"Unknown config section: {section}. Available: {list(SECTIONS.keys())}")
    return {
        key: list(value) if isinstance(value, list) else value
        for key, value in SECTIONS[section].items()
    }


def get_output_root(override: str | None = None) -> str:
    """Output root: CLI flag, else LDFA_OUTPUT_ROOT, else ./runs."""
    return override or os.environ.get("LDFA_OUTPUT_ROOT", OUTPUT_ROOT)
