"""Strict JSON experiment configuration.

Unknown keys are rejected and all validation failures are reported at once,
so a typo never silently changes an experiment.
"""

from __future__ import annotations

import json

from .data import DEFAULT_THRESHOLD_GRID, SynthSpec
from .losses import LossWeights
from .models import ModelVariant
from .train import ProtocolConfig, TrainingSchedule


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


_SCHEDULE_KEYS = {
    "batch_size": int, "warmup_epochs": int, "train_epochs": int,
    "critic_steps": int, "pretrain_lr": float, "finetune_lr": float,
    "seed": int, "finetune_max_epochs": int, "patience": int,
    "unfreeze_epoch": int, "lr_decay": float, "oversample_minority": bool,
    "dae_noise": float,
}
_WEIGHT_KEYS = {"alpha": float, "beta": float, "lambda_gp": float,
                "lambda_gen": float}
_SYNTH_KEYS = {"n_per_domain": int, "dim": int, "shared_rank": int,
               "confounder_strength": float, "confounder_rank": int,
               "noise": float, "seed": int}
_MODEL_KEYS = {"embed_dim": int, "encoder_hidden": list, "decoder_hidden": list,
               "critic_hidden": list, "head_hidden": list}
_TOP_KEYS = {"variants", "schedule", "weights", "synth", "data", "model",
             "n_folds", "seed", "feature_k", "threshold_grid", "out_dir"}
_DATA_KEYS = {"cell_line_tsv": str, "tissue_tsv": str, "labels_csv": str,
              "orientation": str, "log_transform": bool, "drug": str}


def _check_section(section, allowed, problems, where):
    out = {}
    for key, value in section.items():
        if key not in allowed:
            problems.append(f"{where}: unknown key {key!r}")
            continue
        want = allowed[key]
        if want is float and isinstance(value, int):
            value = float(value)
        if want is list and isinstance(value, list):
            out[key] = value
            continue
        if not isinstance(value, want):
            problems.append(
                f"{where}.{key}: expected {want.__name__}, got {type(value).__name__}")
            continue
        out[key] = value
    return out


class ExperimentConfig:
    def __init__(self, variants, schedule, synth=None, data=None,
                 model=None, n_folds=10, seed=0, feature_k=None,
                 threshold_grid=None, out_dir="out"):
        self.variants = variants
        self.schedule = schedule
        self.synth = synth
        self.data = data
        self.model = model or {}
        self.n_folds = n_folds
        self.seed = seed
        self.feature_k = feature_k
        self.threshold_grid = threshold_grid or list(DEFAULT_THRESHOLD_GRID)
        self.out_dir = out_dir

    def protocol_config(self):
        kwargs = dict(self.model)
        for key in ("encoder_hidden", "decoder_hidden", "critic_hidden",
                    "head_hidden"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return ProtocolConfig(variants=self.variants, schedule=self.schedule,
                              n_folds=self.n_folds, seed=self.seed, **kwargs)


def parse_config(payload):
    """Validate a decoded JSON object, collecting every problem."""
    problems = []
    if not isinstance(payload, dict):
        raise ConfigError(["config root must be a JSON object"])
    for key in payload:
        if key not in _TOP_KEYS:
            problems.append(f"unknown key {key!r}")

    variants = payload.get("variants", [])
    if not isinstance(variants, list) or not variants:
        problems.append("variants: must be a non-empty list")
        variants = []
    else:
        for v in variants:
            try:
                ModelVariant(v)
            except ValueError:
                problems.append(f"variants: unknown variant {v!r}")

    sched_kwargs = _check_section(payload.get("schedule", {}), _SCHEDULE_KEYS,
                                  problems, "schedule")
    weight_kwargs = _check_section(payload.get("weights", {}), _WEIGHT_KEYS,
                                   problems, "weights")
    model_kwargs = _check_section(payload.get("model", {}), _MODEL_KEYS,
                                  problems, "model")

    synth = None
    if "synth" in payload:
        synth_kwargs = _check_section(payload["synth"], _SYNTH_KEYS,
                                      problems, "synth")
        if not problems:
            try:
                synth = SynthSpec(**synth_kwargs)
            except ValueError as exc:
                problems.append(f"synth: {exc}")

    data = None
    if "data" in payload:
        data = _check_section(payload["data"], _DATA_KEYS, problems, "data")

    n_folds = payload.get("n_folds", 10)
    seed = payload.get("seed", 0)
    for name, val in (("n_folds", n_folds), ("seed", seed)):
        if not isinstance(val, int):
            problems.append(f"{name}: expected int")
    grid = payload.get("threshold_grid")
    if grid is not None and (not isinstance(grid, list) or not grid):
        problems.append("threshold_grid: must be a non-empty list")

    if problems:
        raise ConfigError(problems)

    try:
        schedule = TrainingSchedule(weights=LossWeights(**weight_kwargs),
                                    **sched_kwargs)
    except ValueError as exc:
        raise ConfigError([f"schedule: {exc}"])

    return ExperimentConfig(
        variants=variants, schedule=schedule, synth=synth, data=data,
        model=model_kwargs, n_folds=n_folds, seed=seed,
        feature_k=payload.get("feature_k"), threshold_grid=grid,
        out_dir=payload.get("out_dir", "out"))


def load_config(path):
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except FileNotFoundError:
        raise ConfigError([f"config file not found: {path}"])
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: invalid JSON: {exc}"])
    return parse_config(payload)
