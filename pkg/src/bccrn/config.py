"""Resolved run configuration: YAML file + ``key=value`` overrides over defaults.

The file is a YAML mapping with the sections below; any section or key may be
omitted. Unknown keys and invalid values are all reported in one error.

.. code-block:: yaml

    seed: 0
    stft:  {fft_length: 512, window_length: 400, hop_length: 100, sample_rate: 16000}
    model: {preset: full}          # or toy; any ModelConfig field overrides the preset
    loss:  {alpha: 1, beta: 10, gamma: 1, kappa: 10, threshold_db: 20, split_hz: 1500}
    train: {learning_rate: 0.001, max_epochs: 100, patience: 3, batch_size: 8,
            lr_factor: 0.5, lr_wait: 2, milestones: []}
    data:  {utterances: 200, duration: 0.5, splits: {train: 140, valid: 20, test: 40},
            noise_types: [wgn, ssn], snr_train: [-7, 16], snr_test: [-6, 15],
            speech_dir: null, hrir_dir: null}
"""
from __future__ import annotations

import copy
import math
from pathlib import Path
from typing import Any

import yaml

from .dsp import StftConfig
from .engine import LrSchedule, TrainConfig
from .loss import LossWeights
from .model import ModelConfig


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid configuration:\n  " + "\n  ".join(problems))


DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "stft": {"fft_length": 512, "window_length": 400, "hop_length": 100, "sample_rate": 16000},
    "model": {
        "preset": "full",
        "encoder_channels": None,
        "kernel": None,
        "stride": None,
        "lstm_layers": None,
        "lstm_hidden": None,
        "bidirectional": None,
        "linear_features": None,
        "input_bins": None,
    },
    "loss": {"alpha": 1.0, "beta": 10.0, "gamma": 1.0, "kappa": 10.0, "threshold_db": 20.0, "split_hz": 1500.0},
    "train": {
        "learning_rate": 0.001,
        "max_epochs": 100,
        "patience": 3,
        "batch_size": 8,
        "lr_factor": 0.5,
        "lr_wait": 2,
        "milestones": [],
    },
    "data": {
        "utterances": 200,
        "duration": 0.5,
        "splits": {"train": 140, "valid": 20, "test": 40},
        "noise_types": ["wgn", "ssn"],
        "snr_train": [-7.0, 16.0],
        "snr_test": [-6.0, 15.0],
        "speech_dir": None,
        "hrir_dir": None,
    },
}


def _num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def _int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _pair(v) -> bool:
    return isinstance(v, (list, tuple)) and len(v) == 2 and all(_num(x) for x in v) and v[0] <= v[1]


def _positive(v) -> bool:
    return _num(v) and v > 0


_RULES = {
    "seed": (_int, "an integer"),
    "stft.fft_length": (lambda v: _int(v) and v > 0, "a positive integer"),
    "stft.window_length": (lambda v: _int(v) and v > 0, "a positive integer"),
    "stft.hop_length": (lambda v: _int(v) and v > 0, "a positive integer"),
    "stft.sample_rate": (lambda v: _int(v) and v > 0, "a positive integer"),
    "model.preset": (lambda v: v in ("full", "toy"), "'full' or 'toy'"),
    "loss.alpha": (_num, "a finite number"),
    "loss.beta": (_num, "a finite number"),
    "loss.gamma": (_num, "a finite number"),
    "loss.kappa": (_num, "a finite number"),
    "loss.threshold_db": (_positive, "a positive number"),
    "loss.split_hz": (_positive, "a positive number"),
    "train.learning_rate": (_positive, "a positive number"),
    "train.max_epochs": (lambda v: _int(v) and v >= 1, "an integer >= 1"),
    "train.patience": (lambda v: _int(v) and v >= 1, "an integer >= 1"),
    "train.batch_size": (lambda v: _int(v) and v >= 1, "an integer >= 1"),
    "train.lr_factor": (lambda v: _num(v) and 0 < v < 1, "a number in (0, 1)"),
    "train.lr_wait": (lambda v: _int(v) and v >= 1, "an integer >= 1"),
    "train.milestones": (lambda v: isinstance(v, list) and all(_int(x) and x >= 1 for x in v),
                         "a list of epoch numbers"),
    "data.utterances": (lambda v: _int(v) and v >= 1, "an integer >= 1"),
    "data.duration": (_positive, "a positive number"),
    "data.splits": (lambda v: isinstance(v, dict) and all(_int(x) and x >= 0 for x in v.values()),
                    "a mapping of split name to count"),
    "data.noise_types": (lambda v: isinstance(v, list) and v and all(
        isinstance(x, str) and (x in ("wgn", "ssn") or x.startswith("file:")) for x in v),
        "a non-empty list of wgn, ssn or file:<path>"),
    "data.snr_train": (_pair, "a [low, high] pair"),
    "data.snr_test": (_pair, "a [low, high] pair"),
    "data.speech_dir": (lambda v: v is None or isinstance(v, str), "a path or null"),
    "data.hrir_dir": (lambda v: v is None or isinstance(v, str), "a path or null"),
}


def _flatten(tree: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and key not in ("data.splits",):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _merge(base: dict, update: dict, problems: list[str], prefix: str = "") -> None:
    for k, v in update.items():
        key = f"{prefix}{k}"
        if k not in base:
            problems.append(f"{key}: unknown key")
            continue
        if isinstance(base[k], dict) and key != "data.splits":
            if not isinstance(v, dict):
                problems.append(f"{key}: expected a mapping")
                continue
            _merge(base[k], v, problems, key + ".")
        else:
            base[k] = v


def parse_override(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise ConfigError([f"override {text!r} is not key=value"])
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw) if raw.strip() else None


def _set(tree: dict, dotted: str, value, problems: list[str]) -> None:
    parts = dotted.split(".")
    node = tree
    for i, p in enumerate(parts[:-1]):
        if not isinstance(node.get(p), dict):
            problems.append(f"{'.'.join(parts[:i + 1])}: unknown section")
            return
        node = node[p]
    if parts[-1] not in node and ".".join(parts[:-1]) != "data.splits":
        problems.append(f"{dotted}: unknown key")
        return
    node[parts[-1]] = value


def load_config(path: str | Path | None = None, overrides: list[str] = ()) -> dict:
    """Fully resolved configuration tree; raises :class:`ConfigError` listing every problem."""
    tree = copy.deepcopy(DEFAULTS)
    problems: list[str] = []
    if path is not None:
        text = Path(path).read_text()
        try:
            doc = yaml.safe_load(text)
        except yaml.YAMLError as err:
            raise ConfigError([f"{path}: not valid YAML ({err})"]) from err
        if doc is None:
            doc = {}
        if not isinstance(doc, dict):
            raise ConfigError([f"{path}: top level must be a mapping"])
        _merge(tree, doc, problems)
    for text in overrides:
        key, value = parse_override(text)
        _set(tree, key, value, problems)
    for key, value in _flatten(tree).items():
        rule = _RULES.get(key)
        if rule is not None and not rule[0](value):
            problems.append(f"{key}: must be {rule[1]}, got {value!r}")
    if not problems:
        problems += _semantic_problems(tree)
    if problems:
        raise ConfigError(problems)
    return tree


def _semantic_problems(tree: dict) -> list[str]:
    problems = []
    try:
        stft_config(tree)
    except ValueError as err:
        problems.append(f"stft: {err}")
    try:
        model_config(tree)
    except (ValueError, TypeError) as err:
        problems.append(f"model: {err}")
    d = tree["data"]
    if sum(d["splits"].values()) > d["utterances"]:
        problems.append("data.splits: counts exceed data.utterances")
    return problems


def stft_config(tree: dict) -> StftConfig:
    return StftConfig(**tree["stft"])


def model_config(tree: dict) -> ModelConfig:
    m = dict(tree["model"])
    preset = m.pop("preset")
    fields = {k: v for k, v in m.items() if v is not None}
    fields.setdefault("seed", tree["seed"])
    if preset == "toy":
        return ModelConfig.toy(**fields)
    if "linear_features" not in fields and ("encoder_channels" in fields or "input_bins" in fields):
        ch = fields.get("encoder_channels", ModelConfig.encoder_channels)
        bins = fields.get("input_bins", ModelConfig.input_bins)
        stride = fields.get("stride", ModelConfig.stride)[0]
        fields["linear_features"] = ch[-1] * (bins // stride ** len(ch))
    return ModelConfig(**fields)


def loss_weights(tree: dict) -> LossWeights:
    l = tree["loss"]
    return LossWeights(l["alpha"], l["beta"], l["gamma"], l["kappa"])


def train_config(tree: dict) -> TrainConfig:
    t = tree["train"]
    return TrainConfig(
        learning_rate=float(t["learning_rate"]),
        schedule=LrSchedule(float(t["lr_factor"]), int(t["lr_wait"]), tuple(t["milestones"])),
        max_epochs=t["max_epochs"],
        patience=t["patience"],
        batch_size=t["batch_size"],
        loss_weights=loss_weights(tree),
        seed=tree["seed"],
        threshold_db=float(tree["loss"]["threshold_db"]),
        split_hz=float(tree["loss"]["split_hz"]),
    )


def dump_config(tree: dict) -> str:
    return yaml.safe_dump(tree, sort_keys=True)
