"""Hierarchical experiment configuration.

A YAML document with one section per module. Unset values fall back to
:data:`DEFAULTS`; task-dependent values (sample rate, overlap, input
layout) are derived from the task when left as ``null``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable

import yaml

from .augment import AugmentPlan
from .backbone import BackboneSpec
from .cotuning import MODES, TrainConfig
from .errors import ConfigError
from .features import SegmentSpec, SpectralConfig, config_hash
from .ingest import CYCLE_TASKS, RECORDING_TASKS, TASK_CLASSES

DEFAULTS: dict[str, Any] = {
    "task": "alsc4",
    "data": {
        "kind": "icbhi",            # icbhi | manifest
        "root": None,
        "manifest": None,
        "diagnosis_table": None,
        "split_file": None,
    },
    "split": {"scheme": "official_6040", "seed": 0, "validation_fraction": 0.2, "folds": None},
    "segment": {"length_s": 8.0, "overlap_fraction": None},
    "features": {
        "sample_rate_hz": None, "nfft": 512, "hop": 256, "n_mels": 50,
        "fmin_hz": 0.0, "fmax_hz": None, "window": "hann", "layout": None,
    },
    "speccorr": {"preset": "Calib-AllDev", "clip": [0.1, 10.0]},
    "augment": {"enabled": True, "flip": None, "vtlp": True, "seed": 0},
    "backbone": {"depth": 50, "pretrained": "imagenet", "weights_path": None, "base_width": 64},
    "stochnorm": {"p": 0.5, "alpha": 0.1, "eps": 1e-5},
    "train": {
        "mode": "cotuning", "lambda": 1.0, "lr_backbone": 0.001, "lr_heads": 0.01,
        "momentum": 0.9, "weight_decay": 0.0, "batch_size": 32, "epochs": 150,
    },
    "cotuning": {"relationship": "direct", "temperature": 1.0, "reverse_weight_decay": 1e-4},
    "experiment": {"n_runs": 5, "seed": 0, "output_dir": "runs", "modes": None, "depths": None},
}


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def apply_overrides(doc: dict, overrides: Iterable[str]) -> dict:
    """Apply ``section.key=value`` overrides; values are parsed as YAML scalars."""
    doc = copy.deepcopy(doc)
    for item in overrides or ():
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        node = doc
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot set {key}: {p} is not a section")
        node[parts[-1]] = yaml.safe_load(raw)
    return doc


@dataclass
class ExperimentConfig:
    doc: dict

    @classmethod
    def load(cls, path: str | Path | None = None, overrides: Iterable[str] = ()) -> "ExperimentConfig":
        user = {}
        if path is not None:
            try:
                user = yaml.safe_load(Path(path).read_text()) or {}
            except (OSError, yaml.YAMLError) as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(apply_overrides(user, overrides))

    @classmethod
    def from_dict(cls, user: dict) -> "ExperimentConfig":
        cfg = cls(deep_merge(DEFAULTS, user))
        cfg.validate()
        return cfg

    def __getitem__(self, section: str):
        return self.doc[section]

    @property
    def task(self) -> str:
        return self.doc["task"]

    @property
    def is_cycle_task(self) -> bool:
        return self.task in CYCLE_TASKS

    @property
    def n_classes(self) -> int:
        return len(TASK_CLASSES[self.task])

    def validate(self) -> None:
        if self.task not in CYCLE_TASKS + RECORDING_TASKS:
            raise ConfigError(f"unknown task {self.task!r}")
        if self.doc["train"]["mode"] not in MODES:
            raise ConfigError(f"unknown mode {self.doc['train']['mode']!r}")
        for m in self.doc["experiment"]["modes"] or ():
            if m not in MODES:
                raise ConfigError(f"unknown mode {m!r}")
        if self.doc["data"]["kind"] not in ("icbhi", "manifest"):
            raise ConfigError("data.kind must be icbhi or manifest")
        # building the typed views runs their own checks
        self.segment_spec()
        self.spectral_config()
        self.backbone_spec()

    @property
    def sample_rate(self) -> int:
        sr = self.doc["features"]["sample_rate_hz"]
        return int(sr) if sr else (16000 if self.is_cycle_task else 4000)

    @property
    def layout(self) -> str:
        return self.doc["features"]["layout"] or ("replicate3" if self.is_cycle_task else "rgb_upscaled2x")

    def segment_spec(self) -> SegmentSpec:
        s = self.doc["segment"]
        overlap = s["overlap_fraction"]
        if overlap is None:
            overlap = 0.0 if self.is_cycle_task else 0.5
        return SegmentSpec(float(s["length_s"]), float(overlap), self.sample_rate)

    def spectral_config(self) -> SpectralConfig:
        f = self.doc["features"]
        return SpectralConfig(self.sample_rate, int(f["nfft"]), int(f["hop"]), int(f["n_mels"]),
                              float(f["fmin_hz"]), f["fmax_hz"], window=f["window"])

    def backbone_spec(self, mode: str | None = None, depth: int | None = None, seed: int = 0) -> BackboneSpec:
        b, sn = self.doc["backbone"], self.doc["stochnorm"]
        mode = mode or self.doc["train"]["mode"]
        return BackboneSpec(
            depth=int(depth or b["depth"]),
            norm_kind="stochastic" if mode.endswith("stochnorm") else "batch",
            pretrained=b["pretrained"], weights_path=b["weights_path"], input_layout=self.layout,
            base_width=int(b["base_width"]), p=float(sn["p"]), alpha=float(sn["alpha"]),
            eps=float(sn["eps"]), seed=seed,
        )

    def train_config(self, mode: str | None = None, seed: int = 0) -> TrainConfig:
        t = self.doc["train"]
        return TrainConfig(mode=mode or t["mode"], lam=float(t["lambda"]),
                           lr_backbone=float(t["lr_backbone"]), lr_heads=float(t["lr_heads"]),
                           momentum=float(t["momentum"]), weight_decay=float(t["weight_decay"]),
                           batch_size=int(t["batch_size"]), epochs=int(t["epochs"]), seed=seed)

    def augment_enabled(self) -> bool:
        return bool(self.doc["augment"]["enabled"])

    def tune_plan(self, plan: AugmentPlan) -> AugmentPlan:
        if not self.doc["augment"]["vtlp"]:
            plan.vtlp = None
        return plan

    @property
    def modes(self) -> list[str]:
        return list(self.doc["experiment"]["modes"] or [self.doc["train"]["mode"]])

    @property
    def depths(self) -> list[int]:
        return [int(d) for d in (self.doc["experiment"]["depths"] or [self.doc["backbone"]["depth"]])]

    def digest(self) -> str:
        doc = copy.deepcopy(self.doc)
        doc.pop("experiment", None)
        return config_hash(doc)

    def dump(self) -> str:
        return yaml.safe_dump(self.doc, sort_keys=False)
