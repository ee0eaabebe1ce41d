"""Flat, typed run configuration.

A config file is a TOML document of top-level ``key = value`` pairs; no
tables. Every key must appear in :data:`SCHEMA`, unknown keys are an error.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError


@dataclass(frozen=True)
class Key:
    type: type
    default: Any
    doc: str
    item_type: type | None = None  # for lists


SCHEMA: dict[str, Key] = {
    # locations
    "data_root": Key(str, "", "cohort root: one directory per patient plus visits.csv"),
    "workdir": Key(str, "work", "directory for every pipeline artifact"),
    "seed": Key(int, 42, "master seed: fold assignment and any other unseeded randomness"),
    # study design
    "stages": Key(list, ["first", "second"], "follow-up stages to run (first, second)", str),
    "families": Key(list, [], "model families to sweep; empty means all eleven", str),
    "scale": Key(str, "TOY", "model scale, PAPER or TOY"),
    "seeds": Key(list, [21, 33, 42], "training seeds", int),
    "folds": Key(int, 5, "cross-validation folds"),
    "epochs": Key(int, 10, "training epochs per unit"),
    "learning_rate": Key(float, 1e-4, "Adam learning rate"),
    "batch_sizes": Key(list, [], "override the per-family batch grid; empty uses the benchmark grid", int),
    "weights_dir": Key(str, "", "directory with <family>.pt backbone weights for PAPER-scale pretrained families"),
    # preprocessing
    "target_dims": Key(int, 0, "cubic prep grid size; 0 picks the model input size (128 PAPER, 32 TOY)"),
    "interpolation": Key(str, "trilinear", "resampling interpolation: trilinear or nearest"),
    "registration_backend": Key(str, "identity", "rigid registration: identity or plugin"),
    "atlas_path": Key(str, "", "registration target volume (NIfTI)"),
    "plugin_command": Key(str, "", "external registration command with {moving} {fixed} {out_transform}"),
    "closing_radius": Key(int, 2, "skull-strip closing radius in voxels"),
    # quality control
    "max_inplane_spacing": Key(float, 2.0, "QC: largest in-plane spacing (mm)"),
    "max_slice_thickness": Key(float, 6.5, "QC: largest slice thickness (mm)"),
    "max_anisotropy_ratio": Key(float, 6.0, "QC: largest spacing ratio"),
    "min_slices": Key(int, 20, "QC: fewest slices along z"),
    "qc_previews": Key(bool, False, "write a PNG preview per passing series"),
    # balancing and augmentation
    "balance": Key(bool, True, "latent-SMOTE oversampling of training splits"),
    "ae_epochs": Key(int, 40, "autoencoder training epochs"),
    "smote_k": Key(int, 5, "SMOTE nearest neighbours"),
    "smote_cap": Key(int, 0, "per-class count cap after oversampling; 0 means the majority count"),
    "augment": Key(bool, True, "augment training samples every epoch"),
    "aug_rotation_deg": Key(float, 5.0, "largest rotation per axis (degrees)"),
    "aug_translation_vox": Key(int, 4, "largest translation per axis (voxels)"),
    "aug_noise_sigma": Key(float, 0.02, "Gaussian noise SD in normalised units"),
    "aug_probability": Key(float, 0.5, "probability of applying each perturbation"),
    # sweep and report
    "max_units": Key(int, 0, "stop after this many new units (0 = no limit); rerun to resume"),
    "timing_batches": Key(int, 20, "timed inference batches per profile"),
    "gallery_per_class": Key(int, 2, "gallery examples per predicted class"),
}


def _coerce(name: str, key: Key, value: Any) -> Any:
    def one(t, v):
        if t is bool:
            if isinstance(v, bool):
                return v
            if isinstance(v, str) and v.lower() in ("true", "false", "1", "0", "yes", "no"):
                return v.lower() in ("true", "1", "yes")
            raise ConfigError(f"config key {name!r}: expected true/false, got {v!r}")
        if t is int:
            if isinstance(v, bool):
                raise ConfigError(f"config key {name!r}: expected an integer, got {v!r}")
            if isinstance(v, int):
                return v
            if isinstance(v, str):
                try:
                    return int(v)
                except ValueError:
                    pass
            raise ConfigError(f"config key {name!r}: expected an integer, got {v!r}")
        if t is float:
            if isinstance(v, bool):
                raise ConfigError(f"config key {name!r}: expected a number, got {v!r}")
            try:
                return float(v)
            except (TypeError, ValueError):
                raise ConfigError(f"config key {name!r}: expected a number, got {v!r}") from None
        if t is str:
            if not isinstance(v, (str, int, float)) or isinstance(v, bool):
                raise ConfigError(f"config key {name!r}: expected a string, got {v!r}")
            return str(v)
        raise AssertionError(t)

    if key.type is list:
        if isinstance(value, str):
            value = [p for p in (s.strip() for s in value.split(",")) if p]
        if not isinstance(value, list):
            raise ConfigError(f"config key {name!r}: expected a list, got {value!r}")
        return [one(key.item_type, v) for v in value]
    return one(key.type, value)


@dataclass(frozen=True)
class RunConfig:
    values: dict[str, Any] = field(default_factory=dict)
    source: str | None = None

    def __post_init__(self):
        merged = {k: (list(v.default) if isinstance(v.default, list) else v.default) for k, v in SCHEMA.items()}
        for k, v in self.values.items():
            if k not in SCHEMA:
                raise ConfigError(f"unknown config key {k!r}{_suggest(k)}")
            merged[k] = _coerce(k, SCHEMA[k], v)
        _validate(merged)
        object.__setattr__(self, "values", merged)

    def __getattr__(self, name: str) -> Any:
        values = self.__dict__.get("values", {})
        if name in values:
            return values[name]
        raise AttributeError(name)

    def with_overrides(self, overrides: dict[str, Any]) -> "RunConfig":
        vals = dict(self.values)
        vals.update(overrides)
        return RunConfig(vals, self.source)

    def to_dict(self) -> dict:
        return dict(sorted(self.values.items()))

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def resolve(self, path: str) -> Path:
        """Paths in a config file are relative to the file's directory."""
        p = Path(path)
        if p.is_absolute() or self.source is None:
            return p
        return Path(self.source).parent / p


def _suggest(key: str) -> str:
    import difflib

    close = difflib.get_close_matches(key, list(SCHEMA), n=1)
    return f" (did you mean {close[0]!r}?)" if close else ""


def _validate(v: dict) -> None:
    if v["scale"] not in ("PAPER", "TOY"):
        raise ConfigError("scale must be PAPER or TOY")
    if v["folds"] < 2:
        raise ConfigError("folds must be >= 2")
    if v["epochs"] < 1:
        raise ConfigError("epochs must be >= 1")
    if not v["seeds"]:
        raise ConfigError("seeds must not be empty")
    if any(b < 1 for b in v["batch_sizes"]):
        raise ConfigError("batch sizes must be positive")
    if v["target_dims"] and v["target_dims"] < 8:
        raise ConfigError("target_dims must be 0 or >= 8")
    if not 0 <= v["aug_probability"] <= 1:
        raise ConfigError("aug_probability must lie in [0, 1]")
    if v["learning_rate"] < 0:
        raise ConfigError("learning_rate must be nonnegative")


def load_config(path: str | Path | None, overrides: dict[str, Any] | None = None) -> RunConfig:
    values: dict[str, Any] = {}
    source = None
    if path is not None:
        path = Path(path)
        try:
            with open(path, "rb") as fh:
                values = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
        for k, v in values.items():
            if isinstance(v, dict):
                raise ConfigError(f"config must be flat; found table [{k}]")
        source = str(path)
    values.update(overrides or {})
    return RunConfig(values, source)


def schema_markdown() -> str:
    lines = ["| key | type | default | meaning |", "|---|---|---|---|"]
    for k, key in SCHEMA.items():
        t = f"list[{key.item_type.__name__}]" if key.type is list else key.type.__name__
        lines.append(f"| `{k}` | {t} | `{json.dumps(key.default)}` | {key.doc} |")
    return "\n".join(lines)


__all__ = ["SCHEMA", "RunConfig", "load_config", "schema_markdown"]
