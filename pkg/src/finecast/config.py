"""Run configuration: one JSON file drives a full experiment.

A RunConfig names the grid, the two synthetic-system presets, the date
ranges (train/validation on the source system; train/validation/test on
the target system), the model architecture, the pretraining and
fine-tuning curricula, and sensitivity/evaluation/search settings.

Date ranges within a system must be pairwise disjoint. Every random
choice in a run flows from the single root seed through named
substreams (`subseed`), so one seed reproduces an entire experiment.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from datetime import datetime

from .emulator import ModelConfig
from .errors import ConfigError
from .toydata import (
    SystemSpec,
    canonical_digest,
    default_system_a,
    default_system_b,
    parse_time,
)
from .trainer import CurriculumSpec, StageSpec, default_curriculum, derive_seed

SYSTEM_PRESETS = {
    "system-a": default_system_a,
    "system-b": default_system_b,
}

RANGE_KEYS = ("train_a", "val_a", "train_b", "val_b", "test_b")
_SECTIONS = ("out_dir", "seed", "grid", "systems", "dates", "model",
             "pretrain", "finetune", "sensitivity", "evaluate", "lr_search",
             "workers", "archives")


def _parse_range(name: str, pair) -> tuple[datetime, datetime]:
    if not isinstance(pair, (list, tuple)) or len(pair) != 2:
        raise ConfigError(f"date range {name!r} must be a [start, end] pair")
    try:
        start, end = parse_time(pair[0]), parse_time(pair[1])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"date range {name!r}: {exc}") from None
    if start >= end:
        raise ConfigError(f"date range {name!r} is empty or reversed")
    return start, end


def _check_disjoint(ranges: dict, keys) -> None:
    keys = list(keys)
    for i, a in enumerate(keys):
        for b in keys[i + 1:]:
            (a0, a1), (b0, b1) = ranges[a], ranges[b]
            if a0 < b1 and b0 < a1:
                raise ConfigError(f"date ranges {a!r} and {b!r} overlap")


@dataclass(frozen=True)
class SensitivitySettings:
    """Perturbation-response run shape for the level-weight derivation."""

    n_dates: int = 8
    lead_days: int = 3
    eps_mode: str = "inverse"
    resamples: int = 1000

    def __post_init__(self) -> None:
        if self.n_dates < 2:
            raise ConfigError("sensitivity n_dates must be >= 2")
        if self.lead_days < 1:
            raise ConfigError("sensitivity lead_days must be >= 1")
        if self.resamples < 100:
            raise ConfigError("sensitivity resamples must be >= 100")

    def to_dict(self) -> dict:
        return {"n_dates": self.n_dates, "lead_days": self.lead_days,
                "eps_mode": self.eps_mode, "resamples": self.resamples}


@dataclass(frozen=True)
class EvaluationSettings:
    """Held-out-test verification shape: leads, sample size, spectra target."""

    lead_hours: tuple = (6, 24, 48, 72)
    n_inits: int = 8
    spectra_variable: str = "mass"
    spectra_level_hpa: float = 500.0
    spectra_lead_hours: int = 72
    band_fraction: float = 0.1
    lmax: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "lead_hours",
                           tuple(int(h) for h in self.lead_hours))
        if not self.lead_hours or any(h < 6 or h % 6 for h in self.lead_hours):
            raise ConfigError("lead_hours must be positive multiples of 6")
        if self.n_inits < 1:
            raise ConfigError("n_inits must be >= 1")
        if self.spectra_lead_hours not in self.lead_hours:
            raise ConfigError("spectra_lead_hours must be one of lead_hours")

    def to_dict(self) -> dict:
        return {"lead_hours": list(self.lead_hours), "n_inits": self.n_inits,
                "spectra_variable": self.spectra_variable,
                "spectra_level_hpa": self.spectra_level_hpa,
                "spectra_lead_hours": self.spectra_lead_hours,
                "band_fraction": self.band_fraction, "lmax": self.lmax}


@dataclass(frozen=True)
class LrSearchSettings:
    """Geometric candidate grid and probe budget for rate selection."""

    candidates: tuple = tuple(float(f"{m}e-{d}") for d in (5, 4, 3, 2)
                              for m in (1, 3))
    probe_samples: int = 32
    n_val: int = 8

    def __post_init__(self) -> None:
        object.__setattr__(self, "candidates",
                           tuple(float(c) for c in self.candidates))
        if len(self.candidates) < 2:
            raise ConfigError("lr_search needs at least 2 candidate rates")
        if any(c <= 0 for c in self.candidates):
            raise ConfigError("lr_search candidates must be positive")
        if self.probe_samples < 1 or self.n_val < 1:
            raise ConfigError("lr_search budgets must be >= 1")

    def to_dict(self) -> dict:
        return {"candidates": list(self.candidates),
                "probe_samples": self.probe_samples, "n_val": self.n_val}


def scaled_lr_curriculum(divisor: int, lr_scale: float,
                         batch_size: int = 4, val_n_dates: int = 8,
                         val_seed: int = 0) -> CurriculumSpec:
    """Reference fine-tuning schedule with budgets / divisor, rates * scale.

    Budget ratios and the stage shape stay fixed; only the absolute
    sample counts and peak rates move.
    """
    base = default_curriculum(divisor=divisor, batch_size=batch_size,
                              val_n_dates=val_n_dates, val_seed=val_seed)
    stages = tuple(replace(s, peak_lr=s.peak_lr * lr_scale)
                   for s in base.stages)
    return replace(base, stages=stages)


@dataclass(frozen=True)
class RunConfig:
    """Everything a pipeline run needs, validated at construction."""

    out_dir: str
    seed: int
    nlat: int
    nlon: int
    ranges: dict
    system_a: str = "system-a"
    system_b: str = "system-b"
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: CurriculumSpec = None
    finetune: CurriculumSpec = None
    sensitivity: SensitivitySettings = field(default_factory=SensitivitySettings)
    evaluate: EvaluationSettings = field(default_factory=EvaluationSettings)
    lr_search: LrSearchSettings = field(default_factory=LrSearchSettings)
    workers: int = 1
    archives: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.out_dir:
            raise ConfigError("out_dir must be a non-empty path")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        for name in (self.system_a, self.system_b):
            if name not in SYSTEM_PRESETS:
                raise ConfigError(
                    f"unknown system preset {name!r}; "
                    f"known: {sorted(SYSTEM_PRESETS)}")
        missing = [k for k in RANGE_KEYS if k not in self.ranges]
        if missing:
            raise ConfigError(f"missing date ranges: {missing}")
        _check_disjoint(self.ranges, ("train_a", "val_a"))
        _check_disjoint(self.ranges, ("train_b", "val_b", "test_b"))
        if self.pretrain is None or self.finetune is None:
            raise ConfigError("pretrain and finetune curricula are required")
        for key, path in self.archives.items():
            if key not in ("a", "b"):
                raise ConfigError(f"unknown archive key {key!r}; use 'a'/'b'")
            # relative paths are resolved later against the config file's dir
            if os.path.isabs(path) and not os.path.exists(path):
                raise ConfigError(f"archive file for {key!r} missing: {path}")

    def range(self, name: str) -> tuple[datetime, datetime]:
        return self.ranges[name]

    def span(self, system: str) -> tuple[datetime, datetime]:
        """Overall [min start, max end) a system's archive must cover."""
        keys = [k for k in RANGE_KEYS if k.endswith(f"_{system}")]
        return (min(self.ranges[k][0] for k in keys),
                max(self.ranges[k][1] for k in keys))

    def system_spec(self, system: str) -> SystemSpec:
        preset = {"a": self.system_a, "b": self.system_b}[system]
        return SYSTEM_PRESETS[preset](nlat=self.nlat, nlon=self.nlon)

    def subseed(self, label: str) -> int:
        return derive_seed(self.seed, label)

    def to_dict(self) -> dict:
        return {
            "out_dir": self.out_dir,
            "seed": self.seed,
            "grid": {"nlat": self.nlat, "nlon": self.nlon},
            "systems": {"a": self.system_a, "b": self.system_b},
            "dates": {k: [v[0].isoformat(), v[1].isoformat()]
                      for k, v in self.ranges.items()},
            "model": self.model.to_dict(),
            "pretrain": self.pretrain.to_dict(),
            "finetune": self.finetune.to_dict(),
            "sensitivity": self.sensitivity.to_dict(),
            "evaluate": self.evaluate.to_dict(),
            "lr_search": self.lr_search.to_dict(),
            "workers": self.workers,
            "archives": dict(self.archives),
        }

    @property
    def digest(self) -> str:
        return canonical_digest(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = sorted(set(d) - set(_SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        for key in ("out_dir", "seed", "grid", "dates", "pretrain", "finetune"):
            if key not in d:
                raise ConfigError(f"config is missing required key {key!r}")
        grid = d["grid"]
        if not isinstance(grid, dict) or set(grid) != {"nlat", "nlon"}:
            raise ConfigError("grid must be {'nlat': ..., 'nlon': ...}")
        systems = d.get("systems", {})
        ranges = {k: _parse_range(k, v) for k, v in d["dates"].items()}
        try:
            return cls(
                out_dir=d["out_dir"],
                seed=int(d["seed"]),
                nlat=int(grid["nlat"]),
                nlon=int(grid["nlon"]),
                ranges=ranges,
                system_a=systems.get("a", "system-a"),
                system_b=systems.get("b", "system-b"),
                model=ModelConfig.from_dict(d.get("model", {})),
                pretrain=CurriculumSpec.from_dict(d["pretrain"]),
                finetune=CurriculumSpec.from_dict(d["finetune"]),
                sensitivity=SensitivitySettings(**d.get("sensitivity", {})),
                evaluate=EvaluationSettings(**d.get("evaluate", {})),
                lr_search=LrSearchSettings(**d.get("lr_search", {})),
                workers=int(d.get("workers", 1)),
                archives=dict(d.get("archives", {})),
            )
        except TypeError as exc:
            raise ConfigError(f"bad config section: {exc}") from None

    def save(self, path: str) -> None:
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)


def load_config(path: str) -> RunConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") \
                from None
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    cfg = RunConfig.from_dict(data)
    # archive overrides are resolved against the config file's directory
    base = os.path.dirname(os.path.abspath(path))
    if cfg.archives:
        resolved = {k: v if os.path.isabs(v) else os.path.join(base, v)
                    for k, v in cfg.archives.items()}
        for key, p in resolved.items():
            if not os.path.exists(p):
                raise ConfigError(f"archive file for {key!r} missing: {p}")
        cfg = replace(cfg, archives=resolved)
    return cfg


def resolve_out_dir(cfg: RunConfig) -> str:
    os.makedirs(cfg.out_dir, exist_ok=True)
    os.makedirs(os.path.join(cfg.out_dir, "figures"), exist_ok=True)
    return cfg.out_dir


def pretrain_curriculum(divisor: int, batch_size: int = 4,
                        val_n_dates: int = 8, val_seed: int = 0) -> CurriculumSpec:
    """From-scratch source-system schedule: pressure weights throughout.

    Unlike the fine-tuning table this is not anchored to published
    budgets; rates are sized for the desk-scale emulator.
    """
    if divisor < 1:
        raise ConfigError("divisor must be >= 1")
    table = (("pre-single", 1, 3e-3, 81920),
             ("pre-steps2", 2, 1e-3, 20480),
             ("pre-steps4", 4, 3e-4, 10240))
    stages = []
    for name, n_steps, peak, budget in table:
        scaled = max(batch_size, (budget // divisor // batch_size) * batch_size)
        stages.append(StageSpec(name=name, n_steps=n_steps, peak_lr=peak,
                                n_samples=scaled, batch_size=batch_size,
                                weight_scheme="pressure"))
    return CurriculumSpec(stages=tuple(stages), val_n_dates=val_n_dates,
                          val_seed=val_seed)


def demo_config(out_dir: str, divisor: int = 512, lr_scale: float = 200.0,
                seed: int = 7, workers: int = 1) -> RunConfig:
    """A small but complete run on the default 8x16 systems.

    divisor shrinks every stage budget; lr_scale raises the reference
    fine-tuning peak rates to magnitudes that move the desk-scale
    emulator (budget ratios and stage shapes stay fixed).
    """
    pretrain = pretrain_curriculum(divisor, val_n_dates=6)
    finetune = scaled_lr_curriculum(divisor, lr_scale, val_n_dates=6)
    return RunConfig(
        out_dir=out_dir,
        seed=seed,
        nlat=8,
        nlon=16,
        ranges={
            "train_a": _parse_range("train_a", ["2000-01-01T00", "2001-01-01T00"]),
            "val_a": _parse_range("val_a", ["2001-01-01T00", "2001-04-01T00"]),
            "train_b": _parse_range("train_b", ["2010-01-01T00", "2011-01-01T00"]),
            "val_b": _parse_range("val_b", ["2011-01-01T00", "2011-04-01T00"]),
            "test_b": _parse_range("test_b", ["2011-04-01T00", "2011-07-01T00"]),
        },
        model=ModelConfig(hidden_width=16),
        pretrain=pretrain,
        finetune=finetune,
        sensitivity=SensitivitySettings(n_dates=6, lead_days=2, resamples=400),
        evaluate=EvaluationSettings(n_inits=6),
        lr_search=LrSearchSettings(probe_samples=16, n_val=4),
        workers=workers,
    )
