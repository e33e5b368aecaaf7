"""Staged curriculum training for the stencil emulator.

A curriculum is an ordered list of stages, each with its own forecast
length, peak learning rate, sample budget, and level-weight scheme.
Stages run single-step first and extend the horizon afterwards; the
longest stages can split their window into sub-segments whose boundary
states carry no gradient (split-horizon backprop), trading gradient
fidelity for memory exactly like multi-stage pipelines do.

Every stage is bit-deterministic given (input state, stage spec, data,
seed): sample dates are pre-drawn, per-sample gradients are keyed by
batch position and merged with a fixed reduction tree, and the optimizer
step is serialized.
"""

from __future__ import annotations

import csv
import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import timedelta

import numpy as np

from .emulator import (
    STEP_HOURS,
    ModelConfig,
    backprop_rollout,
    load_checkpoint,
    make_context,
    pack_state,
    rollout_loss,
    save_checkpoint,
)
from .errors import (
    ConfigError,
    DataGapError,
    NonFiniteError,
    ShapeMismatchError,
    TrainingDivergedError,
)
from .loss import LossSpec, slot_coefficients
from .optim import AdamState, LRSchedule, adamw_step, aggregate_gradients
from .toydata import (
    AnalysisArchive,
    NormalizationStats,
    eligible_window_times,
    sample_window,
)

DEFAULT_BATCH_SIZE = 4
VALIDATION_FRACTION = 16  # validate every 1/16 of the stage's batches
FIXED_VAL_STEPS = 12      # fixed-horizon metric comparable across stages


def derive_seed(root_seed: int, label: str) -> int:
    """Independent, reproducible substream seed for a named purpose."""
    digest = hashlib.sha256(f"{root_seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


@dataclass(frozen=True)
class StageSpec:
    """One curriculum stage: horizon, budget, rate, and weighting."""

    name: str
    n_steps: int
    peak_lr: float
    n_samples: int
    batch_size: int = DEFAULT_BATCH_SIZE
    weight_scheme: str = "pressure"
    split_points: tuple[int, ...] = ()
    stats_id: str = "target"

    def __post_init__(self) -> None:
        if self.n_steps < 1:
            raise ConfigError(f"stage {self.name!r}: n_steps must be >= 1")
        if self.peak_lr <= 0.0:
            raise ConfigError(f"stage {self.name!r}: peak_lr must be positive")
        if self.batch_size < 1:
            raise ConfigError(f"stage {self.name!r}: batch_size must be >= 1")
        if self.n_samples < 0 or self.n_samples % self.batch_size != 0:
            raise ConfigError(
                f"stage {self.name!r}: sample budget {self.n_samples} is not "
                f"a multiple of batch size {self.batch_size}")
        if self.split_points:
            if any(s < 1 for s in self.split_points):
                raise ConfigError(f"stage {self.name!r}: split segments must be >= 1")
            if sum(self.split_points) != self.n_steps:
                raise ConfigError(
                    f"stage {self.name!r}: split points {self.split_points} "
                    f"do not sum to n_steps {self.n_steps}")

    @property
    def n_batches(self) -> int:
        return self.n_samples // self.batch_size

    def to_dict(self) -> dict:
        return {"name": self.name, "n_steps": self.n_steps,
                "peak_lr": self.peak_lr, "n_samples": self.n_samples,
                "batch_size": self.batch_size,
                "weight_scheme": self.weight_scheme,
                "split_points": list(self.split_points),
                "stats_id": self.stats_id}

    @classmethod
    def from_dict(cls, d: dict) -> "StageSpec":
        d = dict(d)
        d["split_points"] = tuple(d.get("split_points", ()))
        return cls(**d)


@dataclass(frozen=True)
class CurriculumSpec:
    """Ordered stages plus the validation sampling policy."""

    stages: tuple[StageSpec, ...]
    val_n_dates: int = 64
    val_seed: int = 0
    train_archive: str = "train"
    val_archive: str = "val"

    def __post_init__(self) -> None:
        names = [s.name for s in self.stages]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate stage names in curriculum")
        if self.val_n_dates < 1:
            raise ConfigError("val_n_dates must be >= 1")
        # once the horizon grows past one step it must not shrink again
        prev = None
        for s in self.stages:
            if prev is not None and prev > 1 and s.n_steps < prev:
                raise ConfigError(
                    f"stage {s.name!r} shortens the horizon ({s.n_steps} after "
                    f"{prev}); multi-step stages must be nondecreasing")
            prev = s.n_steps

    def to_dict(self) -> dict:
        return {"stages": [s.to_dict() for s in self.stages],
                "val_n_dates": self.val_n_dates, "val_seed": self.val_seed,
                "train_archive": self.train_archive,
                "val_archive": self.val_archive}

    @classmethod
    def from_dict(cls, d: dict) -> "CurriculumSpec":
        d = dict(d)
        d["stages"] = tuple(StageSpec.from_dict(s) for s in d["stages"])
        return cls(**d)


def default_curriculum(divisor: int = 1, batch_size: int = DEFAULT_BATCH_SIZE,
                       val_n_dates: int = 64, val_seed: int = 0) -> CurriculumSpec:
    """Six-stage reference schedule, budgets scaled down by `divisor`.

    The single-step renormalization stage keeps pressure level weights;
    every later stage uses the sensitivity-derived scheme.
    """
    if divisor < 1:
        raise ConfigError("divisor must be >= 1")
    table = (
        ("renorm", 1, 1.25e-4, 10240, "pressure", ()),
        ("single", 1, 3.75e-7, 81920, "sensitivity", ()),
        ("steps2", 2, 1.25e-6, 20480, "sensitivity", ()),
        ("steps4", 4, 1.25e-6, 10240, "sensitivity", ()),
        ("steps8", 8, 1.25e-7, 10240, "sensitivity", ()),
        ("steps12", 12, 3.75e-7, 10240, "sensitivity", (4, 8)),
    )
    stages = []
    for name, n_steps, peak, budget, scheme, split in table:
        scaled = (budget // divisor // batch_size) * batch_size
        scaled = max(batch_size, scaled)
        stages.append(StageSpec(name=name, n_steps=n_steps, peak_lr=peak,
                                n_samples=scaled, batch_size=batch_size,
                                weight_scheme=scheme, split_points=split))
    return CurriculumSpec(stages=tuple(stages), val_n_dates=val_n_dates,
                          val_seed=val_seed)


@dataclass(frozen=True)
class ModelState:
    """In-memory checkpoint: parameters plus everything they depend on."""

    params: dict
    config: ModelConfig
    stats: NormalizationStats
    provenance: dict = field(default_factory=dict)

    def completed_stages(self) -> list[str]:
        return list(self.provenance.get("completed_stages", []))

    def save(self, path: str) -> None:
        save_checkpoint(path, self.params, self.config, self.stats,
                        provenance=self.provenance)

    @classmethod
    def load(cls, path: str, stats: NormalizationStats) -> "ModelState":
        params, config, meta = load_checkpoint(
            path, expect_stats_digest=stats.digest)
        return cls(params=params, config=config, stats=stats,
                   provenance=meta["provenance"])


@dataclass(frozen=True)
class TrainingData:
    """Archives plus the named stats/weights a curriculum refers to."""

    train: AnalysisArchive
    val: AnalysisArchive
    stats: dict
    weights: dict

    def stats_for(self, stats_id: str) -> NormalizationStats:
        if stats_id not in self.stats:
            raise ConfigError(f"unknown normalization stats id {stats_id!r}")
        return self.stats[stats_id]

    def weights_for(self, scheme: str):
        if scheme not in self.weights:
            raise ConfigError(f"unknown level-weight scheme {scheme!r}")
        return self.weights[scheme]


@dataclass
class MetricsLog:
    """Append-only training/validation records for one or more stages."""

    rows: list = field(default_factory=list)

    FIELDS = ("stage", "batch", "lr", "train_loss",
              "val_native_loss", "val_72h_loss")

    def _check_batch(self, stage: str, batch: int) -> None:
        for row in reversed(self.rows):
            if row["stage"] == stage:
                if batch < row["batch"]:
                    raise ValueError(
                        f"batch index {batch} would go backwards in stage "
                        f"{stage!r} (last was {row['batch']})")
                return

    def add_train(self, stage: str, batch: int, lr: float,
                  train_loss: float) -> None:
        self._check_batch(stage, batch)
        self.rows.append({"stage": stage, "batch": batch, "lr": float(lr),
                          "train_loss": float(train_loss),
                          "val_native_loss": None, "val_72h_loss": None})

    def add_validation(self, stage: str, batch: int, val_native_loss: float,
                       val_72h_loss: float) -> None:
        self._check_batch(stage, batch)
        self.rows.append({"stage": stage, "batch": batch, "lr": None,
                          "train_loss": None,
                          "val_native_loss": float(val_native_loss),
                          "val_72h_loss": float(val_72h_loss)})

    def extend(self, other: "MetricsLog") -> None:
        for row in other.rows:
            self._check_batch(row["stage"], row["batch"])
            self.rows.append(dict(row))

    def train_rows(self, stage: str | None = None) -> list:
        return [r for r in self.rows if r["train_loss"] is not None
                and (stage is None or r["stage"] == stage)]

    def validation_rows(self, stage: str | None = None) -> list:
        return [r for r in self.rows if r["val_native_loss"] is not None
                and (stage is None or r["stage"] == stage)]

    def save(self, path: str) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=self.FIELDS)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: ("" if v is None else
                                     repr(v) if isinstance(v, float) else v)
                                 for k, v in row.items()})

    @classmethod
    def load(cls, path: str) -> "MetricsLog":
        log = cls()
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                log.rows.append({
                    "stage": row["stage"],
                    "batch": int(row["batch"]),
                    "lr": float(row["lr"]) if row["lr"] else None,
                    "train_loss": (float(row["train_loss"])
                                   if row["train_loss"] else None),
                    "val_native_loss": (float(row["val_native_loss"])
                                        if row["val_native_loss"] else None),
                    "val_72h_loss": (float(row["val_72h_loss"])
                                     if row["val_72h_loss"] else None),
                })
        return log


def split_horizon_backprop(params: dict, ctx, z0: np.ndarray, z1: np.ndarray,
                           t1, targets: np.ndarray, alpha: np.ndarray, grid,
                           split_points) -> tuple[float, dict]:
    """Backprop over a window cut into segments at the given lengths.

    Segment s > 0 restarts from the previous segment's final two states
    with no gradient flowing across the boundary; every segment keeps the
    full-window 1/n normalizer so the summed loss equals the unsplit one.
    """
    split_points = tuple(int(s) for s in split_points)
    n_steps = targets.shape[0]
    if not split_points or sum(split_points) != n_steps:
        raise ShapeMismatchError(
            f"split points {split_points} do not sum to window length {n_steps}")
    total_loss = 0.0
    grads_total = None
    prev, curr = z0, z1
    done = 0
    for seg_len in split_points:
        seg_targets = targets[done:done + seg_len]
        seg_t = t1 + timedelta(hours=STEP_HOURS * done)
        loss, grads, preds = backprop_rollout(
            params, ctx, prev, curr, seg_t, seg_targets, alpha, grid,
            n_steps_norm=n_steps)
        total_loss += loss
        if grads_total is None:
            grads_total = grads
        else:
            for name in grads_total:
                grads_total[name] += grads[name]
        if seg_len >= 2:
            prev, curr = preds[-2], preds[-1]
        else:
            prev, curr = curr, preds[-1]
        done += seg_len
    return total_loss, grads_total


def _packed_window(archive: AnalysisArchive, valid_time, n_steps: int,
                   stats: NormalizationStats):
    """(z0, z1, t1, packed targets) for one training window."""
    window = sample_window(archive, valid_time, n_steps)
    z0 = pack_state(window.inputs[0], stats)
    z1 = pack_state(window.inputs[1], stats)
    targets = np.stack([pack_state(s, stats) for s in window.targets])
    return z0, z1, window.valid_time, targets


def validation_loss(params: dict, config: ModelConfig, archive: AnalysisArchive,
                    n_dates: int, n_steps: int, loss_spec: LossSpec,
                    seed: int) -> float:
    """Mean rollout loss over seeded-random valid dates from the archive."""
    grid = archive.grid()
    ctx = make_context(config, loss_spec.stats, grid)
    alpha = slot_coefficients(loss_spec)["alpha"]
    eligible = eligible_window_times(archive, n_steps)
    if n_dates < 1:
        raise ConfigError("n_dates must be >= 1")
    if len(eligible) < n_dates:
        raise DataGapError(
            f"validation period offers {len(eligible)} windows of "
            f"{n_steps} steps, need {n_dates}")
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(eligible), size=n_dates, replace=False)
    total = 0.0
    for i in picks:
        z0, z1, t1, targets = _packed_window(archive, eligible[int(i)],
                                             n_steps, loss_spec.stats)
        total += rollout_loss(params, ctx, z0, z1, t1, targets, alpha, grid)
    return total / n_dates


def _sample_grads(params, ctx, archive, valid_time, stage: StageSpec,
                  stats, alpha, grid):
    z0, z1, t1, targets = _packed_window(archive, valid_time, stage.n_steps, stats)
    if stage.split_points:
        return split_horizon_backprop(params, ctx, z0, z1, t1, targets,
                                      alpha, grid, stage.split_points)
    loss, grads, _ = backprop_rollout(params, ctx, z0, z1, t1, targets,
                                      alpha, grid)
    return loss, grads


def run_stage(state: ModelState, stage: StageSpec, data: TrainingData,
              seed: int, workers: int = 1, constant_lr: float | None = None,
              validation_interval: int | None = None,
              fixed_val_spec: LossSpec | None = None,
              val_n_dates: int = 64, val_seed: int = 0):
    """Train one stage; returns (new state, metrics log).

    A zero sample budget is a no-op. Identical inputs and seed give a
    bit-identical output state. A non-finite loss or update aborts the
    stage by raising TrainingDivergedError whose `.state` retains the
    last finite parameters.
    """
    stats = data.stats_for(stage.stats_id)
    if stats.digest != state.stats.digest:
        raise ConfigError(
            f"stage {stage.name!r} resolves stats {stage.stats_id!r} that "
            "differ from the model state's stats; use renormalization_stage "
            "to swap normalizations")
    metrics = MetricsLog()
    if stage.n_samples == 0:
        return state, metrics

    level_weights = data.weights_for(stage.weight_scheme)
    loss_spec = LossSpec(stats=stats, level_weights=level_weights,
                         n_steps=stage.n_steps)
    if fixed_val_spec is None:
        fixed_val_spec = LossSpec(stats=stats, level_weights=level_weights,
                                  n_steps=FIXED_VAL_STEPS)
    grid = data.train.grid()
    ctx = make_context(state.config, stats, grid)
    alpha = slot_coefficients(loss_spec)["alpha"]

    eligible = eligible_window_times(data.train, stage.n_steps)
    if not eligible:
        raise DataGapError(
            f"training archive too short for {stage.n_steps}-step windows")
    rng = np.random.default_rng(seed)
    draws = rng.integers(0, len(eligible), size=stage.n_samples)

    n_batches = stage.n_batches
    schedule = None if constant_lr is not None else LRSchedule(
        peak=stage.peak_lr, total_batches=n_batches)
    if validation_interval is None:
        validation_interval = max(1, n_batches // VALIDATION_FRACTION)

    def validate(batch_idx: int, params: dict) -> None:
        native = validation_loss(params, state.config, data.val,
                                 val_n_dates, stage.n_steps, loss_spec,
                                 val_seed)
        fixed = validation_loss(params, state.config, data.val,
                                val_n_dates, FIXED_VAL_STEPS,
                                fixed_val_spec, val_seed)
        metrics.add_validation(stage.name, batch_idx, native, fixed)

    params = {name: arr.copy() for name, arr in state.params.items()}
    opt = AdamState.zeros_like(params)
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        if validation_interval:
            validate(0, params)
        for b in range(n_batches):
            lr = constant_lr if constant_lr is not None else schedule.at(b)
            batch_times = [eligible[int(i)]
                           for i in draws[b * stage.batch_size:
                                          (b + 1) * stage.batch_size]]

            def job(t, params=params):
                return _sample_grads(params, ctx, data.train, t,
                                     stage, stats, alpha, grid)

            try:
                if pool is not None:
                    results = list(pool.map(job, batch_times))
                else:
                    results = [job(t) for t in batch_times]
                grads = aggregate_gradients(
                    [(pos, g) for pos, (_, g) in enumerate(results)])
                params_new, opt_new = adamw_step(params, grads, opt, lr)
            except NonFiniteError as exc:
                last_good = ModelState(params=params, config=state.config,
                                       stats=state.stats,
                                       provenance=dict(state.provenance))
                raise TrainingDivergedError(
                    f"stage {stage.name!r} diverged at batch {b + 1}: {exc}",
                    state=last_good, metrics=metrics) from exc
            params, opt = params_new, opt_new
            train_loss = sum(loss for loss, _ in results) / stage.batch_size
            metrics.add_train(stage.name, b + 1, lr, train_loss)
            if validation_interval and ((b + 1) % validation_interval == 0
                                        or b + 1 == n_batches):
                validate(b + 1, params)
    finally:
        if pool is not None:
            pool.shutdown(wait=False)

    provenance = dict(state.provenance)
    provenance["completed_stages"] = state.completed_stages() + [stage.name]
    stage_log = dict(provenance.get("stage_settings", {}))
    stage_log[stage.name] = {"seed": seed, **stage.to_dict()}
    provenance["stage_settings"] = stage_log
    new_state = ModelState(params=params, config=state.config, stats=stats,
                           provenance=provenance)
    return new_state, metrics


def renormalization_stage(state: ModelState, new_stats: NormalizationStats,
                          stage: StageSpec, data: TrainingData, seed: int,
                          **kwargs):
    """Swap the model's normalization stats, then run a single-step stage.

    The loss landscape jumps at the swap, so a constant-rate search is
    meaningless here; the provenance records that the stage's peak rate
    was prescribed, not searched.
    """
    if new_stats.layout.digest != state.stats.layout.digest:
        raise ConfigError("replacement stats use a different variable layout")
    provenance = dict(state.provenance)
    provenance["renormalized"] = {
        "from": state.stats.digest, "to": new_stats.digest,
        "lr_search": "inapplicable",
    }
    swapped = ModelState(params=state.params, config=state.config,
                         stats=new_stats, provenance=provenance)
    data2 = replace(data, stats={**data.stats, stage.stats_id: new_stats})
    return run_stage(swapped, stage, data2, seed, **kwargs)


def run_curriculum(state: ModelState, curriculum: CurriculumSpec,
                   data: TrainingData, seed: int, workers: int = 1,
                   on_stage=None):
    """Run every stage in order; returns (final state, combined metrics,
    per-stage end states).

    The fixed-horizon validation metric uses the final stage's loss spec
    for every stage so cross-stage curves are comparable.
    """
    last = curriculum.stages[-1]
    fixed_val_spec = LossSpec(
        stats=data.stats_for(last.stats_id),
        level_weights=data.weights_for(last.weight_scheme),
        n_steps=FIXED_VAL_STEPS)
    combined = MetricsLog()
    stage_states = []
    for stage in curriculum.stages:
        stage_seed = derive_seed(seed, f"stage:{stage.name}")
        state, metrics = run_stage(state, stage, data, stage_seed,
                                   workers=workers,
                                   fixed_val_spec=fixed_val_spec,
                                   val_n_dates=curriculum.val_n_dates,
                                   val_seed=curriculum.val_seed)
        combined.extend(metrics)
        stage_states.append((stage.name, state))
        if on_stage is not None:
            on_stage(stage, state, metrics)
    return state, combined, stage_states


def lr_search(state: ModelState, candidates, probe_samples: int,
              template: StageSpec, data: TrainingData, n_val: int,
              seed: int):
    """Constant-rate probes: train a clone briefly at each candidate rate,
    score by validation loss, return (best rate, table).

    Ties break toward the smaller rate; a candidate that diverges scores
    NaN; if every candidate diverges the search fails.
    """
    candidates = [float(c) for c in candidates]
    if len(candidates) < 2:
        raise ConfigError("learning-rate search needs at least 2 candidates")
    if probe_samples < template.batch_size:
        raise ConfigError("probe_samples must cover at least one batch")
    if probe_samples % template.batch_size != 0:
        probe_samples = (probe_samples // template.batch_size) \
            * template.batch_size
    stats = data.stats_for(template.stats_id)
    loss_spec = LossSpec(stats=stats,
                         level_weights=data.weights_for(template.weight_scheme),
                         n_steps=template.n_steps)
    probe_seed = derive_seed(seed, "lr-probe")
    val_seed = derive_seed(seed, "lr-val")
    table = []
    for rate in candidates:
        probe = replace(template, name=f"{template.name}-probe",
                        peak_lr=rate, n_samples=probe_samples)
        try:
            probed, _ = run_stage(state, probe, data, probe_seed,
                                  constant_lr=rate, validation_interval=0)
            score = validation_loss(probed.params, state.config, data.val,
                                    n_val, template.n_steps, loss_spec,
                                    val_seed)
            diverged = not np.isfinite(score)
        except (TrainingDivergedError, NonFiniteError):
            score, diverged = float("nan"), True
        table.append({"rate": rate, "val_loss": score, "diverged": diverged})
    finite = [row for row in table if not row["diverged"]]
    if not finite:
        raise TrainingDivergedError("every learning-rate candidate diverged")
    best = min(finite, key=lambda row: (row["val_loss"], row["rate"]))
    return best["rate"], table


def write_lr_table(table, path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["rate", "val_loss", "diverged"])
        writer.writeheader()
        for row in table:
            writer.writerow({"rate": repr(float(row["rate"])),
                             "val_loss": repr(float(row["val_loss"])),
                             "diverged": row["diverged"]})


def batch_scaling_report(tables: dict) -> list:
    """Overlayable table of probe losses against lr*size and lr*sqrt(size).

    `tables` maps batch size -> lr_search result table. Only rates present
    for every batch size are kept; an empty intersection is an error.
    """
    sizes = sorted(tables)
    if len(sizes) < 2:
        raise ConfigError("batch scaling needs at least 2 batch sizes")
    grids = [set(row["rate"] for row in tables[s]) for s in sizes]
    shared = set.intersection(*grids)
    if not shared:
        raise ConfigError("candidate grids share no common rate")
    out = []
    for size in sizes:
        by_rate = {row["rate"]: row for row in tables[size]}
        for rate in sorted(shared):
            row = by_rate[rate]
            out.append({"batch_size": size, "rate": rate,
                        "val_loss": row["val_loss"],
                        "rate_times_size": rate * size,
                        "rate_times_sqrt_size": rate * np.sqrt(size)})
    return out


def write_batch_scaling_csv(rows, path: str) -> None:
    fields = ["batch_size", "rate", "val_loss", "rate_times_size",
              "rate_times_sqrt_size"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(float(v)) if isinstance(v, float) else v
                             for k, v in row.items()})
