"""Command-line orchestration: configs, manifests, and the full pipeline.

One JSON config drives everything. Each subcommand wraps one library
operation; `pipeline` chains them: generate archives, compute
normalizations, pretrain on the source system, renormalize to the
target system, derive sensitivity level weights, run the remaining
fine-tuning stages, then verify on the held-out test period.

Every step records its artifacts in `manifest.json` keyed by the config
digest and root seed; a rerun skips completed steps whose artifacts are
still present, so an interrupted pipeline resumes where it stopped and
reproduces the same bytes. Exit codes: 0 success, 1 usage, 2 config
validation, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace
from datetime import timedelta
from functools import partial

import numpy as np

from . import figures
from .config import RunConfig, demo_config, load_config
from .emulator import (
    backprop_rollout,
    init_params,
    make_context,
    pack_state,
    rollout_loss,
)
from .errors import ConfigError, FinecastError
from .loss import LossSpec, pressure_level_weights, slot_coefficients
from .optim import gradient_cosine_similarity
from .sensitivity import (
    SensitivityWeights,
    noise_floor_check,
    run_sensitivity,
    select_sensitivity_dates,
    sensitivity_to_weights,
    write_sensitivity_csv,
    write_weights_csv,
)
from .toydata import (
    AnalysisArchive,
    NormalizationStats,
    compare_norm_stats,
    compute_normalization,
    eligible_window_times,
    generate_archive,
    sample_window,
    write_norm_comparison_csv,
)
from .trainer import (
    FIXED_VAL_STEPS,
    MetricsLog,
    ModelState,
    TrainingData,
    derive_seed,
    lr_search,
    renormalization_stage,
    run_stage,
    split_horizon_backprop,
    validation_loss,
    write_lr_table,
)
from .verify import (
    ForecastSet,
    build_climatology,
    make_forecast_set,
    persistence_forecast_set,
    rmse_table,
    scorecard,
    spectral_report,
    write_metrics_csv,
    write_scorecard_csv,
    write_spectral_csv,
)

MANIFEST_NAME = "manifest.json"


# ---------------------------------------------------------------------------
# manifest and run context


class Manifest:
    """Step ledger for one (config digest, seed); enables resumption."""

    def __init__(self, path: str, config_digest: str, seed: int):
        self.path = path
        self.data = {"format": "finecast-manifest", "version": 1,
                     "config_digest": config_digest, "seed": seed,
                     "steps": {}}

    @classmethod
    def open(cls, out_dir: str, cfg: RunConfig) -> "Manifest":
        path = os.path.join(out_dir, MANIFEST_NAME)
        man = cls(path, cfg.digest, cfg.seed)
        if os.path.exists(path):
            try:
                with open(path, encoding="utf-8") as fh:
                    data = json.load(fh)
            except (json.JSONDecodeError, OSError):
                data = None
            # records made under a different config or seed do not apply
            if (data and data.get("config_digest") == cfg.digest
                    and data.get("seed") == cfg.seed):
                man.data = data
        return man

    def done(self, step: str, out_dir: str) -> bool:
        rec = self.data["steps"].get(step)
        if not rec:
            return False
        return all(os.path.exists(os.path.join(out_dir, a))
                   for a in rec["artifacts"])

    def record(self, step: str, artifacts: list[str]) -> None:
        self.data["steps"][step] = {"artifacts": sorted(artifacts)}
        self.save()

    def save(self) -> None:
        tmp = self.path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(self.data, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, self.path)


class Run:
    """Paths, manifest, and cached artifact loaders for one output dir."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.out = cfg.out_dir
        os.makedirs(self.out, exist_ok=True)
        os.makedirs(os.path.join(self.out, "figures"), exist_ok=True)
        self.manifest = Manifest.open(self.out, cfg)
        self._archives: dict[str, AnalysisArchive] = {}
        self._stats: dict[str, NormalizationStats] = {}

    def path(self, name: str) -> str:
        return os.path.join(self.out, name)

    def require(self, name: str, produced_by: str) -> str:
        p = self.path(name)
        if not os.path.exists(p):
            raise ConfigError(
                f"missing artifact {name!r}; run the {produced_by!r} step first")
        return p

    # -- artifact loaders ---------------------------------------------------

    def archive(self, system: str) -> AnalysisArchive:
        if system not in self._archives:
            override = self.cfg.archives.get(system)
            path = override or self.require(f"archive_{system}.bin", "gen-data")
            self._archives[system] = AnalysisArchive.load(path)
        return self._archives[system]

    def stats(self, system: str) -> NormalizationStats:
        if system not in self._stats:
            path = self.require(f"norms_{system}.json", "compute-norms")
            self._stats[system] = NormalizationStats.load(path)
        return self._stats[system]

    def sensitivity_weights(self) -> SensitivityWeights:
        path = self.require("sensitivity_weights.json", "sensitivity")
        return SensitivityWeights.load(path)

    def stage_ckpt(self, phase: str, name: str) -> str:
        return self.path(f"ckpt_{phase}_{name}.bin")

    def stage_metrics(self, phase: str, name: str) -> str:
        return self.path(f"metrics_{phase}_{name}.csv")

    def load_state(self, phase: str, name: str) -> ModelState:
        stats = self.stats("a" if phase == "pretrain" else "b")
        path = self.stage_ckpt(phase, name)
        if not os.path.exists(path):
            raise ConfigError(
                f"missing checkpoint for stage {phase}:{name}; "
                "run that training step first")
        return ModelState.load(path, stats)

    def pretrain_final(self) -> ModelState:
        return self.load_state("pretrain", self.cfg.pretrain.stages[-1].name)

    def finetune_final(self) -> ModelState:
        return self.load_state("finetune", self.cfg.finetune.stages[-1].name)

    # -- training data ------------------------------------------------------

    def pressure_weights(self, layout):
        return pressure_level_weights(layout.levels_hpa)

    def training_data(self, system: str,
                      with_sensitivity: bool = False) -> TrainingData:
        cfg = self.cfg
        arch = self.archive(system)
        stats = self.stats(system)
        weights = {"pressure": self.pressure_weights(stats.layout)}
        if with_sensitivity:
            weights["sensitivity"] = self.sensitivity_weights() \
                .to_level_weights()
        return TrainingData(
            train=arch.slice(*cfg.range(f"train_{system}")),
            val=arch.slice(*cfg.range(f"val_{system}")),
            stats={"target": stats},
            weights=weights,
        )

    # -- step driver --------------------------------------------------------

    def step(self, name: str, fn, force: bool = False) -> bool:
        if not force and self.manifest.done(name, self.out):
            print(f"[{name}] up to date, skipping")
            return False
        print(f"[{name}] running")
        artifacts = fn(self)
        missing = [a for a in artifacts
                   if not os.path.exists(os.path.join(self.out, a))]
        if missing:
            raise FinecastError(
                f"step {name!r} did not produce declared artifacts: {missing}")
        self.manifest.record(name, artifacts)
        print(f"[{name}] done: {', '.join(sorted(artifacts))}")
        return True


# ---------------------------------------------------------------------------
# pipeline steps


def step_gen_data(run: Run) -> list[str]:
    cfg = run.cfg
    out = []
    for system in ("a", "b"):
        if system in cfg.archives:
            print(f"  system {system}: using supplied archive "
                  f"{cfg.archives[system]}")
            continue
        spec = cfg.system_spec(system)
        start, end = cfg.span(system)
        seed = cfg.subseed(f"data:{system}")
        arch = generate_archive(spec, start, end, seed, provenance={
            "config_digest": cfg.digest, "root_seed": cfg.seed,
            "role": f"system-{system}"})
        name = f"archive_{system}.bin"
        arch.save(run.path(name))
        out.append(name)
        print(f"  system {system}: {arch.n_times} states "
              f"[{start.isoformat()}, {end.isoformat()})")
    return out


def step_compute_norms(run: Run) -> list[str]:
    cfg = run.cfg
    out = []
    for system in ("a", "b"):
        arch = run.archive(system)
        stats = compute_normalization(arch, period=cfg.range(f"train_{system}"),
                                      truncate_whole_years=True)
        stats = replace(stats, source={**stats.source,
                                       "config_digest": cfg.digest,
                                       "system": system})
        name = f"norms_{system}.json"
        stats.save(run.path(name))
        out.append(name)
    run._stats.clear()  # later steps must see the persisted digests
    return out


def step_compare_norms(run: Run) -> list[str]:
    rows = compare_norm_stats(run.stats("a"), run.stats("b"))
    write_norm_comparison_csv(rows, run.path("norms_shift.csv"))
    worst = max(rows, key=lambda r: abs(r["mean_zscore"]))
    print(f"  largest mean shift: {worst['variable']} at "
          f"{worst['level_hpa']:g} hPa, {worst['mean_zscore']:+.2f} sigma")
    return ["norms_shift.csv"]


def _fresh_state(run: Run) -> ModelState:
    cfg = run.cfg
    stats = run.stats("a")
    n_channels = len(stats.layout.slots())
    params = init_params(cfg.model, n_channels, cfg.subseed("init"))
    return ModelState(params=params, config=cfg.model, stats=stats,
                      provenance={"config_digest": cfg.digest,
                                  "root_seed": cfg.seed})


def _fixed_val_spec(run: Run, phase: str) -> LossSpec | None:
    """Cross-stage validation spec: the curriculum's final-stage loss."""
    cfg = run.cfg
    cur = cfg.pretrain if phase == "pretrain" else cfg.finetune
    last = cur.stages[-1]
    if phase == "pretrain":
        stats = run.stats("a")
        weights = run.pressure_weights(stats.layout)
    else:
        stats = run.stats("b")
        if last.weight_scheme == "sensitivity":
            weights = run.sensitivity_weights().to_level_weights()
        else:
            weights = run.pressure_weights(stats.layout)
    return LossSpec(stats=stats, level_weights=weights,
                    n_steps=FIXED_VAL_STEPS)


def step_train_stage(run: Run, phase: str, idx: int) -> list[str]:
    cfg = run.cfg
    cur = cfg.pretrain if phase == "pretrain" else cfg.finetune
    stage = cur.stages[idx]
    seed = derive_seed(cfg.subseed(phase), f"stage:{stage.name}")
    common = dict(workers=cfg.workers, val_n_dates=cur.val_n_dates,
                  val_seed=cur.val_seed)

    if phase == "finetune" and idx == 0:
        # stage 1a: swap normalization stats, then brief single-step tuning;
        # runs before sensitivity weights exist, so it validates with its
        # own (pressure-weighted) loss
        data = run.training_data("b")
        state = run.pretrain_final()
        state, metrics = renormalization_stage(state, run.stats("b"), stage,
                                               data, seed, **common)
    else:
        if phase == "pretrain":
            data = run.training_data("a")
            state = _fresh_state(run) if idx == 0 \
                else run.load_state(phase, cur.stages[idx - 1].name)
        else:
            data = run.training_data("b", with_sensitivity=True)
            state = run.load_state(phase, cur.stages[idx - 1].name)
        state, metrics = run_stage(state, stage, data, seed,
                                   fixed_val_spec=_fixed_val_spec(run, phase),
                                   **common)

    ckpt = f"ckpt_{phase}_{stage.name}.bin"
    mcsv = f"metrics_{phase}_{stage.name}.csv"
    state.save(run.path(ckpt))
    metrics.save(run.path(mcsv))
    vals = metrics.validation_rows()
    if vals:
        print(f"  {stage.name}: val loss {vals[0]['val_native_loss']:.6g} "
              f"-> {vals[-1]['val_native_loss']:.6g} "
              f"({stage.n_samples} samples)")
    return [ckpt, mcsv]


def step_sensitivity(run: Run) -> list[str]:
    cfg = run.cfg
    sens = cfg.sensitivity
    stats = run.stats("b")
    state = run.load_state("finetune", cfg.finetune.stages[0].name)
    arch = run.archive("b").slice(*cfg.range("train_b"))
    dates = select_sensitivity_dates(arch, sens.n_dates, sens.lead_days,
                                     cfg.subseed("sensitivity:dates"))
    raw = run_sensitivity(state.params, state.config, stats, arch, dates,
                          lead_days=sens.lead_days, eps_mode=sens.eps_mode,
                          workers=cfg.workers)
    raw.save(run.path("sensitivity_raw.json"))
    write_sensitivity_csv(raw, run.path("sensitivity_raw.csv"))

    weights = sensitivity_to_weights(raw, resamples=sens.resamples,
                                     seed=cfg.subseed("sensitivity:bootstrap"))
    weights.save(run.path("sensitivity_weights.json"))
    write_weights_csv(weights, run.path("sensitivity_weights.csv"))

    verdict = noise_floor_check(weights)
    with open(run.path("noise_floor.json"), "w", encoding="utf-8") as fh:
        json.dump({"passed": verdict.passed,
                   "control_q95": verdict.control_q95,
                   "levels_hpa": list(verdict.levels_hpa),
                   "margins": verdict.margins.tolist(),
                   "config_digest": cfg.digest}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    status = "pass" if verdict.passed else "FAIL"
    print(f"  noise floor check: {status} "
          f"(min margin {float(verdict.margins.min()):+.3g})")
    return ["sensitivity_raw.json", "sensitivity_raw.csv",
            "sensitivity_weights.json", "sensitivity_weights.csv",
            "noise_floor.json"]


def _eval_inits(run: Run) -> list:
    """Seeded test-period initializations with full verification coverage."""
    cfg = run.cfg
    arch = run.archive("b")
    start, end = cfg.range("test_b")
    steps = max(cfg.evaluate.lead_hours) // 6
    eligible = [t for t in arch.times()
                if start <= t < end
                and arch.index_of(t) >= 1
                and arch.index_of(t) + steps < arch.n_times]
    n = cfg.evaluate.n_inits
    if len(eligible) < n:
        raise ConfigError(
            f"test period offers {len(eligible)} usable initializations, "
            f"need {n}")
    rng = np.random.default_rng(cfg.subseed("eval:inits"))
    picks = rng.choice(len(eligible), size=n, replace=False)
    return [eligible[i] for i in sorted(int(i) for i in picks)]


def step_evaluate(run: Run) -> list[str]:
    cfg = run.cfg
    ev = cfg.evaluate
    arch = run.archive("b")
    inits = _eval_inits(run)
    with open(run.path("inits.json"), "w", encoding="utf-8") as fh:
        json.dump({"init_times": [t.isoformat() for t in inits],
                   "lead_hours": list(ev.lead_hours),
                   "config_digest": cfg.digest}, fh, indent=2, sort_keys=True)
        fh.write("\n")

    final = run.finetune_final()
    early = run.load_state("finetune", cfg.finetune.stages[1].name) \
        if len(cfg.finetune.stages) > 1 else final
    unmod = run.pretrain_final()

    sets = {
        "final": make_forecast_set(final.params, final.config, final.stats,
                                   arch, inits, ev.lead_hours,
                                   model_id="final", workers=cfg.workers),
        "early": make_forecast_set(early.params, early.config, early.stats,
                                   arch, inits, ev.lead_hours,
                                   model_id="early", workers=cfg.workers),
        "unmodified": make_forecast_set(unmod.params, unmod.config,
                                        unmod.stats, arch, inits,
                                        ev.lead_hours, model_id="unmodified",
                                        workers=cfg.workers),
        "persistence": persistence_forecast_set(arch, inits, ev.lead_hours),
    }
    artifacts = ["inits.json"]
    for label, fset in sets.items():
        name = f"forecasts_{label}.bin"
        fset.save(run.path(name))
        artifacts.append(name)

    clim = build_climatology(arch, *cfg.range("train_b"))
    rows = []
    for label in ("final", "early", "unmodified", "persistence"):
        rows.extend(rmse_table(sets[label], arch, climatology=clim))
    write_metrics_csv(rows, run.path("metrics_eval.csv"))
    artifacts.append("metrics_eval.csv")

    artifacts.append(_stage_validation(run))
    figures.rmse_comparison_figure(
        run.path("metrics_eval.csv"), run.path("figures/rmse_comparison.png"),
        ev.spectra_variable, ev.spectra_level_hpa)
    artifacts.append("figures/rmse_comparison.png")
    for row in rows:
        if (row["model_id"] in ("final", "unmodified")
                and row["variable"] == ev.spectra_variable
                and row["level_hpa"] == ev.spectra_level_hpa):
            print(f"  {row['model_id']:>10} {row['variable']}@"
                  f"{row['level_hpa']:g} {row['lead_hours']:>3}h "
                  f"rmse {row['rmse']:.5g}")
    return artifacts


def _stage_validation(run: Run) -> str:
    """Uniform before/after losses for every checkpoint along the pipeline.

    All rows use pressure level weights so the metric is independent of
    the sensitivity-derived weights some stages trained with.
    """
    cfg = run.cfg
    arch = run.archive("b")
    val = arch.slice(*cfg.range("val_b"))
    stats_a, stats_b = run.stats("a"), run.stats("b")
    seed = cfg.subseed("eval:val")
    n_dates = cfg.finetune.val_n_dates
    pre_final = run.pretrain_final()

    def spec(stats, n_steps):
        return LossSpec(stats=stats,
                        level_weights=run.pressure_weights(stats.layout),
                        n_steps=n_steps)

    def losses(params, stats):
        one = validation_loss(params, cfg.model, val, n_dates, 1,
                              spec(stats, 1), seed)
        fixed = validation_loss(params, cfg.model, val, n_dates,
                                FIXED_VAL_STEPS, spec(stats, FIXED_VAL_STEPS),
                                seed)
        return one, fixed

    rows = []
    # the pretrained model as shipped, and with only the stats swapped
    rows.append(("unmodified",) + losses(pre_final.params, stats_a))
    rows.append(("restatted",) + losses(pre_final.params, stats_b))
    for stage in cfg.finetune.stages:
        state = run.load_state("finetune", stage.name)
        rows.append((stage.name,) + losses(state.params, stats_b))

    with open(run.path("stage_validation.csv"), "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["checkpoint", "order", "val_loss_1step",
                         f"val_loss_{FIXED_VAL_STEPS}step"])
        for order, (name, one, fixed) in enumerate(rows):
            writer.writerow([name, order, repr(one), repr(fixed)])
    print("  stage validation (1-step / fixed-horizon):")
    for name, one, fixed in rows:
        print(f"    {name:>12}: {one:.6g} / {fixed:.6g}")
    return "stage_validation.csv"


def step_scorecard(run: Run) -> list[str]:
    candidate = ForecastSet.load(run.require("forecasts_final.bin", "evaluate"))
    reference = ForecastSet.load(
        run.require("forecasts_unmodified.bin", "evaluate"))
    card = scorecard(candidate, reference, run.archive("b"))
    write_scorecard_csv(card, run.path("scorecard.csv"))
    figures.scorecard_figure(run.path("scorecard.csv"),
                             run.path("figures/scorecard.png"),
                             title="final vs unmodified (blue = final wins)")
    wins = sum(1 for r in card.rows if r["marker"] < 0)
    print(f"  final better in {wins}/{len(card.rows)} cells")
    return ["scorecard.csv", "figures/scorecard.png"]


def step_spectra(run: Run) -> list[str]:
    ev = run.cfg.evaluate
    arch = run.archive("b")
    out = []
    for label in ("final", "early"):
        fset = ForecastSet.load(run.require(f"forecasts_{label}.bin",
                                            "evaluate"))
        rows = spectral_report(fset, arch, ev.spectra_variable,
                               ev.spectra_level_hpa,
                               lead_hours=[ev.spectra_lead_hours],
                               lmax=ev.lmax, band_fraction=ev.band_fraction)
        name = f"spectra_{label}.csv"
        write_spectral_csv(rows, run.path(name))
        out.append(name)
    figures.spectra_figure(
        {"final (72h-trained)": run.path("spectra_final.csv"),
         "early (6h-trained)": run.path("spectra_early.csv")},
        run.path("figures/spectra.png"),
        title=f"{ev.spectra_variable} @ {ev.spectra_level_hpa:g} hPa, "
              f"{ev.spectra_lead_hours}h lead")
    out.append("figures/spectra.png")
    return out


def step_report(run: Run) -> list[str]:
    cfg = run.cfg
    out = []
    merged_csvs = {}
    for phase, cur in (("pretrain", cfg.pretrain), ("finetune", cfg.finetune)):
        merged = MetricsLog()
        for stage in cur.stages:
            merged.extend(MetricsLog.load(
                run.require(f"metrics_{phase}_{stage.name}.csv",
                            f"{phase}:{stage.name}")))
        name = f"metrics_{phase}.csv"
        merged.save(run.path(name))
        merged_csvs[phase] = run.path(name)
        out.append(name)
    figures.training_curves_figure(merged_csvs,
                                   run.path("figures/training_curves.png"))
    out.append("figures/training_curves.png")
    figures.sensitivity_weights_figure(
        run.require("sensitivity_weights.csv", "sensitivity"),
        run.path("figures/sensitivity_weights.png"))
    out.append("figures/sensitivity_weights.png")
    return out


def pipeline_steps(cfg: RunConfig) -> list[tuple[str, object]]:
    steps = [("gen-data", step_gen_data),
             ("compute-norms", step_compute_norms),
             ("compare-norms", step_compare_norms)]
    for i, stage in enumerate(cfg.pretrain.stages):
        steps.append((f"pretrain:{stage.name}",
                      partial(step_train_stage, phase="pretrain", idx=i)))
    steps.append((f"finetune:{cfg.finetune.stages[0].name}",
                  partial(step_train_stage, phase="finetune", idx=0)))
    steps.append(("sensitivity", step_sensitivity))
    for i, stage in enumerate(cfg.finetune.stages[1:], start=1):
        steps.append((f"finetune:{stage.name}",
                      partial(step_train_stage, phase="finetune", idx=i)))
    steps += [("evaluate", step_evaluate),
              ("scorecard", step_scorecard),
              ("spectra", step_spectra),
              ("report", step_report)]
    return steps


# ---------------------------------------------------------------------------
# subcommand handlers


def cmd_init_config(args) -> int:
    cfg = demo_config(args.out_dir, divisor=args.divisor,
                      lr_scale=args.lr_scale, seed=args.seed,
                      workers=args.workers)
    cfg.save(args.path)
    print(f"wrote {args.path} (digest {cfg.digest[:12]}, "
          f"out_dir {cfg.out_dir})")
    return 0


def _run_named_steps(run: Run, names: list[str], force: bool) -> int:
    table = dict(pipeline_steps(run.cfg))
    for name in names:
        if name not in table:
            raise ConfigError(f"unknown pipeline step {name!r}; "
                              f"known: {list(table)}")
        run.step(name, table[name], force=force)
    return 0


def cmd_gen_data(run: Run, args) -> int:
    return _run_named_steps(run, ["gen-data"], args.force)


def cmd_compute_norms(run: Run, args) -> int:
    return _run_named_steps(run, ["compute-norms"], args.force)


def cmd_compare_norms(run: Run, args) -> int:
    return _run_named_steps(run, ["compare-norms"], args.force)


def cmd_train_stage(run: Run, args) -> int:
    cur = run.cfg.pretrain if args.phase == "pretrain" else run.cfg.finetune
    names = [s.name for s in cur.stages]
    if args.stage not in names:
        raise ConfigError(f"unknown {args.phase} stage {args.stage!r}; "
                          f"known: {names}")
    return _run_named_steps(run, [f"{args.phase}:{args.stage}"], args.force)


def cmd_sensitivity_weights(run: Run, args) -> int:
    return _run_named_steps(run, ["sensitivity"], args.force)


def cmd_evaluate(run: Run, args) -> int:
    return _run_named_steps(run, ["evaluate"], args.force)


def cmd_scorecard(run: Run, args) -> int:
    return _run_named_steps(run, ["scorecard"], args.force)


def cmd_spectra(run: Run, args) -> int:
    return _run_named_steps(run, ["spectra"], args.force)


def cmd_report(run: Run, args) -> int:
    return _run_named_steps(run, ["report"], args.force)


def cmd_pipeline(run: Run, args) -> int:
    cfg = run.cfg
    cfg.save(run.path("config.json"))
    for name, fn in pipeline_steps(cfg):
        run.step(name, fn, force=args.force)
    print(f"pipeline complete in {run.out}")
    return 0


def cmd_lr_search(run: Run, args) -> int:
    cfg = run.cfg
    if len(cfg.finetune.stages) < 2:
        raise ConfigError("lr-search needs a post-renormalization stage")
    template = cfg.finetune.stages[1]
    state = run.load_state("finetune", cfg.finetune.stages[0].name)
    data = run.training_data(
        "b", with_sensitivity=(template.weight_scheme == "sensitivity"))
    best, table = lr_search(state, cfg.lr_search.candidates,
                            cfg.lr_search.probe_samples, template, data,
                            cfg.lr_search.n_val, cfg.subseed("lr-search"))
    write_lr_table(table, run.path("lr_search.csv"))
    with open(run.path("lr_choice.json"), "w", encoding="utf-8") as fh:
        json.dump({"best_rate": best,
                   "stage": template.name,
                   "candidates": [row["rate"] for row in table],
                   "config_digest": cfg.digest}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    run.manifest.record("lr-search", ["lr_search.csv", "lr_choice.json"])
    for row in table:
        mark = " <-- selected" if row["rate"] == best else ""
        loss = "diverged" if row["diverged"] else f"{row['val_loss']:.6g}"
        print(f"  rate {row['rate']:.3e}: {loss}{mark}")
    return 0


def _diag_setup(run: Run, label: str):
    """Archive, stats, and seeded parameters for self-contained diagnostics.

    Reuses the generated system-A artifacts when present, else integrates
    a short span (and its stats) on the fly.
    """
    cfg = run.cfg
    try:
        arch = run.archive("a")
    except ConfigError:
        start, _ = cfg.span("a")
        arch = generate_archive(cfg.system_spec("a"), start,
                                start + timedelta(days=30),
                                cfg.subseed(f"{label}:data"))
    try:
        stats = run.stats("a")
    except ConfigError:
        stats = compute_normalization(arch)
    params = init_params(cfg.model, len(stats.layout.slots()),
                         cfg.subseed(f"{label}:init"))
    return arch, stats, params


def _window(archive, stats, valid_time, n_steps):
    w = sample_window(archive, valid_time, n_steps)
    z0 = pack_state(w.inputs[0], stats)
    z1 = pack_state(w.inputs[1], stats)
    targets = np.stack([pack_state(s, stats) for s in w.targets])
    return z0, z1, w.valid_time, targets


def cmd_grad_check(run: Run, args) -> int:
    cfg = run.cfg
    arch, stats, params = _diag_setup(run, "grad-check")
    grid = arch.grid()
    ctx = make_context(cfg.model, stats, grid)
    spec = LossSpec(stats=stats,
                    level_weights=pressure_level_weights(stats.layout.levels_hpa),
                    n_steps=1)
    alpha = slot_coefficients(spec)["alpha"]
    rng = np.random.default_rng(cfg.subseed("grad-check:coords"))
    steps = [int(s) for s in args.steps.split(",")]

    rows, worst = [], 0.0
    for n_steps in steps:
        t = eligible_window_times(arch, n_steps)[0]
        z0, z1, t1, targets = _window(arch, stats, t, n_steps)
        _, grads, _ = backprop_rollout(params, ctx, z0, z1, t1, targets,
                                       alpha, grid)
        for name in sorted(params):
            flat = params[name].ravel()
            for idx in rng.choice(flat.size,
                                  size=min(args.coords, flat.size),
                                  replace=False):
                idx = int(idx)
                h = 1e-6 * max(1.0, abs(flat[idx]))
                saved = flat[idx]
                flat[idx] = saved + h
                up = rollout_loss(params, ctx, z0, z1, t1, targets, alpha,
                                  grid)
                flat[idx] = saved - h
                dn = rollout_loss(params, ctx, z0, z1, t1, targets, alpha,
                                  grid)
                flat[idx] = saved
                fd = (up - dn) / (2.0 * h)
                an = float(grads[name].ravel()[idx])
                rel = abs(an - fd) / max(abs(an), abs(fd), 1e-10)
                worst = max(worst, rel)
                rows.append([n_steps, name, idx, repr(an), repr(fd),
                             repr(rel)])
    with open(run.path("grad_check.csv"), "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n_steps", "param", "index", "analytic",
                         "finite_diff", "rel_err"])
        writer.writerows(rows)
    run.manifest.record("grad-check", ["grad_check.csv"])
    verdict = "pass" if worst < args.tol else "FAIL"
    print(f"gradient check: {verdict} "
          f"(max rel err {worst:.3e} over {len(rows)} coords, "
          f"tol {args.tol:g})")
    return 0 if worst < args.tol else 3


def _parse_splits(text: str, n_steps: int) -> list[tuple[int, ...]]:
    out = []
    for token in text.split(";"):
        token = token.strip()
        if token == "singles":
            out.append((1,) * n_steps)
        else:
            out.append(tuple(int(p) for p in token.split(",")))
    for split in out:
        if sum(split) != n_steps:
            raise ConfigError(f"split {split} does not sum to {n_steps}")
    return out


def cmd_split_horizon_diag(run: Run, args) -> int:
    cfg = run.cfg
    arch, stats, params = _diag_setup(run, "split-diag")
    grid = arch.grid()
    ctx = make_context(cfg.model, stats, grid)
    spec = LossSpec(stats=stats,
                    level_weights=pressure_level_weights(stats.layout.levels_hpa),
                    n_steps=args.n_steps)
    alpha = slot_coefficients(spec)["alpha"]
    splits = _parse_splits(args.splits, args.n_steps)

    eligible = eligible_window_times(arch, args.n_steps)
    if len(eligible) < args.windows:
        raise ConfigError(f"archive offers {len(eligible)} windows, "
                          f"need {args.windows}")
    rng = np.random.default_rng(cfg.subseed("split-diag:windows"))
    picks = sorted(int(i) for i in rng.choice(len(eligible),
                                              size=args.windows,
                                              replace=False))
    rows = []
    for wi, pick in enumerate(picks):
        z0, z1, t1, targets = _window(arch, stats, eligible[pick],
                                      args.n_steps)
        ref_loss, ref_grads, _ = backprop_rollout(params, ctx, z0, z1, t1,
                                                  targets, alpha, grid)
        for split in splits:
            loss, grads = split_horizon_backprop(params, ctx, z0, z1, t1,
                                                 targets, alpha, grid, split)
            cos = gradient_cosine_similarity(ref_grads, grads)
            label = "singles" if split == (1,) * args.n_steps \
                else ",".join(str(s) for s in split)
            rows.append([label, wi,
                         repr(abs(loss - ref_loss) / max(abs(ref_loss),
                                                         1e-300)),
                         repr(float(cos["min"])),
                         len(split)])
    with open(run.path("split_horizon.csv"), "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["split", "window", "loss_rel_err", "min_cosine",
                         "n_segments"])
        writer.writerows(rows)
    run.manifest.record("split-horizon-diag", ["split_horizon.csv"])
    by_split: dict[str, list[float]] = {}
    for label, _, _, cos, _ in rows:
        by_split.setdefault(label, []).append(float(cos))
    for label, values in by_split.items():
        print(f"  split {label:>12}: median min-cosine "
              f"{float(np.median(values)):.6f}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing and dispatch


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _add_common(sub):
    sub.add_argument("--config", required=True,
                     help="path to the run-config JSON")
    sub.add_argument("--seed", type=int, default=None,
                     help="override the config's root seed")
    sub.add_argument("--workers", type=int, default=None,
                     help="override the config's worker count")
    sub.add_argument("--out-dir", default=None,
                     help="override the config's output directory")
    sub.add_argument("--force", action="store_true",
                     help="redo steps even if their artifacts exist")


def build_parser() -> _Parser:
    parser = _Parser(prog="finecast",
                     description="fine-tuning experiment pipeline for the "
                                 "toy forecast emulator")
    subs = parser.add_subparsers(dest="command", required=True)

    init = subs.add_parser("init-config",
                           help="write a ready-to-run demonstration config")
    init.add_argument("path", help="where to write the config JSON")
    init.add_argument("--out-dir", required=True,
                      help="output directory the config will use")
    init.add_argument("--divisor", type=int, default=512,
                      help="shrink factor applied to every stage budget")
    init.add_argument("--lr-scale", type=float, default=200.0,
                      help="multiplier on the reference fine-tuning rates")
    init.add_argument("--seed", type=int, default=7)
    init.add_argument("--workers", type=int, default=1)
    init.set_defaults(handler=cmd_init_config, needs_config=False)

    simple = [
        ("gen-data", cmd_gen_data, "generate both synthetic archives"),
        ("compute-norms", cmd_compute_norms,
         "per-variable normalization stats over the training ranges"),
        ("compare-norms", cmd_compare_norms,
         "tabulate the normalization shift between the two systems"),
        ("sensitivity-weights", cmd_sensitivity_weights,
         "derive level weights from perturbation responses"),
        ("evaluate", cmd_evaluate,
         "forecast the test period and tabulate rmse/acc"),
        ("scorecard", cmd_scorecard,
         "per-band skill of the final model against the unmodified one"),
        ("spectra", cmd_spectra,
         "wavenumber variance ratio and coherence reports"),
        ("report", cmd_report,
         "merge metrics logs and render training/sensitivity figures"),
        ("pipeline", cmd_pipeline, "run every step in order"),
        ("lr-search", cmd_lr_search,
         "probe candidate learning rates for the first tuning stage"),
    ]
    for name, handler, help_text in simple:
        sub = subs.add_parser(name, help=help_text)
        _add_common(sub)
        sub.set_defaults(handler=handler, needs_config=True)

    train = subs.add_parser("train-stage", help="run one curriculum stage")
    _add_common(train)
    train.add_argument("--phase", choices=("pretrain", "finetune"),
                       required=True)
    train.add_argument("--stage", required=True, help="stage name")
    train.set_defaults(handler=cmd_train_stage, needs_config=True)

    grad = subs.add_parser("grad-check",
                           help="backprop vs central finite differences")
    _add_common(grad)
    grad.add_argument("--steps", default="1,4",
                      help="comma-separated window lengths")
    grad.add_argument("--coords", type=int, default=4,
                      help="probed coordinates per parameter set")
    grad.add_argument("--tol", type=float, default=1e-5)
    grad.set_defaults(handler=cmd_grad_check, needs_config=True)

    split = subs.add_parser("split-horizon-diag",
                            help="gradient fidelity across window splits")
    _add_common(split)
    split.add_argument("--n-steps", type=int, default=12)
    split.add_argument("--windows", type=int, default=8)
    split.add_argument("--splits",
                       default="12;6,6;4,8;8,4;2,10;10,2;singles",
                       help="semicolon-separated comma lists; 'singles' "
                            "expands to all ones")
    split.set_defaults(handler=cmd_split_horizon_diag, needs_config=True)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help and friends
        return 0 if exc.code in (0, None) else 1
    try:
        if not args.needs_config:
            return args.handler(args)
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.workers is not None:
            cfg = replace(cfg, workers=args.workers)
        if args.out_dir is not None:
            cfg = replace(cfg, out_dir=args.out_dir)
        return args.handler(Run(cfg), args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FinecastError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
