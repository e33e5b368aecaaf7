"""Plot renderers for the delimited artifacts the pipeline writes.

All matplotlib use lives here. Every renderer reads one or more CSV
files produced by the library and writes a PNG; saved files carry no
timestamp metadata, so rerunning a pipeline reproduces byte-identical
images.
"""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import ConfigError  # noqa: E402

_DPI = 120


def _read_rows(path: str) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ConfigError(f"no rows in {path}")
    return rows


def _save(fig, out_png: str) -> None:
    fig.savefig(out_png, dpi=_DPI, metadata={"Date": None},
                bbox_inches="tight")
    plt.close(fig)


def training_curves_figure(csv_by_label: dict[str, str], out_png: str) -> None:
    """Loss trajectories: one panel per log, stage boundaries marked."""
    if not csv_by_label:
        raise ConfigError("no metrics files given")
    labels = list(csv_by_label)
    fig, axes = plt.subplots(len(labels), 1, squeeze=False,
                             figsize=(8.0, 3.0 * len(labels)))
    for ax, label in zip(axes[:, 0], labels):
        rows = _read_rows(csv_by_label[label])
        # batch indices restart at each stage; lay stages end to end
        offsets, offset, prev_stage, prev_last = {}, 0, None, 0
        xs_t, ys_t, xs_n, ys_n, xs_f, ys_f = [], [], [], [], [], []
        for row in rows:
            stage = row["stage"]
            if stage != prev_stage:
                if prev_stage is not None:
                    offset += prev_last + 1
                offsets[stage] = offset
                prev_stage = stage
            prev_last = int(row["batch"])
            x = offsets[stage] + prev_last
            if row["train_loss"]:
                xs_t.append(x)
                ys_t.append(float(row["train_loss"]))
            if row["val_native_loss"]:
                xs_n.append(x)
                ys_n.append(float(row["val_native_loss"]))
            if row["val_72h_loss"]:
                xs_f.append(x)
                ys_f.append(float(row["val_72h_loss"]))
        if xs_t:
            ax.plot(xs_t, ys_t, lw=0.8, color="tab:blue", label="train")
        if xs_n:
            ax.plot(xs_n, ys_n, "o-", ms=3, color="tab:orange",
                    label="val (native horizon)")
        if xs_f:
            ax.plot(xs_f, ys_f, "s--", ms=3, color="tab:green",
                    label="val (fixed 72h)")
        for stage, off in offsets.items():
            ax.axvline(off, color="0.8", lw=0.6)
            ax.annotate(stage, (off, 1.0), xycoords=("data", "axes fraction"),
                        fontsize=7, rotation=90, va="top", ha="right")
        ax.set_yscale("log")
        ax.set_ylabel("loss")
        ax.set_title(label, fontsize=9)
        ax.legend(fontsize=7, loc="upper right")
    axes[-1, 0].set_xlabel("batch (stages laid end to end)")
    fig.tight_layout()
    _save(fig, out_png)


def sensitivity_weights_figure(csv_path: str, out_png: str) -> None:
    """Per-level weights plus standardized responses against the noise band."""
    rows = _read_rows(csv_path)
    control = [r for r in rows if r["kind"] == "control"]
    levels = [r for r in rows if r["kind"] == "perturbed"]
    if not control or not levels:
        raise ConfigError(f"{csv_path} lacks control/perturbed rows")
    hpa = [float(r["level_hpa"]) for r in levels]
    weight = [float(r["weight"]) for r in levels]
    mean_z = [float(r["mean_z"]) for r in levels]
    lo = [float(r["band_lo"]) for r in levels]
    hi = [float(r["band_hi"]) for r in levels]
    band = (float(control[0]["band_lo"]), float(control[0]["band_hi"]))

    fig, (ax_w, ax_z) = plt.subplots(1, 2, figsize=(9.0, 3.6))
    x = np.arange(len(hpa))
    ax_w.bar(x, weight, color="tab:blue")
    ax_w.set_xticks(x, [f"{h:g}" for h in hpa], rotation=45, fontsize=7)
    ax_w.set_xlabel("perturbed level (hPa)")
    ax_w.set_ylabel("training weight")
    ax_w.set_title("derived level weights", fontsize=9)

    ax_z.errorbar(x, mean_z, yerr=[np.subtract(mean_z, lo),
                                   np.subtract(hi, mean_z)],
                  fmt="o", ms=4, capsize=3, color="tab:blue",
                  label="perturbed response")
    ax_z.axhspan(band[0], band[1], color="0.85", label="control band")
    ax_z.set_xticks(x, [f"{h:g}" for h in hpa], rotation=45, fontsize=7)
    ax_z.set_xlabel("perturbed level (hPa)")
    ax_z.set_ylabel("standardized response")
    ax_z.set_title("response vs. noise floor", fontsize=9)
    ax_z.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, out_png)


def scorecard_figure(csv_path: str, out_png: str, title: str = "") -> None:
    """Colored skill matrix: rows (variable, band), columns lead hours."""
    rows = _read_rows(csv_path)
    row_keys, col_keys = [], []
    for r in rows:
        rk = (r["variable"], r["band"])
        if rk not in row_keys:
            row_keys.append(rk)
        ck = int(r["lead_hours"])
        if ck not in col_keys:
            col_keys.append(ck)
    col_keys.sort()
    grid = np.full((len(row_keys), len(col_keys)), np.nan)
    notes = {}
    for r in rows:
        i = row_keys.index((r["variable"], r["band"]))
        j = col_keys.index(int(r["lead_hours"]))
        grid[i, j] = float(r["skill"])
        notes[(i, j)] = r["annotated"]

    fig, ax = plt.subplots(
        figsize=(1.2 + 0.9 * len(col_keys), 1.0 + 0.45 * len(row_keys)))
    span = np.nanmax(np.abs(grid)) if np.any(np.isfinite(grid)) else 1.0
    span = max(span, 1e-6)
    masked = np.ma.masked_invalid(grid)
    cmap = plt.get_cmap("RdBu_r").copy()
    cmap.set_bad("0.9")
    # negative skill (candidate better) shown blue
    im = ax.imshow(-masked, cmap=cmap, vmin=-span, vmax=span, aspect="auto")
    for (i, j), text in notes.items():
        if text:
            ax.text(j, i, text, ha="center", va="center", fontsize=7)
    ax.set_xticks(range(len(col_keys)), [f"{c}h" for c in col_keys],
                  fontsize=8)
    ax.set_yticks(range(len(row_keys)),
                  [f"{v} {b}" for v, b in row_keys], fontsize=8)
    if title:
        ax.set_title(title, fontsize=9)
    fig.colorbar(im, ax=ax, shrink=0.8, label="skill (blue = candidate wins)")
    fig.tight_layout()
    _save(fig, out_png)


def spectra_figure(csv_by_label: dict[str, str], out_png: str,
                   title: str = "") -> None:
    """Variance ratio and coherence against wavenumber, per model label."""
    if not csv_by_label:
        raise ConfigError("no spectra files given")
    fig, (ax_r, ax_c) = plt.subplots(1, 2, figsize=(9.0, 3.6))
    for label, path in csv_by_label.items():
        by_lead: dict[int, list] = {}
        for r in _read_rows(path):
            by_lead.setdefault(int(r["lead_hours"]), []).append(r)
        for lead, rows in sorted(by_lead.items()):
            rows.sort(key=lambda r: int(r["wavenumber"]))
            k = [int(r["wavenumber"]) for r in rows]
            ratio = [float(r["variance_ratio"]) if r["variance_ratio"]
                     else np.nan for r in rows]
            coh = [float(r["coherence"]) if r["coherence"] else np.nan
                   for r in rows]
            name = label if len(by_lead) == 1 else f"{label} {lead}h"
            ax_r.plot(k, ratio, "o-", ms=3, label=name)
            ax_c.plot(k, coh, "o-", ms=3, label=name)
    ax_r.axhline(1.0, color="0.7", lw=0.8)
    ax_r.set_xlabel("wavenumber")
    ax_r.set_ylabel("forecast/truth variance ratio")
    ax_r.set_ylim(bottom=0.0)
    ax_r.legend(fontsize=7)
    ax_c.set_xlabel("wavenumber")
    ax_c.set_ylabel("coherence")
    ax_c.set_ylim(-0.05, 1.05)
    ax_c.legend(fontsize=7)
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    _save(fig, out_png)


def rmse_comparison_figure(csv_path: str, out_png: str, variable: str,
                           level_hpa: float | None = None) -> None:
    """Error growth with lead time, one curve per forecast source."""
    rows = [r for r in _read_rows(csv_path) if r["variable"] == variable]
    if level_hpa is not None:
        rows = [r for r in rows if float(r["level_hpa"]) == float(level_hpa)]
    if not rows:
        raise ConfigError(
            f"no rows for variable {variable!r} level {level_hpa!r} "
            f"in {csv_path}")
    by_model: dict[str, list] = {}
    for r in rows:
        by_model.setdefault(r["model_id"], []).append(r)
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    for model_id, model_rows in sorted(by_model.items()):
        model_rows.sort(key=lambda r: int(r["lead_hours"]))
        leads = [int(r["lead_hours"]) for r in model_rows]
        errs = [float(r["rmse"]) for r in model_rows]
        ax.plot(leads, errs, "o-", ms=4, label=model_id)
    ax.set_xlabel("lead (hours)")
    level_note = "" if level_hpa is None else f" @ {level_hpa:g} hPa"
    ax.set_ylabel(f"area-weighted rmse: {variable}{level_note}")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, out_png)
