"""Stencil emulator: a shared-weight per-cell network over packed channels.

Every grid cell applies the same one-hidden-layer network to a feature
vector built from the two most recent normalized states (each channel
sampled over a square neighborhood, periodic in longitude and clamped at
the poles), plus broadcast time-of-day / time-of-year phases and per-row
latitude features. The network output is a normalized increment that is
rescaled per channel by dstd/std and added to the current state, so a
model with all-zero parameters is exactly persistence.

Gradients are computed by a hand-written reverse pass over the rollout,
including the two-step state recurrence (each prediction feeds the next
step as "current" and the one after as "previous").
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta

import numpy as np

from .container import read_container, write_container
from .errors import (
    ConfigError,
    NonFiniteError,
    ShapeMismatchError,
    SpaceMismatchError,
    VersionMismatchError,
)
from .grid import Grid
from .loss import pack_slots, packed_weighted_mse, unpack_slots
from .toydata import (
    NORMALIZED,
    PHYSICAL,
    FieldState,
    NormalizationStats,
    VariableLayout,
    day_fraction,
    denormalize,
    normalize,
    year_fraction,
)

CHECKPOINT_MAGIC = b"FCCKPT01"
CHECKPOINT_VERSION = 1
STEP_HOURS = 6
N_TIME_FEATURES = 4
N_POSITION_FEATURES = 2

PARAM_NAMES = ("w_in", "b_in", "w_out", "b_out")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs; channel count comes from the layout at build time."""

    hidden_width: int = 48
    stencil_radius: int = 1
    activation: str = "tanh"
    time_features: bool = True
    position_features: bool = True

    def __post_init__(self) -> None:
        if self.hidden_width < 1:
            raise ConfigError("hidden_width must be positive")
        if self.stencil_radius < 0:
            raise ConfigError("stencil_radius must be non-negative")
        if self.activation not in ("tanh", "linear"):
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def stencil_points(self) -> int:
        return (2 * self.stencil_radius + 1) ** 2

    def feature_count(self, n_channels: int) -> int:
        n = 2 * n_channels * self.stencil_points
        if self.time_features:
            n += N_TIME_FEATURES
        if self.position_features:
            n += N_POSITION_FEATURES
        return n

    def to_dict(self) -> dict:
        return {"hidden_width": self.hidden_width,
                "stencil_radius": self.stencil_radius,
                "activation": self.activation,
                "time_features": self.time_features,
                "position_features": self.position_features}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass(frozen=True)
class EmulatorContext:
    """Precomputed per-run constants shared by every forward/backward step."""

    config: ModelConfig
    layout: VariableLayout
    n_channels: int
    nlat: int
    nlon: int
    offsets: tuple[tuple[int, int], ...]
    scale: np.ndarray          # (C,) dstd/std increment scale
    lat_block: np.ndarray | None   # (2, nlat, nlon) sin/cos latitude
    stats_digest: str


def make_context(config: ModelConfig, stats: NormalizationStats,
                 grid: Grid) -> EmulatorContext:
    layout = stats.layout
    slots = layout.slots()
    scale = np.array([stats.dstd[vi, li] / stats.std[vi, li] for vi, li in slots])
    r = config.stencil_radius
    offsets = tuple((di, dj) for di in range(-r, r + 1) for dj in range(-r, r + 1))
    lat_block = None
    if config.position_features:
        lat_block = np.stack([
            np.broadcast_to(np.sin(grid.lats)[:, None], (grid.nlat, grid.nlon)),
            np.broadcast_to(np.cos(grid.lats)[:, None], (grid.nlat, grid.nlon)),
        ]).copy()
    return EmulatorContext(config=config, layout=layout, n_channels=len(slots),
                           nlat=grid.nlat, nlon=grid.nlon, offsets=offsets,
                           scale=scale, lat_block=lat_block,
                           stats_digest=stats.digest)


def param_shapes(config: ModelConfig, n_channels: int) -> dict[str, tuple]:
    f = config.feature_count(n_channels)
    h = config.hidden_width
    return {"w_in": (h, f), "b_in": (h,), "w_out": (n_channels, h),
            "b_out": (n_channels,)}


def init_params(config: ModelConfig, n_channels: int, seed: int) -> dict:
    """Weights ~ N(0, 1/fan_in), biases zero."""
    rng = np.random.default_rng(seed)
    shapes = param_shapes(config, n_channels)
    params = {}
    for name in PARAM_NAMES:
        shape = shapes[name]
        if name.startswith("b"):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[1]), shape)
    return params


def zero_params(config: ModelConfig, n_channels: int) -> dict:
    return {name: np.zeros(shape)
            for name, shape in param_shapes(config, n_channels).items()}


def validate_params(params: dict, config: ModelConfig, n_channels: int) -> None:
    shapes = param_shapes(config, n_channels)
    if set(params) != set(shapes):
        raise ShapeMismatchError(f"parameter sets {sorted(params)} != "
                                 f"expected {sorted(shapes)}")
    for name, shape in shapes.items():
        if params[name].shape != shape:
            raise ShapeMismatchError(
                f"{name} has shape {params[name].shape}, expected {shape}")


def _shift2d(a: np.ndarray, di: int, dj: int) -> np.ndarray:
    """out[..., i, j] = a[..., clip(i + di), (j + dj) mod nlon]."""
    nlat = a.shape[-2]
    rows = np.clip(np.arange(nlat) + di, 0, nlat - 1)
    out = a[..., rows, :]
    if dj:
        out = np.roll(out, -dj, axis=-1)
    return out


def _shift2d_adjoint(g: np.ndarray, di: int, dj: int) -> np.ndarray:
    """Transpose of _shift2d: scatter-add rows back, un-roll longitude."""
    if dj:
        g = np.roll(g, dj, axis=-1)
    nlat = g.shape[-2]
    rows = np.clip(np.arange(nlat) + di, 0, nlat - 1)
    out = np.zeros_like(g)
    np.add.at(np.moveaxis(out, -2, 0), rows, np.moveaxis(g, -2, 0))
    return out


def _time_block(t: datetime, nlat: int, nlon: int) -> np.ndarray:
    df = 2.0 * np.pi * day_fraction(t)
    yf = 2.0 * np.pi * year_fraction(t)
    vals = np.array([np.sin(df), np.cos(df), np.sin(yf), np.cos(yf)])
    return np.broadcast_to(vals[:, None, None], (4, nlat, nlon)).copy()


def _features(ctx: EmulatorContext, z_prev: np.ndarray, z_curr: np.ndarray,
              t_curr: datetime) -> np.ndarray:
    dtype = z_curr.dtype
    blocks = [_shift2d(z, di, dj) for z in (z_prev, z_curr)
              for di, dj in ctx.offsets]
    if ctx.config.time_features:
        blocks.append(_time_block(t_curr, ctx.nlat, ctx.nlon).astype(dtype, copy=False))
    if ctx.config.position_features:
        blocks.append(ctx.lat_block.astype(dtype, copy=False))
    return np.concatenate(blocks, axis=0)


def _features_adjoint(ctx: EmulatorContext, g_x: np.ndarray):
    """Split feature-space gradient into (dz_prev, dz_curr); constants dropped."""
    c = ctx.n_channels
    dz = [np.zeros((c, ctx.nlat, ctx.nlon)), np.zeros((c, ctx.nlat, ctx.nlon))]
    pos = 0
    for si in range(2):
        for di, dj in ctx.offsets:
            dz[si] += _shift2d_adjoint(g_x[pos:pos + c], di, dj)
            pos += c
    return dz[0], dz[1]


def _forward_step(params: dict, ctx: EmulatorContext, z_prev: np.ndarray,
                  z_curr: np.ndarray, t_curr: datetime):
    """One 6 h step; returns the prediction and the cache for the reverse pass."""
    x = _features(ctx, z_prev, z_curr, t_curr)
    pre = np.tensordot(params["w_in"], x, axes=([1], [0])) \
        + params["b_in"][:, None, None]
    h = np.tanh(pre) if ctx.config.activation == "tanh" else pre
    delta = np.tensordot(params["w_out"], h, axes=([1], [0])) \
        + params["b_out"][:, None, None]
    z_next = z_curr + ctx.scale[:, None, None] * delta
    return z_next, (x, h)


def _backward_step(params: dict, ctx: EmulatorContext, cache, g_z: np.ndarray,
                   grads: dict):
    """Accumulate parameter grads; return (dz_prev, dz_curr) for the carry."""
    x, h = cache
    g_delta = g_z * ctx.scale[:, None, None]
    grads["w_out"] += np.tensordot(g_delta, h, axes=([1, 2], [1, 2]))
    grads["b_out"] += g_delta.sum(axis=(1, 2))
    g_h = np.tensordot(params["w_out"], g_delta, axes=([0], [0]))
    g_pre = g_h * (1.0 - h * h) if ctx.config.activation == "tanh" else g_h
    grads["w_in"] += np.tensordot(g_pre, x, axes=([1, 2], [1, 2]))
    grads["b_in"] += g_pre.sum(axis=(1, 2))
    g_x = np.tensordot(params["w_in"], g_pre, axes=([0], [0]))
    dz_prev, dz_curr = _features_adjoint(ctx, g_x)
    dz_curr += g_z  # persistence passthrough
    return dz_prev, dz_curr


def _check_inputs(ctx: EmulatorContext, params: dict, z0: np.ndarray,
                  z1: np.ndarray) -> None:
    validate_params(params, ctx.config, ctx.n_channels)
    shape = (ctx.n_channels, ctx.nlat, ctx.nlon)
    for name, z in (("z0", z0), ("z1", z1)):
        if z.shape != shape:
            raise ShapeMismatchError(f"{name} has shape {z.shape}, expected {shape}")


def _inference_cast(params: dict, ctx: EmulatorContext, z0: np.ndarray,
                    z1: np.ndarray, dtype):
    """Cast parameters, context constants, and states for reduced-precision
    inference; the 64-bit path is returned untouched."""
    if np.dtype(dtype) == np.float64:
        return params, ctx, z0, z1
    lat_block = None if ctx.lat_block is None else ctx.lat_block.astype(dtype)
    ctx_c = replace(ctx, scale=ctx.scale.astype(dtype), lat_block=lat_block)
    return ({name: params[name].astype(dtype) for name in PARAM_NAMES},
            ctx_c, z0.astype(dtype), z1.astype(dtype))


def rollout_packed(params: dict, ctx: EmulatorContext, z0: np.ndarray,
                   z1: np.ndarray, t1: datetime, n_steps: int,
                   dtype=np.float64) -> np.ndarray:
    """Predictions (n_steps, C, nlat, nlon) at t1 + 6 h, ..., t1 + 6 h * n_steps.

    dtype=np.float32 runs the whole rollout in single precision (training
    stays 64-bit; this is an inference-only mode)."""
    _check_inputs(ctx, params, z0, z1)
    params, ctx, z0, z1 = _inference_cast(params, ctx, z0, z1, dtype)
    preds = np.empty((n_steps, ctx.n_channels, ctx.nlat, ctx.nlon), dtype=dtype)
    prev, curr = z0, z1
    for k in range(n_steps):
        t = t1 + timedelta(hours=STEP_HOURS * k)
        nxt, _ = _forward_step(params, ctx, prev, curr, t)
        if not np.all(np.isfinite(nxt)):
            raise NonFiniteError(f"non-finite prediction at step {k + 1}")
        preds[k] = nxt
        prev, curr = curr, nxt
    return preds


def rollout_loss(params: dict, ctx: EmulatorContext, z0: np.ndarray,
                 z1: np.ndarray, t1: datetime, targets: np.ndarray,
                 alpha: np.ndarray, grid: Grid,
                 n_steps_norm: int | None = None) -> float:
    """Forward-only loss of a rollout against packed normalized targets."""
    n = targets.shape[0]
    preds = rollout_packed(params, ctx, z0, z1, t1, n)
    return packed_weighted_mse(preds, targets, alpha,
                               grid, n_steps_norm or n)


def backprop_rollout(params: dict, ctx: EmulatorContext, z0: np.ndarray,
                     z1: np.ndarray, t1: datetime, targets: np.ndarray,
                     alpha: np.ndarray, grid: Grid,
                     n_steps_norm: int | None = None):
    """Loss, parameter gradients, and predictions for one rollout.

    n_steps_norm overrides the 1/n loss normalizer so a trajectory split
    into sub-segments can keep the full-horizon normalization.
    """
    _check_inputs(ctx, params, z0, z1)
    n_steps = targets.shape[0]
    if targets.shape[1:] != (ctx.n_channels, ctx.nlat, ctx.nlon):
        raise ShapeMismatchError(f"targets have shape {targets.shape}")
    norm = n_steps_norm or n_steps

    caches = []
    preds = np.empty((n_steps, ctx.n_channels, ctx.nlat, ctx.nlon))
    prev, curr = z0, z1
    for k in range(n_steps):
        t = t1 + timedelta(hours=STEP_HOURS * k)
        nxt, cache = _forward_step(params, ctx, prev, curr, t)
        if not np.all(np.isfinite(nxt)):
            raise NonFiniteError(f"non-finite prediction at step {k + 1}")
        preds[k] = nxt
        caches.append(cache)
        prev, curr = curr, nxt

    frac = grid.row_areas / (4.0 * np.pi)
    diffs = preds - targets
    per = np.einsum("tcij,i->tc", diffs * diffs, frac)
    loss = float(np.sum(per @ alpha) / norm)
    if not np.isfinite(loss):
        raise NonFiniteError("non-finite rollout loss")

    # dL/dpred[k] before recurrence contributions
    direct = (2.0 / norm) * alpha[None, :, None, None] \
        * frac[None, None, :, None] * diffs

    grads = {name: np.zeros_like(params[name]) for name in PARAM_NAMES}
    carry = [np.zeros_like(preds[0]) for _ in range(n_steps)]
    for k in range(n_steps - 1, -1, -1):
        g_z = direct[k] + carry[k]
        dz_prev, dz_curr = _backward_step(params, ctx, caches[k], g_z, grads)
        if k - 1 >= 0:
            carry[k - 1] += dz_curr
        if k - 2 >= 0:
            carry[k - 2] += dz_prev
    return loss, grads, preds


def pack_state(state: FieldState, stats: NormalizationStats) -> np.ndarray:
    """FieldState in either space to packed normalized channels (C, H, W)."""
    z = state if state.space == NORMALIZED else normalize(state, stats)
    return pack_slots(z.values, stats.layout)


def forecast_states(params: dict, config: ModelConfig, stats: NormalizationStats,
                    prev_state: FieldState, curr_state: FieldState,
                    n_steps: int, grid: Grid,
                    dtype=np.float64) -> list[FieldState]:
    """Physical-space forecast sequence at 6 h leads from two input states."""
    if prev_state.time + timedelta(hours=STEP_HOURS) != curr_state.time:
        raise ValueError(
            f"input states must be 6 h apart, got {prev_state.time} "
            f"and {curr_state.time}")
    for s in (prev_state, curr_state):
        if s.layout.digest != stats.layout.digest:
            raise SpaceMismatchError("input layout differs from stats layout")
    ctx = make_context(config, stats, grid)
    z0 = pack_state(prev_state, stats)
    z1 = pack_state(curr_state, stats)
    preds = rollout_packed(params, ctx, z0, z1, curr_state.time, n_steps,
                           dtype=dtype)
    out = []
    for k in range(n_steps):
        t = curr_state.time + timedelta(hours=STEP_HOURS * (k + 1))
        z = FieldState(values=unpack_slots(np.asarray(preds[k], dtype=np.float64),
                                           stats.layout),
                       time=t, space=NORMALIZED, layout=stats.layout)
        out.append(denormalize(z, stats))
    return out


def grad_check(params: dict, ctx: EmulatorContext, z0: np.ndarray,
               z1: np.ndarray, t1: datetime, targets: np.ndarray,
               alpha: np.ndarray, grid: Grid,
               steps=(1e-3, 1e-4, 1e-5, 1e-6, 1e-7),
               probes_per_set: int = 2, seed: int = 0) -> list[dict]:
    """Central-difference probes of the analytic gradient at randomly
    chosen parameter coordinates, one row per (set, coordinate, step)."""
    loss0, grads, _ = backprop_rollout(params, ctx, z0, z1, t1, targets,
                                       alpha, grid)
    rng = np.random.default_rng(seed)
    rows = []
    for name in PARAM_NAMES:
        size = params[name].size
        n = min(probes_per_set, size)
        coords = rng.choice(size, size=n, replace=False)
        for coord in coords:
            idx = np.unravel_index(int(coord), params[name].shape)
            analytic = float(grads[name][idx])
            for eps in steps:
                def shifted(sign):
                    p = dict(params)
                    bumped = params[name].copy()
                    bumped[idx] += sign * eps
                    p[name] = bumped
                    return rollout_loss(p, ctx, z0, z1, t1, targets, alpha, grid)
                numeric = (shifted(+1.0) - shifted(-1.0)) / (2.0 * eps)
                denom = max(abs(analytic), abs(numeric), 1e-30)
                rows.append({"set": name, "coord": int(coord), "step": eps,
                             "analytic": analytic, "numeric": numeric,
                             "rel_err": abs(numeric - analytic) / denom})
    return rows


def grad_check_report(rows: list[dict]) -> dict:
    """Per-set max over coordinates of the best-over-steps relative error."""
    best = {}
    for row in rows:
        key = (row["set"], row["coord"])
        if key not in best or row["rel_err"] < best[key]:
            best[key] = row["rel_err"]
    report = {}
    for (name, _), err in best.items():
        report[name] = max(report.get(name, 0.0), err)
    report["max"] = max(report.values())
    return report


def save_checkpoint(path: str, params: dict, config: ModelConfig,
                    stats: NormalizationStats, provenance: dict | None = None) -> None:
    layout = stats.layout
    validate_params(params, config, len(layout.slots()))
    manifest = [{"name": name, "shape": list(params[name].shape)}
                for name in PARAM_NAMES]
    header = {
        "version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "layout": layout.to_dict(),
        "stats_digest": stats.digest,
        "params": manifest,
        "provenance": provenance or {},
    }
    payload = b"".join(np.ascontiguousarray(params[name], dtype="<f8").tobytes()
                       for name in PARAM_NAMES)
    write_container(path, CHECKPOINT_MAGIC, header, payload)


def load_checkpoint(path: str, expect_stats_digest: str | None = None):
    """Returns (params, config, meta); meta carries layout, digest, provenance."""
    header, payload = read_container(path, CHECKPOINT_MAGIC)
    if header.get("version") != CHECKPOINT_VERSION:
        raise VersionMismatchError(
            f"checkpoint version {header.get('version')} != {CHECKPOINT_VERSION}")
    if expect_stats_digest is not None and header["stats_digest"] != expect_stats_digest:
        warnings.warn(
            "checkpoint was written against different normalization stats "
            f"(checkpoint {header['stats_digest']}, expected {expect_stats_digest})",
            stacklevel=2)
    config = ModelConfig.from_dict(header["config"])
    layout = VariableLayout.from_dict(header["layout"])
    params = {}
    offset = 0
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        raw = payload[offset:offset + 8 * count]
        params[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        offset += 8 * count
    validate_params(params, config, len(layout.slots()))
    meta = {"layout": layout, "stats_digest": header["stats_digest"],
            "provenance": header["provenance"]}
    return params, config, meta
