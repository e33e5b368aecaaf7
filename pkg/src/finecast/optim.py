"""Optimizer, learning-rate schedule, and gradient bookkeeping.

Parameters and gradients are dicts of named float64 arrays. The AdamW
update applies weight decay as a multiplicative factor on the parameters,
so a step with all-zero gradients (and fresh moments) shrinks every
parameter by exactly (1 - lr * weight_decay).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NonFiniteError, ShapeMismatchError

TERMINAL_LR = 3.75e-8
WARMUP_FRACTION = 0.1


def warmup_batches(total_batches: int, warmup_frac: float = WARMUP_FRACTION) -> int:
    return int(round(warmup_frac * total_batches))


@dataclass(frozen=True)
class LRSchedule:
    """Linear warmup to the peak, then half-cosine decay to the terminal rate."""

    peak: float
    total_batches: int
    terminal: float = TERMINAL_LR
    warmup_frac: float = WARMUP_FRACTION

    def __post_init__(self) -> None:
        if not self.peak >= self.terminal > 0.0:
            raise ConfigError(f"need peak >= terminal > 0, got "
                              f"{self.peak} and {self.terminal}")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigError(f"warmup fraction {self.warmup_frac} outside [0, 1)")
        if self.total_batches < 1:
            raise ConfigError("total_batches must be positive")

    def at(self, i: int) -> float:
        return lr_at(i, self.total_batches, self.peak, self.terminal,
                     self.warmup_frac)


def lr_at(i: int, total_batches: int, peak: float,
          terminal: float = TERMINAL_LR,
          warmup_frac: float = WARMUP_FRACTION) -> float:
    """Batch i learning rate: linear ramp to the peak over the first
    warmup_frac of batches, then cosine decay to the terminal rate.

    The ramp hits the peak exactly at the last warmup batch and the decay
    hits the terminal rate exactly at the final batch.
    """
    if total_batches < 1:
        raise ConfigError("total_batches must be positive")
    if not 0 <= i < total_batches:
        raise IndexError(f"batch index {i} outside [0, {total_batches})")
    w = warmup_batches(total_batches, warmup_frac)
    if i <= w:
        return peak * (i / w) if w > 0 else peak
    last = total_batches - 1
    if last == w:
        return peak
    s = (i - w) / (last - w)
    return terminal + (peak - terminal) * 0.5 * (1.0 + np.cos(np.pi * s))


@dataclass
class AdamState:
    """First and second moment accumulators plus the step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()})


def adamw_step(params: dict, grads: dict, state: AdamState, lr: float,
               beta1: float = 0.9, beta2: float = 0.95,
               eps: float = 1e-8, weight_decay: float = 0.1):
    """One decoupled-weight-decay Adam step; returns (new_params, new_state)."""
    if set(params) != set(grads):
        raise ShapeMismatchError(f"gradient sets {sorted(grads)} != "
                                 f"parameter sets {sorted(params)}")
    t = state.t + 1
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    decay = 1.0 - lr * weight_decay
    new_params, new_m, new_v = {}, {}, {}
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ShapeMismatchError(f"{name}: gradient shape {g.shape} != "
                                     f"parameter shape {theta.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in {name}")
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * (g * g)
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_params[name] = theta * decay - update
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(m=new_m, v=new_v, t=t)


def aggregate_gradients(items, average: bool = True) -> dict:
    """Elementwise mean of (key, grads) pairs via a fixed pairwise tree
    over the sorted keys (average=False gives the plain sum).

    Summation order depends only on the sorted keys, so the result is
    bit-identical however the items were produced, partitioned among
    workers, or ordered on arrival.
    """
    items = sorted(items, key=lambda kv: kv[0])
    if not items:
        raise ValueError("no gradients to aggregate")
    keys = [k for k, _ in items]
    if len(set(keys)) != len(keys):
        raise ValueError(f"duplicate gradient keys: {keys}")
    level = [g for _, g in items]
    while len(level) > 1:
        nxt = []
        for j in range(0, len(level) - 1, 2):
            a, b = level[j], level[j + 1]
            nxt.append({name: a[name] + b[name] for name in a})
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    total = {name: arr.copy() for name, arr in level[0].items()}
    if average:
        n = float(len(items))
        total = {name: arr / n for name, arr in total.items()}
    return total


def gradient_cosine_similarity(a: dict, b: dict) -> dict:
    """Per-set cosine similarity plus the minimum over well-defined sets.

    Built from the three inner products as sign(ab) * sqrt(ab^2 / (aa * bb))
    so identical (or exactly scaled) gradients score exactly 1.0. Sets where
    either side has zero norm are NaN and excluded from the minimum.
    """
    if set(a) != set(b):
        raise ShapeMismatchError(f"gradient sets differ: {sorted(a)} vs {sorted(b)}")
    out = {}
    finite = []
    for name in a:
        ab = float(np.vdot(a[name], b[name]))
        aa = float(np.vdot(a[name], a[name]))
        bb = float(np.vdot(b[name], b[name]))
        if aa == 0.0 or bb == 0.0:
            out[name] = float("nan")
            continue
        val = float(np.sign(ab) * np.sqrt((ab * ab) / (aa * bb)))
        out[name] = val
        finite.append(val)
    out["min"] = min(finite) if finite else float("nan")
    return out


def grads_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads.values())))
