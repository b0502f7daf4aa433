"""Photometric and depth losses and their weighted sum."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..autodiff import Var


@dataclass(frozen=True)
class LossWeights:
    color: float = 50.0
    depth: float = 10.0

    def __post_init__(self):
        if self.color < 0 or self.depth < 0:
            raise ValueError("loss weights must be non-negative")


def loss_color(rendered, target: np.ndarray):
    """Mean over rays of the squared L2 color error; accumulated in float64."""
    target = np.asarray(target, dtype=np.float64)
    if not isinstance(rendered, Var):
        diff = np.asarray(rendered, dtype=np.float64) - target
        return float((diff ** 2).sum(axis=-1).mean())
    diff = rendered.value.astype(np.float64) - target
    n = len(diff)
    value = np.array((diff ** 2).sum(axis=-1).mean())

    def back(g):
        rendered.accumulate((g * 2.0 * diff / n).astype(rendered.value.dtype))

    return rendered.tape.record(value, [rendered], back)


def loss_depth(expected, raster: np.ndarray, mask: np.ndarray):
    """Mean absolute depth error over masked rays; zero when the mask is empty."""
    raster = np.asarray(raster, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    values = expected.value if isinstance(expected, Var) else np.asarray(expected)
    diff = np.where(mask, values.astype(np.float64) - np.where(mask, raster, 0.0), 0.0)
    value = np.abs(diff).sum() / n if n else 0.0
    if not isinstance(expected, Var):
        return float(value)

    def back(g):
        if n:
            expected.accumulate((g * np.sign(diff) / n).astype(expected.value.dtype))

    return expected.tape.record(np.array(value), [expected], back)


def total_loss(color, depth, weights: LossWeights = LossWeights()):
    if not isinstance(color, Var) and not isinstance(depth, Var):
        return weights.color * color + weights.depth * depth
    parts = [(v, w) for v, w in ((color, weights.color), (depth, weights.depth)) if isinstance(v, Var)]
    value = np.array(weights.color * _value(color) + weights.depth * _value(depth))

    def back(g):
        for v, w in parts:
            v.accumulate(g * w)

    return parts[0][0].tape.record(value, [v for v, _ in parts], back)


def _value(x) -> float:
    return float(x.value) if isinstance(x, Var) else float(x)
