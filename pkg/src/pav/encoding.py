"""Multi-resolution hash encoding of canonical positions, frequency encoding of directions."""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .autodiff import ParamTensor, Tape
from .errors import InvalidInputError

PRIMES = (1, 2654435761, 805459861)


@dataclass(frozen=True)
class HashGridConfig:
    levels: int = 8
    log2_table_size: int = 14
    features_per_level: int = 2
    base_resolution: int = 16
    finest_resolution: int = 256

    def __post_init__(self):
        if self.levels < 1:
            raise InvalidInputError("levels must be >= 1")
        if not 1 <= self.base_resolution <= self.finest_resolution:
            raise InvalidInputError("need 1 <= base_resolution <= finest_resolution")
        if self.log2_table_size < 1 or self.features_per_level < 1:
            raise InvalidInputError("table size and features per level must be positive")

    @property
    def table_size(self) -> int:
        return 1 << self.log2_table_size

    @property
    def output_width(self) -> int:
        return self.levels * self.features_per_level


def level_resolutions(config: HashGridConfig) -> list[int]:
    if config.levels == 1:
        return [config.finest_resolution]
    growth = np.exp((np.log(config.finest_resolution) - np.log(config.base_resolution)) / (config.levels - 1))
    # the small bias stops exp/log round-off from flooring an exact endpoint one below
    return [int(np.floor(config.base_resolution * growth ** level + 1e-6)) for level in range(config.levels)]


class HashGrid:
    def __init__(self, config: HashGridConfig, lo, hi, rng: np.random.Generator | None = None,
                 dtype=np.float32, name: str = "hashgrid"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = config
        self.lo = np.asarray(lo, dtype=np.float64)
        self.hi = np.asarray(hi, dtype=np.float64)
        if np.any(self.hi <= self.lo):
            raise InvalidInputError("empty bounding box")
        self.resolutions = np.array(level_resolutions(config), dtype=np.int64)
        tables = rng.uniform(-1e-4, 1e-4, size=(config.levels, config.table_size, config.features_per_level))
        self.table = ParamTensor(name, tables.astype(dtype), group=name)

    @property
    def params(self) -> list[ParamTensor]:
        return [self.table]

    def lookup(self, x: np.ndarray):
        """Flat table indices (P, L, 8) and trilinear weights (P, L, 8) for positions ``x``."""
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        unit = np.clip((x - self.lo) / (self.hi - self.lo), 0.0, 1.0)
        res = self.resolutions[None, :, None]
        scaled = unit[:, None, :] * res  # (P, L, 3)
        base = np.minimum(np.floor(scaled).astype(np.int64), res - 1)
        frac = scaled - base
        size = self.config.table_size
        idx = np.empty(base.shape[:2] + (8,), dtype=np.int64)
        w = np.empty(base.shape[:2] + (8,), dtype=np.float64)
        level_offset = (np.arange(self.config.levels, dtype=np.int64) * size)[None, :]
        for corner in range(8):
            bits = [(corner >> axis) & 1 for axis in range(3)]
            h = np.zeros(base.shape[:2], dtype=np.uint64)
            wc = np.ones(base.shape[:2])
            for axis, bit in enumerate(bits):
                coord = (base[..., axis] + bit).astype(np.uint64)
                h ^= coord * np.uint64(PRIMES[axis])
                wc = wc * (frac[..., axis] if bit else 1.0 - frac[..., axis])
            idx[..., corner] = (h & np.uint64(size - 1)).astype(np.int64) + level_offset
            w[..., corner] = wc
        return idx, w


@numba.njit(cache=True)
def _corners(unit, res, size, idx, w):
    s0 = unit[0] * res
    s1 = unit[1] * res
    s2 = unit[2] * res
    b0 = min(int(np.floor(s0)), res - 1)
    b1 = min(int(np.floor(s1)), res - 1)
    b2 = min(int(np.floor(s2)), res - 1)
    f0 = s0 - b0
    f1 = s1 - b1
    f2 = s2 - b2
    mask = size - 1
    for corner in range(8):
        c0 = b0 + (corner & 1)
        c1 = b1 + ((corner >> 1) & 1)
        c2 = b2 + ((corner >> 2) & 1)
        h = (c0 * 1) ^ (c1 * 2654435761) ^ (c2 * 805459861)
        idx[corner] = h & mask
        w[corner] = ((f0 if corner & 1 else 1.0 - f0) * (f1 if (corner >> 1) & 1 else 1.0 - f1)
                     * (f2 if (corner >> 2) & 1 else 1.0 - f2))


@numba.njit(cache=True)
def _gather(unit, resolutions, table, out):
    n_levels, size, n_feat = table.shape
    idx = np.empty(8, dtype=np.int64)
    w = np.empty(8, dtype=np.float64)
    for p in range(unit.shape[0]):
        for level in range(n_levels):
            _corners(unit[p], resolutions[level], size, idx, w)
            for f in range(n_feat):
                acc = 0.0
                for c in range(8):
                    acc += w[c] * table[level, idx[c], f]
                out[p, level * n_feat + f] = acc


@numba.njit(cache=True)
def _scatter(unit, resolutions, g, grad):
    n_levels, size, n_feat = grad.shape
    idx = np.empty(8, dtype=np.int64)
    w = np.empty(8, dtype=np.float64)
    for p in range(unit.shape[0]):
        for level in range(n_levels):
            _corners(unit[p], resolutions[level], size, idx, w)
            for c in range(8):
                for f in range(n_feat):
                    grad[level, idx[c], f] += w[c] * g[p, level * n_feat + f]


def hash_encode(grid: HashGrid, x_c, tape: Tape | None = None):
    """Concatenated per-level features of length L*F.

    With a tape the result is a :class:`Var` differentiable w.r.t. the grid table;
    without one a plain array is returned.
    """
    x = np.asarray(x_c, dtype=np.float64).reshape(-1, 3)
    unit = np.ascontiguousarray(np.clip((x - grid.lo) / (grid.hi - grid.lo), 0.0, 1.0))
    table = grid.table.values
    out = np.empty((len(unit), table.shape[0] * table.shape[2]), dtype=table.dtype)
    _gather(unit, grid.resolutions, table, out)
    if tape is None:
        return out
    leaf = tape.param(grid.table)

    def back(g):
        grad = np.zeros(table.shape, dtype=np.float64)
        _scatter(unit, grid.resolutions, np.ascontiguousarray(g, dtype=np.float64), grad)
        leaf.accumulate(grad.astype(table.dtype))

    return tape.record(out, [leaf], back)


@dataclass(frozen=True)
class DirectionEncoding:
    frequencies: int = 4

    def __post_init__(self):
        if self.frequencies < 1:
            raise InvalidInputError("need at least one frequency")

    @property
    def output_width(self) -> int:
        return 3 + 6 * self.frequencies


def encode_direction(d, enc: DirectionEncoding) -> np.ndarray:
    """[d, sin(2^k pi d), cos(2^k pi d) for k < K]; accepts (3,) or (N, 3)."""
    d = np.asarray(d, dtype=np.float64)
    flat = d.reshape(-1, 3)
    norms = np.linalg.norm(flat, axis=1)
    if np.any(norms == 0):
        raise InvalidInputError("zero view direction")
    if np.any(np.abs(norms - 1) > 1e-6):
        raise InvalidInputError("view directions must be unit length")
    parts = [flat]
    for k in range(enc.frequencies):
        arg = (2.0 ** k) * np.pi * flat
        parts += [np.sin(arg), np.cos(arg)]
    out = np.concatenate(parts, axis=1)
    return out[0] if d.ndim == 1 else out

