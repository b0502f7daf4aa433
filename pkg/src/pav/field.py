"""Appearance-conditioned radiance field living in the canonical space of the head mesh.

A shared density network reads hash-encoded canonical positions and the frame's
expression; an appearance-specific offset network and the color network read
the appearance embedding gathered from the nearest mesh triangle.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Mlp, ParamTensor, Tape, Var
from .encoding import DirectionEncoding, HashGrid, HashGridConfig, encode_direction, hash_encode
from .errors import InvalidInputError
from .geometry import BvhPack, Mesh, bilinear_taps, canonicalize, deformation_gradients

EMBEDDINGS = ("lnf", "glo", "none")
BOX_MARGIN = 0.2


@dataclass(frozen=True)
class FieldConfig:
    grid: HashGridConfig = field(default_factory=HashGridConfig)
    texture_resolution: int = 64
    texture_channels: int = 8
    glo_width: int = 64
    expression_dim: int = 8
    direction_frequencies: int = 4
    density_hidden: tuple[int, ...] = (64, 64)
    offset_hidden: tuple[int, ...] = (64, 64)
    color_hidden: tuple[int, ...] = (64, 64, 64)
    embedding: str = "lnf"
    density_offset: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.embedding not in EMBEDDINGS:
            raise InvalidInputError(f"embedding must be one of {EMBEDDINGS}, got {self.embedding!r}")

    @property
    def embedding_width(self) -> int:
        return self.glo_width if self.embedding == "glo" else self.texture_channels


class AppearanceTexture:
    """Learnable (H, W, C) feature atlas over the mesh UV domain."""

    def __init__(self, index: int, resolution: int = 64, channels: int = 8,
                 rng: np.random.Generator | None = None, dtype=np.float32, name: str | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.index = index
        init = rng.uniform(-1e-2, 1e-2, size=(resolution, resolution, channels)).astype(dtype)
        self.param = ParamTensor(name or f"texture.{index}", init, group="embedding")

    @property
    def values(self) -> np.ndarray:
        return self.param.values


class GloVector:
    def __init__(self, index: int, width: int = 64, rng: np.random.Generator | None = None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.index = index
        self.param = ParamTensor(f"glo.{index}", (1e-2 * rng.standard_normal(width)).astype(dtype),
                                 group="embedding")

    @property
    def values(self) -> np.ndarray:
        return self.param.values


class FieldNetworks:
    def __init__(self, config: FieldConfig, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        dtype = np.dtype(config.dtype)
        z = config.embedding_width
        d = DirectionEncoding(config.direction_frequencies).output_width
        e = config.expression_dim
        self.mlp_density = Mlp("mlp_density", [config.grid.output_width + e, *config.density_hidden, 1],
                               rng=rng, dtype=dtype, group="density")
        self.mlp_offset = Mlp("mlp_offset", [z + e, *config.offset_hidden, 1], rng=rng, dtype=dtype, group="offset")
        self.mlp_color = Mlp("mlp_color", [z + d + 1, *config.color_hidden, 3], output="sigmoid",
                             rng=rng, dtype=dtype, group="color")

    @property
    def params(self) -> list[ParamTensor]:
        return self.mlp_density.params + self.mlp_offset.params + self.mlp_color.params


def _var(x, tape: Tape) -> Var:
    return x if isinstance(x, Var) else tape.constant(np.asarray(x))


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return Tape()


def eval_density_shared(nets: FieldNetworks, phi, e) -> Var:
    """Raw shared density (P,) from encoded positions and expressions; no activation."""
    tape = _tape_of(phi, e)
    x = ad.concat([_var(phi, tape), _var(e, tape)])
    return ad.reshape(nets.mlp_density(x), (-1,))


def eval_density_offset(nets: FieldNetworks, z, e) -> Var:
    tape = _tape_of(z, e)
    x = ad.concat([_var(z, tape), _var(e, tape)])
    return ad.reshape(nets.mlp_offset(x), (-1,))


def eval_color(nets: FieldNetworks, z, d_enc, sigma_final) -> Var:
    tape = _tape_of(z, d_enc, sigma_final)
    sigma = _var(sigma_final, tape)
    sigma = ad.reshape(sigma, (-1, 1))
    x = ad.concat([_var(z, tape), _var(d_enc, tape), sigma])
    return nets.mlp_color(x)


def vertex_appearance(texture: Var, uvs: np.ndarray, triangles: np.ndarray, tri: np.ndarray,
                      bary: np.ndarray) -> Var:
    """Barycentric blend of atlas features sampled at the corner UVs of each point's triangle."""
    h, w, c = texture.shape
    rows, cols, wts = bilinear_taps(uvs, h, w)  # per vertex
    flat_tex = rows * w + cols
    wts = wts.astype(texture.value.dtype)
    tex = texture.value.reshape(h * w, c)
    vfeat = np.einsum("vk,vkc->vc", wts, tex[flat_tex])  # (V, C)
    corners = triangles[tri]  # (P, 3)
    b = bary.astype(texture.value.dtype)
    out = np.einsum("pk,pkc->pc", b, vfeat[corners])
    n_vert = len(uvs)

    def back(g):
        gv = np.empty((n_vert, c), dtype=g.dtype)
        contrib = b[:, :, None] * g[:, None, :]  # (P, 3, C)
        ids = corners.ravel()
        for ch in range(c):
            gv[:, ch] = np.bincount(ids, weights=contrib[..., ch].ravel(), minlength=n_vert)
        gt = np.empty((h * w, c), dtype=g.dtype)
        tcontrib = wts[:, :, None] * gv[:, None, :]  # (V, 4, C)
        tids = flat_tex.ravel()
        for ch in range(c):
            gt[:, ch] = np.bincount(tids, weights=tcontrib[..., ch].ravel(), minlength=h * w)
        texture.accumulate(gt.reshape(h, w, c))

    return texture.tape.record(out, [texture], back)


def gather_rows(table: Sequence[Var], index: np.ndarray) -> Var:
    """Stack of per-appearance vectors selected per point."""
    tape = table[0].tape
    stacked = np.stack([t.value for t in table])
    out = stacked[index]

    def back(g):
        for j, t in enumerate(table):
            sel = index == j
            if sel.any():
                t.accumulate(g[sel].sum(axis=0))

    return tape.record(out, list(table), back)


@dataclass
class FieldSample:
    sigma_shared_raw: np.ndarray
    offset_raw: np.ndarray
    sigma: np.ndarray
    color: np.ndarray


@dataclass
class FieldOutput:
    sigma_shared_raw: Var
    offset_raw: Var | None
    sigma: Var
    color: Var
    embedding: Var


class RadianceField:
    """All learnable state: hash grid, appearance embeddings and the three networks."""

    def __init__(self, config: FieldConfig, canonical: Mesh, n_appearances: int, seed: int = 0):
        if n_appearances < 1:
            raise InvalidInputError("need at least one appearance")
        self.config = config
        self.canonical = canonical
        self.n_appearances = n_appearances
        dtype = np.dtype(config.dtype)
        rng = np.random.default_rng(seed)
        lo, hi = canonical.bounds(BOX_MARGIN)
        self.grid = HashGrid(config.grid, lo, hi, rng=rng, dtype=dtype)
        self.direction = DirectionEncoding(config.direction_frequencies)
        self.textures: list[AppearanceTexture] = []
        self.glo: list[GloVector] = []
        if config.embedding == "lnf":
            self.textures = [AppearanceTexture(j, config.texture_resolution, config.texture_channels, rng, dtype)
                             for j in range(n_appearances)]
        elif config.embedding == "none":
            self.textures = [AppearanceTexture(0, config.texture_resolution, config.texture_channels, rng, dtype,
                                               name="texture.shared")]
        else:
            self.glo = [GloVector(j, config.glo_width, rng, dtype) for j in range(n_appearances)]
        self.nets = FieldNetworks(config, rng)

    @property
    def params(self) -> list[ParamTensor]:
        emb = [t.param for t in self.textures] + [g.param for g in self.glo]
        return self.grid.params + emb + self.nets.params

    def texture_for(self, appearance: int) -> AppearanceTexture:
        if self.config.embedding == "none":
            return self.textures[0]
        return self.textures[appearance]

    def embedding(self, tape: Tape, tri: np.ndarray, bary: np.ndarray, appearance: np.ndarray) -> Var:
        cfg = self.config
        if cfg.embedding == "glo":
            return gather_rows([tape.param(g.param) for g in self.glo], appearance)
        if cfg.embedding == "none":
            appearance = np.zeros_like(appearance)
        present = np.unique(appearance)
        if len(present) == 1:
            tex = tape.param(self.texture_for(int(present[0])).param)
            return vertex_appearance(tex, self.canonical.uvs, self.canonical.triangles, tri, bary)
        parts, order = [], []
        for j in present:
            sel = np.flatnonzero(appearance == j)
            tex = tape.param(self.texture_for(int(j)).param)
            parts.append(vertex_appearance(tex, self.canonical.uvs, self.canonical.triangles, tri[sel], bary[sel]))
            order.append(sel)
        return _scatter_rows(parts, np.concatenate(order), len(appearance))

    def forward(self, tape: Tape, x_c: np.ndarray, tri: np.ndarray, bary: np.ndarray,
                appearance: np.ndarray, expression: np.ndarray, directions: np.ndarray) -> FieldOutput:
        """Evaluate P canonicalized points; expression (P, E), directions (P, 3) unit vectors."""
        dtype = np.dtype(self.config.dtype)
        phi = hash_encode(self.grid, x_c, tape)
        e = tape.constant(np.asarray(expression, dtype=dtype))
        shared = eval_density_shared(self.nets, phi, e)
        z = self.embedding(tape, tri, bary, np.asarray(appearance))
        offset = None
        pre = shared
        if self.config.density_offset:
            offset = eval_density_offset(self.nets, z, e)
            pre = ad.add(shared, offset)
        sigma = ad.softplus(pre)
        d_enc = tape.constant(encode_direction(directions, self.direction).astype(dtype))
        color = eval_color(self.nets, z, d_enc, sigma)
        return FieldOutput(shared, offset, sigma, color, z)


def _scatter_rows(parts: list[Var], order: np.ndarray, n: int) -> Var:
    values = np.concatenate([p.value for p in parts])
    out = np.empty((n,) + values.shape[1:], dtype=values.dtype)
    out[order] = values
    sizes = np.cumsum([len(p.value) for p in parts])[:-1]

    def back(g):
        for p, rows in zip(parts, np.split(order, sizes)):
            p.accumulate(g[rows])

    return parts[0].tape.record(out, parts, back)


class FrameSet:
    """Tracked meshes of a set of frames with cached per-triangle deformation gradients."""

    def __init__(self, canonical: Mesh, meshes: Sequence[Mesh], expressions: np.ndarray,
                 appearances: Sequence[int]):
        if len(meshes) != len(expressions) or len(meshes) != len(appearances):
            raise InvalidInputError("meshes, expressions and appearances must align")
        self.canonical = canonical
        self.meshes = list(meshes)
        self.expressions = np.asarray(expressions, dtype=np.float64)
        self.appearances = np.asarray(appearances, dtype=np.int64)
        self.pack = BvhPack(self.meshes)
        canon_corners = canonical.triangle_vertices()
        self.gradients = np.stack([deformation_gradients(m.triangle_vertices(), canon_corners) for m in self.meshes])
        self.bounds = [m.bounds(BOX_MARGIN) for m in self.meshes]

    def __len__(self):
        return len(self.meshes)

    def canonicalize(self, points: np.ndarray, frame: np.ndarray):
        """Nearest triangle on each point's frame mesh and the warped canonical position."""
        tri, bary, _ = self.pack.query(points, frame)
        x_c = canonicalize(points, self.gradients[frame, tri])
        return x_c, tri, bary


def eval_point(model: RadianceField, frames: FrameSet, frame: int, appearance: int, x, d) -> FieldSample:
    """Full pipeline for one observed point seen along direction ``d``."""
    x = np.asarray(x, dtype=np.float64).reshape(1, 3)
    d = np.asarray(d, dtype=np.float64).reshape(1, 3)
    idx = np.array([frame])
    x_c, tri, bary = frames.canonicalize(x, idx)
    tape = Tape()
    out = model.forward(tape, x_c, tri, bary, np.array([appearance]), frames.expressions[idx], d)
    tape.release()
    offset = out.offset_raw.value[0] if out.offset_raw is not None else 0.0
    return FieldSample(float(out.sigma_shared_raw.value[0]), float(offset), float(out.sigma.value[0]),
                       out.color.value[0].copy())
