"""Procedural deformable head benchmark.

One canonical UV-sphere head with smooth blendshapes is shared by every
appearance. Each appearance owns an albedo pattern and, optionally, a layer of
extra geometry (a beard or a hair cap) that the tracked mesh does not contain.
Ground truth is ray-cast with Lambertian shading under a light that is rigidly
attached to the head.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import Mesh
from ..rasterizer import ray_cast, rasterize_depth
from ..renderer import Camera, generate_rays, pixel_grid
from .dataset import SceneDataset, TrainingFrame

HEAD_SCALE = np.array([0.8, 1.0, 0.88])
LIGHT = np.array([0.4, 0.5, 0.75]) / np.linalg.norm([0.4, 0.5, 0.75])
AMBIENT = 0.5
# region centers as (polar angle from +y, azimuth from +z toward +x), width in radians
BLENDSHAPES = [
    # name, center, width, amplitude, direction ("normal" or a fixed vector)
    ("jaw", (2.2, 0.0), 0.45, 0.06, (0.0, -1.0, 0.0)),
    ("brow", (1.05, 0.0), 0.35, 0.04, (0.0, 1.0, 0.0)),
    ("cheek_l", (1.75, 0.75), 0.35, 0.05, "normal"),
    ("cheek_r", (1.75, -0.75), 0.35, 0.05, "normal"),
    ("mouth", (1.95, 0.0), 0.3, 0.04, "normal"),
    ("nose", (1.55, 0.0), 0.25, 0.04, "normal"),
    ("crown", (0.35, 0.0), 0.5, 0.05, "normal"),
    ("chin", (2.5, 0.0), 0.35, 0.05, (0.0, 0.0, 1.0)),
]


@dataclass(frozen=True)
class SceneConfig:
    appearances: int = 3
    frames: int = 50  # per appearance, train and test together
    test_frames: int = 10
    image_size: int = 64
    expression_dim: int = 8
    lat_segments: int = 16
    lon_segments: int = 32
    camera_distance: float = 3.5
    focal_scale: float = 1.45  # focal length in units of image width
    max_yaw_deg: float = 20.0
    max_pitch_deg: float = 10.0
    max_roll_deg: float = 5.0
    max_shift: float = 0.05
    max_expression: float = 1.0

    @property
    def train_frames(self) -> int:
        return self.frames - self.test_frames


def _direction(polar, azimuth):
    return np.stack([np.sin(polar) * np.sin(azimuth), np.cos(polar), np.sin(polar) * np.cos(azimuth)], axis=-1)


def _bump(units: np.ndarray, center, width) -> np.ndarray:
    c = _direction(*center)
    angle = np.arccos(np.clip(units @ c, -1.0, 1.0))
    return np.exp(-0.5 * (angle / width) ** 2)


def _layer(units: np.ndarray, appearance: int) -> tuple[np.ndarray, float]:
    """Strength in [0, 1] and peak thickness of an appearance's extra layer."""
    kind = appearance % 3
    if kind == 1:
        return _bump(units, (2.35, 0.0), 0.4), 0.05
    if kind == 2:
        return _bump(units, (0.45, np.pi), 0.7), 0.07
    return np.zeros(len(units)), 0.0


def uv_sphere(lat: int, lon: int):
    """Vertices on the unit sphere, triangles and UVs; the seam sits at the back of the head."""
    rows = []
    uvs = []
    for i in range(lat + 1):
        v = i / lat
        for k in range(lon + 1):
            u = k / lon
            if i in (0, lat):
                u = min((k + 0.5) / lon, 1.0)
            rows.append(_direction(np.pi * v, 2 * np.pi * u - np.pi))
            uvs.append((u, v))
    verts = np.array(rows)
    idx = lambda i, k: i * (lon + 1) + k
    tris = []
    for i in range(lat):
        for k in range(lon):
            a, b, c, d = idx(i, k), idx(i, k + 1), idx(i + 1, k), idx(i + 1, k + 1)
            if i == 0:
                tris.append((a, c, d))
            elif i == lat - 1:
                tris.append((a, c, b))
            else:
                tris.append((a, c, d))
                tris.append((a, d, b))
    return verts, np.array(tris, dtype=np.int64), np.clip(np.array(uvs), 0.0, 1.0)


class HeadModel:
    """Canonical head geometry, blendshape basis and per-appearance extras."""

    def __init__(self, config: SceneConfig):
        self.config = config
        units, tris, uvs = uv_sphere(config.lat_segments, config.lon_segments)
        self.units = units
        base = (units * HEAD_SCALE).astype(np.float32).astype(np.float64)
        self.canonical = Mesh(base, tris, uvs)
        normals = self.canonical.vertex_normals()
        basis = []
        for k in range(config.expression_dim):
            _, center, width, amp, direction = BLENDSHAPES[k % len(BLENDSHAPES)]
            w = amp * _bump(units, center, width)[:, None]
            vec = normals if direction == "normal" else np.asarray(direction)[None, :]
            basis.append(w * vec)
        self.blendshapes = np.stack(basis)  # (E, V, 3)
        self.normals = normals

    def extra_geometry(self, appearance: int) -> np.ndarray:
        """Per-vertex outward thickness of the appearance's extra layer (beard or hair)."""
        strength, amplitude = _layer(self.units, appearance)
        return amplitude * strength

    def albedo(self, appearance: int, uv: np.ndarray, units: np.ndarray) -> np.ndarray:
        """Smooth procedural albedo; ``units`` are canonical unit-sphere directions of the points."""
        u, v = uv[:, 0], uv[:, 1]
        kind = appearance % 3
        palette_rng = np.random.default_rng(1000 + appearance)
        jitter = 0.08 * (palette_rng.random(3) - 0.5) if appearance >= 3 else np.zeros(3)
        if kind == 0:
            base, accent = np.array([0.85, 0.64, 0.5]), np.array([0.55, 0.25, 0.22])
            pattern = 0.5 + 0.5 * np.sin(2 * np.pi * 3 * u) * np.sin(2 * np.pi * 2 * v)
        elif kind == 1:
            base, accent = np.array([0.95, 0.82, 0.72]), np.array([0.25, 0.35, 0.7])
            pattern = 0.5 + 0.5 * np.cos(2 * np.pi * 4 * v)
        else:
            base, accent = np.array([0.7, 0.5, 0.36]), np.array([0.2, 0.55, 0.3])
            pattern = 0.5 + 0.5 * np.sin(2 * np.pi * (2 * u + v))
        color = base + jitter + (accent - base) * (0.6 * pattern)[:, None]
        # dark eye patches shared by all looks
        for side in (-0.35, 0.35):
            color *= 1.0 - 0.6 * _bump(units, (1.3, side), 0.12)[:, None]
        strength, amplitude = _layer(units, appearance)
        if amplitude > 0:
            hair = np.array([0.3, 0.2, 0.12]) if kind == 1 else np.array([0.12, 0.1, 0.09])
            color = color + (hair - color) * np.clip(1.6 * strength, 0.0, 1.0)[:, None]
        return np.clip(color, 0.0, 1.0)

    def pose(self, yaw: float, pitch: float, roll: float) -> np.ndarray:
        cy, sy = np.cos(yaw), np.sin(yaw)
        cp, sp = np.cos(pitch), np.sin(pitch)
        cr, sr = np.cos(roll), np.sin(roll)
        ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
        rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
        rz = np.array([[cr, -sr, 0], [sr, cr, 0], [0, 0, 1]])
        return ry @ rx @ rz

    def deform(self, expression: np.ndarray, rotation: np.ndarray, shift: np.ndarray,
               thickness: np.ndarray | None = None) -> np.ndarray:
        verts = self.canonical.vertices + np.einsum("e,evc->vc", expression, self.blendshapes)
        if thickness is not None:
            verts = verts + thickness[:, None] * self.normals
        out = verts @ rotation.T + shift
        # stored meshes are float32; keep ground truth consistent with what is written
        return out.astype(np.float32).astype(np.float64)

    def camera(self) -> Camera:
        c = self.config
        return Camera.look_at([0.0, 0.0, c.camera_distance], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0],
                              c.focal_scale * c.image_size, c.image_size, c.image_size)


def shade(model: HeadModel, appearance: int, gt_mesh: Mesh, rotation: np.ndarray, tri: np.ndarray,
          bary: np.ndarray) -> np.ndarray:
    """Lambertian color of surface hits given by triangle ids and barycentrics."""
    corners = gt_mesh.triangles[tri]
    uv = np.einsum("pk,pkc->pc", bary, gt_mesh.uvs[corners])
    units = np.einsum("pk,pkc->pc", bary, model.units[corners])
    units /= np.linalg.norm(units, axis=1, keepdims=True)
    normals = gt_mesh.vertex_normals()
    n = np.einsum("pk,pkc->pc", bary, normals[corners])
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    light = rotation @ LIGHT
    lambert = AMBIENT + (1.0 - AMBIENT) * np.clip(n @ light, 0.0, None)
    return model.albedo(appearance, uv, units) * lambert[:, None]


def render_ground_truth(model: HeadModel, appearance: int, gt_mesh: Mesh, rotation: np.ndarray,
                        camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """White-background image and coverage of the appearance's full geometry."""
    origins, dirs = generate_rays(camera, pixel_grid(camera.width, camera.height))
    dist, tri, bary = ray_cast(gt_mesh, origins, dirs)
    hit = tri >= 0
    img = np.ones((len(dist), 3))
    if hit.any():
        img[hit] = shade(model, appearance, gt_mesh, rotation, tri[hit], bary[hit])
    return img.reshape(camera.height, camera.width, 3), hit.reshape(camera.height, camera.width)


def face_mask(model: HeadModel, appearance: int, tracked: Mesh, camera: Camera) -> np.ndarray:
    """Pixels covered by the tracked mesh outside the appearance's extra layer."""
    raster = rasterize_depth(tracked, camera)
    extra = model.extra_geometry(appearance)
    layered = extra[tracked.triangles].max(axis=1) > 0.1 * max(extra.max(), 1e-12)
    if not extra.any():
        layered[:] = False
    return raster.mask & ~layered[np.maximum(raster.triangle, 0)]


def generate_synthetic_scene(seed: int = 0, n_appearances: int | None = None, n_frames: int | None = None,
                             image_size: int | None = None, config: SceneConfig | None = None) -> SceneDataset:
    config = config or SceneConfig()
    overrides = {k: v for k, v in (("appearances", n_appearances), ("frames", n_frames),
                                   ("image_size", image_size)) if v is not None}
    if overrides:
        config = SceneConfig(**{**config.__dict__, **overrides})
    if config.appearances < 1:
        raise ValueError("need at least one appearance")
    if not 0 <= config.test_frames < config.frames:
        raise ValueError("need at least one training frame per appearance")
    model = HeadModel(config)
    camera = model.camera()
    rng = np.random.default_rng(seed)
    deg = np.pi / 180.0
    frames = []
    for j in range(config.appearances):
        thickness = model.extra_geometry(j)
        for i in range(config.frames):
            e = rng.uniform(-config.max_expression, config.max_expression, config.expression_dim)
            angles = rng.uniform(-1, 1, 3) * np.array([config.max_yaw_deg, config.max_pitch_deg,
                                                       config.max_roll_deg]) * deg
            shift = rng.uniform(-config.max_shift, config.max_shift, 3)
            rotation = model.pose(*angles)
            tracked = model.canonical.with_vertices(model.deform(e, rotation, shift))
            gt_mesh = model.canonical.with_vertices(model.deform(e, rotation, shift, thickness))
            img, _ = render_ground_truth(model, j, gt_mesh, rotation, camera)
            img = np.round(img * 255.0) / 255.0
            split = "train" if i < config.train_frames else "test"
            frames.append(TrainingFrame(
                index=i, appearance=j, split=split, image=img,
                mask=face_mask(model, j, tracked, camera), mesh=tracked, expression=e, camera=camera,
                pose=np.concatenate([angles, shift])))
    return SceneDataset(model.canonical, frames, config.appearances, config=config)
