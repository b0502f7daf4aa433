"""Pinhole rays, stratified sampling and differentiable alpha compositing."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .errors import InvalidInputError

NEAR_CLAMP = 0.05
FAR_CLAMP = 10.0
WHITE = np.ones(3)


@dataclass(frozen=True)
class Camera:
    intrinsics: np.ndarray  # (3, 3) pixels
    rotation: np.ndarray  # (3, 3) world-from-camera, camera looks along +z
    center: np.ndarray  # (3,) camera position in world units
    width: int
    height: int

    def __post_init__(self):
        k = np.asarray(self.intrinsics, dtype=np.float64)
        r = np.asarray(self.rotation, dtype=np.float64)
        object.__setattr__(self, "intrinsics", k)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))

    def validate(self) -> None:
        k = self.intrinsics
        if k.shape != (3, 3) or np.any(np.tril(k, -1) != 0) or k[0, 0] <= 0 or k[1, 1] <= 0 or k[2, 2] == 0:
            raise InvalidInputError("intrinsics must be upper triangular with positive focal lengths")
        if np.abs(self.rotation @ self.rotation.T - np.eye(3)).max() > 1e-6:
            raise InvalidInputError("camera rotation is not orthonormal")

    @classmethod
    def look_at(cls, eye, target, up, focal: float, width: int, height: int) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        k = np.array([[focal, 0, width / 2], [0, focal, height / 2], [0, 0, 1.0]])
        return cls(k, np.stack([right, down, forward], axis=1), eye, width, height)

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.center) @ self.rotation

    def project(self, points: np.ndarray) -> np.ndarray:
        """Continuous image coordinates; pixel (u, v) has its center at (u + 0.5, v + 0.5)."""
        pc = self.to_camera(points)
        uvw = pc @ self.intrinsics.T
        return uvw[..., :2] / uvw[..., 2:3]

    def to_dict(self) -> dict:
        return {"intrinsics": self.intrinsics.tolist(), "rotation": self.rotation.tolist(),
                "center": self.center.tolist(), "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(np.array(d["intrinsics"]), np.array(d["rotation"]), np.array(d["center"]),
                   int(d["width"]), int(d["height"]))


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float


@dataclass
class RenderOutput:
    color: np.ndarray
    depth: float | np.ndarray
    opacity: float | np.ndarray


def pixel_grid(width: int, height: int) -> np.ndarray:
    """All (u, v) pixel indices in row-major order."""
    v, u = np.mgrid[0:height, 0:width]
    return np.stack([u.ravel(), v.ravel()], axis=1)


def generate_rays(camera: Camera, pixels) -> tuple[np.ndarray, np.ndarray]:
    """Origins and unit directions through the centers of ``pixels`` given as (u, v) = (column, row)."""
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    if np.any(pixels < 0) or np.any(pixels[:, 0] >= camera.width) or np.any(pixels[:, 1] >= camera.height):
        raise InvalidInputError("pixel outside the image")
    if abs(np.linalg.det(camera.intrinsics)) < 1e-12:
        raise InvalidInputError("singular intrinsics")
    homog = np.concatenate([pixels + 0.5, np.ones((len(pixels), 1))], axis=1)
    d = np.linalg.solve(camera.intrinsics, homog.T).T @ camera.rotation.T
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return np.broadcast_to(camera.center, d.shape).copy(), d


def ray_box(origins: np.ndarray, dirs: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    """Slab test; returns clamped (near, far) and a hit mask."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    t0 = np.nan_to_num(t0, nan=-np.inf)
    t1 = np.nan_to_num(t1, nan=np.inf)
    near = np.minimum(t0, t1).max(axis=-1)
    far = np.maximum(t0, t1).min(axis=-1)
    near = np.clip(near, NEAR_CLAMP, FAR_CLAMP)
    far = np.clip(far, NEAR_CLAMP, FAR_CLAMP)
    return near, far, far > near


def stratified(near: np.ndarray, far: np.ndarray, n: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """(R, n) sample distances, one per equal-width bin; bin midpoints when ``rng`` is None."""
    if n < 1:
        raise InvalidInputError("need at least one sample per ray")
    near = np.asarray(near, dtype=np.float64)[..., None]
    far = np.asarray(far, dtype=np.float64)[..., None]
    offset = np.full(near.shape[:-1] + (n,), 0.5) if rng is None else rng.random(near.shape[:-1] + (n,))
    return near + (np.arange(n) + offset) * (far - near) / n


def sample_along_ray(ray: Ray, n: int, jitter: bool = False, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed) if jitter else None
    return stratified(np.array([ray.near]), np.array([ray.far]), n, rng)[0]


def _deltas(t: np.ndarray, far: np.ndarray) -> np.ndarray:
    return np.concatenate([np.diff(t, axis=-1), far[..., None] - t[..., -1:]], axis=-1)


def _weights(sigma: np.ndarray, delta: np.ndarray):
    tau = sigma * delta
    cum = np.cumsum(tau, axis=-1)
    trans = np.exp(-(cum - tau))  # transmittance before each sample
    after = np.exp(-cum)  # after each sample
    return trans - after, trans, after


def composite(t: np.ndarray, far: np.ndarray, sigma: Var, color: Var, background=WHITE) -> Var:
    """Alpha-composite R rays of S samples.

    Returns a (R, 5) node holding color (3), expected depth and accumulated opacity.
    """
    t = np.asarray(t, dtype=np.float64)
    if t.shape[-1] > 1 and np.any(np.diff(t, axis=-1) <= 0):
        raise InvalidInputError("sample distances must be strictly increasing")
    if np.any(sigma.value < 0):
        raise InvalidInputError("densities must be non-negative")
    bg = np.asarray(background, dtype=np.float64)
    delta = _deltas(t, np.asarray(far, dtype=np.float64))
    s = sigma.value.astype(np.float64)
    c = color.value.astype(np.float64)
    w, trans, after = _weights(s, delta)
    acc = w.sum(axis=-1)
    rgb = np.einsum("rs,rsc->rc", w, c) + (1.0 - acc)[:, None] * bg
    denom = np.maximum(acc, 1e-8)
    numer = (w * t).sum(axis=-1)
    depth = numer / denom
    out = np.concatenate([rgb, depth[:, None], acc[:, None]], axis=1).astype(sigma.value.dtype)
    final = after[:, -1]

    def back(g):
        g = g.astype(np.float64)
        g_rgb, g_depth, g_acc = g[:, :3], g[:, 3], g[:, 4]
        color.accumulate((w[..., None] * g_rgb[:, None, :]).astype(color.value.dtype))
        live = acc > 1e-8
        dh_dw_t = 1.0 / denom
        dh_dw_1 = np.where(live, -numer / denom ** 2, 0.0)
        q = (np.einsum("rsc,rc->rs", c, g_rgb) + g_acc[:, None]
             + g_depth[:, None] * (t * dh_dw_t[:, None] + dh_dw_1[:, None]))
        q_bg = g_rgb @ bg
        wq = w * q
        later = np.cumsum(wq[:, ::-1], axis=-1)[:, ::-1] - wq  # sum over i > k
        d_tau = q * after - later - (q_bg * final)[:, None]
        sigma.accumulate((d_tau * delta).astype(sigma.value.dtype))

    return sigma.tape.record(out, [sigma, color], back)


def volume_render(samples, background=WHITE, far: float | None = None) -> RenderOutput:
    """Composite one ray from (t, sigma, rgb) samples.

    The last sample's interval ends at ``far`` (defaults to one more step of the
    last spacing when omitted).
    """
    t = np.array([s[0] for s in samples], dtype=np.float64)
    sigma = np.array([s[1] for s in samples], dtype=np.float64)
    rgb = np.array([s[2] for s in samples], dtype=np.float64).reshape(-1, 3)
    if far is None:
        far = t[-1] + (t[-1] - t[-2] if len(t) > 1 else 1.0)
    tape = Tape()
    out = composite(t[None], np.array([far]), tape.constant(sigma[None]), tape.constant(rgb[None]),
                    background).value[0]
    return RenderOutput(out[:3], float(out[3]), float(out[4]))


def transmittance(sigma: np.ndarray, t: np.ndarray, far) -> np.ndarray:
    """Transmittance before each sample and the compositing weights, for diagnostics."""
    w, trans, _ = _weights(np.asarray(sigma, dtype=np.float64), _deltas(np.asarray(t, dtype=np.float64),
                                                                      np.asarray(far, dtype=np.float64)))
    return trans, w


@dataclass
class RayBatchOutput:
    color: Var  # (R, 3)
    depth: Var  # (R,)
    opacity: Var  # (R,)
    hit: np.ndarray  # (R,) bool, ray crossed the frame's bounding box


def render_rays(model, frames, frame_ids: np.ndarray, appearance: np.ndarray, origins: np.ndarray,
                dirs: np.ndarray, n_samples: int, rng: np.random.Generator | None = None,
                tape: Tape | None = None, background=WHITE) -> RayBatchOutput:
    """Render rays belonging to (possibly different) frames through the field."""
    tape = tape if tape is not None else Tape()
    frame_ids = np.asarray(frame_ids, dtype=np.int64)
    appearance = np.asarray(appearance, dtype=np.int64)
    lo = np.stack([frames.bounds[f][0] for f in range(len(frames))])
    hi = np.stack([frames.bounds[f][1] for f in range(len(frames))])
    near, far, hit = ray_box(origins, dirs, lo[frame_ids], hi[frame_ids])
    idx = np.flatnonzero(hit)
    n_rays = len(origins)
    dtype = np.dtype(model.config.dtype)
    if len(idx) == 0:
        bg = np.broadcast_to(np.asarray(background, dtype=dtype), (n_rays, 3)).copy()
        zero = np.zeros(n_rays, dtype=dtype)
        return RayBatchOutput(tape.constant(bg), tape.constant(zero), tape.constant(zero.copy()), hit)
    t = stratified(near[idx], far[idx], n_samples, rng)
    pts = origins[idx, None, :] + t[..., None] * dirs[idx, None, :]
    rep = lambda a: np.repeat(a[idx], n_samples, axis=0)
    fid = rep(frame_ids)
    x_c, tri, bary = frames.canonicalize(pts.reshape(-1, 3), fid)
    out = model.forward(tape, x_c, tri, bary, rep(appearance), frames.expressions[fid], rep(dirs))
    sigma = ad.reshape(out.sigma, (len(idx), n_samples))
    color = ad.reshape(out.color, (len(idx), n_samples, 3))
    packed = composite(t, far[idx], sigma, color, background)
    if len(idx) < n_rays:
        fill = np.zeros(5, dtype=dtype)
        fill[:3] = background
        packed = _embed_rows(packed, idx, n_rays, fill)
    return RayBatchOutput(ad.columns(packed, 0, 3), ad.reshape(ad.columns(packed, 3, 4), (-1,)),
                          ad.reshape(ad.columns(packed, 4, 5), (-1,)), hit)


def _embed_rows(x: Var, rows: np.ndarray, n: int, fill: np.ndarray) -> Var:
    out = np.broadcast_to(fill, (n,) + x.shape[1:]).copy()
    out[rows] = x.value
    return x.tape.record(out, [x], lambda g: x.accumulate(g[rows]))


def render_image(model, frames, frame: int, appearance: int, camera: Camera, n_samples: int = 64,
                 seed: int | None = None, chunk: int = 4096, background=WHITE):
    """Render the full image of ``frame`` as seen by ``camera`` with appearance ``appearance``.

    Returns (rgb (H, W, 3), depth (H, W), opacity (H, W)). Without a seed samples
    sit at bin midpoints.
    """
    pixels = pixel_grid(camera.width, camera.height)
    origins, dirs = generate_rays(camera, pixels)
    rng = np.random.default_rng(seed) if seed is not None else None
    rgb, depth, acc = [], [], []
    for s in range(0, len(pixels), chunk):
        sl = slice(s, s + chunk)
        n = len(origins[sl])
        tape = Tape()
        out = render_rays(model, frames, np.full(n, frame), np.full(n, appearance), origins[sl], dirs[sl],
                          n_samples, rng, tape, background)
        rgb.append(out.color.value)
        depth.append(out.depth.value)
        acc.append(out.opacity.value)
        tape.release()
    h, w = camera.height, camera.width
    return (np.concatenate(rgb).reshape(h, w, 3), np.concatenate(depth).reshape(h, w),
            np.concatenate(acc).reshape(h, w))
