"""Software z-buffer rasterization of tracked meshes and brute-force ray casting."""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .geometry import Mesh
from .renderer import Camera, generate_rays, pixel_grid

MIN_Z = 1e-6


@dataclass
class DepthMap:
    depth: np.ndarray  # (H, W) distance along the optical axis, inf where empty
    mask: np.ndarray  # (H, W) bool coverage
    triangle: np.ndarray  # (H, W) visible triangle id, -1 where empty


@numba.njit(cache=True, inline="always")
def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


@numba.njit(cache=True, inline="always")
def _owns(ax, ay, bx, by):
    # shared edges are walked in opposite directions by their two triangles,
    # so exactly one of them claims pixel centers lying on the edge
    dy = by - ay
    dx = bx - ax
    return dy > 0.0 or (dy == 0.0 and dx < 0.0)


@numba.njit(cache=True)
def _raster(screen, z, tris, width, height, depth, tri_out):
    for t in range(tris.shape[0]):
        i0, i1, i2 = tris[t, 0], tris[t, 1], tris[t, 2]
        if z[i0] <= MIN_Z or z[i1] <= MIN_Z or z[i2] <= MIN_Z:
            continue
        ax, ay = screen[i0, 0], screen[i0, 1]
        bx, by = screen[i1, 0], screen[i1, 1]
        cx, cy = screen[i2, 0], screen[i2, 1]
        iza, izb, izc = 1.0 / z[i0], 1.0 / z[i1], 1.0 / z[i2]
        area = _edge(ax, ay, bx, by, cx, cy)
        if area == 0.0:
            continue
        if area < 0.0:
            bx, by, cx, cy = cx, cy, bx, by
            izb, izc = izc, izb
            area = -area
        x0 = max(int(np.floor(min(ax, bx, cx) - 0.5)), 0)
        x1 = min(int(np.ceil(max(ax, bx, cx) - 0.5)), width - 1)
        y0 = max(int(np.floor(min(ay, by, cy) - 0.5)), 0)
        y1 = min(int(np.ceil(max(ay, by, cy) - 0.5)), height - 1)
        own_a = _owns(bx, by, cx, cy)
        own_b = _owns(cx, cy, ax, ay)
        own_c = _owns(ax, ay, bx, by)
        for py in range(y0, y1 + 1):
            sy = py + 0.5
            for px in range(x0, x1 + 1):
                sx = px + 0.5
                wa = _edge(bx, by, cx, cy, sx, sy)
                wb = _edge(cx, cy, ax, ay, sx, sy)
                wc = _edge(ax, ay, bx, by, sx, sy)
                if wa < 0.0 or wb < 0.0 or wc < 0.0:
                    continue
                if (wa == 0.0 and not own_a) or (wb == 0.0 and not own_b) or (wc == 0.0 and not own_c):
                    continue
                inv_z = (wa * iza + wb * izb + wc * izc) / area
                d = 1.0 / inv_z
                if d < depth[py, px]:
                    depth[py, px] = d
                    tri_out[py, px] = t


def rasterize_depth(mesh: Mesh, camera: Camera) -> DepthMap:
    """Perspective-correct z-buffer; depth is measured along the camera's optical axis."""
    pc = camera.to_camera(mesh.vertices)
    z = pc[:, 2].copy()
    with np.errstate(divide="ignore", invalid="ignore"):
        screen = camera.project(mesh.vertices)
    screen = np.nan_to_num(screen)
    depth = np.full((camera.height, camera.width), np.inf)
    tri = np.full((camera.height, camera.width), -1, dtype=np.int64)
    _raster(np.ascontiguousarray(screen), z, mesh.triangles, camera.width, camera.height, depth, tri)
    return DepthMap(depth, tri >= 0, tri)


def ray_distance(depth_map: DepthMap, camera: Camera) -> np.ndarray:
    """Convert optical-axis depth into distance along each pixel's unit ray."""
    _, dirs = generate_rays(camera, pixel_grid(camera.width, camera.height))
    cos = (dirs @ camera.rotation[:, 2]).reshape(camera.height, camera.width)
    return depth_map.depth / cos


@numba.njit(cache=True, parallel=True)
def _cast(origins, dirs, verts, tris, t_out, tri_out, bary_out):
    for r in numba.prange(origins.shape[0]):
        o = origins[r]
        d = dirs[r]
        best = np.inf
        best_t = -1
        for t in range(tris.shape[0]):
            a = verts[tris[t, 0]]
            b = verts[tris[t, 1]]
            c = verts[tris[t, 2]]
            e1 = b - a
            e2 = c - a
            p = np.cross(d, e2)
            det = np.dot(e1, p)
            if abs(det) < 1e-14:
                continue
            inv = 1.0 / det
            s = o - a
            u = np.dot(s, p) * inv
            if u < 0.0 or u > 1.0:
                continue
            q = np.cross(s, e1)
            v = np.dot(d, q) * inv
            if v < 0.0 or u + v > 1.0:
                continue
            dist = np.dot(e2, q) * inv
            if dist > 1e-9 and dist < best:
                best = dist
                best_t = t
                bary_out[r, 0] = 1.0 - u - v
                bary_out[r, 1] = u
                bary_out[r, 2] = v
        t_out[r] = best
        tri_out[r] = best_t


def ray_cast(mesh: Mesh, origins: np.ndarray, dirs: np.ndarray):
    """Closest Moller-Trumbore hit of each ray against every triangle.

    Returns (distance, triangle id, barycentrics); misses have distance inf and id -1.
    """
    origins = np.ascontiguousarray(origins, dtype=np.float64)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64)
    n = len(origins)
    t = np.empty(n)
    tri = np.empty(n, dtype=np.int64)
    bary = np.zeros((n, 3))
    _cast(origins, dirs, mesh.vertices, mesh.triangles, t, tri, bary)
    return t, tri, bary
