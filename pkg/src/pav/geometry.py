"""Triangle meshes, nearest-triangle queries and the observed-to-canonical warp.

Sample points along camera rays live in the space of a tracked (deformed) mesh.
They are carried into the shared canonical space with the affine map of their
nearest triangle, and the same triangle supplies the barycentric weights used to
blend per-vertex appearance features.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .errors import InvalidInputError, SingularGeometryError

MAX_BVH_DEPTH = 64
LEAF_SIZE = 4


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray  # (V, 3) float64
    triangles: np.ndarray  # (T, 3) int64
    uvs: np.ndarray  # (V, 2) float64

    def __post_init__(self):
        object.__setattr__(self, "vertices", np.ascontiguousarray(self.vertices, dtype=np.float64))
        object.__setattr__(self, "triangles", np.ascontiguousarray(self.triangles, dtype=np.int64))
        object.__setattr__(self, "uvs", np.ascontiguousarray(self.uvs, dtype=np.float64))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def triangle_vertices(self) -> np.ndarray:
        """(T, 3, 3) corner positions."""
        return self.vertices[self.triangles]

    def with_vertices(self, vertices: np.ndarray) -> "Mesh":
        """Same topology and UVs, new positions (a deformed frame of this mesh)."""
        vertices = np.asarray(vertices, dtype=np.float64)
        if vertices.shape != self.vertices.shape:
            raise InvalidInputError(
                f"expected vertices of shape {self.vertices.shape}, got {vertices.shape}")
        return Mesh(vertices, self.triangles, self.uvs)

    def bounds(self, margin: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned box, grown by ``margin`` times the extent on every side."""
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        pad = (hi - lo) * margin
        return lo - pad, hi + pad

    def areas(self) -> np.ndarray:
        tv = self.triangle_vertices()
        return 0.5 * np.linalg.norm(np.cross(tv[:, 1] - tv[:, 0], tv[:, 2] - tv[:, 0]), axis=1)

    def vertex_normals(self) -> np.ndarray:
        tv = self.triangle_vertices()
        fn = np.cross(tv[:, 1] - tv[:, 0], tv[:, 2] - tv[:, 0])  # area weighted
        vn = np.zeros_like(self.vertices)
        for k in range(3):
            np.add.at(vn, self.triangles[:, k], fn)
        # vertices sharing a position (UV seams, poles) must agree on the normal
        _, inverse = np.unique(np.round(self.vertices, 12), axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        merged = np.zeros((inverse.max() + 1, 3))
        np.add.at(merged, inverse, vn)
        vn = merged[inverse]
        return vn / np.maximum(np.linalg.norm(vn, axis=1, keepdims=True), 1e-12)

    def validate(self) -> None:
        if self.n_triangles == 0 or self.n_vertices == 0:
            raise InvalidInputError("mesh has no triangles")
        if self.triangles.min() < 0 or self.triangles.max() >= self.n_vertices:
            raise InvalidInputError("triangle index out of range")
        if self.uvs.shape != (self.n_vertices, 2):
            raise InvalidInputError("need exactly one uv per vertex")
        if np.any(self.uvs < 0.0) or np.any(self.uvs > 1.0):
            raise InvalidInputError("uvs must lie in [0, 1]^2")
        if np.any(self.areas() <= 1e-12):
            raise InvalidInputError("mesh has degenerate triangles")


@dataclass(frozen=True)
class TriangleRef:
    mesh: Mesh
    index: int
    corners: np.ndarray  # (3, 3)

    @classmethod
    def of(cls, mesh: Mesh, index: int) -> "TriangleRef":
        return cls(mesh, int(index), mesh.vertices[mesh.triangles[index]].copy())


@dataclass(frozen=True)
class NearestHit:
    triangle: int
    barycentric: np.ndarray  # (3,)
    point: np.ndarray  # (3,)
    distance2: float


@dataclass(frozen=True)
class Bvh:
    lo: np.ndarray  # (N, 3) node box minimum
    hi: np.ndarray  # (N, 3) node box maximum
    left: np.ndarray  # (N,) child index, -1 for leaves
    right: np.ndarray
    start: np.ndarray  # (N,) first slot in ``order`` for leaves
    count: np.ndarray  # (N,) number of triangles in a leaf, 0 for inner nodes
    order: np.ndarray  # (T,) triangle permutation referenced by leaves
    depth: int

    @property
    def n_nodes(self) -> int:
        return len(self.left)


def build_bvh(mesh: Mesh) -> Bvh:
    """Median split over the longest axis of the centroid bounds, leaves hold at most 4 triangles."""
    if mesh.n_triangles == 0:
        raise InvalidInputError("cannot build a BVH over an empty mesh")
    tv = mesh.triangle_vertices()
    tri_lo = tv.min(axis=1)
    tri_hi = tv.max(axis=1)
    centroids = tv.mean(axis=1)

    lo, hi, left, right, start, count = [], [], [], [], [], []
    order = np.empty(mesh.n_triangles, dtype=np.int64)
    cursor = 0
    max_depth = 0

    def new_node(ids):
        lo.append(tri_lo[ids].min(axis=0))
        hi.append(tri_hi[ids].max(axis=0))
        left.append(-1)
        right.append(-1)
        start.append(0)
        count.append(0)
        return len(left) - 1

    # explicit stack: (node, triangle ids, depth)
    root = new_node(np.arange(mesh.n_triangles))
    stack = [(root, np.arange(mesh.n_triangles), 1)]
    while stack:
        node, ids, depth = stack.pop()
        max_depth = max(max_depth, depth)
        if len(ids) <= LEAF_SIZE:
            ids = np.sort(ids)
            start[node] = cursor
            count[node] = len(ids)
            order[cursor:cursor + len(ids)] = ids
            cursor += len(ids)
            continue
        c = centroids[ids]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        # stable sort keeps the build deterministic when centroids coincide
        ranked = ids[np.argsort(c[:, axis], kind="stable")]
        half = len(ranked) // 2
        a, b = ranked[:half], ranked[half:]
        ln = new_node(a)
        rn = new_node(b)
        left[node] = ln
        right[node] = rn
        stack.append((rn, b, depth + 1))
        stack.append((ln, a, depth + 1))

    if max_depth > MAX_BVH_DEPTH:
        raise InvalidInputError(f"BVH depth {max_depth} exceeds {MAX_BVH_DEPTH}")
    return Bvh(
        lo=np.array(lo), hi=np.array(hi),
        left=np.array(left, dtype=np.int64), right=np.array(right, dtype=np.int64),
        start=np.array(start, dtype=np.int64), count=np.array(count, dtype=np.int64),
        order=order, depth=max_depth,
    )


@numba.njit(cache=True, inline="always")
def _closest_on_triangle(p, a, b, c):
    """Region-based closest point (Ericson); returns barycentrics (u, v, w) of a, b, c."""
    ab0, ab1, ab2 = b[0] - a[0], b[1] - a[1], b[2] - a[2]
    ac0, ac1, ac2 = c[0] - a[0], c[1] - a[1], c[2] - a[2]
    ap0, ap1, ap2 = p[0] - a[0], p[1] - a[1], p[2] - a[2]
    d1 = ab0 * ap0 + ab1 * ap1 + ab2 * ap2
    d2 = ac0 * ap0 + ac1 * ap1 + ac2 * ap2
    if d1 <= 0.0 and d2 <= 0.0:
        return 1.0, 0.0, 0.0
    bp0, bp1, bp2 = p[0] - b[0], p[1] - b[1], p[2] - b[2]
    d3 = ab0 * bp0 + ab1 * bp1 + ab2 * bp2
    d4 = ac0 * bp0 + ac1 * bp1 + ac2 * bp2
    if d3 >= 0.0 and d4 <= d3:
        return 0.0, 1.0, 0.0
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        return 1.0 - v, v, 0.0
    cp0, cp1, cp2 = p[0] - c[0], p[1] - c[1], p[2] - c[2]
    d5 = ab0 * cp0 + ab1 * cp1 + ab2 * cp2
    d6 = ac0 * cp0 + ac1 * cp1 + ac2 * cp2
    if d6 >= 0.0 and d5 <= d6:
        return 0.0, 0.0, 1.0
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return 1.0 - w, 0.0, w
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return 0.0, 1.0 - w, w
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return 1.0 - v - w, v, w


@numba.njit(cache=True, inline="always")
def _box_distance2(p, lo, hi):
    d = 0.0
    for k in range(3):
        if p[k] < lo[k]:
            d += (lo[k] - p[k]) ** 2
        elif p[k] > hi[k]:
            d += (p[k] - hi[k]) ** 2
    return d


@numba.njit(cache=True)
def _query_one(p, corners, lo, hi, left, right, start, count, order, root, stack, out_bary):
    top = 1
    stack[0] = root
    best_d = np.inf
    best_t = -1
    while top > 0:
        top -= 1
        node = stack[top]
        if _box_distance2(p, lo[node], hi[node]) > best_d:
            continue
        n = count[node]
        if n > 0:
            s = start[node]
            for k in range(s, s + n):
                t = order[k]
                a = corners[t, 0]
                b = corners[t, 1]
                c = corners[t, 2]
                u, v, w = _closest_on_triangle(p, a, b, c)
                d = 0.0
                for ax in range(3):
                    q = u * a[ax] + v * b[ax] + w * c[ax]
                    d += (p[ax] - q) ** 2
                if d < best_d or (d == best_d and t < best_t):
                    best_d = d
                    best_t = t
                    out_bary[0] = u
                    out_bary[1] = v
                    out_bary[2] = w
        else:
            l = left[node]
            r = right[node]
            dl = _box_distance2(p, lo[l], hi[l])
            dr = _box_distance2(p, lo[r], hi[r])
            # push the farther child first so the nearer one is visited next
            if dl <= dr:
                stack[top] = r
                stack[top + 1] = l
            else:
                stack[top] = l
                stack[top + 1] = r
            top += 2
    return best_t, best_d


@numba.njit(cache=True, parallel=True)
def _query_batch(points, point_mesh, corners, lo, hi, left, right, start, count, order,
                 roots, tri_out, bary_out, d2_out):
    # corners: (M, T, 3, 3), one block per mesh; roots: per-mesh root node
    n = points.shape[0]
    chunk = 256
    for ci in numba.prange((n + chunk - 1) // chunk):
        stack = np.empty(2 * MAX_BVH_DEPTH + 2, dtype=np.int64)
        for i in range(ci * chunk, min(n, (ci + 1) * chunk)):
            m = point_mesh[i]
            t, d = _query_one(points[i], corners[m], lo, hi, left, right, start, count, order,
                              roots[m], stack, bary_out[i])
            tri_out[i] = t
            d2_out[i] = d


class BvhPack:
    """Several BVHs over meshes with one shared topology, packed for batched queries.

    Every training frame has its own deformed mesh; packing lets one call answer
    queries whose points belong to different frames.
    """

    def __init__(self, meshes: list[Mesh], bvhs: list[Bvh] | None = None):
        if not meshes:
            raise InvalidInputError("need at least one mesh")
        if bvhs is None:
            bvhs = [build_bvh(m) for m in meshes]
        self.triangles = meshes[0].triangles
        self.vertices = np.stack([m.vertices for m in meshes])
        self.corners = np.ascontiguousarray(self.vertices[:, self.triangles])
        offsets_node = np.cumsum([0] + [b.n_nodes for b in bvhs[:-1]])
        offsets_order = np.cumsum([0] + [len(b.order) for b in bvhs[:-1]])
        self.lo = np.concatenate([b.lo for b in bvhs])
        self.hi = np.concatenate([b.hi for b in bvhs])
        self.left = np.concatenate([np.where(b.left >= 0, b.left + o, -1) for b, o in zip(bvhs, offsets_node)])
        self.right = np.concatenate([np.where(b.right >= 0, b.right + o, -1) for b, o in zip(bvhs, offsets_node)])
        self.start = np.concatenate([b.start + o for b, o in zip(bvhs, offsets_order)])
        self.count = np.concatenate([b.count for b in bvhs])
        self.order = np.concatenate([b.order for b in bvhs])
        self.roots = offsets_node.astype(np.int64)

    def query(self, points: np.ndarray, mesh_index: np.ndarray | int = 0):
        """Nearest triangle, barycentrics and squared distance for each point."""
        points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        n = len(points)
        mesh_index = np.broadcast_to(np.asarray(mesh_index, dtype=np.int64), (n,)).copy()
        tri = np.empty(n, dtype=np.int64)
        bary = np.empty((n, 3), dtype=np.float64)
        d2 = np.empty(n, dtype=np.float64)
        if n:
            _query_batch(points, mesh_index, self.corners, self.lo, self.hi,
                         self.left, self.right, self.start, self.count, self.order, self.roots,
                         tri, bary, d2)
        return tri, bary, d2


def nearest_triangles(bvh: Bvh, mesh: Mesh, points: np.ndarray):
    """Batched nearest-triangle query: (triangle ids, barycentrics, squared distances)."""
    return BvhPack([mesh], [bvh]).query(points, 0)


def nearest_triangle(bvh: Bvh, mesh: Mesh, point) -> NearestHit:
    tri, bary, d2 = nearest_triangles(bvh, mesh, np.asarray(point, dtype=np.float64)[None])
    corners = mesh.vertices[mesh.triangles[tri[0]]]
    return NearestHit(int(tri[0]), bary[0], bary[0] @ corners, float(d2[0]))


def _frames(corners: np.ndarray) -> np.ndarray:
    """Columns [e1, e2, unit normal] for (..., 3, 3) triangle corners."""
    e1 = corners[..., 1, :] - corners[..., 0, :]
    e2 = corners[..., 2, :] - corners[..., 0, :]
    n = np.cross(e1, e2)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    if np.any(norm <= 2e-12):
        raise SingularGeometryError("degenerate triangle in deformation gradient")
    return np.stack([e1, e2, n / norm], axis=-1)


def deformation_gradients(deformed: np.ndarray, canonical: np.ndarray) -> np.ndarray:
    """Per-triangle 4x4 affine maps taking deformed corners onto canonical corners.

    ``deformed`` and ``canonical`` are (T, 3, 3) corner arrays in corresponding order.
    """
    deformed = np.asarray(deformed, dtype=np.float64)
    canonical = np.asarray(canonical, dtype=np.float64)
    e_def = _frames(deformed)
    e_can = _frames(canonical)
    linear = e_can @ np.linalg.inv(e_def)
    shift = canonical[..., 0, :] - np.einsum("...ij,...j->...i", linear, deformed[..., 0, :])
    out = np.zeros(deformed.shape[:-2] + (4, 4))
    out[..., :3, :3] = linear
    out[..., :3, 3] = shift
    out[..., 3, 3] = 1.0
    same = np.all(deformed == canonical, axis=(-1, -2))
    out[same] = np.eye(4)
    return out


def deformation_gradient(t_def: TriangleRef, t_canon: TriangleRef) -> np.ndarray:
    return deformation_gradients(t_def.corners[None], t_canon.corners[None])[0]


def canonicalize(x, f: np.ndarray) -> np.ndarray:
    """Apply the upper 3x4 block of ``f`` to homogeneous ``x``; both may be batched."""
    x = np.asarray(x, dtype=np.float64)
    f = np.asarray(f)
    return np.einsum("...ij,...j->...i", f[..., :3, :3], x) + f[..., :3, 3]


def bilinear_taps(uv: np.ndarray, height: int, width: int):
    """Texel indices and weights of bilinear lookups at texel-centered coordinates.

    Returns ``(rows, cols, weights)`` each of shape (N, 4). Texel (r, c) has its
    center at uv = ((c + 0.5) / width, (r + 0.5) / height); lookups outside the
    outermost centers clamp.
    """
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    x = np.clip(uv[:, 0] * width - 0.5, 0.0, width - 1.0)
    y = np.clip(uv[:, 1] * height - 0.5, 0.0, height - 1.0)
    c0 = np.minimum(np.floor(x).astype(np.int64), max(width - 2, 0))
    r0 = np.minimum(np.floor(y).astype(np.int64), max(height - 2, 0))
    c1 = np.minimum(c0 + 1, width - 1)
    r1 = np.minimum(r0 + 1, height - 1)
    fx = x - c0
    fy = y - r0
    rows = np.stack([r0, r0, r1, r1], axis=1)
    cols = np.stack([c0, c1, c0, c1], axis=1)
    weights = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
    return rows, cols, weights


def _texels(texture) -> np.ndarray:
    values = getattr(texture, "values", texture)
    return np.asarray(values)


def sample_vertex_feature(texture, uv) -> np.ndarray:
    """Bilinear lookup of a (H, W, C) feature atlas; ``uv`` may be (2,) or (N, 2)."""
    z = _texels(texture)
    uv = np.asarray(uv, dtype=np.float64)
    rows, cols, w = bilinear_taps(uv, z.shape[0], z.shape[1])
    out = np.einsum("nk,nkc->nc", w, z[rows, cols].astype(np.float64))
    return out[0] if uv.ndim == 1 else out


def interpolate_appearance(hit: NearestHit, mesh: Mesh, texture) -> np.ndarray:
    """Barycentric blend of the features attached to the hit triangle's vertices."""
    corners = mesh.triangles[hit.triangle]
    feats = sample_vertex_feature(texture, mesh.uvs[corners])
    return np.asarray(hit.barycentric) @ feats


# -- mesh files ---------------------------------------------------------------

def read_obj(path) -> Mesh:
    """Wavefront OBJ subset: ``v``, ``vt`` and ``f i/j`` faces with equal indices."""
    verts, uvs, tris = [], [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(p) for p in parts[1:4]])
        elif parts[0] == "vt":
            uvs.append([float(p) for p in parts[1:3]])
        elif parts[0] == "f":
            idx = []
            for p in parts[1:4]:
                ids = p.split("/")
                if len(ids) > 1 and ids[1] and ids[1] != ids[0]:
                    raise InvalidInputError("position and uv indices must match")
                idx.append(int(ids[0]) - 1)
            tris.append(idx)
    if not uvs:
        uvs = np.zeros((len(verts), 2))
    mesh = Mesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                np.array(tris, dtype=np.int64).reshape(-1, 3),
                np.array(uvs, dtype=np.float64).reshape(-1, 2))
    mesh.validate()
    return mesh


def write_obj(mesh: Mesh, path) -> None:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"vt {u!r} {v!r}" for u, v in mesh.uvs.tolist()]
    lines += ["f " + " ".join(f"{i + 1}/{i + 1}" for i in tri) for tri in mesh.triangles.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def write_verts(vertices: np.ndarray, path) -> None:
    np.asarray(vertices, dtype="<f4").tofile(path)


def read_verts(path, n_vertices: int) -> np.ndarray:
    data = np.fromfile(path, dtype="<f4")
    if data.size != 3 * n_vertices:
        raise InvalidInputError(f"{path}: expected {3 * n_vertices} floats, found {data.size}")
    return data.reshape(n_vertices, 3).astype(np.float64)
