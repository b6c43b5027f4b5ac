"""Voxelized signed distance fields built from watertight triangle meshes.

The builder computes, for every voxel center, the exact distance to the
nearest mesh triangle; the sign comes from the angle-weighted pseudonormal
of the closest surface feature, which is exact for watertight manifold
meshes.  Queries interpolate trilinearly inside the grid and grow the
boundary value by the distance to the grid outside it.
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# the default TBB probe warns on older TBB builds; workqueue is always present
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

from numba import njit, prange

from .errors import CacheError, DataError

MAGIC = b"PGSDF1"
DEFAULT_VOXEL_SIZE = 0.005
DEFAULT_PADDING = 0.04
CACHE_DIR_ENV = "PREGRASP_CACHE_DIR"


@dataclass
class TriangleMesh:
    """Vertex/triangle soup with float64 positions and int32 indices."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int32)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise DataError("mesh vertices must have shape (n, 3)")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise DataError("mesh faces must have shape (m, 3)")
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise DataError("mesh face index out of range")
        if not np.all(np.isfinite(self.vertices)):
            raise DataError("mesh contains non-finite vertices")

    def bounds(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


def _drop_degenerate(vertices, faces):
    a = vertices[faces[:, 0]]
    b = vertices[faces[:, 1]]
    c = vertices[faces[:, 2]]
    area2 = np.linalg.norm(np.cross(b - a, c - a), axis=1)
    distinct = (
        (faces[:, 0] != faces[:, 1])
        & (faces[:, 1] != faces[:, 2])
        & (faces[:, 0] != faces[:, 2])
    )
    return faces[(area2 > 1e-14) & distinct]


def load_obj(path) -> TriangleMesh:
    """Parse an OBJ file: v records and fan-triangulated f records."""
    verts = []
    faces = []
    with open(path, "r", errors="replace") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise DataError(f"{path}:{lineno}: malformed vertex record")
                try:
                    verts.append([float(parts[1]), float(parts[2]), float(parts[3])])
                except ValueError as exc:
                    raise DataError(f"{path}:{lineno}: {exc}") from exc
            elif parts[0] == "f":
                idx = []
                for token in parts[1:]:
                    head = token.split("/")[0]
                    try:
                        i = int(head)
                    except ValueError as exc:
                        raise DataError(f"{path}:{lineno}: bad face index {token!r}") from exc
                    if i < 0:
                        i = len(verts) + 1 + i
                    if i < 1:
                        raise DataError(f"{path}:{lineno}: face index out of range")
                    idx.append(i - 1)
                if len(idx) < 3:
                    raise DataError(f"{path}:{lineno}: face with fewer than 3 vertices")
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
    if not verts or not faces:
        raise DataError(f"{path}: no geometry found")
    vertices = np.asarray(verts, dtype=np.float64)
    face_arr = np.asarray(faces, dtype=np.int64)
    if face_arr.max() >= len(vertices):
        raise DataError(f"{path}: face index exceeds vertex count")
    face_arr = _drop_degenerate(vertices, face_arr)
    return TriangleMesh(vertices, face_arr)


def load_stl(path) -> TriangleMesh:
    """Parse a binary STL file, welding shared vertices."""
    raw = Path(path).read_bytes()
    if len(raw) < 84:
        raise DataError(f"{path}: too short for binary STL")
    (n,) = struct.unpack_from("<I", raw, 80)
    if len(raw) != 84 + 50 * n:
        raise DataError(f"{path}: binary STL size mismatch (is this ASCII STL?)")
    rec = np.frombuffer(raw, dtype=np.uint8, offset=84).reshape(n, 50)
    tri = rec[:, 12:48].copy().view("<f4").reshape(n, 3, 3).astype(np.float64)
    flat = tri.reshape(-1, 3)
    faces = np.arange(3 * n, dtype=np.int64).reshape(n, 3)
    from .meshes import weld_vertices

    vertices, faces = weld_vertices(flat, faces, tol=1e-7)
    faces = _drop_degenerate(vertices, faces.astype(np.int64))
    if len(faces) == 0:
        raise DataError(f"{path}: no valid triangles")
    return TriangleMesh(vertices, faces)


def load_mesh(path) -> TriangleMesh:
    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        return load_obj(path)
    if suffix == ".stl":
        return load_stl(path)
    raise DataError(f"{path}: unsupported mesh format {suffix!r}")


def _directed_edges(faces):
    return np.concatenate(
        [faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]], axis=0
    )


def check_watertight(mesh: TriangleMesh) -> None:
    """Raise DataError unless the mesh is closed, manifold and consistently
    oriented: every undirected edge must be used by exactly two triangles,
    once in each direction."""
    edges = _directed_edges(mesh.faces.astype(np.int64))
    lo = np.minimum(edges[:, 0], edges[:, 1])
    hi = np.maximum(edges[:, 0], edges[:, 1])
    und = lo * np.int64(len(mesh.vertices)) + hi
    order = np.argsort(und, kind="stable")
    und_sorted = und[order]
    uniq, counts = np.unique(und_sorted, return_counts=True)
    bad = np.nonzero(counts != 2)[0]
    if bad.size:
        key = uniq[bad[0]]
        a, b = divmod(int(key), len(mesh.vertices))
        raise DataError(
            f"mesh is not watertight: edge ({a}, {b}) used {int(counts[bad[0]])} times"
        )
    # matched pair must run in opposite directions or orientation flips
    e_sorted = edges[order]
    first = e_sorted[0::2]
    second = e_sorted[1::2]
    mismatch = np.nonzero(~np.all(first == second[:, ::-1], axis=1))[0]
    if mismatch.size:
        a, b = first[mismatch[0]]
        raise DataError(
            f"mesh orientation inconsistent at edge ({int(a)}, {int(b)})"
        )


def _pseudonormals(mesh: TriangleMesh):
    """Per-face, per-face-edge and per-face-vertex pseudonormals."""
    v = mesh.vertices
    f = mesh.faces.astype(np.int64)
    a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    face_n = np.cross(b - a, c - a)
    norms = np.linalg.norm(face_n, axis=1, keepdims=True)
    face_n = face_n / np.where(norms < 1e-30, 1.0, norms)

    # angle-weighted vertex normals accumulated over incident faces
    vert_n = np.zeros_like(v)
    corners = [(0, 1, 2), (1, 2, 0), (2, 0, 1)]
    for ci, cj, ck in corners:
        p = v[f[:, ci]]
        e1 = v[f[:, cj]] - p
        e2 = v[f[:, ck]] - p
        n1 = np.linalg.norm(e1, axis=1)
        n2 = np.linalg.norm(e2, axis=1)
        cosang = np.einsum("ij,ij->i", e1, e2) / np.where(n1 * n2 < 1e-30, 1.0, n1 * n2)
        ang = np.arccos(np.clip(cosang, -1.0, 1.0))
        np.add.at(vert_n, f[:, ci], ang[:, None] * face_n)
    vn_norm = np.linalg.norm(vert_n, axis=1, keepdims=True)
    vert_n = vert_n / np.where(vn_norm < 1e-30, 1.0, vn_norm)

    # edge normals: sum of the two incident face normals
    edges = _directed_edges(f)
    lo = np.minimum(edges[:, 0], edges[:, 1])
    hi = np.maximum(edges[:, 0], edges[:, 1])
    und = lo * np.int64(len(v)) + hi
    uniq, inverse = np.unique(und, return_inverse=True)
    edge_acc = np.zeros((len(uniq), 3))
    np.add.at(edge_acc, inverse, np.tile(face_n, (3, 1)))
    en_norm = np.linalg.norm(edge_acc, axis=1, keepdims=True)
    edge_acc = edge_acc / np.where(en_norm < 1e-30, 1.0, en_norm)
    # per-face edge normals in order (ab, bc, ca)
    m = len(f)
    edge_n = np.stack([edge_acc[inverse[0:m]], edge_acc[inverse[m : 2 * m]], edge_acc[inverse[2 * m :]]], axis=1)

    fv_n = np.stack([vert_n[f[:, 0]], vert_n[f[:, 1]], vert_n[f[:, 2]]], axis=1)
    return face_n, edge_n, fv_n


@njit(cache=True, inline="always")
def _closest_on_triangle(px, py, pz, ax, ay, az, bx, by, bz, cx, cy, cz):
    """Closest point on a triangle; returns (dist2, cpx, cpy, cpz, region).

    Region codes: 0 face, 1/2/3 vertex a/b/c, 4/5/6 edge ab/bc/ca.
    """
    abx, aby, abz = bx - ax, by - ay, bz - az
    acx, acy, acz = cx - ax, cy - ay, cz - az
    apx, apy, apz = px - ax, py - ay, pz - az
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return apx * apx + apy * apy + apz * apz, ax, ay, az, 1
    bpx, bpy, bpz = px - bx, py - by, pz - bz
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return bpx * bpx + bpy * bpy + bpz * bpz, bx, by, bz, 2
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        t = d1 / (d1 - d3)
        qx, qy, qz = ax + t * abx, ay + t * aby, az + t * abz
        dx, dy, dz = px - qx, py - qy, pz - qz
        return dx * dx + dy * dy + dz * dz, qx, qy, qz, 4
    cpx_, cpy_, cpz_ = px - cx, py - cy, pz - cz
    d5 = abx * cpx_ + aby * cpy_ + abz * cpz_
    d6 = acx * cpx_ + acy * cpy_ + acz * cpz_
    if d6 >= 0.0 and d5 <= d6:
        return cpx_ * cpx_ + cpy_ * cpy_ + cpz_ * cpz_, cx, cy, cz, 3
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        t = d2 / (d2 - d6)
        qx, qy, qz = ax + t * acx, ay + t * acy, az + t * acz
        dx, dy, dz = px - qx, py - qy, pz - qz
        return dx * dx + dy * dy + dz * dz, qx, qy, qz, 6
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        qx = bx + t * (cx - bx)
        qy = by + t * (cy - by)
        qz = bz + t * (cz - bz)
        dx, dy, dz = px - qx, py - qy, pz - qz
        return dx * dx + dy * dy + dz * dz, qx, qy, qz, 5
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    qx = ax + abx * v + acx * w
    qy = ay + aby * v + acy * w
    qz = az + abz * v + acz * w
    dx, dy, dz = px - qx, py - qy, pz - qz
    return dx * dx + dy * dy + dz * dz, qx, qy, qz, 0


@njit(cache=True, inline="always")
def _signed_at_point(px, py, pz, tva, tvb, tvc, cen, rad, face_n, edge_n, vert_n, start_tri):
    """Exact signed distance at one point with a warm-started search."""
    m = tva.shape[0]
    t0 = start_tri
    best_d2, cpx, cpy, cpz, region = _closest_on_triangle(
        px, py, pz,
        tva[t0, 0], tva[t0, 1], tva[t0, 2],
        tvb[t0, 0], tvb[t0, 1], tvb[t0, 2],
        tvc[t0, 0], tvc[t0, 1], tvc[t0, 2],
    )
    best_t = t0
    best_d = np.sqrt(best_d2)
    for t in range(m):
        if t == t0:
            continue
        dx = px - cen[t, 0]
        dy = py - cen[t, 1]
        dz = pz - cen[t, 2]
        d2c = dx * dx + dy * dy + dz * dz
        thr = best_d + rad[t]
        if d2c >= thr * thr:
            continue
        d2, qx, qy, qz, reg = _closest_on_triangle(
            px, py, pz,
            tva[t, 0], tva[t, 1], tva[t, 2],
            tvb[t, 0], tvb[t, 1], tvb[t, 2],
            tvc[t, 0], tvc[t, 1], tvc[t, 2],
        )
        if d2 < best_d2:
            best_d2 = d2
            best_d = np.sqrt(d2)
            best_t = t
            cpx, cpy, cpz = qx, qy, qz
            region = reg
    if region == 0:
        nx_, ny_, nz_ = face_n[best_t, 0], face_n[best_t, 1], face_n[best_t, 2]
    elif region <= 3:
        k = region - 1
        nx_, ny_, nz_ = vert_n[best_t, k, 0], vert_n[best_t, k, 1], vert_n[best_t, k, 2]
    else:
        k = region - 4
        nx_, ny_, nz_ = edge_n[best_t, k, 0], edge_n[best_t, k, 1], edge_n[best_t, k, 2]
    s = (px - cpx) * nx_ + (py - cpy) * ny_ + (pz - cpz) * nz_
    if s < 0.0:
        return -best_d, best_t
    return best_d, best_t


@njit(cache=True, parallel=True)
def _grid_kernel(ox, oy, oz, voxel, nx, ny, nz, tva, tvb, tvc, cen, rad, face_n, edge_n, vert_n, out):
    for iz in prange(nz):
        warm = 0
        for iy in range(ny):
            for ix in range(nx):
                px = ox + voxel * ix
                py = oy + voxel * iy
                pz = oz + voxel * iz
                d, warm = _signed_at_point(
                    px, py, pz, tva, tvb, tvc, cen, rad, face_n, edge_n, vert_n, warm
                )
                out[ix, iy, iz] = d


@njit(cache=True, parallel=True)
def _points_kernel(pts, tva, tvb, tvc, cen, rad, face_n, edge_n, vert_n, out):
    for i in prange(pts.shape[0]):
        d, _ = _signed_at_point(
            pts[i, 0], pts[i, 1], pts[i, 2],
            tva, tvb, tvc, cen, rad, face_n, edge_n, vert_n, 0,
        )
        out[i] = d


def _triangle_arrays(mesh: TriangleMesh):
    v = mesh.vertices
    f = mesh.faces.astype(np.int64)
    tva = np.ascontiguousarray(v[f[:, 0]])
    tvb = np.ascontiguousarray(v[f[:, 1]])
    tvc = np.ascontiguousarray(v[f[:, 2]])
    cen = (tva + tvb + tvc) / 3.0
    rad = np.sqrt(
        np.maximum.reduce(
            [
                np.sum((tva - cen) ** 2, axis=1),
                np.sum((tvb - cen) ** 2, axis=1),
                np.sum((tvc - cen) ** 2, axis=1),
            ]
        )
    )
    return tva, tvb, tvc, np.ascontiguousarray(cen), np.ascontiguousarray(rad)


def mesh_signed_distance(mesh: TriangleMesh, points: np.ndarray) -> np.ndarray:
    """Exact signed distance from the mesh surface at arbitrary points."""
    check_watertight(mesh)
    face_n, edge_n, vert_n = _pseudonormals(mesh)
    tva, tvb, tvc, cen, rad = _triangle_arrays(mesh)
    pts = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
    out = np.empty(len(pts), dtype=np.float64)
    _points_kernel(pts, tva, tvb, tvc, cen, rad,
                   np.ascontiguousarray(face_n),
                   np.ascontiguousarray(edge_n),
                   np.ascontiguousarray(vert_n), out)
    return out


@dataclass
class SdfGrid:
    """Regular voxel grid of signed distances.

    `origin` is the center of voxel (0, 0, 0); voxel centers sit at
    origin + index * voxel_size.  `values` has shape (nx, ny, nz),
    float32, negative inside the surface.
    """

    origin: np.ndarray
    voxel_size: float
    values: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.voxel_size = float(self.voxel_size)
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.ndim != 3:
            raise DataError("SDF values must be a 3-d array")
        if self.voxel_size <= 0.0:
            raise DataError("voxel size must be positive")

    @property
    def dims(self):
        return self.values.shape

    def query(self, points: np.ndarray) -> np.ndarray:
        """Trilinear signed distance at world points, batched.

        Outside the grid the result is the clamped boundary sample plus
        the Euclidean distance from the point to the sample location, so
        values grow monotonically and never go spuriously negative.
        """
        pts = np.asarray(points, dtype=np.float64)
        scalar_in = pts.ndim == 1
        rel = (np.atleast_2d(pts) - self.origin) / self.voxel_size
        nx, ny, nz = self.values.shape
        hi = np.array([nx - 1, ny - 1, nz - 1], dtype=np.float64)
        q = np.clip(rel, 0.0, hi)
        overshoot = (rel - q) * self.voxel_size
        grow = np.sqrt(np.sum(overshoot * overshoot, axis=-1))
        base = np.minimum(np.floor(q), hi - 1.0)
        base = np.maximum(base, 0.0).astype(np.intp)
        frac = q - base
        ix, iy, iz = base[..., 0], base[..., 1], base[..., 2]
        fx, fy, fz = frac[..., 0], frac[..., 1], frac[..., 2]
        v = self.values
        c000 = v[ix, iy, iz].astype(np.float64)
        c100 = v[ix + 1, iy, iz].astype(np.float64)
        c010 = v[ix, iy + 1, iz].astype(np.float64)
        c110 = v[ix + 1, iy + 1, iz].astype(np.float64)
        c001 = v[ix, iy, iz + 1].astype(np.float64)
        c101 = v[ix + 1, iy, iz + 1].astype(np.float64)
        c011 = v[ix, iy + 1, iz + 1].astype(np.float64)
        c111 = v[ix + 1, iy + 1, iz + 1].astype(np.float64)
        c00 = c000 + (c100 - c000) * fx
        c01 = c001 + (c101 - c001) * fx
        c10 = c010 + (c110 - c010) * fx
        c11 = c011 + (c111 - c011) * fx
        c0 = c00 + (c10 - c00) * fy
        c1 = c01 + (c11 - c01) * fy
        result = c0 + (c1 - c0) * fz + grow
        return result[0] if scalar_in else result

    def save(self, path) -> None:
        nx, ny, nz = self.values.shape
        header = MAGIC + struct.pack(
            "<3dd3I", self.origin[0], self.origin[1], self.origin[2],
            self.voxel_size, nx, ny, nz,
        )
        # x-fastest layout: flat index ix + nx*(iy + ny*iz)
        payload = np.transpose(self.values, (2, 1, 0)).astype("<f4").tobytes()
        tmp = str(path) + ".tmp"
        with open(tmp, "wb") as fh:
            fh.write(header)
            fh.write(payload)
        os.replace(tmp, path)

    @staticmethod
    def load(path) -> "SdfGrid":
        raw = Path(path).read_bytes()
        if len(raw) < len(MAGIC) + 44 or raw[: len(MAGIC)] != MAGIC:
            raise CacheError(f"{path}: not a signed-distance cache file")
        off = len(MAGIC)
        ox, oy, oz, voxel, nx, ny, nz = struct.unpack_from("<3dd3I", raw, off)
        off += 44
        expected = nx * ny * nz * 4
        if len(raw) - off != expected:
            raise CacheError(f"{path}: truncated cache payload")
        flat = np.frombuffer(raw, dtype="<f4", offset=off)
        values = np.transpose(flat.reshape(nz, ny, nx), (2, 1, 0))
        return SdfGrid(np.array([ox, oy, oz]), voxel, values)


def build_sdf(
    mesh: TriangleMesh,
    voxel_size: float = DEFAULT_VOXEL_SIZE,
    padding: float = DEFAULT_PADDING,
) -> SdfGrid:
    """Voxelize a watertight mesh into a signed distance grid."""
    if voxel_size <= 0.0 or padding < 0.0:
        raise DataError("voxel_size must be positive and padding non-negative")
    if len(mesh.faces) == 0:
        raise DataError("mesh has no triangles")
    check_watertight(mesh)
    lo, hi = mesh.bounds()
    lo = lo - padding
    hi = hi + padding
    dims = np.maximum(np.ceil((hi - lo) / voxel_size).astype(np.int64) + 1, 2)
    face_n, edge_n, vert_n = _pseudonormals(mesh)
    tva, tvb, tvc, cen, rad = _triangle_arrays(mesh)
    out = np.empty((dims[0], dims[1], dims[2]), dtype=np.float64)
    _grid_kernel(
        lo[0], lo[1], lo[2], voxel_size,
        dims[0], dims[1], dims[2],
        tva, tvb, tvc, cen, rad,
        np.ascontiguousarray(face_n),
        np.ascontiguousarray(edge_n),
        np.ascontiguousarray(vert_n),
        out,
    )
    grid = SdfGrid(lo, voxel_size, out.astype(np.float32))
    diag = float(np.linalg.norm(hi - lo))
    if float(np.max(np.abs(grid.values))) > diag:
        raise DataError("signed distance exceeded the padded bounding diagonal")
    return grid


def _cache_dir_for(mesh_path, cache_dir=None) -> Path:
    if cache_dir is not None:
        return Path(cache_dir)
    env = os.environ.get(CACHE_DIR_ENV)
    if env:
        return Path(env)
    return Path(mesh_path).resolve().parent / ".sdfcache"


def cache_key(mesh_path, voxel_size: float, padding: float) -> str:
    h = hashlib.sha256()
    h.update(Path(mesh_path).read_bytes())
    h.update(struct.pack("<dd", voxel_size, padding))
    h.update(MAGIC)
    return h.hexdigest()[:24]


def get_or_build_sdf(
    mesh_path,
    voxel_size: float = DEFAULT_VOXEL_SIZE,
    padding: float = DEFAULT_PADDING,
    cache_dir=None,
) -> SdfGrid:
    """Load the cached grid for this mesh content and build parameters,
    building and caching on a miss."""
    directory = _cache_dir_for(mesh_path, cache_dir)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"{cache_key(mesh_path, voxel_size, padding)}.sdf"
    if path.exists():
        return SdfGrid.load(path)
    grid = build_sdf(load_mesh(mesh_path), voxel_size, padding)
    grid.save(path)
    return grid
