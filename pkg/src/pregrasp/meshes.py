"""Watertight triangle-mesh generators for primitive shapes.

Used for bundled dataset objects and for validating the distance-field
builder against shapes with known closed-form distance functions.  All
primitives are centered at the origin with z up and oriented outward.
"""

from __future__ import annotations

import numpy as np


def weld_vertices(vertices: np.ndarray, faces: np.ndarray, tol: float = 1e-9):
    """Merge vertices closer than tol and drop collapsed triangles."""
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    key = np.round(vertices / tol).astype(np.int64)
    _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
    # keep original coordinates (not the rounded ones) for the survivors
    new_vertices = vertices[np.sort(first)]
    order = np.argsort(first)
    remap = np.empty(len(first), dtype=np.int64)
    remap[order] = np.arange(len(first))
    new_faces = remap[inverse[faces]]
    ok = (
        (new_faces[:, 0] != new_faces[:, 1])
        & (new_faces[:, 1] != new_faces[:, 2])
        & (new_faces[:, 0] != new_faces[:, 2])
    )
    return new_vertices, new_faces[ok].astype(np.int32)


def _grid_face(origin, u_vec, v_vec, n):
    """Tessellate one parallelogram face into 2*n*n triangles."""
    origin = np.asarray(origin, dtype=np.float64)
    u_vec = np.asarray(u_vec, dtype=np.float64)
    v_vec = np.asarray(v_vec, dtype=np.float64)
    i, j = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
    verts = origin + (i / n)[..., None] * u_vec + (j / n)[..., None] * v_vec
    verts = verts.reshape(-1, 3)
    idx = np.arange((n + 1) * (n + 1)).reshape(n + 1, n + 1)
    a = idx[:-1, :-1].ravel()
    b = idx[1:, :-1].ravel()
    c = idx[1:, 1:].ravel()
    d = idx[:-1, 1:].ravel()
    # winding gives normals along u x v
    tris = np.concatenate([np.stack([a, b, c], axis=1), np.stack([a, c, d], axis=1)])
    return verts, tris


def box_mesh(extents, segments: int = 1):
    """Axis-aligned box with the given full extents (lx, ly, lz)."""
    hx, hy, hz = 0.5 * np.asarray(extents, dtype=np.float64)
    faces_spec = [
        ((+hx, -hy, -hz), (0, 2 * hy, 0), (0, 0, 2 * hz)),
        ((-hx, -hy, -hz), (0, 0, 2 * hz), (0, 2 * hy, 0)),
        ((-hx, +hy, -hz), (0, 0, 2 * hz), (2 * hx, 0, 0)),
        ((-hx, -hy, -hz), (2 * hx, 0, 0), (0, 0, 2 * hz)),
        ((-hx, -hy, +hz), (2 * hx, 0, 0), (0, 2 * hy, 0)),
        ((-hx, -hy, -hz), (0, 2 * hy, 0), (2 * hx, 0, 0)),
    ]
    all_v, all_f = [], []
    offset = 0
    for origin, u_vec, v_vec in faces_spec:
        v, f = _grid_face(origin, u_vec, v_vec, segments)
        all_v.append(v)
        all_f.append(f + offset)
        offset += len(v)
    return weld_vertices(np.concatenate(all_v), np.concatenate(all_f))


def sphere_mesh(radius: float, n_lon: int = 48, n_lat: int = 24):
    """Latitude-longitude sphere; n_lon*(2*n_lat - 2) triangles."""
    verts = [np.array([0.0, 0.0, radius]), np.array([0.0, 0.0, -radius])]
    rings = []
    for j in range(1, n_lat):
        theta = np.pi * j / n_lat
        z = radius * np.cos(theta)
        r = radius * np.sin(theta)
        phi = 2.0 * np.pi * np.arange(n_lon) / n_lon
        ring = np.stack([r * np.cos(phi), r * np.sin(phi), np.full(n_lon, z)], axis=1)
        rings.append(ring)
    vertices = np.concatenate([np.stack(verts), np.concatenate(rings)])

    def ring_idx(j, k):
        return 2 + (j - 1) * n_lon + (k % n_lon)

    tris = []
    for k in range(n_lon):
        tris.append([0, ring_idx(1, k), ring_idx(1, k + 1)])
        tris.append([1, ring_idx(n_lat - 1, k + 1), ring_idx(n_lat - 1, k)])
    for j in range(1, n_lat - 1):
        for k in range(n_lon):
            a, b = ring_idx(j, k), ring_idx(j, k + 1)
            c, d = ring_idx(j + 1, k), ring_idx(j + 1, k + 1)
            tris.append([a, c, d])
            tris.append([a, d, b])
    return vertices, np.asarray(tris, dtype=np.int32)


def capsule_mesh(radius: float, half_height: float, n_lon: int = 48, n_cap: int = 12):
    """Capsule along z: cylinder of half-length half_height with sphere caps.

    Built as a latitude-longitude sphere whose hemispheres are shifted
    apart by half_height; the strip between the two rim rings becomes
    the cylinder wall.  n_cap is the ring count per hemisphere.
    """
    verts = [np.array([0.0, 0.0, radius + half_height]), np.array([0.0, 0.0, -radius - half_height])]
    phi = 2.0 * np.pi * np.arange(n_lon) / n_lon
    rings = []
    # upper hemisphere from near the pole down to its rim at z = +half_height
    for j in range(1, n_cap + 1):
        theta = 0.5 * np.pi * j / n_cap
        r = radius * np.sin(theta)
        z = radius * np.cos(theta) + half_height
        rings.append(np.stack([r * np.cos(phi), r * np.sin(phi), np.full(n_lon, z)], axis=1))
    # lower hemisphere from its rim at z = -half_height down to near the pole
    for j in range(n_cap, 0, -1):
        theta = 0.5 * np.pi * j / n_cap
        r = radius * np.sin(theta)
        z = -radius * np.cos(theta) - half_height
        rings.append(np.stack([r * np.cos(phi), r * np.sin(phi), np.full(n_lon, z)], axis=1))
    n_rings = len(rings)
    vertices = np.concatenate([np.stack(verts), np.concatenate(rings)])

    def ring_idx(j, k):
        return 2 + j * n_lon + (k % n_lon)

    tris = []
    for k in range(n_lon):
        tris.append([0, ring_idx(0, k), ring_idx(0, k + 1)])
        tris.append([1, ring_idx(n_rings - 1, k + 1), ring_idx(n_rings - 1, k)])
    for j in range(n_rings - 1):
        for k in range(n_lon):
            a, b = ring_idx(j, k), ring_idx(j, k + 1)
            c, d = ring_idx(j + 1, k), ring_idx(j + 1, k + 1)
            tris.append([a, c, d])
            tris.append([a, d, b])
    return vertices, np.asarray(tris, dtype=np.int32)


def cylinder_mesh(radius: float, height: float, n_seg: int = 48):
    """Closed cylinder along z with fan caps."""
    hz = 0.5 * height
    phi = 2.0 * np.pi * np.arange(n_seg) / n_seg
    top_ring = np.stack([radius * np.cos(phi), radius * np.sin(phi), np.full(n_seg, hz)], axis=1)
    bot_ring = top_ring.copy()
    bot_ring[:, 2] = -hz
    vertices = np.concatenate(
        [np.array([[0.0, 0.0, hz], [0.0, 0.0, -hz]]), top_ring, bot_ring]
    )
    tris = []
    for k in range(n_seg):
        kn = (k + 1) % n_seg
        t0, t1 = 2 + k, 2 + kn
        b0, b1 = 2 + n_seg + k, 2 + n_seg + kn
        tris.append([0, t0, t1])
        tris.append([1, b1, b0])
        tris.append([t0, b0, b1])
        tris.append([t0, b1, t1])
    return vertices, np.asarray(tris, dtype=np.int32)


def save_obj(path, vertices: np.ndarray, faces: np.ndarray) -> None:
    """Write a minimal OBJ file (positions and triangles only)."""
    with open(path, "w") as fh:
        for v in np.asarray(vertices, dtype=np.float64):
            fh.write(f"v {v[0]:.9f} {v[1]:.9f} {v[2]:.9f}\n")
        for f in np.asarray(faces):
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")
