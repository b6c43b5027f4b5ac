"""Object dataset: meshes, grasp annotations, and cached distance fields.

A dataset is a directory of mesh files plus one JSON annotation per
object (schema "grasp-v1").  The annotation pins down everything the
environment needs about an object: the target pre-grasp (hand pose in
the object frame plus finger controls), the controls that close the
grasp, which probe point must touch the surface for a closed grasp to
count, the nominal upright rotation, and the three stable rest
orientations in the order upright, left side, right side.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .assets import data_path
from .errors import DataError
from .geom import quat_normalize
from .handmodel import HandSpec
from .sdfield import SdfGrid, get_or_build_sdf, load_mesh

STABLE_POSE_NAMES = ("upright", "left", "right")


def _unit_quat(v, what: str) -> np.ndarray:
    q = np.asarray(v, dtype=np.float64)
    if q.shape != (4,) or not np.all(np.isfinite(q)):
        raise DataError(f"{what}: expected a finite quaternion (x, y, z, w)")
    n = np.linalg.norm(q)
    if abs(n - 1.0) > 1e-6:
        raise DataError(f"{what}: quaternion norm {n:.6f} is not 1")
    q = q / n
    q.flags.writeable = False
    return q


@dataclass(frozen=True)
class GraspAnnotation:
    object_id: str
    category: str
    mesh: str                   # path relative to the annotation file
    grasp_position: np.ndarray  # hand position in the object frame
    grasp_rotation: np.ndarray  # hand rotation in the object frame
    grasp_controls: np.ndarray  # pre-grasp finger controls (5)
    close_controls: np.ndarray  # controls that close the grasp (5)
    key_probe: str              # probe that must touch the surface when closed
    nominal_rotation: np.ndarray
    stable_rotations: np.ndarray  # (3, 4): upright, left side, right side

    def __post_init__(self):
        if not self.object_id or not self.category:
            raise DataError("annotation needs non-empty object_id and category")
        pos = np.asarray(self.grasp_position, dtype=np.float64)
        if pos.shape != (3,) or not np.all(np.isfinite(pos)):
            raise DataError(f"{self.object_id}: grasp position must be 3 finite values")
        pos.flags.writeable = False
        object.__setattr__(self, "grasp_position", pos)
        object.__setattr__(
            self, "grasp_rotation", _unit_quat(self.grasp_rotation, f"{self.object_id} grasp")
        )
        for name in ("grasp_controls", "close_controls"):
            u = np.asarray(getattr(self, name), dtype=np.float64)
            if u.shape != (5,) or not np.all(np.isfinite(u)):
                raise DataError(f"{self.object_id}: {name} must be 5 finite values")
            u.flags.writeable = False
            object.__setattr__(self, name, u)
        object.__setattr__(
            self, "nominal_rotation",
            _unit_quat(self.nominal_rotation, f"{self.object_id} nominal"),
        )
        stable = np.asarray(self.stable_rotations, dtype=np.float64)
        if stable.shape != (3, 4):
            raise DataError(f"{self.object_id}: need 3 stable rotations (upright, left, right)")
        stable = np.stack([
            _unit_quat(stable[i], f"{self.object_id} stable {STABLE_POSE_NAMES[i]}")
            for i in range(3)
        ])
        stable.flags.writeable = False
        object.__setattr__(self, "stable_rotations", stable)


def annotation_from_dict(data: dict) -> GraspAnnotation:
    if data.get("schema") != "grasp-v1":
        raise DataError(f"expected grasp-v1 schema, got {data.get('schema')!r}")
    try:
        return GraspAnnotation(
            object_id=data["id"],
            category=data["category"],
            mesh=data["mesh"],
            grasp_position=data["grasp_position"],
            grasp_rotation=data["grasp_rotation_xyzw"],
            grasp_controls=data["grasp_controls"],
            close_controls=data["close_controls"],
            key_probe=data["key_probe"],
            nominal_rotation=data["nominal_rotation_xyzw"],
            stable_rotations=data["stable_rotations_xyzw"],
        )
    except KeyError as exc:
        raise DataError(f"malformed grasp annotation: missing {exc}") from exc


def annotation_to_dict(ann: GraspAnnotation) -> dict:
    return {
        "schema": "grasp-v1",
        "id": ann.object_id,
        "category": ann.category,
        "mesh": ann.mesh,
        "grasp_position": list(map(float, ann.grasp_position)),
        "grasp_rotation_xyzw": list(map(float, ann.grasp_rotation)),
        "grasp_controls": list(map(float, ann.grasp_controls)),
        "close_controls": list(map(float, ann.close_controls)),
        "key_probe": ann.key_probe,
        "nominal_rotation_xyzw": list(map(float, ann.nominal_rotation)),
        "stable_rotations_xyzw": [list(map(float, q)) for q in ann.stable_rotations],
    }


def load_annotation(path) -> GraspAnnotation:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: {exc}") from exc
    return annotation_from_dict(data)


def save_annotation(ann: GraspAnnotation, path) -> None:
    Path(path).write_text(json.dumps(annotation_to_dict(ann), indent=2) + "\n")


@dataclass(frozen=True)
class ObjectEntry:
    annotation: GraspAnnotation
    sdf: SdfGrid
    bbox_lo: np.ndarray         # mesh AABB, object frame
    bbox_hi: np.ndarray
    category_index: int
    mass_mean: float
    mass_sigma: float
    key_probe_index: int


class ObjectSet:
    """All objects of a dataset with their SDFs ready to query."""

    def __init__(self, entries):
        if not entries:
            raise DataError("object set is empty")
        self.entries = tuple(entries)
        self.categories = tuple(sorted({e.annotation.category for e in entries}))
        # per-object arrays for vectorized gathers
        self.grasp_pos = np.stack([e.annotation.grasp_position for e in entries])
        self.grasp_quat = np.stack([e.annotation.grasp_rotation for e in entries])
        self.grasp_controls = np.stack([e.annotation.grasp_controls for e in entries])
        self.close_controls = np.stack([e.annotation.close_controls for e in entries])
        self.nominal_quat = np.stack([e.annotation.nominal_rotation for e in entries])
        self.bbox_lo = np.stack([e.bbox_lo for e in entries])
        self.bbox_hi = np.stack([e.bbox_hi for e in entries])
        self.category_index = np.array([e.category_index for e in entries])
        self.mass_mean = np.array([e.mass_mean for e in entries])
        self.mass_sigma = np.array([e.mass_sigma for e in entries])
        self.key_probe_index = np.array([e.key_probe_index for e in entries])

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def bundled_object_dir() -> Path:
    return data_path("objects")


def find_annotations(directory) -> list:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"object dataset directory not found: {directory}")
    found = []
    for path in sorted(directory.glob("*.json")):
        try:
            data = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"{path}: {exc}") from exc
        if isinstance(data, dict) and data.get("schema") == "grasp-v1":
            found.append(path)
    if not found:
        raise DataError(f"no grasp-v1 annotations in {directory}")
    return found


def load_object_set(
    directory,
    hand: HandSpec,
    mass_distributions: dict,
    voxel_size: float = 0.005,
    padding: float = 0.04,
    cache_dir=None,
    workers: int = 1,
) -> ObjectSet:
    """Load every annotated object under ``directory`` ("bundled" for the
    packaged set), building or reusing cached distance fields."""
    if directory in (None, "bundled"):
        directory = bundled_object_dir()
    elif directory == "toy":
        directory = data_path("toy_objects")
    paths = find_annotations(directory)
    annotations = [load_annotation(p) for p in paths]
    ids = [a.object_id for a in annotations]
    if len(set(ids)) != len(ids):
        raise DataError(f"duplicate object ids in {directory}")

    categories = sorted({a.category for a in annotations})
    cat_index = {c: i for i, c in enumerate(categories)}

    mesh_paths = [Path(p).parent / a.mesh for p, a in zip(paths, annotations)]
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            sdfs = list(pool.map(
                lambda mp: get_or_build_sdf(mp, voxel_size=voxel_size,
                                            padding=padding, cache_dir=cache_dir),
                mesh_paths,
            ))
    else:
        sdfs = [
            get_or_build_sdf(mp, voxel_size=voxel_size, padding=padding, cache_dir=cache_dir)
            for mp in mesh_paths
        ]

    entries = []
    for ann, mesh_path, sdf in zip(annotations, mesh_paths, sdfs):
        mesh = load_mesh(mesh_path)
        bbox_lo = mesh.vertices.min(axis=0)
        bbox_hi = mesh.vertices.max(axis=0)
        if ann.category not in mass_distributions:
            raise DataError(
                f"{ann.object_id}: no mass distribution configured for "
                f"category {ann.category!r}"
            )
        mean, sigma = mass_distributions[ann.category]
        if np.any(ann.grasp_controls < hand.control_lower - 1e-9) or np.any(
            ann.grasp_controls > hand.control_upper + 1e-9
        ):
            raise DataError(f"{ann.object_id}: grasp controls outside hand limits")
        entries.append(ObjectEntry(
            annotation=ann,
            sdf=sdf,
            bbox_lo=bbox_lo,
            bbox_hi=bbox_hi,
            category_index=cat_index[ann.category],
            mass_mean=mean,
            mass_sigma=sigma,
            key_probe_index=hand.probe_index(ann.key_probe),
        ))
    return ObjectSet(entries)
