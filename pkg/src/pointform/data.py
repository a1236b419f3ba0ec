"""Labeled desk-scale data: a procedural 8-class shape generator plus
directory ingestion of XYZ/PLY files with a CSV label manifest."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cloud_io import read_cloud
from .errors import ConfigError, InputError
from .geometry import PointCloud, normalize_unit_sphere
from .seeding import derive_seed

CLASS_NAMES = ("sphere", "box", "cylinder", "cone", "torus", "plane", "helix", "cross")


@dataclass
class ShapeSpec:
    kind: str
    n_points: int = 1024
    jitter: float = 0.0

    def __post_init__(self):
        if self.kind not in CLASS_NAMES:
            raise ConfigError(f"unknown shape class {self.kind!r}")
        if self.n_points < 1:
            raise ConfigError("n_points must be positive")
        if self.jitter < 0:
            raise ConfigError("jitter must be nonnegative")

    @property
    def label(self):
        return CLASS_NAMES.index(self.kind)


def _sample_sphere(rng, n):
    # antipodal pairs put the centroid exactly at the origin (even counts),
    # so unit-sphere normalization preserves the common radius
    half = (n + 1) // 2
    v = rng.standard_normal((half, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return np.concatenate([v, -v])[:n]


def _sample_box(rng, n):
    ext = rng.uniform(0.3, 1.0, size=3)  # half extents per axis
    areas = np.array([ext[1] * ext[2], ext[0] * ext[2], ext[0] * ext[1]])
    areas = np.repeat(areas, 2)  # six faces
    face = rng.choice(6, size=n, p=areas / areas.sum())
    pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * ext
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    pts[np.arange(n), axis] = sign * ext[axis]
    return pts


def _sample_cylinder(rng, n):
    r = rng.uniform(0.3, 1.0)
    h = rng.uniform(0.5, 2.0)
    lateral = 2 * np.pi * r * h
    caps = 2 * np.pi * r * r
    on_side = rng.uniform(size=n) < lateral / (lateral + caps)
    theta = rng.uniform(0, 2 * np.pi, size=n)
    pts = np.empty((n, 3))
    # lateral surface
    pts[:, 0] = r * np.cos(theta)
    pts[:, 1] = r * np.sin(theta)
    pts[:, 2] = rng.uniform(-h / 2, h / 2, size=n)
    # caps: uniform disc radius, snap z to a lid
    disc_r = r * np.sqrt(rng.uniform(size=n))
    cap_side = np.where(rng.uniform(size=n) < 0.5, 1.0, -1.0)
    cap = ~on_side
    pts[cap, 0] = disc_r[cap] * np.cos(theta[cap])
    pts[cap, 1] = disc_r[cap] * np.sin(theta[cap])
    pts[cap, 2] = cap_side[cap] * h / 2
    return pts


def _sample_cone(rng, n):
    r = rng.uniform(0.4, 1.0)
    h = rng.uniform(0.8, 2.0)
    slant = np.sqrt(r * r + h * h)
    lateral = np.pi * r * slant
    base = np.pi * r * r
    on_side = rng.uniform(size=n) < lateral / (lateral + base)
    theta = rng.uniform(0, 2 * np.pi, size=n)
    u = np.sqrt(rng.uniform(size=n))  # area-uniform along the slant
    pts = np.empty((n, 3))
    pts[:, 0] = u * r * np.cos(theta)
    pts[:, 1] = u * r * np.sin(theta)
    pts[:, 2] = (1.0 - u) * h  # apex at z=h, rim at z=0
    disc_r = r * np.sqrt(rng.uniform(size=n))
    base_mask = ~on_side
    pts[base_mask, 0] = disc_r[base_mask] * np.cos(theta[base_mask])
    pts[base_mask, 1] = disc_r[base_mask] * np.sin(theta[base_mask])
    pts[base_mask, 2] = 0.0
    return pts


def _sample_torus(rng, n):
    minor = rng.uniform(0.15, 0.45)
    major = 1.0
    out = np.empty((n, 3))
    filled = 0
    while filled < n:
        take = (n - filled) * 2
        phi = rng.uniform(0, 2 * np.pi, size=take)
        theta = rng.uniform(0, 2 * np.pi, size=take)
        # surface density is proportional to major + minor*cos(theta)
        accept = rng.uniform(size=take) < (major + minor * np.cos(theta)) / (major + minor)
        phi, theta = phi[accept], theta[accept]
        count = min(len(phi), n - filled)
        ring = major + minor * np.cos(theta[:count])
        out[filled:filled + count, 0] = ring * np.cos(phi[:count])
        out[filled:filled + count, 1] = ring * np.sin(phi[:count])
        out[filled:filled + count, 2] = minor * np.sin(theta[:count])
        filled += count
    return out


def _sample_plane(rng, n):
    a = rng.uniform(0.5, 1.5)
    b = rng.uniform(0.5, 1.5)
    pts = np.zeros((n, 3))
    pts[:, 0] = rng.uniform(-a, a, size=n)
    pts[:, 1] = rng.uniform(-b, b, size=n)
    return pts


def _sample_helix(rng, n):
    turns = rng.uniform(2.0, 4.0)
    pitch = rng.uniform(0.15, 0.4)
    t = rng.uniform(0, 2 * np.pi * turns, size=n)
    pts = np.empty((n, 3))
    pts[:, 0] = np.cos(t)
    pts[:, 1] = np.sin(t)
    pts[:, 2] = pitch * t / (2 * np.pi)
    return pts


def _sample_cross(rng, n):
    # three orthogonal arms, each a long thin box surface
    thickness = rng.uniform(0.1, 0.25)
    counts = rng.multinomial(n, [1 / 3] * 3)
    chunks = []
    for axis, count in enumerate(counts):
        ext = np.full(3, thickness)
        ext[axis] = 1.0
        areas = np.array([ext[1] * ext[2], ext[0] * ext[2], ext[0] * ext[1]])
        areas = np.repeat(areas, 2)
        face = rng.choice(6, size=count, p=areas / areas.sum())
        pts = rng.uniform(-1.0, 1.0, size=(count, 3)) * ext
        fa = face // 2
        sign = np.where(face % 2 == 0, 1.0, -1.0)
        pts[np.arange(count), fa] = sign * ext[fa]
        chunks.append(pts)
    return np.concatenate(chunks)


_SAMPLERS = {
    "sphere": _sample_sphere,
    "box": _sample_box,
    "cylinder": _sample_cylinder,
    "cone": _sample_cone,
    "torus": _sample_torus,
    "plane": _sample_plane,
    "helix": _sample_helix,
    "cross": _sample_cross,
}


def generate(spec: ShapeSpec, seed: int) -> PointCloud:
    """Sample the shape surface, jitter, then normalize into the unit sphere."""
    rng = np.random.default_rng(seed)
    points = _SAMPLERS[spec.kind](rng, spec.n_points)
    if spec.jitter > 0:
        points = points + rng.normal(0.0, spec.jitter, size=points.shape)
    return normalize_unit_sphere(PointCloud(points, label=spec.label))


@dataclass
class DatasetHandle:
    """Ordered samples with a deterministic train/val split."""

    clouds: list
    labels: np.ndarray
    train_indices: list
    val_indices: list
    seed: int
    class_names: tuple = CLASS_NAMES

    @property
    def num_classes(self):
        return len(self.class_names)

    def __len__(self):
        return len(self.clouds)


def _split_indices(count, val_fraction, seed):
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError(f"validation fraction {val_fraction} outside (0, 1)")
    rng = np.random.default_rng(derive_seed(seed, 7))
    order = rng.permutation(count)
    val_count = int(round(count * val_fraction))
    val = sorted(order[:val_count].tolist())
    train = sorted(order[val_count:].tolist())
    return train, val


def make_dataset(per_class: int, seed: int, n_points: int = 1024, jitter: float = 0.01,
                 val_fraction: float = 0.2) -> DatasetHandle:
    """Balanced synthetic dataset: ``per_class`` clouds for each of 8 classes."""
    if per_class < 1:
        raise ConfigError("per_class must be >= 1")
    clouds, labels = [], []
    for ci, kind in enumerate(CLASS_NAMES):
        spec = ShapeSpec(kind, n_points=n_points, jitter=jitter)
        for i in range(per_class):
            clouds.append(generate(spec, seed=derive_seed(seed, ci, i)))
            labels.append(ci)
    train, val = _split_indices(len(clouds), val_fraction, seed)
    return DatasetHandle(
        clouds=clouds, labels=np.array(labels, dtype=np.int64),
        train_indices=train, val_indices=val, seed=seed,
    )


@dataclass
class IngestReport:
    loaded: int = 0
    skipped_unknown: int = 0
    failures: list = field(default_factory=list)   # (filename, reason)
    missing: list = field(default_factory=list)    # manifest rows without files


def read_manifest(path):
    """CSV with header 'filename,label'; returns {filename: label}."""
    mapping = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["filename", "label"]:
            raise InputError(f"manifest {path} must start with 'filename,label'")
        for row in reader:
            if not row:
                continue
            mapping[row[0].strip()] = row[1].strip()
    return mapping


def ingest_directory(path, manifest_path, seed: int = 0,
                     val_fraction: float = 0.2) -> tuple[DatasetHandle, IngestReport]:
    """Load every labeled .xyz/.ply under ``path`` in lexicographic order.

    Unreadable files are itemized in the report and skipped; an empty result
    is an input error.
    """
    root = Path(path)
    if not root.is_dir():
        raise InputError(f"{path} is not a directory")
    manifest = read_manifest(manifest_path)
    label_names = sorted(set(manifest.values()))
    label_index = {name: i for i, name in enumerate(label_names)}

    report = IngestReport()
    clouds, labels = [], []
    seen = set()
    manifest_file = Path(manifest_path).resolve()
    for file in sorted(root.iterdir()):
        if not file.is_file() or file.resolve() == manifest_file:
            continue
        if file.suffix.lower() not in (".xyz", ".ply"):
            report.skipped_unknown += 1
            continue
        if file.name not in manifest:
            report.failures.append((file.name, "not in manifest"))
            continue
        seen.add(file.name)
        try:
            cloud = read_cloud(file)
        except Exception as exc:  # itemize and continue
            report.failures.append((file.name, str(exc)))
            continue
        cloud = normalize_unit_sphere(cloud)
        cloud.label = label_index[manifest[file.name]]
        clouds.append(cloud)
        labels.append(cloud.label)
        report.loaded += 1
    report.missing = sorted(set(manifest) - seen)
    if not clouds:
        raise InputError(f"no usable point clouds in {path}")
    train, val = _split_indices(len(clouds), val_fraction, seed)
    handle = DatasetHandle(
        clouds=clouds, labels=np.array(labels, dtype=np.int64),
        train_indices=train, val_indices=val, seed=seed,
        class_names=tuple(label_names),
    )
    return handle, report
