"""Point-cloud preprocessing: normalization, sampling, patching, augmentation.

All functions are pure and operate on (P, 3) float64 arrays. Randomized
operations take an explicit seed and are fully reproducible from it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError


@dataclass
class PointCloud:
    points: np.ndarray  # (P, 3)
    label: int | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise InputError(f"point cloud must be (P, 3), got {self.points.shape}")


@dataclass
class PatchSet:
    """Local neighborhoods: per-patch points are relative to their center."""

    centers: np.ndarray  # (N, 3)
    groups: np.ndarray   # (N, K, 3), center-subtracted
    indices: np.ndarray  # (N, K) source indices of each group's points

    @property
    def num_patches(self):
        return self.centers.shape[0]

    @property
    def group_size(self):
        return self.groups.shape[1]

    def absolute_groups(self):
        """Group points re-expressed in cloud coordinates, shape (N, K, 3)."""
        return self.groups + self.centers[:, None, :]


def normalize_unit_sphere(pc: PointCloud) -> PointCloud:
    """Center at the origin and scale the farthest point to norm 1.

    A degenerate cloud whose points all coincide maps to all-zeros.
    """
    if pc.points.shape[0] < 1:
        raise InputError("cannot normalize an empty cloud")
    centered = pc.points - pc.points.mean(axis=0)
    radius = np.linalg.norm(centered, axis=1).max()
    if radius == 0.0:
        return PointCloud(centered, label=pc.label)
    return PointCloud(centered / radius, label=pc.label)


def fps(pc: PointCloud, n: int, seed: int) -> np.ndarray:
    """Farthest-point sampling indices.

    The first index is drawn uniformly from the seeded generator; every later
    pick maximizes the minimum (squared) distance to the selected set, ties
    resolved toward the lowest index.
    """
    points = pc.points
    total = points.shape[0]
    if not 1 <= n <= total:
        raise InputError(f"fps asked for {n} of {total} points")
    rng = np.random.default_rng(seed)
    selected = np.empty(n, dtype=np.int64)
    selected[0] = rng.integers(total)
    min_d2 = ((points - points[selected[0]]) ** 2).sum(axis=1)
    for i in range(1, n):
        nxt = int(np.argmax(min_d2))  # argmax takes the first = lowest index
        selected[i] = nxt
        d2 = ((points - points[nxt]) ** 2).sum(axis=1)
        np.minimum(min_d2, d2, out=min_d2)
    return selected


def knn_group(pc: PointCloud, centers, k: int) -> PatchSet:
    """Group the k nearest points (ties by lowest index) around each center.

    ``centers`` are indices into the cloud; group coordinates are re-centered
    by subtracting the center point.
    """
    points = pc.points
    total = points.shape[0]
    if k > total:
        raise InputError(f"k={k} exceeds cloud size {total}")
    centers = np.asarray(centers, dtype=np.int64)
    center_xyz = points[centers]
    d2 = ((center_xyz[:, None, :] - points[None, :, :]) ** 2).sum(axis=2)
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    groups = points[order] - center_xyz[:, None, :]
    return PatchSet(centers=center_xyz.copy(), groups=groups, indices=order)


def patchify(pc: PointCloud, num_patches: int, group_size: int, seed: int) -> PatchSet:
    """FPS centers followed by kNN grouping; the standard tokenization step."""
    centers = fps(pc, num_patches, seed)
    return knn_group(pc, centers, group_size)


def coverage_fraction(patches: PatchSet, pc: PointCloud) -> float:
    """Fraction of input points appearing in at least one group (diagnostic)."""
    covered = np.unique(patches.indices)
    return covered.size / pc.points.shape[0]


def chamfer(a, b) -> float:
    """Symmetric mean-squared Chamfer distance between two point sets."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise InputError("chamfer distance of an empty set")
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    return float(d2.min(axis=1).mean() + d2.min(axis=0).mean())


def pairwise_distances(centers) -> np.ndarray:
    """Euclidean distance matrix between patch centers; symmetric, zero diagonal."""
    centers = np.asarray(centers, dtype=np.float64)
    diff = centers[:, None, :] - centers[None, :, :]
    return np.sqrt((diff ** 2).sum(axis=2))


@dataclass
class AugmentConfig:
    """Which perturbations to apply; every field off yields the identity map."""

    scale: bool = False
    scale_range: tuple[float, float] = (2.0 / 3.0, 3.0 / 2.0)
    noise_sigma: float = 0.0
    rotate_axes: str = ""      # subset of "xyz", applied in the given order
    dropout: float = 0.0       # fraction of points removed
    subsample: int | None = None  # target point count after subsampling

    def validate(self):
        lo, hi = self.scale_range
        if lo <= 0 or hi <= 0 or lo > hi:
            raise ConfigError(f"invalid scale range {self.scale_range}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout fraction {self.dropout} outside [0, 1)")
        if self.noise_sigma < 0:
            raise ConfigError(f"negative noise sigma {self.noise_sigma}")
        if any(ax not in "xyz" for ax in self.rotate_axes):
            raise ConfigError(f"unknown rotation axes {self.rotate_axes!r}")
        if self.subsample is not None and self.subsample < 1:
            raise ConfigError(f"subsample target {self.subsample} below 1")


def _axis_rotation(axis: str, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    if axis == "x":
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=np.float64)
    if axis == "y":
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], dtype=np.float64)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=np.float64)


def augment(pc: PointCloud, spec: AugmentConfig, seed: int) -> PointCloud:
    """Apply the configured perturbations in order: scale, rotate, noise,
    dropout, subsample. Deterministic for a given (spec, seed)."""
    spec.validate()
    rng = np.random.default_rng(seed)
    points = pc.points
    if spec.scale:
        lo, hi = spec.scale_range
        points = points * rng.uniform(lo, hi, size=3)
    for axis in spec.rotate_axes:
        angle = rng.uniform(0.0, 2.0 * np.pi)
        points = points @ _axis_rotation(axis, angle).T
    if spec.noise_sigma > 0:
        points = points + rng.normal(0.0, spec.noise_sigma, size=points.shape)
    if spec.dropout > 0:
        total = points.shape[0]
        keep = max(1, total - int(round(spec.dropout * total)))
        kept = np.sort(rng.choice(total, size=keep, replace=False))
        points = points[kept]
    if spec.subsample is not None and spec.subsample < points.shape[0]:
        kept = np.sort(rng.choice(points.shape[0], size=spec.subsample, replace=False))
        points = points[kept]
    return PointCloud(points, label=pc.label)
