"""Synthetic primitive shapes sampled uniformly over their surfaces.

Six single-primitive families serve classification; three two-part
composites (each part carrying its own label) serve part segmentation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import PointCloud, normalize_unit_sphere

CLASSIFICATION_FAMILIES = ("sphere", "cube", "cylinder", "torus", "cone", "plane")
SEGMENTATION_FAMILIES = ("sphere_on_cylinder", "cone_on_cylinder", "plane_on_cylinder")


@dataclass(frozen=True)
class SyntheticShapeSpec:
    family: str
    n_points: int = 1024
    noise_sigma: float = 0.005
    seed: int = 0

    def __post_init__(self):
        if self.n_points < 1:
            raise ValueError("n_points must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")


def parts_per_category() -> dict[int, list[int]]:
    """Global part ids owned by each segmentation category (two per composite)."""
    return {c: [2 * c, 2 * c + 1] for c in range(len(SEGMENTATION_FAMILIES))}


def _unit_sphere(n: int, rng) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _balanced_sphere(n: int, rng) -> np.ndarray:
    # recentre and reproject until the sample mean sits on the centre, so
    # the normalised cloud lies exactly on the unit sphere
    v = _unit_sphere(n, rng)
    if n == 1:
        return v
    for _ in range(60):
        v = v - v.mean(axis=0)
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        if np.linalg.norm(v.mean(axis=0)) < 1e-13:
            break
    return v


def _disk(n: int, radius: float, z: float, rng) -> np.ndarray:
    r = radius * np.sqrt(rng.random(n))
    t = rng.uniform(0, 2 * np.pi, n)
    return np.column_stack([r * np.cos(t), r * np.sin(t), np.full(n, z)])


def _split_counts(areas, n: int, rng) -> np.ndarray:
    areas = np.asarray(areas, dtype=float)
    return rng.multinomial(n, areas / areas.sum())


def _box(n: int, dims, rng) -> np.ndarray:
    a, b, c = dims
    faces = [(b * c, 0), (b * c, 0), (a * c, 1), (a * c, 1), (a * b, 2), (a * b, 2)]
    counts = _split_counts([f[0] for f in faces], n, rng)
    half = np.array(dims) / 2
    out = []
    for face, m in enumerate(counts):
        axis = faces[face][1]
        pts = rng.uniform(-half, half, size=(m, 3))
        pts[:, axis] = half[axis] if face % 2 == 0 else -half[axis]
        out.append(pts)
    return np.concatenate(out)


def _cylinder(n: int, radius: float, height: float, rng, z0: float = None, caps: bool = True) -> np.ndarray:
    z0 = -height / 2 if z0 is None else z0
    areas = [2 * np.pi * radius * height]
    if caps:
        areas += [np.pi * radius ** 2] * 2
    counts = _split_counts(areas, n, rng)
    t = rng.uniform(0, 2 * np.pi, counts[0])
    side = np.column_stack([radius * np.cos(t), radius * np.sin(t), rng.uniform(z0, z0 + height, counts[0])])
    parts = [side]
    if caps:
        parts += [_disk(counts[1], radius, z0, rng), _disk(counts[2], radius, z0 + height, rng)]
    return np.concatenate(parts)


def _torus(n: int, major: float, minor: float, rng) -> np.ndarray:
    # area element is proportional to (major + minor cos v): rejection-sample v
    vs = np.empty(0)
    while len(vs) < n:
        v = rng.uniform(0, 2 * np.pi, 2 * n)
        keep = rng.uniform(0, major + minor, 2 * n) < major + minor * np.cos(v)
        vs = np.concatenate([vs, v[keep]])
    v = vs[:n]
    u = rng.uniform(0, 2 * np.pi, n)
    ring = major + minor * np.cos(v)
    return np.column_stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)])


def _cone(n: int, radius: float, height: float, rng, z0: float = None, base: bool = True) -> np.ndarray:
    z0 = -height / 2 if z0 is None else z0
    slant = np.sqrt(radius ** 2 + height ** 2)
    areas = [np.pi * radius * slant] + ([np.pi * radius ** 2] if base else [])
    counts = _split_counts(areas, n, rng)
    # fraction of the way from apex to rim; lateral area grows linearly with it
    s = np.sqrt(rng.random(counts[0]))
    t = rng.uniform(0, 2 * np.pi, counts[0])
    lateral = np.column_stack([s * radius * np.cos(t), s * radius * np.sin(t), z0 + height * (1 - s)])
    parts = [lateral]
    if base:
        parts.append(_disk(counts[1], radius, z0, rng))
    return np.concatenate(parts)


def _plane(n: int, dims, rng, z: float = 0.0) -> np.ndarray:
    a, b = dims
    pts = rng.uniform([-a / 2, -b / 2], [a / 2, b / 2], size=(n, 2))
    return np.column_stack([pts, np.full(n, z)])


def _sample_primitive(family: str, n: int, rng) -> np.ndarray:
    if family == "sphere":
        return _balanced_sphere(n, rng)
    if family == "cube":
        return _box(n, rng.uniform(0.75, 1.25, size=3), rng)
    if family == "cylinder":
        return _cylinder(n, rng.uniform(0.3, 0.6), rng.uniform(1.2, 2.0), rng)
    if family == "torus":
        return _torus(n, 1.0, rng.uniform(0.2, 0.45), rng)
    if family == "cone":
        return _cone(n, rng.uniform(0.5, 0.9), rng.uniform(1.2, 2.0), rng)
    if family == "plane":
        return _plane(n, rng.uniform(0.8, 1.2, size=2), rng)
    raise ValueError(f"unknown shape family {family!r}")


def _sample_composite(family: str, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Points and local part ids (0 = supporting cylinder, 1 = top part)."""
    r = rng.uniform(0.15, 0.3)
    h = rng.uniform(1.0, 1.6)
    if family == "sphere_on_cylinder":
        rad = rng.uniform(0.4, 0.6)
        top_area = 4 * np.pi * rad ** 2
        sample_top = lambda m: _unit_sphere(m, rng) * rad + [0, 0, h + rad]
    elif family == "cone_on_cylinder":
        rad = rng.uniform(0.4, 0.6)
        ch = rng.uniform(0.6, 1.0)
        top_area = np.pi * rad * (rad + np.sqrt(rad ** 2 + ch ** 2))
        sample_top = lambda m: _cone(m, rad, ch, rng, z0=h)
    elif family == "plane_on_cylinder":
        side = rng.uniform(1.2, 1.8, size=2)
        top_area = side[0] * side[1]
        sample_top = lambda m: _plane(m, side, rng, z=h)
    else:
        raise ValueError(f"unknown shape family {family!r}")
    leg_area = 2 * np.pi * r * h + np.pi * r ** 2
    n_leg, n_top = _split_counts([leg_area, top_area], n, rng)
    leg = _cylinder(n_leg, r, h, rng, z0=0.0, caps=False)
    pts = np.concatenate([leg, sample_top(n_top)])
    labels = np.concatenate([np.zeros(n_leg, np.int64), np.ones(n_top, np.int64)])
    return pts, labels


def generate_primitive_cloud(spec: SyntheticShapeSpec) -> PointCloud:
    """Sample, jitter and normalise one shape; deterministic in ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    if spec.family in CLASSIFICATION_FAMILIES:
        pts = _sample_primitive(spec.family, spec.n_points, rng)
        cloud = PointCloud(pts, object_label=CLASSIFICATION_FAMILIES.index(spec.family))
    elif spec.family in SEGMENTATION_FAMILIES:
        cat = SEGMENTATION_FAMILIES.index(spec.family)
        pts, local = _sample_composite(spec.family, spec.n_points, rng)
        perm = rng.permutation(len(pts))
        cloud = PointCloud(pts[perm], point_labels=local[perm] + 2 * cat, object_label=cat)
    else:
        raise ValueError(f"unknown shape family {spec.family!r}")
    if spec.noise_sigma > 0:
        cloud.coords = cloud.coords + rng.normal(0.0, spec.noise_sigma, size=cloud.coords.shape)
    return normalize_unit_sphere(cloud)
