"""Point-cloud preprocessing: normalisation, kNN neighbourhoods, moment
features and augmentation."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .numerics import kernels
from .numerics import tensor as T
from .numerics.tensor import Tensor


@dataclass
class PointCloud:
    coords: np.ndarray
    point_labels: np.ndarray | None = None
    object_label: int | None = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3 or len(self.coords) < 1:
            raise ValueError(f"coords must be an N x 3 array with N >= 1, got {self.coords.shape}")
        if self.point_labels is not None:
            self.point_labels = np.asarray(self.point_labels, dtype=np.int64)
            if self.point_labels.shape != (len(self.coords),):
                raise ValueError("point_labels must have one entry per point")

    def __len__(self) -> int:
        return len(self.coords)


@dataclass(frozen=True)
class NeighborIndex:
    indices: np.ndarray  # (N, k) or (B, N, k)
    k: int
    space: str = "coordinate"


@dataclass(frozen=True)
class AugmentationSpec:
    scale_range: tuple[float, float] = (2.0 / 3.0, 1.5)
    translate: float = 0.2
    jitter_sigma: float = 0.01
    jitter_clip: float = 0.05
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError(f"scale range must satisfy 0 < lo <= hi, got {self.scale_range}")
        if self.translate < 0 or self.jitter_sigma < 0 or self.jitter_clip < 0:
            raise ValueError("translate, jitter_sigma and jitter_clip must be non-negative")

    @classmethod
    def identity(cls, seed: int = 0) -> AugmentationSpec:
        return cls((1.0, 1.0), 0.0, 0.0, 0.0, seed)


def normalize_unit_sphere(cloud: PointCloud) -> PointCloud:
    """Centre on the centroid and scale so the farthest point has norm 1."""
    centred = cloud.coords - cloud.coords.mean(axis=0)
    radius = np.sqrt((centred ** 2).sum(axis=1)).max()
    if radius > 0:
        centred = centred / radius
    return replace(cloud, coords=centred)


def knn_graph(points, k: int, space: str = "coordinate") -> NeighborIndex:
    """k nearest neighbours of every row, self included and listed first.

    Accepts (N, D) or batched (B, N, D). Rows are ordered by increasing
    Euclidean distance, ties broken by the lower index.
    """
    x = np.asarray(points.data if isinstance(points, Tensor) else points)
    batched = x.ndim == 3
    if not batched:
        x = x[None]
    B, N, _ = x.shape
    if not 1 <= k <= N:
        raise ValueError(f"k must lie in [1, N={N}], got {k}")
    sq = (x * x).sum(axis=-1)
    d = sq[:, :, None] + sq[:, None, :] - 2.0 * (x @ np.swapaxes(x, 1, 2))
    np.maximum(d, 0.0, out=d)
    idx = kernels.smallest_k(d.reshape(B * N, N), k)
    idx = idx.reshape(B, N, k)
    return NeighborIndex(idx if batched else idx[0], k, space)


def gather_neighbors(features: Tensor, nbr: NeighborIndex) -> Tensor:
    """(N, C) -> (N, k, C), or batched (B, N, C) -> (B, N, k, C)."""
    idx = np.asarray(nbr.indices)
    if features.ndim == 2:
        out = T.gather_rows(T.reshape(features, (1, *features.shape)), idx[None])
        return T.reshape(out, out.shape[1:])
    return T.gather_rows(features, idx)


def moment_features(gathered: Tensor) -> Tensor:
    """Mean over the neighbour axis: the feature of each local shape's moment point.

    Entries are summed in sorted order, so reordering a neighbourhood leaves
    the moment bitwise unchanged.
    """
    return T.sorted_mean(gathered, axis=gathered.ndim - 2)


def intra_pairwise_oracle(gathered) -> np.ndarray:
    """Pairwise-difference aggregate by explicit double loop.

    ``E[..., a, :] = (1/k) * sum_b (X_a - X_b)`` over a neighbourhood. Kept
    deliberately naive: it is the reference the moment-point shortcut is
    checked against.
    """
    g = np.asarray(gathered.data if isinstance(gathered, Tensor) else gathered)
    k = g.shape[-2]
    out = np.zeros_like(g)
    for a in range(k):
        acc = np.zeros_like(g[..., a, :])
        for b in range(k):
            acc += g[..., a, :] - g[..., b, :]
        out[..., a, :] = acc / k
    return out


def augment_coords(coords: np.ndarray, spec: AugmentationSpec, rng: np.random.Generator) -> np.ndarray:
    """Scale, translate and jitter (N, 3) or (B, N, 3) coordinates; one draw
    of scale and translation per cloud."""
    x = np.asarray(coords)
    lead = x.shape[:-2]
    lo, hi = spec.scale_range
    scale = rng.uniform(lo, hi, size=(*lead, 1, 1))
    shift = rng.uniform(-spec.translate, spec.translate, size=(*lead, 1, 3))
    noise = np.clip(rng.normal(0.0, 1.0, size=x.shape) * spec.jitter_sigma, -spec.jitter_clip, spec.jitter_clip)
    return (x * scale + shift + noise).astype(x.dtype, copy=False)


def augment(cloud: PointCloud, spec: AugmentationSpec, rng: np.random.Generator | None = None) -> PointCloud:
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    return replace(cloud, coords=augment_coords(cloud.coords, spec, rng))
