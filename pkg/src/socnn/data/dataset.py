"""In-memory datasets of equally sized clouds, splits, and a directory layout."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..geometry import PointCloud
from .cloudio import load_cloud, save_cloud
from .synthetic import (CLASSIFICATION_FAMILIES, SEGMENTATION_FAMILIES, SyntheticShapeSpec,
                        generate_primitive_cloud, parts_per_category)


@dataclass
class ShapeDataset:
    """Clouds sharing one point count, stacked for batching.

    ``labels`` holds the object class (classification) or category
    (segmentation); ``point_labels`` holds global part ids when present.
    """

    coords: np.ndarray
    labels: np.ndarray
    point_labels: np.ndarray | None = None
    task: str = "classification"
    class_names: tuple[str, ...] = ()
    parts_per_category: dict[int, list[int]] | None = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.coords.ndim != 3 or self.coords.shape[-1] != 3:
            raise ValueError(f"coords must be (S, N, 3), got {self.coords.shape}")
        if len(self.labels) != len(self.coords):
            raise ValueError("one label per cloud required")
        if self.task not in ("classification", "segmentation"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.task == "segmentation":
            if self.point_labels is None or self.parts_per_category is None:
                raise ValueError("segmentation data needs point labels and parts_per_category")
            self.point_labels = np.asarray(self.point_labels, dtype=np.int64)
            if self.point_labels.shape != self.coords.shape[:2]:
                raise ValueError("point_labels must be (S, N)")

    def __len__(self) -> int:
        return len(self.coords)

    @property
    def num_points(self) -> int:
        return self.coords.shape[1]

    @property
    def num_parts(self) -> int | None:
        if self.parts_per_category is None:
            return None
        return 1 + max(max(p) for p in self.parts_per_category.values())

    def subset(self, idx) -> ShapeDataset:
        idx = np.asarray(idx, dtype=np.int64)
        return ShapeDataset(self.coords[idx], self.labels[idx],
                            None if self.point_labels is None else self.point_labels[idx],
                            self.task, self.class_names, self.parts_per_category)

    def clouds(self) -> list[PointCloud]:
        pl = self.point_labels
        return [PointCloud(c, None if pl is None else pl[i], int(self.labels[i]))
                for i, c in enumerate(self.coords)]

    @classmethod
    def from_clouds(cls, clouds: Sequence[PointCloud], task: str = "classification",
                    class_names=(), parts: dict[int, list[int]] | None = None) -> ShapeDataset:
        if not clouds:
            raise ValueError("no clouds given")
        sizes = {len(c) for c in clouds}
        if len(sizes) != 1:
            raise ValueError(f"all clouds in a dataset must share N, got sizes {sorted(sizes)}")
        labels = [c.object_label for c in clouds]
        if any(lbl is None for lbl in labels):
            raise ValueError("every cloud needs an object label")
        point_labels = None
        if task == "segmentation":
            point_labels = np.stack([c.point_labels for c in clouds])
        return cls(np.stack([c.coords for c in clouds]), np.array(labels), point_labels, task,
                   tuple(class_names), parts)


def make_classification_dataset(per_class: int, n_points: int, seed: int = 0,
                                noise_sigma: float = 0.005,
                                families: Sequence[str] = CLASSIFICATION_FAMILIES) -> ShapeDataset:
    ss = np.random.SeedSequence(seed)
    seeds = ss.generate_state(per_class * len(families))
    clouds = []
    for i, s in enumerate(seeds):
        fam = families[i % len(families)]
        clouds.append(generate_primitive_cloud(SyntheticShapeSpec(fam, n_points, noise_sigma, int(s))))
    for c in clouds:
        c.object_label = list(families).index(CLASSIFICATION_FAMILIES[c.object_label])
    return ShapeDataset.from_clouds(clouds, "classification", tuple(families))


def make_segmentation_dataset(per_category: int, n_points: int, seed: int = 0,
                              noise_sigma: float = 0.005) -> ShapeDataset:
    ss = np.random.SeedSequence(seed)
    seeds = ss.generate_state(per_category * len(SEGMENTATION_FAMILIES))
    clouds = [generate_primitive_cloud(SyntheticShapeSpec(
        SEGMENTATION_FAMILIES[i % len(SEGMENTATION_FAMILIES)], n_points, noise_sigma, int(s)))
        for i, s in enumerate(seeds)]
    return ShapeDataset.from_clouds(clouds, "segmentation", SEGMENTATION_FAMILIES, parts_per_category())


def dataset_split(items: Sequence, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> tuple[list, list, list]:
    """Seeded shuffle, then cut into train/val/test by ``fractions``."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    items = list(items)
    order = np.random.default_rng(seed).permutation(len(items))
    n_train = int(round(fractions[0] * len(items)))
    n_val = min(int(round(fractions[1] * len(items))), len(items) - n_train)
    cuts = [order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:]]
    return tuple([items[i] for i in part] for part in cuts)


META_FILE = "meta.json"


def save_dataset_dir(root, splits: dict[str, ShapeDataset]) -> None:
    """Write ``root/<split>/NNNNN.txt`` cloud files plus ``root/meta.json``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    first = next(iter(splits.values()))
    meta = {
        "format_version": 1,
        "task": first.task,
        "class_names": list(first.class_names),
        "parts_per_category": None if first.parts_per_category is None
        else {str(k): v for k, v in first.parts_per_category.items()},
        "splits": {name: len(ds) for name, ds in splits.items()},
    }
    for name, ds in splits.items():
        d = root / name
        d.mkdir(exist_ok=True)
        for i, cloud in enumerate(ds.clouds()):
            save_cloud(d / f"{i:05d}.txt", cloud)
    (root / META_FILE).write_text(json.dumps(meta, indent=2) + "\n")


def load_dataset_dir(root, split: str) -> ShapeDataset:
    root = Path(root)
    meta_path = root / META_FILE
    if not meta_path.exists():
        raise FileNotFoundError(f"{meta_path} not found; is {root} a dataset directory?")
    meta = json.loads(meta_path.read_text())
    files = sorted((root / split).glob("*.txt"))
    if not files:
        raise FileNotFoundError(f"no clouds in {root / split}")
    parts = meta.get("parts_per_category")
    parts = None if parts is None else {int(k): list(v) for k, v in parts.items()}
    return ShapeDataset.from_clouds([load_cloud(f) for f in files], meta["task"],
                                    tuple(meta.get("class_names", ())), parts)
