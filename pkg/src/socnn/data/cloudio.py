"""Plain-text point-cloud files.

One point per line, ``x y z`` or ``x y z part_label``; an optional first
line ``# label <class>`` carries the object label. Other ``#`` lines are
comments. Values are written with ``repr`` so they round-trip exactly.
"""
from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np

from ..geometry import PointCloud


class CloudFormatError(ValueError):
    pass


def save_cloud(path, cloud: PointCloud) -> None:
    path = Path(path)
    lines = []
    if cloud.object_label is not None:
        lines.append(f"# label {int(cloud.object_label)}")
    coords = cloud.coords.tolist()
    if cloud.point_labels is None:
        lines += [f"{x!r} {y!r} {z!r}" for x, y, z in coords]
    else:
        lines += [f"{x!r} {y!r} {z!r} {int(p)}" for (x, y, z), p in zip(coords, cloud.point_labels)]
    _atomic_write_text(path, "\n".join(lines) + "\n")


def load_cloud(path) -> PointCloud:
    path = Path(path)
    label = None
    coords, parts = [], []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                fields = line[1:].split()
                if len(fields) == 2 and fields[0] == "label":
                    try:
                        label = int(fields[1])
                    except ValueError:
                        raise CloudFormatError(f"{path}:{lineno}: bad label {fields[1]!r}") from None
                continue
            fields = line.split()
            if len(fields) not in (3, 4):
                raise CloudFormatError(f"{path}:{lineno}: expected 3 or 4 fields, got {len(fields)}")
            try:
                coords.append([float(v) for v in fields[:3]])
                if len(fields) == 4:
                    parts.append(int(fields[3]))
            except ValueError as exc:
                raise CloudFormatError(f"{path}:{lineno}: {exc}") from None
            if parts and len(parts) != len(coords):
                raise CloudFormatError(f"{path}:{lineno}: part labels must be given for every point or none")
    if not coords:
        raise CloudFormatError(f"{path}: no points")
    point_labels = np.array(parts, dtype=np.int64) if parts else None
    coords = np.array(coords)
    if not np.isfinite(coords).all():
        raise CloudFormatError(f"{path}: non-finite coordinate")
    return PointCloud(coords, point_labels, label)


def _atomic_write_text(path: Path, text: str) -> None:
    _atomic_write(path, text.encode())


def _atomic_write(path: Path, payload: bytes) -> None:
    """Write to a temp file in the target directory, then rename over ``path``."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
