"""3D scalar volumes: world-coordinate trilinear sampling and raw+JSON storage."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import DataError


@dataclass(frozen=True)
class Volume3D:
    """Axis-aligned intensity grid.

    ``voxels`` is indexed ``[z, y, x]`` so that the C-order flattening is
    x-fastest, which is also the on-disk layout. World position of voxel
    ``(i, j, k)`` (x, y, z indices) is ``origin + (i, j, k) * spacing``.
    """

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]
    voxels: np.ndarray = field(repr=False)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 2:
            raise DataError("volume dims must be three integers >= 2")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(s > 0 and np.isfinite(s) for s in spacing):
            raise DataError("volume spacing must be positive")
        origin = tuple(float(o) for o in self.origin)
        vox = np.asarray(self.voxels)
        if vox.dtype.kind != "f":
            vox = vox.astype(np.float64)
        nx, ny, nz = dims
        if vox.size != nx * ny * nz:
            raise DataError("voxel count does not match dims")
        vox = vox.reshape(nz, ny, nx)
        if not np.all(np.isfinite(vox)):
            raise DataError("non-finite voxel intensity")
        vox.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "voxels", vox)

    def index_to_world(self, idx) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(idx, dtype=np.float64) * np.asarray(self.spacing)

    def world_to_index(self, p) -> np.ndarray:
        return (np.asarray(p, dtype=np.float64) - np.asarray(self.origin)) / np.asarray(self.spacing)

    @property
    def extent_mm(self) -> tuple[np.ndarray, np.ndarray]:
        """Lower and upper world corners of the sampling domain (voxel centers)."""
        lo = np.asarray(self.origin)
        hi = lo + (np.asarray(self.dims) - 1) * np.asarray(self.spacing)
        return lo, hi


def sample_points(vol: Volume3D, points) -> np.ndarray:
    """Trilinear samples at an ``(..., 3)`` array of world points (mm).

    Points outside the voxel-center hull return 0.0.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[-1] != 3:
        raise DataError("points must have a trailing axis of length 3")
    if not np.all(np.isfinite(pts)):
        raise DataError("invalid coordinate")
    shape = pts.shape[:-1]
    idx = vol.world_to_index(pts.reshape(-1, 3))
    n = np.asarray(vol.dims)
    inside = np.all((idx >= 0.0) & (idx <= n - 1), axis=1)
    out = np.zeros(idx.shape[0], dtype=np.float64)
    if not inside.any():
        return out.reshape(shape)

    q = idx[inside]
    base = np.minimum(np.floor(q).astype(np.int64), n - 2)
    frac = q - base
    i, j, k = base[:, 0], base[:, 1], base[:, 2]
    fx, fy, fz = frac[:, 0], frac[:, 1], frac[:, 2]
    v = vol.voxels

    c00 = v[k, j, i] * (1 - fx) + v[k, j, i + 1] * fx
    c10 = v[k, j + 1, i] * (1 - fx) + v[k, j + 1, i + 1] * fx
    c01 = v[k + 1, j, i] * (1 - fx) + v[k + 1, j, i + 1] * fx
    c11 = v[k + 1, j + 1, i] * (1 - fx) + v[k + 1, j + 1, i + 1] * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    out[inside] = c0 * (1 - fz) + c1 * fz
    return out.reshape(shape)


def sample_trilinear(vol: Volume3D, p) -> float:
    """Trilinear intensity at a single world point ``p = (x, y, z)`` in mm."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (3,):
        raise DataError("point must have three coordinates")
    return float(sample_points(vol, p[None, :])[0])


def store_volume(vol: Volume3D, manifest_path, raw_name: str | None = None) -> None:
    """Write ``vol`` as a JSON manifest plus a header-less float32 LE raw file."""
    manifest_path = Path(manifest_path)
    if raw_name is None:
        raw_name = manifest_path.with_suffix(".raw").name
    raw_path = manifest_path.parent / raw_name
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    vol.voxels.astype("<f4").tofile(raw_path)
    meta = {
        "dims": list(vol.dims),
        "spacing_mm": list(vol.spacing),
        "origin_mm": list(vol.origin),
        "raw": raw_name,
    }
    manifest_path.write_text(json.dumps(meta, indent=2) + "\n")


def load_volume(manifest_path) -> Volume3D:
    manifest_path = Path(manifest_path)
    try:
        meta = json.loads(manifest_path.read_text())
        dims = [int(d) for d in meta["dims"]]
        spacing = [float(s) for s in meta["spacing_mm"]]
        origin = [float(o) for o in meta["origin_mm"]]
        raw = manifest_path.parent / meta["raw"]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DataError("bad manifest") from exc
    try:
        data = np.fromfile(raw, dtype="<f4")
    except OSError as exc:
        raise DataError("corrupt volume") from exc
    if data.size != dims[0] * dims[1] * dims[2] or raw.stat().st_size != 4 * data.size:
        raise DataError("corrupt volume")
    return Volume3D(tuple(dims), tuple(spacing), tuple(origin), data.astype(np.float32))
