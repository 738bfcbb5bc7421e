"""Rotation-minimizing frames, MPR stack extraction, cylindrical ROI and rotated views.

Slice geometry: pixel ``(i, j)`` of slice ``l`` sits at
``P[l] + (i - c) * s * normal[l] + (j - c) * s * binormal[l]`` with
``c = (H - 1) / 2``. Rows follow the normal, columns the binormal.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import DataError
from .volume import Volume3D, sample_points

N_VIEWS = 18


@dataclass(frozen=True)
class FrameSequence:
    tangent: np.ndarray  # (n, 3)
    normal: np.ndarray
    binormal: np.ndarray

    def __len__(self):
        return len(self.tangent)


@dataclass
class MprStack:
    pixels: np.ndarray  # (L, H, W), slice-major
    in_plane_spacing_mm: float
    step_mm: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3:
            raise DataError("stack pixels must be (L, H, W)")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.pixels.shape)

    def with_pixels(self, pixels, **meta) -> "MprStack":
        return replace(self, pixels=pixels, meta={**self.meta, **meta})


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def centerline_tangents(points: np.ndarray) -> np.ndarray:
    seg = np.diff(points, axis=0)
    if np.any(np.linalg.norm(seg, axis=1) < 1e-12):
        raise DataError("degenerate centerline")
    t = np.empty_like(points)
    t[0] = seg[0]
    t[-1] = seg[-1]
    t[1:-1] = points[2:] - points[:-2]
    if np.any(np.linalg.norm(t, axis=1) < 1e-12):
        raise DataError("degenerate centerline")
    return _unit(t)


def build_frames(cl) -> FrameSequence:
    """Double-reflection rotation-minimizing frames along a centerline.

    The first normal is the world axis most orthogonal to the first tangent,
    projected onto the normal plane.
    """
    pts = np.asarray(getattr(cl, "points", cl), dtype=np.float64)
    t = centerline_tangents(pts)
    n = len(pts)
    r = np.empty_like(pts)

    axis = np.eye(3)[np.argmin(np.abs(t[0]))]
    r[0] = _unit(axis - axis.dot(t[0]) * t[0])
    for i in range(n - 1):
        v1 = pts[i + 1] - pts[i]
        c1 = v1.dot(v1)
        r_l = r[i] - (2.0 / c1) * v1.dot(r[i]) * v1
        t_l = t[i] - (2.0 / c1) * v1.dot(t[i]) * v1
        v2 = t[i + 1] - t_l
        c2 = v2.dot(v2)
        r_next = r_l if c2 < 1e-30 else r_l - (2.0 / c2) * v2.dot(r_l) * v2
        # re-orthogonalise against round-off drift
        r_next = r_next - r_next.dot(t[i + 1]) * t[i + 1]
        r[i + 1] = r_next / np.linalg.norm(r_next)
    b = np.cross(t, r)
    b = _unit(b)
    return FrameSequence(t, r, b)


def rotate_frames(frames: FrameSequence, angle_rad: float) -> FrameSequence:
    """Spin every (normal, binormal) pair by ``angle_rad`` about its tangent."""
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    n = c * frames.normal + s * frames.binormal
    b = -s * frames.normal + c * frames.binormal
    return FrameSequence(frames.tangent, n, b)


def _plane_offsets(h: int, w: int, spacing: float):
    u = (np.arange(h) - (h - 1) / 2.0) * spacing
    v = (np.arange(w) - (w - 1) / 2.0) * spacing
    return u, v


def extract_mpr(vol: Volume3D, cl, frames: FrameSequence, lesion, h: int = 32,
                in_plane_spacing_mm: float = 0.5, w: int | None = None) -> MprStack:
    """Sample one orthogonal ``h x w`` plane per centerline point of a lesion."""
    w = h if w is None else w
    pts = np.asarray(getattr(cl, "points", cl), dtype=np.float64)
    start, end = int(lesion.start_idx), int(lesion.end_idx)
    if not (0 <= start < end < len(pts)) or len(frames) != len(pts):
        raise DataError("lesion out of range")
    if h < 2 or w < 2:
        raise DataError("slice size must be >= 2")
    sl = slice(start, end + 1)
    u, v = _plane_offsets(h, w, in_plane_spacing_mm)
    grid = (
        pts[sl, None, None, :]
        + u[None, :, None, None] * frames.normal[sl, None, None, :]
        + v[None, None, :, None] * frames.binormal[sl, None, None, :]
    )
    pixels = sample_points(vol, grid)
    step = float(getattr(cl, "step_mm", np.linalg.norm(pts[1] - pts[0])))
    meta = {"lesion_id": getattr(lesion, "lesion_id", None), "view_k": 0}
    return MprStack(pixels, float(in_plane_spacing_mm), step, meta)


def cylinder_radius_px(h: int) -> float:
    return h / 2.0


def cylinder_mask_array(h: int, w: int) -> np.ndarray:
    """Boolean in-plane mask of the cylinder inscribed in the slice square."""
    u = np.arange(h) - (h - 1) / 2.0
    v = np.arange(w) - (w - 1) / 2.0
    return np.hypot(u[:, None], v[None, :]) <= cylinder_radius_px(min(h, w))


def cylinder_mask(stack: MprStack) -> MprStack:
    """Zero everything outside the inscribed cylinder around the centerline."""
    _, h, w = stack.dims
    if h != w:
        raise DataError("cylinder mask needs square slices")
    m = cylinder_mask_array(h, w)
    return stack.with_pixels(np.where(m[None], stack.pixels, 0.0), masked=True)


def rotate_slices(pixels: np.ndarray, angle_rad: float) -> np.ndarray:
    """Rotate every ``(H, W)`` slice about its center; bilinear, zero fill.

    Output pixel ``(i, j)`` reads the input at the offset rotated by
    ``angle_rad``, which matches spinning the sampling frames by the same angle.
    """
    _, h, w = pixels.shape
    ci, cj = (h - 1) / 2.0, (w - 1) / 2.0
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    di = np.arange(h)[:, None] - ci
    dj = np.arange(w)[None, :] - cj
    si = ci + c * di - s * dj
    sj = cj + s * di + c * dj

    i0 = np.floor(si).astype(np.int64)
    j0 = np.floor(sj).astype(np.int64)
    fi = si - i0
    fj = sj - j0
    out = np.zeros_like(pixels)
    for oi, oj, wt in ((0, 0, (1 - fi) * (1 - fj)), (1, 0, fi * (1 - fj)),
                       (0, 1, (1 - fi) * fj), (1, 1, fi * fj)):
        ii, jj = i0 + oi, j0 + oj
        ok = (ii >= 0) & (ii < h) & (jj >= 0) & (jj < w) & (wt != 0)
        out[:, ok] += pixels[:, ii[ok], jj[ok]] * wt[ok]
    return out


def rotate_view(stack: MprStack, k: int, n_views: int = N_VIEWS) -> MprStack:
    """View ``k`` of ``n_views`` uniform in-plane rotations (20 degree steps for 18)."""
    if not (isinstance(k, (int, np.integer)) and 0 <= k < n_views):
        raise DataError("invalid view index")
    if k == 0:
        return stack.with_pixels(stack.pixels.copy(), view_k=0)
    angle = 2.0 * np.pi * k / n_views
    return stack.with_pixels(rotate_slices(stack.pixels, angle), view_k=int(k))


def save_stack(stack: MprStack, path) -> None:
    """Raw float32 LE pixels plus a JSON sidecar next to ``path`` (``.json``)."""
    path = Path(path)
    raw = path.with_suffix(".raw")
    path.parent.mkdir(parents=True, exist_ok=True)
    stack.pixels.astype("<f4").tofile(raw)
    meta = {
        "dims": list(stack.dims),
        "in_plane_spacing_mm": stack.in_plane_spacing_mm,
        "step_mm": stack.step_mm,
        "lesion_id": stack.meta.get("lesion_id"),
        "view_k": int(stack.meta.get("view_k", 0)),
        "raw": raw.name,
    }
    path.with_suffix(".json").write_text(json.dumps(meta) + "\n")


def load_stack(path) -> MprStack:
    path = Path(path).with_suffix(".json")
    try:
        meta = json.loads(path.read_text())
        dims = [int(d) for d in meta["dims"]]
        data = np.fromfile(path.parent / meta["raw"], dtype="<f4")
    except (OSError, ValueError, KeyError) as exc:
        raise DataError("bad manifest") from exc
    if data.size != int(np.prod(dims)):
        raise DataError("corrupt volume")
    return MprStack(data.reshape(dims).astype(np.float64), meta["in_plane_spacing_mm"], meta["step_mm"],
                    {"lesion_id": meta.get("lesion_id"), "view_k": meta.get("view_k", 0)})
