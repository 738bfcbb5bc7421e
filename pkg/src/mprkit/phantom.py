"""Synthetic contrast-filled vessel phantoms with a single parameterised stenosis."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.optimize import brentq
from scipy.spatial import cKDTree

from . import DataError
from .labels import Branch, DatasetManifest, Lesion, Patient, binarize_stenosis, write_manifest
from .volume import Volume3D, store_volume

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PhantomSpec:
    healthy_radius_mm: float = 2.0
    stenosis_center_t: float = 0.5
    stenosis_sigma_mm: float = 3.0
    diameter_reduction: float = 0.0
    lumen_hu: float = 400.0
    background_hu: float = 0.0
    noise_sigma_hu: float = 20.0
    curvature: float = 0.0
    dims: tuple[int, int, int] = (128, 128, 128)
    spacing_mm: float = 0.5
    step_mm: float = 0.5
    chord_mm: float = 48.0
    # None draws a random chord direction from the seed
    axis: tuple[float, float, float] | None = None

    def validate(self) -> None:
        if self.healthy_radius_mm < 2 * self.spacing_mm:
            raise DataError("healthy radius below two voxels")
        if not 0.0 <= self.diameter_reduction < 1.0:
            raise DataError("diameter_reduction must lie in [0, 1)")
        if not 0.0 <= self.stenosis_center_t <= 1.0:
            raise DataError("stenosis_center_t must lie in [0, 1]")
        if self.stenosis_sigma_mm <= 0 or self.step_mm <= 0 or self.spacing_mm <= 0:
            raise DataError("sigma, step and spacing must be positive")
        if self.noise_sigma_hu < 0 or self.curvature < 0:
            raise DataError("noise and curvature must be non-negative")

    @property
    def stenosis_grade(self) -> float:
        """Area grade: 1 - (r_min / r0)^2."""
        return 1.0 - (1.0 - self.diameter_reduction) ** 2


@dataclass(frozen=True)
class Centerline:
    points: np.ndarray  # (n, 3) world mm
    step_mm: float

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 2:
            raise DataError("centerline needs at least two 3D points")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)

    @property
    def arclength(self) -> np.ndarray:
        seg = np.linalg.norm(np.diff(self.points, axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(seg)])

    def to_json(self) -> dict:
        return {"step_mm": self.step_mm, "points": self.points.tolist()}

    @classmethod
    def from_json(cls, data: dict) -> "Centerline":
        return cls(np.asarray(data["points"], dtype=np.float64), float(data["step_mm"]))


@dataclass(frozen=True)
class LesionRecord:
    patient_id: str
    branch_id: str
    lesion_id: str
    start_idx: int
    end_idx: int
    stenosis_grade: float
    significant: bool
    revascularised: bool


def _bezier(p0, p1, p2, t):
    t = np.asarray(t, dtype=np.float64)[..., None]
    return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t**2 * p2


def uniform_chord_points(p0, p1, p2, step: float) -> np.ndarray:
    """Walk a quadratic Bezier so consecutive points sit exactly ``step`` apart."""
    pts = [np.asarray(p0, dtype=np.float64)]
    t_prev = 0.0
    end = np.asarray(p2, dtype=np.float64)
    while np.linalg.norm(end - pts[-1]) >= step:
        prev = pts[-1]

        def gap(t):
            return np.linalg.norm(_bezier(p0, p1, p2, t) - prev) - step

        t = brentq(gap, t_prev, 1.0, xtol=1e-15, rtol=4 * np.finfo(float).eps)
        pts.append(_bezier(p0, p1, p2, t))
        t_prev = t
    return np.array(pts)


def _frame_axes(spec: PhantomSpec, rng: np.random.Generator):
    if spec.axis is None:
        u = rng.normal(size=3)
    else:
        u = np.asarray(spec.axis, dtype=np.float64)
    u = u / np.linalg.norm(u)
    w = rng.normal(size=3)
    w -= w.dot(u) * u
    w /= np.linalg.norm(w)
    return u, w


def make_centerline(spec: PhantomSpec, rng: np.random.Generator) -> tuple[Centerline, tuple]:
    u, w = _frame_axes(spec, rng)
    dims = np.asarray(spec.dims)
    center = (dims - 1) * spec.spacing_mm / 2.0
    half = spec.chord_mm / 2.0
    p0 = center - half * u
    p2 = center + half * u
    p1 = center + spec.curvature * half * w
    pts = uniform_chord_points(p0, p1, p2, spec.step_mm)
    return Centerline(pts, spec.step_mm), (p0, p1, p2)


def radius_profile(spec: PhantomSpec, s: np.ndarray, total_len: float) -> np.ndarray:
    s0 = spec.stenosis_center_t * total_len
    bump = np.exp(-((s - s0) ** 2) / (2 * spec.stenosis_sigma_mm**2))
    return spec.healthy_radius_mm * (1.0 - spec.diameter_reduction * bump)


def generate_phantom(spec: PhantomSpec, seed: int, *, patient_id="p000", branch_id="b0",
                     lesion_id=None, revascularised=False):
    """Build ``(Volume3D, Centerline, LesionRecord)`` for one stenosed vessel.

    Lumen edges are partial-volume blended over one voxel so thresholding at
    the lumen/background midpoint recovers the analytic tube.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    cl, ctrl = make_centerline(spec, rng)

    sp = spec.spacing_mm
    lo = np.full(3, 0.0)
    hi = (np.asarray(spec.dims) - 1) * sp
    clearance = spec.healthy_radius_mm + 2 * sp
    if np.any(cl.points - clearance < lo) or np.any(cl.points + clearance > hi):
        raise DataError("phantom out of bounds")

    # dense reference polyline for distance/arclength lookup
    s_cl = cl.arclength
    total = s_cl[-1]
    t_dense = np.linspace(0.0, 1.0, max(2000, int(total / 0.01)))
    dense = _bezier(*ctrl, t_dense)
    seg = np.linalg.norm(np.diff(dense, axis=0), axis=1)
    s_dense = np.concatenate([[0.0], np.cumsum(seg)])
    # the dense arclength and the chord-walk arclength differ at the 1e-6 level
    s_dense *= total / s_dense[-1] if s_dense[-1] > 0 else 1.0
    tree = cKDTree(dense)

    nx, ny, nz = spec.dims
    reach = spec.healthy_radius_mm + 2 * sp
    bb_lo = np.maximum(np.floor((dense.min(0) - reach) / sp).astype(int), 0)
    bb_hi = np.minimum(np.ceil((dense.max(0) + reach) / sp).astype(int), np.array([nx, ny, nz]) - 1)

    vox = np.full((nz, ny, nx), spec.background_hu, dtype=np.float64)
    xs = np.arange(bb_lo[0], bb_hi[0] + 1) * sp
    ys = np.arange(bb_lo[1], bb_hi[1] + 1) * sp
    for k in range(bb_lo[2], bb_hi[2] + 1):
        gx, gy = np.meshgrid(xs, ys, indexing="xy")
        pts = np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, k * sp)], axis=1)
        dist, nearest = tree.query(pts, distance_upper_bound=reach)
        hit = np.isfinite(dist)
        if not hit.any():
            continue
        r = radius_profile(spec, s_dense[nearest[hit]], total)
        frac = np.clip(0.5 - (dist[hit] - r) / sp, 0.0, 1.0)
        plane = vox[k, bb_lo[1]:bb_hi[1] + 1, bb_lo[0]:bb_hi[0] + 1].reshape(-1)
        plane[hit] = spec.background_hu + (spec.lumen_hu - spec.background_hu) * frac
        vox[k, bb_lo[1]:bb_hi[1] + 1, bb_lo[0]:bb_hi[0] + 1] = plane.reshape(len(ys), len(xs))

    if spec.noise_sigma_hu > 0:
        vox += rng.normal(0.0, spec.noise_sigma_hu, size=vox.shape)
    volume = Volume3D(spec.dims, (sp, sp, sp), (0.0, 0.0, 0.0), vox.astype(np.float32))

    s0 = spec.stenosis_center_t * total
    n = len(cl)
    start = int(np.clip(round((s0 - 3 * spec.stenosis_sigma_mm) / spec.step_mm), 0, n - 2))
    end = int(np.clip(round((s0 + 3 * spec.stenosis_sigma_mm) / spec.step_mm), start + 1, n - 1))
    grade = spec.stenosis_grade
    record = LesionRecord(
        patient_id=patient_id,
        branch_id=branch_id,
        lesion_id=lesion_id or f"{patient_id}_{branch_id}_l0",
        start_idx=start,
        end_idx=end,
        stenosis_grade=grade,
        significant=binarize_stenosis(grade),
        revascularised=revascularised,
    )
    return volume, cl, record


def _lesion_counts(n_patients: int, n_lesions: int, rng: np.random.Generator) -> list[int]:
    base, extra = divmod(n_lesions, n_patients)
    counts = np.full(n_patients, base)
    counts[rng.permutation(n_patients)[:extra]] += 1
    return counts.tolist()


def generate_cohort(n_patients: int, n_lesions: int, grade_range=(0.0, 0.9), seed: int = 0,
                    out_dir=".", *, base_spec: PhantomSpec | None = None,
                    revasc_threshold: float = 0.45, revasc_flip: float = 0.05) -> DatasetManifest:
    """Write one phantom volume per branch plus ``manifest.json`` under ``out_dir``.

    ``n_lesions`` is the cohort total, spread as evenly as possible across
    patients. Each branch carries one lesion, so the max-grade lesion is the
    branch lesion; it is revascularised iff its grade reaches
    ``revasc_threshold``, then flipped with probability ``revasc_flip``
    (flips never touch grade-0 branches).
    """
    if n_patients < 1:
        raise DataError("n_patients must be >= 1")
    if n_lesions < n_patients:
        raise DataError("need at least one lesion per patient")
    g_lo, g_hi = (float(g) for g in grade_range)
    if not 0.0 <= g_lo <= g_hi <= 0.95:
        raise DataError("grade_range must lie within [0, 0.95]")
    base_spec = base_spec or PhantomSpec()
    out_dir = Path(out_dir)
    try:
        (out_dir / "volumes").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write to {out_dir}: {exc}") from exc

    counts = _lesion_counts(n_patients, n_lesions, np.random.default_rng([seed, 0xC0]))
    patients = []
    for pi, count in enumerate(counts):
        pid = f"p{pi:03d}"
        branches = []
        for bi in range(count):
            rng = np.random.default_rng([seed, pi, bi])
            grade = rng.uniform(g_lo, g_hi)
            spec = replace(
                base_spec,
                healthy_radius_mm=float(rng.uniform(1.5, 2.5)),
                stenosis_center_t=float(rng.uniform(0.35, 0.65)),
                stenosis_sigma_mm=float(rng.uniform(2.0, 4.0)),
                diameter_reduction=float(1.0 - np.sqrt(1.0 - grade)),
                curvature=float(rng.uniform(0.0, 0.5)),
            )
            revasc = spec.stenosis_grade >= revasc_threshold
            if spec.stenosis_grade > 0 and rng.random() < revasc_flip:
                revasc = not revasc
            bid = f"b{bi}"
            vol, cl, rec = generate_phantom(spec, int(rng.integers(2**31)), patient_id=pid, branch_id=bid,
                                            revascularised=revasc)
            stem = f"volumes/{pid}_{bid}"
            store_volume(vol, out_dir / f"{stem}.json")
            (out_dir / f"{stem}_centerline.json").write_text(json.dumps(cl.to_json()) + "\n")
            branches.append(Branch(bid, f"{stem}_centerline.json", f"{stem}.json", bool(revasc),
                                   [Lesion(rec.lesion_id, rec.start_idx, rec.end_idx, rec.stenosis_grade)]))
        patients.append(Patient(pid, branches))
        log.info("patient %s: %d lesion(s)", pid, count)

    manifest = DatasetManifest(patients, out_dir)
    write_manifest(manifest, out_dir / "manifest.json")
    return manifest


def load_centerline(path) -> Centerline:
    try:
        return Centerline.from_json(json.loads(Path(path).read_text()))
    except (OSError, ValueError, KeyError) as exc:
        raise DataError("broken manifest reference") from exc
