"""Manifest -> labelled, shaped samples (one per lesion and rotated view), plus the on-disk cache."""

from __future__ import annotations

import json
import logging
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import DataError
from .labels import DatasetManifest, lesion_targets
from .phantom import load_centerline
from .reformat import N_VIEWS, build_frames, cylinder_mask, extract_mpr, rotate_view
from .shaping import PaddingStrategy, apply_padding, cube_sequence, downscale_inplane, slice_pair
from .volume import load_volume

log = logging.getLogger(__name__)

PATHWAYS = ("2.5d", "cubes")


@dataclass
class LabeledSample:
    patient_id: str
    branch_id: str
    lesion_id: str
    view_k: int
    significant: bool
    revascularised: bool
    tensor: str | None = None


@dataclass
class SampleSet:
    """Shaped samples in lesion-major, view-minor order; ``tensors[i]`` belongs to ``samples[i]``."""

    samples: list[LabeledSample]
    tensors: np.ndarray | None
    n_views: int
    config: dict

    def __len__(self):
        return len(self.samples)

    def labels(self, target: str) -> np.ndarray:
        return np.array([getattr(s, target) for s in self.samples], dtype=np.float64)

    @property
    def patient_ids(self) -> np.ndarray:
        return np.array([s.patient_id for s in self.samples])

    def lesion_ids(self) -> list[str]:
        seen = {}
        for s in self.samples:
            seen.setdefault(s.lesion_id, None)
        return list(seen)

    def subset(self, idx) -> "SampleSet":
        idx = np.asarray(idx, dtype=np.int64)
        tensors = None if self.tensors is None else self.tensors[idx]
        return SampleSet([self.samples[i] for i in idx], tensors, self.n_views, self.config)

    def summary(self) -> dict:
        per_lesion = {}
        for s in self.samples:
            per_lesion[s.lesion_id] = s
        return {
            "patients": len({s.patient_id for s in self.samples}),
            "lesions": len(per_lesion),
            "samples": len(self.samples),
            "significant": sum(s.significant for s in per_lesion.values()),
            "revascularised": sum(s.revascularised for s in per_lesion.values()),
        }


def shape_views(stack, n_views: int, padding: PaddingStrategy, pathway: str) -> list[np.ndarray]:
    """Masked stack -> one shaped tensor per rotated view."""
    masked = cylinder_mask(stack)
    out = []
    for k in range(n_views):
        view = apply_padding(rotate_view(masked, k, n_views), padding)
        if pathway == "2.5d":
            out.append(slice_pair(view))
        else:
            out.append(cube_sequence(downscale_inplane(view)))
    return out


def _lesion_job(args):
    vol_path, cl_path, lesion, n_views, padding, pathway, h, spacing = args
    try:
        vol = load_volume(vol_path)
    except DataError as exc:
        raise DataError("broken manifest reference") from exc
    cl = load_centerline(cl_path)
    stack = extract_mpr(vol, cl, build_frames(cl), lesion, h=h, in_plane_spacing_mm=spacing)
    return np.stack(shape_views(stack, n_views, padding, pathway)).astype(np.float32)


def assemble_dataset(manifest: DatasetManifest, n_views: int = N_VIEWS,
                     padding: PaddingStrategy | None = None, pathway: str = "2.5d", *,
                     h: int = 32, in_plane_spacing_mm: float = 0.5, jobs: int = 1) -> SampleSet:
    """Extract, mask, rotate, pad and shape every lesion of ``manifest``.

    Yields ``n_lesions * n_views`` samples; labels are identical across the
    views of a lesion.
    """
    padding = padding or PaddingStrategy.intermediate_resize()
    if pathway not in PATHWAYS:
        raise DataError(f"unknown pathway {pathway!r}")
    if n_views < 1:
        raise DataError("n_views must be >= 1")
    targets = lesion_targets(manifest)
    root = Path(manifest.root)

    jobs_args, meta = [], []
    for p, b, les in manifest.lesions():
        vol_path = root / b.volume
        if not vol_path.exists() or not (root / b.centerline).exists():
            raise DataError("broken manifest reference")
        jobs_args.append((vol_path, root / b.centerline, les, n_views, padding, pathway, h, in_plane_spacing_mm))
        meta.append((p.patient_id, b.branch_id, les.lesion_id))

    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            shaped = list(pool.map(_lesion_job, jobs_args))
    else:
        shaped = [_lesion_job(a) for a in jobs_args]

    samples, tensors = [], []
    for (pid, bid, lid), views in zip(meta, shaped):
        t = targets[lid]
        for k in range(n_views):
            samples.append(LabeledSample(pid, bid, lid, k, t["significant"], t["revascularised"]))
            tensors.append(views[k])
    config = {"n_views": n_views, "padding": padding.kind, "target_len": padding.target_len,
              "pathway": pathway, "h": h, "in_plane_spacing_mm": in_plane_spacing_mm}
    ds = SampleSet(samples, np.stack(tensors) if tensors else None, n_views, config)
    log.info("assembled %s", ds.summary())
    return ds


def write_cache(ds: SampleSet, cache_dir) -> Path:
    """One float32 tensor file (+ JSON sidecar) per sample and an ``index.json``."""
    cache_dir = Path(cache_dir)
    tdir = cache_dir / "tensors"
    tdir.mkdir(parents=True, exist_ok=True)
    entries = []
    for s, t in zip(ds.samples, ds.tensors):
        stem = f"{s.lesion_id}_v{s.view_k:02d}"
        np.ascontiguousarray(t, dtype="<f4").tofile(tdir / f"{stem}.raw")
        (tdir / f"{stem}.json").write_text(json.dumps({"shape": list(t.shape), "raw": f"{stem}.raw"}) + "\n")
        s.tensor = f"tensors/{stem}.json"
        entries.append(asdict(s))
    index = {"config": ds.config, "summary": ds.summary(), "samples": entries}
    path = cache_dir / "index.json"
    path.write_text(json.dumps(index, indent=1) + "\n")
    return path


def read_cache(cache_dir) -> SampleSet:
    cache_dir = Path(cache_dir)
    try:
        index = json.loads((cache_dir / "index.json").read_text())
        samples = [LabeledSample(**e) for e in index["samples"]]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DataError("bad manifest") from exc
    tensors = []
    for s in samples:
        side = cache_dir / s.tensor
        try:
            meta = json.loads(side.read_text())
            data = np.fromfile(side.parent / meta["raw"], dtype="<f4")
        except (OSError, ValueError, KeyError) as exc:
            raise DataError("broken manifest reference") from exc
        if data.size != int(np.prod(meta["shape"])):
            raise DataError("corrupt volume")
        tensors.append(data.reshape(meta["shape"]))
    cfg = index.get("config", {})
    return SampleSet(samples, np.stack(tensors) if tensors else None, int(cfg.get("n_views", 1)), cfg)


def class_counts(ds: SampleSet, target: str) -> Counter:
    return Counter(bool(getattr(s, target)) for s in ds.samples)
