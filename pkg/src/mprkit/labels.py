"""Dataset manifest schema, binary targets and revascularisation propagation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from . import DataError

SIGNIFICANCE_THRESHOLD = 0.5
TARGETS = ("significant", "revascularised")


@dataclass
class Lesion:
    lesion_id: str
    start_idx: int
    end_idx: int
    stenosis_grade: float


@dataclass
class Branch:
    branch_id: str
    centerline: str
    volume: str
    revascularised: bool
    lesions: list[Lesion] = field(default_factory=list)


@dataclass
class Patient:
    patient_id: str
    branches: list[Branch] = field(default_factory=list)


@dataclass
class DatasetManifest:
    """Cohort description. ``centerline``/``volume`` refs are relative to ``root``."""

    patients: list[Patient]
    root: Path = field(default=Path("."), compare=False)

    def lesions(self):
        """Yield ``(patient, branch, lesion)`` in manifest order."""
        for p in self.patients:
            for b in p.branches:
                for les in b.lesions:
                    yield p, b, les

    @property
    def n_lesions(self) -> int:
        return sum(len(b.lesions) for p in self.patients for b in p.branches)

    def validate(self, centerline_lengths: dict[str, int] | None = None) -> None:
        ids = [p.patient_id for p in self.patients]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate patient_id in manifest")
        for p, b, les in self.lesions():
            if not 0.0 <= les.stenosis_grade <= 1.0:
                raise DataError(f"invalid grade for lesion {les.lesion_id}")
            if not 0 <= les.start_idx < les.end_idx:
                raise DataError(f"lesion {les.lesion_id} has invalid start/end")
            if centerline_lengths is not None and les.end_idx >= centerline_lengths[b.centerline]:
                raise DataError("lesion out of range")

    def to_json(self) -> dict:
        return {
            "patients": [
                {
                    "patient_id": p.patient_id,
                    "branches": [
                        {
                            "branch_id": b.branch_id,
                            "centerline": b.centerline,
                            "volume": b.volume,
                            "revascularised": bool(b.revascularised),
                            "lesions": [
                                {
                                    "lesion_id": les.lesion_id,
                                    "start_idx": int(les.start_idx),
                                    "end_idx": int(les.end_idx),
                                    "stenosis_grade": float(les.stenosis_grade),
                                }
                                for les in b.lesions
                            ],
                        }
                        for b in p.branches
                    ],
                }
                for p in self.patients
            ]
        }

    @classmethod
    def from_json(cls, data: dict, root=".") -> "DatasetManifest":
        try:
            patients = [
                Patient(
                    str(p["patient_id"]),
                    [
                        Branch(
                            str(b["branch_id"]),
                            str(b["centerline"]),
                            str(b["volume"]),
                            bool(b["revascularised"]),
                            [
                                Lesion(
                                    str(les["lesion_id"]),
                                    int(les["start_idx"]),
                                    int(les["end_idx"]),
                                    float(les["stenosis_grade"]),
                                )
                                for les in b["lesions"]
                            ],
                        )
                        for b in p["branches"]
                    ],
                )
                for p in data["patients"]
            ]
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError("bad manifest") from exc
        m = cls(patients, Path(root))
        m.validate()
        return m


def write_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest.to_json(), indent=1) + "\n")


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise DataError("bad manifest") from exc
    return DatasetManifest.from_json(data, root=path.parent)


def binarize_stenosis(grade: float) -> bool:
    """Significant stenosis iff grade >= 0.5 (boundary counts as significant)."""
    if not 0.0 <= grade <= 1.0:
        raise DataError("invalid grade")
    return grade >= SIGNIFICANCE_THRESHOLD


def propagate_revascularisation(branch: Branch) -> list[bool]:
    """Per-lesion revascularisation labels for one branch.

    A revascularised branch assigns the label to its highest-grade lesion
    only; equal grades go to the most proximal (smallest ``start_idx``).
    """
    n = len(branch.lesions)
    if not branch.revascularised:
        return [False] * n
    if n == 0:
        raise DataError("unassignable label")
    best = min(range(n), key=lambda i: (-branch.lesions[i].stenosis_grade, branch.lesions[i].start_idx))
    return [i == best for i in range(n)]


def lesion_targets(manifest: DatasetManifest) -> dict[str, dict[str, bool]]:
    """``{lesion_id: {"significant": ..., "revascularised": ...}}``."""
    out = {}
    for p in manifest.patients:
        for b in p.branches:
            revasc = propagate_revascularisation(b) if b.lesions else []
            for les, r in zip(b.lesions, revasc):
                out[les.lesion_id] = {
                    "significant": binarize_stenosis(les.stenosis_grade),
                    "revascularised": r,
                }
    return out


def cohort_summary(manifest: DatasetManifest) -> dict:
    t = lesion_targets(manifest)
    return {
        "patients": len(manifest.patients),
        "lesions": len(t),
        "significant": sum(v["significant"] for v in t.values()),
        "revascularised": sum(v["revascularised"] for v in t.values()),
    }
