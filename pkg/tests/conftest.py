import json

import numpy as np
import pytest

from mprkit.labels import Branch, DatasetManifest, Lesion, Patient, write_manifest
from mprkit.phantom import PhantomSpec, generate_phantom
from mprkit.volume import store_volume

SMALL = dict(dims=(32, 32, 32), chord_mm=10.0, healthy_radius_mm=1.5, axis=(0.0, 0.0, 1.0))


@pytest.fixture(scope="session")
def small_vessel(tmp_path_factory):
    """A short straight noise-free vessel on disk: (dir, volume ref, centerline ref, n points)."""
    d = tmp_path_factory.mktemp("vessel")
    spec = PhantomSpec(noise_sigma_hu=0.0, diameter_reduction=0.3, stenosis_sigma_mm=1.0, **SMALL)
    vol, cl, _ = generate_phantom(spec, 5)
    store_volume(vol, d / "vol.json")
    (d / "cl.json").write_text(json.dumps(cl.to_json()))
    return d, "vol.json", "cl.json", len(cl)


def counts_matched_manifest(root, vol_ref, cl_ref, n_points, n_patients=95, n_lesions=345,
                            n_significant=85, n_revasc=93, seed=0) -> DatasetManifest:
    """Cohort-shaped manifest with exact lesion/target counts, all lesions on one shared vessel.

    One lesion per branch; the first ``n_revasc`` branches are revascularised.
    """
    rng = np.random.default_rng(seed)
    grades = np.r_[rng.uniform(0.5, 0.95, n_significant), rng.uniform(0.0, 0.49, n_lesions - n_significant)]
    rng.shuffle(grades)
    revasc = np.zeros(n_lesions, dtype=bool)
    revasc[rng.permutation(n_lesions)[:n_revasc]] = True
    per_patient = np.array_split(np.arange(n_lesions), n_patients)
    patients = []
    for pi, idx in enumerate(per_patient):
        branches = []
        for bi, li in enumerate(idx):
            start = int(rng.integers(0, n_points - 6))
            branches.append(Branch(f"b{bi}", cl_ref, vol_ref, bool(revasc[li]),
                                   [Lesion(f"p{pi:03d}_b{bi}_l0", start, start + 4, float(grades[li]))]))
        patients.append(Patient(f"p{pi:03d}", branches))
    m = DatasetManifest(patients, root)
    write_manifest(m, root / "manifest.json")
    return m


# one line per acceptance criterion, repeated at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
