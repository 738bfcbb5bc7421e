"""Lesion-level stenosis / revascularisation classification on MPR stacks.

Desk-scale toolkit: synthetic vessel phantoms, curved reformatting along
centerlines, stack shaping, a small numpy CNN and a patient-wise
cross-validation harness.
"""

__version__ = "0.1.0"


class MprkitError(ValueError):
    """Base error. ``str(err)`` carries the short failure reason."""


class DataError(MprkitError):
    """Input data is malformed, inconsistent or missing."""
