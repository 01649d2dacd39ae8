import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[2]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from app.services.exceptions import InvariantViolationError  # noqa: E402
from app.services.property_suite import FAULT_PERTURB_B, run_property_suite  # noqa: E402


def test_suite_passes_on_clean_build():
    report = run_property_suite(seed=0, sensitivity_pairs=6)
    assert report.ok, [check.detail for check in report.failures]
    names = {check.name for check in report.checks}
    assert {"stacked form", "determinism", "noiseless reduction", "neighbor sensitivity"} <= names
    model = report.to_model()
    assert model.ok is True
    assert len(model.checks) == len(report.checks)
    report.raise_on_failure()


def test_perturbed_b_is_caught():
    report = run_property_suite(seed=0, fault=FAULT_PERTURB_B, sensitivity_pairs=2)
    assert not report.ok
    failed = {check.invariant for check in report.failures}
    assert "reconstruction" in failed
    with pytest.raises(InvariantViolationError) as excinfo:
        report.raise_on_failure()
    assert excinfo.value.exit_code == 1


def test_unknown_fault_is_rejected():
    with pytest.raises(ValueError):
        run_property_suite(fault="flip_sign")
