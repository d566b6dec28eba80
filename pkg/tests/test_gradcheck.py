import dataclasses

import pytest

from cfslbench.gradcheck import (
    DEFAULT_THRESHOLD,
    GradCheckReport,
    finite_difference_check,
)
from cfslbench.models import LearnerSpec


def test_autograd_agrees_with_central_differences():
    report = finite_difference_check(seed=0)
    assert report.n_checked >= 50
    assert report.max_rel_error < DEFAULT_THRESHOLD
    assert report.ok


def test_report_is_deterministic():
    a = finite_difference_check(seed=3)
    b = finite_difference_check(seed=3)
    assert a == b


def test_seeds_pick_different_coordinates():
    a = finite_difference_check(seed=0)
    b = finite_difference_check(seed=1)
    assert a.max_rel_error != b.max_rel_error


def test_explicit_spec_must_be_convnet():
    spec = LearnerSpec(kind="protonet", filters=4, stages=2)
    with pytest.raises(ValueError, match="convnet"):
        finite_difference_check(spec=spec)


def test_threshold_controls_verdict():
    report = finite_difference_check(seed=0, threshold=1e-12)
    assert not report.ok
    relaxed = dataclasses.replace(report, threshold=1.0)
    assert relaxed.ok


def test_report_fields_are_consistent():
    report = finite_difference_check(seed=5, n_params=60)
    assert isinstance(report, GradCheckReport)
    assert report.n_checked == 60
    assert 0.0 <= report.mean_rel_error <= report.max_rel_error
