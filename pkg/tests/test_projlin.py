"""Projector validation, tolerance policy, and rational snapping."""

import numpy as np
import pytest

from tierdecomp import (
    DEFAULT_POLICY,
    EfficiencyRangeError,
    EfficiencyValue,
    Projector,
    TolerancePolicy,
    snap_rational,
)
from tierdecomp.projlin import ProjectorError


def mean_matrix(n):
    return np.full((n, n), 1.0 / n)


class TestProjector:
    def test_accepts_valid(self):
        p = Projector.validated(mean_matrix(5), "Mean")
        assert p.df == 1
        assert p.n == 5
        assert p.label == "Mean"

    def test_rejects_nonsquare(self):
        with pytest.raises(ProjectorError, match="square"):
            Projector.validated(np.ones((2, 3)), "bad")

    def test_rejects_asymmetric(self):
        m = np.array([[1.0, 1.0], [0.0, 0.0]])
        with pytest.raises(ProjectorError, match="not symmetric"):
            Projector.validated(m, "bad")

    def test_rejects_nonidempotent(self):
        with pytest.raises(ProjectorError, match="not idempotent"):
            Projector.validated(0.5 * np.eye(3), "bad")

    def test_rejects_noninteger_trace(self):
        # eigenvalues close enough to {0, 1} to pass idempotency, but their
        # sum drifts past the trace bound
        loose = DEFAULT_POLICY.replace(tol_idem=9e-4)
        with pytest.raises(ProjectorError, match="trace"):
            Projector.validated(np.diag([1.0, 5e-4, 0.0]), "bad", loose)

    def test_matrix_frozen(self):
        p = Projector.validated(mean_matrix(3), "Mean")
        assert not p.matrix.flags.writeable
        with pytest.raises(ValueError):
            p.matrix[0, 0] = 2.0

    def test_relabel(self):
        p = Projector.validated(np.eye(4), "I")
        q = p.relabel("identity")
        assert q.label == "identity"
        assert q.df == p.df
        assert np.array_equal(q.matrix, p.matrix)


class TestTolerancePolicy:
    def test_replace_changes_one_field(self):
        policy = DEFAULT_POLICY.replace(snap_max_denominator=8)
        assert policy.snap_max_denominator == 8
        assert policy.tol_zero == DEFAULT_POLICY.tol_zero

    def test_rejects_nonpositive_tolerance(self):
        with pytest.raises(ValueError):
            TolerancePolicy(tol_sym=0.0)


class TestSnapRational:
    @pytest.mark.parametrize(
        "value, expected",
        [(1.0 / 6.0, (1, 6)), (5.0 / 6.0, (5, 6)), (0.5, (1, 2)), (1.0, (1, 1)), (0.0, (0, 1))],
    )
    def test_snaps_small_denominators(self, value, expected):
        assert snap_rational(value).rational == expected

    def test_no_snap_for_awkward_float(self):
        ev = snap_rational(0.123456)
        assert ev.rational is None
        assert ev.render() == "0.123456"

    def test_denominator_bound_respected(self):
        tight = DEFAULT_POLICY.replace(snap_max_denominator=3)
        assert snap_rational(1.0 / 6.0, tight).rational is None
        assert snap_rational(1.0 / 3.0, tight).rational == (1, 3)

    def test_rejects_out_of_range(self):
        with pytest.raises(EfficiencyRangeError):
            snap_rational(1.5)
        with pytest.raises(EfficiencyRangeError):
            snap_rational(-0.5)

    def test_clamps_boundary_noise(self):
        assert snap_rational(1.0 + 1e-12).rational == (1, 1)
        ev = snap_rational(-1e-12)
        assert ev.is_zero()


class TestEfficiencyValue:
    def test_render_rational(self):
        assert EfficiencyValue(value=1 / 6, rational=(1, 6)).render() == "1/6"
        assert EfficiencyValue(value=1.0, rational=(1, 1)).render() == "1"

    def test_render_float_fallback(self):
        assert EfficiencyValue(value=0.1234567).render() == "0.123457"

    def test_predicates(self):
        assert EfficiencyValue(value=0.0, rational=(0, 1)).is_zero()
        assert EfficiencyValue(value=1.0, rational=(1, 1)).is_one()
        assert not EfficiencyValue(value=0.5, rational=(1, 2)).is_one()
