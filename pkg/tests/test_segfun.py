import numpy as np
import pytest

from segzip.errors import DomainError
from segzip.segfun import (ChangepointBounds, SegKind, cp_derivative, cp_from_lambda,
                           lambda_from_cp, seg_dpsi, seg_value)

B = ChangepointBounds(1.0, 48.0)
LIN, QUAD = SegKind.LINEAR, SegKind.QUADRATIC


class TestHinge:
    def test_values(self):
        assert seg_value(LIN, 40, 39) == 1
        assert seg_value(LIN, 39, 39) == 0
        assert seg_value(QUAD, 42, 39) == 9
        assert seg_value("quadratic", 30, 39) == 0

    def test_derivative_values(self):
        assert seg_dpsi(LIN, 40, 39) == -1
        assert seg_dpsi(LIN, 38, 39) == 0
        assert seg_dpsi(QUAD, 42, 39) == -6
        assert seg_dpsi(LIN, 39, 39) == 0  # strict indicator at the knot

    def test_vectorised(self):
        t = np.array([1.0, 2.0, 3.0])
        assert np.array_equal(seg_value(LIN, t, 2.0), [0.0, 0.0, 1.0])
        assert np.array_equal(seg_dpsi(QUAD, t, 1.5), [0.0, -1.0, -3.0])

    def test_quadratic_c1_linear_not(self):
        h = 1e-6
        psi = 3.0
        for kind, smooth in ((QUAD, True), (LIN, False)):
            right = (seg_value(kind, psi + h, psi) - seg_value(kind, psi, psi)) / h
            left = (seg_value(kind, psi, psi) - seg_value(kind, psi - h, psi)) / h
            assert (abs(right - left) < 1e-5) == smooth


class TestTransform:
    def test_paper_backtransform(self):
        assert cp_from_lambda(0.274, B) == pytest.approx(27.70, abs=0.005)

    def test_midpoint_and_limits(self):
        assert cp_from_lambda(0.0, B) == 24.5
        assert cp_from_lambda(-20.0, B) == pytest.approx(1.0, abs=1e-7)
        assert abs(cp_from_lambda(40.0, B) - 48.0) < 1e-12
        assert abs(cp_from_lambda(-40.0, B) - 1.0) < 1e-12
        assert np.isfinite(cp_from_lambda(700.0, B)) and np.isfinite(cp_from_lambda(-700.0, B))
        assert np.isfinite(cp_from_lambda(1e6, B))

    def test_derivative(self):
        assert cp_derivative(0.0, B) == pytest.approx(11.75)
        assert cp_derivative(0.274, B) == pytest.approx(11.5322, abs=1e-4)
        assert cp_derivative(50.0, B) < 1e-18
        assert cp_derivative(-50.0, ChangepointBounds(0, 1)) < 1e-18

    @staticmethod
    def _fd_rel_errors(lams, h=1e-6):
        fd = (cp_from_lambda(lams + h, B) - cp_from_lambda(lams - h, B)) / (2 * h)
        return np.abs(fd / cp_derivative(lams, B) - 1.0)

    def test_derivative_matches_finite_difference(self):
        assert self._fd_rel_errors(np.linspace(-10, 10, 81)[:-1]).max() < 1e-6

    @pytest.mark.xfail(strict=True, reason="at lambda=10 psi is within 0.002 of l2=48 where "
                       "the double spacing (7e-15) already gives a 1.4e-6 relative FD error "
                       "even for correctly rounded values")
    def test_derivative_matches_finite_difference_closed_range(self):
        assert self._fd_rel_errors(np.linspace(-10, 10, 81)).max() < 1e-6

    def test_inverse(self):
        assert lambda_from_cp(24.5, B) == 0.0
        assert lambda_from_cp(27.70, B) == pytest.approx(0.27406, abs=1e-4)
        for psi in (1.0, 48.0, 0.0, 50.0):
            with pytest.raises(DomainError):
                lambda_from_cp(psi, B)

    def test_round_trip_near_bounds(self):
        w = B.l2 - B.l1
        psi = np.linspace(B.l1 + 1e-6 * w, B.l2 - 1e-6 * w, 1001)
        back = cp_from_lambda(lambda_from_cp(psi, (np.full_like(psi, B.l1), np.full_like(psi, B.l2))),
                              (np.full_like(psi, B.l1), np.full_like(psi, B.l2)))
        assert np.max(np.abs(back - psi)) < 1e-10

    def test_per_cluster_bounds(self):
        l1 = np.array([0.0, 2.0])
        l2 = np.array([1.0, 10.0])
        assert np.allclose(cp_from_lambda(np.zeros(2), (l1, l2)), [0.5, 6.0])

    @pytest.mark.parametrize("l1,l2", [(2.0, 2.0), (3.0, 1.0), (np.nan, 1.0), (0.0, np.inf)])
    def test_invalid_bounds(self, l1, l2):
        with pytest.raises(DomainError):
            ChangepointBounds(l1, l2)

    def test_invalid_bound_arrays(self):
        for f in (cp_from_lambda, cp_derivative):
            with pytest.raises(DomainError):
                f(0.0, (np.array([1.0]), np.array([0.0])))
            with pytest.raises(DomainError):
                f(0.0, (1.0, 2.0, 3.0))
