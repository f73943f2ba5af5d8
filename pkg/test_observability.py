#!/usr/bin/env python3
"""
Tests for the observability verdicts

Tests:
- Observation stacks: row formulas, masks, the T = 4 reduction
- Minor criterion on hand-built and computed stacks
- Horizon 4 check and the general phi-condition chain, both parities
- Agreement of the phi route with the minor route on random systems
- Discrete observability constant under refinement
- Witnesses below T = 4: unit norm, mean zero, vanishing trace, support
"""

import math
import os
import sys

import numpy as np
import pytest
from scipy.integrate import trapezoid

# Add project to path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from src.core.exceptions import ConfigValidationError
from src.observability import (
    StackMatrix,
    Verdict,
    build_stack,
    check_T4,
    check_weak_observability,
    horizon_class,
    minor_criterion,
    stack_minor_verdict,
    svd_observability_constant,
    witness_T_lt_4,
)
from src.smallmat import expm_batch
from src.solver import Grid, SystemSpec, solve_full, trace_diag

# ============================================================================
# FIXTURES
# ============================================================================

CASCADE = [[0.0, 1.0], [0.0, 0.0]]
ROTATION = [[0.0, 1.0], [-1.0, 0.0]]

# a vanishes for t <= 3, so phi vanishes on [3, 4] at horizon 4
LATE_SWITCH = "(t - 3 + abs(t - 3))"


@pytest.fixture
def cascade_spec():
    """Cascade coupling observed through the second component, a = 1, b = 0"""
    return SystemSpec.create(CASCADE, [0.0, 1.0], "1", "0", T=4.0)


@pytest.fixture
def generic_spec():
    """Time- and space-dependent coefficients"""
    return SystemSpec.create([[0.3, -1.2], [0.7, -0.4]], [1.0, 0.5], "1 + 0.5*sin(pi*x)", "0.3*cos(t)", T=4.0)


def random_spec(rng, T):
    M = rng.uniform(-1.0, 1.0, size=(2, 2))
    B = rng.uniform(-1.0, 1.0, size=2)
    c = rng.uniform([0.6, 0.0, 0.2], [1.0, 0.5, 1.0])
    a = f"{c[0]:.4f} + {c[1]:.4f}*sin(pi*x)*cos(t)"
    b = f"{c[2]:.4f}*x"
    return SystemSpec.create(M, B, a, b, T=T)


# ============================================================================
# TESTS
# ============================================================================


class TestHorizonClass:
    """Parity of a horizon"""

    @pytest.mark.parametrize(
        "T, expected",
        [(4.0, (2, "even")), (4.5, (2, "even")), (5.0, (2, "odd")), (5.9, (2, "odd")), (6.0, (3, "even")), (0.5, (0, "even"))],
    )
    def test_classes(self, T, expected):
        """n and parity"""
        assert horizon_class(T) == expected


class TestBuildStack:
    """Observation stacks"""

    def test_row_counts_even(self, cascade_spec):
        """T = 4.5: P has k = 0, 1; Q adds a masked third row"""
        x = np.linspace(0, 1, 11)
        P = build_stack(cascade_spec, 4.5, "P", x)
        Q = build_stack(cascade_spec, 4.5, "Q", x)
        assert P.m == 2
        assert Q.m == 3
        np.testing.assert_array_equal(Q.mask[:, 2], x < 0.5)

    def test_row_counts_odd(self, cascade_spec):
        """T = 5.25: P gains a row active on [0.75, 1]"""
        x = np.linspace(0, 1, 9)
        P = build_stack(cascade_spec, 5.25, "P", x)
        assert P.m == 3
        np.testing.assert_array_equal(P.mask[:, 2], x >= 0.75)
        assert build_stack(cascade_spec, 5.25, "Q", x).m == 3

    def test_masked_rows_are_zero(self, generic_spec):
        """Inactive rows are exactly zero"""
        x = np.linspace(0, 1, 21)
        stack = build_stack(generic_spec, 4.3, "Q", x)
        assert np.all(stack.rows[~stack.mask] == 0.0)
        assert np.all(np.linalg.norm(stack.rows[stack.mask], axis=1) > 0)

    def test_rows_match_exponential(self, generic_spec):
        """Row k is B* exp(f_k M*) at the strip time"""
        x = np.linspace(0, 1, 7)
        stack = build_stack(generic_spec, None, "P", x)
        table = generic_spec.table
        for k in range(stack.m):
            f, _ = table.f_n_many(k, 2.0 * k + 2.0 - x)
            expected = np.einsum("i,nij->nj", generic_spec.B.array, expm_batch(generic_spec.Mstar, f))
            np.testing.assert_allclose(stack.rows[:, k], expected, atol=1e-12)

    def test_reduction_at_horizon_four(self, generic_spec):
        """P(x) exp(-f0(2 - x) M*) has rows B* and B* exp(phi(4 - x) M*)"""
        x = np.linspace(0, 1, 33)
        stack = build_stack(generic_spec, 4.0, "P", x)
        undo = expm_batch(generic_spec.Mstar, -stack.exponents[:, 0])
        reduced = np.einsum("nrj,njk->nrk", stack.rows, undo)
        B = generic_spec.B.array
        phi, _ = generic_spec.table.phi_many(4.0 - x)
        second = np.einsum("i,nij->nj", B, expm_batch(generic_spec.Mstar, phi))
        np.testing.assert_allclose(reduced[:, 0], np.broadcast_to(B, (x.size, 2)), atol=1e-9)
        np.testing.assert_allclose(reduced[:, 1], second, atol=1e-9)

    def test_unknown_kind(self, cascade_spec):
        """Only P and Q stacks exist"""
        with pytest.raises(ConfigValidationError):
            build_stack(cascade_spec, 4.0, "R", np.linspace(0, 1, 3))


class TestMinorCriterion:
    """Extracted 2x2 minors"""

    def test_identical_rows_fail(self):
        """Two equal rows have no nonsingular minor"""
        x = np.linspace(0, 1, 5)
        rows = np.repeat(np.array([[[1.0, 2.0], [1.0, 2.0]]]), x.size, axis=0)
        result = minor_criterion(StackMatrix.from_rows(x, rows))
        assert not result.passes
        assert np.all(result.best == 0.0)

    def test_identity_minor(self):
        """[[1, 0], [0, 1], [x, x]] keeps the identity minor"""
        x = np.linspace(0, 1, 5)
        rows = np.stack([np.tile([1.0, 0.0], (5, 1)), np.tile([0.0, 1.0], (5, 1)), np.stack([x, x], axis=1)], axis=1)
        result = minor_criterion(StackMatrix.from_rows(x, rows))
        assert result.passes
        np.testing.assert_allclose(result.best, 1.0)

    def test_single_row_fails(self):
        """Fewer than two rows never pass"""
        x = np.linspace(0, 1, 3)
        result = minor_criterion(StackMatrix.from_rows(x, np.ones((3, 1, 2))))
        assert not result.passes
        assert np.all(result.pairs == -1)

    def test_cascade_horizon_four(self, cascade_spec):
        """First two rows carry the minor everywhere"""
        x = np.linspace(0, 1, 65)
        for kind in ("P", "Q"):
            result = minor_criterion(build_stack(cascade_spec, 4.0, kind, x))
            assert result.passes
            assert np.all(result.pairs == [0, 1])

    def test_bad_shape(self):
        """Rows must be (N, m, 2)"""
        with pytest.raises(ValueError):
            StackMatrix.from_rows(np.linspace(0, 1, 3), np.ones((3, 2)))


class TestCheckT4:
    """Horizon four"""

    def test_cascade_observable(self, cascade_spec):
        """phi = 1, Jordan spectrum, full Kalman rank"""
        cert = check_T4(cascade_spec, x_nodes=64)
        assert cert.verdict == Verdict.WEAKLY_OBSERVABLE
        assert cert.kalman_rank == 2
        assert cert.margins["phi"] == pytest.approx(1.0, abs=1e-9)
        assert cert.spectral["tag"] == "JordanBlock"

    def test_b_only_not_observable(self):
        """a = 0 gives phi = 0 for any b(x)"""
        spec = SystemSpec.create(CASCADE, [0.0, 1.0], "0", "1 + x", T=4.0)
        cert = check_T4(spec, x_nodes=64)
        assert cert.verdict == Verdict.NOT_OBSERVABLE
        assert abs(cert.failure["phi"]) <= 1e-12

    def test_eigenvector_not_observable(self):
        """B an eigenvector of M fails the rank test"""
        spec = SystemSpec.create([[1.0, 0.0], [0.0, 2.0]], [1.0, 0.0], "1", "0", T=4.0)
        cert = check_T4(spec, x_nodes=16)
        assert cert.verdict == Verdict.NOT_OBSERVABLE
        assert cert.kalman_rank == 1
        assert cert.failure["condition"] == "rank[B | MB] = 2"

    def test_late_switch_fails_on_window(self):
        """phi vanishes on [3, 4], the failure point lies there"""
        spec = SystemSpec.create(CASCADE, [0.0, 1.0], LATE_SWITCH, "0", T=4.0)
        cert = check_T4(spec, x_nodes=64)
        assert cert.verdict == Verdict.NOT_OBSERVABLE
        assert 3.0 - 1e-9 <= cert.failure["t"] <= 4.0

    def test_certificate_serializes(self, cascade_spec):
        """JSON shape of a certificate"""
        data = check_T4(cascade_spec, x_nodes=16).to_dict()
        assert data["verdict"] == "WeaklyObservable"
        assert data["T"] == 4.0
        assert data["parity"] == "even"
        assert data["grid"] == {"x_nodes": 16}
        assert "witness" not in data


class TestCheckWeakObservability:
    """General horizons"""

    def test_cascade_T6(self):
        """Every x finds an index; k maps are filled"""
        spec = SystemSpec.create(CASCADE, [0.0, 1.0], "1", "0", T=6.0)
        cert = check_weak_observability(spec, x_nodes=32)
        assert cert.verdict == Verdict.WEAKLY_OBSERVABLE
        assert cert.n == 3 and cert.parity == "even"
        assert all(k == 2 for k in cert.k_maps["P"])
        assert all(k == 1 for k in cert.k_maps["Q"])
        assert set(cert.to_dict(include_maps=True)["k_maps"]) == {"P", "Q"}

    def test_horizon_four_delegates(self, cascade_spec):
        """T = 4 goes through check_T4"""
        cert = check_weak_observability(cascade_spec, 4.0, x_nodes=16)
        assert cert.verdict == Verdict.WEAKLY_OBSERVABLE
        assert "phi" in cert.margins

    def test_late_switch_recovers_at_T6(self):
        """The same a observes at T = 6 through another index"""
        spec = SystemSpec.create(CASCADE, [0.0, 1.0], LATE_SWITCH, "0", T=6.0)
        assert check_weak_observability(spec, x_nodes=32).verdict == Verdict.WEAKLY_OBSERVABLE
        assert check_weak_observability(spec, 4.0, x_nodes=32).verdict == Verdict.NOT_OBSERVABLE

    def test_time_independent_b_is_invisible_to_phi(self):
        """a = 0, b = cos(2 pi x): phi vanishes on t = 2, 2.5, ..., 8"""
        spec = SystemSpec.create(CASCADE, [0.0, 1.0], "0", "cos(2*pi*x)", T=8.0)
        ts = np.arange(2.0, 8.0 + 1e-12, 0.5)
        values, _ = spec.table.phi_many(ts)
        assert np.max(np.abs(values)) <= 1e-9

    @pytest.mark.parametrize("T", [4.0, 5.0, 6.0])
    def test_time_independent_b_not_observable(self, T):
        """b(x) alone never observes, whatever the horizon"""
        spec = SystemSpec.create(CASCADE, [0.0, 1.0], "0", "cos(2*pi*x)", T=T)
        cert = check_weak_observability(spec, x_nodes=64)
        assert cert.verdict == Verdict.NOT_OBSERVABLE
        assert cert.failure is not None

    @pytest.mark.parametrize("T", [4.0, 4.5, 5.5, 7.25])
    def test_rotation_with_phi_pi(self, T):
        """phi = pi sits on the lattice of a rotation"""
        spec = SystemSpec.create(ROTATION, [0.0, 1.0], "pi", "0", T=T)
        cert = check_weak_observability(spec, x_nodes=16)
        assert cert.verdict == Verdict.NOT_OBSERVABLE
        assert "pi/" in cert.failure["condition"]

    def test_rotation_off_lattice(self):
        """phi = 1 is not a multiple of pi"""
        spec = SystemSpec.create(ROTATION, [0.0, 1.0], "1", "0", T=5.5)
        assert check_weak_observability(spec, x_nodes=16).verdict == Verdict.WEAKLY_OBSERVABLE

    def test_band_gives_inconclusive(self):
        """A phi margin between tau and 10 tau is not decided"""
        spec = SystemSpec.create(CASCADE, [0.0, 1.0], "3e-9", "0", T=4.5)
        cert = check_weak_observability(spec, x_nodes=16)
        assert cert.verdict == Verdict.INCONCLUSIVE
        assert cert.failure is not None

    def test_short_horizon_carries_witness(self, cascade_spec):
        """T < 4 is never observable"""
        cert = check_weak_observability(cascade_spec, 2.5, x_nodes=64)
        assert cert.verdict == Verdict.NOT_OBSERVABLE
        assert cert.witness is not None
        assert cert.witness.residual <= 1e-6
        assert "witness" in cert.to_dict()

    def test_non_positive_horizon(self, cascade_spec):
        """T must be positive"""
        with pytest.raises(ConfigValidationError):
            check_weak_observability(cascade_spec, 0.0)

    def test_routes_agree_on_random_systems(self):
        """The phi chain and the minor criterion give the same verdict"""
        rng = np.random.default_rng(7)
        specs = [random_spec(rng, T) for T in (4.5, 5.5, 6.25) for _ in range(3)]
        specs += [
            SystemSpec.create(CASCADE, [0.0, 1.0], "0", "x", T=5.5),
            SystemSpec.create(ROTATION, [0.0, 1.0], "pi", "0", T=4.5),
            SystemSpec.create([[1.0, 0.0], [0.0, 2.0]], [1.0, 0.0], "1", "0", T=6.25),
        ]
        for spec in specs:
            phi_route = check_weak_observability(spec, x_nodes=24)
            minor_route = stack_minor_verdict(spec, x_nodes=24)
            assert phi_route.verdict == minor_route.verdict, spec.to_dict()


class TestObservabilityConstant:
    """Smallest singular value of the discrete observation map"""

    def test_stable_under_refinement(self, cascade_spec):
        """Observable horizon keeps sigma_min away from zero"""
        coarse = svd_observability_constant(cascade_spec, nx=32)
        fine = svd_observability_constant(cascade_spec, nx=64)
        assert coarse.sigma_min > 1e-3
        assert 0.5 <= fine.sigma_min / coarse.sigma_min <= 2.0
        assert math.isfinite(fine.constant)

    def test_b_only_vanishes(self):
        """phi = 0 leaves every row equal to B*"""
        spec = SystemSpec.create(CASCADE, [0.0, 1.0], "0", "x", T=4.0)
        assert svd_observability_constant(spec, nx=32).sigma_min <= 1e-8

    def test_zero_observation(self, cascade_spec):
        """B = 0 observes nothing"""
        spec = SystemSpec.create(CASCADE, [0.0, 0.0], "1", "0", T=4.0)
        result = svd_observability_constant(spec, nx=16)
        assert result.sigma_min == pytest.approx(0.0, abs=1e-12)
        assert result.constant == math.inf

    def test_short_horizon_vanishes(self, cascade_spec):
        """Below T = 4 part of [0, 1] is read by a single row"""
        assert svd_observability_constant(cascade_spec, 3.5, nx=32).sigma_min <= 1e-8


class TestWitness:
    """Unobserved data below T = 4"""

    def _check_unobserved(self, spec, witness):
        assert witness.state.h_norm == pytest.approx(1.0, rel=1e-12)
        np.testing.assert_allclose(witness.state.defect, 0.0, atol=1e-12)
        ts = np.linspace(0.0, witness.T, 97, endpoint=False)
        trace = trace_diag(spec.with_horizon(witness.T), witness.state, 0.0, ts)
        # off-node times see linear interpolation of the datum
        assert np.max(np.abs(trace.values)) <= 0.2

    def test_no_coupling_indicator(self):
        """eta = 0, B = (0, 1): p0 = q0 along (1, 0)"""
        spec = SystemSpec.create(CASCADE, [0.0, 1.0], "0", "0", T=0.5)
        witness = witness_T_lt_4(spec, nx=32, profile="indicator")
        np.testing.assert_allclose(witness.state.p, witness.state.q, atol=1e-12)
        np.testing.assert_allclose(witness.state.p[1], 0.0, atol=1e-12)
        np.testing.assert_allclose(np.abs(witness.state.p[0]), 1.0 / math.sqrt(2.0), rtol=1e-9)
        assert witness.residual <= 1e-14

    def test_cascade_T_2_5(self, cascade_spec):
        """p0 orthogonal to exp(f0(2 - x) M) B"""
        witness = witness_T_lt_4(cascade_spec, 2.5, nx=128)
        assert witness.residual <= 1e-8
        self._check_unobserved(cascade_spec, witness)

    def test_cascade_T_3_5_support(self, cascade_spec):
        """p0 vanishes where two P rows are active; q0 vanishes"""
        witness = witness_T_lt_4(cascade_spec, 3.5, nx=128)
        x = witness.state.x
        assert witness.residual <= 1e-8
        np.testing.assert_allclose(witness.state.p[:, x >= 0.5], 0.0, atol=1e-14)
        np.testing.assert_allclose(witness.state.q, 0.0, atol=1e-14)
        assert witness.support["p"][1] < 0.5

    @pytest.mark.parametrize("T", [0.5, 1.5, 2.5, 3.5])
    def test_full_system_trace_small(self, cascade_spec, T):
        """The coupled system keeps the witness trace within 5 dx"""
        nx = 128
        witness = witness_T_lt_4(cascade_spec, T, nx=nx)
        spec = cascade_spec.with_horizon(T)
        field = solve_full(spec, witness.state, Grid(nx=nx, T=T))
        assert witness.state.h_norm == pytest.approx(1.0, rel=1e-12)
        assert np.max(np.abs(field.observation(spec.B))) <= 5.0 / nx

    @pytest.mark.parametrize("T", [0.7, 1.5, 2.2, 3.1])
    def test_generic_spec(self, generic_spec, T):
        """Any horizon below four"""
        witness = witness_T_lt_4(generic_spec, T, nx=96)
        assert witness.residual <= 1e-8
        assert trapezoid(witness.state.p - witness.state.q, witness.state.x, axis=1) == pytest.approx([0.0, 0.0], abs=1e-12)

    def test_rejects_long_horizon(self, cascade_spec):
        """No witness at T >= 4"""
        with pytest.raises(ConfigValidationError):
            witness_T_lt_4(cascade_spec, 4.0)

    def test_unknown_profile(self, cascade_spec):
        with pytest.raises(ConfigValidationError):
            witness_T_lt_4(cascade_spec, 2.0, profile="gaussian")

    def test_rows_export(self, cascade_spec):
        """CSV rows are (x, p1, p2, q1, q2)"""
        witness = witness_T_lt_4(cascade_spec, 1.5, nx=16)
        rows = list(witness.rows())
        assert len(rows) == 17
        assert all(len(row) == 5 for row in rows)
