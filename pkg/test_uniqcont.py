#!/usr/bin/env python3
"""
Tests for the unique continuation criteria

Tests:
- Constant case: Jordan condition, shared roots of the frequency quadratics
- Fundamental matrix against closed forms, Fattorini dips on the decoupled system
- Homogeneous cascade: initial slice, wall reflections, period 2
- Fredholm kernels of the worked families, admissible index ranges
- Nystrom operator: rank structure, agreement with the 2x2 reduction, pencil mode
- Cascade verdicts and the family-1 integral condition
- Trace equations: back-solved data, eigenfunctions, generic data
- Moment values
"""

import math
import os
import sys

import numpy as np
import pytest
import scipy.linalg

# Add project to path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from src.characteristics import CoeffFields
from src.core.exceptions import ConfigValidationError, IndexRangeError, SingularFactorError
from src.core.settings import GridSettings
from src.solver import Grid, SystemSpec
from src.uniqcont import (
    UCStatus,
    admissible_pairs,
    admissible_ranges,
    back_solve_plus,
    cascade_kernels,
    cascade_system,
    cascade_uc,
    constant_case,
    example1_condition,
    example1_integrals,
    example2_matrix,
    example_fields,
    fattorini_matrix,
    fattorini_scan,
    fundamental_matrix,
    homogeneous_cascade,
    moment_condition_report,
    nystrom_assemble,
    rank_kernel_spectrum,
    residual_equations_check,
)

# ============================================================================
# FIXTURES
# ============================================================================

CASCADE = [[0.0, 1.0], [0.0, 0.0]]
GENERIC = [[0.3, -1.2], [0.7, -0.4]]


@pytest.fixture
def decoupled_spec():
    """No coupling terms at all"""
    return SystemSpec.create(CASCADE, [0.0, 1.0], "0", "0", T=4.0)


@pytest.fixture
def cascade_spec():
    """Cascade with a = 1, b = 0"""
    return SystemSpec.create(CASCADE, [0.0, 1.0], "1", "0", T=4.0)


@pytest.fixture
def family2_constant():
    """Family 2 with alpha = beta = 1 at T = 4"""
    return cascade_system(example_fields("1", "1", 2, 4.0))


def assemble_pair(fields, k, l, N=32, **kwargs):
    n = int(fields.T // 2)
    return nystrom_assemble(cascade_kernels(fields, n, k, l, T=fields.T), N, **kwargs)


# ============================================================================
# TESTS
# ============================================================================


class TestConstantCase:
    """Root-sharing test for constant coefficients"""

    def test_cascade_holds(self):
        """Jordan block at 0 with a = 1"""
        verdict = constant_case(1.0, 0.0, CASCADE)
        assert verdict.verdict == UCStatus.HOLDS
        assert verdict.regime == "constant"
        assert verdict.details["condition_value"] == 1.0

    def test_jordan_fails(self):
        verdict = constant_case(0.0, 2.0, CASCADE)
        assert verdict.verdict == UCStatus.FAILS

    def test_shared_root(self):
        """mu = 1, 2 with a = 0 and b = 2 pi: frequencies (2, 1) give equal quadratics"""
        verdict = constant_case(0.0, 2.0 * math.pi, [[1.0, 0.0], [0.0, 2.0]], n_max=4)
        assert verdict.verdict == UCStatus.FAILS
        assert verdict.witness == {"n1": 2, "n2": 1}
        assert verdict.details["shares_root"]

    def test_distinct_holds(self):
        verdict = constant_case(0.0, 1.0, [[1.0, 0.0], [0.0, 2.0]], n_max=16)
        assert verdict.verdict == UCStatus.HOLDS
        assert verdict.details["window"] == {"n_max": 16}
        assert verdict.details["disagreements"] == 0

    def test_complex_pair(self):
        verdict = constant_case(1.0, 0.5, [[0.0, 1.0], [-1.0, 0.0]], n_max=16)
        assert verdict.verdict == UCStatus.HOLDS
        assert verdict.details["disagreements"] == 0

    def test_scalar_multiple_fails(self):
        verdict = constant_case(1.0, 0.3, [[2.0, 0.0], [0.0, 2.0]])
        assert verdict.verdict == UCStatus.FAILS

    def test_window_validated(self):
        with pytest.raises(ConfigValidationError):
            constant_case(1.0, 0.0, CASCADE, n_max=0)

    def test_serialization(self):
        data = constant_case(1.0, 0.0, CASCADE).to_dict()
        assert data["verdict"] == "Holds"
        assert data["details"]["classification"]["tag"] == "JordanBlock"


class TestFundamentalMatrix:
    """R_s(1, 0) of the spatial ODE"""

    def test_decoupled(self, decoupled_spec):
        R = fundamental_matrix(decoupled_spec, 1.0, method="ode")
        expected = np.diag([math.exp(-1), math.exp(-1), math.e, math.e])
        np.testing.assert_allclose(R, expected, atol=1e-8)

    def test_constant_coefficients(self):
        """Integrated and exponential forms agree"""
        spec = SystemSpec.create(GENERIC, [1.0, 0.5], "1", "0.4", T=3.0)
        s = 0.5 + 2.0j
        e1 = float(spec.fields.eta1_fn(0.0, 0.0))
        e2 = float(spec.fields.eta2_fn(0.0, 0.0))
        Ms = spec.Mstar.array
        I = np.eye(2)
        A = np.block([[-s * I - e1 * Ms, -e2 * Ms], [e1 * Ms, e2 * Ms + s * I]])
        expected = scipy.linalg.expm(A)
        np.testing.assert_allclose(fundamental_matrix(spec, s, method="ode"), expected, atol=1e-8)
        np.testing.assert_allclose(fundamental_matrix(spec, s), expected, atol=1e-12)

    def test_block_triangular_reduction(self):
        """a = b = 1 + x gives eta2 = 0 and eta1 = 1 + x"""
        spec = SystemSpec.create(CASCADE, [0.0, 1.0], "1 + x", "1 + x", T=2.0)
        R = fundamental_matrix(spec, 0.0, method="ode")
        Ms = spec.Mstar.array
        np.testing.assert_allclose(R[:2, :2], scipy.linalg.expm(-1.5 * Ms), atol=1e-8)
        np.testing.assert_allclose(R[:2, 2:], 0.0, atol=1e-12)

    def test_time_dependent_rejected(self):
        spec = SystemSpec.create(CASCADE, [0.0, 1.0], "t", "0", T=2.0)
        with pytest.raises(ConfigValidationError):
            fundamental_matrix(spec, 1.0)

    def test_exponential_needs_constant(self):
        spec = SystemSpec.create(CASCADE, [0.0, 1.0], "x", "0", T=2.0)
        with pytest.raises(ConfigValidationError):
            fundamental_matrix(spec, 1.0, method="expm")


class TestFattoriniScan:
    """Fourth singular value over complex frequencies"""

    def test_decoupled_dips(self, decoupled_spec):
        """Boundary spectrum i pi Z; the observation removes only one direction"""
        s_values = [0.0, 1j * math.pi, -1j * math.pi, 1.0, 0.5j * math.pi]
        result = fattorini_scan(decoupled_spec, s_values)
        assert np.all(result.sigma4[:3] < 1e-6)
        assert np.all(result.sigma4[3:] > 1e-2)
        assert result.verdict == UCStatus.FAILS
        assert 0.0 in result.dips

    def test_mean_rows_at_zero(self, decoupled_spec):
        matrix = fattorini_matrix(decoupled_spec, 0.0, enforce_mean_zero=True)
        assert matrix.shape == (7, 4)
        result = fattorini_scan(decoupled_spec, [0.0], enforce_mean_zero=True)
        assert result.minimum > 1e-2

    def test_cascade_consistent_with_constant_case(self, cascade_spec):
        s_values = [0.0, 1j * math.pi, 2j * math.pi, 1.0 + 0.5j]
        result = fattorini_scan(cascade_spec, s_values, enforce_mean_zero=True)
        assert result.verdict == UCStatus.HOLDS
        assert result.minimum > 1e-6
        assert constant_case(1.0, 0.0, CASCADE).holds

    def test_default_grid_shape(self, cascade_spec):
        grids = GridSettings(fattorini_re_count=3, fattorini_im_count=5)
        result = fattorini_scan(cascade_spec, grids=grids, enforce_mean_zero=True)
        assert result.sigma4.shape == (3, 5)
        assert len(list(result.rows())) == 15

    def test_verdict_serialization(self, decoupled_spec):
        verdict = fattorini_scan(decoupled_spec, [1j * math.pi]).to_verdict()
        assert verdict.regime == "autonomous-Fattorini"
        data = verdict.to_dict()
        assert data["verdict"] == "Fails"
        np.testing.assert_allclose(data["witness"]["s"], [0.0, math.pi])


class TestHomogeneousCascade:
    """Free transport of the first components"""

    def test_initial_slice(self):
        grid = Grid(nx=8, T=4.0)
        x = grid.x
        field = homogeneous_cascade(np.cos(math.pi * x), x**2, grid)
        np.testing.assert_allclose(field.p[0], np.cos(math.pi * x), atol=1e-15)
        np.testing.assert_allclose(field.q[0], x**2, atol=1e-15)

    def test_reflection_pattern(self):
        """p0 = 1, q0 = 0: p- is 1 or 0 strip by strip, q- picks up -p0"""
        grid = Grid(nx=4, T=2.0)
        field = homogeneous_cascade(np.ones(5), np.zeros(5), grid)
        assert field.p[2, 0] == 0.0
        assert field.p[6, 0] == 1.0
        assert field.q[2, 0] == 0.0
        assert field.q[6, 0] == -1.0

    def test_period_two(self):
        grid = Grid(nx=8, T=4.0)
        field = homogeneous_cascade(lambda x: np.cos(math.pi * x) + x, lambda x: np.sin(math.pi * x), grid)
        np.testing.assert_allclose(field.p[16:], field.p[:17], atol=1e-14)
        np.testing.assert_allclose(field.q[16:], field.q[:17], atol=1e-14)

    def test_rows(self):
        grid = Grid(nx=4, T=1.0)
        field = homogeneous_cascade(np.ones(5), np.zeros(5), grid)
        assert len(list(field.rows())) == 25

    def test_bad_profile(self):
        with pytest.raises(ConfigValidationError):
            homogeneous_cascade(np.ones((2, 2)), np.zeros(5), Grid(nx=4, T=1.0))


class TestCascadeKernels:
    """Kernel entries and the diagonal factor"""

    def test_family2_collapse(self):
        fields = example_fields("1 + 0.2*t", "0.5", 2, 6.0)
        system = cascade_kernels(fields, 3, 1, 2)
        rng = np.random.default_rng(3)
        s, x = rng.uniform(0.0, 1.0, size=(2, 50))
        K = system.kernel(s, x)
        expected11 = 0.5 * (1 + 0.2 * (4 - x) + 0.5)
        expected22 = 0.5 * (1 + 0.2 * (4 + x) + 0.5)
        np.testing.assert_allclose(K[:, 0, 0], expected11, atol=1e-14)
        np.testing.assert_allclose(K[:, 0, 1], -expected11, atol=1e-14)
        np.testing.assert_allclose(K[:, 1, 1], expected22, atol=1e-14)
        np.testing.assert_allclose(K[:, 1, 0], -expected22, atol=1e-14)

    def test_family1_entries(self):
        fields = example_fields("1 + 0.2*t", "0.5", 1, 4.0)
        system = cascade_kernels(fields, 2, 1, 1)
        s = np.array([0.1, 0.4, 0.8, 0.8])
        x = np.array([0.5, 0.2, 0.3, 0.9])
        K = system.kernel(s, x)
        np.testing.assert_allclose(K[:, 0, 1], -0.5 * (1 + 0.2 * (2 + s) + 0.5), atol=1e-14)
        np.testing.assert_allclose(K[:, 1, 0], -0.5 * (1 + 0.2 * (2 - s) + 0.5), atol=1e-14)
        below = 0.5 * (1 + 0.2 * (2 - s) + 0.5)
        above = 0.5 * (1 + 0.2 * (4 - s) + 0.5)
        np.testing.assert_allclose(K[:, 0, 0], np.where(s <= x, below, above), atol=1e-14)

    def test_factor_is_phi(self):
        """Family 1 has phi(t) = alpha(t - 2) + beta(t)"""
        fields = example_fields("1 + 0.2*t", "0.5", 1, 4.0)
        system = cascade_kernels(fields, 2, 1, 1)
        x = np.linspace(0.0, 1.0, 9)
        A = system.A(x)
        np.testing.assert_allclose(A[:, 0], 1 + 0.2 * (2 - x) + 0.5, atol=1e-10)
        np.testing.assert_allclose(A[:, 1], 1 + 0.2 * x + 0.5, atol=1e-10)

    def test_zero_fields(self):
        fields = CoeffFields.from_eta("0", "0", 4.0)
        system = cascade_kernels(fields, 2, 1, 1)
        assert np.all(system.kernel(0.3, 0.6) == 0.0)
        assert np.all(system.A([0.2, 0.7]) == 0.0)

    def test_admissible_ranges(self):
        assert admissible_pairs(4.0) == [(1, 1)]
        assert admissible_pairs(5.0) == [(1, 1), (1, 2)]
        assert admissible_pairs(6.5) == [(1, 1), (1, 2), (2, 1), (2, 2)]
        assert admissible_pairs(3.5) == []

    @pytest.mark.parametrize(
        "T, k, l",
        [(4.5, (1, 1), (1, 1)), (5.5, (1, 1), (1, 2)), (7.0, (1, 2), (1, 3)), (8.25, (1, 3), (1, 3))],
    )
    def test_bounds_common_to_both_regions(self, T, k, l):
        """Odd parity caps k at n - 1 and l at n; even parity caps both at n - 1"""
        assert admissible_ranges(T) == {"k": k, "l": l}

    def test_index_out_of_range(self):
        fields = CoeffFields.from_eta("1", "1", 5.0)
        with pytest.raises(IndexRangeError):
            cascade_kernels(fields, 2, 2, 1, T=4.0)
        with pytest.raises(IndexRangeError):
            cascade_kernels(fields, 2, 1, 2, T=4.0)
        assert cascade_kernels(fields, 2, 1, 2, T=5.0).l == 2

    def test_horizon_mismatch(self):
        fields = CoeffFields.from_eta("1", "1", 6.0)
        with pytest.raises(ConfigValidationError):
            cascade_kernels(fields, 2, 1, 1, T=6.0)


class TestNystrom:
    """Discretized Fredholm operator"""

    def test_rank_structure(self):
        fields = example_fields("1 + 0.3*sin(t)", "1", 2, 4.0)
        operator = assemble_pair(fields, 1, 1)
        assert not operator.third_kind
        assert np.linalg.matrix_rank(operator.matrix, tol=1e-8) <= 2

    def test_constant_family2_has_one(self, family2_constant):
        operator = assemble_pair(family2_constant.fields, 1, 1, N=64)
        assert abs(operator.nearest()[0] - 1.0) <= 1e-6
        np.testing.assert_allclose(rank_kernel_spectrum(example2_matrix("1", "1", 1, 1)), [0.0, 1.0], atol=1e-12)

    def test_perturbed_family2_matches_reduction(self):
        alpha, beta = "1 + 0.3*sin(t)", "1"
        operator = assemble_pair(example_fields(alpha, beta, 2, 4.0), 1, 1, N=64)
        values = operator.eigenvalues()
        leading = values[np.argmax(np.abs(values))]
        reduced = rank_kernel_spectrum(example2_matrix(alpha, beta, 1, 1))
        assert abs(leading - reduced[np.argmax(np.abs(reduced))]) <= 1e-6
        assert abs(operator.distance_to_one() - np.min(np.abs(reduced - 1.0))) <= 1e-6

    def test_eigenfunction(self, family2_constant):
        operator = assemble_pair(family2_constant.fields, 1, 1)
        eigenvalue, values = operator.eigenfunction()
        assert abs(eigenvalue - 1.0) <= 1e-10
        np.testing.assert_allclose(np.abs(values), 1.0, atol=1e-8)
        np.testing.assert_allclose(values[0], -values[1], atol=1e-8)
        interpolated = operator.interpolate(values, eigenvalue, [0.0, 0.5, 1.0])
        np.testing.assert_allclose(interpolated, np.repeat(values[:, :1], 3, axis=1), atol=1e-8)

    def test_pencil_mode(self):
        fields = CoeffFields.from_eta("0", "0", 4.0)
        operator = assemble_pair(fields, 1, 1, N=8)
        assert operator.third_kind
        with pytest.raises(SingularFactorError):
            assemble_pair(fields, 1, 1, N=8, allow_pencil=False)

    def test_minimum_nodes(self, family2_constant):
        with pytest.raises(ConfigValidationError):
            assemble_pair(family2_constant.fields, 1, 1, N=4)


class TestCascadeUC:
    """Verdicts over admissible pairs"""

    def test_constant_family2_fails(self):
        spec = cascade_system(example_fields("1", "1", 2, 6.0))
        verdict = cascade_uc(spec, N=16)
        assert verdict.verdict == UCStatus.FAILS
        assert len(verdict.spectral) == 4
        assert all(entry["distance"] <= 1e-8 for entry in verdict.spectral)

    def test_zero_coupling_fails(self):
        spec = SystemSpec.create(CASCADE, [0.0, 1.0], "0", "0", T=4.0)
        verdict = cascade_uc(spec, N=8)
        assert verdict.verdict == UCStatus.FAILS
        assert "vanishes" in verdict.explanation
        assert not any(entry["usable"] for entry in verdict.spectral)

    def test_family1_agrees_with_integral_condition(self):
        alpha, beta = "1 + 0.3*sin(t)", "0.2*cos(t)"
        assert example1_condition(alpha, beta, 1, 1)
        spec = cascade_system(example_fields(alpha, beta, 1, 4.0))
        verdict = cascade_uc(spec, N=32)
        assert verdict.verdict == UCStatus.HOLDS
        assert verdict.witness == {"k": 1, "l": 1}

    def test_explicit_pairs(self):
        spec = cascade_system(example_fields("1", "1", 2, 6.0))
        verdict = cascade_uc(spec, N=8, pairs=[(2, 1)])
        assert [entry["k"] for entry in verdict.spectral] == [2]

    def test_short_horizon_rejected(self, cascade_spec):
        with pytest.raises(ConfigValidationError):
            cascade_uc(cascade_spec, T=3.5)

    def test_needs_cascade(self):
        spec = SystemSpec.create(GENERIC, [1.0, 0.0], "1", "0", T=4.0)
        with pytest.raises(ConfigValidationError):
            cascade_uc(spec)


class TestExample1:
    """Closed-form condition of the first family"""

    def test_constants_give_equality(self):
        first, second = example1_integrals("1", "0.5", 1, 1)
        assert abs(first) <= 1e-8
        assert abs(second) <= 1e-8
        assert not example1_condition("1", "0.5", 1, 1)

    def test_infinite_tolerance(self):
        assert not example1_condition("1 + 0.3*sin(t)", "0.2*cos(t)", 1, 1, tol=math.inf)

    def test_alpha_sign_flag(self):
        """With the flipped sign a constant alpha contributes -alpha / phi"""
        first, _ = example1_integrals("1", "0.5", 1, 1, alpha_sign=-1.0)
        assert abs(first + 1.0 / 1.5) <= 1e-8

    def test_vanishing_factor(self):
        """phi(t) = t - 3.5 changes sign on [3, 4]"""
        with pytest.raises(SingularFactorError):
            example1_integrals("t - 1.5", "0", 1, 1)

    def test_index_validated(self):
        with pytest.raises(IndexRangeError):
            example1_condition("1", "1", 0, 1)

    def test_alpha_of_t_only(self):
        with pytest.raises(ConfigValidationError):
            example_fields("t*x", "1", 1, 4.0)


class TestRankKernelSpectrum:
    """Eigenvalues of the integrated 2x2 matrix"""

    def test_projection(self):
        half = np.array([[0.5, -0.5], [-0.5, 0.5]])
        values = rank_kernel_spectrum(lambda x: np.broadcast_to(half, np.shape(x) + (2, 2)))
        np.testing.assert_allclose(values, [0.0, 1.0], atol=1e-14)

    def test_zero(self):
        values = rank_kernel_spectrum(lambda x: np.zeros(np.shape(x) + (2, 2)))
        np.testing.assert_allclose(values, [0.0, 0.0])


class TestTraceEquations:
    """Boundary trace equations of the cascade"""

    def test_zero_data(self, cascade_spec):
        zero = lambda x: np.zeros_like(x)
        residuals = residual_equations_check(cascade_spec, zero, zero, zero, zero)
        assert residuals.sup == (0.0, 0.0, 0.0)

    def test_back_solved_data(self, cascade_spec):
        p0 = lambda x: np.cos(math.pi * x)
        q0 = lambda x: -np.cos(math.pi * x) + 0.3 * np.sin(math.pi * x)
        p_plus = lambda x: back_solve_plus(cascade_spec, p0, q0, x)[0]
        q_plus = lambda x: back_solve_plus(cascade_spec, p0, q0, x)[1]
        residuals = residual_equations_check(cascade_spec, p0, q0, p_plus, q_plus, samples=11)
        assert residuals.sup[0] <= 1e-10
        assert residuals.sup[1] <= 1e-10
        assert residuals.sup[2] > 1e-3

    def test_eigenfunction_satisfies_late_equations(self, family2_constant):
        operator = assemble_pair(family2_constant.fields, 1, 1)
        eigenvalue, values = operator.eigenfunction()
        p0 = lambda x: operator.interpolate(values, eigenvalue, x)[0].real
        q0 = lambda x: operator.interpolate(values, eigenvalue, x)[1].real
        p_plus = lambda x: back_solve_plus(family2_constant, p0, q0, x)[0]
        q_plus = lambda x: back_solve_plus(family2_constant, p0, q0, x)[1]
        residuals = residual_equations_check(family2_constant, p0, q0, p_plus, q_plus, samples=11)
        assert residuals.sup[2] <= 1e-8

    def test_generic_data(self, cascade_spec):
        zero = lambda x: np.zeros_like(x)
        residuals = residual_equations_check(cascade_spec, lambda x: 1 + 2 * x, lambda x: x**2, zero, zero)
        assert residuals.sup[2] > 1e-3
        assert set(residuals.to_dict()) == {"system1", "system2", "system3"}


class TestMomentReport:
    """Sine-squared moments of a"""

    def test_constant(self):
        report = moment_condition_report("1", n_max=8)
        np.testing.assert_allclose(report["values"], 0.5, atol=1e-12)
        assert report["min_abs"] == pytest.approx(0.5)

    def test_first_zero(self):
        report = moment_condition_report("cos(2*pi*x)", n_max=5)
        assert report["values"][0] == pytest.approx(-0.25, abs=1e-12)
        assert report["argmin"] >= 2
        assert report["min_abs"] <= 1e-12

    def test_time_dependent_rejected(self):
        with pytest.raises(ConfigValidationError):
            moment_condition_report("t")
