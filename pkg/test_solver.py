#!/usr/bin/env python3
"""
Tests for the transport-system solvers

Tests:
- Grid alignment and mean-zero projection of initial data
- Diagonal solution: start slice, transport with reflections, boundary identity
- Boundary trace: strip formulas, branch tags, energy decomposition
- Full system: Picard convergence, kept iterates, divergence error
- Upwind oracle: CFL check, first-order agreement with both solvers
- Wave reconstruction from Riemann invariants
- Difference operator matrix and its singular values
"""

import math
import os
import sys

import numpy as np
import pytest
from scipy.integrate import trapezoid

# Add project to path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from src.core.exceptions import (
    CFLViolationError,
    ConfigValidationError,
    GridError,
    MeanZeroViolationError,
    PicardDivergenceError,
)
from src.solver import (
    Field,
    Grid,
    StateH,
    SystemSpec,
    checkerboard_filter,
    dt_matrix,
    fd_oracle,
    reconstruct_wave,
    solve_diag,
    solve_full,
    trace_diag,
    trace_energy_terms,
    trapezoid_weights,
)

# ============================================================================
# FIXTURES
# ============================================================================

CASCADE = [[0.0, 1.0], [0.0, 0.0]]
GENERIC = [[0.3, -1.2], [0.7, -0.4]]


@pytest.fixture
def free_spec():
    """No coupling: pure transport with reflections"""
    return SystemSpec.create(CASCADE, [1.0, 0.0], "0", "0", T=2.0)


@pytest.fixture
def cascade_spec():
    """Cascade coupling with a = 1, b = 0"""
    return SystemSpec.create(CASCADE, [0.0, 1.0], "1", "0", T=4.0)


@pytest.fixture
def generic_spec():
    """Time-dependent coefficients and a non-normal coupling matrix"""
    return SystemSpec.create(GENERIC, [1.0, 0.5], "1 + 0.5*sin(pi*x)", "0.3*cos(t)", T=2.0)


def compatible_state(nx):
    """p0 = -q0, smooth, mean-zero; satisfies p + q = 0 at both ends"""
    return StateH.from_functions(
        lambda x: np.array([np.cos(np.pi * x), np.cos(2 * np.pi * x)]),
        lambda x: -np.array([np.cos(np.pi * x), np.cos(2 * np.pi * x)]),
        nx,
    )


def sine_state(nx):
    """p0 = q0 = sin(2 pi x) e1"""
    wave = lambda x: np.array([np.sin(2 * np.pi * x), np.zeros_like(x)])
    return StateH.from_functions(wave, wave, nx)


# ============================================================================
# TESTS - GRID AND STATE
# ============================================================================

class TestGrid:
    """Node-aligned grids"""

    def test_nodes(self):
        grid = Grid(nx=10, T=2.0)
        assert grid.nt == 20
        assert grid.t[-1] == pytest.approx(2.0)
        assert grid.x.shape == (11,)

    def test_misaligned_horizon(self):
        with pytest.raises(GridError):
            Grid(nx=10, T=1.05)

    def test_stride_must_divide(self):
        with pytest.raises(GridError):
            Grid(nx=10, T=1.0, stride=3)
        assert len(Grid(nx=10, T=1.0, stride=5).t_out) == 3

    def test_start_inside_horizon(self):
        with pytest.raises(GridError):
            Grid(nx=10, T=1.0, s=1.0)


class TestStateH:
    """Membership in the mean-zero space"""

    def test_small_defect_is_projected(self):
        state = compatible_state(40)
        shifted = StateH(state.x, state.p + 1e-10, state.q)
        projected = shifted.projected(1e-8)
        np.testing.assert_allclose(projected.defect, 0.0, atol=1e-15)

    def test_large_defect_is_rejected(self):
        state = StateH.from_functions(
            lambda x: np.array([np.ones_like(x), np.zeros_like(x)]),
            lambda x: np.zeros((2, len(x))),
            20,
        )
        with pytest.raises(MeanZeroViolationError) as exc_info:
            state.projected(1e-8)
        assert exc_info.value.exit_code == 2

    def test_shape_checked(self):
        with pytest.raises(ConfigValidationError):
            StateH(np.linspace(0, 1, 5), np.zeros((2, 4)), np.zeros((2, 5)))

    def test_from_expressions(self):
        state = StateH.from_expressions(["cos(pi*x)", "0"], ["-cos(pi*x)", "0"], 16)
        np.testing.assert_allclose(state.p[0], np.cos(np.pi * state.x), atol=1e-15)


# ============================================================================
# TESTS - DIAGONAL SYSTEM
# ============================================================================

class TestSolveDiag:
    """Closed characteristic formulas"""

    def test_start_slice_is_initial_data(self, generic_spec):
        state = compatible_state(20)
        field = solve_diag(generic_spec, state, 0.0, Grid(nx=20, T=2.0))
        np.testing.assert_allclose(field.p[0], state.p, atol=1e-14)
        np.testing.assert_allclose(field.q[0], state.q, atol=1e-14)

    def test_free_first_strip(self, free_spec):
        """p(t, 0) = -q_s(t - s) for 0 <= t - s < 1"""
        state = sine_state(20)
        s = 0.5
        field = solve_diag(free_spec, state, s, Grid(nx=20, T=2.0, s=s))
        for i, t in enumerate(field.t):
            if t - s < 1.0 - 1e-12:
                expected = -np.array([math.sin(2 * math.pi * (t - s)), 0.0])
                np.testing.assert_allclose(field.p_left[i], expected, atol=1e-12)

    @pytest.mark.parametrize(
        "t,x,p1,q1",
        [
            (0.25, 0.5, 1.0, -1.0),
            (0.5, 0.25, -1.0, -1.0),
            (0.75, 0.5, -1.0, 1.0),
            (0.3, 0.1, -math.sin(0.4 * math.pi), math.sin(0.8 * math.pi)),
            (0.9, 0.6, -math.sin(0.6 * math.pi), 0.0),
        ],
    )
    def test_transport_with_reflections(self, t, x, p1, q1):
        spec = SystemSpec.create(CASCADE, [1.0, 0.0], "0", "0", T=1.0)
        field = solve_diag(spec, sine_state(20), 0.0, Grid(nx=20, T=1.0))
        i, j = round(t * 20), round(x * 20)
        assert field.p[i, 0, j] == pytest.approx(p1, abs=1e-12)
        assert field.q[i, 0, j] == pytest.approx(q1, abs=1e-12)
        assert field.p[i, 1, j] == 0.0

    def test_boundary_identity(self, generic_spec):
        field = solve_diag(generic_spec, compatible_state(20), 0.0, Grid(nx=20, T=2.0))
        assert field.boundary_residual() < 1e-9

    def test_output_stride(self, generic_spec):
        field = solve_diag(generic_spec, compatible_state(20), 0.0, Grid(nx=20, T=2.0, stride=10))
        assert field.p.shape == (5, 2, 21)

    def test_grid_must_fit_horizon(self, generic_spec):
        with pytest.raises(GridError):
            solve_diag(generic_spec, compatible_state(20), 0.0, Grid(nx=20, T=3.0))


class TestTraceDiag:
    """B*p(t, 0) from the boundary formulas"""

    def test_zero_data(self, cascade_spec):
        trace = trace_diag(cascade_spec, StateH.zeros(32), 0.0, np.linspace(0.0, 4.0, 33))
        np.testing.assert_array_equal(trace.values, 0.0)

    def test_cascade_second_strip(self, cascade_spec):
        """on [2, 3): trace = -f_1(t) g(t - 2), f_1(t) = 1 + (t - 2)/2"""
        state = StateH.from_functions(
            lambda x: np.zeros((2, len(x))),
            lambda x: np.array([np.cos(np.pi * x), np.zeros_like(x)]),
            400,
        )
        ts = np.linspace(2.0, 2.95, 20)
        trace = trace_diag(cascade_spec, state, 0.0, ts)
        expected = -(1.0 + 0.5 * (ts - 2.0)) * np.cos(np.pi * (ts - 2.0))
        np.testing.assert_allclose(trace.values, expected, atol=1e-4)
        assert set(trace.branch) == {"q"}
        assert set(trace.strip) == {1}

    def test_branch_tags(self, cascade_spec):
        trace = trace_diag(cascade_spec, compatible_state(20), 0.0, [0.2, 0.99, 1.0, 1.5, 2.0, 3.7])
        assert trace.branch == ("q", "q", "p", "p", "q", "p")
        assert list(trace.strip) == [0, 0, 0, 0, 1, 1]

    def test_matches_field_boundary(self, generic_spec):
        state = compatible_state(20)
        field = solve_diag(generic_spec, state, 0.0, Grid(nx=20, T=2.0))
        trace = trace_diag(generic_spec, state, 0.0, field.t)
        np.testing.assert_allclose(trace.values, field.observation(generic_spec.B), atol=1e-10)

    def test_times_outside_interval(self, cascade_spec):
        with pytest.raises(GridError):
            trace_diag(cascade_spec, compatible_state(20), 1.0, [0.5, 1.5])


class TestTraceEnergy:
    """Strip decomposition of int |B*p(t, 0)|^2"""

    def test_terms_for_partial_strip(self, cascade_spec):
        terms = trace_energy_terms(cascade_spec, compatible_state(20), T=2.5)
        assert [(t.kind, t.k, t.lo, t.hi) for t in terms] == [
            ("q", 0, 0.0, 1.0),
            ("p", 0, 0.0, 1.0),
            ("q", 1, 0.0, 0.5),
        ]

    def test_cut_p_term(self, cascade_spec):
        terms = trace_energy_terms(cascade_spec, compatible_state(20), T=3.25)
        assert (terms[-1].kind, terms[-1].k) == ("p", 1)
        assert terms[-1].lo == pytest.approx(0.75)

    def test_terms_match_trace(self, cascade_spec):
        state = StateH.from_functions(
            lambda x: np.array([np.cos(np.pi * x), 0.5 * np.cos(2 * np.pi * x)]),
            lambda x: np.array([0.3 * np.cos(np.pi * x), -np.cos(3 * np.pi * x)]),
            400,
        )
        terms = trace_energy_terms(cascade_spec, state, T=3.5)
        assert len(terms) == 4
        for term in terms:
            if term.kind == "q":
                a, b = 2 * term.k + term.lo, 2 * term.k + term.hi
            else:
                a, b = 2 * term.k + 2 - term.hi, 2 * term.k + 2 - term.lo
            ts = np.linspace(a, b - 1e-9, 2001)
            trace = trace_diag(cascade_spec, state, 0.0, ts)
            assert term.value == pytest.approx(trapezoid(trace.values ** 2, ts), rel=1e-4)


# ============================================================================
# TESTS - FULL SYSTEM
# ============================================================================

class TestSolveFull:
    """Picard iteration of the Duhamel formula"""

    def test_uncoupled_equals_diagonal(self, free_spec):
        state = compatible_state(20)
        grid = Grid(nx=20, T=2.0)
        full = solve_full(free_spec, state, grid)
        diag = solve_diag(free_spec, state, 0.0, grid)
        assert full.history.iterations == 1
        np.testing.assert_allclose(full.p, diag.p, atol=1e-13)
        np.testing.assert_allclose(full.q, diag.q, atol=1e-13)

    def test_converges_and_keeps_iterates(self, generic_spec):
        field = solve_full(generic_spec, compatible_state(40), Grid(nx=40, T=2.0), keep_iterates=(0, 1))
        history = field.history
        assert history.differences[-1] < 1e-10
        assert set(history.iterates) == {0, 1}
        diag = solve_diag(generic_spec, compatible_state(40), 0.0, Grid(nx=40, T=2.0))
        assert history.iterates[0].l2_distance(diag) < 5e-3

    def test_boundary_identity(self, generic_spec):
        field = solve_full(generic_spec, compatible_state(20), Grid(nx=20, T=2.0))
        assert field.boundary_residual() < 1e-13

    def test_mean_zero_drift_shrinks(self, generic_spec):
        drifts = []
        for nx in (20, 80):
            field = solve_full(generic_spec, compatible_state(nx), Grid(nx=nx, T=2.0))
            drifts.append(np.abs(field.h_defect()).max())
        assert drifts[1] <= max(0.6 * drifts[0], 1e-12)

    def test_uncoupled_mean_zero_exact(self, free_spec):
        field = solve_full(free_spec, compatible_state(20), Grid(nx=20, T=2.0))
        np.testing.assert_allclose(field.h_defect(), 0.0, atol=1e-13)

    def test_divergence_reported(self):
        spec = SystemSpec.create(GENERIC, [1.0, 0.0], "5 + x", "2", T=2.0)
        with pytest.raises(PicardDivergenceError) as exc_info:
            solve_full(spec, compatible_state(20), Grid(nx=20, T=2.0), max_iterations=2)
        assert exc_info.value.exit_code == 3


# ============================================================================
# TESTS - UPWIND ORACLE
# ============================================================================

class TestFdOracle:
    """First-order reference scheme"""

    def test_zero_data(self, generic_spec):
        field = fd_oracle(generic_spec, StateH.zeros(20), Grid(nx=20, T=2.0))
        np.testing.assert_array_equal(field.p, 0.0)

    def test_cfl_violation(self, generic_spec):
        with pytest.raises(CFLViolationError):
            fd_oracle(generic_spec, compatible_state(20), Grid(nx=20, T=2.0), cfl=1.5)

    def test_unknown_coupling(self, generic_spec):
        with pytest.raises(ConfigValidationError):
            fd_oracle(generic_spec, compatible_state(20), Grid(nx=20, T=2.0), coupling="partial")

    def test_unit_cfl_is_exact_transport(self, free_spec):
        state = compatible_state(20)
        grid = Grid(nx=20, T=2.0)
        fd = fd_oracle(free_spec, state, grid, cfl=1.0)
        exact = solve_diag(free_spec, state, 0.0, grid)
        np.testing.assert_allclose(fd.p, exact.p, atol=1e-13)

    def test_first_order_against_diagonal(self):
        spec = SystemSpec.create(CASCADE, [0.0, 1.0], "1", "0", T=2.0)
        errors = []
        for nx in (20, 40, 80):
            grid = Grid(nx=nx, T=2.0)
            state = compatible_state(nx)
            exact = solve_diag(spec, state, 0.0, grid)
            errors.append(exact.l2_distance(fd_oracle(spec, state, grid, coupling="diagonal")))
        for coarse, fine in zip(errors[:-1], errors[1:]):
            assert 1.5 <= coarse / fine <= 3.0

    def test_first_order_against_full(self):
        spec = SystemSpec.create(CASCADE, [0.0, 1.0], "1", "0", T=2.0)
        errors = []
        for nx in (20, 40, 80):
            grid = Grid(nx=nx, T=2.0)
            state = compatible_state(nx)
            errors.append(solve_full(spec, state, grid).l2_distance(fd_oracle(spec, state, grid)))
        for coarse, fine in zip(errors[:-1], errors[1:]):
            assert 1.5 <= coarse / fine <= 3.0


# ============================================================================
# TESTS - WAVE RECONSTRUCTION
# ============================================================================

class TestReconstructWave:
    """phi = int_0^x (q - p)/2"""

    def test_separated_solution(self):
        spec = SystemSpec.create(CASCADE, [1.0, 0.0], "0", "0", T=2.0)
        state = StateH.from_functions(
            lambda x: np.array([-np.pi * np.cos(np.pi * x), np.zeros_like(x)]),
            lambda x: np.array([np.pi * np.cos(np.pi * x), np.zeros_like(x)]),
            200,
        )
        field = solve_diag(spec, state, 0.0, Grid(nx=200, T=2.0, stride=20))
        wave = reconstruct_wave(field)
        expected = np.cos(np.pi * field.t)[:, None] * np.sin(np.pi * field.x)[None, :]
        np.testing.assert_allclose(wave[:, 0, :], expected, atol=1e-3)
        np.testing.assert_allclose(wave[:, 1, :], 0.0, atol=1e-14)
        np.testing.assert_allclose(wave[:, :, -1], 0.0, atol=1e-10)

    def test_static_when_p_is_minus_q(self):
        x = np.linspace(0.0, 1.0, 41)
        f = np.array([np.cos(np.pi * x), np.cos(2 * np.pi * x)])
        p = np.repeat(f[None], 3, axis=0)
        field = Field(t=np.array([0.0, 0.5, 1.0]), x=x, p=p, q=-p)
        wave = reconstruct_wave(field)
        np.testing.assert_allclose(wave[1], wave[0], atol=0)
        np.testing.assert_allclose(wave[2], wave[0], atol=0)

    def test_zero_field(self):
        x = np.linspace(0.0, 1.0, 11)
        zeros = np.zeros((2, 2, 11))
        assert not reconstruct_wave(Field(t=np.array([0.0, 1.0]), x=x, p=zeros, q=zeros)).any()

    def test_mean_zero_violation(self):
        x = np.linspace(0.0, 1.0, 11)
        ones = np.ones((1, 2, 11))
        with pytest.raises(MeanZeroViolationError):
            reconstruct_wave(Field(t=np.array([0.0]), x=x, p=ones, q=np.zeros_like(ones)))


# ============================================================================
# TESTS - DIFFERENCE OPERATOR
# ============================================================================

class TestDtMatrix:
    """Discretized B*(p - p_diag)(t, 0)"""

    def test_uncoupled_is_zero(self, free_spec):
        result = dt_matrix(free_spec, nx=8)
        assert result.matrix.shape == (17, 36)
        np.testing.assert_array_equal(result.matrix, 0.0)

    def test_singular_values_decay(self, cascade_spec):
        sv = dt_matrix(cascade_spec, nx=32).singular_values
        assert np.all(np.diff(sv) <= 1e-12)
        assert sv[0] > 0
        assert sv[9] / sv[0] <= 0.2

    def test_profile_stable_under_refinement(self, cascade_spec):
        """sigma_k / sigma_1 for k <= 20 moves by less than 10% when nx doubles"""
        coarse = dt_matrix(cascade_spec, nx=32).ratios(20)
        fine = dt_matrix(cascade_spec, nx=64).ratios(20)
        assert coarse.size == fine.size == 20
        shift = np.abs(fine - coarse) / coarse
        assert shift.max() < 0.10

    def test_first_singular_value_converges(self, cascade_spec):
        coarse = dt_matrix(cascade_spec, nx=32).singular_values[0]
        fine = dt_matrix(cascade_spec, nx=64).singular_values[0]
        assert coarse == pytest.approx(fine, rel=0.10)

    def test_checkerboard_filter(self):
        """Constants pass, the alternating mode is removed"""
        smooth = checkerboard_filter(9)
        np.testing.assert_allclose(smooth @ np.ones(9), 1.0, atol=1e-15)
        np.testing.assert_allclose(smooth @ (-1.0) ** np.arange(9), 0.0, atol=1e-15)

    def test_trapezoid_weights(self):
        weights = trapezoid_weights(5, 0.25)
        np.testing.assert_allclose(weights, [0.125, 0.25, 0.25, 0.25, 0.125])
        assert weights.sum() == pytest.approx(1.0)

    def test_concurrent_build_matches(self, cascade_spec):
        serial = dt_matrix(cascade_spec, nx=8, batch_size=10)
        threaded = dt_matrix(cascade_spec, nx=8, batch_size=10, workers=3)
        np.testing.assert_allclose(threaded.matrix, serial.matrix, atol=1e-14)
