"""
Solvers for the time-reversed coupled transport system

    p_t + p_x - M* eta1 p - M* eta2 q = 0
    q_t - q_x - M* eta1 p - M* eta2 q = 0,     (p + q)(t, 0) = (p + q)(t, 1) = 0

on [s, T] x [0, 1], where (p, q) are the Riemann invariants of the wave
system. The diagonal part keeps only the M* eta1 p term in the p equation and
the M* eta2 q term in the q equation.

- solve_diag / trace_diag: closed characteristic formulas for the diagonal part
- solve_full: Picard iteration of the Duhamel formula, marched along characteristics
- fd_oracle: first-order upwind scheme, used only as a cross-check
- reconstruct_wave: wave amplitude from the Riemann invariants
- dt_matrix: discretized difference operator Z0 -> B*(p - p_diag)(., 0)
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.integrate import cumulative_trapezoid, trapezoid

from .characteristics import CoeffFields, PhiTable, gauss_legendre_nodes
from .core.exceptions import (
    CFLViolationError,
    ConfigValidationError,
    GridError,
    MeanZeroViolationError,
    PicardDivergenceError,
)
from .core.logging_config import get_logger, log_duration
from .expr import Expr, compile_expr, parse
from .smallmat import Mat2, Vec2, expm_batch

logger = get_logger(__name__)

# foot points closer than this to the start line count as lying on it
EDGE_SLACK = 1e-12

# Gauss-Legendre order for integrals along a single straight characteristic
LINE_RULE_ORDER = 16

COUPLINGS = ("full", "diagonal")


# =============================================================================
# Data types
# =============================================================================

@dataclass(frozen=True)
class SystemSpec:
    """
    Coupling matrix M, observation vector B and coefficients a, b at horizon T.

    Usage:
        spec = SystemSpec.create([[0, 1], [0, 0]], [0, 1], "1", "0", T=4.0)
    """

    M: Mat2
    B: Vec2
    fields: CoeffFields
    quad_tol: float = 1e-12
    max_quad_depth: int = 30

    def __post_init__(self):
        if not self.fields.T > 0:
            raise ConfigValidationError(f"T must be positive, got {self.fields.T}", field_path="T")

    @classmethod
    def create(
        cls,
        M,
        B,
        a: Union[str, Expr],
        b: Union[str, Expr],
        T: float,
        quad_tol: float = 1e-12,
        max_quad_depth: int = 30,
    ) -> "SystemSpec":
        if not (isinstance(T, (int, float)) and math.isfinite(T) and T > 0):
            raise ConfigValidationError(f"T must be a positive number, got {T!r}", field_path="T")
        return cls(
            M=Mat2.of(M),
            B=Vec2.of(B),
            fields=CoeffFields.from_coefficients(a, b, float(T)),
            quad_tol=quad_tol,
            max_quad_depth=max_quad_depth,
        )

    @property
    def T(self) -> float:
        return self.fields.T

    @property
    def Mstar(self) -> Mat2:
        return self.M.T

    @cached_property
    def table(self) -> PhiTable:
        return PhiTable(self.fields, tol=self.quad_tol, max_depth=self.max_quad_depth)

    def with_horizon(self, T: float) -> "SystemSpec":
        """Same raw coefficients a, b at another horizon."""
        return SystemSpec.create(self.M, self.B, self.fields.a, self.fields.b, T, self.quad_tol, self.max_quad_depth)

    def to_dict(self) -> dict:
        return {"M": self.M.to_list(), "B": self.B.to_list(), **self.fields.to_dict()}


@dataclass(frozen=True)
class Grid:
    """
    Uniform grid with dt = dx = 1/nx on [s, T] x [0, 1].

    (T - s)*nx must be an integer so characteristics step from node to node.
    Output keeps every ``stride``-th time row.
    """

    nx: int
    T: float
    s: float = 0.0
    stride: int = 1

    def __post_init__(self):
        if self.nx < 2:
            raise GridError(f"nx must be at least 2, got {self.nx}", reason="nx")
        if not (0.0 <= self.s < self.T):
            raise GridError(f"need 0 <= s < T, got s={self.s}, T={self.T}", reason="interval")
        steps = (self.T - self.s) * self.nx
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            raise GridError(
                f"horizon length {self.T - self.s} is not a multiple of dx = 1/{self.nx}",
                reason="alignment",
            )
        if self.stride < 1 or round(steps) % self.stride:
            raise GridError(f"stride {self.stride} does not divide {round(steps)} steps", reason="stride")

    @property
    def dx(self) -> float:
        return 1.0 / self.nx

    @property
    def nt(self) -> int:
        return int(round((self.T - self.s) * self.nx))

    @property
    def x(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.nx + 1)

    @property
    def t(self) -> np.ndarray:
        return self.s + np.arange(self.nt + 1) * self.dx

    @property
    def t_out(self) -> np.ndarray:
        return self.t[:: self.stride]

    def to_dict(self) -> dict:
        return {"nx": self.nx, "T": self.T, "s": self.s, "stride": self.stride}


@dataclass(frozen=True)
class StateH:
    """
    Sampled pair (p, q) of 2-vector functions on a uniform x-grid.

    Arrays have shape (2, N); values between nodes are linear interpolants.
    """

    x: np.ndarray
    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        n = self.x.shape[0]
        if self.p.shape != (2, n) or self.q.shape != (2, n):
            raise ConfigValidationError(
                f"state arrays must have shape (2, {n}), got {self.p.shape} and {self.q.shape}",
                field_path="state",
            )
        if not (np.all(np.isfinite(self.p)) and np.all(np.isfinite(self.q))):
            raise ConfigValidationError("state samples must be finite", field_path="state")

    @classmethod
    def zeros(cls, nx: int) -> "StateH":
        return cls(np.linspace(0.0, 1.0, nx + 1), np.zeros((2, nx + 1)), np.zeros((2, nx + 1)))

    @classmethod
    def from_functions(cls, p_fn: Callable, q_fn: Callable, nx: int) -> "StateH":
        """p_fn, q_fn map an x array to a (2, len(x)) array."""
        x = np.linspace(0.0, 1.0, nx + 1)
        p = np.broadcast_to(np.asarray(p_fn(x), dtype=float), (2, nx + 1)).copy()
        q = np.broadcast_to(np.asarray(q_fn(x), dtype=float), (2, nx + 1)).copy()
        return cls(x, p, q)

    @classmethod
    def from_expressions(cls, p: Sequence, q: Sequence, nx: int) -> "StateH":
        """Components given as expression sources or trees in x (t is set to 0)."""
        x = np.linspace(0.0, 1.0, nx + 1)

        def sample(components) -> np.ndarray:
            if len(components) != 2:
                raise ConfigValidationError("initial data needs two components", field_path="initial_data")
            out = []
            for c in components:
                e = parse(c) if isinstance(c, str) else c
                out.append(compile_expr(e)(0.0, x))
            return np.array(out)

        return cls(x, sample(p), sample(q))

    @property
    def nx(self) -> int:
        return self.x.shape[0] - 1

    @property
    def defect(self) -> np.ndarray:
        """int_0^1 (p - q) dx per component."""
        return trapezoid(self.p - self.q, self.x, axis=-1)

    @property
    def h_norm(self) -> float:
        return float(np.sqrt(trapezoid(np.sum(self.p ** 2 + self.q ** 2, axis=0), self.x)))

    def projected(self, tol: float = 1e-8) -> "StateH":
        """
        Project onto the mean-zero subspace.

        Raises:
            MeanZeroViolationError: when |defect| exceeds tol relative to the norm
        """
        d = self.defect
        size = float(np.linalg.norm(d))
        scale = max(self.h_norm, np.finfo(float).tiny)
        if size > tol * scale:
            raise MeanZeroViolationError(defect=d.tolist(), tolerance=tol)
        if size == 0.0:
            return self
        shift = 0.5 * d[:, None]
        return StateH(self.x, self.p - shift, self.q + shift)

    def sample_p(self, xs: np.ndarray) -> np.ndarray:
        """Interpolated p at positions xs; result has shape xs.shape + (2,)."""
        return _interp(self.x, self.p, xs)

    def sample_q(self, xs: np.ndarray) -> np.ndarray:
        return _interp(self.x, self.q, xs)


def _interp(grid: np.ndarray, values: np.ndarray, xs: np.ndarray) -> np.ndarray:
    xs = np.clip(np.asarray(xs, dtype=float), 0.0, 1.0)
    flat = xs.ravel()
    out = np.stack([np.interp(flat, grid, values[c]) for c in range(2)], axis=-1)
    return out.reshape(xs.shape + (2,))


@dataclass
class PicardHistory:
    """Successive sup-in-time H-norm differences of the Picard iterates."""

    differences: List[float] = field(default_factory=list)
    ratios: List[float] = field(default_factory=list)
    iterates: Dict[int, "Field"] = field(default_factory=dict)

    @property
    def iterations(self) -> int:
        return len(self.differences)

    def to_dict(self) -> dict:
        return {"iterations": self.iterations, "differences": self.differences, "ratios": self.ratios}


@dataclass
class Field:
    """
    (p, q) samples on a (t, x) grid; arrays have shape (K, 2, N).
    """

    t: np.ndarray
    x: np.ndarray
    p: np.ndarray
    q: np.ndarray
    history: Optional[PicardHistory] = None

    @property
    def p_left(self) -> np.ndarray:
        return self.p[:, :, 0]

    @property
    def p_right(self) -> np.ndarray:
        return self.p[:, :, -1]

    @property
    def q_left(self) -> np.ndarray:
        return self.q[:, :, 0]

    @property
    def q_right(self) -> np.ndarray:
        return self.q[:, :, -1]

    def slice(self, index: int) -> StateH:
        return StateH(self.x, self.p[index].copy(), self.q[index].copy())

    def boundary_residual(self, skip_initial: bool = True) -> float:
        """max |p + q| over both boundaries; the initial slice may carry incompatible data."""
        start = 1 if skip_initial else 0
        left = np.abs(self.p_left[start:] + self.q_left[start:])
        right = np.abs(self.p_right[start:] + self.q_right[start:])
        if left.size == 0:
            return 0.0
        return float(max(left.max(), right.max()))

    def h_defect(self) -> np.ndarray:
        """int_0^1 (p - q) dx per time row and component, shape (K, 2)."""
        return trapezoid(self.p - self.q, self.x, axis=-1)

    def h_norms(self) -> np.ndarray:
        return np.sqrt(trapezoid(np.sum(self.p ** 2 + self.q ** 2, axis=1), self.x, axis=-1))

    def observation(self, B: Vec2) -> np.ndarray:
        """B*p(t, 0) per time row."""
        return self.p_left @ B.array

    def l2_distance(self, other: "Field") -> float:
        """Discrete L2((s,T) x (0,1)) distance between fields on the same grid."""
        if self.p.shape != other.p.shape:
            raise GridError(f"field shapes differ: {self.p.shape} vs {other.p.shape}", reason="shape")
        sq = np.sum((self.p - other.p) ** 2 + (self.q - other.q) ** 2, axis=1)
        return float(np.sqrt(trapezoid(trapezoid(sq, self.x, axis=-1), self.t)))

    def rows(self) -> Iterator[Tuple[float, float, float, float, float, float]]:
        """(t, x, p1, p2, q1, q2) rows, time-major."""
        for i, t in enumerate(self.t):
            for j, x in enumerate(self.x):
                yield (
                    float(t), float(x),
                    float(self.p[i, 0, j]), float(self.p[i, 1, j]),
                    float(self.q[i, 0, j]), float(self.q[i, 1, j]),
                )


@dataclass
class Trace:
    """B*p(t, 0) samples with the strip index and formula branch of each sample."""

    t: np.ndarray
    values: np.ndarray
    strip: np.ndarray
    branch: Tuple[str, ...]

    def energy(self) -> float:
        """Trapezoid approximation of int |B*p(t, 0)|^2 dt."""
        if len(self.t) < 2:
            return 0.0
        return float(trapezoid(self.values ** 2, self.t))

    def rows(self) -> Iterator[Tuple[float, float]]:
        for t, v in zip(self.t, self.values):
            yield float(t), float(v)


# =============================================================================
# Diagonal system: closed formulas
# =============================================================================

def _line_integral(eta: Callable, lo: np.ndarray, hi: np.ndarray, position: Callable) -> np.ndarray:
    """int_lo^hi eta(tau, position(tau)) dtau elementwise, fixed Gauss-Legendre rule."""
    nodes, weights = gauss_legendre_nodes(LINE_RULE_ORDER, -1.0, 1.0)
    half = 0.5 * (hi - lo)
    tau = (0.5 * (hi + lo))[..., None] + half[..., None] * nodes
    values = eta(tau, np.clip(position(tau), 0.0, 1.0))
    return half * np.sum(weights * values, axis=-1)


class _DiagonalEvaluator:
    """Pointwise values of the diagonal solution started from Z_s at time s."""

    def __init__(self, spec: SystemSpec, state: StateH, s: float):
        self.spec = spec
        self.state = state
        self.s = s
        self.Mstar = spec.Mstar
        self.eta1 = spec.fields.eta1_fn
        self.eta2 = spec.fields.eta2_fn

    def strips(self, t: np.ndarray) -> np.ndarray:
        """Strip index k with t - s in [k, k + 1), boundaries going to the later strip."""
        return np.floor(t - self.s + EDGE_SLACK).astype(int)

    def boundary_p(self, t: np.ndarray) -> np.ndarray:
        """
        p(t, 0) for t >= s:
            -e^{f_n M*} q_s(t - s - 2n)     on 2n <= t - s < 2n + 1
             e^{f_n M*} p_s(2n + 2 - t + s) on 2n + 1 <= t - s < 2n + 2
        """
        t = np.asarray(t, dtype=float)
        out = np.zeros(t.shape + (2,))
        if t.size == 0:
            return out
        keys, inverse = np.unique(np.round(t.ravel(), 12), return_inverse=True)
        k = self.strips(keys)
        n = k // 2
        exponents = np.zeros(keys.shape)
        for level in np.unique(n):
            sel = n == level
            exponents[sel] = self.spec.table.f_n_many(int(level), keys[sel], self.s)[0]
        d = keys - self.s
        q_branch = (k % 2) == 0
        data = np.where(
            q_branch[:, None],
            -self.state.sample_q(d - 2 * n),
            self.state.sample_p(2 * n + 2 - d),
        )
        values = np.einsum("kab,kb->ka", expm_batch(self.Mstar, exponents), data)
        return values[inverse].reshape(t.shape + (2,))

    def p_at(self, t: np.ndarray, x: np.ndarray) -> np.ndarray:
        """p(t, x) by tracing back along slope +1 to x = 0 or to the start line."""
        t, x = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(x, dtype=float))
        foot = t - x
        from_boundary = foot > self.s + EDGE_SLACK
        lo = np.where(from_boundary, foot, self.s)
        r = _line_integral(self.eta1, lo, t, lambda tau: tau - foot[..., None])
        base = np.where(
            from_boundary[..., None],
            self.boundary_p(np.where(from_boundary, foot, self.s)),
            self.state.sample_p(x - t + self.s),
        )
        return np.einsum("...ab,...b->...a", expm_batch(self.Mstar, r), base)

    def q_at(self, t: np.ndarray, x: np.ndarray) -> np.ndarray:
        """q(t, x) by tracing back along slope -1 to x = 1 (where q = -p) or to the start line."""
        t, x = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(x, dtype=float))
        foot = t + x - 1.0
        from_boundary = foot > self.s + EDGE_SLACK
        lo = np.where(from_boundary, foot, self.s)
        r = _line_integral(self.eta2, lo, t, lambda tau: (t + x)[..., None] - tau)
        base = self.state.sample_q(x + t - self.s)
        if np.any(from_boundary):
            feet = foot[from_boundary]
            base[from_boundary] = -self.p_at(feet, np.ones_like(feet))
        return np.einsum("...ab,...b->...a", expm_batch(self.Mstar, r), base)


def _check_start(spec: SystemSpec, s: float) -> None:
    if not (0.0 <= s < spec.T):
        raise GridError(f"start time must satisfy 0 <= s < T = {spec.T}, got {s}", reason="start")


@log_duration(logger, "solve_diag")
def solve_diag(spec: SystemSpec, state: StateH, s: float, grid: Grid, mean_zero_tol: float = 1e-8) -> Field:
    """
    Diagonal solution from Z_s at time s, evaluated at every node of ``grid``.

    The initial slice is Z_s itself (after mean-zero projection).
    """
    _check_start(spec, s)
    if abs(grid.s - s) > EDGE_SLACK or grid.T > spec.T + EDGE_SLACK:
        raise GridError(f"grid [{grid.s}, {grid.T}] does not fit start {s} and horizon {spec.T}", reason="interval")
    state = state.projected(mean_zero_tol)
    x = grid.x
    ts = grid.t_out
    evaluator = _DiagonalEvaluator(spec, state, s)

    tt, xx = np.meshgrid(ts, x, indexing="ij")
    p = np.moveaxis(evaluator.p_at(tt, xx), -1, 1)
    q = np.moveaxis(evaluator.q_at(tt, xx), -1, 1)
    p[0] = _interp(state.x, state.p, x).T
    q[0] = _interp(state.x, state.q, x).T
    logger.debug("Diagonal field assembled", extra_fields={"rows": len(ts), "nx": grid.nx, "s": s})
    return Field(t=ts, x=x, p=p, q=q)


def trace_diag(spec: SystemSpec, state: StateH, s: float, ts, mean_zero_tol: float = 1e-8) -> Trace:
    """B*p(t, 0) of the diagonal solution from the boundary formulas only."""
    _check_start(spec, s)
    ts = np.asarray(ts, dtype=float)
    if ts.size and (ts.min() < s - EDGE_SLACK or ts.max() > spec.T + EDGE_SLACK):
        raise GridError(f"trace times must lie in [{s}, {spec.T}]", reason="trace_times")
    state = state.projected(mean_zero_tol)
    evaluator = _DiagonalEvaluator(spec, state, s)
    ts = np.maximum(ts, s)
    values = evaluator.boundary_p(ts) @ spec.B.array
    k = evaluator.strips(ts)
    branch = tuple("q" if kk % 2 == 0 else "p" for kk in k)
    return Trace(t=ts, values=values, strip=k // 2, branch=branch)


@dataclass(frozen=True)
class EnergyTerm:
    """One strip contribution to int_0^T |B*p(t, 0)|^2 dt, written over x in [lo, hi]."""

    kind: str
    k: int
    lo: float
    hi: float
    value: float


def trace_energy_terms(spec: SystemSpec, state: StateH, T: Optional[float] = None, order: int = 4) -> List[EnergyTerm]:
    """
    Term-by-term decomposition of the trace energy of the diagonal solution from 0:

        q-terms  int |B* e^{f_k(x + 2k) M*} q0(x)|^2 dx
        p-terms  int |B* e^{f_k(2k + 2 - x) M*} p0(x)|^2 dx

    with the last strip cut at T.
    """
    T = spec.T if T is None else T
    if not (0.0 < T <= spec.T + EDGE_SLACK):
        raise GridError(f"energy horizon must lie in (0, {spec.T}], got {T}", reason="horizon")
    state = state.projected()
    table = spec.table
    B = spec.B.array
    edges = state.x
    terms: List[EnergyTerm] = []

    def integrate(kind: str, k: int, lo: float, hi: float) -> None:
        if hi <= lo:
            return
        inner = edges[(edges > lo) & (edges < hi)]
        cuts = np.concatenate([[lo], inner, [hi]])
        xs, ws = [], []
        for a, b in zip(cuts[:-1], cuts[1:]):
            nodes, weights = gauss_legendre_nodes(order, a, b)
            xs.append(nodes)
            ws.append(weights)
        xs, ws = np.concatenate(xs), np.concatenate(ws)
        if kind == "q":
            times, data = xs + 2 * k, state.sample_q(xs)
        else:
            times, data = 2 * k + 2 - xs, state.sample_p(xs)
        exponents = table.f_n_many(k, times)[0]
        rows = np.einsum("kab,kb->ka", expm_batch(spec.Mstar, exponents), data) @ B
        terms.append(EnergyTerm(kind=kind, k=k, lo=float(lo), hi=float(hi), value=float(np.dot(ws, rows ** 2))))

    k = 0
    while 2 * k < T - EDGE_SLACK:
        integrate("q", k, 0.0, min(1.0, T - 2 * k))
        if T > 2 * k + 1 + EDGE_SLACK:
            integrate("p", k, max(0.0, 2 * k + 2 - T), 1.0)
        k += 1
    return terms


# =============================================================================
# Full system: Picard iteration along characteristics
# =============================================================================

class CharacteristicMarcher:
    """
    Node-to-node characteristic stepping on a Grid with dt = dx.

    Each step uses the exponential trapezoid rule
        z_new = E z_old + dt/2 (E S_old + S_new),  E = exp(M* dt/2 (eta_old + eta_new))
    for the diagonal coefficient and a known source S. States carry a trailing
    batch axis: (2, N, K).
    """

    def __init__(self, spec: SystemSpec, grid: Grid):
        if grid.T > spec.T + EDGE_SLACK:
            raise GridError("grid exceeds the horizon", reason="interval")
        self.spec = spec
        self.grid = grid
        self.Mstar = spec.Mstar.array
        t, x = grid.t, grid.x
        self.dt = grid.dx
        self.e1 = spec.fields.eta1_fn(t[:, None], x[None, :])
        self.e2 = spec.fields.eta2_fn(t[:, None], x[None, :])
        half = 0.5 * self.dt
        # p moves (t_i, x_{j-1}) -> (t_{i+1}, x_j); q moves (t_i, x_{j+1}) -> (t_{i+1}, x_j)
        self.Ep = expm_batch(spec.Mstar, half * (self.e1[:-1, :-1] + self.e1[1:, 1:]))
        self.Eq = expm_batch(spec.Mstar, half * (self.e2[:-1, 1:] + self.e2[1:, :-1]))
        self.coupled = bool(np.any(self.e1 != 0.0) or np.any(self.e2 != 0.0))

    def sources(self, P: np.ndarray, Q: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Off-diagonal terms (M* eta2 q, M* eta1 p) over the whole history."""
        Sp = np.einsum("ab,ibjk->iajk", self.Mstar, self.e2[:, None, :, None] * Q)
        Sq = np.einsum("ab,ibjk->iajk", self.Mstar, self.e1[:, None, :, None] * P)
        return Sp, Sq

    def march(
        self,
        p0: np.ndarray,
        q0: np.ndarray,
        Sp: Optional[np.ndarray] = None,
        Sq: Optional[np.ndarray] = None,
    ) -> Tuple[np.ndarray, np.ndarray]:
        nt = self.grid.nt
        P = np.zeros((nt + 1,) + p0.shape)
        Q = np.zeros((nt + 1,) + q0.shape)
        P[0], Q[0] = p0, q0
        half = 0.5 * self.dt
        for i in range(nt):
            pn = np.einsum("jab,bjk->ajk", self.Ep[i], P[i][:, :-1])
            qn = np.einsum("jab,bjk->ajk", self.Eq[i], Q[i][:, 1:])
            if Sp is not None:
                pn += half * (np.einsum("jab,bjk->ajk", self.Ep[i], Sp[i][:, :-1]) + Sp[i + 1][:, 1:])
                qn += half * (np.einsum("jab,bjk->ajk", self.Eq[i], Sq[i][:, 1:]) + Sq[i + 1][:, :-1])
            P[i + 1][:, 1:] = pn
            Q[i + 1][:, :-1] = qn
            P[i + 1][:, 0] = -Q[i + 1][:, 0]
            Q[i + 1][:, -1] = -P[i + 1][:, -1]
        return P, Q

    def sup_h_norm(self, dP: np.ndarray, dQ: np.ndarray) -> float:
        sq = np.sum(dP ** 2 + dQ ** 2, axis=1)
        return float(np.sqrt(trapezoid(sq, self.grid.x, axis=1)).max(initial=0.0))

    def picard(
        self,
        p0: np.ndarray,
        q0: np.ndarray,
        tol: float,
        max_iterations: int,
        keep: Sequence[int] = (),
    ) -> Tuple[np.ndarray, np.ndarray, PicardHistory, Dict[int, Tuple[np.ndarray, np.ndarray]]]:
        """
        Iterate z^{m+1} = U_d z0 + int U_d P z^m until successive iterates are
        within ``tol`` in sup-over-t H norm.

        Raises:
            PicardDivergenceError: no convergence within max_iterations
        """
        history = PicardHistory()
        kept: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}
        P, Q = self.march(p0, q0)
        if 0 in keep:
            kept[0] = (P, Q)
        ratio = float("nan")
        for m in range(1, max_iterations + 1):
            Sp, Sq = self.sources(P, Q) if self.coupled else (None, None)
            P_new, Q_new = self.march(p0, q0, Sp, Sq)
            diff = self.sup_h_norm(P_new - P, Q_new - Q)
            if history.differences and history.differences[-1] > 0:
                ratio = diff / history.differences[-1]
                history.ratios.append(ratio)
            history.differences.append(diff)
            P, Q = P_new, Q_new
            if m in keep:
                kept[m] = (P, Q)
            logger.debug("Picard iterate", extra_fields={"iteration": m, "difference": diff})
            if not math.isfinite(diff):
                break
            if diff < tol:
                logger.info(
                    "Picard iteration converged",
                    extra_fields={"iterations": m, "difference": diff, "last_ratio": ratio},
                )
                return P, Q, history, kept
        raise PicardDivergenceError(
            last_ratio=ratio,
            iterations=history.iterations,
            last_difference=history.differences[-1] if history.differences else float("nan"),
        )


def _field_from_batch(grid: Grid, P: np.ndarray, Q: np.ndarray, column: int = 0) -> Field:
    rows = slice(None, None, grid.stride)
    return Field(t=grid.t_out, x=grid.x, p=P[rows, :, :, column].copy(), q=Q[rows, :, :, column].copy())


@log_duration(logger, "solve_full")
def solve_full(
    spec: SystemSpec,
    state: StateH,
    grid: Grid,
    picard_tol: float = 1e-10,
    max_iterations: int = 64,
    keep_iterates: Sequence[int] = (),
    mean_zero_tol: float = 1e-8,
) -> Field:
    """
    Full system from Z0 at time 0 by Picard iteration of the Duhamel formula.

    The returned Field carries the iterate history; iterates listed in
    ``keep_iterates`` (0 is the diagonal solution) are stored in it.
    """
    if grid.s != 0.0:
        raise GridError("the full system is solved from s = 0", reason="start")
    if grid.T > spec.T + EDGE_SLACK:
        raise GridError(f"grid horizon {grid.T} exceeds T = {spec.T}", reason="horizon")
    if picard_tol <= 0:
        raise ConfigValidationError("picard_tol must be positive", field_path="tolerances.picard_tol")
    state = state.projected(mean_zero_tol)
    p0 = _interp(state.x, state.p, grid.x).T[..., None]
    q0 = _interp(state.x, state.q, grid.x).T[..., None]
    marcher = CharacteristicMarcher(spec, grid)
    P, Q, history, kept = marcher.picard(p0, q0, picard_tol, max_iterations, keep_iterates)
    history.iterates = {m: _field_from_batch(grid, *pair) for m, pair in kept.items()}
    out = _field_from_batch(grid, P, Q)
    out.history = history
    return out


# =============================================================================
# Upwind oracle
# =============================================================================

@log_duration(logger, "fd_oracle")
def fd_oracle(
    spec: SystemSpec,
    state: StateH,
    grid: Grid,
    coupling: str = "full",
    cfl: float = 0.5,
    mean_zero_tol: float = 1e-8,
) -> Field:
    """
    First-order upwind scheme with explicit Euler in time.

    dt = dx / ceil(1/cfl) so output rows land on the grid times. Boundary rows
    are closed by reflection: p(t, 0) = -q(t, 0), q(t, 1) = -p(t, 1).

    Raises:
        CFLViolationError: cfl > 1
    """
    if coupling not in COUPLINGS:
        raise ConfigValidationError(f"coupling must be one of {COUPLINGS}, got {coupling!r}", field_path="coupling")
    if not cfl > 0 or cfl > 1.0:
        raise CFLViolationError(dt=cfl * grid.dx, dx=grid.dx)
    state = state.projected(mean_zero_tol)
    x = grid.x
    sub = int(math.ceil(1.0 / cfl - 1e-9))
    dt = grid.dx / sub
    lam = dt / grid.dx
    Ms = spec.Mstar.array
    eta1, eta2 = spec.fields.eta1_fn, spec.fields.eta2_fn
    full = coupling == "full"

    p = _interp(state.x, state.p, x).T
    q = _interp(state.x, state.q, x).T
    rows_p, rows_q = [p.copy()], [q.copy()]
    for i in range(grid.nt):
        for k in range(sub):
            tau = grid.s + i * grid.dx + k * dt
            e1, e2 = eta1(tau, x), eta2(tau, x)
            Sp = Ms @ (e1 * p)
            Sq = Ms @ (e2 * q)
            if full:
                Sp, Sq = Sp + Ms @ (e2 * q), Sq + Ms @ (e1 * p)
            pn, qn = p.copy(), q.copy()
            pn[:, 1:] = p[:, 1:] - lam * (p[:, 1:] - p[:, :-1]) + dt * Sp[:, 1:]
            qn[:, :-1] = q[:, :-1] + lam * (q[:, 1:] - q[:, :-1]) + dt * Sq[:, :-1]
            pn[:, 0] = -qn[:, 0]
            qn[:, -1] = -pn[:, -1]
            p, q = pn, qn
        if (i + 1) % grid.stride == 0:
            rows_p.append(p.copy())
            rows_q.append(q.copy())
    return Field(t=grid.t_out, x=x, p=np.array(rows_p), q=np.array(rows_q))


# =============================================================================
# Wave reconstruction and the compact difference operator
# =============================================================================

def reconstruct_wave(field: Field, tol: float = 1e-8) -> np.ndarray:
    """
    phi(t, x) = int_0^x (q - p)/2, shape (K, 2, N).

    Raises:
        MeanZeroViolationError: a time slice has int (q - p) beyond tol relative to its norm
    """
    defects = field.h_defect()
    norms = field.h_norms()
    bad = np.linalg.norm(defects, axis=1) > tol * np.maximum(norms, np.finfo(float).tiny)
    if np.any(bad):
        worst = int(np.argmax(np.linalg.norm(defects, axis=1)))
        raise MeanZeroViolationError(defect=defects[worst].tolist(), tolerance=tol)
    return cumulative_trapezoid(0.5 * (field.q - field.p), field.x, axis=-1, initial=0.0)


@dataclass
class DtMatrix:
    """Scaled matrix of Z0 -> B*(p - p_diag)(t, 0) and its singular values."""

    matrix: np.ndarray
    singular_values: np.ndarray
    t: np.ndarray
    x: np.ndarray

    def ratios(self, count: int = 20) -> np.ndarray:
        sv = self.singular_values
        if sv.size == 0 or sv[0] == 0.0:
            return np.zeros(min(count, sv.size))
        return sv[:count] / sv[0]


def trapezoid_weights(n: int, h: float) -> np.ndarray:
    """Composite trapezoid weights for n equispaced samples with spacing h."""
    weights = np.full(n, h)
    weights[0] = weights[-1] = 0.5 * h
    return weights


def checkerboard_filter(n: int) -> np.ndarray:
    """
    (n, n) averaging matrix with stencil (1/4, 1/2, 1/4), (1/2, 1/2) at the ends.

    Constants pass unchanged and the alternating vector (-1)^i is annihilated.
    With dt = dx a p- and a q-characteristic meet on a node only when their
    feet have equal parity, so nodal responses alternate with that parity.
    """
    smooth = np.zeros((n, n))
    smooth[0, :2] = 0.5
    smooth[-1, -2:] = 0.5
    for i in range(1, n - 1):
        smooth[i, i - 1:i + 2] = (0.25, 0.5, 0.25)
    return smooth


def _basis_columns(nx: int) -> np.ndarray:
    """
    Filtered nodal basis of (p, q), orthonormal in the trapezoid inner product
    before filtering, projected onto the mean-zero subspace. Shape (2, 2, N, 4N).
    """
    n = nx + 1
    weights = trapezoid_weights(n, 1.0 / nx)
    smooth = checkerboard_filter(n)
    basis = np.zeros((2, 2, n, 4 * n))
    column = 0
    for side in range(2):
        for comp in range(2):
            for j in range(n):
                profile = smooth[j] / math.sqrt(weights[j])
                basis[side, comp, :, column] = profile
                d = float(weights @ profile)
                if side == 1:
                    d = -d
                basis[0, comp, :, column] -= 0.5 * d
                basis[1, comp, :, column] += 0.5 * d
                column += 1
    return basis


@log_duration(logger, "dt_matrix")
def dt_matrix(
    spec: SystemSpec,
    nx: int,
    picard_tol: float = 1e-10,
    max_iterations: int = 64,
    batch_size: int = 32,
    workers: int = 1,
) -> DtMatrix:
    """
    Columns are B*(p - p_diag)(t, 0) for the projected basis of H.

    Both the data and the trace pass through checkerboard_filter; rows carry
    square roots of the trapezoid weights in t so that singular values
    approximate those of the operator from H to L2(0, T).
    """
    grid = Grid(nx=nx, T=spec.T)
    marcher = CharacteristicMarcher(spec, grid)
    basis = _basis_columns(nx)
    total = basis.shape[-1]
    B = spec.B.array

    def build(start: int) -> np.ndarray:
        chunk = basis[..., start:start + batch_size]
        P, _, _, kept = marcher.picard(chunk[0], chunk[1], picard_tol, max_iterations, keep=(0,))
        diff = P[:, :, 0, :] - kept[0][0][:, :, 0, :]
        return np.einsum("a,iak->ik", B, diff)

    starts = range(0, total, batch_size)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            blocks = list(pool.map(build, starts))
    else:
        blocks = [build(start) for start in starts]
    rows = grid.t.size
    row_weights = np.sqrt(trapezoid_weights(rows, grid.dx))  # dt = dx
    matrix = row_weights[:, None] * (checkerboard_filter(rows) @ np.concatenate(blocks, axis=1))
    sv = np.linalg.svd(matrix, compute_uv=False)
    logger.info(
        "Difference operator assembled",
        extra_fields={"shape": list(matrix.shape), "sigma_1": float(sv[0]) if sv.size else 0.0},
    )
    return DtMatrix(matrix=matrix, singular_values=sv, t=grid.t, x=grid.x)
