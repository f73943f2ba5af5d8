"""
Weak observability of the diagonal system at a horizon T.

Two routes decide the same question:

- the phi-condition chain: at every sampled x some index k makes
  phi(2k - x) or phi(x + 2k) nondegenerate for the spectrum of M*
- the minor route: the observation stacks P(x), Q(x) keep a nonsingular
  2x2 minor at every sampled x

For T < 4 the answer is always negative and witness_T_lt_4 builds an
explicit unit-norm datum whose trace vanishes.
"""

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import scipy.linalg
from scipy.integrate import trapezoid

from .core.exceptions import ConfigValidationError, WitnessConstructionError
from .core.logging_config import get_logger, log_duration
from .core.settings import Tolerances
from .smallmat import ComplexPair, SpectralClass, classify, expm_batch, kalman_rank, phi_margin
from .solver import EDGE_SLACK, StateH, SystemSpec, trace_diag

logger = get_logger(__name__)

# decisive margins must clear the tolerance by this factor
BAND_FACTOR = 10.0

STACK_KINDS = ("P", "Q")
WITNESS_PROFILES = ("oscillatory", "indicator")
PROFILE_COUNT = 4


class Verdict(str, Enum):
    WEAKLY_OBSERVABLE = "WeaklyObservable"
    NOT_OBSERVABLE = "NotObservable"
    INCONCLUSIVE = "Inconclusive"


def horizon_class(T: float) -> Tuple[int, str]:
    """(n, parity) with 2n <= T < 2n + 1 ("even") or 2n + 1 <= T < 2n + 2 ("odd")."""
    n = int(math.floor(T / 2.0 + EDGE_SLACK))
    parity = "odd" if T - 2.0 * n >= 1.0 - EDGE_SLACK else "even"
    return n, parity


def _at_horizon(spec: SystemSpec, T: Optional[float]) -> SystemSpec:
    if T is None or abs(T - spec.T) <= EDGE_SLACK:
        return spec
    return spec.with_horizon(T)


def _band(margins: np.ndarray, tau: float) -> np.ndarray:
    """+1 decisive pass, 0 inside the band, -1 decisive failure."""
    status = np.zeros(margins.shape, dtype=int)
    status[margins > BAND_FACTOR * tau] = 1
    status[margins <= tau] = -1
    return status


# =============================================================================
# Observation stacks
# =============================================================================

@dataclass(frozen=True)
class StackMatrix:
    """
    Rows B* e^{f M*} of an observation stack sampled on an x-grid.

    rows has shape (N, m, 2); rows switched off by their indicator are
    exactly zero there and mask records where each row is active.
    """

    kind: str
    x: np.ndarray
    rows: np.ndarray
    mask: np.ndarray
    exponents: np.ndarray
    T: float = float("nan")

    @classmethod
    def from_rows(cls, x, rows) -> "StackMatrix":
        x = np.asarray(x, dtype=float)
        rows = np.asarray(rows, dtype=float)
        if rows.ndim != 3 or rows.shape[0] != x.size or rows.shape[2] != 2:
            raise ValueError(f"rows must have shape ({x.size}, m, 2), got {rows.shape}")
        mask = np.ones(rows.shape[:2], dtype=bool)
        return cls(kind="custom", x=x, rows=rows, mask=mask, exponents=np.full(rows.shape[:2], np.nan))

    @property
    def m(self) -> int:
        return self.rows.shape[1]

    def at(self, index: int) -> np.ndarray:
        return self.rows[index]


def _stack_layout(kind: str, T: float) -> List[Tuple[int, Optional[Tuple[float, float, bool]]]]:
    """(k, mask) per row; mask is (lo, hi, closed_hi) or None for a full row."""
    n, parity = horizon_class(T)
    layout: List[Tuple[int, Optional[Tuple[float, float, bool]]]] = [(k, None) for k in range(n)]
    if kind == "P" and parity == "odd":
        layout.append((n, (2.0 * n + 2.0 - T, 1.0, True)))
    elif kind == "Q":
        if parity == "even":
            layout.append((n, (0.0, T - 2.0 * n, False)))
        else:
            layout.append((n, None))
    return layout


def build_stack(spec: SystemSpec, T: Optional[float], kind: str, x) -> StackMatrix:
    """
    Observation stack of the trace energy at horizon T.

    P rows read p0 through e^{f_k(2k + 2 - x) M*}, Q rows read q0 through
    e^{f_k(x + 2k) M*}. The last row of P (odd horizons) and of Q (even
    horizons) is cut to the part of [0, 1] its strip actually reaches.
    """
    if kind not in STACK_KINDS:
        raise ConfigValidationError(f"Unknown stack kind '{kind}'", field_path="kind")
    spec = _at_horizon(spec, T)
    T = spec.T
    x = np.asarray(x, dtype=float)
    layout = _stack_layout(kind, T)

    rows = np.zeros((x.size, len(layout), 2))
    mask = np.zeros((x.size, len(layout)), dtype=bool)
    exponents = np.zeros((x.size, len(layout)))
    B = spec.B.array
    for column, (k, window) in enumerate(layout):
        times = 2.0 * k + 2.0 - x if kind == "P" else x + 2.0 * k
        if window is None:
            active = np.ones(x.size, dtype=bool)
        else:
            lo, hi, closed = window
            active = (x >= lo - EDGE_SLACK) & ((x <= hi + EDGE_SLACK) if closed else (x < hi - EDGE_SLACK))
        values, _ = spec.table.f_n_many(k, times[active])
        exponents[active, column] = values
        rows[active, column] = np.einsum("i,nij->nj", B, expm_batch(spec.Mstar, values))
        mask[:, column] = active
    return StackMatrix(kind=kind, x=x, rows=rows, mask=mask, exponents=exponents, T=T)


# =============================================================================
# Minor route
# =============================================================================

@dataclass(frozen=True)
class MinorResult:
    passes: bool
    best: np.ndarray
    pairs: np.ndarray

    def worst(self) -> Tuple[int, float]:
        index = int(np.argmin(self.best))
        return index, float(self.best[index])


def _best_minors(stack: StackMatrix) -> Tuple[np.ndarray, np.ndarray]:
    """Largest normalized |det| over row pairs, per x, and the maximizing pair."""
    N, m = stack.rows.shape[:2]
    best = np.zeros(N)
    pairs = np.full((N, 2), -1, dtype=int)
    norms = np.linalg.norm(stack.rows, axis=2)
    for i in range(m):
        for j in range(i + 1, m):
            ri, rj = stack.rows[:, i], stack.rows[:, j]
            det = np.abs(ri[:, 0] * rj[:, 1] - ri[:, 1] * rj[:, 0])
            scale = norms[:, i] * norms[:, j]
            ratio = np.divide(det, scale, out=np.zeros(N), where=scale > 0)
            better = ratio > best
            best[better] = ratio[better]
            pairs[better] = (i, j)
    return best, pairs


def minor_criterion(stack: StackMatrix, tau_minor: float = 1e-9) -> MinorResult:
    """
    True iff every sampled x has a 2x2 minor with |det| above tau_minor times
    the product of its row norms. Stacks with fewer than two rows fail
    everywhere and report no pair.
    """
    best, pairs = _best_minors(stack)
    return MinorResult(passes=bool(np.all(best > tau_minor)), best=best, pairs=pairs)


# =============================================================================
# Certificates
# =============================================================================

@dataclass
class Witness:
    """Unit-norm datum in H whose diagonal trace vanishes on (0, T)."""

    state: StateH
    T: float
    profile: str
    residual: float
    support: Dict[str, Tuple[float, float]]

    def to_dict(self) -> dict:
        return {
            "T": self.T,
            "profile": self.profile,
            "residual": self.residual,
            "h_norm": self.state.h_norm,
            "support": {key: list(value) for key, value in self.support.items()},
        }

    def rows(self):
        x = self.state.x
        for j in range(x.size):
            yield (
                float(x[j]),
                float(self.state.p[0, j]),
                float(self.state.p[1, j]),
                float(self.state.q[0, j]),
                float(self.state.q[1, j]),
            )


@dataclass
class ObsCertificate:
    verdict: Verdict
    T: float
    parity: str
    n: int
    route: str
    grid: Dict[str, Any]
    kalman_rank: int
    spectral: Dict[str, Any]
    margins: Dict[str, float] = field(default_factory=dict)
    k_maps: Dict[str, List[Optional[int]]] = field(default_factory=dict)
    failure: Optional[Dict[str, Any]] = None
    witness: Optional[Witness] = None
    explanation: str = ""
    tolerances: Dict[str, float] = field(default_factory=dict)

    @property
    def observable(self) -> bool:
        return self.verdict == Verdict.WEAKLY_OBSERVABLE

    def to_dict(self, include_maps: bool = False) -> dict:
        data = {
            "verdict": self.verdict.value,
            "T": self.T,
            "parity": self.parity,
            "n": self.n,
            "route": self.route,
            "grid": self.grid,
            "kalman_rank": self.kalman_rank,
            "spectral": self.spectral,
            "margins": self.margins,
            "failure": self.failure,
            "explanation": self.explanation,
            "tolerances": self.tolerances,
        }
        if include_maps:
            data["k_maps"] = self.k_maps
        if self.witness is not None:
            data["witness"] = self.witness.to_dict()
        return data


def _certificate(
    T: float,
    route: str,
    nodes: int,
    spectral: SpectralClass,
    rank: int,
    tolerances: Tolerances,
    **kwargs,
) -> ObsCertificate:
    n, parity = horizon_class(T)
    return ObsCertificate(
        T=T,
        parity=parity,
        n=n,
        route=route,
        grid={"x_nodes": nodes},
        kalman_rank=rank,
        spectral=spectral.to_dict(),
        tolerances=tolerances.model_dump(),
        **kwargs,
    )


def _degenerate_set(spectral: SpectralClass) -> str:
    if isinstance(spectral, ComplexPair):
        return f"phi must avoid (pi/{spectral.im:.6g})Z"
    return "phi must be nonzero"


def _log_verdict(cert: ObsCertificate) -> ObsCertificate:
    logger.info(
        "Verdict reached",
        extra_fields={"verdict": cert.verdict.value, "T": cert.T, "route": cert.route},
    )
    return cert


# =============================================================================
# Phi-condition route
# =============================================================================

@dataclass(frozen=True)
class _Condition:
    """Indices k tried at the x in [lo, hi) (or [lo, hi] when closed)."""

    stack: str
    lo: float
    hi: float
    closed: bool
    ks: Tuple[int, ...]

    def times(self, k: int, x: np.ndarray) -> np.ndarray:
        return 2.0 * k - x if self.stack == "P" else x + 2.0 * k

    def covers(self, x: np.ndarray) -> np.ndarray:
        upper = x <= self.hi + EDGE_SLACK if self.closed else x < self.hi - EDGE_SLACK
        return (x >= self.lo - EDGE_SLACK) & upper


def _conditions(T: float) -> List[_Condition]:
    """Regions of x and admissible k for T >= 4, both parities."""
    n, parity = horizon_class(T)
    if parity == "even":
        cut = T - 2.0 * n
        return [
            _Condition("P", 0.0, 1.0, True, tuple(range(2, n + 1))),
            _Condition("Q", 0.0, cut, False, tuple(range(1, n + 1))),
            _Condition("Q", cut, 1.0, True, tuple(range(1, n))),
        ]
    cut = 2.0 * n + 2.0 - T
    return [
        _Condition("P", cut, 1.0, True, tuple(range(2, n + 2))),
        _Condition("P", 0.0, cut, False, tuple(range(2, n + 1))),
        _Condition("Q", 0.0, 1.0, True, tuple(range(1, n + 1))),
    ]


def _scan_condition(
    spec: SystemSpec, spectral: SpectralClass, cond: _Condition, x: np.ndarray, tau_phi: float
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per x: first decisive k (or -1), banded status, best margin."""
    k_found = np.full(x.size, -1, dtype=int)
    best = np.zeros(x.size)
    for k in cond.ks:
        values, _ = spec.table.phi_many(cond.times(k, x))
        margins = np.array([phi_margin(spectral, v) for v in values])
        newly = (k_found < 0) & (margins > BAND_FACTOR * tau_phi)
        k_found[newly] = k
        best = np.maximum(best, margins)
    return k_found, _band(best, tau_phi), best


def _spectral_and_rank(spec: SystemSpec, tolerances: Tolerances) -> Tuple[SpectralClass, int]:
    return classify(spec.Mstar, tolerances.tau_eig), kalman_rank(spec.M, spec.B, tolerances.tau_rank)


def _rank_failure(cert_kwargs: dict, rank: int) -> dict:
    cert_kwargs.update(
        verdict=Verdict.NOT_OBSERVABLE,
        failure={"condition": "rank[B | MB] = 2", "kalman_rank": rank},
        explanation="B lies in an invariant line of M, so no horizon observes the system",
    )
    return cert_kwargs


@log_duration(logger, "check_T4")
def check_T4(spec: SystemSpec, x_nodes: int = 512, tolerances: Optional[Tolerances] = None) -> ObsCertificate:
    """
    Horizon T = 4: observable iff rank[B | MB] = 2 and phi(t) stays away from
    the degenerate set of M* for every sampled t in [2, 4].
    """
    tolerances = tolerances or Tolerances()
    spec = _at_horizon(spec, 4.0)
    spectral, rank = _spectral_and_rank(spec, tolerances)
    kwargs: Dict[str, Any] = {}
    if rank < 2:
        return _log_verdict(_certificate(4.0, "phi", x_nodes, spectral, rank, tolerances, **_rank_failure(kwargs, rank)))

    ts = np.linspace(2.0, 4.0, 2 * x_nodes + 1)
    values, _ = spec.table.phi_many(ts)
    margins = np.array([phi_margin(spectral, v) for v in values])
    status = _band(margins, tolerances.tau_phi)
    worst = int(np.argmin(margins))
    kwargs["margins"] = {"phi": float(margins[worst])}

    if np.any(status < 0):
        first = int(np.argmax(status < 0))
        kwargs.update(
            verdict=Verdict.NOT_OBSERVABLE,
            failure={"t": float(ts[first]), "phi": float(values[first]), "condition": _degenerate_set(spectral)},
            explanation=f"phi({ts[first]:.6g}) is degenerate",
        )
    elif np.any(status == 0):
        kwargs.update(
            verdict=Verdict.INCONCLUSIVE,
            failure={"t": float(ts[worst]), "phi": float(values[worst]), "condition": _degenerate_set(spectral)},
            explanation="smallest phi margin lies inside the tolerance band",
        )
    else:
        kwargs.update(verdict=Verdict.WEAKLY_OBSERVABLE, explanation="phi is nondegenerate on [2, 4]")

    if spectral.tolerance_sensitive and kwargs["verdict"] != Verdict.INCONCLUSIVE:
        kwargs.update(
            verdict=Verdict.INCONCLUSIVE,
            explanation=f"spectral class {spectral.tag} of M* is tolerance-sensitive",
        )
    return _log_verdict(_certificate(4.0, "phi", x_nodes, spectral, rank, tolerances, **kwargs))


@log_duration(logger, "check_weak_observability")
def check_weak_observability(
    spec: SystemSpec,
    T: Optional[float] = None,
    x_nodes: int = 512,
    tolerances: Optional[Tolerances] = None,
    witness_profile: str = "oscillatory",
) -> ObsCertificate:
    """
    Weak observability verdict at horizon T (defaults to spec.T).

    T < 4 is never observable and the certificate carries a witness. T = 4 is
    check_T4. Otherwise every sampled x in each region must find an index k
    in the region's range with a decisive phi margin; the first such k per x
    is recorded in k_maps.
    """
    tolerances = tolerances or Tolerances()
    T = spec.T if T is None else float(T)
    if not T > 0:
        raise ConfigValidationError(f"T must be positive, got {T}", field_path="T")
    spec = _at_horizon(spec, T)

    if T < 4.0 - EDGE_SLACK:
        spectral, rank = _spectral_and_rank(spec, tolerances)
        witness = witness_T_lt_4(spec, T, nx=x_nodes, profile=witness_profile, tau_rank=tolerances.tau_rank)
        cert = _certificate(
            T, "phi", x_nodes, spectral, rank, tolerances,
            verdict=Verdict.NOT_OBSERVABLE,
            witness=witness,
            failure={"condition": "T >= 4", "T": T},
            explanation="horizons below 4 leave an infinite-dimensional unobserved subspace",
        )
        return _log_verdict(cert)
    if abs(T - 4.0) <= EDGE_SLACK:
        return check_T4(spec, x_nodes, tolerances)

    spectral, rank = _spectral_and_rank(spec, tolerances)
    kwargs: Dict[str, Any] = {}
    if rank < 2:
        return _log_verdict(_certificate(T, "phi", x_nodes, spectral, rank, tolerances, **_rank_failure(kwargs, rank)))

    x = np.linspace(0.0, 1.0, x_nodes + 1)
    k_maps = {kind: [None] * x.size for kind in STACK_KINDS}
    margins = {kind: math.inf for kind in STACK_KINDS}
    failure = None
    inconclusive = None
    for cond in _conditions(T):
        covered = cond.covers(x)
        if not covered.any():
            continue
        xs = x[covered]
        if not cond.ks:
            status, best, found = -np.ones(xs.size, dtype=int), np.zeros(xs.size), -np.ones(xs.size, dtype=int)
        else:
            found, status, best = _scan_condition(spec, spectral, cond, xs, tolerances.tau_phi)
        for j, index in enumerate(np.flatnonzero(covered)):
            if found[j] >= 0:
                k_maps[cond.stack][index] = int(found[j])
        margins[cond.stack] = min(margins[cond.stack], float(best.min()))
        description = {
            "stack": cond.stack,
            "region": [cond.lo, cond.hi],
            "k_range": list(cond.ks),
            "condition": _degenerate_set(spectral),
        }
        if failure is None and np.any(status < 0):
            failure = {**description, "x": float(xs[int(np.argmax(status < 0))])}
        if inconclusive is None and np.any(status == 0):
            inconclusive = {**description, "x": float(xs[int(np.argmax(status == 0))])}

    kwargs.update(k_maps=k_maps, margins=margins)
    if failure is not None:
        kwargs.update(
            verdict=Verdict.NOT_OBSERVABLE,
            failure=failure,
            explanation=f"no admissible k for the {failure['stack']} stack at x = {failure['x']:.6g}",
        )
    elif inconclusive is not None:
        kwargs.update(
            verdict=Verdict.INCONCLUSIVE,
            failure=inconclusive,
            explanation="best phi margin lies inside the tolerance band",
        )
    else:
        kwargs.update(verdict=Verdict.WEAKLY_OBSERVABLE, explanation="every sampled x has a nondegenerate index")

    if spectral.tolerance_sensitive and kwargs["verdict"] != Verdict.INCONCLUSIVE:
        kwargs.update(
            verdict=Verdict.INCONCLUSIVE,
            explanation=f"spectral class {spectral.tag} of M* is tolerance-sensitive",
        )
    return _log_verdict(_certificate(T, "phi", x_nodes, spectral, rank, tolerances, **kwargs))


@log_duration(logger, "stack_minor_verdict")
def stack_minor_verdict(
    spec: SystemSpec,
    T: Optional[float] = None,
    x_nodes: int = 512,
    tolerances: Optional[Tolerances] = None,
) -> ObsCertificate:
    """Same question answered by the minor criterion on both stacks."""
    tolerances = tolerances or Tolerances()
    spec = _at_horizon(spec, T)
    T = spec.T
    spectral, rank = _spectral_and_rank(spec, tolerances)
    x = np.linspace(0.0, 1.0, x_nodes + 1)

    margins: Dict[str, float] = {}
    failure = None
    inconclusive = None
    for kind in STACK_KINDS:
        best, _ = _best_minors(build_stack(spec, T, kind, x))
        status = _band(best, tolerances.tau_minor)
        margins[kind] = float(best.min())
        if failure is None and np.any(status < 0):
            failure = {"stack": kind, "x": float(x[int(np.argmax(status < 0))]), "condition": "nonsingular 2x2 minor"}
        if inconclusive is None and np.any(status == 0):
            inconclusive = {"stack": kind, "x": float(x[int(np.argmax(status == 0))]), "condition": "nonsingular 2x2 minor"}

    if failure is not None:
        verdict, explanation = Verdict.NOT_OBSERVABLE, f"{failure['stack']} stack loses rank at x = {failure['x']:.6g}"
    elif inconclusive is not None:
        verdict, explanation, failure = Verdict.INCONCLUSIVE, "best minor lies inside the tolerance band", inconclusive
    else:
        verdict, explanation = Verdict.WEAKLY_OBSERVABLE, "both stacks keep a nonsingular minor"
    cert = _certificate(
        T, "minor", x_nodes, spectral, rank, tolerances,
        verdict=verdict, margins=margins, failure=failure, explanation=explanation,
    )
    return _log_verdict(cert)


# =============================================================================
# Discrete observability constant
# =============================================================================

@dataclass(frozen=True)
class ObservabilityConstant:
    sigma_min: float
    nx: int
    T: float

    @property
    def constant(self) -> float:
        """C_T of ||Z0||^2 <= C_T ||B*p(., 0)||^2 on the grid."""
        return math.inf if self.sigma_min <= 0 else self.sigma_min ** -2

    def to_dict(self) -> dict:
        return {"sigma_min": self.sigma_min, "constant": self.constant, "nx": self.nx, "T": self.T}


@log_duration(logger, "svd_observability_constant")
def svd_observability_constant(spec: SystemSpec, T: Optional[float] = None, nx: int = 256) -> ObservabilityConstant:
    """
    Smallest singular value of Z0 -> B*p(., 0) on discrete H.

    The trace energy splits into per-x quadratic forms through the P and Q
    stacks, so the operator is block diagonal in x; the mean-zero constraint
    of H is removed with an orthonormal null-space basis.
    """
    spec = _at_horizon(spec, T)
    T = spec.T
    x = np.linspace(0.0, 1.0, nx + 1)
    N = x.size
    P = build_stack(spec, T, "P", x).rows
    Q = build_stack(spec, T, "Q", x).rows
    mP, mQ = P.shape[1], Q.shape[1]

    # columns ordered (part, component, node); trapezoid weights cancel within a node
    A = np.zeros((N * (mP + mQ), 4 * N))
    nodes = np.arange(N)
    for part, stack, offset in ((0, P, 0), (1, Q, mP)):
        for r in range(stack.shape[1]):
            row_index = nodes * (mP + mQ) + offset + r
            for comp in range(2):
                A[row_index, part * 2 * N + comp * N + nodes] = stack[:, r, comp]

    root = np.sqrt(np.full(N, 1.0 / nx) * np.where((nodes == 0) | (nodes == N - 1), 0.5, 1.0))
    C = np.zeros((2, 4 * N))
    for comp in range(2):
        C[comp, comp * N + nodes] = root
        C[comp, 2 * N + comp * N + nodes] = -root
    basis = scipy.linalg.null_space(C)
    sigma = scipy.linalg.svdvals(A @ basis)
    result = ObservabilityConstant(sigma_min=float(sigma.min()), nx=nx, T=T)
    logger.info("Observation operator assembled", extra_fields=result.to_dict())
    return result


# =============================================================================
# Witnesses below T = 4
# =============================================================================

def _invisible_directions(stack: StackMatrix, default: np.ndarray, tau_rank: float) -> np.ndarray:
    """
    Unit vector per x annihilated by every active row, or zero where the
    active rows already span the plane.
    """
    directions = np.zeros((stack.x.size, 2))
    for j in range(stack.x.size):
        rows = stack.rows[j][stack.mask[j]]
        norms = np.linalg.norm(rows, axis=1) if rows.size else np.zeros(0)
        live = rows[norms > 0]
        if live.shape[0] == 0:
            directions[j] = default
            continue
        lead = live[int(np.argmax(np.linalg.norm(live, axis=1)))]
        lead = lead / np.linalg.norm(lead)
        normal = np.array([lead[1], -lead[0]])
        if np.all(np.abs(live @ normal) <= tau_rank * np.linalg.norm(live, axis=1)):
            directions[j] = normal
    return directions


def _profiles(x: np.ndarray, profile: str) -> np.ndarray:
    if profile == "oscillatory":
        base = max(1, (x.size - 1) // 8)
        return np.array([np.sin(2.0 * math.pi * (base + i) * x) for i in range(PROFILE_COUNT)])
    cells = np.minimum(np.floor(PROFILE_COUNT * x + EDGE_SLACK), PROFILE_COUNT - 1)
    return np.array([(cells == i).astype(float) for i in range(PROFILE_COUNT)])


def _node_aligned_times(x: np.ndarray, T: float) -> np.ndarray:
    """Trace times whose characteristic feet land on grid nodes."""
    times = []
    k = 0
    while 2.0 * k < T:
        times.append(x + 2.0 * k)
        times.append(2.0 * k + 2.0 - x)
        k += 1
    ts = np.unique(np.concatenate(times))
    return ts[ts < T - EDGE_SLACK]


def _support(x: np.ndarray, values: np.ndarray) -> Tuple[float, float]:
    live = np.flatnonzero(np.linalg.norm(values, axis=0) > 0)
    if live.size == 0:
        return (math.nan, math.nan)
    return (float(x[live[0]]), float(x[live[-1]]))


@log_duration(logger, "witness_T_lt_4")
def witness_T_lt_4(
    spec: SystemSpec,
    T: Optional[float] = None,
    nx: int = 256,
    profile: str = "oscillatory",
    tau_rank: float = 1e-9,
) -> Witness:
    """
    Unit-norm (p0, q0) in H whose diagonal trace B*p(t, 0) vanishes on (0, T).

    At each node the datum points along the direction annihilated by every
    active row of the P or Q stack and vanishes where the rows span the
    plane. A combination of a few profiles times these directions is chosen
    so that the mean of p0 - q0 is zero; oscillatory profiles oscillate at a
    frequency tied to the grid, indicator profiles are constant on quarters.
    """
    if profile not in WITNESS_PROFILES:
        raise ConfigValidationError(f"Unknown witness profile '{profile}'", field_path="profile")
    spec = _at_horizon(spec, T)
    T = spec.T
    if T >= 4.0 - EDGE_SLACK:
        raise ConfigValidationError(f"witnesses exist only below T = 4, got {T}", field_path="T")
    if spec.B.norm == 0:
        raise WitnessConstructionError("observation vector B is zero")

    x = np.linspace(0.0, 1.0, nx + 1)
    B = spec.B.array / spec.B.norm
    default = np.array([B[1], -B[0]])
    dirs = {
        kind: _invisible_directions(build_stack(spec, T, kind, x), default, tau_rank) for kind in STACK_KINDS
    }
    shapes = _profiles(x, profile)

    # candidate states: profile * direction, for the p part then the q part
    candidates = []
    for kind in STACK_KINDS:
        for g in shapes:
            part = (g * dirs[kind].T)
            zero = np.zeros_like(part)
            candidates.append((part, zero) if kind == "P" else (zero, part))
    D = np.array([trapezoid(p - q, x, axis=1) for p, q in candidates]).T

    trials = [np.ones(len(candidates))] + list(np.eye(len(candidates)))
    state = None
    for coefficients in trials:
        coefficients = coefficients - np.linalg.pinv(D) @ (D @ coefficients)
        p0 = sum(c * p for c, (p, _) in zip(coefficients, candidates))
        q0 = sum(c * q for c, (_, q) in zip(coefficients, candidates))
        candidate = StateH(x=x, p=p0, q=q0)
        if candidate.h_norm > 1e-8:
            scale = 1.0 / candidate.h_norm
            state = StateH(x=x, p=p0 * scale, q=q0 * scale)
            break
    if state is None:
        raise WitnessConstructionError("every candidate profile lies in the span of the mean constraint")

    ts = _node_aligned_times(x, T)
    trace = trace_diag(spec, state, 0.0, ts)
    residual = float(np.max(np.abs(trace.values))) if ts.size else 0.0
    witness = Witness(
        state=state,
        T=T,
        profile=profile,
        residual=residual,
        support={"p": _support(x, state.p), "q": _support(x, state.q)},
    )
    logger.info("Witness constructed", extra_fields=witness.to_dict())
    return witness
