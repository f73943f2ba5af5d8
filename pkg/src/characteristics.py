"""
Coefficient fields and line integrals along reflected characteristics.

phi(t, s) integrates eta1 along the slope +1 leg and eta2 along the slope -1
leg of the broken characteristic ending at (t, 0):

    phi(t, s) = int_{max(s,t-2)}^{max(s,t-1)} eta1(tau, tau - t + 2) dtau
              + int_{max(s,t-1)}^{t}          eta2(tau, t - tau)     dtau

and phi(t, s) = 0 for t <= s. f_n(t, s) = sum_{k=0..n} phi(t - 2k, s).
"""

import heapq
import threading
from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .core.exceptions import OutOfDomainError, QuadratureError
from .core.logging_config import get_logger
from .expr import Expr, Mul, Num, Sub, Var, Add, compile_expr, depends_on, number, parse, substitute

logger = get_logger(__name__)

# slack for positions computed in floating point
POSITION_SLACK = 1e-12

# cache keys quantize arguments to this resolution
KEY_RESOLUTION = 1e-12


# =============================================================================
# Quadrature
# =============================================================================

@lru_cache(maxsize=16)
def _reference_rule(order: int) -> Tuple[np.ndarray, np.ndarray]:
    return np.polynomial.legendre.leggauss(order)


def gauss_legendre_nodes(order: int, lo: float, hi: float) -> Tuple[np.ndarray, np.ndarray]:
    """Nodes and weights of the order-point Gauss-Legendre rule on [lo, hi]."""
    x, w = _reference_rule(order)
    half = 0.5 * (hi - lo)
    return 0.5 * (hi + lo) + half * x, half * w


def composite_gauss_legendre(lo: float, hi: float, panels: int, order: int = 8) -> Tuple[np.ndarray, np.ndarray]:
    """Nodes and weights of a composite rule with equal panels."""
    edges = np.linspace(lo, hi, panels + 1)
    nodes, weights = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        x, w = gauss_legendre_nodes(order, a, b)
        nodes.append(x)
        weights.append(w)
    return np.concatenate(nodes), np.concatenate(weights)


def adaptive_gauss_legendre(
    f: Callable[[np.ndarray], np.ndarray],
    lo: float,
    hi: float,
    tol: float = 1e-12,
    max_depth: int = 30,
    order: int = 8,
) -> Tuple[float, float]:
    """
    Globally adaptive composite Gauss-Legendre quadrature.

    Each panel is compared against its two halves; the panel with the largest
    error estimate is bisected until the summed estimate is below ``tol``.

    Args:
        f: vectorized integrand
        lo, hi: interval, lo <= hi
        tol: absolute tolerance on the summed error estimate
        max_depth: maximum number of bisections of any panel

    Returns:
        (value, error_bound)

    Raises:
        QuadratureError: when a panel would exceed max_depth
    """
    if hi <= lo:
        return 0.0, 0.0

    def rule(a: float, b: float) -> float:
        x, w = gauss_legendre_nodes(order, a, b)
        return float(np.dot(w, f(x)))

    def panel(a: float, b: float, depth: int):
        mid = 0.5 * (a + b)
        coarse = rule(a, b)
        fine = rule(a, mid) + rule(mid, b)
        return (-abs(coarse - fine), a, b, depth, fine)

    heap = [panel(lo, hi, 0)]
    total_err = -heap[0][0]
    total = heap[0][4]
    refinements = 0

    eps = np.finfo(float).eps
    while total_err > max(tol, 64 * eps * abs(total)):
        neg_err, a, b, depth, fine = heapq.heappop(heap)
        if depth >= max_depth:
            heapq.heappush(heap, (neg_err, a, b, depth, fine))
            raise QuadratureError(achieved_bound=total_err, tol=tol, interval=(lo, hi))
        mid = 0.5 * (a + b)
        left = panel(a, mid, depth + 1)
        right = panel(mid, b, depth + 1)
        heapq.heappush(heap, left)
        heapq.heappush(heap, right)
        total += left[4] + right[4] - fine
        total_err += neg_err - left[0] - right[0]
        refinements += 1

    if refinements:
        # recompute the sum to shed accumulated update rounding
        total = float(sum(item[4] for item in heap))
        logger.debug(
            "Adaptive quadrature refined",
            extra_fields={"panels": len(heap), "error": total_err, "interval": [lo, hi]},
        )
    return total, max(total_err, 0.0)


# =============================================================================
# Coefficient fields
# =============================================================================

def _half(e: Expr) -> Expr:
    return Mul(Num(0.5), e)


def _time_reversed(e: Expr, T: float) -> Expr:
    return substitute(e, "t", Sub(number(T), Var("t")))


@dataclass(frozen=True)
class CoeffFields:
    """
    Raw coupling coefficients and their derived fields at horizon T.

        alpha1 = (a - b)/2, alpha2 = (a + b)/2
        eta1(t, x) = alpha2(T - t, x), eta2(t, x) = alpha1(T - t, x)
    """

    a: Expr
    b: Expr
    alpha1: Expr
    alpha2: Expr
    eta1: Expr
    eta2: Expr
    T: float

    @classmethod
    def from_coefficients(cls, a, b, T: float) -> "CoeffFields":
        a = parse(a) if isinstance(a, str) else a
        b = parse(b) if isinstance(b, str) else b
        alpha1 = _half(Sub(a, b))
        alpha2 = _half(Add(a, b))
        return cls(
            a=a,
            b=b,
            alpha1=alpha1,
            alpha2=alpha2,
            eta1=_time_reversed(alpha2, T),
            eta2=_time_reversed(alpha1, T),
            T=float(T),
        )

    @classmethod
    def from_eta(cls, eta1, eta2, T: float) -> "CoeffFields":
        """Fields with prescribed time-reversed eta1, eta2."""
        eta1 = parse(eta1) if isinstance(eta1, str) else eta1
        eta2 = parse(eta2) if isinstance(eta2, str) else eta2
        alpha2 = _time_reversed(eta1, T)
        alpha1 = _time_reversed(eta2, T)
        return cls(
            a=Add(alpha2, alpha1),
            b=Sub(alpha2, alpha1),
            alpha1=alpha1,
            alpha2=alpha2,
            eta1=eta1,
            eta2=eta2,
            T=float(T),
        )

    @property
    def is_autonomous(self) -> bool:
        return not (depends_on(self.eta1, "t") or depends_on(self.eta2, "t"))

    @cached_property
    def eta1_fn(self) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
        return compile_expr(self.eta1)

    @cached_property
    def eta2_fn(self) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
        return compile_expr(self.eta2)

    @cached_property
    def a_fn(self) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
        return compile_expr(self.a)

    @cached_property
    def b_fn(self) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
        return compile_expr(self.b)

    def to_dict(self) -> dict:
        return {
            "a": str(self.a),
            "b": str(self.b),
            "eta1": str(self.eta1),
            "eta2": str(self.eta2),
            "T": self.T,
        }


# =============================================================================
# Broken characteristics
# =============================================================================

@dataclass(frozen=True)
class GammaPath:
    """Breakpoints (time, position) of the reflected characteristic ending at (t, 0)."""

    t: float
    breakpoints: Tuple[Tuple[float, float], ...]

    @property
    def segments(self) -> List[Tuple[Tuple[float, float], Tuple[float, float]]]:
        return list(zip(self.breakpoints[:-1], self.breakpoints[1:]))


def gamma_path(t: float, s: float = 0.0) -> GammaPath:
    """
    Path of phi(t, s): slope +1 leg on [max(s,t-2), max(s,t-1)], then slope -1
    leg on [max(s,t-1), t]. Degenerate legs are dropped; reflection points sit
    exactly on x = 0 or x = 1.
    """
    if t <= s:
        return GammaPath(t=t, breakpoints=())
    tau0, tau1 = max(s, t - 2.0), max(s, t - 1.0)
    points: List[Tuple[float, float]] = []
    if tau1 > tau0:
        start = 0.0 if tau0 == t - 2.0 else tau0 - t + 2.0
        points.append((tau0, start))
        points.append((tau1, 1.0 if tau1 == t - 1.0 else tau1 - t + 2.0))
    else:
        points.append((tau1, 1.0 if tau1 == t - 1.0 else t - tau1))
    points.append((t, 0.0))
    return GammaPath(t=t, breakpoints=tuple(points))


def _check_positions(lo: float, hi: float, context: str) -> None:
    for position in (lo, hi):
        if position < -POSITION_SLACK or position > 1.0 + POSITION_SLACK:
            raise OutOfDomainError(position, context)


def phi(
    fields: CoeffFields,
    t: float,
    s: float = 0.0,
    tol: float = 1e-12,
    max_depth: int = 30,
) -> Tuple[float, float]:
    """
    Two-leg line integral phi(t, s) with its quadrature error bound.

    Returns exactly (0.0, 0.0) for t <= s.
    """
    if t <= s:
        return 0.0, 0.0

    value, err = 0.0, 0.0
    lo1, hi1 = max(s, t - 2.0), max(s, t - 1.0)
    shift = t - 2.0
    if hi1 > lo1:
        _check_positions(lo1 - shift, hi1 - shift, f"on the rising leg of phi({t}, {s})")
        eta1 = fields.eta1_fn
        v, e = adaptive_gauss_legendre(
            lambda tau: eta1(tau, np.clip(tau - shift, 0.0, 1.0)), lo1, hi1, 0.5 * tol, max_depth
        )
        value += v
        err += e

    if t > hi1:
        _check_positions(t - hi1, 0.0, f"on the falling leg of phi({t}, {s})")
        eta2 = fields.eta2_fn
        v, e = adaptive_gauss_legendre(
            lambda tau: eta2(tau, np.clip(t - tau, 0.0, 1.0)), hi1, t, 0.5 * tol, max_depth
        )
        value += v
        err += e

    return value, err


def f_n(
    fields: CoeffFields,
    n: int,
    t: float,
    s: float = 0.0,
    tol: float = 1e-12,
    max_depth: int = 30,
) -> Tuple[float, float]:
    """f_n(t, s) = sum_{k=0..n} phi(t - 2k, s) with the summed error bound."""
    if n < 0:
        raise ValueError(f"n must be non-negative, got {n}")
    value, err = 0.0, 0.0
    for k in range(n + 1):
        v, e = phi(fields, t - 2.0 * k, s, tol, max_depth)
        value += v
        err += e
    return value, err


# =============================================================================
# Cached table
# =============================================================================

def _key(value: float) -> int:
    return int(round(value / KEY_RESOLUTION))


class PhiTable:
    """
    Memoized phi and f_n evaluations for one set of fields.

    Reads and writes are guarded by a lock; the quadrature itself runs
    outside the lock, so two threads may compute the same entry once each.

    Usage:
        table = PhiTable(fields, tol=settings.tolerances.quad_tol)
        value, err = table.f_n(2, 5.5)
    """

    def __init__(self, fields: CoeffFields, tol: float = 1e-12, max_depth: int = 30):
        self.fields = fields
        self.tol = tol
        self.max_depth = max_depth
        self._phi: Dict[Tuple[int, int], Tuple[float, float, float, float]] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._phi)

    def phi(self, t: float, s: float = 0.0) -> Tuple[float, float]:
        if t <= s:
            return 0.0, 0.0
        key = (_key(t), _key(s))
        with self._lock:
            hit = self._phi.get(key)
        if hit is not None:
            return hit[2], hit[3]
        value, err = phi(self.fields, t, s, self.tol, self.max_depth)
        with self._lock:
            self._phi[key] = (t, s, value, err)
        return value, err

    def value(self, t: float, s: float = 0.0) -> float:
        return self.phi(t, s)[0]

    def f_n(self, n: int, t: float, s: float = 0.0) -> Tuple[float, float]:
        if n < 0:
            raise ValueError(f"n must be non-negative, got {n}")
        value, err = 0.0, 0.0
        for k in range(n + 1):
            v, e = self.phi(t - 2.0 * k, s)
            value += v
            err += e
        return value, err

    def phi_many(self, ts, s: float = 0.0) -> Tuple[np.ndarray, np.ndarray]:
        ts = np.asarray(ts, dtype=float)
        values = np.empty(ts.shape)
        errs = np.empty(ts.shape)
        for idx, t in np.ndenumerate(ts):
            values[idx], errs[idx] = self.phi(float(t), s)
        return values, errs

    def f_n_many(self, n: int, ts, s: float = 0.0) -> Tuple[np.ndarray, np.ndarray]:
        ts = np.asarray(ts, dtype=float)
        values = np.zeros(ts.shape)
        errs = np.zeros(ts.shape)
        for k in range(n + 1):
            v, e = self.phi_many(ts - 2.0 * k, s)
            values += v
            errs += e
        return values, errs

    def rows(self, max_n: Optional[int] = None) -> List[Dict[str, float]]:
        """Cached phi entries as (t, s, n, value, err) rows, sorted by (s, t)."""
        with self._lock:
            entries = sorted(self._phi.values(), key=lambda item: (item[1], item[0]))
        rows = [{"t": t, "s": s, "n": 0, "value": v, "err": e} for t, s, v, e in entries]
        if max_n:
            for t, s, _, _ in entries:
                for n in range(1, max_n + 1):
                    v, e = self.f_n(n, t + 2.0 * n, s)
                    rows.append({"t": t + 2.0 * n, "s": s, "n": n, "value": v, "err": e})
        return rows
