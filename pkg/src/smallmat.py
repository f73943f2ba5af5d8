"""
Closed-form 2x2 linear algebra.

Spectral classification, matrix exponentials, the rank test on [B | MB],
the determinant of the observation pair [B*; B* e^{rM*}] and the 4x4
Sylvester resultant of the constant-coefficient case.

All observation-side quantities are computed on the adjoint M* = M^T.
"""

import math
from dataclasses import dataclass
from typing import Sequence, Tuple, Union

import numpy as np

from .core.exceptions import ConfigValidationError
from .core.logging_config import get_logger

logger = get_logger(__name__)


# =============================================================================
# Value types
# =============================================================================

@dataclass(frozen=True)
class Vec2:
    """Control distribution vector B."""

    b1: float
    b2: float

    def __post_init__(self):
        if not (math.isfinite(self.b1) and math.isfinite(self.b2)):
            raise ConfigValidationError(f"Non-finite control vector ({self.b1}, {self.b2})", field_path="B")

    @classmethod
    def of(cls, values: Union["Vec2", Sequence[float]]) -> "Vec2":
        if isinstance(values, Vec2):
            return values
        flat = np.asarray(values, dtype=float).ravel()
        if flat.shape != (2,):
            raise ConfigValidationError(f"B must have 2 entries, got {flat.size}", field_path="B")
        return cls(float(flat[0]), float(flat[1]))

    @property
    def array(self) -> np.ndarray:
        return np.array([self.b1, self.b2])

    @property
    def norm(self) -> float:
        return math.hypot(self.b1, self.b2)

    def to_list(self):
        return [self.b1, self.b2]


@dataclass(frozen=True)
class Mat2:
    """Coupling matrix M = [[m11, m12], [m21, m22]]."""

    m11: float
    m12: float
    m21: float
    m22: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.m11, self.m12, self.m21, self.m22)):
            raise ConfigValidationError("Non-finite entry in coupling matrix", field_path="M")

    @classmethod
    def of(cls, values: Union["Mat2", Sequence[Sequence[float]], np.ndarray]) -> "Mat2":
        if isinstance(values, Mat2):
            return values
        arr = np.asarray(values, dtype=float)
        if arr.shape != (2, 2):
            raise ConfigValidationError(f"M must be 2x2, got shape {arr.shape}", field_path="M")
        return cls(float(arr[0, 0]), float(arr[0, 1]), float(arr[1, 0]), float(arr[1, 1]))

    @classmethod
    def identity(cls) -> "Mat2":
        return cls(1.0, 0.0, 0.0, 1.0)

    @property
    def array(self) -> np.ndarray:
        return np.array([[self.m11, self.m12], [self.m21, self.m22]])

    @property
    def T(self) -> "Mat2":
        return Mat2(self.m11, self.m21, self.m12, self.m22)

    @property
    def trace(self) -> float:
        return self.m11 + self.m22

    @property
    def det(self) -> float:
        return self.m11 * self.m22 - self.m12 * self.m21

    @property
    def norm(self) -> float:
        """Frobenius norm."""
        return math.sqrt(self.m11 ** 2 + self.m12 ** 2 + self.m21 ** 2 + self.m22 ** 2)

    def apply(self, v: Vec2) -> Vec2:
        return Vec2(self.m11 * v.b1 + self.m12 * v.b2, self.m21 * v.b1 + self.m22 * v.b2)

    def to_list(self):
        return [[self.m11, self.m12], [self.m21, self.m22]]


# =============================================================================
# Spectral classes
# =============================================================================

class SpectralClass:
    """Base of the four spectral shapes of a real 2x2 matrix."""

    tag = "abstract"
    tolerance_sensitive = False

    @property
    def eigenvalues(self) -> Tuple[complex, complex]:
        raise NotImplementedError

    @property
    def is_real(self) -> bool:
        return not isinstance(self, ComplexPair)

    def to_dict(self) -> dict:
        values = self.eigenvalues
        return {
            "tag": self.tag,
            "eigenvalues": [[v.real, v.imag] for v in map(complex, values)],
            "tolerance_sensitive": self.tolerance_sensitive,
        }


@dataclass(frozen=True)
class DistinctReal(SpectralClass):
    lam1: float
    lam2: float
    tolerance_sensitive: bool = False
    tag = "DistinctReal"

    @property
    def eigenvalues(self):
        return (self.lam1, self.lam2)


@dataclass(frozen=True)
class ComplexPair(SpectralClass):
    re: float
    im: float
    tolerance_sensitive: bool = False
    tag = "ComplexPair"

    @property
    def eigenvalues(self):
        return (complex(self.re, self.im), complex(self.re, -self.im))


@dataclass(frozen=True)
class JordanBlock(SpectralClass):
    mu: float
    tolerance_sensitive: bool = False
    tag = "JordanBlock"

    @property
    def eigenvalues(self):
        return (self.mu, self.mu)


@dataclass(frozen=True)
class ScalarMultiple(SpectralClass):
    mu: float
    tolerance_sensitive: bool = False
    tag = "ScalarMultiple"

    @property
    def eigenvalues(self):
        return (self.mu, self.mu)


def classify(M: Mat2, tau_eig: float = 1e-9) -> SpectralClass:
    """
    Spectral shape from the discriminant tr^2 - 4 det.

    A discriminant within tau_eig * ||M||^2 of zero counts as a repeated
    eigenvalue; when it is not exactly zero the class is flagged
    tolerance-sensitive.
    """
    M = Mat2.of(M)
    tr = M.trace
    disc = tr * tr - 4.0 * M.det
    scale = M.norm ** 2

    if abs(disc) <= tau_eig * scale or disc == 0.0:
        mu = tr / 2.0
        sensitive = disc != 0.0
        residual = math.sqrt((M.m11 - mu) ** 2 + M.m12 ** 2 + M.m21 ** 2 + (M.m22 - mu) ** 2)
        if residual <= tau_eig * max(M.norm, 1.0):
            return ScalarMultiple(mu, tolerance_sensitive=sensitive)
        if sensitive:
            logger.debug(
                "Near-degenerate discriminant treated as Jordan block",
                extra_fields={"disc": disc, "scale": scale},
            )
        return JordanBlock(mu, tolerance_sensitive=sensitive)

    if disc > 0:
        root = math.sqrt(disc)
        if tr == 0:
            return DistinctReal(-root / 2.0, root / 2.0)
        # larger-magnitude root first; the other via det to avoid cancellation
        big = 0.5 * (tr + math.copysign(root, tr))
        lam1, lam2 = sorted((big, M.det / big))
        return DistinctReal(lam1, lam2)

    return ComplexPair(tr / 2.0, math.sqrt(-disc) / 2.0)


# =============================================================================
# Exponentials
# =============================================================================

def _exp_coefficients(M: Mat2, r: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Scalars (e^{ar}, c(r), s(r)) with e^{rM} = e^{ar} (c I + s (M - a I)), a = tr/2.

    c, s are cosh(dr), sinh(dr)/d or cos(wr), sin(wr)/w or 1, r depending on the sign of
    the quarter discriminant d^2 = a^2 - det.
    """
    a = M.trace / 2.0
    q2 = a * a - M.det
    if q2 > 0:
        d = math.sqrt(q2)
        c = np.cosh(d * r)
        s = np.sinh(d * r) / d
    elif q2 < 0:
        w = math.sqrt(-q2)
        c = np.cos(w * r)
        s = np.sin(w * r) / w
    else:
        c = np.ones_like(r)
        s = np.array(r, dtype=float, copy=True)
    return np.exp(a * r), c, s


def expm(M: Mat2, r: float) -> Mat2:
    """e^{rM} in closed form; exactly the identity at r = 0."""
    M = Mat2.of(M)
    if r == 0:
        return Mat2.identity()
    scale, c, s = _exp_coefficients(M, np.asarray(float(r)))
    scale, c, s = float(scale), float(c), float(s)
    a = M.trace / 2.0
    return Mat2(
        scale * (c + s * (M.m11 - a)),
        scale * s * M.m12,
        scale * s * M.m21,
        scale * (c + s * (M.m22 - a)),
    )


def expm_batch(M: Mat2, r: np.ndarray) -> np.ndarray:
    """Vectorized e^{rM} over an array of r; returns shape r.shape + (2, 2)."""
    M = Mat2.of(M)
    r = np.asarray(r, dtype=float)
    scale, c, s = _exp_coefficients(M, r)
    a = M.trace / 2.0
    K = M.array - a * np.eye(2)
    out = c[..., None, None] * np.eye(2) + s[..., None, None] * K
    return scale[..., None, None] * out


# =============================================================================
# Rank and determinant tests
# =============================================================================

def kalman_rank(M: Mat2, B: Vec2, tau_rank: float = 1e-9) -> int:
    """Rank of [B | MB] with a determinant band relative to ||B|| ||MB||."""
    M, B = Mat2.of(M), Vec2.of(B)
    if B.norm == 0.0:
        return 0
    MB = M.apply(B)
    det = B.b1 * MB.b2 - B.b2 * MB.b1
    if abs(det) > tau_rank * B.norm * MB.norm and MB.norm > 0:
        return 2
    return 1


def det_B_eB(M: Mat2, B: Vec2, r: float) -> float:
    """Determinant of the matrix with rows B* and B* e^{rM*}."""
    M, B = Mat2.of(M), Vec2.of(B)
    E = expm(M.T, r)
    # B* E as a row vector: (E^T B)^T
    row = E.T.apply(B)
    return B.b1 * row.b2 - B.b2 * row.b1


def det_B_eB_closed_form(M: Mat2, B: Vec2, r: float, tau_eig: float = 1e-9) -> float:
    """
    Same determinant through the eigen/Jordan basis P of M*.

    With beta = B* P:
        distinct spectrum:  beta1 beta2 (e^{lam2 r} - e^{lam1 r}) / det P
        Jordan block:       e^{mu r} r beta1^2 / det P, P = [v, w], (M* - mu) w = v
        scalar:             0
    """
    M, B = Mat2.of(M), Vec2.of(B)
    spectral = classify(M, tau_eig)
    A = M.T.array

    if isinstance(spectral, ScalarMultiple):
        return 0.0

    if isinstance(spectral, JordanBlock):
        N = A - spectral.mu * np.eye(2)
        j = int(np.argmax(np.linalg.norm(N, axis=0)))
        w = np.eye(2)[:, j]
        v = N @ w
        P = np.column_stack([v, w])
        beta = B.array @ P
        return float(math.exp(spectral.mu * r) * r * beta[0] ** 2 / np.linalg.det(P))

    lam, P = np.linalg.eig(A)
    beta = B.array @ P
    value = beta[0] * beta[1] * (np.exp(lam[1] * r) - np.exp(lam[0] * r)) / np.linalg.det(P)
    return float(np.real(value))


def phi_nondegenerate(spectral: SpectralClass, v: float, tau_phi: float = 1e-9) -> bool:
    """
    Nondegeneracy of a phi value for the observation pair.

    Real or repeated spectrum: |v| > tau_phi. Complex pair re +- i im: v stays
    more than tau_phi away from the lattice (pi / im) Z.
    """
    return phi_margin(spectral, v) > tau_phi


def phi_margin(spectral: SpectralClass, v: float) -> float:
    """Distance of v to the degenerate set of the spectral class."""
    if isinstance(spectral, ComplexPair):
        period = math.pi / spectral.im
        return abs(v - round(v / period) * period)
    return abs(v)


# =============================================================================
# Constant-coefficient resultant
# =============================================================================

def _quadratic_coefficients(a: float, b: float, mu: complex, n: int) -> Tuple[complex, complex]:
    """(linear, constant) coefficients of lambda^2 + a mu lambda + b^2 mu^2 / 4 + (n pi)^2."""
    return a * mu, 0.25 * b * b * mu * mu + (n * math.pi) ** 2


def sylvester_matrix(a: float, b: float, mu1: complex, mu2: complex, n1: int, n2: int) -> np.ndarray:
    p1, c1 = _quadratic_coefficients(a, b, mu1, n1)
    p2, c2 = _quadratic_coefficients(a, b, mu2, n2)
    return np.array(
        [
            [1, p1, c1, 0],
            [0, 1, p1, c1],
            [1, p2, c2, 0],
            [0, 1, p2, c2],
        ],
        dtype=complex,
    )


def sylvester_det(a: float, b: float, mu1: complex, mu2: complex, n1: int, n2: int) -> complex:
    """Determinant of the 4x4 Sylvester matrix; zero iff the two quadratics share a root."""
    return complex(np.linalg.det(sylvester_matrix(a, b, mu1, mu2, n1, n2)))


def sylvester_resultant(a: float, b: float, mu1: complex, mu2: complex, n1: int, n2: int) -> complex:
    """Expanded resultant (c1 - c2)^2 + (p1 - p2)(p1 c2 - p2 c1)."""
    p1, c1 = _quadratic_coefficients(a, b, mu1, n1)
    p2, c2 = _quadratic_coefficients(a, b, mu2, n2)
    return complex((c1 - c2) ** 2 + (p1 - p2) * (p1 * c2 - p2 * c1))


def quadratic_roots(a: float, b: float, mu: complex, n: int) -> np.ndarray:
    p, c = _quadratic_coefficients(a, b, mu, n)
    return np.roots([1.0, p, c])


def share_root(a: float, b: float, mu1: complex, mu2: complex, n1: int, n2: int, tol: float = 1e-9) -> bool:
    """Common root by the quadratic formula, within tol on root distance."""
    r1 = quadratic_roots(a, b, mu1, n1)
    r2 = quadratic_roots(a, b, mu2, n2)
    return bool(np.min(np.abs(r1[:, None] - r2[None, :])) <= tol * max(1.0, float(np.max(np.abs(r1)))))


def distinct_condition_value(a: float, b: float, mu1: complex, mu2: complex, n1: int, n2: int) -> complex:
    """
    Constant-case inequality for distinct eigenvalues of M*.

    (xi1 - xi2)^2 - a^2 (mu1 - mu2)(mu2 xi1 - mu1 xi2), xi_i = b^2 mu_i^2 / 4 + (n_i pi)^2.
    Equal to sylvester_resultant; unique continuation needs it nonzero for all n1, n2.
    """
    xi1 = 0.25 * b * b * mu1 * mu1 + (n1 * math.pi) ** 2
    xi2 = 0.25 * b * b * mu2 * mu2 + (n2 * math.pi) ** 2
    return complex((xi1 - xi2) ** 2 - a * a * (mu1 - mu2) * (mu2 * xi1 - mu1 * xi2))


def jordan_condition_value(a: float, b: float, mu: float) -> float:
    """Constant-case quantity b^2 mu / 2 + a for a Jordan block of M*."""
    return 0.5 * b * b * mu + a
