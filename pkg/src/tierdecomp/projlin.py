"""Dense projector arithmetic and the shared tolerance policy.

Everything downstream works with plain float64 numpy arrays.  A projector
here is always symmetric and idempotent; ``Projector.validated`` is the
single gate through which every matrix that claims to be one must pass.
Efficiency factors are floats in [0, 1] that get snapped to small rationals
when a nearby one exists (block designs produce values like 1/6 or 5/6
exactly, up to rounding).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np

__all__ = [
    "TolerancePolicy",
    "DEFAULT_POLICY",
    "EfficiencyValue",
    "Projector",
    "ProjectorError",
    "EfficiencyRangeError",
    "mul",
    "max_abs",
    "is_zero",
    "snap_rational",
]


class ProjectorError(ValueError):
    """A matrix failed symmetry/idempotency/trace validation."""


class EfficiencyRangeError(ValueError):
    """A candidate efficiency factor fell outside [0, 1] by more than tolerance."""


@dataclass(frozen=True)
class TolerancePolicy:
    """Numerical comparison thresholds used throughout the package.

    All comparisons on matrix entries are absolute (entries of averaging and
    projection matrices live in [-1, 1], so no rescaling is needed).
    ``tol_eig`` is looser than the entrywise tolerances because eigensolves
    carry more noise than the products they are applied to.
    """

    tol_sym: float = 1e-9
    tol_idem: float = 1e-9
    tol_zero: float = 1e-9
    tol_eig: float = 1e-7
    snap_max_denominator: int = 64

    def __post_init__(self) -> None:
        for name in ("tol_sym", "tol_idem", "tol_zero", "tol_eig"):
            v = getattr(self, name)
            if not (0.0 < v < 1e-3):
                raise ValueError(f"{name} must lie in (0, 1e-3), got {v!r}")
        if self.snap_max_denominator < 1:
            raise ValueError("snap_max_denominator must be a positive integer")

    def replace(self, **kw) -> "TolerancePolicy":
        return replace(self, **kw)


DEFAULT_POLICY = TolerancePolicy()

# Trace of a near-idempotent matrix accumulates ~n rounding terms; this bound
# is far above that and far below the 0.5 used to recognise rank-0 residuals.
TRACE_TOL = 1e-6


@dataclass(frozen=True)
class EfficiencyValue:
    """An efficiency factor: float value plus an optional exact rational form."""

    value: float
    rational: tuple[int, int] | None = None

    def is_zero(self) -> bool:
        return self.rational == (0, 1)

    def is_one(self) -> bool:
        return self.rational == (1, 1)

    def render(self) -> str:
        """``num/den`` when snapped, otherwise 6 significant digits."""
        if self.rational is not None:
            num, den = self.rational
            if den == 1:
                return str(num)
            return f"{num}/{den}"
        return f"{self.value:.6g}"


def snap_rational(x: float, policy: TolerancePolicy = DEFAULT_POLICY) -> EfficiencyValue:
    """Snap ``x`` to the nearest rational with a small denominator.

    The continued-fraction search is bounded by ``policy.snap_max_denominator``;
    a snap only counts when the rational reproduces ``x`` within ``tol_zero``.
    Values outside [0, 1] by more than ``tol_zero`` are rejected, values just
    outside are clamped onto the boundary.
    """
    tol = policy.tol_zero
    if x < -tol or x > 1.0 + tol:
        raise EfficiencyRangeError(f"efficiency factor {x!r} outside [0, 1]")
    x = min(max(x, 0.0), 1.0)
    frac = Fraction(x).limit_denominator(policy.snap_max_denominator)
    if abs(x - float(frac)) <= tol:
        return EfficiencyValue(value=x, rational=(frac.numerator, frac.denominator))
    return EfficiencyValue(value=x, rational=None)


def mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit conformance check.

    Plain ``a @ b``; BLAS gives a fixed reduction order for a given build, so
    repeated runs on the same machine produce identical bytes.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("mul expects 2-d arrays")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"dimension mismatch: {a.shape} @ {b.shape}")
    return a @ b


def max_abs(a: np.ndarray) -> float:
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a)))


def is_zero(a: np.ndarray, policy: TolerancePolicy = DEFAULT_POLICY) -> bool:
    """True when every entry of ``a`` is within ``tol_zero`` of zero."""
    return max_abs(a) <= policy.tol_zero


@dataclass(frozen=True, eq=False)
class Projector:
    """A validated symmetric idempotent with a display label.

    ``df`` is the rounded trace (the dimension of the image).  The matrix is
    frozen read-only at construction so shared references stay safe.
    """

    matrix: np.ndarray
    label: str
    df: int

    @classmethod
    def validated(
        cls,
        matrix: np.ndarray,
        label: str,
        policy: TolerancePolicy = DEFAULT_POLICY,
    ) -> "Projector":
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise ProjectorError(f"{label}: projector must be square, got {matrix.shape}")
        sym_gap = max_abs(matrix - matrix.T)
        if sym_gap > policy.tol_sym:
            raise ProjectorError(f"{label}: not symmetric (max gap {sym_gap:.3e})")
        idem_gap = max_abs(mul(matrix, matrix) - matrix)
        if idem_gap > policy.tol_idem:
            raise ProjectorError(f"{label}: not idempotent (max gap {idem_gap:.3e})")
        trace = float(np.trace(matrix))
        df = int(round(trace))
        if abs(trace - df) > TRACE_TOL:
            raise ProjectorError(f"{label}: trace {trace!r} is not close to an integer")
        matrix = matrix.copy()
        matrix.flags.writeable = False
        return cls(matrix=matrix, label=label, df=df)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def relabel(self, label: str) -> "Projector":
        return Projector(matrix=self.matrix, label=label, df=self.df)

    def __repr__(self) -> str:  # keep reprs short; matrices can be 648x648
        return f"Projector({self.label!r}, df={self.df}, n={self.n})"
