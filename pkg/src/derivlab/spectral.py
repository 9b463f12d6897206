"""Diagonal Hilbert-space calculus on finitely supported spectral vectors.

The generator ``A`` is diagonal in the orthonormal basis ``e_1, e_2, ...`` with
eigenvalue ``-c n^2`` on mode ``n``.  Every operator used here (semigroup,
fractional powers, the projection ``P`` onto modes >= 2) acts mode by mode, so
a vector is stored as a sorted list of modes with their coefficients.

Modes are kept as Python integers because the test families place mass on
modes far beyond the int64 range.  Numerical work uses a float64 copy of the
modes, whose relative precision is all that the weights ``(c n^2)^r`` and
``exp(-c n^2 t)`` need; exact orthogonality is decided on the integer modes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import logsumexp, zeta

#: Coefficients below this magnitude are dropped after applying the semigroup.
UNDERFLOW_CUTOFF = 1e-300


@dataclass(frozen=True)
class OperatorParams:
    """Decay constant ``c`` (eigenvalue ``-c n^2``) and time horizon ``T``."""

    c: float = 1.0
    T: float = 1.0

    def __post_init__(self) -> None:
        if not (self.c > 0 and math.isfinite(self.c)):
            raise ValueError(f"c must be a positive finite number, got {self.c}")
        if not (self.T > 0 and math.isfinite(self.T)):
            raise ValueError(f"T must be a positive finite number, got {self.T}")

    def eigenvalue(self, n: int) -> float:
        return -self.c * float(n) ** 2


@dataclass(frozen=True, eq=False)
class SpectralVector:
    """Finitely supported vector ``sum_n coeffs[n] e_n`` in canonical sparse form.

    ``modes`` is a strictly increasing tuple of integers >= 1 and ``coeffs`` the
    matching float64 array; no stored coefficient is zero.
    """

    modes: tuple[int, ...]
    coeffs: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        coeffs = np.asarray(self.coeffs, dtype=np.float64)
        if coeffs.ndim != 1 or coeffs.shape[0] != len(self.modes):
            raise ValueError("modes and coeffs must have the same length")
        if any(type(k) is not int for k in self.modes):
            object.__setattr__(self, "modes", tuple(int(k) for k in self.modes))
        if self.modes and self.modes[0] < 1:
            raise ValueError("modes must be >= 1")
        if any(a >= b for a, b in zip(self.modes, self.modes[1:])):
            raise ValueError("modes must be strictly increasing")
        if np.any(coeffs == 0.0):
            raise ValueError("canonical form stores no zero coefficients")
        if not np.all(np.isfinite(coeffs)):
            raise ValueError("coefficients must be finite")
        coeffs = coeffs.copy()
        coeffs.flags.writeable = False
        object.__setattr__(self, "coeffs", coeffs)

    # construction -------------------------------------------------------
    @classmethod
    def from_arrays(cls, modes: Sequence[int], coeffs, *, cutoff: float = 0.0) -> "SpectralVector":
        """Canonicalize: sort modes, sum duplicates, drop entries with ``|x| <= cutoff``."""
        acc: dict[int, float] = {}
        for k, x in zip(modes, np.asarray(coeffs, dtype=np.float64).tolist()):
            k = int(k)
            acc[k] = acc.get(k, 0.0) + x
        return cls.from_dict(acc, cutoff=cutoff)

    @classmethod
    def from_dict(cls, coeffs: Mapping[int, float], *, cutoff: float = 0.0) -> "SpectralVector":
        items = sorted((int(k), float(x)) for k, x in coeffs.items() if abs(x) > cutoff)
        return cls(tuple(k for k, _ in items), np.array([x for _, x in items], dtype=np.float64))

    @classmethod
    def zero(cls) -> "SpectralVector":
        return cls((), np.zeros(0))

    @classmethod
    def basis(cls, n: int) -> "SpectralVector":
        """The basis vector ``e_n``."""
        return cls((int(n),), np.array([1.0]))

    # views --------------------------------------------------------------
    @cached_property
    def mode_array(self) -> np.ndarray:
        """Modes as float64 (exact up to 2**53, relatively accurate beyond)."""
        return np.array([float(k) for k in self.modes], dtype=np.float64)

    def as_dict(self) -> dict[int, float]:
        return dict(zip(self.modes, self.coeffs.tolist()))

    def coefficient(self, n: int) -> float:
        return self.as_dict().get(int(n), 0.0)

    @property
    def support_size(self) -> int:
        return len(self.modes)

    def is_zero(self) -> bool:
        return not self.modes

    # linear structure ---------------------------------------------------
    def __add__(self, other: "SpectralVector") -> "SpectralVector":
        acc = self.as_dict()
        for k, x in other.as_dict().items():
            acc[k] = acc.get(k, 0.0) + x
        return SpectralVector.from_dict(acc)

    def __neg__(self) -> "SpectralVector":
        return SpectralVector(self.modes, -self.coeffs)

    def __sub__(self, other: "SpectralVector") -> "SpectralVector":
        return self + (-other)

    def scale(self, s: float) -> "SpectralVector":
        if s == 0.0:
            return SpectralVector.zero()
        return SpectralVector.from_arrays(self.modes, self.coeffs * float(s))

    def __mul__(self, s: float) -> "SpectralVector":
        return self.scale(s)

    __rmul__ = __mul__

    def __eq__(self, other) -> bool:
        if not isinstance(other, SpectralVector):
            return NotImplemented
        return self.modes == other.modes and np.array_equal(self.coeffs, other.coeffs)

    def __hash__(self) -> int:
        return hash((self.modes, self.coeffs.tobytes()))

    def __repr__(self) -> str:
        if len(self.modes) > 6:
            return f"SpectralVector(<{len(self.modes)} modes {self.modes[0]}..{self.modes[-1]}>)"
        terms = " + ".join(f"{x:.6g}*e{k}" for k, x in zip(self.modes, self.coeffs))
        return f"SpectralVector({terms or '0'})"


@dataclass(frozen=True)
class DerivativeTuple:
    """Base point ``u_0`` followed by ``n`` directions ``u_1..u_n``."""

    entries: tuple[SpectralVector, ...]

    def __post_init__(self) -> None:
        if len(self.entries) < 1:
            raise ValueError("a derivative tuple needs at least the base point")
        object.__setattr__(self, "entries", tuple(self.entries))

    @classmethod
    def of(cls, *vectors: SpectralVector) -> "DerivativeTuple":
        return cls(tuple(vectors))

    @property
    def n(self) -> int:
        return len(self.entries) - 1

    @property
    def base(self) -> SpectralVector:
        return self.entries[0]

    @property
    def directions(self) -> tuple[SpectralVector, ...]:
        return self.entries[1:]

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, i):
        return self.entries[i]


# operators ------------------------------------------------------------------


def _log_eigen(p: OperatorParams, modes: np.ndarray) -> np.ndarray:
    """``log(c n^2)`` per mode."""
    return math.log(p.c) + 2.0 * np.log(modes)


def semigroup_apply(p: OperatorParams, t: float, v: SpectralVector) -> SpectralVector:
    """``e^{tA} v``: multiply mode ``n`` by ``exp(-c n^2 t)``."""
    if t < 0:
        raise ValueError(f"semigroup time must be >= 0, got {t}")
    if t == 0 or v.is_zero():
        return v
    factors = np.exp(-p.c * v.mode_array**2 * t)
    return _rebuild(v, v.coeffs * factors, cutoff=UNDERFLOW_CUTOFF)


def frac_power_apply(p: OperatorParams, r: float, v: SpectralVector) -> SpectralVector:
    """``(-A)^r v``: multiply mode ``n`` by ``(c n^2)^r``."""
    if r == 0 or v.is_zero():
        return v
    factors = np.exp(r * _log_eigen(p, v.mode_array))
    return _rebuild(v, v.coeffs * factors, cutoff=0.0)


def _rebuild(v: SpectralVector, coeffs: np.ndarray, cutoff: float) -> SpectralVector:
    keep = np.abs(coeffs) > cutoff
    if keep.all():
        return SpectralVector(v.modes, coeffs)
    idx = np.flatnonzero(keep)
    return SpectralVector(tuple(v.modes[i] for i in idx), coeffs[idx])


def project_tail(v: SpectralVector) -> SpectralVector:
    """``P v``: drop the coefficient of ``e_1``."""
    if v.modes and v.modes[0] == 1:
        return SpectralVector(v.modes[1:], v.coeffs[1:])
    return v


def hr_norm(p: OperatorParams, r: float, v: SpectralVector) -> float:
    """``||(-A)^r v||_H``, accumulated in log space."""
    if v.is_zero():
        return 0.0
    logs = 2.0 * r * _log_eigen(p, v.mode_array) + 2.0 * np.log(np.abs(v.coeffs))
    return float(np.exp(0.5 * logsumexp(logs)))


def inner(v: SpectralVector, w: SpectralVector) -> float:
    """Euclidean inner product of coefficient maps."""
    if len(v.modes) > len(w.modes):
        v, w = w, v
    wd = w.as_dict()
    terms = [x * wd[k] for k, x in zip(v.modes, v.coeffs.tolist()) if k in wd]
    return math.fsum(terms)


def norm(v: SpectralVector) -> float:
    return float(np.sqrt(np.sum(v.coeffs**2))) if not v.is_zero() else 0.0


# test families ----------------------------------------------------------------


def test_vector_v(p: OperatorParams, k: int, r: float, spacing: int, N: int) -> SpectralVector:
    """``sum_{j=1}^N (c (k + j*spacing)^2)^r e_{k + j*spacing}``."""
    if int(k) != k or k < 0:
        raise ValueError(f"offset k must be a nonnegative integer, got {k}")
    if int(spacing) != spacing or spacing < 1:
        raise ValueError(f"spacing must be a positive integer, got {spacing}")
    if int(N) != N or N < 1:
        raise ValueError(f"N must be a positive integer, got {N}")
    k, spacing, N = int(k), int(spacing), int(N)
    modes = tuple(k + j * spacing for j in range(1, N + 1))
    mode_f = np.array([float(x) for x in modes])
    coeffs = np.exp(r * _log_eigen(p, mode_f))
    return SpectralVector(modes, coeffs)


# Keep pytest from collecting the constructor above as a test.
test_vector_v.__test__ = False  # type: ignore[attr-defined]


def _is_nonneg_int(x) -> bool:
    return isinstance(x, (int, np.integer)) and not isinstance(x, bool) and x >= 0


@dataclass(frozen=True)
class TestFamilySpec:
    """Parameters of the structured direction family.

    ``eps`` is the shift that enters the vector exponents directly.  With
    ``theorem_regime=True`` the constructor insists on ``0 < eps < 1/4`` and
    ``m >= 1/(4 eps) - 1``, the range in which the denominator norms stay
    bounded in ``N``.
    """

    __test__ = False

    n: int
    m: int
    eps: float
    delta: tuple[float, ...]
    N: int
    theorem_regime: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "delta", tuple(float(d) for d in self.delta))
        if not (_is_nonneg_int(self.n) and self.n >= 1):
            raise ValueError(f"derivative order n must be an integer >= 1, got {self.n}")
        if not _is_nonneg_int(self.m):
            raise ValueError(f"power index m must be an integer >= 0, got {self.m}")
        if not (_is_nonneg_int(self.N) and self.N >= 1):
            raise ValueError(f"family index N must be an integer >= 1, got {self.N}")
        if len(self.delta) != self.n:
            raise ValueError(f"delta has {len(self.delta)} entries, expected n={self.n}")
        if not math.isfinite(self.eps):
            raise ValueError("eps must be finite")
        if self.theorem_regime:
            if not (0 < self.eps < 0.25):
                raise RegimeError(f"eps={self.eps} outside (0, 1/4)")
            if self.m < 1.0 / (4.0 * self.eps) - 1.0 - 1e-12:
                raise RegimeError(
                    f"m={self.m} below the admissible minimum {min_power_index(self.eps)} for eps={self.eps}"
                )

    @property
    def half(self) -> int:
        """``ceil(n/2)``: number of blocks in the surviving partition."""
        return (self.n + 1) // 2

    @property
    def spacing(self) -> int:
        return self.half * self.N**self.m

    @property
    def delta_sum(self) -> float:
        return math.fsum(self.delta)

    def with_N(self, N: int) -> "TestFamilySpec":
        return TestFamilySpec(self.n, self.m, self.eps, self.delta, N, self.theorem_regime)


class RegimeError(ValueError):
    """Parameters outside the range where the constructions apply."""


def min_power_index(eps: float) -> int:
    """Smallest integer ``m >= 0`` with ``m >= 1/(4 eps) - 1``."""
    return max(0, math.ceil(1.0 / (4.0 * eps) - 1.0 - 1e-12))


def test_tuple_u(p: OperatorParams, spec: TestFamilySpec) -> DerivativeTuple:
    """Base point and directions of the structured family for ``spec``.

    With ``K = ceil(n/2)`` and spacing ``K N^m``: the base point is ``e_1`` for
    even ``n`` and ``v^{K,-eps}`` for odd ``n``; direction ``i < n`` is
    ``v^{ceil(i/2), delta_i - eps}``; the last direction is
    ``N^m v^{K, delta_n - 1/2 - eps}``.
    """
    n, K, S, N, eps = spec.n, spec.half, spec.spacing, spec.N, spec.eps
    if n % 2 == 0:
        base = SpectralVector.basis(1)
    else:
        base = test_vector_v(p, K, -eps, S, N)
    dirs = [test_vector_v(p, (i + 1) // 2, spec.delta[i - 1] - eps, S, N) for i in range(1, n)]
    last = test_vector_v(p, K, spec.delta[-1] - 0.5 - eps, S, N)
    dirs.append(last.scale(float(N) ** spec.m))
    return DerivativeTuple((base, *dirs))


test_tuple_u.__test__ = False  # type: ignore[attr-defined]


def select_theta(i: int, tup: DerivativeTuple | Sequence[SpectralVector]) -> SpectralVector:
    """The ``i``-th component (1-based)."""
    entries = tup.entries if isinstance(tup, DerivativeTuple) else tuple(tup)
    if not (1 <= i <= len(entries)):
        raise IndexError(f"component index {i} outside 1..{len(entries)}")
    return entries[i - 1]


# norm bounds ------------------------------------------------------------------


def small_norm_bound(p: OperatorParams, eps: float) -> float:
    """Uniform bound ``1/(c^{2 eps}(1 - 4 eps))`` on ``||v^{i,-eps}||^2``."""
    if not (0 < eps < 0.25):
        raise RegimeError(f"eps={eps} outside (0, 1/4)")
    return 1.0 / (p.c ** (2 * eps) * (1.0 - 4.0 * eps))


def big_norm_bound(p: OperatorParams, eps: float) -> float:
    """Uniform bound ``c^{-(1+2 eps)} zeta(2 + 4 eps)`` on ``N^{2m}||v^{K,-1/2-eps}||^2``."""
    if not (0 < eps < 0.25):
        raise RegimeError(f"eps={eps} outside (0, 1/4)")
    return p.c ** (-(1.0 + 2.0 * eps)) * float(zeta(2.0 + 4.0 * eps, 1.0))


def denominator_product_bound(p: OperatorParams, n: int, eps: float) -> float:
    """Bound on the product of the ``n`` denominator norms of the family."""
    return math.sqrt(big_norm_bound(p, eps)) * math.sqrt(small_norm_bound(p, eps)) ** (n - 1)


def iter_modes(vectors: Iterable[SpectralVector]) -> list[int]:
    """Sorted union of the supports."""
    out: set[int] = set()
    for v in vectors:
        out.update(v.modes)
    return sorted(out)
