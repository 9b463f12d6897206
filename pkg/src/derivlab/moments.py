"""Exact second moments of derivative processes.

For a base point ``u_0`` and directions ``u_1..u_n`` the derivative process is

    X_t = 1_{n <= 1} e^{tA} u_n + int_0^t e^{(t-s)A} phi(s) e_1 dW_s,

where ``phi(s)`` is the ``e_1``-coefficient of ``B^{(n)}(e^{sA}u_0)(e^{sA}u_1, ...)``
(or of ``B(e^{sA}u_0)`` when ``n = 0``).  The stochastic integral has a
deterministic integrand, so its ``e_1``-coefficient is a centred Gaussian with
variance ``sigma^2 = int_0^t e^{-2c(t-s)} phi(s)^2 ds`` (Ito isometry), and the
second moment in ``H_{-q}`` is the squared deterministic part plus
``c^{-2q} sigma^2``.

Two independent evaluation paths are provided.  ``second_moment_exact`` forms
``phi`` from the full partition sum and integrates with composite
Gauss-Legendre panels.  ``second_moment_structured`` uses the collapsed
product-of-norms form that the structured families admit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .diffusion import derivative_from_gram
from .setpart import falling_half_product
from .spectral import (
    DerivativeTuple,
    OperatorParams,
    RegimeError,
    SpectralVector,
    TestFamilySpec,
    hr_norm,
    semigroup_apply,
    small_norm_bound,
    test_tuple_u,
    test_vector_v,
)

_LOG_TINY = 745.0  # exp(-x) underflows to zero in float64 beyond this
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(16)


class QuadratureError(RuntimeError):
    """The panel refinement did not reach the requested tolerance."""


@dataclass(frozen=True)
class MomentQuery:
    """Order ``n``, tuple ``(u_0..u_n)``, time ``t`` and Sobolev weight ``q``."""

    n: int
    tuple: DerivativeTuple
    t: float
    q: float = 0.0

    def __post_init__(self) -> None:
        if not isinstance(self.tuple, DerivativeTuple):
            object.__setattr__(self, "tuple", DerivativeTuple(tuple(self.tuple)))
        if self.n < 0:
            raise ValueError("order n must be >= 0")
        if len(self.tuple) != self.n + 1:
            raise ValueError(f"tuple has {len(self.tuple)} entries, expected n+1={self.n + 1}")
        if not self.t > 0:
            raise ValueError(f"t must be > 0, got {self.t}")
        if not self.q >= 0:
            raise ValueError(f"q must be >= 0, got {self.q}")


@dataclass(frozen=True)
class MomentResult:
    """Second moment split into its deterministic and noise contributions.

    ``noise_variance`` already carries the ``c^{-2q}`` weight of mode 1;
    ``sigma2`` is the unweighted variance of the ``e_1`` coefficient.
    """

    deterministic_part: float
    noise_variance: float
    second_moment: float
    sigma2: float


# phi(s) via Gram matrices ------------------------------------------------------


class _GramPath:
    """Evaluates the Gram matrix of ``P e^{sA} u_a`` for many ``s`` at once.

    Entry ``(a, b)`` is ``sum_k x_{a,k} x_{b,k} exp(-2 c k^2 s)`` over the
    shared P-support.  Modes are sorted so that, for a given ``s``, only a
    prefix can contribute a representable term.
    """

    def __init__(self, p: OperatorParams, vectors: tuple[SpectralVector, ...]):
        self.c = p.c
        self.k = len(vectors)
        modes = sorted({m for v in vectors for m in v.modes if m >= 2})
        pos = {m: i for i, m in enumerate(modes)}
        self.mu2 = np.array([float(m) ** 2 for m in modes])
        coef = np.zeros((self.k, len(modes)))
        for a, v in enumerate(vectors):
            for m, x in zip(v.modes, v.coeffs):
                if m >= 2:
                    coef[a, pos[m]] = x
        self.pairs = [(a, b) for a in range(self.k) for b in range(a, self.k)]
        self.prod = np.stack([coef[a] * coef[b] for a, b in self.pairs], axis=1) if modes else np.zeros((0, len(self.pairs)))
        big = np.max(np.abs(self.prod)) if self.prod.size else 1.0
        self.cut = _LOG_TINY + max(0.0, math.log(big)) + 5.0

    @property
    def max_rate(self) -> float:
        """Largest decay rate ``2 c k^2`` of any Gram entry."""
        return 2.0 * self.c * float(self.mu2[-1]) if self.mu2.size else 0.0

    def gram(self, s: np.ndarray, chunk: int = 512) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        out = np.zeros((s.size, self.k, self.k))
        if not self.mu2.size:
            return out
        order = np.argsort(s)
        flat = np.empty((s.size, len(self.pairs)))
        for lo in range(0, s.size, chunk):
            idx = order[lo : lo + chunk]
            s_min = s[idx[0]]
            if s_min > 0:
                limit = np.searchsorted(self.mu2, self.cut / (2.0 * self.c * s_min), side="right")
            else:
                limit = self.mu2.size
            if limit == 0:
                flat[idx] = 0.0
                continue
            w = np.exp(-2.0 * self.c * np.outer(s[idx], self.mu2[:limit]))
            flat[idx] = w @ self.prod[:limit]
        for j, (a, b) in enumerate(self.pairs):
            out[:, a, b] = flat[:, j]
            out[:, b, a] = flat[:, j]
        return out


def _phi_from_gram(n: int, g: np.ndarray) -> np.ndarray:
    if n == 0:
        return np.sqrt(1.0 + g[:, 0, 0])
    return derivative_from_gram(g)


def scalar_path(p: OperatorParams, tup: DerivativeTuple, s) -> np.ndarray | float:
    """``phi(s)``: ``e_1``-coefficient of the diffusion term along the tuple.

    Accepts a scalar or an array of times.
    """
    tup = tup if isinstance(tup, DerivativeTuple) else DerivativeTuple(tuple(tup))
    s_arr = np.atleast_1d(np.asarray(s, dtype=np.float64))
    if np.any(s_arr < 0):
        raise ValueError("times must be >= 0")
    path = _GramPath(p, tup.entries)
    vals = _phi_from_gram(tup.n, path.gram(s_arr))
    return float(vals[0]) if np.ndim(s) == 0 else vals


# quadrature ----------------------------------------------------------------------


def _geometric_panels(t: float, max_rate: float) -> list[tuple[float, float]]:
    """``[0, s0]`` followed by panels doubling in length up to ``t``.

    ``s0`` is small enough that the integrand is flat to ~1e-4 relative on it,
    so every time scale of the exponential sums gets its own panels.
    """
    if max_rate <= 0:
        s0 = t
    else:
        s0 = min(t, 1e-4 / max_rate)
    edges = [0.0, s0]
    while edges[-1] < t:
        edges.append(min(t, 2.0 * edges[-1]))
    return list(zip(edges[:-1], edges[1:]))


def _gl_nodes(panels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a, b = panels[:, 0:1], panels[:, 1:2]
    half = 0.5 * (b - a)
    nodes = 0.5 * (a + b) + half * _GL_NODES[None, :]
    weights = half * _GL_WEIGHTS[None, :]
    return nodes, weights


def composite_gauss(f, panels, *, rtol: float = 1e-13, max_depth: int = 40) -> float:
    """Integrate a vectorized ``f`` over the union of ``panels``.

    Each panel is bisected until its 16-point Gauss-Legendre value agrees with
    the sum over its halves to within its share of ``rtol`` times the running
    total.  Raises :class:`QuadratureError` when ``max_depth`` is exceeded.
    """
    active = np.asarray(panels, dtype=np.float64).reshape(-1, 2)

    def panel_values(pan: np.ndarray) -> np.ndarray:
        nodes, weights = _gl_nodes(pan)
        vals = np.asarray(f(nodes.ravel()), dtype=np.float64).reshape(nodes.shape)
        return np.sum(vals * weights, axis=1)

    coarse = panel_values(active)
    accepted: list[np.ndarray] = []
    n_initial = len(active)
    for _ in range(max_depth):
        mid = 0.5 * (active[:, 0] + active[:, 1])
        halves = np.empty((2 * len(active), 2))
        halves[0::2, 0], halves[0::2, 1] = active[:, 0], mid
        halves[1::2, 0], halves[1::2, 1] = mid, active[:, 1]
        fine_h = panel_values(halves)
        fine = fine_h[0::2] + fine_h[1::2]
        total = sum(float(np.sum(x)) for x in accepted) + float(np.sum(fine))
        share = rtol * abs(total) / max(n_initial, len(active))
        ok = np.abs(fine - coarse) <= share
        accepted.append(fine[ok])
        if ok.all():
            return float(np.sum(np.concatenate(accepted)))
        keep = np.repeat(~ok, 2)
        active = halves[keep]
        coarse = fine_h[keep]
    raise QuadratureError(f"panel refinement did not converge within depth {max_depth}")


# second moments ------------------------------------------------------------------


def _deterministic_part(p: OperatorParams, query: MomentQuery) -> float:
    if query.n > 1:
        return 0.0
    moved = semigroup_apply(p, query.t, query.tuple[query.n])
    return hr_norm(p, -query.q, moved) ** 2


def _result(p: OperatorParams, det: float, sigma2: float, q: float) -> MomentResult:
    noise = p.c ** (-2.0 * q) * sigma2
    return MomentResult(det, noise, det + noise, sigma2)


def second_moment_exact(p: OperatorParams, query: MomentQuery, *, rtol: float = 1e-13) -> MomentResult:
    """``E ||X_t||^2_{H_{-q}}`` with ``phi`` from the partition sum.

    The noise variance is integrated on geometric Gauss-Legendre panels that
    resolve every decay scale down to the largest mode in the support.
    """
    t = float(query.t)
    if t > p.T:
        raise ValueError(f"t={t} exceeds the horizon T={p.T}")
    path = _GramPath(p, query.tuple.entries)
    n_factors = 2 * (query.n + 1)

    def integrand(s: np.ndarray) -> np.ndarray:
        phi = _phi_from_gram(query.n, path.gram(s))
        return np.exp(-2.0 * p.c * (t - s)) * phi**2

    panels = _geometric_panels(t, n_factors * path.max_rate + 2.0 * p.c)
    sigma2 = composite_gauss(integrand, panels, rtol=rtol)
    return _result(p, _deterministic_part(p, query), sigma2, query.q)


# structured families ---------------------------------------------------------------


def _norm_sq_terms(p: OperatorParams, k: int, r: float, spacing: int, N: int):
    """Weights and rates with ``||P e^{sA} v^{k,r}||^2 = sum_j w_j exp(-a_j s)``."""
    v = test_vector_v(p, k, r, spacing, N)
    keep = np.array([m >= 2 for m in v.modes])
    return v.coeffs[keep] ** 2, 2.0 * p.c * v.mode_array[keep] ** 2


@dataclass(frozen=True)
class _StructuredForm:
    """``phi(s) = scale * prod_i F_i(s) / (1 + G(s))^{power}`` with ``F_i``, ``G`` exponential sums."""

    scale: float
    factors: tuple[tuple[np.ndarray, np.ndarray], ...]
    denominator: tuple[np.ndarray, np.ndarray] | None
    power: float

    def phi(self, s: np.ndarray) -> np.ndarray:
        s = np.atleast_1d(np.asarray(s, dtype=np.float64))
        out = np.full(s.shape, self.scale)
        for w, a in self.factors:
            out = out * _expsum(w, a, s)
        if self.denominator is not None:
            out = out / (1.0 + _expsum(*self.denominator, s)) ** self.power
        return out

    @property
    def max_rate(self) -> float:
        rates = [a.max() for _, a in self.factors if a.size]
        if self.denominator is not None and self.denominator[1].size:
            rates.append(self.denominator[1].max())
        return max(rates, default=0.0)


def _expsum(w: np.ndarray, a: np.ndarray, s: np.ndarray, chunk: int = 256) -> np.ndarray:
    out = np.empty(s.shape)
    for lo in range(0, s.size, chunk):
        out[lo : lo + chunk] = np.exp(-np.outer(s[lo : lo + chunk], a)) @ w
    return out


def _structured_form(p: OperatorParams, spec: TestFamilySpec) -> _StructuredForm:
    n, K, S, N, eps, d = spec.n, spec.half, spec.spacing, spec.N, spec.eps, spec.delta
    scale = float(N) ** spec.m * falling_half_product(K)
    factors = [_norm_sq_terms(p, i, 0.5 * (d[2 * i - 2] + d[2 * i - 1]) - eps, S, N) for i in range(1, K)]
    if n % 2 == 0:
        r_last = 0.5 * (d[n - 2] + d[n - 1]) - 0.25 - eps
        factors.append(_norm_sq_terms(p, K, r_last, S, N))
        return _StructuredForm(scale, tuple(factors), None, 0.0)
    factors.append(_norm_sq_terms(p, K, 0.5 * d[n - 1] - 0.25 - eps, S, N))
    return _StructuredForm(scale, tuple(factors), _norm_sq_terms(p, K, -eps, S, N), K - 0.5)


def structured_scalar_path(p: OperatorParams, spec: TestFamilySpec, s) -> np.ndarray | float:
    """``phi(s)`` for the structured family through its collapsed product form."""
    vals = _structured_form(p, spec).phi(s)
    return float(vals[0]) if np.ndim(s) == 0 else vals


def _kernel(lo: np.ndarray, hi: np.ndarray, t: float) -> np.ndarray:
    """``int_0^t e^{-a(t-s)} e^{-b s} ds`` with ``lo = min(a,b)``, ``hi = max(a,b)``."""
    gap = hi - lo
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.exp(-lo * t) * (-np.expm1(-gap * t)) / gap
    return np.where(gap * t < 1e-300, t * np.exp(-lo * t), out)


def _exp_product_integral(factors, scale2: float, a0: float, t: float, max_terms: int, chunk: int) -> float:
    """``scale2 * int_0^t e^{-a0(t-s)} prod_i (sum_j w_ij e^{-a_ij s}) ds`` term by term."""
    w, a = np.array([1.0]), np.array([0.0])
    for fw, fa in factors[:-1]:
        w = np.outer(w, fw).ravel()
        a = np.add.outer(a, fa).ravel()
    lw, la = factors[-1]
    if w.size * lw.size > max_terms:
        return math.nan
    total = []
    for lo in range(0, w.size, chunk):
        rates = np.add.outer(a[lo : lo + chunk], la)
        weights = np.outer(w[lo : lo + chunk], lw)
        low = np.minimum(rates, a0)
        high = np.maximum(rates, a0)
        total.append(np.sum(weights * _kernel(low, high, t)))
    return scale2 * float(np.sum(total))


def _log_time_integral(f, t: float, max_rate: float, rtol: float) -> float:
    """``int_0^t f(s) ds`` with adaptive QUADPACK in ``u = log s`` per octave."""
    s0 = min(t, 1e-4 / max_rate) if max_rate > 0 else t
    head = integrate.quad(lambda s: float(f(np.array([s]))[0]), 0.0, s0, epsabs=0.0, epsrel=rtol, limit=200)
    total = [head[0]]
    err = [head[1]]
    lo = s0
    while lo < t:
        hi = min(t, 2.0 * lo)
        val, e = integrate.quad(
            lambda u: float(f(np.array([math.exp(u)]))[0]) * math.exp(u),
            math.log(lo),
            math.log(hi),
            epsabs=0.0,
            epsrel=rtol,
            limit=200,
        )
        total.append(val)
        err.append(e)
        lo = hi
    value = math.fsum(total)
    if math.fsum(err) > 1e3 * rtol * abs(value) + 1e-300:
        raise QuadratureError(f"log-time quadrature error estimate {math.fsum(err):.3e} too large")
    return value


def second_moment_structured(
    p: OperatorParams,
    spec: TestFamilySpec,
    t: float,
    q: float = 0.0,
    *,
    max_terms: int = 1 << 25,
    rtol: float = 1e-13,
) -> MomentResult:
    """Second moment of the structured family from the collapsed form of ``phi``.

    For even ``n`` ``phi^2`` is a finite sum of exponentials and is integrated
    term by term in closed form, provided it has at most ``max_terms`` terms.
    For odd ``n`` (square-root denominator) and for oversized expansions the
    collapsed integrand is integrated with adaptive QUADPACK on octaves in
    log-time, a rule unrelated to the panels of ``second_moment_exact``.
    """
    if t <= 0:
        raise ValueError("t must be > 0")
    if t > p.T:
        raise ValueError(f"t={t} exceeds the horizon T={p.T}")
    if q < 0:
        raise ValueError("q must be >= 0")
    form = _structured_form(p, spec)
    sigma2 = math.nan
    if form.denominator is None:
        doubled = tuple(f for f in form.factors for _ in range(2))
        sigma2 = _exp_product_integral(doubled, form.scale**2, 2.0 * p.c, t, max_terms, chunk=1 << 14)
    if math.isnan(sigma2):
        rate = 2.0 * (len(form.factors) + 1) * form.max_rate + 2.0 * p.c

        def integrand(s: np.ndarray) -> np.ndarray:
            return np.exp(-2.0 * p.c * (t - s)) * form.phi(s) ** 2

        sigma2 = _log_time_integral(integrand, t, rate, rtol)
    det = 0.0
    if spec.n == 1:
        tup = test_tuple_u(p, spec)
        det = _deterministic_part(p, MomentQuery(1, tup, t, q))
    return _result(p, det, sigma2, q)


# derived quantities ------------------------------------------------------------------


def _double_factorial(k: int) -> int:
    return math.prod(range(k, 0, -2)) if k > 0 else 1


def p_moment_gaussian(result: MomentResult, n: int, p: int) -> float:
    """``E ||X||^p_{H_{-q}} = (p-1)!! * noise_variance^{p/2}`` for ``n >= 2``."""
    if n < 2:
        raise ValueError("Gaussian p-moments are only offered for n >= 2")
    if p < 2 or p % 2:
        raise ValueError(f"p must be an even integer >= 2, got {p}")
    return _double_factorial(p - 1) * result.noise_variance ** (p / 2)


def double_sum_inverse_squares(N: int) -> float:
    """``sum_{j,k=1}^N 1/(j^2 + k^2)``, accumulated row by row in float64."""
    j = np.arange(1, N + 1, dtype=np.float64)
    j2 = j * j
    rows = [float(np.sum(1.0 / (j2[i] + j2))) for i in range(N)]
    return math.fsum(rows)


def lower_bound_combined(p: OperatorParams, spec: TestFamilySpec, t: float, q: float = 0.0) -> float:
    """Lower bound on ``E ||X_t||^2_{H_{-q}}`` for the structured family.

    Requires ``0 < eps < 1/4``, ``m >= 1/(4 eps) - 1`` and
    ``sum(delta) >= 1/2 + 2 K eps`` with ``K = ceil(n/2)``.
    """
    K, eps, c = spec.half, spec.eps, p.c
    if not (0 < eps < 0.25):
        raise RegimeError(f"eps={eps} outside (0, 1/4)")
    if spec.m < 1.0 / (4.0 * eps) - 1.0 - 1e-12:
        raise RegimeError(f"m={spec.m} below 1/(4 eps) - 1")
    dsum = spec.delta_sum
    if dsum < 0.5 + 2 * K * eps - 1e-12:
        raise RegimeError(f"sum(delta)={dsum} below 1/2 + 2 K eps = {0.5 + 2 * K * eps}")
    abs_dsum = math.fsum(abs(d) for d in spec.delta)
    log_pref = (
        math.log(abs(falling_half_product(K)))
        - q * math.log(c)
        - c * (1 + 4 * K**3) * t
        - (1 + 4 * K * eps + 2 * abs_dsum) * math.log(2 * K**2)
        - (K - 0.5) * math.log1p(small_norm_bound(p, eps))
    )
    # N^m of the prefactor squared cancels the N^{2m} of the time integral bound.
    log_rest = -math.log(4 * K**3) - (2 + 4 * K * eps - 2 * dsum) * math.log(c)
    return math.exp(2 * log_pref + log_rest) * (-math.expm1(-c * t)) * double_sum_inverse_squares(spec.N)


def denominator_norms(p: OperatorParams, spec: TestFamilySpec) -> list[float]:
    """``||u_i||_{H_{-delta_i}}`` for the directions ``u_1..u_n`` of the family."""
    tup = test_tuple_u(p, spec)
    return [hr_norm(p, -d, u) for d, u in zip(spec.delta, tup.directions)]
