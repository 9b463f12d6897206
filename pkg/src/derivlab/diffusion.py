"""The diffusion coefficient ``B(v) = sqrt(1 + ||P v||^2) e_1`` and its derivatives.

``B = f(g(v)) e_1`` with ``g(v) = ||P v||^2`` quadratic, so in the partition
expansion of the n-th derivative only partitions with blocks of size one or
two survive.  A singleton ``{i}`` contributes ``<P v_0, v_i>``, a pair
``{i, j}`` contributes ``<P v_j, v_i>``, and a partition with ``k`` blocks is
weighted by ``prod_{i<k}(1 - 2i) / (1 + ||P v_0||^2)^{k - 1/2}``.

All of these inner products are entries of the Gram matrix of
``P v_0, ..., P v_n``, which is what the evaluators below consume.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .setpart import (
    MAX_ENUMERATION_N,
    PartitionError,
    enumerate_partitions,
    falling_half_product,
    pair_partition_blocks,
)
from .spectral import SpectralVector, inner, project_tail

_EPS = np.finfo(np.float64).eps


@dataclass(frozen=True)
class DiffusionValue:
    """A value of ``B`` or one of its derivatives: ``scalar * e_1``."""

    scalar: float

    @property
    def vector(self) -> SpectralVector:
        if self.scalar == 0.0:
            return SpectralVector.zero()
        return SpectralVector((1,), np.array([self.scalar]))

    def norm(self) -> float:
        return abs(self.scalar)


def eval_B(v: SpectralVector) -> DiffusionValue:
    pv = project_tail(v)
    return DiffusionValue(float(np.sqrt(1.0 + inner(pv, pv))))


@lru_cache(maxsize=None)
def _pair_terms(n: int):
    """For each pair partition of ``{1..n}``: weight, Gram index pairs, exponent."""
    terms = []
    for blocks in pair_partition_blocks(n, allow_large=True):
        k = len(blocks)
        rows = [0 if len(b) == 1 else b[1] for b in blocks]
        cols = [b[0] for b in blocks]
        terms.append((float(falling_half_product(k)), tuple(rows), tuple(cols), k - 0.5))
    return tuple(terms)


def derivative_from_gram(gram: np.ndarray) -> np.ndarray:
    """Scalar of ``B^{(n)}(v_0)(v_1..v_n)`` from Gram matrices of ``P v_0..P v_n``.

    ``gram`` has shape ``(..., n+1, n+1)``; leading axes are batch axes.
    """
    gram = np.asarray(gram, dtype=np.float64)
    n = gram.shape[-1] - 1
    if n < 1:
        raise ValueError("need at least one direction")
    if n > MAX_ENUMERATION_N:
        raise PartitionError(f"order n={n} exceeds the enumeration cap {MAX_ENUMERATION_N}")
    base = 1.0 + gram[..., 0, 0]
    terms = []
    for weight, rows, cols, power in _pair_terms(n):
        prod = np.prod(gram[..., list(rows), list(cols)], axis=-1)
        terms.append(weight * prod * base ** (-power))
    return np.sum(np.stack(terms, axis=0), axis=0)


def gram_matrix(vectors: Sequence[SpectralVector]) -> np.ndarray:
    """Gram matrix of the ``P``-projections of ``vectors``."""
    pv = [project_tail(v) for v in vectors]
    k = len(pv)
    g = np.empty((k, k))
    for a in range(k):
        for b in range(a, k):
            g[a, b] = g[b, a] = inner(pv[a], pv[b])
    return g


def eval_derivative_closed(v0: SpectralVector, args: Sequence[SpectralVector]) -> DiffusionValue:
    """n-th derivative of ``B`` at ``v0`` in the directions ``args`` (partition formula)."""
    args = tuple(args)
    if len(args) < 1:
        raise ValueError("at least one direction is required")
    if len(args) > MAX_ENUMERATION_N:
        raise PartitionError(f"order n={len(args)} exceeds the enumeration cap {MAX_ENUMERATION_N}")
    return DiffusionValue(float(derivative_from_gram(gram_matrix((v0, *args)))))


def default_fd_steps(n: int, v0: SpectralVector | None = None) -> tuple[float, float, float]:
    """Three-level schedule ``(h, h/2, h/4)`` for an ``n``-fold difference.

    Two Richardson levels leave an ``O(h^6)`` truncation error, which balanced
    against the ``eps / h^n`` cancellation error suggests ``h ~ eps^{1/(n+6)}``.
    The step is measured relative to ``sqrt(1 + ||P v0||^2)``, the length scale
    on which the scalar map bends.
    """
    scale = 1.0 if v0 is None else float(np.sqrt(1.0 + inner(project_tail(v0), project_tail(v0))))
    h = 2.0 * float(_EPS ** (1.0 / (n + 6))) * scale
    return (h, h / 2, h / 4)


def _mixed_central(f, n: int, h: float) -> float:
    signs = np.array(np.meshgrid(*([[-1.0, 1.0]] * n), indexing="ij")).reshape(n, -1).T
    vals = np.array([f(h * s) for s in signs])
    weights = np.prod(signs, axis=1)
    return float(np.sum(weights * vals) / (2.0 * h) ** n)


def eval_derivative_fd(
    v0: SpectralVector,
    args: Sequence[SpectralVector],
    steps: Sequence[float] | None = None,
) -> DiffusionValue:
    """Finite-difference oracle for ``eval_derivative_closed``.

    Directions are normalized first and the result rescaled by the product of
    their norms (the derivative is multilinear).  Each step ``h`` in ``steps``
    gives an ``n``-fold mixed central difference; the estimates are then
    extrapolated to ``h -> 0`` as a polynomial in ``h^2``.
    """
    args = tuple(args)
    n = len(args)
    if n < 1:
        raise ValueError("at least one direction is required")
    if steps is None:
        steps = default_fd_steps(n, v0)
    steps = tuple(float(h) for h in steps)
    if not steps:
        raise ValueError("step schedule is empty")
    if any(h <= 0 for h in steps):
        raise ValueError("steps must be positive")

    scales = []
    dirs = []
    for a in args:
        s = float(np.sqrt(np.sum(a.coeffs**2))) if not a.is_zero() else 0.0
        if s == 0.0:
            return DiffusionValue(0.0)
        scales.append(s)
        dirs.append(a.scale(1.0 / s))

    modes = sorted(set(project_tail(v0).modes).union(*(project_tail(d).modes for d in dirs)))
    pos = {k: i for i, k in enumerate(modes)}

    def dense(v: SpectralVector) -> np.ndarray:
        out = np.zeros(len(modes))
        for k, x in zip(v.modes, v.coeffs):
            if k in pos:
                out[pos[k]] = x
        return out

    base = dense(v0)
    mat = np.array([dense(d) for d in dirs])

    def f(tvec: np.ndarray) -> float:
        w = base + tvec @ mat
        return float(np.sqrt(1.0 + w @ w))

    estimates = [_mixed_central(f, n, h) for h in steps]
    # Neville extrapolation in x = h^2 to x = 0
    xs = [h * h for h in steps]
    table = list(estimates)
    for level in range(1, len(table)):
        for i in range(len(table) - 1, level - 1, -1):
            x_far, x_near = xs[i - level], xs[i]
            table[i] = (x_far * table[i] - x_near * table[i - 1]) / (x_far - x_near)
    return DiffusionValue(table[-1] * float(np.prod(scales)))


def derivative_sup_bound(n: int) -> float:
    """``sum over partitions of {1..n}`` of ``(2 k)^k``, ``k`` the number of blocks."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return float(sum((2 * p.num_blocks) ** p.num_blocks for p in enumerate_partitions(n)))
