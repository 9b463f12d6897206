"""Monte Carlo cross-checks: exact Gaussian sampling and exponential Euler paths.

Random numbers come from the counter-based Philox4x64 generator in numpy.  A
draw is addressed by ``(seed, stream, word)``: the key is ``(seed, stream)``
and ``word`` indexes the 64-bit output sequence, so any sample or time step
can be regenerated independently of the others.  Uniforms use the top 53 bits
of a word, shifted to the open interval (0, 1), and normals are obtained with
the inverse normal CDF.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .diffusion import eval_B
from .moments import MomentQuery, second_moment_exact
from .spectral import (
    OperatorParams,
    SpectralVector,
    hr_norm,
    project_tail,
    semigroup_apply,
)

STREAM_EXACT = 0
STREAM_EULER = 1
_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class SamplerConfig:
    seed: int
    samples: int = 1
    steps: int = 1

    def __post_init__(self) -> None:
        if isinstance(self.seed, bool) or not isinstance(self.seed, (int, np.integer)):
            raise ValueError("seed must be an integer")
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


def counter_normals(seed: int, stream: int, start: int, count: int) -> np.ndarray:
    """Standard normals for words ``start .. start+count-1`` of ``(seed, stream)``."""
    if start < 0 or count < 0:
        raise ValueError("start and count must be >= 0")
    block, skip = divmod(int(start), 4)
    counter = [(block >> (64 * i)) & _MASK64 for i in range(4)]
    gen = np.random.Philox(key=[int(seed) & _MASK64, int(stream) & _MASK64], counter=counter)
    words = gen.random_raw(count + skip)[skip:]
    u = ((words >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    return ndtri(u)


class GaussianSampleSet(Sequence):
    """Samples ``D + G_i e_1`` sharing a deterministic part ``D``.

    Indexing yields :class:`SpectralVector`; ``e1`` holds the full mode-1
    coefficients as an array for vectorized statistics.
    """

    def __init__(self, params: OperatorParams, deterministic: SpectralVector, e1: np.ndarray):
        self.params = params
        self.deterministic = deterministic
        self.e1 = np.asarray(e1, dtype=np.float64)
        self.e1.flags.writeable = False

    def __len__(self) -> int:
        return self.e1.size

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        coeffs = self.deterministic.as_dict()
        coeffs[1] = float(self.e1[i])
        return SpectralVector.from_dict(coeffs)

    def squared_norms(self, q: float) -> np.ndarray:
        """``||sample||^2_{H_{-q}}`` for every sample."""
        tail = hr_norm(self.params, -q, project_tail(self.deterministic)) ** 2
        return tail + self.params.c ** (-2.0 * q) * self.e1**2


def sample_exact(p: OperatorParams, query: MomentQuery, cfg: SamplerConfig) -> GaussianSampleSet:
    """Draw ``cfg.samples`` values of the derivative process at ``query.t`` exactly in law."""
    det = semigroup_apply(p, query.t, query.tuple[query.n]) if query.n <= 1 else SpectralVector.zero()
    sigma = math.sqrt(second_moment_exact(p, query).sigma2)
    z = counter_normals(cfg.seed, STREAM_EXACT, 0, cfg.samples)
    return GaussianSampleSet(p, det, det.coefficient(1) + sigma * z)


@dataclass(frozen=True)
class SamplePath:
    times: np.ndarray
    states: tuple[SpectralVector, ...]


def simulate_exponential_euler(
    p: OperatorParams, x: SpectralVector, t: float, cfg: SamplerConfig, path_index: int = 0
) -> SamplePath:
    """One exponential Euler path ``X_{k+1} = e^{hA}(X_k + B(X_k) dW_k)`` on ``k t/steps``."""
    if not (0 < t <= p.T):
        raise ValueError(f"t must lie in (0, T={p.T}], got {t}")
    steps = cfg.steps
    h = t / steps
    times = np.linspace(0.0, t, steps + 1)
    dw = math.sqrt(h) * counter_normals(cfg.seed, STREAM_EULER, path_index * steps, steps)
    states = [x]
    state = x
    for k in range(steps):
        kick = SpectralVector.basis(1).scale(eval_B(state).scalar * dw[k])
        state = semigroup_apply(p, h, state + kick)
        states.append(state)
    return SamplePath(times, tuple(states))


def euler_terminal_e1(
    p: OperatorParams,
    x: SpectralVector,
    t: float,
    cfg: SamplerConfig,
    levels: Sequence[int],
    chunk: int = 1 << 13,
) -> dict[int, np.ndarray]:
    """Terminal ``e_1`` coefficients of coupled Euler paths at several step counts.

    Every level is driven by the same Brownian path: increments on the finest
    grid (``cfg.steps`` steps) are summed in groups to form the coarser ones.
    Modes >= 2 are deterministic along an Euler path (the noise only enters
    ``e_1``), so ``B(X_k)`` is a known number ``b_k`` and the ``e_1`` recursion
    ``y_{k+1} = d (y_k + b_k dW_k)`` with ``d = exp(-c h)`` unrolls to
    ``y_L = d^L y_0 + sum_k d^{L-k} b_k dW_k``, one matrix-vector product per
    level and chunk of samples.
    """
    fine = cfg.steps
    for L in levels:
        if L < 1 or fine % L:
            raise ValueError(f"level {L} does not divide the finest step count {fine}")
    tail = project_tail(x)
    x1 = x.coefficient(1)
    weights = {}
    start = {}
    for L in levels:
        h = t / L
        b = np.array([eval_B(semigroup_apply(p, k * h, tail)).scalar for k in range(L)])
        decay_pow = np.exp(-p.c * h * np.arange(L, 0, -1))
        # each coarse increment is a sum of fine ones, so repeat its weight
        weights[L] = np.repeat(decay_pow * b, fine // L)
        start[L] = x1 * math.exp(-p.c * t)
    out = {L: np.empty(cfg.samples) for L in levels}
    hf = t / fine
    for lo in range(0, cfg.samples, chunk):
        m = min(chunk, cfg.samples - lo)
        dw = math.sqrt(hf) * counter_normals(cfg.seed, STREAM_EULER, lo * fine, m * fine).reshape(m, fine)
        for L in levels:
            out[L][lo : lo + m] = start[L] + dw @ weights[L]
    return out


def mean_and_se(values) -> tuple[float, float]:
    """Sample mean and standard error, with a shift by the first value.

    The shift makes the standard error exactly zero for constant input.
    """
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size < 2:
        raise ValueError("at least two samples are required")
    d = x - x[0]
    md = float(np.mean(d))
    var = float(np.sum((d - md) ** 2)) / (x.size - 1)
    return float(x[0] + md), math.sqrt(var / x.size)


def estimate_moment(samples, q: float = 0.0, params: OperatorParams | None = None) -> tuple[float, float]:
    """Mean and standard error of ``||sample||^2_{H_{-q}}``."""
    if isinstance(samples, GaussianSampleSet):
        values = samples.squared_norms(q)
    else:
        params = params or OperatorParams()
        values = [hr_norm(params, -q, v) ** 2 for v in samples]
    return mean_and_se(values)


def sample_moments(x) -> dict[str, float]:
    """Skewness and excess kurtosis (biased estimators) of a 1-D sample."""
    x = np.asarray(x, dtype=np.float64)
    d = x - np.mean(x)
    m2 = float(np.mean(d**2))
    return {
        "skewness": float(np.mean(d**3)) / m2**1.5,
        "excess_kurtosis": float(np.mean(d**4)) / m2**2 - 3.0,
    }


@dataclass(frozen=True)
class RefinementStudy:
    steps: tuple[int, ...]
    means: tuple[float, ...]
    std_errors: tuple[float, ...]
    exact: float
    observed_order: float

    @property
    def final_error(self) -> float:
        return abs(self.means[-1] - self.exact) / abs(self.exact)


def euler_refinement_study(
    p: OperatorParams,
    x: SpectralVector,
    t: float,
    seed: int,
    samples: int,
    levels: Sequence[int] = tuple(2**k for k in range(4, 13)),
) -> RefinementStudy:
    """Second moment of coupled Euler paths across ``levels`` against the exact value.

    The observed order is the least-squares slope of
    ``log|m(L) - m(2L)|`` against ``log(1/L)`` over successive levels
    (self-convergence of the coupled estimates).
    """
    levels = tuple(sorted(levels))
    cfg = SamplerConfig(seed, samples, levels[-1])
    e1 = euler_terminal_e1(p, x, t, cfg, levels)
    tail = hr_norm(p, 0.0, semigroup_apply(p, t, project_tail(x))) ** 2
    stats = [mean_and_se(tail + e1[L] ** 2) for L in levels]
    means = tuple(s[0] for s in stats)
    diffs = np.abs(np.diff(means))
    hs = np.array([t / L for L in levels[:-1]])
    order = float(np.polyfit(np.log(hs), np.log(diffs), 1)[0])
    exact = second_moment_exact(p, MomentQuery(0, (x,), t)).second_moment
    return RefinementStudy(levels, means, tuple(s[1] for s in stats), exact, order)
