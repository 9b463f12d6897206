"""Ratio experiments over the structured families, verdicts and CSV output.

For a configuration ``(n, delta, q, t, eps, m)`` and each ``N`` on a geometric
grid the driver evaluates

    R_N = sqrt(E ||X^{n,u_N}_t||^2_{H_{-q}}) / prod_i ||u_{N,i}||_{H_{-delta_i}}

where ``u_N`` is the structured tuple from :func:`derivlab.spectral.test_tuple_u`.
When ``sum(delta) > 1/2`` the configured ``eps`` is divided by ``2 ceil(n/2)``
before it enters the vectors, and ``m`` defaults to the smallest admissible
value, so that the denominators stay bounded while the numerator grows.
"""

from __future__ import annotations

import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .moments import (
    MomentQuery,
    denominator_norms,
    double_sum_inverse_squares,
    lower_bound_combined,
    second_moment_exact,
    second_moment_structured,
)
from .montecarlo import SamplerConfig, estimate_moment, sample_exact
from .spectral import OperatorParams, RegimeError, TestFamilySpec, test_tuple_u

CRITICAL_BAND = 1e-9
MODES = ("exact", "structured", "montecarlo")
CONFIG_KEYS = ("c", "T", "t", "n", "q", "delta", "epsilon", "m", "n_grid_max", "mode", "seed", "out")
DEFAULT_EPS = 0.1
DEFAULT_BOUNDED_EPS = 0.5
DEFAULT_GRID_MAX = 4096
DEFAULT_MC_SAMPLES = 100_000
CSV_COLUMNS = ("N", "numerator", "denominator", "ratio", "lower_bound", "regime")


class ConfigError(ValueError):
    """Malformed configuration; the message names the line and field."""


@dataclass(frozen=True)
class ExperimentConfig:
    n: int
    delta: tuple[float, ...]
    params: OperatorParams = field(default_factory=OperatorParams)
    t: float = 1.0
    q: float = 0.0
    epsilon: float | None = None
    m: int | None = None
    n_grid: tuple[int, ...] = tuple(2**k for k in range(13))
    mode: str = "exact"
    seed: int | None = None
    out: str | None = None
    mc_samples: int = DEFAULT_MC_SAMPLES

    def __post_init__(self) -> None:
        object.__setattr__(self, "delta", tuple(float(d) for d in self.delta))
        if self.n < 1:
            raise ConfigError("field 'n': derivative order must be >= 1")
        if len(self.delta) != self.n:
            raise ConfigError(f"field 'delta': has {len(self.delta)} entries, n={self.n} requires {self.n}")
        if not (0 < self.t <= self.params.T):
            raise ConfigError(f"field 't': must lie in (0, T={self.params.T}], got {self.t}")
        if self.q < 0:
            raise ConfigError("field 'q': must be >= 0")
        grid = self.n_grid
        if not grid or any(a >= b for a, b in zip(grid, grid[1:])) or grid[0] < 1:
            raise ConfigError("N-grid must be nonempty, positive and strictly increasing")
        if self.mode not in MODES:
            raise ConfigError(f"field 'mode': expected one of {', '.join(MODES)}, got {self.mode!r}")
        if self.m is not None and self.m < 0:
            raise ConfigError("field 'm': must be >= 0")

    @property
    def delta_sum(self) -> float:
        return math.fsum(self.delta)

    @property
    def half(self) -> int:
        return (self.n + 1) // 2

    @property
    def regime(self) -> str:
        return classify(self.delta_sum)


def classify(delta_sum: float) -> str:
    if abs(delta_sum - 0.5) < CRITICAL_BAND:
        return "critical"
    return "divergent" if delta_sum > 0.5 else "bounded"


def geometric_grid(n_max: int) -> tuple[int, ...]:
    """``1, 2, 4, ...`` up to ``n_max`` (``n_max`` itself is always included)."""
    if n_max < 1:
        raise ConfigError("field 'n_grid_max': must be >= 1")
    grid = []
    k = 1
    while k < n_max:
        grid.append(k)
        k *= 2
    grid.append(n_max)
    return tuple(grid)


# config parsing -------------------------------------------------------------------

_FLOATS = {"c", "T", "t", "q", "epsilon"}
_INTS = {"n", "m", "n_grid_max", "seed"}


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse flat ``key = value`` text; ``#`` starts a comment."""
    raw: dict[str, tuple[str, int]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, value = (s.strip() for s in body.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown field {key!r}")
        if key in raw:
            raise ConfigError(f"{source}:{lineno}: field {key!r} given twice")
        if not value:
            raise ConfigError(f"{source}:{lineno}: field {key!r} has no value")
        raw[key] = (value, lineno)

    for required in ("n", "delta"):
        if required not in raw:
            raise ConfigError(f"{source}: missing required field {required!r}")

    vals: dict = {}
    for key, (value, lineno) in raw.items():
        where = f"{source}:{lineno}: field {key!r}"
        try:
            if key in _FLOATS:
                vals[key] = float(value)
                if not math.isfinite(vals[key]):
                    raise ValueError
            elif key in _INTS:
                vals[key] = int(value)
            elif key == "delta":
                vals[key] = tuple(float(x) for x in value.split(","))
            else:
                vals[key] = value
        except ValueError:
            raise ConfigError(f"{where}: cannot parse {value!r}") from None

    try:
        params = OperatorParams(vals.get("c", 1.0), vals.get("T", 1.0))
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    if "epsilon" in vals and vals["epsilon"] <= 0:
        raise ConfigError(f"{source}:{raw['epsilon'][1]}: field 'epsilon': must be > 0")
    try:
        return ExperimentConfig(
            n=vals["n"],
            delta=vals["delta"],
            params=params,
            t=vals.get("t", 1.0),
            q=vals.get("q", 0.0),
            epsilon=vals.get("epsilon"),
            m=vals.get("m"),
            n_grid=geometric_grid(vals.get("n_grid_max", DEFAULT_GRID_MAX)),
            mode=vals.get("mode", "exact"),
            seed=vals.get("seed"),
            out=vals.get("out"),
        )
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    return parse_config(text, str(path))


# family resolution ------------------------------------------------------------------


@dataclass(frozen=True)
class ResolvedFamily:
    """The vector-level shift and power index actually used for a configuration."""

    regime: str
    eps: float
    m: int
    theorem_regime: bool

    def spec(self, cfg: ExperimentConfig, N: int) -> TestFamilySpec:
        return TestFamilySpec(cfg.n, self.m, self.eps, cfg.delta, N, self.theorem_regime)


def resolve_family(cfg: ExperimentConfig) -> ResolvedFamily:
    """Pick the family parameters for the configuration's regime.

    Divergent regime: ``eps`` must lie in ``(0, K/2)`` with ``K = ceil(n/2)``;
    the vectors use ``eps / (2K)`` and ``m`` must be at least ``K/(2 eps) - 1``
    (that minimum is the default).  Otherwise ``eps`` (default 1/2) enters the
    vectors as given and ``m`` defaults to 0, which keeps every norm of the
    family convergent in ``N``.
    """
    regime = cfg.regime
    if regime == "divergent":
        K = cfg.half
        eps = DEFAULT_EPS if cfg.epsilon is None else cfg.epsilon
        if not (0 < eps < K / 2):
            raise RegimeError(f"epsilon={eps} outside (0, {K / 2}) for n={cfg.n}")
        m_min = max(0, math.ceil(K / (2 * eps) - 1 - 1e-12))
        m = m_min if cfg.m is None else cfg.m
        if m < m_min:
            raise RegimeError(f"m={m} below the admissible minimum {m_min} for epsilon={eps}, n={cfg.n}")
        return ResolvedFamily(regime, eps / (2 * K), m, True)
    eps = DEFAULT_BOUNDED_EPS if cfg.epsilon is None else cfg.epsilon
    return ResolvedFamily(regime, eps, 0 if cfg.m is None else cfg.m, False)


# ratio series -------------------------------------------------------------------------


@dataclass(frozen=True)
class RatioRow:
    N: int
    numerator: float
    denominator: float
    ratio: float
    lower_bound: float
    regime: str
    numerator_se: float = 0.0


@dataclass(frozen=True)
class RatioSeries:
    rows: tuple[RatioRow, ...]
    regime: str
    delta_sum: float
    eps: float
    m: int

    @property
    def N(self) -> np.ndarray:
        return np.array([r.N for r in self.rows])

    @property
    def ratios(self) -> np.ndarray:
        return np.array([r.ratio for r in self.rows])


def _row(args) -> RatioRow:
    cfg, fam, N = args
    p = cfg.params
    spec = fam.spec(cfg, N)
    se = 0.0
    if cfg.mode == "structured":
        second = second_moment_structured(p, spec, cfg.t, cfg.q).second_moment
    else:
        query = MomentQuery(cfg.n, test_tuple_u(p, spec), cfg.t, cfg.q)
        if cfg.mode == "exact":
            second = second_moment_exact(p, query).second_moment
        else:
            samples = sample_exact(p, query, SamplerConfig(cfg.seed, cfg.mc_samples))
            second, se2 = estimate_moment(samples, cfg.q)
            se = se2 / (2.0 * math.sqrt(second)) if second > 0 else 0.0
    numerator = math.sqrt(second)
    denominator = math.prod(denominator_norms(p, spec))
    lower = math.nan
    if fam.theorem_regime and spec.delta_sum >= 0.5 + 2 * spec.half * spec.eps - 1e-12:
        try:
            lower = lower_bound_combined(p, spec, cfg.t, cfg.q)
        except RegimeError:
            lower = math.nan
    return RatioRow(N, numerator, denominator, numerator / denominator, lower, fam.regime, se)


def ratio_series(cfg: ExperimentConfig, workers: int | None = None) -> RatioSeries:
    """Evaluate numerator, denominator, ratio and lower bound on every grid point.

    ``workers > 1`` spreads grid points over processes; rows stay in grid order.
    """
    if cfg.mode == "montecarlo" and cfg.seed is None:
        raise ConfigError("field 'seed': required when mode = montecarlo")
    fam = resolve_family(cfg)
    jobs = [(cfg, fam, N) for N in cfg.n_grid]
    if workers and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_row, jobs))
    else:
        rows = [_row(j) for j in jobs]
    return RatioSeries(tuple(rows), fam.regime, cfg.delta_sum, fam.eps, fam.m)


# verdicts ---------------------------------------------------------------------------


def growth_signature(series: RatioSeries) -> dict[str, float]:
    """Statistics of ``R_N^2 / S_N`` with ``S_N = sum_{j,k<=N} 1/(j^2+k^2)`` over the top half."""
    rows = series.rows
    top = rows[len(rows) // 2 :]
    s = np.array([double_sum_inverse_squares(r.N) for r in top])
    g = np.array([r.ratio**2 for r in top]) / s
    slope = float(np.polyfit(np.log(s), np.log(g), 1)[0]) if len(top) >= 2 else math.nan
    return {"points": float(len(top)), "liminf": float(np.min(g)), "slope": slope}


def verdict(series: RatioSeries, delta_sum: float) -> str:
    """``critical``, ``divergent``, ``bounded`` or ``inconclusive``.

    Divergent: ``R_N`` strictly increasing, at least three points in the top
    half of the grid, ``R_N^2 / S_N`` positive there with a log-log slope
    against ``S_N`` of at least -1/4 (a bounded ratio would give slope -1).
    Bounded: ``R`` at the largest ``N`` within 5% of ``R`` at a quarter of it.
    """
    if abs(delta_sum - 0.5) < CRITICAL_BAND:
        return "critical"
    if not series.rows:
        raise ValueError("empty series")
    r = series.ratios
    if len(r) >= 2 and np.all(np.diff(r) > 0):
        sig = growth_signature(series)
        if sig["points"] >= 3 and sig["liminf"] > 0 and sig["slope"] >= -0.25:
            return "divergent"
    n_max = series.rows[-1].N
    quarter = [row.ratio for row in series.rows if row.N * 4 == n_max]
    if quarter and abs(r[-1] - quarter[0]) <= 0.05 * abs(quarter[0]):
        return "bounded"
    return "inconclusive"


# output -------------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.16e}"


def series_to_csv(series: RatioSeries) -> str:
    buf = io.StringIO(newline="")
    buf.write(",".join(CSV_COLUMNS) + "\n")
    for row in series.rows:
        fields = [str(row.N), _fmt(row.numerator), _fmt(row.denominator), _fmt(row.ratio), _fmt(row.lower_bound), row.regime]
        buf.write(",".join(fields) + "\n")
    return buf.getvalue()


def write_csv(series: RatioSeries, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(series_to_csv(series))


EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_REGIME = 3
EXIT_INCONCLUSIVE = 4


@dataclass(frozen=True)
class RunOutcome:
    status: int
    summary: str
    series: RatioSeries | None = None
    verdict: str | None = None
    out: str | None = None


def run_config(path, *, strict: bool = False, workers: int | None = None, out: str | None = None) -> RunOutcome:
    """Load a config, run the ratio series, write the CSV and summarize.

    Exit status 2 on config errors, 3 on regime violations, and with
    ``strict`` 4 when the verdict is inconclusive or disagrees with the regime
    implied by ``sum(delta)``.
    """
    try:
        cfg = load_config(path)
        if out is not None:
            cfg = replace(cfg, out=out)
        series = ratio_series(cfg, workers=workers)
    except ConfigError as exc:
        return RunOutcome(EXIT_CONFIG, f"config error: {exc}")
    except RegimeError as exc:
        return RunOutcome(EXIT_REGIME, f"regime violation: {exc}")
    v = verdict(series, cfg.delta_sum)
    if cfg.out:
        write_csv(series, cfg.out)
    summary = (
        f"verdict={v} expected={series.regime} n={cfg.n} delta_sum={cfg.delta_sum:.6g} "
        f"eps_vector={series.eps:.6g} m={series.m} N_max={cfg.n_grid[-1]} "
        f"R_max={series.rows[-1].ratio:.6e}"
    )
    status = EXIT_OK
    if strict and v != series.regime:
        status = EXIT_INCONCLUSIVE
    return RunOutcome(status, summary, series, v, cfg.out)
