"""The ten acceptance criteria, each printing one PASS/FAIL line."""

import math
import time

import numpy as np

from derivlab import experiments as ex
from derivlab.diffusion import derivative_sup_bound, eval_derivative_closed, eval_derivative_fd
from derivlab.moments import (
    MomentQuery,
    double_sum_inverse_squares,
    second_moment_exact,
    second_moment_structured,
)
from derivlab.montecarlo import SamplerConfig, estimate_moment, euler_refinement_study, sample_exact
from derivlab.setpart import enumerate_partitions, extend_recursive
from derivlab.spectral import (
    DerivativeTuple,
    OperatorParams,
    SpectralVector,
    TestFamilySpec,
    min_power_index,
    norm,
    test_tuple_u,
)
from oracles import brute_force_partition_count

e = SpectralVector.basis
Z = SpectralVector.zero()
P1 = OperatorParams(1.0, 1.0)


def random_vector(rng):
    return SpectralVector.from_arrays(range(1, 11), rng.uniform(-2.0, 2.0, 10))


def as_sets(family):
    return {frozenset(frozenset(b) for b in p.blocks) for p in family}


def test_criterion_01_partition_oracle(record_criterion):
    start = time.perf_counter()
    counts = [len(enumerate_partitions(n)) for n in range(9)]
    oracle = [brute_force_partition_count(n) for n in range(9)]
    # the recursion presupposes an existing partition, so it starts at n = 1
    extend_ok = all(as_sets(extend_recursive(enumerate_partitions(n))) == as_sets(enumerate_partitions(n + 1)) for n in range(1, 8))
    elapsed = time.perf_counter() - start
    ok = counts == oracle and extend_ok and elapsed < 5.0
    record_criterion(1, ok, f"counts={counts} extend_ok={extend_ok} time={elapsed:.2f}s")
    assert ok


def test_criterion_02_derivative_oracle(record_criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(20240201)
    worst = 0.0
    for n in [1, 2, 3, 4]:
        for _ in range(50):
            v0 = random_vector(rng)
            args = [random_vector(rng) for _ in range(n)]
            closed = eval_derivative_closed(v0, args).scalar
            fd = eval_derivative_fd(v0, args).scalar
            worst = max(worst, abs(closed - fd) / max(1.0, abs(closed)))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-5 and elapsed < 30.0
    record_criterion(2, ok, f"max_rel_err={worst:.2e} time={elapsed:.2f}s")
    assert ok


def test_criterion_03_global_bound(record_criterion):
    rng = np.random.default_rng(3)
    violations = 0
    worst = 0.0
    for n in range(1, 6):
        bound = derivative_sup_bound(n)
        for _ in range(10_000):
            v0 = random_vector(rng).scale(10.0 ** rng.uniform(-2, 2))
            args = [random_vector(rng) for _ in range(n)]
            ratio = abs(eval_derivative_closed(v0, args).scalar) / math.prod(norm(a) for a in args)
            worst = max(worst, ratio / bound)
            violations += ratio > bound
    ok = violations == 0
    record_criterion(3, ok, f"violations={violations} max_ratio_over_bound={worst:.3e}")
    assert ok


def test_criterion_04_ito_isometry(record_criterion):
    start = time.perf_counter()
    cases = [
        (MomentQuery(0, DerivativeTuple.of(Z), 1.0), (1 - math.exp(-2)) / 2),
        (MomentQuery(1, DerivativeTuple.of(Z, e(1)), 1.0), math.exp(-2)),
        (MomentQuery(2, DerivativeTuple.of(e(1), e(2), e(2)), 1.0), math.exp(-2) * (1 - math.exp(-14)) / 14),
    ]
    worst_rel = 0.0
    worst_z = 0.0
    mc_ok = True
    for i, (query, closed) in enumerate(cases):
        exact = second_moment_exact(P1, query).second_moment
        worst_rel = max(worst_rel, abs(exact - closed) / closed)
        mean, se = estimate_moment(sample_exact(P1, query, SamplerConfig(100 + i, 100_000)))
        mc_ok &= abs(mean - exact) <= 4 * se + 1e-12 * abs(exact)
        if se > 0:
            worst_z = max(worst_z, abs(mean - exact) / se)
    elapsed = time.perf_counter() - start
    ok = worst_rel <= 1e-12 and mc_ok and elapsed < 60.0
    record_criterion(4, ok, f"max_rel_err={worst_rel:.2e} max_|z|={worst_z:.2f} time={elapsed:.2f}s")
    assert ok


def test_criterion_05_dual_path(record_criterion):
    start = time.perf_counter()
    eps = 0.1
    m = min_power_index(eps)
    worst = 0.0
    for n in range(1, 6):
        delta = tuple(0.3 for _ in range(n))
        for N in [2**k for k in range(7)]:
            spec = TestFamilySpec(n, m, eps, delta, N, theorem_regime=True)
            a = second_moment_exact(P1, MomentQuery(n, test_tuple_u(P1, spec), 1.0)).second_moment
            b = second_moment_structured(P1, spec, 1.0).second_moment
            worst = max(worst, abs(a - b) / abs(a))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-9 and elapsed < 120.0
    record_criterion(5, ok, f"max_rel_diff={worst:.2e} time={elapsed:.2f}s")
    assert ok


def test_criterion_06_bounded_half(record_criterion):
    details = []
    ok = True
    for n, delta in [(1, (0.25,)), (2, (0.2, 0.2)), (3, (0.1, 0.1, 0.1))]:
        cfg = ex.ExperimentConfig(n=n, delta=delta, q=0.0, n_grid=tuple(2**k for k in range(13)))
        r = ex.ratio_series(cfg).ratios
        change = abs(r[-1] - r[-3]) / abs(r[-3])
        ok &= change <= 0.05
        details.append(f"n={n}:{change:.1e}")
    record_criterion(6, ok, "plateau_change " + " ".join(details))
    assert ok


def test_criterion_07_divergent_half(record_criterion):
    start = time.perf_counter()
    details = []
    ok = True
    for n, delta in [(1, (1.0,)), (2, (0.3, 0.3)), (3, (0.2, 0.2, 0.2))]:
        cfg = ex.ExperimentConfig(n=n, delta=delta, n_grid=tuple(2**k for k in range(13)))
        series = ex.ratio_series(cfg)
        dominated = all(row.numerator**2 >= row.lower_bound > 0 for row in series.rows)
        increasing = bool(np.all(np.diff(series.ratios) > 0))
        top = series.rows[len(series.rows) // 2 :]
        liminf = min(row.ratio**2 / double_sum_inverse_squares(row.N) for row in top)
        ok &= dominated and increasing and liminf > 0
        details.append(f"n={n}:dom={dominated},inc={increasing},liminf={liminf:.2e}")
    elapsed = time.perf_counter() - start
    ok &= elapsed < 300.0
    record_criterion(7, ok, " ".join(details) + f" time={elapsed:.1f}s")
    assert ok


def test_criterion_08_projection_structure(record_criterion):
    rng = np.random.default_rng(8)
    nonzero = 0
    for n in [2, 3]:
        tup = DerivativeTuple(tuple(random_vector(rng) for _ in range(n + 1)))
        samples = sample_exact(P1, MomentQuery(n, tup, 1.0), SamplerConfig(n, 1000))
        for v in samples:
            nonzero += sum(1 for mode, coef in zip(v.modes, v.coeffs) if mode >= 2 and coef != 0.0)
    ok = nonzero == 0
    record_criterion(8, ok, f"nonzero_tail_coefficients={nonzero} draws=2000")
    assert ok


def test_criterion_09_euler_cross_check(record_criterion):
    study = euler_refinement_study(P1, Z, 1.0, seed=9, samples=1 << 18)
    target = (1 - math.exp(-2)) / 2
    ok = study.observed_order >= 0.5 and study.final_error < 0.01 and abs(study.exact - target) <= 1e-12 * target
    record_criterion(9, ok, f"order={study.observed_order:.3f} final_rel_err={study.final_error:.2e}")
    assert ok


def test_criterion_10_determinism(record_criterion, tmp_path):
    cfg = tmp_path / "det.cfg"
    cfg.write_text("n = 2\ndelta = 0.3, 0.3\nn_grid_max = 16\nmode = montecarlo\nseed = 12345\n")
    outputs = []
    for i in range(2):
        out = tmp_path / f"run{i}.csv"
        res = ex.run_config(cfg, out=str(out))
        assert res.status == ex.EXIT_OK
        outputs.append(out.read_bytes())
    cfg2 = tmp_path / "det_exact.cfg"
    cfg2.write_text("n = 1\ndelta = 1\nn_grid_max = 64\n")
    for i in range(2):
        out = tmp_path / f"exact{i}.csv"
        ex.run_config(cfg2, out=str(out))
        outputs.append(out.read_bytes())
    ok = outputs[0] == outputs[1] and outputs[2] == outputs[3]
    record_criterion(10, ok, f"csv_bytes={len(outputs[0])},{len(outputs[2])} identical={ok}")
    assert ok
