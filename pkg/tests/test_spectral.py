import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from derivlab.spectral import (
    DerivativeTuple,
    OperatorParams,
    RegimeError,
    SpectralVector,
    TestFamilySpec,
    big_norm_bound,
    frac_power_apply,
    hr_norm,
    inner,
    min_power_index,
    norm,
    project_tail,
    select_theta,
    semigroup_apply,
    small_norm_bound,
    test_tuple_u,
    test_vector_v,
)

e = SpectralVector.basis
P1 = OperatorParams(1.0, 1.0)


def vec(d):
    return SpectralVector.from_dict(d)


def assert_vec_close(a, b, rtol=1e-14):
    assert a.modes == b.modes
    np.testing.assert_allclose(a.coeffs, b.coeffs, rtol=rtol, atol=0)


vectors = st.dictionaries(
    st.integers(1, 40), st.floats(-5, 5, allow_nan=False).filter(lambda x: abs(x) > 1e-6), min_size=1, max_size=8
).map(vec)


def test_canonical_form():
    v = SpectralVector.from_arrays([3, 1, 3, 2], [1.0, 2.0, -1.0, 4.0])
    assert v.modes == (1, 2)
    with pytest.raises(ValueError):
        SpectralVector((2, 1), np.array([1.0, 1.0]))
    with pytest.raises(ValueError):
        SpectralVector((0,), np.array([1.0]))
    with pytest.raises(ValueError):
        SpectralVector((1,), np.array([0.0]))


def test_semigroup_examples():
    assert_vec_close(semigroup_apply(P1, 0.5, e(3)), e(3).scale(math.exp(-4.5)))
    v = vec({1: 1.0, 2: 1.0})
    assert semigroup_apply(OperatorParams(3.0), 0.0, v) == v
    assert_vec_close(semigroup_apply(P1, 1.0, v), vec({1: math.exp(-1), 2: math.exp(-4)}))
    with pytest.raises(ValueError):
        semigroup_apply(P1, -1.0, v)


def test_semigroup_underflow_cleanup():
    v = vec({1: 1.0, 100: 1.0})
    out = semigroup_apply(P1, 1.0, v)
    assert out.modes == (1,)


def test_frac_power_examples():
    assert_vec_close(frac_power_apply(P1, 0.5, e(2)), e(2).scale(2.0))
    v = vec({2: 1.5, 7: -2.0})
    assert frac_power_apply(P1, 0.0, v) == v
    assert_vec_close(frac_power_apply(P1, -1.0, e(3)), e(3).scale(1 / 9))


def test_projection_examples():
    assert project_tail(e(1)).is_zero()
    assert project_tail(e(2)) == e(2)
    assert project_tail(vec({1: 3.0, 5: 2.0})) == vec({5: 2.0})


def test_norm_examples():
    assert hr_norm(P1, -0.5, e(2)) == pytest.approx(0.5, rel=1e-15)
    assert hr_norm(P1, 0.0, e(7)) == 1.0
    assert hr_norm(P1, -0.25, vec({1: 1.0, 2: 1.0})) == pytest.approx(math.sqrt(1.5), rel=1e-15)


def test_inner_examples():
    assert inner(e(1), e(2)) == 0.0
    assert inner(e(2), e(2)) == 1.0
    assert inner(vec({3: 2.0, 4: 1.0}), vec({3: 1.0, 4: -1.0})) == 1.0


def test_hr_norm_handles_huge_modes():
    v = SpectralVector((2**100,), np.array([1.0]))
    assert hr_norm(P1, -1.0, v) == pytest.approx(2.0**-200, rel=1e-13)


@settings(max_examples=80, deadline=None)
@given(vectors, st.floats(0, 0.05), st.floats(0, 0.05), st.floats(0.2, 3.0))
def test_semigroup_law(v, s, t, c):
    p = OperatorParams(c)
    lhs = semigroup_apply(p, s + t, v)
    rhs = semigroup_apply(p, s, semigroup_apply(p, t, v))
    assert lhs.modes == rhs.modes
    np.testing.assert_allclose(lhs.coeffs, rhs.coeffs, rtol=1e-12, atol=0)


@settings(max_examples=80, deadline=None)
@given(vectors, st.integers(-8, 8), st.integers(-8, 8))
def test_power_law_on_dyadic_exponents(v, a, b):
    r, s = a / 4, b / 4
    lhs = frac_power_apply(P1, r, frac_power_apply(P1, s, v))
    rhs = frac_power_apply(P1, r + s, v)
    np.testing.assert_allclose(lhs.coeffs, rhs.coeffs, rtol=1e-12, atol=0)


@settings(max_examples=80, deadline=None)
@given(vectors, st.floats(-2, 2), st.floats(0.3, 4.0))
def test_projection_and_norm_properties(v, r, c):
    p = OperatorParams(c)
    pv = project_tail(v)
    assert project_tail(pv) == pv
    assert inner(pv, e(1)) == 0.0
    assert norm(pv) <= norm(v)
    assert hr_norm(p, r, v) == pytest.approx(hr_norm(p, 0.0, frac_power_apply(p, r, v)), rel=1e-12)


def test_test_vector_examples():
    assert test_vector_v(P1, 1, 0.0, 2, 3) == vec({3: 1.0, 5: 1.0, 7: 1.0})
    assert_vec_close(test_vector_v(P1, 1, 1.0, 1, 1), e(2).scale(4.0))
    assert test_vector_v(P1, 0, 0.0, 1, 2) == vec({1: 1.0, 2: 1.0})
    for bad in [(1, 0.0, 0, 3), (1, 0.0, 2, 0), (-1, 0.0, 1, 1)]:
        with pytest.raises(ValueError):
            test_vector_v(P1, *bad)


def test_test_vector_matches_frac_power_of_indicator():
    p = OperatorParams(2.5)
    base = vec({2 + 3 * j: 1.0 for j in range(1, 6)})
    assert_vec_close(test_vector_v(p, 2, -0.35, 3, 5), frac_power_apply(p, -0.35, base), rtol=1e-13)


def test_tuple_examples():
    spec = TestFamilySpec(1, 0, 0.1, (1.0,), 2)
    tup = test_tuple_u(P1, spec)
    assert_vec_close(tup[0], test_vector_v(P1, 1, -0.1, 1, 2))
    assert_vec_close(tup[1], test_vector_v(P1, 1, 0.4, 1, 2))

    spec = TestFamilySpec(2, 0, 0.1, (0.3, 0.3), 1)
    tup = test_tuple_u(P1, spec)
    assert tup[0] == e(1)
    assert_vec_close(tup[1], test_vector_v(P1, 1, 0.2, 1, 1))
    assert_vec_close(tup[2], test_vector_v(P1, 1, -0.3, 1, 1), rtol=1e-13)


def test_tuple_layout_for_odd_order():
    spec = TestFamilySpec(5, 2, 0.1, (0.1, 0.2, 0.3, 0.4, 0.5), 3)
    tup = test_tuple_u(P1, spec)
    S = 3 * 3**2
    assert len(tup) == 6
    assert_vec_close(tup[0], test_vector_v(P1, 3, -0.1, S, 3))
    offsets = [1, 1, 2, 2]
    for i, k in enumerate(offsets, start=1):
        assert_vec_close(tup[i], test_vector_v(P1, k, spec.delta[i - 1] - 0.1, S, 3))
    assert_vec_close(tup[5], test_vector_v(P1, 3, 0.5 - 0.5 - 0.1, S, 3).scale(9.0), rtol=1e-13)


@settings(max_examples=40, deadline=None)
@given(
    st.integers(1, 6),
    st.integers(0, 3),
    st.floats(0.01, 0.6),
    st.integers(1, 6),
    st.lists(st.floats(-1, 1), min_size=6, max_size=6),
)
def test_tuple_entries_nonzero_and_finite(n, m, eps, N, deltas):
    spec = TestFamilySpec(n, m, eps, tuple(deltas[:n]), N)
    tup = test_tuple_u(P1, spec)
    assert len(tup) == n + 1
    for v in tup:
        assert not v.is_zero()
        assert np.all(np.isfinite(v.coeffs))


@pytest.mark.parametrize("n, N", [(2, 5), (4, 3), (6, 2)])
def test_offset_families_are_orthogonal(n, N):
    p = OperatorParams(0.7)
    S = n * N**2
    for t in [0.0, 1e-3]:
        for k1 in range(1, n + 1):
            for k2 in range(1, n + 1):
                if k1 == k2:
                    continue
                a = project_tail(semigroup_apply(p, t, test_vector_v(p, k1, 0.3, S, N)))
                b = semigroup_apply(p, t, test_vector_v(p, k2, -0.2, S, N))
                assert inner(a, b) == 0.0


def test_select_theta():
    a, b, c = e(1), e(2), e(3)
    assert select_theta(1, (a, b, c)) == a
    assert select_theta(3, DerivativeTuple.of(a, b, c)) == c
    with pytest.raises(IndexError):
        select_theta(4, (a, b, c))


def test_regime_flag_enforced():
    TestFamilySpec(1, 2, 0.1, (1.0,), 1, theorem_regime=True)
    with pytest.raises(RegimeError):
        TestFamilySpec(1, 1, 0.1, (1.0,), 1, theorem_regime=True)
    with pytest.raises(RegimeError):
        TestFamilySpec(1, 5, 0.3, (1.0,), 1, theorem_regime=True)
    assert min_power_index(0.1) == 2
    assert min_power_index(0.05) == 4
    assert min_power_index(0.2) == 1


def test_zeta_against_partial_sum_bracket():
    # the tail sum over j > J lies between the integrals of x^-s from J+1 and from J
    for eps in [0.025, 0.05, 0.1, 0.2]:
        s = 2 + 4 * eps
        J = 200_000
        partial = math.fsum(float(j) ** -s for j in range(1, J + 1))
        upper = partial + J ** (1 - s) / (s - 1)
        lower = partial + (J + 1) ** (1 - s) / (s - 1)
        z = big_norm_bound(P1, eps)
        assert lower <= z * (1 + 1e-15) and z <= upper * (1 + 1e-15)


@pytest.mark.parametrize("eps, c", [(0.1, 1.0), (0.05, 1.0), (0.2, 2.5), (0.1, 0.4)])
def test_denominator_bounds_on_grid(eps, c):
    p = OperatorParams(c)
    m = min_power_index(eps)
    for n in [1, 2, 3]:
        for N in [2**k for k in range(0, 13, 2)]:
            S = n * N**m
            small = max(hr_norm(p, 0.0, test_vector_v(p, i, -eps, S, N)) ** 2 for i in range(1, n + 1))
            big = float(N) ** (2 * m) * hr_norm(p, 0.0, test_vector_v(p, n, -0.5 - eps, S, N)) ** 2
            assert small <= small_norm_bound(p, eps)
            assert big <= big_norm_bound(p, eps)
