import math

import numpy as np
import pytest
from scipy.special import i0
from hypothesis import given
from hypothesis import strategies as st

from nhecontrol.errors import ResolutionError
from nhecontrol.potentials import mu_closed_form, mu_field
from nhecontrol.spectral import (TorusField, b_operator, basis_coeff, basis_coeffs, cos_mode,
                                 field_from_basis, ground_state, ground_state_value,
                                 heat_semigroup, hs_norm, pointwise_exp_scale, pointwise_power,
                                 read_field_csv, sin_mode, write_field_csv)

N = 128
coef = st.floats(-1.0, 1.0, allow_nan=False)


def trig(c, s, n=N):
    return field_from_basis(c, s, n)


@st.composite
def trig_fields(draw, kmax=6, n=N):
    c = draw(st.lists(coef, min_size=kmax + 1, max_size=kmax + 1))
    s = draw(st.lists(coef, min_size=kmax, max_size=kmax))
    return trig(c, s, n)


def field(func, n=N):
    return TorusField.from_function(func, n)


# TorusField and the eigenbasis

@given(trig_fields())
def test_parseval(f):
    v = f.values()
    quad = math.sqrt(np.sum(v**2) * 2 * math.pi / len(v))
    assert hs_norm(f, 0) == pytest.approx(quad, rel=1e-10, abs=1e-14)


@given(trig_fields())
def test_hermitian_symmetry(f):
    assert f.hermitian_defect() <= 1e-15


def test_random_values_give_real_field():
    rng = np.random.default_rng(1)
    f = TorusField.from_values(rng.normal(size=64))
    assert f.hermitian_defect() <= 1e-15


def test_orthonormal_basis_by_quadrature():
    modes = [cos_mode(k, 64) for k in range(6)] + [sin_mode(k, 64) for k in range(1, 6)]
    x = 2 * np.pi * np.arange(64) / 64
    for i, a in enumerate(modes):
        for j, b in enumerate(modes):
            ip = float(np.sum(a.values() * b.values()) * (x[1] - x[0]))
            assert ip == pytest.approx(float(i == j), abs=1e-10)


def test_basis_coeff_examples():
    assert basis_coeff(cos_mode(3), "c3") == pytest.approx(1.0, abs=1e-14)
    assert basis_coeff(cos_mode(3), "s3") == pytest.approx(0.0, abs=1e-14)
    assert basis_coeff(sin_mode(2), ("s", 2)) == pytest.approx(1.0, abs=1e-14)


def test_basis_coeff_mu1_closed_form():
    m1 = mu_field(1)
    expected = 96 * math.pi * (4 * math.pi**2 - 15) / 2**6
    assert basis_coeff(m1, "c2") * math.sqrt(math.pi) == pytest.approx(expected, rel=1e-8)
    assert mu_closed_form(1, 2) == pytest.approx(expected, rel=1e-15)


def test_basis_coeff_rejects_2d():
    with pytest.raises(ValueError):
        basis_coeff(TorusField.zeros(16, 2), "c1")


@given(trig_fields())
def test_field_from_basis_round_trip(f):
    c, s = basis_coeffs(f, 6)
    assert trig(c, s).allclose(f, atol=1e-15)


# Sobolev norms

def test_hs_norm_examples():
    assert hs_norm(ground_state(), 0) == pytest.approx(1.0, abs=1e-15)
    assert hs_norm(cos_mode(1), 1) == pytest.approx(math.sqrt(2), rel=1e-14)
    assert hs_norm(TorusField.zeros(N), 2) == 0.0


@given(trig_fields())
def test_hs_norm_monotone_in_s(f):
    norms = [hs_norm(f, s) for s in range(4)]
    assert all(a <= b * (1 + 1e-14) for a, b in zip(norms, norms[1:]))


def test_hs_norm_rejects_large_index():
    with pytest.raises(ValueError):
        hs_norm(ground_state(), 4)


# Heat semigroup

def test_heat_examples():
    assert heat_semigroup(cos_mode(1), 0.1).allclose(cos_mode(1) * math.exp(-0.1), 1e-15)
    assert heat_semigroup(cos_mode(2), 0.5).allclose(cos_mode(2) * math.exp(-2.0), 1e-15)
    f = cos_mode(3) + sin_mode(1)
    assert heat_semigroup(f, 0.0).allclose(f, 0.0)
    with pytest.raises(ValueError):
        heat_semigroup(f, -1e-3)


@given(trig_fields(), st.floats(0, 1), st.floats(0, 1))
def test_semigroup_law(f, t1, t2):
    a = heat_semigroup(heat_semigroup(f, t1), t2)
    b = heat_semigroup(f, t1 + t2)
    assert np.max(np.abs(a.coeffs - b.coeffs)) <= 1e-12


# B operator

def test_b_operator_examples():
    b = b_operator(field(np.cos))
    assert b.allclose(field(lambda x: 0.5 - 0.5 * np.cos(2 * x)), 1e-14)
    assert b_operator(TorusField.constant(3.0, N)).allclose(TorusField.zeros(N), 0.0)
    b = b_operator(field(lambda x: np.cos(x) + np.sin(x)))
    assert b.allclose(field(lambda x: 1 - np.sin(2 * x)), 1e-14)


@given(trig_fields(), st.floats(-5, 5))
def test_b_operator_constant_invariance(f, c):
    assert b_operator(f + c).allclose(b_operator(f), 1e-12)


@given(trig_fields())
def test_b_operator_nonnegative(f):
    assert np.min(b_operator(f).values(4 * N)) >= -1e-10


# Pointwise algebra

def test_pointwise_power_examples():
    phi = ground_state_value()
    assert pointwise_power(ground_state(), 3).allclose(TorusField.constant(phi**3, N), 1e-16)
    f = field(np.sin)
    assert pointwise_power(f, 1) is f
    assert pointwise_power(field(np.cos), 2).allclose(
        field(lambda x: 0.5 + 0.5 * np.cos(2 * x)), 1e-15)


@given(trig_fields(kmax=4), st.integers(2, 5))
def test_pointwise_power_matches_repeated_product(f, m):
    expect = f
    for _ in range(m - 1):
        expect = expect * f
    assert pointwise_power(f, m).allclose(expect, 1e-12)


def test_pointwise_power_band_overflow():
    f = field(lambda x: np.cos(60 * x), N)
    with pytest.raises(ResolutionError):
        pointwise_power(f, 2)


def test_exp_scale_examples():
    f = cos_mode(2) + 0.5
    assert pointwise_exp_scale(f, TorusField.zeros(N), 1.0).allclose(f, 1e-15)
    out = pointwise_exp_scale(ground_state(), TorusField.constant(1.0, N), -2.0)
    assert out.allclose(ground_state() * math.exp(-2.0), 1e-15)
    out = pointwise_exp_scale(ground_state(), field(np.cos), 1.0)
    # (1/2pi) int exp(2 cos x) dx = I_0(2)
    ref = math.sqrt(i0(2.0))
    assert hs_norm(out, 0) == pytest.approx(ref, rel=1e-12)


def test_exp_scale_overflow():
    with pytest.raises(OverflowError):
        pointwise_exp_scale(ground_state(), TorusField.constant(1.0, N), 1e3)


# Serialization

@pytest.mark.parametrize("dim,n", [(1, 16), (2, 8)])
def test_field_csv_round_trip(tmp_path, dim, n):
    rng = np.random.default_rng(dim)
    f = TorusField.from_values(rng.normal(size=(n,) * dim))
    path = tmp_path / "f.csv"
    write_field_csv(f, path)
    header = path.read_text().splitlines()[0]
    assert header == ("k,re,im" if dim == 1 else "k1,k2,re,im")
    g = read_field_csv(path)
    assert np.array_equal(g.coeffs, f.coeffs)
