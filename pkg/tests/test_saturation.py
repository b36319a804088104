import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nhecontrol.errors import BudgetError
from nhecontrol.potentials import preset
from nhecontrol.saturation import (BApply, CompileBudget, GeneratorSet, Leaf, Sum,
                                   approx_steer_positive, approx_steer_same_sign,
                                   compile_expr, conjugated_limit_experiment, constant_rescale,
                                   cutoff, density_check, depth, evaluate, exponent_fit,
                                   impulse_schedule, log_ratio_exponent, null_steer,
                                   realization_error, scaled, simulate_compiled, thue_morse)
from nhecontrol.schedule import ConstantLaw
from nhecontrol.solver import solve_split
from nhecontrol.spectral import (TorusField, b_operator, cos_mode, ground_state,
                                 ground_state_value, hs_norm, pointwise_exp_scale)

N = 128
POT = preset("mtA_d1", N)
PHI = ground_state_value()


def field(func, n=N):
    return TorusField.from_function(func, n)


# Density and generators

def test_density_examples():
    assert density_check([(1,)]).ok
    res = density_check([(2,)])
    assert not res.ok and res.reason == "generator"
    res = density_check([(1, 0), (0, 1)])
    assert not res.ok and res.reason == "chain"
    assert density_check([(1, 0), (1, 1)]).ok
    assert density_check([(2, 3)]).reason == "generator"
    assert density_check([(2,), (3,)]).ok


@given(st.lists(st.integers(-6, 6).filter(bool), min_size=1, max_size=3))
def test_density_1d_is_gcd(ks):
    g = 0
    for k in ks:
        g = math.gcd(g, k)
    assert density_check([(k,) for k in ks]).ok == (g == 1)


def test_generator_membership():
    gens = GeneratorSet([(1,)])
    assert gens.membership_residual(POT) <= 1e-10
    pot2 = preset("mtA_d2", 16)
    assert GeneratorSet([(1, 0), (1, 1)]).membership_residual(pot2) <= 1e-10


# Expressions

def test_evaluate_recursive_definition():
    inner = Leaf((0.2, 1.0, -0.5))
    expr = Sum((Leaf((0.3, 0.0, 0.1)), BApply(inner), BApply(Sum((inner, BApply(inner))))))
    f_in = evaluate(inner, POT)
    expect = evaluate(Leaf((0.3, 0.0, 0.1)), POT) + b_operator(f_in) + b_operator(
        f_in + b_operator(f_in))
    assert evaluate(expr, POT).allclose(expect, 1e-13)
    assert depth(expr) == 2


@given(st.floats(-3, 3), st.floats(-1, 1), st.floats(-1, 1))
def test_scaled_matches_multiple(s, a, b):
    expr = Sum((Leaf((0.5, a, b)), BApply(Leaf((0.0, a, b)))))
    assert evaluate(scaled(expr, s, POT), POT).allclose(evaluate(expr, POT) * s, 1e-12)


def test_thue_morse_balance():
    signs = [1 - 2 * thue_morse(j) for j in range(8)]
    assert signs == [1, -1, -1, 1, -1, 1, 1, -1]
    assert sum(signs) == 0 and sum(j * s for j, s in enumerate(signs)) == 0


# Exponent fit

def test_fit_leaf_exact():
    phi = evaluate(Leaf((0.4, -0.3, 0.8)), POT)
    fit = exponent_fit(phi, POT, tol=1e-10)
    assert fit.depth == 0 and fit.residual <= 1e-10


def test_fit_sin_squared():
    fit = exponent_fit(field(lambda x: np.sin(x) ** 2), POT, tol=1e-10)
    assert fit.depth == 1 and fit.residual <= 1e-10
    assert isinstance(fit.expr, BApply) or depth(fit.expr) == 1


def test_fit_half_plus_quarter_cos2():
    fit = exponent_fit(field(lambda x: 0.5 + 0.25 * np.cos(2 * x)), POT, tol=1e-6)
    assert fit.residual < 1e-6


@given(st.lists(st.floats(-1, 1), min_size=9, max_size=9))
def test_fit_exact_recovery_degree4(c):
    def f(x):
        out = c[0] + 0 * x
        for k in range(1, 5):
            out = out + c[k] * np.cos(k * x) + c[4 + k] * np.sin(k * x)
        return out
    fit = exponent_fit(field(f), POT, tol=1e-8, s=1)
    assert fit.residual <= 1e-8 and fit.depth <= 2


def test_fit_reports_best_on_failure():
    with pytest.raises(BudgetError) as info:
        exponent_fit(field(lambda x: np.cos(7 * x)), POT, tol=1e-6)
    assert info.value.subtree is not None and info.value.error > 1e-6


# Impulses and the conjugated limit

def test_impulse_schedule_shape():
    s = impulse_schedule(np.zeros(3), 1e-3)
    assert s.duration == 1e-3 and not np.any(s.value_at(0))
    s = impulse_schedule([1.0, 2.0, 3.0], 0.5)
    assert np.allclose(s.value_at(0.1), [2.0, 4.0, 6.0, 0.0, 0.0], rtol=1e-15)
    with pytest.raises(ValueError):
        impulse_schedule([1.0], 0.0)


def test_impulse_realizes_scaling_and_improves():
    psi0 = ground_state(N) * field(lambda x: 1 + 0.3 * np.cos(x))
    c = 2.0
    errs = []
    for delta in (1e-2, 1e-3, 1e-4):
        final, blowup = solve_split(psi0, impulse_schedule([-c, 0, 0], delta), POT, 1.0, 2)
        errs.append(hs_norm(final - psi0 * math.exp(-c), 1))
    assert errs[0] > errs[1] > errs[2]
    assert errs[1] < 1e-4


def test_limit_phi_zero_and_constant():
    psi0 = ground_state(N)
    rows = conjugated_limit_experiment(psi0, TorusField.zeros(N), np.zeros(3),
                                       [1e-1, 1e-2, 1e-3], POT)
    errs = [r.error for r in rows]
    assert errs[0] > errs[1] > errs[2]
    rows = conjugated_limit_experiment(psi0, TorusField.constant(1.0, N), np.zeros(3),
                                       [1e-2], POT)
    # the conjugation factors cancel; only the damped nonlinear drift remains
    assert rows[0].error < 1e-3 * errs[1]
    with pytest.raises(ValueError):
        conjugated_limit_experiment(psi0, field(np.cos), np.zeros(3), [1e-2], POT)


# Compilation

def test_compile_leaf_is_single_impulse():
    comp = compile_expr(Leaf((-1.5, 0.0, 0.0)), POT)
    assert len(comp.schedule.segments) == 1 and comp.impulses == 1 and comp.pieces == 0


def test_compile_schedule_structure():
    comp = compile_expr(Sum((Leaf((1.0, 0, 0)), BApply(Leaf((0, 1.0, 0))))), POT,
                        CompileBudget(delta=(1e-3,)))
    for seg in comp.schedule.segments:
        assert isinstance(seg.law, ConstantLaw)
        assert seg.law.value[-1] == 0.0 and seg.law.value[-2] == 0.0


def test_compile_sum_target():
    psi0 = ground_state(N)
    expr = Sum((Leaf((1.0, 0, 0)), BApply(Leaf((0, 1.0, 0)))))
    comp = compile_expr(expr, POT, CompileBudget(delta=(1e-3,)), psi0)
    target = psi0 * 1.0
    target = pointwise_exp_scale(psi0, field(lambda x: 1 + np.sin(x) ** 2), 1.0)
    assert comp.target.allclose(target, 1e-12)
    final = simulate_compiled(psi0, comp.schedule, POT, 1.0, 2, comp.resolution(N))
    assert hs_norm(final - target, 1) / hs_norm(target, 1) < 5e-2


def test_compile_budget_error_names_subtree():
    expr = BApply(Leaf((0, 1.0, 0)))
    with pytest.raises(BudgetError) as info:
        compile_expr(expr, POT, CompileBudget(delta=(1e-3,), tol=1e-6), ground_state(N))
    assert info.value.subtree is not None and info.value.error > 1e-6


def test_compile_depth_guard():
    deep = BApply(BApply(BApply(Leaf((0, 1.0, 0)))))
    with pytest.raises(ValueError):
        compile_expr(deep, POT)


@pytest.mark.slow
def test_compile_error_decreases_over_ladder():
    psi0 = ground_state(N)
    expr = BApply(Leaf((0, 1.0, 0)))
    errs = [realization_error(compile_expr(expr, POT, CompileBudget(delta=(d,)), psi0),
                              psi0, POT) for d in (1e-3, 3e-4, 1e-4)]
    assert errs[0] > errs[1] > errs[2]


# Steering

def test_null_steer_examples():
    r = null_steer(ground_state(N) * 1.0, 1e-2, 0.5, POT)
    assert r.error < 1e-2 and r.duration == 0.5
    r = null_steer(TorusField.zeros(N), 1e-2, 0.5, POT)
    assert r.schedule.is_empty() and r.error == 0.0
    r = null_steer(ground_state(N) * 1e-3, 1e-2, 0.5, POT)
    assert len(r.schedule.segments) == 1 and not np.any(r.schedule.value_at(0.1))


def test_cutoff_and_log_ratio():
    psi0, psi1 = ground_state(N), ground_state(N) * 2.0
    assert np.all(cutoff(psi0, psi1, 1e-2, 2 * N) == 1.0)
    phi = log_ratio_exponent(psi0, psi1)
    assert phi.allclose(TorusField.constant(math.log(2), N), 1e-14)
    low = TorusField.constant(5e-3, N)
    assert np.all(cutoff(low, psi1, 1e-2, 2 * N) == 0.0)


def test_same_sign_examples():
    psi0 = ground_state(N) * field(lambda x: 1 + 0.3 * np.cos(x))
    r = approx_steer_same_sign(psi0, psi0, 0.05, 0.5, POT)
    assert r.error == 0.0 and r.schedule.is_empty()
    r = approx_steer_same_sign(ground_state(N), ground_state(N) * 2.0, 0.05, 0.5, POT)
    assert r.error < 0.05 and r.duration <= 0.5
    assert len(r.schedule.segments) == 1
    with pytest.raises(ValueError):
        approx_steer_same_sign(psi0, -psi0, 0.05, 0.5, POT)


def test_positive_pure_hold():
    one = TorusField.constant(1.0, N)
    r = approx_steer_positive(one, one, 1e-6, 1.0, POT)
    assert r.duration == 1.0 and len(r.schedule.segments) == 1
    assert r.error < 1e-8


def test_positive_ground_state_to_itself():
    r = approx_steer_positive(ground_state(N), ground_state(N), 1e-6, 1.0, POT)
    assert r.duration == 1.0
    assert r.error < 1e-8


def test_positive_rejects_sign_change():
    with pytest.raises(ValueError):
        approx_steer_positive(cos_mode(1, N), ground_state(N), 0.05, 1.0, POT)


@pytest.mark.parametrize("v0,v1,kappa,p", [(1.0, 3.0, 1.0, 2), (3.0, PHI, 1.0, 2),
                                           (0.5, 0.2, 2.0, 4), (1.0, 2.0, 0.0, 2)])
def test_constant_rescale_exact(v0, v1, kappa, p):
    h = 1e-5
    g = constant_rescale(v0, v1, h, kappa, p)
    # v' = g v - kappa v^(p+1) has z = v^-p with z' = -p g z + p kappa
    z = v0**-p * math.exp(-p * g * h) + kappa * (1 - math.exp(-p * g * h)) / g
    assert z ** (-1 / p) == pytest.approx(v1, rel=1e-10)
