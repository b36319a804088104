"""Saturation spaces, their compilation into impulse schedules, and
approximate steering.

Multiplication by exp(phi) with phi in H_0 = span(Q_1..Q_q) is realized by
a short impulse (u/delta on a time delta).  Multiplication by exp(B(phi))
with B(phi) = |grad phi|^2 is realized by conjugation: scale down by
exp(-a phi), let the heat flow act for a time delta = a^-2, scale back up.
Nesting these two rules compiles any expression phi_0 + sum B(phi_k) into
a piecewise-constant schedule.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import brentq

from .errors import BudgetError
from .potentials import trig_potentials
from .schedule import ControlSchedule
from .solver import SolverOptions, exp_integrals, solve_nhe, solve_split
from .spectral import (TorusField, b_operator, basis_coeffs, coeffs_to_values, derivative,
                       hs_norm, ksquared, laplacian, pointwise_exp_scale, values_to_coeffs,
                       wavenumbers)

# Options for simulating compiled schedules: impulses are stiff, so each
# step sees at most a 1% change from the potential term.
COMPILE_OPTIONS = SolverOptions(amplitude_scale=0.01)
# Compiled schedules pass through strongly scaled-down states.  Modes near
# the grid cutoff must be damped by the free heat flow more than the
# scale-up amplifies them, so the simulation grid satisfies
# (N/2)^2 delta >= log(amplification) + RESOLUTION_MARGIN.
RESOLUTION_MARGIN = 4.0
# Largest tolerated exp(a * range(phi)) when a state is scaled down and back up.
MAX_AMPLIFICATION = 1e8


# Expressions --------------------------------------------------------------

@dataclass(frozen=True)
class Leaf:
    """Element of H_0: coefficients over (Q_1, ..., Q_q)."""

    coeffs: tuple

    def __post_init__(self):
        object.__setattr__(self, "coeffs", tuple(float(c) for c in self.coeffs))


@dataclass(frozen=True)
class Sum:
    children: tuple

    def __post_init__(self):
        object.__setattr__(self, "children", tuple(self.children))


@dataclass(frozen=True)
class BApply:
    child: object


def depth(expr):
    """Saturation level: 0 for leaves, one more than the child for B."""
    if isinstance(expr, Leaf):
        return 0
    if isinstance(expr, Sum):
        return max((depth(c) for c in expr.children), default=0)
    return depth(expr.child) + 1


def evaluate(expr, pot):
    """The field phi_0 + sum B(phi_k) described by ``expr``."""
    if isinstance(expr, Leaf):
        return pot.combine(_pad(expr.coeffs, pot.size))
    if isinstance(expr, Sum):
        out = TorusField.zeros(pot.n, pot.dim)
        for c in expr.children:
            out = out + evaluate(c, pot)
        return out
    return b_operator(evaluate(expr.child, pot))


def _pad(coeffs, size):
    u = np.zeros(size)
    u[: len(coeffs)] = coeffs
    return u


def _leaf_frequency(leaf, pot):
    """Generator index of a single-frequency leaf, or None."""
    c = np.asarray(leaf.coeffs)
    used = [j for j in range(len(pot.generators)) if np.any(c[1 + 2 * j: 3 + 2 * j] != 0)]
    return used[0] if len(used) == 1 else (None if used else -1)


def scaled(expr, s, pot):
    """An expression evaluating to s * eval(expr).

    Positive scales pass into B as sqrt(s).  A negative scale of B(l) with a
    single-frequency leaf l = a cos<k,x> + b sin<k,x> uses the complement
    identity -B(l) = B(b cos<k,x> - a sin<k,x>) - |k|^2 (a^2 + b^2).
    """
    if isinstance(expr, Leaf):
        return Leaf(tuple(s * c for c in expr.coeffs))
    if isinstance(expr, Sum):
        return Sum(tuple(scaled(c, s, pot) for c in expr.children))
    if s >= 0:
        return BApply(scaled(expr.child, math.sqrt(s), pot))
    leaf = expr.child
    j = _leaf_frequency(leaf, pot) if isinstance(leaf, Leaf) else None
    if j is None:
        raise ValueError("negative multiples of B are supported for single-frequency leaves only")
    if j == -1:  # B of a constant vanishes
        return Leaf((0.0,) * pot.q)
    c = list(leaf.coeffs)
    a, b = c[1 + 2 * j], c[2 + 2 * j]
    k2 = float(np.sum(np.square(pot.generators[j])))
    perp = [0.0] * pot.q
    perp[1 + 2 * j], perp[2 + 2 * j] = b, -a
    const = [0.0] * pot.q
    const[0] = s * k2 * (a * a + b * b)
    return Sum((BApply(scaled(Leaf(perp), math.sqrt(-s), pot)), Leaf(const)))


def shifted(expr, c, q):
    """expr plus the constant c (on Q_1 = 1)."""
    const = [0.0] * q
    const[0] = c
    if isinstance(expr, Leaf):
        return Leaf((expr.coeffs[0] + c, *expr.coeffs[1:]))
    return Sum((expr, Leaf(const)))


def _flatten(expr):
    """Leaves and B terms of a Sum tree."""
    if isinstance(expr, Sum):
        leaves, terms = [], []
        for c in expr.children:
            lv, tm = _flatten(c)
            leaves += lv
            terms += tm
        return leaves, terms
    if isinstance(expr, Leaf):
        return [expr], []
    return [], [expr]


# Generators and density -----------------------------------------------------

@dataclass(frozen=True)
class GeneratorSet:
    """Frequencies L; the potentials are {1, cos<k,x>, sin<k,x>} for k in L."""

    L: tuple

    def __post_init__(self):
        L = tuple(tuple(int(v) for v in np.atleast_1d(k)) for k in self.L)
        if not L:
            raise ValueError("generator set must be nonempty")
        if len({len(k) for k in L}) != 1:
            raise ValueError("generators must share one dimension")
        object.__setattr__(self, "L", L)

    @property
    def dim(self):
        return len(self.L[0])

    def potentials(self, n=None):
        return trig_potentials(self.L, self.dim, n)

    def membership_residual(self, pot):
        """Largest least-squares residual of the listed functions in span(Q_1..Q_q)."""
        basis = np.stack([f.coeffs.ravel() for f in pot.saturation_fields], axis=1)
        target = self.potentials(pot.n)
        worst = 0.0
        for f in target.saturation_fields:
            b = f.coeffs.ravel()
            coef, *_ = np.linalg.lstsq(basis, b, rcond=None)
            worst = max(worst, float(np.linalg.norm(basis @ coef - b)))
        return worst


@dataclass(frozen=True)
class DensityResult:
    ok: bool
    reason: str | None = None
    detail: str = ""


def _int_det(rows):
    """Exact integer determinant by Bareiss elimination."""
    m = [list(r) for r in rows]
    n = len(m)
    sign, prev = 1, 1
    for i in range(n - 1):
        if m[i][i] == 0:
            swap = next((r for r in range(i + 1, n) if m[r][i] != 0), None)
            if swap is None:
                return 0
            m[i], m[swap] = m[swap], m[i]
            sign = -sign
        for r in range(i + 1, n):
            for c in range(i + 1, n):
                m[r][c] = (m[r][c] * m[i][i] - m[r][i] * m[i][c]) // prev
        prev = m[i][i]
    return sign * m[-1][-1]


def density_check(gens):
    """Group-generation test (gcd of maximal minors) and connectivity of the
    non-orthogonality graph on L."""
    L = gens.L if isinstance(gens, GeneratorSet) else GeneratorSet(gens).L
    d = len(L[0])
    g = 0
    for rows in itertools.combinations(L, d):
        g = math.gcd(g, abs(_int_det(rows)))
    if g != 1:
        return DensityResult(False, "generator",
                             f"maximal minors have gcd {g}; L spans a proper sublattice")
    seen, stack = {0}, [0]
    while stack:
        i = stack.pop()
        for j, k in enumerate(L):
            if j not in seen and np.dot(L[i], k) != 0:
                seen.add(j)
                stack.append(j)
    if len(seen) != len(L):
        return DensityResult(False, "chain", "non-orthogonality graph on L is disconnected")
    return DensityResult(True)


# Impulses and the conjugated limit ---------------------------------------------

def impulse_schedule(u, delta, size=None):
    """One constant segment of length delta with value (u/delta, 0, 0)."""
    if not delta > 0:
        raise ValueError("delta must be positive")
    u = np.asarray(u, dtype=float)
    size = u.shape[0] + 2 if size is None else size
    return ControlSchedule.constant(_pad(u / delta, size), delta)


def solve_conjugated(psi0, phi, a, u_field, duration, kappa, p, cfl=0.2):
    """w(duration) for w = exp(a phi) psi, where psi solves the controlled
    equation from exp(-a phi) psi0 with potential field ``u_field``.

        w' = Lap w - 2a grad(phi).grad(w) + (a^2 |grad phi|^2 - a Lap phi + u) w
             - kappa exp(-p a phi) w^(p+1)

    Diffusion is exact; the rest is stepped by ETD2RK with a CFL-limited dt.
    Returns (w, finite flag).
    """
    n, dim, m = psi0.n, psi0.dim, 2 * psi0.n
    grads = [coeffs_to_values(derivative(phi, ax).coeffs, m) for ax in range(dim)]
    pot = (a * a * coeffs_to_values(b_operator(phi).coeffs, m)
           - a * coeffs_to_values(laplacian(phi).coeffs, m)
           + coeffs_to_values(u_field.coeffs, m))
    damp = np.exp(-p * a * coeffs_to_values(phi.coeffs, m)) if kappa else None
    ks = wavenumbers(n, dim)

    def rhs(c):
        v = coeffs_to_values(c, m)
        out = pot * v
        for ax in range(dim):
            out -= 2 * a * grads[ax] * coeffs_to_values(1j * ks[ax] * c, m).real
        if damp is not None:
            out -= kappa * damp * v ** (p + 1)
        return values_to_coeffs(out, n)

    speed = 2 * a * max(float(np.max(np.abs(g))) for g in grads) * (n // 2) if dim else 0.0
    rate = speed + float(np.max(np.abs(pot)))
    steps = max(8, math.ceil(duration * rate / cfl))
    h = duration / steps
    z = ksquared(n, dim) * h
    j0, j1 = exp_integrals(z.ravel())
    e, p1, p2 = np.exp(-z), h * j0.reshape(z.shape), h * (j0 - j1).reshape(z.shape)
    c = np.array(psi0.coeffs)
    for _ in range(steps):
        f0 = rhs(c)
        s = e * c + p1 * f0
        c = s + p2 * (rhs(s) - f0)
        if not np.all(np.isfinite(c)):
            return TorusField(c), False
    return TorusField(c), True


@dataclass
class LimitRow:
    delta: float
    route: str
    error: float
    blowup: bool
    amplification: float
    cross_check: float | None = None


def conjugated_limit_experiment(psi0, phi, u, deltas, pot, kappa=1.0, p=2, s=1,
                                max_amplification=MAX_AMPLIFICATION, cross_check=True):
    """Error of exp(a phi) psi(delta; exp(-a phi) psi0, u/delta), a = delta^-1/2,
    against exp(B(phi) + <u,Q>) psi0, for each delta.

    The direct route simulates the controlled equation and rescales; it is
    used while exp(a range(phi)) stays below ``max_amplification``.  Beyond
    that the conjugated variable is integrated instead.  When both are
    usable their difference is recorded in ``cross_check``.
    """
    if np.min(phi.values(2 * phi.n)) < -1e-12:
        raise ValueError("phi must be nonnegative; add a constant first")
    u = _pad(np.asarray(u, dtype=float), pot.size)
    uq = pot.combine(u)
    target = pointwise_exp_scale(psi0, b_operator(phi) + uq, 1.0)
    vals = phi.values(2 * phi.n)
    spread = float(np.max(vals) - np.min(vals))
    rows = []
    for delta in deltas:
        a = delta ** -0.5
        amp = math.exp(min(a * spread, 700.0))
        direct = None
        if amp <= max_amplification:
            start = pointwise_exp_scale(psi0, phi, -a)
            traj = solve_nhe(start, ControlSchedule.constant(u / delta, delta), pot, kappa, p)
            if not traj.blowup:
                direct = pointwise_exp_scale(traj.final, phi, a)
        conj, finite = None, True
        if direct is None or cross_check:
            conj, finite = solve_conjugated(psi0, phi, a, uq * (1.0 / delta), delta, kappa, p)
        best = direct if direct is not None else (conj if finite else None)
        if best is None:
            rows.append(LimitRow(delta, "conjugated", math.inf, True, amp))
            continue
        check = hs_norm(direct - conj, s) if (direct is not None and conj is not None
                                               and finite) else None
        rows.append(LimitRow(delta, "direct" if direct is not None else "conjugated",
                             hs_norm(best - target, s), False, amp, check))
    return rows


# Compilation --------------------------------------------------------------

@dataclass(frozen=True)
class CompileBudget:
    """delta: free time per conjugation, per level (outermost first);
    impulse: impulse length as a fraction of the enclosing delta;
    split: pieces per B term (None picks the smallest count that keeps
    the amplification below max_amplification); margin: the constant
    making shifted exponents positive; tol: optional error budget."""

    delta: tuple = (1e-3, 1e-4)
    impulse: float = 1e-2
    split: int | None = None
    max_amplification: float = MAX_AMPLIFICATION
    margin: float = 0.1
    tol: float | None = None
    max_depth: int = 2

    def level_delta(self, level):
        d = (self.delta,) if np.isscalar(self.delta) else tuple(self.delta)
        return float(d[min(level, len(d) - 1)])


@dataclass
class Compiled:
    schedule: ControlSchedule
    expr: object
    target: TorusField | None = None
    impulses: int = 0
    pieces: int = 0
    min_delta: float = math.inf
    log_amplification: float = 0.0

    def resolution(self, n):
        """Grid size for simulating this schedule from an N = n state."""
        return required_resolution(n, self.min_delta, self.log_amplification)


def required_resolution(n, min_delta, log_amplification):
    if not math.isfinite(min_delta):
        return n
    kc = math.sqrt((log_amplification + RESOLUTION_MARGIN) / min_delta)
    need = 2 * math.ceil(kc)
    return max(n, 32 * math.ceil(need / 32))


def thue_morse(j):
    return bin(j).count("1") % 2


def _range(expr, pot):
    v = evaluate(expr, pot).values(2 * pot.n)
    return float(np.min(v)), float(np.max(v))


def _compile(expr, pot, budget, level, impulse_len, counts):
    leaves, terms = _flatten(expr)
    parts = []
    for term in terms:
        parts.append(_compile_b(term, pot, budget, level, counts))
    coef = np.sum([lf.coeffs for lf in leaves], axis=0) if leaves else None
    if coef is not None and np.any(coef != 0):
        counts["impulses"] += 1
        parts.append(impulse_schedule(_pad(coef, pot.q), impulse_len, pot.size))
    return parts


def _compile_b(term, pot, budget, level, counts):
    """exp(B(child)) as Thue-Morse-signed conjugation pieces."""
    delta = budget.level_delta(level)
    a = delta ** -0.5
    child = term.child
    lo, hi = _range(child, pot)
    m = budget.split
    if m is None:
        m = max(1, math.ceil((a * (hi - lo) / math.log(budget.max_amplification)) ** 2))
        if m > 1:
            m += m % 2
    impulse_len = budget.impulse * delta
    parts = []
    for j in range(m):
        sign = -1.0 if thue_morse(j) else 1.0
        piece = scaled(child, sign / math.sqrt(m), pot)
        plo, _ = _range(piece, pot)
        piece = shifted(piece, -plo + budget.margin, pot.q)
        down = _compile(scaled(piece, -a, pot), pot, budget, level + 1, impulse_len, counts)
        up = _compile(scaled(piece, a, pot), pot, budget, level + 1, impulse_len, counts)
        # Each impulse contributes a third of its length to the B exponent.
        free = delta - 2 * impulse_len / 3 if isinstance(piece, Leaf) else delta
        parts += down + [ControlSchedule.free(free, pot.size)] + up
        counts["pieces"] += 1
        counts["min_delta"] = min(counts["min_delta"], delta)
        counts["log_amp"] = max(counts["log_amp"], a * (hi - lo) / math.sqrt(m))
    return ControlSchedule.concat(parts, pot.size)


def compile_expr(expr, pot, budget=None, psi0=None, kappa=1.0, p=2, s=1):
    """Lower an expression to a schedule realizing multiplication by exp(eval(expr)).

    B terms come first and the merged leaf impulse last.  With ``psi0`` the
    predicted target exp(eval(expr)) psi0 is attached; if ``budget.tol`` is
    set the schedule is simulated and a BudgetError names the worst subtree
    when the H^s error exceeds it.
    """
    budget = budget or CompileBudget()
    if depth(expr) > budget.max_depth:
        raise ValueError(f"expression depth {depth(expr)} exceeds {budget.max_depth}")
    counts = {"impulses": 0, "pieces": 0, "min_delta": math.inf, "log_amp": 0.0}
    parts = _compile(expr, pot, budget, 0, budget.impulse * budget.level_delta(0), counts)
    if not parts:
        raise ValueError("expression is zero; nothing to compile")
    sched = ControlSchedule.concat(parts, pot.size)
    out = Compiled(sched, expr, None, counts["impulses"], counts["pieces"],
                   counts["min_delta"], counts["log_amp"])
    if psi0 is not None:
        out.target = pointwise_exp_scale(psi0, evaluate(expr, pot), 1.0)
        if budget.tol is not None:
            err = realization_error(out, psi0, pot, kappa, p, s)
            if err > budget.tol:
                raise BudgetError(f"compiled error {err:.3e} exceeds budget {budget.tol:.3e}",
                                  err, _worst_subtree(expr, pot, budget, psi0, kappa, p, s),
                                  {"impulses": out.impulses, "pieces": out.pieces})
    return out


def simulate_compiled(psi0, sched, pot, kappa=1.0, p=2, n=None):
    """Final state of a compiled schedule, simulated on an N = n grid
    (see Compiled.resolution) and resampled back; None on blow-up."""
    n = psi0.n if n is None else n
    final, blowup = solve_split(psi0.resample(n), sched, pot.at(n), kappa, p)
    return None if blowup else final.resample(psi0.n)


def realization_error(compiled, psi0, pot, kappa=1.0, p=2, s=1):
    final = simulate_compiled(psi0, compiled.schedule, pot, kappa, p,
                              compiled.resolution(psi0.n))
    return math.inf if final is None else hs_norm(final - compiled.target, s)


def _worst_subtree(expr, pot, budget, psi0, kappa, p, s):
    leaves, terms = _flatten(expr)
    if len(terms) + (1 if leaves else 0) <= 1:
        return expr
    loose = replace(budget, tol=None)
    worst, arg = -1.0, expr
    for sub in terms + ([Sum(tuple(leaves))] if leaves else []):
        try:
            err = realization_error(compile_expr(sub, pot, loose, psi0), psi0, pot, kappa, p, s)
        except ValueError:
            continue
        if err > worst:
            worst, arg = err, sub
    return arg


# Exponent fitting ---------------------------------------------------------

@dataclass
class FitResult:
    expr: object
    residual: float
    depth: int


def _leaf_from(c0, c1, s1):
    """Leaf c0 + c1 cos x + s1 sin x for the (1, cos x, sin x) set."""
    return Leaf((c0, c1, s1))


def _collect(parts):
    parts = [x for x in parts if not (isinstance(x, Leaf) and not any(x.coeffs))]
    if not parts:
        return Leaf((0.0, 0.0, 0.0))
    return parts[0] if len(parts) == 1 else Sum(tuple(parts))


def _fourier(phi, kmax):
    """Plain Fourier cosine/sine coefficients: phi ~ a0 + sum a_k cos kx + b_k sin kx."""
    c, s = basis_coeffs(phi, kmax)
    a = np.array(c) / math.sqrt(math.pi)
    b = np.concatenate([[0.0], np.array(s)]) / math.sqrt(math.pi)
    a[0] = c[0] / math.sqrt(2 * math.pi)
    return a, b


def _fit_depth1(a, b):
    """a0 + a1 cos + b1 sin + a2 cos 2x + b2 sin 2x as a leaf plus one B term."""
    r = math.hypot(a[2], b[2])
    parts = []
    if r > 0:
        # (u . (sin x, cos x))^2 with (M22 - M11)/2 = a2, M12 = b2, made PSD by + r I.
        w, v = np.linalg.eigh(np.array([[r - a[2], b[2]], [b[2], r + a[2]]]))
        u = v[:, -1] * math.sqrt(max(w[-1], 0.0))
        # u1 sin x + u2 cos x is the derivative of -u1 cos x + u2 sin x.
        lc, ls = -u[0], u[1]
        if lc < 0 or (lc == 0 and ls < 0):
            lc, ls = -lc, -ls
        parts.append(BApply(_leaf_from(0.0, lc, ls)))
    parts.append(_leaf_from(a[0] - r, a[1], b[1]))
    return _collect(parts)


def _depth2_design():
    """Linear map from the upper triangle of a symmetric 4x4 M to the Fourier
    coefficients (cos 1..4, sin 1..4) of e^T M e, e = (sin x, cos x, sin 2x, cos 2x)."""
    x = 2 * np.pi * np.arange(64) / 64
    e = np.stack([np.sin(x), np.cos(x), np.sin(2 * x), np.cos(2 * x)])
    cols, idx = [], []
    for i in range(4):
        for j in range(i, 4):
            f = e[i] * e[j] * (1.0 if i == j else 2.0)
            cols.append(f)
            idx.append((i, j))
    F = np.array(cols).T
    basis = [np.ones_like(x)] + [np.cos(k * x) for k in range(1, 5)] + \
            [np.sin(k * x) for k in range(1, 5)]
    Bm = np.array(basis).T
    coef = np.linalg.lstsq(Bm, F, rcond=None)[0]
    return coef, idx


def _fit_depth2(a, b):
    coef, idx = _depth2_design()
    rows = [2, 3, 4, 6, 7, 8]  # cos 2..4, sin 2..4
    target = np.array([a[2], a[3], a[4], b[2], b[3], b[4]])
    mvec = np.linalg.lstsq(coef[rows], target, rcond=None)[0]
    M = np.zeros((4, 4))
    for val, (i, j) in zip(mvec, idx):
        M[i, j] = M[j, i] = val
    produced = coef @ mvec  # (const, cos1..4, sin1..4) of e^T M e
    lam = max(0.0, -float(np.linalg.eigvalsh(M)[0]))
    w, v = np.linalg.eigh(M + lam * np.eye(4))
    parts = []
    for wi, vi in zip(w, v.T):
        if wi <= 1e-15 * max(1.0, float(np.max(np.abs(w)))):
            continue
        u = vi * math.sqrt(wi)
        # u . e is the derivative of -u0 cos x + u1 sin x - u2/2 cos 2x + u3/2 sin 2x.
        c1, s1, c2, s2 = -u[0], u[1], -u[2] / 2, u[3] / 2
        r = math.hypot(c2, s2)
        inner = [_leaf_from(0.0, c1, s1)]
        if r > 0:
            # r cos(2x - 2t) = B(sqrt(2r) sin(x - t)) - r with 2t = atan2(s2, c2).
            t = 0.5 * math.atan2(s2, c2)
            g = math.sqrt(2 * r)
            inner.append(BApply(_leaf_from(0.0, -g * math.sin(t), g * math.cos(t))))
        parts.append(BApply(_collect(inner)))
    # e^T e = 2, and each inner B term adds its own constant r inside B, which
    # B ignores, so only lam and the produced constant enter the leaf.
    c0 = a[0] - produced[0] - 2 * lam
    parts.append(_leaf_from(c0, a[1] - produced[1], b[1] - produced[5]))
    return _collect(parts)


def exponent_fit(phi, pot, tol=1e-6, max_depth=2, s=1):
    """Represent phi as phi_0 + sum B(phi_k) over the (1, cos x, sin x) set.

    Depth 1 reproduces every trigonometric polynomial of degree <= 2 and
    depth 2 every one of degree <= 4.  The shallowest depth meeting ``tol``
    (H^s residual) is returned; otherwise a BudgetError carries the best fit.
    """
    if pot.dim != 1 or pot.q != 3 or pot.generators != ((1,),):
        raise ValueError("the default dictionary needs the (1, cos x, sin x) potentials")
    a, b = _fourier(phi, 4)
    best = None
    for d in range(max_depth + 1):
        if d == 0:
            expr = _leaf_from(a[0], a[1], b[1])
        elif d == 1:
            expr = _fit_depth1(a, b)
        else:
            expr = _fit_depth2(a, b)
        res = hs_norm(evaluate(expr, pot) - phi, s)
        if best is None or res < best.residual:
            best = FitResult(expr, res, depth(expr))
        if res <= tol:
            return best
    raise BudgetError(f"fit residual {best.residual:.3e} above tolerance {tol:.1e}",
                      best.residual, best.expr, {"depth": best.depth})


# Steering -----------------------------------------------------------------

@dataclass
class SteerResult:
    schedule: ControlSchedule
    error: float
    duration: float
    final: TorusField | None = None
    exprs: tuple = ()
    diagnostics: dict = field(default_factory=dict)


def null_steer(psi0, eps, T, pot, kappa=1.0, p=2, s=1, delta=1e-3, margin=math.log(2)):
    """Scale psi0 by exp(-c) with an impulse on Q_1 = 1, then evolve freely.

    c = log(2 ||psi0||_{H^s} / eps) + margin.  Returns the schedule and the
    measured ||psi(T)||_{H^s}.
    """
    if pot.labels[0] != "1":
        raise ValueError("null steering needs the constant potential in H_0")
    n0 = hs_norm(psi0, s)
    if n0 == 0.0:
        return SteerResult(ControlSchedule.empty(pot.size), 0.0, 0.0, psi0)
    free = ControlSchedule.free(T, pot.size)
    traj = solve_nhe(psi0, free, pot, kappa, p)
    if not traj.blowup and hs_norm(traj.final, s) < eps:
        return SteerResult(free, hs_norm(traj.final, s), T, traj.final)
    if not delta < T:
        raise ValueError("impulse must be shorter than T")
    c = math.log(2 * n0 / eps) + margin
    u = np.zeros(pot.q)
    u[0] = -c
    sched = impulse_schedule(u, delta, pot.size).then(ControlSchedule.free(T - delta, pot.size))
    traj = solve_nhe(psi0, sched, pot, kappa, p, COMPILE_OPTIONS)
    err = hs_norm(traj.final, s)
    if traj.blowup or not err < eps:
        raise BudgetError(f"null steer reached {err:.3e}, needed {eps:.1e}", err, None, {"c": c})
    return SteerResult(sched, err, T, traj.final, diagnostics={"c": c})


def cutoff(psi0, psi1, eta, m):
    """Smooth cutoff rho_eta: 0 where min(|psi0|, |psi1|) <= eta, 1 above 2 eta,
    squared-cosine ramp between."""
    low = np.minimum(np.abs(psi0.values(m)), np.abs(psi1.values(m)))
    if eta <= 0:
        return (low > 0).astype(float)
    t = np.clip(low / eta - 1.0, 0.0, 1.0)
    return np.sin(0.5 * np.pi * t) ** 2


def log_ratio_exponent(psi0, psi1, eta=1e-2):
    """rho_eta log(psi1/psi0) as a band-limited field."""
    m = 4 * psi0.n
    v0, v1 = psi0.values(m), psi1.values(m)
    rho = cutoff(psi0, psi1, eta, m)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(rho > 0, np.log(np.abs(v1) / np.abs(v0)), 0.0)
    return TorusField(values_to_coeffs(rho * ratio, psi0.n))


DELTA_LADDER = ((1e-3, 1e-4), (3e-4, 3e-5), (1e-4, 1e-5))


def _compile_ladder(expr, pot, start, T_avail, kappa, p, s, goal, ladder, budget, eps=0.0):
    """Try the budget ladder until the simulated H^s distance to ``goal`` is
    below ``eps``; returns the best rung seen and the rung log."""
    tried = []
    best = None
    for deltas in ladder:
        b = replace(budget or CompileBudget(), delta=deltas)
        comp = compile_expr(expr, pot, b, start)
        if comp.schedule.duration > T_avail:
            tried.append((deltas, math.inf, "too long"))
            continue
        final = simulate_compiled(start, comp.schedule, pot, kappa, p,
                                  comp.resolution(start.n))
        err = math.inf if final is None else hs_norm(final - goal, s)
        tried.append((deltas, err, ""))
        if best is None or err < best[1]:
            best = (comp, err, final)
        if err < eps:
            break
    return best, tried


def approx_steer_same_sign(psi0, psi1, eps, T, pot, kappa=1.0, p=2, s=0, eta=1e-2,
                           fit_tol=None, budget=None, ladder=DELTA_LADDER, max_depth=2):
    """Steer psi0 to psi1 (same sign pattern) by compiling rho_eta log(psi1/psi0).

    Returns the schedule (duration <= T) and the measured H^s error at its end.
    """
    m = 2 * psi0.n
    if not np.array_equal(np.sign(psi0.values(m)), np.sign(psi1.values(m))):
        raise ValueError("psi0 and psi1 must have the same sign pattern")
    if hs_norm(psi1 - psi0, s) == 0.0:
        return SteerResult(ControlSchedule.empty(pot.size), 0.0, 0.0, psi0)
    phi = log_ratio_exponent(psi0, psi1, eta)
    fit = _best_fit(phi, pot, fit_tol if fit_tol is not None else eps / 10)
    best, tried = _compile_ladder(fit.expr, pot, psi0, T, kappa, p, s, psi1, ladder, budget,
                                  eps)
    if best is None or not best[1] < eps:
        err = math.inf if best is None else best[1]
        raise BudgetError(f"approximate steer reached {err:.3e}, needed {eps:.1e}", err,
                          fit.expr, {"ladder": tried, "fit_residual": fit.residual})
    comp, err, final = best
    return SteerResult(comp.schedule, err, comp.schedule.duration, final, (fit.expr,),
                       {"ladder": tried, "fit_residual": fit.residual})


def _best_fit(phi, pot, tol, max_depth=2):
    try:
        return exponent_fit(phi, pot, tol, max_depth)
    except BudgetError as exc:
        return FitResult(exc.subtree, exc.error, depth(exc.subtree))


def _exact_total(durations, T):
    """Filler h with fsum(durations + [h]) == T."""
    h = T - math.fsum(durations)
    for _ in range(64):
        total = math.fsum([*durations, h])
        if total == T:
            return h
        h = np.nextafter(h, math.inf if total < T else -math.inf)
    return h


def constant_rescale(v0, v1, duration, kappa=1.0, p=2):
    """Constant control g on Q_1 = 1 taking the constant state v0 > 0 to v1 > 0
    in the given time, solving v' = g v - kappa v^(p+1) in closed form."""
    if v0 <= 0 or v1 <= 0:
        raise ValueError("constant rescaling needs positive levels")
    g0 = math.log(v1 / v0) / duration
    if kappa == 0 or p == 0:
        return g0 + (kappa if p == 0 else 0.0)

    def log_end(g):
        # z = v^-p solves z' = -p g z + p kappa.
        z = v0**-p * math.exp(-p * g * duration) + p * kappa * duration * float(
            exp_integrals(np.array([p * g * duration]))[0][0])
        return -math.log(z) / p - math.log(v1)

    hi = g0 + kappa * max(v0, v1) ** p + 1.0
    return brentq(log_end, g0 - 1.0, hi, xtol=1e-14, rtol=1e-15)


def _phase(phi, start, goal, pot, kappa, p, s, tol, budget, ladder, T, name, max_depth=2):
    """Schedule for multiplying ``start`` by exp(phi), with its simulation grid."""
    budget = budget or CompileBudget()
    flat = hs_norm(phi - TorusField.constant(float(np.mean(phi.values())), phi.n), 1) < 1e-12
    const_start = hs_norm(start - TorusField.constant(float(np.mean(start.values())),
                                                      start.n), 1) < 1e-12
    if flat and const_start:
        v0 = float(np.mean(start.values()))
        v1 = v0 * math.exp(float(np.mean(phi.values())))
        h = budget.impulse * budget.level_delta(0)
        u = np.zeros(pot.size)
        u[0] = constant_rescale(v0, v1, h, kappa, p)
        expr = Leaf((math.log(v1 / v0),) + (0.0,) * (pot.q - 1))
        return ControlSchedule.constant(u, h), start.n, expr, {"exact_constant": True}
    fit = _best_fit(phi, pot, tol, max_depth)
    best, tried = _compile_ladder(fit.expr, pot, start, T, kappa, p, s, goal, ladder[:1],
                                  budget)
    if best is None:
        raise BudgetError(f"{name} does not fit in T", math.inf, fit.expr, {"ladder": tried})
    comp = best[0]
    return comp.schedule, comp.resolution(start.n), fit.expr, {
        "fit_residual": fit.residual, "phase_error": best[1],
        "duration": comp.schedule.duration}


def approx_steer_positive(psi0, psi1, eps, T, pot, kappa=1.0, p=2, s=1, hold_level=1.0,
                          fit_tol=None, budget=None, ladder=DELTA_LADDER, max_depth=2):
    """Three phases with total duration exactly T: exp(log(A/psi0)) brings psi0
    to the constant A, the stationary control kappa A^p holds it there, and
    exp(log(psi1/A)) brings it to psi1 (A = ``hold_level``, 1 by default).

    During the hold, deviations from A decay at least like exp(-kappa p A^p t).
    Returns the schedule and the measured H^s error at T.  Fits stop at
    ``max_depth``; a depth-1 fit is often enough when the hold is long.
    """
    m = 2 * psi0.n
    if np.min(psi0.values(m)) <= 0 or np.min(psi1.values(m)) <= 0:
        raise ValueError("both states must be strictly positive")
    A = float(hold_level)
    level = TorusField.constant(A, psi0.n, psi0.dim)
    tol = fit_tol if fit_tol is not None else eps / 10
    hold_u = np.zeros(pot.size)
    hold_u[0] = kappa * A**p
    phases, exprs, diag, grid = [], [], {}, psi0.n
    for name, start, goal in (("phase1", psi0, level), ("phase2", level, psi1)):
        phi = log_ratio_exponent(start, goal, 0.0)
        if hs_norm(phi, 1) < 1e-14:
            phases.append(None)
            continue
        sched, n_sim, expr, info = _phase(phi, start, goal, pot, kappa, p, s, tol, budget,
                                          ladder, T, name, max_depth)
        phases.append(sched)
        exprs.append(expr)
        diag[name] = info
        grid = max(grid, n_sim)
    durations = [seg.duration for ph in phases if ph is not None for seg in ph.segments]
    hold = _exact_total(durations, T)
    if hold < 0:
        raise BudgetError("compiled phases exceed T", math.inf, None, diag)
    parts = []
    if phases[0] is not None:
        parts.append(phases[0])
    if hold > 0:
        parts.append(ControlSchedule.constant(hold_u, hold))
    if phases[1] is not None:
        parts.append(phases[1])
    sched = ControlSchedule.concat(parts, pot.size)
    final = simulate_compiled(psi0, sched, pot, kappa, p, grid)
    err = math.inf if final is None else hs_norm(final - psi1, s)
    diag["hold"] = hold
    diag["grid"] = grid
    if not err < eps:
        raise BudgetError(f"positive steer reached {err:.3e}, needed {eps:.1e}", err,
                          None, diag)
    return SteerResult(sched, err, sched.duration, final, tuple(exprs), diag)
