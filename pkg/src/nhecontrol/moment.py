"""Moment problems for the linearized equation and the explicit constants
of the local exact-steering argument.

Linearizing the controlled equation around Phi = 1/sqrt(2 pi) under the
stationary control gives, for each basis mode,

    a_k(T) = exp(-(k^2 + sigma) T) [a_k(0) + Phi <mu, e_k> int_0^T exp((k^2 + sigma) s) v(s) ds],

with sigma = kappa p Phi^p, e_k = c_k for mu_1 and e_k = s_k for mu_2.
Because mu_1 only sees cosine modes and mu_2 only sine modes, nulling the
truncated state splits into two independent exponential moment problems.

Each one is solved for the minimum-H^1 control among continuous piecewise
linear functions vanishing at 0 and T.  Rows are rescaled by
exp(-(k^2+sigma) T) so no entry overflows, the Gram matrix of the hat basis
is Cholesky-factored, and the resulting minimum-norm problem is solved by
an SVD with a small Tikhonov filter.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
import scipy.linalg as sla

from .errors import ConditioningError
from .potentials import preset
from .schedule import ControlSchedule
from .solver import default_shift, exp_integrals, solve_linearized
from .spectral import basis_coeff, basis_coeffs, ground_state_value, hs_norm

TIKHONOV_SWEEP = (1e-14, 1e-13, 1e-12, 1e-11, 1e-10, 1e-9, 1e-8)
MAX_K = 24


def _mu_denominators(potentials, K):
    """c_0 <mu_1, c_k> for k = 0..K and c_0 <mu_2, s_k> for k = 1..K."""
    phi = ground_state_value(1)
    m1, m2 = potentials.mu_fields
    d1 = np.array([phi * basis_coeff(m1, ("c", k)) for k in range(K + 1)])
    d2 = np.array([phi * basis_coeff(m2, ("s", k)) for k in range(1, K + 1)])
    return d1, d2


@dataclass
class MomentProblem:
    """Targets for the two moment families on (0, T).

    ``targets1[k] = <xi0, c_k> / (c_0 <mu_1, c_k>)`` for k = 0..K and
    ``targets2[k-1] = <xi0, s_k> / (c_0 <mu_2, s_k>)`` for k = 1..K.  The
    constraint on v is int_0^T exp((k^2+sigma) s) v(s) ds = -target, the
    minus sign making the forcing cancel the free evolution.
    """

    T: float
    K: int
    sigma: float
    targets1: np.ndarray
    targets2: np.ndarray
    denom1: np.ndarray
    denom2: np.ndarray
    xi_c: np.ndarray
    xi_s: np.ndarray
    n_basis: int = 0
    tolerance: float = 1e-8
    tikhonov: tuple = TIKHONOV_SWEEP
    xi0: object = None

    @property
    def exponents(self):
        return np.arange(self.K + 1) ** 2.0

    def __post_init__(self):
        if self.n_basis <= 0:
            self.n_basis = 4 * self.K + 16


def compute_targets(xi0, T, K=12, potentials=None, kappa=1.0, p=2, shift=None,
                    tolerance=1e-8, n_basis=0, min_denominator=1e-14):
    """Project xi0 on the basis and divide by the mu coefficients."""
    if xi0.dim != 1:
        raise ValueError("moment problems are one-dimensional")
    if T <= 0:
        raise ValueError("horizon must be positive")
    potentials = potentials or preset("mtB_five", xi0.n)
    sigma = default_shift(kappa, p) if shift is None else float(shift)
    d1, d2 = _mu_denominators(potentials, K)
    for k, d in enumerate(d1):
        if abs(d) < min_denominator:
            raise ZeroDivisionError(f"<mu_1, c_{k}> vanishes numerically")
    for k, d in enumerate(d2, start=1):
        if abs(d) < min_denominator:
            raise ZeroDivisionError(f"<mu_2, s_{k}> vanishes numerically")
    xc, xs = basis_coeffs(xi0, K)
    return MomentProblem(T=float(T), K=int(K), sigma=sigma, targets1=xc / d1,
                         targets2=xs / d2, denom1=d1, denom2=d2, xi_c=xc, xi_s=xs,
                         n_basis=n_basis, tolerance=tolerance, xi0=xi0)


def hat_grid(T, n_basis):
    return np.linspace(0.0, T, n_basis + 2)


def moment_matrix(rates, T, n_basis):
    """Rows: int_0^T exp(-r (T - t)) h_j(t) dt for the interior hat functions."""
    t = hat_grid(T, n_basis)
    h = T / (n_basis + 1)
    rates = np.asarray(rates, dtype=float)
    j0, j1 = exp_integrals(rates * h)
    decay = np.exp(-np.outer(rates, T - t[1:]))  # right end of each interval
    left = h * decay * j1[:, None]
    right = h * decay * (j0 - j1)[:, None]
    A = np.zeros((len(rates), n_basis))
    A += left[:, 1:n_basis + 1]   # node i is the left end of interval i
    A += right[:, :n_basis]       # node i+1 is the right end of interval i
    return A


def h1_gram(T, n_basis):
    """H^1(0,T) Gram matrix of the interior hat functions."""
    h = T / (n_basis + 1)
    main = np.full(n_basis, 2 * h / 3 + 2 / h)
    off = np.full(n_basis - 1, h / 6 - 1 / h)
    return np.diag(main) + np.diag(off, 1) + np.diag(off, -1)


@dataclass
class _Family:
    """Factored minimum-norm solver for one family of moment constraints."""

    A: np.ndarray
    L: np.ndarray
    U: np.ndarray
    s: np.ndarray
    Vt: np.ndarray

    rows: np.ndarray

    @classmethod
    def build(cls, rates, T, n_basis):
        A = moment_matrix(rates, T, n_basis)
        L = np.linalg.cholesky(h1_gram(T, n_basis))
        B = sla.solve_triangular(L, A.T, lower=True).T
        # equilibrate rows before the SVD
        rows = np.linalg.norm(B, axis=1)
        U, s, Vt = np.linalg.svd(B / rows[:, None], full_matrices=False)
        return cls(A, L, U, s, Vt, rows)

    def _apply(self, b, alpha):
        lam = alpha * self.s[0] if self.s.size else 0.0
        filt = self.s / (self.s**2 + lam**2)
        z = self.Vt.T @ (filt * (self.U.T @ (b / self.rows)))
        return sla.solve_triangular(self.L.T, z, lower=False)

    def solve(self, b, alpha, refine=3):
        """Filtered minimum-norm solve with a few steps of iterative refinement."""
        c = self._apply(b, alpha)
        for _ in range(refine):
            c = c + self._apply(b - self.A @ c, alpha)
        return c, None

    def pinv_norm(self, D, alpha):
        """Operator norm of the map b -> z (the H^1 norm of v) composed with D."""
        lam = alpha * self.s[0]
        filt = self.s / (self.s**2 + lam**2)
        M = (self.Vt.T * filt) @ (self.U.T @ (D / self.rows[:, None]))
        return float(np.linalg.norm(M, 2)) if M.size else 0.0


@dataclass
class MomentSolution:
    """Controls v1, v2 sampled on a uniform grid (zero at both ends)."""

    times: np.ndarray
    v1: np.ndarray
    v2: np.ndarray
    residuals1: np.ndarray
    residuals2: np.ndarray
    alpha: float
    singular_values: tuple
    v1_h1_norm: float
    v2_h1_norm: float
    problem: MomentProblem = field(repr=False, default=None)

    @property
    def residuals(self):
        return np.concatenate([self.residuals1, self.residuals2])

    @property
    def h1_norm(self):
        return math.hypot(self.v1_h1_norm, self.v2_h1_norm)

    def schedule(self, size=5, base=None):
        """Sampled schedule with v1, v2 in the last two components and
        ``base`` (default zero) in the others."""
        vals = np.zeros((len(self.times), size))
        if base is not None:
            vals[:, :] = np.asarray(base, dtype=float)
        vals[:, size - 2] = self.v1
        vals[:, size - 1] = self.v2
        return ControlSchedule.sampled(self.times, vals)


def _family_solve(fam, b, denom, scale, tol):
    """Try the Tikhonov sweep; return (coefficients, alpha, residuals)."""
    best = None
    for alpha in TIKHONOV_SWEEP:
        c, _ = fam.solve(b, alpha)
        # residual expressed as the predicted terminal mode amplitude
        res = (fam.A @ c - b) * denom
        ok = np.max(np.abs(res), initial=0.0) <= tol * scale
        if ok:
            return c, alpha, res
        if best is None or np.max(np.abs(res)) < np.max(np.abs(best[2])):
            best = (c, alpha, res)
    return None, best[1], best[2]


def solve_moment(problem):
    """Minimum-H^1 controls (v1, v2) vanishing at 0 and T.

    Raises ConditioningError if no weight in the sweep meets the residual
    tolerance, which is relative to ||xi0||_{L^2}.
    """
    if problem.K > MAX_K:
        raise ValueError(f"truncation K must not exceed {MAX_K}")
    T, K, nb = problem.T, problem.K, problem.n_basis
    ks = np.arange(K + 1, dtype=float)
    rates = ks**2 + problem.sigma
    decay1 = np.exp(-rates * T)
    decay2 = decay1[1:]
    b1 = -problem.targets1 * decay1
    b2 = -problem.targets2 * decay2
    scale = math.sqrt(float(np.sum(problem.xi_c**2) + np.sum(problem.xi_s**2)))
    t = hat_grid(T, nb)
    if scale == 0.0:
        zero = np.zeros(nb + 2)
        return MomentSolution(t, zero, zero.copy(), np.zeros(K + 1), np.zeros(K), 0.0,
                              (), 0.0, 0.0, problem)
    fam1 = _Family.build(rates, T, nb)
    fam2 = _Family.build(rates[1:], T, nb)
    c1, a1, r1 = _family_solve(fam1, b1, problem.denom1, scale, problem.tolerance)
    c2, a2, r2 = _family_solve(fam2, b2, problem.denom2, scale, problem.tolerance)
    if c1 is None or c2 is None:
        raise ConditioningError(
            "moment residual above tolerance after the regularization sweep",
            {"singular_values_1": fam1.s.tolist(), "singular_values_2": fam2.s.tolist(),
             "scaled_targets_1": b1.tolist(), "scaled_targets_2": b2.tolist(),
             "residuals_1": r1.tolist(), "residuals_2": r2.tolist()})
    G = h1_gram(T, nb)
    v1 = np.concatenate([[0.0], c1, [0.0]])
    v2 = np.concatenate([[0.0], c2, [0.0]])
    return MomentSolution(t, v1, v2, r1, r2, max(a1, a2),
                          (tuple(fam1.s), tuple(fam2.s)),
                          math.sqrt(max(c1 @ G @ c1, 0.0)), math.sqrt(max(c2 @ G @ c2, 0.0)),
                          problem)


def tail_bound(xi0, K, T, sigma):
    """Size of the free decay of modes above K, relative to ||xi0||_{L^2}."""
    norm = hs_norm(xi0, 0)
    if norm == 0.0:
        return 0.0
    total = 0.0
    for k in range(K + 1, xi0.n // 2):
        amp = basis_coeff(xi0, ("c", k)) ** 2 + basis_coeff(xi0, ("s", k)) ** 2
        total += math.exp(-2 * (k * k + sigma) * T) * amp
    return math.sqrt(total) / norm


def verify_null(xi0, solution, potentials=None, kappa=1.0, p=2, shift=None):
    """Run the linearized dynamics under (0,...,0,v1,v2).

    Returns (||xi(T)|| / ||xi0||, analytic tail bound).
    """
    prob = solution.problem
    potentials = potentials or preset("mtB_five", xi0.n)
    sigma = prob.sigma if shift is None else shift
    norm = hs_norm(xi0, 0)
    if norm == 0.0:
        return 0.0, 0.0
    sched = solution.schedule(potentials.size)
    traj = solve_linearized(xi0, sched, potentials, kappa, p, (0.0, prob.T), shift=sigma)
    return hs_norm(traj.final, 0) / norm, tail_bound(xi0, prob.K, prob.T, sigma)


def _minimal_norm_operator(T, K, sigma, potentials, n_basis=0):
    """Operator norm of xi0 (unit L^2, modes <= K) -> ||(v1, v2)||_{H^1}."""
    nb = n_basis or 4 * K + 16
    d1, d2 = _mu_denominators(potentials, K)
    rates = np.arange(K + 1, dtype=float) ** 2 + sigma
    fam1 = _Family.build(rates, T, nb)
    fam2 = _Family.build(rates[1:], T, nb)
    D1 = np.diag(-np.exp(-rates * T) / d1)
    D2 = np.diag(-np.exp(-rates[1:] * T) / d2)
    return max(fam1.pinv_norm(D1, TIKHONOV_SWEEP[0]), fam2.pinv_norm(D2, TIKHONOV_SWEEP[0]))


@dataclass
class CostProbe:
    """Control-cost table and the fit log N(T) ~ a + nu / T."""

    T: np.ndarray
    cost: np.ndarray
    nu_fit: float
    intercept: float
    r_squared: float
    nu_bound: float


def control_cost_probe(T_grid, ensemble=None, K=12, potentials=None, kappa=1.0, p=2,
                       shift=None, worst_case=True, n=None):
    """N_hat(T) = max over the ensemble of ||(v1, v2)||_{H^1}.

    The default ensemble is the unit basis modes c_0..c_K, s_1..s_K; with
    ``worst_case`` the operator norm over all unit data in the controlled
    modes is included as well.  The fit reports the slope of log N_hat
    against 1/T with its R^2, plus ``nu_bound = max T log N_hat``, the
    smallest nu for which exp(nu/T) dominates N_hat on the grid.
    """
    potentials = potentials or preset("mtB_five", n)
    sigma = default_shift(kappa, p) if shift is None else float(shift)
    from .spectral import cos_mode, sin_mode
    if ensemble is None:
        ensemble = [cos_mode(k, potentials.n) for k in range(K + 1)]
        ensemble += [sin_mode(k, potentials.n) for k in range(1, K + 1)]
    T_grid = np.asarray(T_grid, dtype=float)
    costs = []
    for T in T_grid:
        best = 0.0
        for xi in ensemble:
            xi = xi / hs_norm(xi, 0)
            prob = compute_targets(xi, T, K, potentials, kappa, p, shift=sigma)
            best = max(best, solve_moment(prob).h1_norm)
        if worst_case:
            best = max(best, _minimal_norm_operator(T, K, sigma, potentials))
        costs.append(best)
    costs = np.array(costs)
    x = 1.0 / T_grid
    y = np.log(costs)
    if len(T_grid) >= 2:
        slope, icpt = np.polyfit(x, y, 1)
        pred = icpt + slope * x
        ss_res = float(np.sum((y - pred) ** 2))
        ss_tot = float(np.sum((y - y.mean()) ** 2))
        r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    else:
        slope, icpt, r2 = float("nan"), float("nan"), float("nan")
    nu_bound = float(max(np.max(T_grid * y), 0.0))
    return CostProbe(T_grid, costs, float(slope), float(icpt), float(r2), nu_bound)


# Constants of the local exact-steering argument.

def binomial_sum(p, phi=None, weighted=True):
    """sum_{j=2}^{p+1} C(p+1, j) phi^(p+1-j); without weights the binomials are dropped."""
    phi = ground_state_value(1) if phi is None else phi
    terms = [(math.comb(p + 1, j) if weighted else 1) * phi ** (p + 1 - j)
             for j in range(2, p + 2)]
    return math.fsum(terms)


@dataclass
class ConstantPack:
    """Constants of the exact-steering estimate for a configured (nu, T0).

    ``N(tau)`` defaults to exp(nu / tau); pass ``cost`` to override it.
    """

    kappa: float
    p: int
    nu: float
    T0: float
    c_q: float
    T: float
    gamma1: float
    gamma2: float
    Gamma0: float
    T1: float
    Tf: float
    R_T: float
    cost: object = None

    def log_N(self, tau):
        if self.cost is not None:
            return math.log(self.cost(tau))
        return self.nu / tau

    def log_K(self, tau, log_n=None):
        """log K(tau), evaluated in the log domain."""
        kappa, p = self.kappa, self.p
        phi = ground_state_value(1)
        ln = self.log_N(tau) if log_n is None else log_n
        s_w = binomial_sum(p, phi)
        s_u = binomial_sum(p, phi, weighted=False)
        parts = []
        a = 2 * kappa * tau * (p + 1) ** 2 * s_w
        if a > 0:
            parts += [math.log(a), math.log(a) + 4 * ln]
        if self.c_q > 0:
            parts += [2 * math.log(self.c_q) + 2 * ln, 2 * math.log(self.c_q) + 4 * ln]
        inner = _logsumexp(parts)
        expo = tau * (2 * kappa * (p + 1) * phi**p + kappa * (p + 1) * s_u + 1)
        return 0.5 * (math.log(2.0) + inner + expo)

    def K(self, tau, log_n=None):
        lk = self.log_K(tau, log_n)
        return math.exp(lk) if lk < 709 else math.inf

    def log_A4(self, sigma, y_norm, log_n=None):
        """log A_4(sigma, ||y||) of the residual estimate for the nonlinear defect."""
        kappa, p = self.kappa, self.p
        phi = ground_state_value(1)
        ln = self.log_N(sigma) if log_n is None else log_n
        parts = []
        for j in range(2, p + 2):
            coef = 2 * kappa * sigma * (p + 1) ** 2 * math.comb(p + 1, j) * phi ** (p + 1 - j)
            if coef <= 0:
                continue
            ly = 2 * (j - 2) * math.log(y_norm) if j > 2 else 0.0
            if j > 2 and y_norm == 0.0:
                continue
            parts += [math.log(coef) + ly, math.log(coef) + 2 * j * ln + ly]
        if self.c_q > 0:
            parts += [2 * math.log(self.c_q) + 2 * ln, 2 * math.log(self.c_q) + 4 * ln]
        inner = _logsumexp(parts)
        expo = sigma * (2 * kappa * (p + 1) * phi**p + kappa * (p + 1) * binomial_sum(p, phi) + 1)
        return 0.5 * math.log(2.0) + 0.5 * inner + 0.5 * expo

    def A4(self, sigma, y_norm, log_n=None):
        la = self.log_A4(sigma, y_norm, log_n)
        return math.exp(la) if la < 709 else math.inf

    def control_bound(self, T=None):
        """exp(-pi^2 Gamma0 / T) / (exp(2 pi^2 Gamma0 / (3T)) - 1)."""
        T = self.T if T is None else T
        g = self.Gamma0
        return math.exp(-math.pi**2 * g / T) / math.expm1(2 * math.pi**2 * g / (3 * T))

    def as_dict(self):
        return {"kappa": self.kappa, "p": self.p, "nu": self.nu, "T0": self.T0,
                "C_Q": self.c_q, "T": self.T, "gamma1": self.gamma1, "gamma2": self.gamma2,
                "Gamma0": self.Gamma0, "T1": self.T1, "Tf": self.Tf, "R_T": self.R_T,
                "K_at_1": self.K(1.0) if self.T1 > 0 else None}


def _logsumexp(parts):
    if not parts:
        return -math.inf
    m = max(parts)
    return m + math.log(math.fsum(math.exp(x - m) for x in parts))


def constants_pack(kappa, p, nu, T0=1.0, c_q=None, T=1.0, cost=None):
    """Evaluate gamma_1, gamma_2, Gamma_0, T_1, T_f and R_T."""
    if c_q is None:
        c_q = preset("mtB_five").c_q
    phi = ground_state_value(1)
    s = binomial_sum(p, phi)
    gamma1 = 2 * kappa * (p + 1) ** 2 * s
    gamma2 = 2 * kappa * (p + 1) * phi**p + s + 1
    lg1 = max(math.log(gamma1), 0.0) if gamma1 > 0 else 0.0
    lcq = max(math.log(c_q**2), 0.0) if c_q > 0 else 0.0
    Gamma0 = 2 * nu + (lg1 + lcq + gamma2 + math.log(8.0)) / 2
    T1 = min(6 * T / math.pi**2, 1.0, T0)
    Tf = min(T, math.pi**2 / 6, math.pi**2 * T0 / 6)
    R_T = math.exp(-6 * Gamma0 / T1)
    return ConstantPack(kappa=float(kappa), p=int(p), nu=float(nu), T0=float(T0),
                        c_q=float(c_q), T=float(T), gamma1=gamma1, gamma2=gamma2,
                        Gamma0=Gamma0, T1=T1, Tf=Tf, R_T=R_T, cost=cost)


def stacking_series(n):
    """Exact sum_{j=0}^{n} j^2 / 2^j as a Fraction."""
    return sum((Fraction(j * j, 2**j) for j in range(n + 1)), Fraction(0))


def stacking_series_closed_form(n):
    """2^{-n} (-n^2 - 4n + 6 (2^n - 1)) as a Fraction."""
    return Fraction(-n * n - 4 * n + 6 * (2**n - 1), 2**n)


@dataclass
class Assumption2Report:
    mu1_c0: float
    mu2_c0: float
    max_cross: float
    q1: float
    b1: float
    q2: float
    b2: float
    ok: bool
    failures: list


def assumption2_audit(potentials=None, K=32, tol=1e-8):
    """Check the mu equalities and fit the polynomial decay bounds.

    For each coefficient sequence the exponent q comes from a least-squares
    fit of log|coef| against log(k^2); b is then min_k (k^2)^q |coef_k|.
    """
    potentials = potentials or preset("mtB_five")
    m1, m2 = potentials.mu_fields
    c10 = basis_coeff(m1, ("c", 0))
    c20 = basis_coeff(m2, ("c", 0))
    scale = max(abs(c10), 1.0)
    cross = max(max(abs(basis_coeff(m1, ("s", k))), abs(basis_coeff(m2, ("c", k))))
                for k in range(1, K + 1))
    ks = np.arange(1, K + 1)
    a1 = np.array([abs(basis_coeff(m1, ("c", k))) for k in ks])
    a2 = np.array([abs(basis_coeff(m2, ("s", k))) for k in ks])
    lam = ks.astype(float) ** 2

    def fit(a):
        slope = np.polyfit(np.log(lam), np.log(a), 1)[0]
        q = -float(slope)
        return q, float(np.min(lam**q * a))

    q1, b1 = fit(a1)
    q2, b2 = fit(a2)
    failures = []
    if abs(c10) <= tol * scale:
        failures.append("<mu_1, c_0> vanishes")
    if abs(c20) > tol * scale:
        failures.append(f"<mu_2, c_0> = {c20:.3e} is not zero")
    if cross > tol * scale:
        failures.append(f"cross coefficient {cross:.3e} is not zero")
    if not (q1 > 0 and b1 > 0 and q2 > 0 and b2 > 0):
        failures.append("decay fit is not of polynomial lower-bound form")
    return Assumption2Report(c10, c20, cross, q1, b1, q2, b2, not failures, failures)


def moment_report(solution, terminal_ratio, tail):
    """JSON-ready dict {T, K, residuals, v1_h1_norm, v2_h1_norm, terminal_ratio, tail_bound}."""
    prob = solution.problem
    return {"T": prob.T, "K": prob.K, "residuals": [float(r) for r in solution.residuals],
            "v1_h1_norm": solution.v1_h1_norm, "v2_h1_norm": solution.v2_h1_norm,
            "terminal_ratio": terminal_ratio, "tail_bound": tail}


def write_moment_report(report, path):
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
