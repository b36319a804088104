"""Time integration of the controlled nonlinear heat equation

    d/dt psi = Laplacian psi - kappa psi^(p+1) + <u(t), Q> psi

and of its linearization around the ground state.

The nonlinear solver is the second-order exponential Runge-Kutta scheme of
Cox and Matthews (ETD2RK): diffusion is integrated exactly and the
remaining terms are treated by a trapezoid-type correction.  Products are
evaluated on a zero-padded grid so the polynomial nonlinearity is free of
aliasing for band-limited data.
"""

from __future__ import annotations

import csv
import math
from collections import OrderedDict
from dataclasses import dataclass, field, replace

import numpy as np

from .schedule import ControlSchedule
from .spectral import (TorusField, coeffs_to_values, ground_state_value, hs_weights,
                       ksquared, padded_size, values_to_coeffs)

LOG_SOBOLEV = (0, 1, 3)


def exp_integrals(z):
    """J0(z) = int_0^1 exp(-z r) dr and J1(z) = int_0^1 r exp(-z r) dr.

    Small |z| uses the Taylor series, so both are accurate near z = 0.
    """
    z = np.asarray(z, dtype=float)
    j0 = np.empty_like(z)
    j1 = np.empty_like(z)
    small = np.abs(z) < 0.5
    zs = z[small]
    t0 = np.zeros_like(zs)
    t1 = np.zeros_like(zs)
    term = np.ones_like(zs)  # (-z)^n / n!
    for n in range(20):
        t0 += term / (n + 1)
        t1 += term / (n + 2)
        term = term * (-zs) / (n + 1)
    j0[small], j1[small] = t0, t1
    zl = z[~small]
    em = np.exp(-zl)
    j0[~small] = -np.expm1(-zl) / zl
    j1[~small] = (1.0 - em * (1.0 + zl)) / zl**2
    return j0, j1


@dataclass(frozen=True)
class SolverOptions:
    """Step-size rule dt = min(segment/steps_per_segment, max_dt,
    amplitude_scale/(1 + sup|u|)), or ``fixed_dt`` when given."""

    max_dt: float = 1e-3
    steps_per_segment: int = 32
    amplitude_scale: float = 0.1
    fixed_dt: float | None = None
    blowup_threshold: float = 1e8
    record_every: int = 1

    def segment_dt(self, duration, sup_u):
        if self.fixed_dt is not None:
            return min(self.fixed_dt, duration)
        return min(duration / self.steps_per_segment, self.max_dt,
                   self.amplitude_scale / (1.0 + sup_u))


@dataclass
class Trajectory:
    """Recorded solution: times, coefficient snapshots and norm logs."""

    times: np.ndarray
    coeffs: np.ndarray
    hs_log: dict
    min_values: np.ndarray
    blowup: bool = False
    blowup_time: float | None = None
    steps: int = 0

    def state(self, i):
        return TorusField(self.coeffs[i])

    @property
    def final(self):
        return self.state(-1)

    @property
    def states(self):
        return [self.state(i) for i in range(len(self.times))]

    def __len__(self):
        return len(self.times)


def _as_fields(potentials):
    if hasattr(potentials, "fields"):
        return tuple(potentials.fields)
    return tuple(potentials)


class NHEModel:
    """Right-hand side and ETD2RK stepper for one (Q, kappa, p) triple."""

    def __init__(self, potentials, kappa, p, n=None, dim=None):
        fields = _as_fields(potentials)
        self.n = fields[0].n if n is None else n
        self.dim = fields[0].dim if dim is None else dim
        self.kappa = float(kappa)
        self.p = int(p)
        if self.p < 0:
            raise ValueError("p must be a nonnegative integer")
        self.m = padded_size(self.n, max(self.p + 1, 2))
        self.q_values = np.stack([coeffs_to_values(f.coeffs, self.m) for f in fields])
        self.size = len(fields)
        self.ksq = ksquared(self.n, self.dim)
        self._w1 = hs_weights(self.n, self.dim, 1)
        self._cache = OrderedDict()

    def potential_values(self, u):
        u = np.asarray(u, dtype=float)
        out = np.zeros(self.q_values.shape[1:])
        for ui, qv in zip(u, self.q_values):
            if ui != 0.0:
                out += ui * qv
        return out

    def rhs(self, coeffs, u):
        """Coefficients of -kappa psi^(p+1) + <u,Q> psi."""
        v = coeffs_to_values(coeffs, self.m)
        g = self.potential_values(u) * v
        if self.kappa != 0.0:
            g -= self.kappa * v ** (self.p + 1)
        return values_to_coeffs(g, self.n)

    def _factors(self, h):
        key = float(h)
        hit = self._cache.get(key)
        if hit is None:
            z = self.ksq * h
            j0, j1 = exp_integrals(z.ravel())
            e = np.exp(-z)
            # phi1(-z) = J0, phi2(-z) = J0 - J1
            hit = (e, h * j0.reshape(z.shape), h * (j0 - j1).reshape(z.shape))
            self._cache[key] = hit
            if len(self._cache) > 64:
                self._cache.popitem(last=False)
        return hit

    def step(self, coeffs, u0, u1, h):
        """One ETD2RK step with the control varying linearly from u0 to u1."""
        e, p1, p2 = self._factors(h)
        f0 = self.rhs(coeffs, u0)
        a = e * coeffs + p1 * f0
        f1 = self.rhs(a, u1)
        return a + p2 * (f1 - f0)

    def h1(self, coeffs):
        return math.sqrt(float(np.sum(self._w1 * np.abs(coeffs) ** 2)))


def step_nhe(psi, u_val, potentials, kappa, p, dt):
    """Advance psi by one ETD2RK step with a constant control value."""
    model = NHEModel(potentials, kappa, p, psi.n, psi.dim)
    return TorusField(model.step(psi.coeffs, u_val, u_val, dt))


def _record(times, snaps, t, c):
    times.append(t)
    snaps.append(np.array(c))


def _finish(times, snaps, blowup=False, blowup_time=None, steps=0):
    coeffs = np.array(snaps)
    n, dim = coeffs.shape[1], coeffs.ndim - 1
    flat = np.abs(coeffs.reshape(len(coeffs), -1)) ** 2
    hs = {s: np.sqrt(flat @ hs_weights(n, dim, s).ravel()) for s in LOG_SOBOLEV}
    mins = np.array([coeffs_to_values(c).min() for c in coeffs])
    return Trajectory(np.array(times), coeffs, hs, mins, blowup, blowup_time, steps)


def _split_pieces(pieces, extra):
    """Split linear pieces at the given absolute times."""
    extra = sorted(extra)
    out = []
    for t0, t1, u0, u1, seg in pieces:
        cuts = [t for t in extra if t0 < t < t1]
        pts = [t0, *cuts, t1]
        for a, b in zip(pts[:-1], pts[1:]):
            sa = (a - t0) / (t1 - t0)
            sb = (b - t0) / (t1 - t0)
            out.append((a, b, (1 - sa) * u0 + sa * u1, (1 - sb) * u0 + sb * u1, seg))
    return out


def solve_nhe(psi0, sched, potentials, kappa, p, opts=None, breaks=()):
    """Integrate over the whole schedule.

    Steps are aligned to every breakpoint of the schedule and to the extra
    times in ``breaks``.  When the H^1 norm exceeds the blow-up threshold
    (or stops being finite) the run ends and the trajectory is flagged.
    """
    if sched.is_empty():
        raise ValueError("schedule must be nonempty")
    opts = opts or SolverOptions()
    model = NHEModel(potentials, kappa, p, psi0.n, psi0.dim)
    if sched.size != model.size:
        raise ValueError("control dimension does not match the potentials")
    c = np.array(psi0.coeffs)
    times, snaps = [], []
    _record(times, snaps, 0.0, c)
    steps = 0
    sup_cache = {}
    for t0, t1, u0, u1, seg in _split_pieces(sched.pieces(), breaks):
        key = id(seg)
        if key not in sup_cache:
            sup_cache[key] = opts.segment_dt(seg.duration, seg.law.sup())
        dt = sup_cache[key]
        length = t1 - t0
        nsteps = max(1, math.ceil(length / dt - 1e-9))
        h = length / nsteps
        for i in range(nsteps):
            ua = u0 + (u1 - u0) * (i / nsteps)
            ub = u0 + (u1 - u0) * ((i + 1) / nsteps)
            c = model.step(c, ua, ub, h)
            steps += 1
            t = t1 if i == nsteps - 1 else t0 + (i + 1) * h
            norm = model.h1(c)
            if not np.isfinite(norm) or norm > opts.blowup_threshold:
                _record(times, snaps, t, c)
                return _finish(times, snaps, True, t, steps)
            if i == nsteps - 1 or steps % opts.record_every == 0:
                _record(times, snaps, t, c)
    return _finish(times, snaps, steps=steps)


@dataclass(frozen=True)
class SplitOptions:
    """Step rule for the split-step integrator: dt <= max_dt and
    dt * sup|u| <= amplitude_scale on every piece."""

    max_dt: float = 2.5e-4
    amplitude_scale: float = 0.25
    blowup_threshold: float = 1e8


def _reaction(vals, uq, h, kappa, p):
    """Exact flow of psi' = U psi - kappa psi^(p+1) over time h, pointwise."""
    grow = np.exp(uq * h)
    if kappa == 0.0 or p == 0:
        return vals * grow * (math.exp(-kappa * h) if p == 0 else 1.0)
    # z = psi^-p solves z' = -p U z + p kappa in closed form
    j0, _ = exp_integrals(-p * uq * h)
    denom = 1.0 + p * kappa * h * vals**p * j0
    with np.errstate(invalid="ignore", divide="ignore"):
        return vals * grow * np.where(denom > 0, denom, np.nan) ** (-1.0 / p)


def solve_split(psi0, sched, potentials, kappa, p, opts=None, log=None, reference=None):
    """Final state of a Strang split-step run (half heat, exact reaction,
    half heat) together with a blow-up flag.

    Both sub-flows are exact, so large piecewise constant controls cost no
    extra steps beyond the commutator limit set by ``opts``.  Linear pieces
    use their midpoint value.  Only the final state is kept; pass a list
    as ``log`` to collect (t, ||psi - reference||_{H^1}) at every piece end
    (reference defaults to zero).
    """
    if sched.is_empty():
        raise ValueError("schedule must be nonempty")
    opts = opts or SplitOptions()
    model = NHEModel(potentials, kappa, p, psi0.n, psi0.dim)
    if sched.size != model.size:
        raise ValueError("control dimension does not match the potentials")
    m = padded_size(model.n, 2)
    qv = np.stack([coeffs_to_values(f.coeffs, m) for f in _as_fields(potentials)])
    c = np.array(psi0.coeffs)
    ref = None if reference is None else reference.coeffs
    for t0, t1, u0, u1, seg in sched.pieces():
        length = t1 - t0
        um = 0.5 * (np.asarray(u0) + np.asarray(u1))
        uq = np.tensordot(um, qv, 1)
        sup = float(np.max(np.abs(uq)))
        nsteps = max(1, math.ceil(length / min(opts.max_dt, opts.amplitude_scale / (sup + 1e-300))
                                  - 1e-9))
        h = length / nsteps
        half = np.exp(-model.ksq * (h / 2))
        for _ in range(nsteps):
            c = half * c
            v = _reaction(coeffs_to_values(c, m), uq, h, model.kappa, model.p)
            c = half * values_to_coeffs(v, model.n)
        norm = model.h1(c)
        if log is not None:
            log.append((t1, norm if ref is None else model.h1(c - ref)))
        if not np.isfinite(norm) or norm > opts.blowup_threshold:
            return TorusField(c), True
    return TorusField(c), False


def default_shift(kappa, p):
    """Zeroth-order coefficient of the linearization around Phi under the
    stationary control: d/dpsi of kappa psi^(p+1) minus kappa Phi^p."""
    return kappa * p * ground_state_value(1) ** p


def solve_linearized(xi0, v, potentials, kappa, p, interval=None, shift=None,
                     record_times=None):
    """Mode-wise exact solution of

        d/dt xi = xi'' - sigma xi + <v(t), Q> Phi,   sigma = kappa p Phi^p,

    on ``interval`` (defaults to (0, v.duration)); v is read in time relative
    to the interval start and is zero past its end.  The forcing is piecewise
    linear in time, so each Fourier mode is integrated in closed form.
    ``shift`` overrides sigma.  States are recorded at every piece end and
    at ``record_times`` (relative to the interval start).
    """
    if xi0.dim != 1:
        raise ValueError("the linearized solver is one-dimensional")
    fields = _as_fields(potentials)
    sigma = default_shift(kappa, p) if shift is None else float(shift)
    phi = ground_state_value(1)
    s0, s1 = (0.0, v.duration) if interval is None else interval
    qhat = np.stack([f.coeffs for f in fields]) * phi
    rate = ksquared(xi0.n, 1) + sigma
    pieces = _split_pieces(v.pieces(), list(record_times or []))
    c = np.array(xi0.coeffs)
    times, snaps = [s0], [np.array(c)]
    t = 0.0
    horizon = s1 - s0
    for t0, t1, u0, u1, _ in pieces:
        if t0 >= horizon:
            break
        h = t1 - t0
        z = rate * h
        j0, j1 = exp_integrals(z)
        # the forcing is u1 (1 - r) + u0 r, r measured back from the right end
        force = (np.tensordot(u0, qhat, 1) * (h * j1)
                 + np.tensordot(u1, qhat, 1) * (h * (j0 - j1)))
        c = np.exp(-z) * c + force
        t = t1
        times.append(s0 + t)
        snaps.append(np.array(c))
    if t < horizon:
        c = np.exp(-rate * (horizon - t)) * c
        times.append(s1)
        snaps.append(np.array(c))
    return _finish(times, snaps, steps=len(pieces))


def lipschitz_probe(psi0, phi0, u, v, T, potentials, kappa, p, s=1, opts=None):
    """Return (sup_t ||psi(t) - phi(t)||_{H^s}, ||psi0 - phi0||_{H^s} + ||u - v||_{L^2}).

    Both runs use the same step sequence so their states can be compared
    at every recorded time.
    """
    opts = opts or SolverOptions()
    dt = min(opts.segment_dt(seg.duration, seg.law.sup())
             for sched in (u, v) for seg in sched.segments)
    common = replace(opts, fixed_dt=dt)
    breaks = sorted({t for sched in (u, v) for piece in sched.pieces() for t in piece[:2]})
    breaks = [b for b in breaks if 0 < b < T]
    a = solve_nhe(psi0, _truncate(u, T), potentials, kappa, p, common, breaks)
    b = solve_nhe(phi0, _truncate(v, T), potentials, kappa, p, common, breaks)
    if a.blowup or b.blowup:
        raise RuntimeError("blow-up in lipschitz probe")
    w = hs_weights(psi0.n, psi0.dim, s).ravel()
    diff = np.abs((a.coeffs - b.coeffs).reshape(len(a.times), -1)) ** 2
    lhs = float(np.sqrt(np.max(diff @ w)))
    d0 = np.abs((psi0.coeffs - phi0.coeffs).ravel()) ** 2
    rhs = float(np.sqrt(d0 @ w)) + _truncate(u, T).l2_distance(_truncate(v, T))
    return lhs, rhs


def _truncate(sched, T):
    if abs(sched.duration - T) <= 1e-12 * max(1.0, T):
        return sched
    raise ValueError("schedule duration must equal T")


def duhamel_residual(traj, sched, potentials, kappa, p, s=0):
    """Max over recorded times of || psi(t) - e^{t Lap} psi0 - int_0^t e^{(t-r) Lap} F(r) dr ||_{H^s}
    with the time integral done by the trapezoid rule on the recorded grid."""
    psi0 = traj.state(0)
    model = NHEModel(potentials, kappa, p, psi0.n, psi0.dim)
    w = hs_weights(psi0.n, psi0.dim, s)
    ksq = model.ksq
    integral = np.zeros_like(traj.coeffs[0])
    f_prev = model.rhs(traj.coeffs[0], sched.value_at(traj.times[0]))
    worst = 0.0
    for j in range(1, len(traj.times)):
        h = traj.times[j] - traj.times[j - 1]
        e = np.exp(-ksq * h)
        f_next = model.rhs(traj.coeffs[j], sched.value_at(traj.times[j]))
        integral = e * integral + 0.5 * h * (e * f_prev + f_next)
        mild = np.exp(-ksq * traj.times[j]) * traj.coeffs[0] + integral
        res = math.sqrt(float(np.sum(w * np.abs(traj.coeffs[j] - mild) ** 2)))
        worst = max(worst, res)
        f_prev = f_next
    return worst


def write_trajectory_csv(traj, path):
    """CSV ``t,hs0,hs1,hs3,min_grid_value``."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["t", "hs0", "hs1", "hs3", "min_grid_value"])
        for i, t in enumerate(traj.times):
            wr.writerow([repr(float(t)), repr(float(traj.hs_log[0][i])),
                         repr(float(traj.hs_log[1][i])), repr(float(traj.hs_log[3][i])),
                         repr(float(traj.min_values[i]))])
