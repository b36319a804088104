"""Control potentials: the trigonometric saturation sets and the pair mu_1, mu_2.

mu_1(x) = x^3 (2 pi - x)^3 and mu_2(x) = x^3 (x - pi)^3 (x - 2 pi)^3 on
[0, 2 pi), extended periodically.  Their extensions are C^2 but not C^3 at
x = 0, so their Fourier coefficients decay polynomially.  The closed forms
below are the plain integrals

    int_0^{2pi} mu_1(x) cos(kx) dx = 96 pi (k^2 pi^2 - 15) / k^6,
    int_0^{2pi} mu_2(x) sin(kx) dx = -864 pi (840 - 105 k^2 pi^2 + 2 k^4 pi^4) / k^9,

so the coefficients against the orthonormal c_k = cos(kx)/sqrt(pi) and
s_k = sin(kx)/sqrt(pi) are these values divided by sqrt(pi).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from .spectral import DEFAULT_N, TorusField, basis_coeff

# Oversampling factor used when sampling mu_1, mu_2 before truncation.
MU_OVERSAMPLE = 64
PRESETS = ("mtA_d1", "mtA_d2", "mtB_five")


def mu1(x):
    x = np.mod(x, 2 * np.pi)
    return x**3 * (2 * np.pi - x) ** 3


def mu2(x):
    x = np.mod(x, 2 * np.pi)
    return x**3 * (x - np.pi) ** 3 * (x - 2 * np.pi) ** 3


def mu_closed_form(which, k):
    """Closed-form integral of mu_1 against cos(kx) (which=1) or of mu_2
    against sin(kx) (which=2), k >= 1."""
    if k < 1:
        raise ValueError("closed forms are stated for k >= 1; use quadrature for k = 0")
    k = float(k)
    pi = np.pi
    if which == 1:
        return 96 * pi * (k**2 * pi**2 - 15) / k**6
    if which == 2:
        return -864 * pi * (840 - 105 * k**2 * pi**2 + 2 * k**4 * pi**4) / k**9
    raise ValueError("which must be 1 or 2")


def mu_basis_coefficient(which, k):
    """<mu_1, c_k> or <mu_2, s_k> in the orthonormal basis (k >= 1)."""
    return mu_closed_form(which, k) / np.sqrt(np.pi)


def mu_field(which, n=None, oversample=MU_OVERSAMPLE):
    """Band-limited mu field sampled on an oversampled grid."""
    func = {1: mu1, 2: mu2}[which]
    return TorusField.from_function(func, n, dim=1, oversample=oversample)


def _sup_norm(func, dim):
    """Sup norm of a potential on the torus: dense sampling plus a local refine."""
    if dim == 1:
        x = np.linspace(0.0, 2 * np.pi, 20001)
        vals = np.abs(func(x))
        i = int(np.argmax(vals))
        lo, hi = x[max(i - 1, 0)], x[min(i + 1, len(x) - 1)]
        res = minimize_scalar(lambda t: -abs(func(t)), bounds=(lo, hi), method="bounded",
                              options={"xatol": 1e-12})
        return float(max(vals[i], -res.fun))
    x = np.linspace(0.0, 2 * np.pi, 401)
    grids = np.meshgrid(*([x] * dim), indexing="ij")
    return float(np.max(np.abs(func(*grids))))


@dataclass(frozen=True)
class PotentialSet:
    """Potentials Q = (Q_1..Q_q, mu_1, mu_2) on a fixed grid.

    ``functions`` holds the exact callables (used for sup norms and oracles),
    ``fields`` their band-limited representations.  Sets without mu
    potentials carry zero fields in the last two slots so that control
    vectors always have q + 2 entries.
    """

    name: str
    dim: int
    n: int
    q: int
    fields: tuple
    functions: tuple
    labels: tuple
    generators: tuple = ()
    has_mu: bool = False
    c_q: float = field(default=0.0)

    @property
    def size(self):
        return self.q + 2

    @property
    def saturation_fields(self):
        return self.fields[: self.q]

    @property
    def mu_fields(self):
        return self.fields[self.q:]

    @property
    def assumption2_flag(self):
        return self.has_mu and self.labels[0] == "1"

    def combine(self, u):
        """Field sum_i u_i Q_i."""
        u = np.asarray(u, dtype=float)
        if u.shape != (self.size,):
            raise ValueError(f"control vector must have {self.size} entries")
        coeffs = sum(ui * f.coeffs for ui, f in zip(u, self.fields) if ui != 0.0)
        if isinstance(coeffs, int):
            return TorusField.zeros(self.n, self.dim)
        return TorusField(coeffs)

    def coeff_matrix(self):
        """Array (q+2, N, ..., N) of potential coefficients."""
        return np.stack([f.coeffs for f in self.fields])

    def unit(self, label):
        """Control vector selecting one component by label."""
        u = np.zeros(self.size)
        u[self.labels.index(label)] = 1.0
        return u

    def leaf_basis(self):
        """Saturation components (the space H_0), as fields."""
        return self.saturation_fields

    def at(self, n):
        """The same potentials on an N = n grid."""
        if n == self.n:
            return self
        return trig_potentials(self.generators, self.dim, n, self.has_mu, self.name)


def _trig_set(ks, dim):
    funcs = [lambda *x: np.ones_like(x[0])]
    labels = ["1"]
    for k in ks:
        k = tuple(int(v) for v in k)

        def phase(*x, k=k):
            return sum(ki * xi for ki, xi in zip(k, x))

        funcs.append(lambda *x, ph=phase: np.cos(ph(*x)))
        funcs.append(lambda *x, ph=phase: np.sin(ph(*x)))
        tag = ",".join(str(v) for v in k)
        labels += [f"cos({tag})", f"sin({tag})"]
    return funcs, labels


def trig_potentials(ks, dim, n=None, with_mu=False, name="custom"):
    """Potential set {1, cos<k,x>, sin<k,x>}_{k in ks}, optionally with mu_1, mu_2."""
    if with_mu and dim != 1:
        raise ValueError("mu potentials are one-dimensional")
    n = DEFAULT_N[dim] if n is None else n
    ks = [tuple(int(v) for v in k) for k in ks]
    funcs, labels = _trig_set(ks, dim)
    fields = [TorusField.from_function(f, n, dim) for f in funcs]
    q = len(fields)
    if with_mu:
        funcs += [mu1, mu2]
        fields += [mu_field(1, n), mu_field(2, n)]
    else:
        zero = lambda *x: np.zeros_like(x[0])  # noqa: E731
        funcs += [zero, zero]
        fields += [TorusField.zeros(n, dim), TorusField.zeros(n, dim)]
    labels += ["mu1", "mu2"]
    c_q = max(_sup_norm(f, dim) for f in funcs)
    return PotentialSet(name=name, dim=dim, n=n, q=q, fields=tuple(fields),
                        functions=tuple(funcs), labels=tuple(labels),
                        generators=tuple(ks), has_mu=with_mu, c_q=c_q)


def preset(name, n=None):
    """Named potential set.

    ``mtA_d1``: (1, cos x, sin x); ``mtA_d2``: (1, cos, sin) over
    K = {(1,0), (1,1)}; ``mtB_five``: (1, cos x, sin x, mu_1, mu_2).
    """
    if name == "mtA_d1":
        return trig_potentials([(1,)], 1, n, False, name)
    if name == "mtA_d2":
        return trig_potentials([(1, 0), (1, 1)], 2, n, False, name)
    if name == "mtB_five":
        return trig_potentials([(1,)], 1, n, True, name)
    raise ValueError(f"unknown preset {name!r}; choose from {PRESETS}")


def coefficient_audit(kmax=32, n=None):
    """Rows (k, closed_form, quadrature, abs_err) for mu_1 (cos) and mu_2 (sin).

    ``quadrature`` is the spectral coefficient of the sampled field mapped
    back to the plain-integral normalization.
    """
    m1, m2 = mu_field(1, n), mu_field(2, n)
    rows = []
    for which, fld, kind in ((1, m1, "c"), (2, m2, "s")):
        for k in range(1, kmax + 1):
            closed = mu_closed_form(which, k)
            quad = basis_coeff(fld, (kind, k)) * np.sqrt(np.pi)
            rows.append({"mu": which, "k": k, "closed_form": closed,
                         "quadrature": quad, "abs_err": abs(closed - quad)})
    return rows


def write_audit_csv(rows, path, which):
    """CSV ``k,closed_form,quadrature,abs_err`` for one of the two potentials."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "closed_form", "quadrature", "abs_err"])
        for r in rows:
            if r["mu"] == which:
                w.writerow([r["k"], repr(r["closed_form"]), repr(r["quadrature"]),
                            repr(r["abs_err"])])
