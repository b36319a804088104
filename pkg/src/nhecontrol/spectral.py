"""Real fields on the 2*pi-periodic torus held as truncated Fourier series.

A field f is stored through coefficients f_hat with

    f(x) = sum_k f_hat[k] exp(i k.x),   k in {-N/2+1, ..., N/2}^d,

kept in numpy FFT order.  The Nyquist index N/2 is always zero, so the
retained set is symmetric and Hermitian symmetry is exact.  Products are
dealiased by zero padding.
"""

from __future__ import annotations

import csv
import itertools
import math
from functools import lru_cache

import numpy as np

from .errors import ResolutionError

DEFAULT_N = {1: 128, 2: 64}
MAX_SOBOLEV = 3
# Largest exponent accepted before exp() is considered an overflow.
_EXP_LIMIT = 700.0


@lru_cache(maxsize=None)
def _axis_wavenumbers(n):
    k = np.fft.fftfreq(n, d=1.0 / n).round().astype(int)
    return k


@lru_cache(maxsize=None)
def wavenumbers(n, dim=1):
    """Integer wavenumber arrays, one per axis, broadcast to the full grid."""
    k = _axis_wavenumbers(n)
    grids = np.meshgrid(*([k] * dim), indexing="ij")
    for g in grids:
        g.flags.writeable = False
    return tuple(grids)


@lru_cache(maxsize=None)
def ksquared(n, dim=1):
    """|k|^2 on the full coefficient grid."""
    out = sum(g.astype(float) ** 2 for g in wavenumbers(n, dim))
    out = np.asarray(out, dtype=float)
    out.flags.writeable = False
    return out


@lru_cache(maxsize=None)
def _nyquist_mask(n, dim):
    mask = np.zeros((n,) * dim, dtype=bool)
    for g in wavenumbers(n, dim):
        mask |= np.abs(g) == n // 2
    mask.flags.writeable = False
    return mask


@lru_cache(maxsize=None)
def _band_positions(n, m):
    """Positions of the retained indices of an n-grid inside an m-grid."""
    k = _axis_wavenumbers(n)
    keep = np.flatnonzero(np.abs(k) != n // 2)
    return keep, k[keep] % m


def padded_size(n, factors):
    """Grid size that computes a product of ``factors`` band-limited fields
    without aliasing into the retained band (generalized 3/2 rule)."""
    if factors <= 1:
        return n
    m = math.ceil((factors + 1) * n / 2)
    return m + (m % 2)


def pad_coeffs(coeffs, m):
    """Embed FFT-ordered coefficients of an n-grid into an m-grid (m >= n)."""
    n = coeffs.shape[0]
    dim = coeffs.ndim
    if m == n:
        out = np.array(coeffs, dtype=complex)
        out[_nyquist_mask(n, dim)] = 0.0
        return out
    keep, pos = _band_positions(n, m)
    out = np.zeros((m,) * dim, dtype=complex)
    out[np.ix_(*([pos] * dim))] = coeffs[np.ix_(*([keep] * dim))]
    return out


def truncate_coeffs(coeffs, n):
    """Restrict FFT-ordered coefficients of an m-grid to the n-grid band."""
    m = coeffs.shape[0]
    dim = coeffs.ndim
    if m == n:
        out = np.array(coeffs, dtype=complex)
        out[_nyquist_mask(n, dim)] = 0.0
        return out
    keep, pos = _band_positions(n, m)
    out = np.zeros((n,) * dim, dtype=complex)
    out[np.ix_(*([keep] * dim))] = coeffs[np.ix_(*([pos] * dim))]
    return out


def coeffs_to_values(coeffs, m=None):
    """Real grid values of a coefficient array, optionally on a finer m-grid."""
    n = coeffs.shape[0]
    m = n if m is None else m
    full = pad_coeffs(coeffs, m)
    return np.fft.ifftn(full).real * m ** coeffs.ndim


def values_to_coeffs(values, n=None):
    """Coefficients of grid values, truncated to an n-grid band."""
    m = values.shape[0]
    n = m if n is None else n
    c = np.fft.fftn(values) / m ** values.ndim
    return truncate_coeffs(c, n)


def grid_points(n, dim=1):
    """Physical grid coordinates x_j = 2*pi*j/n, one array per axis."""
    x = 2.0 * np.pi * np.arange(n) / n
    return tuple(np.meshgrid(*([x] * dim), indexing="ij"))


class TorusField:
    """Immutable real field on T^d in spectral form."""

    __slots__ = ("_coeffs",)

    def __init__(self, coeffs):
        arr = np.array(coeffs, dtype=complex)
        if arr.ndim < 1 or len(set(arr.shape)) != 1:
            raise ValueError("coefficient array must be square with d >= 1 axes")
        if arr.shape[0] % 2:
            raise ValueError("modes per axis must be even")
        arr[_nyquist_mask(arr.shape[0], arr.ndim)] = 0.0
        arr.flags.writeable = False
        self._coeffs = arr

    # construction
    @classmethod
    def from_values(cls, values, n=None):
        """Field from real grid samples (optionally truncated to n modes)."""
        values = np.asarray(values, dtype=float)
        return cls(values_to_coeffs(values, n))

    @classmethod
    def from_function(cls, func, n=None, dim=1, oversample=1):
        """Sample ``func(*x)`` on an ``oversample``-times finer grid and keep
        the n-mode band; oversampling suppresses aliasing of slowly
        decaying spectra."""
        n = DEFAULT_N.get(dim, 32) if n is None else n
        m = n * int(oversample)
        vals = np.asarray(func(*grid_points(m, dim)), dtype=float)
        vals = np.broadcast_to(vals, (m,) * dim)
        return cls.from_values(vals, n)

    @classmethod
    def constant(cls, value, n=None, dim=1):
        n = DEFAULT_N.get(dim, 32) if n is None else n
        c = np.zeros((n,) * dim, dtype=complex)
        c[(0,) * dim] = value
        return cls(c)

    @classmethod
    def zeros(cls, n=None, dim=1):
        return cls.constant(0.0, n, dim)

    # basic attributes
    @property
    def coeffs(self):
        return self._coeffs

    @property
    def n(self):
        return self._coeffs.shape[0]

    @property
    def dim(self):
        return self._coeffs.ndim

    def values(self, m=None):
        """Real grid values (on an m-grid if given)."""
        return coeffs_to_values(self._coeffs, m)

    def mode(self, *k):
        """Coefficient at integer index k (negative indices allowed)."""
        if len(k) != self.dim:
            raise ValueError("index length must equal the dimension")
        n = self.n
        if any(abs(ki) >= n // 2 for ki in k):
            return 0j
        return complex(self._coeffs[tuple(ki % n for ki in k)])

    def resample(self, n):
        """Same field with a different number of modes per axis."""
        if n >= self.n:
            return TorusField(pad_coeffs(self._coeffs, n))
        return TorusField(truncate_coeffs(self._coeffs, n))

    def hermitian_defect(self):
        """max |f_hat(-k) - conj(f_hat(k))|."""
        c = self._coeffs
        idx = tuple((-np.arange(c.shape[0])) % c.shape[0] for _ in range(c.ndim))
        flipped = np.conj(c[np.ix_(*idx)])
        return float(np.max(np.abs(c - flipped)))

    def inner(self, other):
        """L^2 inner product on the torus."""
        self._check_compatible(other)
        s = np.vdot(other._coeffs, self._coeffs).real
        return float((2 * np.pi) ** self.dim * s)

    def allclose(self, other, atol=1e-12):
        self._check_compatible(other)
        return bool(np.max(np.abs(self._coeffs - other._coeffs)) <= atol)

    def _check_compatible(self, other):
        if not isinstance(other, TorusField):
            raise TypeError("expected a TorusField")
        if other._coeffs.shape != self._coeffs.shape:
            raise ValueError("fields have different resolutions")

    # arithmetic
    def __add__(self, other):
        if isinstance(other, TorusField):
            self._check_compatible(other)
            return TorusField(self._coeffs + other._coeffs)
        return TorusField(self._coeffs + _constant_coeffs(other, self.n, self.dim))

    __radd__ = __add__

    def __neg__(self):
        return TorusField(-self._coeffs)

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, TorusField):
            return pointwise_product(self, other)
        return TorusField(self._coeffs * float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return TorusField(self._coeffs / float(other))

    def __repr__(self):
        return f"TorusField(dim={self.dim}, n={self.n}, l2={hs_norm(self, 0):.6g})"


def _constant_coeffs(value, n, dim):
    c = np.zeros((n,) * dim, dtype=complex)
    c[(0,) * dim] = float(value)
    return c


def hs_weights(n, dim, s):
    """Weights (1+|k|^2)^s scaled so that sum(w |f_hat|^2) = ||f||_{H^s}^2."""
    return (2 * np.pi) ** dim * (1.0 + ksquared(n, dim)) ** s


def hs_norm(f, s=0, s_max=MAX_SOBOLEV):
    """Sobolev norm with weight (1+|k|^2)^s; s=0 is the L^2 norm."""
    if s < 0 or s > s_max:
        raise ValueError(f"Sobolev index must lie in [0, {s_max}]")
    c = f.coeffs
    return float(np.sqrt(np.sum(hs_weights(f.n, f.dim, s) * (c.real**2 + c.imag**2))))


def heat_semigroup(f, t):
    """Apply exp(t*Laplacian) mode by mode."""
    if t < 0:
        raise ValueError("heat semigroup needs t >= 0")
    return TorusField(f.coeffs * np.exp(-t * ksquared(f.n, f.dim)))


def derivative(f, axis=0, order=1):
    """Spectral partial derivative along ``axis``."""
    k = wavenumbers(f.n, f.dim)[axis]
    return TorusField(f.coeffs * (1j * k) ** order)


def laplacian(f):
    return TorusField(-ksquared(f.n, f.dim) * f.coeffs)


def pointwise_product(f, g):
    """Dealiased product of two fields."""
    f._check_compatible(g)
    m = padded_size(f.n, 2)
    vals = coeffs_to_values(f.coeffs, m) * coeffs_to_values(g.coeffs, m)
    return TorusField(values_to_coeffs(vals, f.n))


def b_operator(phi):
    """B(phi) = sum_j (d phi / d x_j)^2."""
    out = None
    for axis in range(phi.dim):
        g = derivative(phi, axis)
        sq = pointwise_product(g, g)
        out = sq if out is None else out + sq
    return out


def out_of_band_fraction(full_coeffs, n):
    """Relative L^2 size of the part of an m-grid spectrum outside the n band."""
    total = np.sum(np.abs(full_coeffs) ** 2)
    if total == 0.0:
        return 0.0
    kept = np.sum(np.abs(truncate_coeffs(full_coeffs, n)) ** 2)
    return float(np.sqrt(max(total - kept, 0.0) / total))


def pointwise_power(f, m, tol=1e-6):
    """f**m with a padded grid large enough to avoid aliasing.

    Raises ResolutionError when more than ``tol`` (relative L^2) of the
    exact power lies outside the retained band; ``tol=None`` skips the check.
    """
    if m < 0 or int(m) != m:
        raise ValueError("power must be a nonnegative integer")
    if m == 0:
        return TorusField.constant(1.0, f.n, f.dim)
    if m == 1:
        return f
    size = padded_size(f.n, m)
    vals = coeffs_to_values(f.coeffs, size) ** m
    full = np.fft.fftn(vals) / size**f.dim
    if tol is not None:
        frac = out_of_band_fraction(full, f.n)
        if frac > tol:
            raise ResolutionError(
                f"power {m} leaves {frac:.3e} of its norm outside the band; increase N"
            )
    return TorusField(truncate_coeffs(full, f.n))


def pointwise_exp_scale(f, phi, a):
    """Grid-pointwise exp(a*phi) * f, evaluated on a 2x padded grid."""
    f._check_compatible(phi)
    m = 2 * f.n
    expo = a * coeffs_to_values(phi.coeffs, m)
    if np.max(expo) > _EXP_LIMIT:
        raise OverflowError(f"exp({np.max(expo):.1f}) overflows double precision")
    vals = np.exp(expo) * coeffs_to_values(f.coeffs, m)
    return TorusField(values_to_coeffs(vals, f.n))


# Orthonormal eigenbasis in one dimension.

def ground_state_value(dim=1):
    """Phi = (2*pi)^(-d/2), the normalized constant."""
    return (2 * np.pi) ** (-dim / 2)


def ground_state(n=None, dim=1):
    return TorusField.constant(ground_state_value(dim), n, dim)


def cos_mode(k, n=None):
    """c_k = cos(kx)/sqrt(pi) for k >= 1 and c_0 = 1/sqrt(2 pi)."""
    n = DEFAULT_N[1] if n is None else n
    if k == 0:
        return ground_state(n)
    _check_mode(k, n)
    c = np.zeros(n, dtype=complex)
    c[k] = c[-k] = 0.5 / np.sqrt(np.pi)
    return TorusField(c)


def sin_mode(k, n=None):
    """s_k = sin(kx)/sqrt(pi), k >= 1."""
    n = DEFAULT_N[1] if n is None else n
    if k < 1:
        raise ValueError("sine modes start at k = 1")
    _check_mode(k, n)
    c = np.zeros(n, dtype=complex)
    c[k] = -0.5j / np.sqrt(np.pi)
    c[-k] = 0.5j / np.sqrt(np.pi)
    return TorusField(c)


def _check_mode(k, n):
    if k < 0 or k >= n // 2:
        raise ValueError(f"mode {k} not representable with N = {n}")


def _parse_which(which):
    if isinstance(which, str):
        kind, k = which[0], int(which[1:])
    else:
        kind, k = which
    if kind not in ("c", "s"):
        raise ValueError("basis element must be 'c' or 's'")
    return kind, int(k)


def basis_coeff(f, which):
    """Inner product <f, c_k> or <f, s_k>; ``which`` is e.g. "c5", ("s", 3)."""
    if f.dim != 1:
        raise ValueError("basis coefficients are defined for d = 1")
    kind, k = _parse_which(which)
    if k >= f.n // 2:
        return 0.0
    ck = f.coeffs[k]
    if kind == "c":
        if k == 0:
            return float(np.sqrt(2 * np.pi) * ck.real)
        return float(2 * np.sqrt(np.pi) * ck.real)
    if k == 0:
        raise ValueError("sine modes start at k = 1")
    return float(-2 * np.sqrt(np.pi) * ck.imag)


def basis_coeffs(f, kmax):
    """Vectors (<f,c_0..c_kmax>, <f,s_1..s_kmax>)."""
    c = np.array([basis_coeff(f, ("c", k)) for k in range(kmax + 1)])
    s = np.array([basis_coeff(f, ("s", k)) for k in range(1, kmax + 1)])
    return c, s


def field_from_basis(c, s, n=None):
    """Inverse of basis_coeffs: sum a_k c_k + sum b_k s_k."""
    n = DEFAULT_N[1] if n is None else n
    coeffs = np.zeros(n, dtype=complex)
    c = np.asarray(c, dtype=float)
    s = np.asarray(s, dtype=float)
    if len(c):
        coeffs[0] = c[0] / np.sqrt(2 * np.pi)
    for k in range(1, len(c)):
        coeffs[k] += c[k] / (2 * np.sqrt(np.pi))
        coeffs[-k] += c[k] / (2 * np.sqrt(np.pi))
    for k in range(1, len(s) + 1):
        coeffs[k] += -0.5j * s[k - 1] / np.sqrt(np.pi)
        coeffs[-k] += 0.5j * s[k - 1] / np.sqrt(np.pi)
    return TorusField(coeffs)


# CSV serialization

def _canonical_indices(n, dim):
    ks = range(-n // 2 + 1, n // 2 + 1)
    return itertools.product(ks, repeat=dim)


def write_field_csv(f, path):
    """Write coefficients in canonical order with header k,re,im (or k1,k2,...)."""
    header = (["k"] if f.dim == 1 else [f"k{i + 1}" for i in range(f.dim)]) + ["re", "im"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for k in _canonical_indices(f.n, f.dim):
            c = f.mode(*k)
            w.writerow([*k, repr(float(c.real)), repr(float(c.imag))])


def read_field_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    dim = len(header) - 2
    n = round(len(body) ** (1.0 / dim))
    coeffs = np.zeros((n,) * dim, dtype=complex)
    for row in body:
        k = tuple(int(v) % n for v in row[:dim])
        coeffs[k] = float(row[dim]) + 1j * float(row[dim + 1])
    return TorusField(coeffs)
