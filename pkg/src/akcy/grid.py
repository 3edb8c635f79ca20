"""Periodic 4-torus grids, differential forms and spectral exterior calculus.

Fields are sampled on a uniform collocation grid and differentiated through
real FFTs. The first-derivative symbol has its Nyquist entry zeroed, which
makes every discrete derivative a real antisymmetric operator; consequently
``d o d = 0`` and ``<d a, b> = <a, d* b>`` hold to rounding error, not just to
truncation order.

Index conventions
-----------------
* 2-form components are stored in the order ``(01, 02, 03, 12, 13, 23)``.
* 3-form components are stored in the order ``(012, 013, 023, 123)``.
* The orientation is ``dx0 ^ dx1 ^ dx2 ^ dx3``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np
import scipy.fft as sfft

from .errors import GridMismatch, InvalidField, NotSolvable

PAIRS = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))
TRIPLES = ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3))
PAIR_INDEX = {p: i for i, p in enumerate(PAIRS)}

_AXES = (-4, -3, -2, -1)


@dataclass(frozen=True)
class GridSpec:
    """Uniform periodic grid on ``prod_a [0, periods[a])``."""

    dims: tuple[int, int, int, int]
    periods: tuple[float, float, float, float] = (2 * math.pi,) * 4

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        periods = tuple(float(p) for p in self.periods)
        if len(dims) != 4 or len(periods) != 4:
            raise ValueError("GridSpec needs exactly 4 dims and 4 periods")
        for n in dims:
            if n < 4 or n % 2:
                raise ValueError(f"grid dims must be even and >= 4, got {dims}")
        for p in periods:
            if not (p > 0 and math.isfinite(p)):
                raise ValueError(f"grid periods must be positive, got {periods}")
        if math.prod(dims) > np.iinfo(np.intp).max // 64:
            raise ValueError("grid too large for this platform")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "periods", periods)

    @classmethod
    def cube(cls, n: int, period: float = 2 * math.pi) -> "GridSpec":
        return cls((n,) * 4, (period,) * 4)

    @property
    def npoints(self) -> int:
        return math.prod(self.dims)

    @property
    def cell_volume(self) -> float:
        return math.prod(L / n for L, n in zip(self.periods, self.dims))

    @property
    def volume(self) -> float:
        return math.prod(self.periods)

    def coords(self) -> tuple[np.ndarray, ...]:
        """Broadcastable coordinate arrays ``x0..x3``."""
        out = []
        for a, (n, L) in enumerate(zip(self.dims, self.periods)):
            shape = [1, 1, 1, 1]
            shape[a] = n
            out.append((np.arange(n) * (L / n)).reshape(shape))
        return tuple(out)

    def mesh(self) -> tuple[np.ndarray, ...]:
        """Full-size coordinate arrays."""
        return tuple(np.broadcast_to(x, self.dims) for x in self.coords())

    def wavenumber(self, axis: int) -> float:
        return 2 * math.pi / self.periods[axis]


# --------------------------------------------------------------------------
# spectral machinery


class Spectral:
    """Real-FFT differentiation on a :class:`GridSpec` (cached per grid)."""

    def __init__(self, grid: GridSpec):
        self.grid = grid
        dims = grid.dims
        self.hat_shape = dims[:3] + (dims[3] // 2 + 1,)
        ik = []
        ksq = 0.0
        for a, (n, L) in enumerate(zip(dims, grid.periods)):
            if a < 3:
                k = np.fft.fftfreq(n, d=1.0 / n)
            else:
                k = np.arange(n // 2 + 1, dtype=float)
            k = k * (2 * math.pi / L)
            shape = [1, 1, 1, 1]
            shape[a] = k.size
            ksq = ksq + (k ** 2).reshape(shape)
            kd = k.copy()
            kd[n // 2] = 0.0
            ik.append((1j * kd).reshape(shape))
        self.ik = ik
        self.ksq = np.broadcast_to(ksq, self.hat_shape)
        kmin = min(grid.wavenumber(a) for a in range(4)) ** 2
        self.kmin_sq = kmin
        safe = self.ksq.copy()
        safe.flat[0] = 1.0
        self._inv_ksq = 1.0 / safe
        self._inv_ksq.flat[0] = 0.0
        # positive-definite flat inverse for preconditioning: mean mode scaled
        # by the smallest nonzero eigenvalue
        self._inv_ksq_pd = self._inv_ksq.copy()
        self._inv_ksq_pd.flat[0] = 1.0 / kmin
        # same, but with the discrete symbol (Nyquist derivative dropped), which
        # matches operators assembled from `gradient`/`divergence`
        kd2 = sum(np.abs(k) ** 2 for k in ik)
        kd2 = np.broadcast_to(kd2, self.hat_shape).copy()
        kd2[kd2 == 0] = kmin
        self._inv_kd2 = 1.0 / kd2
        nyq = np.ones(self.hat_shape, dtype=bool)
        for a, n in enumerate(dims):
            idx = [slice(None)] * 4
            idx[a] = n // 2
            nyq[tuple(idx)] = False
        self.resolved = nyq

    def fwd(self, arr: np.ndarray) -> np.ndarray:
        return sfft.rfftn(arr, axes=_AXES, workers=-1)

    def inv(self, arr_hat: np.ndarray) -> np.ndarray:
        return sfft.irfftn(arr_hat, s=self.grid.dims, axes=_AXES, workers=-1)

    def gradient(self, values: np.ndarray) -> np.ndarray:
        h = self.fwd(values)
        return self.inv(np.stack([k * h for k in self.ik]))

    def divergence(self, vec: np.ndarray) -> np.ndarray:
        """``sum_a d_a vec[a]`` for ``vec`` of shape ``(4, *dims)``."""
        h = self.fwd(vec)
        acc = self.ik[0] * h[0]
        for a in range(1, 4):
            acc = acc + self.ik[a] * h[a]
        return self.inv(acc)

    def flat_inverse(self, values: np.ndarray, positive_definite=False) -> np.ndarray:
        """Apply ``(-sum d_a^2)^+`` mode-wise with the exact ``|k|^2`` symbol."""
        inv = self._inv_ksq_pd if positive_definite else self._inv_ksq
        return self.inv(self.fwd(values) * inv)

    def precondition(self, values: np.ndarray) -> np.ndarray:
        """Positive-definite inverse of the discrete flat Laplacian symbol."""
        return self.inv(self.fwd(values) * self._inv_kd2)

    def nyquist_free(self, values: np.ndarray) -> np.ndarray:
        """Zero every Fourier mode sitting on a Nyquist plane."""
        return self.inv(self.fwd(values) * self.resolved)

    def pad_product(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Pointwise product evaluated on a 3/2-padded grid, truncated back."""
        dims = self.grid.dims
        big = tuple(3 * n // 2 for n in dims)
        ah = sfft.fftn(a, axes=_AXES, workers=-1)
        bh = sfft.fftn(b, axes=_AXES, workers=-1)
        ap = sfft.ifftn(_embed(ah, big), axes=_AXES, workers=-1)
        bp = sfft.ifftn(_embed(bh, big), axes=_AXES, workers=-1)
        scale = math.prod(big) / math.prod(dims)
        ph = sfft.fftn((ap * bp).real, axes=_AXES, workers=-1)
        return sfft.ifftn(_truncate(ph, dims), axes=_AXES, workers=-1).real * scale


def _split(n):
    # non-negative half (incl. zero) and negative half; Nyquist dropped
    return n // 2, n // 2 - 1


def _embed(h, big):
    out = np.zeros(h.shape[:-4] + big, dtype=complex)
    src = [slice(None)] * (h.ndim - 4)
    dst = list(src)
    pieces = [(src, dst)]
    for a in range(4):
        n = h.shape[h.ndim - 4 + a]
        m = big[a]
        lo, hi = _split(n)
        new = []
        for s, d in pieces:
            new.append((s + [slice(0, lo)], d + [slice(0, lo)]))
            new.append((s + [slice(n - hi, n)], d + [slice(m - hi, m)]))
        pieces = new
    for s, d in pieces:
        out[tuple(d)] = h[tuple(s)]
    return out


def _truncate(h, dims):
    out = np.zeros(h.shape[:-4] + tuple(dims), dtype=complex)
    src = [slice(None)] * (h.ndim - 4)
    pieces = [(src, list(src))]
    for a in range(4):
        m = h.shape[h.ndim - 4 + a]
        n = dims[a]
        lo, hi = _split(n)
        new = []
        for s, d in pieces:
            new.append((s + [slice(0, lo)], d + [slice(0, lo)]))
            new.append((s + [slice(m - hi, m)], d + [slice(n - hi, n)]))
        pieces = new
    for s, d in pieces:
        out[tuple(d)] = h[tuple(s)]
    return out


@lru_cache(maxsize=16)
def spectral(grid: GridSpec) -> Spectral:
    return Spectral(grid)


# --------------------------------------------------------------------------
# field types


class _Field:
    _ncomp: int | None = None  # None: no leading component axis
    _attr = "data"

    def __init__(self, grid: GridSpec, data):
        want = grid.dims if self._ncomp is None else (self._ncomp,) + grid.dims
        if isinstance(data, (list, tuple)) and self._ncomp is not None:
            if len(data) != self._ncomp:
                raise InvalidField(f"{type(self).__name__} needs {self._ncomp} components")
            data = [np.broadcast_to(np.asarray(c, dtype=float), grid.dims) for c in data]
        arr = np.array(data, dtype=float)
        if arr.shape != want:
            try:
                arr = np.array(np.broadcast_to(arr, want))
            except ValueError:
                raise InvalidField(
                    f"{type(self).__name__} expects shape {want}, got {arr.shape}"
                ) from None
        if not np.all(np.isfinite(arr)):
            raise InvalidField(f"{type(self).__name__} contains non-finite values")
        arr.flags.writeable = False
        self.grid = grid
        self.data = arr

    def __repr__(self):
        return f"{type(self).__name__}(dims={self.grid.dims}, max={self.max_abs():.3e})"

    def _like(self, data):
        return type(self)(self.grid, data)

    def _check(self, other):
        if other.grid != self.grid:
            raise GridMismatch(f"grids differ: {self.grid} vs {other.grid}")

    def __add__(self, other):
        if type(other) is not type(self):
            return NotImplemented
        self._check(other)
        return self._like(self.data + other.data)

    def __sub__(self, other):
        if type(other) is not type(self):
            return NotImplemented
        self._check(other)
        return self._like(self.data - other.data)

    def __neg__(self):
        return self._like(-self.data)

    def __mul__(self, other):
        if isinstance(other, ScalarField):
            self._check(other)
            return self._like(self.data * other.data)
        if np.isscalar(other):
            return self._like(self.data * other)
        return NotImplemented

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.isscalar(other):
            return self._like(self.data / other)
        return NotImplemented

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.data)))

    def copy_array(self) -> np.ndarray:
        return np.array(self.data)


class ScalarField(_Field):
    """Function on the grid (``values`` has shape ``dims``)."""

    @property
    def values(self) -> np.ndarray:
        return self.data

    def mean(self) -> float:
        return float(self.data.mean())


class OneForm(_Field):
    """Coefficients in ``dx0..dx3`` (``components`` has shape ``(4, *dims)``)."""

    _ncomp = 4

    @property
    def components(self) -> np.ndarray:
        return self.data


class TwoForm(_Field):
    """Coefficients in ``dx^a ^ dx^b``, ``a < b``, order ``01,02,03,12,13,23``."""

    _ncomp = 6

    @property
    def components(self) -> np.ndarray:
        return self.data

    def matrix(self) -> np.ndarray:
        """Antisymmetric ``(*dims, 4, 4)`` array ``A[a, b] = alpha(d_a, d_b)``."""
        return forms_to_matrix(self.data)

    @classmethod
    def from_matrix(cls, grid: GridSpec, mat: np.ndarray) -> "TwoForm":
        return cls(grid, matrix_to_forms(mat))

    @classmethod
    def constant(cls, grid: GridSpec, coeffs) -> "TwoForm":
        c = np.asarray(coeffs, dtype=float).reshape(6, 1, 1, 1, 1)
        return cls(grid, np.broadcast_to(c, (6,) + grid.dims))


class ThreeForm(_Field):
    """Coefficients in order ``012, 013, 023, 123``."""

    _ncomp = 4

    @property
    def components(self) -> np.ndarray:
        return self.data


class FourForm(_Field):
    """Coefficient of ``dx0 ^ dx1 ^ dx2 ^ dx3``."""

    @property
    def density(self) -> np.ndarray:
        return self.data


def forms_to_matrix(comps: np.ndarray) -> np.ndarray:
    shape = comps.shape[1:] + (4, 4)
    mat = np.zeros(shape)
    for i, (a, b) in enumerate(PAIRS):
        mat[..., a, b] = comps[i]
        mat[..., b, a] = -comps[i]
    return mat


def matrix_to_forms(mat: np.ndarray) -> np.ndarray:
    return np.stack([0.5 * (mat[..., a, b] - mat[..., b, a]) for a, b in PAIRS])


# --------------------------------------------------------------------------
# metric data used by the codifferential


@dataclass(frozen=True, eq=False)
class Metric:
    """Pointwise Riemannian metric ``g_ab`` with cached inverse and volume."""

    grid: GridSpec
    g: np.ndarray  # (*dims, 4, 4)

    @cached_property
    def ginv(self) -> np.ndarray:
        return np.linalg.inv(self.g)

    @cached_property
    def sqrt_det(self) -> np.ndarray:
        return np.sqrt(np.linalg.det(self.g))

    @cached_property
    def is_constant(self) -> bool:
        ref = self.g.reshape(-1, 4, 4)[0]
        return bool(np.max(np.abs(self.g - ref)) <= 1e-14 * max(1.0, np.abs(ref).max()))

    @cached_property
    def lambda2_inverse(self) -> np.ndarray:
        """Induced inner product on 2-forms in the ``PAIRS`` basis, ``(*dims, 6, 6)``."""
        gi = self.ginv
        out = np.empty(self.grid.dims + (6, 6))
        for I, (a, b) in enumerate(PAIRS):
            for K, (c, d) in enumerate(PAIRS):
                out[..., I, K] = gi[..., a, c] * gi[..., b, d] - gi[..., a, d] * gi[..., b, c]
        return out


def flat_metric(grid: GridSpec) -> Metric:
    return Metric(grid, np.broadcast_to(np.eye(4), grid.dims + (4, 4)).copy())


def _metric_of(obj) -> Metric:
    return obj if isinstance(obj, Metric) else obj.metric


def raise_index(alpha: np.ndarray, metric: Metric) -> np.ndarray:
    """``g^{ab} alpha_b`` for 1-form components of shape ``(4, *dims)``."""
    return np.einsum("...ab,b...->a...", metric.ginv, alpha)


def lower_index(vec: np.ndarray, metric: Metric) -> np.ndarray:
    return np.einsum("...ab,b...->a...", metric.g, vec)


def raise_two(beta: np.ndarray, metric: Metric) -> np.ndarray:
    """Upper components ``beta^{ab}`` (``PAIRS`` order) of a 2-form."""
    return np.einsum("...IK,K...->I...", metric.lambda2_inverse, beta)


# --------------------------------------------------------------------------
# operations


def exterior_d(form):
    """Exterior derivative of a 0-, 1-, 2- or 3-form."""
    sp = spectral(form.grid)
    if isinstance(form, ScalarField):
        return OneForm(form.grid, sp.gradient(form.data))
    if isinstance(form, OneForm):
        return TwoForm(form.grid, _d1(sp, form.data))
    if isinstance(form, TwoForm):
        return ThreeForm(form.grid, _d2(sp, form.data))
    if isinstance(form, ThreeForm):
        h = sp.fwd(form.data)
        ik = sp.ik
        acc = ik[0] * h[3] - ik[1] * h[2] + ik[2] * h[1] - ik[3] * h[0]
        return FourForm(form.grid, sp.inv(acc))
    raise TypeError(f"exterior_d: unsupported form type {type(form).__name__}")


def _d1(sp: Spectral, alpha: np.ndarray) -> np.ndarray:
    h = sp.fwd(alpha)
    ik = sp.ik
    out = np.stack([ik[a] * h[b] - ik[b] * h[a] for a, b in PAIRS])
    return sp.inv(out)


def _d2(sp: Spectral, beta: np.ndarray) -> np.ndarray:
    h = sp.fwd(beta)
    ik = sp.ik
    P = PAIR_INDEX
    out = []
    for a, b, c in TRIPLES:
        out.append(ik[a] * h[P[b, c]] - ik[b] * h[P[a, c]] + ik[c] * h[P[a, b]])
    return sp.inv(np.stack(out))


def codifferential(form, triple):
    """Metric codifferential ``d* = -*d*`` of a 1-form or 2-form.

    Evaluated in divergence form, ``d*a = -|g|^{-1/2} d_a(|g|^{1/2} a^a)``
    and ``(d*b)^b = -|g|^{-1/2} d_a(|g|^{1/2} b^{ab})``, which is algebraically
    identical to ``-*d*`` and keeps the discrete adjointness exact.
    """
    metric = _metric_of(triple)
    if metric.grid != form.grid:
        raise GridMismatch("form and metric live on different grids")
    sp = spectral(form.grid)
    if isinstance(form, OneForm):
        return ScalarField(form.grid, _codiff1(sp, form.data, metric))
    if isinstance(form, TwoForm):
        return OneForm(form.grid, _codiff2(sp, form.data, metric))
    raise TypeError(f"codifferential: unsupported form type {type(form).__name__}")


def _codiff1(sp, alpha, metric):
    vec = metric.sqrt_det * raise_index(alpha, metric)
    return -sp.divergence(vec) / metric.sqrt_det


def _codiff2(sp, beta, metric):
    q = metric.sqrt_det * raise_two(beta, metric)
    h = sp.fwd(q)
    ik = sp.ik
    up = []
    for b in range(4):
        acc = 0
        for a in range(4):
            if a == b:
                continue
            i = PAIR_INDEX[(a, b) if a < b else (b, a)]
            sign = 1.0 if a < b else -1.0
            acc = acc + sign * ik[a] * h[i]
        up.append(acc)
    vec = -sp.inv(np.stack(up)) / metric.sqrt_det
    return lower_index(vec, metric)


def laplacian(phi: ScalarField, triple) -> ScalarField:
    """``Delta_g phi = d*d phi`` (nonnegative spectrum)."""
    metric = _metric_of(triple)
    if metric.grid != phi.grid:
        raise GridMismatch("field and metric live on different grids")
    sp = spectral(phi.grid)
    return ScalarField(phi.grid, _codiff1(sp, sp.gradient(phi.data), metric))


def flat_poisson_solve(rho: ScalarField, rtol: float = 1e-10) -> ScalarField:
    """Mean-zero solution of ``-sum_a d_a^2 phi = rho``."""
    scale = max(float(np.abs(rho.data).max()), 1e-300)
    if abs(rho.mean()) > rtol * scale and abs(rho.mean()) > 1e-300:
        raise NotSolvable(f"source has nonzero mean {rho.mean():.3e}")
    sp = spectral(rho.grid)
    return ScalarField(rho.grid, sp.flat_inverse(rho.data))


def integrate(mu: FourForm) -> float:
    """Riemann sum of a top-degree form (exact for resolved trig polynomials)."""
    return float(mu.data.sum() * mu.grid.cell_volume)


def inner(alpha, beta, triple) -> float:
    """L2 inner product ``int <alpha, beta>_g vol_g`` of like-degree forms."""
    metric = _metric_of(triple)
    w = metric.sqrt_det * alpha.grid.cell_volume
    if isinstance(alpha, ScalarField):
        return float(np.sum(w * alpha.data * beta.data))
    if isinstance(alpha, OneForm):
        return float(np.sum(w * np.einsum("a...,a...->...", raise_index(alpha.data, metric), beta.data)))
    if isinstance(alpha, TwoForm):
        return float(np.sum(w * np.einsum("I...,I...->...", raise_two(alpha.data, metric), beta.data)))
    raise TypeError(type(alpha).__name__)


def weighted_mean(phi: ScalarField, weight: np.ndarray) -> float:
    return float(np.sum(phi.data * weight) / np.sum(weight))


def random_smooth(grid: GridSpec, rng: np.random.Generator, kmax: int = 2,
                  ncomp: int | None = None, decay: float = 1.0) -> np.ndarray:
    """Random real trigonometric polynomial with integer modes ``|k_a| <= kmax``.

    Used for test fields; ``kmax`` is clipped below each axis' Nyquist index.
    """
    shape = grid.dims if ncomp is None else (ncomp,) + grid.dims
    sp = spectral(grid)
    h = rng.standard_normal((2,) + shape[:-4] + sp.hat_shape)
    h = h[0] + 1j * h[1]
    mask = np.ones(sp.hat_shape, dtype=bool)
    amp = np.zeros(sp.hat_shape)
    for a, (n, L) in enumerate(zip(grid.dims, grid.periods)):
        m = np.fft.fftfreq(n, d=1.0 / n) if a < 3 else np.arange(n // 2 + 1)
        lim = min(kmax, n // 2 - 1)
        s = [1, 1, 1, 1]
        s[a] = m.size
        mask = mask & (np.abs(m) <= lim).reshape(s)
        amp = amp + (m ** 2).reshape(s)
    h = h * mask * np.exp(-decay * amp / max(kmax, 1) ** 2)
    out = sp.inv(h)
    out = out / max(np.abs(out).max(), 1e-300)
    return out
