"""Lejmi's operator on J-anti-invariant 2-forms and the operators W_J, D_J^+.

Anti-invariant 2-forms are stored by their two coefficients in a global
pointwise-orthonormal frame ``(beta1, beta2)`` of the anti-invariant bundle,
normalized so that ``|beta_i|_g^2 = 2`` (like ``omega``). In these coordinates
``P(psi) = P_J^-(d d* psi)`` becomes a symmetric positive semidefinite
2-channel scalar operator, which is inverted by conjugate gradients with the
flat Laplacian as preconditioner.

The discrete operator is assembled as ``B c = 2 |g|^{1/2} P(c)`` so that it is
symmetric in the plain Euclidean pairing of coefficient arrays.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import LinearOperator, lobpcg

from .errors import FrameDegenerate, GridMismatch, NoConvergence
from .forms import CompatibleTriple, anti_invariant_part
from .grid import (
    OneForm,
    ScalarField,
    TwoForm,
    _codiff1,
    _codiff2,
    _d1,
    spectral,
)
from .krylov import pcg

log = logging.getLogger(__name__)

# relative CG residual for the sigma system; P has eigenvalues near 1e-5 on
# perturbed structures, so 1e-10 would leave ~1e-8 error in D_J^+
LEJMI_RTOL = 1e-12

# dx0^dx2 - dx1^dx3 and dx0^dx3 + dx1^dx2: anti-invariant for the standard J
FRAME_SEEDS = (
    np.array([0.0, 1.0, 0.0, 0.0, -1.0, 0.0]),
    np.array([0.0, 0.0, 1.0, 1.0, 0.0, 0.0]),
)


@dataclass(frozen=True, eq=False)
class AntiInvariantFrame:
    beta1: TwoForm
    beta2: TwoForm

    @property
    def stack(self) -> np.ndarray:
        return np.stack([self.beta1.data, self.beta2.data])


@dataclass(frozen=True, eq=False)
class AntiInvariantField:
    frame: AntiInvariantFrame
    c1: ScalarField
    c2: ScalarField

    @property
    def form(self) -> TwoForm:
        return TwoForm(self.c1.grid, self.c1.data * self.frame.beta1.data
                       + self.c2.data * self.frame.beta2.data)

    @property
    def coeffs(self) -> np.ndarray:
        return np.stack([self.c1.data, self.c2.data])


@dataclass(frozen=True)
class LejmiSolveReport:
    iterations: int
    final_residual: float
    converged: bool
    anti_invariant_residual: float = 0.0


@dataclass
class HarmonicSpectrum:
    dim: int
    eigenvalues: list
    threshold: float
    gap: float
    vectors: np.ndarray = field(repr=False, default=None)

    @property
    def gap_ok(self) -> bool:
        return self.gap >= 10 * self.threshold

    def __iter__(self):
        # unpacks as (dim, eigenvalues)
        return iter((self.dim, self.eigenvalues))


def anti_invariant_frame(triple: CompatibleTriple, det_tol: float = 1e-8) -> AntiInvariantFrame:
    """Project the two constant seed forms through ``P_J^-`` and Gram-Schmidt them."""
    cached = triple._cache.get("frame")
    if cached is not None:
        return cached
    grid = triple.grid
    shape = (6,) + (1,) * 4
    cands = [anti_invariant_part(np.broadcast_to(s.reshape(shape), (6,) + grid.dims).copy(), triple.J)
             for s in FRAME_SEEDS]
    ip = triple.pointwise_inner
    g11 = ip(cands[0], cands[0]) / 2
    g12 = ip(cands[0], cands[1]) / 2
    g22 = ip(cands[1], cands[1]) / 2
    det = g11 * g22 - g12 ** 2
    if np.min(det) < det_tol:
        raise FrameDegenerate(f"projected frame seeds drop rank (min Gram det {np.min(det):.2e})")
    b1 = cands[0] * np.sqrt(2.0 / ip(cands[0], cands[0]))
    v = cands[1] - ip(cands[1], b1) / 2 * b1
    b2 = v * np.sqrt(2.0 / ip(v, v))
    frame = AntiInvariantFrame(TwoForm(grid, b1), TwoForm(grid, b2))
    triple._cache["frame"] = frame
    return frame


class LejmiSystem:
    """Discrete ``B = 2 |g|^{1/2} P`` on frame coefficients of shape ``(2, *dims)``."""

    def __init__(self, triple: CompatibleTriple):
        self.triple = triple
        self.grid = triple.grid
        self.sp = spectral(self.grid)
        self.frame = anti_invariant_frame(triple)
        self.beta = self.frame.stack
        lam = triple.metric.lambda2_inverse
        # lowered frame: <X, beta_i>_g = sum_I beta_low[i, I] X[I]
        self.beta_low = np.einsum("...IK,iK...->iI...", lam, self.beta)
        self.w = triple.metric.sqrt_det
        self.wbar = float(self.w.mean())
        self.shape = (2,) + self.grid.dims
        self.n = 2 * self.grid.npoints

    @classmethod
    def of(cls, triple: CompatibleTriple) -> "LejmiSystem":
        sysm = triple._cache.get("lejmi")
        if sysm is None:
            sysm = cls(triple)
            triple._cache["lejmi"] = sysm
        return sysm

    def compose(self, c: np.ndarray) -> np.ndarray:
        return np.einsum("iI...,i...->I...", self.beta, c)

    def frame_pairing(self, X: np.ndarray) -> np.ndarray:
        """``<X, beta_i>_g`` for 2-form components ``X``."""
        return np.einsum("iI...,I...->i...", self.beta_low, X)

    def codiff(self, c: np.ndarray) -> np.ndarray:
        return _codiff2(self.sp, self.compose(c), self.triple.metric)

    def apply(self, c: np.ndarray) -> np.ndarray:
        X = _d1(self.sp, self.codiff(c))
        return self.w * self.frame_pairing(X)

    def apply_flat(self, x: np.ndarray) -> np.ndarray:
        return self.apply(x.reshape(self.shape)).ravel()

    def precond_flat(self, r: np.ndarray) -> np.ndarray:
        r = r.reshape(self.shape)
        return self.sp.precondition(r / self.wbar).ravel()

    def mass_inner(self, a: np.ndarray, b: np.ndarray) -> float:
        return float(np.sum(2 * self.w * a * b))

    def project_kernel(self, c: np.ndarray) -> np.ndarray:
        basis = kernel_basis(self.triple)
        for k in basis:
            c = c - self.mass_inner(c, k) * k
        return c

    def solve(self, b: np.ndarray, ref_norm: float, rtol: float = LEJMI_RTOL,
              maxiter: int = 10_000, stop=None):
        """PCG on ``B c = b``; the result may carry a ``ker P`` component."""
        res = pcg(self.apply_flat, b.ravel(), self.precond_flat, rtol=rtol,
                  maxiter=maxiter, ref_norm=ref_norm, stop=stop)
        return res.x.reshape(self.shape), res


def lejmi_apply(psi: AntiInvariantField, triple: CompatibleTriple) -> AntiInvariantField:
    """``P(psi) = P_J^-(d d* psi)`` expressed in the frame."""
    if psi.c1.grid != triple.grid:
        raise GridMismatch("field and triple live on different grids")
    sysm = LejmiSystem.of(triple)
    out = sysm.apply(psi.coeffs) / (2 * sysm.w)
    return AntiInvariantField(sysm.frame, ScalarField(triple.grid, out[0]),
                              ScalarField(triple.grid, out[1]))


def lejmi_quadratic_form(psi: AntiInvariantField, triple: CompatibleTriple) -> float:
    """``||d* psi||^2_{L2}``, the quadratic form of ``P``."""
    sysm = LejmiSystem.of(triple)
    v = sysm.codiff(psi.coeffs)
    metric = triple.metric
    vu = np.einsum("...ab,b...->a...", metric.ginv, v)
    return float(np.sum(metric.sqrt_det * np.sum(v * vu, axis=0)) * triple.grid.cell_volume)


def _mean_zero(phi: ScalarField, triple: CompatibleTriple) -> np.ndarray:
    w = triple.metric.sqrt_det
    m = float(np.sum(phi.data * w) / np.sum(w))
    if abs(m) > 1e-12 * max(1.0, phi.max_abs()):
        log.debug("projecting out mean %.3e of the potential", m)
    return phi.data - m


def _jdphi(phi_vals: np.ndarray, triple: CompatibleTriple) -> np.ndarray:
    sp = spectral(triple.grid)
    return triple.J.act_one_form(sp.gradient(phi_vals))


def _solve_sigma_arrays(phi_vals, triple, rtol=LEJMI_RTOL, maxiter=10_000, stop=None):
    sysm = LejmiSystem.of(triple)
    jd = _jdphi(phi_vals, triple)
    X0 = _d1(sysm.sp, jd)
    b = -sysm.w * sysm.frame_pairing(X0)
    ref = float(np.linalg.norm(sysm.w * X0)) * np.sqrt(2.0)
    c, res = sysm.solve(b, ref_norm=ref, rtol=rtol, maxiter=maxiter, stop=stop)
    return jd, c, res, sysm


def solve_sigma(phi: ScalarField, triple: CompatibleTriple, rtol: float = LEJMI_RTOL,
                maxiter: int = 10_000, stop=None):
    """Solve ``d_J^- J d phi + d_J^- d* sigma = 0`` with ``sigma`` orthogonal to ``ker P``."""
    if phi.grid != triple.grid:
        raise GridMismatch("potential and triple live on different grids")
    vals = _mean_zero(phi, triple)
    jd, c, res, sysm = _solve_sigma_arrays(vals, triple, rtol, maxiter, stop)
    if res.iterations > 0:
        c = sysm.project_kernel(c)
    W = jd + sysm.codiff(c)
    anti = float(np.max(np.abs(anti_invariant_part(_d1(sysm.sp, W), triple.J))))
    report = LejmiSolveReport(res.iterations, res.residual, res.converged, anti)
    if not res.converged:
        raise NoConvergence(f"Lejmi solve stalled at residual {res.residual:.2e}", report)
    sigma = AntiInvariantField(sysm.frame, ScalarField(triple.grid, c[0]), ScalarField(triple.grid, c[1]))
    return sigma, report


def _w_arrays(phi_vals, triple, rtol=LEJMI_RTOL, maxiter=10_000, stop=None):
    jd, c, res, sysm = _solve_sigma_arrays(phi_vals, triple, rtol, maxiter, stop)
    if not res.converged:
        raise NoConvergence(f"Lejmi solve stalled at residual {res.residual:.2e}",
                            LejmiSolveReport(res.iterations, res.residual, False))
    if res.iterations == 0:
        return jd
    return jd + sysm.codiff(c)


def w_field(phi: ScalarField, triple: CompatibleTriple, rtol: float = LEJMI_RTOL) -> OneForm:
    """``W_J(phi) = J d phi + d* sigma(phi)``."""
    if phi.grid != triple.grid:
        raise GridMismatch("potential and triple live on different grids")
    return OneForm(triple.grid, _w_arrays(_mean_zero(phi, triple), triple, rtol))


def dj_plus_array(phi_vals: np.ndarray, triple: CompatibleTriple, rtol: float = LEJMI_RTOL, stop=None) -> np.ndarray:
    W = _w_arrays(phi_vals, triple, rtol, stop=stop)
    return _d1(spectral(triple.grid), W)


def dj_plus(phi: ScalarField, triple: CompatibleTriple, rtol: float = LEJMI_RTOL) -> TwoForm:
    """``D_J^+(phi) = d W_J(phi)``."""
    if phi.grid != triple.grid:
        raise GridMismatch("potential and triple live on different grids")
    return TwoForm(triple.grid, dj_plus_array(_mean_zero(phi, triple), triple, rtol))


def d_minus(alpha: OneForm, triple: CompatibleTriple) -> TwoForm:
    """``d_J^- alpha = P_J^- d alpha``."""
    sp = spectral(alpha.grid)
    return TwoForm(alpha.grid, anti_invariant_part(_d1(sp, alpha.data), triple.J))


def divergence_of(alpha: OneForm, triple: CompatibleTriple) -> ScalarField:
    return ScalarField(alpha.grid, _codiff1(spectral(alpha.grid), alpha.data, triple.metric))


# --------------------------------------------------------------------------
# kernel of P


def harmonic_anti_dim(triple: CompatibleTriple, n_eigs: int = 6, rel_tol: float = 1e-6,
                      seed: int = 0, maxiter: int = 400) -> HarmonicSpectrum:
    """Estimate ``dim ker P`` from the lowest eigenvalues of ``P``.

    Eigenvalues are computed by LOBPCG on the Nyquist-free coefficient space
    (Nyquist modes have vanishing discrete derivatives and would otherwise
    show up as spurious kernel). An eigenvalue counts as zero when it is below
    ``rel_tol`` times the smallest nonzero eigenvalue of the flat model,
    ``k_min^2 / 2``.
    """
    cached = triple._cache.get(("spectrum", n_eigs, rel_tol))
    if cached is not None:
        return cached
    sysm = LejmiSystem.of(triple)
    sp = sysm.sp
    shape, n = sysm.shape, sysm.n
    shift = float(sysm.w.max() * sp.ksq.max())

    def project(c):
        return sp.nyquist_free(c)

    def A(x):
        x = np.asarray(x)
        cols = x.reshape(n, -1)
        out = np.empty_like(cols)
        for j in range(cols.shape[1]):
            c = cols[:, j].reshape(shape)
            pc = project(c)
            out[:, j] = (project(sysm.apply(pc)) + shift * (c - pc)).ravel()
        return out.reshape(x.shape)

    def M(x):
        x = np.asarray(x)
        cols = x.reshape(n, -1)
        w2 = (2 * sysm.w).ravel()
        w2 = np.concatenate([w2, w2])
        return (cols * w2[:, None]).reshape(x.shape)

    def T(x):
        x = np.asarray(x)
        cols = x.reshape(n, -1)
        out = np.empty_like(cols)
        for j in range(cols.shape[1]):
            out[:, j] = sysm.precond_flat(cols[:, j])
        return out.reshape(x.shape)

    opA = LinearOperator((n, n), matvec=A, matmat=A, dtype=float)
    opM = LinearOperator((n, n), matvec=M, matmat=M, dtype=float)
    opT = LinearOperator((n, n), matvec=T, matmat=T, dtype=float)
    threshold = rel_tol * 0.5 * sp.kmin_sq
    rng = np.random.default_rng(seed)
    k = n_eigs
    while True:
        X = rng.standard_normal((n, k))
        for j in range(k):
            X[:, j] = project(X[:, j].reshape(shape)).ravel()
        with warnings.catch_warnings():
            # convergence is judged below from explicit residuals
            warnings.simplefilter("ignore", UserWarning)
            vals, vecs = lobpcg(opA, X, B=opM, M=opT, largest=False, tol=1e-10,
                                maxiter=maxiter)
        order = np.argsort(vals)
        vals, vecs = vals[order], vecs[:, order]
        resid = np.linalg.norm(A(vecs) - M(vecs) * vals[None, :], axis=0)
        scale = np.linalg.norm(M(vecs), axis=0)
        # kernel vectors need small absolute residuals; the rest only a sane value
        bad = resid / scale > 1e-5 * max(1.0, float(vals.max()))
        if np.any(bad[vals < 10 * threshold]):
            raise NoConvergence(f"LOBPCG residuals {resid / scale} did not settle")
        dim = int(np.sum(vals < threshold))
        if dim < k or k >= 4 * n_eigs:
            break
        k *= 2
    if dim == 0:
        gap = float(vals[0])
    elif dim < len(vals):
        gap = float(vals[dim] - vals[dim - 1])
    else:
        gap = 0.0
    basis = []
    for j in range(dim):
        v = vecs[:, j].reshape(shape)
        for b in basis:
            v = v - sysm.mass_inner(v, b) * b
        basis.append(v / np.sqrt(sysm.mass_inner(v, v)))
    out = HarmonicSpectrum(dim, [float(v) for v in vals], threshold, gap,
                           np.stack(basis) if basis else np.zeros((0,) + shape))
    if dim and not out.gap_ok:
        log.warning("kernel gap %.3e below 10x threshold %.3e", gap, threshold)
    triple._cache[("spectrum", n_eigs, rel_tol)] = out
    return out


def kernel_basis(triple: CompatibleTriple) -> list[np.ndarray]:
    """Mass-orthonormal basis of the numerical kernel of ``P``.

    For spatially constant structures the constant coefficient fields span the
    kernel exactly (constant anti-invariant forms are closed and coclosed).
    """
    cached = triple._cache.get("kernel")
    if cached is not None:
        return cached
    sysm = LejmiSystem.of(triple)
    if triple.is_constant:
        basis = []
        for i in range(2):
            v = np.zeros(sysm.shape)
            v[i] = 1.0
            basis.append(v / np.sqrt(sysm.mass_inner(v, v)))
    else:
        basis = list(harmonic_anti_dim(triple).vectors)
    triple._cache["kernel"] = basis
    return basis
