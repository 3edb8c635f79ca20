"""Post-hoc checks on solutions: eigenvalue identities, the potential
``phi_0``, the sandwich bound, the trace identity, a priori monitors, the
uniqueness experiment and the ``s = 1`` decomposition of ``omega_1 - omega``."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import NoConvergence, NotSolvable
from .forms import (
    CompatibleTriple,
    EigenPairField,
    anti_invariant_part,
    build_triple,
    darboux_eigenvalues,
    positivity_check,
    project_invariant,
    project_selfdual,
    symmetric_form_matrix,
    trace_and_det_ratio,
    wedge_density,
)
from .grid import Metric, OneForm, ScalarField, TwoForm, _codiff1, _d1, random_smooth, spectral
from .krylov import pcg
from .lejmi import _w_arrays, dj_plus_array
from .solver import SolverConfig, continuation_solve

log = logging.getLogger(__name__)

NORM_CONVENTION = (
    "|omega_1 - omega|^2 uses the form norm with |omega|^2 = 2, giving "
    "(a1 - 1)^2 + (a2 - 1)^2; the tensor norm of g_1 - g is twice this"
)


# --------------------------------------------------------------------------
# Poisson problem for a varying metric


def metric_poisson(rho: np.ndarray, metric: Metric, rtol: float = 1e-10,
                   solvability_tol: float = 1e-10) -> tuple[np.ndarray, int]:
    """Mean-zero ``u`` with ``Delta_g u = rho``; returns ``(u, iterations)``.

    Solved as ``-d_a(|g|^{1/2} g^{ab} d_b u) = |g|^{1/2} rho`` by PCG. Modes the
    discrete gradient cannot see (mean and pure-Nyquist modes) are removed from
    the source first; the mean is checked against ``solvability_tol``.
    """
    sp = spectral(metric.grid)
    w = metric.sqrt_det
    b = w * rho
    scale = max(float(np.abs(b).max()), 1e-300)
    mean = float(b.mean())
    if abs(mean) > solvability_tol * scale:
        raise NotSolvable(f"source has nonzero weighted mean {mean:.3e}")
    bh = sp.fwd(b)
    invisible = sum(np.abs(k) for k in sp.ik) == 0
    bh[np.broadcast_to(invisible, bh.shape)] = 0.0
    b = sp.inv(bh)
    coeff = w[..., None, None] * metric.ginv
    cbar = float(np.mean(np.trace(coeff, axis1=-2, axis2=-1))) / 4

    def A(x):
        u = x.reshape(metric.grid.dims)
        grad = sp.gradient(u)
        flux = np.einsum("...ab,b...->a...", coeff, grad)
        return -sp.divergence(flux).ravel()

    def M(r):
        return sp.precondition(r.reshape(metric.grid.dims) / cbar).ravel()

    res = pcg(A, b.ravel(), M, rtol=rtol, maxiter=5000)
    if not res.converged:
        raise NoConvergence(f"metric Poisson solve stalled at {res.residual:.2e}")
    u = res.x.reshape(metric.grid.dims)
    u = u - float(np.sum(u * w) / np.sum(w))
    return u, res.iterations


def potential_phi0(omega: TwoForm, omega1: TwoForm, triple: CompatibleTriple,
                   rtol: float = 1e-10) -> ScalarField:
    """``phi_0`` with ``-1/2 Delta_g phi_0 = omega ^ (omega_1 - omega) / omega^2``."""
    rho = -2 * wedge_density(omega.data, omega1.data - omega.data) / triple.omega_sq
    u, _ = metric_poisson(rho, triple.metric, rtol=rtol)
    return ScalarField(omega.grid, u)


def _laplacian_array(u: np.ndarray, metric: Metric) -> np.ndarray:
    sp = spectral(metric.grid)
    return _codiff1(sp, sp.gradient(u), metric)


# --------------------------------------------------------------------------
# eigenvalue identities


@dataclass
class Lemma1Report:
    eigs: EigenPairField = field(repr=False)
    residual_det: float
    residual_norm: float
    residual_lap: float
    bound_margin: float          # min of 2(1 - e^{f/2}) - Delta phi_0, must be >= 0
    printed_margin: float        # min of 2(1 - e^f) - Delta phi_0, reported only
    lap_max: float               # max of Delta phi_0, must stay below 2
    norm_convention: str = NORM_CONVENTION
    phi0: ScalarField | None = field(default=None, repr=False)


def lemma1_check(omega: TwoForm, omega1: TwoForm, f: ScalarField,
                 triple: CompatibleTriple) -> Lemma1Report:
    eigs = darboux_eigenvalues(omega, omega1, triple, invariance_tol=1e-7)
    a1, a2 = eigs.a1.data, eigs.a2.data
    diff = omega1.data - omega.data
    norm_sq = triple.pointwise_inner(diff, diff)
    phi0 = potential_phi0(omega, omega1, triple)
    lap = _laplacian_array(phi0.data, triple.metric)
    ef = np.exp(f.data)
    return Lemma1Report(
        eigs=eigs,
        residual_det=float(np.abs(ef - a1 * a2).max()),
        residual_norm=float(np.abs(norm_sq - (a1 - 1) ** 2 - (a2 - 1) ** 2).max()),
        residual_lap=float(np.abs(lap - (2 - a1 - a2)).max()),
        bound_margin=float(np.min(2 * (1 - np.exp(f.data / 2)) - lap)),
        printed_margin=float(np.min(2 * (1 - ef) - lap)),
        lap_max=float(lap.max()),
        phi0=phi0,
    )


@dataclass(frozen=True)
class SandwichReport:
    lower_ok: bool
    upper_ok: bool
    lower_margin: float  # min eigenvalue of 2 omega_half - (omega_1 - omega)
    upper_margin: float  # min eigenvalue of 2 omega_half + (omega_1 - omega)

    @property
    def ok(self) -> bool:
        return self.lower_ok and self.upper_ok


def sandwich_check(omega: TwoForm, omega1: TwoForm, triple: CompatibleTriple) -> SandwichReport:
    half = 0.5 * (omega.data + omega1.data)
    diff = omega1.data - omega.data
    lo = positivity_check(TwoForm(omega.grid, 2 * half - diff), triple, tol=1e-7)
    hi = positivity_check(TwoForm(omega.grid, 2 * half + diff), triple, tol=1e-7)
    return SandwichReport(lo.ok, hi.ok, lo.min_a1, hi.min_a1)


@dataclass(frozen=True)
class TraceIdentityReport:
    eigen_discrepancy: float   # max |(a1 + a2)/(a1 a2) - (1/a1 + 1/a2)|
    matrix_discrepancy: float  # max |tr_g g1 (det g/det g1)^{1/2} - tr_{g1} g|

    @property
    def max_discrepancy(self) -> float:
        return max(self.eigen_discrepancy, self.matrix_discrepancy)


def trace_identity_eigs(a1: np.ndarray, a2: np.ndarray) -> float:
    lhs = (a1 + a2) / (a1 * a2)
    rhs = 1 / a1 + 1 / a2
    return float(np.max(np.abs(lhs - rhs)))


def trace_identity_check(triple: CompatibleTriple, omega1: TwoForm) -> TraceIdentityReport:
    eigs = darboux_eigenvalues(triple.omega, omega1, triple, invariance_tol=1e-7)
    tr, det_ratio = trace_and_det_ratio(omega1, triple)
    G1 = symmetric_form_matrix(omega1, triple.J)
    tr_inv = np.trace(np.linalg.solve(G1, triple.metric.g), axis1=-2, axis2=-1)
    # 4-dim matrix traces carry a factor 2 relative to the eigenvalue form
    matrix = float(np.max(np.abs(tr / np.sqrt(det_ratio) - tr_inv)))
    return TraceIdentityReport(trace_identity_eigs(eigs.a1.data, eigs.a2.data), matrix)


# --------------------------------------------------------------------------
# a priori monitors


@dataclass
class MonitorSeries:
    t: list = field(default_factory=list)
    max_trace: list = field(default_factory=list)        # tr(g^-1 g_1) = 2 (a1 + a2)
    max_trace_half: list = field(default_factory=list)   # a1 + a2
    max_trace_inverse: list = field(default_factory=list)  # tr(g_1^-1 g) = 2 (1/a1 + 1/a2)
    phi_linf: list = field(default_factory=list)
    min_a1: list = field(default_factory=list)
    grad_proxy: list = field(default_factory=list)       # spectral |d g_1| in g, g_1 norms
    lap_phi0_max: list = field(default_factory=list)
    alarms: list = field(default_factory=list)

    def __len__(self):
        return len(self.t)

    @property
    def bounded(self) -> bool:
        return not self.alarms


def _grad_proxy(omega_t: np.ndarray, triple: CompatibleTriple) -> float:
    """``max |d g_1|`` with the derivative index raised by ``g`` and the
    matrix indices by ``g_1``; a stand-in for the canonical-connection norm."""
    sp = spectral(triple.grid)
    G1 = symmetric_form_matrix(TwoForm(triple.grid, omega_t), triple.J)
    G1i = np.linalg.inv(G1)
    comps = np.moveaxis(G1, (-2, -1), (0, 1))  # (4, 4, *dims)
    dG = np.stack([[sp.gradient(comps[a, b]) for b in range(4)] for a in range(4)])  # (a, b, c, ...)
    ginv = triple.metric.ginv
    val = np.einsum("abc...,pqd...,...cd,...ap,...bq->...", dG, dG, ginv, G1i, G1i)
    return float(np.sqrt(np.maximum(val, 0)).max())


def apriori_monitor(states, triple: CompatibleTriple, alarm: float = 1e3) -> MonitorSeries:
    out = MonitorSeries()
    for st in states:
        om = st.omega_t.data
        G1 = symmetric_form_matrix(st.omega_t, triple.J)
        tr = np.trace(triple.metric.ginv @ G1, axis1=-2, axis2=-1)
        tr_inv = np.trace(np.linalg.solve(G1, triple.metric.g), axis1=-2, axis2=-1)
        phi0 = potential_phi0(triple.omega, TwoForm(triple.grid, om), triple)
        lap = _laplacian_array(phi0.data, triple.metric)
        out.t.append(st.t)
        out.max_trace.append(float(tr.max()))
        out.max_trace_half.append(float(tr.max()) / 2)
        out.max_trace_inverse.append(float(tr_inv.max()))
        out.phi_linf.append(float(np.abs(st.phi.data).max()))
        out.min_a1.append(positivity_check(st.omega_t, triple, tol=1e-7).min_a1)
        out.grad_proxy.append(_grad_proxy(om, triple))
        out.lap_phi0_max.append(float(lap.max()))
        values = (out.max_trace[-1], out.phi_linf[-1], out.grad_proxy[-1], out.max_trace_inverse[-1])
        if not all(np.isfinite(values)):
            out.alarms.append(f"t={st.t:.6g}: non-finite monitor value")
        elif out.max_trace[-1] > alarm:
            out.alarms.append(f"t={st.t:.6g}: tr_g g_1 = {out.max_trace[-1]:.3e} above {alarm:g}")
        if out.lap_phi0_max[-1] >= 2:
            out.alarms.append(f"t={st.t:.6g}: max Delta phi_0 = {out.lap_phi0_max[-1]:.6g} >= 2")
    for msg in out.alarms:
        log.warning("monitor alarm: %s", msg)
    return out


# --------------------------------------------------------------------------
# uniqueness


@dataclass
class UniquenessReport:
    oscillation: float
    passed: bool
    tol: float
    phi_a: ScalarField = field(repr=False)
    phi_b: ScalarField = field(repr=False)
    seed_scale: float = 0.0


def admissible_seed(triple: CompatibleTriple, seed: int = 11, target_min_a1: float = 0.5) -> ScalarField:
    """Smooth mean-zero potential scaled so that ``omega + D_J^+ phi`` keeps
    ``min a1 >= target_min_a1``."""
    grid = triple.grid
    raw = random_smooth(grid, np.random.default_rng(seed), kmax=1)
    raw = raw - float(np.sum(raw * triple.omega_sq) / np.sum(triple.omega_sq))
    D = dj_plus_array(raw, triple)
    scale = 1.0
    for _ in range(60):
        rep = positivity_check(TwoForm(grid, triple.omega.data + scale * D), triple, tol=1e-6)
        if rep.min_a1 >= target_min_a1:
            break
        scale *= 0.5
    return ScalarField(grid, scale * raw)


def uniqueness_experiment(f: ScalarField, triple: CompatibleTriple,
                          config: SolverConfig = SolverConfig(), tol: float = 1e-7,
                          seed: int = 11) -> UniquenessReport:
    """Two continuation runs, from ``0`` and from an admissible smooth seed."""
    phi_a, _ = continuation_solve(f, triple, config)
    start = admissible_seed(triple, seed)
    phi_b, _ = continuation_solve(f, triple, config, phi_init=start)
    d = phi_a.data - phi_b.data
    osc = float(d.max() - d.min())
    return UniquenessReport(osc, osc <= tol, tol, phi_a, phi_b, float(np.abs(start.data).max()))


# --------------------------------------------------------------------------
# decomposition at s = 1


@dataclass
class DecompositionReport:
    decomposition_residual: float  # max |omega_1 - omega - dJd phi_1 - d a_1|
    coclosed_residual: float       # max |d^{*_1} a_1|
    wedge_residual: float          # max |omega_1 ^ d a_1 / omega_1^2|
    elliptic_residual: float       # max |P_J^- dJd phi_1 + P^+_{g_1} d a_1|
    a1_linf: float
    phi1: ScalarField = field(repr=False)
    a1: OneForm = field(repr=False)


def decomposition_44_check(phi: ScalarField, omega1: TwoForm, triple: CompatibleTriple,
                           rtol: float = 1e-11) -> DecompositionReport:
    """Split ``omega_1 - omega = dJd phi_1 + d a_1`` with ``phi_1`` from
    ``-1/2 Delta_{g_1} phi_1 = omega_1 ^ (omega_1 - omega) / omega_1^2`` and
    ``a_1 = W_J(phi) - J d phi_1 + dh`` made ``g_1``-coclosed by ``h``."""
    grid = triple.grid
    sp = spectral(grid)
    om1 = project_invariant(omega1, triple.J, +1)
    t1 = build_triple(om1, triple.J, tol=1e-8)
    m1 = t1.metric
    diff = omega1.data - triple.omega.data
    rho = -2 * wedge_density(om1.data, diff) / t1.omega_sq
    phi1, _ = metric_poisson(rho, m1, rtol=rtol)
    jdphi1 = triple.J.act_one_form(sp.gradient(phi1))
    W = _w_arrays(phi.data - phi.data.mean(), triple, rtol=rtol)
    base = W - jdphi1
    h, _ = metric_poisson(-_codiff1(sp, base, m1), m1, rtol=rtol, solvability_tol=1e-8)
    a1 = base + sp.gradient(h)
    da1 = _d1(sp, a1)
    ddphi = _d1(sp, jdphi1)
    dec = diff - ddphi - da1
    sd = project_selfdual(TwoForm(grid, da1), t1, +1).data
    ell = anti_invariant_part(ddphi, triple.J) + sd
    return DecompositionReport(
        decomposition_residual=float(np.abs(dec).max()),
        coclosed_residual=float(np.abs(_codiff1(sp, a1, m1)).max()),
        wedge_residual=float(np.abs(wedge_density(om1.data, da1) / t1.omega_sq).max()),
        elliptic_residual=float(np.abs(ell).max()),
        a1_linf=float(np.abs(a1).max()),
        phi1=ScalarField(grid, phi1),
        a1=OneForm(grid, a1),
    )
