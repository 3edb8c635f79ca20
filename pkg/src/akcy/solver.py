"""Newton-Krylov solver for ``(omega + D_J^+ phi)^2 = e^f omega^2`` and the
continuity path in ``t``; also the tamed-to-compatible extraction."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import LinearOperator, gmres

from .errors import (
    Cancelled,
    KrylovStall,
    NewtonDiverged,
    NoConvergence,
    NotClosed,
    NotPositive,
    NotTaming,
    NumericalFailure,
    ObstructionNonzero,
    PositivityLost,
    StepUnderflow,
    ValidationError,
)
from .forms import (
    WEDGE,
    AcStructure,
    CompatibleTriple,
    _generalized_eigs,
    anti_invariant_part,
    build_triple,
    project_invariant,
    symmetric_form_matrix,
    trace_and_det_ratio,
    wedge_density,
)
from .grid import OneForm, ScalarField, TwoForm, _codiff1, _d1, exterior_d, spectral
from .lejmi import (
    LejmiSolveReport,
    LejmiSystem,
    _w_arrays,
    dj_plus_array,
    harmonic_anti_dim,
    kernel_basis,
)

log = logging.getLogger(__name__)

KRYLOV_CAP = 20_000  # operator applications per linear solve
_RESTART = 60


@dataclass(frozen=True)
class SolverConfig:
    newton_tol: float = 1e-10
    newton_max: int = 30
    krylov_tol: float = 1e-10
    t_step_init: float = 0.25
    t_step_min: float = 2.0 ** -12
    positivity_margin: float = 1e-6
    dealias: bool = False

    def __post_init__(self):
        if not (0 < self.t_step_min <= self.t_step_init <= 1):
            raise ValidationError("need 0 < t_step_min <= t_step_init <= 1")
        if self.newton_tol <= 0 or self.krylov_tol <= 0:
            raise ValidationError("tolerances must be positive")
        if self.newton_max < 1:
            raise ValidationError("newton_max must be at least 1")
        if self.positivity_margin < 0:
            raise ValidationError("positivity_margin must be >= 0")


@dataclass
class ContinuationState:
    t: float
    phi: ScalarField
    omega_t: TwoForm
    residual_linf: float


@dataclass(frozen=True)
class StepRecord:
    step: int
    t: float
    newton_iters: int
    residual_linf: float
    residual_l2: float
    min_a1: float
    max_trace: float  # max of tr(g^-1 g_t) = 2 (a1 + a2)
    phi_linf: float
    volume_defect: float  # |int omega_t^2 - int omega^2| / int omega^2


@dataclass
class NewtonReport:
    iterations: int
    residual_linf: float
    residual_l2: float
    min_a1: float
    krylov_iterations: list = field(default_factory=list)
    step_lengths: list = field(default_factory=list)
    residual_history: list = field(default_factory=list)
    omega_t: np.ndarray | None = field(default=None, repr=False)
    unresolved_linf: float = 0.0


@dataclass
class ContinuationReport:
    records: list = field(default_factory=list)
    success: bool = False
    message: str = ""
    states: list = field(default_factory=list, repr=False)
    # the 1-form unknown u = W_J(phi): max |d_J^- u| and max |d* u|
    u_membership: tuple | None = None
    rejected_steps: int = 0

    @property
    def t_values(self) -> list:
        return [r.t for r in self.records]


# --------------------------------------------------------------------------
# residual and linearization


def _wedge(a: np.ndarray, b: np.ndarray, dealias: bool, grid) -> np.ndarray:
    if not dealias:
        return wedge_density(a, b)
    sp = spectral(grid)
    out = 0.0
    for i, k in zip(*np.nonzero(WEDGE)):
        out = out + WEDGE[i, k] * sp.pad_product(a[i], b[k])
    return out


def normalize_rhs(f: ScalarField, triple: CompatibleTriple) -> ScalarField:
    """Shift ``f`` so that ``int e^f omega^2 = int omega^2``."""
    w = triple.omega_sq
    top = float(f.data.max())
    c = -(top + math.log(float(np.sum(np.exp(f.data - top) * w)) / float(np.sum(w))))
    return ScalarField(f.grid, f.data + c)


def _volume_ratio(omega_t: np.ndarray, triple: CompatibleTriple, dealias: bool) -> np.ndarray:
    return _wedge(omega_t, omega_t, dealias, triple.grid) / triple.omega_sq


def ma_residual(phi: ScalarField, f: ScalarField, triple: CompatibleTriple,
                dealias: bool = False) -> ScalarField:
    """``(omega + D_J^+ phi)^2 / omega^2 - e^f``."""
    D = dj_plus_array(phi.data, triple)
    om = triple.omega.data + D
    return ScalarField(phi.grid, _volume_ratio(om, triple, dealias) - np.exp(f.data))


def linearize_apply(phi: ScalarField, psi: ScalarField, triple: CompatibleTriple,
                    dealias: bool = False) -> ScalarField:
    """``2 (omega + D_J^+ phi) ^ D_J^+ psi / omega^2``."""
    om = triple.omega.data + dj_plus_array(phi.data, triple)
    out = 2 * _wedge(om, dj_plus_array(psi.data, triple), dealias, phi.grid) / triple.omega_sq
    return ScalarField(phi.grid, out)


def _l2(values: np.ndarray, triple: CompatibleTriple) -> float:
    w = triple.metric.sqrt_det
    return float(np.sqrt(np.sum(values ** 2 * w) / np.sum(w)))


def _mean_free(values: np.ndarray, triple: CompatibleTriple) -> np.ndarray:
    w = triple.omega_sq
    return values - float(np.sum(values * w) / np.sum(w))


def _min_a1(omega_t: np.ndarray, triple: CompatibleTriple) -> float:
    return float(np.min(_generalized_eigs(TwoForm(triple.grid, omega_t), triple)))


# --------------------------------------------------------------------------
# Newton


def _krylov_solve(triple, om, rhs, config, stop):
    """Right-preconditioned GMRES for ``Pi L delta = rhs`` at ``omega_t = om``.

    ``Pi`` drops Nyquist modes: modes whose discrete derivatives all vanish are
    outside the range of ``L``, so the equation is posed on the resolved modes.
    """
    grid = triple.grid
    sp = spectral(grid)
    shape = grid.dims
    n = grid.npoints
    krtol = config.krylov_tol

    def lin(psi):
        if stop is not None and stop():
            raise Cancelled("cancelled inside Krylov solve")
        d = dj_plus_array(psi.reshape(shape), triple, rtol=krtol, stop=stop)
        return sp.nyquist_free(2 * _wedge(om, d, config.dealias, grid) / triple.omega_sq).ravel()

    def prec(y):
        return -sp.flat_inverse(sp.nyquist_free(y.reshape(shape))).ravel()

    A = LinearOperator((n, n), matvec=lambda y: lin(prec(y)), dtype=float)
    count = [0]

    def cb(_):
        count[0] += 1

    b = rhs.ravel()
    bnorm = float(np.linalg.norm(b))
    target = max(krtol * bnorm, 1e-3 * config.newton_tol * math.sqrt(n))
    # restart cycles driven by hand so that stagnation (a singular or
    # inconsistent system) is detected after one cycle instead of at the cap
    y = np.zeros(n)
    prev = bnorm
    for _ in range(max(1, KRYLOV_CAP // _RESTART)):
        y_new, _info = gmres(A, b, x0=y, rtol=krtol, atol=target, restart=_RESTART,
                             maxiter=1, callback=cb, callback_type="pr_norm")
        true = float(np.linalg.norm(b - A.matvec(y_new)))
        if true <= prev:
            y = y_new
        if true <= target:
            break
        if true > 0.5 * prev:
            true = min(true, prev)
            rel = true / max(bnorm, 1e-300)
            if rel > math.sqrt(krtol):
                raise KrylovStall(f"GMRES stagnated at relative residual {rel:.2e} "
                                  f"after {count[0]} iterations")
            log.warning("GMRES stopped early at relative residual %.2e; using the inexact step", rel)
            break
        prev = true
    delta = prec(y)
    return delta.reshape(shape), count[0]


def newton_solve(f: ScalarField, phi_init: ScalarField, triple: CompatibleTriple,
                 config: SolverConfig = SolverConfig(), stop=None):
    """Damped Newton for ``ma_residual(phi, f) = 0``; returns ``(phi, NewtonReport)``.

    Every accepted iterate keeps ``min a1 >= positivity_margin``. The step is
    halved until the trial iterate is positive and the residual decreases.

    Convergence is measured on the Nyquist-free part of the residual; the
    Nyquist remainder (set by how well ``e^f`` is resolved on the grid) is
    reported as ``unresolved_linf``.
    """
    grid = triple.grid
    sp = spectral(grid)

    def residual(om_t):
        raw = _volume_ratio(om_t, triple, config.dealias) - ef
        res = sp.nyquist_free(raw)
        return res, float(np.abs(raw - res).max())

    margin = config.positivity_margin
    ef = np.exp(f.data)
    phi = _mean_free(phi_init.data.copy(), triple)
    D = dj_plus_array(phi, triple, rtol=config.krylov_tol, stop=stop)
    om = triple.omega.data + D
    min_a1 = _min_a1(om, triple)
    if min_a1 < margin:
        raise PositivityLost(f"initial guess violates positivity (min a1 = {min_a1:.3e})")
    R, unres = residual(om)
    rinf = float(np.abs(R).max())
    report = NewtonReport(0, rinf, _l2(R, triple), min_a1, residual_history=[rinf])
    while rinf > config.newton_tol:
        if stop is not None and stop():
            raise Cancelled("cancelled between Newton iterations", report)
        if report.iterations >= config.newton_max:
            raise NewtonDiverged(f"no convergence in {config.newton_max} Newton iterations "
                                 f"(residual {rinf:.2e})", report)
        delta, kits = _krylov_solve(triple, om, -R, config, stop)
        delta = _mean_free(delta, triple)
        Dd = dj_plus_array(delta, triple, rtol=config.krylov_tol, stop=stop)
        alpha = 1.0
        reason = None
        while True:
            om_try = om + alpha * Dd  # D_J^+ is linear
            a1 = _min_a1(om_try, triple)
            if a1 >= margin:
                R_try, unres_try = residual(om_try)
                r_try = float(np.abs(R_try).max())
                if r_try <= (1 - 1e-4 * alpha) * rinf or r_try <= config.newton_tol:
                    break
                reason = "decrease"
            else:
                reason = "positivity"
            alpha *= 0.5
            if alpha < 2.0 ** -20:
                if reason == "positivity":
                    raise PositivityLost(f"line search floor hit keeping min a1 >= {margin:g} "
                                         f"(last trial min a1 = {a1:.3e})", report)
                raise NewtonDiverged(f"line search floor hit without residual decrease "
                                     f"(residual {rinf:.2e})", report)
        phi = phi + alpha * delta
        om, R, rinf, min_a1, unres = om_try, R_try, r_try, a1, unres_try
        report.iterations += 1
        report.krylov_iterations.append(kits)
        report.step_lengths.append(alpha)
        report.residual_history.append(rinf)
        log.debug("newton %d: residual %.3e, step %.3g, krylov %d",
                  report.iterations, rinf, alpha, kits)
    report.residual_linf = rinf
    report.residual_l2 = _l2(R, triple)
    report.min_a1 = min_a1
    report.omega_t = om
    report.unresolved_linf = unres
    return ScalarField(grid, _mean_free(phi, triple)), report


# --------------------------------------------------------------------------
# continuation


def _kernel_hint(triple: CompatibleTriple) -> str:
    if triple.is_constant:
        return ""
    # ker W_J has b+ - h_J^- - 1 non-constant directions; b+ = 3 on the 4-torus
    dim = harmonic_anti_dim(triple).dim
    if dim >= 2:
        return ""
    return (f" (dim ker P = {dim} < b+ - 1 = 2: W_J has {2 - dim} non-constant kernel "
            f"function(s), so the linearization is singular on mean-zero potentials)")


def _record(step, t, iters, phi, om, R_linf, R_l2, triple) -> StepRecord:
    omt = TwoForm(triple.grid, om)
    tr, _ = trace_and_det_ratio(omt, triple)
    w = triple.omega_sq
    vol = float(np.sum(wedge_density(om, om)))
    return StepRecord(step=step, t=t, newton_iters=iters, residual_linf=R_linf,
                      residual_l2=R_l2, min_a1=_min_a1(om, triple), max_trace=float(tr.max()),
                      phi_linf=float(np.abs(phi.data).max()),
                      volume_defect=abs(vol - float(np.sum(w))) / float(np.sum(w)))


def continuation_solve(f: ScalarField, triple: CompatibleTriple,
                       config: SolverConfig = SolverConfig(), phi_init: ScalarField | None = None,
                       stop=None):
    """Follow ``(omega + D_J^+ phi_t)^2 = e^{t f + c(t)} omega^2`` from ``t = 0`` to 1.

    ``phi_init`` only seeds the first Newton solve (the ``t = 0`` solution is
    ``phi = 0``). Returns ``(phi, ContinuationReport)``; raises StepUnderflow
    with the partial report when the step falls below ``t_step_min``.
    """
    grid = triple.grid
    zero = ScalarField(grid, 0.0)
    report = ContinuationReport()
    report.records.append(_record(0, 0.0, 0, zero, triple.omega.data, 0.0, 0.0, triple))
    report.states.append(ContinuationState(0.0, zero, triple.omega, 0.0))
    phi = zero if phi_init is None else phi_init
    t, h, easy = 0.0, config.t_step_init, 0
    while t < 1.0:
        if stop is not None and stop():
            report.message = f"cancelled at t = {t:.6g}"
            raise Cancelled(report.message, report)
        t_next = min(1.0, t + h)
        ft = normalize_rhs(ScalarField(grid, t_next * f.data), triple)
        try:
            phi_new, nrep = newton_solve(ft, phi, triple, config, stop)
        except Cancelled as exc:
            report.message = str(exc)
            exc.report = report
            raise
        except KrylovStall as exc:
            # the linearization at the accepted state does not depend on the
            # step, so a stagnating Krylov solve is not cured by halving
            report.message = f"linear solve failed at t = {t:.6g}: {exc}{_kernel_hint(triple)}"
            raise KrylovStall(report.message, report) from exc
        except (NewtonDiverged, PositivityLost, NoConvergence) as exc:
            h *= 0.5
            easy = 0
            report.rejected_steps += 1
            log.info("step to t=%.6g failed (%s); step -> %.3g", t_next, exc, h)
            if h < config.t_step_min:
                report.message = f"t-step underflow at t = {t:.6g}: {exc}"
                raise StepUnderflow(report.message, report) from exc
            continue
        t = t_next
        phi = phi_new
        om = nrep.omega_t
        report.records.append(_record(len(report.records), t, nrep.iterations, phi, om,
                                      nrep.residual_linf, nrep.residual_l2, triple))
        report.states.append(ContinuationState(t, phi, TwoForm(grid, om), nrep.residual_linf))
        easy = easy + 1 if nrep.iterations <= 3 else 0
        if easy >= 2:
            h = min(1.0, 2 * h)
            easy = 0
    final = report.records[-1]
    report.success = final.residual_linf <= config.newton_tol
    report.message = "reached t = 1" if report.success else "final residual above tolerance"
    W = _w_arrays(phi.data, triple)
    sp = spectral(grid)
    report.u_membership = (
        float(np.abs(anti_invariant_part(_d1(sp, W), triple.J)).max()),
        float(np.abs(_codiff1(sp, W, triple.metric)).max()),
    )
    return phi, report


# --------------------------------------------------------------------------
# tamed -> almost Kahler


@dataclass
class TameReport:
    kappa_linf: float
    solve: LejmiSolveReport
    anti_invariant: float
    closed_defect: float
    min_eigenvalue: float
    alpha: OneForm = field(repr=False)


def tame_to_almost_kahler(Omega: TwoForm, J: AcStructure, background: CompatibleTriple | None = None,
                          tol: float = 1e-8, rtol: float = 1e-11):
    """Return ``(omega, TameReport)`` with ``omega = Omega - d alpha`` J-invariant.

    ``alpha = d* xi`` where ``P xi = P_J^- Omega - kappa`` and ``kappa`` is the
    ``ker P`` component of ``P_J^- Omega``. The operator ``P`` is built on
    ``background`` when given (its ``J`` must be ``J``), otherwise on the almost
    Hermitian triple ``(P_J^+ Omega, J, sym Omega(., J.))``.
    """
    grid = Omega.grid
    scale = max(1.0, Omega.max_abs())
    cdef = exterior_d(Omega).max_abs()
    if cdef > 1e-10 * scale:
        raise NotClosed(f"Omega is not closed (max |d Omega| = {cdef:.2e})")
    S = symmetric_form_matrix(Omega, J)
    emin = float(np.min(np.linalg.eigvalsh(S)))
    if emin <= 0:
        raise NotTaming(f"Omega(X, JX) is not positive (min eigenvalue {emin:.3e})")
    if background is None:
        background = build_triple(project_invariant(Omega, J, +1), J, require_closed=False)
    elif np.max(np.abs(background.J.matrix - J.matrix)) > 1e-12:
        raise ValidationError("background triple carries a different J")
    sysm = LejmiSystem.of(background)
    anti = anti_invariant_part(Omega.data, J)
    # coefficients of P_J^- Omega in the frame (|beta_i|^2 = 2)
    coeffs = 0.5 * sysm.frame_pairing(anti)
    kappa = np.zeros_like(coeffs)
    for k in kernel_basis(background):
        kappa = kappa + sysm.mass_inner(coeffs, k) * k
    kappa_form = sysm.compose(kappa)
    klinf = float(np.abs(kappa_form).max())
    if klinf > tol * scale:
        raise ObstructionNonzero(
            f"P_J^- Omega has a harmonic component of size {klinf:.2e}", klinf)
    b = 2 * sysm.w * (coeffs - kappa)
    ref = float(np.linalg.norm(2 * sysm.w * coeffs)) or 1.0
    xi, res = sysm.solve(b, ref_norm=ref, rtol=rtol)
    if not res.converged:
        raise NoConvergence(f"Lejmi solve stalled at {res.residual:.2e}")
    alpha = sysm.codiff(xi)
    sp = spectral(grid)
    omega = TwoForm(grid, Omega.data - _d1(sp, alpha))
    anti_after = float(np.abs(anti_invariant_part(omega.data, J)).max())
    lam = float(np.min(np.linalg.eigvalsh(symmetric_form_matrix(omega, J))))
    rep = TameReport(klinf, LejmiSolveReport(res.iterations, res.residual, res.converged, anti_after),
                     anti_after, exterior_d(omega).max_abs(), lam, OneForm(grid, alpha))
    if lam <= 0:
        raise NotPositive(f"extracted omega is not positive (min eigenvalue {lam:.3e})")
    if anti_after > 1e3 * tol * scale:
        raise NumericalFailure(f"extracted omega keeps an anti-invariant part {anti_after:.2e}", rep)
    return omega, rep
