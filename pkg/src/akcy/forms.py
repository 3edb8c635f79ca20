"""Pointwise algebra of an almost Kahler structure on the grid.

Conventions (all verified numerically in the tests rather than assumed):

* ``J`` acts on tangent vectors, ``(JX)^a = J[a, b] X^b``; the standard
  structure has ``J d0 = d1`` and ``J d2 = d3``.
* ``g(X, Y) = omega(X, JY)``, i.e. ``G = W @ J`` with ``W`` the matrix of omega.
* On 1-forms ``(J alpha)(X) = -alpha(JX)``, so ``J dx0 = dx1``.
* ``*`` on 2-forms is defined by ``a ^ *b = <a, b>_g vol_g`` with
  ``|dx0 ^ dx1|^2 = 1`` for the flat metric, hence ``|omega|^2 = 2``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import (
    GridMismatch,
    NotClosed,
    NotCompatible,
    NotInvariant,
    NotPositive,
    PairingBroken,
)
from .grid import (
    PAIRS,
    FourForm,
    GridSpec,
    Metric,
    OneForm,
    ScalarField,
    TwoForm,
    exterior_d,
    random_smooth,
)

# wedge pairing on 2-forms: a ^ b = (a^T E b) dx0123
WEDGE = np.zeros((6, 6))
WEDGE[0, 5] = WEDGE[5, 0] = 1.0   # 01 ^ 23
WEDGE[1, 4] = WEDGE[4, 1] = -1.0  # 02 ^ 13
WEDGE[2, 3] = WEDGE[3, 2] = 1.0   # 03 ^ 12

STANDARD_J = np.array(
    [[0.0, -1.0, 0.0, 0.0],
     [1.0, 0.0, 0.0, 0.0],
     [0.0, 0.0, 0.0, -1.0],
     [0.0, 0.0, 1.0, 0.0]]
)
STANDARD_OMEGA = np.array([1.0, 0.0, 0.0, 0.0, 0.0, 1.0])


@dataclass(frozen=True, eq=False)
class AcStructure:
    """Almost complex structure: per-point matrices ``J[..., a, b]``."""

    grid: GridSpec
    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(np.broadcast_to(self.matrix, self.grid.dims + (4, 4)), dtype=float)
        if not np.all(np.isfinite(m)):
            raise NotCompatible("J contains non-finite entries")
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    @classmethod
    def standard(cls, grid: GridSpec) -> "AcStructure":
        return cls(grid, STANDARD_J)

    def square_defect(self) -> float:
        sq = self.matrix @ self.matrix
        return float(np.max(np.abs(sq + np.eye(4))))

    @cached_property
    def on_two_forms(self) -> np.ndarray:
        """``(*dims, 6, 6)`` matrix of ``alpha -> alpha(J., J.)``."""
        J = self.matrix
        out = np.empty(self.grid.dims + (6, 6))
        for I, (a, b) in enumerate(PAIRS):
            for K, (c, d) in enumerate(PAIRS):
                out[..., I, K] = J[..., c, a] * J[..., d, b] - J[..., d, a] * J[..., c, b]
        return out

    @cached_property
    def is_constant(self) -> bool:
        ref = self.matrix.reshape(-1, 4, 4)[0]
        return bool(np.max(np.abs(self.matrix - ref)) <= 1e-14)

    def act_one_form(self, alpha: np.ndarray) -> np.ndarray:
        """``(J alpha)_b = -alpha_a J[a, b]`` on components ``(4, *dims)``."""
        return -np.einsum("...ab,a...->b...", self.matrix, alpha)


@dataclass(frozen=True)
class EigenPairField:
    a1: ScalarField
    a2: ScalarField


@dataclass(frozen=True)
class PositivityReport:
    min_a1: float
    ok: bool
    anti_invariant: float


class CompatibleTriple:
    """``(omega, J, g)`` with ``g = omega(., J.)``; build via :func:`build_triple`."""

    def __init__(self, omega: TwoForm, J: AcStructure, metric: Metric, closed: bool = True):
        self.omega = omega
        self.J = J
        self.metric = metric
        self.closed = closed
        self.grid = omega.grid
        self._cache = {}

    def __repr__(self):
        kind = "constant" if self.is_constant else "varying"
        return f"CompatibleTriple(dims={self.grid.dims}, {kind})"

    @property
    def g(self) -> np.ndarray:
        return self.metric.g

    @cached_property
    def is_constant(self) -> bool:
        om = self.omega.data.reshape(6, -1)
        return self.J.is_constant and bool(np.max(np.abs(om - om[:, :1])) <= 1e-14)

    @cached_property
    def omega_sq(self) -> np.ndarray:
        """Density of ``omega ^ omega``."""
        return wedge_density(self.omega.data, self.omega.data)

    @cached_property
    def volume_density(self) -> np.ndarray:
        return self.metric.sqrt_det

    @cached_property
    def star(self) -> np.ndarray:
        """``(*dims, 6, 6)`` Hodge star on 2-forms."""
        return self.metric.sqrt_det[..., None, None] * (WEDGE @ self.metric.lambda2_inverse)

    @cached_property
    def chol_inv(self) -> np.ndarray:
        return np.linalg.inv(np.linalg.cholesky(self.metric.g))

    def pointwise_inner(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """``<a, b>_g`` for 2-form components ``(6, *dims)``."""
        return np.einsum("I...,...IK,K...->...", a, self.metric.lambda2_inverse, b)


# --------------------------------------------------------------------------
# pointwise form algebra


def _apply6(mat6: np.ndarray, comps: np.ndarray) -> np.ndarray:
    return np.einsum("...IK,K...->I...", mat6, comps)


def _same_grid(*objs):
    g0 = objs[0].grid
    for o in objs[1:]:
        if o.grid != g0:
            raise GridMismatch(f"grids differ: {g0} vs {o.grid}")


def j_involution(alpha: TwoForm, J: AcStructure) -> TwoForm:
    _same_grid(alpha, J)
    return TwoForm(alpha.grid, _apply6(J.on_two_forms, alpha.data))


def project_invariant(alpha: TwoForm, J: AcStructure, sign: int = 1) -> TwoForm:
    """``P_J^{+-} alpha = (alpha +- J alpha) / 2``."""
    _same_grid(alpha, J)
    ja = _apply6(J.on_two_forms, alpha.data)
    s = 1.0 if sign > 0 else -1.0
    return TwoForm(alpha.grid, 0.5 * (alpha.data + s * ja))


def anti_invariant_part(comps: np.ndarray, J: AcStructure) -> np.ndarray:
    return 0.5 * (comps - _apply6(J.on_two_forms, comps))


def hodge_star_2(alpha: TwoForm, triple: CompatibleTriple) -> TwoForm:
    _same_grid(alpha, triple)
    return TwoForm(alpha.grid, _apply6(triple.star, alpha.data))


def project_selfdual(alpha: TwoForm, triple: CompatibleTriple, sign: int = 1) -> TwoForm:
    """``P_g^{+-} alpha = (alpha +- *alpha) / 2``."""
    _same_grid(alpha, triple)
    s = 1.0 if sign > 0 else -1.0
    return TwoForm(alpha.grid, 0.5 * (alpha.data + s * _apply6(triple.star, alpha.data)))


def wedge_density(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (a[0] * b[5] + a[5] * b[0] - a[1] * b[4] - a[4] * b[1]
            + a[2] * b[3] + a[3] * b[2])


def wedge_22(alpha: TwoForm, beta: TwoForm) -> FourForm:
    _same_grid(alpha, beta)
    return FourForm(alpha.grid, wedge_density(alpha.data, beta.data))


def pfaffian(comps: np.ndarray) -> np.ndarray:
    """``omega^2 / 2`` density, equal to ``sqrt(det g)`` for a compatible triple."""
    return 0.5 * wedge_density(comps, comps)


# --------------------------------------------------------------------------
# structure construction


def compatible_j(omega: TwoForm, candidate_metric: np.ndarray | None = None) -> AcStructure:
    """Pointwise polar retraction to an ``omega``-compatible ``J``.

    With ``omega(X, Y) = h(X, A Y)`` for a candidate metric ``h``, the map ``A`` is
    ``h``-skew and ``J = -A (-A^2)^{-1/2}`` satisfies ``J^2 = -1`` and makes
    ``omega(., J.)`` symmetric positive definite.
    """
    grid = omega.grid
    W = omega.matrix()
    h = np.eye(4) if candidate_metric is None else candidate_metric
    h = np.broadcast_to(h, grid.dims + (4, 4))
    A = np.linalg.solve(h, W)
    # -A^2 is h-self-adjoint positive; work in an h-orthonormal frame
    lh = np.linalg.cholesky(h)
    lh_inv = np.linalg.inv(lh)
    lt = np.swapaxes(lh, -1, -2)
    lt_inv = np.swapaxes(lh_inv, -1, -2)
    B = lt @ A @ lt_inv  # skew-symmetric
    B = 0.5 * (B - np.swapaxes(B, -1, -2))
    S = -(B @ B)
    S = 0.5 * (S + np.swapaxes(S, -1, -2))
    w, V = np.linalg.eigh(S)
    if np.min(w) <= 0:
        raise NotPositive("omega is degenerate somewhere")
    S_inv_half = (V / np.sqrt(w)[..., None, :]) @ np.swapaxes(V, -1, -2)
    Jn = -(B @ S_inv_half)
    return AcStructure(grid, lt_inv @ Jn @ lt)


def perturbed_structure(grid: GridSpec, amplitude: float, seed: int = 0,
                        kmax: int = 1, omega: TwoForm | None = None) -> AcStructure:
    """Smooth non-integrable ``J`` compatible with ``omega`` (standard by default).

    A random smooth symmetric field ``H`` of unit spectral radius gives the
    candidate metric ``h = I + amplitude * H``, which is retracted onto the
    compatible structures.
    """
    if not 0 <= amplitude < 1:
        raise ValueError("amplitude must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    if omega is None:
        omega = standard_omega(grid)
    raw = random_smooth(grid, rng, kmax=kmax, ncomp=10)
    H = np.zeros(grid.dims + (4, 4))
    k = 0
    for a in range(4):
        for b in range(a, 4):
            H[..., a, b] = H[..., b, a] = raw[k]
            k += 1
    # spectral radius of H normalized to 1 keeps I + amplitude * H positive
    H = H / np.max(np.abs(np.linalg.eigvalsh(H)))
    h = np.eye(4) + amplitude * H
    return compatible_j(omega, h)


def standard_omega(grid: GridSpec) -> TwoForm:
    return TwoForm.constant(grid, STANDARD_OMEGA)


def build_triple(omega: TwoForm, J: AcStructure, tol: float = 1e-10,
                 require_closed: bool = True) -> CompatibleTriple:
    """Validate ``(omega, J)`` and derive ``g = omega(., J.)``.

    Raises NotClosed, NotCompatible or NotPositive. ``require_closed=False``
    builds an almost Hermitian triple (used for taming forms).
    """
    _same_grid(omega, J)
    scale = max(1.0, omega.max_abs())
    if J.square_defect() > tol * 100:
        raise NotCompatible(f"J^2 != -1 (defect {J.square_defect():.2e})")
    closed_defect = exterior_d(omega).max_abs()
    if require_closed and closed_defect > tol * scale:
        raise NotClosed(f"d omega != 0 (max {closed_defect:.2e})")
    if np.min(wedge_density(omega.data, omega.data)) <= 0:
        raise NotPositive("omega ^ omega must be positive in the orientation dx0123")
    W = omega.matrix()
    G = W @ J.matrix
    asym = float(np.max(np.abs(G - np.swapaxes(G, -1, -2))))
    if asym > tol * scale:
        raise NotCompatible(f"omega(., J.) is not symmetric (defect {asym:.2e})")
    G = 0.5 * (G + np.swapaxes(G, -1, -2))
    jinv = np.max(np.abs(anti_invariant_part(omega.data, J)))
    if jinv > tol * scale:
        raise NotCompatible(f"omega is not J-invariant (defect {jinv:.2e})")
    emin = float(np.min(np.linalg.eigvalsh(G)))
    if emin <= 0:
        raise NotPositive(f"g has a non-positive eigenvalue ({emin:.3e})")
    return CompatibleTriple(omega, J, Metric(omega.grid, G), closed=closed_defect <= tol * scale)


def standard_triple(grid: GridSpec) -> CompatibleTriple:
    return build_triple(standard_omega(grid), AcStructure.standard(grid))


def perturbed_triple(grid: GridSpec, amplitude: float, seed: int = 0, kmax: int = 1) -> CompatibleTriple:
    omega = standard_omega(grid)
    return build_triple(omega, perturbed_structure(grid, amplitude, seed, kmax, omega))


# --------------------------------------------------------------------------
# eigenvalues and positivity


def symmetric_form_matrix(omega1: TwoForm, J: AcStructure) -> np.ndarray:
    G1 = omega1.matrix() @ J.matrix
    return 0.5 * (G1 + np.swapaxes(G1, -1, -2))


def _generalized_eigs(omega1: TwoForm, triple: CompatibleTriple) -> np.ndarray:
    G1 = symmetric_form_matrix(omega1, triple.J)
    L = triple.chol_inv
    M = L @ G1 @ np.swapaxes(L, -1, -2)
    return np.linalg.eigvalsh(M)


def darboux_eigenvalues(omega: TwoForm, omega1: TwoForm, triple: CompatibleTriple,
                        invariance_tol: float = 1e-8, pairing_tol: float = 1e-8) -> EigenPairField:
    """Pointwise ``(a1, a2)`` with ``omega1 = i(a1 t1^t1b + a2 t2^t2b)`` in a g-unitary frame.

    ``omega`` must be the triple's form; it is accepted for symmetry with the
    mathematical statement and checked against ``triple.omega``.
    """
    _same_grid(omega, omega1, triple)
    if np.max(np.abs(omega.data - triple.omega.data)) > 1e-12 * max(1.0, omega.max_abs()):
        raise GridMismatch("omega does not match the triple")
    anti = float(np.max(np.abs(anti_invariant_part(omega1.data, triple.J))))
    if anti > invariance_tol * max(1.0, omega1.max_abs()):
        raise NotInvariant(f"omega1 has anti-invariant part {anti:.2e}")
    lam = _generalized_eigs(omega1, triple)
    scale = np.maximum(1.0, np.abs(lam).max(axis=-1))
    gap = np.maximum(np.abs(lam[..., 1] - lam[..., 0]), np.abs(lam[..., 3] - lam[..., 2]))
    worst = float(np.max(gap / scale))
    if worst > pairing_tol:
        raise PairingBroken(f"generalized eigenvalues do not pair (defect {worst:.2e})")
    a1 = 0.5 * (lam[..., 0] + lam[..., 1])
    a2 = 0.5 * (lam[..., 2] + lam[..., 3])
    return EigenPairField(ScalarField(omega.grid, a1), ScalarField(omega.grid, a2))


def positivity_check(omega_t: TwoForm, triple: CompatibleTriple, tol: float = 1e-8) -> PositivityReport:
    """``ok`` iff ``omega_t`` is J-invariant to ``tol`` and positive everywhere."""
    _same_grid(omega_t, triple)
    anti = float(np.max(np.abs(anti_invariant_part(omega_t.data, triple.J))))
    lam = _generalized_eigs(omega_t, triple)
    min_a1 = float(np.min(lam))
    invariant = anti <= tol * max(1.0, omega_t.max_abs())
    return PositivityReport(min_a1=min_a1, ok=bool(invariant and min_a1 > 0), anti_invariant=anti)


def trace_and_det_ratio(omega1: TwoForm, triple: CompatibleTriple) -> tuple[np.ndarray, np.ndarray]:
    """Matrix traces ``tr(g^-1 g1)`` and ratios ``det g1 / det g`` per point."""
    G1 = symmetric_form_matrix(omega1, triple.J)
    M = triple.metric.ginv @ G1
    return np.trace(M, axis1=-2, axis2=-1), np.linalg.det(G1) / np.linalg.det(triple.metric.g)


def random_two_form(grid: GridSpec, rng: np.random.Generator, kmax: int = 1) -> TwoForm:
    return TwoForm(grid, random_smooth(grid, rng, kmax=kmax, ncomp=6))


def random_one_form(grid: GridSpec, rng: np.random.Generator, kmax: int = 1) -> OneForm:
    return OneForm(grid, random_smooth(grid, rng, kmax=kmax, ncomp=4))


def triple_from_arrays(omega_comps: np.ndarray, grid: GridSpec) -> CompatibleTriple:
    """Triple for an arbitrary closed ``omega`` with ``J`` retracted from the identity."""
    omega = TwoForm(grid, omega_comps)
    return build_triple(omega, compatible_j(omega))

