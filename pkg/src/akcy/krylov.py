"""Preconditioned conjugate gradients on flat numpy arrays."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import Cancelled


@dataclass
class CGResult:
    x: np.ndarray
    iterations: int
    residual: float  # ||b - A x||_2 / ref_norm
    converged: bool


def pcg(apply_A: Callable[[np.ndarray], np.ndarray], b: np.ndarray,
        precond: Callable[[np.ndarray], np.ndarray] | None = None,
        rtol: float = 1e-10, maxiter: int = 10_000, ref_norm: float | None = None,
        x0: np.ndarray | None = None, stop=None) -> CGResult:
    """Solve ``A x = b`` for symmetric positive semidefinite ``A``.

    Convergence is declared when ``||r|| <= rtol * ref_norm`` (``ref_norm``
    defaults to ``||b||``). Consistent singular systems are fine: the iterate
    may pick up kernel components, which callers project out.
    """
    ref = float(np.linalg.norm(b)) if ref_norm is None else float(ref_norm)
    if ref == 0.0:
        ref = 1.0
    x = np.zeros_like(b) if x0 is None else x0.copy()
    r = b - apply_A(x) if x0 is not None else b.copy()
    rnorm = float(np.linalg.norm(r))
    if rnorm <= rtol * ref:
        return CGResult(x, 0, rnorm / ref, True)
    z = r if precond is None else precond(r)
    p = z.copy()
    rz = float(np.vdot(r, z))
    for it in range(1, maxiter + 1):
        if stop is not None and stop():
            raise Cancelled("cancelled inside conjugate gradients")
        Ap = apply_A(p)
        pAp = float(np.vdot(p, Ap))
        if pAp <= 0:
            # direction in the (numerical) kernel; nothing left to gain
            return CGResult(x, it, rnorm / ref, rnorm <= rtol * ref)
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        rnorm = float(np.linalg.norm(r))
        if rnorm <= rtol * ref:
            return CGResult(x, it, rnorm / ref, True)
        z = r if precond is None else precond(r)
        rz_new = float(np.vdot(r, z))
        p = z + (rz_new / rz) * p
        rz = rz_new
    return CGResult(x, maxiter, rnorm / ref, False)
