import numpy as np
import pytest

from akcy.errors import FrameDegenerate, GridMismatch
from akcy.forms import anti_invariant_part, build_triple, compatible_j, j_involution, wedge_22
from akcy.grid import (
    GridSpec,
    ScalarField,
    TwoForm,
    codifferential,
    exterior_d,
    inner,
    integrate,
    random_smooth,
)
from akcy.lejmi import (
    AntiInvariantField,
    anti_invariant_frame,
    dj_plus,
    harmonic_anti_dim,
    kernel_basis,
    lejmi_apply,
    lejmi_quadratic_form,
    solve_sigma,
    w_field,
)
from conftest import x0


def mean_free(grid, rng, kmax=2):
    v = random_smooth(grid, rng, kmax=kmax)
    return ScalarField(grid, v - v.mean())


def random_anti(triple, rng):
    frame = anti_invariant_frame(triple)
    c = random_smooth(triple.grid, rng, kmax=2, ncomp=2)
    g = triple.grid
    return AntiInvariantField(frame, ScalarField(g, c[0]), ScalarField(g, c[1]))


def test_flat_frame_is_the_seed_pair(flat8, oracle):
    fr = anti_invariant_frame(flat8)
    b1 = fr.beta1.data[:, 0, 0, 0, 0]
    b2 = fr.beta2.data[:, 0, 0, 0, 0]
    np.testing.assert_allclose(b1, [0, 1, 0, 0, -1, 0], atol=1e-15)
    np.testing.assert_allclose(b2, [0, 0, 1, 1, 0, 0], atol=1e-15)
    # independently: both seeds are mapped to their negatives by the involution
    np.testing.assert_allclose(oracle["frame_seed_images"]["02-13"], -b1)
    np.testing.assert_allclose(oracle["frame_seed_images"]["03+12"], -b2)


def test_bumpy_frame_orthonormal_anti_invariant(bumpy8):
    fr = anti_invariant_frame(bumpy8)
    for b in (fr.beta1, fr.beta2):
        assert np.abs(j_involution(b, bumpy8.J).data + b.data).max() < 1e-10
        assert np.abs(bumpy8.pointwise_inner(b.data, b.data) - 2).max() < 1e-12
    assert np.abs(bumpy8.pointwise_inner(fr.beta1.data, fr.beta2.data)).max() < 1e-12


def test_frame_degenerates_when_omega_is_a_seed(grid8):
    om = TwoForm.constant(grid8, np.array([0.0, 1, 0, 0, -1, 0]))
    triple = build_triple(om, compatible_j(om))
    with pytest.raises(FrameDegenerate):
        anti_invariant_frame(triple)


@pytest.mark.parametrize("which", ["flat8", "bumpy8"])
def test_lejmi_operator_symmetric_nonnegative(which, request, rng):
    triple = request.getfixturevalue(which)
    p1, p2 = random_anti(triple, rng), random_anti(triple, rng)
    zero = AntiInvariantField(p1.frame, ScalarField(triple.grid, 0.0), ScalarField(triple.grid, 0.0))
    assert lejmi_apply(zero, triple).form.max_abs() == 0.0
    a = inner(lejmi_apply(p1, triple).form, p2.form, triple)
    b = inner(p1.form, lejmi_apply(p2, triple).form, triple)
    assert abs(a - b) <= 1e-9 * max(abs(a), abs(b))
    q = inner(lejmi_apply(p1, triple).form, p1.form, triple)
    assert q >= -1e-10
    assert q == pytest.approx(lejmi_quadratic_form(p1, triple), rel=1e-9)


def test_sigma_vanishes_for_flat_kahler(flat8, rng):
    phi = mean_free(flat8.grid, rng)
    d_jd = exterior_d(w_field(phi, flat8))
    assert np.abs(anti_invariant_part(d_jd.data, flat8.J)).max() < 1e-12
    sigma, rep = solve_sigma(phi, flat8)
    assert sigma.form.max_abs() < 1e-12 and rep.converged
    sigma0, _ = solve_sigma(ScalarField(flat8.grid, 0.0), flat8)
    assert sigma0.form.max_abs() == 0.0


def test_sigma_residual_on_bumpy(bumpy8, rng):
    sigma, rep = solve_sigma(mean_free(bumpy8.grid, rng), bumpy8)
    assert rep.converged and rep.anti_invariant_residual <= 1e-9
    # sigma is orthogonal to the numerical kernel of P
    for k in kernel_basis(bumpy8):
        assert abs(np.sum(sigma.coeffs * k)) < 1e-8


def test_w_field_single_mode(flat8, oracle):
    g = flat8.grid
    W = w_field(ScalarField(g, np.sin(x0(g))), flat8)
    assert oracle["w_sin_x0"] == ["0", "cos(x0)", "0", "0"]
    np.testing.assert_allclose(W.data[1], np.cos(x0(g)), atol=1e-12)
    assert np.abs(W.data[[0, 2, 3]]).max() < 1e-12
    assert codifferential(W, flat8).max_abs() < 1e-12
    assert w_field(ScalarField(g, 4.2), flat8).max_abs() == 0.0


def test_w_field_constraints_on_bumpy(bumpy8, rng):
    W = w_field(mean_free(bumpy8.grid, rng), bumpy8)
    assert codifferential(W, bumpy8).max_abs() <= 1e-9
    assert np.abs(anti_invariant_part(exterior_d(W).data, bumpy8.J)).max() <= 1e-9


def test_dj_plus_single_mode(flat8, oracle):
    g = flat8.grid
    eps = 0.3
    D = dj_plus(ScalarField(g, eps * np.sin(x0(g))), flat8)
    assert oracle["dj_plus_eps_sin"][0] == "-epsilon*sin(x0)"
    np.testing.assert_allclose(D.data[0], -eps * np.sin(x0(g)), atol=1e-13)
    assert np.abs(D.data[1:]).max() < 1e-13
    assert dj_plus(ScalarField(g, 0.0), flat8).max_abs() == 0.0


def test_dj_plus_linear_and_volume_neutral(bumpy8, rng):
    g = bumpy8.grid
    phi, psi = mean_free(g, rng), mean_free(g, rng)
    lhs = dj_plus(2.0 * phi + (-0.7) * psi, bumpy8).data
    rhs = 2.0 * dj_plus(phi, bumpy8).data - 0.7 * dj_plus(psi, bumpy8).data
    assert np.abs(lhs - rhs).max() <= 1e-10 * np.abs(rhs).max() * 10
    om1 = bumpy8.omega + dj_plus(phi, bumpy8)
    ref = integrate(wedge_22(bumpy8.omega, bumpy8.omega))
    assert abs(integrate(wedge_22(om1, om1)) - ref) <= 1e-11 * ref


def test_grid_mismatch(flat8):
    with pytest.raises(GridMismatch):
        w_field(ScalarField(GridSpec.cube(4), 0.0), flat8)


def test_flat_kernel_dimension(flat8):
    spec = harmonic_anti_dim(flat8)
    assert spec.dim == 2
    assert spec.gap >= 10 * spec.threshold
    # Rayleigh quotient positive off the kernel
    assert spec.eigenvalues[2] > spec.threshold


def test_rayleigh_positive_off_kernel(flat8, rng):
    psi = random_anti(flat8, rng)
    c = psi.coeffs - psi.coeffs.mean(axis=(1, 2, 3, 4), keepdims=True)
    g = flat8.grid
    off = AntiInvariantField(psi.frame, ScalarField(g, c[0]), ScalarField(g, c[1]))
    assert lejmi_quadratic_form(off, flat8) / inner(off.form, off.form, flat8) > 0.4


@pytest.mark.slow
def test_bumpy_structure_has_no_harmonic_anti_invariant_forms(bumpy8):
    spec = harmonic_anti_dim(bumpy8)
    assert spec.dim == 0
    assert spec.gap_ok
