import numpy as np
import pytest

from akcy.errors import (
    Cancelled,
    KrylovStall,
    NotClosed,
    NotTaming,
    ObstructionNonzero,
    PositivityLost,
    StepUnderflow,
    ValidationError,
)
from akcy.forms import project_invariant, wedge_density
from akcy.grid import ScalarField, TwoForm, _codiff2, _d1, random_smooth, spectral
from akcy.lejmi import anti_invariant_frame, dj_plus
from akcy.solver import (
    SolverConfig,
    continuation_solve,
    linearize_apply,
    ma_residual,
    newton_solve,
    normalize_rhs,
    tame_to_almost_kahler,
)
from conftest import x0


def manufactured(grid, eps, mode=1):
    s = np.sin(mode * x0(grid))
    return ScalarField(grid, np.log1p(-eps * s)), ScalarField(grid, eps / mode ** 2 * s)


def aligned_error(phi, ref):
    d = phi.data - ref.data
    return float(np.abs(d - d.mean()).max())


def weighted_mean(values, triple):
    return float(np.sum(values * triple.omega_sq) / np.sum(triple.omega_sq))


@pytest.mark.parametrize("kwargs", [
    dict(newton_tol=0.0), dict(newton_max=0), dict(t_step_init=1.5),
    dict(t_step_init=0.1, t_step_min=0.2), dict(positivity_margin=-1.0),
])
def test_solver_config_validation(kwargs):
    with pytest.raises(ValidationError):
        SolverConfig(**kwargs)


def test_normalize_rhs(flat8, oracle):
    g = flat8.grid
    assert normalize_rhs(ScalarField(g, 0.0), flat8).max_abs() == 0.0
    assert normalize_rhs(ScalarField(g, 2.5), flat8).max_abs() < 1e-15
    f, _ = manufactured(g, 0.5)
    shift = normalize_rhs(f, flat8).data - f.data
    assert np.abs(shift - oracle["normalize_shift_half"]).max() < 1e-12


def test_normalize_rhs_compatibility(bumpy8, rng):
    f = ScalarField(bumpy8.grid, random_smooth(bumpy8.grid, rng, kmax=2))
    fn = normalize_rhs(f, bumpy8)
    assert abs(weighted_mean(np.exp(fn.data), bumpy8) - 1) < 1e-12


def test_ma_residual_examples(flat8, oracle):
    g = flat8.grid
    zero = ScalarField(g, 0.0)
    assert ma_residual(zero, zero, flat8).max_abs() == 0.0
    f, phi = manufactured(g, 0.5)
    assert oracle["volume_ratio_eps_sin"] == "-epsilon*sin(x0) + 1"
    assert ma_residual(phi, f, flat8).max_abs() < 1e-10


def test_ma_residual_mean_zero(bumpy8, rng):
    g = bumpy8.grid
    f = normalize_rhs(ScalarField(g, random_smooth(g, rng, kmax=2)), bumpy8)
    phi = ScalarField(g, 0.1 * random_smooth(g, rng, kmax=2))
    assert abs(weighted_mean(ma_residual(phi, f, bumpy8).data, bumpy8)) < 1e-11


def test_linearization_at_zero_is_minus_laplacian(flat8, oracle):
    g = flat8.grid
    assert oracle["linearize_zero_cos"] == "-cos(x0)"
    out = linearize_apply(ScalarField(g, 0.0), ScalarField(g, np.cos(x0(g))), flat8)
    np.testing.assert_allclose(out.data, -np.cos(x0(g)), atol=1e-12)
    phi = ScalarField(g, 0.2 * np.sin(x0(g)))
    assert linearize_apply(phi, ScalarField(g, 1.0), flat8).max_abs() < 1e-13


@pytest.mark.parametrize("which", ["flat8", "bumpy8"])
def test_linearization_matches_central_differences(which, request, rng):
    triple = request.getfixturevalue(which)
    g = triple.grid
    f = ScalarField(g, 0.0)
    phi = ScalarField(g, 0.05 * random_smooth(g, rng, kmax=2))
    psi = ScalarField(g, random_smooth(g, rng, kmax=2))
    lin = linearize_apply(phi, psi, triple).data
    for h in (1e-2, 1e-3):
        fd = (ma_residual(phi + h * psi, f, triple).data - ma_residual(phi - h * psi, f, triple).data) / (2 * h)
        # the residual is quadratic in phi, so central differences are exact
        # up to rounding
        assert np.abs(fd - lin).max() < 1e-9 * np.abs(lin).max()


def test_newton_trivial(flat8):
    zero = ScalarField(flat8.grid, 0.0)
    phi, rep = newton_solve(zero, zero, flat8, SolverConfig())
    assert rep.iterations == 0 and phi.max_abs() == 0.0


def test_newton_manufactured(flat8):
    f, ref = manufactured(flat8.grid, 0.5)
    phi, rep = newton_solve(f, ScalarField(flat8.grid, 0.0), flat8, SolverConfig())
    assert aligned_error(phi, ref) < 1e-8
    assert rep.residual_linf <= 1e-10


def test_newton_positivity_threshold_by_bisection(flat8):
    """With margin m, Newton must refuse exactly when the analytic min a1 = 1 - eps drops below m."""
    margin = 0.1
    cfg = SolverConfig(positivity_margin=margin)
    zero = ScalarField(flat8.grid, 0.0)

    def fails(eps):
        try:
            phi, _ = newton_solve(manufactured(flat8.grid, eps)[0], zero, flat8, cfg)
        except PositivityLost as exc:
            assert "min a1" in str(exc)
            return True
        assert np.all(np.isfinite(phi.data))
        return False

    lo, hi = 0.5, 0.99
    assert not fails(lo) and fails(hi)
    for _ in range(8):
        mid = 0.5 * (lo + hi)
        lo, hi = (lo, mid) if fails(mid) else (mid, hi)
    assert abs(hi - (1 - margin)) < 5e-3


def test_newton_nonlinear_manufactured(flat8):
    g = flat8.grid
    x = g.mesh()
    target = ScalarField(g, 0.3 * np.sin(x[0]) * np.cos(x[2]) + 0.2 * np.cos(x[1] + x[3]))
    om = flat8.omega.data + dj_plus(target, flat8).data
    f = ScalarField(g, np.log(wedge_density(om, om) / flat8.omega_sq))
    phi, rep = continuation_solve(f, flat8)
    assert rep.success
    assert aligned_error(phi, target) < 1e-9


def test_continuation_trivial(flat8):
    phi, rep = continuation_solve(ScalarField(flat8.grid, 0.0), flat8)
    assert rep.success and phi.max_abs() == 0.0
    assert all(r.newton_iters == 0 for r in rep.records[1:])


def test_continuation_manufactured_trajectory(flat8):
    f, ref = manufactured(flat8.grid, 0.5)
    phi, rep = continuation_solve(f, flat8)
    assert rep.success and aligned_error(phi, ref) < 1e-8
    ts = rep.t_values
    assert ts[0] == 0.0 and ts[-1] == 1.0 and np.all(np.diff(ts) > 0)
    assert all(r.min_a1 > 0 for r in rep.records)
    assert all(r.volume_defect < 1e-11 for r in rep.records)
    assert abs(rep.records[-1].min_a1 - 0.5) < 1e-10
    for st in rep.states:
        assert abs(weighted_mean(st.phi.data, flat8)) < 1e-12
    dm, cd = rep.u_membership
    assert dm < 1e-9 and cd < 1e-9


def test_continuation_step_underflow_keeps_report(flat8):
    f, _ = manufactured(flat8.grid, 0.95)
    cfg = SolverConfig(positivity_margin=0.1, t_step_min=2 ** -6)
    with pytest.raises(StepUnderflow) as info:
        continuation_solve(f, flat8, cfg)
    rep = info.value.report
    assert len(rep.records) >= 2 and not rep.success
    for r in rep.records:
        assert np.isfinite([r.residual_linf, r.min_a1, r.max_trace, r.phi_linf]).all()
        assert r.min_a1 >= 0.1 - 1e-12


def test_continuation_cancel(flat8):
    f, _ = manufactured(flat8.grid, 0.5)
    with pytest.raises(Cancelled):
        continuation_solve(f, flat8, stop=lambda: True)


@pytest.mark.slow
def test_newton_on_bumpy_structure_reports_kernel(bumpy8):
    f, _ = manufactured(bumpy8.grid, 0.3)
    with pytest.raises(KrylovStall) as info:
        continuation_solve(f, bumpy8)
    assert "kernel" in str(info.value)
    assert info.value.report.records[0].t == 0.0


# --------------------------------------------------------------------------
# taming


def forward_taming(triple, seed=5, size=0.2):
    g = triple.grid
    sp = spectral(g)
    frame = anti_invariant_frame(triple)
    c = random_smooth(g, np.random.default_rng(seed), kmax=1, ncomp=2)
    xi = c[0] * frame.beta1.data + c[1] * frame.beta2.data
    da = _d1(sp, _codiff2(sp, xi, triple.metric))
    da *= size / np.abs(da).max()
    return TwoForm(g, triple.omega.data + da)


def test_tame_compatible_input_is_fixed(flat8):
    om, rep = tame_to_almost_kahler(flat8.omega, flat8.J)
    assert np.abs(om.data - flat8.omega.data).max() < 1e-14
    assert rep.anti_invariant < 1e-14


@pytest.mark.parametrize("which", ["flat8", "bumpy8"])
def test_tame_round_trip(which, request):
    triple = request.getfixturevalue(which)
    Omega = forward_taming(triple)
    assert project_invariant(Omega, triple.J, -1).max_abs() > 1e-3
    om, rep = tame_to_almost_kahler(Omega, triple.J, background=triple)
    assert np.abs(om.data - triple.omega.data).max() < 1e-8
    assert rep.closed_defect < 1e-10 and rep.min_eigenvalue > 0


def test_tame_obstruction(flat8):
    fr = anti_invariant_frame(flat8)
    Omega = TwoForm(flat8.grid, flat8.omega.data + 0.05 * fr.beta1.data)
    with pytest.raises(ObstructionNonzero):
        tame_to_almost_kahler(Omega, flat8.J)


def test_tame_input_validation(flat8, grid8):
    with pytest.raises(NotTaming):
        tame_to_almost_kahler(TwoForm(grid8, -flat8.omega.data), flat8.J)
    x2 = grid8.mesh()[2]
    with pytest.raises(NotClosed):
        tame_to_almost_kahler(TwoForm(grid8, [1 + 0.2 * np.sin(x2), 0, 0, 0, 0, 1]), flat8.J)
