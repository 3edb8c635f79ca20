import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from akcy.diagnostics import (
    apriori_monitor,
    decomposition_44_check,
    lemma1_check,
    metric_poisson,
    potential_phi0,
    sandwich_check,
    trace_identity_check,
    trace_identity_eigs,
    uniqueness_experiment,
)
from akcy.errors import NotSolvable
from akcy.forms import darboux_eigenvalues, perturbed_triple, wedge_density
from akcy.grid import FourForm, GridSpec, ScalarField, TwoForm, integrate, laplacian, random_smooth
from akcy.lejmi import dj_plus
from akcy.solver import continuation_solve
from conftest import x0


def manufactured_state(triple, eps=0.5):
    g = triple.grid
    s = np.sin(x0(g))
    phi = ScalarField(g, eps * s)
    om1 = triple.omega + dj_plus(phi, triple)
    return phi, om1, ScalarField(g, np.log1p(-eps * s))


def exact_state(triple, rng, size=0.15, kmax=2):
    """omega_1 = omega + D(phi) for random phi and the matching f."""
    g = triple.grid
    phi = ScalarField(g, size * random_smooth(g, rng, kmax=kmax))
    om1 = triple.omega + dj_plus(phi, triple)
    f = ScalarField(g, np.log(wedge_density(om1.data, om1.data) / triple.omega_sq))
    return phi, om1, f


def test_phi0_examples(flat8, oracle):
    g = flat8.grid
    assert potential_phi0(flat8.omega, flat8.omega, flat8).max_abs() == 0.0
    _, om1, _ = manufactured_state(flat8, 0.4)
    assert oracle["phi0_manufactured"] == "epsilon*sin(x0)"
    np.testing.assert_allclose(potential_phi0(flat8.omega, om1, flat8).data, 0.4 * np.sin(x0(g)), atol=1e-12)


def test_phi0_solvability_on_bumpy(bumpy8, rng):
    _, om1, _ = exact_state(bumpy8, rng)
    phi0 = potential_phi0(bumpy8.omega, om1, bumpy8)
    lap = laplacian(phi0, bumpy8).data
    assert abs(integrate(FourForm(bumpy8.grid, lap * bumpy8.omega_sq / 2))) < 1e-10


def test_metric_poisson_rejects_mean(flat8):
    with pytest.raises(NotSolvable):
        metric_poisson(np.ones(flat8.grid.dims), flat8.metric)


def test_lemma_identity_state(flat8):
    rep = lemma1_check(flat8.omega, flat8.omega, ScalarField(flat8.grid, 0.0), flat8)
    assert rep.residual_det == 0 and rep.residual_norm == 0 and rep.residual_lap < 1e-14
    assert np.all(rep.eigs.a1.data == 1) and np.all(rep.eigs.a2.data == 1)


def test_lemma_point_values(flat8, oracle):
    # pointwise formulas at (a1, a2) = (2, 1/2); the constant form is not
    # cohomologous to omega so no potential is involved
    g = flat8.grid
    om1 = TwoForm.constant(g, np.array([2.0, 0, 0, 0, 0, 0.5]))
    eig = darboux_eigenvalues(flat8.omega, om1, flat8)
    a1, a2 = eig.a1.data, eig.a2.data
    pt = oracle["lemma_point"]
    assert np.allclose(a1 * a2, pt["det"])
    diff = om1.data - flat8.omega.data
    assert np.allclose(flat8.pointwise_inner(diff, diff), pt["norm_form_convention"])
    assert np.allclose((a1 - 1) ** 2 + (a2 - 1) ** 2, pt["norm_from_forms"])
    assert np.allclose(2 - a1 - a2, pt["lap_phi0"])


def test_lemma_manufactured(flat8):
    _, om1, f = manufactured_state(flat8)
    rep = lemma1_check(flat8.omega, om1, f, flat8)
    assert rep.residual_det <= 1e-9
    assert rep.residual_lap <= 1e-9 and rep.residual_norm <= 1e-12
    assert rep.lap_max < 2 and rep.bound_margin >= -1e-9


def test_lemma_on_bumpy(bumpy8, rng):
    _, om1, f = exact_state(bumpy8, rng)
    rep = lemma1_check(bumpy8.omega, om1, f, bumpy8)
    assert rep.residual_det <= 1e-8 and rep.residual_lap <= 1e-8 and rep.residual_norm <= 1e-10
    assert rep.lap_max < 2 and rep.bound_margin >= -1e-9


def test_sandwich(flat8, oracle):
    rep = sandwich_check(flat8.omega, flat8.omega, flat8)
    assert (rep.lower_margin, rep.upper_margin) == pytest.approx(
        (oracle["sandwich_identity"]["lower"], oracle["sandwich_identity"]["upper"]))
    three = TwoForm(flat8.grid, 3 * flat8.omega.data)
    rep = sandwich_check(flat8.omega, three, flat8)
    assert rep.ok
    assert (rep.lower_margin, rep.upper_margin) == pytest.approx(
        (oracle["sandwich_three_omega"]["lower"], oracle["sandwich_three_omega"]["upper"]))
    _, om1, _ = manufactured_state(flat8)
    assert sandwich_check(flat8.omega, om1, flat8).ok


def test_trace_identity_values(flat8, oracle):
    t = oracle["trace_identity_2_3"]
    assert t["eigen_form"] == pytest.approx(t["harmonic_sum"])
    assert trace_identity_eigs(np.array([2.0]), np.array([3.0])) < 1e-15
    assert trace_identity_eigs(np.array([1.0]), np.array([1.0])) == 0.0
    om1 = TwoForm.constant(flat8.grid, np.array([2.0, 0, 0, 0, 0, 3.0]))
    rep = trace_identity_check(flat8, om1)
    assert rep.max_discrepancy < 1e-14


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 64, elements=st.floats(1e-3, 1e3)),
       arrays(np.float64, 64, elements=st.floats(1e-3, 1e3)))
def test_trace_identity_random_eigenvalues(a1, a2):
    scale = np.max((a1 + a2) / (a1 * a2))
    assert trace_identity_eigs(a1, a2) <= 1e-12 * scale


def test_trace_identity_on_bumpy(bumpy8, rng):
    _, om1, _ = exact_state(bumpy8, rng)
    assert trace_identity_check(bumpy8, om1).max_discrepancy < 1e-10


def test_monitor_series(flat8):
    _, rep0 = continuation_solve(ScalarField(flat8.grid, 0.0), flat8)
    m0 = apriori_monitor(rep0.states, flat8)
    assert len(m0) == len(rep0.records)
    assert len(set(m0.max_trace)) == 1 and len(set(m0.phi_linf)) == 1 and m0.bounded
    _, om1, f = manufactured_state(flat8)
    _, rep = continuation_solve(f, flat8)
    m = apriori_monitor(rep.states, flat8)
    assert m.bounded and max(m.max_trace) < 1e3 and all(v < 2 for v in m.lap_phi0_max)
    assert m.max_trace[-1] == pytest.approx(2 * (1.5 + 1))
    assert np.all(np.isfinite(m.grad_proxy))


def test_monitor_alarm_threshold(flat8):
    _, _, f = manufactured_state(flat8)
    _, rep = continuation_solve(f, flat8)
    m = apriori_monitor(rep.states, flat8, alarm=4.5)
    assert not m.bounded and any("tr_g" in a for a in m.alarms)


def test_uniqueness(flat8):
    _, _, f = manufactured_state(flat8)
    rep = uniqueness_experiment(f, flat8)
    assert rep.passed and rep.oscillation <= 1e-7 and rep.seed_scale > 0.1


def test_decomposition_flat(flat8, rng):
    # the quotient by omega_1^2 aliases badly at kmax=2 on 8^4
    phi, om1, _ = exact_state(flat8, rng, kmax=1)
    rep = decomposition_44_check(phi, om1, flat8)
    assert rep.decomposition_residual < 1e-8
    assert rep.coclosed_residual < 1e-8 and rep.wedge_residual < 1e-8
    assert rep.elliptic_residual < 1e-8


def test_decomposition_bumpy_converges_spectrally():
    # the retracted J carries every Fourier mode, so 8^4 only reaches ~1e-6
    wedge = []
    for n in (8, 12):
        triple = perturbed_triple(GridSpec.cube(n), 0.1, seed=1)
        phi, om1, _ = exact_state(triple, np.random.default_rng(1), kmax=1)
        rep = decomposition_44_check(phi, om1, triple)
        assert rep.decomposition_residual < 1e-8 and rep.coclosed_residual < 1e-8
        wedge.append(max(rep.wedge_residual, rep.elliptic_residual))
    assert wedge[1] < 1e-8
    assert wedge[1] < 1e-2 * wedge[0]
