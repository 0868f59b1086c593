import numpy as np
import pytest
from scipy import optimize

from wideflow.constitutive import ConstitutiveParams
from wideflow.geometry import build_extension_field, build_rect_channel, parabolic_profile
from wideflow.operators import Space
from wideflow.reference import PicardError, ReferenceStepper, solve


def vortex(a=0.2, L=2.0, H=1.0):
    return lambda x, y: a * (np.sin(np.pi * x / L) * np.sin(np.pi * y / H)) ** 4


def test_zero_data_stays_zero():
    mesh = build_rect_channel(6, 3)
    ext = build_extension_field(mesh, None, fluxes=(0.0,))
    sol = solve(Space(mesh), ext, ConstitutiveParams(r=2.5), T_obs=0.3, h_t=0.1)
    assert np.all(sol.trajectory.values == 0.0)
    assert len(sol.ledger) == 3


def steady_by_root(stepper):
    """Oracle: steady momentum balance solved by a generic nonlinear root finder."""
    sp_, H = stepper.space, stepper.handler
    idx, L, v0 = H.free_index, H.flux_rows, stepper.v0.ravel()
    n, m = len(idx), L.shape[0]
    F = stepper.load(0.0)

    def residual(z):
        v = v0.copy()
        v[idx] += z[:n]
        mu, mub, om = stepper._coefficients(v.reshape(-1, 2))
        K = (sp_.convection_form(om) + sp_.strain_form(mu) + 2 * stepper.kappa * sp_.div_form()
             + sp_.wall_form(mub))
        r = (K @ v - F)[idx] + L.T @ z[n:]
        return np.concatenate([r, L @ z[:n]])

    sol = optimize.root(residual, np.zeros(n + m), method="hybr", tol=1e-14)
    assert sol.success
    v = v0.copy()
    v[idx] += sol.x[:n]
    return v.reshape(-1, 2)


def test_steady_state_fixed_point():
    mesh = build_rect_channel(8, 4)
    ext = build_extension_field(mesh, parabolic_profile(1.0, 1.0), initial_stream=vortex())
    p = ConstitutiveParams(r=2.0, sigma2=0.5)
    st = ReferenceStepper(Space(mesh), ext, p, kappa=1e2)
    state = st.initial_state(0.1)
    for _ in range(400):
        new = st.step(state)
        upd = np.max(np.abs(new.velocity - state.velocity))
        state = new
        if upd <= 1e-9:
            break
    assert upd <= 1e-9
    ref = steady_by_root(st)
    assert np.max(np.abs(state.velocity - ref)) <= 1e-7


def test_energy_ledger_holds():
    mesh = build_rect_channel(8, 4)
    ext = build_extension_field(mesh, parabolic_profile(1.0, 1.0), initial_stream=vortex())
    force = lambda t, pts: np.column_stack([0.5 + 0 * pts[:, 0], 0.1 * np.sin(np.pi * pts[:, 0])])
    sol = solve(Space(mesh), ext, ConstitutiveParams(r=2.5), T_obs=0.5, h_t=0.025, kappa=1e3,
                forcing=force)
    assert sol.max_violation <= 1e-10
    assert all(k >= 1 for k in sol.picard_iterations)


def test_flux_constraints_every_step():
    mesh = build_rect_channel(8, 6, layout="two_outlets")
    ext = build_extension_field(mesh, parabolic_profile(1.0, 1.0), fluxes=(0.25, 2 / 3 - 0.25))
    st = ReferenceStepper(Space(mesh), ext, ConstitutiveParams(r=2.5), kappa=1e3)
    state = st.initial_state(0.05)
    for _ in range(4):
        state = st.step(state)
        for i, F in enumerate(ext.fluxes):
            c = mesh.outlet_flux_weights(i)
            assert np.sum(state.velocity * c) == pytest.approx(F, abs=1e-12)


def test_picard_failure_raises():
    mesh = build_rect_channel(6, 3)
    ext = build_extension_field(mesh, parabolic_profile(1.0, 1.0), initial_stream=vortex())
    st = ReferenceStepper(Space(mesh), ext, ConstitutiveParams(r=3.0), max_picard=1, tol=0.0)
    with pytest.raises(PicardError):
        st.step(st.initial_state(0.1))
