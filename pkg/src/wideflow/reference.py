"""Implicit time stepping of the penalized weak momentum balance.

Backward Euler in time, Picard iteration on the secant viscosity, the wall
friction and the vorticity of the rotational convection term. The spatial
discretization, constraints and divergence penalty are shared with the
space-time functional, so differences between the two solvers are due to
time regularization only. Traction-type boundary terms are left out of the
weak form: only the wall friction appears on walls and nothing on outlets.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import constitutive as cv
from .functional import ConstraintHandler
from .geometry import ChannelMesh, ExtensionField
from .operators import Space, Trajectory

__all__ = [
    "PicardError",
    "TimeStepperState",
    "EnergyLedgerEntry",
    "ReferenceSolution",
    "ReferenceStepper",
    "solve",
]

log = logging.getLogger("wideflow.reference")


class PicardError(RuntimeError):
    """Picard iteration did not reach the update tolerance."""


@dataclass
class TimeStepperState:
    """Velocity (N, 2) at time ``t`` and statistics of the last step."""

    velocity: np.ndarray
    t: float
    h: float
    picard_iterations: int = 0
    picard_update: float = 0.0


@dataclass
class EnergyLedgerEntry:
    """Both sides of the discrete kinetic-energy inequality for one step.

    ``lhs = 0.5|w1|^2 + h (S(Dv).Dv + 2 kappa |div v|^2 + s(v).v)`` and
    ``rhs = 0.5|w0|^2 + h (f.w1 + c(omega; v, v0) + S(Dv).Dv0 + s(v).v0)``
    with ``w = v - v0`` the deviation from the extension.
    """

    t: float
    lhs: float
    rhs: float

    @property
    def violation(self) -> float:
        """Relative excess of ``lhs`` over ``rhs`` (negative when satisfied)."""
        return (self.lhs - self.rhs) / max(abs(self.lhs), abs(self.rhs), 1e-300)


@dataclass
class ReferenceSolution:
    trajectory: Trajectory
    ledger: list = field(default_factory=list)
    picard_iterations: list = field(default_factory=list)

    @property
    def max_violation(self) -> float:
        return max((e.violation for e in self.ledger), default=-np.inf)


class ReferenceStepper:
    """Backward-Euler stepper on the constrained discrete space.

    Parameters
    ----------
    space : Space
    extension : ExtensionField
        Supplies Dirichlet data, outlet fluxes and the lifting ``v0``.
    params : ConstitutiveParams
        Unstabilized laws are used; ``eps`` is ignored.
    kappa : float
        Divergence penalty, as in the functional.
    forcing : callable, optional
        ``f(t, points) -> (..., 2)``.
    tol : float
        Max-norm update tolerance of the Picard loop.
    max_picard : int
    polish : int
        Extra Picard sweeps after the tolerance is met (tightens the ledger).
    """

    def __init__(self, space: Space, extension: ExtensionField, params: cv.ConstitutiveParams,
                 kappa: float = 1e4, forcing: Optional[Callable] = None, tol: float = 1e-10,
                 max_picard: int = 200, polish: int = 2):
        self.space = space
        self.extension = extension
        self.params = params
        self.kappa = float(kappa)
        self.forcing = forcing
        self.tol = float(tol)
        self.max_picard = int(max_picard)
        self.polish = int(polish)
        self.handler = ConstraintHandler(space.mesh, extension, [0.0, 1.0], kappa=kappa)
        self.v0 = extension.velocity
        self._div = 2.0 * self.kappa * space.div_form()
        self._L = sp.csr_matrix(self.handler.flux_rows)

    # ---------------------------------------------------------- helpers

    def load(self, t: float) -> np.ndarray:
        """Interleaved load vector of ``int f(t) . phi``."""
        sp_ = self.space
        if self.forcing is None:
            return np.zeros(2 * sp_.mesh.n_nodes)
        f = np.asarray(self.forcing(t, sp_.points), dtype=float)
        w = sp_.weights
        out = np.empty(2 * sp_.mesh.n_nodes)
        out[0::2] = sp_.val.T @ (w * f[:, 0])
        out[1::2] = sp_.val.T @ (w * f[:, 1])
        return out

    def _coefficients(self, v):
        sp_ = self.space
        _, _, ux, uy, vx, vy = sp_.gp_fields(v)
        n2 = ux ** 2 + vy ** 2 + 0.5 * (uy + vx) ** 2
        mu = cv.secant_bulk(n2, self.params, stabilized=False)
        bx, by = sp_.wval @ v[:, 0], sp_.wval @ v[:, 1]
        mub = cv.secant_boundary(bx ** 2 + by ** 2, self.params, stabilized=False)
        return mu, mub, vx - uy

    def _operator(self, v, h):
        sp_ = self.space
        mu, mub, om = self._coefficients(v)
        return (sp_.mass / h + sp_.convection_form(om) + sp_.strain_form(mu)
                + self._div + sp_.wall_form(mub)).tocsr()

    def _solve_linear(self, K, rhs):
        H = self.handler
        idx = H.free_index
        v0 = self.v0.ravel()
        b = rhs[idx] - K[idx] @ v0
        Kff = K[idx][:, idx]
        L = self._L
        m = L.shape[0]
        if m:
            A = sp.bmat([[Kff, L.T], [L, None]], format="csc")
            b = np.concatenate([b, np.zeros(m)])
        else:
            A = Kff.tocsc()
        sol = spla.splu(A).solve(b)
        v = v0.copy()
        v[idx] += sol[: len(idx)]
        return v.reshape(-1, 2)

    # ----------------------------------------------------------- public

    def initial_state(self, h: float) -> TimeStepperState:
        return TimeStepperState(velocity=self.v0.copy(), t=0.0, h=float(h))

    def step(self, state: TimeStepperState) -> TimeStepperState:
        """Advance one backward-Euler step; raises :class:`PicardError`."""
        h = state.h
        t1 = state.t + h
        rhs = self.space.mass @ state.velocity.ravel() / h + self.load(t1)
        v = state.velocity.copy()
        extra = -1
        upd = np.inf
        for it in range(1, self.max_picard + 1):
            vn = self._solve_linear(self._operator(v, h), rhs)
            upd = float(np.max(np.abs(vn - v)))
            v = vn
            if extra >= 0:
                extra += 1
                if extra >= self.polish:
                    break
            elif upd <= self.tol:
                extra = 0
                if self.polish == 0:
                    break
        else:
            if extra < 0:
                raise PicardError(f"Picard did not converge at t={t1:.6g} (update {upd:.3e})")
        return TimeStepperState(velocity=v, t=t1, h=h, picard_iterations=it, picard_update=upd)

    def energy_ledger(self, old: TimeStepperState, new: TimeStepperState) -> EnergyLedgerEntry:
        """Discrete energy inequality obtained by testing the step with ``v - v0``."""
        sp_ = self.space
        h = new.h
        v, v0 = new.velocity, self.v0
        w1, w0 = v - v0, old.velocity - v0
        Mm = sp_.mass
        e1 = 0.5 * float(w1.ravel() @ (Mm @ w1.ravel()))
        e0 = 0.5 * float(w0.ravel() @ (Mm @ w0.ravel()))
        mu, mub, om = self._coefficients(v)
        A = sp_.strain_form(mu)
        Wb = sp_.wall_form(mub)
        vr, v0r = v.ravel(), v0.ravel()
        diss = float(vr @ (A @ vr)) + float(vr @ (self._div @ vr)) + float(vr @ (Wb @ vr))
        work = (float(self.load(new.t) @ w1.ravel())
                + float(v0r @ (sp_.convection_form(om) @ vr))
                + float(v0r @ (A @ vr)) + float(v0r @ (Wb @ vr)))
        return EnergyLedgerEntry(t=new.t, lhs=e1 + h * diss, rhs=e0 + h * work)


def solve(space: Space, extension: ExtensionField, params: cv.ConstitutiveParams, T_obs: float,
          h_t: float, kappa: float = 1e4, forcing: Optional[Callable] = None,
          times: Optional[np.ndarray] = None, **stepper_kw) -> ReferenceSolution:
    """Integrate from the extension field over ``[0, T_obs]``.

    Returns the trajectory on the uniform grid of step ``h_t`` (or on
    ``times`` if given), the per-step energy ledger and Picard counts.
    """
    if times is None:
        n = int(np.ceil(T_obs / h_t - 1e-9))
        times = h_t * np.arange(n + 1)
    times = np.asarray(times, dtype=float)
    stepper = ReferenceStepper(space, extension, params, kappa=kappa, forcing=forcing, **stepper_kw)
    h = float(times[1] - times[0])
    state = stepper.initial_state(h)
    values = [state.velocity]
    ledger, picard = [], []
    for _ in range(len(times) - 1):
        new = stepper.step(state)
        ledger.append(stepper.energy_ledger(state, new))
        picard.append(new.picard_iterations)
        values.append(new.velocity)
        state = new
    return ReferenceSolution(trajectory=Trajectory(times, np.stack(values)), ledger=ledger,
                             picard_iterations=picard)
