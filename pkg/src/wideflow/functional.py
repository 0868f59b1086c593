r"""Discrete weighted inertia-dissipation-energy functional.

For a trajectory ``v`` on the time grid ``t_0 < ... < t_M`` the value is

.. math::

    I_\varepsilon(v) = \sum_k W_k \Big[\int_\Omega \tfrac{\varepsilon}{2}|\mathring v_k|^2
        - f\cdot\bar v_k + \Phi(|D\bar v_k|^2)\,dx + \kappa \sum_c |c|\,(\operatorname{div}_c \bar v_k)^2
        + \int_{\Gamma_N} \Phi_b(|\bar v_k|^2)\,ds\Big],

with slab midpoints :math:`\bar v_k`, :math:`\mathring v_k = (v_{k+1}-v_k)/h +
\operatorname{rot}\bar v_k\times\bar v_k` and the exact slab masses
:math:`W_k` of :math:`e^{-t/\varepsilon}`. The divergence penalty uses
cell-centre divergences (one-point rule), which avoids locking of bilinear
elements.

Admissible trajectories are ``v = v0 + w`` where ``v0`` is the steady
extension, ``w(0) = 0``, ``w`` vanishes on the inlet and has zero normal
component on walls, and every outlet flux of ``w`` vanishes at every time node.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla

from . import constitutive as cv
from .geometry import ChannelMesh, ExtensionField
from .operators import Space, Trajectory, exp_weight_quadrature

__all__ = [
    "ConstraintError",
    "ConstraintHandler",
    "FunctionalEval",
    "WideFunctional",
    "project_admissible",
]


class ConstraintError(ValueError):
    """A trajectory violates the hard constraints."""


class ConstraintHandler:
    """Dirichlet / initial rows, wall impermeability, outlet fluxes, penalty weight.

    Parameters
    ----------
    mesh : ChannelMesh
    extension : ExtensionField
        Supplies the boundary values and the initial state ``v(0)``.
    times : array_like
        Time grid of the trajectories handled.
    kappa : float
        Divergence penalty weight.
    """

    def __init__(self, mesh: ChannelMesh, extension: ExtensionField, times, kappa: float = 1e4):
        self.mesh = mesh
        self.extension = extension
        self.times = np.asarray(times, dtype=float)
        self.kappa = float(kappa)
        N = mesh.n_nodes
        fixed = np.zeros((N, 2), dtype=bool)
        fixed[mesh.dirichlet_nodes()] = True
        for node, comp in mesh.wall_normal_constraints():
            fixed[node, comp] = True
        self.fixed_space = fixed
        self.free_space = ~fixed
        self.free_index = np.flatnonzero(self.free_space.ravel())
        self.n_free_space = len(self.free_index)
        rows = []
        for i in range(mesh.n_outlets):
            c = mesh.outlet_flux_weights(i).ravel()[self.free_index]
            if np.linalg.norm(c) == 0:
                raise ConstraintError(f"outlet {i} has no free normal dofs")
            rows.append(c)
        self.flux_rows = np.array(rows).reshape(-1, self.n_free_space)
        # rows have disjoint supports; check and keep squared norms
        G = self.flux_rows @ self.flux_rows.T
        if np.max(np.abs(G - np.diag(np.diag(G))), initial=0.0) > 0:
            raise ConstraintError("outlet flux rows overlap")
        self._row_norm2 = np.diag(G).copy()
        # orthonormal basis of the admissible spatial subspace
        if len(rows):
            self.basis = sla.null_space(self.flux_rows)
        else:
            self.basis = np.eye(self.n_free_space)

    @property
    def M(self) -> int:
        return len(self.times) - 1

    @property
    def n_free(self) -> int:
        return self.M * self.n_free_space

    @property
    def v0(self) -> np.ndarray:
        return self.extension.velocity

    def project_space(self, w):
        """Remove outlet-flux components from spatial free vectors (..., n_free_space)."""
        w = np.array(w, dtype=float, copy=True)
        if len(self._row_norm2):
            coef = (w @ self.flux_rows.T) / self._row_norm2
            w -= coef @ self.flux_rows
        return w

    def project(self, x):
        """Project free-dof vectors onto zero outlet flux (per time node)."""
        x = np.asarray(x, dtype=float)
        return self.project_space(x.reshape(self.M, self.n_free_space)).reshape(x.shape)

    def values(self, x) -> np.ndarray:
        """Full nodal trajectory values (M + 1, N, 2) from free dofs."""
        x = np.asarray(x, dtype=float).reshape(self.M, self.n_free_space)
        N = self.mesh.n_nodes
        V = np.repeat(self.v0[None], self.M + 1, axis=0).reshape(self.M + 1, 2 * N)
        V[1:, self.free_index] += x
        return V.reshape(self.M + 1, N, 2)

    def trajectory(self, x) -> Trajectory:
        return Trajectory(self.times, self.values(x))

    def free_dofs(self, values) -> np.ndarray:
        """Free-dof vector of a full trajectory (no projection)."""
        V = np.asarray(values, dtype=float).reshape(self.M + 1, -1)
        return (V[1:] - self.v0.ravel()[None])[:, self.free_index].ravel()

    def restrict_gradient(self, G) -> np.ndarray:
        """Gradient w.r.t. free dofs from a nodal gradient (M + 1, N, 2)."""
        G = np.asarray(G, dtype=float).reshape(self.M + 1, -1)
        return self.project(G[1:, self.free_index].ravel())

    def flux_residual(self, values) -> float:
        """Largest outlet-flux violation over time nodes."""
        V = np.asarray(values, dtype=float).reshape(self.M + 1, self.mesh.n_nodes, 2)
        err = 0.0
        for i, F in enumerate(self.extension.fluxes):
            c = self.mesh.outlet_flux_weights(i)
            fl = np.einsum("knd,nd->k", V, c)
            err = max(err, float(np.max(np.abs(fl - F))))
        return err

    def fixed_residual(self, values) -> float:
        V = np.asarray(values, dtype=float).reshape(self.M + 1, self.mesh.n_nodes, 2)
        d0 = np.max(np.abs(V[0] - self.v0))
        d = np.max(np.abs((V[1:] - self.v0[None])[:, self.fixed_space]), initial=0.0)
        return float(max(d0, d))

    def check(self, values, tol: float = 1e-10) -> None:
        scale = 1.0 + np.max(np.abs(self.v0))
        if self.fixed_residual(values) > tol * scale:
            raise ConstraintError("Dirichlet, wall or initial rows not satisfied")
        if self.flux_residual(values) > tol * scale:
            raise ConstraintError("outlet flux constraint not satisfied (project first)")


def project_admissible(values, handler: ConstraintHandler) -> np.ndarray:
    """Nearest admissible trajectory: reset fixed rows, project outlet fluxes."""
    x = handler.project(handler.free_dofs(values))
    return handler.values(x)


@dataclass
class FunctionalEval:
    """Value, per-term breakdown and (optionally) free-dof gradient."""

    value: float
    breakdown: dict
    gradient: Optional[np.ndarray] = None
    slab_terms: Optional[np.ndarray] = field(default=None, repr=False)


_TERMS = ("inertia", "forcing", "bulk", "boundary", "penalty")


class WideFunctional:
    """Discrete functional on admissible trajectories of a fixed time grid.

    Parameters
    ----------
    space : Space
    handler : ConstraintHandler
    params : ConstitutiveParams
        ``params.eps`` sets both the weight and the regularization.
    forcing : callable, optional
        ``f(t, points) -> (..., 2)`` body force; zero if None.
    form : {"rotational", "standard"}
        Convective part of the material derivative.
    """

    def __init__(self, space: Space, handler: ConstraintHandler, params: cv.ConstitutiveParams,
                 forcing: Optional[Callable] = None, form: str = "rotational"):
        if form not in ("rotational", "standard"):
            raise ValueError(f"unknown convection form {form!r}")
        self.space = space
        self.handler = handler
        self.params = params
        self.form = form
        self.rule = exp_weight_quadrature(params.eps, handler.times)
        self.kappa = handler.kappa
        M, G = handler.M, space.n_gp
        self.force = None
        if forcing is not None:
            tm = self.rule.midpoints
            F = np.stack([np.asarray(forcing(t, space.points), dtype=float) for t in tm])
            self.force = F.reshape(M, G, 2)

    # --------------------------------------------------------------- core

    def _slabs(self, V, need_grad, left=None, right=None):
        """Per-slab terms and nodal gradient with slab coefficients ``left``/``right``."""
        sp_ = self.space
        p = self.params
        eps = p.eps
        h = float(self.handler.times[1] - self.handler.times[0])
        Vm = 0.5 * (V[1:] + V[:-1])
        R = (V[1:] - V[:-1]) / h
        a, b, ux, uy, vx, vy = sp_.gp_fields(Vm)
        rx, ry, *_ = [sp_.val @ R[..., c].T for c in (0, 1)]
        rx, ry = rx.T, ry.T
        w = sp_.weights[None, :]
        if self.form == "rotational":
            om = vx - uy
            cx, cy = -om * b, om * a
        else:
            cx, cy = a * ux + b * uy, a * vx + b * vy
        dx_, dy_ = rx + cx, ry + cy
        inertia = 0.5 * eps * np.sum(w * (dx_ ** 2 + dy_ ** 2), axis=1)
        if self.force is not None:
            fx, fy = self.force[..., 0], self.force[..., 1]
            forcing = -np.sum(w * (fx * a + fy * b), axis=1)
        else:
            forcing = np.zeros(len(Vm))
        n2 = ux ** 2 + vy ** 2 + 0.5 * (uy + vx) ** 2
        bulk = np.sum(w * cv._potential(n2, p.bulk_coeffs(), eps, True), axis=1)
        divc = (sp_.cdx @ Vm[..., 0].T + sp_.cdy @ Vm[..., 1].T).T
        penalty = self.kappa * np.sum(sp_.cell_area[None] * divc ** 2, axis=1)
        bx = (sp_.wval @ Vm[..., 0].T).T
        by = (sp_.wval @ Vm[..., 1].T).T
        nb2 = bx ** 2 + by ** 2
        wb = sp_.wweights[None, :]
        boundary = np.sum(wb * cv._potential(nb2, p.boundary_coeffs(), eps, True), axis=1)
        terms = np.stack([inertia, forcing, bulk, boundary, penalty], axis=1)
        if not need_grad:
            return terms, None

        ax, ay = eps * dx_ * w, eps * dy_ * w
        gA = np.zeros_like(a)
        gB = np.zeros_like(a)
        gUX = np.zeros_like(a)
        gUY = np.zeros_like(a)
        gVX = np.zeros_like(a)
        gVY = np.zeros_like(a)
        if self.form == "rotational":
            gA += om * ay
            gB -= om * ax
            bo = -ax * b + ay * a
            gVX += bo
            gUY -= bo
        else:
            gA += ax * ux + ay * vx
            gB += ax * uy + ay * vy
            gUX += ax * a
            gUY += ax * b
            gVX += ay * a
            gVY += ay * b
        if self.force is not None:
            gA -= fx * w
            gB -= fy * w
        mu = cv._secant(n2, p.bulk_coeffs(), eps, True) * w
        gUX += mu * ux
        gVY += mu * vy
        s12 = 0.5 * mu * (uy + vx)
        gUY += s12
        gVX += s12
        pen = 2.0 * self.kappa * sp_.cell_area[None] * divc
        mub = cv._secant(nb2, p.boundary_coeffs(), eps, True) * wb
        Gmx = (sp_.val.T @ gA.T + sp_.dx.T @ gUX.T + sp_.dy.T @ gUY.T
               + sp_.cdx.T @ pen.T + sp_.wval.T @ (mub * bx).T).T
        Gmy = (sp_.val.T @ gB.T + sp_.dx.T @ gVX.T + sp_.dy.T @ gVY.T
               + sp_.cdy.T @ pen.T + sp_.wval.T @ (mub * by).T).T
        Grx = (sp_.val.T @ ax.T).T
        Gry = (sp_.val.T @ ay.T).T
        Gm = np.stack([Gmx, Gmy], axis=-1)
        Gr = np.stack([Grx, Gry], axis=-1)
        G = np.zeros_like(V)
        lk = left[:, None, None]
        rk = right[:, None, None]
        G[:-1] += lk * (0.5 * Gm - Gr / h)
        G[1:] += rk * (0.5 * Gm + Gr / h)
        return terms, G

    # ------------------------------------------------------------ public

    def evaluate(self, traj, with_gradient: bool = False, check: bool = True) -> FunctionalEval:
        """Value with breakdown (and free-dof gradient if requested).

        Raises
        ------
        ConstraintError
            If ``check`` and the trajectory is not admissible.
        """
        V = traj.values if isinstance(traj, Trajectory) else np.asarray(traj, dtype=float)
        if check:
            self.handler.check(V)
        W = self.rule.slab_weights
        terms, G = self._slabs(V, with_gradient, W, W)
        weighted = W[:, None] * terms
        breakdown = dict(zip(_TERMS, np.sum(weighted, axis=0).tolist()))
        value = float(np.sum(weighted))
        grad = self.handler.restrict_gradient(G) if with_gradient else None
        return FunctionalEval(value=value, breakdown=breakdown, gradient=grad, slab_terms=terms)

    def value_and_gradient(self, x):
        """Value and projected gradient as functions of the free dofs."""
        V = self.handler.values(x)
        W = self.rule.slab_weights
        terms, G = self._slabs(V, True, W, W)
        return float(np.sum(W[:, None] * terms)), self.handler.restrict_gradient(G)

    def value(self, x) -> float:
        V = self.handler.values(x)
        terms, _ = self._slabs(V, False)
        return float(np.sum(self.rule.slab_weights[:, None] * terms))

    def gradient(self, traj) -> np.ndarray:
        return self.evaluate(traj, with_gradient=True).gradient

    def el2_residual(self, traj, tests) -> np.ndarray:
        r"""Unweighted Euler-Lagrange residuals for compactly supported tests.

        For each test trajectory :math:`\pi` (zero at both ends of the time
        grid, admissible in space) this returns the discrete derivative of the
        functional in the direction :math:`e^{t/\varepsilon}\pi`, assembled
        slab-wise with the weight-free coefficients
        :math:`\varepsilon(1 - e^{-h/\varepsilon})` and
        :math:`\varepsilon(e^{h/\varepsilon} - 1)`; as ``h -> 0`` this is
        :math:`\int \mathring v\cdot(\pi + \varepsilon\partial_t\pi +
        \varepsilon\,\mathrm{rot}\,v\times\pi + \varepsilon\,\mathrm{rot}\,\pi\times v)
        + S_\varepsilon(Dv)\cdot D\pi + s_\varepsilon(v)\cdot\pi - f\cdot\pi`.

        Parameters
        ----------
        traj : Trajectory or ndarray
        tests : sequence of ndarray (M + 1, N, 2)

        Returns
        -------
        ndarray
            One residual per test.
        """
        V = traj.values if isinstance(traj, Trajectory) else np.asarray(traj, dtype=float)
        eps = self.params.eps
        h = float(self.handler.times[1] - self.handler.times[0])
        M = self.handler.M
        left = np.full(M, -eps * np.expm1(-h / eps))
        right = np.full(M, eps * np.expm1(h / eps))
        _, G = self._slabs(V, True, left, right)
        out = []
        for pi in tests:
            pi = np.asarray(pi, dtype=float).reshape(V.shape)
            out.append(float(np.sum(G * pi)))
        return np.array(out)
