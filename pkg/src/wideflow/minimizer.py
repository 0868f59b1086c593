"""Preconditioned L-BFGS minimization and epsilon continuation.

The exponential weight makes the raw Hessian span many orders of magnitude
along the time axis. The initial inverse Hessian of L-BFGS is therefore the
exact inverse of the quadratic model

    H = T1 (x) M + T2 (x) A,

where ``T1``/``T2`` are the weighted time stencils of the rate and midpoint
terms and ``M``/``A`` the spatial mass and (linearized) dissipation +
penalty + friction matrices. A generalized eigendecomposition of ``(A, M)``
on the admissible spatial subspace reduces ``H^{-1}`` to independent
tridiagonal solves in time.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg as sla

from . import constitutive as cv
from .functional import ConstraintHandler, WideFunctional
from .geometry import ChannelMesh, ExtensionField
from .operators import Space, Trajectory

__all__ = [
    "MinimizeOptions",
    "MinimizerResult",
    "ContinuationReport",
    "Problem",
    "TimePreconditioner",
    "QuadraticSurrogate",
    "build_functional",
    "minimize",
    "epsilon_continuation",
    "horizon_grid",
    "l2_distance",
]

log = logging.getLogger("wideflow.minimizer")


@dataclass
class MinimizeOptions:
    """Stopping and line-search controls.

    ``grad_tol`` is relative: stop once ``|g| <= grad_tol (1 + |value|)`` and
    the preconditioned step is below ``step_tol`` in max-norm (set
    ``step_tol=None`` to use the gradient test alone).
    """

    grad_tol: float = 1e-6
    step_tol: Optional[float] = 1e-7
    max_iter: int = 2000
    memory: int = 20
    c1: float = 1e-4
    max_backtracks: int = 50
    log_every: int = 10


@dataclass
class MinimizerResult:
    x: np.ndarray
    trajectory: Trajectory
    value: float
    gnorm: float
    step_norm: float
    iterations: int
    backtracks: int
    status: str
    history: list = field(default_factory=list, repr=False)

    @property
    def converged(self) -> bool:
        return self.status == "converged"


def horizon_grid(T_obs: float, h_t: float, eps_max: float, pad: float = 8.0) -> np.ndarray:
    """Uniform grid of step ``h_t`` covering ``[0, T_obs + pad * eps_max]``."""
    M = int(math.ceil((T_obs + pad * eps_max) / h_t - 1e-9))
    return h_t * np.arange(M + 1)


class TimePreconditioner:
    """Exact inverse of the quadratic space-time model of the functional."""

    def __init__(self, functional: WideFunctional, reference_field: Optional[np.ndarray] = None):
        F = functional
        H = F.handler
        sp_ = F.space
        p = F.params
        eps = p.eps
        ref = H.v0 if reference_field is None else reference_field
        _, _, ux, uy, vx, vy = sp_.gp_fields(ref)
        n2 = ux ** 2 + vy ** 2 + 0.5 * (uy + vx) ** 2
        mu = cv.secant_bulk(n2, p)
        bx, by = sp_.wval @ ref[:, 0], sp_.wval @ ref[:, 1]
        mub = cv.secant_boundary(bx ** 2 + by ** 2, p)
        A = sp_.strain_form(mu) + 2.0 * F.kappa * sp_.div_form() + sp_.wall_form(mub)
        Mm = sp_.mass
        idx = H.free_index
        Z = H.basis
        Af = Z.T @ (A[idx][:, idx] @ Z)
        Mf = Z.T @ (Mm[idx][:, idx] @ Z)
        lam, Vg = sla.eigh(0.5 * (Af + Af.T), 0.5 * (Mf + Mf.T))
        self.lam = lam
        self.Phi = Z @ Vg
        W = np.maximum(F.rule.slab_weights, 1e-280)
        h = float(H.times[1] - H.times[0])
        Mt = H.M
        c1 = W * eps / h ** 2
        c2 = W / 4.0
        d1 = np.zeros(Mt)
        d2 = np.zeros(Mt)
        d1 += c1  # node k+1 of slab k (nodes 1..M map to 0..M-1)
        d2 += c2
        d1[:-1] += c1[1:]
        d2[:-1] += c2[1:]
        self.d1, self.d2 = d1, d2
        self.o1, self.o2 = -c1[1:], c2[1:]
        self.M = Mt
        self.n = H.n_free_space

    def apply(self, g: np.ndarray) -> np.ndarray:
        G = np.asarray(g, dtype=float).reshape(self.M, self.n)
        r = G @ self.Phi
        lam = self.lam[None, :]
        d = self.d1[:, None] + lam * self.d2[:, None]
        o = self.o1[:, None] + lam * self.o2[:, None]
        # Thomas algorithm over time, vectorized over modes
        Mt = self.M
        cp = np.zeros_like(o)
        dp = np.zeros_like(r)
        denom = d[0]
        cp[0] = o[0] / denom if Mt > 1 else 0.0
        dp[0] = r[0] / denom
        for k in range(1, Mt):
            denom = d[k] - o[k - 1] * cp[k - 1]
            if k < Mt - 1:
                cp[k] = o[k] / denom
            dp[k] = (r[k] - o[k - 1] * dp[k - 1]) / denom
        y = np.zeros_like(r)
        y[-1] = dp[-1]
        for k in range(Mt - 2, -1, -1):
            y[k] = dp[k] - cp[k] * y[k + 1]
        return (y @ self.Phi.T).reshape(np.shape(g))


class _Identity:
    def apply(self, g):
        return np.asarray(g, dtype=float)


class QuadraticSurrogate:
    """Physics-off objective ``0.5 |x - target|^2`` sharing the optimizer interface."""

    def __init__(self, handler: ConstraintHandler, target: np.ndarray):
        self.handler = handler
        self.target = handler.project(np.asarray(target, dtype=float))
        self.params = None

    def value_and_gradient(self, x):
        d = np.asarray(x) - self.target
        return 0.5 * float(d @ d), self.handler.project(d)


def minimize(objective, x0: Optional[np.ndarray] = None, opts: Optional[MinimizeOptions] = None,
             preconditioner=None, label: str = "") -> MinimizerResult:
    """Limited-memory quasi-Newton descent with backtracking Armijo search.

    Parameters
    ----------
    objective : WideFunctional or QuadraticSurrogate
        Provides ``value_and_gradient(x)`` on free dofs and ``handler``.
    x0 : ndarray, optional
        Initial free dofs (projected before use); zero means the extension.
    opts : MinimizeOptions
    preconditioner : object with ``apply``, optional
        Initial inverse Hessian; defaults to :class:`TimePreconditioner` for
        functionals and the identity otherwise.
    label : str
        Prefix of progress lines (``eps=<v>`` for ladder runs).

    Returns
    -------
    MinimizerResult
        ``status`` is ``"converged"``, ``"max_iter"`` or
        ``"line_search_failed"`` (best iterate returned).
    """
    opts = opts or MinimizeOptions()
    H = objective.handler
    if preconditioner is None:
        preconditioner = (TimePreconditioner(objective) if isinstance(objective, WideFunctional)
                          else _Identity())
    x = H.project(np.zeros(H.n_free) if x0 is None else np.asarray(x0, dtype=float))
    f, g = objective.value_and_gradient(x)
    S, Y, RHO = [], [], []
    history = [f]
    backtracks = 0
    status = "max_iter"
    it = 0
    step_norm = math.inf
    pg = H.project(preconditioner.apply(g))
    step_norm = float(np.max(np.abs(pg), initial=0.0))

    def done(f, g, step_norm):
        gn = float(np.linalg.norm(g))
        ok = gn <= opts.grad_tol * (1.0 + abs(f))
        if opts.step_tol is not None:
            ok = ok and step_norm <= opts.step_tol
        return ok

    for it in range(opts.max_iter + 1):
        gn = float(np.linalg.norm(g))
        if opts.log_every and it % opts.log_every == 0:
            log.info("%siter=%d value=%.17g gnorm=%.17g", label, it, f, gn)
        if done(f, g, step_norm):
            status = "converged"
            break
        if it == opts.max_iter:
            break
        # two-loop recursion
        q = g.copy()
        alphas = []
        for s, y, rho in zip(reversed(S), reversed(Y), reversed(RHO)):
            a = rho * float(s @ q)
            alphas.append(a)
            q -= a * y
        r = H.project(preconditioner.apply(q))
        for (s, y, rho), a in zip(zip(S, Y, RHO), reversed(alphas)):
            b = rho * float(y @ r)
            r += (a - b) * s
        d = -r
        gd = float(g @ d)
        if not gd < 0:
            d = -H.project(preconditioner.apply(g))
            gd = float(g @ d)
            S, Y, RHO = [], [], []
            if not gd < 0:
                status = "line_search_failed"
                break
        alpha = 1.0
        slack = 64.0 * np.finfo(float).eps * max(abs(f), 1e-300)
        accepted = False
        for _ in range(opts.max_backtracks + 1):
            xn = H.project(x + alpha * d)
            fn, gnew = objective.value_and_gradient(xn)
            if np.isfinite(fn) and fn <= f + opts.c1 * alpha * gd + slack:
                accepted = True
                break
            alpha *= 0.5
            backtracks += 1
        if not accepted:
            status = "line_search_failed"
            break
        s = xn - x
        y = gnew - g
        sy = float(s @ y)
        if sy > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(y)) and sy > 0:
            S.append(s)
            Y.append(y)
            RHO.append(1.0 / sy)
            if len(S) > opts.memory:
                S.pop(0)
                Y.pop(0)
                RHO.pop(0)
        x, f, g = xn, fn, gnew
        history.append(f)
        pg = H.project(preconditioner.apply(g))
        step_norm = float(np.max(np.abs(pg), initial=0.0))
    gn = float(np.linalg.norm(g))
    log.info("%siter=%d value=%.17g gnorm=%.17g", label, it, f, gn)
    traj = H.trajectory(x)
    return MinimizerResult(x=x, trajectory=traj, value=f, gnorm=gn, step_norm=step_norm,
                           iterations=it, backtracks=backtracks, status=status, history=history)


# ------------------------------------------------------------ continuation

@dataclass
class Problem:
    """Everything that defines a channel flow scenario except ``eps``."""

    mesh: ChannelMesh
    extension: ExtensionField
    params: cv.ConstitutiveParams
    T_obs: float
    h_t: float
    kappa: float = 1e4
    forcing: Optional[Callable] = None
    form: str = "rotational"
    space: Optional[Space] = None

    def __post_init__(self):
        if self.space is None:
            self.space = Space(self.mesh)


def build_functional(problem: Problem, eps: float, times) -> WideFunctional:
    handler = ConstraintHandler(problem.mesh, problem.extension, times, kappa=problem.kappa)
    return WideFunctional(problem.space, handler, problem.params.with_eps(eps),
                          forcing=problem.forcing, form=problem.form)


def l2_distance(space: Space, times, A, B, t_max: Optional[float] = None) -> float:
    """Space-time L2 distance of two piecewise-linear trajectories on a common grid.

    Time integration is exact for piecewise-linear-in-time fields (Simpson
    per slab on the squared difference of the bilinear interpolants).
    """
    times = np.asarray(times, dtype=float)
    D = np.asarray(A, dtype=float) - np.asarray(B, dtype=float)
    if t_max is not None:
        keep = times <= t_max + 1e-12
        times, D = times[keep], D[keep]
    Mm = space.mass
    n = D.reshape(len(times), -1)
    e = np.einsum("ki,ki->k", n, (Mm @ n.T).T)
    c = np.einsum("ki,ki->k", n[:-1], (Mm @ n[1:].T).T)
    h = np.diff(times)
    # int_slab |(1-s) a + s b|^2 = h (|a|^2 + a.b + |b|^2) / 3
    return float(np.sqrt(np.sum(h * (e[:-1] + c + e[1:]) / 3.0)))


@dataclass
class ContinuationReport:
    ladder: list
    times: np.ndarray
    results: list
    diagnostics: list
    distances: list
    cold_values: list = field(default_factory=list)
    warm_values: list = field(default_factory=list)
    branch_switches: list = field(default_factory=list)


def epsilon_continuation(problem: Problem, ladder: Sequence[float],
                         opts: Optional[MinimizeOptions] = None,
                         times: Optional[np.ndarray] = None,
                         diagnostics: bool = True) -> ContinuationReport:
    """Minimize along a decreasing ``eps`` ladder with warm starts.

    The time grid is shared by all rungs: step ``problem.h_t`` on
    ``[0, T_obs + 8 max(ladder)]``.
    """
    ladder = [float(e) for e in ladder]
    if any(b >= a for a, b in zip(ladder, ladder[1:])):
        raise ValueError("eps ladder must be strictly decreasing")
    if problem.h_t > min(ladder) / 4.0 + 1e-15:
        raise ValueError("time step must satisfy h_t <= min(eps) / 4")
    if times is None:
        times = horizon_grid(problem.T_obs, problem.h_t, max(ladder))
    from .diagnostics import energy_report

    results, diags, dists, cold, warm, switches = [], [], [], [], [], []
    x = None
    prev_value = None
    for eps in ladder:
        F = build_functional(problem, eps, times)
        zero = np.zeros(F.handler.n_free)
        cold.append(F.value_and_gradient(zero)[0])
        if x is not None:
            warm.append(F.value_and_gradient(x)[0])
        else:
            warm.append(cold[-1])
        try:
            res = minimize(F, x0=x, opts=opts, label=f"eps={eps:.17g} ")
        except Exception as exc:  # keep the ladder going
            log.error("eps=%r failed: %s", eps, exc)
            results.append(None)
            diags.append(None)
            continue
        if prev_value is not None and abs(res.value - prev_value) > 0.1 * abs(prev_value):
            switches.append(eps)
        prev_value = res.value
        if results and results[-1] is not None:
            dists.append(l2_distance(problem.space, times, res.trajectory.values,
                                     results[-1].trajectory.values, t_max=problem.T_obs))
        results.append(res)
        diags.append(energy_report(res.trajectory, problem.params.with_eps(eps), problem.space,
                                   t_max=problem.T_obs) if diagnostics else None)
        x = res.x
    return ContinuationReport(ladder=ladder, times=times, results=results, diagnostics=diags,
                              distances=dists, cold_values=cold, warm_values=warm,
                              branch_switches=switches)
