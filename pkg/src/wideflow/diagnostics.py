"""Pressure reconstruction, boundary-condition residuals and trajectory norms.

Pressure
    ``P`` is the time primitive of the kinematic pressure. For each stored
    time ``t`` the accumulated momentum defect ``g(t)`` is paired against a
    Q1-Q1 Stokes system with pressure-gradient stabilization, giving ``Q``;
    with the kinetic accumulation ``K = int_0^t |v|^2 / 2`` the pressure is
    ``P = -(Q + K) + mean(K) + D / |Omega|``.

Boundary conditions
    The time-averaged stress ``T_psi = int (P I psi' + S(Dv) psi)`` is paired
    with boundary test fields ``w`` through a discrete extension ``Ew``:
    ``<T_psi n, w> = int T_psi : grad Ew - int R_psi . Ew`` where
    ``R_psi = int (v psi' - (grad v) v psi + f psi)`` replaces ``-div T_psi``.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import constitutive as cv
from .functional import ConstraintHandler
from .geometry import OUTFLOW0, WALL, ChannelMesh, ExtensionField
from .operators import Space, Trajectory

__all__ = [
    "PressureError",
    "PressureField",
    "reconstruct_pressure",
    "BumpInTime",
    "default_psis",
    "BoundaryChain",
    "boundary_chains",
    "wall_test_fields",
    "outlet_test_fields",
    "outlet_multipliers",
    "BoundaryReport",
    "boundary_report",
    "EnergyReport",
    "energy_report",
    "reports_to_csv",
    "reports_to_table",
    "KornEstimate",
    "korn_ratio",
    "estimate_korn_constant",
]


# ================================================================ pressure

class PressureError(RuntimeError):
    """Singular stabilized saddle system."""


@dataclass
class PressureField:
    """Nodal pressure primitive ``P`` (M + 1, N) with its parts ``Q`` and ``K``."""

    times: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    K: np.ndarray
    D: np.ndarray
    mass_vector: np.ndarray

    def integral(self) -> np.ndarray:
        """``int_Omega P(t)`` per stored time."""
        return self.P @ self.mass_vector

    def shifted(self, c) -> "PressureField":
        """Pressure obtained with ``D + c``."""
        area = float(self.mass_vector.sum())
        c = np.broadcast_to(np.asarray(c, dtype=float), self.D.shape)
        return PressureField(self.times, self.P + c[:, None] / area, self.Q, self.K,
                             self.D + c, self.mass_vector)


def _div_pairing(space: Space) -> sp.csr_matrix:
    """``B[a, dof] = int N_a div phi_dof`` in interleaved layout (N, 2N)."""
    W = sp.diags(space.weights)
    Bx = space.val.T @ W @ space.dx
    By = space.val.T @ W @ space.dy
    N = space.mesh.n_nodes
    B = sp.hstack([Bx, By]).tocsr()
    perm = np.empty(2 * N, dtype=int)
    perm[0::2] = np.arange(N)
    perm[1::2] = N + np.arange(N)
    return B[:, perm].tocsr()


def _load(space: Space, f_gp) -> np.ndarray:
    w = space.weights
    out = np.empty(2 * space.mesh.n_nodes)
    out[0::2] = space.val.T @ (w * f_gp[:, 0])
    out[1::2] = space.val.T @ (w * f_gp[:, 1])
    return out


def _momentum_rate(space: Space, v, params, forcing, t, stabilized) -> np.ndarray:
    """Interleaved vector of ``c(v; v, phi) + S(Dv).D phi + s(v).phi - f.phi``."""
    _, _, ux, uy, vx, vy = space.gp_fields(v)
    n2 = ux ** 2 + vy ** 2 + 0.5 * (uy + vx) ** 2
    mu = cv.secant_bulk(n2, params, stabilized=stabilized)
    bx, by = space.wval @ v[:, 0], space.wval @ v[:, 1]
    mub = cv.secant_boundary(bx ** 2 + by ** 2, params, stabilized=stabilized)
    vr = v.ravel()
    out = (space.convection_form(vx - uy) @ vr + space.strain_form(mu) @ vr
           + space.wall_form(mub) @ vr)
    if forcing is not None:
        out -= _load(space, np.asarray(forcing(t, space.points), dtype=float))
    return out


def reconstruct_pressure(traj: Trajectory, space: Space, extension: ExtensionField,
                         params: cv.ConstitutiveParams, D=0.0, forcing: Optional[Callable] = None,
                         stabilization: float = 0.1, stabilized_law: bool = False) -> PressureField:
    """Pressure primitive with prescribed spatial integral ``D(t)``.

    Parameters
    ----------
    traj : Trajectory
        Velocity samples; time integrals use the trapezoid rule.
    space : Space
    extension : ExtensionField
        Fixes the test space (Dirichlet rows, wall normals, outlet fluxes).
    params : ConstitutiveParams
    D : float or array (M + 1,)
        Target ``int_Omega P``.
    forcing : callable, optional
    stabilization : float
        Coefficient of ``h^2 int grad Q . grad q`` per cell.
    stabilized_law : bool
        Use the regularized laws (with ``params.eps``) in the stress terms.
    """
    times = traj.times
    V = traj.values
    n_t = len(times)
    N = space.mesh.n_nodes
    D = np.broadcast_to(np.asarray(D, dtype=float), (n_t,)).copy()
    H = ConstraintHandler(space.mesh, extension, [0.0, 1.0])
    idx = H.free_index

    # accumulated momentum defect g(t_k), trapezoid in time
    rates = np.stack([_momentum_rate(space, V[k], params, forcing, times[k], stabilized_law)
                      for k in range(n_t)])
    acc = np.zeros_like(rates)
    if n_t > 1:
        dt = np.diff(times)[:, None]
        acc[1:] = np.cumsum(0.5 * dt * (rates[1:] + rates[:-1]), axis=0)
    Mm = space.mass
    G = (Mm @ (V - V[0]).reshape(n_t, -1).T).T + acc
    Gf = G[:, idx]

    # stabilized saddle system
    A = space.gradient_form()[idx][:, idx]
    B = _div_pairing(space)[:, idx]
    hc2 = np.repeat(space.cell_area, 4)  # cell area ~ h^2, per Gauss point (4 per cell)
    Ws = sp.diags(space.weights * stabilization * hc2)
    S = (space.dx.T @ Ws @ space.dx + space.dy.T @ Ws @ space.dy).tocsr()
    mvec = space.val.T @ space.weights
    L = sp.csr_matrix(H.flux_rows)
    m = L.shape[0]
    nf = len(idx)
    blocks = [[A, -B.T, L.T if m else None, None],
              [-B, -S, None, sp.csr_matrix(mvec[:, None])],
              [L if m else None, None, None, None],
              [None, sp.csr_matrix(mvec[None, :]), None, None]]
    if not m:
        blocks = [[b for j, b in enumerate(row) if j != 2] for i, row in enumerate(blocks) if i != 2]
    K_ = sp.bmat(blocks, format="csc")
    rhs = np.zeros((K_.shape[0], n_t))
    rhs[:nf] = Gf.T
    try:
        sol = spla.splu(K_).solve(rhs)
    except RuntimeError as exc:
        raise PressureError(f"singular saddle system: {exc}") from exc
    if not np.all(np.isfinite(sol)):
        raise PressureError("singular saddle system")
    Q = sol[nf:nf + N].T

    # kinetic accumulation at nodes
    e = 0.5 * np.sum(V ** 2, axis=-1)
    Kin = np.zeros((n_t, N))
    if n_t > 1:
        Kin[1:] = np.cumsum(0.5 * np.diff(times)[:, None] * (e[1:] + e[:-1]), axis=0)
    area = float(mvec.sum())
    meanK = (Kin @ mvec) / area
    P = -(Q + Kin) + meanK[:, None] + D[:, None] / area
    # remove the roundoff left in int Q
    P += ((D - P @ mvec) / area)[:, None]
    return PressureField(times=times, P=P, Q=Q, K=Kin, D=D, mass_vector=mvec)


# ================================================================ test data

@dataclass(frozen=True)
class BumpInTime:
    """Smooth bump ``exp(-1 / (1 - s^2))`` mapped from ``[-1, 1]`` onto ``[a, b]``."""

    a: float
    b: float

    def _s(self, t):
        return (2.0 * np.asarray(t, dtype=float) - self.a - self.b) / (self.b - self.a)

    def __call__(self, t):
        s = self._s(t)
        inside = np.abs(s) < 1
        out = np.zeros_like(s)
        si = s[inside]
        out[inside] = np.exp(-1.0 / (1.0 - si ** 2))
        return out

    def derivative(self, t):
        s = self._s(t)
        inside = np.abs(s) < 1
        out = np.zeros_like(s)
        si = s[inside]
        out[inside] = (np.exp(-1.0 / (1.0 - si ** 2)) * (-2.0 * si / (1.0 - si ** 2) ** 2)
                       * 2.0 / (self.b - self.a))
        return out


def default_psis(T_obs: float) -> list:
    """Three bumps inside ``[0.2, 0.8] T_obs``."""
    return [BumpInTime(0.2 * T_obs, 0.8 * T_obs), BumpInTime(0.2 * T_obs, 0.6 * T_obs),
            BumpInTime(0.4 * T_obs, 0.8 * T_obs)]


@dataclass
class BoundaryChain:
    """Consecutive boundary edges of one tag: ordered nodes and arclength."""

    tag: int
    edges: np.ndarray
    nodes: np.ndarray
    s: np.ndarray
    normals: np.ndarray
    tangents: np.ndarray

    @property
    def length(self) -> float:
        return float(self.s[-1])


def boundary_chains(mesh: ChannelMesh, tag: int) -> list:
    """Split the edges carrying ``tag`` into connected runs (boundary order)."""
    ids = np.nonzero(mesh.edge_tags == tag)[0]
    if len(ids) == 0:
        return []
    E = len(mesh.edge_tags)
    member = mesh.edge_tags == tag
    starts = [e for e in ids if not member[(e - 1) % E]] or [ids[0]]
    chains = []
    for e0 in starts:
        run = [e0]
        e = (e0 + 1) % E
        while member[e] and e != e0:
            run.append(e)
            e = (e + 1) % E
        run = np.array(run)
        nodes = np.concatenate([[mesh.edges[run[0], 0]], mesh.edges[run, 1]])
        s = np.concatenate([[0.0], np.cumsum(mesh.lengths[run])])
        en = mesh.normals[run]
        nn = np.zeros((len(nodes), 2))
        nn[:-1] += en
        nn[1:] += en
        nn /= np.linalg.norm(nn, axis=1, keepdims=True)
        tt = np.stack([-nn[:, 1], nn[:, 0]], axis=1)
        chains.append(BoundaryChain(tag=int(tag), edges=run, nodes=nodes, s=s,
                                    normals=nn, tangents=tt))
    return chains


def _bumps(s, length, count):
    """``count`` overlapping ``sin^2`` bumps covering ``[0, length]``."""
    width = 2.0 * length / (count + 1)
    out = []
    for j in range(count):
        a = j * width / 2.0
        z = np.clip((s - a) / width, 0.0, 1.0)
        out.append(np.sin(np.pi * z) ** 2)
    return out


def _trace_norm(chain: BoundaryChain, w_nodes) -> float:
    """L2 norm of the piecewise-linear trace of nodal values on the chain."""
    h = np.diff(chain.s)
    a, b = w_nodes[:-1], w_nodes[1:]
    val = h * (np.sum(a * a, 1) + np.sum(a * b, 1) + np.sum(b * b, 1)) / 3.0
    return float(np.sqrt(np.sum(val)))


def _place(mesh, chain, w_nodes):
    W = np.zeros((mesh.n_nodes, 2))
    W[chain.nodes] = w_nodes
    return W


def wall_test_fields(mesh: ChannelMesh, per_wall: int = 4) -> list:
    """Tangential wall bumps vanishing at wall endpoints, unit trace norm."""
    out = []
    for ch in boundary_chains(mesh, WALL):
        for b in _bumps(ch.s, ch.length, per_wall):
            wn = b[:, None] * ch.tangents
            out.append(_place(mesh, ch, wn / _trace_norm(ch, wn)))
    return out


def _chain_flux(chain, wn):
    """Trapezoid flux of nodal values ``wn`` through the chain."""
    f = np.sum(wn * chain.normals, axis=1)
    return float(np.sum(np.diff(chain.s) * 0.5 * (f[:-1] + f[1:])))


def outlet_test_fields(mesh: ChannelMesh, i: int, count: int = 4) -> list:
    """Zero-flux outlet fields: tangential bumps and normal bump differences."""
    out = []
    for ch in boundary_chains(mesh, OUTFLOW0 + i):
        bumps = _bumps(ch.s, ch.length, count)
        for b in bumps:
            wn = b[:, None] * ch.tangents
            out.append(_place(mesh, ch, wn / _trace_norm(ch, wn)))
        normal = [b[:, None] * ch.normals for b in bumps]
        for b0, b1 in zip(normal, normal[1:]):
            wn = b0 / _chain_flux(ch, b0) - b1 / _chain_flux(ch, b1)
            out.append(_place(mesh, ch, wn / _trace_norm(ch, wn)))
    return out


def outlet_multipliers(mesh: ChannelMesh, i: int) -> list:
    """Three normal fields on outlet ``i`` with unit flux, zero at its endpoints."""
    chains = boundary_chains(mesh, OUTFLOW0 + i)
    if len(chains) != 1:
        raise ValueError(f"outlet {i} is not a single boundary run")
    ch = chains[0]
    z = ch.s / ch.length
    shapes = [z * (1 - z), np.sin(np.pi * z) ** 2, z ** 2 * (1 - z)]
    out = []
    for g in shapes:
        wn = g[:, None] * ch.normals
        out.append(_place(mesh, ch, wn / _chain_flux(ch, wn)))
    return out


# ================================================================ boundary report

class _TraceExtension:
    """Discrete minimizer of ``int |grad E|^2 + |E|^2`` with given boundary values."""

    def __init__(self, space: Space):
        mesh = space.mesh
        W = sp.diags(space.weights)
        K = (space.dx.T @ W @ space.dx + space.dy.T @ W @ space.dy + space.mass_scalar).tocsr()
        bnd = np.zeros(mesh.n_nodes, dtype=bool)
        bnd[np.unique(mesh.edges.ravel())] = True
        self.inner = np.flatnonzero(~bnd)
        self.bnd = np.flatnonzero(bnd)
        self.K_ib = K[self.inner][:, self.bnd]
        self.lu = spla.splu(K[self.inner][:, self.inner].tocsc()) if len(self.inner) else None

    def __call__(self, W):
        E = np.zeros_like(W)
        E[self.bnd] = W[self.bnd]
        if self.lu is not None:
            E[self.inner] = self.lu.solve(-(self.K_ib @ W[self.bnd]))
        return E


@dataclass
class BoundaryReport:
    """Time-averaged boundary identification for a set of ``psi``.

    ``constants[j, i, l]``: outlet constant for ``psi_j``, outlet ``i`` and
    multiplier ``eta_l``. Residuals are maxima over the test bases.
    """

    constants: np.ndarray
    wall_residual: np.ndarray
    outlet_residual: np.ndarray
    eta: list = field(repr=False)
    psis: list = field(repr=False)

    def constant_spread(self) -> np.ndarray:
        """Relative spread over multipliers, per (psi, outlet)."""
        c = self.constants
        scale = np.maximum(np.max(np.abs(c), axis=-1), 1e-300)
        return (c.max(axis=-1) - c.min(axis=-1)) / scale


def _stress_integrals(traj, space, params, pressure, psi, forcing, stabilized):
    """``T_psi`` (G, 3) and ``R_psi`` (G, 2) at Gauss points, plus wall/outlet data."""
    times = traj.times
    V = traj.values
    ps = psi(times)
    dps = psi.derivative(times)
    h = np.diff(times)
    tw = np.zeros(len(times))  # trapezoid weights
    tw[:-1] += 0.5 * h
    tw[1:] += 0.5 * h
    dpsi = np.diff(ps)
    Pg = (space.val @ pressure.P.T).T
    Pmid = 0.5 * (Pg[1:] + Pg[:-1])
    Pint = dpsi @ Pmid
    a, b, ux, uy, vx, vy = space.gp_fields(V)
    n2 = ux ** 2 + vy ** 2 + 0.5 * (uy + vx) ** 2
    mu = cv.secant_bulk(n2, params, stabilized=stabilized)
    c = tw * ps
    Txx = Pint + c @ (mu * ux)
    Tyy = Pint + c @ (mu * vy)
    Txy = c @ (0.5 * mu * (uy + vx))
    amid, bmid = 0.5 * (a[1:] + a[:-1]), 0.5 * (b[1:] + b[:-1])
    Rx = dpsi @ amid - c @ (a * ux + b * uy)
    Ry = dpsi @ bmid - c @ (a * vx + b * vy)
    if forcing is not None:
        F = np.stack([np.asarray(forcing(t, space.points), dtype=float) for t in times])
        Rx = Rx + c @ F[..., 0]
        Ry = Ry + c @ F[..., 1]
    return np.stack([Txx, Tyy, Txy], 1), np.stack([Rx, Ry], 1), c


def _pairing(space, T, R, E) -> float:
    """``int T : grad E - int R . E`` for a nodal field ``E`` (N, 2)."""
    ex, ey, exx, exy, eyx, eyy = space.gp_fields(E)
    w = space.weights
    return float(np.sum(w * (T[:, 0] * exx + T[:, 1] * eyy + T[:, 2] * (exy + eyx)))
                 - np.sum(w * (R[:, 0] * ex + R[:, 1] * ey)))


def _edge_time_integral(space, traj, c, edge_ids, W, kind, params, stabilized) -> float:
    """``int int g(v) . W psi`` over edges, ``g = |v|^2 n / 2`` or the friction ``s(v)``."""
    op, wts, _ = space.edge_rule(edge_ids)
    V = traj.values
    vx = (op @ V[..., 0].T).T
    vy = (op @ V[..., 1].T).T
    if kind == "kinetic":
        n = np.repeat(space.mesh.normals[edge_ids], 2, axis=0)
        e = 0.5 * (vx ** 2 + vy ** 2)
        gx, gy = e * n[:, 0], e * n[:, 1]
    else:
        mub = cv.secant_boundary(vx ** 2 + vy ** 2, params, stabilized=stabilized)
        gx, gy = mub * vx, mub * vy
    return float(np.sum(wts * ((op @ W[:, 0]) * (c @ gx) + (op @ W[:, 1]) * (c @ gy))))


def boundary_report(traj: Trajectory, space: Space, params: cv.ConstitutiveParams,
                    pressure: PressureField, psis: Sequence[BumpInTime], T_obs: float,
                    forcing: Optional[Callable] = None, eta: Optional[list] = None,
                    wall_fields: Optional[list] = None, outlet_fields: Optional[list] = None,
                    stabilized_law: bool = False) -> BoundaryReport:
    """Outlet constants and wall/outlet residuals of the identified conditions.

    Raises
    ------
    ValueError
        If some ``psi`` is supported outside ``(0, T_obs)``.
    """
    mesh = space.mesh
    for psi in psis:
        if not (0.0 < psi.a and psi.b < T_obs):
            raise ValueError("psi support must lie strictly inside (0, T_obs)")
    n_out = mesh.n_outlets
    if eta is None:
        eta = [outlet_multipliers(mesh, i) for i in range(n_out)]
    if wall_fields is None:
        wall_fields = wall_test_fields(mesh)
    if outlet_fields is None:
        outlet_fields = [outlet_test_fields(mesh, i) for i in range(n_out)]
    for i, etas in enumerate(eta):
        for e in etas:
            ch = boundary_chains(mesh, OUTFLOW0 + i)[0]
            if abs(_chain_flux(ch, e[ch.nodes]) - 1.0) > 1e-12:
                raise ValueError("multiplier field must carry unit flux")
    ext = _TraceExtension(space)
    wall_ids = mesh.edges_with(WALL)
    consts = np.zeros((len(psis), n_out, max((len(e) for e in eta), default=0)))
    wall_res = np.zeros(len(psis))
    out_res = np.zeros((len(psis), n_out))
    Ew_wall = [ext(w) for w in wall_fields]
    for j, psi in enumerate(psis):
        T, R, c = _stress_integrals(traj, space, params, pressure, psi, forcing, stabilized_law)
        if wall_fields:
            pair = np.array([_pairing(space, T, R, E) for E in Ew_wall])
            fric = np.array([_edge_time_integral(space, traj, c, wall_ids, w, "friction",
                                                 params, stabilized_law) for w in wall_fields])
            wall_res[j] = float(np.max(np.abs(pair + fric)))
        for i in range(n_out):
            oids = mesh.edges_with(OUTFLOW0 + i)
            for l, e in enumerate(eta[i]):
                kin = _edge_time_integral(space, traj, c, oids, e, "kinetic",
                                          params, stabilized_law)
                consts[j, i, l] = _pairing(space, T, R, ext(e)) - kin
            if outlet_fields[i]:
                vals = []
                for w in outlet_fields[i]:
                    kin = _edge_time_integral(space, traj, c, oids, w, "kinetic",
                                              params, stabilized_law)
                    vals.append(_pairing(space, T, R, ext(w)) - kin)
                out_res[j, i] = float(np.max(np.abs(vals)))
    return BoundaryReport(constants=consts, wall_residual=wall_res, outlet_residual=out_res,
                          eta=eta, psis=list(psis))


# ================================================================ energy norms

ENERGY_QUANTITIES = (
    "linf_l2", "x2", "xr", "eps14_x4", "eps1q_xq",
    "eps12_dt_l2", "eps12_conv_l2", "eps12_material_l2",
    "conv_lr2", "eps2q_conv_lq2",
)


@dataclass
class EnergyReport:
    """Uniform-bound quantities of one trajectory at one ``eps``."""

    eps: float
    values: dict

    def __getitem__(self, key):
        return self.values[key]


_TG = 0.5 - 0.5 / math.sqrt(3.0)


def energy_report(traj: Trajectory, params: cv.ConstitutiveParams, space: Space,
                  t_max: Optional[float] = None) -> EnergyReport:
    """Norms entering the uniform bounds, restricted to ``[0, t_max]``.

    The Sobolev norms are ``(int int |grad v|^p + |v|^p)^(1/p)`` with the
    Frobenius gradient norm; time integrals use 2-point Gauss per slab on
    the piecewise-linear interpolant.
    """
    eps = float(params.eps)
    r, q = params.r, params.q
    times = traj.times
    V = traj.values
    if t_max is not None:
        keep = times <= t_max + 1e-12
        times, V = times[keep], V[keep]
    w = space.weights
    linf = 0.0
    Mm = space.mass
    for Vk in V:
        linf = max(linf, float(Vk.ravel() @ (Mm @ Vk.ravel())))
    acc = dict(x2=0.0, xr=0.0, x4=0.0, xq=0.0, dt=0.0, conv=0.0, mat=0.0, cr=0.0, cq=0.0)
    for k in range(len(times) - 1):
        h = times[k + 1] - times[k]
        rate = (V[k + 1] - V[k]) / h
        rx, ry = space.val @ rate[:, 0], space.val @ rate[:, 1]
        for s in (_TG, 1.0 - _TG):
            Vs = (1 - s) * V[k] + s * V[k + 1]
            a, b, ux, uy, vx, vy = space.gp_fields(Vs)
            g2 = ux ** 2 + uy ** 2 + vx ** 2 + vy ** 2
            v2 = a ** 2 + b ** 2
            om = vx - uy
            cx, cy = -om * b, om * a
            c2 = cx ** 2 + cy ** 2
            hw = 0.5 * h * w
            acc["x2"] += np.sum(hw * (g2 + v2))
            acc["xr"] += np.sum(hw * (g2 ** (r / 2) + v2 ** (r / 2)))
            acc["x4"] += np.sum(hw * (g2 ** 2 + v2 ** 2))
            acc["xq"] += np.sum(hw * (g2 ** (q / 2) + v2 ** (q / 2)))
            acc["dt"] += np.sum(hw * (rx ** 2 + ry ** 2))
            acc["conv"] += np.sum(hw * c2)
            acc["mat"] += np.sum(hw * ((rx + cx) ** 2 + (ry + cy) ** 2))
            acc["cr"] += np.sum(hw * c2 ** (r / 4))
            acc["cq"] += np.sum(hw * c2 ** (q / 4))
    vals = {
        "linf_l2": math.sqrt(linf),
        "x2": math.sqrt(acc["x2"]),
        "xr": acc["xr"] ** (1 / r),
        "eps14_x4": eps ** 0.25 * acc["x4"] ** 0.25,
        "eps1q_xq": eps ** (1 / q) * acc["xq"] ** (1 / q),
        "eps12_dt_l2": math.sqrt(eps * acc["dt"]),
        "eps12_conv_l2": math.sqrt(eps * acc["conv"]),
        "eps12_material_l2": math.sqrt(eps * acc["mat"]),
        "conv_lr2": acc["cr"] ** (2 / r),
        "eps2q_conv_lq2": eps ** (2 / q) * acc["cq"] ** (2 / q),
    }
    return EnergyReport(eps=eps, values=vals)


def reports_to_csv(reports: Sequence[EnergyReport]) -> str:
    """CSV text with columns ``eps,quantity,value`` (17 significant digits)."""
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["eps", "quantity", "value"])
    for rep in reports:
        for key in ENERGY_QUANTITIES:
            wr.writerow([f"{rep.eps:.17g}", key, f"{rep.values[key]:.17g}"])
    return buf.getvalue()


def reports_to_table(reports: Sequence[EnergyReport]) -> str:
    """Fixed-width table, one row per quantity and one column per ``eps``."""
    head = f"{'quantity':<20}" + "".join(f"{'eps=' + format(r.eps, 'g'):>24}" for r in reports)
    lines = [head]
    for key in ENERGY_QUANTITIES:
        lines.append(f"{key:<20}" + "".join(f"{r.values[key]:>24.17g}" for r in reports))
    return "\n".join(lines) + "\n"


# ================================================================ Korn constant

@dataclass
class KornEstimate:
    """Best ratio found (a lower bound on the constant) and all start results."""

    p: float
    value: float
    ratios: np.ndarray


def _korn_parts(space: Space, W, p: float):
    a, b, ux, uy, vx, vy = space.gp_fields(W)
    w = space.weights
    g2 = ux ** 2 + uy ** 2 + vx ** 2 + vy ** 2
    v2 = a ** 2 + b ** 2
    d2 = ux ** 2 + vy ** 2 + 0.5 * (uy + vx) ** 2
    bx, by = space.wval @ W[:, 0], space.wval @ W[:, 1]
    b2 = bx ** 2 + by ** 2
    num = float(np.sum(w * (g2 ** (p / 2) + v2 ** (p / 2))))
    den = float(np.sum(w * d2 ** (p / 2)) + np.sum(space.wweights * b2 ** (p / 2)))
    return num, den, (a, b, ux, uy, vx, vy, g2, v2, d2, bx, by, b2)


def korn_ratio(space: Space, W, p: float = 2.0) -> float:
    """``(|grad w|_p^p + |w|_p^p) / (|Dw|_p^p + |w|_{p,wall}^p)`` for nodal ``W`` (N, 2)."""
    num, den, _ = _korn_parts(space, np.asarray(W, dtype=float), p)
    return num / den


def _korn_log_gradient(space, W, p):
    num, den, (a, b, ux, uy, vx, vy, g2, v2, d2, bx, by, b2) = _korn_parts(space, W, p)
    w = space.weights
    tiny = 1e-300

    def pw(x):
        return np.where(x > 0, np.maximum(x, tiny) ** (p / 2 - 1), 0.0) if p < 2 else x ** (p / 2 - 1)

    cg, cv_, cd, cb = p * w * pw(g2), p * w * pw(v2), p * w * pw(d2), p * space.wweights * pw(b2)
    Nx = space.val.T @ (cv_ * a) + space.dx.T @ (cg * ux) + space.dy.T @ (cg * uy)
    Ny = space.val.T @ (cv_ * b) + space.dx.T @ (cg * vx) + space.dy.T @ (cg * vy)
    e12 = 0.5 * (uy + vx)
    Dx = space.dx.T @ (cd * ux) + space.dy.T @ (cd * e12) + space.wval.T @ (cb * bx)
    Dy = space.dy.T @ (cd * vy) + space.dx.T @ (cd * e12) + space.wval.T @ (cb * by)
    gn = np.stack([Nx, Ny], 1)
    gd = np.stack([Dx, Dy], 1)
    return math.log(num / den), gn / num - gd / den


def estimate_korn_constant(space: Space, p: float = 2.0, n_starts: int = 20, seed: int = 42,
                           max_iter: int = 300, extension: Optional[ExtensionField] = None,
                           rtol: float = 1e-10) -> KornEstimate:
    """Lower bound on the Korn-Poincare constant by projected gradient ascent.

    Admissible fields vanish on Dirichlet nodes and have zero wall-normal
    component. Each start is a random admissible field; the log of the
    ratio is increased along its gradient, preconditioned with the inverse
    of the quadratic denominator form (strain plus wall), with backtracking.
    The preconditioning keeps the iteration count nearly mesh independent.
    """
    mesh = space.mesh
    if len(mesh.edges_with(WALL)) + len(mesh.dirichlet_nodes()) == 0:
        raise ValueError("Korn-Poincare ratio needs a Dirichlet or wall part")
    fixed = np.zeros((mesh.n_nodes, 2), dtype=bool)
    fixed[mesh.dirichlet_nodes()] = True
    for node, comp in mesh.wall_normal_constraints():
        fixed[node, comp] = True
    free = ~fixed
    idx = np.flatnonzero(free.ravel())
    den_form = (space.strain_form() + space.wall_form())[idx][:, idx].tocsc()
    den_lu = spla.splu(den_form)

    def ascent(g):
        d = np.zeros(2 * mesh.n_nodes)
        d[idx] = den_lu.solve(g.ravel()[idx])
        return d.reshape(-1, 2)

    rng = np.random.default_rng(seed)
    ratios = []
    for _ in range(n_starts):
        W = rng.standard_normal((mesh.n_nodes, 2)) * free
        W /= np.linalg.norm(W)
        f, g = _korn_log_gradient(space, W, p)
        step = 1.0
        for _it in range(max_iter):
            d = ascent(g)
            dn = np.linalg.norm(d)
            if dn == 0:
                break
            improved = False
            while step > 1e-12:
                Wn = W + step * d / dn
                Wn /= np.linalg.norm(Wn)
                fn, gnew = _korn_log_gradient(space, Wn, p)
                if fn > f:
                    improved = True
                    break
                step *= 0.5
            if not improved:
                break
            gain = fn - f
            W, f, g = Wn, fn, gnew
            step = min(2.0 * step, 1.0)
            if gain < rtol:
                break
        ratios.append(math.exp(f))
    ratios = np.array(ratios)
    return KornEstimate(p=float(p), value=float(ratios.max()), ratios=ratios)
