r"""Bilinear finite-element operators and the exponentially weighted time rule.

Velocities are nodal ``(N, 2)`` arrays interpolated bilinearly per cell and
evaluated at 2x2 Gauss points. Flattened vectors use the interleaved layout
``2 * node + component``. Trajectories are piecewise linear in time; slab
integrands are sampled at slab midpoints and weighted by the exact mass of
:math:`e^{-t/\varepsilon}` over the slab,

.. math::

    W_k = \varepsilon\,(e^{-t_k/\varepsilon} - e^{-t_{k+1}/\varepsilon}).

In two dimensions :math:`\operatorname{rot} v = \partial_x v_2 - \partial_y v_1`
is a scalar :math:`\omega` and :math:`\operatorname{rot} v\times v =
\omega\,(-v_2, v_1)`.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .geometry import ChannelMesh, WALL

__all__ = [
    "Space",
    "Trajectory",
    "QuadratureRule",
    "sym_gradient",
    "divergence",
    "curl_cross",
    "convective_derivative",
    "wide_material_derivative",
    "exp_weight_quadrature",
]

_G1 = 1.0 / np.sqrt(3.0)
_REF_GP = np.array([[-_G1, -_G1], [_G1, -_G1], [_G1, _G1], [-_G1, _G1]])
_REF_NODES = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])


def _shape(xi, eta):
    return 0.25 * (1 + _REF_NODES[:, 0] * xi) * (1 + _REF_NODES[:, 1] * eta)


def _shape_grad(xi, eta):
    dxi = 0.25 * _REF_NODES[:, 0] * (1 + _REF_NODES[:, 1] * eta)
    deta = 0.25 * _REF_NODES[:, 1] * (1 + _REF_NODES[:, 0] * xi)
    return np.stack([dxi, deta], axis=-1)


class Space:
    """Quadrature points and sparse evaluation operators on a mesh.

    Gauss points are ordered cell-major (``4 * cell + g``). The operators
    ``val``, ``dx``, ``dy`` map nodal scalars (N,) to Gauss-point values;
    ``cdx``, ``cdy`` give cell-centre (cell-average) derivatives; ``wval``
    evaluates on 2-point Gauss rules of the wall edges.
    """

    def __init__(self, mesh: ChannelMesh):
        self.mesh = mesh
        N, C = mesh.n_nodes, mesh.n_cells
        cells = mesh.cells
        xc = mesh.nodes[cells]  # (C, 4, 2)
        vals = np.zeros((C, 4, 4))
        dxs = np.zeros((C, 4, 4))
        dys = np.zeros((C, 4, 4))
        w = np.zeros((C, 4))
        pts = np.zeros((C, 4, 2))
        for g, (xi, eta) in enumerate(_REF_GP):
            Nv = _shape(xi, eta)
            dN = _shape_grad(xi, eta)  # (4, 2)
            J = np.einsum("cai,aj->cij", xc, dN)  # dx_i / dxi_j
            det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
            Jinv = np.stack([np.stack([J[:, 1, 1], -J[:, 0, 1]], -1),
                             np.stack([-J[:, 1, 0], J[:, 0, 0]], -1)], 1) / det[:, None, None]
            dNx = np.einsum("aj,cji->cai", dN, Jinv)  # (C, 4, 2)
            vals[:, g, :] = Nv
            dxs[:, g, :] = dNx[:, :, 0]
            dys[:, g, :] = dNx[:, :, 1]
            w[:, g] = det
            pts[:, g, :] = Nv @ xc
        rows = np.repeat(np.arange(4 * C), 4)
        cols = np.repeat(cells, 4, axis=0).ravel()
        self.n_gp = 4 * C
        self.val = sp.csr_matrix((vals.ravel(), (rows, cols)), shape=(4 * C, N))
        self.dx = sp.csr_matrix((dxs.ravel(), (rows, cols)), shape=(4 * C, N))
        self.dy = sp.csr_matrix((dys.ravel(), (rows, cols)), shape=(4 * C, N))
        self.weights = w.ravel()
        self.points = pts.reshape(-1, 2)

        # cell-centre derivatives (equal to cell averages for bilinear fields)
        dN0 = _shape_grad(0.0, 0.0)
        J = np.einsum("cai,aj->cij", xc, dN0)
        det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
        Jinv = np.stack([np.stack([J[:, 1, 1], -J[:, 0, 1]], -1),
                         np.stack([-J[:, 1, 0], J[:, 0, 0]], -1)], 1) / det[:, None, None]
        dNx = np.einsum("aj,cji->cai", dN0, Jinv)
        crow = np.repeat(np.arange(C), 4)
        self.cdx = sp.csr_matrix((dNx[:, :, 0].ravel(), (crow, cells.ravel())), shape=(C, N))
        self.cdy = sp.csr_matrix((dNx[:, :, 1].ravel(), (crow, cells.ravel())), shape=(C, N))
        self.cell_area = 4.0 * det

        self.wall_edges = mesh.edges_with(WALL)
        self.wval, self.wweights, self.wpoints = self.edge_rule(self.wall_edges)

    def edge_rule(self, edge_ids):
        """2-point Gauss rule on the given boundary edges: (operator, weights, points)."""
        mesh = self.mesh
        edge_ids = np.asarray(edge_ids, dtype=int)
        s = np.array([0.5 - 0.5 * _G1, 0.5 + 0.5 * _G1])
        E = len(edge_ids)
        a = mesh.edges[edge_ids, 0]
        b = mesh.edges[edge_ids, 1]
        rows = np.repeat(np.arange(2 * E), 2)
        cols = np.column_stack([a, b, a, b]).reshape(-1)
        data = np.tile(np.array([1 - s[0], s[0], 1 - s[1], s[1]]), E)
        op = sp.csr_matrix((data, (rows, cols)), shape=(2 * E, mesh.n_nodes))
        wts = np.repeat(0.5 * mesh.lengths[edge_ids], 2)
        pts = op @ mesh.nodes
        return op, wts, pts

    # ----------------------------------------------------------- matrices

    @cached_property
    def mass_scalar(self):
        """Consistent scalar mass matrix (N, N)."""
        W = sp.diags(self.weights)
        return (self.val.T @ W @ self.val).tocsr()

    @cached_property
    def mass(self):
        """Vector mass matrix in interleaved layout (2N, 2N)."""
        return sp.kron(self.mass_scalar, sp.identity(2), format="csr")

    def vec_ops(self):
        """Interleaved-layout operators (vx, vy, dx vx, dy vx, dx vy, dy vy) at Gauss points."""
        ex = sp.csr_matrix(np.array([[1.0, 0.0]]))
        ey = sp.csr_matrix(np.array([[0.0, 1.0]]))
        k = lambda A, e: sp.kron(A, e, format="csr")
        return (k(self.val, ex), k(self.val, ey), k(self.dx, ex), k(self.dy, ex),
                k(self.dx, ey), k(self.dy, ey))

    @cached_property
    def strain_ops(self):
        """Interleaved operators giving (D11, D22, D12) at Gauss points."""
        _, _, ux, uy, vx, vy = self.vec_ops()
        return ux, vy, 0.5 * (uy + vx)

    @cached_property
    def cell_div_op(self):
        """Interleaved operator for the cell-centre divergence (C, 2N)."""
        ex = sp.csr_matrix(np.array([[1.0, 0.0]]))
        ey = sp.csr_matrix(np.array([[0.0, 1.0]]))
        return (sp.kron(self.cdx, ex) + sp.kron(self.cdy, ey)).tocsr()

    @cached_property
    def wall_ops(self):
        ex = sp.csr_matrix(np.array([[1.0, 0.0]]))
        ey = sp.csr_matrix(np.array([[0.0, 1.0]]))
        return sp.kron(self.wval, ex, format="csr"), sp.kron(self.wval, ey, format="csr")

    def strain_form(self, mu=None):
        """Matrix of ``int mu D(u) . D(v)``; ``mu`` per Gauss point (default 1)."""
        e11, e22, e12 = self.strain_ops
        w = self.weights if mu is None else self.weights * mu
        W = sp.diags(w)
        return (e11.T @ W @ e11 + e22.T @ W @ e22 + 2.0 * e12.T @ W @ e12).tocsr()

    def gradient_form(self):
        """Matrix of ``int grad u : grad v + u . v`` (vector H1 inner product)."""
        W = sp.diags(self.weights)
        K = (self.dx.T @ W @ self.dx + self.dy.T @ W @ self.dy).tocsr()
        return sp.kron(K + self.mass_scalar, sp.identity(2), format="csr")

    def div_form(self):
        """Matrix of ``sum_cells |cell| div_c(u) div_c(v)``."""
        B = self.cell_div_op
        return (B.T @ sp.diags(self.cell_area) @ B).tocsr()

    def wall_form(self, mu=None):
        """Matrix of ``int_wall mu u . v``."""
        wx, wy = self.wall_ops
        w = self.wweights if mu is None else self.wweights * mu
        W = sp.diags(w)
        return (wx.T @ W @ wx + wy.T @ W @ wy).tocsr()

    def convection_form(self, omega):
        """Matrix of ``int omega (-u_y phi_x + u_x phi_y)`` (skew, rotational form)."""
        ux, uy, *_ = self.vec_ops()
        W = sp.diags(self.weights * omega)
        return (-ux.T @ W @ uy + uy.T @ W @ ux).tocsr()

    # ----------------------------------------------------------- fields

    def gp_fields(self, V):
        """Values and gradients at Gauss points of nodal fields ``V`` (..., N, 2).

        Returns ``(vx, vy, dxvx, dyvx, dxvy, dyvy)``, each (..., G).
        """
        V = np.asarray(V, dtype=float)
        lead = V.shape[:-2]
        X = V[..., 0].reshape(-1, V.shape[-2]).T
        Y = V[..., 1].reshape(-1, V.shape[-2]).T
        out = []
        for op, F in ((self.val, X), (self.val, Y), (self.dx, X), (self.dy, X),
                      (self.dx, Y), (self.dy, Y)):
            out.append((op @ F).T.reshape(lead + (self.n_gp,)))
        out = [out[0], out[1], out[2], out[3], out[4], out[5]]
        return tuple(out)


def _space_of(space_or_mesh):
    return space_or_mesh if isinstance(space_or_mesh, Space) else Space(space_or_mesh)


def _check_field(field, space):
    field = np.asarray(field, dtype=float)
    N = space.mesh.n_nodes
    if field.size != 2 * N:
        raise ValueError(f"field has {field.size} entries, expected {2 * N}")
    return field.reshape(N, 2)


def sym_gradient(field, space) -> np.ndarray:
    """Symmetric gradient at Gauss points in triple storage, shape (G, 3)."""
    space = _space_of(space)
    v = _check_field(field, space)
    _, _, ux, uy, vx, vy = space.gp_fields(v)
    return np.stack([ux, vy, 0.5 * (uy + vx)], axis=-1)


def divergence(field, space) -> np.ndarray:
    """Pointwise divergence at Gauss points, shape (G,)."""
    space = _space_of(space)
    v = _check_field(field, space)
    _, _, ux, _, _, vy = space.gp_fields(v)
    return ux + vy


def curl_cross(field, space) -> np.ndarray:
    """``rot v x v = omega (-v_y, v_x)`` at Gauss points, shape (G, 2)."""
    space = _space_of(space)
    v = _check_field(field, space)
    a, b, _, uy, vx, _ = space.gp_fields(v)
    om = vx - uy
    return np.stack([-om * b, om * a], axis=-1)


def convective_derivative(field, space) -> np.ndarray:
    """``(v . grad) v`` at Gauss points, shape (G, 2)."""
    space = _space_of(space)
    v = _check_field(field, space)
    a, b, ux, uy, vx, vy = space.gp_fields(v)
    return np.stack([a * ux + b * uy, a * vx + b * vy], axis=-1)


@dataclass
class Trajectory:
    """Velocity trajectory, piecewise linear on a uniform time grid.

    Attributes
    ----------
    times : ndarray (M + 1,)
    values : ndarray (M + 1, N, 2)
    """

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.times.ndim != 1 or len(self.times) < 3:
            raise ValueError("need at least two time slabs")
        if self.values.shape[0] != len(self.times) or self.values.shape[-1] != 2:
            raise ValueError("values must have shape (M + 1, N, 2)")
        h = np.diff(self.times)
        if np.any(h <= 0) or np.ptp(h) > 1e-9 * h[0]:
            raise ValueError("time grid must be uniform and increasing")

    @property
    def M(self) -> int:
        return len(self.times) - 1

    @property
    def h(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def n_nodes(self) -> int:
        return self.values.shape[1]

    def copy(self) -> "Trajectory":
        return Trajectory(self.times.copy(), self.values.copy())

    def midpoints(self):
        return 0.5 * (self.values[1:] + self.values[:-1])

    def rates(self):
        return np.diff(self.values, axis=0) / self.h

    def at(self, t) -> np.ndarray:
        """Linear interpolation in time."""
        t = float(t)
        k = int(np.clip(np.searchsorted(self.times, t) - 1, 0, self.M - 1))
        s = (t - self.times[k]) / self.h
        return (1 - s) * self.values[k] + s * self.values[k + 1]

    @classmethod
    def constant(cls, times, field):
        field = np.asarray(field, dtype=float)
        return cls(times, np.repeat(field[None], len(times), axis=0))


def wide_material_derivative(traj: Trajectory, k: int, space, form: str = "rotational"):
    """Slab-``k`` material derivative at Gauss points, shape (G, 2).

    ``(v_{k+1} - v_k) / h`` plus the convective term evaluated at the slab
    midpoint; ``form="rotational"`` uses ``rot v x v``, ``form="standard"``
    uses ``(v . grad) v``.
    """
    if not (0 <= k < traj.M):
        raise IndexError(f"slab {k} outside 0..{traj.M - 1}")
    space = _space_of(space)
    rate = (traj.values[k + 1] - traj.values[k]) / traj.h
    mid = 0.5 * (traj.values[k + 1] + traj.values[k])
    rx, ry, *_ = space.gp_fields(rate)
    conv = curl_cross(mid, space) if form == "rotational" else convective_derivative(mid, space)
    return np.stack([rx, ry], axis=-1) + conv


@dataclass
class QuadratureRule:
    """Space-time rule: exact exponential slab masses and spatial Gauss weights."""

    eps: float
    times: np.ndarray
    slab_weights: np.ndarray
    midpoints: np.ndarray
    space_weights: np.ndarray = None


def exp_weight_quadrature(eps: float, times, space=None) -> QuadratureRule:
    """Slab weights ``eps (exp(-t_k/eps) - exp(-t_{k+1}/eps))`` and slab midpoints."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    times = np.asarray(times, dtype=float)
    t0, t1 = times[:-1], times[1:]
    # eps e^{-t0/eps} (1 - e^{-h/eps}) written to keep relative accuracy
    W = -eps * np.exp(-t0 / eps) * np.expm1(-(t1 - t0) / eps)
    sw = None if space is None else _space_of(space).weights
    return QuadratureRule(eps=float(eps), times=times, slab_weights=W,
                          midpoints=0.5 * (t0 + t1), space_weights=sw)
