r"""Tagged rectangular channel meshes and divergence-free data extensions.

Boundary edges carry one of three kinds of tags: a Dirichlet inlet, a
friction wall (impermeable, Navier slip) or an outlet ``i`` with a prescribed
net flux :math:`F_i`. Nodes are numbered ``i + (nx + 1) j`` and cells are
counter-clockwise bilinear quadrilaterals.

The extension field is built from a nodal stream function :math:`\psi`,
:math:`v = (\partial_y\psi, -\partial_x\psi)`. Nodal velocities are chosen so
that the trapezoidal flux through every mesh edge equals the jump of
:math:`\psi` along it, which makes the net flux through every cell (and hence
the cell-averaged divergence of the bilinear interpolant) vanish exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "DIRICHLET",
    "WALL",
    "OUTFLOW0",
    "ChannelMesh",
    "ExtensionField",
    "FluxMismatchError",
    "build_rect_channel",
    "boundary_flux",
    "build_extension_field",
    "cell_divergence",
    "parabolic_profile",
    "tag_code",
    "tag_name",
    "write_vtk",
]

DIRICHLET = 1
WALL = 2
OUTFLOW0 = 3  # outlet i carries code OUTFLOW0 + i


class FluxMismatchError(ValueError):
    """Inlet and outlet fluxes do not balance."""


def tag_name(code: int) -> str:
    if code == DIRICHLET:
        return "dirichlet"
    if code == WALL:
        return "wall"
    return f"outflow{code - OUTFLOW0}"


def tag_code(tag) -> int:
    """Translate ``"dirichlet"``, ``"wall"``, ``"outflow<i>"`` or an int."""
    if isinstance(tag, (int, np.integer)):
        return int(tag)
    if tag == "dirichlet":
        return DIRICHLET
    if tag == "wall":
        return WALL
    if isinstance(tag, str) and tag.startswith("outflow"):
        return OUTFLOW0 + int(tag[len("outflow"):] or 0)
    raise KeyError(f"unknown boundary tag {tag!r}")


@dataclass(frozen=True)
class ChannelMesh:
    """Structured quadrilateral mesh of a rectangle with tagged boundary.

    Attributes
    ----------
    nodes : ndarray (N, 2)
    cells : ndarray (C, 4)
        Counter-clockwise node indices.
    edges : ndarray (E, 2)
        Boundary edges oriented counter-clockwise around the domain.
    edge_tags : ndarray (E,)
    normals : ndarray (E, 2)
        Outward unit normals.
    lengths : ndarray (E,)
    fluxes : tuple of float
        Target net outflow per outlet.
    """

    nx: int
    ny: int
    length: float
    height: float
    nodes: np.ndarray
    cells: np.ndarray
    edges: np.ndarray
    edge_tags: np.ndarray
    normals: np.ndarray
    lengths: np.ndarray
    fluxes: tuple = ()
    layout: str = "single"

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_cells(self) -> int:
        return self.cells.shape[0]

    @property
    def n_outlets(self) -> int:
        return int(np.sum(np.unique(self.edge_tags) >= OUTFLOW0))

    @property
    def area(self) -> float:
        return self.length * self.height

    def node_index(self, i: int, j: int) -> int:
        return i + (self.nx + 1) * j

    def edges_with(self, tag) -> np.ndarray:
        return np.nonzero(self.edge_tags == tag_code(tag))[0]

    def nodes_with(self, tag) -> np.ndarray:
        return np.unique(self.edges[self.edges_with(tag)].ravel())

    def retag(self, edge_tags, fluxes=None) -> "ChannelMesh":
        """Copy with new boundary tags; geometry arrays are shared."""
        edge_tags = np.asarray(edge_tags, dtype=int)
        if edge_tags.shape != self.edge_tags.shape:
            raise ValueError("tag array has wrong length")
        out = replace(self, edge_tags=edge_tags,
                      fluxes=tuple(self.fluxes if fluxes is None else fluxes))
        out.check_tags()
        return out

    def check_tags(self) -> None:
        """Check connectivity and separation of outlets and Korn admissibility."""
        tags = self.edge_tags
        if not np.all((tags == DIRICHLET) | (tags == WALL) | (tags >= OUTFLOW0)):
            raise ValueError("every boundary edge needs a Dirichlet, wall or outflow tag")
        if not np.any((tags == DIRICHLET) | (tags == WALL)):
            raise ValueError("Dirichlet and wall parts both empty")
        outlets = sorted(set(int(t) for t in tags if t >= OUTFLOW0))
        if outlets != list(range(OUTFLOW0, OUTFLOW0 + len(outlets))):
            raise ValueError("outlets must be numbered consecutively from 0")
        closures = []
        E = len(tags)
        for code in outlets:
            idx = np.nonzero(tags == code)[0]
            # edges are in cyclic order; count runs of consecutive indices
            is_member = tags == code
            starts = np.sum(is_member & ~np.roll(is_member, 1))
            if len(idx) < E and starts != 1:
                raise ValueError(f"{tag_name(code)} is not edge-connected")
            closures.append(set(self.edges[idx].ravel().tolist()))
        for a in range(len(closures)):
            for b in range(a + 1, len(closures)):
                if closures[a] & closures[b]:
                    raise ValueError("closures of distinct outlets touch")
        if len(self.fluxes) not in (0, len(outlets)):
            raise ValueError("one flux target per outlet expected")

    # ----- node-level constraint data

    def dirichlet_nodes(self) -> np.ndarray:
        return self.nodes_with(DIRICHLET)

    def wall_normal_constraints(self) -> list:
        """(node, component) pairs fixed to zero by impermeability.

        Only axis-aligned wall normals occur on rectangles, so the normal
        component is a Cartesian component.
        """
        dn = set(self.dirichlet_nodes().tolist())
        out = set()
        for e in self.edges_with(WALL):
            n = self.normals[e]
            comp = int(np.argmax(np.abs(n)))
            if abs(abs(n[comp]) - 1.0) > 1e-12:
                raise ValueError("wall normals must be axis aligned")
            for node in self.edges[e]:
                if int(node) not in dn:
                    out.add((int(node), comp))
        return sorted(out)

    def outlet_flux_weights(self, i: int) -> np.ndarray:
        """Coefficients ``c`` (N, 2) with ``sum(c * v)`` = trapezoid flux of outlet ``i``."""
        c = np.zeros((self.n_nodes, 2))
        for e in self.edges_with(OUTFLOW0 + i):
            a, b = self.edges[e]
            c[a] += 0.5 * self.lengths[e] * self.normals[e]
            c[b] += 0.5 * self.lengths[e] * self.normals[e]
        return c


def build_rect_channel(nx: int, ny: int, length: float = 2.0, height: float = 1.0,
                       layout: str = "single", fluxes: Sequence[float] = ()) -> ChannelMesh:
    """Rectangular channel: inlet on the left, walls top and bottom, outlet(s) right.

    Parameters
    ----------
    nx, ny : int
        Cells along and across the channel, at least 2 each.
    length, height : float
    layout : {"single", "two_outlets"}
        ``"two_outlets"`` splits the right edge into a lower outlet, a wall
        segment and an upper outlet.
    fluxes : sequence of float
        Target outflow per outlet (may be filled in later).
    """
    if nx < 2 or ny < 2:
        raise ValueError("need nx, ny >= 2")
    if not (length > 0 and height > 0):
        raise ValueError("degenerate channel dimensions")
    if layout not in ("single", "two_outlets"):
        raise ValueError(f"unknown layout {layout!r}")
    if layout == "two_outlets" and ny < 3:
        raise ValueError("two outlets need ny >= 3")
    xs = np.linspace(0.0, length, nx + 1)
    ys = np.linspace(0.0, height, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    nodes = np.column_stack([X.ravel(), Y.ravel()])

    def nid(i, j):
        return i + (nx + 1) * j

    ii, jj = np.meshgrid(np.arange(nx), np.arange(ny))
    ii, jj = ii.ravel(), jj.ravel()
    cells = np.column_stack([nid(ii, jj), nid(ii + 1, jj), nid(ii + 1, jj + 1), nid(ii, jj + 1)])

    edges, tags, normals = [], [], []
    n_out = max(1, ny // 3)
    # bottom, left to right
    for i in range(nx):
        edges.append((nid(i, 0), nid(i + 1, 0)))
        tags.append(WALL)
        normals.append((0.0, -1.0))
    # right, bottom to top
    for j in range(ny):
        edges.append((nid(nx, j), nid(nx, j + 1)))
        if layout == "single":
            tags.append(OUTFLOW0)
        elif j < n_out:
            tags.append(OUTFLOW0)
        elif j >= ny - n_out:
            tags.append(OUTFLOW0 + 1)
        else:
            tags.append(WALL)
        normals.append((1.0, 0.0))
    # top, right to left
    for i in range(nx, 0, -1):
        edges.append((nid(i, ny), nid(i - 1, ny)))
        tags.append(WALL)
        normals.append((0.0, 1.0))
    # left, top to bottom
    for j in range(ny, 0, -1):
        edges.append((nid(0, j), nid(0, j - 1)))
        tags.append(DIRICHLET)
        normals.append((-1.0, 0.0))
    edges = np.asarray(edges, dtype=int)
    lengths = np.linalg.norm(nodes[edges[:, 1]] - nodes[edges[:, 0]], axis=1)
    mesh = ChannelMesh(nx=nx, ny=ny, length=float(length), height=float(height), nodes=nodes,
                       cells=cells, edges=edges, edge_tags=np.asarray(tags, dtype=int),
                       normals=np.asarray(normals), lengths=lengths, fluxes=tuple(fluxes),
                       layout=layout)
    mesh.check_tags()
    return mesh


def boundary_flux(mesh: ChannelMesh, field, tag="all") -> float:
    """Trapezoidal flux of a nodal field through the edges carrying ``tag``.

    ``tag="all"`` sums over the whole boundary.
    """
    v = np.asarray(field, dtype=float).reshape(mesh.n_nodes, 2)
    if isinstance(tag, str) and tag == "all":
        idx = np.arange(len(mesh.edge_tags))
    else:
        code = tag_code(tag)
        if code not in set(mesh.edge_tags.tolist()):
            raise KeyError(f"no boundary edges tagged {tag!r}")
        idx = mesh.edges_with(code)
    a, b = mesh.edges[idx, 0], mesh.edges[idx, 1]
    vn = np.sum(0.5 * (v[a] + v[b]) * mesh.normals[idx], axis=1)
    return float(np.sum(vn * mesh.lengths[idx]))


def cell_divergence(mesh: ChannelMesh, field) -> np.ndarray:
    """Cell-averaged divergence (net trapezoidal outflow divided by area)."""
    v = np.asarray(field, dtype=float).reshape(mesh.n_nodes, 2)
    c = mesh.cells
    hx = mesh.nodes[c[:, 1], 0] - mesh.nodes[c[:, 0], 0]
    hy = mesh.nodes[c[:, 3], 1] - mesh.nodes[c[:, 0], 1]
    flux = (0.5 * hy * (v[c[:, 1], 0] + v[c[:, 2], 0] - v[c[:, 0], 0] - v[c[:, 3], 0])
            + 0.5 * hx * (v[c[:, 2], 1] + v[c[:, 3], 1] - v[c[:, 0], 1] - v[c[:, 1], 1]))
    return flux / (hx * hy)


# ------------------------------------------------------------ extension

def parabolic_profile(peak: float, height: float) -> Callable:
    """Inlet normal velocity ``4 peak y (H - y) / H^2``."""
    return lambda y: 4.0 * peak * np.asarray(y) * (height - np.asarray(y)) / height ** 2


@dataclass
class ExtensionField:
    """Steady admissible extension of the boundary and initial data.

    Attributes
    ----------
    velocity : ndarray (N, 2)
    psi : ndarray (N,)
        Nodal stream function used in the construction.
    inlet_flux : float
    fluxes : tuple of float
    """

    velocity: np.ndarray
    psi: np.ndarray
    inlet_flux: float
    fluxes: tuple
    info: dict = field(default_factory=dict)

    def at(self, t) -> np.ndarray:
        """Extension at time ``t`` (time independent)."""
        return self.velocity


_GL_X, _GL_W = np.polynomial.legendre.leggauss(12)


def _integrate(fun, a, b):
    x = 0.5 * (b - a) * _GL_X + 0.5 * (a + b)
    return 0.5 * (b - a) * float(np.sum(_GL_W * np.asarray(fun(x), dtype=float)))


def _ramp(s):
    return 3.0 * s ** 2 - 2.0 * s ** 3


def _ramp_slope(s):
    return 6.0 * s * (1.0 - s)


def _fit_line(h, jumps, guess, fixed):
    """Nodal values u with h_k (u_k + u_{k+1}) / 2 = jumps_k closest to ``guess``.

    ``fixed`` maps node positions to prescribed values.
    """
    n = len(guess)
    A = np.zeros((n - 1, n))
    k = np.arange(n - 1)
    A[k, k] = 0.5 * h
    A[k, k + 1] = 0.5 * h
    free = np.array([i not in fixed for i in range(n)])
    u = np.zeros(n)
    for i, val in fixed.items():
        u[i] = val
    rhs = jumps - A[:, ~free] @ u[~free]
    Af = A[:, free]
    gf = guess[free]
    if Af.shape[1] == 0:
        if np.max(np.abs(rhs), initial=0.0) > 1e-12 * (1.0 + np.max(np.abs(jumps))):
            raise FluxMismatchError("net boundary flux mismatch: constrained line inconsistent")
        return u
    # minimize |uf - g|^2 subject to Af uf = rhs; solve via least-norm correction
    sol, *_ = np.linalg.lstsq(Af, rhs - Af @ gf, rcond=None)
    uf = gf + sol
    if np.max(np.abs(Af @ uf - rhs), initial=0.0) > 1e-10 * (1.0 + np.max(np.abs(jumps))):
        raise FluxMismatchError("net boundary flux mismatch: edge fluxes cannot be matched")
    u[free] = uf
    return u


def build_extension_field(mesh: ChannelMesh, inlet_profile: Optional[Callable] = None,
                          fluxes: Optional[Sequence[float]] = None,
                          initial_stream: Optional[Callable] = None,
                          inlet_tangential: Optional[Callable] = None) -> ExtensionField:
    """Divergence-free steady field carrying the inlet profile and outlet fluxes.

    Parameters
    ----------
    mesh : ChannelMesh
        Rectangular channel from :func:`build_rect_channel`.
    inlet_profile : callable, optional
        Inflow normal velocity ``u(y)`` on the Dirichlet edge (zero if None).
        The exact flux through each inlet edge is preserved.
    fluxes : sequence of float, optional
        Outflow per outlet; defaults to ``mesh.fluxes`` or, for one outlet,
        the inlet flux.
    initial_stream : callable, optional
        Stream-function perturbation ``psi1(x, y)`` added to the steady data;
        it must vanish (with its gradient) near the boundary. Used to build
        an admissible initial state with a decaying transient.
    inlet_tangential : callable, optional
        Tangential inlet velocity ``v_y(y)`` imposed nodewise.

    Returns
    -------
    ExtensionField

    Raises
    ------
    FluxMismatchError
        If the inlet flux and the outlet fluxes do not balance.
    """
    nx, ny, L, H = mesh.nx, mesh.ny, mesh.length, mesh.height
    xs = mesh.nodes[: nx + 1, 0]
    ys = mesh.nodes[:: nx + 1, 1]
    prof = inlet_profile if inlet_profile is not None else (lambda y: np.zeros_like(np.asarray(y)))
    tang = inlet_tangential if inlet_tangential is not None else (lambda y: np.zeros_like(np.asarray(y)))

    # stream function on the inlet: psi(0, y) = int_0^y u
    edge_q = np.array([_integrate(prof, ys[j], ys[j + 1]) for j in range(ny)])
    psi_in = np.concatenate([[0.0], np.cumsum(edge_q)])
    q_in = float(psi_in[-1])

    n_out = mesh.n_outlets
    if fluxes is None:
        fluxes = mesh.fluxes if len(mesh.fluxes) else ((q_in,) if n_out == 1 else None)
        if fluxes is None:
            raise FluxMismatchError("net boundary flux mismatch: outlet fluxes missing")
    fluxes = tuple(float(f) for f in fluxes)
    if len(fluxes) != n_out:
        raise ValueError(f"expected {n_out} outlet fluxes, got {len(fluxes)}")
    scale = max(abs(q_in), max((abs(f) for f in fluxes), default=0.0), 1.0)
    if abs(sum(fluxes) - q_in) > 1e-10 * scale:
        raise FluxMismatchError(
            f"net boundary flux mismatch: inflow {q_in!r} vs outflow {sum(fluxes)!r}")

    # right edge: psi ramps by F_i across outlet i and is constant along walls
    right_tags = np.array([mesh.edge_tags[nx + j] for j in range(ny)])
    psi_out = np.zeros(ny + 1)
    slope_out = np.zeros(ny + 1)
    level = 0.0
    j = 0
    while j < ny:
        code = right_tags[j]
        k = j
        while k < ny and right_tags[k] == code:
            k += 1
        if code >= OUTFLOW0:
            F = fluxes[code - OUTFLOW0]
            ya, yb = ys[j], ys[k]
            s = (ys[j:k + 1] - ya) / (yb - ya)
            psi_out[j:k + 1] = level + F * _ramp(s)
            slope_out[j:k + 1] = F * _ramp_slope(s) / (yb - ya)
            level += F
        else:
            psi_out[j:k + 1] = level
        j = k
    # assemble by linear blending in x (walls stay streamlines)
    xi = (xs / L)[None, :]
    psi = (1.0 - xi) * psi_in[:, None] + xi * psi_out[:, None]
    X = mesh.nodes[:, 0].reshape(ny + 1, nx + 1)
    Y = mesh.nodes[:, 1].reshape(ny + 1, nx + 1)
    prof_nodes = np.asarray(prof(ys), dtype=float) * np.ones(ny + 1)
    dpsi_dy = (1.0 - xi) * prof_nodes[:, None] + xi * slope_out[:, None]
    dpsi_dx = (psi_out - psi_in)[:, None] / L * np.ones_like(xi)
    if initial_stream is not None:
        eps_fd = 1e-6 * max(L, H)
        p1 = np.asarray(initial_stream(X, Y), dtype=float)
        psi = psi + p1
        dpsi_dy = dpsi_dy + (np.asarray(initial_stream(X, Y + eps_fd)) -
                             np.asarray(initial_stream(X, Y - eps_fd))) / (2 * eps_fd)
        dpsi_dx = dpsi_dx + (np.asarray(initial_stream(X + eps_fd, Y)) -
                             np.asarray(initial_stream(X - eps_fd, Y))) / (2 * eps_fd)

    # constrained nodal components
    fixed = {}
    for node in mesh.dirichlet_nodes():
        i, jn = int(node) % (nx + 1), int(node) // (nx + 1)
        fixed[(int(node), 1)] = float(np.asarray(tang(ys[jn])))
    for node, comp in mesh.wall_normal_constraints():
        fixed[(node, comp)] = 0.0

    vel = np.zeros((mesh.n_nodes, 2))
    hy = np.diff(ys)
    hx = np.diff(xs)
    for i in range(nx + 1):
        col = np.array([mesh.node_index(i, jn) for jn in range(ny + 1)])
        fx = {jn: fixed[(int(n), 0)] for jn, n in enumerate(col) if (int(n), 0) in fixed}
        vel[col, 0] = _fit_line(hy, np.diff(psi[:, i]), dpsi_dy[:, i], fx)
    for jn in range(ny + 1):
        row = np.array([mesh.node_index(i, jn) for i in range(nx + 1)])
        fy = {i: fixed[(int(n), 1)] for i, n in enumerate(row) if (int(n), 1) in fixed}
        vel[row, 1] = _fit_line(hx, -np.diff(psi[jn, :]), -dpsi_dx[jn, :], fy)

    info = {"inlet_edge_flux": edge_q, "psi_inlet": psi_in, "psi_outlet": psi_out}
    return ExtensionField(velocity=vel, psi=psi.ravel(), inlet_flux=q_in, fluxes=fluxes, info=info)


# ------------------------------------------------------------ export

def write_vtk(mesh: ChannelMesh, path, point_data: Optional[dict] = None, title: str = "channel"):
    """Legacy ASCII VTK unstructured grid with quads and tagged boundary lines.

    Cell data ``boundary_tag`` is 0 on quadrilaterals and the tag code on
    boundary line cells. ``point_data`` maps names to (N,) or (N, 2) arrays.
    """
    N, C, E = mesh.n_nodes, mesh.n_cells, len(mesh.edges)
    with open(path, "w") as f:
        f.write("# vtk DataFile Version 3.0\n")
        f.write(f"{title}\nASCII\nDATASET UNSTRUCTURED_GRID\n")
        f.write(f"POINTS {N} double\n")
        for x, y in mesh.nodes:
            f.write(f"{x:.17g} {y:.17g} 0\n")
        f.write(f"CELLS {C + E} {5 * C + 3 * E}\n")
        for c in mesh.cells:
            f.write("4 " + " ".join(str(int(k)) for k in c) + "\n")
        for a, b in mesh.edges:
            f.write(f"2 {int(a)} {int(b)}\n")
        f.write(f"CELL_TYPES {C + E}\n")
        f.write("9\n" * C + "3\n" * E)
        f.write(f"CELL_DATA {C + E}\nSCALARS boundary_tag int 1\nLOOKUP_TABLE default\n")
        f.write("0\n" * C)
        for t in mesh.edge_tags:
            f.write(f"{int(t)}\n")
        if point_data:
            f.write(f"POINT_DATA {N}\n")
            for name, arr in point_data.items():
                arr = np.asarray(arr, dtype=float)
                if arr.ndim == 2:
                    f.write(f"VECTORS {name} double\n")
                    for vx, vy in arr.reshape(N, 2):
                        f.write(f"{vx:.17g} {vy:.17g} 0\n")
                else:
                    f.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                    for s in arr.reshape(N):
                        f.write(f"{s:.17g}\n")
