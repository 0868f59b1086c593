import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wideflow.geometry import (DIRICHLET, OUTFLOW0, WALL, FluxMismatchError, boundary_flux,
                               build_extension_field, build_rect_channel, cell_divergence,
                               parabolic_profile, write_vtk)


def test_counts_4x2():
    m = build_rect_channel(4, 2, 1.0, 1.0)
    assert m.n_cells == 8
    assert m.n_nodes == 15
    assert len(m.edges_with("dirichlet")) == 2
    assert len(m.edges_with("wall")) == 8
    assert len(m.edges_with("outflow0")) == 2
    m.check_tags()


@given(st.integers(2, 12), st.integers(3, 9), st.sampled_from(["single", "two_outlets"]))
def test_closed_polygon(nx, ny, layout):
    m = build_rect_channel(nx, ny, 2.0, 1.0, layout=layout)
    s = np.sum(m.normals * m.lengths[:, None], axis=0)
    assert np.max(np.abs(s)) <= 1e-13
    # oriented edges chain head to tail
    assert np.all(m.edges[:-1, 1] == m.edges[1:, 0])
    assert m.edges[-1, 1] == m.edges[0, 0]


def test_two_outlet_closures_disjoint():
    m = build_rect_channel(8, 6, layout="two_outlets")
    a = set(m.nodes_with("outflow0").tolist())
    b = set(m.nodes_with("outflow1").tolist())
    assert a and b and not (a & b)
    assert m.n_outlets == 2
    # a wall edge separates them on the right side
    right = m.edge_tags[m.nx:m.nx + m.ny]
    assert WALL in right.tolist()


def test_flux_examples():
    m = build_rect_channel(4, 4, 1.0, 1.0)
    v = np.tile([1.0, 0.0], (m.n_nodes, 1))
    assert boundary_flux(m, v, "outflow0") == pytest.approx(1.0, abs=1e-15)
    # top wall only: edges with normal (0, 1)
    top = np.nonzero(m.normals[:, 1] > 0.5)[0]
    vn = np.sum(0.5 * (v[m.edges[top, 0]] + v[m.edges[top, 1]]) * m.normals[top], axis=1)
    assert float(np.sum(vn * m.lengths[top])) == 0.0
    assert boundary_flux(m, v, "wall") == 0.0


def test_unknown_tag_flux_raises():
    m = build_rect_channel(4, 4)
    with pytest.raises(KeyError):
        boundary_flux(m, np.zeros((m.n_nodes, 2)), "outflow3")


def test_discrete_divergence_theorem():
    # oracle: a field with zero flux through every cell has zero net boundary flux
    m = build_rect_channel(6, 5, 2.0, 1.0)
    ext = build_extension_field(m, parabolic_profile(1.0, 1.0),
                                initial_stream=lambda x, y: 0.1 * (np.sin(np.pi * x / 2) *
                                                                   np.sin(np.pi * y)) ** 4)
    assert np.max(np.abs(cell_divergence(m, ext.velocity))) <= 1e-12
    assert abs(boundary_flux(m, ext.velocity)) <= 1e-12


def test_zero_extension():
    m = build_rect_channel(6, 4)
    ext = build_extension_field(m, None, fluxes=(0.0,))
    assert np.all(ext.velocity == 0)


def test_parabolic_inlet_flux():
    m = build_rect_channel(8, 4)
    ext = build_extension_field(m, parabolic_profile(1.0, 1.0))
    assert ext.inlet_flux == pytest.approx(2.0 / 3.0, abs=1e-14)
    assert boundary_flux(m, ext.velocity, "outflow0") == pytest.approx(2.0 / 3.0, abs=1e-12)
    assert -boundary_flux(m, ext.velocity, "dirichlet") == pytest.approx(2.0 / 3.0, abs=1e-12)


@given(st.floats(0.05, 0.6))
def test_two_outlet_split(f0):
    m = build_rect_channel(8, 6, layout="two_outlets")
    q = 2.0 / 3.0
    ext = build_extension_field(m, parabolic_profile(1.0, 1.0), fluxes=(f0, q - f0))
    assert boundary_flux(m, ext.velocity, "outflow0") == pytest.approx(f0, abs=1e-12)
    assert boundary_flux(m, ext.velocity, "outflow1") == pytest.approx(q - f0, abs=1e-12)
    assert np.max(np.abs(cell_divergence(m, ext.velocity))) <= 1e-11


def test_wall_normal_component_zero():
    m = build_rect_channel(8, 6, layout="two_outlets")
    ext = build_extension_field(m, parabolic_profile(1.0, 1.0), fluxes=(0.3, 2 / 3 - 0.3))
    for node, comp in m.wall_normal_constraints():
        assert ext.velocity[node, comp] == 0.0


def test_flux_mismatch_raises():
    m = build_rect_channel(8, 6, layout="two_outlets")
    with pytest.raises(FluxMismatchError, match="net boundary flux mismatch"):
        build_extension_field(m, parabolic_profile(1.0, 1.0), fluxes=(0.3, 0.3))


def test_vtk_export(tmp_path):
    m = build_rect_channel(3, 2)
    p = tmp_path / "m.vtk"
    write_vtk(m, p, point_data={"velocity": np.zeros((m.n_nodes, 2))})
    text = p.read_text()
    assert f"POINTS {m.n_nodes} double" in text
    assert f"CELLS {m.n_cells + len(m.edges)}" in text
    assert "boundary_tag" in text and "velocity" in text


def test_tag_codes():
    m = build_rect_channel(4, 3)
    assert set(m.edge_tags.tolist()) == {DIRICHLET, WALL, OUTFLOW0}
