import json
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from auxinsnake.errors import InvalidGeometryError, ParseError
from auxinsnake.tissue import (
    TissueGraph,
    build_hex_grid,
    build_line,
    build_ring,
    build_voronoi_disc,
    load_tissue,
    save_tissue,
    tissue_from_dict,
    tissue_to_dict,
)

from oracles import hex_adjacency_from_centres


def _assert_valid(g):
    for i, nb in enumerate(g.neighbors):
        assert i not in nb and len(nb) >= 1
        for j, l in zip(nb, g.contact[i]):
            k = g.neighbors[j].index(i)
            assert g.contact[j][k] == l > 0
    assert np.all(g.volumes > 0)
    src, dst, l = g.edges
    assert g.mean_contact == pytest.approx(np.mean(l), rel=1e-15)
    assert g.mean_volume == pytest.approx(np.mean(g.volumes), rel=1e-15)


# -- line -------------------------------------------------------------------

def test_line_150_effective_degrees():
    g = build_line(150, V=1, l=1, left="neumann", right="free")
    _assert_valid(g)
    d = g.effective_degree
    assert d[-1] == 1
    assert np.all(d[:-1] == 2)


def test_line_3_free_free():
    g = build_line(3, left="free", right="free")
    assert g.effective_degree.tolist() == [1, 2, 1]


def test_line_5_matches_path_graph():
    g = build_line(5, left="free", right="neumann")
    assert [sorted(nb) for nb in g.neighbors] == [[1], [0, 2], [1, 3], [2, 4], [3]]
    assert g.effective_degree.tolist() == [1, 2, 2, 2, 2]


@pytest.mark.parametrize("n", [0, 1, 2])
def test_line_too_short(n):
    with pytest.raises(InvalidGeometryError):
        build_line(n)


def test_ring_is_regular():
    g = build_ring(10)
    assert np.all(g.degree == 2) and g.is_regular


# -- hex --------------------------------------------------------------------

def test_hex_50_degrees():
    g = build_hex_grid(50, 50)
    _assert_valid(g)
    assert g.n == 2500
    deg = g.degree.reshape(50, 50)
    assert np.all(deg[1:-1, 1:-1] == 6)
    assert np.all(deg[0, 1:-1] == 4) and np.all(deg[-1, 1:-1] == 4)
    # zig-zag side edges: protruding cells have 3 neighbours, recessed ones 5
    assert set(deg[1:-1, 0].tolist()) == {3, 5}
    assert set(deg[1:-1, -1].tolist()) == {3, 5}
    assert np.allclose(g.volumes, 3 * math.sqrt(3) / 2)


def test_hex_corners_are_asymmetric():
    deg = build_hex_grid(14, 14).degree.reshape(14, 14)
    assert deg[0, 0] != deg[0, -1]
    assert deg[0, 0] == deg[-1, -1] and deg[0, -1] == deg[-1, 0]


@pytest.mark.parametrize("rows,cols", [(3, 3), (4, 5), (6, 3), (7, 8)])
def test_hex_adjacency_matches_geometry(rows, cols):
    g = build_hex_grid(rows, cols)
    assert [sorted(nb) for nb in g.neighbors] == hex_adjacency_from_centres(rows, cols)


def test_hex_3x3_degree_multiset():
    assert Counter(build_hex_grid(3, 3).degree.tolist()) == Counter({2: 2, 3: 3, 4: 2, 5: 1, 6: 1})


@settings(max_examples=25, deadline=None)
@given(st.integers(3, 20), st.integers(3, 20))
def test_hex_degree_census(rows, cols):
    g = build_hex_grid(rows, cols)
    c = Counter(g.degree.tolist())
    assert c == Counter({2: 2, 3: rows, 4: 2 * (cols - 2), 5: rows - 2, 6: (rows - 2) * (cols - 2)})
    assert int(g.degree.sum()) % 2 == 0


def test_hex_too_small():
    with pytest.raises(InvalidGeometryError):
        build_hex_grid(2, 5)


# -- voronoi ----------------------------------------------------------------

def test_voronoi_deterministic():
    assert build_voronoi_disc(40, seed=7) == build_voronoi_disc(40, seed=7)


def test_voronoi_small_instance_valid():
    g = build_voronoi_disc(12, seed=1)
    _assert_valid(g)
    assert g.n == 12


def test_voronoi_scaled_to_reference_means():
    g = build_voronoi_disc(742, seed=0, target_mean_contact=13.26)
    _assert_valid(g)
    assert g.mean_contact == pytest.approx(13.26, rel=1e-9)
    assert g.mean_volume == pytest.approx(294.0, rel=0.2)


def test_voronoi_default_wall_gives_reference_contact():
    g = build_voronoi_disc(200, seed=0)
    assert g.mean_contact == pytest.approx(13.26, rel=0.2)


def test_voronoi_boundary_cells_have_fewer_neighbours():
    g = build_voronoi_disc(200, seed=0)
    edge = np.array([lab == "edge" for lab in g.labels])
    assert g.degree[edge].mean() < g.degree[~edge].mean()


def test_voronoi_rejects_tiny():
    with pytest.raises(InvalidGeometryError):
        build_voronoi_disc(5)


# -- validation and I/O -----------------------------------------------------

def test_asymmetric_adjacency_rejected():
    with pytest.raises(InvalidGeometryError):
        TissueGraph(neighbors=[[1], [0, 2], [1], ], contact=[[1.0], [1.0, 1.0], [2.0]], volumes=[1, 1, 1], labels=["c"] * 3)


def test_disconnected_rejected():
    with pytest.raises(InvalidGeometryError, match="disconnected"):
        TissueGraph(neighbors=[[1], [0], [3], [2]], contact=[[1.0]] * 4, volumes=[1] * 4, labels=["c"] * 4)


def test_round_trip_hex(tmp_path):
    g = build_hex_grid(3, 3)
    save_tissue(g, tmp_path / "h.json")
    assert load_tissue(tmp_path / "h.json") == g


@pytest.mark.parametrize("builder", [lambda: build_line(7), lambda: build_voronoi_disc(25, seed=2)])
def test_round_trip_bit_exact(tmp_path, builder):
    g = builder()
    save_tissue(g, tmp_path / "g.json")
    h = load_tissue(tmp_path / "g.json")
    assert h == g
    assert np.array_equal(h.volumes, g.volumes)


def test_load_rejects_asymmetric_contact(tmp_path):
    d = tissue_to_dict(build_line(4))
    d["cells"][1]["contact"][1] = 2.5
    (tmp_path / "bad.json").write_text(json.dumps(d))
    with pytest.raises(ParseError, match=r"edge \(1,2\)"):
        load_tissue(tmp_path / "bad.json")


def test_load_rejects_nonpositive_volume():
    d = tissue_to_dict(build_line(4))
    d["cells"][2]["volume"] = 0.0
    with pytest.raises(ParseError, match="cell 2"):
        tissue_from_dict(d)


def test_hand_written_square():
    data = {
        "n": 4,
        "cells": [
            {"id": i, "volume": 1.0, "neighbors": nb, "contact": [1.0, 1.0], "label": "custom"}
            for i, nb in enumerate([[1, 3], [0, 2], [1, 3], [2, 0]])
        ],
    }
    assert tissue_from_dict(data).degree.tolist() == [2, 2, 2, 2]


def test_tissue_is_immutable():
    g = build_line(4)
    with pytest.raises(ValueError):
        g.volumes[0] = 2.0
