import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pcfsmooth.errors import InvalidFractal
from pcfsmooth.fractal import (
    build_vertex_table,
    cell_of_word,
    fractal_from_dict,
    index_word,
    interval,
    load_fractal,
    m_scale_neighborhood,
    measure_of_word,
    sierpinski_gasket,
    word_index,
)

from oracles import sg_points

# frozen from sg_points(2)
SG_V2 = 15


def test_interval_level1():
    t = build_vertex_table(interval(), 1)
    assert t.n == 3
    assert np.allclose(sorted(t.points[:, 0]), [0, 0.5, 1])
    mid = t.vertex_at([0.5])
    assert len(t.addresses(mid)) == 2
    assert len(t.addresses(0)) == 1


@pytest.mark.parametrize("fr", [interval(), sierpinski_gasket()])
def test_level0_has_no_junctions(fr):
    t = build_vertex_table(fr, 0)
    assert t.n == fr.n0 and t.junction_ids.size == 0


def test_sg_level2_counts():
    assert len(sg_points(2)) == SG_V2
    t = build_vertex_table(sierpinski_gasket(), 2)
    assert t.n == SG_V2
    assert t.n - t.fractal.n0 - 3 == 9  # new junctions at level 2
    assert t.junction_ids.size == 12


def test_sg_table_matches_brute_force():
    t = build_vertex_table(sierpinski_gasket(), 3)
    got = {(round(x, 9), round(y, 9)) for x, y in t.points}
    assert got == sg_points(3)


def test_cell_of_word_interval():
    c = cell_of_word(interval(), (0, 0))
    assert c.measure == 0.25 and c.resistance == 0.25
    assert np.allclose(c.map(np.array([[0.0], [1.0]])).ravel(), [0, 0.25])


def test_cell_of_word_single_letter():
    fr = sierpinski_gasket()
    c = cell_of_word(fr, (2,))
    assert c.measure == fr.measure[2] and c.resistance == fr.resistance[2]


def test_cell_of_word_sg():
    c = cell_of_word(sierpinski_gasket(), (1, 2))
    assert c.measure == pytest.approx(1 / 9, abs=1e-15)
    assert c.resistance == pytest.approx(9 / 25, abs=1e-12)


def test_m_scale_neighborhoods():
    t = build_vertex_table(interval(), 3)
    assert m_scale_neighborhood(t, t.vertex_at([0.5]), 1) == [(0,), (1,)]
    assert m_scale_neighborhood(t, 0, 2) == [(0, 0)]
    s = build_vertex_table(sierpinski_gasket(), 3)
    mid = s.vertex_at([0.5, 0.0])
    assert sorted(m_scale_neighborhood(s, mid, 1)) == [(0,), (1,)]


def test_nesting_and_junction_consistency():
    fr = sierpinski_gasket()
    t3, t4 = build_vertex_table(fr, 3), build_vertex_table(fr, 4)
    assert np.allclose(t4.points[: t3.n], t3.points)
    for vid in range(t4.n):
        pts = [cell_of_word(fr, w).map(fr.boundary_points[i][None, :])[0] for w, i in t4.addresses(vid)]
        assert np.allclose(pts, t4.points[vid], atol=1e-9)
        assert (len(pts) >= 2) == (vid >= fr.n0)


@given(st.integers(0, 6))
def test_measure_additivity(m):
    fr = sierpinski_gasket()
    total = sum(measure_of_word(fr, index_word(i, m, 3)) for i in range(3**m))
    assert total == pytest.approx(1.0, abs=1e-12)


@given(st.lists(st.integers(0, 2), max_size=8))
def test_word_index_round_trip(w):
    assert index_word(word_index(w, 3), len(w), 3) == tuple(w)


@given(st.lists(st.integers(0, 1), min_size=1, max_size=6))
@settings(max_examples=30)
def test_cell_block_contains_cell_vertices(w):
    t = build_vertex_table(interval(), 7)
    block = t.cells[7][t.cell_block(w)]
    c = cell_of_word(interval(), w)
    lo, hi = c.map(np.array([[0.0], [1.0]])).ravel()
    x = t.points[block.ravel(), 0]
    assert x.min() == pytest.approx(lo) and x.max() == pytest.approx(hi)


def test_invalid_specs():
    d = interval().to_dict()
    d["measure"] = [0.5, 0.6]
    with pytest.raises(InvalidFractal):
        fractal_from_dict(d)
    d = interval().to_dict()
    d["resistance"] = [1.2, 0.5]
    with pytest.raises(InvalidFractal):
        fractal_from_dict(d)
    d = interval().to_dict()
    d["boundary"] = [0]
    with pytest.raises(InvalidFractal):
        fractal_from_dict(d)
    with pytest.raises(InvalidFractal):
        load_fractal("no-such-fractal")


def test_spec_round_trip(tmp_path):
    import json

    p = tmp_path / "sg.json"
    p.write_text(json.dumps(sierpinski_gasket().to_dict()))
    fr = load_fractal(p)
    assert fr.N == 3 and np.allclose(fr.resistance, 0.6)
