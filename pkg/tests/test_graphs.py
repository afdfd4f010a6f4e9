"""Structure matrices, constraints and the adjacency file format."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jointcast.graphs import (
    build_area_graph,
    component_constraints,
    constraints_for,
    icar_structure,
    interaction_constraints,
    interaction_structure,
    read_adjacency,
    rw1_structure,
    write_adjacency,
)
from jointcast.synthetic import grid_graph

PATH3 = build_area_graph(3, [(0, 1), (1, 2)])


def numeric_rank(dense, rel_tol=1e-8):
    vals = np.linalg.eigvalsh(dense)
    top = max(vals.max(), 1.0)
    return int((vals > rel_tol * top).sum())


def test_build_area_graph_dedup_and_symmetry():
    g = build_area_graph(3, [(0, 1), (1, 0), (1, 2)])
    assert g.edges == frozenset({(0, 1), (1, 2)})
    adj = g.adjacency().toarray()
    assert np.array_equal(adj, adj.T)


def test_build_area_graph_rejects_bad_edges():
    with pytest.raises(ValueError):
        build_area_graph(3, [(0, 0)])
    with pytest.raises(ValueError):
        build_area_graph(3, [(0, 3)])
    with pytest.raises(ValueError):
        build_area_graph(2, [(-1, 0)])


def test_icar_path_graph():
    r = icar_structure(PATH3)
    assert np.array_equal(
        r.entries.toarray(), [[1, -1, 0], [-1, 2, -1], [0, -1, 1]]
    )
    assert r.null_dim == 1


def test_icar_isolated_areas():
    r = icar_structure(build_area_graph(2, []))
    assert np.array_equal(r.entries.toarray(), np.zeros((2, 2)))
    assert r.null_dim == 2


def test_icar_cycle_rank():
    cycle = build_area_graph(4, [(0, 1), (1, 2), (2, 3), (3, 0)])
    r = icar_structure(cycle)
    assert numeric_rank(r.entries.toarray()) == 3
    assert r.dim - r.null_dim == 3


def test_rw1_small_cases():
    assert np.array_equal(
        rw1_structure(3).entries.toarray(), [[1, -1, 0], [-1, 2, -1], [0, -1, 1]]
    )
    assert np.array_equal(rw1_structure(2).entries.toarray(), [[1, -1], [-1, 1]])
    with pytest.raises(ValueError):
        rw1_structure(1)


def test_rw1_rank():
    r = rw1_structure(5)
    assert numeric_rank(r.entries.toarray()) == 4
    assert r.null_dim == 1


def test_interaction_type_i_is_identity():
    q = interaction_structure("I", rw1_structure(2), icar_structure(PATH3))
    assert np.array_equal(q.entries.toarray(), np.eye(6))
    assert q.null_dim == 0


def test_interaction_type_ii_matches_kron():
    two = build_area_graph(2, [(0, 1)])
    q = interaction_structure("II", rw1_structure(3), icar_structure(two))
    expected = np.kron(rw1_structure(3).entries.toarray(), np.eye(2))
    assert np.allclose(q.entries.toarray(), expected)
    assert q.null_dim == 2


def test_interaction_type_iv_rank():
    q = interaction_structure("IV", rw1_structure(3), icar_structure(PATH3))
    assert numeric_rank(q.entries.toarray()) == 4  # (3-1) * (3-1)
    assert q.dim - q.null_dim == 4


def test_interaction_kron_ordering():
    # entries must satisfy Q[(t, i), (t', i')] = temporal[t, t'] * spatial[i, i']
    rg = rw1_structure(3)
    rk = icar_structure(PATH3)
    q = interaction_structure("IV", rg, rk).entries.toarray()
    tg = rg.entries.toarray()
    tk = rk.entries.toarray()
    a = 3
    for t in range(3):
        for i in range(a):
            for t2 in range(3):
                for i2 in range(a):
                    assert q[t * a + i, t2 * a + i2] == pytest.approx(tg[t, t2] * tk[i, i2])


def test_interaction_rejects_unknown_kind():
    with pytest.raises(ValueError):
        interaction_structure("V", rw1_structure(2), icar_structure(PATH3))


def test_constraint_row_counts():
    assert constraints_for("I", 2, 2).matrix.shape == (1, 4)
    assert np.array_equal(constraints_for("I", 2, 2).matrix, np.ones((1, 4)))
    assert constraints_for("II", 4, 3).matrix.shape == (4, 12)
    assert constraints_for("III", 3, 2).matrix.shape == (2, 6)
    assert constraints_for("IV", 3, 3).matrix.shape == (5, 9)


def test_type_iii_rows_sum_one_year():
    rows = constraints_for("III", 3, 2).matrix
    assert np.array_equal(rows[0], [1, 1, 1, 0, 0, 0])
    assert np.array_equal(rows[1], [0, 0, 0, 1, 1, 1])


def test_type_iv_constraint_rank():
    mat = constraints_for("IV", 3, 3).matrix
    assert np.linalg.matrix_rank(mat) == 5


@pytest.mark.parametrize("kind", ["I", "II", "III", "IV"])
def test_constraints_annihilate_null_space(kind):
    rg = rw1_structure(3)
    rk = icar_structure(PATH3)
    q = interaction_structure(kind, rg, rk).entries.toarray()
    cons = constraints_for(kind, 3, 3).matrix
    vals, vecs = np.linalg.eigh(q)
    null_vecs = vecs[:, vals < 1e-10]
    if null_vecs.shape[1] == 0:
        return
    # projecting the null space onto the constraint rows must lose nothing:
    # every null vector is a combination of constraint rows
    proj = cons.T @ np.linalg.lstsq(cons.T, null_vecs, rcond=None)[0]
    assert np.allclose(proj, null_vecs, atol=1e-8)


def test_disconnected_interaction_constraints_cover_null_space():
    g = build_area_graph(4, [(0, 1), (2, 3)])  # two components
    rg = rw1_structure(3)
    rk = icar_structure(g)
    for kind in ("III", "IV"):
        q = interaction_structure(kind, rg, rk)
        cons = interaction_constraints(kind, 4, 3, g.component_labels()).matrix
        assert np.linalg.matrix_rank(cons) == cons.shape[0]
        assert cons.shape[0] >= q.null_dim
        vals, vecs = np.linalg.eigh(q.entries.toarray())
        null_vecs = vecs[:, vals < 1e-10]
        proj = cons.T @ np.linalg.lstsq(cons.T, null_vecs, rcond=None)[0]
        assert np.allclose(proj, null_vecs, atol=1e-8)


def test_component_constraints():
    g = build_area_graph(5, [(0, 1), (1, 2)])
    rows = component_constraints(g).matrix
    assert rows.shape == (3, 5)
    assert rows.sum() == 5


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=4, max_size=4))
def test_icar_quadratic_form_is_pairwise_difference_sum(values):
    x = np.array(values)
    cycle = build_area_graph(4, [(0, 1), (1, 2), (2, 3), (3, 0)])
    r = icar_structure(cycle).entries.toarray()
    direct = sum((x[i] - x[j]) ** 2 for i, j in cycle.edges)
    assert x @ r @ x == pytest.approx(direct, abs=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=5, max_size=5))
def test_rw1_quadratic_form_is_increment_sum(values):
    x = np.array(values)
    r = rw1_structure(5).entries.toarray()
    direct = sum((x[t] - x[t - 1]) ** 2 for t in range(1, 5))
    assert x @ r @ x == pytest.approx(direct, abs=1e-9)


@pytest.mark.parametrize(
    "structure",
    [
        icar_structure(grid_graph(5, 8)),
        rw1_structure(20),
        interaction_structure("II", rw1_structure(4), icar_structure(grid_graph(3, 4))),
        interaction_structure("IV", rw1_structure(4), icar_structure(grid_graph(3, 4))),
    ],
)
def test_structure_invariants(structure):
    dense = structure.entries.toarray()
    assert np.allclose(dense, dense.T)
    vals = np.linalg.eigvalsh(dense)
    assert vals.min() > -1e-8 * max(vals.max(), 1.0)
    assert numeric_rank(dense) == structure.dim - structure.null_dim
    if structure.kind in ("ICAR", "RW1", "TypeII", "TypeIII", "TypeIV"):
        assert np.allclose(dense.sum(axis=1), 0.0, atol=1e-10)


def test_adjacency_round_trip(tmp_path):
    g = grid_graph(3, 4)
    path = tmp_path / "areas.adj"
    write_adjacency(g, path)
    back = read_adjacency(path)
    assert back == g


def test_adjacency_parser_errors(tmp_path):
    path = tmp_path / "bad.adj"
    path.write_text("0 1\n")
    with pytest.raises(ValueError):
        read_adjacency(path)
    path.write_text("areas 2\n0 1 2\n")
    with pytest.raises(ValueError):
        read_adjacency(path)


def test_adjacency_comments_and_blanks(tmp_path):
    path = tmp_path / "ok.adj"
    path.write_text("# map\nareas 3\n\n0 1  # border\n1 2\n")
    g = read_adjacency(path)
    assert g.num_areas == 3
    assert g.edges == frozenset({(0, 1), (1, 2)})
