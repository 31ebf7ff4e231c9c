import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from netdesign.graph import (
    ConfigurationError,
    DesignGraph,
    EdgeAttr,
    GraphFormatError,
    NodeAttr,
    NodeClass,
    adjacency,
    degree,
    deserialize,
    feature_matrix,
    normalized_adjacency,
    serialize,
    validate,
)

S, D, T = NodeClass.SUPPLY, NodeClass.DEMAND, NodeClass.TRANSFER


def triangle(cap=1.0):
    nodes = [NodeAttr(0, S, 5.0, (0.1, 0.1)), NodeAttr(1, D, 2.0, (0.5, 0.9)), NodeAttr(2, T, 0.0, (0.9, 0.1))]
    edges = [EdgeAttr(0, 1, 0, cap, 1.0), EdgeAttr(1, 2, 0, cap, 1.0), EdgeAttr(0, 2, 0, cap, 1.0)]
    return DesignGraph(nodes, edges)


@st.composite
def design_graphs(draw, max_nodes=12):
    n = draw(st.integers(1, max_nodes))
    unit = st.floats(0.0, 1.0, allow_nan=False)
    nodes = []
    for i in range(n):
        cls = draw(st.sampled_from([0, 1, 2]))
        mag = 0.0 if cls == T else draw(st.floats(0.0, 1e3, allow_nan=False))
        nodes.append(NodeAttr(i, cls, mag, (draw(unit), draw(unit))))
    pairs = [(u, v) for u in range(n) for v in range(u + 1, n)]
    chosen = draw(st.lists(st.sampled_from(pairs), unique=True, max_size=20)) if pairs else []
    edges = [
        EdgeAttr(
            u,
            v,
            draw(st.integers(0, 2)),
            draw(st.floats(1e-6, 1e3, allow_nan=False)),
            draw(st.floats(0.0, 10.0, allow_nan=False)),
        )
        for u, v in chosen
    ]
    return DesignGraph(nodes, edges)


def test_adjacency_triangle():
    A = adjacency(triangle())
    np.testing.assert_array_equal(A, np.ones((3, 3)) - np.eye(3))


def test_adjacency_edgeless():
    g = DesignGraph([NodeAttr(0, T, 0.0, (0, 0)), NodeAttr(1, T, 0.0, (1, 1))], [])
    np.testing.assert_array_equal(adjacency(g), np.zeros((2, 2)))


def test_adjacency_nonzero_count_grid():
    # 123-node, 180-edge graph: a 3 x 41 lattice has 2*41 + 3*40 = 202 edges, so trim to 180
    rows, cols = 3, 41
    nodes = [NodeAttr(i, T, 0.0, (0.5, 0.5)) for i in range(rows * cols)]
    pairs = []
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            if c + 1 < cols:
                pairs.append((i, i + 1))
            if r + 1 < rows:
                pairs.append((i, i + cols))
    edges = [EdgeAttr(u, v, 0, 1.0, 1.0) for u, v in pairs[:180]]
    g = DesignGraph(nodes, edges)
    assert g.n_nodes == 123
    assert np.count_nonzero(adjacency(g)) == 360


def test_degree_examples():
    np.testing.assert_array_equal(degree(np.array([[0.0, 2.0], [2.0, 0.0]])), np.diag([2.0, 2.0]))
    np.testing.assert_array_equal(degree(np.zeros((3, 3))), np.zeros((3, 3)))
    np.testing.assert_array_equal(degree(adjacency(triangle())), np.diag([2.0, 2.0, 2.0]))


def test_normalized_adjacency_rows_bounded_for_equal_weights():
    g = triangle()
    An = normalized_adjacency(adjacency(g))
    assert np.all(An.sum(axis=1) <= 1 + 1e-12)


def test_feature_matrix_rows():
    nodes = [
        NodeAttr(0, S, 5.0, (0.5, 0.5)),
        NodeAttr(1, D, 1.0, (0.5, 0.5)),
        NodeAttr(2, D, 1.0, (0.5, 0.5)),
        NodeAttr(3, T, 0.0, (0.5, 0.5)),
    ]
    edges = [EdgeAttr(0, 1, 0, 2.0, 1.0), EdgeAttr(0, 2, 1, 4.0, 1.0)]
    X = feature_matrix(DesignGraph(nodes, edges))
    assert X.shape == (4, 6)
    np.testing.assert_array_equal(X[0], [1, 0, 0, 5, 2, 3])
    np.testing.assert_array_equal(X[3], [0, 0, 1, 0, 0, 0])


def test_feature_matrix_unknown_profile():
    g = DesignGraph([NodeAttr(0, T, 0.0, (0, 0))], [], profile="ieee")
    with pytest.raises(ConfigurationError):
        feature_matrix(g)


def test_feature_matrix_123_rows():
    nodes = [NodeAttr(i, T, 0.0, (0.5, 0.5)) for i in range(123)]
    assert feature_matrix(DesignGraph(nodes, [])).shape == (123, 6)


def test_validate_examples():
    assert validate(triangle()) == []
    g = DesignGraph([NodeAttr(0, S, 1.0, (0, 0))], [EdgeAttr(0, 0, 0, 1.0, 1.0)])
    assert [v.rule for v in validate(g)] == ["self-loop"]
    g = DesignGraph([NodeAttr(0, T, 3.0, (0, 0))], [])
    assert [v.rule for v in validate(g)] == ["magnitude"]


def test_validate_other_rules():
    g = triangle()
    dup = DesignGraph(g.nodes, g.edges + (EdgeAttr(1, 0, 1, 2.0, 1.0),))
    assert "duplicate" in [v.rule for v in validate(dup)]
    bad = DesignGraph(g.nodes, (EdgeAttr(0, 1, 7, 0.0, -1.0),))
    assert {v.rule for v in validate(bad)} == {"type", "capacity", "unit_cost"}
    far = DesignGraph((NodeAttr(0, S, 1.0, (1.5, 0.0)), NodeAttr(2, D, 1.0, (0, 0))), ())
    assert {v.rule for v in validate(far)} == {"position", "ids"}


def test_serialize_roundtrip_triangle():
    g = triangle()
    assert deserialize(serialize(g)) == g


def test_truncated_document():
    text = serialize(triangle())
    with pytest.raises(GraphFormatError):
        deserialize(text[: len(text) // 2])


def test_unknown_field_named():
    doc = json.loads(serialize(triangle()))
    doc["nodes"][0]["voltage"] = 1.0
    with pytest.raises(GraphFormatError) as err:
        deserialize(json.dumps(doc))
    assert err.value.field == "voltage"
    assert "voltage" in str(err.value)


@settings(max_examples=1000, deadline=None)
@given(design_graphs())
def test_roundtrip_property(g):
    assert validate(g) == []
    assert deserialize(serialize(g)) == g


@settings(max_examples=200, deadline=None)
@given(design_graphs())
def test_matrix_invariants(g):
    A = adjacency(g)
    assert np.array_equal(A, A.T)
    D = degree(A)
    np.testing.assert_allclose(np.diag(D), A.sum(axis=1), rtol=0, atol=1e-12)
    assert np.count_nonzero(D - np.diag(np.diag(D))) == 0
    X1, X2 = feature_matrix(g), feature_matrix(deserialize(serialize(g)))
    assert np.array_equal(X1, X2)
