import pytest

from archfuzz.ir import (
    GraphError,
    ModelGraph,
    Node,
    ShapeError,
    check_shape,
    element_count,
    infer_shapes,
    topological_order,
    validate_graph,
)
from archfuzz.layers import REGISTRY


def chain(kinds_params):
    nodes = []
    edges = []
    for i, (kind, params) in enumerate(kinds_params):
        nodes.append(Node(id=i, kind=kind, params=params))
        if i:
            edges.append((i - 1, i))
    return ModelGraph(nodes=nodes, edges=edges)


class TestCheckShape:
    def test_valid(self):
        assert check_shape((3, 4)) == (3, 4)

    def test_rank_limits(self):
        with pytest.raises(ShapeError):
            check_shape(())
        with pytest.raises(ShapeError):
            check_shape((2, 2, 2, 2, 2))

    def test_positive_extents(self):
        with pytest.raises(ShapeError):
            check_shape((3, 0))

    def test_element_count(self):
        assert element_count((3, 4, 2)) == 24


class TestValidate:
    def test_valid_chain(self):
        g = chain([("input", {}), ("relu", {}), ("tanh", {})])
        assert validate_graph(g, REGISTRY) == []

    def test_duplicate_ids(self):
        g = ModelGraph(nodes=[Node(0, "input"), Node(0, "relu")], edges=[])
        assert "duplicate node ids" in validate_graph(g)[0]

    def test_unknown_edge_endpoint(self):
        g = ModelGraph(nodes=[Node(0, "input")], edges=[(0, 9)])
        assert any("unknown node" in v for v in validate_graph(g))

    def test_multiple_sources_and_sinks(self):
        g = ModelGraph(nodes=[Node(i, "relu") for i in range(4)],
                       edges=[(0, 2), (1, 2), (2, 3)])
        vs = validate_graph(g)
        assert any("multiple sources" in v for v in vs)

        g2 = ModelGraph(nodes=[Node(i, "relu") for i in range(3)],
                        edges=[(0, 1), (0, 2)])
        assert any("multiple sinks" in v for v in validate_graph(g2))

    def test_isolated_node(self):
        g = ModelGraph(nodes=[Node(0, "input"), Node(1, "relu"), Node(2, "relu")],
                       edges=[(0, 1)])
        vs = validate_graph(g)
        assert any("isolated node 2" in v for v in vs)

    def test_cycle_reported(self):
        g = ModelGraph(nodes=[Node(i, "relu") for i in range(3)],
                       edges=[(0, 1), (1, 2), (2, 1)])
        assert any(v.startswith("cycle") for v in validate_graph(g))

    def test_arity_violations(self):
        g = ModelGraph(
            nodes=[Node(0, "input"), Node(1, "input"), Node(2, "relu")],
            edges=[(0, 2), (1, 2)])
        vs = validate_graph(g, REGISTRY)
        assert any("SI kind relu has in-degree 2" in v for v in vs)

        g2 = chain([("input", {}), ("add", {})])
        vs2 = validate_graph(g2, REGISTRY)
        assert any("MI kind add has in-degree 1" in v for v in vs2)


class TestTopologicalOrder:
    def test_ascending_tie_break(self):
        g = ModelGraph(nodes=[Node(i, "relu") for i in (3, 1, 0, 2)],
                       edges=[(0, 3), (1, 3), (2, 3)])
        assert topological_order(g) == [0, 1, 2, 3]

    def test_cycle_names_edge(self):
        g = ModelGraph(nodes=[Node(i, "relu") for i in range(2)],
                       edges=[(0, 1), (1, 0)])
        with pytest.raises(GraphError, match="cycle"):
            topological_order(g)


class TestInferShapes:
    def test_chain_assigns_shapes(self):
        g = chain([("input", {}), ("dense", {"units": 5}), ("relu", {})])
        out = infer_shapes(g, (3,), REGISTRY)
        assert [nd.shape for nd in out.nodes] == [(3,), (5,), (5,)]

    def test_idempotent(self):
        g = chain([("input", {}), ("flatten", {})])
        once = infer_shapes(g, (2, 3), REGISTRY)
        twice = infer_shapes(once, (2, 3), REGISTRY)
        assert [nd.shape for nd in once.nodes] == [nd.shape for nd in twice.nodes]

    def test_does_not_mutate_input(self):
        g = chain([("input", {}), ("relu", {})])
        infer_shapes(g, (4,), REGISTRY)
        assert g.nodes[1].shape is None

    def test_error_names_node(self):
        g = chain([("input", {}), ("max_pooling2d",
                                   {"pool_size": 9, "strides": 1, "padding": "valid"})])
        with pytest.raises(ShapeError, match="node 1"):
            infer_shapes(g, (4, 4, 2), REGISTRY)

    def test_missing_kind(self):
        g = ModelGraph(nodes=[Node(0, None)], edges=[])
        with pytest.raises(ShapeError, match="no kind"):
            infer_shapes(g, (4,), REGISTRY)
