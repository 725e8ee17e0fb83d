"""Graph intermediate representation: nodes, edges, validity checks, shape inference."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

Shape = tuple[int, ...]

MAX_RANK = 4


class GraphError(Exception):
    pass


class ShapeError(GraphError):
    """A layer's shape rule precondition was violated."""


def check_shape(shape: Shape) -> Shape:
    shape = tuple(int(d) for d in shape)
    if not (1 <= len(shape) <= MAX_RANK):
        raise ShapeError(f"rank must be in [1, {MAX_RANK}], got {shape}")
    if any(d < 1 for d in shape):
        raise ShapeError(f"extents must be >= 1, got {shape}")
    return shape


def element_count(shape: Shape) -> int:
    return math.prod(shape)


@dataclass
class Node:
    id: int
    kind: Optional[str]  # None while the skeleton has no layer assigned
    params: dict = field(default_factory=dict)
    shape: Optional[Shape] = None
    role: str = "normal"  # normal | reduction


@dataclass
class ModelGraph:
    nodes: list[Node]
    edges: list[tuple[int, int]]

    @property
    def n(self) -> int:
        return len(self.nodes)

    def node(self, node_id: int) -> Node:
        return self._by_id()[node_id]

    def _by_id(self) -> dict[int, Node]:
        return {nd.id: nd for nd in self.nodes}

    def preds(self, node_id: int) -> list[int]:
        return sorted(u for u, v in self.edges if v == node_id)

    def succs(self, node_id: int) -> list[int]:
        return sorted(v for u, v in self.edges if u == node_id)

    def pred_map(self) -> dict[int, list[int]]:
        m: dict[int, list[int]] = {nd.id: [] for nd in self.nodes}
        for u, v in self.edges:
            m[v].append(u)
        return {k: sorted(v) for k, v in m.items()}

    def succ_map(self) -> dict[int, list[int]]:
        m: dict[int, list[int]] = {nd.id: [] for nd in self.nodes}
        for u, v in self.edges:
            m[u].append(v)
        return {k: sorted(v) for k, v in m.items()}

    def copy(self) -> "ModelGraph":
        return ModelGraph(
            nodes=[replace(nd, params=dict(nd.params)) for nd in self.nodes],
            edges=list(self.edges),
        )


def validate_graph(g: ModelGraph, registry=None) -> list[str]:
    """Return a list of invariant violations; an empty list means the graph is valid."""
    violations: list[str] = []
    ids = [nd.id for nd in g.nodes]
    if len(set(ids)) != len(ids):
        violations.append("duplicate node ids")
        return violations
    id_set = set(ids)
    for u, v in g.edges:
        if u not in id_set or v not in id_set:
            violations.append(f"edge ({u},{v}) references unknown node")
    if violations:
        return violations

    preds = g.pred_map()
    succs = g.succ_map()
    sources = [i for i in ids if not preds[i]]
    sinks = [i for i in ids if not succs[i]]
    if len(sources) != 1:
        violations.append(f"multiple sources: expected exactly one in-degree-0 node, got {sorted(sources)}")
    if len(sinks) != 1:
        violations.append(f"multiple sinks: expected exactly one out-degree-0 node, got {sorted(sinks)}")
    if g.n > 1:
        for i in ids:
            if not preds[i] and not succs[i]:
                violations.append(f"isolated node {i}")

    try:
        topological_order(g)
    except GraphError as exc:
        violations.append(f"cycle: {exc}")

    if registry is not None:
        for nd in g.nodes:
            if nd.kind is None or nd.kind not in registry:
                continue
            kind = registry[nd.kind]
            indeg = len(preds[nd.id])
            if kind.arity == "SI" and indeg > 1:
                violations.append(f"node {nd.id}: SI kind {nd.kind} has in-degree {indeg}")
            if kind.arity == "MI" and 0 < indeg < 2:
                violations.append(f"node {nd.id}: MI kind {nd.kind} has in-degree {indeg}")
    return violations


def topological_order(g: ModelGraph) -> list[int]:
    """Kahn's algorithm with ascending-id tie-breaking; raises GraphError on a cycle."""
    import heapq

    preds = g.pred_map()
    succs = g.succ_map()
    indeg = {i: len(p) for i, p in preds.items()}
    ready = [i for i, d in sorted(indeg.items()) if d == 0]
    heapq.heapify(ready)
    order: list[int] = []
    while ready:
        i = heapq.heappop(ready)
        order.append(i)
        for s in succs[i]:
            indeg[s] -= 1
            if indeg[s] == 0:
                heapq.heappush(ready, s)
    if len(order) != g.n:
        remaining = sorted(i for i, d in indeg.items() if d > 0)
        u = remaining[0]
        for v in g.succs(u):
            if v in remaining:
                raise GraphError(f"cycle through edge ({u},{v})")
        raise GraphError(f"cycle involving nodes {remaining}")
    return order


def infer_shapes(g: ModelGraph, input_shape: Shape, registry) -> ModelGraph:
    """Assign every node's output shape in topological order via the kind shape rules.

    Deterministic and idempotent; raises ShapeError naming the offending node.
    """
    input_shape = check_shape(input_shape)
    out = g.copy()
    by_id = out._by_id()
    preds = out.pred_map()
    for i in topological_order(out):
        nd = by_id[i]
        if nd.kind is None:
            raise ShapeError(f"node {i}: no kind assigned")
        kind = registry[nd.kind]
        if not preds[i]:
            in_shapes = [input_shape]
        else:
            in_shapes = [by_id[p].shape for p in preds[i]]
        try:
            nd.shape = check_shape(kind.output_shape(in_shapes, nd.params))
        except ShapeError as exc:
            raise ShapeError(f"node {i} ({nd.kind}): {exc}") from exc
    return out
