"""Model generation: DAG structure templates plus fitness-proportionate layer selection."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .ir import GraphError, ModelGraph, Node, Shape, ShapeError, check_shape, element_count, \
    infer_shapes, topological_order, validate_graph
from .layers import LOSS_REGISTRY, REGISTRY, mi_kinds, si_kinds
from .modelspec import ModelSpec, materialize_input, materialize_labels, materialize_weights


class GenerationError(Exception):
    pass


class SkeletonRetry(Exception):
    """No legal layer assignment was found; the caller regenerates the skeleton."""


@dataclass
class GenerationConfig:
    n_models: int = 50
    max_cells: int = 5
    max_vertices: int = 30
    input_shape: Shape = (8, 8, 3)
    output_shape: Shape = (10,)
    seed: int = 0
    excluded_kinds: tuple[str, ...] = ()
    losses: tuple[str, ...] = tuple(LOSS_REGISTRY)
    batch_size: int = 4
    p_skip: float = 0.3
    chain_template_prob: float = 0.5
    # Trigger-bias knobs: exact zeros and NaNs in the input batch, input scale,
    # extreme layer parameters, and a forced output head activation.
    input_scale: float = 1.0
    zero_fraction: float = 0.0
    nan_fraction: float = 0.0
    biased_params: bool = False
    output_head: str | None = None  # None = pick by loss kind; "none" disables
    # Per-node tensor size cap (excluding batch). Also bounds coercion cost:
    # a shape-mismatch repair projects count(from) x count(to) dense weights.
    max_elements: int = 4096

    def validate(self) -> None:
        if self.n_models < 1 or self.max_cells < 1 or self.max_vertices < 1:
            raise GenerationError("n_models, max_cells, max_vertices must be >= 1")
        check_shape(self.input_shape)
        check_shape(self.output_shape)
        if self.max_elements < max(element_count(self.input_shape),
                                   element_count(self.output_shape)):
            raise GenerationError("max_elements smaller than input or output size")
        for loss in self.losses:
            if loss not in LOSS_REGISTRY:
                raise GenerationError(f"unknown loss kind {loss}")


@dataclass
class LayerUsageStats:
    """Per-kind selection counters driving fitness-proportionate selection."""

    counts: dict[str, int] = field(default_factory=dict)

    def count(self, name: str) -> int:
        return self.counts.get(name, 0)

    def score(self, name: str) -> float:
        return 1.0 / (self.count(name) + 1)

    def probabilities(self, names: list[str]) -> np.ndarray:
        scores = np.array([self.score(n) for n in names], dtype=np.float64)
        return scores / scores.sum()

    def record(self, name: str) -> None:
        self.counts[name] = self.count(name) + 1

    def merge(self, other: "LayerUsageStats") -> None:
        for name, c in other.counts.items():
            self.counts[name] = self.count(name) + c


def select_layer(kinds, stats: LayerUsageStats, rng, *, update: bool = True):
    """Draw one kind with probability proportional to 1/(count+1) within the given set."""
    if not kinds:
        raise GenerationError("empty layer class: nothing to select from")
    scores = [stats.score(k.name) for k in kinds]
    total = sum(scores)
    u = rng.random() * total
    acc = 0.0
    idx = len(kinds) - 1
    for i, s in enumerate(scores):
        acc += s
        if u < acc:
            idx = i
            break
    if update:
        stats.record(kinds[idx].name)
    return kinds[idx]


# ---------------------------------------------------------------------------
# Structure templates

def generate_chain_dag(n_v: int, rng, p_skip: float = 0.3) -> ModelGraph:
    """Backbone path v0 -> ... -> v_{n-1} plus independent forward skip edges."""
    nodes = [Node(id=i, kind=None) for i in range(n_v)]
    edges = [(i, i + 1) for i in range(n_v - 1)]
    for i in range(n_v):
        for j in range(i + 2, n_v):
            if rng.random() < p_skip:
                edges.append((i, j))
    return ModelGraph(nodes=nodes, edges=edges)


def _random_cell(n: int, rng) -> tuple[list[int], list[tuple[int, int]]]:
    """Single-source single-sink random DAG over local ids 0..n-1 (0=source, n-1=sink)."""
    edges = set()
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < 0.5:
                edges.add((i, j))
    # repair stray sources/sinks against the cell boundary nodes
    for j in range(1, n):
        if not any(b == j for _, b in edges):
            edges.add((0, j))
    for i in range(n - 1):
        if not any(a == i for a, _ in edges):
            edges.add((i, n - 1))
    return list(range(n)), sorted(edges)


def generate_cell_dag(n_c: int, rng) -> ModelGraph:
    """Input vertex, then alternating random computation cells and single reduction vertices."""
    nodes: list[Node] = [Node(id=0, kind=None)]
    edges: list[tuple[int, int]] = []
    next_id = 1
    prev_sink = 0
    for c in range(n_c):
        size = int(rng.integers(2, 7))
        local_ids, local_edges = _random_cell(size, rng)
        base = next_id
        for lid in local_ids:
            nodes.append(Node(id=base + lid, kind=None))
        next_id += size
        edges.append((prev_sink, base))
        edges.extend((base + u, base + v) for u, v in local_edges)
        prev_sink = base + size - 1
        if c < n_c - 1:
            nodes.append(Node(id=next_id, kind=None, role="reduction"))
            edges.append((prev_sink, next_id))
            prev_sink = next_id
            next_id += 1
    return ModelGraph(nodes=nodes, edges=edges)


# ---------------------------------------------------------------------------
# Layer assignment

_MAX_PARAM_ATTEMPTS = 32


def _coercion_chain(from_shape: Shape, target: Shape, next_id: int, rng) -> tuple[list[Node], int]:
    """Reshaping nodes mapping from_shape to target: pure reshape when element
    counts match, otherwise flatten + dense projection + reshape."""
    nodes: list[Node] = []
    shape = from_shape
    if element_count(shape) != element_count(target):
        if len(shape) > 1:
            nodes.append(Node(id=next_id, kind="flatten", shape=(element_count(shape),)))
            next_id += 1
            shape = (element_count(shape),)
        nodes.append(Node(id=next_id, kind="dense",
                          params={"units": element_count(target)},
                          shape=(element_count(target),)))
        next_id += 1
        shape = (element_count(target),)
    if shape != target or not nodes:
        nodes.append(Node(id=next_id, kind="reshape", params={"target": tuple(target)},
                          shape=tuple(target)))
        next_id += 1
    return nodes, next_id


def _sample_kind(kinds, in_shapes, stats, rng, biased, max_elements) -> tuple:
    """Pick a kind and legal params for the given input shapes, with bounded retries."""
    rank_ok = [k for k in kinds
               if all(k.accepts_rank(len(s)) for s in in_shapes)
               and k.accepts_arity(len(in_shapes))]
    if not rank_ok:
        raise SkeletonRetry(f"no kind accepts shapes {in_shapes}")
    for _ in range(_MAX_PARAM_ATTEMPTS):
        kind = select_layer(rank_ok, stats, rng)
        try:
            params = kind.sample_params(in_shapes, rng, biased)
            shape = kind.output_shape(in_shapes, params)
        except ShapeError:
            continue
        if element_count(shape) > max_elements:
            continue
        return kind, params, shape
    raise SkeletonRetry("no legal parameter assignment after retries")


def assign_layers(skeleton: ModelGraph, cfg: GenerationConfig, stats: LayerUsageStats,
                  rng, loss_kind: str) -> ModelGraph:
    sis = si_kinds(excluded=cfg.excluded_kinds)
    mis = mi_kinds(excluded=cfg.excluded_kinds)
    pooling = [k for k in sis if k.category == "pooling"]

    nodes = [replace(nd, params=dict(nd.params)) for nd in skeleton.nodes]
    by_id = {nd.id: nd for nd in nodes}
    edges = set(skeleton.edges)
    pred_map = skeleton.pred_map()
    succ_count = {i: len(s) for i, s in skeleton.succ_map().items()}
    next_id = max(by_id) + 1

    def append_chain(prev: int, chain: list[Node]) -> int:
        for extra in chain:
            nodes.append(extra)
            by_id[extra.id] = extra
            edges.add((prev, extra.id))
            prev = extra.id
        return prev

    for j in topological_order(skeleton):
        nd = by_id[j]
        preds = pred_map[j]
        if not preds:
            nd.kind = "input"
            nd.shape = tuple(cfg.input_shape)
            continue
        in_shapes = [by_id[p].shape for p in preds]
        if len(preds) == 1:
            candidates = sis
            if nd.role == "reduction":
                candidates = [k for k in pooling if k.accepts_rank(len(in_shapes[0]))]
                if not candidates:
                    # rank-1 inputs cannot be pooled; downsample with a projection
                    nd.kind = "dense"
                    nd.params = {"units": max(1, in_shapes[0][-1] // 2)}
                    nd.shape = REGISTRY["dense"].output_shape(in_shapes, nd.params)
                    continue
            kind, params, shape = _sample_kind(candidates, in_shapes, stats, rng,
                                               cfg.biased_params, cfg.max_elements)
            nd.kind, nd.params, nd.shape = kind.name, params, shape
        else:
            target = in_shapes[int(rng.integers(0, len(in_shapes)))]
            for p in preds:
                if by_id[p].shape == target:
                    continue
                chain, next_id = _coercion_chain(by_id[p].shape, target, next_id, rng)
                edges.remove((p, j))
                prev = append_chain(p, chain)
                edges.add((prev, j))
            kind, params, shape = _sample_kind(mis, [target] * len(preds), stats, rng,
                                               cfg.biased_params, cfg.max_elements)
            nd.kind, nd.params, nd.shape = kind.name, params, shape

    # output head: coerce the sink to the configured output shape, then an
    # optional activation chosen by the loss kind
    sink = next(i for i, c in succ_count.items() if c == 0)
    target = tuple(cfg.output_shape)
    chain, next_id = _coercion_chain(by_id[sink].shape, target, next_id, rng)
    prev = append_chain(sink, chain)
    head = cfg.output_head
    if head is None:
        head = LOSS_REGISTRY[loss_kind].preferred_head or "none"
    if head != "none":
        prev = append_chain(prev, [Node(id=next_id, kind=head, shape=target)])
        next_id += 1
    return ModelGraph(nodes=nodes, edges=sorted(edges))


def generate_model(cfg: GenerationConfig, stats: LayerUsageStats, rng,
                   model_index: int) -> ModelSpec:
    loss_kind = str(rng.choice(list(cfg.losses)))
    failures = 0
    while True:
        if rng.random() < cfg.chain_template_prob:
            n_v = int(rng.integers(1, cfg.max_vertices + 1))
            skeleton = generate_chain_dag(n_v, rng, cfg.p_skip)
        else:
            n_c = int(rng.integers(1, cfg.max_cells + 1))
            skeleton = generate_cell_dag(n_c, rng)
        try:
            graph = assign_layers(skeleton, cfg, stats, rng, loss_kind)
            break
        except SkeletonRetry:
            failures += 1
            if failures > 100:
                raise GenerationError("skeleton retries exhausted") from None

    violations = validate_graph(graph, REGISTRY)
    if violations:
        raise GenerationError(f"generated graph invalid: {violations}")
    graph = infer_shapes(graph, cfg.input_shape, REGISTRY)

    model_seed = (cfg.seed * 1_000_003 + model_index) & (2**63 - 1)
    weights = materialize_weights(graph, model_seed)
    inputs = materialize_input(cfg.input_shape, cfg.batch_size, model_seed,
                               scale=cfg.input_scale, zero_fraction=cfg.zero_fraction,
                               nan_fraction=cfg.nan_fraction)
    out_shape = tuple(cfg.output_shape)
    labels = materialize_labels(loss_kind, out_shape, cfg.batch_size, model_seed)
    return ModelSpec(
        model_id=f"m{model_index:04d}",
        graph=graph,
        loss_kind=loss_kind,
        batch_size=cfg.batch_size,
        seed=model_seed,
        weights=weights,
        input_batch=inputs,
        labels=labels,
    )


def generate_models(cfg: GenerationConfig,
                    stats: LayerUsageStats | None = None) -> list[ModelSpec]:
    """Generate cfg.n_models fully materialized specs, deterministically from cfg.seed."""
    cfg.validate()
    stats = stats if stats is not None else LayerUsageStats()
    rng = np.random.Generator(np.random.Philox(key=[cfg.seed & (2**64 - 1), 0]))
    return [generate_model(cfg, stats, rng, i) for i in range(cfg.n_models)]
