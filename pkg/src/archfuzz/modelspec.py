"""Self-describing generated models: weights, input batch, labels, and the directory format."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ir import ModelGraph, Node, Shape, check_shape
from .layers import LOSS_REGISTRY, REGISTRY

SPEC_FORMAT_VERSION = 1

WEIGHT_LOW, WEIGHT_HIGH = -0.5, 0.5


def node_rng(seed: int, node_id: int) -> np.random.Generator:
    """Counter-based stream keyed by (seed, node id): identical draws on any host."""
    return np.random.Generator(np.random.Philox(key=[seed & (2**64 - 1), node_id]))


def data_rng(seed: int, stream: int) -> np.random.Generator:
    # streams: 0 = input batch, 1 = labels; offset clear of node-id keys
    return np.random.Generator(np.random.Philox(key=[seed & (2**64 - 1), 2**48 + stream]))


@dataclass
class ModelSpec:
    model_id: str
    graph: ModelGraph
    loss_kind: str
    batch_size: int
    seed: int
    weights: dict[int, list[np.ndarray]]  # node id -> parameter tensors, f32
    input_batch: np.ndarray  # (B, *L_i), f32
    labels: np.ndarray  # (B, *L_o), f32

    @property
    def input_shape(self) -> Shape:
        src = [nd.id for nd in self.graph.nodes if not self.graph.preds(nd.id)]
        return self.graph.node(src[0]).shape

    @property
    def output_shape(self) -> Shape:
        sink = [nd.id for nd in self.graph.nodes if not self.graph.succs(nd.id)]
        return self.graph.node(sink[0]).shape


def materialize_weights(graph: ModelGraph, seed: int) -> dict[int, list[np.ndarray]]:
    weights: dict[int, list[np.ndarray]] = {}
    pred_map = graph.pred_map()
    by_id = {nd.id: nd for nd in graph.nodes}
    for nd in graph.nodes:
        kind = REGISTRY[nd.kind]
        preds = pred_map[nd.id]
        in_shape = by_id[preds[0]].shape if preds else nd.shape
        shapes = kind.weight_shapes(in_shape, nd.params)
        if not shapes:
            continue
        rng = node_rng(seed, nd.id)
        ws = []
        for ws_shape in shapes:
            w = rng.uniform(WEIGHT_LOW, WEIGHT_HIGH, size=ws_shape)
            if len(ws_shape) >= 2:
                # fan-in scaling keeps layer gains near or below one, so deep
                # graphs and multiply merges cannot blow up magnitudes and
                # benign float deviation stays inside the 1e-4 band
                w /= math.sqrt(math.prod(ws_shape[:-1]))
            ws.append(w.astype(np.float32))
        if nd.kind == "batch_normalization":
            # gamma near 1, beta near 0 keeps the normalized scale sane
            ws[0] = (1.0 + ws[0]).astype(np.float32)
        weights[nd.id] = ws
    return weights


def materialize_input(shape: Shape, batch_size: int, seed: int, *,
                      scale: float = 1.0, zero_fraction: float = 0.0,
                      nan_fraction: float = 0.0) -> np.ndarray:
    rng = data_rng(seed, 0)
    x = rng.uniform(-1.0, 1.0, size=(batch_size, *shape)) * scale
    if zero_fraction > 0:
        x[rng.random(x.shape) < zero_fraction] = 0.0
    if nan_fraction > 0:
        x[rng.random(x.shape) < nan_fraction] = np.nan
    return x.astype(np.float32)


def materialize_labels(loss_kind: str, out_shape: Shape, batch_size: int, seed: int) -> np.ndarray:
    rng = data_rng(seed, 1)
    style = LOSS_REGISTRY[loss_kind].label_style
    if style == "real":
        y = rng.uniform(-1.0, 1.0, size=(batch_size, *out_shape))
    elif style == "unit":
        y = rng.uniform(0.0, 1.0, size=(batch_size, *out_shape))
    elif style == "nonzero":
        sign = np.where(rng.random((batch_size, *out_shape)) < 0.5, -1.0, 1.0)
        y = sign * rng.uniform(0.3, 1.3, size=(batch_size, *out_shape))
    elif style == "onehot":
        k = out_shape[-1]
        lead = (batch_size, *out_shape[:-1])
        idx = rng.integers(0, k, size=lead)
        y = np.zeros((*lead, k))
        np.put_along_axis(y, idx[..., None], 1.0, axis=-1)
    else:
        raise ValueError(f"unknown label style {style}")
    return y.astype(np.float32)


# ---------------------------------------------------------------------------
# Directory format: model.json manifest + raw little-endian f32 blobs.

def _blob_name(tag: str) -> str:
    return f"{tag}.bin"


def _write_blob(path: Path, arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    path.write_bytes(arr.tobytes())
    return {"file": path.name, "dtype": "f32", "shape": list(arr.shape)}


def _read_blob(directory: Path, ref: dict) -> np.ndarray:
    if ref["dtype"] != "f32":
        raise ValueError(f"unsupported blob dtype {ref['dtype']}")
    raw = (directory / ref["file"]).read_bytes()
    shape = tuple(ref["shape"])
    expect = math.prod(shape) * 4
    if len(raw) != expect:
        raise ValueError(f"blob {ref['file']}: length {len(raw)} != {expect}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()


def save_spec(spec: ModelSpec, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": SPEC_FORMAT_VERSION,
        "model_id": spec.model_id,
        "seed": spec.seed,
        "loss_kind": spec.loss_kind,
        "batch_size": spec.batch_size,
        "nodes": [
            {"id": nd.id, "kind": nd.kind, "params": _params_json(nd.params),
             "shape": list(nd.shape), "role": nd.role}
            for nd in sorted(spec.graph.nodes, key=lambda n: n.id)
        ],
        "edges": sorted([list(e) for e in spec.graph.edges]),
        "inputs": _write_blob(directory / _blob_name("inputs"), spec.input_batch),
        "labels": _write_blob(directory / _blob_name("labels"), spec.labels),
        "weights": {
            str(nid): [
                _write_blob(directory / _blob_name(f"w_{nid}_{i}"), w)
                for i, w in enumerate(ws)
            ]
            for nid, ws in sorted(spec.weights.items())
        },
    }
    (directory / "model.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )


def load_spec(directory) -> ModelSpec:
    directory = Path(directory)
    manifest = json.loads((directory / "model.json").read_text())
    if manifest.get("format_version") != SPEC_FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {manifest.get('format_version')}")
    nodes = [
        Node(id=n["id"], kind=n["kind"], params=_params_load(n["params"]),
             shape=check_shape(n["shape"]), role=n.get("role", "normal"))
        for n in manifest["nodes"]
    ]
    graph = ModelGraph(nodes=nodes, edges=[tuple(e) for e in manifest["edges"]])
    weights = {
        int(nid): [_read_blob(directory, ref) for ref in refs]
        for nid, refs in manifest["weights"].items()
    }
    return ModelSpec(
        model_id=manifest["model_id"],
        graph=graph,
        loss_kind=manifest["loss_kind"],
        batch_size=manifest["batch_size"],
        seed=manifest["seed"],
        weights=weights,
        input_batch=_read_blob(directory, manifest["inputs"]),
        labels=_read_blob(directory, manifest["labels"]),
    )


def _params_json(params: dict) -> dict:
    out = {}
    for k, v in params.items():
        out[k] = list(v) if isinstance(v, tuple) else v
    return out


def _params_load(params: dict) -> dict:
    out = {}
    for k, v in params.items():
        out[k] = tuple(v) if isinstance(v, list) else v
    return out
