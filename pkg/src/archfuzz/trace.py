"""Single-file binary trace container.

Layout: magic "AFZT", u32 version, u32 manifest length, UTF-8 JSON manifest,
then concatenated little-endian float32 blobs. The manifest carries enough
graph structure (per-node kind and predecessor list) for a trace pair to be
compared without the originating model directory.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .engine import StepResult

TRACE_MAGIC = b"AFZT"
TRACE_VERSION = 1


class TraceError(Exception):
    pass


class TraceVersionError(TraceError):
    pass


class TraceCorruptError(TraceError):
    pass


@dataclass
class TraceBundle:
    backend_id: str
    model_id: str
    outcome: str  # ok | nan | crash
    nodes: dict[int, dict]  # id -> {"kind": str, "preds": [int, ...]}
    fc: dict[int, np.ndarray] = field(default_factory=dict)
    loss_output: Optional[np.ndarray] = None  # shape-(1,) f32
    loss_gradient: Optional[np.ndarray] = None
    bc: dict[int, np.ndarray] = field(default_factory=dict)
    first_nonfinite_node: Optional[int] = None
    first_nonfinite_section: Optional[str] = None
    message: Optional[str] = None

    def sections(self) -> list[tuple[str, np.ndarray]]:
        out: list[tuple[str, np.ndarray]] = []
        for i in sorted(self.fc):
            out.append((f"fc/{i}", self.fc[i]))
        if self.loss_output is not None:
            out.append(("lc/out", self.loss_output))
        if self.loss_gradient is not None:
            out.append(("lc/grad", self.loss_gradient))
        for i in sorted(self.bc):
            out.append((f"bc/{i}", self.bc[i]))
        return out


def bundle_from_result(result: StepResult, graph) -> TraceBundle:
    pred_map = graph.pred_map()
    nodes = {
        nd.id: {"kind": nd.kind, "preds": pred_map[nd.id]}
        for nd in graph.nodes
    }
    lo = None
    if result.loss_output is not None:
        lo = np.asarray(result.loss_output, dtype=np.float32).reshape(1)
    return TraceBundle(
        backend_id=result.backend_id,
        model_id=result.model_id,
        outcome=result.outcome,
        nodes=nodes,
        fc={i: np.asarray(a, dtype=np.float32) for i, a in result.fc.items()},
        loss_output=lo,
        loss_gradient=None if result.loss_gradient is None
        else np.asarray(result.loss_gradient, dtype=np.float32),
        bc={i: np.asarray(a, dtype=np.float32) for i, a in result.bc.items()},
        first_nonfinite_node=result.first_nonfinite_node,
        first_nonfinite_section=result.first_nonfinite_section,
        message=result.message,
    )


def crash_bundle(backend_id: str, model_id: str, message: str) -> TraceBundle:
    return TraceBundle(backend_id=backend_id, model_id=model_id, outcome="crash",
                       nodes={}, message=message)


def write_trace(bundle: TraceBundle, path) -> None:
    sections = []
    blobs = []
    offset = 0
    for name, arr in bundle.sections():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = arr.tobytes()
        sections.append({
            "name": name,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "backend_id": bundle.backend_id,
        "model_id": bundle.model_id,
        "outcome": bundle.outcome,
        "nodes": {
            str(i): {"kind": meta["kind"], "preds": list(meta["preds"])}
            for i, meta in sorted(bundle.nodes.items())
        },
        "first_nonfinite_node": bundle.first_nonfinite_node,
        "first_nonfinite_section": bundle.first_nonfinite_section,
        "message": bundle.message,
        "sections": sections,
    }
    payload = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(TRACE_MAGIC)
        fh.write(struct.pack("<II", TRACE_VERSION, len(payload)))
        fh.write(payload)
        for raw in blobs:
            fh.write(raw)


def read_trace(path) -> TraceBundle:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != TRACE_MAGIC:
        raise TraceCorruptError(f"{path}: not a trace file (bad magic)")
    version, mlen = struct.unpack("<II", raw[4:12])
    if version != TRACE_VERSION:
        raise TraceVersionError(f"{path}: unsupported trace version {version}")
    if len(raw) < 12 + mlen:
        raise TraceCorruptError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[12:12 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TraceCorruptError(f"{path}: bad manifest: {exc}") from exc

    body = raw[12 + mlen:]
    bundle = TraceBundle(
        backend_id=manifest["backend_id"],
        model_id=manifest["model_id"],
        outcome=manifest["outcome"],
        nodes={int(i): {"kind": m["kind"], "preds": list(m["preds"])}
               for i, m in manifest.get("nodes", {}).items()},
        first_nonfinite_node=manifest.get("first_nonfinite_node"),
        first_nonfinite_section=manifest.get("first_nonfinite_section"),
        message=manifest.get("message"),
    )
    for sec in manifest["sections"]:
        shape = tuple(sec["shape"])
        expect = int(np.prod(shape)) * 4 if shape else 4
        if sec["nbytes"] != expect:
            raise TraceCorruptError(
                f"{path}: section {sec['name']} declares {sec['nbytes']} bytes, "
                f"shape {shape} needs {expect}")
        chunk = body[sec["offset"]:sec["offset"] + sec["nbytes"]]
        if len(chunk) != sec["nbytes"]:
            raise TraceCorruptError(f"{path}: section {sec['name']} truncated")
        arr = np.frombuffer(chunk, dtype="<f4").reshape(shape).copy()
        name = sec["name"]
        if name.startswith("fc/"):
            bundle.fc[int(name[3:])] = arr
        elif name == "lc/out":
            bundle.loss_output = arr
        elif name == "lc/grad":
            bundle.loss_gradient = arr
        elif name.startswith("bc/"):
            bundle.bc[int(name[3:])] = arr
        else:
            raise TraceCorruptError(f"{path}: unknown section {name}")
    return bundle
