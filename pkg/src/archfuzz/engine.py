"""Reference execution: one training step per backend, mutants, and the
finite-difference gradient oracle.

A backend is a set of kernels plus an accumulation strategy. Honest backends
differ only by floating-point reordering; mutant backends are honest backends
with exactly one faulted kernel, addressable as "<base>!<fault>".
"""
from __future__ import annotations

import os
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .ir import topological_order
from .kernels import (
    KERNELS,
    LOSS_KERNELS,
    NAIVE_OPS,
    REORDERED_OPS,
    Kernel,
    LossKernel,
    Ops,
    _avg_pool_bwd,
    _avg_pool_fwd,
    _global_max_bwd,
    _hinge_fwd,
    _hinge_grad_impl,
    _max_pool_bwd,
    _max_pool_fwd,
    _offset_slices,
    _pool_geometry,
    _relu_fwd,
    _softmax_bwd,
)
from .modelspec import ModelSpec

HONEST_BASES: dict[str, Ops] = {"naive": NAIVE_OPS, "reordered": REORDERED_OPS}


@dataclass(frozen=True)
class Fault:
    name: str
    description: str
    target: str  # layer or loss kind the fault lives in
    stage: str  # trace stage the defect is expected to surface in: fc | lc | bc | nan
    kernel_overrides: dict[str, Kernel] = field(default_factory=dict)
    loss_overrides: dict[str, LossKernel] = field(default_factory=dict)
    debug: Optional[str] = None  # process-level misbehavior instead of a bad kernel


@dataclass(frozen=True)
class Backend:
    backend_id: str
    ops: Ops
    dtype: type = np.float32
    fault: Optional[Fault] = None

    def kernel(self, kind: str) -> Kernel:
        if self.fault and kind in self.fault.kernel_overrides:
            return self.fault.kernel_overrides[kind]
        if kind not in KERNELS:
            raise KeyError(f"backend {self.backend_id} has no kernel for {kind}")
        return KERNELS[kind]

    def loss(self, kind: str) -> LossKernel:
        if self.fault and kind in self.fault.loss_overrides:
            return self.fault.loss_overrides[kind]
        if kind not in LOSS_KERNELS:
            raise KeyError(f"backend {self.backend_id} has no loss kernel for {kind}")
        return LOSS_KERNELS[kind]


# ---------------------------------------------------------------------------
# Mutant kernels

def _relu_eq_zero_bwd(xs, ws, params, gy, ops):
    # off-by-one activation mask: zero inputs pass gradient through
    return [gy * (xs[0] >= 0)]


def _avg_pool2d_corner_fwd(xs, ws, params, ops):
    if params["padding"] != "same":
        return _avg_pool_fwd(2)(xs, ws, params, ops)
    # location defect: emits the first cell of each window, not the average
    (x,) = xs
    xp, outs, _, _, s, _ = _pool_geometry(x, params, 2, 0.0)
    return xp[_offset_slices((0, 0), outs, s)].copy()


def _global_max2d_neginf_fwd(xs, ws, params, ops):
    # scrubs NaN by seeding the running max with -inf and comparing with ">"
    (x,) = xs
    axes = tuple(range(1, x.ndim - 1))
    return np.max(np.where(np.isnan(x), -np.inf, x), axis=axes)


def _bce_clip_elements(pred, labels):
    eps = pred.dtype.type(1e-7)
    one = pred.dtype.type(1)
    return -(labels * np.log(pred + eps) + (one - labels) * np.log(one - pred + eps))


def _bce_clip_fwd(pred, labels, ops):
    return ops.mean(_bce_clip_elements(pred, labels))


def _bce_clip_grad(pred, labels, ops):
    eps = pred.dtype.type(1e-7)
    one = pred.dtype.type(1)
    g = -(labels / (pred + eps) - (one - labels) / (one - pred + eps))
    return (g / pred.size).astype(pred.dtype)


def _hinge_no_divide_grad(pred, labels, ops):
    return _hinge_grad_impl(pred, labels, divide_by_ties=False)


def _softmax_no_shift_fwd(xs, ws, params, ops):
    e = np.exp(xs[0])
    return ops.div(e, ops.sum(e, axis=-1, keepdims=True))


FAULTS: dict[str, Fault] = {
    f.name: f
    for f in [
        Fault(
            "relu-eq-zero",
            "relu backward masks with x >= 0 instead of x > 0",
            target="relu",
            stage="bc",
            kernel_overrides={"relu": Kernel(_relu_fwd, _relu_eq_zero_bwd)},
        ),
        Fault(
            "pooling-location",
            "same-padded average_pooling2d reads the first window cell instead of averaging",
            target="average_pooling2d",
            stage="fc",
            kernel_overrides={
                "average_pooling2d": Kernel(_avg_pool2d_corner_fwd, _avg_pool_bwd(2))
            },
        ),
        Fault(
            "bce-epsilon-clip",
            "binary crossentropy adds 1e-7 inside the log instead of clamping",
            target="binary_crossentropy",
            stage="lc",
            loss_overrides={"binary_crossentropy": LossKernel(_bce_clip_fwd, _bce_clip_grad)},
        ),
        Fault(
            "maxpool-tie-gradient",
            "max_pooling1d backward routes gradient to every tied maximum",
            target="max_pooling1d",
            stage="bc",
            kernel_overrides={
                "max_pooling1d": Kernel(_max_pool_fwd(1), _max_pool_bwd(1, spread_ties=True))
            },
        ),
        Fault(
            "hinge-no-divide",
            "categorical hinge gradient skips dividing tied maxima by the tie count",
            target="categorical_hinge",
            stage="lc",
            loss_overrides={"categorical_hinge": LossKernel(_hinge_fwd, _hinge_no_divide_grad)},
        ),
        Fault(
            "globalmaxpool-neginf-on-nan",
            "global_max_pooling2d drops NaN via a -inf seeded running max",
            target="global_max_pooling2d",
            stage="nan",
            kernel_overrides={
                "global_max_pooling2d": Kernel(_global_max2d_neginf_fwd, _global_max_bwd)
            },
        ),
        Fault(
            "softmax-no-shift",
            "softmax skips the max-subtraction stabilization",
            target="softmax",
            stage="nan",
            kernel_overrides={"softmax": Kernel(_softmax_no_shift_fwd, _softmax_bwd)},
        ),
        Fault("abort", "aborts the process before the forward pass", target="*",
              stage="crash", debug="abort"),
        Fault("sleep", "hangs for ten minutes before the forward pass", target="*",
              stage="crash", debug="sleep"),
    ]
}


def resolve_backend(backend_id: str, dtype=np.float32) -> Backend:
    base, sep, fault_name = backend_id.partition("!")
    if base not in HONEST_BASES:
        raise KeyError(f"unknown base backend {base!r}")
    fault = None
    if sep:
        if fault_name not in FAULTS:
            raise KeyError(f"unknown fault {fault_name!r}")
        fault = FAULTS[fault_name]
    return Backend(backend_id=backend_id, ops=HONEST_BASES[base], dtype=dtype, fault=fault)


def list_backends() -> list[dict]:
    entries = [
        {"id": base, "kind": "honest", "description": f"{base} accumulation order"}
        for base in HONEST_BASES
    ]
    for f in FAULTS.values():
        entries.append({
            "id": f"naive!{f.name}",
            "kind": "debug" if f.debug else "mutant",
            "description": f.description,
            "target": f.target,
            "stage": f.stage,
        })
    return entries


# ---------------------------------------------------------------------------
# Execution

@dataclass
class StepResult:
    backend_id: str
    model_id: str
    outcome: str  # ok | nan | crash
    fc: dict[int, np.ndarray] = field(default_factory=dict)
    loss_output: Optional[np.ndarray] = None  # 0-d scalar
    loss_gradient: Optional[np.ndarray] = None
    bc: dict[int, np.ndarray] = field(default_factory=dict)
    first_nonfinite_node: Optional[int] = None
    first_nonfinite_section: Optional[str] = None
    message: Optional[str] = None  # crash detail


def _forward(spec: ModelSpec, backend: Backend, dtype) -> dict[int, np.ndarray]:
    order = topological_order(spec.graph)
    pred_map = spec.graph.pred_map()
    x = spec.input_batch.astype(dtype)
    outputs: dict[int, np.ndarray] = {}
    for i in order:
        nd = spec.graph.node(i)
        preds = pred_map[i]
        xs = [x] if not preds else [outputs[p] for p in preds]
        ws = [w.astype(dtype) for w in spec.weights.get(i, [])]
        outputs[i] = backend.kernel(nd.kind).fwd(xs, ws, nd.params, backend.ops)
    return outputs


def run_training_step(spec: ModelSpec, backend: Backend) -> StepResult:
    """Execute forward, loss, and backward once, collecting the three trace stages."""
    if backend.fault and backend.fault.debug == "abort":
        os.abort()
    if backend.fault and backend.fault.debug == "sleep":
        time.sleep(600)
    try:
        return _run_training_step(spec, backend)
    except Exception as exc:  # noqa: BLE001 - any kernel failure is a crash outcome
        return StepResult(
            backend_id=backend.backend_id,
            model_id=spec.model_id,
            outcome="crash",
            message=f"{type(exc).__name__}: {exc}",
        )


def _run_training_step(spec: ModelSpec, backend: Backend) -> StepResult:
    dtype = backend.dtype
    order = topological_order(spec.graph)
    pred_map = spec.graph.pred_map()
    succ_map = spec.graph.succ_map()
    sink = next(i for i in order if not succ_map[i])

    with np.errstate(all="ignore"):
        outputs = _forward(spec, backend, dtype)
        labels = spec.labels.astype(dtype)
        loss = backend.loss(spec.loss_kind)
        lo = np.asarray(loss.fwd(outputs[sink], labels, backend.ops), dtype=dtype)
        lg = loss.grad(outputs[sink], labels, backend.ops)

        grads: dict[int, np.ndarray] = {i: np.zeros_like(outputs[i]) for i in order}
        grads[sink] = lg.copy()
        x = spec.input_batch.astype(dtype)
        for i in reversed(order):
            preds = pred_map[i]
            if not preds:
                continue
            nd = spec.graph.node(i)
            xs = [outputs[p] for p in preds]
            ws = [w.astype(dtype) for w in spec.weights.get(i, [])]
            gxs = backend.kernel(nd.kind).bwd(xs, ws, nd.params, grads[i], backend.ops)
            for p, gx in zip(preds, gxs):
                grads[p] += gx

    # The source node is raw data, not a computed layer: it is absent from the
    # forward trace, but its gradient is a backward-pass result and stays in bc.
    result = StepResult(
        backend_id=backend.backend_id,
        model_id=spec.model_id,
        outcome="ok",
        fc={i: outputs[i] for i in order if pred_map[i]},
        loss_output=lo,
        loss_gradient=lg,
        bc=grads,
    )
    _classify_nonfinite(result, order)
    return result


def _classify_nonfinite(result: StepResult, order: list[int]) -> None:
    for i in order:
        if i in result.fc and not np.all(np.isfinite(result.fc[i])):
            result.outcome = "nan"
            result.first_nonfinite_node = i
            result.first_nonfinite_section = "fc"
            return
    if not np.isfinite(result.loss_output) or not np.all(np.isfinite(result.loss_gradient)):
        result.outcome = "nan"
        result.first_nonfinite_node = order[-1]
        result.first_nonfinite_section = "lc"
        return
    for i in reversed(order):
        if not np.all(np.isfinite(result.bc[i])):
            result.outcome = "nan"
            result.first_nonfinite_node = i
            result.first_nonfinite_section = "bc"
            return


# ---------------------------------------------------------------------------
# Finite-difference gradient oracle

@dataclass
class OracleResult:
    grads: dict[int, np.ndarray]  # d loss / d node output, float64
    verifiable: dict[int, np.ndarray]  # bool mask per element
    loss: float


def _descendants(succ_map: dict[int, list[int]], start: int) -> set[int]:
    seen: set[int] = set()
    stack = [start]
    while stack:
        u = stack.pop()
        for v in succ_map[u]:
            if v not in seen:
                seen.add(v)
                stack.append(v)
    return seen


def finite_difference_gradients(spec: ModelSpec, backend: Optional[Backend] = None,
                                h: float = 1e-3) -> OracleResult:
    """Central-difference activation gradients in float64.

    Perturbs each node-output element and recomputes only the downstream
    subgraph. Elements whose one-sided differences disagree (kinks, plateaus
    crossed by the perturbation) or whose perturbed losses are non-finite are
    marked unverifiable.
    """
    backend = backend or resolve_backend("naive", dtype=np.float64)
    dtype = np.float64
    order = topological_order(spec.graph)
    pred_map = spec.graph.pred_map()
    succ_map = spec.graph.succ_map()
    sink = next(i for i in order if not succ_map[i])
    labels = spec.labels.astype(dtype)
    loss = backend.loss(spec.loss_kind)

    base = _forward(spec, backend, dtype)
    weights = {i: [w.astype(dtype) for w in ws] for i, ws in spec.weights.items()}
    x = spec.input_batch.astype(dtype)

    def loss_with_override(node: int, value: np.ndarray) -> float:
        desc = _descendants(succ_map, node)
        cur: dict[int, np.ndarray] = {node: value}
        for i in order:
            if i not in desc:
                continue
            nd = spec.graph.node(i)
            preds = pred_map[i]
            xs = [x] if not preds else [cur.get(p, base[p]) for p in preds]
            cur[i] = backend.kernel(nd.kind).fwd(xs, [], nd.params, backend.ops) \
                if not weights.get(i) else \
                backend.kernel(nd.kind).fwd(xs, weights[i], nd.params, backend.ops)
        out = cur.get(sink, base[sink])
        return float(loss.fwd(out, labels, backend.ops))

    l0 = float(loss.fwd(base[sink], labels, backend.ops))
    grads: dict[int, np.ndarray] = {}
    verifiable: dict[int, np.ndarray] = {}
    with np.errstate(all="ignore"):
        for i in order:
            out = base[i]
            g = np.zeros(out.size, dtype=dtype)
            ok = np.ones(out.size, dtype=bool)
            flat = out.reshape(-1)
            for e in range(out.size):
                bump = np.zeros_like(flat)
                bump[e] = h
                lp = loss_with_override(i, (flat + bump).reshape(out.shape))
                lm = loss_with_override(i, (flat - bump).reshape(out.shape))
                if not (np.isfinite(lp) and np.isfinite(lm)):
                    ok[e] = False
                    continue
                fwd_d = (lp - l0) / h
                bwd_d = (l0 - lm) / h
                g[e] = (lp - lm) / (2.0 * h)
                if abs(fwd_d - bwd_d) > 1e-3 * max(1.0, abs(fwd_d), abs(bwd_d)):
                    ok[e] = False
            grads[i] = g.reshape(out.shape)
            verifiable[i] = ok.reshape(out.shape)
    return OracleResult(grads=grads, verifiable=verifiable, loss=l0)
