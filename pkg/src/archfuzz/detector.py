"""Differential trace analysis: stage-wise inconsistency detection, NaN and
crash classification, voting localization, and deduplication."""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .trace import TraceBundle

DEFAULT_THRESHOLD = 0.15
DEFAULT_EPSILON = 1e-5


class DetectorError(Exception):
    pass


@dataclass(frozen=True)
class DetectorConfig:
    threshold: float = DEFAULT_THRESHOLD  # t: layer distance that counts as inconsistent
    epsilon: float = DEFAULT_EPSILON  # benign deviation band for gating
    loss_scale: float = 1.0  # multiplies the LC threshold for large-magnitude losses

    def __post_init__(self):
        if not (0.0 < self.epsilon < self.threshold):
            raise DetectorError(
                f"need 0 < epsilon < threshold, got epsilon={self.epsilon} "
                f"threshold={self.threshold}")
        if self.loss_scale <= 0:
            raise DetectorError("loss_scale must be positive")


@dataclass(frozen=True)
class Finding:
    stage: str  # fc | lc | bc
    model_id: str
    backend_pair: tuple[str, str]
    node_id: Optional[int]  # None for whole-loss LC findings
    layer_kind: Optional[str]
    distance: float
    detail: str = ""

    def dedup_key(self) -> tuple:
        return (self.stage, self.layer_kind, self.backend_pair)


@dataclass(frozen=True)
class NanEvent:
    model_id: str
    affected_backends: tuple[str, ...]
    healthy_backends: tuple[str, ...]
    first_nonfinite_node: Optional[int]
    first_nonfinite_section: Optional[str]


@dataclass(frozen=True)
class CrashEvent:
    model_id: str
    backend_id: str
    message: str
    normalized: str

    def dedup_key(self) -> tuple:
        return ("crash", self.normalized)


def chebyshev_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Max absolute elementwise difference; any non-finite disagreement is infinite."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        return float("inf")
    d = np.abs(a - b)
    if not np.all(np.isfinite(d)):
        return float("inf")
    return float(d.max()) if d.size else 0.0


def _sink_id(bundle: TraceBundle) -> Optional[int]:
    has_succ = set()
    for meta in bundle.nodes.values():
        has_succ.update(meta["preds"])
    sinks = [i for i in bundle.nodes if i not in has_succ]
    return sinks[0] if len(sinks) == 1 else None


def _succ_map(bundle: TraceBundle) -> dict[int, list[int]]:
    succs: dict[int, list[int]] = {i: [] for i in bundle.nodes}
    for i, meta in bundle.nodes.items():
        for p in meta["preds"]:
            succs[p].append(i)
    return succs


def detect_fc(a: TraceBundle, b: TraceBundle, cfg: DetectorConfig) -> list[Finding]:
    """Forward inconsistencies: node distance above t while every predecessor
    stays inside the benign band."""
    findings = []
    pair = tuple(sorted((a.backend_id, b.backend_id)))
    dist = {i: chebyshev_distance(a.fc[i], b.fc[i]) for i in a.fc if i in b.fc}
    for i, d in dist.items():
        if d <= cfg.threshold:
            continue
        preds = a.nodes[i]["preds"]
        # a predecessor missing from the trace is the shared source node, which
        # is identical data by construction
        if all(dist.get(p, 0.0) < cfg.epsilon for p in preds):
            findings.append(Finding(
                stage="fc", model_id=a.model_id, backend_pair=pair, node_id=i,
                layer_kind=a.nodes[i]["kind"], distance=d,
                detail=f"pred_kinds={[a.nodes[p]['kind'] for p in preds]}"))
    return findings


def detect_lc(a: TraceBundle, b: TraceBundle, cfg: DetectorConfig) -> list[Finding]:
    """Loss inconsistencies, gated on the two backends agreeing at the sink."""
    sink = _sink_id(a)
    if sink is None or sink not in a.fc or sink not in b.fc:
        return []
    if chebyshev_distance(a.fc[sink], b.fc[sink]) >= cfg.epsilon:
        return []
    pair = tuple(sorted((a.backend_id, b.backend_id)))
    t = cfg.threshold * cfg.loss_scale
    findings = []
    if a.loss_output is not None and b.loss_output is not None:
        d = chebyshev_distance(a.loss_output, b.loss_output)
        if d > t:
            findings.append(Finding(
                stage="lc", model_id=a.model_id, backend_pair=pair, node_id=None,
                layer_kind="loss", distance=d, detail="loss output"))
    if a.loss_gradient is not None and b.loss_gradient is not None:
        d = chebyshev_distance(a.loss_gradient, b.loss_gradient)
        if d > t:
            findings.append(Finding(
                stage="lc", model_id=a.model_id, backend_pair=pair, node_id=None,
                layer_kind="loss", distance=d, detail="loss gradient"))
    return findings


def detect_bc(a: TraceBundle, b: TraceBundle, cfg: DetectorConfig) -> list[Finding]:
    """Backward inconsistencies: activation-gradient distance above t while every
    successor gradient stays inside the benign band.

    Gradients flow backward, so a node's successors are its upstream sources;
    the sink's reference is the loss gradient itself.
    """
    if a.loss_gradient is None or b.loss_gradient is None:
        return []
    if chebyshev_distance(a.loss_gradient, b.loss_gradient) >= cfg.epsilon:
        # the defect already surfaced at the loss; BC attribution would be noise
        return []
    pair = tuple(sorted((a.backend_id, b.backend_id)))
    succs = _succ_map(a)
    dist = {i: chebyshev_distance(a.bc[i], b.bc[i]) for i in a.bc if i in b.bc}
    lg_dist = chebyshev_distance(a.loss_gradient, b.loss_gradient)
    findings = []
    for i, d in dist.items():
        if d <= cfg.threshold:
            continue
        succ_dists = [dist.get(s, float("inf")) for s in succs.get(i, [])]
        if not succ_dists:
            succ_dists = [lg_dist]
        if all(sd < cfg.epsilon for sd in succ_dists):
            skinds = [a.nodes[s]["kind"] for s in succs.get(i, [])]
            findings.append(Finding(
                stage="bc", model_id=a.model_id, backend_pair=pair, node_id=i,
                layer_kind=a.nodes[i]["kind"], distance=d,
                detail=f"succ_kinds={skinds}"))
    return findings


def compare_traces(a: TraceBundle, b: TraceBundle,
                   cfg: Optional[DetectorConfig] = None) -> list[Finding]:
    """All stage findings for one backend pair. Only ok/ok pairs are compared;
    NaN and crash outcomes are classified across the whole backend set instead."""
    cfg = cfg or DetectorConfig()
    if a.model_id != b.model_id:
        raise DetectorError(f"model mismatch: {a.model_id} vs {b.model_id}")
    if a.outcome != "ok" or b.outcome != "ok":
        return []
    out = detect_fc(a, b, cfg)
    out.extend(detect_lc(a, b, cfg))
    out.extend(detect_bc(a, b, cfg))
    return out


def classify_outcomes(bundles: list[TraceBundle]) -> tuple[list[NanEvent], list[CrashEvent]]:
    """NaN and crash events for one model across all backends.

    An event needs at least one healthy backend; if every backend misbehaves the
    model itself is the likely culprit and nothing is reported.
    """
    healthy = tuple(sorted(b.backend_id for b in bundles if b.outcome == "ok"))
    nan_events: list[NanEvent] = []
    crash_events: list[CrashEvent] = []
    if not healthy:
        return nan_events, crash_events
    nan_backends = [b for b in bundles if b.outcome == "nan"]
    if nan_backends:
        first = nan_backends[0]
        nan_events.append(NanEvent(
            model_id=first.model_id,
            affected_backends=tuple(sorted(b.backend_id for b in nan_backends)),
            healthy_backends=healthy,
            first_nonfinite_node=first.first_nonfinite_node,
            first_nonfinite_section=first.first_nonfinite_section))
    for b in bundles:
        if b.outcome == "crash":
            msg = b.message or "unknown crash"
            crash_events.append(CrashEvent(
                model_id=b.model_id, backend_id=b.backend_id,
                message=msg, normalized=normalize_crash_message(msg)))
    return nan_events, crash_events


def normalize_crash_message(message: str) -> str:
    """Collapse run-specific detail (addresses, paths, numbers) for dedup."""
    msg = message.strip().splitlines()[-1] if message.strip() else ""
    msg = re.sub(r"0x[0-9a-fA-F]+", "<addr>", msg)
    msg = re.sub(r"(/[\w.\-]+)+", "<path>", msg)
    msg = re.sub(r"\d+", "<n>", msg)
    return msg


def vote_localize(findings: Iterable[Finding], backends: list[str]) -> dict[tuple, str]:
    """Majority-vote culprit per (model, stage, node): with three or more
    backends, the backend present in every flagged pair of a group is the
    deviant one. Returns {} entries only where the vote is unambiguous."""
    groups: dict[tuple, list[Finding]] = {}
    for f in findings:
        groups.setdefault((f.model_id, f.stage, f.node_id), []).append(f)
    verdicts: dict[tuple, str] = {}
    if len(backends) < 3:
        return verdicts
    for key, group in groups.items():
        pairs = {f.backend_pair for f in group}
        if len(pairs) < 2:
            continue
        common = set(backends)
        for p in pairs:
            common &= set(p)
        if len(common) == 1:
            verdicts[key] = next(iter(common))
    return verdicts


def deduplicate(findings: Iterable[Finding]) -> list[Finding]:
    """One representative per (stage, layer kind, backend pair), keeping the
    largest distance seen."""
    best: dict[tuple, Finding] = {}
    for f in findings:
        key = f.dedup_key()
        if key not in best or f.distance > best[key].distance:
            best[key] = f
    return list(best.values())


def deduplicate_crashes(events: Iterable[CrashEvent]) -> list[CrashEvent]:
    seen: dict[tuple, CrashEvent] = {}
    for e in events:
        seen.setdefault(e.dedup_key(), e)
    return list(seen.values())
