"""Campaign orchestration: generate models, execute every backend (optionally
in isolated subprocesses), run differential detection, and persist artifacts."""
from __future__ import annotations

import dataclasses
import itertools
import json
import os
import subprocess
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .detector import (
    CrashEvent,
    DetectorConfig,
    Finding,
    NanEvent,
    classify_outcomes,
    compare_traces,
    deduplicate,
    deduplicate_crashes,
    normalize_crash_message,
    vote_localize,
)
from .engine import resolve_backend, run_training_step
from .fuzzer import GenerationConfig, generate_models
from .layers import selectable_kinds
from .modelspec import ModelSpec, load_spec, save_spec
from .trace import TraceBundle, bundle_from_result, crash_bundle, read_trace, write_trace

# subprocess exit codes for `archfuzz run`
EXIT_OK = 0
EXIT_NAN = 3
EXIT_CRASH = 4


class CampaignError(Exception):
    pass


@dataclass
class CampaignConfig:
    backends: tuple[str, ...] = ("naive", "reordered")
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    isolation: str = "process"  # process | none
    timeout: float = 120.0  # per backend run, seconds (process isolation only)

    def validate(self) -> None:
        if len(self.backends) < 2:
            raise CampaignError("need at least two backends to compare")
        if len(set(self.backends)) != len(self.backends):
            raise CampaignError("duplicate backend ids")
        if self.isolation not in ("process", "none"):
            raise CampaignError(f"unknown isolation mode {self.isolation!r}")
        if self.timeout <= 0:
            raise CampaignError("timeout must be positive")
        self.generation.validate()

    @classmethod
    def from_json(cls, data: dict) -> "CampaignConfig":
        gen = GenerationConfig(**{
            k: tuple(v) if isinstance(v, list) else v
            for k, v in data.get("generation", {}).items()
        })
        det = DetectorConfig(**data.get("detector", {}))
        cfg = cls(
            backends=tuple(data.get("backends", ("naive", "reordered"))),
            generation=gen,
            detector=det,
            isolation=data.get("isolation", "process"),
            timeout=data.get("timeout", 120.0),
        )
        cfg.validate()
        return cfg

    def to_json(self) -> dict:
        return {
            "backends": list(self.backends),
            "generation": {
                k: list(v) if isinstance(v, tuple) else v
                for k, v in dataclasses.asdict(self.generation).items()
            },
            "detector": dataclasses.asdict(self.detector),
            "isolation": self.isolation,
            "timeout": self.timeout,
        }


@dataclass
class CampaignResult:
    findings: list[Finding]
    nan_events: list[NanEvent]
    crash_events: list[CrashEvent]
    votes: dict[tuple, str]
    coverage: dict
    model_ids: list[str]
    workdir: Optional[Path] = None

    @property
    def clean(self) -> bool:
        return not self.findings and not self.crash_events


def default_workdir() -> Path:
    return Path(os.environ.get("ARCHFUZZ_WORKDIR", "archfuzz-work"))


def coverage_report(specs: list[ModelSpec], gen: GenerationConfig) -> dict:
    selectable = sorted(selectable_kinds(excluded=gen.excluded_kinds))
    used_kinds = sorted({nd.kind for s in specs for nd in s.graph.nodes if nd.kind != "input"})
    used_losses = sorted({s.loss_kind for s in specs})
    covered = [k for k in selectable if k in used_kinds]
    return {
        "selectable_kinds": selectable,
        "used_kinds": used_kinds,
        "kind_coverage": len(covered) / len(selectable) if selectable else 1.0,
        "losses": sorted(gen.losses),
        "used_losses": used_losses,
        "loss_coverage": len(used_losses) / len(gen.losses) if gen.losses else 1.0,
    }


def _execute_in_process(spec: ModelSpec, backend_id: str) -> TraceBundle:
    try:
        backend = resolve_backend(backend_id)
    except KeyError as exc:
        return crash_bundle(backend_id, spec.model_id, str(exc))
    result = run_training_step(spec, backend)
    return bundle_from_result(result, spec.graph)


def _execute_subprocess(model_dir: Path, spec: ModelSpec, backend_id: str,
                        trace_path: Path, timeout: float) -> TraceBundle:
    cmd = [sys.executable, "-m", "archfuzz", "run",
           "--model", str(model_dir), "--backend", backend_id,
           "--trace-out", str(trace_path)]
    try:
        proc = subprocess.run(cmd, capture_output=True, text=True, timeout=timeout)
    except subprocess.TimeoutExpired:
        return crash_bundle(backend_id, spec.model_id, f"timeout after {timeout}s")
    if proc.returncode in (EXIT_OK, EXIT_NAN, EXIT_CRASH) and trace_path.exists():
        return read_trace(trace_path)
    detail = proc.stderr.strip() or f"exit code {proc.returncode}"
    if proc.returncode < 0:
        detail = f"killed by signal {-proc.returncode}: {detail}"
    return crash_bundle(backend_id, spec.model_id, detail)


def run_campaign(cfg: CampaignConfig, workdir: Optional[Path] = None,
                 save_traces: bool = True) -> CampaignResult:
    cfg.validate()
    workdir = Path(workdir) if workdir is not None else default_workdir()
    workdir.mkdir(parents=True, exist_ok=True)

    specs = generate_models(cfg.generation)
    coverage = coverage_report(specs, cfg.generation)

    all_findings: list[Finding] = []
    nan_events: list[NanEvent] = []
    crash_events: list[CrashEvent] = []

    for spec in specs:
        model_dir = workdir / "models" / spec.model_id
        if cfg.isolation == "process" or save_traces:
            save_spec(spec, model_dir)
        bundles: list[TraceBundle] = []
        for backend_id in cfg.backends:
            trace_path = model_dir / f"trace_{backend_id.replace('!', '_')}.bin"
            if cfg.isolation == "process":
                bundle = _execute_subprocess(model_dir, spec, backend_id,
                                             trace_path, cfg.timeout)
            else:
                bundle = _execute_in_process(spec, backend_id)
                if save_traces:
                    write_trace(bundle, trace_path)
            bundles.append(bundle)
        model_nan, model_crash = classify_outcomes(bundles)
        nan_events.extend(model_nan)
        crash_events.extend(model_crash)
        for a, b in itertools.combinations(bundles, 2):
            all_findings.extend(compare_traces(a, b, cfg.detector))

    votes = vote_localize(all_findings, list(cfg.backends))
    result = CampaignResult(
        findings=deduplicate(all_findings),
        nan_events=nan_events,
        crash_events=deduplicate_crashes(crash_events),
        votes=votes,
        coverage=coverage,
        model_ids=[s.model_id for s in specs],
        workdir=workdir,
    )
    write_report(result, cfg, workdir / "report.json")
    return result


def replay_model(workdir: Path, model_id: str, cfg: CampaignConfig) -> list[Finding]:
    """Re-execute one persisted model in process and rerun detection on it."""
    spec = load_spec(Path(workdir) / "models" / model_id)
    bundles = [_execute_in_process(spec, b) for b in cfg.backends]
    findings: list[Finding] = []
    for a, b in itertools.combinations(bundles, 2):
        findings.extend(compare_traces(a, b, cfg.detector))
    return deduplicate(findings)


def write_report(result: CampaignResult, cfg: CampaignConfig, path: Path) -> None:
    report = {
        "config": cfg.to_json(),
        "models": result.model_ids,
        "coverage": result.coverage,
        "findings": [dataclasses.asdict(f) for f in
                     sorted(result.findings, key=lambda f: (f.stage, str(f.layer_kind)))],
        "nan_events": [dataclasses.asdict(e) for e in result.nan_events],
        "crash_events": [dataclasses.asdict(e) for e in result.crash_events],
        "votes": [
            {"model_id": m, "stage": s, "node_id": n, "culprit": culprit}
            for (m, s, n), culprit in sorted(result.votes.items(),
                                             key=lambda kv: (kv[0][0], kv[0][1], str(kv[0][2])))
        ],
        "clean": result.clean,
    }
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


def load_report(path: Path) -> dict:
    return json.loads(Path(path).read_text())
