"""Command line interface.

Exit codes for `run`: 0 ok, 3 non-finite values in the trace, 4 crash recorded
in the trace. `compare` and `campaign` exit 1 when findings survive dedup.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .campaign import (
    EXIT_CRASH,
    EXIT_NAN,
    EXIT_OK,
    CampaignConfig,
    default_workdir,
    load_report,
    replay_model,
    run_campaign,
)
from .detector import DetectorConfig, compare_traces, deduplicate
from .engine import list_backends, resolve_backend, run_training_step
from .fuzzer import GenerationConfig, generate_models
from .modelspec import load_spec, save_spec
from .trace import bundle_from_result, crash_bundle, read_trace, write_trace


def _gen_config_from_args(args) -> GenerationConfig:
    cfg = GenerationConfig()
    if args.config:
        data = json.loads(Path(args.config).read_text())
        cfg = GenerationConfig(**{
            k: tuple(v) if isinstance(v, list) else v for k, v in data.items()
        })
    if args.n is not None:
        cfg.n_models = args.n
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.validate()
    return cfg


def cmd_generate(args) -> int:
    cfg = _gen_config_from_args(args)
    out = Path(args.out)
    specs = generate_models(cfg)
    for spec in specs:
        save_spec(spec, out / spec.model_id)
    manifest = {
        "config": {k: list(v) if isinstance(v, tuple) else v
                   for k, v in dataclasses.asdict(cfg).items()},
        "models": [s.model_id for s in specs],
    }
    (out / "generation.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"generated {len(specs)} models in {out}")
    return 0


def cmd_run(args) -> int:
    spec = load_spec(args.model)
    backend = resolve_backend(args.backend)
    result = run_training_step(spec, backend)
    bundle = bundle_from_result(result, spec.graph)
    write_trace(bundle, args.trace_out)
    if result.outcome == "nan":
        print(f"{spec.model_id}/{args.backend}: non-finite at node "
              f"{result.first_nonfinite_node} ({result.first_nonfinite_section})",
              file=sys.stderr)
        return EXIT_NAN
    if result.outcome == "crash":
        print(f"{spec.model_id}/{args.backend}: {result.message}", file=sys.stderr)
        return EXIT_CRASH
    return EXIT_OK


def cmd_compare(args) -> int:
    a = read_trace(args.trace_a)
    b = read_trace(args.trace_b)
    cfg = DetectorConfig(threshold=args.threshold, epsilon=args.epsilon)
    findings = deduplicate(compare_traces(a, b, cfg))
    print(json.dumps([dataclasses.asdict(f) for f in findings], indent=2))
    return 1 if findings else 0


def cmd_campaign(args) -> int:
    cfg = CampaignConfig.from_json(json.loads(Path(args.config).read_text()))
    workdir = Path(args.workdir) if args.workdir else default_workdir()
    result = run_campaign(cfg, workdir)
    print(f"models: {len(result.model_ids)}")
    print(f"kind coverage: {result.coverage['kind_coverage']:.1%}, "
          f"loss coverage: {result.coverage['loss_coverage']:.1%}")
    print(f"findings: {len(result.findings)}, nan events: {len(result.nan_events)}, "
          f"crash events: {len(result.crash_events)}")
    print(f"report: {workdir / 'report.json'}")
    return 0 if result.clean else 1


def cmd_report(args) -> int:
    workdir = Path(args.workdir) if args.workdir else default_workdir()
    report = load_report(workdir / "report.json")
    print(f"models: {len(report['models'])}")
    cov = report["coverage"]
    print(f"kind coverage: {cov['kind_coverage']:.1%} "
          f"({len(cov['used_kinds'])}/{len(cov['selectable_kinds'])} kinds)")
    print(f"loss coverage: {cov['loss_coverage']:.1%}")
    for f in report["findings"]:
        node = f["node_id"] if f["node_id"] is not None else "-"
        print(f"  [{f['stage']}] {f['model_id']} node {node} {f['layer_kind']} "
              f"{f['backend_pair'][0]} vs {f['backend_pair'][1]} "
              f"distance {f['distance']:.4g}")
    for e in report["nan_events"]:
        print(f"  [nan] {e['model_id']} backends {','.join(e['affected_backends'])} "
              f"first at node {e['first_nonfinite_node']}")
    for e in report["crash_events"]:
        print(f"  [crash] {e['model_id']} {e['backend_id']}: {e['normalized']}")
    for v in report["votes"]:
        print(f"  [vote] {v['model_id']} {v['stage']} node {v['node_id']} "
              f"-> {v['culprit']}")
    return 0


def cmd_replay(args) -> int:
    workdir = Path(args.workdir) if args.workdir else default_workdir()
    report = load_report(workdir / "report.json")
    cfg = CampaignConfig.from_json(report["config"])
    findings = replay_model(workdir, args.model, cfg)
    print(json.dumps([dataclasses.asdict(f) for f in findings], indent=2))
    return 1 if findings else 0


def cmd_backends(args) -> int:
    for entry in list_backends():
        tag = f" [{entry['kind']}]" if entry["kind"] != "honest" else ""
        print(f"{entry['id']}{tag}: {entry['description']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="archfuzz",
                                     description="differential fuzzing of generated "
                                                 "neural architectures")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a corpus of model directories")
    p.add_argument("--config", help="JSON file with generation settings")
    p.add_argument("--n", type=int, help="number of models")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("run", help="run one training step on one backend")
    p.add_argument("--model", required=True, help="model directory")
    p.add_argument("--backend", required=True, help="backend id, e.g. naive or naive!fault")
    p.add_argument("--trace-out", required=True, help="trace file to write")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="compare two trace files")
    p.add_argument("--trace-a", required=True)
    p.add_argument("--trace-b", required=True)
    p.add_argument("--threshold", type=float, default=DetectorConfig.threshold)
    p.add_argument("--epsilon", type=float, default=DetectorConfig.epsilon)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("campaign", help="run a full fuzzing campaign from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--workdir", help="artifact directory (default $ARCHFUZZ_WORKDIR)")
    p.set_defaults(func=cmd_campaign)

    p = sub.add_parser("report", help="summarize a campaign report")
    p.add_argument("--workdir")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("replay", help="re-run detection for one persisted model")
    p.add_argument("--workdir")
    p.add_argument("--model", required=True, help="model id, e.g. m0003")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("backends", help="list available backends")
    p.set_defaults(func=cmd_backends)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)
