"""Command-line entry point: ``secp run|verify|sweep|replay``.

Exit codes: 0 success, 1 internal error, 2 usage error, 3 validation
failure, 4 audit tamper detected, 5 aborted session, 6 replay/report
inconsistency.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .audit import replay
from .errors import ChainVerificationError, SecpError, ValidationError
from .harness import (
    EXIT_ABORTED,
    EXIT_INCONSISTENT,
    EXIT_INTERNAL,
    EXIT_OK,
    EXIT_TAMPER,
    EXIT_VALIDATION,
    REGIME_TITLES,
    SWEEP_PARAMS,
    SessionAborted,
    SessionConfig,
    run_experiment,
    sweep,
    sweep_csv,
    verify_audit,
)


def _parse_values(text: str) -> list[float]:
    text = text.strip()
    if not text:
        return []
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None


def _load_config(args) -> SessionConfig:
    config = SessionConfig.load(args.config)
    overrides = {}
    out_dir = getattr(args, "out_dir", None)
    if out_dir is not None:
        out_dir = Path(out_dir)
        overrides["audit_log"] = out_dir / "audit.jsonl"
        overrides["report"] = out_dir / "report.json"
    if getattr(args, "quorum", None) is not None:
        overrides["quorum"] = args.quorum
    if getattr(args, "tau", None) is not None:
        overrides["tau"] = args.tau
    if getattr(args, "timeout", None) is not None:
        overrides["timeout"] = args.timeout
    return replace(config, **overrides) if overrides else config


def cmd_run(args) -> int:
    config = _load_config(args)
    report = run_experiment(config, overwrite=args.overwrite)
    print(report.render())
    if args.csv:
        print()
        print(report.to_csv(), end="")
    if config.report is not None:
        print(f"\nreport: {config.report} (+ {config.report.with_suffix('.csv').name})")
    if config.audit_log is not None:
        print(f"audit log: {config.audit_log}")
    return EXIT_OK


def cmd_verify(args) -> int:
    summary = verify_audit(args.log, args.report)
    print(f"status: {summary.status}")
    print(summary.message)
    if summary.state is not None:
        for regime, n in summary.state.coverage_counts.items():
            accepted = ", ".join(summary.state.coverage[regime]["accepted_ids"]) or "(none)"
            print(f"  {REGIME_TITLES.get(regime, regime)}: {n}  [{accepted}]")
    return summary.exit_code


def _reason(trace) -> str:
    for event in trace:
        step = event.get("step")
        if step == "scalar":
            return f"mean {event['mean']:.4f} vs tau {event['tau']}"
        if step == "unanimity":
            return f"{event['vetoes']} veto(es)" if event["vetoes"] else ""
        if step in ("pareto", "regret", "support", "objections") and event.get("passed") is False:
            if step == "pareto":
                return "dominated by " + ", ".join(event["dominated_by"])
            if step == "regret":
                return f"regret {event['r_max']} > rho {event['rho']}"
            return f"{step} not met within {event['rounds_run']} round(s)"
        if step == "accept":
            return f"accepted in round {event['round']}"
    return ""


def cmd_replay(args) -> int:
    try:
        state = replay(args.log)
    except ChainVerificationError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_TAMPER
    if args.json:
        out = {
            "status": state.status,
            "entries": state.entries,
            "coverage": state.coverage,
            "decisions": state.decisions,
            "active_versions": state.active_versions,
            "modifications": [m["kind"] for m in state.modifications],
            "rollbacks": state.rollbacks,
            "mismatches": state.mismatches,
        }
        print(json.dumps(out, indent=2, sort_keys=True))
    else:
        print(f"status: {state.status}  entries: {state.entries}  head: {state.head_digest}")
        for regime in state.regimes:
            print(f"{REGIME_TITLES.get(regime, regime)} [{state.versions[regime]}]")
            for pid, d in sorted(state.decisions[regime].items()):
                print(f"  {pid:<8} {d['outcome']:<7} {_reason(d['rationale_trace'])}")
            print(f"  coverage: {state.coverage[regime]['delta_s']}")
        for name, label in sorted(state.active_versions.items()):
            print(f"active {name}: {label}")
        for m in state.mismatches:
            print(f"MISMATCH: {m}")
    if state.status == "aborted":
        return EXIT_ABORTED
    return EXIT_OK if state.consistent else EXIT_INCONSISTENT


def cmd_sweep(args) -> int:
    config = _load_config(args)
    rows = sweep(config, args.param, args.values)
    text = sweep_csv(rows)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="secp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the four-regime experiment")
    run.add_argument("--config", required=True)
    run.add_argument("--out-dir", help="write audit.jsonl and report.json here instead")
    run.add_argument("--overwrite", action="store_true", help="replace an existing audit log")
    run.add_argument("--quorum", type=int)
    run.add_argument("--tau", type=float)
    run.add_argument("--timeout", type=float, help="remote evaluator timeout in seconds")
    run.add_argument("--csv", action="store_true", help="also print the coverage table as CSV")
    run.set_defaults(func=cmd_run)

    ver = sub.add_parser("verify", help="verify an audit log and replay it")
    ver.add_argument("--log", required=True)
    ver.add_argument("--report", help="report file to compare with the embedded report")
    ver.set_defaults(func=cmd_verify)

    rep = sub.add_parser("replay", help="reconstruct decisions from an audit log")
    rep.add_argument("--log", required=True)
    rep.add_argument("--json", action="store_true")
    rep.set_defaults(func=cmd_replay)

    sw = sub.add_parser("sweep", help="coverage across values of tau or rho")
    sw.add_argument("--config", required=True)
    sw.add_argument("--param", required=True, choices=SWEEP_PARAMS)
    sw.add_argument("--values", required=True, type=_parse_values)
    sw.add_argument("--out", help="also write the CSV table to this file")
    sw.add_argument("--timeout", type=float)
    sw.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SessionAborted as exc:
        print(f"session aborted: {exc}", file=sys.stderr)
        return EXIT_ABORTED
    except ValidationError as exc:
        print(f"validation failed: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except SecpError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
