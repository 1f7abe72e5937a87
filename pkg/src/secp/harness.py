"""End-to-end session runner: gate, assess, decide, cover, revise, audit.

Session config (JSON, paths relative to the config file)::

    {"proposals": "proposals.json",
     "modules": [{"module_id": "Explorer", "fixture": "evaluators/explorer.json"},
                 {"module_id": "X", "questionnaire": "q.json", "expertise": "...",
                  "remote": {"url": "http://...", "timeout": 5, "token_env": "X_TOKEN"}}],
     "secp_v1": "secp_v1.json",
     "modification": "secp_v2_candidate.json",
     "tau": 0.6, "quorum": 4,
     "audit_log": "out/audit.jsonl", "report": "out/report.json",
     "version_store": "out/versions"}
"""
from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from . import __version__
from .audit import AuditLog, SessionState, replay, verify_chain
from .canonical import digest
from .core import ObjectionEvent, ScoreMatrix, SecpParams, load_params, run_secp
from .errors import (
    ChainVerificationError,
    EvaluatorError,
    RevisionError,
    SecpError,
    ValidationError,
)
from .evaluators import Endpoint, ModuleSpec, RemoteEvaluator, ScriptedEvaluator, load_fixture
from .evolution import (
    DEFAULT_QUORUM,
    AdoptionOutcome,
    ModificationProposal,
    ProtocolVersion,
    VersionStore,
    load_modification,
    revise,
    scalar_version,
    secp_version,
    tally_and_adopt,
    unanimity_version,
    validate_invariants,
)
from .gatekeeper import Proposal, check_hard_constraints, load_bundle
from .protocols import (
    DEFAULT_TAU,
    AssessmentRecord,
    CoverageReport,
    Decision,
    coverage,
    decide_scalar,
    decide_unanimity,
    format_percent,
    relative_coverage_change,
)
from .rubric import QuestionnaireSpec

REGIMES = ("unanimity", "scalar", "secp_v1", "secp_v2")
REGIME_TITLES = {
    "unanimity": "Phase 1: Hard Veto Unanimity",
    "scalar": "Control: Weighted Scalar Aggregation",
    "secp_v1": "SECP v1.0 (non-scalar)",
    "secp_v2": "SECP v2.0 (one modification)",
}

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_VALIDATION = 3
EXIT_TAMPER = 4
EXIT_ABORTED = 5
EXIT_INCONSISTENT = 6


class SessionAborted(SecpError):
    """A session stopped after it started writing its audit log."""


@dataclass(frozen=True)
class ModuleSource:
    module_id: str
    fixture: Path | None = None
    endpoint: Endpoint | None = None
    questionnaire: Path | None = None
    expertise: str = ""


@dataclass(frozen=True)
class SessionConfig:
    proposals: Path
    modules: tuple[ModuleSource, ...]
    secp_v1: Path
    modification: Path | None = None
    tau: float = DEFAULT_TAU
    quorum: int = DEFAULT_QUORUM
    audit_log: Path | None = None
    report: Path | None = None
    version_store: Path | None = None
    timeout: float | None = None

    def __post_init__(self):
        ids = [m.module_id for m in self.modules]
        if len(ids) != len(set(ids)):
            raise ValidationError("each module needs exactly one evaluator source")
        for m in self.modules:
            if (m.fixture is None) == (m.endpoint is None):
                raise ValidationError(f"module {m.module_id!r}: give exactly one of fixture or remote")
            if m.endpoint is not None and m.questionnaire is None:
                raise ValidationError(f"remote module {m.module_id!r} needs a questionnaire file")

    @classmethod
    def from_dict(cls, d: Mapping, base: Path = Path(".")) -> "SessionConfig":
        def path(v):
            return None if v is None else (base / v)

        try:
            modules = tuple(
                ModuleSource(
                    module_id=str(m["module_id"]),
                    fixture=path(m.get("fixture")),
                    endpoint=Endpoint.from_dict(m["remote"]) if "remote" in m else None,
                    questionnaire=path(m.get("questionnaire")),
                    expertise=str(m.get("expertise", "")),
                )
                for m in d["modules"]
            )
            return cls(
                proposals=base / d["proposals"],
                modules=modules,
                secp_v1=base / d["secp_v1"],
                modification=path(d.get("modification")),
                tau=float(d.get("tau", DEFAULT_TAU)),
                quorum=int(d.get("quorum", DEFAULT_QUORUM)),
                audit_log=path(d.get("audit_log")),
                report=path(d.get("report")),
                version_store=path(d.get("version_store")),
                timeout=d.get("timeout"),
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed session config: {exc!r}") from exc

    @classmethod
    def load(cls, path: str | Path) -> "SessionConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read session config {path}: {exc}") from exc
        return cls.from_dict(raw, path.parent)

    def summary(self) -> dict:
        return {
            "proposals": str(self.proposals),
            "modules": [
                {"module_id": m.module_id,
                 "source": "remote" if m.endpoint else "scripted",
                 "location": m.endpoint.url if m.endpoint else str(m.fixture)}
                for m in self.modules
            ],
            "secp_v1": str(self.secp_v1),
            "modification": None if self.modification is None else str(self.modification),
            "tau": self.tau,
            "quorum": self.quorum,
        }


@dataclass
class Session:
    """Everything loaded and validated before any decision is made."""

    config: SessionConfig
    proposals: list[Proposal]
    evaluators: list[Any]
    v1_params: SecpParams
    modification: ModificationProposal | None

    @property
    def module_ids(self) -> list[str]:
        return [e.module_id for e in self.evaluators]


def prepare(config: SessionConfig) -> Session:
    proposals = load_bundle(config.proposals)
    feasible_ids = [p.id for p in proposals if check_hard_constraints(p).joint]
    evaluators: list[Any] = []
    for src in config.modules:
        if src.fixture is not None:
            fx = load_fixture(src.fixture, feasible_ids)
            if fx.module_id != src.module_id:
                raise ValidationError(f"fixture {src.fixture} is for module {fx.module_id!r}")
            evaluators.append(ScriptedEvaluator(fx))
        else:
            try:
                q = QuestionnaireSpec.from_dict(json.loads(src.questionnaire.read_text(encoding="utf-8")))
            except (OSError, json.JSONDecodeError) as exc:
                raise ValidationError(f"cannot read questionnaire {src.questionnaire}: {exc}") from exc
            endpoint = src.endpoint
            if config.timeout is not None:
                endpoint = replace(endpoint, timeout=float(config.timeout))
            evaluators.append(RemoteEvaluator(ModuleSpec(src.module_id, src.expertise, q), endpoint))
    params = load_params(config.secp_v1)
    params.validate(n_modules=len(evaluators))
    modification = load_modification(config.modification) if config.modification else None
    return Session(config, proposals, evaluators, params, modification)


@dataclass
class Assessed:
    feasible: list[Proposal]
    records: dict[str, list[AssessmentRecord]]
    events: dict[str, list[ObjectionEvent]]
    answers: dict[tuple[str, str], Any]

    @property
    def all_records(self) -> list[AssessmentRecord]:
        return [r for pid in sorted(self.records) for r in self.records[pid]]

    def digest(self) -> str:
        return digest({
            "records": [r.to_dict() for r in self.all_records],
            "events": {pid: [e.to_dict() for e in evs] for pid, evs in sorted(self.events.items())},
        })

    def matrix(self, modules: Sequence[str]) -> ScoreMatrix:
        return ScoreMatrix.from_assessments(self.all_records, modules)


def _assess_all(session: Session, feasible: list[Proposal], log: AuditLog | None) -> Assessed:
    pairs = [(p, ev) for p in feasible for ev in session.evaluators]

    def one(pair):
        p, ev = pair
        try:
            return ev.assess(p), None
        except EvaluatorError as exc:
            return None, exc

    if any(isinstance(ev, RemoteEvaluator) for ev in session.evaluators) and len(pairs) > 1:
        with ThreadPoolExecutor(max_workers=min(8, len(pairs))) as pool:
            results = list(pool.map(one, pairs))
    else:
        results = [one(pair) for pair in pairs]

    failures = [(pair, exc) for pair, (rec, exc) in zip(pairs, results) if exc is not None]
    if failures:
        for (p, ev), exc in failures:
            if log is not None:
                log.append("evaluator_error", {
                    "module_id": ev.module_id,
                    "proposal_id": p.id,
                    "error": exc.__class__.__name__,
                    "message": str(exc),
                })
        raise SessionAborted(f"{len(failures)} assessment(s) failed; first: {failures[0][1]}")

    records: dict[str, list[AssessmentRecord]] = {p.id: [] for p in feasible}
    events: dict[str, list[ObjectionEvent]] = {p.id: [] for p in feasible}
    answers: dict[tuple[str, str], Any] = {}
    for (p, ev), (rec, _) in zip(pairs, results):
        records[p.id].append(rec)
        evs = list(ev.events(p))
        events[p.id].extend(evs)
        answers[(ev.module_id, p.id)] = ev.answers(p)
        if log is not None:
            log.append("assessment", {
                "record": rec.to_dict(),
                "answers": answers[(ev.module_id, p.id)],
                "events": [e.to_dict() for e in evs],
                "source": "remote" if isinstance(ev, RemoteEvaluator) else "scripted",
            })
    return Assessed(feasible, records, events, answers)


def execute(
    version: ProtocolVersion,
    assessed: Assessed,
    modules: Sequence[str],
) -> tuple[dict[str, Decision], dict[str, Any]]:
    """Apply one protocol version to the feasible assessment set.

    Returns decisions keyed by proposal id and any intermediate states.
    Only proposals that passed the gate ever reach this function.
    """
    label = version.label
    if version.kind == "unanimity":
        return {pid: decide_unanimity(recs, modules, label) for pid, recs in assessed.records.items()}, {}
    if version.kind == "scalar":
        return {pid: decide_scalar(recs, version.tau, modules, label)
                for pid, recs in assessed.records.items()}, {}
    if version.kind == "secp":
        inv = validate_invariants(version, n_modules=len(modules))
        if not inv.passed:
            raise ValidationError(f"refusing to execute {label}: " + "; ".join(inv.problems))
        if not assessed.records:
            return {}, {}
        decisions, transcripts = run_secp(
            version.params, assessed.matrix(modules), assessed.events, assessed.all_records, label
        )
        return decisions, transcripts
    raise ValidationError(f"unknown protocol kind {version.kind!r}")


@dataclass
class ExperimentReport:
    coverage: dict[str, CoverageReport]
    versions: dict[str, str]
    relative_change_pct: Any
    absolute_change: int
    accepted_table: dict[str, dict[str, str]]
    invariants: dict[str, Any]
    modification: dict[str, Any] | None
    assessment_digest: str
    audit_head_digest: str

    @property
    def counts(self) -> tuple[int, ...]:
        return tuple(self.coverage[r].delta_s for r in REGIMES)

    def to_dict(self) -> dict:
        return {
            "regimes": list(REGIMES),
            "coverage": {r: self.coverage[r].to_dict() for r in REGIMES},
            "versions": dict(self.versions),
            "relative_change_pct": self.relative_change_pct,
            "absolute_change": self.absolute_change,
            "accepted_table": self.accepted_table,
            "invariants": self.invariants,
            "modification": self.modification,
            "assessment_digest": self.assessment_digest,
            "audit_head_digest": self.audit_head_digest,
        }

    def rows(self) -> list[dict]:
        return [
            {
                "regime": r,
                "protocol": REGIME_TITLES[r],
                "protocol_version_id": self.coverage[r].protocol_version_id,
                "delta_s": self.coverage[r].delta_s,
                "accepted": " ".join(self.coverage[r].accepted_ids),
            }
            for r in REGIMES
        ]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=["regime", "protocol", "protocol_version_id", "delta_s", "accepted"],
                                lineterminator="\n")
        writer.writeheader()
        writer.writerows(self.rows())
        return buf.getvalue()

    def render(self) -> str:
        width = max(len(t) for t in REGIME_TITLES.values())
        lines = [f"{'Protocol':<{width}}  {'dS':>2}  Accepted proposals", "-" * (width + 40)]
        for row in self.rows():
            accepted = ", ".join(row["accepted"].split()) or "(none)"
            lines.append(f"{row['protocol']:<{width}}  {row['delta_s']:>2}  {accepted}")
        rel = self.relative_change_pct
        rel_text = "undefined (v1.0 coverage is 0)" if rel is None else f"{rel}%"
        lines.append("")
        lines.append(f"Relative coverage change v1.0 -> v2.0: {rel_text} (absolute {self.absolute_change:+d})")
        if self.modification is not None:
            m = self.modification
            verdict = "adopted" if m.get("adopted") else "not adopted"
            lines.append(f"Modification {m.get('candidate_id')}: {verdict}; "
                         f"{m.get('approvals', 0)} approvals (quorum {m.get('quorum')})")
            for reason in m.get("reasons", ()):
                lines.append(f"  {reason}")
        return "\n".join(lines)


def _pct(rel) -> Any:
    if rel is None:
        return None
    return rel.numerator if rel.denominator == 1 else format_percent(rel)[:-1]


def run_experiment(config: SessionConfig, *, overwrite: bool = False,
                   log: AuditLog | None = None) -> ExperimentReport:
    if log is None:
        log = AuditLog(config.audit_log, overwrite=overwrite)
    try:
        session = prepare(config)
    except SecpError as exc:
        log.append("session_start", {"engine": __version__, "config": config.summary(), "valid": False})
        log.seal("aborted", reason=f"{exc.__class__.__name__}: {exc}")
        raise
    try:
        report = _run(session, log)
    except (SecpError, ValueError) as exc:
        if not log.sealed:
            log.seal("aborted", reason=f"{exc.__class__.__name__}: {exc}")
        if isinstance(exc, SessionAborted):
            raise
        raise SessionAborted(str(exc)) from exc
    if config.report is not None:
        write_report(report, config.report)
    return report


def write_report(report: ExperimentReport, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    path.with_suffix(".csv").write_text(report.to_csv(), encoding="utf-8")


def _run(session: Session, log: AuditLog) -> ExperimentReport:
    config = session.config
    modules = session.module_ids
    log.append("session_start", {
        "engine": __version__,
        "config": config.summary(),
        "valid": True,
        "modules": [{"module_id": e.module_id, "expertise": e.spec.expertise,
                     "questionnaire": e.spec.questionnaire.to_dict()} for e in session.evaluators],
        "proposals": [p.to_dict() for p in session.proposals],
    })

    # Step 1: hard-constraint gate. Infeasible proposals stop here.
    feasible = []
    for p in sorted(session.proposals, key=lambda p: p.id):
        rep = check_hard_constraints(p)
        log.append("gate_report", {**rep.to_dict(), "rejected_without_protocol": not rep.joint})
        if rep.joint:
            feasible.append(p)
    feasible_ids = [p.id for p in feasible]

    # Step 2: one assessment per (module, feasible proposal).
    assessed = _assess_all(session, feasible, log)
    input_digest = assessed.digest()

    store = VersionStore(config.version_store)
    v1 = secp_version(session.v1_params, rationale="Initial non-scalar protocol designed after the unanimity deadlock.")
    if store.ids():
        raise ValidationError(f"version store {config.version_store} is not empty")
    store.put(v1, activate=True)

    decisions: dict[str, dict[str, Decision]] = {}
    reports: dict[str, CoverageReport] = {}
    versions: dict[str, str] = {}
    digests: dict[str, str] = {}
    rounds_used: dict[str, tuple[int, int]] = {}

    def run_regime(regime: str, version: ProtocolVersion) -> None:
        regime_digest = assessed.digest()
        digests[regime] = regime_digest
        log.append("protocol_state", {
            "phase": "start",
            "regime": regime,
            "protocol_name": version.name,
            "protocol_version_id": version.label,
            "version": version.content(),
            "content_hash": version.content_hash,
            "assessment_digest": regime_digest,
            "feasible_ids": feasible_ids,
        })
        result, states = execute(version, assessed, modules)
        for pid in feasible_ids:
            if pid in states:
                log.append("protocol_state", {
                    "phase": "deliberation",
                    "regime": regime,
                    "protocol_version_id": version.label,
                    "transcript": states[pid].to_dict(),
                })
            log.append("decision", {
                "regime": regime,
                "protocol_version_id": version.label,
                "decision": result[pid].to_dict(),
                "assessments": [r.to_dict() for r in assessed.records[pid]],
            })
        cov = coverage(result.values(), feasible_ids)
        cov = CoverageReport(version.label, cov.accepted_ids, len(feasible_ids))
        log.append("coverage", {"regime": regime, "coverage": cov.to_dict()})
        decisions[regime] = result
        reports[regime] = cov
        versions[regime] = version.label
        if version.params is not None:
            used = max((len(t.rounds) for t in states.values()), default=0)
            rounds_used[regime] = (used, version.params.t_max)

    run_regime("unanimity", unanimity_version())
    run_regime("scalar", scalar_version(config.tau))
    run_regime("secp_v1", v1)

    # One governed modification step between v1.0 and v2.0.
    modification_summary = None
    active = v1
    if session.modification is not None:
        proposal = ModificationProposal.from_dict(session.modification.to_dict())
        for ev in session.evaluators:
            if ev.module_id in proposal.votes:
                continue
            vote = ev.vote(proposal)
            if vote is not None:
                proposal.cast(ev.module_id, vote)
        try:
            candidate = revise(v1, proposal, version_id=store.next_id())
        except RevisionError as exc:
            log.append("modification_proposed", {"modification": proposal.to_dict(), "current": v1.label,
                                                 "constructed": False, "error": str(exc)})
            log.append("modification_rejected", {"modification": proposal.to_dict(), "current": v1.label,
                                                 "active": v1.label, "adopted": False,
                                                 "approvals": proposal.approvals, "quorum": config.quorum,
                                                 "reasons": [f"revision failed: {exc}"]})
            modification_summary = {"candidate_id": proposal.candidate_id, "adopted": False,
                                    "approvals": proposal.approvals, "quorum": config.quorum,
                                    "reasons": [f"revision failed: {exc}"], "inv": None}
        else:
            inv = validate_invariants(candidate, n_modules=len(modules))
            log.append("modification_proposed", {"modification": proposal.to_dict(), "current": v1.label,
                                                 "constructed": True, "candidate": candidate.content(),
                                                 "candidate_hash": candidate.content_hash,
                                                 "inv": inv.to_dict()})
            outcome: AdoptionOutcome = tally_and_adopt(
                v1, proposal, candidate, inv, modules=modules, log=log, quorum=config.quorum, store=store
            )
            active = outcome.active
            modification_summary = {"candidate_id": proposal.candidate_id, **outcome.to_dict()}

    run_regime("secp_v2", active)

    before, after = reports["secp_v1"], reports["secp_v2"]
    rel = None if before.delta_s == 0 else relative_coverage_change(before, after)
    all_ids = sorted(p.id for p in session.proposals)
    table = {
        pid: {r: (decisions[r][pid].outcome.value if pid in feasible_ids else "Gate-rejected") for r in REGIMES}
        for pid in all_ids
    }
    accepted_everywhere = set().union(*(set(reports[r].accepted_ids) for r in REGIMES))
    invariants = {
        "feasibility_gating": accepted_everywhere <= set(feasible_ids),
        "termination": all(used <= t_max for used, t_max in rounds_used.values()),
        "regime_isolation": len(set(digests.values())) == 1 and input_digest in digests.values(),
        "auditability": True,
        "version_control": store.active_id == active.version_id,
        "modification_inv_pass": None if not modification_summary or not modification_summary.get("inv")
        else modification_summary["inv"]["pass"],
    }
    report = ExperimentReport(
        coverage=reports,
        versions=versions,
        relative_change_pct=_pct(rel),
        absolute_change=after.delta_s - before.delta_s,
        accepted_table=table,
        invariants=invariants,
        modification=modification_summary,
        assessment_digest=input_digest,
        audit_head_digest=log.head_digest,
    )
    log.append("session_report", report.to_dict())
    log.seal("completed")
    return report


@dataclass
class AuditSummary:
    ok: bool
    exit_code: int
    status: str
    message: str
    first_bad_sequence: int | None = None
    state: SessionState | None = None
    report_matches: bool | None = None


def verify_audit(log_path: str | Path, report_path: str | Path | None = None) -> AuditSummary:
    check = verify_chain(log_path)
    if not check.ok:
        return AuditSummary(False, EXIT_TAMPER, "tampered",
                            f"chain broken at sequence {check.first_bad_sequence}: {check.reason}",
                            check.first_bad_sequence)
    state = replay(log_path)
    if state.status == "aborted" or state.status in ("open", "running", "empty"):
        return AuditSummary(False, EXIT_ABORTED, state.status,
                            f"session did not complete (status {state.status})", state=state)
    report_matches = None
    problems = list(state.mismatches)
    if state.report is None:
        problems.append("no embedded session report")
    if report_path is not None and state.report is not None:
        emitted = json.loads(Path(report_path).read_text(encoding="utf-8"))
        report_matches = emitted == state.report
        if not report_matches:
            problems.append("report file differs from the report embedded in the log")
    if problems:
        return AuditSummary(False, EXIT_INCONSISTENT, state.status, "; ".join(problems),
                            state=state, report_matches=report_matches)
    return AuditSummary(True, EXIT_OK, state.status, "chain verified; replay matches embedded report",
                        state=state, report_matches=report_matches)


SWEEP_PARAMS = ("tau", "rho")


def sweep(config: SessionConfig, parameter: str, values: Iterable[float]) -> list[dict]:
    """Coverage per parameter value with every other input fixed.

    ``tau`` sweeps the scalar control; ``rho`` sweeps the v1.0 SECP parameters.
    """
    if parameter not in SWEEP_PARAMS:
        raise ValidationError(f"unknown sweep parameter {parameter!r}; expected one of {SWEEP_PARAMS}")
    values = [float(v) for v in values]
    bad = [v for v in values if not (0.0 <= v <= 1.0)]
    if bad:
        raise ValidationError(f"{parameter} values outside [0, 1]: {bad}")
    if not values:
        return []
    session = prepare(config)
    feasible = [p for p in session.proposals if check_hard_constraints(p).joint]
    assessed = _assess_all(session, feasible, None)
    modules = session.module_ids
    feasible_ids = [p.id for p in feasible]
    rows = []
    for v in values:
        if parameter == "tau":
            version = scalar_version(v)
        else:
            version = secp_version(replace(session.v1_params, rho=v),
                                   rationale=f"v1.0 parameters with rho fixed at {v} for a coverage sweep")
        result, _ = execute(version, assessed, modules)
        cov = coverage(result.values(), feasible_ids) if result else CoverageReport(version.label, (), 0)
        rows.append({
            "parameter": parameter,
            "value": v,
            "protocol_version_id": version.label,
            "delta_s": cov.delta_s,
            "accepted": " ".join(cov.accepted_ids),
        })
    return rows


def sweep_csv(rows: Sequence[Mapping]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["parameter", "value", "protocol_version_id", "delta_s", "accepted"],
                            lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()
