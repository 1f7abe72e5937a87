"""Append-only, hash-chained audit log with verification and replay.

One session per file, one canonical JSON object per line::

    {"digest", "kind", "line_digest", "payload", "prev_digest", "sequence", "timestamp"}

``digest`` is SHA-256 over the canonical bytes of
``{"kind", "payload", "prev_digest", "sequence"}``; the genesis entry links to
64 zero hex digits. Timestamps stay out of the chain so identical sessions
produce identical digests. ``line_digest`` is SHA-256 over the canonical
bytes of every other field (timestamp included), so no stored byte is
unprotected. A verifier also requires each line to be byte-identical to the
canonical re-serialization of what it parses to.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping

from .canonical import ZERO_DIGEST, canonical_bytes, digest
from .errors import ChainVerificationError, SealedLogError, SecpError

KINDS = (
    "session_start",
    "gate_report",
    "assessment",
    "evaluator_error",
    "protocol_state",
    "decision",
    "coverage",
    "modification_proposed",
    "modification_adopted",
    "modification_rejected",
    "rollback",
    "session_report",
    "session_sealed",
)
ENTRY_FIELDS = ("digest", "kind", "line_digest", "payload", "prev_digest", "sequence", "timestamp")


def _utcnow() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="microseconds")


def chain_digest(sequence: int, kind: str, payload: Any, prev_digest: str) -> str:
    return digest({"kind": kind, "payload": payload, "prev_digest": prev_digest, "sequence": sequence})


@dataclass(frozen=True)
class AuditEntry:
    sequence: int
    timestamp: str
    kind: str
    payload: Any
    prev_digest: str
    digest: str
    line_digest: str

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in ENTRY_FIELDS}

    def to_line(self) -> bytes:
        return canonical_bytes(self.to_dict()) + b"\n"


def _line_digest(fields: Mapping[str, Any]) -> str:
    return digest({k: v for k, v in fields.items() if k != "line_digest"})


class AuditLog:
    """Single-writer session log. ``path=None`` keeps entries in memory only."""

    def __init__(self, path: str | Path | None = None, *, overwrite: bool = False,
                 clock: Callable[[], str] = _utcnow):
        self.path = Path(path) if path is not None else None
        self._clock = clock
        self.entries: list[AuditEntry] = []
        self.sealed = False
        if self.path is not None:
            if self.path.exists() and self.path.stat().st_size and not overwrite:
                raise SecpError(f"audit log {self.path} already exists; one session per file")
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_bytes(b"")

    @property
    def head_digest(self) -> str:
        return self.entries[-1].digest if self.entries else ZERO_DIGEST

    def __len__(self) -> int:
        return len(self.entries)

    def append(self, kind: str, payload: Any) -> AuditEntry:
        if self.sealed:
            raise SealedLogError("cannot append to a sealed audit log")
        if kind not in KINDS:
            raise ValueError(f"unknown audit entry kind {kind!r}")
        # Round-trip so the in-memory payload equals what a reader will parse.
        payload = json.loads(canonical_bytes(payload))
        seq = len(self.entries)
        prev = self.head_digest
        fields = {
            "sequence": seq,
            "timestamp": self._clock(),
            "kind": kind,
            "payload": payload,
            "prev_digest": prev,
            "digest": chain_digest(seq, kind, payload, prev),
        }
        entry = AuditEntry(line_digest=_line_digest(fields), **fields)
        if self.path is not None:
            with self.path.open("ab") as fh:
                fh.write(entry.to_line())
                fh.flush()
        self.entries.append(entry)
        return entry

    def seal(self, status: str = "completed", **info: Any) -> AuditEntry:
        entry = self.append("session_sealed", {"status": status, **info})
        self.sealed = True
        return entry

    def to_bytes(self) -> bytes:
        return b"".join(e.to_line() for e in self.entries)


@dataclass(frozen=True)
class VerificationReport:
    ok: bool
    entries: int
    first_bad_sequence: int | None = None
    reason: str = ""


def _split_lines(data: bytes) -> list[bytes]:
    if not data:
        return []
    lines = data.split(b"\n")
    if lines[-1] == b"":
        lines.pop()
    else:
        lines[-1] = lines[-1] + b"\x00"  # mark missing terminator so the canonical check fails
    return lines


def _check_line(i: int, raw: bytes, prev: str) -> tuple[AuditEntry | None, str]:
    try:
        obj = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        return None, f"unparseable entry ({exc.__class__.__name__})"
    if not isinstance(obj, dict) or set(obj) != set(ENTRY_FIELDS):
        return None, "entry fields do not match the audit schema"
    try:
        if canonical_bytes(obj) != raw:
            return None, "entry is not in canonical form"
    except (TypeError, ValueError):
        return None, "entry is not serializable"
    if obj["sequence"] != i or isinstance(obj["sequence"], bool):
        return None, f"sequence {obj['sequence']!r} where {i} expected"
    if obj["kind"] not in KINDS:
        return None, f"unknown kind {obj['kind']!r}"
    if obj["prev_digest"] != prev:
        return None, "prev_digest does not link to the previous entry"
    if chain_digest(i, obj["kind"], obj["payload"], obj["prev_digest"]) != obj["digest"]:
        return None, "digest does not recompute"
    if _line_digest(obj) != obj["line_digest"]:
        return None, "line_digest does not recompute"
    return AuditEntry(**obj), ""


def read_entries(source: str | Path | bytes | AuditLog) -> list[AuditEntry]:
    """Parse and verify; raises ChainVerificationError at the first bad entry."""
    data = _source_bytes(source)
    prev = ZERO_DIGEST
    out = []
    for i, raw in enumerate(_split_lines(data)):
        entry, reason = _check_line(i, raw, prev)
        if entry is None:
            raise ChainVerificationError(i, reason)
        out.append(entry)
        prev = entry.digest
    return out


def _source_bytes(source: str | Path | bytes | AuditLog) -> bytes:
    if isinstance(source, AuditLog):
        return source.to_bytes()
    if isinstance(source, (bytes, bytearray)):
        return bytes(source)
    return Path(source).read_bytes()


def verify_chain(source: str | Path | bytes | AuditLog) -> VerificationReport:
    try:
        entries = read_entries(source)
    except ChainVerificationError as exc:
        return VerificationReport(False, exc.first_bad_sequence, exc.first_bad_sequence, exc.reason)
    return VerificationReport(True, len(entries))


@dataclass
class SessionState:
    """What a log says happened, rebuilt from entries alone."""

    status: str = "empty"
    regimes: list[str] = field(default_factory=list)
    decisions: dict[str, dict[str, dict]] = field(default_factory=dict)
    coverage: dict[str, dict] = field(default_factory=dict)
    logged_coverage: dict[str, dict] = field(default_factory=dict)
    versions: dict[str, str] = field(default_factory=dict)
    active_versions: dict[str, str] = field(default_factory=dict)
    gate: dict[str, dict] = field(default_factory=dict)
    assessments: dict[tuple[str, str], dict] = field(default_factory=dict)
    modifications: list[dict] = field(default_factory=list)
    rollbacks: list[dict] = field(default_factory=list)
    errors: list[dict] = field(default_factory=list)
    report: dict | None = None
    mismatches: list[str] = field(default_factory=list)
    head_digest: str = ZERO_DIGEST
    entries: int = 0

    @property
    def coverage_counts(self) -> dict[str, int]:
        return {r: self.coverage[r]["delta_s"] for r in self.regimes if r in self.coverage}

    @property
    def consistent(self) -> bool:
        return not self.mismatches


def _rebuild_coverage(regime: str, decisions: Mapping[str, dict], version: str, feasible: int) -> dict:
    accepted = sorted(pid for pid, d in decisions.items() if d["outcome"] == "Accept")
    return {
        "protocol_version_id": version,
        "accepted_ids": accepted,
        "delta_s": len(accepted),
        "feasible_count": feasible,
    }


def replay(source: str | Path | bytes | AuditLog | Iterable[AuditEntry]) -> SessionState:
    if isinstance(source, (str, Path, bytes, bytearray, AuditLog)):
        entries = read_entries(source)
    else:
        entries = list(source)
    state = SessionState()
    if not entries:
        return state
    state.status = "open"
    state.entries = len(entries)
    state.head_digest = entries[-1].digest
    feasible: dict[str, int] = {}
    for e in entries:
        p = e.payload
        if e.kind == "session_start":
            state.status = "running"
        elif e.kind == "gate_report":
            state.gate[p["proposal_id"]] = p
        elif e.kind == "assessment":
            rec = p["record"]
            state.assessments[(rec["module_id"], rec["proposal_id"])] = p
        elif e.kind == "evaluator_error":
            state.errors.append(p)
        elif e.kind == "protocol_state":
            if p.get("phase", "start") != "start":
                continue
            regime = p["regime"]
            if regime not in state.regimes:
                state.regimes.append(regime)
            state.versions[regime] = p["protocol_version_id"]
            state.active_versions[p.get("protocol_name", regime)] = p["protocol_version_id"]
            state.decisions.setdefault(regime, {})
            feasible[regime] = len(p.get("feasible_ids", ()))
        elif e.kind == "decision":
            regime = p["regime"]
            decision = p["decision"]
            if decision["proposal_id"] in state.decisions.setdefault(regime, {}):
                state.mismatches.append(f"{regime}: duplicate decision for {decision['proposal_id']}")
            state.decisions[regime][decision["proposal_id"]] = decision
        elif e.kind == "coverage":
            state.logged_coverage[p["regime"]] = p["coverage"]
        elif e.kind in ("modification_proposed", "modification_adopted", "modification_rejected"):
            state.modifications.append({"kind": e.kind, **p})
            if e.kind == "modification_adopted":
                name = p["active"].split("/")[0]
                state.active_versions[name] = p["active"]
        elif e.kind == "rollback":
            state.rollbacks.append(p)
            state.active_versions[p["name"]] = p["active"]
        elif e.kind == "session_report":
            state.report = p
        elif e.kind == "session_sealed":
            state.status = p["status"]

    for regime in state.regimes:
        rebuilt = _rebuild_coverage(regime, state.decisions.get(regime, {}),
                                    state.versions[regime], feasible.get(regime, 0))
        state.coverage[regime] = rebuilt
        logged = state.logged_coverage.get(regime)
        if logged is not None and logged != rebuilt:
            state.mismatches.append(f"{regime}: logged coverage differs from decisions")
        if state.report is not None:
            reported = state.report.get("coverage", {}).get(regime)
            if reported is not None and reported != rebuilt:
                state.mismatches.append(f"{regime}: embedded report differs from decisions")
    return state
