"""Versioned protocols, governed revision, and rollback.

A revision is built from the current SECP version and one modification
proposal, checked against the invariant predicate, and adopted only when
the check passes and enough modules approve. Rejected candidates leave the
current version active. Every stored version is kept as canonical bytes
whose SHA-256 is recorded in the store manifest.

Store layout::

    <root>/manifest.json        {"active": 2, "versions": [{"version_id", "parent", "content_hash"}, ...]}
    <root>/<version_id>.json    canonical serialization of the version
"""
from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping

from .audit import AuditLog
from .canonical import canonical_bytes, digest_bytes
from .core import COMPONENTS, Round, SecpParams
from .errors import RevisionError, TamperError, UnknownVersionError, ValidationError

DEFAULT_QUORUM = 4
KINDS = ("unanimity", "scalar", "secp")
DELTA_KEYS = ("rho", "schedule", "tie_break", "kind", "tau", "components", "gated")
RHO_DIGITS = 12


@dataclass(frozen=True)
class ProtocolVersion:
    name: str
    version_id: int
    kind: str
    params: SecpParams | None = None
    tau: float | None = None
    components: tuple[str, ...] = ()
    gated: bool = True
    parent: int | None = None
    rationale: str = ""

    @property
    def label(self) -> str:
        return f"{self.name}/v{self.version_id}"

    def content(self) -> dict:
        return {
            "name": self.name,
            "version_id": self.version_id,
            "kind": self.kind,
            "params": self.params.to_dict() if self.params is not None else None,
            "tau": self.tau,
            "components": list(self.components),
            "gated": self.gated,
            "parent": self.parent,
            "rationale": self.rationale,
        }

    def serialize(self) -> bytes:
        return canonical_bytes(self.content())

    @property
    def content_hash(self) -> str:
        return digest_bytes(self.serialize())

    def behavior(self) -> dict:
        """Everything that affects decisions; excludes version metadata and rationale."""
        c = self.content()
        for key in ("name", "version_id", "parent", "rationale"):
            c.pop(key)
        return c

    @classmethod
    def from_content(cls, d: Mapping) -> "ProtocolVersion":
        try:
            params = SecpParams.from_dict(d["params"]) if d.get("params") is not None else None
            return cls(
                name=d["name"],
                version_id=int(d["version_id"]),
                kind=d["kind"],
                params=params,
                tau=d.get("tau"),
                components=tuple(d.get("components", ())),
                gated=bool(d.get("gated", True)),
                parent=d.get("parent"),
                rationale=d.get("rationale", ""),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed protocol version: {exc!r}") from exc

    @classmethod
    def deserialize(cls, data: bytes) -> "ProtocolVersion":
        return cls.from_content(json.loads(data.decode("utf-8")))


def secp_version(params: SecpParams, version_id: int = 1, rationale: str = "", name: str = "secp",
                 parent: int | None = None) -> ProtocolVersion:
    return ProtocolVersion(name, version_id, "secp", params=params, components=COMPONENTS,
                           parent=parent, rationale=rationale)


def unanimity_version(rationale: str = "unanimous acceptance with mutual veto") -> ProtocolVersion:
    return ProtocolVersion("phase1", 1, "unanimity", rationale=rationale)


def scalar_version(tau: float, rationale: str = "equal-weight mean against a fixed threshold") -> ProtocolVersion:
    return ProtocolVersion("control", 1, "scalar", tau=tau, rationale=rationale)


class Vote(str, enum.Enum):
    APPROVE = "approve"
    REJECT = "reject"


@dataclass
class ModificationProposal:
    candidate_id: str
    proposers: tuple[str, ...]
    deltas: Mapping[str, Any]
    rationale: str
    expected_effect: str = ""
    votes: dict[str, Vote] = field(default_factory=dict)

    def cast(self, module_id: str, vote: Vote | str) -> None:
        if module_id in self.votes:
            raise ValidationError(f"module {module_id!r} already voted on {self.candidate_id!r}")
        self.votes[module_id] = Vote(vote)

    @property
    def approvals(self) -> int:
        return sum(1 for v in self.votes.values() if v is Vote.APPROVE)

    def to_dict(self) -> dict:
        return {
            "candidate_id": self.candidate_id,
            "proposers": list(self.proposers),
            "deltas": dict(self.deltas),
            "rationale": self.rationale,
            "expected_effect": self.expected_effect,
            "votes": {m: v.value for m, v in sorted(self.votes.items())},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModificationProposal":
        try:
            mp = cls(
                candidate_id=str(d["candidate_id"]),
                proposers=tuple(d.get("proposers", ())),
                deltas=dict(d.get("deltas", {})),
                rationale=str(d.get("rationale", "")),
                expected_effect=str(d.get("expected_effect", "")),
            )
            votes = d.get("votes", {})
            items = votes.items() if isinstance(votes, Mapping) else ((v["module_id"], v["vote"]) for v in votes)
            for m, v in items:
                mp.cast(m, v)
            return mp
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ValidationError(f"malformed modification proposal: {exc!r}") from exc


def load_modification(path: str | Path) -> ModificationProposal:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read modification proposal {path}: {exc}") from exc
    return ModificationProposal.from_dict(raw)


def _document(proposal: ModificationProposal) -> str:
    parts = [proposal.rationale.strip()]
    if proposal.expected_effect.strip():
        parts.append(f"Expected effect: {proposal.expected_effect.strip()}")
    if proposal.deltas:
        parts.append("Deltas: " + canonical_bytes(dict(proposal.deltas)).decode("ascii"))
    return "\n".join(p for p in parts if p)


def revise(current: ProtocolVersion, proposal: ModificationProposal,
           version_id: int | None = None) -> ProtocolVersion:
    """Apply a proposal's deltas to a copy of ``current``.

    The result is not validated here beyond what is needed to build it;
    ``validate_invariants`` decides whether it may be adopted.
    """
    if current.kind != "secp" or current.params is None:
        raise RevisionError(f"{current.label} is not a modifiable SECP version")
    unknown = sorted(set(proposal.deltas) - set(DELTA_KEYS))
    if unknown:
        raise RevisionError(f"delta references unknown parameter(s) {unknown}")
    deltas = proposal.deltas
    params = current.params
    kind, tau, components, gated = current.kind, current.tau, current.components, current.gated

    if "rho" in deltas:
        try:
            rho = round(params.rho + float(deltas["rho"]), RHO_DIGITS)
        except (TypeError, ValueError):
            raise RevisionError(f"rho delta {deltas['rho']!r} is not a number") from None
        if not (0.0 <= rho <= 1.0):
            raise RevisionError(f"rho delta {deltas['rho']!r} yields rho {rho!r} outside [0, 1]")
        params = replace(params, rho=rho)
    if "schedule" in deltas:
        try:
            schedule = tuple(Round(float(r["theta"]), r["kappa"]) for r in deltas["schedule"])
        except (KeyError, TypeError, ValueError) as exc:
            raise RevisionError(f"malformed schedule replacement: {exc!r}") from None
        params = replace(params, schedule=schedule)
    if "tie_break" in deltas:
        params = replace(params, tie_break=str(deltas["tie_break"]))
    if "kind" in deltas:
        kind = str(deltas["kind"])
        if kind not in KINDS:
            raise RevisionError(f"unknown protocol kind {kind!r}")
    if "tau" in deltas:
        tau = float(deltas["tau"])
    if "components" in deltas:
        components = tuple(str(c) for c in deltas["components"])
    if "gated" in deltas:
        gated = bool(deltas["gated"])

    return ProtocolVersion(
        name=current.name,
        version_id=current.version_id + 1 if version_id is None else version_id,
        kind=kind,
        params=params if kind == "secp" else None,
        tau=tau if kind == "scalar" else None,
        components=components if kind == "secp" else (),
        gated=gated,
        parent=current.version_id,
        rationale=_document(proposal),
    )


def is_trivial(candidate: ProtocolVersion, current: ProtocolVersion) -> bool:
    return candidate.behavior() == current.behavior()


INV_CHECKS = (
    "feasibility_gating",
    "bounded_termination",
    "non_scalar_structure",
    "parameters_valid",
    "versioned",
    "auditable",
)


@dataclass(frozen=True)
class InvReport:
    candidate_hash: str
    checks: Mapping[str, bool]
    problems: tuple[str, ...] = ()

    @property
    def passed(self) -> bool:
        return all(self.checks[name] for name in INV_CHECKS)

    def to_dict(self) -> dict:
        return {
            "candidate_hash": self.candidate_hash,
            "checks": dict(self.checks),
            "pass": self.passed,
            "problems": list(self.problems),
        }


def validate_invariants(candidate: ProtocolVersion, n_modules: int | None = None) -> InvReport:
    problems: list[str] = []
    secp = candidate.kind == "secp" and candidate.params is not None

    if secp:
        bounded = candidate.params.t_max >= 1 and "bounded_termination" in candidate.components
        param_problems = candidate.params.problems(n_modules)
    elif candidate.kind == "scalar":
        bounded = True
        param_problems = [] if candidate.tau is not None and 0.0 <= candidate.tau <= 1.0 else [
            f"tau {candidate.tau!r} outside [0, 1]"]
    elif candidate.kind == "unanimity":
        bounded = True
        param_problems = []
    else:
        bounded = False
        param_problems = [f"unknown kind {candidate.kind!r}"]
    problems.extend(param_problems)
    if not bounded:
        problems.append("no finite round bound")

    non_scalar = secp and tuple(candidate.components) == COMPONENTS
    if not non_scalar:
        problems.append("decision rule is not the full five-component non-scalar pipeline")
    if not candidate.gated:
        problems.append("decision path is not gated by the hard-constraint filter")

    if candidate.parent is None:
        versioned = candidate.version_id == 1
    else:
        versioned = isinstance(candidate.parent, int) and candidate.version_id > candidate.parent
    try:
        candidate_hash = candidate.content_hash
        versioned = versioned and ProtocolVersion.deserialize(candidate.serialize()) == candidate
    except (ValueError, TypeError, ValidationError):
        candidate_hash = ""
        versioned = False
    if not versioned:
        problems.append("version metadata missing or not recomputable")
    auditable = bool(candidate.rationale.strip())
    if not auditable:
        problems.append("empty change rationale")

    checks = {
        "feasibility_gating": bool(candidate.gated),
        "bounded_termination": bounded,
        "non_scalar_structure": non_scalar,
        "parameters_valid": not param_problems,
        "versioned": versioned,
        "auditable": auditable,
    }
    return InvReport(candidate_hash, checks, tuple(problems))


@dataclass(frozen=True)
class AdoptionOutcome:
    adopted: bool
    active: ProtocolVersion
    candidate: ProtocolVersion
    approvals: int
    quorum: int
    inv: InvReport
    trivial: bool
    reasons: tuple[str, ...]

    @property
    def improvement_iteration(self) -> bool:
        return self.adopted and not self.trivial

    def to_dict(self) -> dict:
        return {
            "adopted": self.adopted,
            "active": self.active.label,
            "candidate": self.candidate.label,
            "candidate_hash": self.candidate.content_hash,
            "approvals": self.approvals,
            "quorum": self.quorum,
            "inv": self.inv.to_dict(),
            "trivial": self.trivial,
            "reasons": list(self.reasons),
        }


def tally_and_adopt(
    current: ProtocolVersion,
    proposal: ModificationProposal,
    candidate: ProtocolVersion,
    inv: InvReport,
    *,
    modules: Iterable[str],
    log: AuditLog,
    quorum: int = DEFAULT_QUORUM,
    store: "VersionStore | None" = None,
) -> AdoptionOutcome:
    """Adopt ``candidate`` iff its invariant check passes and approvals reach ``quorum``.

    The invariant report is recomputed against the candidate; a report that
    was produced for different content is refused.
    """
    registered = list(modules)
    if not (1 <= quorum <= len(registered)):
        raise ValidationError(f"quorum {quorum} outside [1, {len(registered)}]")
    strangers = sorted(set(proposal.votes) - set(registered))
    if strangers:
        raise ValidationError(f"votes from unregistered modules {strangers}")
    if inv.candidate_hash != candidate.content_hash:
        raise ValidationError("invariant report does not belong to this candidate")
    fresh = validate_invariants(candidate, n_modules=len(registered))

    approvals = proposal.approvals
    reasons = []
    if not (inv.passed and fresh.passed):
        reasons.append("invariant check failed: " + "; ".join(fresh.problems or inv.problems))
    if approvals < quorum:
        reasons.append(f"{approvals} approvals below quorum {quorum}")
    adopted = not reasons
    if adopted and store is not None:
        store.put(candidate, activate=True)
    outcome = AdoptionOutcome(
        adopted=adopted,
        active=candidate if adopted else current,
        candidate=candidate,
        approvals=approvals,
        quorum=quorum,
        inv=fresh,
        trivial=is_trivial(candidate, current),
        reasons=tuple(reasons),
    )
    payload = {
        "modification": proposal.to_dict(),
        "candidate": candidate.content(),
        "current": current.label,
        **outcome.to_dict(),
    }
    log.append("modification_adopted" if adopted else "modification_rejected", payload)
    return outcome


class VersionStore:
    """Single-writer store of protocol versions, on disk or in memory."""

    MANIFEST = "manifest.json"

    def __init__(self, root: str | Path | None = None):
        self.root = Path(root) if root is not None else None
        self._blobs: dict[int, bytes] = {}
        self._manifest: dict[str, Any] = {"active": None, "versions": []}
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)
            mpath = self.root / self.MANIFEST
            if mpath.exists():
                self._manifest = json.loads(mpath.read_text(encoding="utf-8"))

    def _entry(self, version_id: int) -> dict:
        for e in self._manifest["versions"]:
            if e["version_id"] == version_id:
                return e
        raise UnknownVersionError(f"no stored version {version_id}")

    def ids(self) -> list[int]:
        return [e["version_id"] for e in self._manifest["versions"]]

    def next_id(self) -> int:
        return max(self.ids(), default=0) + 1

    @property
    def active_id(self) -> int | None:
        return self._manifest["active"]

    def history(self) -> list[dict]:
        return [dict(e) for e in self._manifest["versions"]]

    def _write_manifest(self) -> None:
        if self.root is None:
            return
        tmp = self.root / (self.MANIFEST + ".tmp")
        tmp.write_bytes(canonical_bytes(self._manifest) + b"\n")
        os.replace(tmp, self.root / self.MANIFEST)

    def _read_blob(self, version_id: int) -> bytes:
        if self.root is None:
            return self._blobs[version_id]
        return (self.root / f"{version_id}.json").read_bytes()

    def put(self, version: ProtocolVersion, activate: bool = False) -> None:
        if version.version_id in self.ids():
            raise ValidationError(f"version {version.version_id} already stored")
        if version.parent is not None:
            self._entry(version.parent)
            if version.version_id <= version.parent:
                raise ValidationError("version id must exceed its parent's")
        data = version.serialize()
        if self.root is None:
            self._blobs[version.version_id] = data
        else:
            (self.root / f"{version.version_id}.json").write_bytes(data)
        self._manifest["versions"].append({
            "version_id": version.version_id,
            "parent": version.parent,
            "content_hash": digest_bytes(data),
        })
        if activate or self._manifest["active"] is None:
            self._manifest["active"] = version.version_id
        self._write_manifest()

    def get(self, version_id: int) -> ProtocolVersion:
        entry = self._entry(version_id)
        try:
            data = self._read_blob(version_id)
        except (OSError, KeyError) as exc:
            raise TamperError(f"stored version {version_id} unreadable: {exc}") from exc
        if digest_bytes(data) != entry["content_hash"]:
            raise TamperError(f"stored version {version_id} does not match its recorded hash")
        return ProtocolVersion.deserialize(data)

    def active(self) -> ProtocolVersion:
        if self.active_id is None:
            raise UnknownVersionError("store is empty")
        return self.get(self.active_id)

    def tamper(self, version_id: int, data: bytes) -> None:
        """Overwrite stored bytes without updating the manifest (for tests and drills)."""
        if self.root is None:
            self._blobs[version_id] = data
        else:
            (self.root / f"{version_id}.json").write_bytes(data)

    def rollback(self, to: int, log: AuditLog | None = None) -> ProtocolVersion:
        version = self.get(to)
        previous = self.active_id
        self._manifest["active"] = to
        self._write_manifest()
        if log is not None:
            log.append("rollback", {
                "name": version.name,
                "from": previous,
                "to": to,
                "active": version.label,
                "content_hash": version.content_hash,
            })
        return version


def rollback(to: int, store: VersionStore, log: AuditLog | None = None) -> ProtocolVersion:
    return store.rollback(to, log)
