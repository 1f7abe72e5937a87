"""Assessment records, decisions, coverage, and the two baseline regimes.

Phase 1 is unanimous acceptance with mutual veto. The control regime
accepts when the equal-weight mean of module scores reaches ``tau``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Any, Iterable, Mapping, Sequence

from .canonical import exact
from .errors import (
    ModuleSetError,
    ObjectionLifecycleError,
    UndefinedRelativeChange,
    ValidationError,
)

DEFAULT_TAU = 0.6


class Recommendation(str, enum.Enum):
    ACCEPT = "Accept"
    VETO = "Veto"


class Outcome(str, enum.Enum):
    ACCEPT = "Accept"
    REJECT = "Reject"


class ObjectionStatus(str, enum.Enum):
    OPEN = "open"
    WITHDRAWN = "withdrawn"
    REBUTTED_ACKNOWLEDGED = "rebutted_acknowledged"

    @property
    def resolved(self) -> bool:
        return self is not ObjectionStatus.OPEN


@dataclass(frozen=True)
class Objection:
    id: str
    description: str
    reference: str
    constructive: bool
    status: ObjectionStatus = ObjectionStatus.OPEN

    def __post_init__(self):
        object.__setattr__(self, "status", ObjectionStatus(self.status))

    def transition(self, new_status: ObjectionStatus | str) -> "Objection":
        new_status = ObjectionStatus(new_status)
        if self.status is not ObjectionStatus.OPEN or new_status is ObjectionStatus.OPEN:
            raise ObjectionLifecycleError(
                f"objection {self.id!r}: illegal transition {self.status.value} -> {new_status.value}"
            )
        return replace(self, status=new_status)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "description": self.description,
            "reference": self.reference,
            "constructive": self.constructive,
            "status": self.status.value,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Objection":
        try:
            return cls(
                id=str(d["id"]),
                description=str(d.get("description", "")),
                reference=str(d.get("reference", "")),
                constructive=bool(d["constructive"]),
                status=ObjectionStatus(d.get("status", "open")),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise ValidationError(f"malformed objection: {exc!r}") from exc


@dataclass(frozen=True)
class AssessmentRecord:
    module_id: str
    proposal_id: str
    score: float
    recommendation: Recommendation
    objections: tuple[Objection, ...] = ()

    def __post_init__(self):
        if isinstance(self.score, bool) or not isinstance(self.score, (int, float)):
            raise ValidationError(f"{self.module_id}/{self.proposal_id}: score must be a number")
        if not (0.0 <= self.score <= 1.0):
            raise ValidationError(
                f"{self.module_id}/{self.proposal_id}: score {self.score!r} outside [0, 1]"
            )
        object.__setattr__(self, "score", float(self.score))
        try:
            object.__setattr__(self, "recommendation", Recommendation(self.recommendation))
        except ValueError as exc:
            raise ValidationError(f"{self.module_id}/{self.proposal_id}: {exc}") from None
        object.__setattr__(self, "objections", tuple(self.objections))
        ids = [o.id for o in self.objections]
        if len(ids) != len(set(ids)):
            raise ValidationError(f"{self.module_id}/{self.proposal_id}: duplicate objection ids")

    def to_dict(self) -> dict:
        return {
            "module_id": self.module_id,
            "proposal_id": self.proposal_id,
            "score": self.score,
            "recommendation": self.recommendation.value,
            "objections": [o.to_dict() for o in self.objections],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "AssessmentRecord":
        try:
            return cls(
                module_id=str(d["module_id"]),
                proposal_id=str(d["proposal_id"]),
                score=d["score"],
                recommendation=d["recommendation"],
                objections=tuple(Objection.from_dict(o) for o in d.get("objections", ())),
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed assessment record: {exc!r}") from exc


@dataclass(frozen=True)
class Decision:
    proposal_id: str
    outcome: Outcome
    protocol_version_id: str
    rationale_trace: tuple[Mapping[str, Any], ...] = field(default=(), hash=False)

    @property
    def accepted(self) -> bool:
        return self.outcome is Outcome.ACCEPT

    def to_dict(self) -> dict:
        return {
            "proposal_id": self.proposal_id,
            "outcome": self.outcome.value,
            "protocol_version_id": self.protocol_version_id,
            "rationale_trace": [dict(e) for e in self.rationale_trace],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Decision":
        return cls(
            proposal_id=d["proposal_id"],
            outcome=Outcome(d["outcome"]),
            protocol_version_id=d["protocol_version_id"],
            rationale_trace=tuple(d.get("rationale_trace", ())),
        )


@dataclass(frozen=True)
class CoverageReport:
    protocol_version_id: str
    accepted_ids: tuple[str, ...]
    feasible_count: int

    @property
    def delta_s(self) -> int:
        return len(self.accepted_ids)

    def to_dict(self) -> dict:
        return {
            "protocol_version_id": self.protocol_version_id,
            "accepted_ids": list(self.accepted_ids),
            "delta_s": self.delta_s,
            "feasible_count": self.feasible_count,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "CoverageReport":
        return cls(d["protocol_version_id"], tuple(d["accepted_ids"]), int(d["feasible_count"]))


def check_module_set(
    assessments: Sequence[AssessmentRecord], modules: Iterable[str] | None = None
) -> str:
    """Validate one-record-per-module for a single proposal; returns the proposal id."""
    if not assessments:
        raise ModuleSetError("no assessment records supplied")
    pids = {a.proposal_id for a in assessments}
    if len(pids) != 1:
        raise ModuleSetError(f"records span several proposals: {sorted(pids)}")
    mids = [a.module_id for a in assessments]
    if len(mids) != len(set(mids)):
        raise ModuleSetError(f"duplicate module records for {pids.pop()}")
    if modules is not None:
        expected = set(modules)
        if set(mids) != expected:
            raise ModuleSetError(
                f"module records {sorted(mids)} do not match registered modules {sorted(expected)}"
            )
    return next(iter(pids))


def decide_unanimity(
    assessments: Sequence[AssessmentRecord],
    modules: Iterable[str] | None = None,
    protocol_version_id: str = "phase1/v1",
) -> Decision:
    pid = check_module_set(assessments, modules)
    vetoes = [a.module_id for a in assessments if a.recommendation is Recommendation.VETO]
    trace = [{"step": "veto", "module_id": m} for m in vetoes]
    outcome = Outcome.REJECT if vetoes else Outcome.ACCEPT
    trace.append({"step": "unanimity", "vetoes": len(vetoes), "outcome": outcome.value})
    return Decision(pid, outcome, protocol_version_id, tuple(trace))


def _exact_mean(assessments: Sequence[AssessmentRecord]) -> Fraction:
    if not assessments:
        raise ModuleSetError("global score of an empty module set")
    return sum((exact(a.score) for a in assessments), Fraction(0)) / len(assessments)


def global_score(assessments: Sequence[AssessmentRecord]) -> float:
    """Equal-weight mean of module scores."""
    return float(_exact_mean(assessments))


def decide_scalar(
    assessments: Sequence[AssessmentRecord],
    tau: float = DEFAULT_TAU,
    modules: Iterable[str] | None = None,
    protocol_version_id: str = "control/v1",
) -> Decision:
    if not (0.0 <= tau <= 1.0):
        raise ValidationError(f"tau {tau!r} outside [0, 1]")
    pid = check_module_set(assessments, modules)
    mean = _exact_mean(assessments)
    outcome = Outcome.ACCEPT if mean >= exact(tau) else Outcome.REJECT
    trace = ({"step": "scalar", "mean": float(mean), "tau": tau, "outcome": outcome.value},)
    return Decision(pid, outcome, protocol_version_id, trace)


def coverage(
    decisions: Iterable[Decision], feasible_ids: Iterable[str] | None = None
) -> CoverageReport:
    items = list(decisions)
    by_pid: dict[str, Decision] = {}
    for d in items:
        if d.proposal_id in by_pid:
            raise ValidationError(f"two decisions for proposal {d.proposal_id!r}")
        by_pid[d.proposal_id] = d
    versions = {d.protocol_version_id for d in items}
    if len(versions) > 1:
        raise ValidationError(f"decisions from several protocol versions: {sorted(versions)}")
    if feasible_ids is not None:
        feasible = set(feasible_ids)
        missing = feasible - set(by_pid)
        if missing:
            raise ValidationError(f"missing decisions for {sorted(missing)}")
        extra = set(by_pid) - feasible
        if extra:
            raise ValidationError(f"decisions for non-feasible proposals {sorted(extra)}")
    accepted = tuple(sorted(pid for pid, d in by_pid.items() if d.accepted))
    version = versions.pop() if versions else ""
    return CoverageReport(version, accepted, len(by_pid))


def relative_coverage_change(before: CoverageReport, after: CoverageReport) -> Fraction:
    """Percentage change in coverage, as an exact fraction."""
    if before.delta_s == 0:
        raise UndefinedRelativeChange(before.delta_s, after.delta_s)
    return Fraction(100 * (after.delta_s - before.delta_s), before.delta_s)


def format_percent(value: Fraction) -> str:
    if value.denominator == 1:
        return f"{value.numerator}%"
    return f"{float(value):.4g}%"
