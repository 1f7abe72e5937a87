"""Proposal data model and the hard-constraint gate.

A proposal is a declared design artifact, never executed. The semantic
safety/liveness predicates and the proof checker are external; their
verdicts arrive as attestations carried on the proposal.

Bundle file format (JSON, canonical on write)::

    {"proposals": [{"id": ..., "label": ..., "fault_model": {"a": 3, "b": 1},
                    "msg_complexity_degree": 2,
                    "safety_attestation": "pass", "liveness_attestation": "pass",
                    "explanation": "..."}, ...]}
"""
from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Mapping

from .canonical import canonical_bytes
from .errors import MalformedSetError, ValidationError

MAX_EXPLANATION_WORDS = 500
MAX_MSG_DEGREE = 2
# Classical Byzantine bound n >= 3f + 1.
BFT_A, BFT_B = 3, 1

REPLICATION_LABELS = ("C_EXP", "C_VAL", "C_MIN", "G_ROB", "G_PRF", "G_ECO")


class Attestation(str, enum.Enum):
    PASS = "pass"
    FAIL = "fail"
    ABSENT = "absent"


@dataclass(frozen=True)
class FaultModel:
    """Declared replica requirement ``n >= a*f + b``."""

    a: int
    b: int

    def covers_bft_bound(self) -> bool:
        # Every (n, f) with n >= 3f+1 must satisfy n >= a*f + b, for all f >= 0.
        return self.a <= BFT_A and self.b <= BFT_B


@dataclass(frozen=True)
class Proposal:
    id: str
    label: str
    fault_model: FaultModel
    msg_complexity_degree: int
    safety_attestation: Attestation
    liveness_attestation: Attestation
    explanation: str

    def __post_init__(self):
        if not isinstance(self.id, str) or not self.id:
            raise ValidationError("proposal id must be a non-empty string")
        if isinstance(self.msg_complexity_degree, bool) or not isinstance(self.msg_complexity_degree, int):
            raise ValidationError(f"{self.id}: msg_complexity_degree must be an integer")
        if self.msg_complexity_degree < 0:
            raise ValidationError(f"{self.id}: msg_complexity_degree must be >= 0")
        if self.fault_model.a < 1 or self.fault_model.b < 0:
            raise ValidationError(f"{self.id}: fault model requires a >= 1 and b >= 0")
        object.__setattr__(self, "safety_attestation", Attestation(self.safety_attestation))
        object.__setattr__(self, "liveness_attestation", Attestation(self.liveness_attestation))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["safety_attestation"] = self.safety_attestation.value
        d["liveness_attestation"] = self.liveness_attestation.value
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "Proposal":
        try:
            fm = d["fault_model"]
            return cls(
                id=d["id"],
                label=d.get("label", d["id"]),
                fault_model=FaultModel(int(fm["a"]), int(fm["b"])),
                msg_complexity_degree=d["msg_complexity_degree"],
                safety_attestation=Attestation(d["safety_attestation"]),
                liveness_attestation=Attestation(d["liveness_attestation"]),
                explanation=d.get("explanation", ""),
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed proposal record: {exc!r}") from exc
        except ValueError as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ValidationError(f"malformed proposal record: {exc}") from exc


@dataclass(frozen=True)
class HardConstraintReport:
    proposal_id: str
    h1: bool
    h2: bool
    h3: bool
    h4: bool
    word_count: int

    @property
    def joint(self) -> bool:
        return self.h1 and self.h2 and self.h3 and self.h4

    def failed(self) -> list[str]:
        return [name for name in ("h1", "h2", "h3", "h4") if not getattr(self, name)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["joint"] = self.joint
        return d


def word_count(text: str) -> int:
    """Number of maximal whitespace-separated tokens; punctuation is not stripped."""
    return len(text.split())


def check_hard_constraints(p: Proposal) -> HardConstraintReport:
    proofs_pass = (
        p.safety_attestation is Attestation.PASS and p.liveness_attestation is Attestation.PASS
    )
    wc = word_count(p.explanation)
    return HardConstraintReport(
        proposal_id=p.id,
        h1=p.fault_model.covers_bft_bound() and proofs_pass,
        h2=p.msg_complexity_degree <= MAX_MSG_DEGREE,
        h3=proofs_pass,
        h4=wc <= MAX_EXPLANATION_WORDS,
        word_count=wc,
    )


def _check_unique(proposals: Iterable[Proposal]) -> list[Proposal]:
    items = list(proposals)
    seen: set[str] = set()
    for p in items:
        if p.id in seen:
            raise MalformedSetError(f"duplicate proposal id {p.id!r}")
        seen.add(p.id)
    return items


def filter_feasible(proposals: Iterable[Proposal]) -> list[Proposal]:
    """The feasible subset, ordered by id."""
    items = _check_unique(proposals)
    return sorted((p for p in items if check_hard_constraints(p).joint), key=lambda p: p.id)


def load_bundle(path: str | Path) -> list[Proposal]:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read proposal bundle {path}: {exc}") from exc
    if not isinstance(raw, dict) or not isinstance(raw.get("proposals"), list):
        raise ValidationError(f"{path}: expected an object with a 'proposals' list")
    return _check_unique(Proposal.from_dict(d) for d in raw["proposals"])


def dump_bundle(proposals: Iterable[Proposal], path: str | Path) -> None:
    items = _check_unique(proposals)
    Path(path).write_bytes(canonical_bytes({"proposals": [p.to_dict() for p in items]}) + b"\n")
