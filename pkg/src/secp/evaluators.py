"""Sources of module assessments.

Scripted evaluators replay a fixture file; remote evaluators call an HTTP
endpoint. Both yield the same :class:`AssessmentRecord` objects, so the
decision rules never see where a record came from.

Fixture file (JSON)::

    {"module_id": "Validator", "expertise": "...",
     "questionnaire": {"module_id": "Validator", "categories": [...], "prompts": {...}},
     "proposals": {"C_VAL": {"answers": {"V1": "Yes", ...},
                             "recommendation": "Accept",
                             "objections": [{"id", "description", "reference", "constructive"}],
                             "events": [{"round": 2, "objection_id": "...", "status": "withdrawn"}]}},
     "votes": {"<candidate_id>": "approve"}}

Remote wire contract (``CONTRACT`` below), JSON over HTTP POST:

    request  {"contract", "type": "assess", "module": {"module_id", "expertise"},
              "questionnaire": {...}, "proposal": {...}}
    response {"module_id", "proposal_id", "answers": {...} | "score": float,
              "recommendation", "objections": [...], "events": [...]}

    request  {"contract", "type": "vote", "module": {...}, "modification": {...}}
    response {"module_id", "candidate_id", "vote": "approve" | "reject"}
"""
from __future__ import annotations

import json
import os
import socket
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

from .core import ObjectionEvent
from .errors import (
    CoverageGapError,
    EvaluatorError,
    EvaluatorTimeout,
    MalformedResponseError,
    MalformedSheetError,
    ValidationError,
)
from .evolution import ModificationProposal, Vote
from .gatekeeper import Proposal
from .protocols import AssessmentRecord, Objection, ObjectionStatus, Recommendation
from .rubric import AnswerSheet, QuestionnaireSpec, score

CONTRACT = "secp-evaluator/1"
DEFAULT_TIMEOUT = 10.0
DEFAULT_MODULES = ("Explorer", "Validator", "Minimalist", "Robustifier", "Proofsmith", "Economizer")


class OutOfRangeScoreError(MalformedResponseError):
    pass


@dataclass(frozen=True)
class ModuleSpec:
    module_id: str
    expertise: str
    questionnaire: QuestionnaireSpec

    def __post_init__(self):
        if self.questionnaire.module_id != self.module_id:
            raise ValidationError(
                f"module {self.module_id!r} given questionnaire of {self.questionnaire.module_id!r}"
            )


@dataclass(frozen=True)
class ScriptedAssessment:
    sheet: AnswerSheet
    recommendation: Recommendation
    objections: tuple[Objection, ...] = ()
    events: tuple[ObjectionEvent, ...] = ()


@dataclass(frozen=True)
class EvaluatorFixture:
    module_id: str
    expertise: str
    questionnaire: QuestionnaireSpec
    proposals: Mapping[str, ScriptedAssessment]
    votes: Mapping[str, Vote] = field(default_factory=dict)

    @property
    def spec(self) -> ModuleSpec:
        return ModuleSpec(self.module_id, self.expertise, self.questionnaire)


def _parse_objections(raw: Iterable[Mapping], where: str) -> tuple[Objection, ...]:
    objs = tuple(Objection.from_dict(o) for o in raw)
    ids = [o.id for o in objs]
    if len(ids) != len(set(ids)):
        raise ValidationError(f"{where}: duplicate objection ids")
    return objs


def _parse_events(raw: Iterable[Mapping], module_id: str, where: str) -> tuple[ObjectionEvent, ...]:
    try:
        return tuple(
            ObjectionEvent(
                round=e["round"],
                module_id=e.get("module_id", module_id),
                objection_id=str(e["objection_id"]),
                status=ObjectionStatus(e["status"]),
            )
            for e in raw
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"{where}: malformed deliberation event: {exc!r}") from exc


def parse_fixture(raw: Mapping, proposal_ids: Iterable[str] | None = None,
                  source: str = "<fixture>") -> EvaluatorFixture:
    try:
        module_id = str(raw["module_id"])
        questionnaire = QuestionnaireSpec.from_dict(raw["questionnaire"])
        entries = raw["proposals"]
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"{source}: malformed fixture: {exc!r}") from exc
    proposals: dict[str, ScriptedAssessment] = {}
    for pid, d in entries.items():
        where = f"{source}:{module_id}/{pid}"
        try:
            sheet = AnswerSheet(module_id, pid, dict(d["answers"]))
            rec = Recommendation(d["recommendation"])
        except KeyError as exc:
            raise ValidationError(f"{where}: missing {exc}") from exc
        except ValueError as exc:
            raise ValidationError(f"{where}: {exc}") from exc
        sheet.check_against(questionnaire)
        objections = _parse_objections(d.get("objections", ()), where)
        if any(o.status is not ObjectionStatus.OPEN for o in objections):
            raise ValidationError(f"{where}: objections must be raised open")
        events = _parse_events(d.get("events", ()), module_id, where)
        known = {o.id for o in objections}
        for ev in events:
            if ev.module_id != module_id or ev.objection_id not in known:
                raise ValidationError(f"{where}: event for unknown objection {ev.objection_id!r}")
        proposals[pid] = ScriptedAssessment(sheet, rec, objections, events)
    if proposal_ids is not None:
        missing = sorted(set(proposal_ids) - set(proposals))
        if missing:
            raise CoverageGapError(f"{source}: fixture for {module_id} does not cover {missing}")
    try:
        votes = {str(k): Vote(v) for k, v in raw.get("votes", {}).items()}
    except ValueError as exc:
        raise ValidationError(f"{source}: {exc}") from exc
    return EvaluatorFixture(module_id, str(raw.get("expertise", "")), questionnaire, proposals, votes)


def load_fixture(path: str | Path, proposal_ids: Iterable[str] | None = None) -> EvaluatorFixture:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read evaluator fixture {path}: {exc}") from exc
    return parse_fixture(raw, proposal_ids, str(path))


def assess(fixture: EvaluatorFixture, spec: ModuleSpec, p: Proposal) -> AssessmentRecord:
    try:
        scripted = fixture.proposals[p.id]
    except KeyError:
        raise CoverageGapError(f"fixture for {fixture.module_id} does not cover {p.id}") from None
    return AssessmentRecord(
        module_id=spec.module_id,
        proposal_id=p.id,
        score=score(spec.questionnaire, scripted.sheet),
        recommendation=scripted.recommendation,
        objections=scripted.objections,
    )


@dataclass(frozen=True)
class Endpoint:
    url: str
    timeout: float = DEFAULT_TIMEOUT
    token_env: str | None = None

    @classmethod
    def from_dict(cls, d: Mapping) -> "Endpoint":
        try:
            return cls(str(d["url"]), float(d.get("timeout", DEFAULT_TIMEOUT)), d.get("token_env"))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed endpoint descriptor: {exc!r}") from exc


def _post(endpoint: Endpoint, body: Mapping[str, Any]) -> Any:
    headers = {"Content-Type": "application/json"}
    if endpoint.token_env:
        token = os.environ.get(endpoint.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
    req = urllib.request.Request(
        endpoint.url, data=json.dumps(body).encode("utf-8"), headers=headers, method="POST"
    )
    try:
        with urllib.request.urlopen(req, timeout=endpoint.timeout) as resp:
            data = resp.read()
    except (socket.timeout, TimeoutError) as exc:
        raise EvaluatorTimeout(f"{endpoint.url}: no response within {endpoint.timeout}s") from exc
    except urllib.error.URLError as exc:
        if isinstance(exc.reason, (socket.timeout, TimeoutError)):
            raise EvaluatorTimeout(f"{endpoint.url}: no response within {endpoint.timeout}s") from exc
        raise EvaluatorError(f"{endpoint.url}: {exc}") from exc
    try:
        return json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedResponseError(f"{endpoint.url}: response is not JSON") from exc


def validate_response(resp: Any, spec: ModuleSpec, p: Proposal) -> tuple[AssessmentRecord, tuple[ObjectionEvent, ...]]:
    """Check a remote assessment against the record invariants; never repairs."""
    if not isinstance(resp, dict):
        raise MalformedResponseError("response must be a JSON object")
    if resp.get("module_id", spec.module_id) != spec.module_id or resp.get("proposal_id", p.id) != p.id:
        raise MalformedResponseError("response is for a different (module, proposal) pair")
    has_answers, has_score = "answers" in resp, "score" in resp
    if has_answers == has_score:
        raise MalformedResponseError("response must carry exactly one of 'answers' or 'score'")
    try:
        if has_answers:
            if not isinstance(resp["answers"], dict):
                raise MalformedResponseError("'answers' must be an object")
            value = score(spec.questionnaire, AnswerSheet(spec.module_id, p.id, resp["answers"]))
        else:
            value = resp["score"]
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise MalformedResponseError("'score' must be a number")
            if not (0.0 <= value <= 1.0):
                raise OutOfRangeScoreError(f"score {value!r} outside [0, 1]")
        objections = _parse_objections(resp.get("objections", ()), spec.module_id)
        if any(o.status is not ObjectionStatus.OPEN for o in objections):
            raise MalformedResponseError("objections must be raised open")
        record = AssessmentRecord(
            module_id=spec.module_id,
            proposal_id=p.id,
            score=value,
            recommendation=resp.get("recommendation"),
            objections=objections,
        )
        events = _parse_events(resp.get("events", ()), spec.module_id, spec.module_id)
    except MalformedResponseError:
        raise
    except (ValidationError, MalformedSheetError) as exc:
        raise MalformedResponseError(str(exc)) from exc
    known = {o.id for o in objections}
    if any(ev.objection_id not in known or ev.module_id != spec.module_id for ev in events):
        raise MalformedResponseError("event references an objection the module did not raise")
    return record, events


def remote_assess(endpoint: Endpoint, spec: ModuleSpec, p: Proposal) -> AssessmentRecord:
    return RemoteEvaluator(spec, endpoint).assess(p)


class ScriptedEvaluator:
    def __init__(self, fixture: EvaluatorFixture):
        self.fixture = fixture
        self.spec = fixture.spec

    @property
    def module_id(self) -> str:
        return self.spec.module_id

    def assess(self, p: Proposal) -> AssessmentRecord:
        return assess(self.fixture, self.spec, p)

    def answers(self, p: Proposal) -> Mapping[str, str] | None:
        return dict(self.fixture.proposals[p.id].sheet.answers)

    def events(self, p: Proposal) -> tuple[ObjectionEvent, ...]:
        return self.fixture.proposals[p.id].events

    def vote(self, proposal: ModificationProposal) -> Vote | None:
        return self.fixture.votes.get(proposal.candidate_id)


class RemoteEvaluator:
    def __init__(self, spec: ModuleSpec, endpoint: Endpoint):
        self.spec = spec
        self.endpoint = endpoint
        self._events: dict[str, tuple[ObjectionEvent, ...]] = {}
        self._answers: dict[str, Mapping[str, str] | None] = {}

    @property
    def module_id(self) -> str:
        return self.spec.module_id

    def assess(self, p: Proposal) -> AssessmentRecord:
        resp = _post(self.endpoint, {
            "contract": CONTRACT,
            "type": "assess",
            "module": {"module_id": self.spec.module_id, "expertise": self.spec.expertise},
            "questionnaire": self.spec.questionnaire.to_dict(),
            "proposal": p.to_dict(),
        })
        record, events = validate_response(resp, self.spec, p)
        self._events[p.id] = events
        self._answers[p.id] = dict(resp["answers"]) if "answers" in resp else None
        return record

    def answers(self, p: Proposal) -> Mapping[str, str] | None:
        return self._answers.get(p.id)

    def events(self, p: Proposal) -> tuple[ObjectionEvent, ...]:
        return self._events.get(p.id, ())

    def vote(self, proposal: ModificationProposal) -> Vote | None:
        resp = _post(self.endpoint, {
            "contract": CONTRACT,
            "type": "vote",
            "module": {"module_id": self.spec.module_id, "expertise": self.spec.expertise},
            "modification": proposal.to_dict(),
        })
        if not isinstance(resp, dict) or resp.get("candidate_id") != proposal.candidate_id:
            raise MalformedResponseError("vote response for a different candidate")
        if resp.get("module_id", self.spec.module_id) != self.spec.module_id:
            raise MalformedResponseError("vote response from a different module")
        try:
            return Vote(resp["vote"])
        except (KeyError, ValueError) as exc:
            raise MalformedResponseError(f"invalid vote: {exc!r}") from exc
