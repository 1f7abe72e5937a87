"""Non-scalar decision pipeline.

Each feasible proposal goes through, in order: Pareto filtering over the
full feasible set, a minimax-regret screen with bound ``rho``, and bounded
multi-round deliberation. In round ``t`` a proposal qualifies when at least
``kappa_t`` modules score it at or above ``theta_t`` and no constructive
objection against it is still open. Deliberation never runs past ``t_max``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .canonical import exact
from .errors import InvalidParamsError, ObjectionLifecycleError, ValidationError
from .protocols import AssessmentRecord, Decision, Objection, ObjectionStatus, Outcome

COMPONENTS = (
    "pareto_filter",
    "regret_screen",
    "deliberation",
    "constructive_objections",
    "bounded_termination",
)
TIE_BREAK_RULES = ("earliest", "latest")


@dataclass(frozen=True)
class Round:
    theta: float
    kappa: int


@dataclass(frozen=True)
class SecpParams:
    """Regret bound, support schedule and tie-break rule.

    Construction does not validate; call :meth:`problems` or :meth:`validate`.
    Revised candidates must be representable even when invalid so that the
    invariant check, not the constructor, rejects them.
    """

    rho: float
    schedule: tuple[Round, ...]
    tie_break: str = "earliest"

    @property
    def t_max(self) -> int:
        return len(self.schedule)

    def problems(self, n_modules: int | None = None) -> list[str]:
        out = []
        if not (0.0 <= self.rho <= 1.0):
            out.append(f"rho {self.rho!r} outside [0, 1]")
        if self.t_max < 1:
            out.append("schedule is empty (t_max must be >= 1)")
        if self.tie_break not in TIE_BREAK_RULES:
            out.append(f"unknown tie-break rule {self.tie_break!r}")
        for t, r in enumerate(self.schedule, start=1):
            if not (0.0 <= r.theta <= 1.0):
                out.append(f"round {t}: theta {r.theta!r} outside [0, 1]")
            if isinstance(r.kappa, bool) or not isinstance(r.kappa, int) or r.kappa < 1:
                out.append(f"round {t}: kappa {r.kappa!r} must be an integer >= 1")
            elif n_modules is not None and r.kappa > n_modules:
                out.append(f"round {t}: kappa {r.kappa} exceeds module count {n_modules}")
        for t in range(1, self.t_max):
            prev, cur = self.schedule[t - 1], self.schedule[t]
            if not all(isinstance(r.kappa, int) and not isinstance(r.kappa, bool) for r in (prev, cur)):
                continue
            if cur.kappa > prev.kappa and exact(cur.theta) > exact(prev.theta):
                out.append(f"round {t + 1}: support requirement tightens in both theta and kappa")
        return out

    def validate(self, n_modules: int | None = None) -> None:
        problems = self.problems(n_modules)
        if problems:
            raise InvalidParamsError("; ".join(problems))

    def to_dict(self) -> dict:
        return {
            "rho": self.rho,
            "schedule": [{"theta": r.theta, "kappa": r.kappa} for r in self.schedule],
            "t_max": self.t_max,
            "tie_break": self.tie_break,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SecpParams":
        try:
            params = cls(
                rho=float(d["rho"]),
                schedule=tuple(Round(float(r["theta"]), r["kappa"]) for r in d["schedule"]),
                tie_break=str(d.get("tie_break", "earliest")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed SECP parameters: {exc!r}") from exc
        if "t_max" in d and d["t_max"] != params.t_max:
            raise ValidationError(
                f"declared t_max {d['t_max']!r} disagrees with schedule length {params.t_max}"
            )
        return params


def load_params(path: str | Path) -> SecpParams:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read parameter file {path}: {exc}") from exc
    return SecpParams.from_dict(raw)


class ScoreMatrix:
    """Complete table of module scores over the feasible proposal set."""

    def __init__(
        self,
        modules: Sequence[str],
        proposals: Sequence[str],
        scores: Mapping[tuple[str, str], float],
    ):
        self.modules = tuple(modules)
        self.proposals = tuple(proposals)
        if len(set(self.modules)) != len(self.modules):
            raise ValidationError("duplicate module ids in score matrix")
        if len(set(self.proposals)) != len(self.proposals):
            raise ValidationError("duplicate proposal ids in score matrix")
        self._scores: dict[tuple[str, str], float] = {}
        for m in self.modules:
            for p in self.proposals:
                try:
                    s = float(scores[(m, p)])
                except KeyError:
                    raise ValidationError(f"score matrix missing ({m}, {p})") from None
                if not (0.0 <= s <= 1.0):
                    raise ValidationError(f"score ({m}, {p}) = {s!r} outside [0, 1]")
                self._scores[(m, p)] = s
        self._exact = {k: exact(v) for k, v in self._scores.items()}

    @classmethod
    def from_rows(cls, modules: Sequence[str], rows: Mapping[str, Sequence[float]]) -> "ScoreMatrix":
        scores = {}
        for p, row in rows.items():
            if len(row) != len(modules):
                raise ValidationError(f"row {p!r} has {len(row)} scores for {len(modules)} modules")
            for m, s in zip(modules, row):
                scores[(m, p)] = s
        return cls(modules, list(rows), scores)

    @classmethod
    def from_assessments(
        cls, assessments: Iterable[AssessmentRecord], modules: Sequence[str] | None = None
    ) -> "ScoreMatrix":
        records = list(assessments)
        scores: dict[tuple[str, str], float] = {}
        for a in records:
            key = (a.module_id, a.proposal_id)
            if key in scores:
                raise ValidationError(f"duplicate assessment for {key}")
            scores[key] = a.score
        if modules is None:
            modules = list(dict.fromkeys(a.module_id for a in records))
        proposals = sorted({a.proposal_id for a in records})
        return cls(modules, proposals, scores)

    def score(self, module: str, proposal: str) -> float:
        return self._scores[(module, proposal)]

    def vector(self, proposal: str) -> tuple[float, ...]:
        self._require(proposal)
        return tuple(self._scores[(m, proposal)] for m in self.modules)

    def _exact_vector(self, proposal: str) -> tuple[Fraction, ...]:
        return tuple(self._exact[(m, proposal)] for m in self.modules)

    def _require(self, proposal: str) -> None:
        if proposal not in self.proposals:
            raise ValidationError(f"unknown proposal {proposal!r}")

    def __len__(self) -> int:
        return len(self.proposals)


def dominates(q, p) -> bool:
    """True iff ``q`` is at least as good as ``p`` for every module and strictly better for one.

    Accepts two equal-length sequences or two mappings over the same module ids.
    """
    if isinstance(q, Mapping) or isinstance(p, Mapping):
        if not (isinstance(q, Mapping) and isinstance(p, Mapping)) or set(q) != set(p):
            raise ValidationError("score vectors are over different module sets")
        keys = sorted(q)
        q, p = [q[k] for k in keys], [p[k] for k in keys]
    if len(q) != len(p):
        raise ValidationError("score vectors are over different module sets")
    qe = [exact(v) if not isinstance(v, Fraction) else v for v in q]
    pe = [exact(v) if not isinstance(v, Fraction) else v for v in p]
    strict = False
    for a, b in zip(qe, pe):
        if a < b:
            return False
        if a > b:
            strict = True
    return strict


def dominators(matrix: ScoreMatrix, p: str) -> list[str]:
    matrix._require(p)
    pv = matrix._exact_vector(p)
    return [q for q in matrix.proposals if q != p and dominates(matrix._exact_vector(q), pv)]


def pareto_filter(matrix: ScoreMatrix) -> list[str]:
    """Proposals not dominated by any other, in matrix order."""
    if not matrix.proposals:
        raise ValidationError("Pareto filter over an empty score matrix")
    vectors = {p: matrix._exact_vector(p) for p in matrix.proposals}
    survivors = []
    for p in matrix.proposals:
        if not any(dominates(vectors[q], vectors[p]) for q in matrix.proposals if q != p):
            survivors.append(p)
    return survivors


def _exact_regret(matrix: ScoreMatrix, p: str) -> dict[str, Fraction]:
    matrix._require(p)
    out = {}
    for m in matrix.modules:
        best = max(matrix._exact[(m, q)] for q in matrix.proposals)
        out[m] = best - matrix._exact[(m, p)]
    return out


def regret(matrix: ScoreMatrix, p: str) -> tuple[dict[str, float], float]:
    """Per-module shortfall against the best proposal for that module, and the worst of them."""
    per = _exact_regret(matrix, p)
    return {m: float(r) for m, r in per.items()}, float(max(per.values()))


def regret_screen(matrix: ScoreMatrix, rho: float) -> list[str]:
    bound = exact(rho)
    return [p for p in matrix.proposals if max(_exact_regret(matrix, p).values()) <= bound]


def supporters(matrix: ScoreMatrix, p: str, theta: float) -> tuple[str, ...]:
    matrix._require(p)
    th = exact(theta)
    return tuple(m for m in matrix.modules if matrix._exact[(m, p)] >= th)


@dataclass(frozen=True)
class ObjectionEvent:
    """A scripted lifecycle change applied at the start of ``round``."""

    round: int
    module_id: str
    objection_id: str
    status: ObjectionStatus

    def __post_init__(self):
        object.__setattr__(self, "status", ObjectionStatus(self.status))
        if isinstance(self.round, bool) or not isinstance(self.round, int) or self.round < 1:
            raise ValidationError(f"objection event round {self.round!r} must be an integer >= 1")

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "module_id": self.module_id,
            "objection_id": self.objection_id,
            "status": self.status.value,
        }


@dataclass(frozen=True)
class RoundRecord:
    round: int
    theta: float
    kappa: int
    status_changes: tuple[Mapping[str, Any], ...]
    supporters: tuple[str, ...]
    objection_status: Mapping[str, Mapping[str, Any]]
    support_met: bool
    objections_clear: bool

    @property
    def qualified(self) -> bool:
        return self.support_met and self.objections_clear

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "theta": self.theta,
            "kappa": self.kappa,
            "status_changes": [dict(c) for c in self.status_changes],
            "supporters": list(self.supporters),
            "objection_status": {k: dict(v) for k, v in self.objection_status.items()},
            "support_met": self.support_met,
            "objections_clear": self.objections_clear,
            "qualified": self.qualified,
        }


@dataclass(frozen=True)
class DeliberationTranscript:
    proposal_id: str
    rounds: tuple[RoundRecord, ...] = ()

    def to_dict(self) -> dict:
        return {"proposal_id": self.proposal_id, "rounds": [r.to_dict() for r in self.rounds]}


def _objection_key(module_id: str, objection_id: str) -> str:
    return f"{module_id}:{objection_id}"


def objections_resolved(transcript: DeliberationTranscript, t: int) -> bool:
    """True iff no constructive objection is open at round ``t``."""
    if not (1 <= t <= len(transcript.rounds)):
        raise ValidationError(f"transcript for {transcript.proposal_id} has no round {t}")
    state = transcript.rounds[t - 1].objection_status
    return all(
        ObjectionStatus(s["status"]).resolved for s in state.values() if s["constructive"]
    )


def deliberate(
    params: SecpParams,
    matrix: ScoreMatrix,
    proposal_id: str,
    objections: Mapping[str, Sequence[Objection]] | None = None,
    events: Sequence[ObjectionEvent] = (),
) -> DeliberationTranscript:
    """Run up to ``t_max`` rounds for one proposal.

    ``objections`` maps module id to that module's objections against the
    proposal. With the ``earliest`` tie-break deliberation stops at the
    first qualifying round; ``latest`` always runs the full schedule.
    """
    state: dict[str, Objection] = {}
    for m, objs in (objections or {}).items():
        for o in objs:
            state[_objection_key(m, o.id)] = o
    by_round: dict[int, list[ObjectionEvent]] = {}
    for ev in events:
        by_round.setdefault(ev.round, []).append(ev)

    rounds = []
    for t, step in enumerate(params.schedule, start=1):
        changes = []
        for ev in by_round.get(t, ()):
            key = _objection_key(ev.module_id, ev.objection_id)
            if key not in state:
                raise ObjectionLifecycleError(
                    f"{proposal_id}: round {t} event references unknown objection {key!r}"
                )
            state[key] = state[key].transition(ev.status)
            changes.append(ev.to_dict())
        sup = supporters(matrix, proposal_id, step.theta)
        snapshot = {
            k: {"status": o.status.value, "constructive": o.constructive}
            for k, o in sorted(state.items())
        }
        clear = all(o.status.resolved for o in state.values() if o.constructive)
        record = RoundRecord(
            round=t,
            theta=step.theta,
            kappa=step.kappa,
            status_changes=tuple(changes),
            supporters=sup,
            objection_status=snapshot,
            support_met=len(sup) >= step.kappa,
            objections_clear=clear,
        )
        rounds.append(record)
        if record.qualified and params.tie_break == "earliest":
            break
    return DeliberationTranscript(proposal_id, tuple(rounds))


def run_secp(
    params: SecpParams,
    matrix: ScoreMatrix,
    events: Mapping[str, Sequence[ObjectionEvent]] | None = None,
    assessments: Iterable[AssessmentRecord] = (),
    protocol_version_id: str = "secp/v1",
) -> tuple[dict[str, Decision], dict[str, DeliberationTranscript]]:
    """Decide every proposal in ``matrix``; returns decisions and deliberation transcripts."""
    params.validate(n_modules=len(matrix.modules))
    events = events or {}
    unknown = set(events) - set(matrix.proposals)
    if unknown:
        raise ValidationError(f"deliberation events for unknown proposals {sorted(unknown)}")
    objections: dict[str, dict[str, Sequence[Objection]]] = {}
    for a in assessments:
        if a.proposal_id not in matrix.proposals or a.module_id not in matrix.modules:
            raise ValidationError(f"assessment ({a.module_id}, {a.proposal_id}) outside score matrix")
        if exact(a.score) != exact(matrix.score(a.module_id, a.proposal_id)):
            raise ValidationError(f"assessment ({a.module_id}, {a.proposal_id}) disagrees with score matrix")
        objections.setdefault(a.proposal_id, {})[a.module_id] = a.objections

    survivors = set(pareto_filter(matrix))
    bound = exact(params.rho)
    decisions: dict[str, Decision] = {}
    transcripts: dict[str, DeliberationTranscript] = {}
    for p in matrix.proposals:
        trace: list[dict[str, Any]] = []
        transcript = DeliberationTranscript(p)
        outcome = Outcome.REJECT
        if p not in survivors:
            trace.append({"step": "pareto", "passed": False, "dominated_by": dominators(matrix, p)})
        else:
            trace.append({"step": "pareto", "passed": True})
            per = _exact_regret(matrix, p)
            r_max = max(per.values())
            worst = [m for m in matrix.modules if per[m] == r_max]
            passed = r_max <= bound
            trace.append({
                "step": "regret",
                "passed": passed,
                "r_max": float(r_max),
                "rho": params.rho,
                "worst_modules": worst,
            })
            if passed:
                transcript = deliberate(params, matrix, p, objections.get(p), events.get(p, ()))
                for r in transcript.rounds:
                    trace.append({
                        "step": "round",
                        "round": r.round,
                        "theta": r.theta,
                        "kappa": r.kappa,
                        "supporters": len(r.supporters),
                        "support_met": r.support_met,
                        "objections_clear": r.objections_clear,
                        "qualified": r.qualified,
                    })
                qualifying = [r.round for r in transcript.rounds if r.qualified]
                if qualifying:
                    outcome = Outcome.ACCEPT
                    chosen = qualifying[0] if params.tie_break == "earliest" else qualifying[-1]
                    trace.append({"step": "accept", "round": chosen})
                elif any(r.support_met for r in transcript.rounds):
                    trace.append({"step": "objections", "passed": False,
                                  "rounds_run": len(transcript.rounds)})
                else:
                    trace.append({"step": "support", "passed": False,
                                  "rounds_run": len(transcript.rounds)})
        trace.append({"step": "decision", "outcome": outcome.value})
        decisions[p] = Decision(p, outcome, protocol_version_id, tuple(trace))
        transcripts[p] = transcript
    return decisions, transcripts


def decide_secp(
    params: SecpParams,
    matrix: ScoreMatrix,
    events: Mapping[str, Sequence[ObjectionEvent]] | None = None,
    assessments: Iterable[AssessmentRecord] = (),
    protocol_version_id: str = "secp/v1",
) -> dict[str, Decision]:
    decisions, _ = run_secp(params, matrix, events, assessments, protocol_version_id)
    return decisions
