"""Deterministic questionnaire scoring.

A module score is the weighted sum, over the module's categories, of the
mean answer value in each category. Accumulation runs left to right in the
questionnaire's declared order so logged scores are bit-reproducible.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

from .errors import MalformedSheetError, ValidationError

WEIGHT_TOLERANCE = 1e-9

ANSWER_VALUES = {"No": 0.0, "Partial": 0.5, "Yes": 1.0}


def answer_value(answer: str) -> float:
    try:
        return ANSWER_VALUES[answer]
    except (KeyError, TypeError):
        raise MalformedSheetError(f"unknown answer token {answer!r}") from None


@dataclass(frozen=True)
class Category:
    id: str
    weight: float
    questions: tuple[str, ...]


@dataclass(frozen=True)
class QuestionnaireSpec:
    module_id: str
    categories: tuple[Category, ...]
    # Optional question wording, keyed by question id. Not used for scoring.
    prompts: Mapping[str, str] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.categories:
            raise ValidationError(f"{self.module_id}: questionnaire has no categories")
        seen: set[str] = set()
        for cat in self.categories:
            if not cat.questions:
                raise ValidationError(f"{self.module_id}: category {cat.id!r} is empty")
            if not (0.0 <= cat.weight <= 1.0):
                raise ValidationError(f"{self.module_id}: weight of {cat.id!r} outside [0, 1]")
            for q in cat.questions:
                if q in seen:
                    raise ValidationError(f"{self.module_id}: duplicate question id {q!r}")
                seen.add(q)
        total = math.fsum(c.weight for c in self.categories)
        if abs(total - 1.0) > WEIGHT_TOLERANCE:
            raise ValidationError(f"{self.module_id}: category weights sum to {total!r}, not 1")

    @property
    def question_ids(self) -> tuple[str, ...]:
        return tuple(q for c in self.categories for q in c.questions)

    def to_dict(self) -> dict:
        d = {
            "module_id": self.module_id,
            "categories": [
                {"id": c.id, "weight": c.weight, "questions": list(c.questions)}
                for c in self.categories
            ],
        }
        if self.prompts:
            d["prompts"] = dict(self.prompts)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "QuestionnaireSpec":
        try:
            cats = tuple(
                Category(str(c["id"]), float(c["weight"]), tuple(str(q) for q in c["questions"]))
                for c in d["categories"]
            )
            return cls(str(d["module_id"]), cats, dict(d.get("prompts", {})))
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed questionnaire: {exc!r}") from exc


@dataclass(frozen=True)
class AnswerSheet:
    module_id: str
    proposal_id: str
    answers: Mapping[str, str]

    def check_against(self, spec: QuestionnaireSpec) -> None:
        if self.module_id != spec.module_id:
            raise MalformedSheetError(
                f"sheet for module {self.module_id!r} scored with {spec.module_id!r} questionnaire"
            )
        expected = set(spec.question_ids)
        got = set(self.answers)
        if got != expected:
            missing = sorted(expected - got)
            extra = sorted(got - expected)
            raise MalformedSheetError(
                f"{self.module_id}/{self.proposal_id}: answers do not match questionnaire "
                f"(missing {missing}, unexpected {extra})"
            )
        for q in spec.question_ids:
            answer_value(self.answers[q])


def score(spec: QuestionnaireSpec, sheet: AnswerSheet) -> float:
    sheet.check_against(spec)
    total = 0.0
    for cat in spec.categories:
        cat_sum = 0.0
        for q in cat.questions:
            cat_sum += answer_value(sheet.answers[q])
        total += cat.weight * (cat_sum / len(cat.questions))
    # Guard rounding excursions past the unit interval.
    return min(1.0, max(0.0, total))
