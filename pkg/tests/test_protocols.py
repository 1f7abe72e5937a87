from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from secp.errors import ModuleSetError, ObjectionLifecycleError, UndefinedRelativeChange, ValidationError
from secp.protocols import (
    AssessmentRecord,
    CoverageReport,
    Decision,
    Objection,
    ObjectionStatus,
    Outcome,
    coverage,
    decide_scalar,
    decide_unanimity,
    format_percent,
    global_score,
    relative_coverage_change,
)

MODS = ["A", "B", "C", "D", "E", "F"]


def records(scores, recs=None, pid="p"):
    recs = recs or ["Accept"] * len(scores)
    return [AssessmentRecord(m, pid, s, r) for m, s, r in zip(MODS, scores, recs)]


def test_unanimity_accepts_without_vetoes():
    d = decide_unanimity(records([0.9] * 6), modules=MODS)
    assert d.outcome is Outcome.ACCEPT


def test_single_veto_rejects_regardless_of_scores():
    d = decide_unanimity(records([1.0] * 6, ["Accept"] * 5 + ["Veto"]), modules=MODS)
    assert d.outcome is Outcome.REJECT
    assert {"step": "veto", "module_id": "F"} in d.rationale_trace


def test_unanimity_ignores_scores():
    d = decide_unanimity(records([0.0] * 6), modules=MODS)
    assert d.outcome is Outcome.ACCEPT


def test_scalar_examples():
    assert decide_scalar(records([0.7, 0.7, 0.6, 0.5, 0.5, 0.6])).outcome is Outcome.ACCEPT
    d = decide_scalar(records([0.6, 0.6, 0.6, 0.6, 0.6, 0.55]))
    assert d.outcome is Outcome.REJECT
    assert global_score(records([0.6, 0.6, 0.6, 0.6, 0.6, 0.55])) == pytest.approx(0.591666, abs=1e-5)


def test_scalar_boundary_is_inclusive():
    # mean computed by float summation would land just below 0.6
    rs = records([0.7, 0.5, 0.7, 0.5, 0.7, 0.5])
    assert global_score(rs) == 0.6
    assert decide_scalar(rs, tau=0.6).outcome is Outcome.ACCEPT


def test_scalar_compensation():
    rs = records([1.0, 1.0, 1.0, 1.0, 1.0, 0.0], ["Accept"] * 5 + ["Veto"])
    assert decide_scalar(rs).outcome is Outcome.ACCEPT


def test_scalar_tau_range():
    with pytest.raises(ValidationError):
        decide_scalar(records([0.5] * 6), tau=1.5)


def test_module_set_checks():
    with pytest.raises(ModuleSetError):
        decide_unanimity(records([0.5] * 5), modules=MODS)
    with pytest.raises(ModuleSetError):
        decide_unanimity([])
    mixed = records([0.5] * 5) + [AssessmentRecord("F", "other", 0.5, "Accept")]
    with pytest.raises(ModuleSetError):
        decide_scalar(mixed)
    dup = records([0.5] * 6)
    dup[5] = AssessmentRecord("A", "p", 0.5, "Accept")
    with pytest.raises(ModuleSetError):
        decide_unanimity(dup)


def test_assessment_record_validation():
    with pytest.raises(ValidationError):
        AssessmentRecord("A", "p", 1.2, "Accept")
    with pytest.raises(ValidationError):
        AssessmentRecord("A", "p", 0.5, "maybe")
    o = Objection("o1", "x", "ref", True)
    with pytest.raises(ValidationError):
        AssessmentRecord("A", "p", 0.5, "Veto", (o, o))


def test_objection_lifecycle():
    o = Objection("o1", "missing quorum argument", "proof", True)
    w = o.transition("withdrawn")
    assert w.status is ObjectionStatus.WITHDRAWN and w.status.resolved
    assert o.transition(ObjectionStatus.REBUTTED_ACKNOWLEDGED).status.resolved
    with pytest.raises(ObjectionLifecycleError):
        w.transition("rebutted_acknowledged")
    with pytest.raises(ObjectionLifecycleError):
        o.transition("open")


def _decisions(pattern, version="v"):
    return [Decision(f"p{i}", Outcome.ACCEPT if a else Outcome.REJECT, version, ()) for i, a in enumerate(pattern)]


def test_coverage_counts_accepts():
    rep = coverage(_decisions([1, 0, 1, 1, 0, 0]), [f"p{i}" for i in range(6)])
    assert rep.delta_s == 3 and rep.accepted_ids == ("p0", "p2", "p3") and rep.feasible_count == 6
    assert coverage([]).delta_s == 0


def test_coverage_rejects_inconsistent_input():
    with pytest.raises(ValidationError):
        coverage(_decisions([1, 0]), ["p0", "p1", "p2"])
    with pytest.raises(ValidationError):
        coverage(_decisions([1]) + _decisions([0]))
    with pytest.raises(ValidationError):
        coverage(_decisions([1], "a") + [Decision("p9", Outcome.ACCEPT, "b", ())])


def _cov(n):
    return CoverageReport("v", tuple(f"p{i}" for i in range(n)), 6)


@pytest.mark.parametrize("before,after,expected", [(2, 3, 50), (3, 3, 0), (4, 2, -50), (3, 4, Fraction(100, 3))])
def test_relative_change_examples(before, after, expected):
    got = relative_coverage_change(_cov(before), _cov(after))
    assert isinstance(got, Fraction) and got == expected


def test_relative_change_undefined_at_zero():
    with pytest.raises(UndefinedRelativeChange) as info:
        relative_coverage_change(_cov(0), _cov(2))
    assert info.value.absolute_delta == 2


def test_format_percent():
    assert format_percent(Fraction(50)) == "50%"
    assert format_percent(Fraction(-50)) == "-50%"
    assert format_percent(Fraction(100, 3)) == "33.33%"


@given(st.integers(1, 50), st.integers(0, 50))
def test_relative_change_matches_integer_formula(before, after):
    got = relative_coverage_change(_cov(before), _cov(after))
    assert got * before == 100 * (after - before)


grid = st.integers(0, 20).map(lambda k: k / 20)


@given(st.lists(grid, min_size=6, max_size=6), st.integers(0, 20))
def test_scalar_matches_integer_mean(scores, tau_k):
    tau = tau_k / 20
    ks = [round(s * 20) for s in scores]
    expected = Outcome.ACCEPT if sum(ks) >= 6 * tau_k else Outcome.REJECT
    assert decide_scalar(records(scores), tau=tau).outcome is expected
