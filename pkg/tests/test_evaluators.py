import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from secp.errors import CoverageGapError, EvaluatorError, EvaluatorTimeout, MalformedResponseError, ValidationError
from secp.evaluators import (
    CONTRACT,
    Endpoint,
    ModuleSpec,
    OutOfRangeScoreError,
    RemoteEvaluator,
    ScriptedEvaluator,
    load_fixture,
    parse_fixture,
    remote_assess,
)
from secp.evolution import ModificationProposal, Vote
from secp.protocols import Recommendation
from secp.rubric import QuestionnaireSpec

from conftest import REPLICATION, make_proposal

SIX_IDS = ["C_EXP", "C_VAL", "C_MIN", "G_ROB", "G_PRF", "G_ECO"]


def fixture_dict():
    return json.loads((REPLICATION / "evaluators" / "economizer.json").read_text())


def test_valid_fixture_round_trip():
    fx = load_fixture(REPLICATION / "evaluators" / "economizer.json", SIX_IDS)
    ev = ScriptedEvaluator(fx)
    rec = ev.assess(make_proposal("C_MIN"))
    assert rec.module_id == "Economizer" and rec.score == 0.875
    assert rec.recommendation is Recommendation.ACCEPT
    assert ev.assess(make_proposal("C_MIN")) == rec
    assert [e.round for e in ev.events(make_proposal("C_VAL"))] == [2]


def test_missing_proposal_is_a_coverage_gap():
    raw = fixture_dict()
    del raw["proposals"]["G_ECO"]
    with pytest.raises(CoverageGapError):
        parse_fixture(raw, SIX_IDS)
    fx = parse_fixture(raw)
    with pytest.raises(CoverageGapError):
        ScriptedEvaluator(fx).assess(make_proposal("G_ECO"))


def test_invalid_answer_token():
    raw = fixture_dict()
    raw["proposals"]["C_EXP"]["answers"]["ECO-M1"] = "Maybe"
    with pytest.raises(ValidationError, match="Maybe"):
        parse_fixture(raw)


def test_event_for_unknown_objection():
    raw = fixture_dict()
    raw["proposals"]["C_EXP"]["events"] = [{"round": 1, "objection_id": "ghost", "status": "withdrawn"}]
    with pytest.raises(ValidationError):
        parse_fixture(raw)


def test_votes_in_shipped_fixtures():
    mp = ModificationProposal("secp-v2", (), {}, "r")
    votes = [ScriptedEvaluator(load_fixture(p)).vote(mp) for p in sorted((REPLICATION / "evaluators").glob("*.json"))]
    assert votes.count(Vote.APPROVE) == 5 and votes.count(Vote.REJECT) == 1


SPEC = ModuleSpec("Remote", "testing", QuestionnaireSpec.from_dict({
    "module_id": "Remote",
    "categories": [{"id": "c", "weight": 1.0, "questions": ["q1", "q2"]}],
}))


class _Handler(BaseHTTPRequestHandler):
    reply = None
    delay = 0.0
    seen: list = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        type(self).seen.append({"body": body, "auth": self.headers.get("Authorization")})
        time.sleep(type(self).delay)
        out = type(self).reply(body) if callable(type(self).reply) else type(self).reply
        data = json.dumps(out).encode()
        try:
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)
        except (BrokenPipeError, ConnectionResetError):
            pass

    def log_message(self, *args):
        pass


@pytest.fixture
def server():
    handler = type("H", (_Handler,), {"reply": None, "delay": 0.0, "seen": []})
    httpd = ThreadingHTTPServer(("127.0.0.1", 0), handler)
    httpd.daemon_threads = True
    t = threading.Thread(target=httpd.serve_forever, daemon=True)
    t.start()
    yield handler, f"http://127.0.0.1:{httpd.server_address[1]}/assess"
    httpd.shutdown()
    httpd.server_close()


def test_remote_answers_response(server, monkeypatch):
    handler, url = server
    handler.reply = {"answers": {"q1": "Yes", "q2": "Partial"}, "recommendation": "Accept",
                     "objections": [{"id": "o", "constructive": True, "description": "d", "reference": "r"}],
                     "events": [{"round": 2, "objection_id": "o", "status": "withdrawn"}]}
    monkeypatch.setenv("SECP_TEST_TOKEN", "s3cret")
    ev = RemoteEvaluator(SPEC, Endpoint(url, 2.0, "SECP_TEST_TOKEN"))
    rec = ev.assess(make_proposal("P1"))
    assert rec.score == 0.75 and rec.objections[0].id == "o"
    assert ev.events(make_proposal("P1"))[0].round == 2
    req = handler.seen[0]
    assert req["body"]["contract"] == CONTRACT and req["body"]["type"] == "assess"
    assert req["body"]["proposal"]["id"] == "P1"
    assert req["auth"] == "Bearer s3cret"


def test_remote_score_response(server):
    handler, url = server
    handler.reply = {"score": 0.4, "recommendation": "Veto"}
    rec = remote_assess(Endpoint(url, 2.0), SPEC, make_proposal("P1"))
    assert rec.score == 0.4 and rec.recommendation is Recommendation.VETO


@pytest.mark.parametrize("reply,exc", [
    ({"score": 1.2, "recommendation": "Accept"}, OutOfRangeScoreError),
    ({"score": 0.5, "answers": {"q1": "Yes", "q2": "No"}, "recommendation": "Accept"}, MalformedResponseError),
    ({"recommendation": "Accept"}, MalformedResponseError),
    ({"answers": {"q1": "Maybe", "q2": "No"}, "recommendation": "Accept"}, MalformedResponseError),
    ({"score": 0.5, "recommendation": "Abstain"}, MalformedResponseError),
    ({"score": 0.5, "recommendation": "Accept", "proposal_id": "other"}, MalformedResponseError),
    ([1, 2], MalformedResponseError),
])
def test_remote_malformed_responses(server, reply, exc):
    handler, url = server
    handler.reply = reply
    with pytest.raises(exc):
        remote_assess(Endpoint(url, 2.0), SPEC, make_proposal("P1"))


def test_remote_timeout(server):
    handler, url = server
    handler.reply = {"score": 0.5, "recommendation": "Accept"}
    handler.delay = 1.0
    with pytest.raises(EvaluatorTimeout):
        remote_assess(Endpoint(url, 0.2), SPEC, make_proposal("P1"))


def test_remote_unreachable():
    with pytest.raises(EvaluatorError):
        remote_assess(Endpoint("http://127.0.0.1:9/none", 0.5), SPEC, make_proposal("P1"))


def test_remote_vote(server):
    handler, url = server
    handler.reply = lambda body: {"candidate_id": body["modification"]["candidate_id"], "vote": "approve"}
    ev = RemoteEvaluator(SPEC, Endpoint(url, 2.0))
    assert ev.vote(ModificationProposal("secp-v2", (), {"rho": 0.1}, "r")) is Vote.APPROVE
    handler.reply = {"candidate_id": "other", "vote": "approve"}
    with pytest.raises(MalformedResponseError):
        ev.vote(ModificationProposal("secp-v2", (), {}, "r"))
