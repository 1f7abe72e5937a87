import json
import threading
from fractions import Fraction
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from secp.audit import read_entries, replay, verify_chain
from secp.cli import main
from secp.errors import ValidationError
from secp.evaluators import load_fixture
from secp.gatekeeper import load_bundle
from secp.harness import (
    EXIT_ABORTED,
    EXIT_INCONSISTENT,
    EXIT_OK,
    EXIT_TAMPER,
    EXIT_VALIDATION,
    SessionAborted,
    SessionConfig,
    run_experiment,
    sweep,
    verify_audit,
)
from secp.rubric import score

from conftest import edit_json

EXPECTED_SETS = {
    "unanimity": (),
    "scalar": ("C_EXP", "C_MIN", "C_VAL", "G_ECO", "G_PRF", "G_ROB"),
    "secp_v1": ("C_VAL", "G_PRF"),
    "secp_v2": ("C_VAL", "G_PRF", "G_ROB"),
}


def test_replication_run(session_config):
    report = run_experiment(session_config)
    assert report.counts == (0, 6, 2, 3)
    assert {r: c.accepted_ids for r, c in report.coverage.items()} == EXPECTED_SETS
    assert report.relative_change_pct == 50 and report.absolute_change == 1
    assert report.modification["adopted"] and report.modification["approvals"] == 5
    assert all(v for k, v in report.invariants.items())
    assert report.versions["secp_v2"] == "secp/v2"
    assert session_config.report.exists() and session_config.report.with_suffix(".csv").exists()


def test_rerun_is_deterministic(replication_dir, session_config):
    first = run_experiment(session_config).to_dict()
    second = run_experiment(session_config, overwrite=True).to_dict()
    for key in ("coverage", "assessment_digest", "accepted_table", "relative_change_pct"):
        assert first[key] == second[key]


def test_existing_log_is_not_clobbered(session_config):
    run_experiment(session_config)
    with pytest.raises(Exception):
        run_experiment(session_config)


def test_quorum_six_retains_v1(replication_dir):
    edit_json(replication_dir / "session.json", lambda d: d.update(quorum=6))
    report = run_experiment(SessionConfig.load(replication_dir / "session.json"))
    assert report.counts == (0, 6, 2, 2)
    assert report.relative_change_pct == 0
    assert not report.modification["adopted"]
    assert report.versions["secp_v2"] == "secp/v1"


def test_invalid_schedule_candidate_rejected(replication_dir):
    def bad(d):
        d["deltas"]["schedule"] = [{"theta": 0.7, "kappa": 3}, {"theta": 0.75, "kappa": 4}]
    edit_json(replication_dir / "secp_v2_candidate.json", bad)
    config = SessionConfig.load(replication_dir / "session.json")
    report = run_experiment(config)
    assert report.counts == (0, 6, 2, 2)
    assert report.modification["inv"]["pass"] is False
    kinds = [e.kind for e in read_entries(config.audit_log)]
    assert "modification_rejected" in kinds and "modification_adopted" not in kinds


def test_no_modification_configured(replication_dir):
    edit_json(replication_dir / "session.json", lambda d: d.pop("modification"))
    report = run_experiment(SessionConfig.load(replication_dir / "session.json"))
    assert report.counts == (0, 6, 2, 2) and report.modification is None


@pytest.mark.parametrize("change", [
    {"explanation": " ".join(["word"] * 501)},
    {"msg_complexity_degree": 3},
    {"safety_attestation": "fail"},
    {"liveness_attestation": "absent"},
])
def test_gate_rejects_before_protocols(replication_dir, change):
    def add(d):
        extra = dict(d["proposals"][0], id="X_BAD", label="infeasible variant")
        extra.update(change)
        d["proposals"].append(extra)
    edit_json(replication_dir / "proposals.json", add)
    config = SessionConfig.load(replication_dir / "session.json")
    report = run_experiment(config)
    assert report.counts == (0, 6, 2, 3)
    assert report.accepted_table["X_BAD"] == dict.fromkeys(EXPECTED_SETS, "Gate-rejected")
    entries = read_entries(config.audit_log)
    mentions = [e for e in entries if e.kind in ("assessment", "protocol_state", "decision")
                and "X_BAD" in json.dumps(e.payload.get("decision", e.payload.get("record", {})))]
    assert mentions == []
    gate = [e.payload for e in entries if e.kind == "gate_report" and e.payload["proposal_id"] == "X_BAD"]
    assert gate[0]["joint"] is False and gate[0]["rejected_without_protocol"] is True
    assert all("X_BAD" not in e.payload["feasible_ids"] for e in entries if e.kind == "protocol_state"
               and e.payload.get("phase") == "start")


def test_regime_isolation(session_config):
    run_experiment(session_config)
    starts = [e.payload for e in read_entries(session_config.audit_log)
              if e.kind == "protocol_state" and e.payload["phase"] == "start"]
    assert [s["regime"] for s in starts] == list(EXPECTED_SETS)
    assert len({s["assessment_digest"] for s in starts}) == 1


def test_report_and_audit_agree(session_config):
    report = run_experiment(session_config)
    summary = verify_audit(session_config.audit_log, session_config.report)
    assert summary.ok and summary.exit_code == EXIT_OK and summary.report_matches
    state = summary.state
    assert state.coverage_counts == dict(zip(EXPECTED_SETS, (0, 6, 2, 3)))
    assert state.report == json.loads(session_config.report.read_text())
    entries = read_entries(session_config.audit_log)
    assert report.audit_head_digest == entries[-3].digest  # entry preceding the report


def test_verify_detects_report_edit(session_config):
    run_experiment(session_config)
    edit_json(session_config.report, lambda d: d["coverage"]["secp_v2"].update(delta_s=4))
    assert verify_audit(session_config.audit_log, session_config.report).exit_code == EXIT_INCONSISTENT


def test_cli_run_verify_replay(replication_dir, capsys):
    out_dir = replication_dir / "cli_out"
    cfg = str(replication_dir / "session.json")
    assert main(["run", "--config", cfg, "--out-dir", str(out_dir), "--csv"]) == EXIT_OK
    text = capsys.readouterr().out
    assert "Relative coverage change v1.0 -> v2.0: 50%" in text
    assert "secp_v2,SECP v2.0" in text or "secp_v2," in text
    log = str(out_dir / "audit.jsonl")
    assert main(["verify", "--log", log, "--report", str(out_dir / "report.json")]) == EXIT_OK
    assert main(["replay", "--log", log]) == EXIT_OK
    out = capsys.readouterr().out
    assert "G_ECO" in out and "dominated by C_MIN" in out
    assert main(["replay", "--log", log, "--json"]) == EXIT_OK
    replayed = json.loads(capsys.readouterr().out)
    assert replayed["coverage"]["secp_v2"]["delta_s"] == 3


def test_cli_verify_tamper(session_config, capsys):
    run_experiment(session_config)
    data = bytearray(session_config.audit_log.read_bytes())
    data[len(data) // 2] ^= 0x04
    session_config.audit_log.write_bytes(bytes(data))
    bad = verify_chain(session_config.audit_log).first_bad_sequence
    assert main(["verify", "--log", str(session_config.audit_log)]) == EXIT_TAMPER
    assert f"sequence {bad}" in capsys.readouterr().out
    assert main(["replay", "--log", str(session_config.audit_log)]) == EXIT_TAMPER


class _Dead(BaseHTTPRequestHandler):
    def do_POST(self):
        self.send_response(500)
        self.end_headers()

    def log_message(self, *args):
        pass


def test_aborted_session(replication_dir, capsys):
    httpd = ThreadingHTTPServer(("127.0.0.1", 0), _Dead)
    threading.Thread(target=httpd.serve_forever, daemon=True).start()
    try:
        (replication_dir / "q.json").write_text(json.dumps(
            load_fixture(replication_dir / "evaluators" / "economizer.json").questionnaire.to_dict()))

        def remote(d):
            d["modules"][-1] = {"module_id": "Economizer", "questionnaire": "q.json",
                                "remote": {"url": f"http://127.0.0.1:{httpd.server_address[1]}/", "timeout": 2}}
        edit_json(replication_dir / "session.json", remote)
        config = SessionConfig.load(replication_dir / "session.json")
        with pytest.raises(SessionAborted):
            run_experiment(config)
        state = replay(config.audit_log)
        assert state.status == "aborted" and state.errors and state.coverage == {}
        assert main(["verify", "--log", str(config.audit_log)]) == EXIT_ABORTED
        assert main(["replay", "--log", str(config.audit_log)]) == EXIT_ABORTED
        assert main(["run", "--config", str(replication_dir / "session.json"), "--overwrite"]) == EXIT_ABORTED
    finally:
        httpd.shutdown()
        httpd.server_close()


class _Echo(BaseHTTPRequestHandler):
    """Serves the Economizer's scripted answers over the wire contract."""

    fixture = None

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        fx = type(self).fixture
        if body["type"] == "assess":
            s = fx.proposals[body["proposal"]["id"]]
            out = {"answers": dict(s.sheet.answers), "recommendation": s.recommendation.value,
                   "objections": [o.to_dict() for o in s.objections],
                   "events": [e.to_dict() for e in s.events]}
        else:
            cid = body["modification"]["candidate_id"]
            out = {"candidate_id": cid, "vote": fx.votes[cid].value}
        data = json.dumps(out).encode()
        self.send_response(200)
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


def test_remote_module_reproduces_scripted_run(replication_dir):
    fx = load_fixture(replication_dir / "evaluators" / "economizer.json")
    handler = type("E", (_Echo,), {"fixture": fx})
    httpd = ThreadingHTTPServer(("127.0.0.1", 0), handler)
    threading.Thread(target=httpd.serve_forever, daemon=True).start()
    try:
        scripted = run_experiment(SessionConfig.load(replication_dir / "session.json"))
        (replication_dir / "q.json").write_text(json.dumps(fx.questionnaire.to_dict()))

        def remote(d):
            d["modules"][-1] = {"module_id": "Economizer", "questionnaire": "q.json", "expertise": fx.expertise,
                                "remote": {"url": f"http://127.0.0.1:{httpd.server_address[1]}/"}}
            d["audit_log"] = "out/remote.jsonl"
            d["report"] = "out/remote.json"
        edit_json(replication_dir / "session.json", remote)
        report = run_experiment(SessionConfig.load(replication_dir / "session.json"))
        assert report.counts == (0, 6, 2, 3)
        assert report.assessment_digest == scripted.assessment_digest
    finally:
        httpd.shutdown()
        httpd.server_close()


def test_cli_validation_and_usage_errors(replication_dir, capsys):
    edit_json(replication_dir / "secp_v1.json", lambda d: d.update(rho=1.5))
    assert main(["run", "--config", str(replication_dir / "session.json")]) == EXIT_VALIDATION
    assert main(["run", "--config", str(replication_dir / "missing.json")]) == EXIT_VALIDATION
    with pytest.raises(SystemExit) as info:
        main(["sweep", "--config", "x", "--param", "gamma", "--values", "1"])
    assert info.value.code == 2


def _brute_means(replication_dir):
    ids = [p.id for p in load_bundle(replication_dir / "proposals.json")]
    fixtures = [load_fixture(p) for p in sorted((replication_dir / "evaluators").glob("*.json"))]
    return {pid: sum(Fraction(score(f.questionnaire, f.proposals[pid].sheet)) for f in fixtures) / len(fixtures)
            for pid in ids}


def test_tau_sweep(session_config, replication_dir):
    rows = sweep(session_config, "tau", [0.0, 0.6, 1.0])
    means = _brute_means(replication_dir)
    expected = [sum(m >= Fraction(t) for m in means.values()) for t in (0, Fraction(3, 5), 1)]
    assert [r["delta_s"] for r in rows] == expected
    assert expected[0] == 6 and expected[2] == sum(m == 1 for m in means.values())


def test_rho_sweep_is_monotone(session_config):
    rows = sweep(session_config, "rho", [0.0, 0.25, 0.5, 0.75, 1.0])
    counts = [r["delta_s"] for r in rows]
    assert counts == sorted(counts)
    assert counts[2] == 2


def test_sweep_edge_cases(session_config, capsys, replication_dir):
    assert sweep(session_config, "tau", []) == []
    with pytest.raises(ValidationError):
        sweep(session_config, "tau", [1.5])
    assert main(["sweep", "--config", str(replication_dir / "session.json"), "--param", "tau", "--values", ""]) == 0
    assert capsys.readouterr().out.strip() == "parameter,value,protocol_version_id,delta_s,accepted"
