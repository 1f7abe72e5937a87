import json
import shutil
from pathlib import Path

import pytest

from secp.evaluators import DEFAULT_MODULES
from secp.gatekeeper import Attestation, FaultModel, Proposal

REPLICATION = Path(__file__).resolve().parents[1] / "src" / "secp" / "data" / "replication"

ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def replication_dir(tmp_path) -> Path:
    """A writable copy of the shipped replication fixtures."""
    dest = tmp_path / "replication"
    shutil.copytree(REPLICATION, dest)
    return dest


@pytest.fixture
def session_config(replication_dir):
    from secp.harness import SessionConfig

    return SessionConfig.load(replication_dir / "session.json")


@pytest.fixture
def modules():
    return list(DEFAULT_MODULES)


def make_proposal(pid="P1", words=20, degree=2, a=3, b=1, safety="pass", liveness="pass"):
    return Proposal(
        id=pid,
        label=pid,
        fault_model=FaultModel(a, b),
        msg_complexity_degree=degree,
        safety_attestation=Attestation(safety),
        liveness_attestation=Attestation(liveness),
        explanation=" ".join(["w"] * words),
    )


def edit_json(path: Path, fn):
    data = json.loads(path.read_text())
    fn(data)
    path.write_text(json.dumps(data, indent=2))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        ok, text = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {n:>2}: {text}")
