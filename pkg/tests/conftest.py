from __future__ import annotations

import json
import shutil
from pathlib import Path

import pytest

from pocket.arena import load_scenario
from pocket.cli import main
from pocket.package import AgentPackage, ContextFile, FieldSpec, Manifest, load_package, parse_manifest

ROOT = Path(__file__).resolve().parent.parent
FIXTURES = ROOT / "fixtures"
SCENARIO = ROOT / "scenarios" / "darkside_small.json"
ATTACKER = "203.0.113.66:443"


def manifest(**overrides) -> Manifest:
    """A small valid manifest; keyword overrides replace manifest keys."""
    doc = {
        "agent_id": "probe",
        "tactical_purpose": "testing",
        "trigger_class": "c2_beacon",
        "action_catalog": ["network_block"],
        "report_schema": [
            {"name": "target", "value_kind": "endpoint", "required": True},
            {"name": "confirmed", "value_kind": "boolean", "required": True},
        ],
        "confirmation_field": "confirmed",
        "model_backend": "scripted",
        "query_budget": 3,
        "result_cap": 50,
        "wall_clock_budget": 120,
    }
    doc.update(overrides)
    return parse_manifest(doc)


def package(m: Manifest | None = None, prompt: str = "investigate\n") -> AgentPackage:
    return AgentPackage(m or manifest(), prompt, ContextFile())


def schema(*fields: tuple[str, str, bool]) -> tuple[FieldSpec, ...]:
    return tuple(FieldSpec(n, k, r) for n, k, r in fields)


def fence(obj) -> str:
    return "```json\n" + json.dumps(obj) + "\n```"


@pytest.fixture(scope="session")
def scenario():
    return load_scenario(SCENARIO)


@pytest.fixture(scope="session")
def c2_pkg():
    return load_package(FIXTURES / "agents" / "c2")


@pytest.fixture(scope="session")
def exfil_pkg():
    return load_package(FIXTURES / "agents" / "exfiltration")


@pytest.fixture
def agent_copy(tmp_path):
    """Copy a fixture agent directory so a test can mutate it."""

    def _copy(name: str = "c2") -> Path:
        dst = tmp_path / "agents" / name
        shutil.copytree(FIXTURES / "agents" / name, dst)
        return dst

    return _copy


@pytest.fixture(scope="session")
def replayed(tmp_path_factory) -> Path:
    """The shipped fixtures replayed once into a dataset directory (read-only for tests)."""
    out = tmp_path_factory.mktemp("dataset") / "ds"
    assert main(["replay", "--fixtures", str(FIXTURES), "--out", str(out), "--scenario", str(SCENARIO)]) == 0
    return out
