from __future__ import annotations

import json
import shutil

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import FIXTURES, manifest, package
from pocket.package import (
    PackageError,
    Registry,
    RegistryError,
    load_library,
    load_package,
    register,
    select_agent,
    unresolved_hosts,
    validate_package,
)


def _edit_manifest(path, **changes):
    doc = json.loads((path / "manifest.json").read_text())
    doc.update(changes)
    (path / "manifest.json").write_text(json.dumps(doc))


def _codes(exc_info):
    return [v.code for v in exc_info.value.violations]


def test_load_canonical_c2(c2_pkg):
    m = c2_pkg.manifest
    assert m.tactical_purpose == "command-and-control"
    assert m.action_catalog == frozenset({"network_block"})
    assert m.trigger_class == "c2_beacon"
    assert m.field("c2_endpoint").value_kind == "endpoint"


def test_canonical_exfiltration_is_clean(exfil_pkg):
    assert validate_package(exfil_pkg) == []
    kinds = {f.name: f.value_kind for f in exfil_pkg.manifest.report_schema}
    assert kinds["transfer_bytes"] == "bytes" and kinds["protocol"] == "protocol_label"


def test_missing_context_names_it(agent_copy):
    d = agent_copy("c2")
    (d / "context.json").unlink()
    with pytest.raises(PackageError) as exc:
        load_package(d)
    assert _codes(exc) == ["MISSING_FILE"]
    assert "context" in str(exc.value.violations[0])


def test_zero_query_budget(agent_copy):
    d = agent_copy("c2")
    _edit_manifest(d, query_budget=0)
    with pytest.raises(PackageError) as exc:
        load_package(d)
    assert "query_budget must be ≥ 1" in [v.message for v in exc.value.violations]


def test_wrong_typed_manifest_field(agent_copy):
    d = agent_copy("c2")
    _edit_manifest(d, query_budget="3")
    with pytest.raises(PackageError) as exc:
        load_package(d)
    assert _codes(exc) == ["MANIFEST_TYPE"]


def test_bad_json_reports_line(agent_copy):
    d = agent_copy("c2")
    (d / "context.json").write_text('{\n  "trusted_subnets": [,]\n}')
    with pytest.raises(PackageError) as exc:
        load_package(d)
    assert _codes(exc) == ["PARSE_ERROR"] and "line 2" in exc.value.violations[0].message


def test_confirmation_field_absent_is_one_violation():
    pkg = package(manifest(confirmation_field="malware_confirmed"))
    assert [v.code for v in validate_package(pkg)] == ["CONFIRMATION_FIELD_MISSING"]


def test_empty_catalog_is_one_violation():
    pkg = package(manifest(action_catalog=[]))
    assert [v.code for v in validate_package(pkg)] == ["EMPTY_CATALOG"]


@pytest.mark.parametrize(
    "override, code",
    [
        ({"report_schema": [{"name": "confirmed", "value_kind": "boolean"}, {"name": "t", "value_kind": "endpoint"},
                            {"name": "t", "value_kind": "endpoint"}]}, "DUPLICATE_FIELD"),
        ({"report_schema": [{"name": "confirmed", "value_kind": "boolean"}, {"name": "t", "value_kind": "endpoint"},
                            {"name": "x", "value_kind": "ip"}]}, "UNKNOWN_VALUE_KIND"),
        ({"report_schema": [{"name": "confirmed", "value_kind": "text"}, {"name": "t", "value_kind": "endpoint"}]},
         "CONFIRMATION_FIELD_TYPE"),
        ({"report_schema": [{"name": "confirmed", "value_kind": "boolean", "required": False},
                            {"name": "t", "value_kind": "endpoint"}]}, "CONFIRMATION_FIELD_OPTIONAL"),
        ({"report_schema": [{"name": "confirmed", "value_kind": "boolean"}, {"name": "h", "value_kind": "host_id"}]},
         "NO_ENFORCEMENT_TARGET"),
        ({"report_schema": [{"name": "confirmed", "value_kind": "boolean"}, {"name": "t", "value_kind": "endpoint"},
                            {"name": "action", "value_kind": "text"}]}, "RESERVED_FIELD"),
        ({"result_cap": 0}, "BAD_RESULT_CAP"),
        ({"wall_clock_budget": 0}, "BAD_WALL_CLOCK_BUDGET"),
        ({"agent_id": " "}, "EMPTY_AGENT_ID"),
    ],
)
def test_manifest_invariants(override, code):
    assert code in [v.code for v in validate_package(package(manifest(**override)))]


def test_empty_prompt_rejected():
    assert [v.code for v in validate_package(package(prompt="  \n"))] == ["EMPTY_PROMPT"]


def test_register_two_agents(c2_pkg, exfil_pkg):
    reg = register(register(Registry(), c2_pkg), exfil_pkg)
    assert len(reg) == 2
    assert {p.manifest.trigger_class for p in reg.packages.values()} == {"c2_beacon", "exfil_volume"}


def test_register_duplicate(c2_pkg):
    with pytest.raises(RegistryError, match="duplicate"):
        register(register(Registry(), c2_pkg), c2_pkg)


def test_register_is_persistent(c2_pkg, exfil_pkg):
    base = register(Registry(), c2_pkg)
    register(base, exfil_pkg)
    assert len(base) == 1


def test_register_third_package_without_code_change(c2_pkg, exfil_pkg):
    lateral = load_package(FIXTURES / "extensions" / "agents" / "lateral_movement")
    reg = register(register(register(Registry(), c2_pkg), exfil_pkg), lateral)
    assert select_agent(reg, "lateral_movement") is lateral
    assert lateral.manifest.action_catalog == frozenset({"network_block"})


def test_select_agent(c2_pkg, exfil_pkg):
    reg = load_library(FIXTURES / "agents")
    assert select_agent(reg, "c2_beacon").agent_id == "c2"
    assert select_agent(reg, "exfil_volume").agent_id == "exfiltration"
    assert select_agent(reg, "unknown") is None


def test_library_rejects_invalid_member(tmp_path):
    shutil.copytree(FIXTURES / "agents", tmp_path / "agents")
    (tmp_path / "agents" / "broken").mkdir()
    with pytest.raises(PackageError):
        load_library(tmp_path / "agents")


def test_unresolved_context_hosts(c2_pkg):
    assert unresolved_hosts(c2_pkg, {"ws-01", "ws-02", "ws-03", "dc-01", "web-01", "web-02", "fs-01"}) == []
    assert unresolved_hosts(c2_pkg, {"ws-01"}) == ["dc-01", "fs-01", "web-01", "web-02", "ws-02", "ws-03"]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from(["c2_beacon", "exfil_volume", "lateral_movement"]), max_size=5))
def test_select_agent_ambiguity_property(triggers):
    reg = Registry()
    for i, trig in enumerate(triggers):
        reg = register(reg, package(manifest(agent_id=f"a{i}", trigger_class=trig)))
    for trig in ("c2_beacon", "exfil_volume", "lateral_movement", "other"):
        n = triggers.count(trig)
        if n > 1:
            with pytest.raises(RegistryError, match="ambiguous"):
                select_agent(reg, trig)
        elif n == 1:
            assert select_agent(reg, trig).manifest.trigger_class == trig
        else:
            assert select_agent(reg, trig) is None
