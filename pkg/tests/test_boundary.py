from __future__ import annotations

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import ATTACKER, fence, manifest
from oracles import ENDPOINTS, UNIVERSE, VALUE_KINDS, entity_subsets, expected_outcome, slice_with
from pocket.boundary import (
    GroundingMode,
    OutcomeClass,
    SchemaFail,
    TypedReport,
    UnsupportedAction,
    Ungrounded,
    admit,
    check_action,
    check_grounding,
    check_structure,
    extract_report,
)
from pocket.package import FieldSpec
from pocket.telemetry import Endpoint, EntitySet, Query, TelemetryRecord, TelemetrySlice, entity_set

C2_REPORT = {
    "action": "network_block",
    "c2_endpoint": ATTACKER,
    "converging_hosts": ["ws-01"],
    "c2_confirmed": True,
}


def test_prose_only_is_missing_delimiter():
    with pytest.raises(SchemaFail) as exc:
        extract_report("ws-01 is beaconing to 203.0.113.66:443; block it.")
    assert exc.value.code == "missing_delimiter"


def test_single_fence_returns_object():
    assert extract_report("Analysis.\n" + fence(C2_REPORT) + "\nDone.") == C2_REPORT


def test_truncated_fence_is_malformed():
    with pytest.raises(SchemaFail) as exc:
        extract_report('```json\n{"action":\n```')
    assert exc.value.code == "malformed_json"


def test_last_wellformed_fence_wins():
    text = fence({"action": "first"}) + "\n" + fence({"action": "second"}) + '\n```json\n{"broken\n```'
    assert extract_report(text) == {"action": "second"}


def test_untagged_fence_is_not_a_report():
    with pytest.raises(SchemaFail):
        extract_report("```\n" + json.dumps(C2_REPORT) + "\n```")


def test_nan_is_not_json():
    with pytest.raises(SchemaFail):
        extract_report('```json\n{"action": "network_block", "x": NaN}\n```')


def test_c2_structure(c2_pkg):
    m = c2_pkg.manifest
    rep = check_structure(C2_REPORT, m.report_schema, m.confirmation_field)
    assert rep.endpoints == (Endpoint.parse(ATTACKER),)
    assert rep.hosts == ("ws-01",) and rep.confirmed is True


def test_missing_confirmation(c2_pkg):
    m = c2_pkg.manifest
    obj = {k: v for k, v in C2_REPORT.items() if k != "c2_confirmed"}
    with pytest.raises(SchemaFail) as exc:
        check_structure(obj, m.report_schema, m.confirmation_field)
    assert exc.value.code == "missing_field:c2_confirmed"


def test_confirmation_as_text_is_wrong_type(c2_pkg):
    m = c2_pkg.manifest
    with pytest.raises(SchemaFail) as exc:
        check_structure({**C2_REPORT, "c2_confirmed": "true"}, m.report_schema, m.confirmation_field)
    assert exc.value.code == "wrong_type:c2_confirmed"


def test_bool_is_not_a_count(c2_pkg):
    m = c2_pkg.manifest
    with pytest.raises(SchemaFail) as exc:
        check_structure({**C2_REPORT, "beacon_count": True}, m.report_schema, m.confirmation_field)
    assert exc.value.code == "wrong_type:beacon_count"


def test_missing_action(c2_pkg):
    m = c2_pkg.manifest
    with pytest.raises(SchemaFail) as exc:
        check_structure({k: v for k, v in C2_REPORT.items() if k != "action"}, m.report_schema, m.confirmation_field)
    assert exc.value.code == "missing_field:action"


def _report(action="network_block", targets=(), confirmed=True):
    return TypedReport("", {}, action, tuple(targets), confirmed)


def test_check_action():
    check_action(_report(), frozenset({"network_block"}))
    with pytest.raises(UnsupportedAction):
        check_action(_report("isolate_host"), frozenset({"network_block"}))
    with pytest.raises(UnsupportedAction):
        check_action(_report(), frozenset())
    with pytest.raises(UnsupportedAction):
        check_action(_report("Network_Block"), frozenset({"network_block"}))


def test_check_grounding():
    e = Endpoint.parse(ATTACKER)
    check_grounding(_report(targets=[e]), EntitySet(frozenset({e})))
    with pytest.raises(Ungrounded) as exc:
        check_grounding(_report(targets=[e]), EntitySet())
    assert exc.value.code == "ungrounded:endpoint" and exc.value.offending == (e,)
    with pytest.raises(Ungrounded) as exc:
        check_grounding(_report(targets=[e, "ws-01"]), EntitySet())
    assert exc.value.code == "ungrounded:endpoint+host"
    with pytest.raises(Ungrounded):
        check_grounding(_report(targets=[]), EntitySet())
    check_grounding(_report(targets=[], confirmed=False), EntitySet())


@settings(max_examples=1000, deadline=None)
@given(st.sets(st.sampled_from(UNIVERSE), max_size=4), st.sets(st.sampled_from(UNIVERSE), max_size=4))
def test_grounding_matches_subset_oracle(targets, shown):
    typed = [Endpoint.parse(t) if t in ENDPOINTS else t for t in sorted(targets)]
    ents = entity_set(slice_with(shown))
    grounded = True
    try:
        check_grounding(_report(targets=typed), ents)
    except Ungrounded:
        grounded = False
    assert grounded == (bool(targets) and targets <= shown)


def _slice_for_c2():
    rec = TelemetryRecord(80.0, Endpoint.parse("10.0.1.10:50000"), Endpoint.parse(ATTACKER), "ws-01", "outbound", 400, "https")
    return TelemetrySlice(2, 50, ((Query.make("flows_to_endpoint", endpoint=ATTACKER), (rec,)),))


def test_admit_valid_block(c2_pkg):
    d = admit(fence(C2_REPORT), c2_pkg.manifest, _slice_for_c2(), "runtime")
    assert d.outcome is OutcomeClass.VALID_BLOCK and d.grounding_flag is True


def test_admit_not_confirmed_is_no_action(c2_pkg):
    d = admit(fence({**C2_REPORT, "c2_confirmed": False}), c2_pkg.manifest, _slice_for_c2(), "runtime")
    assert d.outcome is OutcomeClass.NO_ACTION


def test_admit_prose_is_schema_fail(exfil_pkg):
    d = admit("The web servers look suspicious; recommend blocking.", exfil_pkg.manifest, _slice_for_c2(), "runtime")
    assert d.outcome is OutcomeClass.SCHEMA_FAIL and d.reason_code == "missing_delimiter"
    assert d.rejected_text.startswith("The web servers")


def test_admit_ungrounded_by_mode(c2_pkg):
    empty = slice_with(set())
    runtime = admit(fence(C2_REPORT), c2_pkg.manifest, empty, GroundingMode.RUNTIME)
    post_hoc = admit(fence(C2_REPORT), c2_pkg.manifest, empty, GroundingMode.POST_HOC)
    assert runtime.outcome is OutcomeClass.UNGROUNDED and runtime.report is None
    assert post_hoc.outcome is OutcomeClass.VALID_BLOCK and post_hoc.grounding_flag is False


def test_admit_check_order(c2_pkg):
    # an unsupported action in a structurally broken report is still a schema failure
    d = admit(fence({"action": "isolate_host", "c2_confirmed": "yes"}), c2_pkg.manifest, slice_with(set()))
    assert d.outcome is OutcomeClass.SCHEMA_FAIL
    # unsupported action wins over missing grounding
    d = admit(fence({**C2_REPORT, "action": "isolate_host"}), c2_pkg.manifest, slice_with(set()))
    assert d.outcome is OutcomeClass.UNSUPPORTED_ACTION


@pytest.mark.parametrize("text", [None, 42, "", "```json```", "```json\n[1, 2]\n```", "```json\n\"s\"\n```"])
def test_admit_is_total(c2_pkg, text):
    assert admit(text, c2_pkg.manifest, slice_with(set())).outcome is OutcomeClass.SCHEMA_FAIL


# -- brute-force agreement ---------------------------------------------------------

SMALL_SCHEMA = [
    FieldSpec("target", "endpoint", True),
    FieldSpec("host", "host_id", False),
    FieldSpec("ok", "boolean", True),
]
SMALL_POOLS = {
    "target": ["10.0.0.1:443", "10.0.0.2:445", "ws-01", None],
    "host": ["ws-01", "FS_01", "not an endpoint", None],
    "ok": [True, False, "true", None],
}


def _small_manifest(catalog):
    return manifest(
        action_catalog=sorted(catalog),
        report_schema=[{"name": f.name, "value_kind": f.value_kind, "required": f.required} for f in SMALL_SCHEMA],
        confirmation_field="ok",
    )


def _strip_none(obj):
    return {k: v for k, v in obj.items() if v is not None}


def test_admit_exhaustive_small_instances():
    disagreements = 0
    checked = 0
    catalogs = [set(), {"network_block"}, {"isolate_host"}, {"network_block", "isolate_host"}]
    slices = [(ents, slice_with(ents)) for ents in entity_subsets(3)]
    for catalog in catalogs:
        m = _small_manifest(catalog)
        for action in ("network_block", "isolate_host", None):
            for t in SMALL_POOLS["target"]:
                for h in SMALL_POOLS["host"]:
                    for ok in SMALL_POOLS["ok"]:
                        obj = _strip_none({"action": action, "target": t, "host": h, "ok": ok})
                        for ents, sl in slices:
                            for mode in ("runtime", "post_hoc"):
                                want = expected_outcome(obj, SMALL_SCHEMA, "ok", catalog, ents, mode)
                                got = admit(fence(obj), m, sl, mode).outcome.value
                                disagreements += want != got
                                checked += 1
    assert checked > 10_000
    assert disagreements == 0


kinds = st.sampled_from(["endpoint", "endpoint_list", "host_id", "host_id_list", "text", "count", "bytes",
                         "protocol_label"])


@st.composite
def instances(draw):
    n = draw(st.integers(0, 2))
    fields = [FieldSpec(f"f{i}", draw(kinds), draw(st.booleans())) for i in range(n)]
    fields.append(FieldSpec("confirm", "boolean", True))
    obj = {}
    for spec in fields:
        value = draw(st.sampled_from([v for v, _ in VALUE_KINDS]))
        if value is not None:
            obj[spec.name] = value
    action = draw(st.sampled_from(["network_block", "isolate_host", None, 7]))
    if action is not None:
        obj["action"] = action
    catalog = draw(st.sets(st.sampled_from(["network_block", "isolate_host"]), max_size=2))
    ents = draw(st.sets(st.sampled_from(UNIVERSE), max_size=3))
    mode = draw(st.sampled_from(["runtime", "post_hoc"]))
    return fields, obj, catalog, ents, mode


def _manifest_for(fields, catalog):
    # may lack a required endpoint field; validation would refuse that package but admit must still agree
    schema = [{"name": f.name, "value_kind": f.value_kind, "required": f.required} for f in fields]
    return manifest(action_catalog=sorted(catalog), report_schema=schema, confirmation_field="confirm")


@settings(max_examples=1500, deadline=None)
@given(instances())
def test_admit_matches_oracle_randomized(inst):
    fields, obj, catalog, ents, mode = inst
    m = _manifest_for(fields, catalog)
    want = expected_outcome(obj, fields, "confirm", catalog, ents, mode)
    assert admit(fence(obj), m, slice_with(ents), mode).outcome.value == want
