from __future__ import annotations

import json
import shutil

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import ATTACKER, FIXTURES
from oracles import ENDPOINTS, entity_precision, slice_with
from pocket.backend import ScriptedBackend, find_script
from pocket.dispatcher import ActionRequest, run_trial
from pocket.package import load_library
from pocket.telemetry import Endpoint
from pocket.trace import (
    DATASET_MANIFEST,
    HASH_FILE,
    TRIAL_FILES,
    _write_hashes,
    analyze,
    compute_eta,
    format_table,
    hash_dataset,
    verify_dataset,
    verify_trial,
    write_orchestration_failure,
    write_trial,
)


def _trial(scenario, trial_id):
    lib = load_library(FIXTURES / "agents")
    script = find_script(FIXTURES, trial_id)
    return run_trial(trial_id, scenario, lib, script.agent_id, ScriptedBackend(script), script.mode)


def _measurement(d):
    return json.loads((d / "measurement.json").read_text())["measurement"]


def test_valid_block_measurement(scenario, tmp_path):
    write_trial(_trial(scenario, "c2-gpt-5.2-1"), tmp_path / "t")
    m = _measurement(tmp_path / "t")
    assert (m["o"], m["h"], m["f"], m["eta"], m["target_is_attacker"]) == ("valid_block", 1, 0, 1.0, True)
    assert m["delta"] == 26.0 and m["tau"] == 106.0


def test_schema_fail_measurement(scenario, tmp_path):
    write_trial(_trial(scenario, "exfiltration-gpt-4o-mini-2"), tmp_path / "t")
    m = _measurement(tmp_path / "t")
    assert (m["o"], m["h"], m["f"], m["delta"], m["eta"]) == ("schema_fail", 7, 4, None, None)


def test_rewrite_is_byte_identical(scenario, tmp_path):
    run = _trial(scenario, "c2-claude-3.5-haiku-2")
    write_trial(run, tmp_path / "a")
    write_trial(_trial(scenario, "c2-claude-3.5-haiku-2"), tmp_path / "b")
    for name in sorted(p.name for p in (tmp_path / "a").iterdir()):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_eta_present_and_absent():
    target = Endpoint.parse(ATTACKER)
    req = ActionRequest("network_block", target)
    assert compute_eta(req, slice_with({"10.0.0.1:443"}), target) == (0.0, True)
    req = ActionRequest("network_block", Endpoint.parse("10.0.0.1:443"))
    assert compute_eta(req, slice_with({"10.0.0.1:443"}), target) == (1.0, False)


@settings(max_examples=300, deadline=None)
@given(st.sampled_from(ENDPOINTS), st.sets(st.sampled_from(ENDPOINTS + ("ws-01",)), max_size=3))
def test_eta_matches_membership_oracle(target, shown):
    eta, _ = compute_eta(ActionRequest("network_block", Endpoint.parse(target)), slice_with(shown),
                         Endpoint.parse(ATTACKER))
    assert eta == entity_precision(target, shown)


def test_hash_then_verify(replayed):
    assert verify_dataset(replayed) == []
    for d in sorted(p for p in replayed.iterdir() if p.is_dir()):
        assert verify_trial(d) == []


def test_modify_then_verify_names_file(replayed, tmp_path):
    ds = tmp_path / "ds"
    shutil.copytree(replayed, ds)
    target = ds / "c2-gpt-5.2-2" / "impact.json"
    target.write_text(target.read_text().replace('"ws-01"', '"ws-02"', 1))
    assert any("c2-gpt-5.2-2/impact.json" in p for p in verify_dataset(ds))
    assert verify_trial(ds / "c2-gpt-5.2-2") == ["c2-gpt-5.2-2/impact.json: digest mismatch"]


def test_hash_dataset_is_reproducible(replayed, tmp_path):
    ds = tmp_path / "ds"
    shutil.copytree(replayed, ds)
    (ds / DATASET_MANIFEST).unlink()
    hash_dataset(ds)
    assert (ds / DATASET_MANIFEST).read_bytes() == (replayed / DATASET_MANIFEST).read_bytes()


def test_c2_only_subset(replayed, tmp_path):
    ds = tmp_path / "ds"
    ds.mkdir()
    for d in replayed.glob("c2-*"):
        shutil.copytree(d, ds / d.name)
    summary = analyze(ds)
    assert summary.agents["c2"].bsn == (8, 0, 1) and summary.overall.total == 9


def test_recomputed_outcome_mismatch_excluded(replayed, tmp_path):
    ds = tmp_path / "ds"
    shutil.copytree(replayed, ds)
    d = ds / "exfiltration-gpt-4o-mini-1"
    doc = json.loads((d / "measurement.json").read_text())
    doc["measurement"]["o"] = "valid_block"
    (d / "measurement.json").write_text(json.dumps(doc))
    # re-seal both digest layers so only the recomputation can catch it
    _write_hashes(d, TRIAL_FILES)
    hash_dataset(ds)
    summary = analyze(ds)
    assert "exfiltration-gpt-4o-mini-1" in summary.excluded
    assert "recomputed schema_fail" in summary.excluded["exfiltration-gpt-4o-mini-1"][0]
    assert summary.overall.total == 17


def test_orchestration_failures_are_separate(replayed, tmp_path):
    ds = tmp_path / "ds"
    shutil.copytree(replayed, ds)
    write_orchestration_failure(ds / "c2-bad-alias-1", "c2-bad-alias-1", "backend returned HTTP 404", {"agent_id": "c2"})
    hash_dataset(ds)
    summary = analyze(ds)
    assert summary.orchestration_failures == ["c2-bad-alias-1"]
    assert summary.overall.total == 18 and summary.ok


def test_missing_hash_file_is_flagged(replayed, tmp_path):
    ds = tmp_path / "ds"
    shutil.copytree(replayed, ds)
    (ds / "c2-gpt-5.2-3" / HASH_FILE).unlink()
    summary = analyze(ds)
    assert not summary.ok and summary.overall.total == 17


def test_format_table_rows(replayed):
    table = format_table(analyze(replayed)).splitlines()
    assert "exfiltration + gpt-4o-mini\t0/3/0\t0\t--\t7/4" in table
    assert table[-1] == "all 18 trials\t13/4/1\t0\t45.2\t72.2%"


@pytest.mark.parametrize("name", ["transcript.json", "slice.json", "decision.json", "manifest.json"])
def test_trial_files_written(replayed, name):
    assert (replayed / "c2-gpt-4o-mini-3" / name).is_file()
