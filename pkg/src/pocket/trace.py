"""Trial records, hashing and dataset analysis.

Every trial is a directory of canonical JSON files plus ``hashes.sha256``.
:func:`analyze` trusts nothing it cannot verify: it checks digests, re-runs
admission on the preserved final text, and only then counts the trial.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import statistics
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

from pocket.arena import ImpactRecord
from pocket.boundary import GroundingMode, OutcomeClass, admit
from pocket.dispatcher import ActionRequest, TrialRun
from pocket.package import PackageError, parse_manifest
from pocket.telemetry import Endpoint, TelemetrySlice, entity_set

logger = logging.getLogger(__name__)

TRIAL_FILES = ("transcript.json", "slice.json", "decision.json", "impact.json", "measurement.json", "manifest.json")
HASH_FILE = "hashes.sha256"
DATASET_MANIFEST = "DATASET.sha256"
ORCHESTRATION_FILE = "orchestration.json"
_TRAILER = "# manifest-sha256 "


def dump_json(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# -- measurement -------------------------------------------------------------


@dataclass(frozen=True)
class MeasurementTuple:
    o: OutcomeClass
    h: int
    f: int
    tau: float
    eta: float | None = None
    delta: float | None = None
    grounding_flag: bool | None = None
    target_is_attacker: bool | None = None

    def to_json(self) -> dict[str, Any]:
        return {
            "o": self.o.value,
            "h": self.h,
            "f": self.f,
            "tau": round(self.tau, 3),
            "eta": self.eta,
            "delta": self.delta,
            "grounding_flag": self.grounding_flag,
            "target_is_attacker": self.target_is_attacker,
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> MeasurementTuple:
        return cls(
            OutcomeClass(obj["o"]), obj["h"], obj["f"], obj["tau"], obj["eta"], obj["delta"],
            obj["grounding_flag"], obj["target_is_attacker"],
        )


def compute_eta(action: ActionRequest, slice_: TelemetrySlice, attacker: Endpoint) -> tuple[float, bool]:
    """Entity precision of the enforced targets, and whether the target is the attacker.

    The two are reported separately: precision is membership in the
    session's telemetry entities, attacker identity is ground truth.
    """
    enforced = [action.target]
    seen = entity_set(slice_).endpoints
    eta = sum(1 for t in enforced if t in seen) / len(enforced)
    return eta, action.target == attacker


def measure(run: TrialRun) -> MeasurementTuple:
    res = run.result
    applied = res.action_applied
    if applied is None:
        return MeasurementTuple(
            res.decision.outcome, run.impact.h, run.impact.f, res.ended_at,
            grounding_flag=res.decision.grounding_flag,
        )
    eta, is_attacker = compute_eta(applied.request, res.slice, run.scenario.topology.attacker_endpoint)
    return MeasurementTuple(
        res.decision.outcome, run.impact.h, run.impact.f, applied.applied_at, eta, res.delta,
        res.decision.grounding_flag, is_attacker,
    )


# -- trial directories -------------------------------------------------------


@dataclass(frozen=True)
class TrialRecord:
    trial_id: str
    configuration: Mapping[str, str]
    measurement: MeasurementTuple
    digests: Mapping[str, str]
    late_block: bool = False


def _trial_payloads(run: TrialRun) -> dict[str, Any]:
    res = run.result
    m = measure(run)
    config = {"agent_id": run.agent_id, "backend_id": run.backend_id, "mode": run.mode.value}
    decision = res.decision.to_json()
    decision["termination"] = res.termination.value
    decision["ended_at"] = round(res.ended_at, 3)
    decision["action_applied"] = res.action_applied.to_json() if res.action_applied else None
    decision["late_block"] = run.late_block
    return {
        "transcript.json": {
            "trial_id": run.trial_id,
            "scenario": run.scenario.name,
            "trigger": res.trigger.to_json(),
            **res.transcript.to_json(),
        },
        "slice.json": res.slice.to_json(),
        "decision.json": decision,
        "impact.json": run.impact.to_json(),
        "measurement.json": {
            "trial_id": run.trial_id,
            "configuration": config,
            "attacker_endpoint": str(run.scenario.topology.attacker_endpoint),
            "measurement": m.to_json(),
        },
        "manifest.json": run.manifest,
    }


def _write_hashes(directory: Path, names: Iterable[str]) -> dict[str, str]:
    digests = {n: sha256_file(directory / n) for n in sorted(names)}
    text = "".join(f"{d}  {n}\n" for n, d in digests.items())
    tmp = directory / (HASH_FILE + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, directory / HASH_FILE)
    return digests


def write_trial(run: TrialRun, out_dir: str | Path) -> TrialRecord:
    """Write the trial directory. The hash file is written last and atomically."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / HASH_FILE).unlink(missing_ok=True)
    payloads = _trial_payloads(run)
    for name, obj in payloads.items():
        (out / name).write_text(dump_json(obj), encoding="utf-8")
    digests = _write_hashes(out, payloads)
    meas = payloads["measurement.json"]
    return TrialRecord(run.trial_id, meas["configuration"], measure(run), digests, run.late_block)


def write_orchestration_failure(out_dir: str | Path, trial_id: str, error: str, config: Mapping[str, Any]) -> Path:
    """Record a run that never produced an outcome. Kept apart from trial files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / ORCHESTRATION_FILE
    path.write_text(
        dump_json({"trial_id": trial_id, "error": error, "configuration": dict(config), "outcome": None}),
        encoding="utf-8",
    )
    _write_hashes(out, [ORCHESTRATION_FILE])
    return path


def read_hashes(path: Path) -> dict[str, str]:
    out: dict[str, str] = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line or line.startswith("#"):
            continue
        digest, _, name = line.partition("  ")
        out[name] = digest
    return out


def verify_trial(directory: str | Path) -> list[str]:
    """Problems with a trial directory's digests; empty when intact."""
    d = Path(directory)
    hash_path = d / HASH_FILE
    if not hash_path.is_file():
        return [f"{d.name}: missing {HASH_FILE}"]
    try:
        recorded = read_hashes(hash_path)
    except UnicodeDecodeError:
        return [f"{d.name}: unreadable {HASH_FILE}"]
    problems = []
    for name in TRIAL_FILES:
        if name not in recorded:
            problems.append(f"{d.name}/{name}: not covered by {HASH_FILE}")
    for name, digest in sorted(recorded.items()):
        path = d / name
        if not path.is_file():
            problems.append(f"{d.name}/{name}: missing")
        elif sha256_file(path) != digest:
            problems.append(f"{d.name}/{name}: digest mismatch")
    return problems


# -- dataset manifest --------------------------------------------------------


def _dataset_files(root: Path) -> list[str]:
    return sorted(
        p.relative_to(root).as_posix() for p in root.rglob("*") if p.is_file() and p.name != DATASET_MANIFEST
    )


def hash_dataset(dataset_dir: str | Path) -> str:
    """Write ``DATASET.sha256`` over every file and return its own digest."""
    root = Path(dataset_dir)
    body = "".join(f"{sha256_file(root / rel)}  {rel}\n" for rel in _dataset_files(root))
    own = hashlib.sha256(body.encode("utf-8")).hexdigest()
    tmp = root / (DATASET_MANIFEST + ".tmp")
    tmp.write_text(body + f"{_TRAILER}{own}\n", encoding="utf-8")
    os.replace(tmp, root / DATASET_MANIFEST)
    return own


def verify_dataset(dataset_dir: str | Path) -> list[str]:
    root = Path(dataset_dir)
    path = root / DATASET_MANIFEST
    if not path.is_file():
        return [f"missing {DATASET_MANIFEST}"]
    text = path.read_text(encoding="utf-8")
    body, _, trailer = text.rpartition(_TRAILER)
    problems = []
    if not trailer or hashlib.sha256(body.encode("utf-8")).hexdigest() != trailer.strip():
        problems.append(f"{DATASET_MANIFEST}: manifest digest mismatch")
    recorded = read_hashes(path)
    on_disk = set(_dataset_files(root))
    for rel, digest in sorted(recorded.items()):
        if rel not in on_disk:
            problems.append(f"{rel}: missing")
        elif sha256_file(root / rel) != digest:
            problems.append(f"{rel}: digest mismatch")
    for rel in sorted(on_disk - set(recorded)):
        problems.append(f"{rel}: not in {DATASET_MANIFEST}")
    return problems


# -- analysis ----------------------------------------------------------------


def recompute_outcome(trial_dir: str | Path) -> OutcomeClass:
    """Re-derive the outcome from preserved files alone."""
    d = Path(trial_dir)
    decision = json.loads((d / "decision.json").read_text(encoding="utf-8"))
    if decision["termination"] != "report":
        return OutcomeClass.BUDGET_EXHAUST
    transcript = json.loads((d / "transcript.json").read_text(encoding="utf-8"))
    manifest = parse_manifest(json.loads((d / "manifest.json").read_text(encoding="utf-8")))
    slice_ = TelemetrySlice.from_json(json.loads((d / "slice.json").read_text(encoding="utf-8")))
    final = transcript["turns"][-1]["turn"]["text"]
    return admit(final, manifest, slice_, GroundingMode(decision["grounding_mode"])).outcome


@dataclass
class Tally:
    counts: Counter = field(default_factory=Counter)
    deltas: list[float] = field(default_factory=list)
    no_block_impacts: list[tuple[int, int]] = field(default_factory=list)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    @property
    def bsn(self) -> tuple[int, int, int]:
        c = self.counts
        return c[OutcomeClass.VALID_BLOCK], c[OutcomeClass.SCHEMA_FAIL], c[OutcomeClass.NO_ACTION]

    @property
    def other(self) -> int:
        return self.total - sum(self.bsn)

    @property
    def mean_delta(self) -> float | None:
        return round(statistics.fmean(self.deltas), 1) if self.deltas else None

    @property
    def containment_rate(self) -> float:
        return self.counts[OutcomeClass.VALID_BLOCK] / self.total if self.total else 0.0

    def add(self, m: MeasurementTuple) -> None:
        self.counts[m.o] += 1
        if m.o is OutcomeClass.VALID_BLOCK and m.delta is not None:
            self.deltas.append(m.delta)
        if m.o is not OutcomeClass.VALID_BLOCK:
            self.no_block_impacts.append((m.h, m.f))

    def to_json(self) -> dict[str, Any]:
        return {
            "counts": {o.value: self.counts[o] for o in OutcomeClass},
            "bsn": list(self.bsn),
            "total": self.total,
            "deltas": self.deltas,
            "mean_delta": self.mean_delta,
            "no_block_impacts": [list(x) for x in sorted(set(self.no_block_impacts))],
            "containment_rate": round(self.containment_rate, 4),
        }


@dataclass
class DatasetSummary:
    configurations: dict[tuple[str, str], Tally] = field(default_factory=dict)
    backends: dict[str, Tally] = field(default_factory=dict)
    agents: dict[str, Tally] = field(default_factory=dict)
    overall: Tally = field(default_factory=Tally)
    trials: dict[str, MeasurementTuple] = field(default_factory=dict)
    excluded: dict[str, list[str]] = field(default_factory=dict)
    orchestration_failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.overall.total > 0 and not self.excluded

    def to_json(self) -> dict[str, Any]:
        return {
            "configurations": [
                {"agent_id": a, "backend_id": b, **t.to_json()} for (a, b), t in sorted(self.configurations.items())
            ],
            "backends": {b: t.to_json() for b, t in sorted(self.backends.items())},
            "agents": {a: t.to_json() for a, t in sorted(self.agents.items())},
            "overall": self.overall.to_json(),
            "excluded": {k: v for k, v in sorted(self.excluded.items())},
            "orchestration_failures": sorted(self.orchestration_failures),
        }


def _trial_dirs(root: Path) -> list[Path]:
    # any trial file marks a trial, so a deleted hash file cannot hide one
    markers = (HASH_FILE, ORCHESTRATION_FILE, *TRIAL_FILES)
    return sorted({p.parent for p in root.rglob("*") if p.is_file() and p.name in markers})


def analyze(dataset_dir: str | Path) -> DatasetSummary:
    """Verify and count every trial under ``dataset_dir``.

    Trials whose digests fail, or whose recorded outcome differs from the
    recomputed one, are excluded and listed in ``excluded``.
    """
    root = Path(dataset_dir)
    summary = DatasetSummary()
    dataset_problems: dict[str, list[str]] = defaultdict(list)
    if (root / DATASET_MANIFEST).is_file():
        for problem in verify_dataset(root):
            rel = problem.split(":", 1)[0]
            head = rel.split("/", 1)[0] if "/" in rel else DATASET_MANIFEST
            dataset_problems[head].append(problem)
        if DATASET_MANIFEST in dataset_problems:
            summary.excluded[DATASET_MANIFEST] = dataset_problems.pop(DATASET_MANIFEST)

    for d in _trial_dirs(root):
        rel = d.relative_to(root).as_posix()
        key = rel.split("/", 1)[0]
        if (d / ORCHESTRATION_FILE).is_file():
            summary.orchestration_failures.append(rel)
            continue
        problems = verify_trial(d) + dataset_problems.get(key, [])
        if not problems:
            try:
                meas_doc = json.loads((d / "measurement.json").read_text(encoding="utf-8"))
                meas = MeasurementTuple.from_json(meas_doc["measurement"])
                config = meas_doc["configuration"]
                recomputed = recompute_outcome(d)
                if recomputed is not meas.o:
                    problems.append(f"{rel}: recorded {meas.o.value}, recomputed {recomputed.value}")
            except (KeyError, ValueError, TypeError, IndexError, PackageError) as exc:
                problems.append(f"{rel}: unreadable trial ({exc})")
        if problems:
            summary.excluded[rel] = problems
            continue
        trial_id = meas_doc["trial_id"]
        summary.trials[trial_id] = meas
        cfg = (config["agent_id"], config["backend_id"])
        for bucket, k in (
            (summary.configurations, cfg),
            (summary.backends, cfg[1]),
            (summary.agents, cfg[0]),
        ):
            bucket.setdefault(k, Tally()).add(meas)
        summary.overall.add(meas)
    seen = {d.relative_to(root).as_posix().split("/", 1)[0] for d in _trial_dirs(root)}
    for key, problems in sorted(dataset_problems.items()):
        if key not in seen:
            summary.excluded[key] = problems
    return summary


def _fmt_delta(v: float | None) -> str:
    return "--" if v is None else f"{v:.1f}"


def _fmt_impacts(t: Tally) -> str:
    impacts = sorted(set(t.no_block_impacts))
    return ",".join(f"{h}/{f}" for h, f in impacts) if impacts else "--"


def format_table(summary: DatasetSummary) -> str:
    """Tab-delimited outcome table: per configuration, per backend, overall."""
    lines = ["configuration\tB/S/N\tother\tdelta_s\tno_block_impact"]
    for (agent, backend), t in sorted(summary.configurations.items()):
        b, s, n = t.bsn
        lines.append(f"{agent} + {backend}\t{b}/{s}/{n}\t{t.other}\t{_fmt_delta(t.mean_delta)}\t{_fmt_impacts(t)}")
    lines.append("backend\tB/S/N\tother\tdelta_s\tcontained")
    for backend, t in sorted(summary.backends.items()):
        b, s, n = t.bsn
        lines.append(f"{backend}\t{b}/{s}/{n}\t{t.other}\t{_fmt_delta(t.mean_delta)}\t{t.containment_rate:.1%}")
    o = summary.overall
    b, s, n = o.bsn
    lines.append(f"all {o.total} trials\t{b}/{s}/{n}\t{o.other}\t{_fmt_delta(o.mean_delta)}\t{o.containment_rate:.1%}")
    for rel, problems in sorted(summary.excluded.items()):
        for p in problems:
            lines.append(f"EXCLUDED\t{rel}\t{p}")
    return "\n".join(lines) + "\n"


def impact_of(trial_dir: str | Path) -> ImpactRecord:
    return ImpactRecord.from_json(json.loads((Path(trial_dir) / "impact.json").read_text(encoding="utf-8")))
