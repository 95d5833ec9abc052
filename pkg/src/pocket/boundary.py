"""Typed enforcement boundary.

Model output is untrusted text. :func:`admit` turns it into exactly one
:class:`OutcomeClass` by running, in order: fence extraction, structural
checks against the manifest's report schema, action allowlisting, the
confirmation gate and telemetry grounding. The first failing stage decides
the outcome.
"""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, field
from typing import Any, Mapping, Union

from pocket.package import FieldSpec, Manifest
from pocket.telemetry import Endpoint, EntitySet, TelemetrySlice, entity_set, is_host_id, parse_endpoint

Target = Union[Endpoint, str]

_FENCE_RE = re.compile(r"```json[ \t]*\r?\n?(.*?)```", re.DOTALL)
_PROTOCOL_RE = re.compile(r"^[a-z0-9][a-z0-9_.-]*$")


class OutcomeClass(str, enum.Enum):
    VALID_BLOCK = "valid_block"
    NO_ACTION = "no_action"
    SCHEMA_FAIL = "schema_fail"
    UNSUPPORTED_ACTION = "unsupported_action"
    UNGROUNDED = "ungrounded"
    BUDGET_EXHAUST = "budget_exhaust"


class GroundingMode(str, enum.Enum):
    RUNTIME = "runtime"
    POST_HOC = "post_hoc"


class Rejection(Exception):
    outcome: OutcomeClass

    def __init__(self, code: str, message: str):
        self.code = code
        self.message = message
        super().__init__(f"{code}: {message}")


class SchemaFail(Rejection):
    outcome = OutcomeClass.SCHEMA_FAIL


class UnsupportedAction(Rejection):
    outcome = OutcomeClass.UNSUPPORTED_ACTION


class Ungrounded(Rejection):
    outcome = OutcomeClass.UNGROUNDED

    def __init__(self, code: str, message: str, offending: tuple[Target, ...] = ()):
        super().__init__(code, message)
        self.offending = offending


@dataclass(frozen=True)
class TypedReport:
    raw_text: str
    fields: Mapping[str, Any]
    action: str
    targets: tuple[Target, ...]
    confirmed: bool

    @property
    def endpoints(self) -> tuple[Endpoint, ...]:
        return tuple(t for t in self.targets if isinstance(t, Endpoint))

    @property
    def hosts(self) -> tuple[str, ...]:
        return tuple(t for t in self.targets if not isinstance(t, Endpoint))


@dataclass(frozen=True)
class BoundaryDecision:
    outcome: OutcomeClass
    reason_code: str
    reason: str
    grounding_mode: GroundingMode
    report: TypedReport | None = None
    rejected_text: str | None = None
    grounding_flag: bool | None = None
    details: Mapping[str, Any] = field(default_factory=dict)

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "outcome": self.outcome.value,
            "reason_code": self.reason_code,
            "reason": self.reason,
            "grounding_mode": self.grounding_mode.value,
            "grounding_flag": self.grounding_flag,
        }
        if self.report is not None:
            out["action"] = self.report.action
            out["confirmed"] = self.report.confirmed
            out["fields"] = dict(self.report.fields)
            out["targets"] = [str(t) for t in self.report.targets]
        if self.rejected_text is not None:
            out["raw_text"] = self.rejected_text
        if self.details:
            out["details"] = dict(self.details)
        return out


# -- stages ------------------------------------------------------------------


def _reject_constant(name: str) -> Any:
    raise ValueError(f"non-standard JSON constant {name}")


def _loads(text: str) -> Any:
    return json.loads(text, parse_constant=_reject_constant)


def fenced_objects(text: str) -> list[Any]:
    """Parse every ```json fence in ``text``; unparseable fences become ``None``."""
    out = []
    for body in _FENCE_RE.findall(text):
        try:
            out.append(_loads(body))
        except (ValueError, RecursionError):
            out.append(None)
    return out


def extract_report(model_text: str) -> dict[str, Any]:
    """Return the object in the last well-formed ```json fence.

    Prose outside fences is ignored. Raises :class:`SchemaFail` with code
    ``missing_delimiter`` when there is no fence and ``malformed_json`` when
    no fence holds a JSON object.
    """
    if not isinstance(model_text, str):
        raise SchemaFail("missing_delimiter", "model output is not text")
    candidates = fenced_objects(model_text)
    if not candidates:
        raise SchemaFail("missing_delimiter", "no ```json fenced report in model output")
    for obj in reversed(candidates):
        if isinstance(obj, dict):
            return obj
    raise SchemaFail("malformed_json", "fenced report does not parse as a JSON object")


def _kind_ok(kind: str, value: Any) -> bool:
    if kind == "boolean":
        return isinstance(value, bool)
    if kind == "text":
        return isinstance(value, str)
    if kind in ("count", "bytes"):
        return isinstance(value, int) and not isinstance(value, bool) and value >= 0
    if kind == "endpoint":
        return parse_endpoint(value) is not None
    if kind == "endpoint_list":
        return isinstance(value, list) and all(parse_endpoint(v) is not None for v in value)
    if kind == "host_id":
        return is_host_id(value)
    if kind == "host_id_list":
        return isinstance(value, list) and all(is_host_id(v) for v in value)
    if kind == "protocol_label":
        return isinstance(value, str) and bool(_PROTOCOL_RE.match(value))
    return False


def _targets_of(spec: FieldSpec, value: Any) -> list[Target]:
    if spec.value_kind == "endpoint":
        return [Endpoint.parse(value)]
    if spec.value_kind == "endpoint_list":
        return [Endpoint.parse(v) for v in value]
    if spec.value_kind == "host_id":
        return [value]
    if spec.value_kind == "host_id_list":
        return list(value)
    return []


def check_structure(
    obj: Mapping[str, Any], schema: tuple[FieldSpec, ...] | list[FieldSpec], confirmation_field: str, raw_text: str = ""
) -> TypedReport:
    """Type-check ``obj`` against ``schema``.

    ``action`` is an implicit required text key. A JSON ``null`` counts as
    absent. Present optional fields are type-checked too, since a target
    cannot be taken from a value of the wrong kind. Unknown keys are kept.
    """
    action = obj.get("action")
    if action is None:
        raise SchemaFail("missing_field:action", "report has no action")
    if not isinstance(action, str):
        raise SchemaFail("wrong_type:action", "action must be text")

    targets: list[Target] = []
    for spec in schema:
        value = obj.get(spec.name)
        if value is None:
            if spec.required:
                raise SchemaFail(f"missing_field:{spec.name}", f"required field {spec.name!r} is missing")
            continue
        if not _kind_ok(spec.value_kind, value):
            raise SchemaFail(f"wrong_type:{spec.name}", f"field {spec.name!r} is not a valid {spec.value_kind}")
        targets.extend(_targets_of(spec, value))

    confirmed = obj.get(confirmation_field)
    if not isinstance(confirmed, bool):
        # only reachable with a schema that omits its own confirmation field
        raise SchemaFail(f"missing_field:{confirmation_field}", "confirmation field absent from report")

    seen: set[Target] = set()
    unique = [t for t in targets if not (t in seen or seen.add(t))]
    return TypedReport(raw_text, dict(obj), action, tuple(unique), confirmed)


def check_action(report: TypedReport, catalog: frozenset[str] | set[str]) -> None:
    if report.action not in catalog:
        raise UnsupportedAction("unsupported_action", f"action {report.action!r} is not in the manifest catalog")


def check_grounding(report: TypedReport, entities: EntitySet) -> None:
    """Require every report target to appear in returned telemetry.

    An action report with no targets is ungrounded; a non-confirming report
    with no targets is fine.
    """
    if not report.targets:
        if report.confirmed:
            raise Ungrounded("ungrounded:no_target", "action report names no target entity")
        return
    bad_endpoints = tuple(t for t in report.endpoints if t not in entities.endpoints)
    bad_hosts = tuple(t for t in report.hosts if t not in entities.hosts)
    if bad_endpoints or bad_hosts:
        kinds = [k for k, bad in (("endpoint", bad_endpoints), ("host", bad_hosts)) if bad]
        offending = bad_endpoints + bad_hosts
        raise Ungrounded(
            "ungrounded:" + "+".join(kinds),
            "targets absent from session telemetry: " + ", ".join(str(t) for t in offending),
            offending,
        )


def is_grounded(report: TypedReport, entities: EntitySet) -> bool:
    try:
        check_grounding(report, entities)
    except Ungrounded:
        return False
    return True


def admit(
    model_text: str,
    manifest: Manifest,
    slice_: TelemetrySlice,
    mode: GroundingMode | str = GroundingMode.RUNTIME,
) -> BoundaryDecision:
    """Classify one final model output. Total: every input yields a decision."""
    mode = GroundingMode(mode)
    try:
        obj = extract_report(model_text)
        report = check_structure(obj, manifest.report_schema, manifest.confirmation_field, model_text)
        check_action(report, manifest.action_catalog)
    except Rejection as rej:
        return BoundaryDecision(
            rej.outcome, rej.code, rej.message, mode, rejected_text=model_text if isinstance(model_text, str) else ""
        )

    grounded = is_grounded(report, entity_set(slice_))
    if not report.confirmed:
        return BoundaryDecision(
            OutcomeClass.NO_ACTION, "not_confirmed", "report did not confirm the attack", mode,
            report=report, grounding_flag=grounded,
        )
    if mode is GroundingMode.RUNTIME:
        try:
            check_grounding(report, entity_set(slice_))
        except Ungrounded as rej:
            return BoundaryDecision(
                OutcomeClass.UNGROUNDED, rej.code, rej.message, mode,
                rejected_text=model_text, grounding_flag=False,
                details={"offending": [str(t) for t in rej.offending]},
            )
    return BoundaryDecision(
        OutcomeClass.VALID_BLOCK, "admitted", "report admitted", mode, report=report, grounding_flag=grounded
    )


def budget_exhausted(cause: str, mode: GroundingMode | str, last_text: str = "") -> BoundaryDecision:
    """Decision for sessions that ran out of query or wall-clock budget."""
    return BoundaryDecision(
        OutcomeClass.BUDGET_EXHAUST, f"budget_exhaust:{cause}", f"{cause} budget reached before a valid report",
        GroundingMode(mode), rejected_text=last_text,
    )
