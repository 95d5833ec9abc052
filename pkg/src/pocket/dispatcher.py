"""Closed-loop session orchestration.

``run_session`` is the only path from a trigger to an enforcement action:
pick the agent, assemble its prompt, answer its telemetry queries under
budget, pass its final text through :func:`pocket.boundary.admit`, and call
the enforcement adapter once iff the decision is ``valid_block``.
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field
from typing import Any, Callable

from pocket.arena import ALL_SCOPES, Arena, Scenario, SimClock, Trigger
from pocket.backend import Backend, OrchestrationError, ScriptExhausted, Session, SessionTranscript
from pocket.boundary import BoundaryDecision, GroundingMode, OutcomeClass, admit, budget_exhausted
from pocket.package import AgentPackage, Registry, RegistryError, select_agent, unresolved_hosts
from pocket.telemetry import (
    QUERY_KINDS,
    BudgetExhausted,
    Endpoint,
    TelemetrySlice,
    TelemetrySource,
    execute_query,
    spend_budget,
)

__all__ = [
    "ActionRequest",
    "ApplyRecord",
    "EnforcementAdapter",
    "EnforcementError",
    "SessionResult",
    "Termination",
    "Trigger",
    "TrialRun",
    "assemble_prompt",
    "dispatch_action",
    "run_session",
    "run_trial",
]

logger = logging.getLogger(__name__)

OPENING_MESSAGE = (
    "Begin the investigation. Reply with one ```json block: either a telemetry query "
    'of the form {"query": {...}} or your final report.'
)
QUERY_SIGNATURES = {
    "flows_by_host": "host, optional direction (inbound|outbound|lateral)",
    "flows_to_endpoint": "endpoint as a.b.c.d:port",
    "alerts_by_class": "alert_class",
    "outbound_volume_by_host": "host",
}


class EnforcementError(Exception):
    """The adapter refused a request (unsupported action/scope, second call)."""


class Termination(str, enum.Enum):
    REPORT = "report"
    QUERY_BUDGET = "budget_exhaust_query"
    WALL_CLOCK = "budget_exhaust_wallclock"


@dataclass(frozen=True)
class ActionRequest:
    action: str
    target: Endpoint
    scope: str = "global"
    reason: str = ""

    def to_json(self) -> dict[str, Any]:
        return {"action": self.action, "target": str(self.target), "scope": self.scope, "reason": self.reason}


@dataclass(frozen=True)
class ApplyRecord:
    request: ActionRequest
    applied_at: float

    def to_json(self) -> dict[str, Any]:
        return {**self.request.to_json(), "applied_at": round(self.applied_at, 3)}


class EnforcementAdapter:
    """Sole writer of environment state. Counts every call for audit."""

    actions = ("network_block",)

    def __init__(self, arena: Arena):
        self._arena = arena
        self.calls = 0
        self.audit: list[ApplyRecord] = []

    def apply(self, req: ActionRequest, at: float) -> ApplyRecord:
        self.calls += 1
        if req.action not in self.actions:
            raise EnforcementError(f"adapter does not implement {req.action!r}")
        if req.scope not in ALL_SCOPES:
            raise EnforcementError(f"unknown scope {req.scope!r}")
        try:
            block = self._arena.apply_block(req.target, req.scope, at)
        except ValueError as exc:
            raise EnforcementError(str(exc)) from exc
        rec = ApplyRecord(req, block.applied_at)
        self.audit.append(rec)
        return rec


@dataclass
class _OncePerSession:
    adapter: Any
    used: bool = False

    def apply(self, req: ActionRequest, at: float) -> ApplyRecord:
        if self.used:
            raise EnforcementError("at most one enforcement action per session")
        self.used = True
        return self.adapter.apply(req, at)


def dispatch_action(req: ActionRequest, adapter: Any, clock: SimClock) -> ApplyRecord:
    return adapter.apply(req, clock.now)


@dataclass(frozen=True)
class SessionResult:
    agent_id: str
    trigger: Trigger
    decision: BoundaryDecision
    transcript: SessionTranscript
    slice: TelemetrySlice
    termination: Termination
    ended_at: float
    action_applied: ApplyRecord | None = None

    @property
    def delta(self) -> float | None:
        if self.action_applied is None or self.transcript.first_prompt_time is None:
            return None
        return round(self.action_applied.applied_at - self.transcript.first_prompt_time, 3)


def _render_schema(pkg: AgentPackage) -> list[str]:
    lines = ['- action: text (required; one of the catalog actions)']
    for spec in pkg.manifest.report_schema:
        lines.append(f"- {spec.name}: {spec.value_kind} ({'required' if spec.required else 'optional'})")
    return lines


def assemble_prompt(pkg: AgentPackage, trigger: Trigger) -> str:
    """Deterministic prompt text from the package and trigger alone."""
    m = pkg.manifest
    parts = [
        pkg.prompt.strip(),
        "",
        "## Deployment context",
        json.dumps(pkg.context.to_json(), indent=2, sort_keys=True),
        "",
        "## Trigger",
        f"class: {trigger.trigger_class}",
        f"raised_at: {trigger.raised_at:.3f}",
        f"source_detector: {trigger.source_detector}",
        "payload: " + json.dumps(dict(trigger.payload), sort_keys=True),
        "",
        "## Telemetry interface",
        'Request evidence with one fenced block: ```json {"query": {"kind": ..., "params": {...}, "limit": n}} ```',
        *(f"- {k}: {QUERY_SIGNATURES[k]}" for k in QUERY_KINDS),
        f"Query budget: {m.query_budget}. Records per query: at most {m.result_cap}.",
        "",
        "## Report",
        "Finish with one fenced ```json report object with these fields:",
        *_render_schema(pkg),
        f"Confirmation field: {m.confirmation_field} (false declines enforcement).",
        "Action catalog: " + ", ".join(sorted(m.action_catalog)),
    ]
    return "\n".join(parts) + "\n"


def _results_message(records: Any, budget_remaining: int) -> str:
    return json.dumps(
        {"results": [r.to_json() for r in records], "budget_remaining": budget_remaining}, sort_keys=True
    )


def _action_request(pkg: AgentPackage, decision: BoundaryDecision) -> ActionRequest:
    report = decision.report
    assert report is not None
    if not report.endpoints:
        raise EnforcementError("admitted report carries no endpoint target")
    reason = report.fields.get("rationale")
    if not isinstance(reason, str) or not reason:
        reason = f"{pkg.agent_id}: {pkg.manifest.confirmation_field}=true"
    return ActionRequest(report.action, report.endpoints[0], "global", reason)


def run_session(
    trigger: Trigger,
    registry: Registry,
    source: TelemetrySource,
    backend: Backend,
    mode: GroundingMode | str,
    clock: SimClock,
    adapter: Any,
    *,
    max_report_attempts: int = 1,
) -> SessionResult:
    """Run one bounded investigation and return exactly one decision.

    Raises :class:`OrchestrationError` when no agent matches the trigger or
    the backend cannot be reached; those runs have no outcome class.
    """
    mode = GroundingMode(mode)
    try:
        pkg = select_agent(registry, trigger)
    except RegistryError as exc:
        raise OrchestrationError(str(exc)) from exc
    if pkg is None:
        raise OrchestrationError(f"no agent handles trigger class {trigger.trigger_class!r}")

    m = pkg.manifest
    enforcer = _OncePerSession(adapter)
    slice_ = TelemetrySlice.open(m.query_budget, m.result_cap)
    session = Session(backend, assemble_prompt(pkg, trigger), clock)
    message = OPENING_MESSAGE
    attempts = 0
    last_text = ""

    def finish(decision: BoundaryDecision, cause: Termination, applied: ApplyRecord | None = None) -> SessionResult:
        return SessionResult(
            m.agent_id, trigger, decision, session.transcript(), slice_, cause, clock.now, applied
        )

    while True:
        started = session.first_prompt_time
        if started is not None and clock.now - started >= m.wall_clock_budget:
            return finish(budget_exhausted("wall_clock", mode, last_text), Termination.WALL_CLOCK)
        try:
            turn = session.next_turn(message)
        except ScriptExhausted:
            return finish(budget_exhausted("wall_clock", mode, last_text), Termination.WALL_CLOCK)
        last_text = turn.text

        if turn.kind == "query_request":
            try:
                if turn.query is None:
                    slice_ = spend_budget(slice_)
                    message = json.dumps(
                        {"error": f"invalid query: {turn.query_error}", "budget_remaining": slice_.budget_remaining},
                        sort_keys=True,
                    )
                else:
                    slice_, records = execute_query(slice_, turn.query, source)
                    message = _results_message(records, slice_.budget_remaining)
            except BudgetExhausted:
                return finish(budget_exhausted("query", mode, last_text), Termination.QUERY_BUDGET)
            continue

        decision = admit(turn.text, m, slice_, mode)
        attempts += 1
        if decision.outcome is OutcomeClass.SCHEMA_FAIL and attempts < max_report_attempts:
            session.reopen()
            message = json.dumps({"error": f"report rejected: {decision.reason_code}"}, sort_keys=True)
            continue
        if decision.outcome is not OutcomeClass.VALID_BLOCK:
            return finish(decision, Termination.REPORT)
        applied = dispatch_action(_action_request(pkg, decision), enforcer, clock)
        logger.info("%s: %s %s at %.1f", m.agent_id, applied.request.action, applied.request.target, applied.applied_at)
        return finish(decision, Termination.REPORT, applied)


# -- whole trial -------------------------------------------------------------


@dataclass(frozen=True)
class TrialRun:
    trial_id: str
    agent_id: str
    backend_id: str
    mode: GroundingMode
    scenario: Scenario
    result: SessionResult
    impact: Any
    late_block: bool = False
    manifest: dict[str, Any] = field(default_factory=dict)


def run_trial(
    trial_id: str,
    scenario: Scenario,
    registry: Registry,
    agent_id: str,
    backend: Backend,
    mode: GroundingMode | str,
    *,
    adapter_factory: Callable[[Arena], Any] = EnforcementAdapter,
    max_report_attempts: int = 1,
) -> TrialRun:
    """Start the scenario, wait for the deployed agent's trigger, run the loop."""
    arena = Arena(scenario)
    try:
        deployed = registry.only(agent_id)
    except RegistryError as exc:
        raise OrchestrationError(str(exc)) from exc
    pkg = deployed.get(agent_id)
    assert pkg is not None
    unresolved = unresolved_hosts(pkg, scenario.topology.host_ids)
    if unresolved:
        raise OrchestrationError(f"context names hosts absent from topology: {', '.join(unresolved)}")

    trigger = next((t for t in arena.triggers() if t.trigger_class == pkg.manifest.trigger_class), None)
    if trigger is None:
        raise OrchestrationError(f"scenario never raises {pkg.manifest.trigger_class!r}")

    clock = SimClock(trigger.raised_at)
    adapter = adapter_factory(arena)
    result = run_session(
        trigger, deployed, arena.view(clock), backend, mode, clock, adapter,
        max_report_attempts=max_report_attempts,
    )
    impact = arena.final_impact()
    late = result.action_applied is not None and not impact.contained
    return TrialRun(trial_id, agent_id, backend.backend_id, GroundingMode(mode), scenario, result, impact, late,
                    pkg.manifest.to_json())
