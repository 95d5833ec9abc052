"""Bounded evidence interface.

Agents never see the arena directly. They issue typed queries through
:func:`execute_query`, which enforces the manifest's query budget and result
cap and appends every answered query to an immutable :class:`TelemetrySlice`.
Grounding later checks report targets against :func:`entity_set` of that
slice, which is derived from returned records only.
"""

from __future__ import annotations

import ipaddress
import re
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Protocol, Sequence

DIRECTIONS = ("inbound", "outbound", "lateral")
RECORD_KINDS = ("flow", "alert", "file_event")
QUERY_KINDS = ("flows_by_host", "flows_to_endpoint", "alerts_by_class", "outbound_volume_by_host")

_HOST_ID_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._-]*$")
_ENDPOINT_RE = re.compile(r"^(\d{1,3}(?:\.\d{1,3}){3}):(\d{1,5})$")


class BudgetExhausted(Exception):
    """Raised when a session asks for a query after its budget is spent."""


class QueryError(ValueError):
    """A query request that is not well-typed for its kind."""


def is_host_id(value: object) -> bool:
    return isinstance(value, str) and bool(_HOST_ID_RE.match(value))


@dataclass(frozen=True, order=True)
class Endpoint:
    address: str
    port: int

    def __post_init__(self) -> None:
        try:
            addr = ipaddress.IPv4Address(self.address)
        except ipaddress.AddressValueError as exc:
            raise ValueError(f"invalid IPv4 address {self.address!r}") from exc
        if not 0 <= self.port <= 65535:
            raise ValueError(f"port out of range: {self.port}")
        # ipaddress rejects leading zeros, so str(addr) is already canonical
        object.__setattr__(self, "address", str(addr))

    @classmethod
    def parse(cls, text: str) -> Endpoint:
        if not isinstance(text, str):
            raise ValueError(f"endpoint must be a string, got {type(text).__name__}")
        m = _ENDPOINT_RE.match(text)
        if m is None:
            raise ValueError(f"endpoint must look like a.b.c.d:port, got {text!r}")
        return cls(m.group(1), int(m.group(2)))

    def __str__(self) -> str:
        return f"{self.address}:{self.port}"


def parse_endpoint(text: object) -> Endpoint | None:
    """Lenient variant used by validators: ``None`` instead of raising."""
    try:
        return Endpoint.parse(text)  # type: ignore[arg-type]
    except ValueError:
        return None


@dataclass(frozen=True)
class TelemetryRecord:
    timestamp: float
    src: Endpoint
    dst: Endpoint
    host: str
    direction: str
    bytes: int
    protocol: str
    kind: str = "flow"
    label: str = ""  # alert class for kind == "alert"

    def __post_init__(self) -> None:
        if self.timestamp < 0:
            raise ValueError("timestamp must be >= 0")
        if self.bytes < 0:
            raise ValueError("bytes must be >= 0")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"unknown direction {self.direction!r}")
        if self.kind not in RECORD_KINDS:
            raise ValueError(f"unknown record kind {self.kind!r}")

    def touches(self, endpoint: Endpoint) -> bool:
        return self.src == endpoint or self.dst == endpoint

    def to_json(self) -> dict[str, Any]:
        return {
            "timestamp": round(self.timestamp, 3),
            "src": str(self.src),
            "dst": str(self.dst),
            "host": self.host,
            "direction": self.direction,
            "bytes": self.bytes,
            "protocol": self.protocol,
            "kind": self.kind,
            "label": self.label,
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> TelemetryRecord:
        return cls(
            timestamp=float(obj["timestamp"]),
            src=Endpoint.parse(obj["src"]),
            dst=Endpoint.parse(obj["dst"]),
            host=obj["host"],
            direction=obj["direction"],
            bytes=int(obj["bytes"]),
            protocol=obj["protocol"],
            kind=obj.get("kind", "flow"),
            label=obj.get("label", ""),
        )


# required parameter names and their validators, per query kind
_QUERY_PARAMS = {
    "flows_by_host": {"host": is_host_id},
    "flows_to_endpoint": {"endpoint": lambda v: parse_endpoint(v) is not None},
    "alerts_by_class": {"alert_class": lambda v: isinstance(v, str) and v != ""},
    "outbound_volume_by_host": {"host": is_host_id},
}
_OPTIONAL_PARAMS = {"flows_by_host": {"direction": lambda v: v in DIRECTIONS}}


@dataclass(frozen=True)
class Query:
    kind: str
    params: tuple[tuple[str, str], ...] = ()
    limit: int = 0

    def __post_init__(self) -> None:
        if self.kind not in QUERY_KINDS:
            raise QueryError(f"unknown query kind {self.kind!r}")
        if not isinstance(self.limit, int) or isinstance(self.limit, bool) or self.limit < 0:
            raise QueryError("limit must be a non-negative integer")
        given = dict(self.params)
        required = _QUERY_PARAMS[self.kind]
        optional = _OPTIONAL_PARAMS.get(self.kind, {})
        for name, check in required.items():
            if name not in given:
                raise QueryError(f"{self.kind} requires parameter {name!r}")
            if not check(given[name]):
                raise QueryError(f"bad value for {self.kind}.{name}: {given[name]!r}")
        for name, value in given.items():
            if name in required:
                continue
            if name not in optional or not optional[name](value):
                raise QueryError(f"unexpected parameter {self.kind}.{name}={value!r}")

    @classmethod
    def make(cls, kind: str, limit: int = 0, **params: str) -> Query:
        return cls(kind, tuple(sorted(params.items())), limit)

    @classmethod
    def from_json(cls, obj: object) -> Query:
        if not isinstance(obj, Mapping):
            raise QueryError("query must be a JSON object")
        kind = obj.get("kind")
        params = obj.get("params", {})
        limit = obj.get("limit", 0)
        if not isinstance(kind, str):
            raise QueryError("query kind must be a string")
        if not isinstance(params, Mapping) or not all(isinstance(v, str) for v in params.values()):
            raise QueryError("query params must be an object of strings")
        return cls(kind, tuple(sorted(params.items())), limit)

    def param(self, name: str, default: str | None = None) -> str | None:
        return dict(self.params).get(name, default)

    def to_json(self) -> dict[str, Any]:
        return {"kind": self.kind, "params": dict(self.params), "limit": self.limit}

    def matches(self, rec: TelemetryRecord) -> bool:
        if self.kind == "flows_by_host":
            direction = self.param("direction")
            return (
                rec.kind == "flow"
                and rec.host == self.param("host")
                and (direction is None or rec.direction == direction)
            )
        if self.kind == "flows_to_endpoint":
            return rec.kind in ("flow", "file_event") and str(rec.dst) == str(
                Endpoint.parse(self.param("endpoint"))
            )
        if self.kind == "alerts_by_class":
            return rec.kind == "alert" and rec.label == self.param("alert_class")
        # outbound_volume_by_host
        return rec.kind in ("flow", "file_event") and rec.direction == "outbound" and rec.host == self.param("host")


class TelemetrySource(Protocol):
    """Read-only view of the telemetry visible at the current instant."""

    def snapshot(self) -> Sequence[TelemetryRecord]: ...


@dataclass(frozen=True)
class StaticSource:
    records: tuple[TelemetryRecord, ...]

    def snapshot(self) -> Sequence[TelemetryRecord]:
        return self.records


@dataclass(frozen=True)
class TelemetrySlice:
    """Append-only record of what a session has been shown."""

    budget_remaining: int
    result_cap: int
    queries_issued: tuple[tuple[Query, tuple[TelemetryRecord, ...]], ...] = ()

    @classmethod
    def open(cls, query_budget: int, result_cap: int) -> TelemetrySlice:
        return cls(budget_remaining=query_budget, result_cap=result_cap)

    def records(self) -> Iterable[TelemetryRecord]:
        for _, recs in self.queries_issued:
            yield from recs

    def to_json(self) -> dict[str, Any]:
        return {
            "budget_remaining": self.budget_remaining,
            "result_cap": self.result_cap,
            "queries": [
                {"query": q.to_json(), "results": [r.to_json() for r in recs]}
                for q, recs in self.queries_issued
            ],
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> TelemetrySlice:
        issued = tuple(
            (Query.from_json(e["query"]), tuple(TelemetryRecord.from_json(r) for r in e["results"]))
            for e in obj["queries"]
        )
        return cls(obj["budget_remaining"], obj["result_cap"], issued)


@dataclass(frozen=True)
class EntitySet:
    endpoints: frozenset[Endpoint] = field(default_factory=frozenset)
    hosts: frozenset[str] = field(default_factory=frozenset)

    def __contains__(self, item: object) -> bool:
        if isinstance(item, Endpoint):
            return item in self.endpoints
        return item in self.hosts

    def __len__(self) -> int:
        return len(self.endpoints) + len(self.hosts)


def clamp_limit(requested: int, cap: int) -> int:
    if requested < 0:
        raise ValueError("requested limit must be >= 0")
    if requested == 0:
        return cap
    return min(requested, cap)


def execute_query(
    slice_: TelemetrySlice, query: Query, source: TelemetrySource
) -> tuple[TelemetrySlice, tuple[TelemetryRecord, ...]]:
    """Answer ``query`` from ``source`` and return the extended slice.

    Results are the matching records in timestamp order, truncated to the
    clamped limit. Raises :class:`BudgetExhausted` when no budget is left.
    """
    if slice_.budget_remaining <= 0:
        raise BudgetExhausted("query budget exhausted")
    limit = clamp_limit(query.limit, slice_.result_cap)
    hits = sorted(
        (r for r in source.snapshot() if query.matches(r)),
        key=lambda r: (r.timestamp, str(r.src), str(r.dst)),
    )
    results = tuple(hits[:limit])
    new_slice = TelemetrySlice(
        budget_remaining=slice_.budget_remaining - 1,
        result_cap=slice_.result_cap,
        queries_issued=slice_.queries_issued + ((query, results),),
    )
    return new_slice, results


def spend_budget(slice_: TelemetrySlice) -> TelemetrySlice:
    """Charge one query against the budget without recording results.

    Used for malformed query requests, which still cost the agent a query.
    """
    if slice_.budget_remaining <= 0:
        raise BudgetExhausted("query budget exhausted")
    return TelemetrySlice(slice_.budget_remaining - 1, slice_.result_cap, slice_.queries_issued)


def entity_set(slice_: TelemetrySlice) -> EntitySet:
    endpoints: set[Endpoint] = set()
    hosts: set[str] = set()
    for rec in slice_.records():
        endpoints.add(rec.src)
        endpoints.add(rec.dst)
        hosts.add(rec.host)
    return EntitySet(frozenset(endpoints), frozenset(hosts))
