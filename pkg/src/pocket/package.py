"""Data-only agent packages.

An agent is a directory holding ``manifest.json``, ``prompt.txt`` and
``context.json``. Nothing in a package is executable; adding an agent to the
library means adding a directory.
"""

from __future__ import annotations

import ipaddress
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Any, Mapping

from pocket.telemetry import is_host_id, parse_endpoint

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"
PROMPT_FILE = "prompt.txt"
CONTEXT_FILE = "context.json"
PACKAGE_FILES = (MANIFEST_FILE, PROMPT_FILE, CONTEXT_FILE)

VALUE_KINDS = (
    "boolean",
    "text",
    "count",
    "endpoint",
    "endpoint_list",
    "host_id",
    "host_id_list",
    "bytes",
    "protocol_label",
)
TARGET_KINDS = ("endpoint", "endpoint_list", "host_id", "host_id_list")
ENFORCEMENT_ACTIONS = ("network_block",)


@dataclass(frozen=True)
class Violation:
    code: str
    message: str

    def __str__(self) -> str:
        return f"{self.code}\t{self.message}"


class PackageError(Exception):
    """A package directory that cannot become an :class:`AgentPackage`."""

    def __init__(self, violations: list[Violation]):
        self.violations = violations
        super().__init__("; ".join(v.message for v in violations))


class RegistryError(Exception):
    pass


@dataclass(frozen=True)
class FieldSpec:
    name: str
    value_kind: str
    required: bool = True

    def to_json(self) -> dict[str, Any]:
        return {"name": self.name, "value_kind": self.value_kind, "required": self.required}


@dataclass(frozen=True)
class Manifest:
    agent_id: str
    tactical_purpose: str
    trigger_class: str
    action_catalog: frozenset[str]
    report_schema: tuple[FieldSpec, ...]
    confirmation_field: str
    model_backend: str
    query_budget: int
    result_cap: int
    wall_clock_budget: float

    def field(self, name: str) -> FieldSpec | None:
        for spec in self.report_schema:
            if spec.name == name:
                return spec
        return None

    def to_json(self) -> dict[str, Any]:
        return {
            "agent_id": self.agent_id,
            "tactical_purpose": self.tactical_purpose,
            "trigger_class": self.trigger_class,
            "action_catalog": sorted(self.action_catalog),
            "report_schema": [f.to_json() for f in self.report_schema],
            "confirmation_field": self.confirmation_field,
            "model_backend": self.model_backend,
            "query_budget": self.query_budget,
            "result_cap": self.result_cap,
            "wall_clock_budget": self.wall_clock_budget,
        }


@dataclass(frozen=True)
class ExpectedService:
    host_id: str
    protocol: str
    port: int


@dataclass(frozen=True)
class ContextFile:
    trusted_subnets: tuple[str, ...] = ()
    host_roles: Mapping[str, str] = field(default_factory=lambda: MappingProxyType({}))
    allowed_destinations: tuple[str, ...] = ()
    expected_services: tuple[ExpectedService, ...] = ()
    notes: str = ""

    def to_json(self) -> dict[str, Any]:
        return {
            "trusted_subnets": list(self.trusted_subnets),
            "host_roles": dict(sorted(self.host_roles.items())),
            "allowed_destinations": list(self.allowed_destinations),
            "expected_services": [
                {"host_id": s.host_id, "protocol": s.protocol, "port": s.port}
                for s in self.expected_services
            ],
            "notes": self.notes,
        }

    def referenced_hosts(self) -> set[str]:
        return set(self.host_roles) | {s.host_id for s in self.expected_services}


@dataclass(frozen=True)
class AgentPackage:
    manifest: Manifest
    prompt: str
    context: ContextFile
    source_dir: Path | None = None

    @property
    def agent_id(self) -> str:
        return self.manifest.agent_id


# -- parsing -----------------------------------------------------------------

_MANIFEST_TYPES: dict[str, tuple[type, ...]] = {
    "agent_id": (str,),
    "tactical_purpose": (str,),
    "trigger_class": (str,),
    "action_catalog": (list,),
    "report_schema": (list,),
    "confirmation_field": (str,),
    "model_backend": (str,),
    "query_budget": (int,),
    "result_cap": (int,),
    "wall_clock_budget": (int, float),
}


def _read_json(path: Path) -> Any:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise PackageError(
            [Violation("PARSE_ERROR", f"{path.name}: line {exc.lineno}: {exc.msg}")]
        ) from exc
    except UnicodeDecodeError as exc:
        raise PackageError([Violation("PARSE_ERROR", f"{path.name}: not UTF-8 ({exc.reason})")]) from exc


def parse_manifest(obj: Any) -> Manifest:
    if not isinstance(obj, dict):
        raise PackageError([Violation("MANIFEST_TYPE", "manifest.json must hold a JSON object")])
    problems: list[Violation] = []
    for key, types in _MANIFEST_TYPES.items():
        if key not in obj:
            problems.append(Violation("MANIFEST_MISSING_KEY", f"manifest.json: missing key {key!r}"))
        elif isinstance(obj[key], bool) or not isinstance(obj[key], types):
            want = "/".join(t.__name__ for t in types)
            problems.append(
                Violation("MANIFEST_TYPE", f"manifest.json: {key!r} must be {want}, got {type(obj[key]).__name__}")
            )
    if problems:
        raise PackageError(problems)

    schema: list[FieldSpec] = []
    for i, entry in enumerate(obj["report_schema"]):
        if (
            not isinstance(entry, dict)
            or not isinstance(entry.get("name"), str)
            or not isinstance(entry.get("value_kind"), str)
            or not isinstance(entry.get("required", True), bool)
        ):
            problems.append(
                Violation("MANIFEST_TYPE", f"manifest.json: report_schema[{i}] needs name, value_kind, required")
            )
            continue
        schema.append(FieldSpec(entry["name"], entry["value_kind"], entry.get("required", True)))
    if not all(isinstance(a, str) for a in obj["action_catalog"]):
        problems.append(Violation("MANIFEST_TYPE", "manifest.json: action_catalog entries must be strings"))
    if problems:
        raise PackageError(problems)

    return Manifest(
        agent_id=obj["agent_id"],
        tactical_purpose=obj["tactical_purpose"],
        trigger_class=obj["trigger_class"],
        action_catalog=frozenset(obj["action_catalog"]),
        report_schema=tuple(schema),
        confirmation_field=obj["confirmation_field"],
        model_backend=obj["model_backend"],
        query_budget=obj["query_budget"],
        result_cap=obj["result_cap"],
        wall_clock_budget=float(obj["wall_clock_budget"]),
    )


def parse_context(obj: Any) -> ContextFile:
    if not isinstance(obj, dict):
        raise PackageError([Violation("CONTEXT_TYPE", "context.json must hold a JSON object")])
    try:
        services = tuple(
            ExpectedService(s["host_id"], s["protocol"], int(s["port"]))
            for s in obj.get("expected_services", [])
        )
        roles = obj.get("host_roles", {})
        if not isinstance(roles, dict):
            raise TypeError("host_roles must be an object")
        return ContextFile(
            trusted_subnets=tuple(obj.get("trusted_subnets", [])),
            host_roles=MappingProxyType(dict(roles)),
            allowed_destinations=tuple(obj.get("allowed_destinations", [])),
            expected_services=services,
            notes=str(obj.get("notes", "")),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise PackageError([Violation("CONTEXT_TYPE", f"context.json: {exc}")]) from exc


def load_package(directory: str | Path) -> AgentPackage:
    """Parse and validate the package in ``directory``.

    Raises :class:`PackageError` carrying every problem found; a package is
    returned only when it is complete and passes :func:`validate_package`.
    """
    d = Path(directory)
    if not d.is_dir():
        raise PackageError([Violation("MISSING_DIR", f"{d}: not a directory")])
    missing = [name for name in PACKAGE_FILES if not (d / name).is_file()]
    if missing:
        raise PackageError(
            [Violation("MISSING_FILE", f"missing {name.split('.')[0]} file: {name}") for name in missing]
        )

    manifest = parse_manifest(_read_json(d / MANIFEST_FILE))
    context = parse_context(_read_json(d / CONTEXT_FILE))
    try:
        prompt = (d / PROMPT_FILE).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise PackageError([Violation("PARSE_ERROR", f"{PROMPT_FILE}: not UTF-8 ({exc.reason})")]) from exc

    pkg = AgentPackage(manifest, prompt, context, d)
    violations = validate_package(pkg)
    if violations:
        raise PackageError(violations)
    return pkg


# -- validation --------------------------------------------------------------


def validate_package(pkg: AgentPackage) -> list[Violation]:
    """Check every manifest, schema and context invariant; never raises."""
    out: list[Violation] = []
    m = pkg.manifest

    if not m.agent_id.strip():
        out.append(Violation("EMPTY_AGENT_ID", "agent_id must be non-empty"))
    if not m.trigger_class.strip():
        out.append(Violation("EMPTY_TRIGGER_CLASS", "trigger_class must be non-empty"))
    if not m.action_catalog:
        out.append(Violation("EMPTY_CATALOG", "action_catalog must name at least one action"))
    if m.query_budget < 1:
        out.append(Violation("BAD_QUERY_BUDGET", "query_budget must be ≥ 1"))
    if m.result_cap < 1:
        out.append(Violation("BAD_RESULT_CAP", "result_cap must be ≥ 1"))
    if not m.wall_clock_budget > 0:
        out.append(Violation("BAD_WALL_CLOCK_BUDGET", "wall_clock_budget must be > 0"))

    seen: set[str] = set()
    for spec in m.report_schema:
        if spec.name in seen:
            out.append(Violation("DUPLICATE_FIELD", f"report_schema field {spec.name!r} declared twice"))
        seen.add(spec.name)
        if spec.value_kind not in VALUE_KINDS:
            out.append(Violation("UNKNOWN_VALUE_KIND", f"field {spec.name!r} has unknown kind {spec.value_kind!r}"))
        if spec.name == "action":
            out.append(Violation("RESERVED_FIELD", "'action' is reserved for the requested action"))

    confirm = m.field(m.confirmation_field)
    if confirm is None:
        out.append(
            Violation("CONFIRMATION_FIELD_MISSING", f"confirmation_field {m.confirmation_field!r} not in report_schema")
        )
    else:
        if confirm.value_kind != "boolean":
            out.append(
                Violation("CONFIRMATION_FIELD_TYPE", f"confirmation_field {confirm.name!r} must be boolean")
            )
        if not confirm.required:
            out.append(Violation("CONFIRMATION_FIELD_OPTIONAL", f"confirmation_field {confirm.name!r} must be required"))

    if "network_block" in m.action_catalog and not any(
        s.required and s.value_kind in ("endpoint", "endpoint_list") for s in m.report_schema
    ):
        out.append(
            Violation("NO_ENFORCEMENT_TARGET", "network_block needs a required endpoint or endpoint_list field")
        )

    if not pkg.prompt.strip():
        out.append(Violation("EMPTY_PROMPT", "prompt.txt must not be empty"))

    ctx = pkg.context
    for subnet in ctx.trusted_subnets:
        try:
            ipaddress.IPv4Network(subnet, strict=False)
        except (ValueError, TypeError):
            out.append(Violation("BAD_SUBNET", f"trusted subnet {subnet!r} is not an address range"))
    for dest in ctx.allowed_destinations:
        if parse_endpoint(dest) is None:
            out.append(Violation("BAD_DESTINATION", f"allowed destination {dest!r} is not a.b.c.d:port"))
    for host in sorted(ctx.referenced_hosts()):
        if not is_host_id(host):
            out.append(Violation("BAD_HOST_ID", f"context host id {host!r} is malformed"))
    for svc in ctx.expected_services:
        if not 0 <= svc.port <= 65535:
            out.append(Violation("BAD_SERVICE_PORT", f"expected service port {svc.port} out of range"))
    return out


def unresolved_hosts(pkg: AgentPackage, topology_hosts: set[str]) -> list[str]:
    """Context host ids that the deployment topology does not know about."""
    return sorted(pkg.context.referenced_hosts() - topology_hosts)


# -- registry ----------------------------------------------------------------


@dataclass(frozen=True)
class Registry:
    packages: Mapping[str, AgentPackage] = field(default_factory=lambda: MappingProxyType({}))

    def __len__(self) -> int:
        return len(self.packages)

    def get(self, agent_id: str) -> AgentPackage | None:
        return self.packages.get(agent_id)

    def by_trigger(self, trigger_class: str) -> list[AgentPackage]:
        return [p for _, p in sorted(self.packages.items()) if p.manifest.trigger_class == trigger_class]

    def only(self, *agent_ids: str) -> Registry:
        """Registry restricted to the named agents (the deployed set for a trial)."""
        missing = [a for a in agent_ids if a not in self.packages]
        if missing:
            raise RegistryError(f"unknown agent ids: {', '.join(missing)}")
        return Registry(MappingProxyType({a: self.packages[a] for a in agent_ids}))


def register(reg: Registry, pkg: AgentPackage) -> Registry:
    violations = validate_package(pkg)
    if violations:
        raise RegistryError(f"package {pkg.agent_id!r} is invalid: " + "; ".join(map(str, violations)))
    if pkg.agent_id in reg.packages:
        raise RegistryError(f"duplicate agent_id {pkg.agent_id!r}")
    packages = dict(reg.packages)
    packages[pkg.agent_id] = pkg
    logger.debug("registered agent %s (trigger %s)", pkg.agent_id, pkg.manifest.trigger_class)
    return Registry(MappingProxyType(packages))


def load_library(root: str | Path) -> Registry:
    """Load and register every package directory directly under ``root``."""
    root = Path(root)
    if not root.is_dir():
        raise PackageError([Violation("MISSING_DIR", f"{root}: not a directory")])
    reg = Registry()
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        reg = register(reg, load_package(d))
    return reg


def select_agent(reg: Registry, trigger: Any) -> AgentPackage | None:
    """Return the single package handling ``trigger`` (a Trigger or a class name)."""
    trigger_class = trigger if isinstance(trigger, str) else trigger.trigger_class
    matches = reg.by_trigger(trigger_class)
    if len(matches) > 1:
        ids = ", ".join(p.agent_id for p in matches)
        raise RegistryError(f"ambiguous trigger class {trigger_class!r}: {ids}")
    return matches[0] if matches else None
