"""Deterministic attack arena.

A small enterprise network and a DarkSide-style attack chain. The attack is
scheduled up front from the scenario timeline and seed; the defender can only
influence it through network blocks. Everything observable is derived by
filtering that fixed schedule against the block table, so the same inputs
always yield the same telemetry, triggers and impact.

Attack model: the entry host is compromised at t=0. Scanning, lateral
credential probes, C2 beaconing and staged outbound uploads follow. At the
``spread_complete`` instant the attacker, driving everything over its C2
channel, pushes the payload to every remaining host and finalizes the
exfiltration archive. Both depend on the C2 endpoint being reachable at that
instant, which gives the binary containment outcome.
"""

from __future__ import annotations

import functools
import ipaddress
import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

from pocket.telemetry import Endpoint, TelemetryRecord

SUPPORTED_SCOPES = ("global",)
ALL_SCOPES = ("global", "subnet", "host", "session")
PHASES = ("scan", "lateral", "c2", "exfil")

_PORT_PROTOCOLS = {22: "ssh", 80: "http", 443: "https", 445: "smb", 873: "rsync", 3389: "rdp"}


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class Host:
    host_id: str
    role: str
    address: str


@dataclass(frozen=True)
class Topology:
    hosts: tuple[Host, ...]
    attacker_endpoint: Endpoint
    entry_host: str
    subnets: tuple[str, ...]

    def __post_init__(self) -> None:
        ids = [h.host_id for h in self.hosts]
        if len(set(ids)) != len(ids):
            raise ScenarioError("duplicate host ids in topology")
        if self.entry_host not in ids:
            raise ScenarioError(f"entry host {self.entry_host!r} is not in the topology")
        nets = [ipaddress.IPv4Network(s) for s in self.subnets]
        attacker = ipaddress.IPv4Address(self.attacker_endpoint.address)
        if any(attacker in n for n in nets):
            raise ScenarioError("attacker endpoint must lie outside every subnet")

    def host(self, host_id: str) -> Host:
        for h in self.hosts:
            if h.host_id == host_id:
                return h
        raise KeyError(host_id)

    @property
    def host_ids(self) -> set[str]:
        return {h.host_id for h in self.hosts}

    @property
    def peers(self) -> list[Host]:
        return [h for h in self.hosts if h.host_id != self.entry_host]


@dataclass(frozen=True)
class Timeline:
    """Phase start times and per-step schedule, all in seconds."""

    scan_start: float = 5.0
    scan_interval: float = 2.0
    scan_ports: tuple[int, ...] = (445, 3389)
    lateral_start: float = 30.0
    lateral_interval: float = 15.0
    c2_start: float = 60.0
    c2_interval: float = 10.0
    exfil_start: float = 120.0
    exfil_interval: float = 10.0
    exfil_chunk_bytes: int = 1_500_000
    spread_complete: float = 300.0
    duration: float = 600.0
    seed: int = 7

    def __post_init__(self) -> None:
        starts = [s for _, s in self.phases()]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ScenarioError("phase starts must be strictly increasing")
        if not starts[-1] < self.spread_complete <= self.duration:
            raise ScenarioError("spread_complete must follow the exfil start and precede the end")
        if min(self.scan_interval, self.lateral_interval, self.c2_interval, self.exfil_interval) <= 0:
            raise ScenarioError("phase intervals must be positive")

    def phases(self) -> list[tuple[str, float]]:
        return [
            ("scan", self.scan_start),
            ("lateral", self.lateral_start),
            ("c2", self.c2_start),
            ("exfil", self.exfil_start),
        ]


@dataclass(frozen=True)
class SensitiveFile:
    name: str
    host: str
    bytes: int


@dataclass(frozen=True)
class BenignFlow:
    host: str
    dst: Endpoint
    direction: str
    interval: float
    bytes: int
    start: float = 0.0
    src: Endpoint | None = None  # for inbound flows, the remote client


@dataclass(frozen=True)
class DetectorConfig:
    c2_min_beacons: int = 3
    c2_window: float = 60.0
    exfil_min_bytes: int = 5_000_000
    exfil_window: float = 60.0
    lateral_min_peers: int = 4
    lateral_window: float = 120.0


@dataclass(frozen=True)
class Scenario:
    name: str
    topology: Topology
    timeline: Timeline
    files: tuple[SensitiveFile, ...]
    detectors: DetectorConfig = DetectorConfig()
    benign: tuple[BenignFlow, ...] = ()

    def __post_init__(self) -> None:
        ids = self.topology.host_ids
        for f in self.files:
            if f.host not in ids:
                raise ScenarioError(f"file {f.name!r} placed on unknown host {f.host!r}")
        for b in self.benign:
            if b.host not in ids:
                raise ScenarioError(f"benign flow on unknown host {b.host!r}")

    def with_seed(self, seed: int) -> Scenario:
        tl = self.timeline
        return Scenario(
            self.name,
            self.topology,
            Timeline(**{**tl.__dict__, "seed": seed}),
            self.files,
            self.detectors,
            self.benign,
        )


def load_scenario(path: str | Path) -> Scenario:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        return scenario_from_json(obj)
    except OSError as exc:
        raise ScenarioError(f"{path}: {exc.strerror or exc}") from exc
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioError(f"{path}: {exc}") from exc


def scenario_from_json(obj: Mapping[str, Any]) -> Scenario:
    topo = obj["topology"]
    topology = Topology(
        hosts=tuple(Host(h["host_id"], h["role"], h["address"]) for h in topo["hosts"]),
        attacker_endpoint=Endpoint.parse(topo["attacker_endpoint"]),
        entry_host=topo["entry_host"],
        subnets=tuple(topo["subnets"]),
    )
    tl = dict(obj.get("timeline", {}))
    if "scan_ports" in tl:
        tl["scan_ports"] = tuple(tl["scan_ports"])
    if "seed" in obj:
        tl["seed"] = obj["seed"]
    benign = tuple(
        BenignFlow(
            host=b["host"],
            dst=Endpoint.parse(b["dst"]),
            direction=b["direction"],
            interval=float(b["interval"]),
            bytes=int(b["bytes"]),
            start=float(b.get("start", 0.0)),
            src=Endpoint.parse(b["src"]) if "src" in b else None,
        )
        for b in obj.get("benign", [])
    )
    return Scenario(
        name=obj["name"],
        topology=topology,
        timeline=Timeline(**tl),
        files=tuple(SensitiveFile(f["name"], f["host"], int(f["bytes"])) for f in obj["files"]),
        detectors=DetectorConfig(**obj.get("detectors", {})),
        benign=benign,
    )


# -- blocks ------------------------------------------------------------------


@dataclass(frozen=True)
class Block:
    endpoint: Endpoint
    scope: str
    applied_at: float

    def to_json(self) -> dict[str, Any]:
        return {"endpoint": str(self.endpoint), "scope": self.scope, "applied_at": round(self.applied_at, 3)}


@dataclass(frozen=True)
class BlockTable:
    entries: tuple[Block, ...] = ()

    def blocked_before(self, endpoint: Endpoint, t: float) -> bool:
        """True if ``endpoint`` was blocked strictly before ``t``."""
        return any(b.endpoint == endpoint and b.applied_at < t for b in self.entries)

    def drops(self, rec: TelemetryRecord) -> bool:
        return any(rec.touches(b.endpoint) and b.applied_at < rec.timestamp for b in self.entries)


def apply_block(table: BlockTable, endpoint: Endpoint, scope: str, at: float) -> BlockTable:
    if scope not in SUPPORTED_SCOPES:
        raise ValueError(f"unsupported block scope {scope!r}")
    if any(b.endpoint == endpoint and b.scope == scope for b in table.entries):
        return table
    return BlockTable(table.entries + (Block(endpoint, scope, at),))


# -- schedule ----------------------------------------------------------------


@dataclass(frozen=True)
class AttackEvent:
    """Ground-truth attack step. ``channel`` must be reachable at ``t``."""

    t: float
    kind: str  # "compromise" | "exfil"
    host: str
    item: str = ""
    channel: Endpoint | None = None

    def to_json(self) -> dict[str, Any]:
        return {
            "t": self.t,
            "kind": self.kind,
            "host": self.host,
            "item": self.item,
            "channel": str(self.channel) if self.channel else None,
        }


@dataclass(frozen=True)
class _Scheduled:
    record: TelemetryRecord
    after_commit: bool = False


@dataclass(frozen=True)
class Trigger:
    trigger_class: str
    raised_at: float
    payload: Mapping[str, Any]
    source_detector: str

    def to_json(self) -> dict[str, Any]:
        return {
            "trigger_class": self.trigger_class,
            "raised_at": round(self.raised_at, 3),
            "payload": dict(self.payload),
            "source_detector": self.source_detector,
        }


@dataclass(frozen=True)
class ImpactRecord:
    infected_hosts: tuple[str, ...]
    exfiltrated_files: tuple[str, ...]
    blocks: tuple[Block, ...] = ()

    @property
    def h(self) -> int:
        return len(self.infected_hosts)

    @property
    def f(self) -> int:
        return len(self.exfiltrated_files)

    @property
    def contained(self) -> bool:
        return self.h == 1 and self.f == 0

    def to_json(self) -> dict[str, Any]:
        return {
            "infected_hosts": {"count": self.h, "hosts": list(self.infected_hosts)},
            "exfiltrated_files": {"count": self.f, "files": list(self.exfiltrated_files)},
            "blocks": [b.to_json() for b in self.blocks],
            "contained": self.contained,
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> ImpactRecord:
        return cls(
            tuple(obj["infected_hosts"]["hosts"]),
            tuple(obj["exfiltrated_files"]["files"]),
            tuple(
                Block(Endpoint.parse(b["endpoint"]), b["scope"], float(b["applied_at"])) for b in obj["blocks"]
            ),
        )


def _endpoint(addr: str, port: int) -> Endpoint:
    return Endpoint(addr, port)


@functools.lru_cache(maxsize=32)
def attack_schedule(scenario: Scenario) -> tuple[tuple[AttackEvent, ...], tuple[_Scheduled, ...]]:
    """Block-independent ground truth and raw telemetry for ``scenario``."""
    topo, tl = scenario.topology, scenario.timeline
    rng = random.Random(tl.seed)
    entry = topo.host(topo.entry_host)
    attacker = topo.attacker_endpoint

    def eph() -> int:
        return rng.randint(49152, 65535)

    events = [AttackEvent(0.0, "compromise", entry.host_id)]
    for peer in topo.peers:
        events.append(AttackEvent(tl.spread_complete, "compromise", peer.host_id, channel=attacker))
    for f in scenario.files:
        events.append(AttackEvent(tl.spread_complete, "exfil", f.host, f.name, channel=attacker))

    sched: list[_Scheduled] = []

    def flow(t, src, dst, host, direction, nbytes, kind="flow", label="", after_commit=False):
        proto = _PORT_PROTOCOLS.get(dst.port, f"tcp-{dst.port}")
        rec = TelemetryRecord(round(t, 3), src, dst, host, direction, nbytes, proto, kind, label)
        sched.append(_Scheduled(rec, after_commit))

    # scan: entry host probes every peer on each scan port
    i = 0
    for peer in topo.peers:
        for port in tl.scan_ports:
            t = tl.scan_start + i * tl.scan_interval
            flow(t, _endpoint(entry.address, eph()), _endpoint(peer.address, port), entry.host_id, "lateral",
                 rng.randint(60, 120))
            i += 1

    # lateral: credential probes, one peer per step
    for i, peer in enumerate(topo.peers):
        t = tl.lateral_start + i * tl.lateral_interval
        if t >= tl.spread_complete:
            break
        flow(t, _endpoint(entry.address, eph()), _endpoint(peer.address, 445), entry.host_id, "lateral",
             rng.randint(4000, 8000))

    # c2: entry beacons until the end; after the spread every host beacons
    t = tl.c2_start
    while t < tl.duration:
        flow(t, _endpoint(entry.address, eph()), attacker, entry.host_id, "outbound", rng.randint(300, 600))
        if t >= tl.spread_complete:
            for peer in topo.peers:
                flow(t + 1, _endpoint(peer.address, eph()), attacker, peer.host_id, "outbound",
                     rng.randint(300, 600), after_commit=True)
        t += tl.c2_interval

    # exfil staging: chunked uploads from the entry host
    t = tl.exfil_start
    while t < tl.spread_complete:
        jitter = rng.randint(-100_000, 100_000)
        flow(t, _endpoint(entry.address, eph()), attacker, entry.host_id, "outbound", tl.exfil_chunk_bytes + jitter)
        t += tl.exfil_interval

    # commit: final archive transfer per sensitive file
    for f in scenario.files:
        src = topo.host(f.host)
        flow(tl.spread_complete, _endpoint(src.address, eph()), attacker, f.host, "outbound", f.bytes,
             kind="file_event", label=f.name, after_commit=True)

    for b in scenario.benign:
        host = topo.host(b.host)
        t = b.start
        while t < tl.duration:
            if b.direction == "inbound":
                src = b.src or _endpoint("198.51.100.200", eph())
                flow(t, _endpoint(src.address, eph()), _endpoint(host.address, b.dst.port), host.host_id,
                     "inbound", b.bytes)
            else:
                flow(t, _endpoint(host.address, eph()), b.dst, host.host_id, b.direction, b.bytes)
            t += b.interval

    sched.sort(key=lambda s: (s.record.timestamp, str(s.record.src), str(s.record.dst)))
    return tuple(events), tuple(sched)


def _is_external(scenario: Scenario, ep: Endpoint) -> bool:
    addr = ipaddress.IPv4Address(ep.address)
    return not any(addr in ipaddress.IPv4Network(s) for s in scenario.topology.subnets)


def _detect(scenario: Scenario, flows: Sequence[TelemetryRecord]) -> list[tuple[Trigger, TelemetryRecord]]:
    """Run the built-in detectors; each fires at most once."""
    det = scenario.detectors
    fired: dict[str, tuple[Trigger, TelemetryRecord]] = {}
    beacons: dict[tuple[str, Endpoint], list[float]] = {}
    volume: dict[str, list[tuple[float, int]]] = {}
    peers: dict[str, list[tuple[float, str]]] = {}
    det_auth_bytes = 1000

    for rec in flows:
        if rec.kind != "flow":
            continue
        if rec.direction == "outbound" and _is_external(scenario, rec.dst):
            key = (rec.host, rec.dst)
            times = [x for x in beacons.get(key, []) if x > rec.timestamp - det.c2_window] + [rec.timestamp]
            beacons[key] = times
            if "c2_beacon" not in fired and len(times) >= det.c2_min_beacons and rec.bytes < 10_000:
                trig = Trigger("c2_beacon", rec.timestamp,
                               {"alerting_host": rec.host, "beacon_count": len(times), "destination": str(rec.dst),
                                "window_seconds": det.c2_window},
                               "beacon_rate")
                fired["c2_beacon"] = (trig, rec)

            vol = [x for x in volume.get(rec.host, []) if x[0] > rec.timestamp - det.exfil_window]
            vol.append((rec.timestamp, rec.bytes))
            volume[rec.host] = vol
            total = sum(b for _, b in vol)
            if "exfil_volume" not in fired and total >= det.exfil_min_bytes:
                trig = Trigger("exfil_volume", rec.timestamp,
                               {"alerting_host": rec.host, "destination": str(rec.dst), "outbound_bytes": total,
                                "window_seconds": det.exfil_window},
                               "outbound_volume")
                fired["exfil_volume"] = (trig, rec)
        elif rec.direction == "lateral" and rec.bytes >= det_auth_bytes:
            # credential exchanges only; scan probes are far smaller
            seen = [x for x in peers.get(rec.host, []) if x[0] > rec.timestamp - det.lateral_window]
            seen.append((rec.timestamp, rec.dst.address))
            peers[rec.host] = seen
            distinct = {a for _, a in seen}
            if "lateral_movement" not in fired and len(distinct) >= det.lateral_min_peers:
                trig = Trigger("lateral_movement", rec.timestamp,
                               {"alerting_host": rec.host, "peer_count": len(distinct),
                                "window_seconds": det.lateral_window},
                               "lateral_auth")
                fired["lateral_movement"] = (trig, rec)
    return sorted(fired.values(), key=lambda x: (x[0].raised_at, x[0].trigger_class))


def _visible(scenario: Scenario, blocks: BlockTable, until: float | None) -> list[TelemetryRecord]:
    """Raw telemetry after blocks and the commit outcome, up to ``until``."""
    tl = scenario.timeline
    committed = not blocks.blocked_before(scenario.topology.attacker_endpoint, tl.spread_complete)
    _, sched = attack_schedule(scenario)
    out = []
    for s in sched:
        rec = s.record
        if until is not None and rec.timestamp > until:
            break
        if s.after_commit and not committed:
            continue
        if blocks.drops(rec):
            continue
        out.append(rec)
    return out


def _with_alerts(scenario: Scenario, flows: list[TelemetryRecord]) -> tuple[list[TelemetryRecord], list[Trigger]]:
    fired = _detect(scenario, flows)
    alerts = [
        TelemetryRecord(trig.raised_at, rec.src, rec.dst, rec.host, rec.direction, 0, rec.protocol, "alert",
                        trig.trigger_class)
        for trig, rec in fired
    ]
    merged = sorted(flows + alerts, key=lambda r: (r.timestamp, r.kind != "flow", str(r.src), str(r.dst)))
    return merged, [trig for trig, _ in fired]


def impact(topology: Topology, event_log: Sequence[AttackEvent], blocks: BlockTable) -> ImpactRecord:
    """Fold the ground-truth log against the block table.

    An attack step succeeds unless its channel was blocked before it ran.
    The entry host is infected before any trigger, so it always counts.
    """
    infected = {topology.entry_host}
    files: list[str] = []
    for ev in sorted(event_log, key=lambda e: (e.t, e.kind, e.host, e.item)):
        if ev.channel is not None and blocks.blocked_before(ev.channel, ev.t):
            continue
        if ev.kind == "compromise":
            infected.add(ev.host)
        elif ev.kind == "exfil":
            files.append(ev.item)
    order = [h.host_id for h in topology.hosts]
    return ImpactRecord(
        tuple(h for h in order if h in infected),
        tuple(sorted(files)),
        tuple(sorted(blocks.entries, key=lambda b: (b.applied_at, str(b.endpoint)))),
    )


@dataclass(frozen=True)
class ScenarioRun:
    telemetry: tuple[TelemetryRecord, ...]
    triggers: tuple[Trigger, ...]
    impact: ImpactRecord


def run_scenario(scenario: Scenario, blocks: BlockTable = BlockTable(), until: float | None = None) -> ScenarioRun:
    """Play the scenario to ``until`` (default: the end) under ``blocks``."""
    flows = _visible(scenario, blocks, until)
    records, triggers = _with_alerts(scenario, flows)
    events, _ = attack_schedule(scenario)
    horizon = scenario.timeline.duration if until is None else until
    log = [e for e in events if e.t <= horizon]
    return ScenarioRun(tuple(records), tuple(triggers), impact(scenario.topology, log, blocks))


class Arena:
    """Mutable handle on one scenario run: a clock-bound view plus the block table.

    The dispatcher holds the arena; sessions only see :meth:`view`, which
    implements the telemetry source protocol and exposes nothing else.
    """

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.blocks = BlockTable()

    @property
    def topology(self) -> Topology:
        return self.scenario.topology

    def telemetry(self, until: float | None = None) -> tuple[TelemetryRecord, ...]:
        return run_scenario(self.scenario, self.blocks, until).telemetry

    def triggers(self, until: float | None = None) -> tuple[Trigger, ...]:
        return run_scenario(self.scenario, self.blocks, until).triggers

    def apply_block(self, endpoint: Endpoint, scope: str, at: float) -> Block:
        self.blocks = apply_block(self.blocks, endpoint, scope, at)
        return next(b for b in self.blocks.entries if b.endpoint == endpoint and b.scope == scope)

    def is_blocked(self, endpoint: Endpoint, at: float) -> bool:
        return any(b.endpoint == endpoint and b.applied_at <= at for b in self.blocks.entries)

    def final_impact(self) -> ImpactRecord:
        return run_scenario(self.scenario, self.blocks).impact

    def view(self, clock: SimClock) -> ArenaView:
        return ArenaView(self, clock)


@dataclass
class SimClock:
    """Logical clock in scenario seconds. Wall time never enters the arena."""

    now: float = 0.0

    def advance(self, dt: float) -> float:
        if dt < 0:
            raise ValueError("clock cannot go backwards")
        self.now = round(self.now + dt, 6)
        return self.now


@dataclass(frozen=True)
class ArenaView:
    _arena: Arena = field(repr=False)
    _clock: SimClock = field(repr=False)

    def snapshot(self) -> Sequence[TelemetryRecord]:
        return self._arena.telemetry(until=self._clock.now)
