"""Model backends.

The model is an untrusted conversation partner. Each of its turns is text;
a turn whose last ```json fence holds ``{"query": {...}}`` asks for
telemetry, anything else is the final answer handed to the boundary.

Two transports exist: :class:`ScriptedBackend` replays a recorded
:class:`ReplayScript` on the simulated clock, :class:`HttpChatBackend` talks to
a chat-completions endpoint. Configuration problems raise
:class:`OrchestrationError` and never become agent outcomes.
"""

from __future__ import annotations

import json
import logging
import os
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Protocol

from pocket.arena import SimClock
from pocket.boundary import fenced_objects
from pocket.telemetry import Query, QueryError

logger = logging.getLogger(__name__)

ENV_URL = "POCKET_BACKEND_URL"
ENV_MODEL = "POCKET_BACKEND_MODEL"
ENV_KEY = "POCKET_BACKEND_KEY"


class OrchestrationError(Exception):
    """The run failed before or outside the agent's control (config, transport)."""


class ScriptExhausted(Exception):
    """A scripted backend ran out of turns before giving a final answer."""


class SessionClosed(Exception):
    pass


@dataclass(frozen=True)
class BackendTurn:
    kind: str  # "query_request" | "final_text"
    text: str
    query: Query | None = None
    query_error: str = ""

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {"kind": self.kind, "text": self.text}
        if self.kind == "query_request":
            out["query"] = self.query.to_json() if self.query else None
            if self.query_error:
                out["query_error"] = self.query_error
        return out


def classify_turn(text: str) -> BackendTurn:
    objs = [o for o in fenced_objects(text) if isinstance(o, dict)]
    if objs and set(objs[-1]) == {"query"}:
        try:
            return BackendTurn("query_request", text, Query.from_json(objs[-1]["query"]))
        except QueryError as exc:
            return BackendTurn("query_request", text, None, str(exc))
    return BackendTurn("final_text", text)


@dataclass(frozen=True)
class ScriptTurn:
    latency: float
    text: str


@dataclass(frozen=True)
class ReplayScript:
    trial_id: str
    agent_id: str
    backend_id: str
    mode: str
    turns: tuple[ScriptTurn, ...]

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> ReplayScript:
        turns = tuple(ScriptTurn(float(t["latency"]), t["text"]) for t in obj["turns"])
        if any(t.latency < 0 for t in turns):
            raise ValueError("turn latency must be >= 0")
        return cls(obj["trial_id"], obj["agent_id"], obj["backend_id"], obj.get("mode", "post_hoc"), turns)

    def to_json(self) -> dict[str, Any]:
        return {
            "trial_id": self.trial_id,
            "agent_id": self.agent_id,
            "backend_id": self.backend_id,
            "mode": self.mode,
            "turns": [{"latency": t.latency, "text": t.text} for t in self.turns],
        }


def load_script(path: str | Path) -> ReplayScript:
    try:
        return ReplayScript.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
    except FileNotFoundError as exc:
        raise OrchestrationError(f"replay script not found: {path}") from exc
    except (KeyError, TypeError, ValueError) as exc:
        raise OrchestrationError(f"bad replay script {path}: {exc}") from exc


def find_script(fixtures_dir: str | Path, trial_id: str) -> ReplayScript:
    path = Path(fixtures_dir) / "trials" / trial_id / "script.json"
    if not path.is_file():
        raise OrchestrationError(f"unknown trial_id {trial_id!r} under {fixtures_dir}")
    return load_script(path)


# -- transports --------------------------------------------------------------


class Connection(Protocol):
    """One open conversation. ``send`` returns (model text, latency seconds)."""

    def send(self, message: str) -> tuple[str, float]: ...

    def exchanges(self) -> list[dict[str, Any]]: ...


class Backend(Protocol):
    backend_id: str

    def connect(self, system_prompt: str) -> Connection: ...


@dataclass
class _ScriptedConnection:
    script: ReplayScript
    _pos: int = 0

    def send(self, message: str) -> tuple[str, float]:
        if self._pos >= len(self.script.turns):
            raise ScriptExhausted(f"script {self.script.trial_id} has no turn {self._pos + 1}")
        turn = self.script.turns[self._pos]
        self._pos += 1
        return turn.text, turn.latency

    def exchanges(self) -> list[dict[str, Any]]:
        return []


@dataclass(frozen=True)
class ScriptedBackend:
    script: ReplayScript

    @property
    def backend_id(self) -> str:
        return self.script.backend_id

    def connect(self, system_prompt: str) -> Connection:
        return _ScriptedConnection(self.script)


@dataclass
class _HttpConnection:
    backend: HttpChatBackend
    messages: list[dict[str, str]]
    log: list[dict[str, Any]] = field(default_factory=list)

    def send(self, message: str) -> tuple[str, float]:
        self.messages.append({"role": "user", "content": message})
        body = {"model": self.backend.model, "messages": list(self.messages)}
        data = json.dumps(body).encode("utf-8")
        req = urllib.request.Request(
            self.backend.url.rstrip("/") + "/chat/completions",
            data=data,
            headers={"Content-Type": "application/json", "Authorization": f"Bearer {self.backend.key}"},
            method="POST",
        )
        started = time.monotonic()
        try:
            with urllib.request.urlopen(req, timeout=self.backend.timeout) as resp:
                raw = resp.read().decode("utf-8")
        except urllib.error.HTTPError as exc:
            detail = exc.read().decode("utf-8", "replace")
            self.log.append({"request": body, "status": exc.code, "response": detail})
            raise OrchestrationError(f"backend returned HTTP {exc.code}: {detail[:200]}") from exc
        except (urllib.error.URLError, OSError) as exc:
            raise OrchestrationError(f"backend unreachable: {exc}") from exc
        latency = time.monotonic() - started
        self.log.append({"request": body, "status": 200, "response": raw})
        try:
            text = json.loads(raw)["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise OrchestrationError(f"unexpected chat-completions response: {raw[:200]}") from exc
        if not isinstance(text, str):
            raise OrchestrationError("chat-completions content is not text")
        self.messages.append({"role": "assistant", "content": text})
        return text, latency

    def exchanges(self) -> list[dict[str, Any]]:
        return list(self.log)


@dataclass(frozen=True)
class HttpChatBackend:
    url: str
    model: str
    key: str
    timeout: float = 120.0

    @property
    def backend_id(self) -> str:
        return self.model

    @classmethod
    def from_env(cls, env: Mapping[str, str] | None = None) -> HttpChatBackend:
        env = os.environ if env is None else env
        missing = [k for k in (ENV_URL, ENV_MODEL, ENV_KEY) if not env.get(k)]
        if missing:
            raise OrchestrationError("live backend not configured; missing " + ", ".join(missing))
        return cls(env[ENV_URL], env[ENV_MODEL], env[ENV_KEY])

    def connect(self, system_prompt: str) -> Connection:
        return _HttpConnection(self, [{"role": "system", "content": system_prompt}])


def resolve_backend(spec: str, env: Mapping[str, str] | None = None) -> Backend:
    """Build a backend from a CLI id: ``live`` or ``scripted:<script.json>``."""
    if spec == "live":
        return HttpChatBackend.from_env(env)
    if spec.startswith("scripted:"):
        return ScriptedBackend(load_script(spec.split(":", 1)[1]))
    raise OrchestrationError(f"unknown backend id {spec!r} (use 'live' or 'scripted:<path>')")


# -- session -----------------------------------------------------------------


@dataclass(frozen=True)
class TranscriptEntry:
    sent_at: float
    message: str
    received_at: float
    turn: BackendTurn

    def to_json(self) -> dict[str, Any]:
        return {
            "sent_at": round(self.sent_at, 3),
            "message": self.message,
            "received_at": round(self.received_at, 3),
            "turn": self.turn.to_json(),
        }


@dataclass(frozen=True)
class SessionTranscript:
    backend_id: str
    system_prompt: str
    entries: tuple[TranscriptEntry, ...]
    first_prompt_time: float | None
    final_time: float | None
    exchanges: tuple[Mapping[str, Any], ...] = ()

    def final_text(self) -> str | None:
        if self.entries and self.entries[-1].turn.kind == "final_text":
            return self.entries[-1].turn.text
        return None

    def to_json(self) -> dict[str, Any]:
        return {
            "backend_id": self.backend_id,
            "system_prompt": self.system_prompt,
            "first_prompt_time": None if self.first_prompt_time is None else round(self.first_prompt_time, 3),
            "final_time": None if self.final_time is None else round(self.final_time, 3),
            "turns": [e.to_json() for e in self.entries],
            "exchanges": [dict(x) for x in self.exchanges],
        }


class Session:
    """A conversation bound to the simulated clock.

    Each ``next_turn`` advances the clock by the turn's latency. After a final
    answer the session is closed.
    """

    def __init__(self, backend: Backend, system_prompt: str, clock: SimClock):
        self.backend_id = backend.backend_id
        self.system_prompt = system_prompt
        self.clock = clock
        self._conn = backend.connect(system_prompt)
        self._entries: list[TranscriptEntry] = []
        self.first_prompt_time: float | None = None
        self.final_time: float | None = None
        self.closed = False

    def next_turn(self, message: str) -> BackendTurn:
        if self.closed:
            raise SessionClosed("session already produced its final answer")
        sent_at = self.clock.now
        if self.first_prompt_time is None:
            self.first_prompt_time = sent_at
        text, latency = self._conn.send(message)
        self.clock.advance(latency)
        turn = classify_turn(text)
        self._entries.append(TranscriptEntry(sent_at, message, self.clock.now, turn))
        if turn.kind == "final_text":
            self.closed = True
            self.final_time = self.clock.now
        return turn

    def reopen(self) -> None:
        """Allow another answer after a rejected report (dispatcher retry policy)."""
        self.closed = False
        self.final_time = None

    def transcript(self) -> SessionTranscript:
        return SessionTranscript(
            self.backend_id,
            self.system_prompt,
            tuple(self._entries),
            self.first_prompt_time,
            self.final_time if self.final_time is not None else (self._entries[-1].received_at if self._entries else None),
            tuple(self._conn.exchanges()),
        )


def open_session(backend: Backend, system_prompt: str, clock: SimClock) -> Session:
    return Session(backend, system_prompt, clock)
