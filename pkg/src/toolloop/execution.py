"""Tool dispatch with argument validation, timeouts and error encapsulation."""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass
from urllib.parse import quote

import httpx

from .backends import simulate_tool
from .protocol import ToolCallRequest
from .registry import ToolDoc, ToolRegistry

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT_MS = 30_000
STATUSES = ("ok", "tool_error", "timeout", "validation_error", "unknown_tool")


@dataclass
class ToolResult:
    status: str
    content: str
    latency_ms: int = 0

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def observation_text(self) -> str:
        """Text handed back to the model; failures lead with the status keyword."""
        return self.content if self.ok else f"{self.status}: {self.content}"


def _type_ok(value, declared: str) -> bool:
    if declared == "string":
        return isinstance(value, str)
    if declared == "integer":
        return isinstance(value, int) and not isinstance(value, bool)
    if declared == "number":
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if declared == "boolean":
        return isinstance(value, bool)
    if declared == "array":
        return isinstance(value, list)
    if declared == "object":
        return isinstance(value, dict)
    if declared == "null":
        return value is None
    return True  # unknown type keywords are not checked


def validate_arguments(doc: ToolDoc, call: ToolCallRequest) -> list[str]:
    props = doc.parameters.get("properties", {})
    violations = []
    for name in doc.parameters.get("required", []):
        if name not in call.arguments:
            violations.append(f"missing required parameter '{name}'")
    for name, value in call.arguments.items():
        if name not in props:
            violations.append(f"unknown parameter '{name}'")
            continue
        declared = props[name].get("type")
        types = declared if isinstance(declared, list) else [declared] if declared else []
        if types and not any(_type_ok(value, t) for t in types):
            violations.append(f"parameter '{name}' should be {' or '.join(types)}, got {type(value).__name__}")
        enum = props[name].get("enum")
        if enum is not None and value not in enum:
            violations.append(f"parameter '{name}' must be one of {enum}")
    return violations


_INT = re.compile(r"[+-]?\d+")


def coerce_arguments(doc: ToolDoc, arguments: dict) -> dict:
    """Coerce numeric strings to declared number/integer types; nothing else."""
    props = doc.parameters.get("properties", {})
    out = dict(arguments)
    for name, value in arguments.items():
        declared = props.get(name, {}).get("type")
        if not isinstance(value, str) or declared not in ("integer", "number"):
            continue
        s = value.strip()
        if declared == "integer" and _INT.fullmatch(s):
            out[name] = int(s)
        elif declared == "number":
            try:
                f = float(s)
            except ValueError:
                continue
            if f == f and f not in (float("inf"), float("-inf")):
                out[name] = int(s) if _INT.fullmatch(s) else f
    return out


def _stringify(value) -> str:
    if isinstance(value, str):
        return value
    return json.dumps(value, ensure_ascii=False)


def call_http(doc: ToolDoc, arguments: dict, timeout_s: float, client: httpx.Client | None = None) -> str:
    cfg = doc.endpoint_config or {}
    url = cfg["url_template"]
    args = dict(arguments)
    for key in re.findall(r"\{(\w+)\}", url):
        if key in args:
            url = url.replace("{" + key + "}", quote(str(args.pop(key)), safe=""))
    method = cfg.get("method", "GET").upper()
    headers = dict(cfg.get("headers", {}))
    if cfg.get("auth_env"):
        token = os.environ.get(cfg["auth_env"])
        if token:
            headers.setdefault("Authorization", f"Bearer {token}")
    own = client is None
    client = client or httpx.Client()
    try:
        if method == "GET":
            resp = client.request(method, url, params={k: _stringify(v) for k, v in args.items()},
                                  headers=headers, timeout=timeout_s)
        else:
            resp = client.request(method, url, json=args, headers=headers, timeout=timeout_s)
    finally:
        if own:
            client.close()
    if resp.status_code >= 400:
        raise RuntimeError(f"HTTP {resp.status_code}: {resp.text[:200]}")
    return resp.text


class ToolBackends:
    """Everything dispatch may route to besides local callables."""

    def __init__(self, aux=None, http_client: httpx.Client | None = None, force_simulated: bool = False):
        self.aux = aux
        self.http_client = http_client
        self.force_simulated = force_simulated
        self._locks: dict[str, threading.Lock] = {}
        self._guard = threading.Lock()

    def lock_for(self, name: str) -> threading.Lock:
        with self._guard:
            return self._locks.setdefault(name, threading.Lock())


def _one_line(text: str) -> str:
    return " ".join(str(text).split())[:300] or "no details"


def _invoke(registry: ToolRegistry, doc: ToolDoc, args: dict, backends: ToolBackends, timeout_s: float):
    source = "simulated" if backends.force_simulated else doc.source
    if source == "local":
        fn = registry.functions.get(doc.name)
        if fn is None:
            raise RuntimeError(f"no implementation registered for local tool {doc.name}")
        return fn(**args)
    if source == "http":
        return call_http(doc, args, timeout_s, backends.http_client)
    if backends.aux is None:
        raise RuntimeError("no simulator backend configured")
    sim_doc = doc if doc.source == "simulated" else ToolDoc(doc.name, doc.description, doc.parameters, "simulated")
    return simulate_tool(backends.aux, sim_doc, ToolCallRequest(doc.name, args))


def dispatch(registry: ToolRegistry, call: ToolCallRequest, backends: ToolBackends | None = None,
             timeout_ms: int = DEFAULT_TIMEOUT_MS) -> ToolResult:
    """Run one tool call. Never raises; every failure becomes a ToolResult."""
    start = time.monotonic()

    def done(status, content):
        return ToolResult(status, content, int((time.monotonic() - start) * 1000))

    backends = backends or ToolBackends()
    doc = registry.get(call.name)
    if doc is None:
        return done("unknown_tool", f"no tool named '{call.name}' is registered; use tool_search to find available tools")
    args = coerce_arguments(doc, call.arguments)
    violations = validate_arguments(doc, ToolCallRequest(call.name, args))
    if violations:
        return done("validation_error", f"{call.name}: " + "; ".join(violations))

    box: dict = {}

    def work():
        lock = backends.lock_for(doc.name) if doc.name in registry.serialized else None
        try:
            if lock:
                with lock:
                    box["value"] = _invoke(registry, doc, args, backends, timeout_ms / 1000)
            else:
                box["value"] = _invoke(registry, doc, args, backends, timeout_ms / 1000)
        except BaseException as e:  # noqa: BLE001 - tool code is untrusted
            box["error"] = e

    worker = threading.Thread(target=work, daemon=True, name=f"tool-{doc.name}")
    worker.start()
    worker.join(timeout_ms / 1000)
    if worker.is_alive():
        return done("timeout", f"{call.name} did not finish within {timeout_ms} ms")
    if "error" in box:
        e = box["error"]
        return done("tool_error", _one_line(f"{call.name} failed: {type(e).__name__}: {e}"))
    value = box.get("value")
    return done("ok", value if isinstance(value, str) else _stringify(value))
