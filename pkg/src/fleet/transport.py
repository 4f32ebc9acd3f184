"""HTTP plumbing shared by nodes and workbenches.

Every exchange is a canonical-JSON envelope over plain HTTP/1.1. The module
also hosts the process-wide trace hook the integration harness uses to watch
traffic (installed post-open, so assertions see plaintext without weakening
the envelope layer).
"""

from __future__ import annotations

import base64
import socket
import threading
import urllib.error
import urllib.request
from typing import Any, Callable, Mapping

from . import canonical
from .errors import FleetError, Unreachable, from_payload
from .identity import Envelope, Identity, PublicMaterial, ReplayCache, open_envelope, seal

DEFAULT_TIMEOUT_S = 15.0

_trace_lock = threading.Lock()
_trace_hook: Callable[[dict], None] | None = None


def set_trace_hook(hook: Callable[[dict], None] | None) -> None:
    global _trace_hook
    with _trace_lock:
        _trace_hook = hook


def trace_event(event: dict) -> None:
    with _trace_lock:
        hook = _trace_hook
    if hook is not None:
        hook(event)


def http_request(method: str, url: str, body: bytes | None = None,
                 headers: Mapping[str, str] | None = None,
                 timeout: float = DEFAULT_TIMEOUT_S) -> tuple[int, bytes]:
    request = urllib.request.Request(url, data=body, method=method,
                                     headers=dict(headers or {}))
    try:
        with urllib.request.urlopen(request, timeout=timeout) as response:
            return response.status, response.read()
    except urllib.error.HTTPError as err:
        return err.code, err.read()
    except (urllib.error.URLError, ConnectionError, socket.timeout, OSError) as exc:
        raise Unreachable(f"{method} {url}: {exc}") from exc


def fetch_public_metadata(base_url: str, timeout: float = DEFAULT_TIMEOUT_S) -> dict:
    """Bootstrap step: a node's public material, served as plain canonical
    JSON because no recipient key exists yet."""
    status, body = http_request("GET", base_url.rstrip("/") + "/node/metadata", timeout=timeout)
    if status != 200:
        raise Unreachable(f"{base_url} metadata returned HTTP {status}")
    doc = canonical.loads(body)
    if not isinstance(doc, dict) or "keys" not in doc:
        raise Unreachable(f"{base_url} did not return node metadata")
    return doc


def _raise_from_error_body(status: int, body: bytes, opener=None) -> None:
    try:
        doc = canonical.loads(body)
    except FleetError:
        raise FleetError(f"HTTP {status} with unreadable body") from None
    if isinstance(doc, dict) and "error" in doc:
        raise from_payload(doc)
    if isinstance(doc, dict) and "payload" in doc and opener is not None:
        inner = opener(doc)
        if isinstance(inner, dict) and "error" in inner:
            raise from_payload(inner)
    raise FleetError(f"HTTP {status}")


def exchange(method: str, base_url: str, path: str, sender: Identity,
             recipient: PublicMaterial, payload: dict, replay: ReplayCache | None = None,
             timeout: float = DEFAULT_TIMEOUT_S, initiator: str = "") -> dict:
    """Seal a payload to the recipient, perform the request, and open the
    sealed response. POST bodies carry the envelope; GET requests put it in
    the X-Fleet-Envelope header with a {method, path} binding inside.
    """
    body_payload = dict(payload)
    if method == "GET":
        body_payload.setdefault("method", method)
        body_payload.setdefault("path", path)
    envelope = seal(sender, recipient, canonical.dumps(body_payload))
    envelope_bytes = canonical.dumps(envelope.to_jsonable())
    headers = {"Content-Type": "application/json"}
    body = None
    if method == "GET":
        headers["X-Fleet-Envelope"] = base64.b64encode(envelope_bytes).decode("ascii")
    else:
        body = envelope_bytes
    trace_event({"event": "send", "initiator": initiator or sender.fingerprint,
                 "method": method, "route": path, "url": base_url})
    status, response = http_request(method, base_url.rstrip("/") + path, body, headers, timeout)

    def opener(doc):
        reply = Envelope.from_jsonable(doc)
        plaintext, _ = open_envelope(sender, {recipient.fingerprint: recipient}, reply,
                                     replay=replay)
        return canonical.loads(plaintext)

    if status >= 400:
        _raise_from_error_body(status, response, opener)
    doc = canonical.loads(response)
    return opener(doc)
