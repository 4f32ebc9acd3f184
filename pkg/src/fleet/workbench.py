"""Analyst-facing client: connect to an entry point, look up projects,
submit plans, poll status, and fetch results. Library plus the `fleet-wb`
command line; all traffic is outbound request/response, a workbench never
listens.
"""

from __future__ import annotations

import argparse
import base64
import json
import logging
import os
import sys
import time
from dataclasses import dataclass

from . import canonical, transport
from .errors import FleetError, HandshakeFailed, NotReady, ScenarioTimeout, ValidationError
from .identity import (
    Envelope,
    Identity,
    PublicMaterial,
    ReplayCache,
    generate_identity,
    open_envelope,
    seal,
)
from .model import Artifact, Instruction, new_id, parse_instructions
from .planner import default_registry, validate

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Plan:
    project_code: str
    instructions: tuple[Instruction, ...]

    def instructions_jsonable(self) -> list:
        return [i.to_jsonable() for i in self.instructions]


def load_plan_file(path: str, project_code: str) -> Plan:
    """A plan file is a JSON array of instructions, the declarative twin of
    authoring them in code."""
    with open(path, "rb") as fh:
        instructions = parse_instructions(canonical.loads(fh.read()))
    return Plan(project_code=project_code, instructions=instructions)


@dataclass(frozen=True)
class ArtifactHandle:
    artifact_id: str


class Context:
    """A connection to one entry-point node. Use one context per caller;
    independent contexts may run concurrently in one process."""

    def __init__(self, url: str, identity: Identity | None = None):
        self.url = url.rstrip("/")
        self.identity = identity or generate_identity()
        self.entry: PublicMaterial | None = None
        self.entry_name: str | None = None
        self._replay = ReplayCache()
        self.connected = False

    # -- wire helpers -----------------------------------------------------------

    def _exchange(self, method: str, path: str, payload: dict) -> dict:
        if not self.connected:
            raise HandshakeFailed("context is not connected; call connect() first")
        return transport.exchange(method, self.url, path, self.identity, self.entry,
                                  payload, replay=self._replay,
                                  initiator=self.identity.fingerprint)

    def connect(self) -> "Context":
        metadata = transport.fetch_public_metadata(self.url)
        self.entry = PublicMaterial.from_jsonable(metadata["keys"])
        self.entry_name = metadata.get("name")
        intro = {"keys": self.identity.public.to_jsonable(), "kind": "workbench"}
        envelope = seal(self.identity, self.entry, canonical.dumps(intro))
        transport.trace_event({"event": "send", "initiator": self.identity.fingerprint,
                               "method": "POST", "route": "/workbench/connect",
                               "url": self.url})
        status, body = transport.http_request(
            "POST", self.url + "/workbench/connect",
            canonical.dumps(envelope.to_jsonable()),
            {"Content-Type": "application/json"})
        try:
            reply = Envelope.from_jsonable(canonical.loads(body))
            plaintext, _ = open_envelope(self.identity,
                                         {self.entry.fingerprint: self.entry},
                                         reply, replay=self._replay)
            answer = canonical.loads(plaintext)
        except FleetError as exc:
            raise HandshakeFailed(f"connect to {self.url} failed: {exc}") from exc
        if status != 200 or not answer.get("accepted"):
            raise HandshakeFailed(f"entry point refused the connection: {answer}")
        self.connected = True
        return self

    # -- operations ----------------------------------------------------------------

    def project(self, code: str) -> dict:
        """Metadata-only project descriptor; never includes row data."""
        return self._exchange("GET", f"/workbench/project/{code}", {})

    def submit(self, plan: Plan, local_validate: bool = True) -> ArtifactHandle:
        if local_validate:
            # fast-fail against the default whitelist before anything is sent
            probe = Artifact(artifact_id=new_id(), project_code=plan.project_code,
                             instructions=plan.instructions,
                             submitted_by=self.identity.fingerprint)
            validate(probe, default_registry())
        answer = self._exchange("POST", "/workbench/artifact",
                                {"instructions": plan.instructions_jsonable(),
                                 "project_code": plan.project_code})
        return ArtifactHandle(artifact_id=answer["artifact_id"])

    def status(self, handle: ArtifactHandle) -> dict:
        return self._exchange("GET", f"/workbench/artifact/{handle.artifact_id}/status", {})

    def get_latest_resource(self, handle: ArtifactHandle) -> dict[str, bytes]:
        """Resources of the artifact's final task, keyed by name (the highest
        sequence number wins per name). NotReady until the artifact completed."""
        answer = self._exchange("GET", f"/workbench/artifact/{handle.artifact_id}/latest", {})
        return {name: base64.b64decode(blob)
                for name, blob in answer.get("resources", {}).items()}

    def wait(self, handle: ArtifactHandle, timeout_s: float = 60.0,
             poll_every_s: float = 0.2) -> dict:
        """Poll status until the artifact reaches a terminal state."""
        deadline = time.monotonic() + timeout_s
        while True:
            snapshot = self.status(handle)
            if snapshot["status"] in ("completed", "aborted"):
                return snapshot
            if time.monotonic() >= deadline:
                raise ScenarioTimeout(
                    f"artifact {handle.artifact_id} still {snapshot['status']} "
                    f"after {timeout_s}s")
            time.sleep(poll_every_s)


def connect(url: str) -> Context:
    return Context(url).connect()


# --------------------------------------------------------------------------
# CLI
# --------------------------------------------------------------------------

def _cmd_project(args) -> int:
    ctx = connect(args.entry)
    print(json.dumps(ctx.project(args.code), indent=2, sort_keys=True))
    return 0


def _cmd_submit(args) -> int:
    plan = load_plan_file(args.plan, args.code)
    ctx = connect(args.entry)
    try:
        handle = ctx.submit(plan)
    except ValidationError as exc:
        print(f"plan rejected: instruction kind '{exc.kind}' ({exc})", file=sys.stderr)
        return 2
    print(handle.artifact_id)
    return 0


def _cmd_status(args) -> int:
    ctx = connect(args.entry)
    snapshot = ctx.status(ArtifactHandle(args.artifact))
    print(json.dumps(snapshot, indent=2, sort_keys=True))
    return 0 if snapshot["status"] != "aborted" else 1


def _cmd_fetch(args) -> int:
    ctx = connect(args.entry)
    handle = ArtifactHandle(args.artifact)
    try:
        resources = ctx.get_latest_resource(handle)
    except NotReady as exc:
        print(f"not ready: {exc}", file=sys.stderr)
        return 1
    os.makedirs(args.out, exist_ok=True)
    for name, data in sorted(resources.items()):
        path = os.path.join(args.out, f"{name}.json" if data[:1] in (b"{", b"[") else name)
        with open(path, "wb") as fh:
            fh.write(data)
        print(f"wrote {path} ({len(data)} bytes)")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="fleet-wb",
                                     description="Workbench for the federated data space.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("project", help="describe a project by code")
    p.add_argument("--entry", required=True, help="entry point URL")
    p.add_argument("--code", required=True, help="project code")
    p.set_defaults(fn=_cmd_project)

    p = sub.add_parser("submit", help="submit a plan file")
    p.add_argument("--entry", required=True)
    p.add_argument("--code", required=True)
    p.add_argument("--plan", required=True, help="path to a JSON plan file")
    p.set_defaults(fn=_cmd_submit)

    p = sub.add_parser("status", help="show artifact status")
    p.add_argument("--entry", required=True)
    p.add_argument("--artifact", required=True)
    p.set_defaults(fn=_cmd_status)

    p = sub.add_parser("fetch", help="download the artifact's final resources")
    p.add_argument("--entry", required=True)
    p.add_argument("--artifact", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=_cmd_fetch)

    args = parser.parse_args(argv)
    logging.basicConfig(level=os.environ.get("FLEET_LOG", "WARNING").upper())
    try:
        return args.fn(args)
    except FleetError as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
