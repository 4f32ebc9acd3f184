"""The node daemon: config, peer registry, resource store, HTTP service,
join protocol, task execution and the client-mode polling loop.

Default-mode nodes listen and may schedule artifacts; client-mode nodes bind
no socket at all and talk outbound-only to a single reference node. All
request and response bodies are sealed envelopes except GET /node/metadata,
which serves the public key material needed to seal anything in the first
place.
"""

from __future__ import annotations

import argparse
import base64
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Callable, Mapping

from . import canonical, transport
from .errors import (
    ConfigInvalid,
    DataSourceMissing,
    EnvelopeError,
    FleetError,
    Forbidden,
    MalformedDocument,
    MalformedEnvelope,
    MalformedJoin,
    NotReady,
    NotYourTask,
    SignatureInvalid,
    UnknownProject,
    UnknownResource,
    UnknownRoute,
    UnknownTask,
)
from .executor import ExecutionContext, builtin_runners, run_task
from .identity import (
    Envelope,
    Identity,
    PublicMaterial,
    ReplayCache,
    generate_identity,
    load_identity,
    open_envelope,
    open_introduction,
    save_identity,
    seal,
)
from .model import (
    Artifact,
    DataSource,
    Project,
    Resource,
    TaskStatus,
    new_id,
    parse_data_source_metadata,
    parse_instructions,
    parse_task,
)
from .planner import InstructionRegistry, compile, default_registry, validate
from .scheduler import AbortNotice, DispatchIntent, Scheduler, UpdateOutcome
from .tabular import read_csv_header

logger = logging.getLogger(__name__)

DEFAULT_POLL_INTERVAL_S = 2.0
HOUSEKEEPING_INTERVAL_S = 0.5


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class NodeConfig:
    name: str
    mode: str  # "default" | "client"
    private_key_file: str
    listen: str | None = None          # host:port, default mode only
    self_url: str | None = None
    reference_url: str | None = None   # client mode and warm start
    datasources: tuple[DataSource, ...] = ()
    projects: tuple[tuple[str, str], ...] = ()  # (code, name)
    poll_interval_s: float = DEFAULT_POLL_INTERVAL_S
    task_timeout_s: float = 300.0
    event_log: str | None = None

    def __post_init__(self):
        if self.mode not in ("default", "client"):
            raise ConfigInvalid(f"mode must be 'default' or 'client', got '{self.mode}'")
        if self.mode == "client":
            if self.listen is not None:
                raise ConfigInvalid("client-mode nodes must not declare a listen address")
            if not self.reference_url:
                raise ConfigInvalid("client-mode nodes need a reference_url")
        else:
            if not self.listen:
                raise ConfigInvalid("default-mode nodes need a listen address")
        if not self.name:
            raise ConfigInvalid("node name must be non-empty")


def parse_config(doc: Any, base_dir: str = ".") -> NodeConfig:
    if not isinstance(doc, Mapping):
        raise ConfigInvalid("config must be a JSON object")

    def resolve(path):
        return path if os.path.isabs(path) else os.path.join(base_dir, path)

    datasources = []
    for raw in doc.get("datasources", []):
        if not isinstance(raw, Mapping):
            raise ConfigInvalid("datasource entries must be objects")
        try:
            datasources.append(DataSource(
                data_source_id=raw["id"],
                path=resolve(raw["path"]),
                columns=tuple(raw["columns"]),
                project_codes=frozenset(raw["project_codes"]),
                kind=raw.get("kind", "csv"),
            ))
        except KeyError as exc:
            raise ConfigInvalid(f"datasource entry is missing {exc.args[0]!r}") from None
    projects = []
    for raw in doc.get("projects", []):
        if not isinstance(raw, Mapping) or "code" not in raw:
            raise ConfigInvalid("project entries need a 'code'")
        projects.append((raw["code"], raw.get("name", raw["code"])))
    try:
        return NodeConfig(
            name=doc["name"],
            mode=doc.get("mode", "default"),
            private_key_file=resolve(doc["private_key_file"]),
            listen=doc.get("listen"),
            self_url=doc.get("self_url"),
            reference_url=doc.get("reference_url"),
            datasources=tuple(datasources),
            projects=tuple(projects),
            poll_interval_s=float(doc.get("poll_interval_s", DEFAULT_POLL_INTERVAL_S)),
            task_timeout_s=float(doc.get("task_timeout_s", 300.0)),
            event_log=resolve(doc["event_log"]) if doc.get("event_log") else None,
        )
    except KeyError as exc:
        raise ConfigInvalid(f"config is missing {exc.args[0]!r}") from None


def load_config(path: str) -> NodeConfig:
    try:
        with open(path, "rb") as fh:
            doc = canonical.loads(fh.read())
    except OSError as exc:
        raise ConfigInvalid(f"cannot read config {path}: {exc}") from exc
    except MalformedDocument as exc:
        raise ConfigInvalid(str(exc)) from exc
    return parse_config(doc, base_dir=os.path.dirname(os.path.abspath(path)))


# --------------------------------------------------------------------------
# peers and resources
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PeerInfo:
    name: str
    mode: str
    url: str | None  # None for client-mode peers
    material: PublicMaterial
    datasources: tuple[DataSource, ...] = ()        # metadata only, never rows
    projects: tuple[tuple[str, str], ...] = ()

    @property
    def fingerprint(self) -> str:
        return self.material.fingerprint

    def to_record(self) -> dict:
        return {
            "datasources": [ds.metadata() for ds in self.datasources],
            "keys": self.material.to_jsonable(),
            "mode": self.mode,
            "name": self.name,
            "projects": [[code, name] for code, name in self.projects],
            "url": self.url,
        }

    @classmethod
    def from_record(cls, doc: Any) -> "PeerInfo":
        if not isinstance(doc, Mapping):
            raise MalformedJoin("peer record must be an object")
        mode = doc.get("mode")
        if mode not in ("default", "client"):
            raise MalformedJoin(f"peer mode must be default or client, got {mode!r}")
        url = doc.get("url")
        if mode == "client" and url is not None:
            raise MalformedJoin("client-mode peers carry no URL")
        if mode == "default" and not url:
            raise MalformedJoin("default-mode peers must carry a URL")
        name = doc.get("name")
        if not isinstance(name, str) or not name:
            raise MalformedJoin("peer name must be a non-empty string")
        try:
            material = PublicMaterial.from_jsonable(doc.get("keys"))
            datasources = tuple(parse_data_source_metadata(d) for d in doc.get("datasources", []))
        except MalformedDocument as exc:
            raise MalformedJoin(str(exc)) from exc
        projects = tuple((str(c), str(n)) for c, n in doc.get("projects", []))
        return cls(name=name, mode=mode, url=url, material=material,
                   datasources=datasources, projects=projects)


class PeerRegistry:
    """Known nodes (self included); joins are idempotent by fingerprint."""

    def __init__(self):
        self._lock = threading.Lock()
        self._peers: dict[str, PeerInfo] = {}

    def upsert(self, peer: PeerInfo) -> None:
        with self._lock:
            self._peers[peer.fingerprint] = peer

    def get(self, fingerprint: str) -> PeerInfo | None:
        with self._lock:
            return self._peers.get(fingerprint)

    def mode_of(self, fingerprint: str) -> str | None:
        peer = self.get(fingerprint)
        return peer.mode if peer else None

    def materials(self) -> dict[str, PublicMaterial]:
        with self._lock:
            return {fp: p.material for fp, p in self._peers.items()}

    def modes(self) -> dict[str, str]:
        with self._lock:
            return {fp: p.mode for fp, p in self._peers.items()}

    def all(self) -> list[PeerInfo]:
        with self._lock:
            return list(self._peers.values())

    def names(self) -> dict[str, str]:
        with self._lock:
            return {p.name: fp for fp, p in self._peers.items()}

    def directory(self) -> dict[str, Project]:
        """Federation-wide project view: the union of every peer's data-source
        metadata grouped by project code."""
        with self._lock:
            peers = list(self._peers.values())
        refs: dict[str, set[tuple[str, str]]] = {}
        names: dict[str, set[str]] = {}
        for peer in peers:
            for code, name in peer.projects:
                names.setdefault(code, set()).add(name)
            for ds in peer.datasources:
                for code in ds.project_codes:
                    refs.setdefault(code, set()).add((peer.fingerprint, ds.data_source_id))
        directory = {}
        for code, ref_set in refs.items():
            name = min(names.get(code, {code}))
            directory[code] = Project(code=code, name=name,
                                      data_source_refs=tuple(sorted(ref_set)))
        return directory


class ResourceStore:
    """Binary task outputs indexed by id, with a per-artifact sequence."""

    def __init__(self):
        self._lock = threading.Lock()
        self._by_id: dict[str, Resource] = {}
        self._by_key: dict[tuple[str, str, str], str] = {}
        self._seq: dict[str, int] = {}

    def add(self, artifact_id: str, task_id: str, name: str, data: bytes) -> Resource:
        with self._lock:
            key = (artifact_id, task_id, name)
            if key in self._by_key:  # idempotent re-upload
                return self._by_id[self._by_key[key]]
            seq = self._seq.get(artifact_id, 0) + 1
            self._seq[artifact_id] = seq
            resource = Resource(resource_id=new_id(), artifact_id=artifact_id,
                                task_id=task_id, name=name, data=data, created_seq=seq)
            self._by_id[resource.resource_id] = resource
            self._by_key[key] = resource.resource_id
            return resource

    def get(self, resource_id: str) -> Resource:
        with self._lock:
            resource = self._by_id.get(resource_id)
        if resource is None:
            raise UnknownResource(f"no resource {resource_id}")
        return resource

    def latest_by_name(self, artifact_id: str, task_ids: list[str]) -> dict[str, Resource]:
        with self._lock:
            picked: dict[str, Resource] = {}
            for resource in self._by_id.values():
                if resource.artifact_id != artifact_id or resource.task_id not in task_ids:
                    continue
                cur = picked.get(resource.name)
                if cur is None or resource.created_seq > cur.created_seq:
                    picked[resource.name] = resource
            return picked


# --------------------------------------------------------------------------
# the node
# --------------------------------------------------------------------------

class Node:
    def __init__(self, config: NodeConfig, identity: Identity | None = None,
                 instruction_registry: InstructionRegistry | None = None):
        self.config = config
        self.identity = identity or self._load_or_create_identity(config.private_key_file)
        self.registry = PeerRegistry()
        self.store = ResourceStore()
        self.scheduler: Scheduler | None = None
        self.instruction_registry = instruction_registry or default_registry(builtin_runners())
        self._workbenches: dict[str, PublicMaterial] = {}
        self._replay = ReplayCache()
        self._client_replay = ReplayCache()  # for responses we open as a client
        self._pool = ThreadPoolExecutor(max_workers=4,
                                        thread_name_prefix=f"exec-{config.name}")
        self._server: ThreadingHTTPServer | None = None
        self._threads: list[threading.Thread] = []
        self._stop = threading.Event()
        self._cancel_flags: dict[str, threading.Event] = {}
        self._cancel_lock = threading.Lock()
        self._fault: str | None = None  # harness failure injection
        self._reference_fp: str | None = None
        self._started = False

    # -- lifecycle -----------------------------------------------------------

    @staticmethod
    def _load_or_create_identity(path: str) -> Identity:
        if os.path.exists(path):
            return load_identity(path)
        identity = generate_identity()
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        save_identity(identity, path)
        return identity

    @property
    def fingerprint(self) -> str:
        return self.identity.fingerprint

    @property
    def name(self) -> str:
        return self.config.name

    @property
    def port(self) -> int | None:
        return self._server.server_address[1] if self._server else None

    @property
    def url(self) -> str | None:
        if self._server is None:
            return None
        if self.config.self_url:
            return self.config.self_url
        host = self.config.listen.rsplit(":", 1)[0]
        return f"http://{host}:{self.port}"

    def _check_datasources(self) -> None:
        for ds in self.config.datasources:
            if not os.path.exists(ds.path):
                raise DataSourceMissing(f"data source file {ds.path} does not exist")
            header = read_csv_header(ds.path)
            if header != ds.columns:
                raise ConfigInvalid(
                    f"data source '{ds.data_source_id}' header {list(header)} does not "
                    f"match the declared columns {list(ds.columns)}")

    def _self_peer(self) -> PeerInfo:
        return PeerInfo(name=self.name, mode=self.config.mode, url=self.url,
                        material=self.identity.public,
                        datasources=tuple(
                            DataSource(ds.data_source_id, "", ds.columns, ds.project_codes)
                            for ds in self.config.datasources),
                        projects=self.config.projects)

    def start(self) -> "Node":
        self._check_datasources()
        self.instruction_registry.freeze()
        if self.config.mode == "default":
            host, _, port = self.config.listen.rpartition(":")
            self._server = ThreadingHTTPServer((host, int(port)), _make_handler(self))
            self._server.daemon_threads = True
            self.scheduler = Scheduler(self.fingerprint, self.registry.mode_of,
                                       event_log=self._event_log_path(),
                                       task_timeout_s=self.config.task_timeout_s)
            self.registry.upsert(self._self_peer())
            self._spawn(self._server.serve_forever, "http")
            self._spawn(self._housekeeping_loop, "housekeeping")
            if self.config.reference_url:
                self._join(self.config.reference_url)
        else:
            self.registry.upsert(self._self_peer())
            self._join(self.config.reference_url)
            self._spawn(self._poll_loop, "poll")
        self._started = True
        logger.info("node %s up (%s mode) fingerprint=%s url=%s",
                    self.name, self.config.mode, self.fingerprint[:12], self.url)
        return self

    def _event_log_path(self) -> str | None:
        if self.config.event_log:
            return self.config.event_log
        key_dir = os.path.dirname(os.path.abspath(self.config.private_key_file))
        return os.path.join(key_dir, f"{self.name}.events.jsonl")

    def _spawn(self, target, label: str) -> None:
        thread = threading.Thread(target=target, name=f"{self.name}-{label}", daemon=True)
        thread.start()
        self._threads.append(thread)

    def stop(self) -> None:
        self._stop.set()
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
        self._pool.shutdown(wait=False, cancel_futures=True)

    # -- harness hooks ---------------------------------------------------------

    def inject_fault(self, fault: str) -> None:
        """Arm a one-shot failure for the next executed task:
        'task_exception' reports FAILED, 'crash_before_report' goes silent."""
        if fault not in ("task_exception", "crash_before_report"):
            raise ValueError(f"unknown fault {fault!r}")
        self._fault = fault

    # -- outbound helpers --------------------------------------------------------

    def _exchange(self, peer: PeerInfo, method: str, path: str, payload: dict) -> dict:
        return transport.exchange(method, peer.url, path, self.identity, peer.material,
                                  payload, replay=self._client_replay,
                                  initiator=self.fingerprint)

    def _join(self, reference_url: str) -> None:
        metadata = transport.fetch_public_metadata(reference_url)
        material = PublicMaterial.from_jsonable(metadata["keys"])
        self._reference_fp = material.fingerprint
        reference = PeerInfo(name=metadata.get("name", "?"), mode=metadata.get("mode", "default"),
                             url=reference_url, material=material)
        self.registry.upsert(reference)
        intro = {"keys": self.identity.public.to_jsonable(),
                 "kind": "node", **self._self_peer().to_record()}
        envelope = seal(self.identity, material, canonical.dumps(intro))
        transport.trace_event({"event": "send", "initiator": self.fingerprint,
                               "method": "POST", "route": "/node/join", "url": reference_url})
        status, body = transport.http_request(
            "POST", reference_url.rstrip("/") + "/node/join",
            canonical.dumps(envelope.to_jsonable()),
            {"Content-Type": "application/json"})
        doc = canonical.loads(body)
        if status >= 400:
            if isinstance(doc, dict) and "error" in doc:
                raise FleetError(f"join refused: {doc.get('detail', doc['error'])}")
            raise FleetError(f"join refused: HTTP {status}")
        reply = Envelope.from_jsonable(doc)
        plaintext, _ = open_envelope(self.identity, {material.fingerprint: material},
                                     reply, replay=self._client_replay)
        answer = canonical.loads(plaintext)
        for record in answer.get("peers", []):
            peer = PeerInfo.from_record(record)
            if peer.fingerprint != self.fingerprint:
                self.registry.upsert(peer)
        if answer.get("warning"):
            logger.warning("join warning from %s: %s", reference_url, answer["warning"])

    def _push_task(self, intent: DispatchIntent) -> None:
        if intent.target == self.fingerprint:
            self._enqueue_execution(intent.payload, scheduler_fp=self.fingerprint)
            return
        peer = self.registry.get(intent.target)
        if peer is None or peer.url is None:
            logger.warning("cannot push task to unreachable node %s", intent.target[:12])
            return
        try:
            self._exchange(peer, "POST", "/task/assign", intent.payload)
        except FleetError as exc:
            logger.warning("task push to %s failed: %s (will time out)", peer.name, exc)

    def _push_abort(self, notice: AbortNotice) -> None:
        self._apply_abort_locally(notice.to_jsonable())
        for fp in notice.push_targets:
            peer = self.registry.get(fp)
            if peer is None or peer.url is None:
                continue
            try:
                self._exchange(peer, "POST", "/task/abort", {"notice": notice.to_jsonable()})
            except FleetError as exc:
                logger.warning("abort push to %s failed: %s", peer.name, exc)

    def _deliver(self, outcome: UpdateOutcome | list[DispatchIntent]) -> None:
        intents = outcome if isinstance(outcome, list) else outcome.intents
        abort = None if isinstance(outcome, list) else outcome.abort
        for intent in intents:
            self._push_task(intent)
        if abort is not None:
            self._push_abort(abort)

    def _deliver_async(self, outcome) -> None:
        self._pool.submit(self._deliver, outcome)

    # -- execution ----------------------------------------------------------------

    def _cancel_flag(self, task_id: str) -> threading.Event:
        with self._cancel_lock:
            return self._cancel_flags.setdefault(task_id, threading.Event())

    def _apply_abort_locally(self, notice: dict) -> None:
        with self._cancel_lock:
            for tid in notice.get("cancelled", []):
                self._cancel_flags.setdefault(tid, threading.Event()).set()
        artifact_id = notice.get("artifact_id")
        logger.info("node %s observed abort of artifact %s", self.name,
                    str(artifact_id)[:12])

    def _report_update(self, scheduler_fp: str, task_id: str, status: TaskStatus,
                       resources: list[dict] | None = None, reason: str | None = None) -> None:
        body = {"reason": reason, "resources": resources or [],
                "status": status.value, "task_id": task_id}
        if scheduler_fp == self.fingerprint:
            outcome = self.scheduler.task_update(task_id, status, resources or [], reason)
            self._deliver_async(outcome)
            return
        peer = self.registry.get(scheduler_fp)
        self._exchange(peer, "POST", "/task/update", body)

    def _upload_resource(self, scheduler_fp: str, artifact_id: str, task_id: str,
                         name: str, data: bytes) -> dict:
        if scheduler_fp == self.fingerprint:
            return self.store.add(artifact_id, task_id, name, data).descriptor()
        peer = self.registry.get(scheduler_fp)
        payload = {"artifact_id": artifact_id, "data": base64.b64encode(data).decode("ascii"),
                   "name": name, "task_id": task_id}
        return self._exchange(peer, "POST", "/resource", payload)

    def _make_input_fetcher(self, scheduler_fp: str) -> Callable:
        def fetch(inputs):
            out = []
            for descriptor in inputs:
                rid = descriptor["resource_id"]
                if scheduler_fp == self.fingerprint:
                    resource = self.store.get(rid)
                    data = resource.data
                else:
                    peer = self.registry.get(scheduler_fp)
                    doc = self._exchange(peer, "GET", f"/resource/{rid}", {})
                    data = base64.b64decode(doc["data"])
                out.append((descriptor.get("producer", ""), descriptor["name"], data))
            return out
        return fetch

    def _enqueue_execution(self, payload: dict, scheduler_fp: str) -> None:
        self._pool.submit(self._execute_payload, payload, scheduler_fp)

    def _execute_payload(self, payload: dict, scheduler_fp: str) -> None:
        try:
            task = parse_task(payload["task"])
            inputs = payload.get("inputs", [])
        except (FleetError, KeyError, TypeError) as exc:
            logger.error("node %s received an unusable task payload: %s", self.name, exc)
            return
        fault, self._fault = self._fault, None
        if fault == "crash_before_report":
            logger.warning("node %s injected crash: swallowing task %s",
                           self.name, task.task_id[:12])
            return
        flag = self._cancel_flag(task.task_id)
        transport.trace_event({"event": "exec", "fingerprint": self.fingerprint,
                               "kind": task.instruction.kind, "node": self.name,
                               "task": task.task_id})
        try:
            self._report_update(scheduler_fp, task.task_id, TaskStatus.RUNNING)
            if fault == "task_exception":
                self._report_update(scheduler_fp, task.task_id, TaskStatus.FAILED,
                                    reason="injected task exception")
                return
            ctx = ExecutionContext(
                self_fingerprint=self.fingerprint,
                datasources=self.config.datasources,
                fetch_inputs=self._make_input_fetcher(scheduler_fp),
                registry=self.instruction_registry,
                cancelled=flag.is_set,
            )
            result = run_task(task, inputs, ctx)
            if flag.is_set():
                logger.info("node %s dropped result of cancelled task %s",
                            self.name, task.task_id[:12])
                return
            if result.status is TaskStatus.COMPLETED:
                descriptors = [self._upload_resource(scheduler_fp, task.artifact_id,
                                                     task.task_id, draft.name, draft.data)
                               for draft in result.resources]
                self._report_update(scheduler_fp, task.task_id, TaskStatus.COMPLETED,
                                    descriptors)
            else:
                self._report_update(scheduler_fp, task.task_id, TaskStatus.FAILED,
                                    reason=result.reason)
        except FleetError as exc:
            logger.warning("node %s could not run/report task %s: %s",
                           self.name, task.task_id[:12], exc)

    # -- background loops ---------------------------------------------------------

    def _poll_loop(self) -> None:
        reference = lambda: self.registry.get(self._reference_fp)  # noqa: E731
        while not self._stop.wait(self.config.poll_interval_s):
            try:
                answer = self._exchange(reference(), "POST", "/task/poll", {"max_n": 16})
            except FleetError as exc:
                logger.debug("poll failed, retrying next tick: %s", exc)
                continue
            for notice in answer.get("aborts", []):
                self._apply_abort_locally(notice)
            for payload in answer.get("tasks", []):
                self._enqueue_execution(payload, scheduler_fp=self._reference_fp)

    def _housekeeping_loop(self) -> None:
        while not self._stop.wait(HOUSEKEEPING_INTERVAL_S):
            if self.scheduler is None:
                continue
            for outcome in self.scheduler.expire_overdue():
                self._deliver(outcome)

    # -- request handling -----------------------------------------------------------

    def _known_senders(self) -> dict[str, PublicMaterial]:
        known = self.registry.materials()
        known.update(self._workbenches)
        return known

    def _open_request(self, envelope_bytes: bytes, route: str,
                      method: str, bind: tuple[str, str] | None = None) -> tuple[str, dict]:
        try:
            envelope = Envelope.from_jsonable(canonical.loads(envelope_bytes))
        except MalformedDocument as exc:
            raise MalformedEnvelope(str(exc)) from exc
        plaintext, sender = open_envelope(self.identity, self._known_senders(),
                                          envelope, replay=self._replay)
        doc = canonical.loads(plaintext)
        if not isinstance(doc, dict):
            raise MalformedDocument("request payload must be an object")
        if bind is not None and (doc.get("method"), doc.get("path")) != bind:
            raise SignatureInvalid("request binding does not match the envelope payload")
        transport.trace_event({"event": "open", "method": method, "node": self.name,
                               "payload": doc, "recipient": self.fingerprint,
                               "route": route, "sender": sender})
        return sender, doc

    def _seal_to(self, sender: str, payload: dict) -> bytes:
        material = self._known_senders().get(sender)
        envelope = seal(self.identity, material, canonical.dumps(payload))
        return canonical.dumps(envelope.to_jsonable())

    # route table: (method, first segment) -> handler; handlers raise FleetError
    # and return (payload, sender) pairs.

    def handle_request(self, method: str, path: str, body: bytes,
                       headers: Mapping[str, str]) -> tuple[int, bytes, str]:
        """Returns (status, body, content_type). All errors are mapped here;
        anything that fails envelope open is a 401 with no state change."""
        segments = [s for s in path.split("/") if s]
        sender: str | None = None
        try:
            if method == "GET" and path == "/node/metadata":
                return 200, canonical.dumps(self._public_metadata()), "application/json"
            if method == "POST" and path == "/node/join":
                return self._wrap_intro(body, self._handle_join, "/node/join")
            if method == "POST" and path == "/workbench/connect":
                return self._wrap_intro(body, self._handle_connect, "/workbench/connect")
            envelope_bytes = body
            bind = None
            if method == "GET":
                header = headers.get("X-Fleet-Envelope", "")
                if not header:
                    raise MalformedEnvelope("GET requires an X-Fleet-Envelope header")
                try:
                    envelope_bytes = base64.b64decode(header)
                except Exception as exc:
                    raise MalformedEnvelope("X-Fleet-Envelope is not valid base64") from exc
                bind = (method, path)
            sender, doc = self._open_request(envelope_bytes, path, method, bind)
            payload = self._dispatch(method, path, segments, sender, doc)
            return 200, self._seal_to(sender, payload), "application/json"
        except EnvelopeError as exc:
            return 401, canonical.dumps(exc.to_payload()), "application/json"
        except FleetError as exc:
            if sender is not None and sender in self._known_senders():
                return exc.http_status, self._seal_to(sender, exc.to_payload()), "application/json"
            return exc.http_status, canonical.dumps(exc.to_payload()), "application/json"

    def _wrap_intro(self, body: bytes, handler, route: str) -> tuple[int, bytes, str]:
        try:
            envelope = Envelope.from_jsonable(canonical.loads(body))
        except MalformedDocument as exc:
            raise MalformedEnvelope(str(exc)) from exc
        plaintext, sender, material = open_introduction(self.identity, envelope,
                                                        replay=self._replay)
        doc = canonical.loads(plaintext)
        transport.trace_event({"event": "open", "method": "POST", "node": self.name,
                               "payload": doc, "recipient": self.fingerprint,
                               "route": route, "sender": sender})
        try:
            payload, status = handler(sender, material, doc), 200
        except FleetError as exc:
            payload, status = exc.to_payload(), exc.http_status
        reply = seal(self.identity, material, canonical.dumps(payload))
        return status, canonical.dumps(reply.to_jsonable()), "application/json"

    def _public_metadata(self) -> dict:
        return {"fingerprint": self.fingerprint, "keys": self.identity.public.to_jsonable(),
                "mode": self.config.mode, "name": self.name}

    def _require_peer(self, sender: str) -> PeerInfo:
        peer = self.registry.get(sender)
        if peer is None:
            raise Forbidden("sender is not a registered node")
        return peer

    def _require_workbench(self, sender: str) -> None:
        if sender not in self._workbenches:
            raise Forbidden("sender is not a connected workbench")

    def _require_scheduler(self) -> Scheduler:
        if self.scheduler is None:
            raise Forbidden("this node does not schedule")
        return self.scheduler

    def _dispatch(self, method: str, path: str, segments: list[str],
                  sender: str, doc: dict) -> dict:
        if method == "POST" and path == "/task/update":
            return self._handle_task_update(sender, doc)
        if method == "POST" and path == "/task/poll":
            return self._handle_poll(sender, doc)
        if method == "POST" and path == "/task/assign":
            return self._handle_assign(sender, doc)
        if method == "POST" and path == "/task/abort":
            return self._handle_abort(sender, doc)
        if method == "POST" and path == "/node/peer-update":
            return self._handle_peer_update(sender, doc)
        if method == "POST" and path == "/resource":
            return self._handle_resource_upload(sender, doc)
        if method == "GET" and len(segments) == 2 and segments[0] == "resource":
            return self._handle_resource_download(sender, segments[1])
        if method == "GET" and len(segments) == 3 and segments[:2] == ["workbench", "project"]:
            return self._handle_project(sender, segments[2])
        if method == "POST" and path == "/workbench/artifact":
            return self._handle_submit(sender, doc)
        if method == "GET" and len(segments) == 4 and segments[:2] == ["workbench", "artifact"]:
            if segments[3] == "status":
                return self._handle_status(sender, segments[2])
            if segments[3] == "latest":
                return self._handle_latest(sender, segments[2])
        raise UnknownRoute(f"no route for {method} {path}")

    # -- node-to-node handlers ---------------------------------------------------

    def _handle_join(self, sender: str, material: PublicMaterial, doc: dict) -> dict:
        record = dict(doc)
        record["keys"] = material.to_jsonable()
        peer = PeerInfo.from_record(record)
        if peer.fingerprint != sender:
            raise MalformedJoin("peer record keys do not match the envelope sender")
        warning = None
        existing = self.registry.names().get(peer.name)
        if existing is not None and existing != sender:
            warning = "duplicate_name"
        self.registry.upsert(peer)
        peers = [p.to_record() for p in sorted(self.registry.all(), key=lambda p: p.fingerprint)]
        directory = {code: project.to_jsonable()
                     for code, project in self.registry.directory().items()}
        self._pool.submit(self._notify_peers_of, peer)
        answer = {"accepted": True, "peers": peers, "projects": directory}
        if warning:
            answer["warning"] = warning
        return answer

    def _notify_peers_of(self, newcomer: PeerInfo) -> None:
        for peer in self.registry.all():
            if peer.fingerprint in (self.fingerprint, newcomer.fingerprint):
                continue
            if peer.mode != "default" or peer.url is None:
                continue
            try:
                self._exchange(peer, "POST", "/node/peer-update",
                               {"peer": newcomer.to_record()})
            except FleetError as exc:
                logger.debug("peer-update to %s failed: %s", peer.name, exc)

    def _handle_peer_update(self, sender: str, doc: dict) -> dict:
        self._require_peer(sender)
        peer = PeerInfo.from_record(doc.get("peer"))
        if peer.fingerprint != self.fingerprint:
            self.registry.upsert(peer)
        return {"accepted": True}

    def _handle_connect(self, sender: str, material: PublicMaterial, doc: dict) -> dict:
        self._workbenches[sender] = material
        return {"accepted": True, "fingerprint": self.fingerprint,
                "mode": self.config.mode, "name": self.name}

    def _handle_assign(self, sender: str, doc: dict) -> dict:
        peer = self._require_peer(sender)
        if peer.mode != "default":
            raise Forbidden("only default-mode nodes schedule tasks")
        self._enqueue_execution(doc, scheduler_fp=sender)
        return {"accepted": True}

    def _handle_abort(self, sender: str, doc: dict) -> dict:
        self._require_peer(sender)
        notice = doc.get("notice")
        if not isinstance(notice, dict):
            raise MalformedDocument("abort requires a 'notice' object")
        self._apply_abort_locally(notice)
        return {"accepted": True}

    def _handle_task_update(self, sender: str, doc: dict) -> dict:
        self._require_peer(sender)
        scheduler = self._require_scheduler()
        task_id = doc.get("task_id")
        status_name = doc.get("status")
        if status_name not in ("running", "completed", "failed"):
            raise MalformedDocument(f"executors may report running/completed/failed, got {status_name!r}")
        snapshotted = scheduler.task_assignee(task_id)
        if snapshotted is None:
            raise UnknownTask(f"no task {task_id}")
        if snapshotted != sender:
            raise NotYourTask("task update from a node that does not own the task")
        resources = doc.get("resources") or []
        outcome = scheduler.task_update(task_id, TaskStatus(status_name), resources,
                                        doc.get("reason"))
        self._deliver_async(outcome)
        return {"accepted": True}

    def _handle_poll(self, sender: str, doc: dict) -> dict:
        self._require_peer(sender)
        scheduler = self._require_scheduler()
        max_n = doc.get("max_n", 16)
        if not isinstance(max_n, int) or max_n < 1:
            max_n = 16
        tasks = scheduler.next_tasks_for(sender, max_n)
        if tasks:
            transport.trace_event({"event": "deliver", "node": self.name,
                                   "kinds": [t["task"]["instruction"]["kind"] for t in tasks],
                                   "to": sender})
        return {"aborts": scheduler.pending_aborts(sender), "tasks": tasks}

    def _handle_resource_upload(self, sender: str, doc: dict) -> dict:
        self._require_peer(sender)
        scheduler = self._require_scheduler()
        task_id = doc.get("task_id")
        assignee = scheduler.task_assignee(task_id)
        if assignee is None:
            raise Forbidden("resource upload for an unknown task")
        if assignee != sender:
            raise Forbidden("only the task's assignee may upload its resources")
        try:
            data = base64.b64decode(doc["data"])
            resource = self.store.add(doc["artifact_id"], task_id, doc["name"], data)
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedDocument(f"bad resource upload: {exc}") from exc
        return resource.descriptor()

    def _handle_resource_download(self, sender: str, resource_id: str) -> dict:
        resource = self.store.get(resource_id)
        scheduler = self._require_scheduler()
        allowed = False
        if sender in self._workbenches:
            allowed = scheduler.submitted_by(resource.artifact_id) == sender
        else:
            allowed = scheduler.is_dependent_assignee(resource.artifact_id,
                                                      resource.task_id, sender)
        if not allowed:
            raise Forbidden("requester may not read this resource")
        return {"artifact_id": resource.artifact_id, "created_seq": resource.created_seq,
                "data": base64.b64encode(resource.data).decode("ascii"),
                "name": resource.name, "resource_id": resource.resource_id,
                "task_id": resource.task_id}

    # -- workbench handlers ---------------------------------------------------------

    def _handle_project(self, sender: str, code: str) -> dict:
        self._require_workbench(sender)
        project = self.registry.directory().get(code)
        if project is None:
            raise UnknownProject(f"no project '{code}' in this federation")
        columns = set()
        for peer in self.registry.all():
            for ds in peer.datasources:
                if code in ds.project_codes:
                    columns.update(ds.columns)
        return {"code": project.code, "columns": sorted(columns),
                "data_source_count": len(project.data_source_refs),
                "holder_count": len(project.holders()), "name": project.name}

    def _handle_submit(self, sender: str, doc: dict) -> dict:
        self._require_workbench(sender)
        scheduler = self._require_scheduler()
        code = doc.get("project_code")
        project = self.registry.directory().get(code)
        if project is None:
            raise UnknownProject(f"no project '{code}' in this federation")
        instructions = parse_instructions(doc.get("instructions"))
        artifact = Artifact(artifact_id=new_id(), project_code=code,
                            instructions=instructions, submitted_by=sender)
        validate(artifact, self.instruction_registry)
        graph = compile(artifact, project, self.registry.modes(), self.fingerprint)
        intents = scheduler.submit(graph, artifact)
        self._deliver_async(intents)
        return {"artifact_id": artifact.artifact_id, "tasks": len(graph.tasks)}

    def _handle_status(self, sender: str, artifact_id: str) -> dict:
        self._require_workbench(sender)
        return self._require_scheduler().artifact_snapshot(artifact_id)

    def _handle_latest(self, sender: str, artifact_id: str) -> dict:
        self._require_workbench(sender)
        scheduler = self._require_scheduler()
        snapshot = scheduler.artifact_snapshot(artifact_id)
        if scheduler.submitted_by(artifact_id) != sender:
            raise Forbidden("only the submitting workbench may fetch results")
        if snapshot["status"] != "completed":
            raise NotReady(f"artifact is {snapshot['status']}"
                           + (f": {snapshot['reason']}" if snapshot.get("reason") else ""))
        finals = scheduler.final_task_ids(artifact_id)
        picked = self.store.latest_by_name(artifact_id, finals)
        return {"artifact_id": artifact_id,
                "resources": {name: base64.b64encode(r.data).decode("ascii")
                              for name, r in picked.items()}}


# --------------------------------------------------------------------------
# HTTP plumbing
# --------------------------------------------------------------------------

def _make_handler(node: Node):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):  # route access logs to our logger
            logger.debug("%s %s", node.name, fmt % args)

        def _serve(self, method: str) -> None:
            length = int(self.headers.get("Content-Length") or 0)
            body = self.rfile.read(length) if length else b""
            try:
                status, payload, content_type = node.handle_request(
                    method, self.path, body, dict(self.headers))
            except Exception:  # noqa: BLE001 - never let the handler thread die
                logger.exception("unhandled error in %s %s", method, self.path)
                status, payload, content_type = 500, b'{"error":"FleetError"}', "application/json"
            self.send_response(status)
            self.send_header("Content-Type", content_type)
            self.send_header("Content-Length", str(len(payload)))
            self.send_header("Connection", "close")
            self.end_headers()
            self.wfile.write(payload)

        def do_GET(self):
            self._serve("GET")

        def do_POST(self):
            self._serve("POST")

    return Handler


# --------------------------------------------------------------------------
# CLI
# --------------------------------------------------------------------------

def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="fleet-node",
                                     description="Run a federated data space node.")
    parser.add_argument("--config", required=True, help="path to the node config JSON")
    args = parser.parse_args(argv)
    logging.basicConfig(level=os.environ.get("FLEET_LOG", "INFO").upper(),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    config = load_config(args.config)
    node = Node(config)
    node.start()
    print(f"node {node.name} running ({config.mode} mode), fingerprint {node.fingerprint}",
          flush=True)
    if node.url:
        print(f"listening on {node.url}", flush=True)
    try:
        while True:
            time.sleep(1)
    except KeyboardInterrupt:
        node.stop()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
