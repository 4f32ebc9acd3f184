"""Multi-node integration rig: spawn whole federations in one process (or as
separate node processes), drive the reference scenario end to end, inject
failures, and emit a machine-readable run report.

Scenario specs are JSON fixture files (see the scenarios/ directory). The
report path writes canonical JSON plus a delimited message-trace file and,
optionally, a rendered timeline figure.
"""

from __future__ import annotations

import argparse
import base64
import csv
import hashlib
import json
import logging
import os
import shutil
import socket
import subprocess
import sys
import tempfile
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

from . import canonical, transport, workbench
from .errors import ScenarioTimeout, SpawnFailed, Unreachable
from .forest import deserialize_forest
from .identity import generate_identity, save_identity
from .model import DataSource
from .node import Node, NodeConfig
from .rng import SplitMix64

logger = logging.getLogger(__name__)

DEFAULT_PROJECT_CODE = "p1"


# --------------------------------------------------------------------------
# scenario specs
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class FixtureSource:
    data_source_id: str
    project_codes: tuple[str, ...]
    csv_text: str

    @classmethod
    def from_jsonable(cls, doc: Mapping) -> "FixtureSource":
        codes = tuple(doc.get("project_codes", (DEFAULT_PROJECT_CODE,)))
        if "csv" in doc:
            text = doc["csv"]
        elif "synthetic" in doc:
            text = synthetic_csv(**doc["synthetic"])
        else:
            raise SpawnFailed("datasource fixture needs 'csv' text or a 'synthetic' block")
        return cls(data_source_id=doc["id"], project_codes=codes, csv_text=text)


@dataclass(frozen=True)
class PartySpec:
    name: str
    mode: str = "default"
    identity_seed: int | None = None
    datasources: tuple[FixtureSource, ...] = ()


@dataclass(frozen=True)
class FederationSpec:
    name: str
    parties: tuple[PartySpec, ...]
    entry_point: str
    projects: tuple[tuple[str, str], ...] = ((DEFAULT_PROJECT_CODE, DEFAULT_PROJECT_CODE),)
    poll_interval_s: float = 0.2
    task_timeout_s: float = 30.0

    def __post_init__(self):
        names = [p.name for p in self.parties]
        if len(set(names)) != len(names):
            raise SpawnFailed("duplicate party names in federation spec")
        if not any(p.mode == "default" for p in self.parties):
            raise SpawnFailed("a federation needs at least one default-mode party")
        entry = next((p for p in self.parties if p.name == self.entry_point), None)
        if entry is None:
            raise SpawnFailed(f"entry point '{self.entry_point}' is not a declared party")
        if entry.mode != "default":
            raise SpawnFailed("the entry point must run in default mode")


def parse_federation_spec(doc: Any) -> FederationSpec:
    if not isinstance(doc, Mapping):
        raise SpawnFailed("federation spec must be a JSON object")
    parties = tuple(
        PartySpec(name=p["name"], mode=p.get("mode", "default"),
                  identity_seed=p.get("identity_seed"),
                  datasources=tuple(FixtureSource.from_jsonable(d)
                                    for d in p.get("datasources", [])))
        for p in doc.get("parties", []))
    projects = tuple((pr["code"], pr.get("name", pr["code"]))
                     for pr in doc.get("projects", [{"code": DEFAULT_PROJECT_CODE}]))
    return FederationSpec(
        name=doc.get("name", "federation"),
        parties=parties,
        entry_point=doc["entry_point"],
        projects=projects,
        poll_interval_s=float(doc.get("poll_interval_s", 0.2)),
        task_timeout_s=float(doc.get("task_timeout_s", 30.0)),
    )


def load_federation_spec(path: str) -> FederationSpec:
    with open(path, "rb") as fh:
        return parse_federation_spec(canonical.loads(fh.read()))


def synthetic_csv(seed: int, rows: int, features: int = 2, classes: int = 2) -> str:
    """Deterministic toy dataset: feature cells are exact one-decimal values
    and the label is a noisy threshold rule, all drawn from one seeded stream."""
    rng = SplitMix64(seed)
    header = [f"f{j}" for j in range(features)] + ["target"]
    lines = [",".join(header)]
    for _ in range(rows):
        values = [rng.below(200) / 10 for _ in range(features)]
        score = values[0] + sum(values[1:]) / 2
        bucket = int(score // 7) % classes
        if rng.below(10) == 0:  # label noise
            bucket = (bucket + 1) % classes
        lines.append(",".join([repr(v) for v in values] + [chr(ord("A") + bucket)]))
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# federation lifecycle
# --------------------------------------------------------------------------

def _free_port() -> int:
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


def _wait_until(check: Callable[[], bool], timeout_s: float, what: str) -> None:
    deadline = time.monotonic() + timeout_s
    while time.monotonic() < deadline:
        if check():
            return
        time.sleep(0.05)
    raise SpawnFailed(f"timed out waiting for {what}")


class _NodeProcess:
    """Separate-process node handle exposing the same surface the harness
    needs from in-process nodes."""

    def __init__(self, name: str, config_path: str, url: str | None, workdir: str):
        self.name = name
        self.url = url
        log = open(os.path.join(workdir, f"{name}.log"), "wb")
        self._log = log
        self.proc = subprocess.Popen(
            [sys.executable, "-m", "fleet.node", "--config", config_path],
            stdout=log, stderr=subprocess.STDOUT)

    @property
    def port(self) -> int | None:
        return int(self.url.rsplit(":", 1)[1]) if self.url else None

    def inject_fault(self, fault: str) -> None:
        raise SpawnFailed("failure injection needs an in-process federation")

    def stop(self) -> None:
        self.proc.terminate()
        try:
            self.proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            self.proc.kill()
        self._log.close()


class Federation:
    def __init__(self, spec: FederationSpec, workdir: str, own_workdir: bool):
        self.spec = spec
        self.workdir = workdir
        self._own_workdir = own_workdir
        self.nodes: dict[str, Node | _NodeProcess] = {}
        self.entry_url: str | None = None
        self.trace: list[dict] = []
        self._trace_lock = threading.Lock()
        self._trace_seq = 0
        self._previous_hook = None

    def _record(self, event: dict) -> None:
        with self._trace_lock:
            self._trace_seq += 1
            self.trace.append({"seq": self._trace_seq, "t": time.time(), **event})

    def node(self, name: str) -> Node | _NodeProcess:
        return self.nodes[name]

    def context(self) -> workbench.Context:
        return workbench.connect(self.entry_url)

    def fingerprints(self) -> dict[str, str]:
        out = {}
        for name, node in self.nodes.items():
            if isinstance(node, Node):
                out[name] = node.fingerprint
        return out

    def teardown(self) -> None:
        transport.set_trace_hook(self._previous_hook)
        for node in self.nodes.values():
            try:
                node.stop()
            except Exception:  # noqa: BLE001 - teardown is best effort
                logger.exception("stopping %s failed", getattr(node, "name", "?"))
        self.nodes.clear()
        if self._own_workdir:
            shutil.rmtree(self.workdir, ignore_errors=True)

    def __enter__(self) -> "Federation":
        return self

    def __exit__(self, *exc) -> None:
        self.teardown()


def _write_party_files(spec: FederationSpec, party: PartySpec, workdir: str,
                       reference_url: str | None, listen_port: int | None) -> NodeConfig:
    party_dir = os.path.join(workdir, party.name)
    os.makedirs(party_dir, exist_ok=True)
    key_path = os.path.join(party_dir, "identity.json")
    if party.identity_seed is not None and not os.path.exists(key_path):
        save_identity(generate_identity(party.identity_seed), key_path)
    datasources = []
    for fixture in party.datasources:
        csv_path = os.path.join(party_dir, f"{fixture.data_source_id}.csv")
        with open(csv_path, "w", encoding="utf-8") as fh:
            fh.write(fixture.csv_text)
        header = tuple(fixture.csv_text.splitlines()[0].split(","))
        datasources.append(DataSource(data_source_id=fixture.data_source_id,
                                      path=csv_path, columns=header,
                                      project_codes=frozenset(fixture.project_codes)))
    listen = f"127.0.0.1:{listen_port}" if party.mode == "default" else None
    return NodeConfig(
        name=party.name, mode=party.mode, private_key_file=key_path,
        listen=listen,
        self_url=f"http://127.0.0.1:{listen_port}" if listen_port else None,
        reference_url=reference_url,
        datasources=tuple(datasources),
        projects=spec.projects,
        poll_interval_s=spec.poll_interval_s,
        task_timeout_s=spec.task_timeout_s,
    )


def _config_jsonable(config: NodeConfig) -> dict:
    doc = {
        "name": config.name, "mode": config.mode,
        "private_key_file": config.private_key_file,
        "datasources": [{"id": ds.data_source_id, "path": ds.path, "kind": ds.kind,
                         "columns": list(ds.columns),
                         "project_codes": sorted(ds.project_codes)}
                        for ds in config.datasources],
        "projects": [{"code": c, "name": n} for c, n in config.projects],
        "poll_interval_s": config.poll_interval_s,
        "task_timeout_s": config.task_timeout_s,
    }
    for key in ("listen", "self_url", "reference_url"):
        value = getattr(config, key)
        if value:
            doc[key] = value
    return doc


def spawn(spec: FederationSpec, separate_processes: bool = False,
          workdir: str | None = None) -> Federation:
    """Launch the federation: the entry-point node cold-starts first, every
    other party warm-starts against it in declaration order. Returns a handle
    whose teardown releases all ports and files."""
    own_workdir = workdir is None
    workdir = workdir or tempfile.mkdtemp(prefix=f"fleet-{spec.name}-")
    federation = Federation(spec, workdir, own_workdir)
    federation._previous_hook = transport._trace_hook
    transport.set_trace_hook(federation._record)
    try:
        entry_party = next(p for p in spec.parties if p.name == spec.entry_point)
        others = [p for p in spec.parties if p.name != spec.entry_point]
        order = [entry_party] + others

        for party in order:
            port = _free_port() if party.mode == "default" else None
            reference = None if party is entry_party else federation.entry_url
            config = _write_party_files(spec, party, workdir, reference, port)
            if separate_processes:
                config_path = os.path.join(workdir, party.name, "config.json")
                with open(config_path, "wb") as fh:
                    fh.write(canonical.dumps(_config_jsonable(config)))
                handle = _NodeProcess(party.name, config_path, config.self_url, workdir)
                if party.mode == "default":
                    _wait_until(lambda: _is_up(config.self_url), 20.0,
                                f"{party.name} to listen")
            else:
                handle = Node(config).start()
            federation.nodes[party.name] = handle
            if party is entry_party:
                federation.entry_url = handle.url

        expected_holders = {p.name for p in spec.parties if p.datasources}
        if expected_holders:
            _wait_until(lambda: _holders_registered(federation, len(expected_holders)),
                        20.0, "all data holders to join")
        return federation
    except Exception:
        federation.teardown()
        raise


def _is_up(url: str) -> bool:
    try:
        transport.fetch_public_metadata(url, timeout=2.0)
        return True
    except Unreachable:
        return False


def _holders_registered(federation: Federation, expected: int) -> bool:
    try:
        ctx = federation.context()
        descriptor = ctx.project(federation.spec.projects[0][0])
        return descriptor["holder_count"] >= expected
    except Exception:  # noqa: BLE001 - still booting
        return False


# --------------------------------------------------------------------------
# scenario driving
# --------------------------------------------------------------------------

STEP_LABELS = {
    1: "artifact submission",
    2: "task distribution",
    3: "local model transmission",
    4: "aggregation",
    5: "global model return",
}


def _label_step(event: dict, entry_name: str) -> int | None:
    kind = event.get("event")
    route = event.get("route", "")
    if kind == "open" and route == "/workbench/artifact" and event.get("method") == "POST":
        return 1
    if kind == "open" and route == "/task/assign":
        return 2
    if kind == "deliver":
        return 2
    if kind == "open" and route == "/resource" and event.get("method") == "POST":
        return 3
    if kind == "exec" and event.get("kind") == "aggregation":
        return 4
    if kind == "open" and route.endswith("/latest"):
        return 5
    return None


def default_plan(project_code: str = DEFAULT_PROJECT_CODE, n_estimators: int = 10,
                 test_percentage: float = 0.2, random_state: int = 42,
                 max_depth: int = 5, label: str = "target") -> workbench.Plan:
    """The reference pipeline as a plan: split/train/evaluate in parallel on
    every holder, collect, then merge on the scheduling node."""
    instructions = canonical.loads(canonical.dumps([
        {"kind": "parallel", "steps": [
            {"kind": "train_test",
             "query": {"transformers": [
                 {"kind": "federated_splitter", "label": label,
                  "random_state": random_state, "test_percentage": test_percentage}]},
             "model": {"kind": "random_forest", "max_depth": max_depth,
                       "n_estimators": n_estimators, "random_state": random_state,
                       "strategy": "merge"}},
            {"kind": "collect"}]},
        {"kind": "finalize", "steps": [{"kind": "aggregation", "strategy": "merge"}]},
    ]))
    from .model import parse_instructions
    return workbench.Plan(project_code=project_code,
                          instructions=parse_instructions(instructions))


def run_listing1(federation: Federation, plan: workbench.Plan | None = None,
                 timeout_s: float = 60.0) -> dict:
    """Drive a workbench through submit -> wait -> fetch and assemble the run
    report: artifact status, model bytes, per-step timings and the labeled
    message trace."""
    plan = plan or default_plan(federation.spec.projects[0][0])
    started = time.time()
    trace_start = len(federation.trace)
    ctx = federation.context()
    descriptor = ctx.project(plan.project_code)
    handle = ctx.submit(plan)
    submit_t = time.time()
    try:
        snapshot = ctx.wait(handle, timeout_s=timeout_s, poll_every_s=0.1)
    except ScenarioTimeout:
        snapshot = ctx.status(handle)
        snapshot["timed_out"] = True
    done_t = time.time()
    model_bytes = None
    if snapshot["status"] == "completed":
        resources = ctx.get_latest_resource(handle)
        model_bytes = resources.get("model")
    fetched_t = time.time()

    events = list(federation.trace[trace_start:])
    labeled = []
    step_first_seen: dict[int, float] = {}
    for event in events:
        step = _label_step(event, federation.spec.entry_point)
        row = dict(event)
        if step is not None:
            row["step"] = step
            step_first_seen.setdefault(step, event["t"])
        labeled.append(row)

    report = {
        "artifact_id": handle.artifact_id,
        "model_b64": base64.b64encode(model_bytes).decode("ascii") if model_bytes else None,
        "model_sha256": hashlib.sha256(model_bytes).hexdigest() if model_bytes else None,
        "project": descriptor,
        "scenario": federation.spec.name,
        "status": snapshot["status"],
        "steps": {str(k): {"label": STEP_LABELS[k],
                           "t_offset_s": round(step_first_seen[k] - started, 6)}
                  for k in sorted(step_first_seen)},
        "tasks": snapshot["tasks"],
        "timings_s": {"submit": round(submit_t - started, 6),
                      "terminal": round(done_t - started, 6),
                      "fetched": round(fetched_t - started, 6)},
        "trace": labeled,
    }
    if snapshot.get("reason"):
        report["reason"] = snapshot["reason"]
    return report


def inject_failure(federation: Federation, party: str, fault: str) -> None:
    """Arm a one-shot fault on a party's next task: 'task_exception' reports a
    failure, 'crash_before_report' swallows the task so the scheduler's
    delivery timeout has to catch it."""
    federation.node(party).inject_fault(fault)


# --------------------------------------------------------------------------
# report rendering
# --------------------------------------------------------------------------

def write_report(report: dict, out_dir: str, figures: bool = True) -> list[str]:
    """Write report.json (canonical), the model resource, the delimited trace,
    and optionally a rendered timeline figure. Returns the files written."""
    os.makedirs(out_dir, exist_ok=True)
    written = []

    report_path = os.path.join(out_dir, "report.json")
    with open(report_path, "wb") as fh:
        fh.write(canonical.dumps(report))
    written.append(report_path)

    if report.get("model_b64"):
        model_path = os.path.join(out_dir, "model.json")
        with open(model_path, "wb") as fh:
            fh.write(base64.b64decode(report["model_b64"]))
        written.append(model_path)

    trace_path = os.path.join(out_dir, "trace.csv")
    with open(trace_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seq", "t", "step", "event", "node", "sender_or_target",
                         "route_or_kind"])
        for event in report.get("trace", []):
            writer.writerow([
                event.get("seq"), f"{event.get('t', 0):.6f}", event.get("step", ""),
                event.get("event"),
                event.get("node") or event.get("initiator", ""),
                (event.get("sender") or event.get("to") or "")[:12],
                event.get("route") or event.get("kind", ""),
            ])
    written.append(trace_path)

    if figures:
        written.append(_render_timeline(report, os.path.join(out_dir, "timeline.png")))
    return written


def _render_timeline(report: dict, path: str) -> str:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    events = report.get("trace", [])
    if events:
        t0 = min(e["t"] for e in events)
    else:
        t0 = 0.0
    lanes: dict[str, int] = {}
    for event in events:
        actor = event.get("node") or event.get("initiator", "?")[:8]
        lanes.setdefault(actor, len(lanes))

    fig, ax = plt.subplots(figsize=(10, max(2.5, 0.6 * max(1, len(lanes)))))
    colors = {1: "tab:blue", 2: "tab:orange", 3: "tab:green", 4: "tab:red",
              5: "tab:purple", None: "lightgray"}
    seen_steps = set()
    for event in events:
        actor = event.get("node") or event.get("initiator", "?")[:8]
        step = event.get("step")
        label = None
        if step is not None and step not in seen_steps:
            seen_steps.add(step)
            label = f"({step}) {STEP_LABELS[step]}"
        ax.scatter(event["t"] - t0, lanes[actor], s=46 if step else 12,
                   color=colors.get(step, "lightgray"), zorder=3 if step else 2,
                   label=label)
    ax.set_yticks(list(lanes.values()), list(lanes.keys()))
    ax.set_xlabel("seconds since first message")
    ax.set_title(f"{report.get('scenario', 'run')}: {report.get('status')} "
                 f"(artifact {report.get('artifact_id', '')[:8]})")
    if seen_steps:
        ax.legend(loc="upper left", fontsize=8)
    ax.grid(axis="x", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


# --------------------------------------------------------------------------
# CLI
# --------------------------------------------------------------------------

def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="fleet-harness",
                                     description="Run federation scenarios end to end.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="spawn a federation, run the pipeline, write a report")
    p.add_argument("scenario", help="path to a scenario JSON file")
    p.add_argument("--out", required=True, help="directory for report artifacts")
    p.add_argument("--timeout", type=float, default=60.0)
    p.add_argument("--processes", action="store_true",
                   help="run each node as a separate OS process")
    p.add_argument("--no-figures", action="store_true",
                   help="skip rendering the timeline figure")
    args = parser.parse_args(argv)
    logging.basicConfig(level=os.environ.get("FLEET_LOG", "WARNING").upper())

    spec = load_federation_spec(args.scenario)
    with spawn(spec, separate_processes=args.processes) as federation:
        report = run_listing1(federation, timeout_s=args.timeout)
    files = write_report(report, args.out, figures=not args.no_figures)
    summary = {"scenario": spec.name, "status": report["status"],
               "model_sha256": report.get("model_sha256")}
    if report.get("model_b64"):
        forest = deserialize_forest(base64.b64decode(report["model_b64"]))
        summary["trees"] = len(forest.trees)
    print(json.dumps(summary, indent=2, sort_keys=True))
    for path in files:
        print(f"wrote {path}")
    return 0 if report["status"] == "completed" else 1


if __name__ == "__main__":
    raise SystemExit(main())
