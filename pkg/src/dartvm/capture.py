"""Snapshot capture: triggering, delta computation, failsafe, persistence.

The capture hook runs on the VM thread between statements. Delta
computation is synchronous (the view references live objects); only store
I/O runs on the background writer, which consumes fully-serialized
payloads from a bounded queue and preserves version order. Every failure
path — serializer fault, full queue, store write error — converts to a
skipped snapshot; nothing ever unwinds into the VM.

Deltas are always computed against the last snapshot believed persisted;
when an ack reports a failure the base rolls back to the last confirmed
version, so no persisted delta ever references a missing snapshot. Three
consecutive failures force a full checkpoint attempt.
"""

from __future__ import annotations

import json
import math
import queue
import threading
import time
from dataclasses import dataclass, field

from . import store as storemod
from .deltas import (
    IDGRAPH,
    SERIAL,
    AutoSelector,
    GraphSnapshot,
    SerialSnapshot,
    build_id_graph,
    choose_strategy,
    diff_id_graph,
    diff_serialized,
    encode_checkpoint,
    encode_delta,
    serialize_state,
    tainted_roots,
)
from .encoding import PidMap, ValueEncoder, state_fingerprint
from .errors import DartError, SerializeError
from .rng import MASK64, draw_at, mix64
from .vm import VM, StateView


# --- configuration -----------------------------------------------------------

@dataclass
class EveryKStatements:
    k: int


@dataclass
class EveryTMillis:
    t: int


@dataclass
class FaultPlan:
    """Deterministic fault injection, keyed by (seed, stream, version)."""

    serialize_p: float = 0.0
    store_p: float = 0.0
    seed: int = 0

    def _fires(self, stream: int, version: int, p: float) -> bool:
        if p <= 0.0:
            return False
        u = draw_at(mix64(self.seed ^ stream) & MASK64, version) / 2.0 ** 64
        return u < p

    def serialize_fires(self, version: int) -> bool:
        return self._fires(0x5E71A117E, version, self.serialize_p)

    def store_fires(self, version: int) -> bool:
        return self._fires(0x57013EF17, version, self.store_p)


@dataclass
class CaptureConfig:
    trigger: EveryKStatements | EveryTMillis = field(
        default_factory=lambda: EveryKStatements(10))
    strategy: str = "auto"  # serial | idgraph | auto
    overhead_budget: float | None = None  # rho; None disables adaptation
    checkpoint_every: int = 16
    queue_depth: int = 4  # 0 = unbounded (no backpressure; tests/benches)
    record_fingerprints: bool = False
    faults: FaultPlan | None = None
    fsync: str = "always"
    clock_ns: object = time.monotonic_ns

    def __post_init__(self):
        if isinstance(self.trigger, EveryKStatements) and self.trigger.k < 1:
            raise ValueError("trigger k must be >= 1")
        if isinstance(self.trigger, EveryTMillis) and self.trigger.t < 1:
            raise ValueError("trigger t must be >= 1 ms")
        if self.overhead_budget is not None and not (0.0 < self.overhead_budget <= 1.0):
            raise ValueError("overhead budget must be in (0, 1]")
        if self.strategy not in (SERIAL, IDGRAPH, "auto"):
            raise ValueError(f"unknown strategy {self.strategy!r}")


# --- stats --------------------------------------------------------------------

@dataclass
class SnapshotStat:
    version: int
    statement_index: int
    micros: int = 0
    bytes: int = 0
    persisted: bool | None = None  # None = persist pending
    reason: str | None = None
    kind: str | None = None  # checkpoint | delta
    strategy: str | None = None
    fingerprint: str | None = None

    def to_json(self) -> str:
        out = {
            "version": self.version,
            "statement_index": self.statement_index,
            "micros": self.micros,
            "bytes": self.bytes,
            "persisted": bool(self.persisted),
            "reason": self.reason,
        }
        if self.kind:
            out["kind"] = self.kind
            out["strategy"] = self.strategy
        if self.fingerprint:
            out["fingerprint"] = self.fingerprint
        return json.dumps(out, sort_keys=True)


_EWMA_ALPHA = 0.3


class CaptureStats:
    def __init__(self):
        self.entries: list[SnapshotStat] = []
        self.ewma_cost_micros: float | None = None
        self.vm_micros_total = 0
        self.vm_statements = 0
        self.snapshots_taken = 0
        self.snapshots_skipped = 0

    def observe_cost(self, micros: float) -> None:
        if self.ewma_cost_micros is None:
            self.ewma_cost_micros = float(micros)
        else:
            self.ewma_cost_micros = (_EWMA_ALPHA * micros
                                     + (1.0 - _EWMA_ALPHA) * self.ewma_cost_micros)

    @property
    def total_capture_micros(self) -> int:
        return sum(e.micros for e in self.entries)

    def persisted_versions(self) -> list[int]:
        return [e.version for e in self.entries if e.persisted]

    def to_jsonl(self) -> str:
        return "".join(e.to_json() + "\n" for e in self.entries)


def adapt_period(stats: CaptureStats, config: CaptureConfig) -> int | None:
    """Deterministic sampling controller: k = ceil(c / (rho * v)) clamped to
    [1, 1e6] for statement triggers; t = ceil(c_ms / rho) clamped to
    [1 ms, 600 s] for time triggers. c is the EWMA capture cost per
    snapshot, v the mean VM time per statement."""
    rho = config.overhead_budget
    if rho is None or stats.ewma_cost_micros is None:
        return None
    c = stats.ewma_cost_micros
    if isinstance(config.trigger, EveryKStatements):
        if stats.vm_statements <= 0 or stats.vm_micros_total <= 0:
            return None
        v = stats.vm_micros_total / stats.vm_statements
        k = math.ceil(c / (rho * v))
        return min(max(k, 1), 10 ** 6)
    t = math.ceil((c / 1000.0) / rho)
    return min(max(t, 1), 600_000)


# --- failsafe wrapper -----------------------------------------------------------

@dataclass
class GuardOutcome:
    ok: bool
    value: object = None
    reason: str | None = None


def guard(f) -> GuardOutcome:
    """Run a capture-side computation; never let a failure unwind into the
    VM. Returns the result or a captured failure reason."""
    try:
        return GuardOutcome(True, f())
    except Exception as e:  # noqa: BLE001 - the contract is "never unwind"
        return GuardOutcome(False, reason=f"{type(e).__name__}: {e}")


def collect_frames(vm: VM) -> StateView:
    """Boundary snapshot of the frame stack: binding lists copied, object
    payloads referenced."""
    return vm.view()


# --- background writer ------------------------------------------------------------

@dataclass
class PersistJob:
    version: int
    kind: int  # storemod.RT_DELTA | RT_CHECKPOINT
    payload: bytes
    base_version: int | None
    statement_index: int
    max_pid: int


_STOP = object()


class PersistWorker(threading.Thread):
    """Single writer draining the capture queue in order. Refuses to persist
    a delta whose base never persisted, preserving chain well-foundedness
    even under injected faults."""

    def __init__(self, session: storemod.StoreSession, jobs: queue.Queue,
                 faults: FaultPlan | None, initial_persisted: set[int]):
        super().__init__(name="dart-persist", daemon=True)
        self.session = session
        self.jobs = jobs
        self.faults = faults
        self.persisted: set[int] = set(initial_persisted)
        self.results: dict[int, tuple[bool, str | None, int]] = {}
        self._lock = threading.Lock()
        self.killed = False

    def run(self) -> None:
        while True:
            job = self.jobs.get()
            if job is _STOP:
                return
            result = self._process(job)
            with self._lock:
                self.results[job.version] = result

    def _process(self, job: PersistJob) -> tuple[bool, str | None, int]:
        if self.killed:
            return False, "killed", 0
        if job.base_version is not None and job.base_version not in self.persisted:
            return False, f"base {job.base_version} not persisted", 0
        if self.faults is not None and self.faults.store_fires(job.version):
            return False, "store-fault(injected)", 0
        try:
            nbytes = self.session.append_snapshot(
                job.version, job.kind, job.payload, job.base_version,
                job.statement_index, job.max_pid)
        except DartError as e:
            return False, f"{type(e).__name__}: {e}", 0
        self.persisted.add(job.version)
        return True, None, nbytes

    def drain_results(self) -> dict[int, tuple[bool, str | None, int]]:
        with self._lock:
            out = self.results
            self.results = {}
        return out


# --- the capture session ------------------------------------------------------------

class CaptureSession:
    """Wires trigger, delta computation, failsafe policy, and the writer."""

    def __init__(self, store_session: storemod.StoreSession, config: CaptureConfig,
                 resume_base: tuple[int, StateView, PidMap] | None = None):
        self.store_session = store_session
        self.config = config
        self.stats = CaptureStats()
        self.pid_map = PidMap()
        self.selector = AutoSelector() if config.strategy == "auto" else None
        self.next_version = store_session.latest_version + 1
        self.base_version: int | None = None
        self.base_serial: SerialSnapshot | None = None
        self.base_graph: GraphSnapshot | None = None
        self.confirmed: tuple[int | None, SerialSnapshot | None, GraphSnapshot | None] = (
            None, None, None)
        self.last_persisted_version: int | None = None
        self.root_size_table: dict = {}
        self.consecutive_failures = 0
        self.force_checkpoint = False
        self.next_checkpoint_at = self.next_version
        self.last_snapshot_stmt = 0
        self.last_clock = config.clock_ns()
        self._pending_stats: dict[int, SnapshotStat] = {}
        self._pending_artifacts: dict[int, tuple[SerialSnapshot | None, GraphSnapshot | None]] = {}
        self.jobs: queue.Queue = queue.Queue(maxsize=config.queue_depth)
        initial_persisted: set[int] = set()
        if resume_base is not None:
            version, view, pid_map = resume_base
            self.pid_map = pid_map
            self.last_snapshot_stmt = view.statement_index
            self.base_version = version
            self.base_serial = serialize_state(view, pid_map)
            self.base_graph = build_id_graph(view, pid_map)
            self.root_size_table = {root: len(frag)
                                    for root, frag in self.base_serial.fragments.items()}
            self.confirmed = (version, self.base_serial, self.base_graph)
            self.last_persisted_version = version
            self.next_checkpoint_at = version + config.checkpoint_every
            initial_persisted.add(version)
        self.worker = PersistWorker(store_session, self.jobs, config.faults,
                                    initial_persisted)
        self.worker.start()
        self.closed = False

    # -- trigger --------------------------------------------------------------

    def hook(self, vm: VM) -> None:
        self.maybe_snapshot(vm)

    def maybe_snapshot(self, vm: VM) -> None:
        """Evaluate the trigger and, when it fires, compute and enqueue a
        snapshot. Failures never propagate to the caller."""
        if self._should_fire(vm):
            self._attempt(vm)

    def _should_fire(self, vm: VM) -> bool:
        trig = self.config.trigger
        if isinstance(trig, EveryKStatements):
            return vm.statement_index - self.last_snapshot_stmt >= trig.k
        return self.config.clock_ns() - self.last_clock >= trig.t * 1_000_000

    # -- snapshot attempt ---------------------------------------------------------

    def _attempt(self, vm: VM) -> None:
        t0 = time.monotonic_ns()
        self._drain_acks()
        version = self.next_version
        self.next_version += 1
        view = collect_frames(vm)
        self.last_snapshot_stmt = view.statement_index
        self.last_clock = self.config.clock_ns()
        stat = SnapshotStat(version=version, statement_index=view.statement_index)
        outcome = guard(lambda: self._build_snapshot(view, version))
        if not outcome.ok:
            stat.persisted = False
            stat.reason = outcome.reason
            self._note_failure()
        else:
            kind, payload, serial_snap, graph_snap, base_version, strategy = outcome.value
            stat.kind = "checkpoint" if kind == storemod.RT_CHECKPOINT else "delta"
            stat.strategy = strategy
            stat.bytes = len(payload)
            if self.config.record_fingerprints:
                stat.fingerprint = state_fingerprint(view).hex()
            job = PersistJob(version, kind, payload, base_version,
                             view.statement_index, self.pid_map.next_pid - 1)
            try:
                self.jobs.put_nowait(job)
            except queue.Full:
                stat.persisted = False
                stat.reason = "backpressure"
                self._note_failure()
            else:
                self._pending_stats[version] = stat
                self._pending_artifacts[version] = (serial_snap, graph_snap)
                self.base_version = version
                self.base_serial = serial_snap
                self.base_graph = graph_snap
                if kind == storemod.RT_CHECKPOINT:
                    self.next_checkpoint_at = version + self.config.checkpoint_every
                    self.force_checkpoint = False
                time.sleep(0)  # yield so the writer is not starved of the GIL
        stat.micros = (time.monotonic_ns() - t0) // 1000
        self.stats.entries.append(stat)
        self.stats.observe_cost(stat.micros)
        self._maybe_adapt(vm)

    def _build_snapshot(self, view: StateView, version: int):
        faults = self.config.faults
        if faults is not None and faults.serialize_fires(version):
            raise SerializeError(None, "injected serializer fault")
        strategy = choose_strategy(self.config.strategy, self.selector)
        auto = self.config.strategy == "auto"
        need_checkpoint = (
            self.base_version is None
            or self.force_checkpoint
            or version >= self.next_checkpoint_at
            or (strategy == SERIAL and self.base_serial is None)
            or (strategy == IDGRAPH and self.base_graph is None)
        )
        if need_checkpoint:
            payload, serial_snap = encode_checkpoint(view, self.pid_map,
                                                     view.statement_index)
            graph_snap = build_id_graph(view, self.pid_map)
            self.root_size_table = {root: len(frag)
                                    for root, frag in serial_snap.fragments.items()}
            return (storemod.RT_CHECKPOINT, payload, serial_snap, graph_snap,
                    None, strategy)
        if strategy == SERIAL:
            cur = serialize_state(view, self.pid_map)
            delta = diff_serialized(self.base_serial, cur, version,
                                    self.base_version, self.pid_map.next_pid - 1)
            payload = encode_delta(delta)
            graph_snap = None
            if auto:
                graph_snap = build_id_graph(view, self.pid_map)
                self.selector.observe(
                    self._estimate_idgraph_bytes(view, graph_snap), len(payload))
            return (storemod.RT_DELTA, payload, cur, graph_snap, self.base_version,
                    SERIAL)
        cur_graph = build_id_graph(view, self.pid_map)
        delta = diff_id_graph(self.base_graph, cur_graph, view.heap, self.pid_map,
                              version, self.base_version)
        payload = encode_delta(delta)
        if auto:
            self.selector.observe(
                len(payload), self._estimate_serial_bytes(view, cur_graph))
        return (storemod.RT_DELTA, payload, None, cur_graph, self.base_version,
                IDGRAPH)

    def _changed_oids(self, cur_graph: GraphSnapshot) -> set[int]:
        prev = self.base_graph.nodes if self.base_graph is not None else {}
        return {oid for oid, fp in cur_graph.nodes.items() if prev.get(oid) != fp}

    def _estimate_serial_bytes(self, view, cur_graph: GraphSnapshot) -> int:
        """What a serial delta would roughly cost: the last full encoding's
        fragment sizes of every root whose closure touches a changed object.
        Roots newer than the last full encoding are not in the table and
        count zero (biases toward serial, the safe fallback)."""
        changed = self._changed_oids(cur_graph)
        total = 0
        for root in tainted_roots(view, cur_graph, changed):
            total += self.root_size_table.get(root, 0)
        return total

    def _estimate_idgraph_bytes(self, view, cur_graph: GraphSnapshot) -> int:
        changed = self._changed_oids(cur_graph)
        encoder = ValueEncoder(view.heap, self.pid_map)
        return sum(len(encoder.encode_node_shallow(oid)) + 8 for oid in changed)

    # -- ack processing -------------------------------------------------------------

    def _note_failure(self) -> None:
        self.stats.snapshots_skipped += 1
        self.consecutive_failures += 1
        if self.consecutive_failures >= 3:
            self.force_checkpoint = True

    def _drain_acks(self) -> None:
        results = self.worker.drain_results()
        for version in sorted(results):
            ok, reason, nbytes = results[version]
            stat = self._pending_stats.pop(version, None)
            serial_snap, graph_snap = self._pending_artifacts.pop(version, (None, None))
            if ok:
                if stat is not None:
                    stat.persisted = True
                    stat.bytes = nbytes
                self.stats.snapshots_taken += 1
                self.confirmed = (version, serial_snap, graph_snap)
                self.last_persisted_version = version
                self.consecutive_failures = 0
            else:
                if stat is not None:
                    stat.persisted = False
                    stat.reason = reason
                self._note_failure()
                # the optimistic base may now reference a dead snapshot
                if self.base_version is not None and self.base_version >= version:
                    cv, cs, cg = self.confirmed
                    self.base_version = cv
                    self.base_serial = cs
                    self.base_graph = cg

    def flush_acks(self) -> None:
        """Block until every in-flight persist job is resolved. Used at
        shutdown and by tests that need deterministic ack visibility; the
        hot path never blocks on the writer."""
        while self._pending_stats:
            self._drain_acks()
            if not self._pending_stats:
                return
            if not self.worker.is_alive():
                self._drain_acks()
                return
            time.sleep(0.0002)

    def _maybe_adapt(self, vm: VM) -> None:
        if self.config.overhead_budget is None:
            return
        self.stats.vm_micros_total = vm.exec_ns // 1000
        self.stats.vm_statements = vm.statement_index
        new_param = adapt_period(self.stats, self.config)
        if new_param is None:
            return
        if isinstance(self.config.trigger, EveryKStatements):
            self.config.trigger.k = new_param
        else:
            self.config.trigger.t = new_param

    # -- shutdown ---------------------------------------------------------------

    def close(self, write_stats: bool = True) -> None:
        """Drain the queue, stop the writer, finalize stats."""
        if self.closed:
            return
        self.closed = True
        self.jobs.put(_STOP)
        self.worker.join()
        self._drain_acks()
        if write_stats and not self.store_session.closed:
            path = self.store_session.directory / "stats.jsonl"
            path.write_text(self.stats.to_jsonl())

    def kill(self) -> None:
        """Simulate a process kill: queued-but-unwritten snapshots are lost,
        acked snapshots stay durable."""
        if self.closed:
            return
        self.closed = True
        self.worker.killed = True
        self.jobs.put(_STOP)
        self.worker.join()
        self._drain_acks()


# --- one-call orchestration ------------------------------------------------------------

@dataclass
class RunOutcome:
    vm: VM
    stats: CaptureStats
    persisted_versions: list[int]
    error: object = None


def run_with_capture(source: str, seed: int, store_dir, config: CaptureConfig,
                     meta: dict | None = None) -> RunOutcome:
    """Parse, execute under capture, close the store. VM errors are returned
    in the outcome (capture failures never change program behavior)."""
    from . import lang
    from .errors import VMError

    program = lang.parse(source)
    run_meta = {"seed": seed, "strategy": config.strategy}
    if meta:
        run_meta.update(meta)
    session = storemod.StoreSession.create(
        store_dir, lang.canonical_source(source), run_meta, fsync=config.fsync)
    vm = VM(program, seed)
    cap = CaptureSession(session, config)
    error = None
    try:
        vm.run(hook=cap.hook)
    except VMError as e:
        error = e
    finally:
        cap.close()
        session.close()
    return RunOutcome(vm, cap.stats, cap.stats.persisted_versions(), error)
