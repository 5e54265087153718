"""Read path: materialize any persisted version, resume execution from it,
replay to an arbitrary statement, and diff versions.

Only statement-boundary states are materializable by construction —
capture runs between atomic statements, so no partial statement effect
ever reaches the store.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from . import lang
from .capture import CaptureConfig, CaptureSession
from .deltas import Materializer, decode_delta
from .encoding import DecodedState, PidMap, ValueEncoder, encode_binding_token
from .errors import (
    CorruptRecord,
    DigestMismatch,
    IoError,
    TargetUnreachable,
    UnknownVersion,
)
from .heap import Ref
from .store import RT_CHECKPOINT, Store, StoreSession
from .vm import VM, Frame


def _as_store(store, require_checkpoint: bool = True) -> Store:
    if isinstance(store, Store):
        return store
    return Store(store, require_checkpoint=require_checkpoint)


def materialize(store, version: int) -> Materializer:
    """Rebuild the full VM state at `version` by applying its checkpoint and
    delta chain. Sharing topology is exact; returns the materializer whose
    .state carries heap, frames, rng, statement index, and pid mappings."""
    store = _as_store(store)
    chain = store.read_chain(version)
    v0, kind0, payload0 = chain[0]
    if kind0 != RT_CHECKPOINT:
        raise CorruptRecord(f"chain head {v0} is not a checkpoint")
    mat = Materializer.from_checkpoint(payload0, v0)
    for v, _kind, payload in chain[1:]:
        mat.apply_delta(decode_delta(payload, v))
    return mat


def build_vm(program: lang.Program, state: DecodedState) -> VM:
    """Reconstruct a runnable VM from a materialized state."""
    vm = VM(program, state.rng_state[0])
    vm.rng.draw_count = state.rng_state[1]
    vm.heap = state.heap
    vm.frames = []
    for fname, bindings, cursor in state.frames:
        entries = []
        for block_id, offset, done, total in cursor:
            block = program.blocks.get(block_id)
            if block is None or offset > len(block.statements):
                raise CorruptRecord(
                    f"cursor entry ({block_id},{offset}) not addressable in program")
            entries.append([block_id, offset, done, total])
        vm.frames.append(Frame(fname, dict(bindings), entries))
    if not vm.frames:
        raise CorruptRecord("restored state has no frames")
    vm.statement_index = state.statement_index
    vm.statement_log = []
    vm.finished = _is_finished(vm)
    return vm


def _is_finished(vm: VM) -> bool:
    if len(vm.frames) > 1:
        return False
    cursor = vm.frames[0].cursor
    if len(cursor) != 1:
        return False
    block_id, offset, _done, _total = cursor[0]
    return offset >= len(vm.program.blocks[block_id].statements)


def check_source(store: Store, source: str | None) -> str:
    """Resolve and digest-check the program source against the stored one."""
    stored = store.program_source
    if stored is None:
        raise IoError("store holds no program source record")
    if source is None:
        return stored
    if lang.source_digest(source) != lang.source_digest(stored):
        raise DigestMismatch("program source differs from the stored one")
    return source


def resume(store_dir, version: int, source: str | None = None,
           capture_config: CaptureConfig | None = None) -> VM:
    """Materialize `version` and step to completion. With a capture config,
    capture continues into the same store; new deltas base on the resumed
    version and version numbers continue above the store's maximum."""
    store = _as_store(store_dir)
    src = check_source(store, source)
    program = lang.parse(src)
    mat = materialize(store, version)
    vm = build_vm(program, mat.state)
    if capture_config is None:
        return vm.run()
    session = StoreSession.open_existing(store.directory, fsync=capture_config.fsync)
    pid_map = PidMap(store.max_pid + 1)
    for pid, oid in mat.state.pid_to_oid.items():
        pid_map.register(oid, pid)
    cap = CaptureSession(session, capture_config,
                         resume_base=(version, vm.view(), pid_map))
    try:
        vm.run(hook=cap.hook)
    finally:
        cap.close()
        session.close()
    return vm


def _store_seed(store: Store) -> int:
    manifest = store.manifest()
    if manifest and isinstance(manifest.get("settings"), dict):
        seed = manifest["settings"].get("seed")
        if isinstance(seed, int):
            return seed
    checkpoints = [v for v in store.versions
                   if store.index[v].kind == RT_CHECKPOINT]
    if checkpoints:
        return materialize(store, checkpoints[0]).state.rng_state[0]
    raise IoError("cannot determine the run's seed (no manifest, no checkpoint)")


def replay_to_statement(store_dir, target: int, source: str | None = None) -> VM:
    """State after statement `target`, even if no snapshot was taken there:
    materialize the closest earlier version, then re-execute the gap."""
    if target < 0:
        raise TargetUnreachable(f"target {target} is negative")
    store = _as_store(store_dir, require_checkpoint=False)
    src = check_source(store, source)
    program = lang.parse(src)
    best = None
    if store.latest_checkpoint is not None:
        best = store.latest_at_or_before_statement(target)
    if best is None:
        vm = VM(program, _store_seed(store))
    else:
        vm = build_vm(program, materialize(store, best).state)
    while vm.statement_index < target:
        if vm.finished:
            raise TargetUnreachable(
                f"program ends at statement {vm.statement_index}, target {target}")
        vm.step()
    return vm


# --- version diffing --------------------------------------------------------------

@dataclass
class ObjectChange:
    pid: int
    kind: str
    bytes_before: int
    bytes_after: int


@dataclass
class DiffReport:
    v1: int
    v2: int
    added_roots: list[str] = field(default_factory=list)
    removed_roots: list[str] = field(default_factory=list)
    changed_roots: list[str] = field(default_factory=list)
    added_objects: list[int] = field(default_factory=list)
    removed_objects: list[int] = field(default_factory=list)
    changed_objects: list[ObjectChange] = field(default_factory=list)

    def is_empty(self) -> bool:
        return not (self.added_roots or self.removed_roots or self.changed_roots
                    or self.added_objects or self.removed_objects
                    or self.changed_objects)

    def to_dict(self) -> dict:
        return {
            "v1": self.v1,
            "v2": self.v2,
            "added_roots": self.added_roots,
            "removed_roots": self.removed_roots,
            "changed_roots": self.changed_roots,
            "added_objects": self.added_objects,
            "removed_objects": self.removed_objects,
            "changed_objects": [
                {"pid": c.pid, "kind": c.kind, "bytes_before": c.bytes_before,
                 "bytes_after": c.bytes_after}
                for c in self.changed_objects
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def to_text(self) -> str:
        if self.is_empty():
            return f"no changes between v{self.v1} and v{self.v2}\n"
        lines = [f"changes v{self.v1} -> v{self.v2}:"]
        for root in self.added_roots:
            lines.append(f"  + root {root}")
        for root in self.removed_roots:
            lines.append(f"  - root {root}")
        for root in self.changed_roots:
            lines.append(f"  ~ root {root}")
        for pid in self.added_objects:
            lines.append(f"  + object pid={pid}")
        for pid in self.removed_objects:
            lines.append(f"  - object pid={pid}")
        for c in self.changed_objects:
            lines.append(f"  ~ object pid={c.pid} ({c.kind}) "
                         f"{c.bytes_before} -> {c.bytes_after} bytes")
        return "\n".join(lines) + "\n"


def _root_label(root) -> str:
    fidx, fname, name = root
    return f"{fidx}:{fname}/{name}"


def _state_tokens(state: DecodedState):
    """(root -> token bytes, pid -> shallow node encoding) for comparison."""
    pid_map = PidMap()
    for pid, oid in state.pid_to_oid.items():
        pid_map.register(oid, pid)
    encoder = ValueEncoder(state.heap, pid_map)
    tokens = {}
    for fidx, (fname, bindings, _cursor) in enumerate(state.frames):
        for name, value in bindings.items():
            tokens[(fidx, fname, name)] = encode_binding_token(state.heap, pid_map, value)
    objects = {}
    kinds = {}
    for pid, oid in state.pid_to_oid.items():
        if oid in state.heap.objects:
            objects[pid] = encoder.encode_node_shallow(oid)
            kinds[pid] = state.heap.objects[oid].kind
    return tokens, objects, kinds


def diff_versions(store, v1: int, v2: int) -> DiffReport:
    """Pure comparator over two materialized versions: root binding changes
    plus object-level changes keyed by pid."""
    store = _as_store(store)
    for v in (v1, v2):
        if v not in store.index:
            raise UnknownVersion(v)
    s1 = materialize(store, v1).state
    s2 = materialize(store, v2).state
    t1, o1, k1 = _state_tokens(s1)
    t2, o2, k2 = _state_tokens(s2)
    report = DiffReport(v1, v2)
    for root in t2:
        if root not in t1:
            report.added_roots.append(_root_label(root))
        elif t1[root] != t2[root]:
            report.changed_roots.append(_root_label(root))
    for root in t1:
        if root not in t2:
            report.removed_roots.append(_root_label(root))
    for pid in sorted(o2):
        if pid not in o1:
            report.added_objects.append(pid)
        elif o1[pid] != o2[pid]:
            report.changed_objects.append(
                ObjectChange(pid, k2[pid], len(o1[pid]), len(o2[pid])))
    for pid in sorted(o1):
        if pid not in o2:
            report.removed_objects.append(pid)
    return report
