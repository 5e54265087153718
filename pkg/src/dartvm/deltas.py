"""Delta identification and encoding between consecutive snapshots.

Two strategies produce byte-wise different but state-wise identical deltas:

* serial — per-root fragments, byte-diffed; general fallback, compact when
  objects change wholesale.
* idgraph — object-granular diff driven by content fingerprints (mutation
  counters + child ids); precise when small parts of big structures change.

Applying a DeltaSet to the materialized base state yields exactly the
snapshot state, sharing topology included; that contract is the anchor
every test leans on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .encoding import (
    FORMAT_VERSION,
    PidMap,
    RootKey,
    StateBuilder,
    ValueEncoder,
    _PendingRef,
    decode_frames_struct,
    decode_state,
    encode_binding_token,
    encode_fragments,
    encode_frames_struct,
    encode_snapshot_header,
    encode_state_from_parts,
    iter_roots,
    parse_snapshot_header,
    read_str,
    read_uv,
    write_str,
    write_uv,
)
from .errors import BaseMismatch, CorruptRecord, UnknownPid
from .heap import Ref

SERIAL = "serial"
IDGRAPH = "idgraph"

_REC_WRITE_VAR = 0x11
_REC_DELETE_VAR = 0x12
_REC_WRITE_OBJ = 0x13
_REC_DELETE_OBJ = 0x14
_REC_BIND_VAR = 0x15
_REC_RNG = 0x16
_REC_CURSOR = 0x17

_STRATEGY_CODE = {SERIAL: 1, IDGRAPH: 2}
_STRATEGY_NAME = {1: SERIAL, 2: IDGRAPH}


# --- records ----------------------------------------------------------------

@dataclass
class WriteVar:
    root: RootKey
    fragment: bytes


@dataclass
class DeleteVar:
    root: RootKey


@dataclass
class WriteObj:
    pid: int
    encoded: bytes


@dataclass
class DeleteObj:
    pid: int


@dataclass
class BindVar:
    root: RootKey
    token: bytes


@dataclass
class DeltaSet:
    version: int
    base_version: int
    statement_index: int
    strategy: str
    records: list = field(default_factory=list)
    rng_state: tuple[int, int] = (0, 0)
    frames_struct: bytes = b""
    max_pid: int = 0

    def write_records(self):
        return [r for r in self.records if isinstance(r, (WriteVar, WriteObj, BindVar))]

    def delete_records(self):
        return [r for r in self.records if isinstance(r, (DeleteVar, DeleteObj))]

    def payload_bytes(self) -> int:
        return len(encode_delta(self))


# --- snapshot artifacts -------------------------------------------------------

@dataclass
class SerialSnapshot:
    fragments: dict[RootKey, bytes]
    frames_struct: bytes
    rng_state: tuple[int, int]
    statement_index: int


@dataclass
class GraphSnapshot:
    """The ID graph: one node per reachable object, direct-reference edges,
    plus root binding tokens for diffing."""

    nodes: dict[int, bytes]                  # oid -> content fingerprint
    children: dict[int, tuple[int, ...]]     # oid -> direct reference edges
    bindings: dict[RootKey, bytes]           # root -> canonical value token
    oid_pid: dict[int, int]                  # oid -> pid at snapshot time
    frames_struct: bytes
    rng_state: tuple[int, int]
    statement_index: int


def serialize_state(view, pid_map: PidMap, fault=None) -> SerialSnapshot:
    """Approach 1: every root's closure as a byte fragment (shared objects
    encoded once, in the first root that reaches them)."""
    fragments = encode_fragments(view, pid_map, fault)
    return SerialSnapshot(fragments, encode_frames_struct(view), view.rng_state,
                          view.statement_index)


def build_id_graph(view, pid_map: PidMap) -> GraphSnapshot:
    """Approach 2: fingerprint every reachable object; assigns pids so that
    diffs can reference unchanged objects."""
    heap = view.heap
    roots = [v.oid for _, bindings, _ in view.frames
             for v in bindings.values() if type(v) is Ref]
    nodes: dict[int, bytes] = {}
    children: dict[int, tuple[int, ...]] = {}
    stack = list(dict.fromkeys(roots))
    while stack:
        oid = stack.pop()
        if oid in nodes:
            continue
        nodes[oid] = heap.fingerprint(oid)
        pid_map.pid_for(oid)
        kids = tuple(heap.node(oid).children())
        children[oid] = kids
        for kid in kids:
            if kid not in nodes:
                stack.append(kid)
    bindings = {root: encode_binding_token(heap, pid_map, value)
                for root, value in iter_roots(view)}
    oid_pid = {oid: pid_map.by_oid[oid] for oid in nodes}
    return GraphSnapshot(nodes, children, bindings, oid_pid,
                         encode_frames_struct(view), view.rng_state,
                         view.statement_index)


# --- diffing ------------------------------------------------------------------

def diff_serialized(prev: SerialSnapshot | None, cur: SerialSnapshot,
                    version: int, base_version: int, max_pid: int) -> DeltaSet:
    """New/changed fragments become writes, missing roots become deletes;
    byte-identical fragments produce no record."""
    records: list = []
    prev_frags = prev.fragments if prev is not None else {}
    for root in prev_frags:
        if root not in cur.fragments:
            records.append(DeleteVar(root))
    for root, frag in cur.fragments.items():
        if prev_frags.get(root) != frag:
            records.append(WriteVar(root, frag))
    return DeltaSet(version, base_version, cur.statement_index, SERIAL, records,
                    cur.rng_state, cur.frames_struct, max_pid)


def diff_id_graph(prev: GraphSnapshot | None, cur: GraphSnapshot, heap,
                  pid_map: PidMap, version: int, base_version: int) -> DeltaSet:
    """New/modified nodes become object writes, vanished nodes object
    deletes; binding changes become bind records. Unchanged objects are
    referenced by pid only."""
    records: list = []
    prev_nodes = prev.nodes if prev is not None else {}
    prev_bindings = prev.bindings if prev is not None else {}
    for oid in prev_nodes:
        if oid not in cur.nodes:
            records.append(DeleteObj(prev.oid_pid[oid]))
    encoder = ValueEncoder(heap, pid_map)
    for oid, fp in cur.nodes.items():
        if prev_nodes.get(oid) != fp:
            records.append(WriteObj(cur.oid_pid[oid], encoder.encode_node_shallow(oid)))
    for root in prev_bindings:
        if root not in cur.bindings:
            records.append(DeleteVar(root))
    for root, token in cur.bindings.items():
        if prev_bindings.get(root) != token:
            records.append(BindVar(root, token))
    return DeltaSet(version, base_version, cur.statement_index, IDGRAPH, records,
                    cur.rng_state, cur.frames_struct, pid_map.next_pid - 1)


# --- wire codec ----------------------------------------------------------------

def _write_root(buf: bytearray, root: RootKey) -> None:
    write_uv(buf, root[0])
    write_str(buf, root[1])
    write_str(buf, root[2])


def _read_root(data, pos: int) -> tuple[RootKey, int]:
    fidx, pos = read_uv(data, pos)
    fname, pos = read_str(data, pos)
    name, pos = read_str(data, pos)
    return (fidx, fname, name), pos


def encode_delta(delta: DeltaSet) -> bytes:
    buf = bytearray()
    encode_snapshot_header(buf, delta.statement_index, delta.max_pid)
    write_uv(buf, delta.base_version)
    write_uv(buf, _STRATEGY_CODE[delta.strategy])
    write_uv(buf, len(delta.records) + 2)  # + rng + cursor
    for rec in delta.records:
        t = type(rec)
        if t is WriteVar:
            buf.append(_REC_WRITE_VAR)
            _write_root(buf, rec.root)
            write_uv(buf, len(rec.fragment))
            buf.extend(rec.fragment)
        elif t is DeleteVar:
            buf.append(_REC_DELETE_VAR)
            _write_root(buf, rec.root)
        elif t is WriteObj:
            buf.append(_REC_WRITE_OBJ)
            write_uv(buf, rec.pid)
            write_uv(buf, len(rec.encoded))
            buf.extend(rec.encoded)
        elif t is DeleteObj:
            buf.append(_REC_DELETE_OBJ)
            write_uv(buf, rec.pid)
        elif t is BindVar:
            buf.append(_REC_BIND_VAR)
            _write_root(buf, rec.root)
            write_uv(buf, len(rec.token))
            buf.extend(rec.token)
        else:
            raise TypeError(f"unknown record type {t.__name__}")
    buf.append(_REC_RNG)
    write_uv(buf, delta.rng_state[0])
    write_uv(buf, delta.rng_state[1])
    buf.append(_REC_CURSOR)
    write_uv(buf, len(delta.frames_struct))
    buf.extend(delta.frames_struct)
    return bytes(buf)


def decode_delta(payload, version: int) -> DeltaSet:
    statement_index, max_pid, pos = parse_snapshot_header(payload)
    base_version, pos = read_uv(payload, pos)
    strategy_code, pos = read_uv(payload, pos)
    strategy = _STRATEGY_NAME.get(strategy_code)
    if strategy is None:
        raise CorruptRecord(f"unknown strategy code {strategy_code}")
    nrecords, pos = read_uv(payload, pos)
    records: list = []
    rng_state = None
    frames_struct = None
    for _ in range(nrecords):
        if pos >= len(payload):
            raise CorruptRecord("truncated delta records")
        tag = payload[pos]
        pos += 1
        if tag == _REC_WRITE_VAR:
            root, pos = _read_root(payload, pos)
            n, pos = read_uv(payload, pos)
            if pos + n > len(payload):
                raise CorruptRecord("truncated fragment")
            records.append(WriteVar(root, bytes(payload[pos:pos + n])))
            pos += n
        elif tag == _REC_DELETE_VAR:
            root, pos = _read_root(payload, pos)
            records.append(DeleteVar(root))
        elif tag == _REC_WRITE_OBJ:
            pid, pos = read_uv(payload, pos)
            n, pos = read_uv(payload, pos)
            if pos + n > len(payload):
                raise CorruptRecord("truncated object record")
            records.append(WriteObj(pid, bytes(payload[pos:pos + n])))
            pos += n
        elif tag == _REC_DELETE_OBJ:
            pid, pos = read_uv(payload, pos)
            records.append(DeleteObj(pid))
        elif tag == _REC_BIND_VAR:
            root, pos = _read_root(payload, pos)
            n, pos = read_uv(payload, pos)
            if pos + n > len(payload):
                raise CorruptRecord("truncated binding token")
            records.append(BindVar(root, bytes(payload[pos:pos + n])))
            pos += n
        elif tag == _REC_RNG:
            seed, pos = read_uv(payload, pos)
            draws, pos = read_uv(payload, pos)
            rng_state = (seed, draws)
        elif tag == _REC_CURSOR:
            n, pos = read_uv(payload, pos)
            if pos + n > len(payload):
                raise CorruptRecord("truncated cursor record")
            frames_struct = bytes(payload[pos:pos + n])
            pos += n
        else:
            raise CorruptRecord(f"unknown record tag 0x{tag:02x}")
    if pos != len(payload):
        raise CorruptRecord("trailing bytes after delta records")
    if rng_state is None or frames_struct is None:
        raise CorruptRecord("delta missing rng or cursor record")
    return DeltaSet(version, base_version, statement_index, strategy, records,
                    rng_state, frames_struct, max_pid)


def encode_checkpoint(view, pid_map: PidMap, statement_index: int,
                      fault=None) -> tuple[bytes, SerialSnapshot]:
    """Checkpoint payload: header + full-state canonical bytes. Returns the
    serial artifacts from the same encoding pass so a session can diff
    against them without re-serializing."""
    fragments = encode_fragments(view, pid_map, fault)
    snap = SerialSnapshot(fragments, encode_frames_struct(view), view.rng_state,
                          view.statement_index)
    buf = bytearray()
    encode_snapshot_header(buf, statement_index, pid_map.next_pid - 1)
    buf.extend(encode_state_from_parts(view, fragments))
    return bytes(buf), snap


# --- materialization -----------------------------------------------------------

class Materializer:
    """Rebuilds states by applying a checkpoint and then delta sets in base
    order. Owns a private DecodedState."""

    def __init__(self, state, version: int):
        self.state = state
        self.version = version

    @classmethod
    def from_checkpoint(cls, payload, version: int) -> "Materializer":
        statement_index, _max_pid, pos = parse_snapshot_header(payload)
        state = decode_state(memoryview(payload)[pos:])
        state.statement_index = statement_index
        return cls(state, version)

    def apply_delta(self, delta: DeltaSet) -> None:
        if delta.base_version != self.version:
            raise BaseMismatch(
                f"delta {delta.version} expects base {delta.base_version}, "
                f"state is at {self.version}")
        state = self.state
        builder = StateBuilder(state.heap, state.pid_to_oid)
        updates: dict[RootKey, object] = {}
        deleted_roots: set[RootKey] = set()
        bind_tokens: list[tuple[RootKey, bytes]] = []
        for rec in delta.records:
            t = type(rec)
            if t is WriteVar:
                value, end = builder.decode_value(rec.fragment, 0)
                if end != len(rec.fragment):
                    raise CorruptRecord("fragment length mismatch")
                # a _PendingRef here is resolved after all records are staged
                updates[rec.root] = value
            elif t is WriteObj:
                value, end = builder.decode_value(rec.encoded, 0)
                if end != len(rec.encoded):
                    raise CorruptRecord("object record length mismatch")
                if not isinstance(value, Ref):
                    raise CorruptRecord("object record did not decode to an object")
            elif t is DeleteObj:
                oid = state.pid_to_oid.pop(rec.pid, None)
                if oid is None:
                    raise UnknownPid(f"delete of unknown pid {rec.pid}")
                state.heap.objects.pop(oid, None)
            elif t is DeleteVar:
                deleted_roots.add(rec.root)
            elif t is BindVar:
                bind_tokens.append((rec.root, rec.token))
        builder.finalize()  # raises UnknownPid on dangling references
        for root, token in bind_tokens:
            value, end = builder.decode_value(token, 0)
            if end != len(token):
                raise CorruptRecord("binding token length mismatch")
            if isinstance(value, _PendingRef):
                raise UnknownPid(f"binding references unknown pid {value.pid}")
            updates[root] = value
        for root, value in updates.items():
            if isinstance(value, _PendingRef):
                oid = state.pid_to_oid.get(value.pid)
                if oid is None:
                    raise UnknownPid(f"root references unknown pid {value.pid}")
                updates[root] = Ref(oid)

        # rebuild frames from the authoritative structure record
        frames_struct, _ = decode_frames_struct(delta.frames_struct, 0)
        old: dict[RootKey, object] = {}
        for fidx, (fname, bindings, _cursor) in enumerate(state.frames):
            for name, value in bindings.items():
                old[(fidx, fname, name)] = value
        new_frames: list[tuple[str, dict, list]] = []
        for fidx, (fname, names, cursor) in enumerate(frames_struct):
            bindings = {}
            for name in names:
                root = (fidx, fname, name)
                if root in deleted_roots:
                    raise CorruptRecord(f"root {root} both deleted and present")
                if root in updates:
                    bindings[name] = updates[root]
                elif root in old:
                    bindings[name] = old[root]
                else:
                    raise CorruptRecord(f"root {root} has no value in delta or base")
            new_frames.append((fname, bindings, cursor))
        state.frames = new_frames
        state.rng_state = delta.rng_state
        state.statement_index = delta.statement_index
        state.garbage_collect()
        self.version = delta.version


# --- strategy selection ----------------------------------------------------------

class AutoSelector:
    """Hysteresis controller for Auto mode: starts on idgraph; after each
    window of 8 snapshots compares idgraph delta bytes against the estimated
    serial bytes of the changed roots and switches at 0.9 / 0.5."""

    WINDOW = 8
    TO_SERIAL = 0.9
    TO_IDGRAPH = 0.5

    def __init__(self):
        self.mode = IDGRAPH
        self._idgraph_bytes = 0
        self._serial_bytes = 0
        self._count = 0

    def observe(self, idgraph_bytes: int, serial_bytes: int) -> str:
        self._idgraph_bytes += idgraph_bytes
        self._serial_bytes += serial_bytes
        self._count += 1
        if self._count >= self.WINDOW:
            ratio = self._idgraph_bytes / max(1, self._serial_bytes)
            if self.mode == IDGRAPH and ratio > self.TO_SERIAL:
                self.mode = SERIAL
            elif self.mode == SERIAL and ratio < self.TO_IDGRAPH:
                self.mode = IDGRAPH
            self._idgraph_bytes = 0
            self._serial_bytes = 0
            self._count = 0
        return self.mode


def choose_strategy(config_strategy: str, selector: AutoSelector | None) -> str:
    if config_strategy in (SERIAL, IDGRAPH):
        return config_strategy
    if selector is None:
        return IDGRAPH
    return selector.mode


def tainted_roots(view, graph: GraphSnapshot, changed_oids: set[int]) -> set[RootKey]:
    """Roots whose closure intersects the changed object set (reverse
    reachability over the graph's edges)."""
    if not changed_oids:
        return set()
    parents: dict[int, list[int]] = {}
    for oid, kids in graph.children.items():
        for kid in kids:
            parents.setdefault(kid, []).append(oid)
    tainted = set(changed_oids & set(graph.nodes))
    stack = list(tainted)
    while stack:
        for parent in parents.get(stack.pop(), ()):
            if parent not in tainted:
                tainted.add(parent)
                stack.append(parent)
    out: set[RootKey] = set()
    for root, value in iter_roots(view):
        if type(value) is Ref and value.oid in tainted:
            out.add(root)
    return out
