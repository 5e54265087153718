"""Canonical byte encoding for values, state snapshots, and record payloads.

Deterministic and reference-preserving: within one encoding pass every
object is emitted once (tag, persistent id, content) and every later
occurrence is a pid pointer, so decoding reproduces the exact sharing
topology, cycles included. The layout is part of the on-disk format and
is documented bit-exactly in docs/format.md.
"""

from __future__ import annotations

import hashlib
import struct

from .errors import CorruptRecord, SerializeError, UnknownPid
from .heap import BLOB, LIST, MAP, Heap, Ref

FORMAT_VERSION = 1

TAG_INT = 0x01
TAG_FLOAT = 0x02
TAG_BOOL = 0x03
TAG_STR = 0x04
TAG_LIST = 0x05
TAG_MAP = 0x06
TAG_BLOB = 0x07
TAG_PIDPTR = 0x08

# (frame index, frame function name, binding name)
RootKey = tuple[int, str, str]


# --- varints ---------------------------------------------------------------

def write_uv(buf: bytearray, v: int) -> None:
    if v < 0:
        raise ValueError("uvarint cannot encode negatives")
    while True:
        b = v & 0x7F
        v >>= 7
        if v:
            buf.append(b | 0x80)
        else:
            buf.append(b)
            return


def read_uv(data, pos: int) -> tuple[int, int]:
    result = 0
    shift = 0
    while True:
        if pos >= len(data):
            raise CorruptRecord("truncated varint")
        b = data[pos]
        pos += 1
        result |= (b & 0x7F) << shift
        if not (b & 0x80):
            return result, pos
        shift += 7
        if shift > 70:
            raise CorruptRecord("varint too long")


def _zigzag(v: int) -> int:
    return (v << 1) ^ (v >> 63)


def _unzigzag(v: int) -> int:
    return (v >> 1) ^ -(v & 1)


def write_str(buf: bytearray, s: str) -> None:
    raw = s.encode("utf-8")
    write_uv(buf, len(raw))
    buf.extend(raw)


def read_str(data, pos: int) -> tuple[str, int]:
    n, pos = read_uv(data, pos)
    if pos + n > len(data):
        raise CorruptRecord("truncated string")
    try:
        return bytes(data[pos:pos + n]).decode("utf-8"), pos + n
    except UnicodeDecodeError as e:
        raise CorruptRecord(f"invalid utf-8: {e}") from None


# --- persistent ids ----------------------------------------------------------

class PidMap:
    """ObjectId -> persistent id, assigned on first persistence, never reused."""

    def __init__(self, next_pid: int = 1):
        self.by_oid: dict[int, int] = {}
        self.next_pid = next_pid

    def pid_for(self, oid: int) -> int:
        pid = self.by_oid.get(oid)
        if pid is None:
            pid = self.next_pid
            self.next_pid += 1
            self.by_oid[oid] = pid
        return pid

    def register(self, oid: int, pid: int) -> None:
        self.by_oid[oid] = pid
        if pid >= self.next_pid:
            self.next_pid = pid + 1


# --- encoding ----------------------------------------------------------------

class ValueEncoder:
    """One encoding pass; `emitted` tracks pids already written so shared
    objects encode once."""

    def __init__(self, heap: Heap, pid_map: PidMap):
        self.heap = heap
        self.pid_map = pid_map
        self.emitted: set[int] = set()

    def encode_value(self, buf: bytearray, value) -> None:
        t = type(value)
        if t is bool:
            buf.append(TAG_BOOL)
            buf.append(1 if value else 0)
        elif t is int:
            buf.append(TAG_INT)
            write_uv(buf, _zigzag(value) & ((1 << 64) - 1))
        elif t is float:
            buf.append(TAG_FLOAT)
            buf.extend(struct.pack("<d", value))
        elif t is str:
            buf.append(TAG_STR)
            write_str(buf, value)
        elif t is Ref:
            self._encode_object(buf, value.oid)
        else:
            raise SerializeError(None, f"unsupported value type {t.__name__}")

    def _encode_object(self, buf: bytearray, oid: int) -> None:
        pid = self.pid_map.pid_for(oid)
        if pid in self.emitted:
            buf.append(TAG_PIDPTR)
            write_uv(buf, pid)
            return
        self.emitted.add(pid)
        node = self.heap.node(oid)
        if node.kind == LIST:
            buf.append(TAG_LIST)
            write_uv(buf, pid)
            write_uv(buf, len(node.data))
            for item in node.data:
                self.encode_value(buf, item)
        elif node.kind == MAP:
            buf.append(TAG_MAP)
            write_uv(buf, pid)
            write_uv(buf, len(node.data))
            for key, item in node.data.items():
                write_str(buf, key)
                self.encode_value(buf, item)
        else:
            buf.append(TAG_BLOB)
            write_uv(buf, pid)
            write_uv(buf, len(node.data))
            buf.extend(node.data)

    def encode_node_shallow(self, oid: int) -> bytes:
        """Encode one node with child references as pid pointers; used for
        object-granular delta records."""
        buf = bytearray()
        node = self.heap.node(oid)
        pid = self.pid_map.pid_for(oid)
        if node.kind == LIST:
            buf.append(TAG_LIST)
            write_uv(buf, pid)
            write_uv(buf, len(node.data))
            for item in node.data:
                self._encode_shallow_value(buf, item)
        elif node.kind == MAP:
            buf.append(TAG_MAP)
            write_uv(buf, pid)
            write_uv(buf, len(node.data))
            for key, item in node.data.items():
                write_str(buf, key)
                self._encode_shallow_value(buf, item)
        else:
            buf.append(TAG_BLOB)
            write_uv(buf, pid)
            write_uv(buf, len(node.data))
            buf.extend(node.data)
        return bytes(buf)

    def _encode_shallow_value(self, buf: bytearray, value) -> None:
        if type(value) is Ref:
            buf.append(TAG_PIDPTR)
            write_uv(buf, self.pid_map.pid_for(value.oid))
        else:
            self.encode_value(buf, value)


def encode_binding_token(heap: Heap, pid_map: PidMap, value) -> bytes:
    """A root binding's value as a scalar encoding or a pid pointer."""
    buf = bytearray()
    if type(value) is Ref:
        buf.append(TAG_PIDPTR)
        write_uv(buf, pid_map.pid_for(value.oid))
    else:
        ValueEncoder(heap, pid_map).encode_value(buf, value)
    return bytes(buf)


def iter_roots(view):
    """Deterministic root enumeration: frames bottom-up, bindings in
    insertion order."""
    for fidx, (fname, bindings, _cursor) in enumerate(view.frames):
        for name, value in bindings.items():
            yield (fidx, fname, name), value


def encode_fragments(view, pid_map: PidMap, fault=None) -> dict[RootKey, bytes]:
    """Per-root byte fragments sharing one emission pass: an object's full
    encoding lives in the first root that reaches it."""
    encoder = ValueEncoder(view.heap, pid_map)
    fragments: dict[RootKey, bytes] = {}
    for root, value in iter_roots(view):
        if fault is not None:
            fault(root)
        buf = bytearray()
        encoder.encode_value(buf, value)
        fragments[root] = bytes(buf)
    return fragments


def encode_frames_struct(view) -> bytes:
    """Frame-stack structure: names, binding order, cursor paths."""
    buf = bytearray()
    write_uv(buf, len(view.frames))
    for fname, bindings, cursor in view.frames:
        write_str(buf, fname)
        write_uv(buf, len(bindings))
        for name in bindings:
            write_str(buf, name)
        write_uv(buf, len(cursor))
        for block_id, offset, done, total in cursor:
            write_uv(buf, block_id)
            write_uv(buf, offset)
            write_uv(buf, done)
            write_uv(buf, total)
    return bytes(buf)


def decode_frames_struct(data, pos: int):
    nframes, pos = read_uv(data, pos)
    frames = []
    for _ in range(nframes):
        fname, pos = read_str(data, pos)
        nbind, pos = read_uv(data, pos)
        names = []
        for _ in range(nbind):
            name, pos = read_str(data, pos)
            names.append(name)
        nentries, pos = read_uv(data, pos)
        cursor = []
        for _ in range(nentries):
            block_id, pos = read_uv(data, pos)
            offset, pos = read_uv(data, pos)
            done, pos = read_uv(data, pos)
            total, pos = read_uv(data, pos)
            cursor.append([block_id, offset, done, total])
        frames.append((fname, names, cursor))
    return frames, pos


def encode_state_from_parts(view, fragments: dict[RootKey, bytes]) -> bytes:
    buf = bytearray()
    write_uv(buf, FORMAT_VERSION)
    write_uv(buf, view.rng_state[0])
    write_uv(buf, view.rng_state[1])
    buf.extend(encode_frames_struct(view))
    for frag in fragments.values():
        write_uv(buf, len(frag))
        buf.extend(frag)
    return bytes(buf)


def encode_state(view, pid_map: PidMap | None = None, fault=None) -> bytes:
    """Full-state canonical bytes: rng, frame structure, and every root's
    fragment in enumeration order. With a fresh PidMap the pids become a
    canonical relabeling by first-visit order."""
    if pid_map is None:
        pid_map = PidMap()
    return encode_state_from_parts(view, encode_fragments(view, pid_map, fault))


def state_fingerprint(view) -> bytes:
    """128-bit digest of observable state, independent of ObjectId numbering."""
    return hashlib.blake2b(encode_state(view, PidMap()), digest_size=16).digest()


# --- decoding ----------------------------------------------------------------

class _PendingRef:
    __slots__ = ("pid",)

    def __init__(self, pid: int):
        self.pid = pid


class StateBuilder:
    """Rebuilds heap objects from canonical bytes. Known pids are updated in
    place (preserving identity for existing referrers); unknown pid pointers
    become pending slots patched in finalize()."""

    def __init__(self, heap: Heap | None = None, pid_to_oid: dict[int, int] | None = None):
        self.heap = heap if heap is not None else Heap()
        self.pid_to_oid = pid_to_oid if pid_to_oid is not None else {}
        self.pending: list[tuple[int, object, int]] = []  # (oid, slot, pid)

    def decode_value(self, data, pos: int):
        if pos >= len(data):
            raise CorruptRecord("truncated value")
        tag = data[pos]
        pos += 1
        if tag == TAG_INT:
            raw, pos = read_uv(data, pos)
            return _unzigzag(raw), pos
        if tag == TAG_FLOAT:
            if pos + 8 > len(data):
                raise CorruptRecord("truncated float")
            return struct.unpack("<d", bytes(data[pos:pos + 8]))[0], pos + 8
        if tag == TAG_BOOL:
            if pos >= len(data):
                raise CorruptRecord("truncated bool")
            return data[pos] != 0, pos + 1
        if tag == TAG_STR:
            return read_str(data, pos)
        if tag == TAG_PIDPTR:
            pid, pos = read_uv(data, pos)
            oid = self.pid_to_oid.get(pid)
            if oid is not None:
                return Ref(oid), pos
            return _PendingRef(pid), pos
        if tag == TAG_LIST:
            pid, pos = read_uv(data, pos)
            oid = self._upsert(pid, LIST, [])
            count, pos = read_uv(data, pos)
            items = self.heap.objects[oid].data
            for i in range(count):
                value, pos = self.decode_value(data, pos)
                if isinstance(value, _PendingRef):
                    self.pending.append((oid, i, value.pid))
                    value = None
                items.append(value)
            return Ref(oid), pos
        if tag == TAG_MAP:
            pid, pos = read_uv(data, pos)
            oid = self._upsert(pid, MAP, {})
            count, pos = read_uv(data, pos)
            entries = self.heap.objects[oid].data
            for _ in range(count):
                key, pos = read_str(data, pos)
                value, pos = self.decode_value(data, pos)
                if isinstance(value, _PendingRef):
                    self.pending.append((oid, key, value.pid))
                    value = None
                entries[key] = value
            return Ref(oid), pos
        if tag == TAG_BLOB:
            pid, pos = read_uv(data, pos)
            length, pos = read_uv(data, pos)
            if pos + length > len(data):
                raise CorruptRecord("truncated blob")
            oid = self._upsert(pid, BLOB, bytearray(data[pos:pos + length]))
            return Ref(oid), pos + length
        raise CorruptRecord(f"unknown value tag 0x{tag:02x}")

    def _upsert(self, pid: int, kind: str, fresh_data) -> int:
        oid = self.pid_to_oid.get(pid)
        if oid is None:
            oid = self.heap.alloc(kind, fresh_data)
            self.pid_to_oid[pid] = oid
            return oid
        node = self.heap.objects.get(oid)
        if node is None:
            raise CorruptRecord(f"pid {pid} maps to a dropped object")
        if node.kind != kind:
            raise CorruptRecord(f"pid {pid} changed kind {node.kind} -> {kind}")
        node.data = fresh_data
        return oid

    def finalize(self) -> None:
        for oid, slot, pid in self.pending:
            target = self.pid_to_oid.get(pid)
            if target is None or target not in self.heap.objects:
                raise UnknownPid(f"pid {pid} referenced but never defined")
            node = self.heap.objects[oid]
            node.data[slot] = Ref(target)
        self.pending.clear()


class DecodedState:
    """Mutable materialization target shared by checkpoint decode and delta
    application."""

    def __init__(self):
        self.heap = Heap()
        self.frames: list[tuple[str, dict, list]] = []
        self.rng_state: tuple[int, int] = (0, 0)
        self.statement_index = 0
        self.pid_to_oid: dict[int, int] = {}

    @property
    def oid_to_pid(self) -> dict[int, int]:
        return {oid: pid for pid, oid in self.pid_to_oid.items()}

    def view(self):
        from .vm import StateView

        return StateView(
            frames=[(fname, dict(bindings), tuple(tuple(e) for e in cursor))
                    for fname, bindings, cursor in self.frames],
            heap=self.heap,
            rng_state=self.rng_state,
            statement_index=self.statement_index,
        )

    def fingerprint(self) -> bytes:
        return state_fingerprint(self.view())

    def garbage_collect(self) -> set[int]:
        """Drop objects unreachable from the current bindings."""
        roots = [v.oid for _, bindings, _ in self.frames
                 for v in bindings.values() if type(v) is Ref]
        live = self.heap.reachable(roots)
        dead = set(self.heap.objects) - live
        for oid in dead:
            del self.heap.objects[oid]
        if dead:
            self.pid_to_oid = {pid: oid for pid, oid in self.pid_to_oid.items()
                               if oid not in dead}
        return dead


def decode_state(data) -> DecodedState:
    """Decode a full-state canonical encoding (checkpoint body)."""
    state = DecodedState()
    pos = 0
    fmt, pos = read_uv(data, pos)
    if fmt != FORMAT_VERSION:
        raise CorruptRecord(f"unsupported state format {fmt}")
    seed, pos = read_uv(data, pos)
    draws, pos = read_uv(data, pos)
    state.rng_state = (seed, draws)
    frames_struct, pos = decode_frames_struct(data, pos)
    builder = StateBuilder(state.heap, state.pid_to_oid)
    for fname, names, cursor in frames_struct:
        bindings: dict = {}
        for name in names:
            frag_len, pos = read_uv(data, pos)
            end = pos + frag_len
            if end > len(data):
                raise CorruptRecord("truncated fragment")
            value, pos = builder.decode_value(data, pos)
            if pos != end:
                raise CorruptRecord("fragment length mismatch")
            if isinstance(value, _PendingRef):
                raise CorruptRecord("forward pid pointer at root in checkpoint")
            bindings[name] = value
        state.frames.append((fname, bindings, cursor))
    if pos != len(data):
        raise CorruptRecord("trailing bytes after state encoding")
    builder.finalize()
    return state


# --- snapshot payload headers -------------------------------------------------

def encode_snapshot_header(buf: bytearray, statement_index: int, max_pid: int) -> None:
    write_uv(buf, FORMAT_VERSION)
    write_uv(buf, statement_index)
    write_uv(buf, max_pid)


def parse_snapshot_header(data) -> tuple[int, int, int]:
    """Returns (statement_index, max_pid, pos-after-header)."""
    pos = 0
    fmt, pos = read_uv(data, pos)
    if fmt != FORMAT_VERSION:
        raise CorruptRecord(f"unsupported payload format {fmt}")
    statement_index, pos = read_uv(data, pos)
    max_pid, pos = read_uv(data, pos)
    return statement_index, max_pid, pos
