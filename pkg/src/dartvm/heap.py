"""Heap of application objects: stable ids, shared references, mutation counters.

Only containers (lists, maps, blobs) live on the heap; scalars are inline
immutable values. Every successful in-place mutation bumps the target
node's mutation counter by exactly one — that counter is the engine's
dirty signal for cheap change detection. Ids are engine-assigned, strictly
increasing, and never reused.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

from .errors import IndexOutOfRange, KindMismatch, UnknownObject

LIST = "list"
MAP = "map"
BLOB = "blob"


@dataclass(frozen=True, slots=True)
class Ref:
    oid: int


# A runtime value: inline scalar or heap reference.
Value = int | float | bool | str | Ref


class ObjectNode:
    __slots__ = ("kind", "data", "mutation_counter", "created_at")

    def __init__(self, kind: str, data, created_at: int = 0):
        self.kind = kind
        self.data = data  # list[Value] | dict[str, Value] | bytearray
        self.mutation_counter = 0
        self.created_at = created_at

    def children(self) -> list[int]:
        """Ordered ids of directly referenced objects."""
        if self.kind == LIST:
            return [v.oid for v in self.data if type(v) is Ref]
        if self.kind == MAP:
            return [v.oid for v in self.data.values() if type(v) is Ref]
        return []

    def copy_data(self):
        if self.kind == LIST:
            return list(self.data)
        if self.kind == MAP:
            return dict(self.data)
        return bytearray(self.data)


class Heap:
    """Single-writer object store for one VM run."""

    def __init__(self):
        self.objects: dict[int, ObjectNode] = {}
        self.next_id = 1
        # Set by the VM around each statement; receives first-touch copies
        # so a failed statement can roll back (see vm.Journal).
        self.journal = None

    def __len__(self) -> int:
        return len(self.objects)

    def alloc(self, kind: str, data, created_at: int = 0) -> int:
        oid = self.next_id
        self.next_id += 1
        self.objects[oid] = ObjectNode(kind, data, created_at)
        if self.journal is not None:
            self.journal.record_alloc(oid)
        return oid

    def node(self, oid: int) -> ObjectNode:
        try:
            return self.objects[oid]
        except KeyError:
            raise UnknownObject(oid) from None

    def _touch(self, oid: int, node: ObjectNode) -> None:
        if self.journal is not None:
            self.journal.touch_object(oid, node)
        node.mutation_counter += 1

    def _expect(self, oid: int, kind: str) -> ObjectNode:
        node = self.node(oid)
        if node.kind != kind:
            raise KindMismatch(f"object {oid} is a {node.kind}, not a {kind}")
        return node

    # -- mutations: validate first so a failed op never dirties the node --

    def list_set(self, oid: int, index: int, value: Value) -> None:
        node = self._expect(oid, LIST)
        if not (0 <= index < len(node.data)):
            raise IndexOutOfRange(f"index {index} out of range for list of length {len(node.data)}")
        self._touch(oid, node)
        node.data[index] = value

    def list_push(self, oid: int, value: Value) -> None:
        node = self._expect(oid, LIST)
        self._touch(oid, node)
        node.data.append(value)

    def map_set(self, oid: int, key: str, value: Value) -> None:
        node = self._expect(oid, MAP)
        self._touch(oid, node)
        node.data[key] = value

    def map_delete(self, oid: int, key: str) -> None:
        node = self._expect(oid, MAP)
        if key not in node.data:
            raise IndexOutOfRange(f"key {key!r} not in map")
        self._touch(oid, node)
        del node.data[key]

    def blob_set(self, oid: int, index: int, byte: int) -> None:
        node = self._expect(oid, BLOB)
        if not (0 <= index < len(node.data)):
            raise IndexOutOfRange(f"offset {index} out of range for blob of length {len(node.data)}")
        if not (0 <= byte <= 255):
            raise KindMismatch(f"blob byte value {byte} not in 0..255")
        self._touch(oid, node)
        node.data[index] = byte

    # -- queries -----------------------------------------------------------

    def reachable(self, roots) -> set[int]:
        """Transitive closure over reference edges, roots included."""
        seen: set[int] = set()
        stack = []
        for oid in roots:
            self.node(oid)  # roots must exist
            if oid not in seen:
                seen.add(oid)
                stack.append(oid)
        while stack:
            for child in self.objects[stack.pop()].children():
                if child not in seen:
                    seen.add(child)
                    stack.append(child)
        return seen

    def fingerprint(self, oid: int) -> bytes:
        """128-bit content digest: (kind, mutation counter, child ids, blob length).

        Identity is deliberately excluded; blob bytes are covered by the
        mutation counter, not hashed.
        """
        node = self.node(oid)
        h = hashlib.blake2b(digest_size=16)
        h.update(node.kind.encode())
        h.update(struct.pack("<Q", node.mutation_counter))
        children = node.children()
        h.update(struct.pack("<Q", len(children)))
        for child in children:
            h.update(struct.pack("<Q", child))
        if node.kind == BLOB:
            h.update(struct.pack("<Q", len(node.data)))
        return h.digest()
