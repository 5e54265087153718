"""Deterministic statement VM for DartScript.

Executes one primitive statement per step(), atomically: either the full
effect applies (bindings, heap, rng, cursor, statement log) or a VMError
is raised and the state is rolled back byte-identical via the statement
journal (copy-on-mutate). Capture hooks run only between statements.

Statement-position `call` pushes a frame that is stepped statement by
statement (capture observes it); calls in expression position execute the
whole callee synchronously inside the enclosing statement. A function's
result is whatever it binds to its own name (see docs/language.md).
"""

from __future__ import annotations

import sys
import time
from dataclasses import dataclass

from . import lang
from .errors import DartError, IndexOutOfRange, KindMismatch, UnknownObject, VMError
from .heap import BLOB, LIST, MAP, Heap, Ref, Value
from .rng import EngineRng, blob_bytes

MAX_FRAMES = 256

# a full stack of synchronous calls costs several interpreter frames per
# script frame; make sure the configured cap is reachable
sys.setrecursionlimit(max(sys.getrecursionlimit(), 20_000))


class Frame:
    __slots__ = ("function_name", "bindings", "cursor")

    def __init__(self, function_name: str, bindings: dict[str, Value], cursor: list):
        self.function_name = function_name
        self.bindings = bindings  # insertion-ordered
        # cursor entries are mutable [block_id, offset, done, total] lists,
        # innermost last; loop entries use done/total.
        self.cursor = cursor


@dataclass
class LogEntry:
    index: int
    cursor: tuple
    summary: str


@dataclass
class StateView:
    """A boundary snapshot of VM state: binding lists are copied, object
    payloads are not — the heap handle references live objects."""

    frames: list  # (function_name, bindings dict copy, cursor tuple)
    heap: Heap
    rng_state: tuple[int, int]
    statement_index: int


class Journal:
    """Undo information for one statement: first-touch object copies,
    first-touch frame binding copies, allocation list, rng/frame depth."""

    __slots__ = ("vm", "heap_saved", "allocated", "frames_saved", "frame_depth",
                 "next_id", "draw_count")

    def __init__(self, vm: "VM"):
        self.vm = vm
        self.heap_saved: dict[int, tuple] = {}
        self.allocated: set[int] = set()
        self.frames_saved: dict[int, dict] = {}
        self.frame_depth = len(vm.frames)
        self.next_id = vm.heap.next_id
        self.draw_count = vm.rng.draw_count

    def record_alloc(self, oid: int) -> None:
        self.allocated.add(oid)

    def touch_object(self, oid: int, node) -> None:
        if oid in self.allocated or oid in self.heap_saved:
            return
        self.heap_saved[oid] = (node.kind, node.copy_data(), node.mutation_counter,
                                node.created_at)

    def touch_frame(self, index: int, frame: Frame) -> None:
        # frames above entry depth are ephemeral; truncation restores them
        if index < self.frame_depth and index not in self.frames_saved:
            self.frames_saved[index] = dict(frame.bindings)

    def rollback(self) -> None:
        vm = self.vm
        del vm.frames[self.frame_depth:]
        for idx, bindings in self.frames_saved.items():
            vm.frames[idx].bindings = bindings
        heap = vm.heap
        for oid in self.allocated:
            heap.objects.pop(oid, None)
        for oid, (kind, data, counter, created) in self.heap_saved.items():
            node = heap.objects[oid]
            node.kind = kind
            node.data = data
            node.mutation_counter = counter
            node.created_at = created
        heap.next_id = self.next_id
        vm.rng.draw_count = self.draw_count


def _wrap64(v: int) -> int:
    return ((v + (1 << 63)) & ((1 << 64) - 1)) - (1 << 63)


class VM:
    def __init__(self, program: lang.Program, seed: int):
        self.program = program
        self.seed = seed
        self.heap = Heap()
        self.rng = EngineRng(seed)
        self.frames: list[Frame] = [
            Frame("<global>", {}, [[program.main.block_id, 0, 0, 0]])
        ]
        self.statement_index = 0
        self.statement_log: list[LogEntry] = []
        self.finished = False
        self.hook_failures = 0
        self.exec_ns = 0
        self._journal: Journal | None = None
        self._normalize()

    # -- position ------------------------------------------------------------

    def position(self) -> tuple:
        return tuple(
            (f.function_name, tuple(tuple(e) for e in f.cursor)) for f in self.frames
        )

    def view(self) -> StateView:
        return StateView(
            frames=[(f.function_name, dict(f.bindings), tuple(tuple(e) for e in f.cursor))
                    for f in self.frames],
            heap=self.heap,
            rng_state=self.rng.state(),
            statement_index=self.statement_index,
        )

    def state_fingerprint(self) -> bytes:
        from .encoding import state_fingerprint

        return state_fingerprint(self.view())

    def _current_statement(self):
        frame = self.frames[-1]
        block_id, offset = frame.cursor[-1][0], frame.cursor[-1][1]
        return self.program.blocks[block_id].statements[offset]

    def _normalize(self) -> None:
        """Advance past exhausted blocks: bump loop iterations, pop finished
        loops and frames. Runs only after a successful statement."""
        while True:
            frame = self.frames[-1]
            entry = frame.cursor[-1]
            block = self.program.blocks[entry[0]]
            if block.is_loop:
                if entry[1] >= len(block.statements):
                    entry[2] += 1
                    entry[1] = 0
                if entry[2] >= entry[3] or not block.statements:
                    frame.cursor.pop()
                    self.frames[-1].cursor[-1][1] += 1
                    continue
                return
            if entry[1] >= len(block.statements):
                if len(self.frames) == 1:
                    self.finished = True
                    return
                self.frames.pop()
                self.frames[-1].cursor[-1][1] += 1
                continue
            return

    # -- name resolution -------------------------------------------------

    def _resolve(self, name: str) -> Value:
        top = self.frames[-1]
        if name in top.bindings:
            return top.bindings[name]
        glob = self.frames[0]
        if glob is not top and name in glob.bindings:
            return glob.bindings[name]
        raise VMError("UnknownName", f"name {name!r} is not bound")

    def _bind(self, name: str, value: Value) -> None:
        fidx = len(self.frames) - 1
        frame = self.frames[fidx]
        if self._journal is not None:
            self._journal.touch_frame(fidx, frame)
        frame.bindings[name] = value

    def _unbind(self, name: str) -> None:
        for fidx in (len(self.frames) - 1, 0):
            frame = self.frames[fidx]
            if name in frame.bindings:
                if self._journal is not None:
                    self._journal.touch_frame(fidx, frame)
                del frame.bindings[name]
                return
        raise VMError("UnknownName", f"name {name!r} is not bound")

    # -- expressions -------------------------------------------------------

    def _eval(self, expr) -> Value:
        t = type(expr)
        if t is lang.IntLit or t is lang.FloatLit or t is lang.BoolLit or t is lang.StrLit:
            return expr.value
        if t is lang.NameRef:
            return self._resolve(expr.name)
        if t is lang.BinOp:
            return self._eval_binop(expr)
        if t is lang.IndexExpr:
            return self._eval_index(expr)
        if t is lang.LenExpr:
            return self._eval_len(expr)
        if t is lang.ListLit:
            items = [self._eval(e) for e in expr.items]
            return Ref(self.heap.alloc(LIST, items, self.statement_index))
        if t is lang.MapLit:
            entries: dict[str, Value] = {}
            for key, sub in expr.entries:
                entries[key] = self._eval(sub)
            return Ref(self.heap.alloc(MAP, entries, self.statement_index))
        if t is lang.BlobExpr:
            return self._eval_blob(expr)
        if t is lang.RandExpr:
            return self.rng.next_float()
        if t is lang.CallExpr:
            return self._call_sync(expr.name, [self._eval(a) for a in expr.args])
        raise DartError(f"unknown expression node {t.__name__}")

    def _eval_binop(self, expr) -> Value:
        left = self._eval(expr.left)
        right = self._eval(expr.right)
        lt, rt = type(left), type(right)
        if lt is int and rt is int:
            if expr.op == "+":
                return _wrap64(left + right)
            if expr.op == "-":
                return _wrap64(left - right)
            if expr.op == "*":
                return _wrap64(left * right)
            if right == 0:
                raise VMError("DivisionByZero", "integer division by zero")
            return _wrap64(left // right)
        if lt in (int, float) and rt in (int, float):
            lf, rf = float(left), float(right)
            if expr.op == "+":
                return lf + rf
            if expr.op == "-":
                return lf - rf
            if expr.op == "*":
                return lf * rf
            if rf == 0.0:
                raise VMError("DivisionByZero", "float division by zero")
            return lf / rf
        raise VMError("KindMismatch",
                      f"arithmetic needs numbers, got {lt.__name__} and {rt.__name__}")

    def _eval_index(self, expr) -> Value:
        target = self._eval(expr.target)
        index = self._eval(expr.index)
        if type(target) is not Ref:
            raise VMError("KindMismatch", "only lists, maps, and blobs can be indexed")
        node = self.heap.node(target.oid)
        if node.kind == LIST:
            if type(index) is not int:
                raise VMError("KindMismatch", "list index must be an integer")
            if not (0 <= index < len(node.data)):
                raise VMError("IndexOutOfRange",
                              f"index {index} out of range for list of length {len(node.data)}")
            return node.data[index]
        if node.kind == MAP:
            if type(index) is not str:
                raise VMError("KindMismatch", "map key must be a string")
            if index not in node.data:
                raise VMError("IndexOutOfRange", f"key {index!r} not in map")
            return node.data[index]
        if type(index) is not int:
            raise VMError("KindMismatch", "blob offset must be an integer")
        if not (0 <= index < len(node.data)):
            raise VMError("IndexOutOfRange",
                          f"offset {index} out of range for blob of length {len(node.data)}")
        return node.data[index]

    def _eval_len(self, expr) -> Value:
        target = self._eval(expr.target)
        if type(target) is Ref:
            return len(self.heap.node(target.oid).data)
        if type(target) is str:
            return len(target)
        raise VMError("KindMismatch", "len() needs a list, map, blob, or string")

    def _eval_blob(self, expr) -> Value:
        size = self._eval(expr.size)
        tag = self._eval(expr.tag)
        if type(size) is not int or size < 0:
            raise VMError("KindMismatch", "blob size must be a non-negative integer")
        if type(tag) is Ref:
            raise VMError("KindMismatch", "blob tag must be a scalar")
        data = blob_bytes(self.seed, tag, size)
        return Ref(self.heap.alloc(BLOB, data, self.statement_index))

    # -- calls ---------------------------------------------------------------

    def _call_frame(self, name: str, args: list[Value]) -> Frame:
        fn = self.program.functions.get(name)
        if fn is None:
            raise VMError("UnknownName", f"function {name!r} is not defined")
        if len(args) != len(fn.params):
            raise VMError("KindMismatch",
                          f"{name}() takes {len(fn.params)} arguments, got {len(args)}")
        if len(self.frames) >= MAX_FRAMES:
            raise VMError("RecursionLimit", f"frame stack exceeds {MAX_FRAMES}")
        return Frame(name, dict(zip(fn.params, args)),
                     [[fn.body.block_id, 0, 0, 0]])

    def _call_sync(self, name: str, args: list[Value]) -> Value:
        frame = self._call_frame(name, args)
        self.frames.append(frame)
        try:
            self._exec_block_sync(self.program.functions[name].body)
            if name not in frame.bindings:
                raise VMError("UnknownName",
                              f"function {name!r} did not bind its result name")
            return frame.bindings[name]
        finally:
            self.frames.pop()

    def _exec_block_sync(self, block: lang.Block) -> None:
        for stmt in block.statements:
            t = type(stmt)
            if t is lang.Repeat:
                count = self._repeat_count(stmt)
                for _ in range(count):
                    self._exec_block_sync(stmt.body)
            elif t is lang.CallStmt:
                frame = self._call_frame(stmt.name, [self._eval(a) for a in stmt.args])
                self.frames.append(frame)
                try:
                    self._exec_block_sync(self.program.functions[stmt.name].body)
                finally:
                    self.frames.pop()
            else:
                self._apply_simple(stmt)

    def _repeat_count(self, stmt) -> int:
        count = self._eval(stmt.count)
        if type(count) is not int or count < 0:
            raise VMError("KindMismatch", "repeat count must be a non-negative integer")
        return count

    # -- statement effects ---------------------------------------------------

    def _apply_simple(self, stmt) -> None:
        t = type(stmt)
        if t is lang.Let:
            self._bind(stmt.name, self._eval(stmt.expr))
            return
        if t is lang.SetIndex:
            target = self._resolve(stmt.name)
            if type(target) is not Ref:
                raise VMError("KindMismatch", f"{stmt.name!r} is not a container")
            index = self._eval(stmt.index)
            value = self._eval(stmt.value)
            node = self.heap.node(target.oid)
            if node.kind == LIST:
                if type(index) is not int:
                    raise VMError("KindMismatch", "list index must be an integer")
                self.heap.list_set(target.oid, index, value)
            elif node.kind == MAP:
                if type(index) is not str:
                    raise VMError("KindMismatch", "map key must be a string")
                self.heap.map_set(target.oid, index, value)
            else:
                if type(index) is not int:
                    raise VMError("KindMismatch", "blob offset must be an integer")
                if type(value) is not int:
                    raise VMError("KindMismatch", "blob write value must be an integer")
                self.heap.blob_set(target.oid, index, value)
            return
        if t is lang.Push:
            target = self._resolve(stmt.name)
            if type(target) is not Ref:
                raise VMError("KindMismatch", f"{stmt.name!r} is not a list")
            self.heap.list_push(target.oid, self._eval(stmt.value))
            return
        if t is lang.DelKey:
            target = self._resolve(stmt.name)
            if type(target) is not Ref:
                raise VMError("KindMismatch", f"{stmt.name!r} is not a map")
            key = self._eval(stmt.key)
            if type(key) is not str:
                raise VMError("KindMismatch", "map key must be a string")
            self.heap.map_delete(target.oid, key)
            return
        if t is lang.DelVar:
            self._unbind(stmt.name)
            return
        raise DartError(f"unknown statement node {t.__name__}")

    # -- stepping --------------------------------------------------------

    def step(self) -> None:
        """Execute exactly one primitive statement, atomically."""
        if self.finished:
            raise DartError("program already finished")
        stmt = self._current_statement()
        pre_position = self.position()
        journal = Journal(self)
        self._journal = journal
        self.heap.journal = journal
        t0 = time.perf_counter_ns()
        try:
            t = type(stmt)
            if t is lang.CallStmt:
                args = [self._eval(a) for a in stmt.args]
                self.frames.append(self._call_frame(stmt.name, args))
                self._normalize()
            elif t is lang.Repeat:
                count = self._repeat_count(stmt)
                self.frames[-1].cursor.append([stmt.body.block_id, 0, 0, count])
                self._normalize()
            else:
                self._apply_simple(stmt)
                self.frames[-1].cursor[-1][1] += 1
                self._normalize()
        except VMError as err:
            journal.rollback()
            err.cursor = pre_position
            raise
        except (KindMismatch, IndexOutOfRange, UnknownObject) as err:
            journal.rollback()
            kind = {"KindMismatch": "KindMismatch",
                    "IndexOutOfRange": "IndexOutOfRange"}.get(type(err).__name__,
                                                              "KindMismatch")
            raise VMError(kind, str(err), pre_position) from err
        finally:
            self._journal = None
            self.heap.journal = None
            self.exec_ns += time.perf_counter_ns() - t0
        self.statement_index += 1
        self.statement_log.append(
            LogEntry(self.statement_index, pre_position, type(stmt).__name__)
        )

    def run(self, hook=None) -> "VM":
        """Step to completion; `hook(vm)` fires between statements and may
        never disturb execution (its exceptions are swallowed and counted)."""
        while not self.finished:
            self.step()
            if hook is not None:
                try:
                    hook(self)
                except Exception:
                    self.hook_failures += 1
        return self


def run_program(source: str, seed: int, hook=None) -> VM:
    return VM(lang.parse(source), seed).run(hook)
