"""Append-only durable store: CRC-framed record log with checkpoints.

Layout: <dir>/manifest.json (informational cache, rewritten on close),
<dir>/segments/NNNN.dlog (append-only record files rolled at 256 MiB),
<dir>/.dart.lock (flock'd by the single writer session).

Record frame, all integers little-endian:
    magic u32 = 0x44415254 | record_type u8 | version u64 |
    payload_len u32 | payload | crc32 u32 over (type..payload)

A record is valid iff magic and CRC match. On open the segments are
rescanned from scratch (the manifest is never trusted for the index); a
torn record at a segment tail is ignored, a corrupt record mid-file is
remembered so reads can distinguish CorruptRecord from UnknownVersion.
Bit-exact details in docs/format.md.
"""

from __future__ import annotations

import fcntl
import json
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

from .encoding import parse_snapshot_header, read_uv
from .errors import (
    CorruptPack,
    CorruptRecord,
    IoError,
    NoCheckpoint,
    NotEmpty,
    StoreLocked,
    UnknownVersion,
    VersionOrderViolation,
)

MAGIC = 0x44415254
RT_DELTA = 1
RT_CHECKPOINT = 2
RT_SOURCE = 3
RT_MANIFEST = 4

_HEADER = struct.Struct("<IBQI")  # magic, type, version, payload_len
_CRC = struct.Struct("<I")
SEGMENT_MAX = 256 * 1024 * 1024
LOCK_FILE = ".dart.lock"


def frame_record(record_type: int, version: int, payload: bytes) -> bytes:
    header = _HEADER.pack(MAGIC, record_type, version, len(payload))
    crc = zlib.crc32(header[4:])
    crc = zlib.crc32(payload, crc)
    return header + payload + _CRC.pack(crc)


@dataclass
class IndexEntry:
    version: int
    kind: int  # RT_DELTA | RT_CHECKPOINT
    segment: str
    offset: int
    length: int  # framed size on disk
    base_version: int | None
    statement_index: int
    max_pid: int


class _ScanResult:
    def __init__(self):
        self.entries: dict[int, IndexEntry] = {}
        self.program_source: str | None = None
        self.manifest_payloads: list[bytes] = []
        self.corrupt: list[tuple[str, int]] = []  # (segment, offset)
        self.latest_version = 0
        self.latest_checkpoint: int | None = None
        self.max_pid = 0


def _scan_segment_file(path: Path, relname: str, result: _ScanResult,
                       strict: bool = False) -> None:
    with open(path, "rb") as f:
        offset = 0
        while True:
            header = f.read(_HEADER.size)
            if not header:
                return
            if len(header) < _HEADER.size:
                if strict:
                    raise CorruptPack(f"truncated header at {relname}:{offset}")
                return  # torn tail
            magic, rtype, version, payload_len = _HEADER.unpack(header)
            if magic != MAGIC:
                if strict:
                    raise CorruptPack(f"bad magic at {relname}:{offset}")
                result.corrupt.append((relname, offset))
                return  # stream desynced; ignore the rest of this segment
            body = f.read(payload_len + _CRC.size)
            if len(body) < payload_len + _CRC.size:
                if strict:
                    raise CorruptPack(f"truncated record at {relname}:{offset}")
                return  # torn tail
            payload = body[:payload_len]
            (crc_stored,) = _CRC.unpack(body[payload_len:])
            crc = zlib.crc32(header[4:])
            crc = zlib.crc32(payload, crc)
            frame_len = _HEADER.size + payload_len + _CRC.size
            if crc != crc_stored:
                if strict:
                    raise CorruptPack(f"crc mismatch at {relname}:{offset}")
                result.corrupt.append((relname, offset))
                offset += frame_len
                continue
            if rtype == RT_SOURCE:
                if result.program_source is None:
                    result.program_source = payload.decode("utf-8")
            elif rtype == RT_MANIFEST:
                result.manifest_payloads.append(payload)
            elif rtype in (RT_DELTA, RT_CHECKPOINT):
                try:
                    statement_index, max_pid, pos = parse_snapshot_header(payload)
                    base = None
                    if rtype == RT_DELTA:
                        base, _ = read_uv(payload, pos)
                except CorruptRecord:
                    result.corrupt.append((relname, offset))
                    offset += frame_len
                    continue
                result.entries[version] = IndexEntry(
                    version, rtype, relname, offset, frame_len, base,
                    statement_index, max_pid)
                result.latest_version = max(result.latest_version, version)
                result.max_pid = max(result.max_pid, max_pid)
                if rtype == RT_CHECKPOINT:
                    if result.latest_checkpoint is None or version > result.latest_checkpoint:
                        result.latest_checkpoint = version
            offset += frame_len


def _scan(directory: Path) -> _ScanResult:
    result = _ScanResult()
    segdir = directory / "segments"
    if segdir.is_dir():
        for path in sorted(segdir.iterdir()):
            if path.suffix == ".dlog":
                _scan_segment_file(path, path.name, result)
    return result


class Store:
    """Read-only view of a store directory; safe alongside one writer."""

    def __init__(self, directory, require_checkpoint: bool = True):
        self.directory = Path(directory)
        if not self.directory.is_dir():
            raise IoError(f"no store at {self.directory}")
        scan = _scan(self.directory)
        self.index = scan.entries
        self.versions = sorted(scan.entries)
        self.program_source = scan.program_source
        self.corrupt = scan.corrupt
        self.latest_version = scan.latest_version
        self.latest_checkpoint = scan.latest_checkpoint
        self.max_pid = scan.max_pid
        if require_checkpoint and self.latest_checkpoint is None:
            raise NoCheckpoint(f"store {self.directory} holds no checkpoint record")

    def entry(self, version: int) -> IndexEntry:
        entry = self.index.get(version)
        if entry is None:
            if self.corrupt:
                raise CorruptRecord(
                    f"version {version} unreadable; corrupt records at {self.corrupt}")
            raise UnknownVersion(version)
        return entry

    def read_payload(self, version: int) -> tuple[int, bytes]:
        """Re-reads and re-verifies the framed record; never returns
        silently corrupted bytes."""
        entry = self.entry(version)
        path = self.directory / "segments" / entry.segment
        with open(path, "rb") as f:
            f.seek(entry.offset)
            frame = f.read(entry.length)
        if len(frame) != entry.length:
            raise CorruptRecord(f"version {version}: truncated frame")
        magic, rtype, ver, payload_len = _HEADER.unpack(frame[:_HEADER.size])
        if magic != MAGIC or ver != version or rtype != entry.kind:
            raise CorruptRecord(f"version {version}: frame header mismatch")
        payload = frame[_HEADER.size:_HEADER.size + payload_len]
        (crc_stored,) = _CRC.unpack(frame[_HEADER.size + payload_len:])
        crc = zlib.crc32(frame[4:_HEADER.size])
        crc = zlib.crc32(payload, crc)
        if crc != crc_stored:
            raise CorruptRecord(f"version {version}: crc mismatch")
        return rtype, payload

    def chain_versions(self, version: int) -> list[int]:
        """Base-link walk from `version` back to its checkpoint, oldest first."""
        chain = []
        v = version
        while True:
            entry = self.entry(v)
            chain.append(v)
            if entry.kind == RT_CHECKPOINT:
                break
            if entry.base_version is None or entry.base_version >= v:
                raise CorruptRecord(f"delta {v} has no usable base link")
            if len(chain) > len(self.index):
                raise CorruptRecord("base links form a cycle")
            v = entry.base_version
        chain.reverse()
        return chain

    def read_chain(self, version: int) -> list[tuple[int, int, bytes]]:
        """Checkpoint-first minimal chain of (version, kind, payload)."""
        return [(v, *self.read_payload(v)) for v in self.chain_versions(version)]

    def latest_at_or_before_statement(self, target: int) -> int | None:
        best = None
        for v in self.versions:
            if self.index[v].statement_index <= target:
                if best is None or self.index[v].statement_index >= self.index[best].statement_index:
                    best = v
        return best

    def manifest(self) -> dict | None:
        path = self.directory / "manifest.json"
        if not path.exists():
            return None
        return json.loads(path.read_text())


class StoreSession:
    """The single writer for a store directory. Records are flushed to
    durable media before the append returns (fsync="always", default)."""

    def __init__(self, directory, fsync: str = "always"):
        self.directory = Path(directory)
        if fsync not in ("always", "batch"):
            raise ValueError("fsync must be 'always' or 'batch'")
        self.fsync = fsync
        self._batch_pending = 0
        self._lock_fd = None
        self._segment_file = None
        self._segment_index = 0
        self._segment_size = 0
        self.latest_version = 0
        self.latest_checkpoint: int | None = None
        self.entries: dict[int, IndexEntry] = {}
        self.meta: dict = {}
        self.program_digest_hex: str | None = None
        self.closed = False

    # -- lifecycle ---------------------------------------------------------

    @classmethod
    def create(cls, directory, program_source: str, meta: dict | None = None,
               fsync: str = "always") -> "StoreSession":
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        if any(directory.iterdir()):
            raise NotEmpty(f"store directory {directory} is not empty")
        (directory / "segments").mkdir()
        session = cls(directory, fsync)
        session._acquire_lock()
        session.meta = dict(meta or {})
        from .lang import source_digest

        session.program_digest_hex = source_digest(program_source).hex()
        session._open_segment(0)
        session._append(RT_SOURCE, 0, program_source.encode("utf-8"))
        session._append(RT_MANIFEST, 0, session._manifest_bytes())
        session.write_manifest()
        return session

    @classmethod
    def open_existing(cls, directory, fsync: str = "always") -> "StoreSession":
        """Reopen for appending (resume). Continues version numbering above
        everything already on disk."""
        directory = Path(directory)
        scan = _scan(directory)
        if scan.program_source is None:
            raise IoError(f"{directory} has no program source record")
        session = cls(directory, fsync)
        session._acquire_lock()
        session.entries = dict(scan.entries)
        session.latest_version = scan.latest_version
        session.latest_checkpoint = scan.latest_checkpoint
        manifest = None
        mpath = directory / "manifest.json"
        if mpath.exists():
            try:
                manifest = json.loads(mpath.read_text())
            except (OSError, json.JSONDecodeError):
                manifest = None
        session.meta = (manifest or {}).get("settings", {})
        from .lang import source_digest

        session.program_digest_hex = source_digest(scan.program_source).hex()
        existing = sorted((directory / "segments").glob("*.dlog"))
        last = existing[-1]
        session._segment_index = int(last.stem)
        session._segment_file = open(last, "ab")
        session._segment_size = last.stat().st_size
        return session

    def _acquire_lock(self):
        fd = os.open(self.directory / LOCK_FILE, os.O_CREAT | os.O_RDWR, 0o644)
        try:
            fcntl.flock(fd, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except OSError:
            os.close(fd)
            raise StoreLocked(f"another session holds {self.directory / LOCK_FILE}") from None
        os.write(fd, str(os.getpid()).encode())
        self._lock_fd = fd

    def _open_segment(self, index: int) -> None:
        path = self.directory / "segments" / f"{index:04d}.dlog"
        self._segment_file = open(path, "ab")
        self._segment_index = index
        self._segment_size = path.stat().st_size

    def _roll_if_needed(self) -> None:
        if self._segment_size >= SEGMENT_MAX:
            self._segment_file.flush()
            os.fsync(self._segment_file.fileno())
            self._segment_file.close()
            self._open_segment(self._segment_index + 1)

    def _append(self, record_type: int, version: int, payload: bytes) -> IndexEntry:
        self._roll_if_needed()
        frame = frame_record(record_type, version, payload)
        offset = self._segment_size
        try:
            self._segment_file.write(frame)
            if self.fsync == "always":
                self._segment_file.flush()
                os.fsync(self._segment_file.fileno())
            else:
                self._batch_pending += 1
                if self._batch_pending >= 64:
                    self._segment_file.flush()
                    os.fsync(self._segment_file.fileno())
                    self._batch_pending = 0
        except OSError as e:
            raise IoError(str(e)) from e
        self._segment_size += len(frame)
        entry = IndexEntry(version, record_type, f"{self._segment_index:04d}.dlog",
                           offset, len(frame), None, 0, 0)
        return entry

    # -- snapshot appends -----------------------------------------------------

    def append_snapshot(self, version: int, kind: int, payload: bytes,
                        base_version: int | None, statement_index: int,
                        max_pid: int) -> int:
        """Framed durable append; returns on-disk framed size. The ack
        implies the bytes reached durable media under fsync="always"."""
        if self.closed:
            raise IoError("session closed")
        if version <= self.latest_version:
            raise VersionOrderViolation(
                f"version {version} <= latest {self.latest_version}")
        entry = self._append(kind, version, payload)
        entry.base_version = base_version
        entry.statement_index = statement_index
        entry.max_pid = max_pid
        self.entries[version] = entry
        self.latest_version = version
        if kind == RT_CHECKPOINT:
            self.latest_checkpoint = version
        return entry.length

    def append_delta(self, version: int, payload: bytes, base_version: int,
                     statement_index: int, max_pid: int) -> int:
        return self.append_snapshot(version, RT_DELTA, payload, base_version,
                                    statement_index, max_pid)

    def append_checkpoint(self, version: int, payload: bytes,
                          statement_index: int, max_pid: int) -> int:
        return self.append_snapshot(version, RT_CHECKPOINT, payload, None,
                                    statement_index, max_pid)

    # -- manifest ------------------------------------------------------------

    def _manifest_bytes(self) -> bytes:
        return json.dumps(self._manifest_dict(), sort_keys=True).encode("utf-8")

    def _manifest_dict(self) -> dict:
        return {
            "format": 1,
            "program_digest": self.program_digest_hex,
            "settings": self.meta,
            "latest_version": self.latest_version,
            "latest_checkpoint": self.latest_checkpoint,
            "max_pid": max((e.max_pid for e in self.entries.values()), default=0),
            "versions": [
                {
                    "version": e.version,
                    "kind": "checkpoint" if e.kind == RT_CHECKPOINT else "delta",
                    "segment": e.segment,
                    "offset": e.offset,
                    "bytes": e.length,
                    "base_version": e.base_version,
                    "statement_index": e.statement_index,
                }
                for e in sorted(self.entries.values(), key=lambda e: e.version)
            ],
        }

    def write_manifest(self) -> None:
        tmp = self.directory / "manifest.json.tmp"
        tmp.write_text(json.dumps(self._manifest_dict(), indent=1, sort_keys=True))
        os.replace(tmp, self.directory / "manifest.json")

    # -- shutdown ------------------------------------------------------------

    def close(self) -> None:
        if self.closed:
            return
        self._append(RT_MANIFEST, 0, self._manifest_bytes())
        self._segment_file.flush()
        os.fsync(self._segment_file.fileno())
        self._segment_file.close()
        self.write_manifest()
        self._release_lock()
        self.closed = True

    def abandon(self) -> None:
        """Simulate a process kill: drop the lock and file handles without
        final manifest or fsync."""
        if self.closed:
            return
        try:
            self._segment_file.close()
        except OSError:
            pass
        self._release_lock()
        self.closed = True

    def _release_lock(self) -> None:
        if self._lock_fd is not None:
            fcntl.flock(self._lock_fd, fcntl.LOCK_UN)
            os.close(self._lock_fd)
            self._lock_fd = None


# --- replication packs -----------------------------------------------------------

def export_pack(store: Store, out_path, v_lo: int, v_hi: int) -> int:
    """Write a self-contained single-file export covering [v_lo, v_hi].
    Returns the number of snapshot records included."""
    if v_lo > v_hi:
        raise UnknownVersion(v_lo)
    needed: set[int] = set()
    for v in range(v_lo, v_hi + 1):
        if v in store.index:
            needed.update(store.chain_versions(v))
    if not needed:
        raise UnknownVersion(v_lo)
    if store.program_source is None:
        raise CorruptRecord("store has no program source record")
    meta = {
        "pack": 1,
        "v_lo": v_lo,
        "v_hi": v_hi,
        "versions": sorted(needed),
    }
    out_path = Path(out_path)
    tmp = out_path.with_name(out_path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(frame_record(RT_MANIFEST, 0, json.dumps(meta, sort_keys=True).encode()))
        f.write(frame_record(RT_SOURCE, 0, store.program_source.encode("utf-8")))
        for v in sorted(needed):
            kind, payload = store.read_payload(v)
            f.write(frame_record(kind, v, payload))
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, out_path)
    return len(needed)


def import_pack(pack_path, dest_dir) -> "Store":
    """Validate a pack and build a fresh store from it, atomically: a bad
    pack leaves no partial store behind."""
    pack_path = Path(pack_path)
    dest_dir = Path(dest_dir)
    if dest_dir.exists() and any(dest_dir.iterdir()):
        raise NotEmpty(f"{dest_dir} is not empty")
    result = _ScanResult()
    try:
        _scan_segment_file(pack_path, pack_path.name, result, strict=True)
    except (OSError, CorruptRecord) as e:
        raise CorruptPack(str(e)) from e
    if result.program_source is None or not result.entries:
        raise CorruptPack("pack is missing program source or snapshot records")
    # every delta's base chain must resolve within the pack
    for entry in result.entries.values():
        v = entry.version
        hops = 0
        while result.entries[v].kind != RT_CHECKPOINT:
            base = result.entries[v].base_version
            if base is None or base not in result.entries:
                raise CorruptPack(f"chain for version {entry.version} leaves the pack")
            v = base
            hops += 1
            if hops > len(result.entries):
                raise CorruptPack("base links form a cycle")
    tmp = dest_dir.parent / (dest_dir.name + ".importing")
    if tmp.exists():
        raise NotEmpty(f"leftover import dir {tmp}")
    (tmp / "segments").mkdir(parents=True)
    with open(tmp / "segments" / "0000.dlog", "wb") as f:
        f.write(frame_record(RT_SOURCE, 0, result.program_source.encode("utf-8")))
        for v in sorted(result.entries):
            entry = result.entries[v]
            with open(pack_path, "rb") as src:
                src.seek(entry.offset)
                f.write(src.read(entry.length))
        f.flush()
        os.fsync(f.fileno())
    dest_dir.mkdir(parents=True, exist_ok=True)
    os.rename(tmp, dest_dir)
    return Store(dest_dir)
