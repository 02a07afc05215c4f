"""File-backed embedded store for the warehouse catalog.

In memory the warehouse is a dict of tables plus unique-key and reverse
reference indexes; every committed mutation appends a journal entry and bumps
journal_seq by exactly 1. Persistence is a deterministic binary snapshot plus
an append-only journal file.

Snapshot layout (format version 1, big-endian, byte-exact across platforms):

    magic        4s   b"ISWH"
    version      u16
    n_relations  u16
    per relation, in alphabetical kind order: row count u32, next id u32
    journal_seq  u64
    checksum     u64  blake2b(digest_size=8) over the body
    body: per relation in the same order, rows in ascending primary-key
          order, each encoded as u32 length + canonical JSON

Journal file: 4-byte magic b"ISWJ" + u16 version, then one u32 length-prefixed
canonical-JSON entry per mutation. I/O faults surface as the usual OSError;
only format problems get dedicated exceptions.
"""

from __future__ import annotations

import copy
import hashlib
import io
import json
import struct
import threading
import typing
from dataclasses import dataclass, fields as dc_fields
from datetime import date, datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Optional

from . import schema
from .errors import (
    ChecksumMismatch, CorruptJournal, CorruptSnapshot, FkViolation, NotFound,
    RestrictViolation, UniqueViolation, UnsupportedFormatVersion, ValidationFailed,
)
from .schema import KINDS, RELATIONS, Contact, Permission, Record

SNAPSHOT_MAGIC = b"ISWH"
JOURNAL_MAGIC = b"ISWJ"
FORMAT_VERSION = 1

_TS_FMT = "%Y-%m-%dT%H:%M:%SZ"


# --- record encoding ---------------------------------------------------------

def _enc_ts(v: datetime) -> str:
    return v.astimezone(timezone.utc).strftime(_TS_FMT)


def _dec_ts(v: str) -> datetime:
    return datetime.strptime(v, _TS_FMT).replace(tzinfo=timezone.utc)


def _codec_for(hint):
    origin = typing.get_origin(hint)
    if origin is typing.Union:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        inner_enc, inner_dec = _codec_for(args[0])
        return (lambda v: None if v is None else inner_enc(v),
                lambda v: None if v is None else inner_dec(v))
    if origin is frozenset:
        return (lambda v: sorted(p.value for p in v),
                lambda v: frozenset(Permission(x) for x in v))
    if hint is datetime:
        return _enc_ts, _dec_ts
    if hint is date:
        return (lambda v: v.isoformat(), date.fromisoformat)
    if isinstance(hint, type) and issubclass(hint, Enum):
        return (lambda v: v.value, hint)
    if isinstance(hint, type) and hasattr(hint, "__dataclass_fields__"):
        sub = _codecs_for_cls(hint)
        return (lambda v: {n: e(getattr(v, n)) for n, (e, _) in sub.items()},
                lambda v: hint(**{n: d(v[n]) for n, (_, d) in sub.items()}))
    return (lambda v: v, lambda v: v)


_CODEC_CACHE: dict[type, dict] = {}


def _codecs_for_cls(cls: type) -> dict[str, tuple[Callable, Callable]]:
    if cls not in _CODEC_CACHE:
        hints = typing.get_type_hints(cls)
        _CODEC_CACHE[cls] = {f.name: _codec_for(hints[f.name]) for f in dc_fields(cls)}
    return _CODEC_CACHE[cls]


def encode_record(record: Record) -> dict:
    codecs = _codecs_for_cls(type(record))
    return {name: enc(getattr(record, name)) for name, (enc, _) in codecs.items()}


def decode_record(kind: str, payload: dict) -> Record:
    cls = RELATIONS[kind].cls
    codecs = _codecs_for_cls(cls)
    try:
        return cls(**{name: dec(payload[name]) for name, (_, dec) in codecs.items()})
    except (KeyError, ValueError, TypeError) as exc:
        raise CorruptSnapshot(f"bad {kind} payload: {exc}") from exc


def _canonical_json(payload: dict) -> bytes:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"),
                      ensure_ascii=True).encode("ascii")


def _clone(record: Record) -> Record:
    out = copy.copy(record)
    if isinstance(out, Contact):
        out.web = copy.copy(out.web)
        out.telephone = copy.copy(out.telephone)
        out.city = copy.copy(out.city)
    return out


# --- journal -----------------------------------------------------------------

@dataclass(frozen=True)
class JournalEntry:
    seq: int
    op: str                      # "put" | "delete"
    kind: str
    rid: int
    payload: Optional[dict] = None   # committed row for puts

    def to_json(self) -> dict:
        return {"seq": self.seq, "op": self.op, "kind": self.kind,
                "rid": self.rid, "payload": self.payload}

    @classmethod
    def from_json(cls, obj: dict) -> "JournalEntry":
        return cls(obj["seq"], obj["op"], obj["kind"], obj["rid"], obj.get("payload"))


@dataclass(frozen=True)
class SnapshotHeader:
    format_version: int
    counts: dict[str, int]
    next_ids: dict[str, int]
    journal_seq: int
    checksum: int


# --- warehouse ---------------------------------------------------------------

class Warehouse:
    """Single-writer embedded store. Mutations serialize through an internal
    lock; reads hand out cloned rows so callers can't corrupt indexes."""

    def __init__(self) -> None:
        self.tables: dict[str, dict[int, Record]] = {k: {} for k in KINDS}
        self.journal_seq: int = 0
        self._next_id: dict[str, int] = {k: 1 for k in KINDS}
        self._uindex: dict[str, dict[str, dict[tuple, int]]] = {
            k: {key_name: {} for key_name, _ in RELATIONS[k].uniques} for k in KINDS
        }
        self._refs: dict[tuple[str, int], set[tuple[str, int, str]]] = {}
        self._pending_journal: list[JournalEntry] = []
        self._write_lock = threading.RLock()

    # -- reads --

    def get(self, kind: str, rid: int) -> Optional[Record]:
        row = self.tables[kind].get(rid)
        return _clone(row) if row is not None else None

    def scan(self, kind: str, predicate: Callable[[Record], bool] | None = None) -> list[Record]:
        table = self.tables[kind]
        out = []
        for rid in sorted(table):
            row = table[rid]
            if predicate is None or predicate(row):
                out.append(_clone(row))
        return out

    def count(self, kind: str) -> int:
        return len(self.tables[kind])

    def counts(self) -> dict[str, int]:
        return {k: len(self.tables[k]) for k in KINDS}

    def logical_counts(self) -> dict[str, int]:
        return schema.logical_counts(self.tables)

    def resolver(self) -> Callable[[str, int], Optional[Record]]:
        """Uncloned lookup for natural_key resolution (read-only use)."""
        return lambda kind, rid: self.tables[kind].get(rid)

    # -- mutations --

    def put(self, record: Record) -> int:
        """Insert (id unset) or upsert (id set) one validated record.

        All checks run before any state changes, so a raised error leaves the
        warehouse exactly as it was.
        """
        kind = schema.kind_of(record)
        result = schema.validate_record(record)
        if not result.ok:
            raise ValidationFailed(kind, result.violations)
        refs = schema.foreign_keys(record)
        for ref in refs:
            if ref.value is None:
                continue
            if ref.value not in self.tables[ref.target]:
                raise FkViolation(kind, ref.field, ref.value)
        cross = schema.cross_checks(record, lambda k, i: self.tables[k].get(i))
        if cross:
            raise ValidationFailed(kind, cross)

        with self._write_lock:
            rid = schema.record_id(record)
            table = self.tables[kind]
            old = table.get(rid) if rid else None
            for key_name, key in schema.unique_keys(record):
                holder = self._uindex[kind][key_name].get(key)
                if holder is not None and holder != rid:
                    raise UniqueViolation(kind, key_name, key)

            stored = _clone(record)
            if old is None:
                if rid == 0:
                    rid = self._next_id[kind]
                    schema.set_record_id(record, rid)
                    schema.set_record_id(stored, rid)
                self._next_id[kind] = max(self._next_id[kind], rid + 1)
            else:
                self._unindex(kind, rid, old)
            table[rid] = stored
            for key_name, key in schema.unique_keys(stored):
                self._uindex[kind][key_name][key] = rid
            for ref in schema.foreign_keys(stored):
                if ref.value is not None:
                    self._refs.setdefault((ref.target, ref.value), set()).add((kind, rid, ref.field))
            self._commit("put", kind, rid, encode_record(stored))
            return rid

    def delete(self, kind: str, rid: int) -> None:
        """Remove a row; refuses while anything still references it."""
        with self._write_lock:
            table = self.tables[kind]
            row = table.get(rid)
            if row is None:
                raise NotFound(kind, rid)
            referencing = sorted(self._refs.get((kind, rid), ()))
            if referencing:
                raise RestrictViolation(kind, rid, referencing)
            self._unindex(kind, rid, row)
            del table[rid]
            self._refs.pop((kind, rid), None)
            self._commit("delete", kind, rid, None)

    def _unindex(self, kind: str, rid: int, row: Record) -> None:
        for key_name, key in schema.unique_keys(row):
            self._uindex[kind][key_name].pop(key, None)
        for ref in schema.foreign_keys(row):
            if ref.value is not None:
                bucket = self._refs.get((ref.target, ref.value))
                if bucket is not None:
                    bucket.discard((kind, rid, ref.field))
                    if not bucket:
                        del self._refs[(ref.target, ref.value)]

    def _commit(self, op: str, kind: str, rid: int, payload: Optional[dict]) -> None:
        self.journal_seq += 1
        self._pending_journal.append(JournalEntry(self.journal_seq, op, kind, rid, payload))

    def drain_journal(self) -> list[JournalEntry]:
        """Hand over entries committed since the last drain (for file append)."""
        out, self._pending_journal = self._pending_journal, []
        return out

    # -- bulk atomicity (used by the ETL load step) --

    def bulk_token(self) -> tuple:
        """Capture state so a multi-put operation can roll back as one unit."""
        return (self.journal_seq, len(self._pending_journal), snapshot_bytes(self))

    def rollback_bulk(self, token: tuple) -> None:
        seq, pending_len, data = token
        fresh = load_snapshot(data)
        with self._write_lock:
            self.tables = fresh.tables
            self._next_id = fresh._next_id
            self._uindex = fresh._uindex
            self._refs = fresh._refs
            self.journal_seq = seq
            del self._pending_journal[pending_len:]

    # -- verification --

    def verify_integrity(self) -> list[str]:
        """Full-scan check of referential closure, uniqueness, and id counters."""
        problems: list[str] = []
        for kind in KINDS:
            seen_keys: dict[str, dict[tuple, int]] = {
                key_name: {} for key_name, _ in RELATIONS[kind].uniques
            }
            for rid, row in self.tables[kind].items():
                if schema.record_id(row) != rid:
                    problems.append(f"{kind}#{rid}: primary key mismatch")
                if rid >= self._next_id[kind]:
                    problems.append(f"{kind}#{rid}: id past the next-id counter")
                for ref in schema.foreign_keys(row):
                    if ref.value is not None and ref.value not in self.tables[ref.target]:
                        problems.append(
                            f"{kind}#{rid}.{ref.field}: dangling reference to {ref.target}#{ref.value}")
                for key_name, key in schema.unique_keys(row):
                    dup = seen_keys[key_name].get(key)
                    if dup is not None:
                        problems.append(f"{kind}: duplicate {key_name}={key!r} in #{dup} and #{rid}")
                    seen_keys[key_name][key] = rid
        return problems

    def state_hash(self) -> str:
        return hashlib.blake2b(_body_bytes(self), digest_size=16).hexdigest()


# --- snapshot ----------------------------------------------------------------

def _body_bytes(w: Warehouse) -> bytes:
    buf = io.BytesIO()
    for kind in KINDS:
        table = w.tables[kind]
        for rid in sorted(table):
            blob = _canonical_json(encode_record(table[rid]))
            buf.write(struct.pack(">I", len(blob)))
            buf.write(blob)
    return buf.getvalue()


def snapshot_bytes(w: Warehouse) -> bytes:
    body = _body_bytes(w)
    checksum = int.from_bytes(hashlib.blake2b(body, digest_size=8).digest(), "big")
    head = io.BytesIO()
    head.write(SNAPSHOT_MAGIC)
    head.write(struct.pack(">HH", FORMAT_VERSION, len(KINDS)))
    for kind in KINDS:
        head.write(struct.pack(">II", len(w.tables[kind]), w._next_id[kind]))
    head.write(struct.pack(">QQ", w.journal_seq, checksum))
    return head.getvalue() + body


def save_snapshot(w: Warehouse, destination: str | Path) -> SnapshotHeader:
    """Write the snapshot atomically (temp file + rename); returns its header."""
    data = snapshot_bytes(w)
    dest = Path(destination)
    tmp = dest.with_suffix(dest.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(dest)
    checksum = struct.unpack_from(">Q", data, 8 + 8 * len(KINDS) + 8)[0]
    return SnapshotHeader(FORMAT_VERSION, w.counts(), dict(w._next_id), w.journal_seq, checksum)


def load_snapshot(source: str | Path | bytes) -> Warehouse:
    data = source if isinstance(source, bytes) else Path(source).read_bytes()
    if len(data) < 8 or data[:4] != SNAPSHOT_MAGIC:
        raise CorruptSnapshot("not a warehouse snapshot")
    version, nrel = struct.unpack_from(">HH", data, 4)
    if version != FORMAT_VERSION:
        raise UnsupportedFormatVersion(version)
    if nrel != len(KINDS):
        raise CorruptSnapshot(f"expected {len(KINDS)} relations, header says {nrel}")
    off = 8
    counts: dict[str, int] = {}
    next_ids: dict[str, int] = {}
    for kind in KINDS:
        counts[kind], next_ids[kind] = struct.unpack_from(">II", data, off)
        off += 8
    journal_seq, checksum = struct.unpack_from(">QQ", data, off)
    off += 16
    body = data[off:]
    actual = int.from_bytes(hashlib.blake2b(body, digest_size=8).digest(), "big")
    if actual != checksum:
        raise ChecksumMismatch("snapshot body does not match its checksum")

    w = Warehouse()
    pos = 0
    for kind in KINDS:
        for _ in range(counts[kind]):
            if pos + 4 > len(body):
                raise CorruptSnapshot("truncated body")
            (length,) = struct.unpack_from(">I", body, pos)
            pos += 4
            blob = body[pos:pos + length]
            if len(blob) != length:
                raise CorruptSnapshot("truncated record")
            pos += length
            try:
                payload = json.loads(blob)
            except ValueError as exc:
                raise CorruptSnapshot(f"bad record JSON: {exc}") from exc
            record = decode_record(kind, payload)
            rid = schema.record_id(record)
            w.tables[kind][rid] = record
            for key_name, key in schema.unique_keys(record):
                w._uindex[kind][key_name][key] = rid
            for ref in schema.foreign_keys(record):
                if ref.value is not None:
                    w._refs.setdefault((ref.target, ref.value), set()).add((kind, rid, ref.field))
        w._next_id[kind] = next_ids[kind]
    if pos != len(body):
        raise CorruptSnapshot("trailing bytes after the last record")
    w.journal_seq = journal_seq
    return w


# --- journal file --------------------------------------------------------------

def init_journal(path: str | Path) -> None:
    Path(path).write_bytes(JOURNAL_MAGIC + struct.pack(">H", FORMAT_VERSION))


def append_journal(path: str | Path, entries: Iterable[JournalEntry]) -> None:
    with open(path, "ab") as fh:
        for entry in entries:
            blob = _canonical_json(entry.to_json())
            fh.write(struct.pack(">I", len(blob)))
            fh.write(blob)


def read_journal(path: str | Path) -> list[JournalEntry]:
    data = Path(path).read_bytes()
    if len(data) < 6 or data[:4] != JOURNAL_MAGIC:
        raise CorruptJournal("not a warehouse journal")
    (version,) = struct.unpack_from(">H", data, 4)
    if version != FORMAT_VERSION:
        raise UnsupportedFormatVersion(version)
    pos = 6
    out: list[JournalEntry] = []
    while pos < len(data):
        if pos + 4 > len(data):
            raise CorruptJournal("truncated entry header")
        (length,) = struct.unpack_from(">I", data, pos)
        pos += 4
        blob = data[pos:pos + length]
        if len(blob) != length:
            raise CorruptJournal("truncated entry")
        pos += length
        try:
            out.append(JournalEntry.from_json(json.loads(blob)))
        except (ValueError, KeyError) as exc:
            raise CorruptJournal(f"bad entry: {exc}") from exc
    return out


def replay_journal(entries: Iterable[JournalEntry]) -> Warehouse:
    """Rebuild a warehouse by re-running every journaled mutation from empty."""
    w = Warehouse()
    for entry in entries:
        if entry.op == "put":
            w.put(decode_record(entry.kind, entry.payload))
        elif entry.op == "delete":
            w.delete(entry.kind, entry.rid)
        else:
            raise CorruptJournal(f"unknown op {entry.op!r} at seq {entry.seq}")
        if w.journal_seq != entry.seq:
            raise CorruptJournal(
                f"sequence gap: replay reached {w.journal_seq}, entry says {entry.seq}")
        w.drain_journal()
    return w
