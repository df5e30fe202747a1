"""Quantized summary export, a versioned in-memory cache, and snapshots.

Summaries travel as 8-bit codes with a per-row scale and zero point. A
publisher appends them to an append-only :class:`ExportLog`; consumers replay
the log into a :class:`SummaryCache`, which serves the newest version not
exceeding a caller-supplied bound. The log is the source of truth and a
snapshot is derived state.
"""
from __future__ import annotations

import hashlib
import struct
import threading
import time
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptSnapshot, StaleVersion, StalenessExceeded, UserNotFound
from .numerics import as_matrix

SCALE_FLOOR = 1e-12
CODE_LIMIT = 127


@dataclass(frozen=True)
class SummaryTokens:
    user_id: str
    version: int
    tokens: np.ndarray


@dataclass(frozen=True, eq=False)
class QuantizedSummary:
    user_id: str
    version: int
    scale: np.ndarray  # (k,)
    zero_point: np.ndarray  # (k,)
    codes: np.ndarray  # (k, d) int8

    @property
    def shape(self):
        return self.codes.shape

    def encode(self) -> bytes:
        uid = self.user_id.encode()
        k, d = self.codes.shape
        rows = np.empty((k, 2), dtype="<f8")
        rows[:, 0] = self.scale
        rows[:, 1] = self.zero_point
        return b"".join([
            struct.pack("<I", len(uid)), uid,
            struct.pack("<QII", self.version, k, d),
            rows.tobytes(),
            np.ascontiguousarray(self.codes, dtype=np.int8).tobytes(),
        ])

    @classmethod
    def decode(cls, buf, pos=0):
        """Parse one entry starting at `pos`; returns ``(summary, next_pos)``."""
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if pos + n > len(buf):
            raise CorruptSnapshot("user id runs past end of buffer")
        uid = bytes(buf[pos:pos + n]).decode()
        pos += n
        version, k, d = struct.unpack_from("<QII", buf, pos)
        pos += 16
        need = 16 * k + k * d
        if pos + need > len(buf):
            raise CorruptSnapshot("entry runs past end of buffer")
        rows = np.frombuffer(buf, dtype="<f8", count=2 * k, offset=pos).reshape(k, 2)
        pos += 16 * k
        codes = np.frombuffer(buf, dtype=np.int8, count=k * d, offset=pos).reshape(k, d).copy()
        pos += k * d
        return cls(uid, version, rows[:, 0].astype(np.float64), rows[:, 1].astype(np.float64), codes), pos

    @property
    def checksum(self) -> int:
        return zlib.crc32(self.encode())


def quantize(tokens, user_id: str = "", version: int = 0) -> QuantizedSummary:
    """Per-row affine 8-bit quantization over the symmetric code range [-127, 127]."""
    x = as_matrix(tokens)
    lo, hi = x.min(axis=1), x.max(axis=1)
    scale = np.maximum((hi - lo) / (2 * CODE_LIMIT), SCALE_FLOOR)
    zero_point = (hi + lo) / 2
    codes = np.clip(np.rint((x - zero_point[:, None]) / scale[:, None]), -CODE_LIMIT, CODE_LIMIT)
    return QuantizedSummary(user_id, int(version), scale, zero_point, codes.astype(np.int8))


def dequantize(q: QuantizedSummary) -> np.ndarray:
    return q.codes.astype(np.float64) * q.scale[:, None] + q.zero_point[:, None]


# -- export log -------------------------------------------------------------------

@dataclass(frozen=True)
class ExportRecord:
    offset: int
    payload: QuantizedSummary
    timestamp: float


class ExportLog:
    """Append-only ordered log of quantized summaries.

    With a `path` every record is also appended to disk as
    ``u32 length | entry bytes | u32 crc32(entry)``.
    """

    def __init__(self, path=None):
        self._records: list[ExportRecord] = []
        self._last_version: dict[str, int] = {}
        self._lock = threading.Lock()
        self.path = Path(path) if path is not None else None

    def __len__(self):
        return len(self._records)

    @property
    def end(self) -> int:
        return len(self._records)

    def last_version(self, user_id):
        return self._last_version.get(user_id)

    def append(self, summary: QuantizedSummary, timestamp=None) -> int:
        with self._lock:
            last = self._last_version.get(summary.user_id)
            if last is not None and summary.version <= last:
                raise StaleVersion(
                    f"user {summary.user_id!r}: version {summary.version} not after {last}")
            offset = len(self._records)
            stamp = time.time() if timestamp is None else timestamp
            if self.path is not None:
                body = summary.encode()
                with self.path.open("ab") as fh:
                    fh.write(struct.pack("<I", len(body)) + body + struct.pack("<I", zlib.crc32(body)))
            self._records.append(ExportRecord(offset, summary, stamp))
            self._last_version[summary.user_id] = summary.version
            return offset

    def read(self, from_offset=0, to_offset=None):
        if from_offset < 0 or from_offset > self.end:
            raise IndexError(f"offset {from_offset} outside log of length {self.end}")
        # list slicing takes a consistent snapshot of the already-appended prefix
        return self._records[from_offset:to_offset]

    @classmethod
    def open(cls, path):
        """Load an on-disk log; later appends continue the same file."""
        path = Path(path)
        data = path.read_bytes() if path.exists() else b""
        log = cls()
        pos = 0
        while pos < len(data):
            if pos + 4 > len(data):
                raise CorruptSnapshot(f"{path}: truncated record header at byte {pos}")
            (n,) = struct.unpack_from("<I", data, pos)
            body = data[pos + 4:pos + 4 + n]
            if len(body) != n or pos + 8 + n > len(data):
                raise CorruptSnapshot(f"{path}: truncated record at byte {pos}")
            (crc,) = struct.unpack_from("<I", data, pos + 4 + n)
            if zlib.crc32(body) != crc:
                raise CorruptSnapshot(f"{path}: checksum mismatch at byte {pos}")
            summary, _ = QuantizedSummary.decode(body)
            log.append(summary, timestamp=0.0)
            pos += 8 + n
        log.path = path
        return log


def publish(log: ExportLog, tokens: SummaryTokens) -> int:
    """Quantize `tokens` and append them; returns the record offset."""
    return log.append(quantize(tokens.tokens, tokens.user_id, tokens.version))


# -- cache ------------------------------------------------------------------------------

class SummaryCache:
    """user id -> newest few quantized summaries, oldest first.

    Writers build a new tuple and swap it in with one dict assignment, so a
    reader sees either the old or the new entry, never a mix.
    """

    def __init__(self, depth: int = 2):
        if depth < 1:
            raise ValueError("depth must be >= 1")
        self.depth = depth
        self._entries: dict[str, tuple] = {}
        self._write_lock = threading.Lock()
        self.model_version = 0
        self.offset = 0  # next log offset to consume

    def __len__(self):
        return len(self._entries)

    def __contains__(self, user_id):
        return user_id in self._entries

    def users(self):
        return list(self._entries)

    def apply(self, summary: QuantizedSummary) -> bool:
        """Insert `summary`; returns False when that version is already present or older."""
        with self._write_lock:
            current = self._entries.get(summary.user_id, ())
            if current and summary.version <= current[-1].version:
                return False
            self._entries[summary.user_id] = (current + (summary,))[-self.depth:]
            self.model_version = max(self.model_version, summary.version)
            return True

    def get(self, user_id, max_version=None) -> QuantizedSummary:
        """Newest entry whose version is at most `max_version`."""
        entries = self._entries.get(user_id)
        if not entries:
            raise UserNotFound(user_id)
        if max_version is None:
            return entries[-1]
        for entry in reversed(entries):
            if entry.version <= max_version:
                return entry
        raise UserNotFound(f"{user_id}: no version <= {max_version} retained")

    def state_hash(self) -> str:
        h = hashlib.sha256()
        for uid in sorted(self._entries):
            for entry in self._entries[uid]:
                h.update(entry.encode())
        return h.hexdigest()

    def entries(self):
        """All retained summaries, users sorted, versions oldest first."""
        return [e for uid in sorted(self._entries) for e in self._entries[uid]]


def consume(log: ExportLog, cache: SummaryCache, from_offset=None) -> int:
    """Apply log records from `from_offset` (default: where the cache left off).

    Returns how many records changed the cache, so replaying an already
    applied prefix returns 0 and leaves the state unchanged.
    """
    start = cache.offset if from_offset is None else from_offset
    records = log.read(start)
    applied = sum(cache.apply(r.payload) for r in records)
    cache.offset = max(cache.offset, start + len(records))
    return applied


# -- snapshots -----------------------------------------------------------------------

SNAPSHOT_MAGIC = b"VSCH"
SNAPSHOT_VERSION = 1


def snapshot_bytes(cache: SummaryCache) -> bytes:
    entries = cache.entries()
    body = b"".join([SNAPSHOT_MAGIC, struct.pack("<IQ", SNAPSHOT_VERSION, len(entries))]
                    + [e.encode() for e in entries])
    return body + struct.pack("<I", zlib.crc32(body))


def snapshot_save(cache: SummaryCache, path):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(snapshot_bytes(cache))
    tmp.replace(path)


def snapshot_load(path, depth: int = 2) -> SummaryCache:
    data = Path(path).read_bytes()
    if len(data) < 20 or data[:4] != SNAPSHOT_MAGIC:
        raise CorruptSnapshot(f"{path}: not a VSCH snapshot")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptSnapshot(f"{path}: checksum mismatch")
    version, count = struct.unpack_from("<IQ", body, 4)
    if version != SNAPSHOT_VERSION:
        raise CorruptSnapshot(f"{path}: unsupported format version {version}")
    cache = SummaryCache(depth)
    pos = 16
    try:
        for _ in range(count):
            entry, pos = QuantizedSummary.decode(body, pos)
            cache.apply(entry)
    except struct.error as exc:
        raise CorruptSnapshot(f"{path}: {exc}") from exc
    if pos != len(body):
        raise CorruptSnapshot(f"{path}: {len(body) - pos} trailing bytes")
    return cache


# -- serving ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FetchResult:
    tokens: np.ndarray
    version: int
    lag: int


def fetch_for_inference(cache: SummaryCache, user_id, current_version=None, max_staleness=None,
                        strict=False) -> FetchResult:
    """Dequantized newest summary plus its lag behind `current_version`.

    Lag is only an error in strict mode and only when it exceeds
    `max_staleness`.
    """
    entry = cache.get(user_id)
    now = cache.model_version if current_version is None else current_version
    lag = max(0, int(now) - entry.version)
    if strict and max_staleness is not None and lag > max_staleness:
        raise StalenessExceeded(f"user {user_id!r}: lag {lag} > {max_staleness}")
    return FetchResult(dequantize(entry), entry.version, lag)
