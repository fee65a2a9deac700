"""On-device lifecycle: extract, destroy audio, queue features, sync, delete.

The local store only ever sees :class:`RecordingRecord` objects, which hold
a feature vector and metadata but no samples. Records leave the store only
after the server confirms the batch holding them (COMMIT or
ALREADY_COMMITTED).
"""

from __future__ import annotations

import logging
import sqlite3
import threading
from dataclasses import dataclass, field

from .audio import AudioClip
from .features import FeatureVector, extract_features
from .qc import judge
from .records import RecordingRecord, records_from_csv, records_to_csv
from .wire import (
    ALREADY_COMMITTED,
    COMMIT,
    OFFER,
    OFFER_ACK,
    REJECT,
    ConnectionClosed,
    ProtocolError,
    batch_id_for,
    checksum,
    control,
    data,
)

log = logging.getLogger(__name__)

DEFAULT_BATCH_SIZE = 50
DEFAULT_MAX_RETRIES = 3
DATA_ROWS_PER_FRAME = 16

PHASE_OFFER_SENT = "offer_sent"
PHASE_OFFER_ACK = "offer_ack_received"
PHASE_DATA = "data_sent"  # reported as "data_sent:<i>"
PHASE_PRE_COMMIT = "pre_commit"
PHASE_POST_COMMIT = "post_commit_pre_delete"


class LocalStore:
    """Private on-device queue of feature records (SQLite).

    Pending records keep their enqueue order. Once a batch has been offered
    its composition is pinned, so retransmissions reuse the same batch id.
    """

    def __init__(self, path: str = ":memory:"):
        self.path = path
        self._lock = threading.RLock()
        self._db = sqlite3.connect(path, check_same_thread=False, isolation_level=None)
        self._db.execute("PRAGMA journal_mode=WAL")
        self._db.executescript(
            """
            CREATE TABLE IF NOT EXISTS pending (
                seq INTEGER PRIMARY KEY AUTOINCREMENT,
                record_id TEXT NOT NULL UNIQUE,
                participant_id TEXT NOT NULL,
                schema TEXT NOT NULL,
                row TEXT NOT NULL,
                batch_id TEXT
            );
            CREATE TABLE IF NOT EXISTS committed (batch_id TEXT PRIMARY KEY);
            """
        )

    def enqueue(self, record: RecordingRecord) -> None:
        if not isinstance(record, RecordingRecord):
            raise TypeError("only RecordingRecord objects may enter the local store")
        row = records_to_csv([record])
        with self._lock:
            self._db.execute(
                "INSERT INTO pending (record_id, participant_id, schema, row) VALUES (?, ?, ?, ?)",
                (record.record_id, record.participant_id, record.features.schema_version, row),
            )

    def pending(self) -> list[RecordingRecord]:
        with self._lock:
            rows = self._db.execute("SELECT row FROM pending ORDER BY seq").fetchall()
        return [records_from_csv(r)[0] for (r,) in rows]

    def pending_ids(self) -> list[str]:
        with self._lock:
            return [r for (r,) in self._db.execute("SELECT record_id FROM pending ORDER BY seq")]

    def __len__(self):
        with self._lock:
            return self._db.execute("SELECT COUNT(*) FROM pending").fetchone()[0]

    @property
    def committed_batch_ids(self) -> set:
        with self._lock:
            return {b for (b,) in self._db.execute("SELECT batch_id FROM committed")}

    def _transaction(self, *steps):
        with self._lock:
            cur = self._db.cursor()
            cur.execute("BEGIN IMMEDIATE")
            try:
                for sql, params in steps:
                    cur.executemany(sql, params)
                cur.execute("COMMIT")
            except BaseException:
                cur.execute("ROLLBACK")
                raise

    def pin(self, batch_id: str, record_ids) -> None:
        """Fix a batch's composition; all of its records or none are pinned."""
        self._transaction(("UPDATE pending SET batch_id = ? WHERE record_id = ?", [(batch_id, r) for r in record_ids]))

    def delete(self, record_ids, batch_id: str) -> None:
        """Drop confirmed records and remember the batch, in one transaction."""
        self._transaction(
            ("DELETE FROM pending WHERE record_id = ?", [(r,) for r in record_ids]),
            ("INSERT OR IGNORE INTO committed (batch_id) VALUES (?)", [(batch_id,)]),
        )

    def _rows(self):
        with self._lock:
            return self._db.execute(
                "SELECT record_id, participant_id, schema, row, batch_id FROM pending ORDER BY seq").fetchall()

    def close(self):
        with self._lock:
            self._db.close()


@dataclass(frozen=True)
class SyncBatch:
    batch_id: str
    records: tuple
    checksum: str
    created_at: float

    @classmethod
    def of(cls, records, batch_id: str | None = None) -> "SyncBatch":
        records = tuple(records)
        pids = {r.participant_id for r in records}
        if len(pids) != 1:
            raise ValueError("a batch holds records of exactly one participant")
        bid = batch_id or batch_id_for(records[0].participant_id, [r.record_id for r in records])
        return cls(bid, records, checksum(records_to_csv(records)), max(r.stopped_at for r in records))

    def payload(self) -> str:
        return records_to_csv(self.records)

    @property
    def record_ids(self) -> list:
        return [r.record_id for r in self.records]


def build_batches(store: LocalStore, batch_size: int = DEFAULT_BATCH_SIZE) -> list[SyncBatch]:
    """Pinned batches first (same composition as when first offered), then
    fresh batches of up to ``batch_size`` records per (participant, schema)
    in queue order. Fresh batches are pinned on creation."""
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    pinned: dict[str, list] = {}
    fresh: dict[tuple, list] = {}
    for rid, pid, schema, row, bid in store._rows():
        rec = records_from_csv(row)[0]
        if bid is not None:
            pinned.setdefault(bid, []).append(rec)
        else:
            fresh.setdefault((pid, schema), []).append(rec)
    batches = [SyncBatch.of(recs, bid) for bid, recs in pinned.items()]
    for recs in fresh.values():
        for i in range(0, len(recs), batch_size):
            b = SyncBatch.of(recs[i:i + batch_size])
            store.pin(b.batch_id, b.record_ids)
            batches.append(b)
    return batches


# -- ingestion ----------------------------------------------------------------------

@dataclass(frozen=True)
class RecordingContext:
    """Everything known about a recording except its audio."""

    record_id: str
    session_id: str
    participant_id: str
    condition: str
    started_at: float
    stopped_at: float
    stop_cause: str
    affect_valence: int
    affect_arousal: int
    sex: str

    @classmethod
    def of(cls, obj) -> "RecordingContext":
        return cls(**{f: getattr(obj, f) for f in cls.__dataclass_fields__})


def ingest_recording(store: LocalStore, clip: AudioClip, context, extractor=extract_features,
                     audit=None) -> RecordingRecord:
    """Extract features, destroy the audio, then enqueue the record.

    A failing extractor yields the non-extractable sentinel vector. ``audit``
    (if given) is called as ``audit(clip, store)`` after the samples are
    wiped and before anything is enqueued.
    """
    ctx = context if isinstance(context, RecordingContext) else RecordingContext.of(context)
    try:
        fv = extractor(clip)
        if not isinstance(fv, FeatureVector):
            raise TypeError("extractor must return a FeatureVector")
    except Exception as exc:  # losing one recording beats keeping its audio
        log.warning("extraction failed for %s: %s", ctx.record_id, exc)
        fv = FeatureVector.sentinel()
    finally:
        clip.release()
    if audit is not None:
        audit(clip, store)
    record = RecordingRecord(
        record_id=ctx.record_id, session_id=ctx.session_id, participant_id=ctx.participant_id,
        condition=ctx.condition, started_at=ctx.started_at, stopped_at=ctx.stopped_at,
        stop_cause=ctx.stop_cause, features=fv, qc=judge(fv),
        affect_valence=ctx.affect_valence, affect_arousal=ctx.affect_arousal, sex=ctx.sex,
    )
    store.enqueue(record)
    return record


def should_sync(screen_active: bool, wifi: bool) -> bool:
    """Sync only while the phone is idle and on WiFi."""
    return (not screen_active) and wifi


# -- sync ---------------------------------------------------------------------------

@dataclass
class SyncReport:
    committed: list = field(default_factory=list)  # batch ids confirmed by COMMIT
    already_committed: list = field(default_factory=list)
    failed: list = field(default_factory=list)  # batch ids left pending after max retries
    records_deleted: int = 0
    attempts: int = 0
    rejects: int = 0
    errors: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failed


def _chunks(payload: str, rows_per_frame: int):
    lines = payload.splitlines(keepends=True)
    # the header travels with the first data rows
    first = rows_per_frame + 1
    yield "".join(lines[:first])
    for i in range(first, len(lines), rows_per_frame):
        yield "".join(lines[i:i + rows_per_frame])


def _expect(frame, batch_id, *kinds):
    if frame["type"] not in kinds:
        raise ProtocolError(f"expected {'/'.join(kinds)}, got {frame['type']}")
    if frame["batch_id"] != batch_id:
        raise ProtocolError("reply refers to another batch")
    return frame["type"]


def _send_batch(channel, batch: SyncBatch, on_phase, rows_per_frame):
    """One attempt. Returns COMMIT, ALREADY_COMMITTED or REJECT."""
    payload = batch.payload()  # fresh serialization on every attempt
    digest = checksum(payload)
    count = len(batch.records)
    channel.send(control(OFFER, batch.batch_id, count, digest))
    on_phase(PHASE_OFFER_SENT)
    reply = channel.recv()
    kind = _expect(reply, batch.batch_id, OFFER_ACK, ALREADY_COMMITTED, REJECT)
    if kind != OFFER_ACK:
        return kind
    on_phase(PHASE_OFFER_ACK)
    for i, chunk in enumerate(_chunks(payload, rows_per_frame)):
        channel.send(data(chunk))
        on_phase(f"{PHASE_DATA}:{i}")
    on_phase(PHASE_PRE_COMMIT)
    reply = channel.recv()
    kind = _expect(reply, batch.batch_id, COMMIT, REJECT)
    if kind == COMMIT and reply["checksum"] != digest:
        raise ProtocolError("COMMIT carries a different checksum")
    return kind


def sync_once(store: LocalStore, connect, batch_size: int = DEFAULT_BATCH_SIZE,
              max_retries: int = DEFAULT_MAX_RETRIES, on_phase=None,
              rows_per_frame: int = DATA_ROWS_PER_FRAME) -> SyncReport:
    """Push every pending batch through OFFER / DATA / COMMIT.

    ``connect()`` returns a fresh channel. ``on_phase(name)`` is called at
    each protocol phase; raising ConnectionError from it simulates a dropped
    connection at that point. Records are deleted only after COMMIT or
    ALREADY_COMMITTED; anything else leaves the batch pending.
    """
    on_phase = on_phase or (lambda phase: None)
    report = SyncReport()
    channel = None

    def drop():
        nonlocal channel
        if channel is not None:
            channel.close()
        channel = None

    try:
        for batch in build_batches(store, batch_size):
            for _attempt in range(max_retries):
                report.attempts += 1
                try:
                    if channel is None:
                        channel = connect()
                    outcome = _send_batch(channel, batch, on_phase, rows_per_frame)
                except (ConnectionError, OSError, ProtocolError) as exc:
                    report.errors.append(f"{batch.batch_id}: {exc}")
                    drop()
                    continue
                if outcome == REJECT:
                    report.rejects += 1
                    drop()
                    continue
                try:
                    on_phase(PHASE_POST_COMMIT)
                except ConnectionError as exc:
                    # the ack arrived but the device died before deleting
                    report.errors.append(f"{batch.batch_id}: {exc}")
                    drop()
                    break
                store.delete(batch.record_ids, batch.batch_id)
                report.records_deleted += len(batch.records)
                (report.committed if outcome == COMMIT else report.already_committed).append(batch.batch_id)
                break
            if batch.batch_id not in report.committed and batch.batch_id not in report.already_committed:
                report.failed.append(batch.batch_id)
    finally:
        drop()
    return report


class DeviceAgent:
    """One simulated phone: ingests recordings and syncs when idle on WiFi."""

    def __init__(self, connect, store: LocalStore | None = None, batch_size: int = DEFAULT_BATCH_SIZE,
                 max_retries: int = DEFAULT_MAX_RETRIES, extractor=extract_features):
        self.connect = connect
        self.store = store or LocalStore()
        self.batch_size = batch_size
        self.max_retries = max_retries
        self.extractor = extractor
        self._sync_lock = threading.Lock()

    def ingest(self, clip: AudioClip, context, audit=None) -> RecordingRecord:
        return ingest_recording(self.store, clip, context, self.extractor, audit)

    def maybe_sync(self, screen_active: bool, wifi: bool, on_phase=None) -> SyncReport | None:
        if not should_sync(screen_active, wifi):
            return None
        return self.sync(on_phase)

    def sync(self, on_phase=None) -> SyncReport:
        with self._sync_lock:  # one in-flight sync per device
            return sync_once(self.store, self.connect, self.batch_size, self.max_retries, on_phase)


__all__ = [
    "ConnectionClosed", "DeviceAgent", "LocalStore", "RecordingContext", "SyncBatch", "SyncReport",
    "batch_id_for", "build_batches", "ingest_recording", "should_sync", "sync_once",
]
