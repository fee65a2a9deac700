"""Ingest server: verifies, deduplicates and durably stores feature batches.

Durability comes from an append-only log (``commits.log``): one JSON line
per committed batch holding the batch id, checksum and canonical CSV
payload, fsynced before the COMMIT frame goes out. ``compact()`` folds the
log into per-schema CSV snapshots referenced by ``snapshot.json``. Startup
loads the snapshot and replays whatever the log still holds; a torn final
line is ignored.
"""

from __future__ import annotations

import json
import logging
import os
import re
import socketserver
import threading
from dataclasses import dataclass

from .records import RecordingRecord, records_from_csv, records_to_csv
from .wire import (
    ALREADY_COMMITTED,
    COMMIT,
    DATA,
    OFFER,
    OFFER_ACK,
    REJECT,
    ConnectionClosed,
    FrameChannel,
    ProtocolError,
    batch_id_for,
    checksum,
    control,
)

log = logging.getLogger(__name__)

LOG_NAME = "commits.log"
MANIFEST_NAME = "snapshot.json"
MAX_BATCH_RECORDS = 10_000
_HEX = re.compile(r"^[0-9a-f]{16,64}$")


class ServerStore:
    """Committed records keyed by record id, plus the set of committed batch ids.

    ``data_dir=None`` keeps everything in memory (tests). ``readonly`` loads
    a data directory without opening its log for writing, which is what
    exports use while a server may still be running. Commits are serialized
    by one lock; reads take a consistent copy under the same lock.
    """

    def __init__(self, data_dir=None, compact_every: int = 1000, readonly: bool = False):
        self.data_dir = data_dir
        self.compact_every = compact_every
        self._lock = threading.Lock()
        self._records: dict[str, RecordingRecord] = {}
        self._batches: dict[str, str] = {}
        self._since_compact = 0
        self._log = None
        self.readonly = readonly
        if data_dir is not None:
            if readonly:
                if not os.path.isdir(data_dir):
                    raise FileNotFoundError(f"no server data directory at {data_dir}")
                self._load()
                return
            os.makedirs(data_dir, exist_ok=True)
            self._load()
            self._log = open(os.path.join(data_dir, LOG_NAME), "a", encoding="utf-8")

    # -- persistence --------------------------------------------------------------

    def _load(self):
        manifest = os.path.join(self.data_dir, MANIFEST_NAME)
        if os.path.exists(manifest):
            with open(manifest, encoding="utf-8") as fh:
                meta = json.load(fh)
            for name in meta["record_files"]:
                with open(os.path.join(self.data_dir, name), encoding="utf-8") as fh:
                    for rec in records_from_csv(fh.read()):
                        self._records.setdefault(rec.record_id, rec)
            self._batches.update(meta["batches"])
        path = os.path.join(self.data_dir, LOG_NAME)
        if not os.path.exists(path):
            return
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.endswith("\n"):
                    log.warning("ignoring torn trailing log entry")
                    break
                try:
                    entry = json.loads(line)
                except json.JSONDecodeError:
                    log.warning("ignoring undecodable log entry")
                    continue
                self._apply(entry["batch_id"], entry["checksum"], records_from_csv(entry["payload"]))

    def _apply(self, batch_id, digest, records):
        for rec in records:
            self._records.setdefault(rec.record_id, rec)
        self._batches[batch_id] = digest

    def commit(self, batch_id: str, digest: str, payload: str, records) -> bool:
        """Make a batch durable. Returns False if it was already committed."""
        if self.readonly:
            raise PermissionError("store was opened read-only")
        with self._lock:
            if batch_id in self._batches:
                return False
            if self._log is not None:
                line = json.dumps({"batch_id": batch_id, "checksum": digest, "payload": payload},
                                  separators=(",", ":"), sort_keys=True)
                self._log.write(line + "\n")
                self._log.flush()
                os.fsync(self._log.fileno())
            self._apply(batch_id, digest, records)
            self._since_compact += 1
            if self._log is not None and self._since_compact >= self.compact_every:
                self._compact_locked()
        return True

    def compact(self):
        with self._lock:
            if self._log is not None:
                self._compact_locked()

    def _compact_locked(self):
        by_schema = {}
        for rec in sorted(self._records.values(), key=RecordingRecord.sort_key):
            by_schema.setdefault(rec.features.schema_version, []).append(rec)
        gen = 0
        manifest = os.path.join(self.data_dir, MANIFEST_NAME)
        if os.path.exists(manifest):
            with open(manifest, encoding="utf-8") as fh:
                gen = json.load(fh).get("generation", 0) + 1
        files = []
        for schema, recs in sorted(by_schema.items()):
            name = f"records-{gen}-{schema}.csv"
            _write_durable(os.path.join(self.data_dir, name), records_to_csv(recs))
            files.append(name)
        meta = {"generation": gen, "record_files": files, "batches": dict(sorted(self._batches.items()))}
        _write_durable(manifest + ".tmp", json.dumps(meta, indent=1, sort_keys=True))
        os.replace(manifest + ".tmp", manifest)
        self._log.close()
        self._log = open(os.path.join(self.data_dir, LOG_NAME), "w", encoding="utf-8")
        for old in os.listdir(self.data_dir):
            if old.startswith("records-") and old not in files:
                os.remove(os.path.join(self.data_dir, old))
        self._since_compact = 0

    def close(self):
        with self._lock:
            if self._log is not None:
                self._log.close()
                self._log = None

    # -- queries ------------------------------------------------------------------

    def is_committed(self, batch_id: str) -> bool:
        with self._lock:
            return batch_id in self._batches

    def batch_checksum(self, batch_id):
        with self._lock:
            return self._batches.get(batch_id)

    @property
    def committed_batches(self) -> set:
        with self._lock:
            return set(self._batches)

    def records(self) -> list:
        with self._lock:
            return list(self._records.values())

    def __len__(self):
        with self._lock:
            return len(self._records)

    @property
    def participants(self) -> dict:
        index = {}
        for rec in self.records():
            index.setdefault(rec.participant_id, []).append(rec.record_id)
        return index


def _write_durable(path, text):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
        fh.flush()
        os.fsync(fh.fileno())


@dataclass(frozen=True)
class ExportFilter:
    participants: frozenset | None = None
    conditions: frozenset | None = None
    start: float | None = None
    end: float | None = None
    retained_only: bool = False

    def accepts(self, rec: RecordingRecord) -> bool:
        if self.participants is not None and rec.participant_id not in self.participants:
            return False
        if self.conditions is not None and rec.condition not in self.conditions:
            return False
        if self.start is not None and rec.started_at < self.start:
            return False
        if self.end is not None and rec.started_at >= self.end:
            return False
        return rec.qc.retained or not self.retained_only


def export(store: ServerStore, flt: ExportFilter | None = None) -> list:
    """Records passing ``flt``, ordered by (participant, session, condition)."""
    flt = flt or ExportFilter()
    return sorted((r for r in store.records() if flt.accepts(r)), key=RecordingRecord.sort_key)


# -- connection handling -------------------------------------------------------------

def _reject(channel, batch_id, reason):
    try:
        channel.send(control(REJECT, batch_id, reason=reason))
    except ConnectionError:
        pass


def _valid_offer(frame) -> bool:
    bid, count, digest = frame.get("batch_id"), frame.get("count"), frame.get("checksum")
    return (isinstance(bid, str) and bool(_HEX.match(bid))
            and isinstance(count, int) and not isinstance(count, bool) and 1 <= count <= MAX_BATCH_RECORDS
            and isinstance(digest, str) and len(digest) == 16 and bool(_HEX.match(digest)))


def _receive_batch(channel, store, frame):
    """Server half of one OFFER/DATA/COMMIT exchange. Returns False to hang up."""
    if not _valid_offer(frame):
        _reject(channel, frame.get("batch_id"), "malformed OFFER")
        return False
    batch_id, count, digest = frame["batch_id"], frame["count"], frame["checksum"]
    if store.is_committed(batch_id):
        channel.send(control(ALREADY_COMMITTED, batch_id, count, store.batch_checksum(batch_id)))
        return True
    channel.send(control(OFFER_ACK, batch_id, count, digest))

    parts, rows = [], -1
    while rows < count:
        try:
            msg = channel.recv()
        except ConnectionClosed:
            log.info("connection lost mid-batch %s; nothing persisted", batch_id)
            _reject(channel, batch_id, "incomplete batch")
            return False
        if msg["type"] != DATA:
            _reject(channel, batch_id, f"expected DATA, got {msg['type']}")
            return False
        parts.append(msg["payload"])
        rows += msg["payload"].count("\n")
    payload = "".join(parts)
    if rows != count:
        _reject(channel, batch_id, f"batch announced {count} records, received {rows}")
        return False
    if checksum(payload) != digest:
        _reject(channel, batch_id, "checksum mismatch")
        return True
    try:
        records = records_from_csv(payload)
    except (ValueError, KeyError) as exc:
        _reject(channel, batch_id, f"unparseable payload: {exc}")
        return True
    pids = {r.participant_id for r in records}
    if len(records) != count or len(pids) != 1 or batch_id_for(pids.pop(), [r.record_id for r in records]) != batch_id:
        _reject(channel, batch_id, "batch id does not match its content")
        return True
    store.commit(batch_id, digest, payload, records)
    channel.send(control(COMMIT, batch_id, count, digest))
    return True


def handle_connection(channel: FrameChannel, store: ServerStore) -> None:
    """Serve one client connection until it closes or misbehaves."""
    try:
        while True:
            try:
                frame = channel.recv()
            except ConnectionClosed:
                return
            except ProtocolError as exc:
                _reject(channel, None, str(exc))
                return
            if frame["type"] != OFFER:
                _reject(channel, frame.get("batch_id"), f"unexpected {frame['type']}")
                return
            try:
                if not _receive_batch(channel, store, frame):
                    return
            except ProtocolError as exc:
                _reject(channel, frame.get("batch_id"), str(exc))
                return
    except ConnectionError:
        return
    finally:
        channel.close()


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        srv = self.server
        sock = self.request
        sock.settimeout(srv.io_timeout)
        if srv.ssl_context is not None:
            try:
                sock = srv.ssl_context.wrap_socket(sock, server_side=True)
            except OSError as exc:
                log.warning("TLS handshake failed: %s", exc)
                return
        handle_connection(FrameChannel(sock, secure=srv.ssl_context is not None), srv.store)


class IngestServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, store: ServerStore, ssl_context=None, insecure=False, io_timeout=30.0):
        if ssl_context is None and not insecure:
            from .wire import InsecureTransportError
            raise InsecureTransportError("plaintext serving requires insecure test mode")
        self.store = store
        self.ssl_context = ssl_context
        self.io_timeout = io_timeout
        super().__init__(address, _Handler)

    def start(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, name="ingest-server", daemon=True)
        t.start()
        return t

    def stop(self):
        self.shutdown()
        self.server_close()
