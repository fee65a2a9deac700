import json
import os
import ssl
import threading

import pytest

from prosokit.device import SyncBatch, sync_once
from prosokit.records import records_to_csv
from prosokit.server import LOG_NAME, MANIFEST_NAME, ExportFilter, IngestServer, ServerStore, export
from prosokit.wire import (
    ALREADY_COMMITTED,
    COMMIT,
    OFFER,
    OFFER_ACK,
    REJECT,
    InsecureTransportError,
    checksum,
    client_tls_context,
    control,
    data,
    encode_frame,
    server_tls_context,
    tcp_connector,
)

from .sync_harness import Loopback, filled_store, make_record, make_records, run_raw, self_signed_cert


def batch(n=2, pid="P0001"):
    return SyncBatch.of([make_record(pid, s) for s in range(n)])


def exchange(b: SyncBatch, payload=None):
    payload = b.payload() if payload is None else payload
    return encode_frame(control(OFFER, b.batch_id, len(b.records), checksum(b.payload()))) + \
        encode_frame(data(payload))


def commit_batch(store, b):
    store.commit(b.batch_id, b.checksum, b.payload(), list(b.records))


# -- protocol -----------------------------------------------------------------------

def test_valid_batch_commits():
    store = ServerStore()
    b = batch(3)
    replies = run_raw(store, exchange(b))
    assert [r["type"] for r in replies] == [OFFER_ACK, COMMIT]
    assert replies[1]["checksum"] == b.checksum and replies[1]["count"] == 3
    assert len(store) == 3 and store.committed_batches == {b.batch_id}


def test_every_single_bit_flip_is_rejected():
    b = SyncBatch.of([make_record("P0001", 0)])
    offer = encode_frame(control(OFFER, b.batch_id, 1, b.checksum))
    frame = encode_frame(data(b.payload()))
    flips = 0
    for pos in range(4, len(frame)):
        for bit in range(8):
            bad = bytearray(frame)
            bad[pos] ^= 1 << bit
            store = ServerStore()
            replies = run_raw(store, offer + bytes(bad))
            assert replies[0]["type"] == OFFER_ACK
            assert replies[-1]["type"] == REJECT, (pos, bit)
            assert len(store) == 0 and not store.committed_batches
            flips += 1
    assert flips == 8 * (len(frame) - 4)


def test_duplicate_offer_skips_data():
    store = ServerStore()
    b = batch()
    commit_batch(store, b)
    offer = encode_frame(control(OFFER, b.batch_id, 2, b.checksum))
    # a DATA frame after ALREADY_COMMITTED would be a protocol violation, so
    # the server must not have read one: the next frame it sees is OFFER
    replies = run_raw(store, offer + offer)
    assert [r["type"] for r in replies] == [ALREADY_COMMITTED, ALREADY_COMMITTED]
    assert replies[0]["checksum"] == b.checksum and len(store) == 2


def test_checksum_mismatch_keeps_connection():
    store = ServerStore()
    b = batch()
    offer = encode_frame(control(OFFER, b.batch_id, 2, "0" * 16))
    replies = run_raw(store, offer + encode_frame(data(b.payload())) + exchange(b))
    assert [r["type"] for r in replies] == [OFFER_ACK, REJECT, OFFER_ACK, COMMIT]
    assert replies[1]["reason"] == "checksum mismatch"
    assert len(store) == 2


@pytest.mark.parametrize("frame", [
    control(OFFER, "zz", 1, "0" * 16),
    control(OFFER, "ab" * 16, 0, "0" * 16),
    control(OFFER, "ab" * 16, True, "0" * 16),
    control(OFFER, "ab" * 16, 1, "short"),
    control(COMMIT, "ab" * 16, 1, "0" * 16),
    data("a,b\n"),
])
def test_bad_opening_frame_rejected_and_closed(frame):
    store = ServerStore()
    replies = run_raw(store, encode_frame(frame) + exchange(batch()))
    assert [r["type"] for r in replies] == [REJECT]
    assert len(store) == 0


def test_garbage_bytes_rejected():
    replies = run_raw(ServerStore(), b"\x00\x00\x00\x05hello")
    assert [r["type"] for r in replies] == [REJECT]


def test_row_count_mismatch():
    store = ServerStore()
    b = batch(2)
    three = batch(3).payload()
    offer = encode_frame(control(OFFER, b.batch_id, 2, checksum(three)))
    replies = run_raw(store, offer + encode_frame(data(three)))
    assert replies[-1]["type"] == REJECT and "received 3" in replies[-1]["reason"]
    assert len(store) == 0


def test_truncated_data_persists_nothing():
    store = ServerStore()
    b = batch(3)
    lines = b.payload().splitlines(keepends=True)
    offer = encode_frame(control(OFFER, b.batch_id, 3, b.checksum))
    replies = run_raw(store, offer + encode_frame(data("".join(lines[:2]))))
    assert replies[-1]["type"] == REJECT and len(store) == 0


def test_batch_id_must_match_content():
    store = ServerStore()
    b = batch(2)
    other = batch(2, pid="P0002")
    offer = encode_frame(control(OFFER, b.batch_id, 2, other.checksum))
    replies = run_raw(store, offer + encode_frame(data(other.payload())))
    assert replies[-1]["type"] == REJECT and "batch id" in replies[-1]["reason"]
    assert len(store) == 0


def test_non_data_frame_mid_batch():
    store = ServerStore()
    b = batch()
    offer = encode_frame(control(OFFER, b.batch_id, 2, b.checksum))
    replies = run_raw(store, offer + offer)
    assert [r["type"] for r in replies] == [OFFER_ACK, REJECT]


def test_record_level_dedup():
    store = ServerStore()
    recs = [make_record("P0001", s) for s in range(3)]
    a = SyncBatch.of(recs[:2])
    b = SyncBatch.of(recs[1:])
    commit_batch(store, a)
    commit_batch(store, b)
    assert len(store) == 3 and store.committed_batches == {a.batch_id, b.batch_id}
    assert not store.commit(a.batch_id, a.checksum, a.payload(), list(a.records))


# -- durability ------------------------------------------------------------------------

def test_crash_recovery_replays_log(tmp_path):
    d = str(tmp_path / "srv")
    store = ServerStore(d)
    batches = [batch(2, pid=f"P000{i}") for i in range(4)]
    for b in batches:
        commit_batch(store, b)
    before = sorted(r.record_id for r in store.records())
    # no close(): the process died
    with open(os.path.join(d, LOG_NAME), "a", encoding="utf-8") as fh:
        fh.write('{"batch_id":"ffff')
    again = ServerStore(d)
    assert sorted(r.record_id for r in again.records()) == before
    assert again.committed_batches == {b.batch_id for b in batches}
    assert sorted(again.records(), key=lambda r: r.record_id) == sorted(store.records(), key=lambda r: r.record_id)


def test_compaction(tmp_path):
    d = str(tmp_path / "srv")
    store = ServerStore(d, compact_every=3)
    batches = [batch(2, pid=f"P000{i}") for i in range(5)]
    for b in batches:
        commit_batch(store, b)
    with open(os.path.join(d, MANIFEST_NAME), encoding="utf-8") as fh:
        meta = json.load(fh)
    assert meta["generation"] == 0 and len(meta["batches"]) == 3
    with open(os.path.join(d, LOG_NAME), encoding="utf-8") as fh:
        assert len(fh.readlines()) == 2
    store.compact()
    store.close()
    files = sorted(f for f in os.listdir(d) if f.startswith("records-"))
    assert files == ["records-1-v1.csv"]
    assert os.path.getsize(os.path.join(d, LOG_NAME)) == 0
    again = ServerStore(d, readonly=True)
    assert len(again) == 10 and again.committed_batches == {b.batch_id for b in batches}
    with pytest.raises(PermissionError):
        commit_batch(again, batch(1, pid="P0009"))


def test_readonly_missing_dir(tmp_path):
    with pytest.raises(FileNotFoundError):
        ServerStore(str(tmp_path / "nope"), readonly=True)


# -- export ---------------------------------------------------------------------------

def test_export_filters_and_order():
    store = ServerStore()
    recs = make_records(participants=3, sessions=4, seed=2)
    for pid in {r.participant_id for r in recs}:
        commit_batch(store, SyncBatch.of([r for r in recs if r.participant_id == pid]))
    rows = export(store)
    assert rows == sorted(recs, key=lambda r: r.sort_key())
    assert [r.condition for r in rows[:3]] == ["positive", "neutral", "negative"]
    neutral = export(store, ExportFilter(conditions=frozenset({"neutral"})))
    assert len(neutral) == len(recs) // 3
    assert len(export(store, ExportFilter(participants=frozenset({"P0001"})))) == 12
    assert len(export(store, ExportFilter(start=1000.0, end=3000.0))) == 3 * 2 * 3
    retained = export(store, ExportFilter(retained_only=True))
    assert len(retained) == sum(r.retained for r in recs)
    assert export(store, ExportFilter(participants=frozenset({"nobody"}))) == []


# -- network ---------------------------------------------------------------------------

def test_plaintext_requires_insecure_flag():
    with pytest.raises(InsecureTransportError):
        IngestServer(("127.0.0.1", 0), ServerStore())
    with pytest.raises(InsecureTransportError):
        tcp_connector("127.0.0.1", 1)


def test_concurrent_clients_over_tcp():
    store = ServerStore()
    srv = IngestServer(("127.0.0.1", 0), store, insecure=True)
    srv.start()
    try:
        port = srv.server_address[1]
        devices = [filled_store([make_record(f"P{d:04d}", s, c) for s in range(20)
                                 for c in ("positive", "neutral", "negative")]) for d in range(8)]
        reports = [None] * len(devices)

        def run(i):
            reports[i] = sync_once(devices[i], tcp_connector("127.0.0.1", port, insecure=True),
                                   batch_size=7, rows_per_frame=2)

        threads = [threading.Thread(target=run, args=(i,)) for i in range(len(devices))]
        for t in threads:
            t.start()
        for t in threads:
            t.join(30)
    finally:
        srv.stop()
    assert all(r.ok for r in reports)
    assert all(len(d) == 0 for d in devices)
    assert len(store) == 8 * 60
    for pid, ids in store.participants.items():
        assert len(ids) == 60


def test_tls_round_trip(tmp_path):
    pytest.importorskip("cryptography")
    certfile, keyfile = self_signed_cert(str(tmp_path))
    store = ServerStore()
    srv = IngestServer(("127.0.0.1", 0), store, ssl_context=server_tls_context(certfile, keyfile))
    srv.start()
    try:
        port = srv.server_address[1]
        device = filled_store(make_records(1, 2))
        report = sync_once(device, tcp_connector("127.0.0.1", port, client_tls_context(certfile)))
        assert report.ok and len(store) == 6
        # a client that does not trust the certificate never gets to send data
        device2 = filled_store(make_records(1, 2, seed=5)[:1])
        bad = sync_once(device2, tcp_connector("127.0.0.1", port, client_tls_context()), max_retries=1)
        assert bad.failed and any("CERTIFICATE" in e.upper() for e in bad.errors)
        assert len(device2) == 1
    finally:
        srv.stop()
    assert len(store) == 6


def test_tls_channel_reports_secure(tmp_path):
    pytest.importorskip("cryptography")
    certfile, keyfile = self_signed_cert(str(tmp_path))
    srv = IngestServer(("127.0.0.1", 0), ServerStore(), ssl_context=server_tls_context(certfile, keyfile))
    srv.start()
    try:
        ch = tcp_connector("localhost", srv.server_address[1], client_tls_context(certfile))()
        assert ch.secure and isinstance(ch.sock, ssl.SSLSocket)
        assert ch.sock.version() in ("TLSv1.2", "TLSv1.3")
        ch.close()
    finally:
        srv.stop()


def test_loopback_harness_matches_tcp():
    store = ServerStore()
    loop = Loopback(store)
    device = filled_store(make_records(2, 2))
    assert sync_once(device, loop.connect).ok
    loop.join()
    assert records_to_csv(export(store)) == records_to_csv(sorted(make_records(2, 2), key=lambda r: r.sort_key()))
