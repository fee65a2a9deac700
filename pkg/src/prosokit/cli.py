"""``prosokit`` command line: the whole pipeline as file-to-file steps.

Exit codes: 0 success, 1 data error, 2 usage error. Every run writes a JSON
manifest (inputs, parameters, seeds and output digests; no timestamps), so
rerunning with the same inputs and seed must reproduce the same bytes.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import signal
import sqlite3
import sys
import threading
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__
from .audio import AudioError, read_wav, write_wav
from .cv import TARGETS, cross_validate, dataset_from_records, per_condition_evaluation, task_for
from .device import DEFAULT_BATCH_SIZE, DEFAULT_MAX_RETRIES, LocalStore, RecordingContext, ingest_recording, should_sync, sync_once
from .features import SCHEMA_V1, SchemaError, extract_features, format_value, parse_csv_with_ids, to_csv
from .forest import CLASSIFY, CLASSIFIER_DEFAULTS, REGRESSOR_DEFAULTS, Hyperparams
from .qc import judge, stage_of, summarize
from .records import META_COLUMNS, VALENCES, RecordingRecord, records_from_csv, records_to_csv
from .server import ExportFilter, IngestServer, ServerStore, export
from .session import CohortStats, ConfigError, SimulatedRecording, load_config, simulate_recordings
from .stats import CONTRASTS, DegenerateInputError, SingularDesignError, bh_adjust, fit_random_intercept, zstandardize
from .wire import InsecureTransportError, client_tls_context, server_tls_context, tcp_connector

log = logging.getLogger("prosokit")

LMM_METRICS = ("f0_range_2_98_hz", "hnr_mean_db", "voiced_segments_per_sec", "loudness_mean")
LMM_COLUMNS = ("metric", "contrast", "beta", "se", "t", "p_fdr", "icc_p")
DIAGNOSTICS = ("mean_voicing_prob", "voiced_segments_per_sec", "mean_voiced_segment_len_s",
               "hnr_mean_db", "f0_range_2_98_hz", "loudness_mean")
DIAG_QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)
CONTEXT_COLUMNS = (*RecordingContext.__dataclass_fields__, "sentence_ids")

DATA_ERRORS = (AudioError, SchemaError, ConfigError, DegenerateInputError, SingularDesignError,
               InsecureTransportError, ValueError, OSError, sqlite3.Error, KeyError)


class DataError(Exception):
    pass


# -- manifests ----------------------------------------------------------------------

def _digest_bytes(data: bytes) -> str:
    return hashlib.blake2b(data, digest_size=16).hexdigest()


def digest_file(path) -> str:
    with open(path, "rb") as fh:
        return _digest_bytes(fh.read())


def _write_text(path, text):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def write_manifest(path, subcommand, *, parameters=None, seeds=None, inputs=None, outputs=None):
    """Write a run manifest. Output files are named relative to the manifest,
    input files are recorded by role and digest, so two runs in different
    directories produce identical manifests."""
    base = os.path.dirname(os.path.abspath(path))
    manifest = {
        "subcommand": subcommand,
        "tool_version": __version__,
        "schema_version": SCHEMA_V1,
        "seeds": seeds or {},
        "parameters": parameters or {},
        "inputs": {role: d for role, d in sorted((inputs or {}).items())},
        "outputs": {os.path.relpath(os.path.abspath(p), base).replace(os.sep, "/"): d
                    for p, d in sorted((outputs or {}).items())},
    }
    _write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _tree_digests(root):
    out = {}
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(filenames):
            if name == "manifest.json":
                continue
            p = os.path.join(dirpath, name)
            out[p] = digest_file(p)
    return out


def _store_digest(store: LocalStore) -> str:
    return _store_digest_of(store.pending())


# -- helpers -------------------------------------------------------------------------

def _read_text(path) -> str:
    with open(path, encoding="utf-8", newline="") as fh:
        return fh.read()


def _read_records(path) -> list[RecordingRecord]:
    text = _read_text(path)
    if not text.startswith(",".join(META_COLUMNS[:3])):
        raise SchemaError(f"{path} is not a record CSV (expected a {META_COLUMNS[0]!r} header)")
    return records_from_csv(text)


def _host_port(value: str):
    host, sep, port = value.rpartition(":")
    if not sep or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected HOST:PORT, got {value!r}")
    return host or "127.0.0.1", int(port)


def _positive_int(value: str) -> int:
    try:
        n = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {value!r}") from None
    if n < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {n}")
    return n


def _pool_map(fn, items, threads):
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _load_wav(path):
    try:
        return read_wav(path)
    except AudioError as exc:
        raise AudioError(f"{path}: {exc}") from None


def _safe_extract(clip):
    try:
        return extract_features(clip)
    except Exception as exc:  # handed to ingest_recording, which substitutes the sentinel
        return exc


def _replay(result):
    def extractor(_clip):
        if isinstance(result, Exception):
            raise result
        return result
    return extractor


# -- extract -------------------------------------------------------------------------

def cmd_extract(args):
    if args.recordings:
        return _extract_recordings(args)
    if not args.inputs or not args.out:
        raise DataError("extract needs --in/--out, or --recordings/--store")
    clips = [_load_wav(p) for p in args.inputs]
    vectors = _pool_map(extract_features, clips, args.threads)
    ids = [os.path.splitext(os.path.basename(p))[0] for p in args.inputs]
    inputs = {f"in[{i}]": digest_file(p) for i, p in enumerate(args.inputs)}
    for clip in clips:
        clip.release()
    if args.delete:
        for p in args.inputs:
            os.remove(p)
    _write_text(args.out, to_csv(vectors, ids=ids))
    write_manifest(args.manifest or args.out + ".manifest.json", "extract",
                   parameters={"delete": args.delete}, inputs=inputs, outputs={args.out: digest_file(args.out)})
    return 0


def _read_contexts(path):
    rows = list(csv.DictReader(io.StringIO(_read_text(path))))
    if rows and tuple(rows[0]) != CONTEXT_COLUMNS:
        raise SchemaError(f"{path}: unexpected recording-context header")
    return rows


def _context_from_row(row) -> RecordingContext:
    return RecordingContext(
        record_id=row["record_id"], session_id=row["session_id"], participant_id=row["participant_id"],
        condition=row["condition"], started_at=float(row["started_at"]), stopped_at=float(row["stopped_at"]),
        stop_cause=row["stop_cause"], affect_valence=int(row["affect_valence"]),
        affect_arousal=int(row["affect_arousal"]), sex=row["sex"],
    )


def _extract_recordings(args):
    if not args.store:
        raise DataError("--recordings requires --store")
    audio_dir = args.audio_dir or os.path.join(os.path.dirname(os.path.abspath(args.recordings)), "audio")
    rows = _read_contexts(args.recordings)
    inputs = {"recordings": digest_file(args.recordings)}
    os.makedirs(os.path.dirname(os.path.abspath(args.store)), exist_ok=True)
    store = LocalStore(args.store)
    try:
        done = set(store.pending_ids())
        todo = [r for r in rows if r["record_id"] not in done]

        def load(row):
            path = os.path.join(audio_dir, row["record_id"] + ".wav")
            clip = _load_wav(path)
            return path, clip, _safe_extract(clip)

        for row, (path, clip, result) in zip(todo, _pool_map(load, todo, args.threads)):
            ingest_recording(store, clip, _context_from_row(row), extractor=_replay(result))
            if args.delete:
                os.remove(path)
        digest = _store_digest(store)
        n = len(store)
    finally:
        store.close()
    print(f"ingested {len(todo)} recordings; {n} pending in {args.store}")
    write_manifest(args.manifest or args.store + ".extract.manifest.json", "extract",
                   parameters={"delete": args.delete}, inputs=inputs, outputs={args.store: digest})
    return 0


# -- qc ------------------------------------------------------------------------------

def cmd_qc(args):
    outputs = {}
    if args.store:
        store = LocalStore(args.store)
        try:
            records = store.pending()
        finally:
            store.close()
        inputs = {"store": _store_digest_of(records)}
    elif args.inputs:
        text = _read_text(args.inputs)
        inputs = {"in": digest_file(args.inputs)}
        if text.startswith(",".join(META_COLUMNS[:3])):
            records = [_rejudge(r) for r in records_from_csv(text)]
            if args.out:
                _write_text(args.out, records_to_csv(records))
        else:
            records = None
            ids, vectors = parse_csv_with_ids(text)
            ids = ids or [str(i) for i in range(len(vectors))]
            verdicts = [judge(fv) for fv in vectors]
            triples = [(rid, "", v) for rid, v in zip(ids, verdicts)]
            if args.out:
                out = io.StringIO()
                w = csv.writer(out, lineterminator="\n")
                w.writerow(["record_id", "voice_absent", "low_quality_hnr", "stage", "qc_reasons"])
                for rid, v in zip(ids, verdicts):
                    w.writerow([rid, int(v.voice_absent), int(v.low_quality_hnr), stage_of(v), "|".join(v.reasons)])
                _write_text(args.out, out.getvalue())
    else:
        raise DataError("qc needs --in or --store")
    if records is not None:
        triples = [(r.record_id, r.participant_id, r.qc) for r in records]
    summary = json.dumps(summarize(triples).as_dict(), indent=2, sort_keys=True) + "\n"
    if args.summary:
        _write_text(args.summary, summary)
        outputs[args.summary] = digest_file(args.summary)
    else:
        sys.stdout.write(summary)
    if args.out:
        outputs[args.out] = digest_file(args.out)
    primary = args.out or args.summary or (args.store + ".qc")
    write_manifest(args.manifest or primary + ".manifest.json", "qc", inputs=inputs, outputs=outputs)
    return 0


def _store_digest_of(records):
    return _digest_bytes(records_to_csv(records).encode("utf-8")) if records else _digest_bytes(b"")


def _rejudge(rec: RecordingRecord) -> RecordingRecord:
    from dataclasses import replace
    return replace(rec, qc=judge(rec.features))


# -- simulate ------------------------------------------------------------------------

def _config_from_args(args):
    return load_config(
        args.config, participants=args.participants, sessions_per_participant=args.sessions,
        sample_rate=args.sample_rate, silence_rate=args.silence_rate, noise_rate=args.noise_rate,
        skip_prob=args.skip_prob, completion_prob=args.completion_prob,
    )


def _context_row(sim: SimulatedRecording):
    ctx = RecordingContext.of(sim)
    cells = []
    for name in CONTEXT_COLUMNS:
        if name == "sentence_ids":
            cells.append("|".join(sim.sentence_ids))
        elif name in ("started_at", "stopped_at"):
            cells.append(f"{getattr(ctx, name):.3f}")
        else:
            cells.append(str(getattr(ctx, name)))
    return cells


def cmd_simulate(args):
    cfg = _config_from_args(args)
    stats = CohortStats()
    os.makedirs(args.out, exist_ok=True)
    if args.features_only:
        sims = list(simulate_recordings(cfg, args.seed, stats))
        vectors = _pool_map(lambda s: extract_features(s.clip), sims, args.threads)
        records = []
        for sim, fv in zip(sims, vectors):
            sim.clip.release()
            records.append(sim.to_record(fv))
        _write_text(os.path.join(args.out, "records.csv"), records_to_csv(records))
    else:
        audio_dir = os.path.join(args.out, "audio")
        os.makedirs(audio_dir, exist_ok=True)
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(CONTEXT_COLUMNS)
        for sim in simulate_recordings(cfg, args.seed, stats):
            write_wav(os.path.join(audio_dir, sim.record_id + ".wav"), sim.clip.samples, sim.clip.sample_rate)
            sim.clip.release()
            w.writerow(_context_row(sim))
        _write_text(os.path.join(args.out, "recordings.csv"), out.getvalue())
    stats_doc = {
        "prompts": stats.prompts, "initiated": stats.initiated, "completed": stats.completed,
        "recordings": stats.recordings, "injected_silence": stats.injected_silence,
        "injected_noise": stats.injected_noise, "rejected_stop_attempts": stats.rejected_stop_attempts,
        "injected": dict(sorted(stats.injected.items())),
    }
    _write_text(os.path.join(args.out, "cohort_stats.json"), json.dumps(stats_doc, indent=2, sort_keys=True) + "\n")
    inputs = {"config": digest_file(args.config)} if args.config else {"config": "builtin-default"}
    params = {k: getattr(args, k) for k in ("participants", "sessions", "sample_rate", "silence_rate", "noise_rate",
                                            "skip_prob", "completion_prob", "features_only")}
    write_manifest(os.path.join(args.out, "manifest.json"), "simulate", parameters=params,
                   seeds={"seed": args.seed}, inputs=inputs, outputs=_tree_digests(args.out))
    print(f"simulated {stats.recordings} recordings from {cfg.participants} participants into {args.out}")
    return 0


# -- sync / serve / export -----------------------------------------------------------

def cmd_sync(args):
    if not should_sync(args.screen_active, not args.no_wifi):
        print("device busy or offline; sync deferred")
        return 0
    host, port = args.connect
    ctx = None if args.insecure_test_transport else client_tls_context(args.cafile)
    connect = tcp_connector(host, port, ssl_context=ctx, insecure=args.insecure_test_transport, timeout=args.timeout)
    store = LocalStore(args.store)
    try:
        before = _store_digest(store)
        report = sync_once(store, connect, batch_size=args.batch_size, max_retries=args.max_retries)
        remaining = len(store)
    finally:
        store.close()
    doc = {
        "committed": len(report.committed), "already_committed": len(report.already_committed),
        "failed": sorted(report.failed), "records_deleted": report.records_deleted,
        "pending_after": remaining,
    }
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    outputs = {}
    if args.report:
        _write_text(args.report, text)
        outputs[args.report] = digest_file(args.report)
    else:
        sys.stdout.write(text)
    write_manifest(args.manifest or args.store + ".sync.manifest.json", "sync",
                   parameters={"batch_size": args.batch_size, "max_retries": args.max_retries},
                   inputs={"store": before}, outputs=outputs)
    if report.failed:
        print(f"{len(report.failed)} batch(es) left pending after {args.max_retries} attempts", file=sys.stderr)
        return 1
    return 0


def cmd_serve(args):
    if args.insecure_test_transport:
        ctx = None
    elif args.cert and args.key:
        ctx = server_tls_context(args.cert, args.key)
    else:
        raise DataError("serve needs --cert and --key, or --insecure-test-transport for loopback tests")
    store = ServerStore(args.data_dir)
    server = IngestServer(args.listen, store, ssl_context=ctx, insecure=args.insecure_test_transport)
    host, port = server.server_address[:2]
    write_manifest(os.path.join(args.data_dir, "serve.manifest.json"), "serve",
                   parameters={"tls": ctx is not None})
    if args.port_file:
        _write_text(args.port_file + ".tmp", f"{port}\n")
        os.replace(args.port_file + ".tmp", args.port_file)
    print(f"listening on {host}:{port} ({'TLS' if ctx else 'INSECURE test transport'})", flush=True)
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    server.start()
    try:
        while not stop.wait(0.2):
            pass
    finally:
        server.stop()
        store.compact()
        store.close()
    return 0


def cmd_export(args):
    store = ServerStore(args.data_dir, readonly=True)
    flt = ExportFilter(
        participants=frozenset(args.participant) if args.participant else None,
        conditions=frozenset(args.condition) if args.condition else None,
        start=args.start, end=args.end, retained_only=args.retained_only,
    )
    rows = export(store, flt)
    by_schema = {r.features.schema_version for r in rows}
    if len(by_schema) > 1:
        raise SchemaError(f"export spans several schemas {sorted(by_schema)}; filter to one")
    _write_text(args.out, records_to_csv(rows))
    write_manifest(args.manifest or args.out + ".manifest.json", "export",
                   parameters={"participant": sorted(args.participant or []), "condition": sorted(args.condition or []),
                               "start": args.start, "end": args.end, "retained_only": args.retained_only},
                   inputs={"store": _store_digest_of(sorted(store.records(), key=RecordingRecord.sort_key))},
                   outputs={args.out: digest_file(args.out)})
    print(f"exported {len(rows)} records to {args.out}")
    return 0


# -- analyze -------------------------------------------------------------------------

def lmm_table(records, metrics=LMM_METRICS) -> str:
    """Condition contrasts vs neutral per metric, BH-adjusted across all rows."""
    if not records:
        raise DataError("no records to analyze")
    cond = np.array([r.condition for r in records])
    group = np.array([r.participant_id for r in records])
    rows = []
    for metric in metrics:
        if metric not in records[0].features:
            raise SchemaError(f"unknown metric {metric!r}")
        y = zstandardize([r.features[metric] for r in records])
        fit = fit_random_intercept(y, cond, group)
        for c in CONTRASTS:
            beta, se, t, p = fit.coef(f"{c}_vs_neutral")
            rows.append([metric, f"{c}_vs_neutral", beta, se, t, p, fit.icc_p])
    adjusted = bh_adjust([r[5] for r in rows])
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(LMM_COLUMNS)
    for row, q in zip(rows, adjusted):
        w.writerow([row[0], row[1], *(format_value(v) for v in row[2:5]), format_value(q), format_value(row[6])])
    return out.getvalue()


def _analysis_records(args):
    records = _read_records(args.inputs)
    if not args.include_dropped:
        records = [r for r in records if r.qc.retained]
    return records


def cmd_lmm(args):
    records = _analysis_records(args)
    metrics = tuple(args.metric) if args.metric else LMM_METRICS
    _write_text(args.out, lmm_table(records, metrics))
    write_manifest(args.manifest or args.out + ".manifest.json", "analyze lmm",
                   parameters={"metrics": list(metrics), "include_dropped": args.include_dropped},
                   inputs={"in": digest_file(args.inputs)}, outputs={args.out: digest_file(args.out)})
    return 0


def _select_features(ds, names):
    if not names:
        return ds
    names = [n.strip() for n in names.split(",") if n.strip()]
    missing = [n for n in names if n not in ds.feature_names]
    if missing:
        raise SchemaError(f"unknown feature(s) {missing}")
    idx = [ds.feature_names.index(n) for n in names]
    ds.X = ds.X[:, idx]
    ds.feature_names = tuple(names)
    return ds


def cmd_predict(args):
    records = _analysis_records(args)
    task = task_for(args.target)
    ds = _select_features(dataset_from_records(records, args.target, retained_only=False), args.features)
    base = CLASSIFIER_DEFAULTS if task == CLASSIFY else REGRESSOR_DEFAULTS
    hp = Hyperparams(num_trees=args.trees or base.num_trees, mtry=args.mtry,
                     min_node_size=args.min_node_size or base.min_node_size)
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    summary = {"target": args.target, "task": task, "n_records": len(ds), "features": list(ds.feature_names)}
    if args.per_condition:
        comp = per_condition_evaluation(ds, task, hp, k=args.folds, seed=args.seed, n_jobs=args.threads)
        w.writerow(["fold", *comp.conditions])
        for f, row in enumerate(comp.mae):
            w.writerow([f, *(format_value(v) for v in row)])
        summary["friedman"] = {"statistic": comp.statistic, "p": comp.p_value}
        summary["per_condition"] = {c: comp.results[c].summary() for c in comp.conditions}
    else:
        res = cross_validate(ds, task, hp, k=args.folds, seed=args.seed, n_jobs=args.threads)
        names = ["balanced_accuracy"] if task == CLASSIFY else ["spearman_rho", "mae"]
        w.writerow(["fold", "n_train", "n_test", *names])
        for m in res.fold_metrics:
            w.writerow([m["fold"], m["n_train"], m["n_test"], *(format_value(m[n]) for n in names)])
        summary["metrics"] = res.summary()
        summary["flags"] = res.flags
    _write_text(args.out, out.getvalue())
    outputs = {args.out: digest_file(args.out)}
    if args.summary:
        _write_text(args.summary, json.dumps(summary, indent=2, sort_keys=True) + "\n")
        outputs[args.summary] = digest_file(args.summary)
    write_manifest(args.manifest or args.out + ".manifest.json", "analyze predict",
                   parameters={"target": args.target, "folds": args.folds, "trees": hp.num_trees, "mtry": args.mtry,
                               "min_node_size": hp.min_node_size, "features": list(ds.feature_names),
                               "per_condition": args.per_condition, "include_dropped": args.include_dropped},
                   seeds={"seed": args.seed}, inputs={"in": digest_file(args.inputs)}, outputs=outputs)
    return 0


def diagnostics_table(records) -> str:
    """Distribution summaries of the key diagnostics, per QC subset and condition."""
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["metric", "subset", "condition", "n", "mean", "sd", *(f"q{int(q * 100):02d}" for q in DIAG_QUANTILES)])
    subsets = (("all", records), ("retained", [r for r in records if r.qc.retained]))
    for metric in DIAGNOSTICS:
        for subset, recs in subsets:
            for cond in ("all", *VALENCES):
                vals = np.array([r.features[metric] for r in recs if cond == "all" or r.condition == cond])
                if vals.size == 0:
                    w.writerow([metric, subset, cond, 0, *[""] * (2 + len(DIAG_QUANTILES))])
                    continue
                sd = vals.std(ddof=1) if vals.size > 1 else float("nan")
                qs = np.quantile(vals, DIAG_QUANTILES)
                w.writerow([metric, subset, cond, vals.size, format_value(vals.mean()), format_value(sd),
                            *(format_value(q) for q in qs)])
    return out.getvalue()


def cmd_diagnostics(args):
    records = _read_records(args.inputs)
    _write_text(args.out, diagnostics_table(records))
    write_manifest(args.manifest or args.out + ".manifest.json", "analyze diagnostics",
                   inputs={"in": digest_file(args.inputs)}, outputs={args.out: digest_file(args.out)})
    return 0


# -- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prosokit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"prosokit {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def common(p, seed=False, threads=False):
        p.add_argument("--manifest", help="manifest path (default: next to the main output)")
        if seed:
            p.add_argument("--seed", type=int, default=0, help="root random seed (default 0)")
        if threads:
            p.add_argument("--threads", type=_positive_int, default=1, help="worker threads (results do not depend on it)")

    p = sub.add_parser("extract", help="WAV files to feature vectors")
    p.add_argument("--in", dest="inputs", action="append", metavar="WAV", help="input WAV (repeatable)")
    p.add_argument("--out", help="feature CSV to write (with --in)")
    p.add_argument("--recordings", help="recordings.csv written by simulate; ingests into --store")
    p.add_argument("--audio-dir", help="WAV directory for --recordings (default: audio/ next to it)")
    p.add_argument("--store", help="device store (SQLite) to enqueue records into")
    p.add_argument("--delete", action="store_true", help="delete each WAV after extraction")
    common(p, threads=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("qc", help="apply the exclusion rules")
    p.add_argument("--in", dest="inputs", help="record CSV or feature CSV")
    p.add_argument("--store", help="device store to summarize instead")
    p.add_argument("--out", help="re-judged records, or per-row verdicts for a feature CSV")
    p.add_argument("--summary", help="JSON summary path (default: stdout)")
    common(p)
    p.set_defaults(func=cmd_qc)

    p = sub.add_parser("simulate", help="simulate a cohort of scripted voice sessions")
    p.add_argument("--config", help="cohort TOML (default: built-in cohort)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--features-only", action="store_true",
                   help="extract in-process and write records.csv instead of audio")
    p.add_argument("--participants", type=_positive_int)
    p.add_argument("--sessions", type=int, help="sessions per participant")
    p.add_argument("--sample-rate", type=int)
    p.add_argument("--silence-rate", type=float)
    p.add_argument("--noise-rate", type=float)
    p.add_argument("--skip-prob", type=float)
    p.add_argument("--completion-prob", type=float)
    common(p, seed=True, threads=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sync", help="push pending records from a device store to a server")
    p.add_argument("--store", required=True)
    p.add_argument("--connect", required=True, type=_host_port, metavar="HOST:PORT")
    p.add_argument("--cafile", help="CA bundle for verifying the server certificate")
    p.add_argument("--insecure-test-transport", action="store_true", help="plaintext loopback (tests only)")
    p.add_argument("--batch-size", type=_positive_int, default=DEFAULT_BATCH_SIZE)
    p.add_argument("--max-retries", type=_positive_int, default=DEFAULT_MAX_RETRIES)
    p.add_argument("--timeout", type=float, default=10.0)
    p.add_argument("--screen-active", action="store_true", help="device in use: defer sync")
    p.add_argument("--no-wifi", action="store_true", help="no WiFi: defer sync")
    p.add_argument("--report", help="JSON report path (default: stdout)")
    common(p)
    p.set_defaults(func=cmd_sync)

    p = sub.add_parser("serve", help="run the ingest server")
    p.add_argument("--listen", required=True, type=_host_port, metavar="HOST:PORT")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--insecure-test-transport", action="store_true", help="plaintext loopback (tests only)")
    p.add_argument("--cert")
    p.add_argument("--key")
    p.add_argument("--port-file", help="write the bound port here once listening")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("export", help="export committed records as CSV")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--participant", action="append")
    p.add_argument("--condition", action="append", choices=VALENCES)
    p.add_argument("--start", type=float, help="keep records started at or after this time (s)")
    p.add_argument("--end", type=float, help="keep records started before this time (s)")
    p.add_argument("--retained-only", action="store_true", help="drop records failing QC")
    common(p)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("analyze", help="statistical analyses")
    asub = p.add_subparsers(dest="analysis", required=True, metavar="ANALYSIS")

    a = asub.add_parser("lmm", help="random-intercept condition contrasts with BH-FDR")
    a.add_argument("--in", dest="inputs", required=True, help="record CSV")
    a.add_argument("--out", required=True)
    a.add_argument("--metric", action="append", help=f"outcome (repeatable; default {', '.join(LMM_METRICS)})")
    a.add_argument("--include-dropped", action="store_true", help="keep records failing QC")
    common(a)
    a.set_defaults(func=cmd_lmm)

    a = asub.add_parser("predict", help="participant-blocked random forest CV")
    a.add_argument("--in", dest="inputs", required=True, help="record CSV")
    a.add_argument("--out", required=True, help="per-fold metrics CSV")
    a.add_argument("--summary", help="JSON summary path")
    a.add_argument("--target", "--task", dest="target", required=True, choices=TARGETS)
    a.add_argument("--features", help="comma-separated feature subset")
    a.add_argument("--folds", type=_positive_int, default=10)
    a.add_argument("--trees", type=_positive_int)
    a.add_argument("--mtry", type=_positive_int)
    a.add_argument("--min-node-size", type=_positive_int)
    a.add_argument("--per-condition", action="store_true", help="per-condition MAE with a Friedman test")
    a.add_argument("--include-dropped", action="store_true")
    common(a, seed=True, threads=True)
    a.set_defaults(func=cmd_predict)

    a = asub.add_parser("diagnostics", help="distribution summaries of key diagnostics")
    a.add_argument("--in", dest="inputs", required=True, help="record CSV")
    a.add_argument("--out", required=True)
    common(a)
    a.set_defaults(func=cmd_diagnostics)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    name = args.command + (f" {args.analysis}" if args.command == "analyze" else "")
    try:
        return args.func(args)
    except (DataError, *DATA_ERRORS) as exc:
        print(f"prosokit {name}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
