"""Drive the full simulate -> extract -> qc -> sync -> export -> analyze chain
through the command-line entry point."""

import os
import signal
import subprocess
import sys
import time

from prosokit.cli import main

SKIP_SUFFIXES = (".sqlite", ".port")


def _cli(*argv):
    code = main([str(a) for a in argv])
    if code != 0:
        raise AssertionError(f"prosokit {' '.join(map(str, argv))} exited {code}")


def start_server(data_dir, port_file):
    env = dict(os.environ, PYTHONUNBUFFERED="1")
    proc = subprocess.Popen(
        [sys.executable, "-m", "prosokit.cli", "serve", "--listen", "127.0.0.1:0", "--data-dir", data_dir,
         "--insecure-test-transport", "--port-file", port_file],
        env=env, stdout=subprocess.DEVNULL, stderr=subprocess.PIPE,
    )
    deadline = time.monotonic() + 60
    while not os.path.exists(port_file):
        if proc.poll() is not None or time.monotonic() > deadline:
            proc.kill()
            raise RuntimeError(f"server did not start: {proc.stderr.read().decode()}")
        time.sleep(0.05)
    with open(port_file) as fh:
        return proc, int(fh.read())


def stop_server(proc):
    proc.send_signal(signal.SIGTERM)
    try:
        proc.wait(30)
    except subprocess.TimeoutExpired:
        proc.kill()
        raise
    if proc.returncode != 0:
        raise RuntimeError(f"server exited {proc.returncode}: {proc.stderr.read().decode()}")


def run_pipeline(root, seed=7, threads=1, participants=6, sessions=4, sample_rate=8000,
                 trees=40, folds=3):
    """Run every stage under ``root``; returns {relative path: bytes} of all outputs."""
    root = str(root)
    sim, work, srv = (os.path.join(root, d) for d in ("sim", "work", "server"))
    os.makedirs(work, exist_ok=True)
    store = os.path.join(work, "device.sqlite")
    _cli("simulate", "--out", sim, "--participants", participants, "--sessions", sessions,
         "--sample-rate", sample_rate, "--silence-rate", 0.05, "--noise-rate", 0.03,
         "--seed", seed, "--threads", threads)
    _cli("extract", "--recordings", os.path.join(sim, "recordings.csv"), "--store", store,
         "--threads", threads, "--manifest", os.path.join(work, "extract.manifest.json"))
    _cli("qc", "--store", store, "--summary", os.path.join(work, "qc.json"),
         "--manifest", os.path.join(work, "qc.manifest.json"))
    proc, port = start_server(srv, os.path.join(root, "server.port"))
    try:
        _cli("sync", "--store", store, "--connect", f"127.0.0.1:{port}", "--insecure-test-transport",
             "--report", os.path.join(work, "sync.json"), "--manifest", os.path.join(work, "sync.manifest.json"))
    finally:
        stop_server(proc)
    export = os.path.join(work, "export.csv")
    _cli("export", "--data-dir", srv, "--out", export)
    _cli("analyze", "lmm", "--in", export, "--out", os.path.join(work, "lmm.csv"))
    _cli("analyze", "predict", "--in", export, "--target", "arousal", "--out", os.path.join(work, "predict.csv"),
         "--summary", os.path.join(work, "predict.json"), "--folds", folds, "--trees", trees,
         "--seed", seed, "--threads", threads)
    _cli("analyze", "diagnostics", "--in", export, "--out", os.path.join(work, "diagnostics.csv"))
    out = {}
    for base, _dirs, files in os.walk(root):
        for name in files:
            if name.endswith(SKIP_SUFFIXES):
                continue
            path = os.path.join(base, name)
            with open(path, "rb") as fh:
                out[os.path.relpath(path, root)] = fh.read()
    return out
