"""Frame-level pitch/voicing/HNR/loudness and the clip-level feature vector.

The per-recording vector ("schema v1", 20 named values) is the unit that
leaves the device. Frame quantities never do.

Pitch and voicing come from the normalized cross-correlation of each
mean-removed frame with its lagged self::

    r(t) = sum x[n] x[n+t] / sqrt(sum x[n]^2 * sum x[n+t]^2)

with both energy sums taken over the overlapping region only, so r is
exactly 1 at the period of a periodic frame, independent of amplitude and
of the shrinking overlap at long lags.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .audio import FRAME_LEN_S, HOP_S, AudioClip, frame, hann

F0_MIN_HZ = 55.0
F0_MAX_HZ = 500.0
VOICING_THRESHOLD = 0.45
# a peak at a shorter lag wins over the global maximum if it reaches this
# fraction of it (guards against picking 2x or 3x the period)
OCTAVE_TOLERANCE = 0.9
HNR_EPS = 1e-6
HNR_SENTINEL_DB = -100.0
CSV_DIGITS = 9

SCHEMA_V1 = "v1"
FEATURE_NAMES_V1 = (
    "mean_voicing_prob",
    "voiced_segments_per_sec",
    "mean_voiced_segment_len_s",
    "hnr_mean_db",
    "loudness_mean",
    "f0_mean_hz",
    "f0_sd_hz",
    "f0_range_2_98_hz",
    "loudness_sd",
    "f0_p20_hz",
    "f0_p50_hz",
    "f0_p80_hz",
    "loudness_p20",
    "loudness_p50",
    "loudness_p80",
    "hnr_sd_db",
    "voicing_prob_sd",
    "energy_mean",
    "voiced_segment_len_sd_s",
    "voiced_frame_fraction",
)
EXTRACTABLE_COLUMN = "extractable"
# non-feature columns tolerated (and dropped) when reading external CSVs
_EXTERNAL_META_COLUMNS = {"name", "file", "filename", "frametime", "start", "end", "record_id", "class"}


class SchemaError(ValueError):
    pass


class UnvoicedFrameError(ValueError):
    pass


def canonical(value: float) -> float:
    """Round to the 9 significant digits used by every CSV and checksum."""
    return float(format(float(value), f".{CSV_DIGITS}g"))


def format_value(value: float) -> str:
    return format(float(value), f".{CSV_DIGITS}g")


@dataclass(frozen=True, eq=False)
class FeatureVector:
    """Named per-recording features at 9-significant-digit precision."""

    values: tuple
    names: tuple = FEATURE_NAMES_V1
    schema_version: str = SCHEMA_V1
    extractable: bool = True

    def __post_init__(self):
        names = tuple(self.names)
        vals = tuple(canonical(v) for v in self.values)
        if len(vals) != len(names):
            raise SchemaError(f"{len(vals)} values for {len(names)} names")
        if self.schema_version == SCHEMA_V1 and names != FEATURE_NAMES_V1:
            raise SchemaError("v1 vectors must use the v1 name order")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_mapping(cls, mapping, extractable=True):
        missing = [n for n in FEATURE_NAMES_V1 if n not in mapping]
        if missing:
            raise SchemaError(f"missing feature column {missing[0]!r}")
        return cls(tuple(mapping[n] for n in FEATURE_NAMES_V1), extractable=extractable)

    @classmethod
    def sentinel(cls):
        vals = [0.0] * len(FEATURE_NAMES_V1)
        vals[FEATURE_NAMES_V1.index("hnr_mean_db")] = HNR_SENTINEL_DB
        return cls(tuple(vals), extractable=False)

    def __getitem__(self, name):
        try:
            return self.values[self.names.index(name)]
        except ValueError:
            raise KeyError(name) from None

    def __contains__(self, name):
        return name in self.names

    def __len__(self):
        return len(self.values)

    def as_dict(self):
        return dict(zip(self.names, self.values))

    def as_array(self):
        return np.asarray(self.values, dtype=np.float64)

    def __eq__(self, other):
        if not isinstance(other, FeatureVector):
            return NotImplemented
        return (self.names, self.values, self.schema_version, self.extractable) == (
            other.names, other.values, other.schema_version, other.extractable)

    def __hash__(self):
        return hash((self.names, self.values, self.schema_version, self.extractable))


@dataclass(frozen=True)
class FrameTrack:
    """Frame-level measurements for one clip.

    ``hnr_db`` is NaN on unvoiced frames; ``f0_hz`` is 0 there.
    """

    times: np.ndarray
    f0_hz: np.ndarray
    voicing_prob: np.ndarray
    hnr_db: np.ndarray
    loudness: np.ndarray
    energy_rms: np.ndarray
    hop_s: float = HOP_S

    @property
    def voiced(self) -> np.ndarray:
        return self.f0_hz > 0


def lag_bounds(sample_rate: int, frame_len: int) -> tuple[int, int]:
    lo = max(2, math.ceil(sample_rate / F0_MAX_HZ))
    hi = min(int(sample_rate // F0_MIN_HZ), frame_len - 2)
    if hi <= lo:
        raise ValueError(f"frame of {frame_len} samples is too short for the pitch search at {sample_rate} Hz")
    return lo, hi


def nccf(frames: np.ndarray, lo: int, hi: int) -> np.ndarray:
    """Normalized cross-correlation at lags ``lo-1 .. hi+1`` for each row.

    Frames are mean-removed first. Rows whose overlapping energy is
    negligible get 0.
    """
    x = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    x = x - x.mean(axis=1, keepdims=True)
    n = x.shape[1]
    nfft = 1 << int(math.ceil(math.log2(2 * n)))
    spec = np.fft.rfft(x, nfft, axis=1)
    ac = np.fft.irfft(spec.real ** 2 + spec.imag ** 2, nfft, axis=1)
    lags = np.arange(lo - 1, hi + 2)
    num = ac[:, lags]
    c = np.concatenate([np.zeros((x.shape[0], 1)), np.cumsum(x * x, axis=1)], axis=1)
    head = c[:, n - lags]
    tail = c[:, n][:, None] - c[:, lags]
    den = np.sqrt(np.maximum(head, 0.0) * np.maximum(tail, 0.0))
    total = c[:, n][:, None]
    ok = den > 1e-9 * total
    r = np.zeros_like(num)
    np.divide(num, den, out=r, where=ok)
    return r


def _parabolic(rm, r0, rp):
    den = rm - 2.0 * r0 + rp
    with np.errstate(divide="ignore", invalid="ignore"):
        shift = np.where(den < 0, 0.5 * (rm - rp) / den, 0.0)
    shift = np.clip(shift, -0.5, 0.5)
    peak = r0 - 0.25 * (rm - rp) * shift
    return shift, np.maximum(peak, r0)


def _pitch_frames(frames: np.ndarray, sample_rate: int):
    """Vectorized pitch/voicing/peak-correlation for a frame matrix."""
    nfr, n = frames.shape
    if nfr == 0:
        z = np.zeros(0)
        return z, z, z
    lo, hi = lag_bounds(sample_rate, n)
    r = nccf(frames, lo, hi)
    inner = r[:, 1:-1]  # lags lo..hi
    gmax = inner.max(axis=1)
    is_peak = (inner >= r[:, :-2]) & (inner > r[:, 2:])
    strong = is_peak & (inner >= OCTAVE_TOLERANCE * gmax[:, None]) & (inner > 0)
    has = strong.any(axis=1)
    idx = np.where(has, strong.argmax(axis=1), inner.argmax(axis=1))
    rows = np.arange(nfr)
    shift, peak = _parabolic(r[rows, idx], r[rows, idx + 1], r[rows, idx + 2])
    lag = lo + idx + shift
    vp = np.clip(gmax, 0.0, 1.0)
    voiced = vp >= VOICING_THRESHOLD
    f0 = np.where(voiced, np.clip(sample_rate / lag, F0_MIN_HZ, F0_MAX_HZ), 0.0)
    return f0, vp, np.where(voiced, peak, 0.0)


def estimate_f0_and_voicing(frame_samples, sample_rate: int) -> tuple[float, float]:
    """Return ``(f0_hz, voicing_prob)`` for a single frame; f0 is 0 when unvoiced."""
    x = np.asarray(frame_samples, dtype=np.float64).reshape(1, -1)
    f0, vp, _ = _pitch_frames(x, sample_rate)
    return float(f0[0]), float(vp[0])


def hnr_from_r(r: float) -> float:
    r = min(max(float(r), HNR_EPS), 1.0 - HNR_EPS)
    return 10.0 * math.log10(r / (1.0 - r))


def compute_hnr(frame_samples, f0_lag: float) -> float:
    """Harmonics-to-noise ratio (dB) of a voiced frame at the given period.

    ``f0_lag`` is the period in samples (may be fractional, in which case the
    correlation peak is interpolated). A lag of 0 or None marks the frame as
    unvoiced and is rejected.
    """
    if f0_lag is None or not f0_lag > 0:
        raise UnvoicedFrameError("HNR is only defined on voiced frames")
    x = np.asarray(frame_samples, dtype=np.float64).reshape(1, -1)
    k = int(round(f0_lag))
    if k < 2 or k + 2 > x.shape[1]:
        raise ValueError(f"lag {f0_lag} outside the frame")
    if not np.any(x - x.mean()):
        raise UnvoicedFrameError("frame carries no signal")
    r = nccf(x, k, k)[0]
    if abs(f0_lag - k) < 1e-12:
        value = r[1]
    else:
        _, value = _parabolic(r[0:1], r[1:2], r[2:3])
        value = value[0]
    return hnr_from_r(value)


def frame_track(clip: AudioClip, frame_len_s: float = FRAME_LEN_S, hop_s: float = HOP_S) -> FrameTrack:
    rect = frame(clip, frame_len_s, hop_s, "rectangular")
    f0, vp, peak = _pitch_frames(rect.frames, clip.sample_rate)
    hnr = np.full(f0.shape, np.nan)
    voiced = f0 > 0
    rp = np.clip(peak[voiced], HNR_EPS, 1.0 - HNR_EPS)
    hnr[voiced] = 10.0 * np.log10(rp / (1.0 - rp))
    if rect.n_frames:
        windowed = rect.frames * hann(rect.frame_len)
        power = np.mean(windowed * windowed, axis=1)
    else:
        power = np.zeros(0)
    return FrameTrack(rect.frame_times, f0, vp, hnr, np.cbrt(power), np.sqrt(power), hop_s)


def voiced_runs(voiced: np.ndarray) -> np.ndarray:
    """Lengths (in frames) of maximal runs of True."""
    v = np.concatenate([[0], np.asarray(voiced, dtype=np.int8), [0]])
    d = np.diff(v)
    starts = np.flatnonzero(d == 1)
    ends = np.flatnonzero(d == -1)
    return ends - starts


def _sd(x):
    return float(np.std(x, ddof=1)) if len(x) > 1 else 0.0


def summarize_track(track: FrameTrack, duration_s: float) -> FeatureVector:
    voiced = track.voiced
    runs = voiced_runs(voiced)
    f0v = track.f0_hz[voiced]
    hnrv = track.hnr_db[voiced]
    if f0v.size:
        p2, p20, p50, p80, p98 = np.percentile(f0v, [2, 20, 50, 80, 98])
        f0_stats = dict(
            f0_mean_hz=f0v.mean(), f0_sd_hz=_sd(f0v), f0_range_2_98_hz=max(p98 - p2, 0.0),
            f0_p20_hz=p20, f0_p50_hz=p50, f0_p80_hz=p80,
            hnr_mean_db=hnrv.mean(), hnr_sd_db=_sd(hnrv),
        )
    else:
        f0_stats = dict(
            f0_mean_hz=0.0, f0_sd_hz=0.0, f0_range_2_98_hz=0.0,
            f0_p20_hz=0.0, f0_p50_hz=0.0, f0_p80_hz=0.0,
            hnr_mean_db=HNR_SENTINEL_DB, hnr_sd_db=0.0,
        )
    lp20, lp50, lp80 = np.percentile(track.loudness, [20, 50, 80])
    seg_len = runs * track.hop_s
    values = dict(
        mean_voicing_prob=track.voicing_prob.mean(),
        voiced_segments_per_sec=runs.size / duration_s,
        mean_voiced_segment_len_s=seg_len.mean() if runs.size else 0.0,
        loudness_mean=track.loudness.mean(),
        loudness_sd=_sd(track.loudness),
        loudness_p20=lp20, loudness_p50=lp50, loudness_p80=lp80,
        voicing_prob_sd=_sd(track.voicing_prob),
        energy_mean=track.energy_rms.mean(),
        voiced_segment_len_sd_s=_sd(seg_len),
        voiced_frame_fraction=voiced.mean(),
        **f0_stats,
    )
    return FeatureVector.from_mapping(values)


def extract_features(clip: AudioClip) -> FeatureVector:
    """Full per-recording extraction: frame pass followed by functionals.

    A clip shorter than one analysis frame gives the sentinel vector with
    ``extractable=False``.
    """
    track = frame_track(clip)
    if track.f0_hz.size == 0:
        return FeatureVector.sentinel()
    return summarize_track(track, clip.duration_s)


# -- CSV ------------------------------------------------------------------------

def header_for(fv: FeatureVector) -> list[str]:
    if fv.schema_version == SCHEMA_V1:
        return [EXTRACTABLE_COLUMN, *fv.names]
    return list(fv.names)


def to_csv_row(fv: FeatureVector) -> str:
    cells = [format_value(v) for v in fv.values]
    if fv.schema_version == SCHEMA_V1:
        cells.insert(0, "1" if fv.extractable else "0")
    return ",".join(cells)


def to_csv(vectors, ids=None, id_column="record_id") -> str:
    vectors = list(vectors)
    if not vectors:
        return ""
    head = header_for(vectors[0])
    out = io.StringIO()
    out.write(",".join(([id_column] if ids is not None else []) + head) + "\n")
    for i, fv in enumerate(vectors):
        if header_for(fv) != head:
            raise SchemaError("all vectors in one CSV must share a schema")
        prefix = f"{ids[i]}," if ids is not None else ""
        out.write(prefix + to_csv_row(fv) + "\n")
    return out.getvalue()


def _sniff_delimiter(first_line: str) -> str:
    return ";" if first_line.count(";") > first_line.count(",") else ","


def parse_csv_with_ids(text: str, id_column="record_id"):
    """Parse a feature CSV, returning ``(ids, vectors)``.

    ``ids`` is None when the CSV has no id column. A header carrying any v1
    feature name is held to the full v1 schema; anything else is read as an
    opaque external vector named ``external-<P>``.
    """
    lines = text.splitlines()
    if not lines:
        return None, []
    delim = _sniff_delimiter(lines[0])
    rows = list(csv.reader(lines, delimiter=delim))
    header = [h.strip().strip("'\"") for h in rows[0]]
    body = [r for r in rows[1:] if r]

    if any(h in FEATURE_NAMES_V1 for h in header):
        for name in (EXTRACTABLE_COLUMN, *FEATURE_NAMES_V1):
            if name not in header:
                raise SchemaError(f"schema {SCHEMA_V1}: missing column {name!r}")
        col = {h: i for i, h in enumerate(header)}
        ids = [r[col[id_column]] for r in body] if id_column in col else None
        out = []
        for r in body:
            if len(r) != len(header):
                raise SchemaError(f"row has {len(r)} cells, header has {len(header)}")
            vals = tuple(float(r[col[n]]) for n in FEATURE_NAMES_V1)
            out.append(FeatureVector(vals, extractable=r[col[EXTRACTABLE_COLUMN]].strip() == "1"))
        return ids, out

    keep = [i for i, h in enumerate(header) if h.lower() not in _EXTERNAL_META_COLUMNS]
    idc = header.index(id_column) if id_column in header else None
    if idc is None and header and header[0].lower() == "name":
        idc = 0
    names = tuple(header[i] for i in keep)
    version = f"external-{len(names)}"
    out = []
    for r in body:
        if len(r) != len(header):
            raise SchemaError(f"row has {len(r)} cells, header has {len(header)}")
        out.append(FeatureVector(tuple(float(r[i]) for i in keep), names=names, schema_version=version))
    ids = [r[idc].strip("'\"") for r in body] if idc is not None else None
    return ids, out


def parse_csv(text: str) -> list[FeatureVector]:
    return parse_csv_with_ids(text)[1]
