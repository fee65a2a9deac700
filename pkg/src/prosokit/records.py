"""The synced payload unit and its canonical CSV form.

The canonical serialization is what batch checksums are computed over and
what the ingest server persists, so its formatting is fixed: floats at 9
significant digits, timestamps at millisecond resolution, booleans as 0/1.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

from .features import (
    EXTRACTABLE_COLUMN,
    FEATURE_NAMES_V1,
    SCHEMA_V1,
    FeatureVector,
    SchemaError,
    format_value,
)
from .qc import QcVerdict

VALENCES = ("positive", "neutral", "negative")
STOP_CAUSES = ("manual", "auto", "rejected_too_short")
SEXES = ("female", "male")

META_COLUMNS = (
    "record_id", "session_id", "participant_id", "condition",
    "started_at", "stopped_at", "stop_cause",
    "affect_valence", "affect_arousal", "sex",
    "voice_absent", "low_quality_hnr", "qc_reasons",
    "schema_version", EXTRACTABLE_COLUMN,
)


@dataclass(frozen=True)
class RecordingRecord:
    record_id: str
    session_id: str
    participant_id: str
    condition: str
    started_at: float
    stopped_at: float
    stop_cause: str
    features: FeatureVector
    qc: QcVerdict
    affect_valence: int
    affect_arousal: int
    sex: str

    def __post_init__(self):
        if self.condition not in VALENCES:
            raise ValueError(f"unknown condition {self.condition!r}")
        if self.stop_cause not in STOP_CAUSES:
            raise ValueError(f"unknown stop cause {self.stop_cause!r}")
        for item in ("affect_valence", "affect_arousal"):
            if getattr(self, item) not in range(1, 7):
                raise ValueError(f"{item} must be an integer in 1..6")
        if self.sex not in SEXES:
            raise ValueError(f"unknown sex {self.sex!r}")
        object.__setattr__(self, "started_at", round(float(self.started_at), 3))
        object.__setattr__(self, "stopped_at", round(float(self.stopped_at), 3))

    @property
    def duration_s(self) -> float:
        return round(self.stopped_at - self.started_at, 3)

    @property
    def retained(self) -> bool:
        return self.qc.retained

    def sort_key(self):
        return (self.participant_id, self.session_id, VALENCES.index(self.condition))


def header(feature_names) -> list[str]:
    return [*META_COLUMNS, *feature_names]


def _row(rec: RecordingRecord) -> list[str]:
    fv = rec.features
    return [
        rec.record_id, rec.session_id, rec.participant_id, rec.condition,
        f"{rec.started_at:.3f}", f"{rec.stopped_at:.3f}", rec.stop_cause,
        str(rec.affect_valence), str(rec.affect_arousal), rec.sex,
        str(int(rec.qc.voice_absent)), str(int(rec.qc.low_quality_hnr)), "|".join(rec.qc.reasons),
        fv.schema_version, str(int(fv.extractable)),
        *(format_value(v) for v in fv.values),
    ]


def records_to_csv(records) -> str:
    """Canonical CSV block (header + one line per record, LF endings)."""
    records = list(records)
    if not records:
        return ""
    names = records[0].features.names
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(header(names))
    for rec in records:
        if rec.features.names != names:
            raise SchemaError("records in one CSV block must share a feature schema")
        w.writerow(_row(rec))
    return out.getvalue()


def records_from_csv(text: str) -> list[RecordingRecord]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        return []
    head = rows[0]
    n_meta = len(META_COLUMNS)
    if tuple(head[:n_meta]) != META_COLUMNS:
        missing = [c for c in META_COLUMNS if c not in head]
        raise SchemaError(f"record CSV header mismatch (missing {missing[:1] or 'ordering'})")
    names = tuple(head[n_meta:])
    out = []
    for r in rows[1:]:
        if not r:
            continue
        if len(r) != len(head):
            raise SchemaError(f"record row has {len(r)} cells, header has {len(head)}")
        m = dict(zip(META_COLUMNS, r[:n_meta]))
        version = m["schema_version"]
        if version == SCHEMA_V1 and names != FEATURE_NAMES_V1:
            raise SchemaError("v1 records must carry the v1 feature columns")
        fv = FeatureVector(
            tuple(float(v) for v in r[n_meta:]), names=names,
            schema_version=version, extractable=m[EXTRACTABLE_COLUMN] == "1",
        )
        qc = QcVerdict(m["voice_absent"] == "1", m["low_quality_hnr"] == "1",
                       tuple(x for x in m["qc_reasons"].split("|") if x))
        out.append(RecordingRecord(
            record_id=m["record_id"], session_id=m["session_id"], participant_id=m["participant_id"],
            condition=m["condition"], started_at=float(m["started_at"]), stopped_at=float(m["stopped_at"]),
            stop_cause=m["stop_cause"], features=fv, qc=qc,
            affect_valence=int(m["affect_valence"]), affect_arousal=int(m["affect_arousal"]), sex=m["sex"],
        ))
    return out
