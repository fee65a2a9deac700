"""Two-stage quality control of per-recording feature vectors."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

from .features import FeatureVector, SchemaError

VOICING_MIN = 0.5
HNR_MIN_DB = 0.0

RULE_LOW_VOICING = "voicing_prob_lt_0.5"
RULE_NO_SEGMENTS = "voiced_segments_per_sec_eq_0"
RULE_ZERO_SEGMENT_LEN = "mean_voiced_segment_len_eq_0"
RULE_LOW_HNR = "hnr_le_0db"

REQUIRED = ("mean_voicing_prob", "voiced_segments_per_sec", "mean_voiced_segment_len_s", "hnr_mean_db")


@dataclass(frozen=True)
class QcVerdict:
    voice_absent: bool
    low_quality_hnr: bool
    reasons: tuple = ()

    @property
    def retained(self) -> bool:
        return not (self.voice_absent or self.low_quality_hnr)


def judge(fv: FeatureVector) -> QcVerdict:
    for name in REQUIRED:
        if name not in fv:
            raise SchemaError(f"QC needs feature {name!r} (schema {fv.schema_version})")
    reasons = []
    if fv["mean_voicing_prob"] < VOICING_MIN:
        reasons.append(RULE_LOW_VOICING)
    if fv["voiced_segments_per_sec"] == 0:
        reasons.append(RULE_NO_SEGMENTS)
    if fv["mean_voiced_segment_len_s"] == 0:
        reasons.append(RULE_ZERO_SEGMENT_LEN)
    voice_absent = bool(reasons)
    low_hnr = fv["hnr_mean_db"] <= HNR_MIN_DB
    if low_hnr:
        reasons.append(RULE_LOW_HNR)
    return QcVerdict(voice_absent, low_hnr, tuple(reasons))


@dataclass
class QcSummary:
    total: int = 0
    dropped_voice_absent: int = 0
    dropped_low_hnr: int = 0
    retained: int = 0
    per_participant: dict = field(default_factory=dict)

    def as_dict(self):
        return {
            "total": self.total,
            "dropped_voice_absent": self.dropped_voice_absent,
            "dropped_low_hnr": self.dropped_low_hnr,
            "retained": self.retained,
            "per_participant": {k: dict(v) for k, v in sorted(self.per_participant.items())},
        }


def stage_of(verdict: QcVerdict) -> str:
    # voice-absent is checked first, so a double failure lands there
    if verdict.voice_absent:
        return "dropped_voice_absent"
    if verdict.low_quality_hnr:
        return "dropped_low_hnr"
    return "retained"


def summarize(verdicts) -> QcSummary:
    """Count verdicts given as ``(record_id, participant_id, QcVerdict)`` triples."""
    seen = set()
    summary = QcSummary()
    per = {}
    for record_id, participant_id, verdict in verdicts:
        if record_id in seen:
            raise ValueError(f"duplicate recording id {record_id!r}")
        seen.add(record_id)
        stage = stage_of(verdict)
        summary.total += 1
        setattr(summary, stage, getattr(summary, stage) + 1)
        counts = per.setdefault(participant_id, Counter(total=0, dropped_voice_absent=0, dropped_low_hnr=0, retained=0))
        counts["total"] += 1
        counts[stage] += 1
    summary.per_participant = per
    return summary
