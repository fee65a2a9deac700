"""Prompt-session protocol and a synthetic cohort generator.

A session is one EMA voice prompt: three recordings, one per lexical
valence, in random order, each reading three sentences drawn with
replacement from that valence's bank. The cohort simulator wraps sessions
with compliance behaviour and a synthetic voice so the rest of the
pipeline can run on desk-scale data.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from typing import Iterator

import numpy as np
from scipy.signal import lfilter

from .audio import AudioClip, quantize16
from .features import FeatureVector, extract_features
from .qc import judge
from .records import VALENCES, RecordingRecord

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

MIN_RECORDING_S = 4.0
MAX_RECORDING_S = 12.0
SENTENCES_PER_RECORDING = 3


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Sentence:
    id: str
    text: str
    valence: str


class SentenceBank:
    def __init__(self, sentences):
        self.sentences = tuple(sentences)
        ids = [s.id for s in self.sentences]
        if len(set(ids)) != len(ids):
            raise ConfigError("sentence ids must be unique")
        for s in self.sentences:
            if s.valence not in VALENCES:
                raise ConfigError(f"sentence {s.id!r} has unknown valence {s.valence!r}")
        self._by_id = {s.id: s for s in self.sentences}

    def subset(self, valence) -> tuple:
        return tuple(s for s in self.sentences if s.valence == valence)

    def __getitem__(self, sentence_id):
        return self._by_id[sentence_id]

    def __len__(self):
        return len(self.sentences)

    @classmethod
    def from_csv(cls, text: str) -> "SentenceBank":
        reader = csv.DictReader(io.StringIO(text))
        missing = {"id", "valence", "text"} - set(reader.fieldnames or ())
        if missing:
            raise ConfigError(f"sentence bank is missing column(s) {sorted(missing)}")
        return cls(Sentence(r["id"], r["text"], r["valence"]) for r in reader)

    @classmethod
    def load(cls, path=None) -> "SentenceBank":
        if path is None:
            text = resources.files("prosokit").joinpath("data/sentences.csv").read_text(encoding="utf-8")
        else:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        return cls.from_csv(text)


@dataclass(frozen=True)
class PlannedRecording:
    valence: str
    sentence_ids: tuple


@dataclass(frozen=True)
class SessionPlan:
    session_id: str
    participant_id: str
    timestamp: float
    condition_order: tuple
    recordings: tuple


def plan_session(bank: SentenceBank, participant_id: str, rng: np.random.Generator,
                 session_id: str | None = None, timestamp: float = 0.0) -> SessionPlan:
    """Draw condition order and sentences for one prompt.

    The order is ``rng.permutation(3)`` over (positive, neutral, negative);
    each recording then takes three independent uniform draws (with
    replacement) from its valence's sentences, in bank order.
    """
    subsets = {v: bank.subset(v) for v in VALENCES}
    for v, sub in subsets.items():
        if not sub:
            raise ConfigError(f"sentence bank has no {v} sentences")
    order = tuple(VALENCES[i] for i in rng.permutation(len(VALENCES)))
    recordings = []
    for v in order:
        picks = rng.integers(0, len(subsets[v]), size=SENTENCES_PER_RECORDING)
        recordings.append(PlannedRecording(v, tuple(subsets[v][i].id for i in picks)))
    sid = session_id if session_id is not None else f"{participant_id}-s000"
    return SessionPlan(sid, participant_id, float(timestamp), order, tuple(recordings))


def enforce_duration(started_at: float, attempted_stop_at: float | None):
    """Apply the 4 s minimum / 12 s auto-stop rule to one stop attempt.

    Returns ``(stopped_at, stop_cause)``. An attempt before the minimum gives
    ``(None, "rejected_too_short")``: the recording keeps running. No attempt
    (``None``), or one at or past 12 s, yields the automatic stop at exactly
    12 s.
    """
    if attempted_stop_at is not None and attempted_stop_at < started_at:
        raise ValueError("stop attempt precedes start")
    if attempted_stop_at is None:
        return started_at + MAX_RECORDING_S, "auto"
    # compare on a millisecond grid so 4.0 and 12.0 are exact
    elapsed_ms = round((attempted_stop_at - started_at) * 1000)
    if elapsed_ms < MIN_RECORDING_S * 1000:
        return None, "rejected_too_short"
    if elapsed_ms >= MAX_RECORDING_S * 1000:
        return started_at + MAX_RECORDING_S, "auto"
    return started_at + elapsed_ms / 1000.0, "manual"


def session_outcome(rng: np.random.Generator, skip_prob: float, completion_prob: float) -> int:
    """Number of recordings a prompt yields: 0 (skipped), 1 (abandoned) or 3."""
    if rng.random() < skip_prob:
        return 0
    return 3 if rng.random() < completion_prob else 1


# -- cohort configuration ----------------------------------------------------------

@dataclass(frozen=True)
class VoiceModel:
    female_f0_mean_hz: float = 200.0
    female_f0_sd_hz: float = 20.0
    male_f0_mean_hz: float = 120.0
    male_f0_sd_hz: float = 15.0
    f0_spread_st: float = 1.5
    f0_spread_sd_st: float = 0.3
    recording_f0_jitter_st: float = 0.4
    snr_db_mean: float = 24.0
    snr_db_sd: float = 4.0
    reading_s_mean: float = 7.0
    reading_s_sd: float = 1.2
    segment_s: tuple = (0.25, 0.7)
    gap_s: tuple = (0.06, 0.16)
    forget_stop_prob: float = 0.0


@dataclass(frozen=True)
class AffectModel:
    arousal_link: float = 0.15
    valence_link: float = 0.05
    trait_sd: float = 0.7
    rating_noise_sd: float = 1.0


@dataclass(frozen=True)
class ConditionEffect:
    spread_scale: float = 1.0
    segment_rate_scale: float = 1.0
    snr_shift_db: float = 0.0
    gain_scale: float = 1.0


DEFAULT_CONDITION_EFFECTS = {
    "positive": ConditionEffect(spread_scale=1.0, segment_rate_scale=0.96, snr_shift_db=0.6, gain_scale=0.99),
    "neutral": ConditionEffect(),
    "negative": ConditionEffect(spread_scale=1.0, segment_rate_scale=1.04, snr_shift_db=-0.6, gain_scale=0.99),
}


@dataclass(frozen=True)
class CohortConfig:
    participants: int = 20
    sessions_per_participant: int = 18
    skip_prob: float = 0.0
    completion_prob: float = 1.0
    female_fraction: float = 0.46
    sample_rate: int = 44100
    silence_rate: float = 0.0
    noise_rate: float = 0.0
    sentence_bank: str | None = None
    voice: VoiceModel = field(default_factory=VoiceModel)
    affect: AffectModel = field(default_factory=AffectModel)
    conditions: dict = field(default_factory=lambda: dict(DEFAULT_CONDITION_EFFECTS))

    def __post_init__(self):
        for name in ("skip_prob", "completion_prob", "female_fraction", "silence_rate", "noise_rate"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must be a probability, got {p}")
        if self.silence_rate + self.noise_rate > 1.0:
            raise ConfigError("silence_rate + noise_rate exceeds 1")
        if not 0.0 <= self.voice.forget_stop_prob <= 1.0:
            raise ConfigError("voice.forget_stop_prob must be a probability")
        if self.participants < 1 or self.sessions_per_participant < 0:
            raise ConfigError("participants must be >= 1 and sessions_per_participant >= 0")
        if self.sample_rate < 8000:
            raise ConfigError("sample_rate below 8000 Hz cannot resolve the pitch band")
        if set(self.conditions) != set(VALENCES):
            raise ConfigError("conditions must define positive, neutral and negative")


def _build(cls, table, where):
    known = {f.name for f in fields(cls)}
    unknown = set(table) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")
    kwargs = {}
    for k, v in table.items():
        kwargs[k] = tuple(v) if isinstance(v, list) else v
    return cls(**kwargs)


def config_from_mapping(data: dict) -> CohortConfig:
    data = dict(data)
    voice = _build(VoiceModel, data.pop("voice", {}), "[voice]")
    affect = _build(AffectModel, data.pop("affect", {}), "[affect]")
    conds = dict(DEFAULT_CONDITION_EFFECTS)
    for name, table in data.pop("conditions", {}).items():
        conds[name] = _build(ConditionEffect, table, f"[conditions.{name}]")
    known = {f.name for f in fields(CohortConfig)} - {"voice", "affect", "conditions"}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")
    return CohortConfig(voice=voice, affect=affect, conditions=conds, **data)


def load_config(path=None, **overrides) -> CohortConfig:
    if path is None:
        text = resources.files("prosokit").joinpath("data/cohort.toml").read_text(encoding="utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse cohort config: {exc}") from exc
    cfg = config_from_mapping(data)
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return replace(cfg, **overrides) if overrides else cfg


# -- synthetic voice -------------------------------------------------------------

@dataclass(frozen=True)
class Speaker:
    participant_id: str
    sex: str
    base_f0_hz: float
    f0_spread_st: float
    snr_db: float
    reading_s: float
    gain: float
    valence_trait: float
    arousal_trait: float


def synthesize_voice(rng: np.random.Generator, duration_s: float, sample_rate: int, base_f0_hz: float,
                     spread_st: float, speech_s: float, snr_db: float, gain: float = 0.4,
                     segment_s=(0.25, 0.7), gap_s=(0.06, 0.16), segment_rate_scale: float = 1.0) -> np.ndarray:
    """Speech-like test signal: voiced bursts of a low-passed pulse train.

    The pitch contour wanders around ``base_f0_hz`` by roughly
    ``spread_st`` semitones; bursts cover ``speech_s`` seconds and are
    separated by short pauses. White noise is mixed in at ``snr_db``
    relative to the voiced power, then the result is quantized to 16 bits.
    """
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate
    ph1, ph2 = rng.uniform(0, 2 * np.pi, size=2)
    st = (spread_st * np.sin(2 * np.pi * 0.55 * t + ph1)
          + 0.5 * spread_st * np.sin(2 * np.pi * 1.7 * t + ph2)
          - 0.8 * spread_st * t / max(duration_s, 1e-9))
    f0 = np.clip(base_f0_hz * 2.0 ** (st / 12.0), 60.0, 480.0)
    phase = np.cumsum(f0) / sample_rate
    pulse = 2.0 * (phase % 1.0) - 1.0
    # spectral tilt plus one broad resonance
    src = lfilter([1.0], [1.0, -0.6], pulse)
    fr, bw = 700.0, 250.0
    rad = math.exp(-math.pi * bw / sample_rate)
    theta = 2 * math.pi * fr / sample_rate
    voiced = lfilter([1.0 - rad], [1.0, -2 * rad * math.cos(theta), rad * rad], src)

    env = np.zeros(n)
    ramp = max(1, int(0.015 * sample_rate))
    pos = int(rng.uniform(0.02, 0.08) * sample_rate)
    stop = min(n, int(speech_s * sample_rate))
    while pos < stop:
        seg = int(rng.uniform(*segment_s) / segment_rate_scale * sample_rate)
        end = min(stop, pos + seg)
        if end - pos > 2 * ramp:
            w = np.ones(end - pos)
            edge = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
            w[:ramp] = edge
            w[-ramp:] = edge[::-1]
            env[pos:end] = w
        pos = end + int(rng.uniform(*gap_s) * segment_rate_scale * sample_rate)

    sig = voiced * env
    active = env > 0.5
    power = float(np.mean(sig[active] ** 2)) if active.any() else 1.0
    sig = sig / math.sqrt(power)
    noise = rng.standard_normal(n) * 10.0 ** (-snr_db / 20.0)
    x = sig + noise
    peak = float(np.max(np.abs(x))) or 1.0
    x = x * (gain / peak)
    return quantize16(x).astype(np.float64) / 32768.0


def _silence(rng, n):
    # a few LSBs of dither, as a muted microphone would deliver
    return quantize16(rng.standard_normal(n) * 1.5 / 32768.0).astype(np.float64) / 32768.0


def _white_noise(rng, n, gain):
    x = rng.standard_normal(n)
    x = x * (gain / np.max(np.abs(x)))
    return quantize16(x).astype(np.float64) / 32768.0


# -- cohort simulation -------------------------------------------------------------

@dataclass
class CohortStats:
    prompts: int = 0
    initiated: int = 0
    completed: int = 0
    recordings: int = 0
    injected_silence: int = 0
    injected_noise: int = 0
    injected: dict = field(default_factory=dict)  # record_id -> "silence" | "noise"
    rejected_stop_attempts: int = 0

    @property
    def initiation_rate(self) -> float:
        return self.initiated / self.prompts if self.prompts else math.nan

    @property
    def completion_rate(self) -> float:
        return self.completed / self.initiated if self.initiated else math.nan

    def merge(self, other: "CohortStats"):
        for f in ("prompts", "initiated", "completed", "recordings", "injected_silence",
                  "injected_noise", "rejected_stop_attempts"):
            setattr(self, f, getattr(self, f) + getattr(other, f))
        self.injected.update(other.injected)


@dataclass(frozen=True)
class SimulatedRecording:
    """A recording before the device pipeline runs: metadata plus audio."""

    record_id: str
    session_id: str
    participant_id: str
    condition: str
    sentence_ids: tuple
    started_at: float
    stopped_at: float
    stop_cause: str
    affect_valence: int
    affect_arousal: int
    sex: str
    clip: AudioClip | None

    def to_record(self, features: FeatureVector) -> RecordingRecord:
        return RecordingRecord(
            record_id=self.record_id, session_id=self.session_id, participant_id=self.participant_id,
            condition=self.condition, started_at=self.started_at, stopped_at=self.stopped_at,
            stop_cause=self.stop_cause, features=features, qc=judge(features),
            affect_valence=self.affect_valence, affect_arousal=self.affect_arousal, sex=self.sex,
        )


def _draw_speaker(cfg: CohortConfig, pid: str, rng: np.random.Generator) -> Speaker:
    v = cfg.voice
    female = rng.random() < cfg.female_fraction
    if female:
        f0 = rng.normal(v.female_f0_mean_hz, v.female_f0_sd_hz)
    else:
        f0 = rng.normal(v.male_f0_mean_hz, v.male_f0_sd_hz)
    return Speaker(
        participant_id=pid,
        sex="female" if female else "male",
        base_f0_hz=float(np.clip(f0, 70.0, 400.0)),
        f0_spread_st=float(max(0.2, rng.normal(v.f0_spread_st, v.f0_spread_sd_st))),
        snr_db=float(rng.normal(v.snr_db_mean, v.snr_db_sd)),
        reading_s=float(np.clip(rng.normal(v.reading_s_mean, v.reading_s_sd), 3.0, 13.0)),
        gain=float(np.clip(rng.lognormal(np.log(0.35), 0.3), 0.05, 0.95)),
        valence_trait=float(rng.normal(0, cfg.affect.trait_sd)),
        arousal_trait=float(rng.normal(0, cfg.affect.trait_sd)),
    )


def _rating(x: float) -> int:
    return int(np.clip(np.round(x), 1, 6))


def _stop_time(rng, start, reading_s, forget_prob):
    if rng.random() < forget_prob:
        return enforce_duration(start, None), 0
    attempt = start + reading_s + rng.uniform(0.2, 0.8)
    rejected = 0
    while True:
        stopped, cause = enforce_duration(start, attempt)
        if stopped is not None:
            return (stopped, cause), rejected
        rejected += 1
        attempt += rng.uniform(0.3, 1.2)


def simulate_participant(cfg: CohortConfig, index: int, bank: SentenceBank,
                         rng: np.random.Generator, stats: CohortStats,
                         with_audio: bool = True) -> Iterator[SimulatedRecording]:
    """Run the prompt protocol for one participant.

    ``with_audio=False`` skips synthesis and yields recordings with
    ``clip=None``. The protocol model is unchanged, but since synthesis no
    longer consumes draws, the realized sessions differ from an audio run
    with the same seed.
    """
    pid = f"P{index:04d}"
    spk = _draw_speaker(cfg, pid, rng)
    sr = cfg.sample_rate
    aff = cfg.affect
    for k in range(cfg.sessions_per_participant):
        stats.prompts += 1
        clock = k * 86400.0 + 20 * 3600.0 + float(rng.uniform(0, 3 * 3600))
        plan = plan_session(bank, pid, rng, session_id=f"{pid}-s{k:03d}", timestamp=clock)
        n_rec = session_outcome(rng, cfg.skip_prob, cfg.completion_prob)
        if n_rec == 0:
            continue
        stats.initiated += 1
        stats.completed += n_rec == 3
        arousal = float(rng.normal())
        valence = float(rng.normal())
        a_rating = _rating(3.5 + spk.arousal_trait + 0.8 * arousal + rng.normal(0, aff.rating_noise_sd))
        v_rating = _rating(3.5 + spk.valence_trait + 0.8 * valence + rng.normal(0, aff.rating_noise_sd))
        session_f0 = spk.base_f0_hz * 2.0 ** (rng.normal(0, cfg.voice.recording_f0_jitter_st) / 12.0)
        t = clock
        for planned in plan.recordings[:n_rec]:
            eff = cfg.conditions[planned.valence]
            start = t
            reading = float(np.clip(spk.reading_s + rng.normal(0, 0.6), 2.5, 14.0))
            (stop, cause), rejected = _stop_time(rng, start, reading, cfg.voice.forget_stop_prob)
            stats.rejected_stop_attempts += rejected
            duration = stop - start
            n = int(round(duration * sr))
            rid = f"{plan.session_id}-{planned.valence[:3]}"
            if not with_audio:
                stats.recordings += 1
                yield SimulatedRecording(
                    record_id=rid, session_id=plan.session_id, participant_id=pid, condition=planned.valence,
                    sentence_ids=planned.sentence_ids, started_at=start, stopped_at=stop, stop_cause=cause,
                    affect_valence=v_rating, affect_arousal=a_rating, sex=spk.sex, clip=None,
                )
                t = stop + 5.0
                continue
            u = rng.random()
            if u < cfg.silence_rate:
                samples = _silence(rng, n)
                stats.injected_silence += 1
                stats.injected[rid] = "silence"
            elif u < cfg.silence_rate + cfg.noise_rate:
                samples = _white_noise(rng, n, spk.gain)
                stats.injected_noise += 1
                stats.injected[rid] = "noise"
            else:
                spread = spk.f0_spread_st * eff.spread_scale * math.exp(aff.arousal_link * arousal)
                gain = min(0.95, spk.gain * eff.gain_scale * math.exp(0.05 * arousal + aff.valence_link * valence))
                samples = synthesize_voice(
                    rng, duration, sr,
                    base_f0_hz=session_f0 * 2.0 ** (rng.normal(0, 0.15) / 12.0),
                    spread_st=spread, speech_s=min(reading, duration), snr_db=spk.snr_db + eff.snr_shift_db,
                    gain=gain, segment_s=cfg.voice.segment_s, gap_s=cfg.voice.gap_s,
                    segment_rate_scale=eff.segment_rate_scale,
                )
            stats.recordings += 1
            yield SimulatedRecording(
                record_id=rid, session_id=plan.session_id, participant_id=pid, condition=planned.valence,
                sentence_ids=planned.sentence_ids, started_at=start, stopped_at=stop, stop_cause=cause,
                affect_valence=v_rating, affect_arousal=a_rating, sex=spk.sex,
                clip=AudioClip(samples, sr),
            )
            t = stop + float(rng.uniform(3.0, 10.0))


def participant_streams(seed: int, n: int) -> list:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def simulate_recordings(cfg: CohortConfig, seed: int, stats: CohortStats | None = None,
                        bank: SentenceBank | None = None, with_audio: bool = True) -> Iterator[SimulatedRecording]:
    """Yield raw simulated recordings, participant by participant.

    Each participant draws from its own child stream of ``seed``, so the
    output does not depend on how participants are scheduled.
    """
    bank = bank or SentenceBank.load(cfg.sentence_bank)
    stats = stats if stats is not None else CohortStats()
    for i, rng in enumerate(participant_streams(seed, cfg.participants)):
        yield from simulate_participant(cfg, i, bank, rng, stats, with_audio)


def simulate_cohort(cfg: CohortConfig, seed: int, stats: CohortStats | None = None,
                    bank: SentenceBank | None = None, extract=extract_features) -> Iterator[RecordingRecord]:
    """Simulate a cohort and push every recording through extraction and QC.

    Audio is released as soon as its features exist.
    """
    for sim in simulate_recordings(cfg, seed, stats, bank):
        fv = extract(sim.clip)
        sim.clip.release()
        yield sim.to_record(fv)
