import json
import os
from collections import Counter
from itertools import permutations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats as sps

from prosokit.records import VALENCES
from prosokit.session import (
    MAX_RECORDING_S,
    MIN_RECORDING_S,
    CohortConfig,
    CohortStats,
    ConfigError,
    Sentence,
    SentenceBank,
    config_from_mapping,
    enforce_duration,
    load_config,
    plan_session,
    session_outcome,
    simulate_recordings,
)

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


def bank6():
    with open(os.path.join(FIXTURES, "bank6.csv"), encoding="utf-8") as fh:
        return SentenceBank.from_csv(fh.read())


def test_plan_matches_frozen_fixture():
    with open(os.path.join(FIXTURES, "plan_seed20240.json"), encoding="utf-8") as fh:
        ref = json.load(fh)
    plan = plan_session(bank6(), ref["participant_id"], np.random.default_rng(ref["seed"]))
    assert list(plan.condition_order) == ref["condition_order"]
    got = [{"valence": r.valence, "sentence_ids": list(r.sentence_ids)} for r in plan.recordings]
    assert got == ref["recordings"]


@given(st.integers(0, 2**32 - 1))
def test_plan_invariants(seed):
    bank = SentenceBank.load()
    plan = plan_session(bank, "P0001", np.random.default_rng(seed))
    assert sorted(plan.condition_order) == sorted(VALENCES)
    assert tuple(r.valence for r in plan.recordings) == plan.condition_order
    for rec in plan.recordings:
        assert len(rec.sentence_ids) == 3
        assert all(bank[s].valence == rec.valence for s in rec.sentence_ids)


def test_single_sentence_bank_repeats():
    bank = SentenceBank([Sentence("a", "x", "positive"), Sentence("b", "y", "neutral"), Sentence("c", "z", "negative")])
    plan = plan_session(bank, "P", np.random.default_rng(1))
    for rec in plan.recordings:
        assert len(set(rec.sentence_ids)) == 1


def test_empty_valence_rejected():
    bank = SentenceBank([Sentence("a", "x", "positive"), Sentence("b", "y", "neutral")])
    with pytest.raises(ConfigError, match="negative"):
        plan_session(bank, "P", np.random.default_rng(1))


def test_bank_validation():
    with pytest.raises(ConfigError):
        SentenceBank([Sentence("a", "x", "positive"), Sentence("a", "y", "neutral")])
    with pytest.raises(ConfigError):
        SentenceBank.from_csv("id,text\na,b\n")


def test_sentence_draws_uniform():
    bank = SentenceBank.load()
    rng = np.random.default_rng(3)
    counts = Counter()
    for _ in range(4000):
        for rec in plan_session(bank, "P", rng).recordings:
            counts.update(rec.sentence_ids)
    for v in VALENCES:
        obs = [counts[s.id] for s in bank.subset(v)]
        assert sps.chisquare(obs).pvalue > 0.01


def test_order_frequencies():
    rng = np.random.default_rng(11)
    bank = SentenceBank.load()
    counts = Counter(plan_session(bank, "P", rng).condition_order for _ in range(12_000))
    assert set(counts) == set(permutations(VALENCES))
    assert sps.chisquare(list(counts.values())).pvalue > 0.01


@pytest.mark.parametrize("attempt,expected", [
    (3.2, (None, "rejected_too_short")),
    (7.0, (7.0, "manual")),
    (None, (12.0, "auto")),
    (4.0, (4.0, "manual")),
    (3.999, (None, "rejected_too_short")),
    (11.999, (11.999, "manual")),
    (12.0, (12.0, "auto")),
    (15.0, (12.0, "auto")),
])
def test_enforce_duration(attempt, expected):
    assert enforce_duration(0.0, attempt) == expected


def test_enforce_duration_offset_start():
    stop, cause = enforce_duration(1000.25, 1004.25)
    assert cause == "manual" and stop - 1000.25 == pytest.approx(MIN_RECORDING_S)


def test_session_outcome_rates():
    rng = np.random.default_rng(0)
    outs = np.array([session_outcome(rng, 0.322, 0.968) for _ in range(5627)])
    started = outs > 0
    assert abs(started.mean() - 0.678) <= 0.02
    rng = np.random.default_rng(1)
    outs = np.array([session_outcome(rng, 0.0, 0.968) for _ in range(3000)])
    assert abs((outs == 3).mean() - 0.968) <= 0.01


def test_full_cohort_count_and_invariants():
    cfg = load_config(participants=20, sessions_per_participant=18, skip_prob=0.0, completion_prob=1.0,
                      sample_rate=8000)
    stats = CohortStats()
    recs = list(simulate_recordings(cfg, 42, stats, with_audio=False))
    assert len(recs) == 20 * 18 * 3 == stats.recordings
    assert len({r.record_id for r in recs}) == len(recs)
    for r in recs:
        d = round(r.stopped_at - r.started_at, 3)
        assert MIN_RECORDING_S <= d <= MAX_RECORDING_S
        if r.stop_cause == "auto":
            assert d == MAX_RECORDING_S
        assert r.affect_valence in range(1, 7) and r.affect_arousal in range(1, 7)
    by_session = Counter(r.session_id for r in recs)
    assert set(by_session.values()) == {3}


def test_clock_monotone_per_participant():
    cfg = load_config(participants=3, sessions_per_participant=10, sample_rate=8000)
    last = {}
    for r in simulate_recordings(cfg, 9, with_audio=False):
        assert r.started_at > last.get(r.participant_id, -1)
        last[r.participant_id] = r.stopped_at


def test_audio_clip_durations_match():
    cfg = load_config(participants=2, sessions_per_participant=2, skip_prob=0.0, completion_prob=1.0,
                      sample_rate=8000, silence_rate=0.2, noise_rate=0.2)
    for r in simulate_recordings(cfg, 1):
        assert r.clip.duration_s == pytest.approx(r.stopped_at - r.started_at, abs=1 / 8000)


def test_simulation_deterministic():
    cfg = load_config(participants=3, sessions_per_participant=3, sample_rate=8000)
    a = [(r.record_id, r.clip.samples.tobytes()) for r in simulate_recordings(cfg, 5)]
    b = [(r.record_id, r.clip.samples.tobytes()) for r in simulate_recordings(cfg, 5)]
    assert a == b


@pytest.mark.parametrize("bad", [{"skip_prob": 1.5}, {"completion_prob": -0.1}, {"silence_rate": 0.7, "noise_rate": 0.5}])
def test_invalid_probabilities(bad):
    with pytest.raises(ConfigError):
        config_from_mapping(bad)


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="bogus"):
        config_from_mapping({"bogus": 1})
    with pytest.raises(ConfigError):
        config_from_mapping({"voice": {"pitch": 3}})


def test_toml_round_trip(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("participants = 4\nskip_prob = 0.1\n[voice]\nsnr_db_mean = 30.0\n[conditions.negative]\nsnr_shift_db = -2.0\n")
    cfg = load_config(str(p), sample_rate=16000)
    assert cfg.participants == 4 and cfg.skip_prob == 0.1 and cfg.sample_rate == 16000
    assert cfg.voice.snr_db_mean == 30.0
    assert cfg.conditions["negative"].snr_shift_db == -2.0
    assert isinstance(load_config(), CohortConfig)
    p.write_text("participants = [")
    with pytest.raises(ConfigError):
        load_config(str(p))
