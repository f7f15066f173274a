import numpy as np
import pytest

from holdsense.classify import NEGATIVE_LABEL
from holdsense.errors import SegmentationError
from holdsense.pipeline import (
    Pipeline,
    enroll,
    merge,
    negative_cohort,
    simulate_dataset,
    simulate_trial,
    subseed,
)
from holdsense.signal import SignalSpec
from holdsense.simchan import Recording, get_environment


def test_subseed_is_stable_and_distinct():
    assert subseed(7, "trial", 1, 2) == subseed(7, "trial", 1, 2)
    seen = {subseed(7, "trial", 1, 2), subseed(7, "trial", 2, 1), subseed(8, "trial", 1, 2),
            subseed(7, "other", 1, 2)}
    assert len(seen) == 4


def test_pipeline_feature_shapes(small_cohort, note5, office, pipe3):
    rec = simulate_trial(pipe3, small_cohort[0], note5, office, 3, 0, 0)
    rows = pipe3.segment_features(rec)
    assert rows.shape == (3, 293)
    assert np.allclose(pipe3.features(rec), rows.mean(axis=0))
    vote = Pipeline(pipe3.spec, aggregate="vote")
    assert vote.features(rec).shape == (3, 293)


def test_with_chirps_keeps_settings():
    p = Pipeline(order=6).with_chirps(4)
    assert p.spec.n_chirps == 4 and p.order == 6
    assert p.transmit.samples.size == 4 * p.spec.period


def test_simulated_dataset_is_deterministic(small_cohort, note5, office, pipe3):
    a = simulate_dataset(small_cohort[:2], note5, office, pipe3, 3, 9)
    b = simulate_dataset(small_cohort[:2], note5, office, pipe3, 3, 9)
    assert a.X.tobytes() == b.X.tobytes() and list(a.y) == list(b.y)
    c = simulate_dataset(small_cohort[:2], note5, office, pipe3, 3, 10)
    assert not np.array_equal(a.X, c.X)


def test_dataset_labels_and_counts(small_data, small_cohort):
    assert set(small_data.y) == {h.user_id for h in small_cohort}
    assert all(n == 12 for n in small_data.counts().values())


def test_negative_cohort_and_merge(small_data, note5, office, pipe3):
    neg = negative_cohort(note5, office, pipe3, 4, count=3, sequences=4)
    assert set(neg.y) == {NEGATIVE_LABEL} and neg.X.shape == (12, 293)
    both = merge(small_data, neg)
    assert both.X.shape[0] == small_data.X.shape[0] + 12
    model = enroll(both)
    assert NEGATIVE_LABEL in model.classes


def test_silence_is_unsegmentable(pipe3):
    with pytest.raises(SegmentationError):
        pipe3.segments(Recording(np.zeros(pipe3.transmit.samples.size + 2000), 48000))


def test_enrolled_model_recognizes_fresh_holds(small_cohort, small_data, note5, office, pipe3):
    model = enroll(small_data)
    hits = 0
    for u, hand in enumerate(small_cohort):
        for t in range(3):
            rec = simulate_trial(pipe3, hand, note5, office, 5, u, 100 + t)
            hits += model.predict(pipe3.features(rec))[0] == hand.user_id
    assert hits >= 0.7 * 3 * len(small_cohort)


def test_public_environment_is_noisier(small_cohort, note5):
    pipe = Pipeline(SignalSpec(n_chirps=1))
    office = simulate_trial(pipe, small_cohort[0], note5, get_environment("office"), 1, 0, 0)
    public = simulate_trial(pipe, small_cohort[0], note5, get_environment("public"), 1, 0, 0)
    assert public.provenance["noise_std"] > office.provenance["noise_std"]
