"""Glue from recordings to feature rows, and seeded dataset simulation."""

import zlib
from dataclasses import dataclass

import numpy as np

from holdsense import dsp, features, simchan
from holdsense.classify import DEFAULT_CONFIDENCE, NEGATIVE_LABEL, train
from holdsense.selection import DEFAULT_THRESHOLD, LabeledFeatures, select
from holdsense.signal import SignalSpec, make_chirp, make_sequence


def subseed(seed, name, *index):
    """Stable integer seed for the named stream ``name`` at ``index``."""
    key = (zlib.crc32(name.encode()),) + tuple(int(i) for i in index)
    return int(np.random.SeedSequence(int(seed), spawn_key=key).generate_state(1)[0])


@dataclass(frozen=True)
class Pipeline:
    """Preprocessing and feature settings shared by enrolment and identification."""

    spec: SignalSpec = SignalSpec(n_chirps=10)
    band: tuple = dsp.DEFAULT_BAND
    order: int = dsp.DEFAULT_ORDER
    aggregate: str = "mean"

    @property
    def template(self):
        return make_chirp(self.spec)

    @property
    def transmit(self):
        return make_sequence(self.spec)

    def with_chirps(self, n):
        return Pipeline(self.spec.with_(n_chirps=n), self.band, self.order, self.aggregate)

    def segments(self, rec, expected_n=None):
        filtered = dsp.bandpass(rec, self.band[0], self.band[1], self.order)
        return dsp.segment(filtered, self.template, expected_n or self.spec.n_chirps,
                           period=self.spec.period)

    def segment_features(self, rec, expected_n=None):
        """One 293-dimension row per located chirp."""
        segs = self.segments(rec, expected_n)
        return np.vstack([features.extract(s).values for s in segs])

    def features(self, rec, expected_n=None):
        """Feature row(s) for a recording: the segment average, or every segment
        when ``aggregate == "vote"``."""
        rows = self.segment_features(rec, expected_n)
        return rows if self.aggregate == "vote" else rows.mean(axis=0)


def simulate_trial(pipeline, hand, device, env, seed, user_index, trial):
    return simchan.simulate_hold(pipeline.transmit, hand, device, env,
                                 subseed(seed, "trial", user_index, trial))


def simulate_dataset(cohort, device, env, pipeline, sequences, seed, trial_offset=0,
                     label=None):
    """One averaged feature row per simulated hold, ``sequences`` holds per hand.

    ``label`` overrides the per-hand user ids (used for the negative cohort).
    """
    X, y = [], []
    for u, hand in enumerate(cohort):
        for t in range(sequences):
            rec = simulate_trial(pipeline, hand, device, env, seed, u, trial_offset + t)
            X.append(pipeline.segment_features(rec).mean(axis=0))
            y.append(hand.user_id if label is None else label)
    return LabeledFeatures(np.vstack(X), np.array(y))


def negative_cohort(device, env, pipeline, seed, count=10, sequences=8, per_hand=False):
    """Feature rows from anonymous hands, all labelled as the negative class.

    With ``per_hand`` each hand keeps a distinct label (the negative label plus
    an index), which is what feature selection needs to judge how well a
    feature separates hands.
    """
    hands = simchan.make_hand_cohort(count, subseed(seed, "negative-cohort"))
    data = simulate_dataset(hands, device, env, pipeline, sequences,
                            subseed(seed, "negative-trials"))
    if per_hand:
        index = {h.user_id: i for i, h in enumerate(hands)}
        return LabeledFeatures(data.X, np.array([f"{NEGATIVE_LABEL}{index[u]:02d}"
                                                 for u in data.y]))
    return LabeledFeatures(data.X, np.full(data.y.size, NEGATIVE_LABEL))


def merge(*datasets):
    return LabeledFeatures(np.vstack([d.X for d in datasets]),
                           np.concatenate([d.y for d in datasets]))


def enroll(data, kind="lda", selection_threshold=DEFAULT_THRESHOLD,
           confidence_threshold=DEFAULT_CONFIDENCE, selection_data=None):
    """Select features and train a verifier on the kept dimensions.

    Selection runs on ``selection_data`` when given (the same rows with finer
    labels, e.g. one per anonymous negative hand), otherwise on ``data``.
    """
    mask = select(data if selection_data is None else selection_data, selection_threshold)
    return train(data, kind, mask, confidence_threshold)
