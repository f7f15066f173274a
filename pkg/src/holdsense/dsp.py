"""Preprocessing: band-pass noise removal, matched-filter segmentation,
structure/airborne split and jamming detection."""

from dataclasses import dataclass

import numpy as np
from scipy import signal as sps

from holdsense.errors import ParameterError, SegmentationError
from holdsense.signal import Waveform

DEFAULT_BAND = (18000.0, 22000.0)
# Order 10 per side is the lowest Butterworth order that gives 40 dB of
# rejection at 15 kHz with an 18 kHz corner.
DEFAULT_ORDER = 10
CORR_FLOOR = 0.3
DEFAULT_JAM_THRESHOLD_DB = 6.0
# Gap windows start this long after a chirp ends, once room echoes have died.
GAP_GUARD_SECONDS = 0.010


@dataclass
class Segment:
    samples: np.ndarray
    sample_rate: int
    onset_index: int
    corr_peak: float

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.onset_index < 0:
            raise ParameterError("onset_index must be non-negative")
        if not 0.0 <= self.corr_peak <= 1.0:
            raise ParameterError("corr_peak must lie in [0, 1]")

    def __len__(self):
        return self.samples.size


@dataclass(frozen=True)
class JamReport:
    detected: bool
    band_energy_db: float
    threshold_db: float
    excess_db: float

    def as_row(self):
        return {
            "jam_detected": int(self.detected),
            "jam_band_energy_db": f"{self.band_energy_db:.3f}",
            "jam_threshold_db": f"{self.threshold_db:.3f}",
            "jam_excess_db": f"{self.excess_db:.3f}",
        }


def _samples_and_rate(rec):
    return np.asarray(rec.samples, dtype=np.float64), rec.sample_rate


def bandpass_sos(lo, hi, order, sample_rate):
    if not 0 < lo < hi < sample_rate / 2:
        raise ParameterError(f"need 0 < lo < hi < fs/2, got {lo}, {hi}, fs={sample_rate}")
    if order < 1:
        raise ParameterError("filter order must be at least 1")
    hp = sps.butter(order, lo, "highpass", fs=sample_rate, output="sos")
    lp = sps.butter(order, hi, "lowpass", fs=sample_rate, output="sos")
    return np.vstack([hp, lp])


def bandpass(rec, lo=DEFAULT_BAND[0], hi=DEFAULT_BAND[1], order=DEFAULT_ORDER, zero_phase=False):
    """Butterworth high-pass at ``lo`` cascaded with a low-pass at ``hi``.

    Filtering is causal by default; ``zero_phase=True`` runs it forward and
    backward instead (squaring the magnitude response).
    """
    x, fs = _samples_and_rate(rec)
    sos = bandpass_sos(lo, hi, order, fs)
    y = sps.sosfiltfilt(sos, x) if zero_phase else sps.sosfilt(sos, x)
    if hasattr(rec, "with_samples"):
        return rec.with_samples(y, bandpass=[lo, hi, order])
    return Waveform(y, fs, bounded=False)


def normalized_xcorr(x, template):
    """Correlation of ``template`` against every full-overlap window of ``x``.

    Template and window are each scaled to unit energy, so values lie in
    [-1, 1]. Windows with negligible energy score zero.
    """
    t = np.asarray(template, dtype=np.float64)
    t_norm = np.linalg.norm(t)
    if t_norm == 0:
        raise ParameterError("template has zero energy")
    raw = np.correlate(x, t, mode="valid")
    energy = np.correlate(x * x, np.ones(t.size), mode="valid")
    floor = 1e-12 * max(float(energy.max(initial=0.0)), 1e-300)
    out = np.zeros_like(raw)
    ok = energy > floor
    out[ok] = raw[ok] / (t_norm * np.sqrt(energy[ok]))
    return np.clip(out, -1.0, 1.0)


def pick_peaks(corr, count, spacing, floor=CORR_FLOOR):
    """Greedy choice of the ``count`` highest peaks at least ``spacing`` apart.

    Ties go to the earlier index. Returns indices in descending peak order.
    """
    idx = np.nonzero(corr >= floor)[0]
    if idx.size == 0:
        return []
    # Local maxima (plateaus keep their first sample) shrink the search.
    left = np.concatenate([[-np.inf], corr[:-1]])[idx]
    right = np.concatenate([corr[1:], [-np.inf]])[idx]
    idx = idx[(corr[idx] > left) & (corr[idx] >= right)]
    order = np.lexsort((idx, -corr[idx]))
    chosen = []
    for i in idx[order]:
        if all(abs(int(i) - c) >= spacing for c in chosen):
            chosen.append(int(i))
            if len(chosen) == count:
                break
    return chosen


def align_to_period(corr, onsets, period, window):
    """Move every onset onto one shared comb ``phase + m * period``.

    Each onset keeps its period index ``m`` relative to the first; the phase
    is the one within ``window`` samples of the first onset that maximises the
    summed correlation over the comb. Onsets that do not sit on a common comb
    are returned unchanged.
    """
    onsets = sorted(onsets)
    m = [int(round((k - onsets[0]) / period)) for k in onsets]
    if len(set(m)) != len(m) or any(abs(k - onsets[0] - i * period) > window
                                    for k, i in zip(onsets, m)):
        return onsets
    steps = np.array(m) * period
    lo = max(0, onsets[0] - window)
    hi = min(onsets[0] + window, corr.size - 1 - steps[-1])
    if hi < lo:
        return onsets
    phases = np.arange(lo, hi + 1)
    total = corr[phases[:, None] + steps[None, :]].sum(axis=1)
    best = int(phases[np.argmax(total)])
    return [best + int(s) for s in steps]


def segment(rec, template, expected_n, floor=CORR_FLOOR, period=None, window=16):
    """Locate ``expected_n`` chirp responses by normalised cross-correlation.

    Each returned segment spans ``len(template)`` samples from its onset;
    segments are ordered by onset. With a known transmit ``period`` the
    onsets are then snapped to one shared comb (see :func:`align_to_period`),
    so a response whose strongest peak hops between two arrival paths is cut
    at the same place in every chirp.
    """
    x, fs = _samples_and_rate(rec)
    t = template.samples if isinstance(template, Waveform) else np.asarray(template, float)
    if expected_n < 1:
        raise ParameterError("expected_n must be at least 1")
    if t.size > x.size:
        raise ParameterError("template is longer than the recording")
    corr = normalized_xcorr(x, t)
    peaks = pick_peaks(corr, expected_n, t.size, floor)
    if len(peaks) < expected_n:
        raise SegmentationError(
            f"found {len(peaks)} chirp responses above correlation {floor}, "
            f"expected {expected_n}", found=len(peaks))
    onsets = sorted(peaks)
    if period is not None and expected_n > 1:
        onsets = align_to_period(corr, onsets, int(period), int(window))
    return [Segment(x[k:k + t.size].copy(), fs, k, float(max(corr[k], 0.0)))
            for k in onsets]


def split_paths(seg, lead_samples=10):
    """Split a segment into its structure-only prefix and the mixed remainder."""
    n = len(seg)
    if not 0 < lead_samples < n:
        raise ParameterError(f"lead_samples must lie in (0, {n}), got {lead_samples}")
    prefix = Waveform(seg.samples[:lead_samples], seg.sample_rate, bounded=False)
    body = Waveform(seg.samples[lead_samples:], seg.sample_rate, bounded=False)
    return prefix, body


def lead_samples_for(sample_rate, lead_seconds=0.20e-3):
    return int(round(lead_seconds * sample_rate))


def gap_band_level(rec, template, gap_len=None, band=DEFAULT_BAND, order=DEFAULT_ORDER):
    """In-band power of the inter-chirp gaps relative to the chirp windows, in dB.

    The first chirp is located by correlation; gap windows follow at the
    transmit period. A legitimate recording holds near-silence there.
    """
    x, fs = _samples_and_rate(rec)
    t = template.samples if isinstance(template, Waveform) else np.asarray(template, float)
    L = t.size
    gap_len = L if gap_len is None else int(gap_len)
    period = L + gap_len
    if x.size < period:
        raise ParameterError("recording is shorter than one chirp-plus-gap period")
    guard = int(round(GAP_GUARD_SECONDS * fs))
    if guard >= gap_len:
        raise ParameterError("gap is too short to hold a post-echo window")
    y = sps.sosfilt(bandpass_sos(band[0], band[1], order, fs), x)
    corr = normalized_xcorr(y, t)
    start = int(np.argmax(corr[: max(period - L, 1)]))
    gap_power, chirp_power = [], []
    k = start
    while k + period <= y.size:
        chirp_power.append(np.mean(y[k:k + L] ** 2))
        gap_power.append(np.mean(y[k + L + guard:k + period] ** 2))
        k += period
    if not gap_power:
        raise ParameterError("no complete chirp period after the first onset")
    ratio = np.mean(gap_power) / max(np.mean(chirp_power), 1e-300)
    return 10 * np.log10(max(ratio, 1e-30))


def calibrate_jam_baseline(clean_recordings, template, gap_len=None):
    """Upper envelope of the clean gap level over a set of clean recordings."""
    levels = [gap_band_level(r, template, gap_len) for r in clean_recordings]
    if not levels:
        raise ParameterError("need at least one clean recording to calibrate")
    return float(np.max(levels))


def detect_jamming(rec, template, threshold_db=DEFAULT_JAM_THRESHOLD_DB, baseline_db=None,
                   gap_len=None):
    """Flag a recording whose gap energy sits ``threshold_db`` above the baseline.

    ``baseline_db`` is the clean-gap level from :func:`calibrate_jam_baseline`;
    without one the check is against 0 dB-relative (gap as loud as the chirps).
    """
    if not np.isfinite(threshold_db):
        raise ParameterError("threshold_db must be finite")
    level = gap_band_level(rec, template, gap_len)
    base = 0.0 if baseline_db is None else float(baseline_db)
    limit = base + threshold_db
    return JamReport(bool(level > limit), float(level), float(limit), float(level - limit))
