import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import signal as sps

from holdsense import dsp, simchan
from holdsense.errors import ParameterError, SegmentationError
from holdsense.signal import SignalSpec, Waveform, chirp_onsets, make_chirp, make_sequence

from oracles import butterworth_bandpass_gain, embed_chirps

FS = 48000


def tone(freq, n=9600, amp=0.9):
    return Waveform(amp * np.sin(2 * np.pi * freq * np.arange(n) / FS), FS)


def steady_gain_db(freq, order):
    x = tone(freq)
    y = dsp.bandpass(x, 18000, 22000, order).samples
    tail = slice(4800, None)
    return 20 * np.log10(np.sqrt(np.mean(y[tail] ** 2)) / np.sqrt(np.mean(x.samples[tail] ** 2)))


# --------------------------------------------------------------------------
# Band-pass


@pytest.mark.parametrize("order", [1, 4, 10])
def test_frequency_response_matches_analytic_butterworth(order):
    sos = dsp.bandpass_sos(18000, 22000, order, FS)
    f = np.linspace(200, 23800, 60)
    _, h = sps.sosfreqz(sos, worN=f, fs=FS)
    ref = np.array([butterworth_bandpass_gain(v, 18000, 22000, order, FS) for v in f])
    assert np.allclose(np.abs(h), ref, rtol=1e-6, atol=1e-12)


@pytest.mark.parametrize("order", [4, 10])
def test_tone_gain_matches_analytic_oracle(order):
    for freq in (15000.0, 20000.0):
        ref = 20 * np.log10(butterworth_bandpass_gain(freq, 18000, 22000, order, FS))
        assert steady_gain_db(freq, order) == pytest.approx(ref, abs=0.05)


def test_default_order_rejects_15khz_by_40db():
    assert dsp.DEFAULT_ORDER == 10
    assert steady_gain_db(15000.0, dsp.DEFAULT_ORDER) <= -40.0


def test_order_four_falls_short_of_40db_at_15khz():
    # documents why the default order is higher: analytic rejection is ~16.7 dB
    ref = 20 * np.log10(butterworth_bandpass_gain(15000.0, 18000, 22000, 4, FS))
    assert -17.5 < ref < -16.0


@pytest.mark.parametrize("order", [4, 10])
def test_passband_20khz_within_3db(order):
    assert abs(steady_gain_db(20000.0, order)) <= 3.0


def test_zero_in_zero_out_and_length():
    x = Waveform(np.zeros(5000), FS)
    y = dsp.bandpass(x)
    assert len(y) == 5000 and np.all(y.samples == 0.0)


def test_bandpass_keeps_recording_provenance():
    rec = simchan.Recording(np.zeros(3000), FS, {"seed": 3})
    out = dsp.bandpass(rec)
    assert out.provenance["seed"] == 3 and out.provenance["bandpass"] == [18000.0, 22000.0, 10]


def test_zero_phase_squares_magnitude():
    y = dsp.bandpass(tone(17000.0), 18000, 22000, 4, zero_phase=True).samples
    g = np.sqrt(np.mean(y[3000:6000] ** 2)) / np.sqrt(np.mean(tone(17000.0).samples[3000:6000] ** 2))
    ref = butterworth_bandpass_gain(17000.0, 18000, 22000, 4, FS) ** 2
    assert g == pytest.approx(ref, rel=1e-3)


@pytest.mark.parametrize("lo,hi,order", [(0, 22000, 4), (22000, 18000, 4), (18000, 24000, 4),
                                         (18000, 22000, 0), (-5, 100, 2)])
def test_invalid_band_rejected(lo, hi, order):
    with pytest.raises(ParameterError):
        dsp.bandpass(Waveform(np.zeros(100), FS), lo, hi, order)


@settings(max_examples=30, deadline=None)
@given(order=st.integers(1, 10), lo=st.floats(50.0, 20000.0),
       width=st.floats(0.05, 0.95))
def test_impulse_response_decays_within_bound(order, lo, width):
    hi = lo + width * (FS / 2 - 100 - lo)
    sos = dsp.bandpass_sos(lo, hi, order, FS)
    bound = int(10 * order * FS / min(lo, FS / 2 - hi))
    x = np.zeros(bound + 200)
    x[0] = 1.0
    h = sps.sosfilt(sos, x)
    assert np.all(np.abs(h[bound:]) < 1e-6)


# --------------------------------------------------------------------------
# Segmentation


def test_single_chirp_at_offset_5000():
    t = make_chirp().samples
    x = np.zeros(20000)
    x[5000:6200] = t
    segs = dsp.segment(Waveform(x, FS), make_chirp(), 1)
    assert len(segs) == 1
    assert segs[0].onset_index == 5000 and segs[0].corr_peak >= 0.99
    assert np.array_equal(segs[0].samples, t)


def test_normalized_xcorr_matches_exhaustive_scan(rng):
    t = make_chirp(SignalSpec(chirp_len=64)).samples
    x = rng.normal(size=300)
    x[100:164] += 3 * t
    corr = dsp.normalized_xcorr(x, t)
    ref = np.array([x[k:k + 64] @ t / (np.linalg.norm(x[k:k + 64]) * np.linalg.norm(t))
                    for k in range(300 - 64 + 1)])
    assert np.allclose(corr, ref, atol=1e-12)
    assert int(np.argmax(ref)) == 100


def test_template_at_offset_zero():
    x = np.concatenate([make_chirp().samples, np.zeros(3000)])
    assert dsp.segment(Waveform(x, FS), make_chirp(), 1)[0].onset_index == 0


def test_sequence_round_trip_is_exact():
    spec = SignalSpec(n_chirps=10)
    segs = dsp.segment(make_sequence(spec), make_chirp(spec), 10)
    assert [s.onset_index for s in segs] == chirp_onsets(spec)
    assert all(s.corr_peak == pytest.approx(1.0) for s in segs)


@settings(max_examples=25, deadline=None)
@given(shift=st.integers(0, 700), seed=st.integers(0, 2 ** 31))
def test_segmentation_is_shift_equivariant(shift, seed):
    rng = np.random.default_rng(seed)
    t = make_chirp().samples
    x, _ = embed_chirps(t, 3, 12000, 10.0, rng)
    a = dsp.segment(Waveform(np.clip(x, -1, 1) * 0.5, FS, bounded=False), t, 3)
    xs = np.concatenate([np.zeros(shift), np.clip(x, -1, 1) * 0.5])
    b = dsp.segment(Waveform(xs, FS, bounded=False), t, 3)
    assert [s.onset_index + shift for s in a] == [s.onset_index for s in b]


def _tenchirp_onsets(hand, device, seed, period):
    env = simchan.Environment("snr10", 10.0, (0.2, 0.1))
    spec = SignalSpec(n_chirps=10)
    rec = simchan.simulate_hold(make_sequence(spec), hand, device, env, seed)
    segs = dsp.segment(dsp.bandpass(rec), make_chirp(spec), 10, period=period)
    return np.array([s.onset_index for s in segs])


def test_simulated_sequence_at_10db_spacing(note5, small_cohort):
    for seed in range(12):
        onsets = _tenchirp_onsets(small_cohort[seed % 6], note5, seed, 2400)
        assert len(onsets) == 10
        assert np.all(np.abs(np.diff(onsets) - 2400) <= 2)


def test_unaligned_peaks_stay_within_one_path_lead(note5, small_cohort):
    # structure and airborne copies give two close correlation peaks; without
    # the period the strongest may sit on either arrival, never beyond both
    for seed in range(12):
        onsets = _tenchirp_onsets(small_cohort[seed % 6], note5, seed, None)
        assert np.ptp(onsets - 2400 * np.arange(10)) <= note5.lead_samples + 1


def test_period_alignment_picks_best_shared_phase():
    corr = np.zeros(400)
    corr[[10, 110, 210]] = [0.9, 0.5, 0.9]
    corr[[14, 114, 214]] = [0.8, 0.95, 0.8]
    assert dsp.align_to_period(corr, [10, 114, 210], 100, 8) == [14, 114, 214]
    # onsets off the comb are left alone
    assert dsp.align_to_period(corr, [10, 150, 210], 100, 8) == [10, 150, 210]


def test_too_few_peaks_reports_count():
    x = np.zeros(12000)
    x[1000:2200] = make_chirp().samples
    with pytest.raises(SegmentationError) as info:
        dsp.segment(Waveform(x, FS), make_chirp(), 3)
    assert info.value.found == 1


def test_segment_rejects_long_template_and_bad_count():
    with pytest.raises(ParameterError):
        dsp.segment(Waveform(np.zeros(100), FS), make_chirp(), 1)
    with pytest.raises(ParameterError):
        dsp.segment(Waveform(np.zeros(5000), FS), make_chirp(), 0)


def test_peaks_respect_spacing_and_tie_order():
    corr = np.array([0.0, 0.9, 0.0, 0.9, 0.0, 0.5, 0.0])
    assert dsp.pick_peaks(corr, 2, 3) == [1, 5]
    assert dsp.pick_peaks(corr, 2, 2) == [1, 3]


# --------------------------------------------------------------------------
# Path split


def _segment(n=1200):
    return dsp.Segment(np.arange(n, dtype=float), FS, 0, 1.0)


def test_split_prefix_length_ten():
    pre, body = dsp.split_paths(_segment(), 10)
    assert len(pre) == 10 and len(body) == 1190
    assert np.array_equal(np.concatenate([pre.samples, body.samples]), _segment().samples)


def test_split_boundary():
    pre, body = dsp.split_paths(_segment(), 1199)
    assert len(body) == 1


@pytest.mark.parametrize("lead", [0, 1200, -3])
def test_split_out_of_range(lead):
    with pytest.raises(ParameterError):
        dsp.split_paths(_segment(), lead)


def test_lead_samples_default():
    assert dsp.lead_samples_for(48000) == 10


def test_prefix_equals_structure_only_simulation(note5, quiet):
    hand = simchan.make_hand_cohort(1, 3)[0]
    tx = make_sequence(SignalSpec(n_chirps=1))
    kw = dict(noise=False, jitter=False, reflections=False)
    full = simchan.simulate_hold(tx, hand, note5, quiet, 0, **kw)
    struct = simchan.simulate_hold(tx, hand, note5, quiet, 0, airborne=False, **kw)
    air = simchan.simulate_hold(tx, hand, note5, quiet, 0, structure=False, **kw)
    s_on = int(np.floor(full.provenance["structure_delay_samples"] - 0.5))
    a_on = int(np.floor(full.provenance["airborne_delay_samples"] - 0.5))
    lead = a_on - s_on
    assert 9 <= lead <= 11
    seg = dsp.Segment(full.samples[s_on:s_on + 1200], FS, s_on, 1.0)
    pre, _ = dsp.split_paths(seg, lead)
    assert np.sum(pre.samples ** 2) > 0
    assert np.allclose(pre.samples, struct.samples[s_on:s_on + lead], atol=1e-6, rtol=0)
    assert np.all(air.samples[:a_on] == 0.0)


# --------------------------------------------------------------------------
# Jamming detection


@pytest.fixture(scope="module")
def jam_setup(note5, office, small_cohort):
    spec = SignalSpec(n_chirps=10)
    tx = make_sequence(spec)
    clean = [simchan.simulate_hold(tx, small_cohort[i % 6], note5, office, 500 + i)
             for i in range(10)]
    baseline = dsp.calibrate_jam_baseline(clean, make_chirp(spec))
    return spec, tx, baseline


def test_clean_recording_not_flagged(jam_setup, note5, office, small_cohort):
    spec, tx, baseline = jam_setup
    for i in range(5):
        rec = simchan.simulate_hold(tx, small_cohort[i], note5, office, 900 + i)
        rep = dsp.detect_jamming(rec, make_chirp(spec), 6.0, baseline)
        assert not rep.detected
        assert rep.detected == (rep.band_energy_db > rep.threshold_db)


def test_close_jammer_flagged(jam_setup, note5, office, small_cohort):
    spec, tx, baseline = jam_setup
    jam = SignalSpec(gap_len=0)
    for i in range(5):
        rec = simchan.simulate_hold(tx, small_cohort[i], note5, office, 700 + i)
        jammed = simchan.inject_jammer(rec, jam, 0.0, 0.2, i)
        rep = dsp.detect_jamming(jammed, make_chirp(spec), 6.0, baseline)
        assert rep.detected and rep.excess_db > 0
        assert rep.threshold_db == pytest.approx(baseline + 6.0)


def test_jam_report_row_schema():
    row = dsp.JamReport(True, -3.0, -10.0, 7.0).as_row()
    assert row == {"jam_detected": 1, "jam_band_energy_db": "-3.000",
                   "jam_threshold_db": "-10.000", "jam_excess_db": "7.000"}


def test_jam_detection_errors():
    t = make_chirp()
    with pytest.raises(ParameterError):
        dsp.detect_jamming(Waveform(np.zeros(2000), FS), t, 6.0)
    with pytest.raises(ParameterError):
        dsp.detect_jamming(Waveform(np.zeros(5000), FS), t, float("nan"))
    with pytest.raises(ParameterError):
        dsp.calibrate_jam_baseline([], t)
