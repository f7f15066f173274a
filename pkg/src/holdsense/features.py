"""The 293-dimension hand-grip feature vector.

Layout: 12 time-domain statistics, 256 spectral magnitudes, 13 MFCCs and
12 chroma bins, always in that order.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.fft import dct

from holdsense.errors import ParameterError

TIME_NAMES = ("mean", "std", "max", "min", "range", "kurtosis", "skewness",
              "q2", "q3", "q4", "dispersion", "peak_change_index")
N_TIME = len(TIME_NAMES)
N_SPECTRAL = 256
N_MFCC = 13
N_CHROMA = 12
DIM = N_TIME + N_SPECTRAL + N_MFCC + N_CHROMA

FRAME = 512
HOP = 256
N_MEL = 26
LOG_FLOOR = 1e-10
CHROMA_NFFT = 8192
CHROMA_FMIN = 100.0

FEATURE_NAMES = (
    TIME_NAMES
    + tuple(f"spec{i:03d}" for i in range(N_SPECTRAL))
    + tuple(f"mfcc{i:02d}" for i in range(N_MFCC))
    + tuple(f"chroma{i:02d}" for i in range(N_CHROMA))
)

SLICES = {
    "time": slice(0, N_TIME),
    "spectral": slice(N_TIME, N_TIME + N_SPECTRAL),
    "mfcc": slice(N_TIME + N_SPECTRAL, N_TIME + N_SPECTRAL + N_MFCC),
    "chroma": slice(DIM - N_CHROMA, DIM),
}


@dataclass
class FeatureVector:
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (DIM,):
            raise ParameterError(f"feature vector must have {DIM} values")

    @property
    def time_stats(self):
        return self.values[SLICES["time"]]

    @property
    def spectral(self):
        return self.values[SLICES["spectral"]]

    @property
    def mfcc(self):
        return self.values[SLICES["mfcc"]]

    @property
    def chroma(self):
        return self.values[SLICES["chroma"]]

    def __len__(self):
        return DIM


def _samples(seg):
    x = np.asarray(getattr(seg, "samples", seg), dtype=np.float64)
    if x.ndim != 1:
        raise ParameterError("segment must be one-dimensional")
    return x


def _rate(seg, sample_rate):
    return getattr(seg, "sample_rate", sample_rate)


def _require(x, n, what):
    if x.size < n:
        raise ParameterError(f"{what} needs at least {n} samples, got {x.size}")


def time_features(seg):
    """Population statistics of the segment samples.

    Kurtosis is excess kurtosis; skewness and kurtosis are 0 for a constant
    segment. q2/q3/q4 are the 50th/75th/100th percentiles and dispersion is
    the interquartile range. The last entry is the index of the sample
    farthest from the mean.
    """
    x = _samples(seg)
    _require(x, 1, "time features")
    mean = x.mean()
    dev = x - mean
    std = np.sqrt(np.mean(dev ** 2))
    if std > 0:
        z = dev / std
        skew = np.mean(z ** 3)
        kurt = np.mean(z ** 4) - 3.0
    else:
        skew = kurt = 0.0
    q1, q2, q3, q4 = np.percentile(x, [25, 50, 75, 100])
    return np.array([
        mean, std, x.max(), x.min(), x.max() - x.min(), kurt, skew,
        q2, q3, q4, q3 - q1, float(np.argmax(np.abs(dev))),
    ])


def spectral_features(seg):
    """Magnitudes of bins 0..255 of a 512-point FFT of the first 512 samples."""
    x = _samples(seg)
    _require(x, FRAME, "spectral features")
    return np.abs(np.fft.rfft(x[:FRAME]))[:N_SPECTRAL]


def frames(x, frame=FRAME, hop=HOP):
    _require(x, frame, "framing")
    count = 1 + (x.size - frame) // hop
    idx = np.arange(frame)[None, :] + hop * np.arange(count)[:, None]
    return x[idx]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10 ** (np.asarray(m) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(sample_rate, n_fft=FRAME, n_mel=N_MEL):
    """Triangular filters equally spaced on the mel scale over 0..fs/2.

    Rows are filters, columns the ``n_fft // 2 + 1`` FFT bins.
    """
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mel + 2))
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    bank = np.maximum(0.0, np.minimum(rising, falling))
    bank.setflags(write=False)
    return bank


def mfcc_features(seg, sample_rate=48000):
    """Mean over 512/256 frames of the first 13 orthonormal DCT-II cepstra of
    log mel-band magnitudes (26 bands, log floor 1e-10)."""
    x = _samples(seg)
    fs = _rate(seg, sample_rate)
    mag = np.abs(np.fft.rfft(frames(x), axis=1))
    bands = mag @ mel_filterbank(fs).T
    logs = np.log(np.maximum(bands, LOG_FLOOR))
    ceps = dct(logs, type=2, norm="ortho", axis=1)[:, :N_MFCC]
    return ceps.mean(axis=0)


@lru_cache(maxsize=8)
def chroma_map(sample_rate, n_fft=CHROMA_NFFT):
    """Pitch class of every FFT bin at or above 100 Hz (nearest semitone, A=440)."""
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    keep = np.nonzero(freqs >= CHROMA_FMIN)[0]
    classes = np.round(12.0 * np.log2(freqs[keep] / 440.0)).astype(int) % 12
    onehot = np.zeros((keep.size, N_CHROMA))
    onehot[np.arange(keep.size), classes] = 1.0
    keep.setflags(write=False)
    onehot.setflags(write=False)
    return keep, onehot


def pitch_class(freq):
    return int(np.round(12.0 * np.log2(freq / 440.0))) % 12


def chroma_features(seg, sample_rate=48000):
    """Mean over frames of bin magnitudes summed per pitch class.

    Frames are zero-padded to 8192 points so semitone spacing is resolved
    down to the 100 Hz floor.
    """
    x = _samples(seg)
    fs = _rate(seg, sample_rate)
    keep, onehot = chroma_map(fs)
    mag = np.abs(np.fft.rfft(frames(x), n=CHROMA_NFFT, axis=1))[:, keep]
    return (mag @ onehot).mean(axis=0)


def extract(seg, sample_rate=48000):
    """Concatenate all four feature families into a :class:`FeatureVector`."""
    x = _samples(seg)
    fs = _rate(seg, sample_rate)
    return FeatureVector(np.concatenate([
        time_features(x),
        spectral_features(x),
        mfcc_features(x, fs),
        chroma_features(x, fs),
    ]))


def extract_matrix(segments, sample_rate=48000):
    return np.vstack([extract(s, sample_rate).values for s in segments])
