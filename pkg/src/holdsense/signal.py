"""Sensing waveform construction: linear chirps and n-chirp sequences."""

from dataclasses import dataclass, field

import numpy as np

from holdsense.errors import ParameterError


@dataclass(frozen=True)
class SignalSpec:
    """Parametric description of an n-chirp transmission.

    Defaults reproduce the 18-22 kHz design: a 1200-sample (25 ms) sweep at
    48 kHz followed by a 1200-sample silent buffer.
    """

    f_start: float = 18000.0
    f_end: float = 22000.0
    sample_rate: int = 48000
    chirp_len: int = 1200
    gap_len: int = 1200
    n_chirps: int = 1
    amplitude: float = 1.0
    taper_len: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        vals = (self.f_start, self.f_end, self.sample_rate, self.amplitude)
        if not all(np.isfinite(v) for v in vals):
            raise ParameterError("signal parameters must be finite")
        if self.sample_rate <= 0:
            raise ParameterError(f"sample_rate must be positive, got {self.sample_rate}")
        if not 0 < self.f_start < self.f_end <= self.sample_rate / 2:
            raise ParameterError(
                f"need 0 < f_start < f_end <= sample_rate/2, got "
                f"{self.f_start}, {self.f_end}, {self.sample_rate}"
            )
        if self.chirp_len <= 0:
            raise ParameterError("chirp_len must be positive")
        if self.gap_len < 0:
            raise ParameterError("gap_len must be non-negative")
        if self.n_chirps < 1:
            raise ParameterError("n_chirps must be at least 1")
        if not 0 < self.amplitude <= 1:
            raise ParameterError("amplitude must lie in (0, 1]")
        if not 0 <= 2 * self.taper_len <= self.chirp_len:
            raise ParameterError("taper_len must be in [0, chirp_len/2]")

    @property
    def period(self):
        return self.chirp_len + self.gap_len

    def with_(self, **changes):
        params = {**self.__dict__, **changes}
        return SignalSpec(**params)


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int
    bounded: bool = field(default=True, repr=False)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ParameterError("waveform samples must be one-dimensional")
        if self.sample_rate <= 0:
            raise ParameterError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ParameterError("waveform contains non-finite samples")
        if self.bounded and self.samples.size and np.max(np.abs(self.samples)) > 1.0 + 1e-12:
            raise ParameterError("waveform samples must lie in [-1, 1]")

    def __len__(self):
        return self.samples.size

    @property
    def duration(self):
        return self.samples.size / self.sample_rate


def _raised_cosine_taper(n, taper_len):
    w = np.ones(n)
    if taper_len:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(taper_len) / taper_len)
        w[:taper_len] = ramp
        w[n - taper_len:] = ramp[::-1]
    return w


def make_chirp(spec=None):
    """Single linear sweep of ``spec.chirp_len`` samples.

    Instantaneous frequency is ``f_start`` at sample 0 and ``f_end`` at the last
    sample. Phase starts at zero, and the result is scaled so its peak
    magnitude is exactly ``spec.amplitude``.
    """
    spec = spec or SignalSpec()
    spec.validate()
    n = spec.chirp_len
    t = np.arange(n) / spec.sample_rate
    sweep_time = max(n - 1, 1) / spec.sample_rate
    rate = (spec.f_end - spec.f_start) / sweep_time
    phase = 2 * np.pi * (spec.f_start * t + 0.5 * rate * t * t)
    x = np.sin(phase) * _raised_cosine_taper(n, spec.taper_len)
    peak = np.max(np.abs(x))
    if peak > 0:
        x *= spec.amplitude / peak
    return Waveform(x, spec.sample_rate)


def make_sequence(spec=None):
    """``n_chirps`` repetitions of chirp followed by ``gap_len`` zeros."""
    spec = spec or SignalSpec()
    chirp = make_chirp(spec).samples
    period = np.concatenate([chirp, np.zeros(spec.gap_len)])
    return Waveform(np.tile(period, spec.n_chirps), spec.sample_rate)


def chirp_onsets(spec):
    """Transmit-side start index of every chirp in ``make_sequence(spec)``."""
    return [i * spec.period for i in range(spec.n_chirps)]
