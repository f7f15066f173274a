"""Mono 16-bit PCM WAV reading and writing."""

import wave
from pathlib import Path

import numpy as np

from holdsense.errors import ParameterError

FULL_SCALE = 32767


def write_wav(path, samples, sample_rate):
    """Write ``samples`` (floats nominally in [-1, 1]) as 16-bit mono PCM.

    Values outside full scale are clipped. Returns the number of clipped samples.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1:
        raise ParameterError("only mono audio is supported")
    clipped = int(np.count_nonzero(np.abs(x) > 1.0))
    pcm = np.round(np.clip(x, -1.0, 1.0) * FULL_SCALE).astype("<i2")
    path = Path(path)
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(int(sample_rate))
        wf.writeframes(pcm.tobytes())
    return clipped


def read_wav(path):
    """Return ``(samples, sample_rate)`` with samples scaled to [-1, 1]."""
    try:
        with wave.open(str(path), "rb") as wf:
            if wf.getnchannels() != 1 or wf.getsampwidth() != 2:
                raise ParameterError(f"{path}: expected 16-bit mono PCM")
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError) as exc:
        raise ParameterError(f"{path}: not a readable WAV file ({exc})") from exc
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64)
    return pcm / FULL_SCALE, rate
