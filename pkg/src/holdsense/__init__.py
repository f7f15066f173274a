"""Acoustic hand-grip identification laboratory.

Generates an ultrasonic chirp sensing signal, simulates how it travels through
a hand-held device, and runs the preprocessing, feature, selection and
classification pipeline used to recognise who is holding the device.
"""

from holdsense.errors import (
    HoldsenseError,
    ParameterError,
    SegmentationError,
    SelectionError,
    TrainingError,
    ProfileError,
)

__version__ = "0.1.0"

__all__ = [
    "HoldsenseError",
    "ParameterError",
    "SegmentationError",
    "SelectionError",
    "TrainingError",
    "ProfileError",
]
