"""Exception hierarchy shared by every stage of the pipeline."""


class HoldsenseError(Exception):
    pass


class ParameterError(HoldsenseError, ValueError):
    """An argument violates a documented precondition."""


class SegmentationError(HoldsenseError):
    """Fewer chirp responses were found than requested."""

    def __init__(self, message, found):
        super().__init__(message)
        self.found = found


class InsufficientDataError(HoldsenseError, ValueError):
    """A label group has too few rows for the requested computation."""


class SelectionError(HoldsenseError):
    """Feature selection produced an empty mask."""


class TrainingError(HoldsenseError):
    """A classifier could not be fitted."""

    def __init__(self, message, duality_gap=None):
        super().__init__(message)
        self.duality_gap = duality_gap


class ProfileError(HoldsenseError):
    """Base class for profile file load failures."""


class ProfileFormatError(ProfileError):
    """The file is not a profile container or is structurally malformed."""


class ProfileVersionError(ProfileError):
    """The container version is not supported by this build."""


class ProfileChecksumError(ProfileError):
    """The stored CRC32 does not match the file contents."""
