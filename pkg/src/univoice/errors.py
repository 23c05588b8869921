"""Exception hierarchy shared across the package."""


class UniVoiceError(Exception):
    """Base class for every error raised by univoice."""


class ShapeError(UniVoiceError, ValueError):
    pass


class NonFiniteError(UniVoiceError, ValueError):
    pass


class FormatError(UniVoiceError):
    """A file on disk does not follow its declared binary layout."""


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class TrailingDataError(FormatError):
    pass


class DimensionOverflowError(FormatError):
    pass


class UnsupportedAudioError(FormatError):
    pass


class ConfigError(UniVoiceError, ValueError):
    pass


class TrainingError(UniVoiceError, RuntimeError):
    pass


class InferenceError(UniVoiceError, RuntimeError):
    pass
