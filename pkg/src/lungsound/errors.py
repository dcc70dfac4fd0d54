"""Exception hierarchy.

Every error raised by the package derives from :class:`LungSoundError`. The
CLI maps the three families below onto process exit codes.
"""


class LungSoundError(Exception):
    exit_code = 1


class ConfigError(LungSoundError):
    exit_code = 2


class DataError(LungSoundError):
    exit_code = 3


class DivergenceDetected(LungSoundError):
    exit_code = 4


# ingest
class MalformedName(DataError):
    pass


class MalformedAnnotation(DataError):
    pass


class UnsupportedTask(ConfigError):
    pass


class UnknownDiagnosis(DataError):
    pass


class SplitFileMissing(ConfigError):
    pass


class InsufficientPatients(DataError):
    pass


# features / speccorr
class EmptyInput(DataError):
    pass


class SegmentTooShort(DataError):
    pass


class InvalidWarp(ConfigError):
    pass


class ShapeMismatch(LungSoundError):
    pass


class EmptyStack(DataError):
    pass


class EmptyDevice(DataError):
    pass


class MissingDeviceProfile(DataError):
    pass


# augment
class InvalidFactor(ConfigError):
    pass


# stochnorm / backbone
class BatchTooSmall(LungSoundError):
    pass


class WeightShapeMismatch(DataError):
    pass


class MissingWeights(DataError):
    pass


class HeadDimMismatch(ConfigError):
    pass


# cotuning
class EmptyValidation(DataError):
    pass


class DegenerateValidation(EmptyValidation):
    pass


class MissingClassSamples(DataError):
    pass


class SingularFit(LungSoundError):
    pass


# eval
class EmptyPredictions(LungSoundError):
    pass


class LengthMismatch(LungSoundError):
    pass


class CheckpointMismatch(DataError):
    pass
