"""Exception hierarchy.

Every error carries a short machine-readable ``code`` that the CLI prints as
the prefix of its single-line error message.
"""


class SdsInpaintError(Exception):
    code = "E_GENERIC"


class InvalidInputError(SdsInpaintError, ValueError):
    code = "E_INPUT"


class InvalidDepthError(InvalidInputError):
    code = "E_DEPTH"


class InvalidTimestepError(InvalidInputError):
    code = "E_TIMESTEP"


class EmptyMaskError(InvalidInputError):
    code = "E_EMPTY_MASK"


class DegenerateNormalError(SdsInpaintError, ArithmeticError):
    code = "E_DEGENERATE"


class PriorUnavailableError(SdsInpaintError):
    code = "E_PRIOR_UNAVAILABLE"


class ProtocolError(SdsInpaintError):
    code = "E_PROTOCOL"


class DatasetError(SdsInpaintError):
    code = "E_DATASET"


class CheckpointFormatError(SdsInpaintError):
    code = "E_CHECKPOINT"


class ConfigError(SdsInpaintError):
    code = "E_CONFIG"


class TrainingDivergedError(SdsInpaintError, FloatingPointError):
    code = "E_DIVERGED"
