"""Exception types shared across the toolkit.

Every error raised by library code derives from ToolkitError so callers
(and the CLI exit-code mapping) can distinguish toolkit failures from bugs.
"""


class ToolkitError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(ToolkitError):
    """Invalid or inconsistent configuration (CLI exit code 2)."""


class DataError(ToolkitError):
    """Invalid data or on-disk artifact (CLI exit code 3)."""


class NumericError(ToolkitError):
    """Numeric failure such as divergence (CLI exit code 4)."""


# -- tensor / autodiff ----------------------------------------------------

class ShapeMismatch(DataError):
    def __init__(self, kind: str, shapes):
        self.kind = kind
        self.shapes = tuple(shapes)
        super().__init__(f"op '{kind}': incompatible shapes {self.shapes}")


class NonFinite(NumericError):
    def __init__(self, kind: str):
        self.kind = kind
        super().__init__(f"op '{kind}': output contains NaN/Inf")


class NotScalar(ToolkitError):
    def __init__(self, shape):
        super().__init__(f"backward requires a scalar loss, got shape {tuple(shape)}")


# -- model ----------------------------------------------------------------

class InputTooShort(DataError):
    def __init__(self, frames: int, minimum: int):
        self.frames = frames
        super().__init__(f"need at least {minimum} frames, got {frames}")


class DimMismatch(DataError):
    pass


class PrefixTooLong(DataError):
    pass


# -- objectives -----------------------------------------------------------

class EmptyTarget(DataError):
    pass


class TargetTooLongForFrames(DataError):
    def __init__(self, target_len: int, min_frames: int, frames: int):
        self.target_len = target_len
        self.min_frames = min_frames
        self.frames = frames
        super().__init__(
            f"target of length {target_len} needs >= {min_frames} frames, got {frames}"
        )


# -- adaptation -----------------------------------------------------------

class EmptyAdaptationSet(DataError):
    pass


class DivergedLoss(NumericError):
    def __init__(self, step: int, loss: float, initial: float):
        self.step = step
        self.loss = loss
        self.initial = initial
        super().__init__(
            f"adaptation diverged at step {step}: loss {loss:.6g} vs initial {initial:.6g}"
        )


# -- confidence -----------------------------------------------------------

class SingleClassDump(DataError):
    pass


class EmptyUtterance(DataError):
    pass


class NoConfidences(DataError):
    pass


# -- decoding / scoring ---------------------------------------------------

class EmptyReferenceSet(DataError):
    pass


# -- corpus / manifests ---------------------------------------------------

class SpecInvalid(ConfigError):
    pass


class MalformedLine(DataError):
    def __init__(self, lineno: int, reason: str):
        self.lineno = lineno
        super().__init__(f"line {lineno}: {reason}")


class MissingFeatureFile(DataError):
    def __init__(self, path):
        self.path = path
        super().__init__(f"feature file not found: {path}")
