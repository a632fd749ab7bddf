"""Exception types raised across the package."""


class BcqlmError(Exception):
    pass


class ConfigSyntaxError(BcqlmError):
    pass


class ConfigValidationError(BcqlmError):
    def __init__(self, field, message=""):
        self.field = field
        super().__init__(f"{field}: {message}" if message else field)


class ArchiveFormatError(BcqlmError):
    pass


class ArchiveCorruptError(BcqlmError):
    pass


class ShapeError(BcqlmError, ValueError):
    pass


class GraphError(BcqlmError, ValueError):
    pass


class VocabError(BcqlmError, ValueError):
    pass


class ImageFormatError(BcqlmError, ValueError):
    pass


class MaskError(BcqlmError, ValueError):
    pass


class VariantError(BcqlmError, ValueError):
    pass


class TeacherLookupError(BcqlmError, KeyError):
    pass


class EmptyResponseError(BcqlmError, ValueError):
    pass


class MetricsError(BcqlmError, ValueError):
    pass


class DegenerateDataError(BcqlmError, ValueError):
    pass


class TrainingDivergedError(BcqlmError, RuntimeError):
    def __init__(self, stage, step, value):
        self.stage = stage
        self.step = step
        super().__init__(f"{stage}: non-finite loss {value!r} at step {step}")


class GradientCheckError(BcqlmError, AssertionError):
    def __init__(self, tensor, error, tolerance):
        self.tensor = tensor
        self.error = error
        super().__init__(f"{tensor}: relative error {error:.3e} exceeds {tolerance:.1e}")
