"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are inconsistent with each other or with a contraction spec."""


class ContractionSpecError(ValueError):
    """A contraction spec string is malformed."""


class DegenerateSoftmaxError(ValueError):
    """A softmax slice is empty or fully masked, so no distribution exists."""


class ConfigError(ValueError):
    """A configuration value is out of range or internally inconsistent."""


class CacheError(ValueError):
    """A key/value cache is inconsistent with the weights or slices offered to it."""


class CacheCapacityError(CacheError):
    """A padded key/value cache has no free slot left."""


class NumericError(RuntimeError):
    """A non-finite value appeared where finite arithmetic was required."""


class TrainingError(RuntimeError):
    """Training diverged or could not proceed."""


class InputError(ValueError):
    """Model inputs are invalid, e.g. token ids outside the vocabulary."""
