"""Exception types shared across the package."""


class RelpruneError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(RelpruneError):
    """Tensor or graph shapes are inconsistent."""


class GraphError(RelpruneError):
    """Graph structure is invalid (cycles, duplicate ids, bad wiring)."""


class NonFiniteError(RelpruneError):
    """A NaN or Inf appeared in a computation.

    Carries the id of the layer (or the rule name) that produced it.
    """

    def __init__(self, message, where=None):
        super().__init__(message)
        self.where = where


class FormatError(RelpruneError):
    """A model or dataset file does not conform to its binary format."""


class ConfigError(RelpruneError):
    """User-supplied configuration is invalid (bad preset, bad flag, bad path)."""


class TrainingError(RelpruneError):
    """The built-in trainer missed its accuracy target within the epoch budget."""


class SearchError(RelpruneError):
    """Hyperparameter search could not proceed (no successful evaluations, or
    a kernel matrix stayed singular after jitter escalation)."""
