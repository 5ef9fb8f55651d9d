"""Exception types shared across the package."""


class UmeError(Exception):
    """Base class for all package errors."""


class ShapeError(UmeError):
    """Incompatible tensor shapes passed to a primitive.

    Carries the primitive name so failures deep inside a model point at the
    offending operation, not just the numpy call site.
    """

    def __init__(self, primitive, message):
        self.primitive = primitive
        super().__init__(f"{primitive}: {message}")


class GraphError(UmeError):
    """Illegal use of the autodiff graph (non-scalar loss, double backward)."""


class OptimizerError(UmeError):
    """Optimizer invoked on parameters in an invalid state."""


class CheckpointError(UmeError):
    """Checkpoint file malformed or incompatible with the target model."""


class ConfigError(UmeError):
    """Invalid run configuration; ``path`` names the offending JSON field."""

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}")


class DataError(UmeError):
    """Dataset generation or manifest I/O failure."""


class CtcInfeasibleError(UmeError):
    """Target sequence cannot be aligned to the available frames."""


class ItemSkippedError(UmeError):
    """Training item unusable for the ASR loss under every permutation."""


class BatchError(UmeError):
    """Every item in a batch was skipped; the step cannot proceed."""


class DivergenceError(UmeError):
    """Training loss diverged; ``step`` is the step that tripped the guard."""

    def __init__(self, step, message):
        self.step = step
        super().__init__(f"diverged at step {step}: {message}")


class MetricsError(UmeError):
    """Metric undefined for the given inputs."""
