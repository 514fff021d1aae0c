"""Exception hierarchy shared across the package."""


class FgleakError(Exception):
    """Base class for all package-specific errors."""


class GraphFormatError(FgleakError):
    """A graph CSV file violates the expected schema.

    Carries the offending file and 1-based line number where known.
    """

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        loc = ""
        if path is not None:
            loc = f"{path}"
            if line is not None:
                loc += f":{line}"
            loc = f" ({loc})"
        super().__init__(message + loc)
        self.path = path
        self.line = line


class GraphGenerationError(FgleakError):
    """Invalid parameters for synthetic graph generation."""


class PartitionError(FgleakError):
    """Graph cannot be partitioned as requested."""


class ModelError(FgleakError):
    """Inconsistent model configuration or parameter shapes."""


class NumericError(FgleakError):
    """Non-finite values encountered during a forward/backward pass."""


class TrainingError(FgleakError):
    """A client or round cannot be trained (e.g. empty train mask)."""


class AggregationError(FgleakError):
    """Invalid inputs to federated model aggregation."""


class InferenceError(FgleakError):
    """Label-distribution inference failed for one client update."""


class DegenerateEmbeddingError(InferenceError):
    """Mean embedding sum is ~0; the model gives the attack nothing to scale by."""


class AllClampedError(InferenceError):
    """Every inferred count was negative; no distribution can be normalized."""


class MetricError(FgleakError):
    """Invalid input to a distribution metric."""


class DefenseError(FgleakError):
    """Defense configuration is incomplete or inconsistent."""


class ConfigError(FgleakError):
    """Experiment configuration is invalid; message names the offending field."""
