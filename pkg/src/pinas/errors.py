"""Exception hierarchy shared by all pinas modules.

The CLI maps these onto exit codes: ConfigError -> 2, ContractError -> 3,
NumericError -> 4.
"""


class PinasError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(PinasError):
    """Bad configuration, malformed input file, or invalid argument."""


class IngestionError(ConfigError):
    """A data file could not be parsed (truncated, wrong record size, ...)."""


class ContractError(PinasError):
    """A call violated an API contract (state, shapes, preconditions)."""


class StateError(ContractError):
    """Operation invoked in the wrong order (e.g. backward before forward)."""


class GuardViolation(ContractError):
    """Attempted write to a frozen parameter."""


class NumericError(PinasError):
    """Non-finite values or numerical divergence."""


class CollapseError(NumericError):
    """Training reached a collapsed (constant-embedding) state.

    Raised by the trainer when the embedding spread drops below the
    configured threshold; callers running ablation sweeps record this as
    an outcome rather than a harness failure.
    """

    def __init__(self, step: int, metric: float, threshold: float):
        self.step = step
        self.metric = metric
        self.threshold = threshold
        super().__init__(
            f"embedding collapse at step {step}: spread {metric:.3g} "
            f"< threshold {threshold:.3g}"
        )
